"""
neurodesk: sparse RBM / DBN feature learning and divide-and-concur embedding for
(simulated) brain-imaging matrices, with the evaluation harness around them.
"""

__version__ = "0.1.0"
