"""
neurodesk entry point.

    python app.py synth --config configs/synth.json
    python app.py train-rbm --config configs/train_rbm.json --set rbm.epochs=20
"""

import sys

from neurodesk.cli import main

if __name__ == "__main__":
    sys.exit(main())
