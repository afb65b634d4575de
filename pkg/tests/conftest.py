import json
from pathlib import Path

import numpy as np
import pytest

from neurodesk import rbm, synth
from neurodesk.data import SampleMatrix, preprocess


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_spec():
    return synth.SynthSpec(grid=(8, 8), R=2, widths=1.5, T=100, snr=10.0, seed=3)


@pytest.fixture
def tiny_truth(tiny_spec):
    return synth.generate(tiny_spec)


@pytest.fixture
def tiny_data(tiny_truth):
    """Preprocessed (unmasked) version of the tiny ground-truth data."""
    matrix, _ = preprocess(SampleMatrix(tiny_truth.X), mask=False)
    return matrix


@pytest.fixture
def small_params(rng):
    """A V=2, H=2 Gaussian RBM with nonzero everything."""
    return rbm.RbmParams(
        W=rng.normal(0.0, 0.5, size=(2, 2)),
        a=rng.normal(0.0, 0.3, size=2),
        b=rng.normal(0.0, 0.3, size=2),
    )


@pytest.fixture
def write_config(tmp_path):
    def _write(name: str, payload: dict) -> Path:
        path = tmp_path / f"{name}.json"
        path.write_text(json.dumps(payload), encoding="utf-8")
        return path
    return _write


CONFIG_DIR = Path(__file__).resolve().parent.parent / "configs"


@pytest.fixture
def shipped_config():
    """Raw JSON of a file under configs/, with the run seed threaded into the named sections."""
    def _load(name: str, *seeded: str) -> dict:
        data = json.loads((CONFIG_DIR / f"{name}.json").read_text(encoding="utf-8"))
        for key in seeded:
            data[key] = {"seed": data["seed"], **data.get(key, {})}
        return data
    return _load
