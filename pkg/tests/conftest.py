from __future__ import annotations

import hashlib
import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from calfuse.synth import SynthModel, SynthSpec, gen_dataset


SMALL_MODELS = [
    SynthModel("alpha", 2.6, 0.55, 1.3),
    SynthModel("bravo", 2.2, 1.0, 1.2),
    SynthModel("charlie", 1.9, 1.8, 1.1),
]


def small_spec(seed: int = 7, val: int = 4, test: int = 6) -> SynthSpec:
    return SynthSpec(
        height=48,
        width=48,
        seed=seed,
        images={"training": 1, "validation": val, "testing": test},
        models=list(SMALL_MODELS),
    )


@pytest.fixture(scope="session")
def small_dataset(tmp_path_factory):
    """A compact generated corpus shared by read-only tests."""
    root = tmp_path_factory.mktemp("smallset")
    manifest_path = gen_dataset(small_spec(), root)
    return manifest_path


def random_probmap(rng: np.random.Generator, h: int, w: int, classes: int) -> np.ndarray:
    """Valid random probability array: float64 simplex rounded to float32."""
    raw = rng.random((h, w, classes)) + 1e-3
    raw /= raw.sum(axis=2, keepdims=True)
    return raw.astype(np.float32)


def tree_digest(root: Path) -> dict[str, str]:
    out = {}
    for path in sorted(root.rglob("*")):
        if path.is_file():
            out[str(path.relative_to(root))] = hashlib.sha256(path.read_bytes()).hexdigest()
    return out
