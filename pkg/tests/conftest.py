"""Shared test helpers: independent oracles and small fixtures."""

import numpy as np
import pytest

from pqat.autodiff import RngStream


def nearest_level_oracle(x: np.ndarray, alpha32: float, bit: int, signed: bool) -> np.ndarray:
    """Exhaustive nearest-level search over the explicit level grid.

    Distances are measured in float64 against levels k * delta; ties (exact
    equality) resolve to the level farther from zero. Independent of the
    rounding-formula implementation it checks.
    """
    if signed:
        half = 2 ** (bit - 1) - 1
        idx = np.arange(-half, half + 1, dtype=np.float64)
        delta = np.float64(np.float32(np.float32(alpha32) / np.float32(half)))
    else:
        hi = 2**bit - 1
        idx = np.arange(0, hi + 1, dtype=np.float64)
        delta = np.float64(np.float32(np.float32(alpha32) / np.float32(hi)))
    levels = idx * delta
    d = np.abs(np.asarray(x, dtype=np.float64).reshape(-1)[:, None] - levels[None, :])
    dmin = d.min(axis=1, keepdims=True)
    ties = d == dmin
    pick = np.where(ties, np.abs(levels)[None, :], -np.inf).argmax(axis=1)
    return (idx[pick] * delta).astype(np.float32).reshape(np.asarray(x).shape)


def minmax_level_oracle(x: np.ndarray, bit: int) -> np.ndarray:
    """Nearest level over a min/max-spanned grid, ties toward the larger index."""
    lo = np.float64(np.asarray(x).min())
    hi = np.float64(np.asarray(x).max())
    n_lv = 2**bit
    delta = (hi - lo) / (n_lv - 1)
    levels = lo + np.arange(n_lv, dtype=np.float64) * delta
    d = np.abs(np.asarray(x, dtype=np.float64).reshape(-1)[:, None] - levels[None, :])
    dmin = d.min(axis=1, keepdims=True)
    ties = d == dmin
    # mirror of round-half-away on the index scale: prefer the larger index
    pick = np.where(ties, np.arange(n_lv)[None, :], -1).max(axis=1)
    return levels[pick].astype(np.float32).reshape(np.asarray(x).shape)


@pytest.fixture
def rng():
    return RngStream(1234, 0)


@pytest.fixture(scope="session")
def blobs_small():
    from pqat.data import make_gaussian_blobs

    return make_gaussian_blobs(n=1200, classes=3, dim=16, seed=0)


@pytest.fixture(scope="session")
def mlp_spec():
    from pqat.models import NetworkSpec

    return NetworkSpec(kind="mlp", in_dim=16, hidden=[32, 16], classes=3, batch_norm=False)
