import os
import sys

import numpy as np
import pytest

sys.path.insert(0, os.path.dirname(os.path.abspath(__file__)))

from melt.model import MeltConfig


@pytest.fixture
def tiny_config():
    return MeltConfig(n_layers=1, d_model=8, ff_dim=16, n_heads=2, dropout=0.0, max_seq=4)


@pytest.fixture
def small_config():
    return MeltConfig(n_layers=2, d_model=32, ff_dim=64, n_heads=4, dropout=0.1, max_seq=40)


def numeric_grad(f, x: np.ndarray, h: float = 1e-3) -> np.ndarray:
    """Central finite differences of a scalar function, elementwise over x."""
    grad = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    while not it.finished:
        idx = it.multi_index
        old = x[idx]
        x[idx] = old + h
        fp = f()
        x[idx] = old - h
        fm = f()
        x[idx] = old
        grad[idx] = (fp - fm) / (2.0 * h)
        it.iternext()
    return grad


def max_rel_err(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """Elementwise |a - n| / max(1, |a|, |n|), reduced to the worst case."""
    denom = np.maximum(1.0, np.maximum(np.abs(analytic), np.abs(numeric)))
    return float((np.abs(analytic - numeric) / denom).max())
