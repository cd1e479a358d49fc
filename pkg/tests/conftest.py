import sys

import numpy as np
import pytest

from dbfusion import tensor as T
from dbfusion.lm import LMConfig
from dbfusion.tensor import Tensor, no_grad
from dbfusion.vision import EncoderConfig

H = 1e-5


def numeric_grad(fn, arr: np.ndarray, coords) -> np.ndarray:
    """Central differences of the scalar ``fn()`` w.r.t. ``arr`` entries at flat ``coords``."""
    flat = arr.reshape(-1)
    out = np.empty(len(coords))
    with no_grad():
        for n, i in enumerate(coords):
            old = flat[i]
            flat[i] = old + H
            up = fn().item()
            flat[i] = old - H
            down = fn().item()
            flat[i] = old
            out[n] = (up - down) / (2 * H)
    return out


def grad_rel_error(fn, leaves, rng=None, max_coords: int = 40) -> float:
    """Largest relative error between backward() and finite differences over ``leaves``.

    Relative error is ``|a - n| / max(|a|, |n|)`` in the 2-norm over the checked
    coordinates of each leaf; leaves with more than ``max_coords`` entries are subsampled.
    """
    rng = rng or np.random.default_rng(0)
    for leaf in leaves:
        leaf.grad = None
    loss = fn()
    loss.backward()
    worst = 0.0
    for leaf in leaves:
        size = leaf.data.size
        coords = np.arange(size) if size <= max_coords else rng.choice(size, max_coords, replace=False)
        analytic = (leaf.grad if leaf.grad is not None else np.zeros_like(leaf.data)).reshape(-1)[coords]
        num = numeric_grad(fn, leaf.data, coords)
        scale = max(np.linalg.norm(analytic), np.linalg.norm(num))
        if scale < 1e-9:
            continue
        worst = max(worst, np.linalg.norm(analytic - num) / scale)
    return worst


def project_scalar(out: Tensor, rng) -> Tensor:
    """Contract an output with fixed random weights so every entry reaches the loss."""
    w = Tensor(rng.standard_normal(out.shape))
    return T.tsum(out * w)


@pytest.fixture
def tiny_enc() -> EncoderConfig:
    return EncoderConfig(image_size=16, patch=8, d_backbone=8, D=8, encoder_layers=1, heads=2)


@pytest.fixture
def tiny_lm() -> LMConfig:
    return LMConfig(d_model=16, layers=1, heads=2, vocab=259 + 5, max_seq=160)


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    lines = getattr(mod, "RESULTS", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
