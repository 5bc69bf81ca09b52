import numpy as np
import pytest

from fcakit.encoder import EncoderConfig, EncoderModel
from fcakit.tensor import Tape


def tiny_config(**kw) -> EncoderConfig:
    base = dict(num_layers=2, num_heads=2, d_hidden=8, d_ff=16, vocab_size=20, max_len=8,
                num_classes=3)
    base.update(kw)
    return EncoderConfig(**base)


def random_ids(rng, batch: int, n: int, vocab: int, pad_tail: bool = True) -> np.ndarray:
    """CLS-first ids; some rows padded at the tail."""
    ids = rng.integers(4, vocab, size=(batch, n))
    ids[:, 0] = 0
    if pad_tail:
        for b in range(batch):
            cut = int(rng.integers(2, n + 1))
            ids[b, cut:] = 2
    return ids


def rel_error(a: np.ndarray, b: np.ndarray) -> float:
    """Norm-based relative error, the usual gradient-check measure."""
    a, b = np.ravel(a), np.ravel(b)
    denom = np.linalg.norm(a) + np.linalg.norm(b)
    return float(np.linalg.norm(a - b) / denom) if denom > 0 else 0.0


def numeric_grad(f, arr: np.ndarray, h: float = 1e-5, max_entries: int | None = None,
                 rng=None) -> tuple[np.ndarray, np.ndarray]:
    """Central differences of scalar ``f()`` w.r.t. ``arr`` (perturbed in place).

    Returns (flat indices checked, derivative estimates).
    """
    flat = arr.reshape(-1)
    idx = np.arange(flat.size)
    if max_entries is not None and flat.size > max_entries:
        idx = (rng or np.random.default_rng(0)).choice(flat.size, max_entries, replace=False)
    out = np.empty(len(idx))
    for j, i in enumerate(idx):
        old = flat[i]
        flat[i] = old + h
        up = f()
        flat[i] = old - h
        down = f()
        flat[i] = old
        out[j] = (up - down) / (2 * h)
    return idx, out


def check_gradients(loss_fn, params: dict, max_entries: int | None = 40, h: float = 1e-5):
    """Analytic vs finite-difference gradients for every tensor in ``params``.

    ``loss_fn()`` must build a scalar Tensor from the current parameter values.
    Returns {name: relative error}.
    """
    for p in params.values():
        p.grad = None
    with Tape() as tape:
        loss = loss_fn()
    tape.backward(loss)
    errors = {}
    for name, p in params.items():
        analytic = np.zeros_like(p.data) if p.grad is None else p.grad.copy()
        idx, num = numeric_grad(lambda: loss_fn().item(), p.data, h, max_entries)
        errors[name] = rel_error(analytic.reshape(-1)[idx], num)
    return errors


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_model():
    return EncoderModel.init(tiny_config(), seed=3, std=0.5)
