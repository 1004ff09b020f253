"""Shared builders for the micro model used by the gradient and identity tests."""

from __future__ import annotations

import numpy as np

from pmlab.model import ModelConfig, init_model
from pmlab.numerics import finite_diff_grad

MICRO = dict(vocab_size=11, n_layers=2, d_model=8, d_ffn=16, n_heads=2, max_seq_len=16)
MICRO_PAIRS = [([1, 3, 4, 5], [6, 7]), ([1, 2], [9, 8, 3]), ([1, 10, 4], [5])]


def micro_model(seed: int = 3, jitter: float = 0.3):
    """2-layer, d=8, d_m=16, vocab=11 model with weights pushed away from init."""
    m = init_model(ModelConfig(seed=seed, **MICRO))
    rng = np.random.default_rng(seed + 100)
    for k in m.params:
        m.params[k] = m.params[k] + rng.normal(0.0, jitter, m.params[k].shape)
    return m


def rel_err(a, b) -> float:
    a, b = np.asarray(a), np.asarray(b)
    denom = max(np.linalg.norm(a), np.linalg.norm(b), 1e-12)
    return float(np.linalg.norm(a - b) / denom)


def fd_check(params: dict, name: str, loss) -> np.ndarray:
    """Central-difference gradient of ``loss()`` with respect to ``params[name]``."""
    def f(w):
        old = params[name]
        params[name] = w
        try:
            return loss()
        finally:
            params[name] = old
    return finite_diff_grad(f, params[name].copy(), 1e-5)
