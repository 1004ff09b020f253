"""Small dense-math helpers shared by the model, analysis and training code.

Everything works on float64 numpy arrays. Dimension mismatches raise instead
of broadcasting.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np


def _as_vector(v, name: str = "input") -> np.ndarray:
    arr = np.asarray(v, dtype=np.float64)
    if arr.ndim != 1:
        raise ValueError(f"{name} must be 1-D, got shape {arr.shape}")
    return arr


def softmax(v) -> np.ndarray:
    v = _as_vector(v)
    if v.size == 0:
        raise ValueError("empty input")
    if not np.all(np.isfinite(v)):
        raise ValueError("non-finite input")
    e = np.exp(v - v.max())
    return e / e.sum()


def log_softmax_rows(logits: np.ndarray) -> np.ndarray:
    """Stable log-softmax along the last axis (any leading shape)."""
    shifted = logits - logits.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def softmax_rows(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def cross_entropy(logits, target_index: int) -> float:
    logits = _as_vector(logits, "logits")
    if logits.size == 0:
        raise ValueError("empty input")
    if not 0 <= target_index < logits.size:
        raise IndexError(f"target index {target_index} out of range for dim {logits.size}")
    m = logits.max()
    lse = m + np.log(np.exp(logits - m).sum())
    return float(lse - logits[target_index])


def pearson_corr(x: Sequence[float], y: Sequence[float]) -> float:
    x = _as_vector(x, "x")
    y = _as_vector(y, "y")
    if x.size != y.size:
        raise ValueError(f"length mismatch: {x.size} vs {y.size}")
    if x.size < 2:
        raise ValueError("need at least two observations")
    xc = x - x.mean()
    yc = y - y.mean()
    sxx = float(xc @ xc)
    syy = float(yc @ yc)
    # relative threshold: a constant sequence leaves only rounding residue after centering
    if sxx <= 1e-28 * max(1.0, float(x @ x)) or syy <= 1e-28 * max(1.0, float(y @ y)):
        raise ValueError("zero variance")
    r = float(xc @ yc) / np.sqrt(sxx * syy)
    return float(min(1.0, max(-1.0, r)))


def perm_pvalue(x: Sequence[float], y: Sequence[float], n_perm: int, seed: int) -> float:
    """Two-sided permutation p-value for the Pearson correlation of x and y.

    Labels ``y`` are shuffled ``n_perm`` times with a seeded generator; the
    returned value is ``(1 + #{|r_perm| >= |r_obs|}) / (1 + n_perm)``.
    """
    if n_perm < 100:
        raise ValueError(f"n_perm must be >= 100, got {n_perm}")
    x = _as_vector(x, "x")
    y = _as_vector(y, "y")
    r_obs = abs(pearson_corr(x, y))
    rng = np.random.default_rng(seed)
    xc = x - x.mean()
    xn = xc / np.sqrt(xc @ xc)
    yc = y - y.mean()
    yn = yc / np.sqrt(yc @ yc)
    # one permutation per row; centering and norm of y are permutation-invariant
    perms = rng.permuted(np.tile(yn, (n_perm, 1)), axis=1)
    r_perm = np.abs(perms @ xn)
    # tolerance guards ties that differ only by summation order
    hits = int(np.count_nonzero(r_perm >= r_obs - 1e-12))
    return (1 + hits) / (1 + n_perm)


def finite_diff_grad(f: Callable[[np.ndarray], float], x, h: float = 1e-5) -> np.ndarray:
    if not h > 0:
        raise ValueError("step h must be positive")
    x = np.array(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = f(x)
        flat[i] = orig - h
        fm = f(x)
        flat[i] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise FloatingPointError(f"non-finite function value at coordinate {i}")
        gflat[i] = (fp - fm) / (2 * h)
    return grad
