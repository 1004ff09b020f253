"""Activation-ratio statistics and selection of unfaithfulness-associated FFN layers."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .model import forward_batch, as_view, pad_batch
from .numerics import pearson_corr, perm_pvalue

log = logging.getLogger(__name__)

STRATEGIES = ("ua_gap", "bottom", "middle", "random")
STATS_COLUMNS = ("layer", "mean_unfaithful", "mean_faithful", "gap", "pcc", "p_value")


@dataclass
class LayerStats:
    layer: int
    mean_ratio_unfaithful: float
    mean_ratio_faithful: float
    gap: float
    pcc: float | None = None  # None when the correlation is undefined
    p_value: float | None = None

    def row(self) -> dict:
        return {
            "layer": self.layer,
            "mean_unfaithful": self.mean_ratio_unfaithful,
            "mean_faithful": self.mean_ratio_faithful,
            "gap": self.gap,
            "pcc": "undefined" if self.pcc is None else self.pcc,
            "p_value": "undefined" if self.p_value is None else self.p_value,
        }


@dataclass
class SelectionResult:
    strategy: str
    n: int
    layers: list[int]
    seed: int | None = None
    warnings: list[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {"strategy": self.strategy, "n": self.n, "layers": self.layers, "seed": self.seed,
                "warnings": self.warnings}


def position_ratio(coefficients) -> float:
    a = np.asarray(coefficients, dtype=np.float64)
    if a.size == 0:
        raise ValueError("empty coefficient vector")
    return float(np.count_nonzero(a > 0)) / a.size


def response_ratio(trace, layer: int, span: range) -> float:
    """Mean per-position activation ratio of ``layer`` over the positions in ``span``."""
    if len(span) == 0:
        raise ValueError("empty response span")
    if span.start < 0 or span.stop > trace.n_positions:
        raise IndexError("response span outside traced positions")
    coeffs = trace.coefficients[layer]
    return float(np.mean([position_ratio(coeffs[i]) for i in span]))


def response_ratios_batch(model, pairs: Sequence[tuple[Sequence[int], Sequence[int]]], pad_id: int = 0,
                          batch: int = 64) -> np.ndarray:
    """Per-instance, per-layer response ratios, shape ``(n_instances, n_layers)``.

    Each pair is (prompt, response); the response span is the positions that
    hold response tokens in ``prompt + response``.
    """
    view = as_view(model)
    out = []
    for start in range(0, len(pairs), batch):
        chunk = pairs[start : start + batch]
        seqs = [list(p) + list(r) for p, r in chunk]
        toks = pad_batch(seqs, pad_id)
        _, coeffs, _ = forward_batch(view, toks, trace=True)
        ratios = np.stack([(c > 0).mean(axis=-1) for c in coeffs], axis=-1)  # (B, T, L)
        for b, (p, r) in enumerate(chunk):
            if len(r) == 0:
                raise ValueError("empty response span")
            out.append(ratios[b, len(p) : len(p) + len(r)].mean(axis=0))
    return np.asarray(out)


def activation_gap(unfaithful: Sequence[Sequence[float]], faithful: Sequence[Sequence[float]]) -> list[LayerStats]:
    """Per-layer mean ratio on the unfaithful set minus the faithful set.

    Both inputs are indexed ``[layer][sample]``.
    """
    if len(unfaithful) != len(faithful):
        raise ValueError("layer counts differ")
    stats = []
    for l, (u, f) in enumerate(zip(unfaithful, faithful)):
        if len(u) == 0 or len(f) == 0:
            raise ValueError(f"empty subset at layer {l}")
        mu, mf = float(np.mean(u)), float(np.mean(f))
        stats.append(LayerStats(l, mu, mf, mu - mf))
    return stats


def layer_pcc(ratios: np.ndarray, labels: Sequence[int], n_perm: int = 1000, seed: int = 0) -> list[tuple[float | None, float | None]]:
    """Correlation of each layer's ratio with the unfaithfulness indicator ``1 - y_f``."""
    ratios = np.asarray(ratios, dtype=np.float64)
    y = 1.0 - np.asarray(labels, dtype=np.float64)
    if ratios.shape[0] < 2:
        raise ValueError("need at least two instances")
    if len(set(y.tolist())) < 2:
        raise ValueError("undefined correlation: single-class labels")
    out = []
    for l in range(ratios.shape[1]):
        try:
            r = pearson_corr(ratios[:, l], y)
            p = perm_pvalue(ratios[:, l], y, n_perm, seed + l)
        except ValueError:
            # a layer whose ratio is constant over the dataset has no correlation
            r = p = None
        out.append((r, p))
    return out


def analyze(ratios: np.ndarray, labels: Sequence[int], n_perm: int = 1000, seed: int = 0) -> list[LayerStats]:
    labels = np.asarray(labels)
    unf = ratios[labels == 0]
    fai = ratios[labels == 1]
    stats = activation_gap(unf.T.tolist(), fai.T.tolist())
    for s, (r, p) in zip(stats, layer_pcc(ratios, labels, n_perm, seed)):
        s.pcc, s.p_value = r, p
    return stats


def select_layers(stats: Sequence[LayerStats] | Sequence[float], n: int, strategy: str = "ua_gap",
                  seed: int = 0, n_layers: int | None = None) -> SelectionResult:
    """Pick ``n`` layers to suppress.

    ``stats`` may be LayerStats or raw per-layer gaps. Ties in ``ua_gap`` go to
    the lower layer index.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    if strategy not in STRATEGIES:
        raise ValueError(f"unknown strategy {strategy!r}")
    gaps = [s.gap if isinstance(s, LayerStats) else float(s) for s in stats]
    L = n_layers if n_layers is not None else len(gaps)
    warnings = []
    k = n
    if n > L:
        k = L
        warnings.append(f"requested {n} layers but model has {L}; clamped")
    if strategy == "ua_gap":
        layers = sorted(range(L), key=lambda l: (-gaps[l], l))[:k]
    elif strategy == "bottom":
        layers = list(range(k))
    elif strategy == "middle":
        # window of k layers centred on L // 2, leaning low when k is even
        start = L // 2 - k // 2
        start = min(max(start, 0), L - k)
        layers = list(range(start, start + k))
    else:
        rng = np.random.default_rng(seed)
        layers = sorted(int(x) for x in rng.choice(L, size=k, replace=False))
    return SelectionResult(strategy, n, layers, seed if strategy == "random" else None, warnings)
