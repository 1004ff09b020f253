"""Suppression plans, SNIP-style parameter masks and the lambda intervention sweep."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .model import FFN_WEIGHTS, ModelView, ToyTransformer, as_view, batch_sequence_nll, sequence_nll_grads

KINDS = ("FFN", "MHA", "Layer", "Parameter")
DEFAULT_LAMBDAS = (0.0, 0.25, 0.5, 0.75, 1.0, 1.25)


@dataclass(frozen=True)
class SuppressionPlan:
    kind: str
    layers: tuple[int, ...] = ()
    lam: float = 0.0
    param_mask: frozenset[tuple[str, int]] | None = None

    def __post_init__(self) -> None:
        if self.kind not in KINDS:
            raise ValueError(f"unknown suppression kind {self.kind!r}")
        if not np.isfinite(self.lam) or self.lam < 0:
            raise ValueError("lambda must be finite and >= 0")
        object.__setattr__(self, "layers", tuple(sorted(set(int(l) for l in self.layers))))
        if self.kind == "Parameter":
            if not self.param_mask:
                raise ValueError("Parameter plans need a non-empty param_mask")
            if self.layers:
                raise ValueError("Parameter plans take no layer list")
            object.__setattr__(self, "param_mask", frozenset(self.param_mask))
        elif self.param_mask is not None:
            raise ValueError(f"{self.kind} plans take no param_mask")

    def layer_scales(self, n_layers: int):
        attn, ffn, block = np.ones(n_layers), np.ones(n_layers), np.ones(n_layers)
        target = {"FFN": ffn, "MHA": attn, "Layer": block}.get(self.kind)
        for l in self.layers:
            if not 0 <= l < n_layers:
                raise IndexError(f"layer {l} out of range for {n_layers} layers")
            target[l] = self.lam
        return attn, ffn, block

    def weight_scales(self, params: dict[str, np.ndarray]) -> dict[str, np.ndarray]:
        if self.kind != "Parameter":
            return {}
        scales: dict[str, np.ndarray] = {}
        for name, idx in sorted(self.param_mask):
            if name not in params:
                raise KeyError(f"unknown parameter {name!r}")
            if name not in scales:
                scales[name] = np.ones(params[name].shape)
            flat = scales[name].reshape(-1)
            if not 0 <= idx < flat.size:
                raise IndexError(f"index {idx} out of range for {name}")
            flat[idx] = self.lam
        return scales

    def tag(self) -> str:
        if self.kind == "Parameter":
            return f"Parameter[k={len(self.param_mask)}]@{self.lam:g}"
        return f"{self.kind}[{','.join(map(str, self.layers))}]@{self.lam:g}"


def apply_plan(model, plan: SuppressionPlan) -> ModelView:
    """A read-only view of ``model`` that applies ``plan`` in every forward pass."""
    view = as_view(model)
    n = view.model.config.n_layers
    plan.layer_scales(n)  # validates layer indices
    plan.weight_scales(view.model.params)  # validates parameter names
    return ModelView(view.model, plan, view.adapter)


def ffn_param_names(layers: Iterable[int]) -> list[str]:
    return [f"layers.{l}.{w}" for l in sorted(layers) for w in FFN_WEIGHTS]


def ffn_param_count(model: ToyTransformer, layers: Iterable[int]) -> int:
    return sum(model.params[n].size for n in ffn_param_names(layers))


def snip_scores(model, sample: Sequence[tuple[Sequence[int], Sequence[int]]], layers: Iterable[int]) -> dict[str, np.ndarray]:
    """``|w * dL/dw|`` for the FFN weights of ``layers``; L is the mean sequence NLL."""
    if not sample:
        raise ValueError("empty sample")
    view = as_view(model)
    _, _, grads = sequence_nll_grads(view, list(sample))
    return {n: np.abs(view.model.params[n] * grads[n]) for n in ffn_param_names(layers)}


def top_k_mask(scores: dict[str, np.ndarray], top_k: int) -> frozenset[tuple[str, int]]:
    """Indices of the ``top_k`` largest scores; ties go to the smaller (name, index)."""
    if top_k < 1:
        raise ValueError("top_k must be >= 1")
    names = sorted(scores)
    vals = np.concatenate([scores[n].reshape(-1) for n in names])
    name_rank = np.concatenate([np.full(scores[n].size, i) for i, n in enumerate(names)])
    flat_idx = np.concatenate([np.arange(scores[n].size) for n in names])
    # lexsort: last key is primary
    order = np.lexsort((flat_idx, name_rank, -vals))[:top_k]
    return frozenset((names[name_rank[i]], int(flat_idx[i])) for i in order)


def snip_saliency(model, sample, top_k: int, layers: Iterable[int]) -> frozenset[tuple[str, int]]:
    return top_k_mask(snip_scores(model, sample, layers), top_k)


@dataclass
class InterventionResult:
    lambdas: list[float]
    nll_unfaithful: list[float]
    nll_faithful: list[float]
    layers: tuple[int, ...] = ()

    def rows(self) -> list[dict]:
        return [{"lambda": l, "nll_unfaithful": u, "nll_faithful": f}
                for l, u, f in zip(self.lambdas, self.nll_unfaithful, self.nll_faithful)]

    def write_csv(self, path, header: str | None = None) -> None:
        write_csv(path, ["lambda", "nll_unfaithful", "nll_faithful"], self.rows(), header)


def write_csv(path, columns: Sequence[str], rows: Sequence[dict], header: str | None = None) -> None:
    """CSV with an optional leading ``# ...`` provenance comment line."""
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        if header:
            fh.write(f"# {header}\n")
        w = csv.DictWriter(fh, fieldnames=list(columns), lineterminator="\n")
        w.writeheader()
        for row in rows:
            w.writerow({k: _fmt(row[k]) for k in columns})


def _fmt(v):
    if isinstance(v, float):
        return repr(v)
    return v


def mean_nll(model, pairs, plan=None) -> float:
    return float(np.mean(batch_sequence_nll(model, pairs, plan)))


def intervention_sweep(model, d_minus: Sequence[tuple], d_plus: Sequence[tuple], layers: Iterable[int],
                       lambdas: Sequence[float] = DEFAULT_LAMBDAS) -> InterventionResult:
    """Mean NLL of recorded answers on each subset while FFN outputs of ``layers`` are scaled.

    ``d_minus`` / ``d_plus`` are (prompt, answer) token pairs: the parametric
    answer for unfaithful instances, the contextual answer for faithful ones.
    """
    if not d_minus or not d_plus:
        raise ValueError("both subsets must be non-empty")
    if not lambdas:
        raise ValueError("empty lambda list")
    layers = tuple(sorted(set(layers)))
    res = InterventionResult([], [], [], layers)
    for lam in lambdas:
        plan = SuppressionPlan("FFN", layers, float(lam))
        res.lambdas.append(float(lam))
        res.nll_unfaithful.append(mean_nll(model, d_minus, plan))
        res.nll_faithful.append(mean_nll(model, d_plus, plan))
    return res
