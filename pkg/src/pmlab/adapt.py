"""Low-rank adaptation of a suppressed model with the KAT + KPO objective.

KAT is the answer NLL given context and question. KPO is a hinge that asks the
context-conditioned log-likelihood to beat the closed-book one by a margin
``gamma``, where the margin grows linearly over training. Log-likelihoods are
token means so the margin does not depend on answer length.
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from .checkpoint import read_container, write_container
from .model import (ATTN_WEIGHTS, FFN_WEIGHTS, Adam, ModelView, ToyTransformer, as_view, backward_batch,
                    batch_sequence_nll, nll_logit_grad)
from .vocab import Vocab, answer_ids, closed_book_prompt, context_prompt

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class AdaptConfig:
    alpha: float = 0.5
    beta: float = 0.5
    gamma_start: float = 1.0
    gamma_end: float = 5.0
    rank: int = 4
    lr: float = 5e-3
    steps: int = 600
    batch: int = 16
    seed: int = 0
    init_std: float = 0.1

    def validate(self) -> None:
        if self.alpha < 0 or self.beta < 0 or (self.alpha == 0 and self.beta == 0):
            raise ValueError("alpha and beta must be >= 0 and not both zero")
        if not self.gamma_end >= self.gamma_start >= 0:
            raise ValueError("need gamma_end >= gamma_start >= 0")
        if self.rank < 1:
            raise ValueError("rank must be >= 1")
        if self.batch < 1 or self.steps < 0:
            raise ValueError("batch must be >= 1 and steps >= 0")


class Adapter:
    """Low-rank factors ``A (rows x r)`` and ``B (r x cols)`` per target matrix.

    The effective weight is ``W + A @ B``; ``B`` starts at zero so a fresh
    adapter changes nothing.
    """

    def __init__(self, factors: dict[str, tuple[np.ndarray, np.ndarray]]):
        self.factors = factors

    @classmethod
    def init(cls, model: ToyTransformer, targets: Sequence[str], rank: int, seed: int, init_std: float = 0.1) -> "Adapter":
        rng = np.random.default_rng(seed)
        factors = {}
        for name in targets:
            rows, cols = model.params[name].shape
            factors[name] = (rng.normal(0.0, init_std, (rows, rank)), np.zeros((rank, cols)))
        return cls(factors)

    @property
    def targets(self) -> list[str]:
        return list(self.factors)

    def deltas(self) -> dict[str, np.ndarray]:
        return {name: A @ B for name, (A, B) in self.factors.items()}

    def flat_params(self) -> dict[str, np.ndarray]:
        out = {}
        for name, (A, B) in self.factors.items():
            out[name + ".A"] = A
            out[name + ".B"] = B
        return out

    def backprop(self, weight_grads: dict[str, np.ndarray]) -> dict[str, np.ndarray]:
        """Factor gradients from gradients of the effective weights."""
        out = {}
        for name, (A, B) in self.factors.items():
            gW = weight_grads[name]
            out[name + ".A"] = gW @ B.T
            out[name + ".B"] = A.T @ gW
        return out

    def save(self, path, metadata: dict | None = None) -> None:
        write_container(path, "adapter", {"targets": self.targets}, self.flat_params(), metadata or {})

    @classmethod
    def load(cls, path) -> "Adapter":
        manifest, params = read_container(path, expect_kind="adapter")
        factors = {}
        for name in manifest["config"]["targets"]:
            factors[name] = (params[name + ".A"], params[name + ".B"])
        return cls(factors)


def adapter_targets(model: ToyTransformer, plan=None) -> list[str]:
    """Attention and FFN matrices, minus those the plan scales directly."""
    excluded: set[str] = set()
    if plan is not None:
        layers = getattr(plan, "layers", ())
        kind = getattr(plan, "kind", None)
        for l in layers:
            if kind in ("FFN", "Layer"):
                excluded.update(f"layers.{l}.{w}" for w in FFN_WEIGHTS)
            if kind in ("MHA", "Layer"):
                excluded.update(f"layers.{l}.{w}" for w in ATTN_WEIGHTS)
        if kind == "Parameter":
            excluded.update(name for name, _ in plan.param_mask)
    names = []
    for l in range(model.config.n_layers):
        for w in ATTN_WEIGHTS + FFN_WEIGHTS:
            name = f"layers.{l}.{w}"
            if name not in excluded:
                names.append(name)
    return names


def adapted_view(model, plan=None, adapter: Adapter | None = None) -> ModelView:
    view = as_view(model)
    return ModelView(view.model, plan if plan is not None else view.plan, adapter)


def merge_adapter(model: ToyTransformer, adapter: Adapter) -> ToyTransformer:
    merged = model.copy()
    for name, delta in adapter.deltas().items():
        if name not in merged.params:
            raise KeyError(f"adapter targets unknown parameter {name!r}")
        if merged.params[name].shape != delta.shape:
            raise ValueError(f"shape mismatch for {name}: {merged.params[name].shape} vs {delta.shape}")
        merged.params[name] = merged.params[name] + delta
    return merged


# --------------------------------------------------------------------------
# losses


def gamma_at(step: int, total_steps: int, config: AdaptConfig) -> float:
    if total_steps < 1:
        raise ValueError("total_steps must be >= 1")
    if not 0 <= step <= total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps}]")
    return config.gamma_start + (config.gamma_end - config.gamma_start) * (step / total_steps)


def kpo_from_scores(logp_ctx: float, logp_closed: float, gamma: float) -> float:
    return max(0.0, gamma - logp_ctx + logp_closed)


def _pairs(vocab: Vocab, question: str, context: str, y_star: str):
    target = answer_ids(vocab, y_star)
    return (context_prompt(vocab, question, context), target), (closed_book_prompt(vocab, question), target)


def kat_loss(view, vocab: Vocab, question: str, context: str, y_star: str) -> float:
    ctx, _ = _pairs(vocab, question, context, y_star)
    return float(batch_sequence_nll(view, [ctx])[0])


def kpo_loss(view, vocab: Vocab, question: str, context: str, y_star: str, gamma: float) -> float:
    ctx, closed = _pairs(vocab, question, context, y_star)
    nll = batch_sequence_nll(view, [ctx, closed])
    return kpo_from_scores(-nll[0], -nll[1], gamma)


def combined_loss(view, vocab: Vocab, instance, config: AdaptConfig, step: int, total: int) -> float:
    gamma = gamma_at(step, total, config)
    kat = kat_loss(view, vocab, instance.question, instance.context, instance.y_star)
    kpo = kpo_loss(view, vocab, instance.question, instance.context, instance.y_star, gamma)
    return config.alpha * kat + config.beta * kpo


def batch_objective(view: ModelView, vocab: Vocab, instances, config: AdaptConfig, gamma: float,
                    with_grads: bool = True):
    """Mean combined loss over ``instances`` and, optionally, effective-weight gradients.

    Returns ``(combined, kat, kpo, grads)`` with the three losses as batch means.
    """
    ctx_pairs, closed_pairs = zip(*(_pairs(vocab, x.question, x.context, x.y_star) for x in instances))
    n = len(instances)
    if not with_grads:
        nll_ctx = batch_sequence_nll(view, ctx_pairs)
        nll_cb = batch_sequence_nll(view, closed_pairs)
        kpo = np.maximum(0.0, gamma + nll_ctx - nll_cb)
        kat = nll_ctx
        return float(np.mean(config.alpha * kat + config.beta * kpo)), float(kat.mean()), float(kpo.mean()), None
    # hinge activity is known only after both forwards, so backprop from the caches afterwards
    nll_ctx, (st_c, lg_c, tg_c, w_c) = batch_sequence_nll(view, ctx_pairs, cache=True)
    nll_cb, (st_b, lg_b, tg_b, w_b) = batch_sequence_nll(view, closed_pairs, cache=True)
    margin = gamma + nll_ctx - nll_cb
    active = (margin > 0).astype(np.float64)
    kpo = np.maximum(0.0, margin)
    coef_ctx = (config.alpha + config.beta * active) / n
    coef_cb = -config.beta * active / n
    grads = backward_batch(view, st_c, nll_logit_grad(lg_c, tg_c, w_c * coef_ctx[:, None]))
    if active.any():
        g_cb = backward_batch(view, st_b, nll_logit_grad(lg_b, tg_b, w_b * coef_cb[:, None]))
        grads = {k: grads[k] + g_cb[k] for k in grads}
    combined = float(np.mean(config.alpha * nll_ctx + config.beta * kpo))
    return combined, float(nll_ctx.mean()), float(kpo.mean()), grads


@dataclass
class AdaptLog:
    rows: list[dict] = field(default_factory=list)
    initial_loss: float = float("nan")
    final_loss: float = float("nan")


def train_adapter(base_model: ToyTransformer, plan, dataset, vocab: Vocab, config: AdaptConfig,
                  log_every: int = 0) -> tuple[Adapter, AdaptLog]:
    """Train adapter factors on ``dataset`` while ``plan`` stays applied.

    Only the factors are updated. ``initial_loss`` is the full-dataset
    objective before training at the starting margin, ``final_loss`` the same
    after training at the final margin.
    """
    config.validate()
    if not dataset:
        raise ValueError("empty training set")
    adapter = Adapter.init(base_model, adapter_targets(base_model, plan), config.rank, config.seed, config.init_std)
    view = ModelView(base_model, plan, adapter)
    total = max(config.steps, 1)
    trail = AdaptLog()
    trail.initial_loss = batch_objective(view, vocab, dataset, config, gamma_at(0, total, config), False)[0]
    params = adapter.flat_params()
    opt = Adam(params, config.lr)
    rng = np.random.default_rng(config.seed)
    order = np.array([], dtype=np.int64)
    for step in range(config.steps):
        if order.size < config.batch:
            order = np.concatenate([order, rng.permutation(len(dataset))])
        idx, order = order[: config.batch], order[config.batch :]
        gamma = gamma_at(step, total, config)
        combined, kat, kpo, grads = batch_objective(view, vocab, [dataset[i] for i in idx], config, gamma)
        if not np.isfinite(combined):
            raise FloatingPointError(f"non-finite adapter loss at step {step}; batch {idx.tolist()}")
        if params:
            opt.step(params, adapter.backprop(grads))
        trail.rows.append({"step": step, "kat_loss": kat, "kpo_loss": kpo, "gamma": gamma, "combined": combined})
        if log_every and step % log_every == 0:
            log.info("adapt step %d combined %.4f kat %.4f kpo %.4f gamma %.2f", step, combined, kat, kpo, gamma)
    trail.final_loss = batch_objective(view, vocab, dataset, config, gamma_at(total, total, config), False)[0]
    return adapter, trail


def adapt_config_dict(config: AdaptConfig) -> dict:
    return asdict(config)
