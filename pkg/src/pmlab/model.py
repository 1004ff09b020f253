"""Toy decoder-only transformer with key-value FFN memories and manual backprop.

Each block is pre-norm (RMS, scale only)::

    a   = Attn(norm1(x))
    h   = x + s_attn * a
    f   = s_ffn * (relu(norm2(h) @ K.T) @ V)
    out = x + s_block * (s_attn * a + f)

``K`` and ``V`` are the ``(d_ffn, d_model)`` key and value matrices of the
FFN; ``relu(K x)`` are the activation coefficients. The scalars
``s_attn``/``s_ffn``/``s_block`` are 1.0 unless a suppression plan says
otherwise, so a plan of all ones is bit-identical to no plan at all.

Plans and adapters are duck-typed: a plan provides ``layer_scales(n_layers)``
and ``weight_scales(params)``; an adapter provides ``deltas()`` and
``backprop(weight_grads)``.
"""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Any, Sequence

import numpy as np

from .numerics import log_softmax_rows, softmax_rows

log = logging.getLogger(__name__)

RMS_EPS = 1e-6
INIT_STD = 0.02

ATTN_WEIGHTS = ("wq", "wk", "wv", "wo")
FFN_WEIGHTS = ("ffn_k", "ffn_v")


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int
    n_layers: int = 8
    d_model: int = 64
    d_ffn: int = 256
    n_heads: int = 4
    max_seq_len: int = 64
    seed: int = 0

    def validate(self) -> None:
        for name in ("vocab_size", "n_layers", "d_model", "d_ffn", "n_heads", "max_seq_len"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.d_model % self.n_heads:
            raise ValueError(f"d_model={self.d_model} not divisible by n_heads={self.n_heads}")
        if self.d_ffn < self.d_model:
            raise ValueError("d_ffn must be >= d_model")

    @property
    def d_head(self) -> int:
        return self.d_model // self.n_heads


def param_shapes(config: ModelConfig) -> dict[str, tuple[int, ...]]:
    d, m = config.d_model, config.d_ffn
    shapes: dict[str, tuple[int, ...]] = {
        "tok_emb": (config.vocab_size, d),
        "pos_emb": (config.max_seq_len, d),
    }
    for l in range(config.n_layers):
        p = f"layers.{l}."
        shapes[p + "attn_norm"] = (d,)
        for w in ATTN_WEIGHTS:
            shapes[p + w] = (d, d)
        shapes[p + "ffn_norm"] = (d,)
        shapes[p + "ffn_k"] = (m, d)
        shapes[p + "ffn_v"] = (m, d)
    shapes["final_norm"] = (d,)
    return shapes


@dataclass
class ToyTransformer:
    config: ModelConfig
    params: dict[str, np.ndarray]

    def layer_param(self, layer: int, name: str) -> np.ndarray:
        if not 0 <= layer < self.config.n_layers:
            raise IndexError(f"layer {layer} out of range")
        return self.params[f"layers.{layer}.{name}"]

    def copy(self) -> "ToyTransformer":
        return ToyTransformer(self.config, {k: v.copy() for k, v in self.params.items()})

    def n_params(self) -> int:
        return sum(v.size for v in self.params.values())


@dataclass
class ModelView:
    """A model seen through an optional suppression plan and adapter."""

    model: ToyTransformer
    plan: Any = None
    adapter: Any = None


def as_view(obj, plan=None) -> ModelView:
    if isinstance(obj, ModelView):
        if plan is not None:
            if obj.plan is not None:
                raise ValueError("view already carries a plan")
            return ModelView(obj.model, plan, obj.adapter)
        return obj
    if isinstance(obj, ToyTransformer):
        return ModelView(obj, plan, None)
    raise TypeError(f"expected ToyTransformer or ModelView, got {type(obj).__name__}")


@dataclass
class ActivationTrace:
    """FFN activation coefficients per layer, shape ``(T, d_ffn)`` each.

    ``ratios[l][i]`` is the fraction of strictly positive coefficients at
    position ``i`` of layer ``l``.
    """

    coefficients: list[np.ndarray]
    ratios: list[np.ndarray] = field(init=False)

    def __post_init__(self) -> None:
        self.ratios = [(a > 0).mean(axis=-1) for a in self.coefficients]

    @property
    def n_layers(self) -> int:
        return len(self.coefficients)

    @property
    def n_positions(self) -> int:
        return self.coefficients[0].shape[-2]


def init_model(config: ModelConfig) -> ToyTransformer:
    config.validate()
    rng = np.random.default_rng(config.seed)
    resid_std = INIT_STD / np.sqrt(2 * config.n_layers)
    params: dict[str, np.ndarray] = {}
    for name, shape in param_shapes(config).items():
        leaf = name.rsplit(".", 1)[-1]
        if leaf.endswith("norm"):
            params[name] = np.ones(shape)
        elif leaf in ("wo", "ffn_v"):
            params[name] = rng.normal(0.0, resid_std, shape)
        else:
            params[name] = rng.normal(0.0, INIT_STD, shape)
    return ToyTransformer(config, params)


# --------------------------------------------------------------------------
# FFN as a key-value memory


def _check_vec(x, d: int) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.shape != (d,):
        raise ValueError(f"expected vector of dim {d}, got shape {x.shape}")
    return x


def ffn_forward(x, layer: int, model: ToyTransformer, lam: float = 1.0) -> np.ndarray:
    """``(lam * relu(K x))^T V`` for one already-normalized input vector."""
    x = _check_vec(x, model.config.d_model)
    if lam < 0:
        raise ValueError("lambda must be >= 0")
    K = model.layer_param(layer, "ffn_k")
    V = model.layer_param(layer, "ffn_v")
    return lam * (np.maximum(K @ x, 0.0) @ V)


def ffn_decompose(x, layer: int, model: ToyTransformer) -> tuple[np.ndarray, np.ndarray]:
    """Coefficients ``a_j = relu(x . k_j)`` and the explicit sum ``sum_j a_j v_j``."""
    x = _check_vec(x, model.config.d_model)
    K = model.layer_param(layer, "ffn_k")
    V = model.layer_param(layer, "ffn_v")
    coeffs = np.array([max(float(np.dot(k_j, x)), 0.0) for k_j in K])
    recon = np.zeros(model.config.d_model)
    for a_j, v_j in zip(coeffs, V):
        if a_j > 0:
            recon += a_j * v_j
    return coeffs, recon


# --------------------------------------------------------------------------
# batched core


def _rmsnorm(x: np.ndarray, g: np.ndarray):
    r = 1.0 / np.sqrt((x * x).mean(axis=-1, keepdims=True) + RMS_EPS)
    return x * r * g, r


def _rmsnorm_back(dy: np.ndarray, x: np.ndarray, r: np.ndarray, g: np.ndarray):
    u = dy * g
    d = x.shape[-1]
    dx = r * u - x * (r ** 3) * (u * x).sum(axis=-1, keepdims=True) / d
    dg = (dy * x * r).sum(axis=0)
    return dx, dg


def effective_params(view: ModelView) -> dict[str, np.ndarray]:
    params = view.model.params
    if view.plan is None and view.adapter is None:
        return params
    eff = dict(params)
    if view.plan is not None:
        for name, scale in view.plan.weight_scales(params).items():
            eff[name] = params[name] * scale
    if view.adapter is not None:
        for name, delta in view.adapter.deltas().items():
            eff[name] = eff[name] + delta
    return eff


def _layer_scales(view: ModelView):
    n = view.model.config.n_layers
    if view.plan is None:
        ones = np.ones(n)
        return ones, ones, ones
    return view.plan.layer_scales(n)


def _check_tokens(config: ModelConfig, tokens: np.ndarray) -> None:
    if tokens.ndim != 2:
        raise ValueError("token batch must be 2-D")
    if tokens.shape[1] == 0:
        raise ValueError("empty token sequence")
    if tokens.shape[1] > config.max_seq_len:
        raise ValueError(f"sequence length {tokens.shape[1]} exceeds max_seq_len {config.max_seq_len}")
    if tokens.min() < 0 or tokens.max() >= config.vocab_size:
        raise ValueError("token id out of range")


def forward_batch(view: ModelView, tokens: np.ndarray, trace: bool = False, cache: bool = False):
    """Logits ``(B, T, vocab)`` for a right-padded batch.

    Returns ``(logits, coeffs, state)``: ``coeffs`` is a per-layer list of
    ``(B, T, d_ffn)`` effective coefficients when ``trace`` is set, ``state``
    holds what :func:`backward_batch` needs when ``cache`` is set.
    """
    cfg = view.model.config
    tokens = np.asarray(tokens, dtype=np.int64)
    _check_tokens(cfg, tokens)
    P = effective_params(view)
    s_attn, s_ffn, s_block = _layer_scales(view)
    B, T = tokens.shape
    H, dh, d = cfg.n_heads, cfg.d_head, cfg.d_model
    mask = np.triu(np.ones((T, T), dtype=bool), k=1)
    inv = 1.0 / np.sqrt(dh)

    # activations are kept flat as (B*T, d) so every projection is a single 2-D matmul
    x = (P["tok_emb"][tokens] + P["pos_emb"][:T]).reshape(B * T, d)
    coeffs = [] if trace else None
    layers = []
    for l in range(cfg.n_layers):
        p = f"layers.{l}."
        n1, r1 = _rmsnorm(x, P[p + "attn_norm"])
        q = (n1 @ P[p + "wq"].T).reshape(B, T, H, dh).transpose(0, 2, 1, 3)
        k = (n1 @ P[p + "wk"].T).reshape(B, T, H, dh).transpose(0, 2, 1, 3)
        v = (n1 @ P[p + "wv"].T).reshape(B, T, H, dh).transpose(0, 2, 1, 3)
        scores = (q @ k.transpose(0, 1, 3, 2)) * inv
        scores[..., mask] = -np.inf
        probs = softmax_rows(scores)
        o = (probs @ v).transpose(0, 2, 1, 3).reshape(B * T, d)
        a = s_attn[l] * (o @ P[p + "wo"].T)
        h = x + a
        n2, r2 = _rmsnorm(h, P[p + "ffn_norm"])
        pre = n2 @ P[p + "ffn_k"].T
        act = np.maximum(pre, 0.0)
        f = s_ffn[l] * (act @ P[p + "ffn_v"])
        if trace:
            coeffs.append((s_ffn[l] * act).reshape(B, T, -1))
        if cache:
            layers.append((x, n1, r1, q, k, v, probs, o, h, n2, r2, pre, act))
        x = x + s_block[l] * (a + f)
    nf, rf = _rmsnorm(x, P["final_norm"])
    logits = (nf @ P["tok_emb"].T).reshape(B, T, -1)
    state = None
    if cache:
        state = {"tokens": tokens, "P": P, "layers": layers, "x": x, "nf": nf, "rf": rf,
                 "scales": (s_attn, s_ffn, s_block)}
    return logits, coeffs, state


def backward_batch(view: ModelView, state: dict, dlogits: np.ndarray) -> dict[str, np.ndarray]:
    """Gradients with respect to the *effective* weights used in the forward."""
    cfg = view.model.config
    P = state["P"]
    s_attn, s_ffn, s_block = state["scales"]
    tokens = state["tokens"]
    B, T = tokens.shape
    H, dh, d = cfg.n_heads, cfg.d_head, cfg.d_model
    inv = 1.0 / np.sqrt(dh)
    g: dict[str, np.ndarray] = {}

    dl2 = dlogits.reshape(B * T, -1)
    g["tok_emb"] = dl2.T @ state["nf"]
    dnf = dl2 @ P["tok_emb"]
    dx, g["final_norm"] = _rmsnorm_back(dnf, state["x"], state["rf"], P["final_norm"])

    for l in reversed(range(cfg.n_layers)):
        p = f"layers.{l}."
        x, n1, r1, q, k, v, probs, o, h, n2, r2, pre, act = state["layers"][l]
        d_delta = s_block[l] * dx
        # ffn branch
        dav = s_ffn[l] * d_delta
        g[p + "ffn_v"] = act.T @ dav
        dpre = (dav @ P[p + "ffn_v"].T) * (pre > 0)
        g[p + "ffn_k"] = dpre.T @ n2
        dn2 = dpre @ P[p + "ffn_k"]
        dh_, g[p + "ffn_norm"] = _rmsnorm_back(dn2, h, r2, P[p + "ffn_norm"])
        # h = x + a, and a also feeds the block delta directly
        da = d_delta + dh_
        dx = dx + dh_
        dwo_out = s_attn[l] * da
        g[p + "wo"] = dwo_out.T @ o
        do = (dwo_out @ P[p + "wo"]).reshape(B, T, H, dh).transpose(0, 2, 1, 3)
        dprobs = do @ v.transpose(0, 1, 3, 2)
        dv = probs.transpose(0, 1, 3, 2) @ do
        dscores = probs * (dprobs - (dprobs * probs).sum(axis=-1, keepdims=True)) * inv
        dq = dscores @ k
        dk = dscores.transpose(0, 1, 3, 2) @ q
        dn1 = None
        for name, dt in (("wq", dq), ("wk", dk), ("wv", dv)):
            dflat = dt.transpose(0, 2, 1, 3).reshape(B * T, d)
            g[p + name] = dflat.T @ n1
            term = dflat @ P[p + name]
            dn1 = term if dn1 is None else dn1 + term
        dx1, g[p + "attn_norm"] = _rmsnorm_back(dn1, x, r1, P[p + "attn_norm"])
        dx = dx + dx1

    dx = dx.reshape(B, T, d)
    g["pos_emb"] = np.zeros_like(P["pos_emb"])
    g["pos_emb"][:T] = dx.sum(axis=0)
    np.add.at(g["tok_emb"], tokens.reshape(-1), dx.reshape(B * T, d))
    return g


def base_param_grads(view: ModelView, eff_grads: dict[str, np.ndarray]) -> dict[str, np.ndarray]:
    """Chain effective-weight gradients back to the base parameters."""
    if view.plan is None:
        return eff_grads
    out = dict(eff_grads)
    for name, scale in view.plan.weight_scales(view.model.params).items():
        out[name] = eff_grads[name] * scale
    return out


# --------------------------------------------------------------------------
# sequence-level API


def forward(model, tokens: Sequence[int], plan=None, trace: bool = False):
    """Per-position logits ``(T, vocab)`` and optionally an :class:`ActivationTrace`."""
    view = as_view(model, plan)
    toks = np.asarray(tokens, dtype=np.int64)[None, :]
    logits, coeffs, _ = forward_batch(view, toks, trace=trace)
    tr = ActivationTrace([c[0] for c in coeffs]) if trace else None
    return logits[0], tr


def pad_batch(seqs: Sequence[Sequence[int]], pad_id: int = 0) -> np.ndarray:
    T = max(len(s) for s in seqs)
    out = np.full((len(seqs), T), pad_id, dtype=np.int64)
    for i, s in enumerate(seqs):
        out[i, : len(s)] = s
    return out


def target_weights(pairs: Sequence[tuple[Sequence[int], Sequence[int]]], T: int) -> tuple[np.ndarray, np.ndarray]:
    """Next-token targets and per-position 1/len(target) weights for (prompt, target) pairs."""
    tgt = np.zeros((len(pairs), T), dtype=np.int64)
    w = np.zeros((len(pairs), T))
    for b, (prompt, target) in enumerate(pairs):
        if len(target) == 0:
            raise ValueError("empty target")
        if len(prompt) == 0:
            raise ValueError("empty prompt")
        start = len(prompt) - 1
        tgt[b, start : start + len(target)] = target
        w[b, start : start + len(target)] = 1.0 / len(target)
    return tgt, w


def batch_sequence_nll(model, pairs, plan=None, cache: bool = False):
    """Mean target-token NLL for each (prompt, target) pair under teacher forcing."""
    view = as_view(model, plan)
    seqs = [list(p) + list(t) for p, t in pairs]
    toks = pad_batch([s[:-1] for s in seqs])
    tgt, w = target_weights(pairs, toks.shape[1])
    logits, _, state = forward_batch(view, toks, cache=cache)
    logp = log_softmax_rows(logits)
    tok_nll = -np.take_along_axis(logp, tgt[..., None], axis=-1)[..., 0]
    nll = (tok_nll * w).sum(axis=1)
    if cache:
        return nll, (state, logits, tgt, w)
    return nll


def nll_logit_grad(logits: np.ndarray, tgt: np.ndarray, w: np.ndarray) -> np.ndarray:
    """d(sum_b,t w[b,t] * nll[b,t]) / dlogits."""
    probs = softmax_rows(logits)
    probs *= w[..., None]
    B, T = tgt.shape
    probs[np.arange(B)[:, None], np.arange(T)[None, :], tgt] -= w
    return probs


def sequence_nll(model, prompt: Sequence[int], target: Sequence[int], plan=None) -> float:
    if len(target) == 0:
        raise ValueError("empty target")
    return float(batch_sequence_nll(model, [(prompt, target)], plan)[0])


def sequence_nll_grads(model, pairs, coefs=None, plan=None):
    """Loss ``sum_b coefs[b] * nll_b`` and its gradients w.r.t. effective weights."""
    view = as_view(model, plan)
    nll, (state, logits, tgt, w) = batch_sequence_nll(view, pairs, cache=True)
    coefs = np.full(len(pairs), 1.0 / len(pairs)) if coefs is None else np.asarray(coefs, dtype=np.float64)
    dlogits = nll_logit_grad(logits, tgt, w * coefs[:, None])
    grads = backward_batch(view, state, dlogits)
    return float(coefs @ nll), nll, grads


def sample(model, prompt: Sequence[int], max_new: int, temperature: float = 0.0, seed: int = 0,
           plan=None, eos_id: int | None = None) -> list[int]:
    """Autoregressive continuation of ``prompt`` (not including it)."""
    if temperature < 0:
        raise ValueError("temperature must be >= 0")
    view = as_view(model, plan)
    rng = np.random.default_rng(seed)
    seq = list(prompt)
    out: list[int] = []
    for _ in range(max_new):
        if len(seq) >= view.model.config.max_seq_len:
            break
        logits, _, _ = forward_batch(view, np.asarray(seq, dtype=np.int64)[None, :])
        last = logits[0, -1]
        if temperature == 0:
            nxt = int(np.argmax(last))  # first maximum, i.e. lowest id on ties
        else:
            z = last / temperature
            p = np.exp(z - z.max())
            p /= p.sum()
            nxt = int(rng.choice(p.size, p=p))
        if eos_id is not None and nxt == eos_id:
            break
        out.append(nxt)
        seq.append(nxt)
    return out


def greedy_batch(model, prompts: Sequence[Sequence[int]], max_new: int, eos_id: int, plan=None) -> list[list[int]]:
    """Greedy decoding for many prompts at once; same result as ``sample`` at temperature 0."""
    view = as_view(model, plan)
    seqs = [list(p) for p in prompts]
    outs: list[list[int]] = [[] for _ in prompts]
    live = list(range(len(prompts)))
    for _ in range(max_new):
        live = [i for i in live if len(seqs[i]) < view.model.config.max_seq_len]
        if not live:
            break
        # group by length so no padding sits between prompt and continuation
        by_len: dict[int, list[int]] = {}
        for i in live:
            by_len.setdefault(len(seqs[i]), []).append(i)
        still = []
        for L, idx in sorted(by_len.items()):
            toks = np.asarray([seqs[i] for i in idx], dtype=np.int64)
            logits, _, _ = forward_batch(view, toks)
            nxt = np.argmax(logits[:, -1], axis=-1)
            for i, t in zip(idx, nxt):
                t = int(t)
                if t == eos_id:
                    continue
                outs[i].append(t)
                seqs[i].append(t)
                still.append(i)
        live = sorted(still)
    return outs


# --------------------------------------------------------------------------
# training


class Adam:
    def __init__(self, params: dict[str, np.ndarray], lr: float, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> None:
        self.t += 1
        c1 = 1 - self.beta1 ** self.t
        c2 = 1 - self.beta2 ** self.t
        for k in params:  # fixed key order keeps updates reproducible
            gk = grads[k]
            self.m[k] = self.beta1 * self.m[k] + (1 - self.beta1) * gk
            self.v[k] = self.beta2 * self.v[k] + (1 - self.beta2) * gk * gk
            params[k] -= self.lr * (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)


def lm_loss_and_grads(model: ToyTransformer, batch: Sequence[Sequence[int]], pad_id: int = 0):
    """Mean next-token NLL over all non-pad targets of a batch, with gradients."""
    view = as_view(model)
    toks = pad_batch([s[:-1] for s in batch], pad_id)
    tgt = pad_batch([s[1:] for s in batch], pad_id)
    w = np.zeros(toks.shape)
    for b, s in enumerate(batch):
        w[b, : len(s) - 1] = 1.0
    w /= w.sum()
    logits, _, state = forward_batch(view, toks, cache=True)
    logp = log_softmax_rows(logits)
    loss = float(-(np.take_along_axis(logp, tgt[..., None], axis=-1)[..., 0] * w).sum())
    grads = backward_batch(view, state, nll_logit_grad(logits, tgt, w))
    return loss, grads


@dataclass
class TrainLog:
    losses: list[float] = field(default_factory=list)

    def as_rows(self) -> list[dict]:
        return [{"step": i, "loss": l} for i, l in enumerate(self.losses)]


def _bucketed_batches(rng: np.random.Generator, lengths: np.ndarray, batch: int, pool: int = 8) -> list[np.ndarray]:
    """One epoch of batches; each pool of ``pool`` batches is length-sorted to cut padding."""
    perm = rng.permutation(lengths.size)
    out = []
    for start in range(0, perm.size, batch * pool):
        chunk = perm[start : start + batch * pool]
        chunk = chunk[np.argsort(lengths[chunk], kind="stable")]
        out.extend(chunk[i : i + batch] for i in range(0, chunk.size, batch))
    return [out[i] for i in rng.permutation(len(out))]


def lr_at(step: int, steps: int, lr: float, warmup: int) -> float:
    """Linear warmup to ``lr`` then cosine decay to a tenth of it."""
    if warmup and step < warmup:
        return lr * (step + 1) / warmup
    frac = (step - warmup) / max(steps - warmup, 1)
    return lr * (0.1 + 0.45 * (1 + math.cos(math.pi * min(frac, 1.0))))


def clip_grads(grads: dict[str, np.ndarray], max_norm: float) -> float:
    norm = math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
    if max_norm > 0 and norm > max_norm:
        for k in grads:
            grads[k] *= max_norm / norm
    return norm


def train_lm(model: ToyTransformer, corpus: Sequence[Sequence[int]], steps: int, lr: float,
             batch: int, seed: int, pad_id: int = 0, log_every: int = 0, warmup: int = 100,
             clip: float = 1.0) -> TrainLog:
    """Memorization pretraining with Adam on mean token NLL. Mutates ``model``."""
    if not corpus:
        raise ValueError("empty corpus")
    for s in corpus:
        if len(s) < 2:
            raise ValueError("corpus sequences need at least two tokens")
    rng = np.random.default_rng(seed)
    opt = Adam(model.params, lr)
    trail = TrainLog()
    lengths = np.array([len(s) for s in corpus])
    queue: list[np.ndarray] = []
    for step in range(steps):
        if not queue:
            queue = _bucketed_batches(rng, lengths, batch)
        idx = queue.pop()
        loss, grads = lm_loss_and_grads(model, [corpus[i] for i in idx], pad_id)
        if not np.isfinite(loss):
            raise FloatingPointError(f"non-finite loss at step {step}; batch indices {idx.tolist()}")
        clip_grads(grads, clip)
        opt.lr = lr_at(step, steps, lr, warmup)
        opt.step(model.params, grads)
        trail.losses.append(loss)
        if log_every and step % log_every == 0:
            log.info("pretrain step %d loss %.4f", step, loss)
    return trail


def config_dict(config: ModelConfig) -> dict:
    return asdict(config)
