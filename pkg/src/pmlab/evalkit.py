"""Faithfulness metrics: context/memory recall, token-F1 similarity, perplexity pairs."""

from __future__ import annotations

import json
import math
from collections import Counter
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .dataqa import QAInstance, contains_tokens, normalize_answer
from .model import batch_sequence_nll, greedy_batch
from .vocab import Vocab, answer_ids, closed_book_prompt, context_prompt

CSV_COLUMNS = ("model_tag", "plan_tag", "conr", "memr", "mr", "sim_parametric", "sim_contextual",
               "ppl_ctx", "ppl_noctx", "n")


@dataclass
class RecallScores:
    conr: float
    memr: float
    mr: float | None  # None when ConR + MemR == 0

    @property
    def mr_defined(self) -> bool:
        return self.mr is not None


def memorization_ratio(conr: float, memr: float) -> float | None:
    total = conr + memr
    return memr / total if total > 0 else None


def recall_flags(response: str, instance: QAInstance) -> tuple[bool, bool]:
    """(counts toward ConR, counts toward MemR); never both."""
    ctx = contains_tokens(response, instance.y_star)
    mem = (not ctx) and contains_tokens(response, instance.r_hat)
    return ctx, mem


def conr_memr(responses: Sequence[str], instances: Sequence[QAInstance]) -> RecallScores:
    if len(responses) != len(instances):
        raise ValueError("responses and instances differ in length")
    if not instances:
        raise ValueError("empty dataset")
    n_ctx = n_mem = 0
    for resp, inst in zip(responses, instances):
        c, m = recall_flags(resp, inst)
        n_ctx += c
        n_mem += m
    conr = 100.0 * n_ctx / len(instances)
    memr = 100.0 * n_mem / len(instances)
    return RecallScores(conr, memr, memorization_ratio(conr, memr))


def token_f1(a: str, b: str) -> float:
    ta, tb = normalize_answer(a).split(), normalize_answer(b).split()
    if not ta or not tb:
        return 0.0
    common = sum((Counter(ta) & Counter(tb)).values())
    if common == 0:
        return 0.0
    precision = common / len(ta)
    recall = common / len(tb)
    return 2 * precision * recall / (precision + recall)


def _ppl_pairs(vocab: Vocab, instances: Sequence[QAInstance]):
    ctx = [(context_prompt(vocab, x.question, x.context), answer_ids(vocab, x.y_star)) for x in instances]
    closed = [(closed_book_prompt(vocab, x.question), answer_ids(vocab, x.y_star)) for x in instances]
    return ctx, closed


def ppl_pair(view, vocab: Vocab, instance: QAInstance) -> tuple[float, float]:
    """Perplexity of the contextual answer with and without the context."""
    ctx, closed = _ppl_pairs(vocab, [instance])
    nll = batch_sequence_nll(view, ctx + closed)
    return math.exp(nll[0]), math.exp(nll[1])


@dataclass
class EvalReport:
    conr: float
    memr: float
    mr: float | None
    n_instances: int
    sim_to_parametric: float
    sim_to_contextual: float
    ppl_with_context: float
    ppl_without_context: float
    buckets: dict[int, dict] = field(default_factory=dict)
    responses: list[str] = field(default_factory=list)
    model_tag: str = ""
    plan_tag: str = ""

    @property
    def mr_defined(self) -> bool:
        return self.mr is not None

    def csv_row(self) -> dict:
        return {
            "model_tag": self.model_tag, "plan_tag": self.plan_tag,
            "conr": self.conr, "memr": self.memr, "mr": "undefined" if self.mr is None else self.mr,
            "sim_parametric": self.sim_to_parametric, "sim_contextual": self.sim_to_contextual,
            "ppl_ctx": self.ppl_with_context, "ppl_noctx": self.ppl_without_context, "n": self.n_instances,
        }

    def to_json(self, extra: dict | None = None) -> str:
        body = asdict(self)
        body["mr_defined"] = self.mr_defined
        body["buckets"] = {str(k): v for k, v in self.buckets.items()}
        if extra:
            body = {**extra, **body}
        return json.dumps(body, indent=2)

    def write_json(self, path, extra: dict | None = None) -> None:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        Path(path).write_text(self.to_json(extra) + "\n", encoding="utf-8")


def evaluate(view, vocab: Vocab, instances: Sequence[QAInstance], max_new: int = 16,
             model_tag: str = "", plan_tag: str = "") -> EvalReport:
    """Greedy answers with context, then recall, similarity and perplexity aggregates."""
    if not instances:
        raise ValueError("empty evaluation subset")
    prompts = [context_prompt(vocab, x.question, x.context) for x in instances]
    outs = greedy_batch(view, prompts, max_new, vocab.eos_id)
    responses = [vocab.decode(o) for o in outs]
    scores = conr_memr(responses, instances)
    ctx, closed = _ppl_pairs(vocab, instances)
    nll_ctx = batch_sequence_nll(view, ctx)
    nll_closed = batch_sequence_nll(view, closed)

    buckets: dict[int, dict] = {}
    for freq in sorted({x.r_hat_freq for x in instances}):
        idx = [i for i, x in enumerate(instances) if x.r_hat_freq == freq]
        sub = conr_memr([responses[i] for i in idx], [instances[i] for i in idx])
        buckets[freq] = {"n": len(idx), "conr": sub.conr, "memr": sub.memr, "mr": sub.mr}

    return EvalReport(
        conr=scores.conr,
        memr=scores.memr,
        mr=scores.mr,
        n_instances=len(instances),
        sim_to_parametric=float(np.mean([token_f1(r, x.r_hat) for r, x in zip(responses, instances)])),
        sim_to_contextual=float(np.mean([token_f1(r, x.y_star) for r, x in zip(responses, instances)])),
        # corpus-level perplexity: exp of the mean per-instance token NLL
        ppl_with_context=float(np.exp(nll_ctx.mean())),
        ppl_without_context=float(np.exp(nll_closed.mean())),
        buckets=buckets,
        responses=responses,
        model_tag=model_tag,
        plan_tag=plan_tag,
    )
