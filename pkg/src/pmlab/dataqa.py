"""Synthetic fact base, memorization corpus and the knowledge-conflict benchmark.

The pipeline mirrors self-consistency elicitation: ask the trained model each
closed-book question ``n`` times, keep the majority answer when it is frequent
enough, pair it with a context paragraph (optionally asserting a different
entity) and label whether the parametric answer agrees with the context.
"""

from __future__ import annotations

import hashlib
import json
import math
import re
import string
from collections import Counter
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .model import sample
from .vocab import Vocab, closed_book_prompt

RELATIONS = ("capital", "color", "mentor", "rival", "home", "founder", "sister", "weapon")

_ONSETS = "b d f g k l m n p r s t v z".split()
_VOWELS = "a e i o u".split()
_CODAS = ["", "n", "r", "s", "l", "x"]

ARTICLES = {"a", "an", "the"}
_PUNCT = re.compile(f"[{re.escape(string.punctuation)}]")

JSONL_KEYS = ("id", "question", "context", "contextual_answer", "parametric_answer", "parametric_freq", "faithful")


def derive_seed(seed: int, *names) -> int:
    """Stable 63-bit sub-seed from a global seed and a path of names."""
    key = ":".join([str(seed), *map(str, names)]).encode()
    return int.from_bytes(hashlib.sha256(key).digest()[:8], "little") >> 1


@dataclass(frozen=True)
class Fact:
    subject: str
    relation: str
    object: str


@dataclass
class QAInstance:
    id: int
    question: str
    context: str
    y_star: str
    r_hat: str
    r_hat_freq: int
    y_f: int
    fact_index: int = -1
    counterfactual: bool = False

    def to_json(self) -> str:
        row = {
            "id": self.id,
            "question": self.question,
            "context": self.context,
            "contextual_answer": self.y_star,
            "parametric_answer": self.r_hat,
            "parametric_freq": self.r_hat_freq,
            "faithful": self.y_f,
        }
        return json.dumps(row, ensure_ascii=False)

    @classmethod
    def from_json(cls, line: str) -> "QAInstance":
        row = json.loads(line)
        if tuple(row) != JSONL_KEYS:
            raise ValueError(f"unexpected benchmark keys {tuple(row)}")
        if row["faithful"] not in (0, 1):
            raise ValueError("faithful must be 0 or 1")
        return cls(row["id"], row["question"], row["context"], row["contextual_answer"],
                   row["parametric_answer"], row["parametric_freq"], row["faithful"])


@dataclass
class Benchmark:
    instances: list[QAInstance]
    seed: int
    stage_counts: dict[str, int]
    test_ids: list[int] = field(default_factory=list)

    @property
    def faithful(self) -> list[QAInstance]:
        return [x for x in self.instances if x.y_f == 1]

    @property
    def unfaithful(self) -> list[QAInstance]:
        return [x for x in self.instances if x.y_f == 0]

    def split(self, name: str) -> list[QAInstance]:
        test = set(self.test_ids)
        if name == "test":
            return [x for x in self.instances if x.id in test]
        if name == "train":
            return [x for x in self.instances if x.id not in test]
        if name == "all":
            return list(self.instances)
        raise ValueError(f"unknown split {name!r}")

    def split_sizes(self) -> dict[str, int]:
        n_test = len(self.test_ids)
        return {"train": len(self.instances) - n_test, "test": n_test}

    def frequency_buckets(self) -> dict[int, dict[str, int]]:
        buckets: dict[int, dict[str, int]] = {}
        for x in self.instances:
            b = buckets.setdefault(x.r_hat_freq, {"faithful": 0, "unfaithful": 0})
            b["faithful" if x.y_f else "unfaithful"] += 1
        return dict(sorted(buckets.items()))

    def write_jsonl(self, path) -> None:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            for x in self.instances:
                fh.write(x.to_json() + "\n")


def read_jsonl(path) -> list[QAInstance]:
    with open(path, encoding="utf-8") as fh:
        return [QAInstance.from_json(line) for line in fh if line.strip()]


# --------------------------------------------------------------------------
# fact base and corpus


def _entity_names(n: int, rng: np.random.Generator) -> list[str]:
    names: list[str] = []
    seen = set(ARTICLES)
    while len(names) < n:
        syll = rng.integers(2, 4)
        name = "".join(rng.choice(_ONSETS) + rng.choice(_VOWELS) for _ in range(syll)) + rng.choice(_CODAS)
        if name not in seen:
            seen.add(name)
            names.append(str(name))
    return names


def gen_factbase(n_facts: int, n_entities: int, seed: int, relations: Sequence[str] = RELATIONS) -> list[Fact]:
    if n_facts < 1:
        raise ValueError("n_facts must be >= 1")
    if n_entities < 2:
        raise ValueError("n_entities must be >= 2")
    if n_facts > n_entities * len(relations):
        raise ValueError(
            f"cannot make {n_facts} unique (subject, relation) pairs from "
            f"{n_entities} entities and {len(relations)} relations")
    rng = np.random.default_rng(seed)
    entities = _entity_names(n_entities, rng)
    slots = rng.choice(n_entities * len(relations), size=n_facts, replace=False)
    facts = []
    for s in slots:
        subj, rel = divmod(int(s), len(relations))
        obj = int(rng.integers(n_entities - 1))
        obj += obj >= subj  # an entity is never its own object
        facts.append(Fact(entities[subj], relations[rel], entities[obj]))
    return facts


def fact_vocab(facts: Sequence[Fact]) -> Vocab:
    words: list[str] = list(RELATIONS)
    for f in facts:
        words.extend([f.relation, f.subject, f.object])
    return Vocab.build(words)


def question_text(fact: Fact) -> str:
    return f"{fact.relation} of {fact.subject} ?"


def context_text(subject: str, relation: str, obj: str) -> str:
    return f"{subject} 's {relation} is {obj} ."


def render_fact(fact: Fact) -> list[str]:
    """Surface forms of one fact; the last is the closed-book QA form."""
    s, r, o = fact.subject, fact.relation, fact.object
    return [
        context_text(s, r, o),
        f"the {r} of {s} is {o} .",
        f"{s} has {r} {o} .",
        f"Q: {question_text(fact)} A: {o}",
    ]


def build_corpus(facts: Sequence[Fact], vocab: Vocab, distractors: bool = True, reading_per_fact: int = 1,
                 seed: int = 0) -> list[list[int]]:
    """Token sequences for memorization pretraining.

    Besides the surface forms of every fact, two kinds of ``context:`` documents
    are added per fact. Distractor documents put a statement about a different
    fact before the question, so the answer must come from memory. Reading
    documents ask about a (subject, relation) slot that is not in the fact
    base and state its answer in the context, so the answer must be copied.
    """
    if not facts:
        raise ValueError("empty fact base")
    seqs = []
    n = len(facts)
    for i, fact in enumerate(facts):
        for text in render_fact(fact):
            seqs.append([vocab.bos_id] + vocab.encode(text) + [vocab.eos_id])
        if distractors and n > 1:
            other = facts[(i + 1 + (i * 7) % (n - 1)) % n]
            ctx = context_text(other.subject, other.relation, other.object)
            text = f"context: {ctx} Q: {question_text(fact)} A: {fact.object}"
            seqs.append([vocab.bos_id] + vocab.encode(text) + [vocab.eos_id])
    if reading_per_fact > 0:
        seqs.extend(_reading_docs(facts, vocab, reading_per_fact * n, seed))
    return seqs


def free_slots(facts: Sequence[Fact]) -> list[tuple[str, str]]:
    """(subject, relation) pairs over the fact base's entities that hold no fact."""
    entities = sorted({f.subject for f in facts} | {f.object for f in facts})
    relations = sorted({f.relation for f in facts})
    known = {(f.subject, f.relation) for f in facts}
    return [(s, r) for s in entities for r in relations if (s, r) not in known]


def _reading_docs(facts: Sequence[Fact], vocab: Vocab, count: int, seed: int) -> list[list[int]]:
    rng = np.random.default_rng(derive_seed(seed, "reading"))
    entities = sorted({f.subject for f in facts} | {f.object for f in facts})
    free = free_slots(facts)
    if not free or len(entities) < 2:
        return []
    picks = rng.choice(len(free), size=min(count, len(free)), replace=False)
    docs = []
    for j in sorted(int(p) for p in picks):
        s, r = free[j]
        o = entities[int(rng.integers(len(entities)))]
        if o == s:
            o = entities[(entities.index(s) + 1) % len(entities)]
        text = f"context: {context_text(s, r, o)} Q: {r} of {s} ? A: {o}"
        docs.append([vocab.bos_id] + vocab.encode(text) + [vocab.eos_id])
    return docs


# --------------------------------------------------------------------------
# answers


def normalize_answer(s: str) -> str:
    s = _PUNCT.sub(" ", s.lower())
    return " ".join(w for w in s.split() if w not in ARTICLES)


def contains_tokens(haystack: str, needle: str) -> bool:
    """True when normalized ``needle`` occurs as a contiguous token run of normalized ``haystack``."""
    h = normalize_answer(haystack).split()
    n = normalize_answer(needle).split()
    if not n:
        return False
    return any(h[i : i + len(n)] == n for i in range(len(h) - len(n) + 1))


def detect_conflict(r_hat: str, y_star: str, context: str = "") -> int:
    """Faithfulness label: 1 when the parametric answer agrees with the contextual one."""
    a, b = normalize_answer(r_hat), normalize_answer(y_star)
    if a == b or contains_tokens(b, a) or contains_tokens(a, b):
        return 1
    return 0


@dataclass
class Elicitation:
    answers: list[str]
    r_hat: str
    freq: int
    retained: bool


def majority(answers: Sequence[str], min_freq: int) -> Elicitation:
    """Most frequent normalized answer; ties go to the answer seen first."""
    counts = Counter(answers)
    best = max(counts.items(), key=lambda kv: (kv[1], -answers.index(kv[0])))
    r_hat, freq = best
    return Elicitation(list(answers), r_hat, freq, bool(r_hat) and freq >= min_freq)


def elicit(model, vocab: Vocab, question: str, n: int = 5, temperature: float = 0.8, seed: int = 0,
           min_freq: int | None = None, max_new: int = 8) -> Elicitation:
    """Sample ``n`` closed-book answers and take the majority.

    ``min_freq`` defaults to ``ceil(n / 2)``, which is 3 for ``n = 5``.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    if min_freq is None:
        min_freq = math.ceil(n / 2)
    prompt = closed_book_prompt(vocab, question)
    answers = []
    for k in range(n):
        out = sample(model, prompt, max_new, temperature, derive_seed(seed, k), eos_id=vocab.eos_id)
        answers.append(normalize_answer(vocab.decode(out)))
    return majority(answers, min_freq)


def build_benchmark(model, facts: Sequence[Fact], vocab: Vocab, counterfactual_rate: float, seed: int,
                    n: int = 5, min_freq: int = 3, temperature: float = 0.8,
                    test_fraction: float = 0.5) -> Benchmark:
    """Elicit, contextualize and label one instance per fact.

    A non-counterfactual context asserts the model's own majority answer; a
    counterfactual one substitutes another entity from the same relation's
    answer pool (or any entity if the pool is too small).
    """
    if not 0.0 <= counterfactual_rate <= 1.0:
        raise ValueError("counterfactual_rate must be within [0, 1]")
    if model.config.vocab_size != len(vocab):
        raise ValueError(f"model vocab size {model.config.vocab_size} != tokenizer size {len(vocab)}")
    rng = np.random.default_rng(derive_seed(seed, "contexts"))
    pools: dict[str, list[str]] = {}
    for f in facts:
        pools.setdefault(f.relation, [])
        if f.object not in pools[f.relation]:
            pools[f.relation].append(f.object)
    all_objects = sorted({f.object for f in facts} | {f.subject for f in facts})

    counts = {"facts": len(facts), "elicited": 0, "retained": 0, "faithful": 0, "unfaithful": 0}
    instances: list[QAInstance] = []
    for i, fact in enumerate(facts):
        q = question_text(fact)
        el = elicit(model, vocab, q, n, temperature, derive_seed(seed, "elicit", i), min_freq)
        flip = rng.random() < counterfactual_rate
        # draw the substitute even when unused so later contexts do not depend on earlier outcomes
        pool = [o for o in pools[fact.relation] if normalize_answer(o) != el.r_hat]
        if len(pool) < 2:
            pool = [o for o in all_objects if normalize_answer(o) != el.r_hat and o != fact.subject]
        substitute = pool[int(rng.integers(len(pool)))]
        if not el.r_hat:
            continue
        counts["elicited"] += 1
        if not el.retained:
            continue
        counts["retained"] += 1
        y_star = substitute if flip else el.r_hat
        ctx = context_text(fact.subject, fact.relation, y_star)
        y_f = detect_conflict(el.r_hat, y_star, ctx)
        counts["faithful" if y_f else "unfaithful"] += 1
        instances.append(QAInstance(len(instances), q, ctx, y_star, el.r_hat, el.freq, y_f, i, flip))

    split_rng = np.random.default_rng(derive_seed(seed, "split"))
    n_test = int(round(test_fraction * len(instances)))
    test_ids = sorted(int(j) for j in split_rng.permutation(len(instances))[:n_test])
    return Benchmark(instances, seed, counts, test_ids)


def adaptation_set(instances: Sequence[QAInstance], facts: Sequence[Fact], contexts_per_question: int,
                   seed: int) -> list[QAInstance]:
    """Training instances for the adapter: each given instance plus extra conflicting contexts.

    Every extra copy keeps the question but swaps in a different answer drawn
    from the relation's object pool, so one question maps to several answers
    and only the context can resolve it.
    """
    if contexts_per_question < 0:
        raise ValueError("contexts_per_question must be >= 0")
    rng = np.random.default_rng(derive_seed(seed, "adaptation"))
    pools: dict[str, list[str]] = {}
    for f in facts:
        pools.setdefault(f.relation, [])
        if f.object not in pools[f.relation]:
            pools[f.relation].append(f.object)
    # the question names (subject, relation), which identifies the fact even
    # for instances read back from JSONL without a fact index
    by_question = {question_text(f): f for f in facts}
    out: list[QAInstance] = []
    for x in instances:
        out.append(replace(x, id=len(out)))
        fact = by_question.get(x.question)
        if fact is None:
            continue
        pool = [o for o in pools[fact.relation] if normalize_answer(o) != x.r_hat]
        if not pool:
            continue
        for _ in range(contexts_per_question):
            o = pool[int(rng.integers(len(pool)))]
            ctx = context_text(fact.subject, fact.relation, o)
            out.append(QAInstance(len(out), x.question, ctx, o, x.r_hat, x.r_hat_freq,
                                  detect_conflict(x.r_hat, o, ctx), x.fact_index, True))
    return out
