import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from pmlab.dataqa import QAInstance, build_benchmark, fact_vocab, gen_factbase
from pmlab.evalkit import conr_memr, evaluate, memorization_ratio, ppl_pair, recall_flags, token_f1
from pmlab.model import ModelConfig, batch_sequence_nll, init_model
from pmlab.suppress import SuppressionPlan, apply_plan
from pmlab.vocab import Vocab, answer_ids, closed_book_prompt, context_prompt

words = st.sampled_from(["paris", "rome", "the", "a", "lyon", "tower", "eiffel"])
phrases = st.lists(words, min_size=0, max_size=5).map(" ".join)


def inst(y_star="paris", r_hat="rome", i=0):
    return QAInstance(i, "q", f"c {y_star}", y_star, r_hat, 5, 0)


def test_conr_memr_ten_instances():
    responses = ["paris"] * 6 + ["rome"] * 2 + ["lyon"] * 2
    s = conr_memr(responses, [inst(i=i) for i in range(10)])
    assert (s.conr, s.memr) == (60.0, 20.0)
    assert s.mr == pytest.approx(0.25)


def test_conr_memr_edge_cases():
    s = conr_memr(["Paris!"] * 4, [inst() for _ in range(4)])
    assert (s.conr, s.memr, s.mr) == (100.0, 0.0, 0.0)
    s = conr_memr(["banana"] * 3, [inst() for _ in range(3)])
    assert (s.conr, s.memr, s.mr, s.mr_defined) == (0.0, 0.0, None, False)
    with pytest.raises(ValueError):
        conr_memr([], [])
    with pytest.raises(ValueError):
        conr_memr(["a"], [])
    # a response holding both answers counts only as contextual
    assert recall_flags("paris or rome", inst()) == (True, False)
    assert memorization_ratio(0.0, 0.0) is None


@given(st.lists(st.tuples(phrases, st.sampled_from(["paris", "the lyon"]), st.sampled_from(["rome", "tower"])),
                min_size=1, max_size=12))
def test_recall_invariants(rows):
    responses = [r for r, _, _ in rows]
    insts = [inst(y, r, i) for i, (_, y, r) in enumerate(rows)]
    s = conr_memr(responses, insts)
    assert 0 <= s.conr <= 100 and 0 <= s.memr <= 100 and s.conr + s.memr <= 100 + 1e-9
    noisy = ["The " + r.upper() + " !" for r in responses]
    t = conr_memr(noisy, insts)
    assert (t.conr, t.memr) == (s.conr, s.memr)
    for resp, x in zip(responses, insts):
        assert recall_flags(resp, x) != (True, True)


def test_token_f1_examples():
    assert token_f1("eiffel tower", "Eiffel  Tower") == 1.0
    assert token_f1("paris", "rome") == 0.0
    assert token_f1("paris france", "paris") == pytest.approx(2 / 3)
    assert token_f1("", "paris") == 0.0


@given(phrases, phrases)
def test_token_f1_symmetric_bounded(a, b):
    assert token_f1(a, b) == token_f1(b, a)
    assert 0.0 <= token_f1(a, b) <= 1.0


def test_ppl_uniform_model():
    vocab = Vocab.build(["x"])
    m = init_model(ModelConfig(vocab_size=16, n_layers=1, d_model=4, d_ffn=4, n_heads=1, max_seq_len=16))
    m.params["tok_emb"][...] = 0.0
    a, b = ppl_pair(m, vocab, QAInstance(0, "x", "x", "x", "x", 5, 1))
    assert a == pytest.approx(16.0, abs=1e-9) and b == pytest.approx(16.0, abs=1e-9)


FACTS = gen_factbase(10, 8, seed=3)
VOCAB = fact_vocab(FACTS)


def small_model(seed=1):
    m = init_model(ModelConfig(vocab_size=len(VOCAB), n_layers=2, d_model=8, d_ffn=16, n_heads=2,
                               max_seq_len=48, seed=seed))
    rng = np.random.default_rng(seed)
    for k in m.params:
        m.params[k] += rng.normal(0, 0.5, m.params[k].shape)
    return m


def test_ppl_pair_matches_sequence_nll():
    m = small_model()
    f = FACTS[0]
    x = QAInstance(0, f"{f.relation} of {f.subject} ?", f"{f.subject} 's {f.relation} is {f.object} .",
                   f.object, f.object, 5, 1)
    a, b = ppl_pair(m, VOCAB, x)
    ctx = batch_sequence_nll(m, [(context_prompt(VOCAB, x.question, x.context), answer_ids(VOCAB, x.y_star))])[0]
    cb = batch_sequence_nll(m, [(closed_book_prompt(VOCAB, x.question), answer_ids(VOCAB, x.y_star))])[0]
    assert abs(a - math.exp(ctx)) <= 1e-12 * a and abs(b - math.exp(cb)) <= 1e-12 * b
    assert a >= 1 and b >= 1


def test_evaluate_identity_plan_and_consistency():
    m = small_model()
    bench = build_benchmark(m, FACTS, VOCAB, 1.0, seed=0, temperature=0.0)
    subset = bench.instances
    assert subset
    base = evaluate(m, VOCAB, subset)
    same = evaluate(apply_plan(m, SuppressionPlan("Layer", (0, 1), 1.0)), VOCAB, subset)
    assert base.to_json() == same.to_json()
    if base.mr_defined:
        assert abs(base.mr - base.memr / (base.memr + base.conr)) <= 1e-12
    assert sum(b["n"] for b in base.buckets.values()) == base.n_instances == len(subset)
    assert base.ppl_with_context >= 1 and base.ppl_without_context >= 1
    row = base.csv_row()
    assert list(row) == ["model_tag", "plan_tag", "conr", "memr", "mr", "sim_parametric", "sim_contextual",
                         "ppl_ctx", "ppl_noctx", "n"]
    with pytest.raises(ValueError):
        evaluate(m, VOCAB, [])
