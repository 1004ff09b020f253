"""Acceptance criteria AC-1 .. AC-11.

The end-to-end criteria share one session fixture that runs the default
pipeline twice into temporary directories.
"""

import json
import time
from pathlib import Path

import numpy as np
import pytest

from helpers import MICRO_PAIRS, fd_check, micro_model, rel_err
from pmlab.activation import select_layers
from pmlab.adapt import Adapter, adapter_targets, kpo_from_scores
from pmlab.checkpoint import load_checkpoint
from pmlab.cli import RUN_ALL, facts_and_vocab, main, read_commented_csv
from pmlab.config import load_config
from pmlab.dataqa import QAInstance, build_benchmark, derive_seed
from pmlab.evalkit import conr_memr
from pmlab.model import (ModelView, base_param_grads, batch_sequence_nll, ffn_decompose, ffn_forward, forward_batch,
                         sequence_nll_grads)
from pmlab.suppress import SuppressionPlan, apply_plan

DEFAULT_CONFIG = Path(__file__).resolve().parents[1] / "configs" / "default.json"


@pytest.fixture(scope="session")
def runs(tmp_path_factory):
    """Default pipeline run twice: once stage by stage with timings, once through the CLI."""
    a = tmp_path_factory.mktemp("run_a")
    b = tmp_path_factory.mktemp("run_b")
    config = load_config(DEFAULT_CONFIG, out=str(a))
    timings = {}
    for cmd in RUN_ALL:
        t0 = time.perf_counter()
        cmd(config)
        timings[cmd.__name__[4:]] = time.perf_counter() - t0
    assert main(["run-all", "--config", str(DEFAULT_CONFIG), "--out", str(b)]) == 0
    return {"a": a, "b": b, "timings": timings, "config": config}


def test_ac1_gradients(ac_report):
    t0 = time.perf_counter()
    worst = 0.0
    m = micro_model()
    _, _, g = sequence_nll_grads(m, MICRO_PAIRS)
    loss = lambda: float(batch_sequence_nll(m, MICRO_PAIRS).mean())
    for name in m.params:
        worst = max(worst, rel_err(g[name], fd_check(m.params, name, loss)))
    # adapter factors, and base weights seen through a plan plus adapter
    plan = SuppressionPlan("FFN", (1,), 0.4)
    ad = Adapter.init(m, adapter_targets(m, plan), 2, seed=1)
    rng = np.random.default_rng(0)
    for _, B in ad.factors.values():
        B[...] = rng.normal(0.0, 0.2, B.shape)
    view = ModelView(m, plan, ad)
    _, _, eff = sequence_nll_grads(view, MICRO_PAIRS)
    fgrads = ad.backprop(eff)
    vloss = lambda: float(batch_sequence_nll(view, MICRO_PAIRS).mean())
    for name in ad.targets:
        A, B = ad.factors[name]
        holder = {"A": A, "B": B}
        for part in ("A", "B"):
            def f_loss(name=name, part=part):
                ad.factors[name] = (holder["A"], holder["B"])
                return vloss()
            fd = fd_check(holder, part, f_loss)
            ad.factors[name] = (A, B)
            worst = max(worst, rel_err(fgrads[f"{name}.{part}"], fd))
    base = base_param_grads(view, eff)
    for name in ("tok_emb", "layers.0.wk", "layers.1.ffn_k", "layers.1.ffn_v", "final_norm"):
        worst = max(worst, rel_err(base[name], fd_check(m.params, name, vloss)))
    elapsed = time.perf_counter() - t0
    ac_report("AC-1", worst < 1e-4 and elapsed < 30,
              f"max relative error {worst:.2e} over all groups and adapter factors, {elapsed:.1f}s")


def test_ac2_ffn_decomposition(ac_report):
    m = micro_model()
    rng = np.random.default_rng(0)
    worst = 0.0
    for i in range(1000):
        layer = i % m.config.n_layers
        x = rng.normal(0.0, 1.0 + (i % 3), m.config.d_model)
        _, recon = ffn_decompose(x, layer, m)
        worst = max(worst, float(np.max(np.abs(recon - ffn_forward(x, layer, m)))))
    ac_report("AC-2", worst <= 1e-9, f"max abs difference {worst:.2e} on 1000 inputs")


def test_ac3_suppression_identities(ac_report):
    m = micro_model()
    toks = np.array([[1, 4, 2, 7, 9, 3, 5]])
    base, _, _ = forward_batch(ModelView(m), toks)
    same = all(np.array_equal(forward_batch(apply_plan(m, SuppressionPlan(k, (0, 1), 1.0)), toks)[0], base)
               for k in ("FFN", "MHA", "Layer"))
    _, coeffs, _ = forward_batch(apply_plan(m, SuppressionPlan("FFN", (0, 1), 0.0)), toks, trace=True)
    muted = m.copy()
    for l in (0, 1):
        muted.params[f"layers.{l}.ffn_v"] = np.zeros_like(muted.params[f"layers.{l}.ffn_v"])
    zero_out = all(np.all(c == 0.0) for c in coeffs) and np.array_equal(
        forward_batch(apply_plan(m, SuppressionPlan("FFN", (0, 1), 0.0)), toks)[0],
        forward_batch(ModelView(muted), toks)[0])
    rng = np.random.default_rng(1)
    linear = True
    for _ in range(200):
        x = rng.normal(size=8)
        lam = float(rng.uniform(0, 2))
        linear &= np.allclose(ffn_forward(x, 1, m, lam), lam * ffn_forward(x, 1, m), rtol=0, atol=1e-13)
        linear &= np.all(ffn_forward(x, 1, m, 0.0) == 0.0)
    ac_report("AC-3", bool(same and zero_out and linear),
              f"lambda=1 bit-identical {same}, lambda=0 FFN output zero {zero_out}, linear in lambda {linear}")


def test_ac4_selection_oracle(ac_report):
    rng = np.random.default_rng(0)
    mismatches = ties = 0
    for _ in range(1000):
        L = int(rng.integers(1, 17))
        gaps = np.round(rng.normal(0, 0.05, L), int(rng.integers(1, 4))).tolist()
        ties += len(set(gaps)) < L
        n = int(rng.integers(1, L + 1))
        want = sorted(range(L), key=lambda l: (-gaps[l], l))[:n]
        # independent oracle: layer l is in iff fewer than n layers beat it on (gap, lower index)
        ranked = {l for l in range(L) if sum(g > gaps[l] or (g == gaps[l] and j < l)
                                             for j, g in enumerate(gaps)) < n}
        got = select_layers(gaps, n).layers
        mismatches += got != want or set(got) != ranked
    ac_report("AC-4", mismatches == 0, f"{mismatches} mismatches on 1000 gap vectors ({ties} with ties)")


def test_ac5_memorization(runs, ac_report):
    summary = json.loads((runs["a"] / "pretrain" / "summary.json").read_text())
    acc, secs = summary["closed_book_accuracy"], runs["timings"]["pretrain"]
    ac_report("AC-5", acc >= 0.9 and secs < 300,
              f"closed-book exact match {acc:.3f} on {summary['n_facts']} facts, pretraining {secs:.0f}s")


def test_ac6_losses(runs, ac_report):
    rng = np.random.default_rng(0)
    # multiples of 1/64 are exact in binary, so ties on the hinge boundary are real ties
    a = -rng.integers(0, 640, 10_000) / 64
    b = -rng.integers(0, 640, 10_000) / 64
    g = rng.integers(0, 384, 10_000) / 64
    a[:1000] = np.maximum(b[:1000] + g[:1000], -10.0)
    vals = np.array([kpo_from_scores(x, y, z) for x, y, z in zip(a, b, g)])
    hinge_ok = bool(np.all(vals >= 0) and np.array_equal(vals == 0, a - b >= g))
    summary = json.loads((runs["a"] / "adapt" / "summary.json").read_text())
    ratio = summary["final_loss"] / summary["initial_loss"]
    ac_report("AC-6", hinge_ok and ratio <= 0.5,
              f"hinge conditions hold on 10000 triples {hinge_ok}; combined loss "
              f"{summary['initial_loss']:.3f} -> {summary['final_loss']:.3f} ({100 * (1 - ratio):.1f}% lower)")


def test_ac7_pipeline_labels(runs, ac_report):
    config = runs["config"]
    model = load_checkpoint(runs["a"] / "pretrain" / "model.ckpt")
    facts, vocab = facts_and_vocab(config)
    e = config.elicitation
    seed = derive_seed(config.seed, "benchmark")
    acc = json.loads((runs["a"] / "pretrain" / "summary.json").read_text())["closed_book_accuracy"]
    all_cf = build_benchmark(model, facts, vocab, 1.0, seed, e.n, e.min_freq, e.temperature)
    none_cf = build_benchmark(model, facts, vocab, 0.0, seed, e.n, e.min_freq, e.temperature)
    frac = len(all_cf.unfaithful) / max(len(all_cf.instances), 1)
    ac_report("AC-7", acc >= 0.9 and frac >= 0.8 and not none_cf.unfaithful,
              f"rate 1: {len(all_cf.unfaithful)}/{len(all_cf.instances)} unfaithful ({100 * frac:.1f}%); "
              f"rate 0: {len(none_cf.unfaithful)} unfaithful")


def test_ac8_intervention(runs, ac_report):
    rows = read_commented_csv(runs["a"] / "intervene" / "intervention.csv")
    nll = {float(r["lambda"]): float(r["nll_unfaithful"]) for r in rows}
    grid = [nll[l] for l in (0.0, 0.25, 0.5, 0.75, 1.0)]
    inversions = sum(b > a for a, b in zip(grid, grid[1:]))
    ok = nll[0.0] > nll[1.0] and inversions <= 1
    ac_report("AC-8", ok, "NLL of parametric answer on D- by lambda: " +
              ", ".join(f"{l:g}:{v:.3f}" for l, v in sorted(nll.items())) + f" ({inversions} inversions)")


def test_ac9_end_to_end(runs, ac_report):
    rows = {r["model_tag"]: r for r in read_commented_csv(runs["a"] / "evaluate" / "summary.csv")}
    van, pm = rows["vanilla"], rows["adapted"]
    total = sum(runs["timings"].values())
    ok = (van["mr"] != "undefined" and pm["mr"] != "undefined" and float(pm["mr"]) < float(van["mr"])
          and float(pm["conr"]) >= float(van["conr"]) - 2 and total < 600)
    ac_report("AC-9", ok, f"vanilla ConR {float(van['conr']):.2f} MR {van['mr']}; "
              f"suppressed+adapted ConR {float(pm['conr']):.2f} MR {pm['mr']}; run-all {total:.0f}s")


def test_ac10_metric_arithmetic(runs, ac_report):
    insts = [QAInstance(i, "q", "c", "paris", "rome", 5, 0) for i in range(10)]
    s = conr_memr(["paris"] * 6 + ["rome"] * 2 + ["lyon"] * 2, insts)
    exact = (s.conr, s.memr, s.mr) == (60.0, 20.0, 0.25)
    worst = 0.0
    for p in sorted((runs["a"] / "evaluate").glob("report_*.json")):
        rep = json.loads(p.read_text())
        if rep["mr_defined"]:
            worst = max(worst, abs(rep["mr"] - rep["memr"] / (rep["memr"] + rep["conr"])))
    ac_report("AC-10", exact and worst <= 1e-12,
              f"10-instance example ConR {s.conr} MemR {s.memr} MR {s.mr}; report MR recomputation error {worst:.1e}")


def test_ac11_determinism(runs, ac_report):
    a, b = runs["a"], runs["b"]
    files = sorted(p.relative_to(a) for p in a.rglob("*") if p.is_file())
    other = sorted(p.relative_to(b) for p in b.rglob("*") if p.is_file())
    differ = [str(p) for p in files if (a / p).read_bytes() != (b / p).read_bytes()] if files == other else ["tree"]
    key = [p for p in files if p.suffix in (".ckpt", ".jsonl", ".csv")]
    ac_report("AC-11", not differ and len(key) >= 10,
              f"{len(files)} files compared ({len(key)} checkpoints/JSONL/CSV), {len(differ)} differ {differ[:3]}")
