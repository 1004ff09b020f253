"""Command-line pipeline: pretrain, build-benchmark, analyze, intervene, adapt, evaluate, sweep."""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np

from .activation import STATS_COLUMNS, analyze, response_ratios_batch, select_layers
from .adapt import AdaptConfig, Adapter, train_adapter
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .config import ConfigError, ExperimentConfig, load_config, stage_hash
from .dataqa import (adaptation_set, build_benchmark, build_corpus, derive_seed, fact_vocab, gen_factbase,
                     question_text, read_jsonl, Benchmark)
from .evalkit import CSV_COLUMNS, evaluate
from .model import ModelConfig, ModelView, greedy_batch, init_model, train_lm
from .suppress import SuppressionPlan, ffn_param_count, intervention_sweep, snip_saliency, write_csv
from .vocab import answer_ids, closed_book_prompt, context_prompt

log = logging.getLogger("pmlab")

STAGE_DIRS = {
    "pretrain": "pretrain",
    "benchmark": "benchmark",
    "analyze": "analyze",
    "intervene": "intervene",
    "adapt": "adapt",
    "evaluate": "evaluate",
    "sweep": "sweep",
}
SWEEP_COLUMNS = ("axis", "value", "setting", "kind", "strategy", "layers", "lam", "alpha", "beta") + CSV_COLUMNS[2:]


class StaleArtifactError(RuntimeError):
    pass


# --------------------------------------------------------------------------
# provenance


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


class Stage:
    """Output directory of one pipeline stage plus its provenance record."""

    def __init__(self, config: ExperimentConfig, name: str):
        self.config = config
        self.name = name
        self.dir = Path(config.paths.out) / STAGE_DIRS[name]
        self.hash = stage_hash(config, name)
        self.outputs: dict[str, str] = {}
        self.inputs: dict[str, str] = {}

    @property
    def header(self) -> str:
        return f"config_hash={self.hash} seed={self.config.seed} stage={self.name}"

    def path(self, fname: str) -> Path:
        self.dir.mkdir(parents=True, exist_ok=True)
        return self.dir / fname

    def stamp(self) -> dict:
        return {"config_hash": self.hash, "seed": self.config.seed, "stage": self.name}

    def write_json(self, fname: str, body: dict) -> Path:
        p = self.path(fname)
        # the stamp keys come first and cannot be shadowed by the body
        p.write_text(json.dumps({**self.stamp(), **body, **self.stamp()}, indent=2) + "\n", encoding="utf-8")
        return p

    def write_csv(self, fname: str, columns, rows) -> Path:
        p = self.path(fname)
        write_csv(p, columns, rows, self.header)
        return p

    def record(self, *paths: Path) -> None:
        for p in paths:
            self.outputs[p.name] = sha256_file(p)

    def require(self, upstream: str, fname: str) -> Path:
        """Path of an upstream artifact, checked against the current config."""
        up_dir = Path(self.config.paths.out) / STAGE_DIRS[upstream]
        target = up_dir / fname
        prov_path = up_dir / "provenance.json"
        if not prov_path.exists() or not target.exists():
            missing = target if not target.exists() else prov_path
            raise StaleArtifactError(f"missing upstream artifact {missing}; run the {upstream} stage first")
        prov = json.loads(prov_path.read_text(encoding="utf-8"))
        want = stage_hash(self.config, upstream)
        if prov.get("config_hash") != want:
            raise StaleArtifactError(f"stale upstream artifact {target}: built with config hash "
                                     f"{prov.get('config_hash')}, current config needs {want}")
        digest = sha256_file(target)
        if prov.get("outputs", {}).get(fname) != digest:
            raise StaleArtifactError(f"upstream artifact {target} was modified after it was written")
        self.inputs[f"{STAGE_DIRS[upstream]}/{fname}"] = digest
        return target

    def finish(self) -> None:
        body = {**self.stamp(), "inputs": dict(sorted(self.inputs.items())),
                "outputs": dict(sorted(self.outputs.items()))}
        self.path("provenance.json").write_text(json.dumps(body, indent=2) + "\n", encoding="utf-8")


def read_commented_csv(path) -> list[dict]:
    with open(path, newline="", encoding="utf-8") as fh:
        lines = [line for line in fh if not line.startswith("#")]
    return list(csv.DictReader(lines))


# --------------------------------------------------------------------------
# shared state rebuilt from the config


def facts_and_vocab(config: ExperimentConfig):
    facts = gen_factbase(config.data.n_facts, config.data.n_entities, derive_seed(config.seed, "facts"))
    return facts, fact_vocab(facts)


def model_config(config: ExperimentConfig, vocab_size: int) -> ModelConfig:
    m = config.model
    return ModelConfig(vocab_size=vocab_size, n_layers=m.n_layers, d_model=m.d_model, d_ffn=m.d_ffn,
                       n_heads=m.n_heads, max_seq_len=m.max_seq_len, seed=derive_seed(config.seed, "init"))


def load_benchmark(stage: Stage) -> Benchmark:
    path = stage.require("benchmark", "benchmark.jsonl")
    meta = json.loads(stage.require("benchmark", "meta.json").read_text(encoding="utf-8"))
    return Benchmark(read_jsonl(path), meta["generation_seed"], meta["stage_counts"], meta["test_ids"])


def load_selection(stage: Stage) -> list[int]:
    return json.loads(stage.require("analyze", "selection.json").read_text(encoding="utf-8"))["layers"]


def load_gaps(stage: Stage) -> list[float]:
    rows = read_commented_csv(stage.require("analyze", "layer_stats.csv"))
    return [float(r["gap"]) for r in rows]


def unfaithful_pairs(vocab, instances):
    return [(context_prompt(vocab, x.question, x.context), answer_ids(vocab, x.r_hat)) for x in instances]


def faithful_pairs(vocab, instances):
    return [(context_prompt(vocab, x.question, x.context), answer_ids(vocab, x.y_star)) for x in instances]


def build_plan(config: ExperimentConfig, model, vocab, bench: Benchmark, layers, kind: str | None = None,
               lam: float | None = None) -> SuppressionPlan:
    kind = kind or config.suppression.kind
    lam = config.suppression.lam if lam is None else lam
    if kind != "Parameter":
        return SuppressionPlan(kind, tuple(layers), lam)
    # SNIP budget matches the number of weights an FFN plan on the same layers would scale
    d_minus = [x for x in bench.split("train") if x.y_f == 0] or bench.unfaithful
    if not d_minus:
        raise ValueError("Parameter suppression needs unfaithful instances to score saliency")
    sample = unfaithful_pairs(vocab, d_minus[: config.suppression.snip_sample])
    mask = snip_saliency(model, sample, ffn_param_count(model, layers), layers)
    return SuppressionPlan("Parameter", (), lam, mask)


def adapt_config(config: ExperimentConfig, **over) -> AdaptConfig:
    a = asdict(config.adapt)
    a.pop("contexts_per_question")
    a["seed"] = derive_seed(config.seed, "adapt") % (2**32)
    a.update(over)
    return AdaptConfig(**a)


def eval_subset(bench: Benchmark):
    """Held-out unfaithful instances; all of them when there is no test split."""
    test = [x for x in bench.split("test") if x.y_f == 0]
    return (test, "test") if test else (bench.unfaithful, "all")


# --------------------------------------------------------------------------
# commands


def cmd_pretrain(config: ExperimentConfig) -> Stage:
    st = Stage(config, "pretrain")
    facts, vocab = facts_and_vocab(config)
    corpus = build_corpus(facts, vocab, config.data.distractors, config.data.reading_per_fact,
                          derive_seed(config.seed, "corpus"))
    model = init_model(model_config(config, len(vocab)))
    trail = train_lm(model, corpus, config.pretrain.steps, config.pretrain.lr, config.pretrain.batch,
                     derive_seed(config.seed, "pretrain"), vocab.pad_id, log_every=250)
    prompts = [closed_book_prompt(vocab, question_text(f)) for f in facts]
    preds = [vocab.decode(o) for o in greedy_batch(model, prompts, 8, vocab.eos_id)]
    hits = [int(p == f.object) for p, f in zip(preds, facts)]
    acc = float(np.mean(hits))
    log.info("closed-book exact match %.3f", acc)
    final = float(np.mean(trail.losses[-50:])) if trail.losses else float("nan")

    ckpt = st.path("model.ckpt")
    save_checkpoint(model, ckpt, {**st.stamp(), "steps": len(trail.losses), "final_loss": final,
                                  "closed_book_accuracy": acc})
    rows = [{"fact_index": i, "subject": f.subject, "relation": f.relation, "answer": f.object,
             "prediction": p, "hit": h} for i, (f, p, h) in enumerate(zip(facts, preds, hits))]
    acc_csv = st.write_csv("accuracy.csv", ["fact_index", "subject", "relation", "answer", "prediction", "hit"], rows)
    log_csv = st.write_csv("train_log.csv", ["step", "loss"], trail.as_rows())
    summary = st.write_json("summary.json", {"closed_book_accuracy": acc, "n_facts": len(facts),
                                             "corpus_size": len(corpus), "steps": len(trail.losses),
                                             "final_loss": final, "vocab_size": len(vocab)})
    st.record(ckpt, acc_csv, log_csv, summary)
    st.finish()
    return st


def cmd_build_benchmark(config: ExperimentConfig) -> Stage:
    st = Stage(config, "benchmark")
    model = load_checkpoint(st.require("pretrain", "model.ckpt"))
    facts, vocab = facts_and_vocab(config)
    e, b = config.elicitation, config.benchmark
    bench = build_benchmark(model, facts, vocab, b.counterfactual_rate, derive_seed(config.seed, "benchmark"),
                            n=e.n, min_freq=e.min_freq, temperature=e.temperature, test_fraction=b.test_fraction)
    log.info("benchmark stage counts %s", bench.stage_counts)
    jsonl = st.path("benchmark.jsonl")
    bench.write_jsonl(jsonl)
    meta = st.write_json("meta.json", {"generation_seed": bench.seed, "stage_counts": bench.stage_counts,
                                       "split_sizes": bench.split_sizes(), "test_ids": bench.test_ids,
                                       "frequency_buckets": {str(k): v for k, v in bench.frequency_buckets().items()}})
    counts = st.write_csv("stage_counts.csv", ["stage", "count"],
                          [{"stage": k, "count": v} for k, v in bench.stage_counts.items()])
    st.record(jsonl, meta, counts)
    st.finish()
    return st


def cmd_analyze(config: ExperimentConfig) -> Stage:
    st = Stage(config, "analyze")
    model = load_checkpoint(st.require("pretrain", "model.ckpt"))
    bench = load_benchmark(st)
    _, vocab = facts_and_vocab(config)
    inst = bench.instances
    labels = [x.y_f for x in inst]
    if len(set(labels)) < 2:
        raise ValueError("analysis needs both faithful and unfaithful instances")
    # activations while the model produces its parametric answer under the context
    pairs = [(context_prompt(vocab, x.question, x.context), vocab.encode(x.r_hat)) for x in inst]
    ratios = response_ratios_batch(model, pairs, vocab.pad_id)
    stats = analyze(ratios, labels, config.analysis.n_perm, derive_seed(config.seed, "perm") % (2**32))
    sel = select_layers(stats, config.selection.n_layers_to_suppress, config.selection.strategy,
                        derive_seed(config.seed, "select") % (2**32), model.config.n_layers)
    for w in sel.warnings:
        log.warning(w)
    L = ratios.shape[1]
    ratio_rows = [{"id": x.id, "faithful": x.y_f, **{f"layer_{l}": float(ratios[i, l]) for l in range(L)}}
                  for i, x in enumerate(inst)]
    r_csv = st.write_csv("ratios.csv", ["id", "faithful"] + [f"layer_{l}" for l in range(L)], ratio_rows)
    s_csv = st.write_csv("layer_stats.csv", STATS_COLUMNS, [s.row() for s in stats])
    body = sel.to_dict()
    body["selection_seed"] = body.pop("seed")
    s_json = st.write_json("selection.json", body)
    st.record(r_csv, s_csv, s_json)
    st.finish()
    return st


def cmd_intervene(config: ExperimentConfig) -> Stage:
    st = Stage(config, "intervene")
    model = load_checkpoint(st.require("pretrain", "model.ckpt"))
    bench = load_benchmark(st)
    layers = load_selection(st)
    _, vocab = facts_and_vocab(config)
    res = intervention_sweep(model, unfaithful_pairs(vocab, bench.unfaithful), faithful_pairs(vocab, bench.faithful),
                             layers, config.intervention.lambda_list)
    out = st.path("intervention.csv")
    res.write_csv(out, st.header)
    st.record(out)
    st.finish()
    return st


def cmd_adapt(config: ExperimentConfig) -> Stage:
    st = Stage(config, "adapt")
    model = load_checkpoint(st.require("pretrain", "model.ckpt"))
    bench = load_benchmark(st)
    layers = load_selection(st)
    facts, vocab = facts_and_vocab(config)
    plan = build_plan(config, model, vocab, bench, layers)
    train = adaptation_set(bench.split("train"), facts, config.adapt.contexts_per_question,
                           derive_seed(config.seed, "adaptation"))
    acfg = adapt_config(config)
    adapter, trail = train_adapter(model, plan, train, vocab, acfg, log_every=100)
    log.info("adapter combined loss %.4f -> %.4f", trail.initial_loss, trail.final_loss)
    ckpt = st.path("adapter.ckpt")
    adapter.save(ckpt, {**st.stamp(), "plan": plan.tag(), "steps": acfg.steps,
                        "initial_loss": trail.initial_loss, "final_loss": trail.final_loss})
    log_csv = st.write_csv("train_log.csv", ["step", "kat_loss", "kpo_loss", "gamma", "combined"], trail.rows)
    summary = st.write_json("summary.json", {"plan": plan.tag(), "layers": list(layers), "kind": plan.kind,
                                             "lam": plan.lam, "targets": adapter.targets, "n_train": len(train),
                                             "initial_loss": trail.initial_loss, "final_loss": trail.final_loss,
                                             "adapt": asdict(acfg)})
    st.record(ckpt, log_csv, summary)
    st.finish()
    return st


def cmd_evaluate(config: ExperimentConfig) -> Stage:
    st = Stage(config, "evaluate")
    model = load_checkpoint(st.require("pretrain", "model.ckpt"))
    bench = load_benchmark(st)
    layers = load_selection(st)
    adapter = Adapter.load(st.require("adapt", "adapter.ckpt"))
    _, vocab = facts_and_vocab(config)
    plan = build_plan(config, model, vocab, bench, layers)
    subset, split = eval_subset(bench)
    views = {
        "vanilla": (ModelView(model), "none"),
        "suppressed": (ModelView(model, plan), plan.tag()),
        "adapted": (ModelView(model, plan, adapter), plan.tag()),
    }
    rows, outs = [], []
    for tag, (view, ptag) in views.items():
        rep = evaluate(view, vocab, subset, config.evaluate.max_new, tag, ptag)
        log.info("%s: ConR %.2f MemR %.2f MR %s", tag, rep.conr, rep.memr, rep.mr)
        rows.append(rep.csv_row())
        p = st.path(f"report_{tag}.json")
        rep.write_json(p, {**st.stamp(), "split": split})
        outs.append(p)
    outs.append(st.write_csv("summary.csv", CSV_COLUMNS, rows))
    st.record(*outs)
    st.finish()
    return st


def cmd_sweep(config: ExperimentConfig) -> Stage:
    st = Stage(config, "sweep")
    model = load_checkpoint(st.require("pretrain", "model.ckpt"))
    bench = load_benchmark(st)
    layers = load_selection(st)
    gaps = load_gaps(st)
    facts, vocab = facts_and_vocab(config)
    subset, _ = eval_subset(bench)
    train = adaptation_set(bench.split("train"), facts, config.adapt.contexts_per_question,
                           derive_seed(config.seed, "adaptation"))
    sw = config.sweep
    L = model.config.n_layers

    def run(axis, value, plan, strategy, alpha=None, beta=None, adapted=False):
        adapter = None
        if adapted:
            over = {"steps": sw.adapt_steps}
            if alpha is not None:
                over.update(alpha=alpha, beta=beta)
            adapter, _ = train_adapter(model, plan, train, vocab, adapt_config(config, **over))
        rep = evaluate(ModelView(model, plan, adapter), vocab, subset, config.evaluate.max_new)
        row = rep.csv_row()
        a = config.adapt
        return {"axis": axis, "value": value, "setting": "adapted" if adapted else "zero_shot",
                "kind": plan.kind, "strategy": strategy, "layers": " ".join(map(str, plan_layers(plan))),
                "lam": plan.lam, "alpha": a.alpha if alpha is None else alpha, "beta": a.beta if beta is None else beta,
                **{k: row[k] for k in CSV_COLUMNS[2:]}}

    def plan_layers(plan):
        return plan.layers if plan.kind != "Parameter" else sorted(layers)

    settings = [False, True] if sw.adapted else [False]
    strategy = config.selection.strategy
    rows = []
    for lam in sw.lambda_list:
        plan = build_plan(config, model, vocab, bench, layers, "FFN", float(lam))
        rows += [run("lambda", lam, plan, strategy, adapted=s) for s in settings]
    for n in sw.n_list:
        sel = select_layers(gaps, int(n), strategy, derive_seed(config.seed, "select") % (2**32), L)
        plan = build_plan(config, model, vocab, bench, sel.layers, "FFN")
        rows += [run("n", n, plan, strategy, adapted=s) for s in settings]
    for kind in sw.kinds:
        plan = build_plan(config, model, vocab, bench, layers, kind)
        rows += [run("kind", kind, plan, strategy, adapted=s) for s in settings]
    for strat in sw.strategies:
        sel = select_layers(gaps, config.selection.n_layers_to_suppress, strat,
                            derive_seed(config.seed, "select") % (2**32), L)
        plan = build_plan(config, model, vocab, bench, sel.layers, "FFN")
        rows += [run("strategy", strat, plan, strat, adapted=s) for s in settings]
    plan = build_plan(config, model, vocab, bench, layers)
    for alpha, beta in sw.alpha_beta_list:
        rows.append(run("alpha_beta", f"{alpha}:{beta}", plan, strategy, float(alpha), float(beta), adapted=True))
    out = st.write_csv("sweep.csv", SWEEP_COLUMNS, rows)
    st.record(out)
    st.finish()
    return st


RUN_ALL = (cmd_pretrain, cmd_build_benchmark, cmd_analyze, cmd_intervene, cmd_adapt, cmd_evaluate)


def cmd_run_all(config: ExperimentConfig) -> None:
    for cmd in RUN_ALL:
        log.info("== %s", cmd.__name__[4:].replace("_", "-"))
        cmd(config)


COMMANDS = {
    "pretrain": cmd_pretrain,
    "build-benchmark": cmd_build_benchmark,
    "analyze": cmd_analyze,
    "intervene": cmd_intervene,
    "adapt": cmd_adapt,
    "evaluate": cmd_evaluate,
    "sweep": cmd_sweep,
    "run-all": cmd_run_all,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="pmlab", description="Toy FFN-suppression faithfulness laboratory")
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", required=True, help="JSON experiment config")
        p.add_argument("--set", dest="overrides", action="append", default=[], metavar="K=V",
                       help="override a config value, e.g. --set adapt.steps=300 (repeatable)")
        p.add_argument("--out", default=None, help="artifact directory (overrides paths.out)")
        p.add_argument("--seed", type=int, default=None, help="global seed (overrides seed)")
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        config = load_config(args.config, args.overrides, args.seed, args.out)
        COMMANDS[args.command](config)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except StaleArtifactError as exc:
        print(f"stale artifact: {exc}", file=sys.stderr)
        return 3
    except (CheckpointError, OSError, ValueError, KeyError, IndexError, FloatingPointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
