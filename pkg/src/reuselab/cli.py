"""Command-line entry point.

Exit codes: 0 success, 1 a checked tolerance failed, 2 usage or config error.
"""

import argparse
import datetime as _dt
import json
import os
import sys

import numpy as np
from threadpoolctl import threadpool_limits

from . import __version__, _kernels

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2
SCHEMA_VERSION = 1
TRAIN_KEYS = ("steps", "batch_size", "lr", "warmup", "grad_clip", "log_every",
              "capture_every", "eval_size", "probe_size")


class UsageError(Exception):
    pass


# ---------------------------------------------------------------------------
# config files
# ---------------------------------------------------------------------------

def _key_line(text, key):
    needle = f'"{key}"'
    for lineno, line in enumerate(text.splitlines(), start=1):
        if needle in line:
            return lineno
    return None


def load_config(path):
    """Parse a versioned JSON config; errors carry file:line context."""
    from .model.schedule import ConfigError

    if not os.path.exists(path):
        raise UsageError(f"config file not found: {path}")
    with open(path) as fh:
        text = fh.read()
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as exc:
        raise UsageError(f"{path}:{exc.lineno}:{exc.colno}: invalid JSON: {exc.msg}") from None
    if not isinstance(raw, dict):
        raise UsageError(f"{path}:1: top level must be an object")
    if raw.get("schema_version") != SCHEMA_VERSION:
        line = _key_line(text, "schema_version") or 1
        raise UsageError(f"{path}:{line}: schema_version must be {SCHEMA_VERSION}, got {raw.get('schema_version')!r}")
    allowed = {"schema_version", "model", "task", "train", "cost"}
    sections = {"model": None, "task": None, "train": TRAIN_KEYS,
                "cost": ("n", "vocab", "tie_embeddings", "flops_per_mac")}
    for key in raw:
        if key not in allowed:
            raise UsageError(f"{path}:{_key_line(text, key)}: unknown key {key!r}")
    for sec, keys in sections.items():
        if keys is None or sec not in raw:
            continue
        for key in raw[sec]:
            if key not in keys:
                raise UsageError(f"{path}:{_key_line(text, key)}: unknown key {sec}.{key!r}")
    try:
        return _resolve_config(raw)
    except ConfigError as exc:
        msg = str(exc)
        line = None
        for tok in msg.replace("'", '"').split('"'):
            if tok and tok.isidentifier():
                line = _key_line(text, tok)
                if line:
                    break
        raise UsageError(f"{path}:{line or 1}: {msg}") from None


def _resolve_config(raw):
    from .model import ModelConfig
    from .model.schedule import ConfigError
    from .tasks import TaskSpec

    out = {"raw": raw}
    task = TaskSpec.from_dict(raw["task"]) if "task" in raw else None
    out["task"] = task
    if "model" in raw:
        m = dict(raw["model"])
        if "vocab_size" not in m:
            if task is None:
                raise ConfigError("model.vocab_size is required when no task is given")
            m["vocab_size"] = task.model_vocab
        if "max_len" not in m and task is not None:
            m["max_len"] = task.seq_len
        out["model"] = ModelConfig.from_dict(m)
    out["train"] = dict(raw.get("train", {}))
    out["cost"] = dict(raw.get("cost", {}))
    return out


def _train_config(cfg, seed, steps=None, task_kind=None):
    from .model.schedule import ConfigError
    from .tasks import TaskSpec
    from .training import TrainRunConfig

    if "model" not in cfg:
        raise UsageError("config has no model section")
    task = cfg["task"] or TaskSpec()
    if task_kind is not None:
        task = TaskSpec(**{**task.to_dict(), "kind": task_kind})
    model = cfg["model"]
    if model.vocab_size != task.model_vocab:
        model = model.replace(vocab_size=task.model_vocab)
    train = dict(cfg["train"])
    if steps is not None:
        train["steps"] = steps
    try:
        return TrainRunConfig(model=model, task=task, seed=seed, **train)
    except ConfigError as exc:
        raise UsageError(str(exc)) from None


# ---------------------------------------------------------------------------
# output helpers
# ---------------------------------------------------------------------------

def _now():
    return _dt.datetime.now(_dt.timezone.utc).isoformat()


def _prepare_out(path):
    if path is None:
        return None
    os.makedirs(path, exist_ok=True)
    return path


def write_manifest(out, command, argv, config, seeds, artifacts, started):
    manifest = {
        "command": command,
        "argv": list(argv),
        "config": config,
        "seeds": seeds,
        "artifacts": sorted(artifacts),
        "version": __version__,
        "kernel_backend": _kernels.get_backend(),
        "started": started,
        "finished": _now(),
    }
    with open(os.path.join(out, "manifest.json"), "w") as fh:
        json.dump(manifest, fh, indent=2)
        fh.write("\n")


def _write(out, name, text, artifacts):
    path = os.path.join(out, name)
    with open(path, "w") as fh:
        fh.write(text)
    artifacts.append(name)
    return path


def _emit(obj):
    sys.stdout.write(json.dumps(obj, indent=2) + "\n")


def _parse_int_list(text):
    text = text.strip()
    if ".." in text:
        lo, hi = text.split("..", 1)
        return list(range(int(lo), int(hi) + 1))
    return [int(t) for t in text.split(",") if t.strip()]


def _parse_float_list(text):
    return [float(t) for t in text.split(",") if t.strip()]


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_train(args, argv):
    from .model import checkpoint
    from .training import metrics_jsonl, run_training

    started = _now()
    cfg = load_config(args.config)
    run_cfg = _train_config(cfg, args.seed, args.steps, args.task)
    out = _prepare_out(args.out)
    res = run_training(run_cfg, log=(lambda r: print(json.dumps(r), file=sys.stderr)) if args.verbose else None)
    artifacts = []
    checkpoint.save(os.path.join(out, "checkpoint.ratt"), res.checkpoint)
    artifacts.append("checkpoint.ratt")
    _write(out, "metrics.jsonl", metrics_jsonl(res.metrics), artifacts)
    write_manifest(out, "train", argv, run_cfg.to_dict(), {"seed": args.seed}, artifacts, started)
    _emit({"out": out, "steps": run_cfg.steps, "final_accuracy": res.final_accuracy})
    return EXIT_OK


def cmd_similarity(args, argv):
    from . import similarity as sim
    from .model import ReuseTransformer, checkpoint
    from .tasks import read_corpus
    from .training import capture_attention

    started = _now()
    if args.capture_file:
        if not os.path.exists(args.capture_file):
            raise UsageError(f"file not found: {args.capture_file}")
        capture = sim.read_capture(args.capture_file)
        model_id, data_id = os.path.basename(args.capture_file), os.path.basename(args.capture_file)
    else:
        if not args.checkpoint or not args.corpus:
            raise UsageError("similarity needs --capture-file or both --checkpoint and --corpus")
        for p in (args.checkpoint, args.corpus):
            if not os.path.exists(p):
                raise UsageError(f"file not found: {p}")
        ck = checkpoint.load(args.checkpoint)
        corpus = read_corpus(args.corpus)
        if corpus.shape[1] > ck.config.max_len or corpus.max() >= ck.config.vocab_size:
            raise UsageError(
                f"corpus (length {corpus.shape[1]}, max id {corpus.max()}) does not fit the checkpoint "
                f"(max_len {ck.config.max_len}, vocab {ck.config.vocab_size})"
            )
        capture = capture_attention(ReuseTransformer(ck.config, ck.params), corpus)
        model_id, data_id = os.path.basename(args.checkpoint), os.path.basename(args.corpus)
    sizes = _parse_int_list(args.convergence) if args.convergence else None
    report = sim.analyze(capture, model=model_id, dataset=data_id, sample_sizes=sizes)
    out = _prepare_out(args.out)
    artifacts = []
    _write(out, "similarity.json", report.to_json() + "\n", artifacts)
    _write(out, "all_pairs.csv", _matrix_csv(report.all_pairs, capture.layer_ids), artifacts)
    if report.adjacent_profiles is not None:
        _write(out, "adjacent_profiles.csv", _profile_csv(report.adjacent_profiles, capture.layer_ids), artifacts)
    labels = [str(i) for i in capture.layer_ids]
    _write(out, "all_pairs.svg", sim.heatmap_svg(report.all_pairs, labels=labels), artifacts)
    if sizes:
        for s, m in report.convergence.items():
            _write(out, f"all_pairs_T{s}.svg", sim.heatmap_svg(m, title=f"best-head similarity, T={s}", labels=labels), artifacts)
    if args.dump_capture:
        sim.write_capture(os.path.join(out, "capture.bin"), capture)
        artifacts.append("capture.bin")
    write_manifest(out, "similarity", argv, {"convergence": sizes}, {}, artifacts, started)
    vals = report.all_pairs
    _emit({"out": out, "T": capture.T, "L": capture.L, "H": capture.H,
           "min": float(vals.min()), "max": float(vals.max())})
    in_range = bool(np.all((vals >= 0) & (vals <= 1)))
    return EXIT_OK if in_range else EXIT_FAIL


def _matrix_csv(m, ids):
    lines = ["source\\target," + ",".join(f"L{i}" for i in ids)]
    for i, row in zip(ids, m):
        lines.append(f"L{i}," + ",".join(repr(float(v)) for v in row))
    return "\n".join(lines) + "\n"


def _profile_csv(p, ids):
    H = p.shape[1]
    lines = ["layer,previous," + ",".join(f"rank{r}" for r in range(1, H + 1))]
    for k, row in enumerate(p):
        lines.append(f"L{ids[k + 1]},L{ids[k]}," + ",".join(repr(float(v)) for v in row))
    return "\n".join(lines) + "\n"


LEMMA1_TOL = 0.05


def cmd_theory(args, argv):
    from . import theory

    started = _now()
    if args.lemma == "lemma1":
        dists = theory.DISTRIBUTIONS if args.distribution == "all" else (args.distribution,)
        verdicts = []
        for dist in dists:
            est = theory.lemma1_mc(args.d, args.n, args.samples, dist, args.seed)
            verdicts.append({
                "distribution": dist, "d": args.d, "n": args.n, "samples": est.samples,
                "seed": args.seed, "lhs": est.lhs, "rhs": est.rhs, "ratio": est.ratio,
                "tolerance": LEMMA1_TOL, "passed": abs(est.ratio - 1.0) <= LEMMA1_TOL,
            })
        verdict = {"lemma": "lemma1", "results": verdicts, "passed": all(v["passed"] for v in verdicts)}
        rows_csv = None
    else:
        eps = _parse_float_list(args.epsilon)
        try:
            rows = theory.lemma2_trials(args.trials, args.n, args.d, args.seed, eps)
        except ValueError as exc:
            raise UsageError(str(exc)) from None
        verdict = {
            "lemma": "lemma2", "trials": args.trials, "n": args.n, "d": args.d, "seed": args.seed,
            "slack": theory.HOLD_SLACK,
            "per_epsilon": [
                {
                    "epsilon_target": e,
                    "max_err": max(r["err"] for r in rows if r["epsilon_target"] == e),
                    "max_err_over_bound": max(r["ratio"] for r in rows if r["epsilon_target"] == e),
                    "bound_at_target": theory.reuse_bound(e),
                    "all_hold": all(r["holds"] for r in rows if r["epsilon_target"] == e),
                }
                for e in eps
            ],
            "passed": all(r["holds"] for r in rows),
        }
        from .training import rows_to_csv

        rows_csv = rows_to_csv(rows)
    _emit(verdict)
    if args.out:
        out = _prepare_out(args.out)
        artifacts = []
        _write(out, f"{args.lemma}.json", json.dumps(verdict, indent=2) + "\n", artifacts)
        if rows_csv:
            _write(out, "epsilon_sweep.csv", rows_csv, artifacts)
        write_manifest(out, "theory " + args.lemma, argv, vars(args) | {"func": None}, {"seed": args.seed}, artifacts, started)
    return EXIT_OK if verdict["passed"] else EXIT_FAIL


def cmd_cost(args, argv):
    from . import cost

    started = _now()
    cfg = load_config(args.config)
    if "model" not in cfg:
        raise UsageError(f"{args.config}: no model section")
    opts = cfg["cost"]
    n = args.n or opts.get("n") or cfg["model"].max_len
    kw = {"vocab": args.vocab or opts.get("vocab"),
          "tie_embeddings": not args.untied and opts.get("tie_embeddings", True),
          "flops_per_mac": opts.get("flops_per_mac", 2)}
    if args.sweep_k:
        base_cfg = load_config(args.baseline)["model"] if args.baseline else None
        try:
            reports = cost.cost_sweep(cfg["model"], _parse_int_list(args.sweep_k), n, base_cfg, **kw)
        except ValueError as exc:
            raise UsageError(str(exc)) from None
    else:
        base_cfg = load_config(args.baseline)["model"] if args.baseline else None
        rep = cost.model_cost(cfg["model"], n, name=os.path.basename(args.config), **kw)
        if base_cfg is not None:
            cost.with_baseline(rep, cost.model_cost(base_cfg, n, name=os.path.basename(args.baseline), **kw))
        reports = [rep]
    text = cost.reports_to_csv(reports) if args.format == "csv" else cost.reports_to_json(reports) + "\n"
    sys.stdout.write(text)
    out = _prepare_out(args.out)
    if out:
        artifacts = []
        _write(out, f"cost.{args.format}", text, artifacts)
        write_manifest(out, "cost", argv, {"n": n, **kw}, {}, artifacts, started)
    return EXIT_OK


def cmd_gradcheck(args, argv):
    from . import gradcheck

    names = list(gradcheck.SCHEDULES) if args.schedule == "all" else [args.schedule]
    res = gradcheck.run(names, seed=args.seed, corrupt=args.corrupt_gradient)
    summary = {k: {kk: v[kk] for kk in ("max_rel_error", "worst_param", "passed")} for k, v in res.items()}
    ok = all(v["passed"] for v in res.values())
    _emit({"tolerance": gradcheck.TOLERANCE, "seed": args.seed, "results": summary, "passed": ok})
    return EXIT_OK if ok else EXIT_FAIL


def cmd_sweep(args, argv):
    from .training import ablation_sweep, rows_to_csv

    started = _now()
    cfg = load_config(args.config)
    run_cfg = _train_config(cfg, args.seed, args.steps, args.task)
    rows = ablation_sweep(run_cfg, _parse_int_list(args.k))
    text = rows_to_csv(rows)
    sys.stdout.write(text)
    if args.out:
        out = _prepare_out(args.out)
        artifacts = []
        _write(out, "sweep.csv", text, artifacts)
        write_manifest(out, "sweep", argv, run_cfg.to_dict(), {"seed": args.seed}, artifacts, started)
    return EXIT_OK


def cmd_compare_random(args, argv):
    from .training import trained_vs_random_similarity

    started = _now()
    rep = trained_vs_random_similarity(args.seed, steps=args.steps,
                                       include_random_data_model=not args.skip_random_data)
    rep["passed"] = rep["gap"] > 0.1 and rep["random_init_probe_swap"] < 0.05
    _emit(rep)
    if args.out:
        out = _prepare_out(args.out)
        artifacts = []
        _write(out, "compare_random.json", json.dumps(rep, indent=2) + "\n", artifacts)
        write_manifest(out, "compare-random", argv, {"steps": args.steps}, {"seed": args.seed}, artifacts, started)
    return EXIT_OK if rep["passed"] else EXIT_FAIL


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------

def build_parser():
    p = argparse.ArgumentParser(prog="reuselab", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=__version__)
    p.add_argument("--threads", type=int, default=1, help="BLAS threads (1 keeps runs bitwise reproducible)")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train a model on a synthetic task")
    t.add_argument("--config", required=True)
    t.add_argument("--seed", type=int, required=True)
    t.add_argument("--task", choices=["copy", "reverse", "sort", "masked"])
    t.add_argument("--steps", type=int)
    t.add_argument("--out", required=True)
    t.add_argument("--verbose", action="store_true")
    t.set_defaults(func=cmd_train)

    s = sub.add_parser("similarity", help="cross-layer attention similarity report")
    s.add_argument("--checkpoint")
    s.add_argument("--corpus", help="newline-delimited token ids")
    s.add_argument("--capture-file", help="precomputed capture dump")
    s.add_argument("--convergence", help="comma-separated sample sizes, e.g. 32,128,256")
    s.add_argument("--dump-capture", action="store_true")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_similarity)

    th = sub.add_parser("theory", help="numerical lemma checks")
    th.add_argument("lemma", choices=["lemma1", "lemma2"])
    th.add_argument("--seed", type=int, required=True)
    th.add_argument("--d", type=int, default=16)
    th.add_argument("--n", type=int, default=8)
    th.add_argument("--samples", type=int, default=100_000)
    th.add_argument("--distribution", choices=["gaussian", "rademacher", "all"], default="all")
    th.add_argument("--trials", type=int, default=200)
    th.add_argument("--epsilon", default="0,0.05,0.1,0.25,0.5",
                    help="comma-separated epsilon targets for lemma2")
    th.add_argument("--out")
    th.set_defaults(func=cmd_theory)

    c = sub.add_parser("cost", help="parameter / FLOP accounting")
    c.add_argument("--config", required=True)
    c.add_argument("--baseline")
    c.add_argument("--n", type=int)
    c.add_argument("--vocab", type=int)
    c.add_argument("--untied", action="store_true", help="count a separate output projection")
    c.add_argument("--sweep-k", help="K values, e.g. 0..12 or 0,6,12")
    c.add_argument("--format", choices=["csv", "json"], default="csv")
    c.add_argument("--out", help="directory for cost.csv/cost.json and a manifest")
    c.set_defaults(func=cmd_cost)

    g = sub.add_parser("gradcheck", help="backprop vs finite differences on a tiny model")
    g.add_argument("--seed", type=int, required=True)
    g.add_argument("--schedule", default="all",
                   choices=["all", "baseline", "partial", "full", "alternate", "allend", "skip"])
    g.add_argument("--corrupt-gradient", action="store_true", help=argparse.SUPPRESS)
    g.set_defaults(func=cmd_gradcheck)

    w = sub.add_parser("sweep", help="train one model per reused-head count K")
    w.add_argument("--config", required=True)
    w.add_argument("--seed", type=int, required=True)
    w.add_argument("--k", required=True, help="K values, e.g. 0,2,4")
    w.add_argument("--task", choices=["copy", "reverse", "sort", "masked"])
    w.add_argument("--steps", type=int)
    w.add_argument("--out")
    w.set_defaults(func=cmd_sweep)

    r = sub.add_parser("compare-random", help="trained vs random-init similarity")
    r.add_argument("--seed", type=int, required=True)
    r.add_argument("--steps", type=int, default=3000)
    r.add_argument("--skip-random-data", action="store_true",
                   help="omit the model trained on uniform-random tokens")
    r.add_argument("--out")
    r.set_defaults(func=cmd_compare_random)
    return p


def main(argv=None):
    argv = sys.argv[1:] if argv is None else argv
    parser = build_parser()
    args = parser.parse_args(argv)
    from .model.checkpoint import CheckpointError
    from .model.schedule import ConfigError
    from .similarity import CaptureError

    with threadpool_limits(limits=max(1, args.threads)):
        try:
            return args.func(args, argv)
        except (UsageError, ConfigError, CaptureError, CheckpointError) as exc:
            print(f"reuselab {args.command}: error: {exc}", file=sys.stderr)
            return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
