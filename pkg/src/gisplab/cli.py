"""Command-line surface: train, prune, eval, sweep, trace, defaults.

One command is one process; outputs are written atomically (temp file then
rename) and are idempotent given identical inputs and seeds, except for the
informational wall-clock column in sweep CSVs. Exit codes: 0 success,
1 numeric/constraint failure, 2 usage or configuration error.
"""

from __future__ import annotations

import argparse
import copy
import csv
import io
import json
import os
import sys
import tempfile
import time
from importlib import resources

import numpy as np

from . import autodiff as ad
from . import baselines as B
from . import data_eval as D
from . import engine as E
from . import importance as I
from . import model as M
from . import textgen

EXIT_OK = 0
EXIT_NUMERIC = 1
EXIT_USAGE = 2


class ConfigError(ValueError):
    """Bad or inconsistent run configuration; maps to exit code 2."""


DEFAULT_CONFIG = {
    "model": {"n_layers": 8, "n_heads": 4, "d_model": 64, "d_ff": 192,
              "vocab_size": 256, "max_seq_len": 64, "rng_seed": 0},
    "corpus": "bundled",
    "objective": "perplexity",
    "calibration": {"n_samples": 256, "seq_len": 64, "seed": 0,
                    "source": "corpus"},
    "qa": {"count": 128, "negatives": 3, "seed": 0, "file": None},
    "schedule": {"target_ratio": 0.5, "n_iterations": 32,
                 "budget_mode": "param"},
    "protected": "default",
    "train": {"steps": 2000, "learning_rate": 0.002, "batch": 16, "seed": 0},
    "eval": {"n_sequences": 256, "seq_len": 64, "seed": 99},
    "seeds": [0],
    "output_dir": "runs",
}


def load_config(path: str | None) -> dict:
    cfg = copy.deepcopy(DEFAULT_CONFIG)
    if path is None:
        return cfg
    try:
        with open(path, "r", encoding="utf-8") as f:
            user = json.load(f)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}")
    except json.JSONDecodeError as e:
        raise ConfigError(f"config is not valid JSON: {e}")
    for key, value in user.items():
        if key not in cfg:
            raise ConfigError(f"unknown config key {key!r}")
        if isinstance(cfg[key], dict) and isinstance(value, dict):
            unknown = set(value) - set(cfg[key])
            if unknown:
                raise ConfigError(f"unknown keys in {key!r}: {sorted(unknown)}")
            cfg[key].update(value)
        else:
            cfg[key] = value
    validate_config(cfg)
    return cfg


def validate_config(cfg: dict) -> None:
    if cfg["objective"] not in (D.PERPLEXITY, D.MARGIN):
        raise ConfigError(f"unknown objective {cfg['objective']!r}")
    if cfg["objective"] == D.MARGIN:
        qa = cfg["qa"]
        if not qa.get("file") and not qa.get("count"):
            raise ConfigError("margin objective needs a qa file or qa.count > 0")
    if cfg["calibration"]["source"] not in ("corpus", "qa_text", "qa_file"):
        raise ConfigError("calibration.source must be corpus, qa_text or qa_file")
    if cfg["protected"] != "default" and not all(
            isinstance(p, int) for p in cfg["protected"]):
        raise ConfigError("protected must be 'default' or a list of layer indices")
    try:
        model_config(cfg)
        E.ScheduleSpec.from_dict(cfg["schedule"])
    except ValueError as e:
        raise ConfigError(str(e))


def model_config(cfg: dict) -> M.ModelConfig:
    return M.ModelConfig(**cfg["model"])


def load_corpus(cfg: dict) -> bytes:
    spec = cfg["corpus"]
    if spec == "bundled":
        ref = resources.files("gisplab").joinpath("data/corpus.txt")
        return ref.read_bytes()
    if not os.path.exists(spec):
        raise ConfigError(f"corpus file not found: {spec}")
    with open(spec, "rb") as f:
        return f.read()


def protected_set(cfg: dict, config: M.ModelConfig) -> frozenset[int]:
    if cfg["protected"] == "default":
        return E.default_protected_layers(config)
    return frozenset(cfg["protected"])


def qa_items(cfg: dict) -> list[D.QAItem]:
    qa = cfg["qa"]
    if qa.get("file"):
        if not os.path.exists(qa["file"]):
            raise ConfigError(f"qa file not found: {qa['file']}")
        return D.load_qa_file(qa["file"])
    return D.make_synthetic_qa(count=qa["count"], seed=qa["seed"],
                               n_negatives=qa["negatives"])


def build_objective(cfg: dict, corpus: bytes, seed: int) -> I.Objective:
    cal = cfg["calibration"]
    if cfg["objective"] == D.MARGIN:
        return I.Objective(D.MARGIN, D.CalibrationSet(
            kind=D.MARGIN, items=qa_items(cfg)))
    if cal["source"] == "corpus":
        text = D.tokenize(corpus)
        text = text[:int(len(text) * 0.98)]  # keep clear of the held-out tail
    elif cal["source"] == "qa_text":
        text = D.tokenize(D.qa_register_text(size=200_000))
    else:
        rows = [np.concatenate([i.prompt, i.positive]) for i in qa_items(cfg)]
        text = np.concatenate(
            [np.concatenate([r, D.tokenize("\n")]) for r in rows])
    sample = D.sample_calibration(text, cal["n_samples"], cal["seq_len"], seed)
    return I.Objective(D.PERPLEXITY, sample)


def eval_sequences(cfg: dict, corpus: bytes) -> np.ndarray:
    ev = cfg["eval"]
    held = M.heldout_slice(D.tokenize(corpus), seq_len=ev["seq_len"])
    return D.sample_calibration(held, ev["n_sequences"], ev["seq_len"],
                                ev["seed"]).sequences


# -- atomic output helpers ------------------------------------------------------


def write_atomic(path: str, data: "bytes | str") -> None:
    mode = "wb" if isinstance(data, bytes) else "w"
    d = os.path.dirname(os.path.abspath(path))
    os.makedirs(d, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=d, prefix=".tmp-")
    try:
        with os.fdopen(fd, mode) as f:
            f.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def save_checkpoint_atomic(path: str, weights: M.TransformerWeights,
                           manifest_extra: dict | None = None) -> str:
    data = M.checkpoint_bytes(weights)
    fp = M.checkpoint_fingerprint(data)
    write_atomic(path, data)
    manifest = {"config": weights.config.to_dict(),
                "seed": weights.config.rng_seed,
                "param_count": weights.param_count(),
                "fingerprint": fp,
                "format_version": M.CHECKPOINT_VERSION}
    if manifest_extra:
        manifest.update(manifest_extra)
    write_atomic(path + ".json",
                 json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return fp


# -- commands -------------------------------------------------------------------


def cmd_defaults(args) -> int:
    print(json.dumps(DEFAULT_CONFIG, indent=2, sort_keys=True))
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = load_config(args.config)
    out_dir = args.out or cfg["output_dir"]
    corpus = load_corpus(cfg)
    config = model_config(cfg)
    tr = cfg["train"]
    t0 = time.perf_counter()
    weights = M.train_dense(config, D.tokenize(corpus), steps=tr["steps"],
                            learning_rate=tr["learning_rate"],
                            batch=tr["batch"], seed=tr["seed"])
    took = time.perf_counter() - t0
    path = os.path.join(out_dir, "model.ckpt")
    fp = save_checkpoint_atomic(path, weights, {
        "run_config": cfg, "phase": "train"})
    print(f"trained {tr['steps']} steps in {took:.1f}s -> {path} ({fp})")
    return EXIT_OK


def _export_milestones(args, cfg, out_dir, dense_weights, trace) -> None:
    for ratio in parse_floats(args.milestones):
        _, cw, _ = E.reconstruct(trace, dense_weights, ratio)
        path = os.path.join(out_dir, f"milestone_{ratio:g}.ckpt")
        save_checkpoint_atomic(path, cw, {"phase": "milestone",
                                          "target_ratio": ratio})
        print(f"milestone {ratio:g} -> {path}")


def cmd_prune(args) -> int:
    cfg = load_config(args.config)
    out_dir = args.out or cfg["output_dir"]
    if not os.path.exists(args.checkpoint):
        raise ConfigError(f"checkpoint not found: {args.checkpoint}")
    weights = M.load_checkpoint(args.checkpoint)
    config = weights.config
    corpus = load_corpus(cfg)
    protected = protected_set(cfg, config)
    seed = args.seed if args.seed is not None else cfg["seeds"][0]
    schedule = E.ScheduleSpec.from_dict(cfg["schedule"])
    if args.ratio is not None:
        schedule = E.ScheduleSpec(args.ratio, schedule.n_iterations,
                                  schedule.budget_mode)
    if args.iterations is not None:
        schedule = E.ScheduleSpec(schedule.target_ratio, args.iterations,
                                  schedule.budget_mode)

    t0 = time.perf_counter()
    if args.method in ("gisp", "oneshot"):
        objective = build_objective(cfg, corpus, seed)
        if args.method == "oneshot":
            schedule = E.ScheduleSpec(schedule.target_ratio, 1,
                                      schedule.budget_mode)
        result = E.gisp_run(weights, objective, schedule,
                            protected=protected, seed=seed)
        trace_path = os.path.join(out_dir, f"{args.method}_trace.jsonl")
        write_atomic(trace_path, result.trace.to_jsonl())
        print(f"trace -> {trace_path}")
        for phase, secs in result.timings.items():
            print(f"  phase {phase}: {secs:.2f}s")
        if args.milestones:
            _export_milestones(args, cfg, out_dir, weights, result.trace)
        masks, compact_weights = result.masks, result.compact_weights
    else:
        if args.method == "wanda_sp":
            calib = build_objective(cfg, corpus, seed)
            if calib.kind != D.PERPLEXITY:
                raise ConfigError("wanda_sp needs perplexity-style calibration")
            t1 = time.perf_counter()
            stats = B.collect_activation_stats(weights,
                                               calib.calibration.sequences)
            print(f"  phase activations: {time.perf_counter() - t1:.2f}s")
            masks = B.wanda_sp(weights, stats, schedule.target_ratio, protected)
            print("note: wanda_sp emits no trace file; each ratio is an "
                  "independent run")
        else:
            masks = B.magnitude_global(weights, schedule.target_ratio, protected)
        compact_weights, _ = M.compact(weights, masks)
    took = time.perf_counter() - t0

    path = os.path.join(out_dir,
                        f"pruned_{args.method}_{schedule.target_ratio:g}.ckpt")
    save_checkpoint_atomic(path, compact_weights, {
        "phase": "prune", "method": args.method,
        "target_ratio": schedule.target_ratio,
        "masks_fingerprint": masks.fingerprint(),
        "dense_fingerprint": M.checkpoint_fingerprint(
            M.checkpoint_bytes(weights))})
    print(f"pruned model -> {path} ({took:.1f}s)")
    return EXIT_OK


def _resolve_eval_weights(args, cfg):
    """(weights, masks, label) for eval; masks stay None for compacted models."""
    if args.trace:
        if not args.dense_checkpoint:
            raise ConfigError("--trace needs --dense-checkpoint")
        trace = E.load_trace(args.trace)
        dense = M.load_checkpoint(args.dense_checkpoint)
        target = parse_target(args.target)
        _, weights, _ = E.reconstruct(trace, dense, target)
        return weights, None, f"{args.trace}@{args.target}"
    if not args.checkpoint:
        raise ConfigError("eval needs --checkpoint or --trace")
    if not os.path.exists(args.checkpoint):
        raise ConfigError(f"checkpoint not found: {args.checkpoint}")
    return M.load_checkpoint(args.checkpoint), None, args.checkpoint


def cmd_eval(args) -> int:
    cfg = load_config(args.config)
    out_dir = args.out or cfg["output_dir"]
    corpus = load_corpus(cfg)
    weights, masks, label = _resolve_eval_weights(args, cfg)
    seqs = eval_sequences(cfg, corpus)
    ppl = D.perplexity(weights, masks, seqs)
    items = qa_items(cfg)
    acc, decisions = D.qa_accuracy(weights, masks, items, "acc",
                                   return_decisions=True)
    acc_norm = D.qa_accuracy(weights, masks, items, "acc_norm")
    fp = (masks.fingerprint() if masks is not None
          else M.checkpoint_fingerprint(M.checkpoint_bytes(weights)))
    report = D.EvalReport(perplexity=ppl, accuracy=acc, accuracy_norm=acc_norm,
                          decisions=decisions, masks_fingerprint=fp)
    report_path = os.path.join(out_dir, "eval_report.json")
    write_atomic(report_path, report.to_json())
    csv_path = os.path.join(out_dir, "eval_report.csv")
    buf = io.StringIO()
    writer = csv.writer(buf)
    writer.writerow(["source", "perplexity", "acc", "acc_norm",
                     "masks_fingerprint"])
    writer.writerow([label, f"{ppl:.6f}", f"{acc:.6f}", f"{acc_norm:.6f}", fp])
    write_atomic(csv_path, buf.getvalue())
    print(f"ppl={ppl:.4f} acc={acc:.4f} acc_norm={acc_norm:.4f}")
    print(f"report -> {report_path}")
    return EXIT_OK


def _sweep_methods(args, cfg) -> list[str]:
    methods = parse_list(args.methods) if args.methods else ["gisp", "wanda_sp"]
    for m in methods:
        if m not in ("gisp", "oneshot", "wanda_sp", "magnitude"):
            raise ConfigError(f"unknown method {m!r}")
    return methods


def cmd_sweep(args) -> int:
    cfg = load_config(args.config)
    out_dir = args.out or cfg["output_dir"]
    if not os.path.exists(args.checkpoint):
        raise ConfigError(f"checkpoint not found: {args.checkpoint}")
    weights = M.load_checkpoint(args.checkpoint)
    config = weights.config
    corpus = load_corpus(cfg)
    protected = protected_set(cfg, config)
    ratios = parse_floats(args.ratios) if args.ratios else []
    seeds = parse_ints(args.seeds) if args.seeds else cfg["seeds"]
    methods = _sweep_methods(args, cfg)
    seqs = eval_sequences(cfg, corpus)
    items = qa_items(cfg)
    schedule = E.ScheduleSpec.from_dict(cfg["schedule"])
    budget, _ = E.prunable_budget(config, protected)

    rows = []
    profiles = {}
    for seed in seeds:
        objective = None
        once_traces = {}
        for method in methods:
            if method in ("gisp", "oneshot") and objective is None:
                objective = build_objective(cfg, corpus, seed)
            if method == "wanda_sp":
                stats = B.collect_activation_stats(
                    weights, build_objective(cfg, corpus, seed)
                    .calibration.sequences)
            for ratio in ratios:
                t0 = time.perf_counter()
                if method == "gisp" and args.once_for_all:
                    if seed not in once_traces:
                        top = max(ratios)
                        res = E.gisp_run(
                            weights, objective,
                            E.ScheduleSpec(top, schedule.n_iterations,
                                           schedule.budget_mode),
                            protected=protected, seed=seed)
                        once_traces[seed] = res.trace
                    k = E.resolve_target(once_traces[seed], ratio)
                    masks = E.replay_masks(once_traces[seed], config, k)
                elif method == "gisp":
                    res = E.gisp_run(weights, objective,
                                     E.ScheduleSpec(ratio,
                                                    schedule.n_iterations,
                                                    schedule.budget_mode),
                                     protected=protected, seed=seed)
                    masks = res.masks
                elif method == "oneshot":
                    masks = E.one_shot(weights, objective, ratio,
                                       protected, seed=seed).masks
                elif method == "wanda_sp":
                    masks = B.wanda_sp(weights, stats, ratio, protected)
                else:
                    masks = B.magnitude_global(weights, ratio, protected)
                ppl = D.perplexity(weights, masks, seqs)
                acc = D.qa_accuracy(weights, masks, items, "acc")
                acc_norm = D.qa_accuracy(weights, masks, items, "acc_norm")
                fraction = masks.removed_param_count() / budget
                secs = time.perf_counter() - t0
                rows.append([method, f"{ratio:g}", seed, f"{ppl:.6f}",
                             f"{acc:.6f}", f"{acc_norm:.6f}",
                             f"{fraction:.6f}", f"{secs:.2f}"])
                profiles[(method, ratio, seed)] = E.sparsity_profile(masks,
                                                                     config)
                print(f"{method} r={ratio:g} seed={seed}: ppl={ppl:.4f} "
                      f"acc_norm={acc_norm:.4f} ({secs:.1f}s)")

    buf = io.StringIO()
    writer = csv.writer(buf)
    writer.writerow(["method", "ratio", "seed", "perplexity", "acc",
                     "acc_norm", "pruned_fraction", "wall_seconds"])
    writer.writerows(rows)
    sweep_path = os.path.join(out_dir, "sweep.csv")
    write_atomic(sweep_path, buf.getvalue())
    for (method, ratio, seed), prof in profiles.items():
        pbuf = io.StringIO()
        pw = csv.writer(pbuf)
        pw.writerow(["layer", "attn_kept_fraction", "mlp_kept_fraction"])
        for p in prof:
            pw.writerow([p["layer"], f"{p['attn_kept_fraction']:.6f}",
                         f"{p['mlp_kept_fraction']:.6f}"])
        write_atomic(os.path.join(
            out_dir, f"profile_{method}_{ratio:g}_s{seed}.csv"),
            pbuf.getvalue())
    print(f"sweep -> {sweep_path}")
    return EXIT_OK


def cmd_trace(args) -> int:
    trace = E.load_trace(args.trace_file)
    if args.action == "check":
        ok, dup = E.nested_check(trace)
        print(f"nested: {'true' if ok else 'false'}")
        if not ok:
            print(f"first duplicate removal: {dup}")
            return EXIT_NUMERIC
        return EXIT_OK
    if args.action == "profile":
        if not args.dense_checkpoint:
            raise ConfigError("trace profile needs --dense-checkpoint")
        dense = M.load_checkpoint(args.dense_checkpoint)
        target = parse_target(args.target) if args.target else \
            trace.records[-1].iteration
        masks, _, _ = E.reconstruct(trace, dense, target)
        buf = io.StringIO()
        writer = csv.writer(buf)
        writer.writerow(["layer", "attn_kept_fraction", "mlp_kept_fraction"])
        for p in E.sparsity_profile(masks, dense.config):
            writer.writerow([p["layer"], f"{p['attn_kept_fraction']:.6f}",
                             f"{p['mlp_kept_fraction']:.6f}"])
        out = args.out or "trace_profile.csv"
        write_atomic(out, buf.getvalue())
        print(f"profile -> {out}")
        return EXIT_OK
    # reconstruct
    if not args.dense_checkpoint:
        raise ConfigError("trace reconstruct needs --dense-checkpoint")
    if args.target is None:
        raise ConfigError("trace reconstruct needs --target")
    dense = M.load_checkpoint(args.dense_checkpoint)
    _, cw, _ = E.reconstruct(trace, dense, parse_target(args.target))
    out = args.out or "reconstructed.ckpt"
    save_checkpoint_atomic(out, cw, {"phase": "reconstruct",
                                     "target": args.target})
    print(f"reconstructed -> {out}")
    return EXIT_OK


# -- argument plumbing ----------------------------------------------------------


def parse_list(text: str) -> list[str]:
    return [t.strip() for t in text.split(",") if t.strip()]


def parse_floats(text: str) -> list[float]:
    return [float(t) for t in parse_list(text)]


def parse_ints(text: str) -> list[int]:
    return [int(t) for t in parse_list(text)]


def parse_target(text):
    """Iteration index (int) or cumulative ratio (float with a dot)."""
    s = str(text)
    return float(s) if "." in s else int(s)


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="gisplab",
        description="global iterative structured pruning laboratory")
    sub = p.add_subparsers(dest="command", required=True)

    sub.add_parser("defaults", help="print the default run config")

    t = sub.add_parser("train", help="train the dense tiny model")
    t.add_argument("--config")
    t.add_argument("--out")

    pr = sub.add_parser("prune", help="run a pruning method")
    pr.add_argument("--config")
    pr.add_argument("--checkpoint", required=True)
    pr.add_argument("--method", required=True,
                    choices=["gisp", "oneshot", "wanda_sp", "magnitude"])
    pr.add_argument("--ratio", type=float)
    pr.add_argument("--iterations", type=int)
    pr.add_argument("--seed", type=int)
    pr.add_argument("--milestones",
                    help="comma-separated cumulative ratios to export")
    pr.add_argument("--out")

    ev = sub.add_parser("eval", help="evaluate a checkpoint or trace target")
    ev.add_argument("--config")
    ev.add_argument("--checkpoint")
    ev.add_argument("--trace")
    ev.add_argument("--target")
    ev.add_argument("--dense-checkpoint")
    ev.add_argument("--out")

    sw = sub.add_parser("sweep", help="method x ratio x seed grid")
    sw.add_argument("--config")
    sw.add_argument("--checkpoint", required=True)
    sw.add_argument("--ratios")
    sw.add_argument("--methods")
    sw.add_argument("--seeds")
    sw.add_argument("--once-for-all", action="store_true")
    sw.add_argument("--out")

    tr = sub.add_parser("trace", help="inspect or replay a trace file")
    tr.add_argument("action", choices=["check", "profile", "reconstruct"])
    tr.add_argument("trace_file")
    tr.add_argument("--target")
    tr.add_argument("--dense-checkpoint")
    tr.add_argument("--out")
    return p


COMMANDS = {
    "defaults": cmd_defaults,
    "train": cmd_train,
    "prune": cmd_prune,
    "eval": cmd_eval,
    "sweep": cmd_sweep,
    "trace": cmd_trace,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return COMMANDS[args.command](args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except FileNotFoundError as e:
        print(f"missing file: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (E.QuotaInfeasible, M.FloorViolation, M.DivergenceError,
            ad.NonFiniteError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
