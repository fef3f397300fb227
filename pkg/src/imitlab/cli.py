"""Command-line front end.

Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import math
import os
import sys
import time
import warnings

import numpy as np

from .checkpoint import CheckpointError, load_checkpoint
from .config import ConfigError, ExperimentConfig, dump_config, load_config, task_params
from .envs import ToyMdp, gen_dataset, make_task, read_dataset, write_dataset
from .evalsuite import (evaluate_policy, reward_metric_correlation, run_toy_comparison,
                        toy_gap_table, toy_rows_as_dicts, ToyTrainConfig)
from .objectives import IqlConfig
from .policy import SamplerConfig
from .trainer import HISTORY_COLUMNS, rollout_max_len, setup_experiment, train

EXIT_OK, EXIT_RUNTIME, EXIT_USAGE = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


# ------------------------------------------------------------------ helpers

def _parse_overrides(items: list[str]) -> dict[str, str]:
    out = {}
    for item in items or []:
        if "=" not in item:
            raise UsageError(f"--set expects key=value, got {item!r}")
        k, v = item.split("=", 1)
        out[k.strip()] = v
    return out


def _read_config(path: str | None, overrides: dict[str, str]) -> ExperimentConfig:
    if path is None:
        cfg = ExperimentConfig()
    else:
        if not os.path.isfile(path):
            raise UsageError(f"config file not found: {path}")
        cfg = load_config(path)
    return cfg.with_overrides(overrides)


def _write_json(path: str, obj) -> None:
    tmp = path + ".tmp"
    with open(tmp, "w", encoding="utf-8") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True, default=_json_default)
        fh.write("\n")
    os.replace(tmp, path)


def _json_default(o):
    if isinstance(o, (np.floating, np.integer)):
        return o.item()
    raise TypeError(f"cannot serialise {type(o).__name__}")


def _clean(x):
    """NaN becomes ``None`` so reports are valid JSON."""
    if isinstance(x, float) and math.isnan(x):
        return None
    if isinstance(x, dict):
        return {k: _clean(v) for k, v in x.items()}
    if isinstance(x, list):
        return [_clean(v) for v in x]
    return x


def _csv_text(rows: list[dict], columns) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=list(columns), extrasaction="ignore", lineterminator="\n")
    w.writeheader()
    for r in rows:
        w.writerow({k: _cell(r.get(k)) for k in columns})
    return buf.getvalue()


def _cell(v):
    if v is None:
        return ""
    if isinstance(v, float):
        return "nan" if math.isnan(v) else repr(v)
    return v


def _emit(text: str, path: str | None) -> None:
    if path:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(text)
    else:
        sys.stdout.write(text)


def _load_policy(path: str):
    if not os.path.isfile(path):
        raise UsageError(f"checkpoint not found: {path}")
    ck = load_checkpoint(path)
    if not hasattr(ck.model, "vocab"):
        raise UsageError(f"{path} holds a scalar network, not a policy")
    return ck


def _task_for(ck, kind: str | None):
    """Rebuild the task the checkpoint was trained on and check vocabularies agree."""
    saved = ck.extra.get("config")
    if saved is not None:
        cfg = ExperimentConfig().with_overrides({k: _flat(v) for k, v in saved.items()})
    else:
        cfg = ExperimentConfig()
    if kind is not None:
        if saved is not None and kind != cfg.task:
            raise UsageError(f"checkpoint was trained on task {cfg.task!r}, not {kind!r}")
        cfg = cfg.replace(task=kind)
    task = make_task(cfg.task, **task_params(cfg))
    if tuple(task.vocab.tokens) != tuple(ck.model.vocab.tokens):
        raise UsageError(f"vocabulary mismatch between checkpoint and task {cfg.task!r}")
    return task, cfg


def _flat(v) -> str:
    return ", ".join(map(repr, v)) if isinstance(v, list) else str(v)


def _eval_prompts(task, cfg: ExperimentConfig, n: int, seed: int):
    val = gen_dataset(task, max(n * max(1, task.refs_per_prompt), n), seed=seed)
    return list(dict.fromkeys(t.prompt for t in val))[:n]


# ------------------------------------------------------------------- train

def run_training(cfg: ExperimentConfig, out_dir: str, data_path: str | None = None,
                 resume: bool = False) -> dict:
    """One complete run into ``out_dir``; returns the final report."""
    os.makedirs(out_dir, exist_ok=True)
    paths = {"manifest": "manifest.json", "history_csv": "history.csv",
             "history_json": "history.json", "report": "report.json",
             "checkpoint": "checkpoint.bin", "config": "config.cfg", "train_data": "train.tsv"}
    manifest = {"run_id": cfg.run_id, "config": cfg.to_dict(), "config_hash": cfg.content_hash(),
                "artifacts": paths, "status": "running", "timings_s": {}}
    _write_json(os.path.join(out_dir, "manifest.json"), manifest)
    with open(os.path.join(out_dir, "config.cfg"), "w", encoding="utf-8") as fh:
        fh.write(dump_config(cfg))

    t0 = time.perf_counter()
    ex = setup_experiment(cfg)
    if data_path is not None:
        ex.train_set = read_dataset(data_path)
        bad = [t for t in ex.train_set if max(t.tokens) >= len(ex.task.vocab)]
        if bad:
            raise UsageError(f"{data_path}: token ids outside the {cfg.task!r} vocabulary")
    write_dataset(os.path.join(out_dir, "train.tsv"), ex.train_set)
    t1 = time.perf_counter()
    model, history = train(cfg, ex.train_set, ex.model, task=ex.task, val_prompts=ex.val_prompts,
                           out_dir=out_dir, resume=resume)
    t2 = time.perf_counter()
    final = history.records[-1] if history.records else {}
    report = _clean({"run_id": cfg.run_id, "config_hash": cfg.content_hash(),
                     "final": final, "best_step": history.best_step,
                     "stopped_early": history.stopped_early,
                     "train_size": len(ex.train_set), "val_prompts": len(ex.val_prompts)})
    _write_json(os.path.join(out_dir, "report.json"), report)
    manifest["status"] = "complete"
    manifest["timings_s"] = {"setup": round(t1 - t0, 3), "train": round(t2 - t1, 3)}
    _write_json(os.path.join(out_dir, "manifest.json"), manifest)
    return report


def cmd_train(args) -> int:
    cfg = _read_config(args.config, _parse_overrides(args.set))
    report = run_training(cfg, args.out, args.data, args.resume)
    print(json.dumps(report["final"], sort_keys=True))
    return EXIT_OK


# -------------------------------------------------------------------- eval

EVAL_COLUMNS = ("mode", "temperature", "beam_size", "length_penalty", "accuracy", "self_bleu",
                "per_token_entropy", "samples")


def cmd_eval(args) -> int:
    ck = _load_policy(args.checkpoint)
    task, cfg = _task_for(ck, args.task)
    model = ck.model
    prompts = _eval_prompts(task, cfg, args.prompts, args.seed + 7_919)
    max_len = rollout_max_len(cfg, model, prompts)
    settings = []
    if args.mode == "sample":
        temps = [float(t) for t in args.temps.split(",") if t.strip()]
        if not temps:
            raise UsageError("--temps needs at least one value")
        settings = [SamplerConfig(temperature=t, max_len=max_len) for t in temps]
    else:
        settings = [SamplerConfig(mode=args.mode, max_len=max_len, beam_size=args.beam_size,
                                  length_penalty=args.length_penalty)]
    rows = []
    for sc in settings:
        rep = evaluate_policy(model, task, prompts, sc, args.samples, np.random.default_rng(args.seed))
        rows.append({"mode": sc.mode, "temperature": sc.temperature if sc.mode == "sample" else None,
                     "beam_size": sc.beam_size if sc.mode == "beam" else None,
                     "length_penalty": sc.length_penalty if sc.mode == "beam" else None,
                     "accuracy": rep["accuracy"], "self_bleu": rep["self_bleu"],
                     "per_token_entropy": rep["per_token_entropy"], "samples": rep["sample_count"]})
    _emit(_csv_text(rows, EVAL_COLUMNS), args.out)
    return EXIT_OK


# ------------------------------------------------------------------- sweep

def _axis(spec: str) -> tuple[str, list[str]]:
    if "=" not in spec:
        raise UsageError(f"--axis expects name=v1,v2,..., got {spec!r}")
    name, values = spec.split("=", 1)
    vals = [v.strip() for v in values.split(",") if v.strip()]
    if not vals:
        raise UsageError("--axis needs at least one value")
    return name.strip(), vals


def _sort_key(v: str):
    try:
        return (0, float(v), v)
    except ValueError:
        return (1, 0.0, v)


def cmd_sweep(args) -> int:
    base = _read_config(args.config, _parse_overrides(args.set))
    name, values = _axis(args.axis)
    runs = []
    for v in values:
        cfg = base.with_overrides({name: v})
        run_dir = os.path.join(args.out, f"{name}={v}")
        runs.append((v, cfg, run_dir))
    dirs = [os.path.realpath(d) for _, _, d in runs]
    if len(set(dirs)) != len(dirs):
        raise UsageError("axis values map to the same run directory")
    clash = [d for d in dirs if os.path.exists(d) and os.listdir(d)]
    if clash:
        raise UsageError(f"refusing to overwrite existing run directory {clash[0]}")
    parsed = [getattr(cfg, "lam" if name == "lambda" else name) for _, cfg, _ in runs]
    if len(set(map(str, parsed))) != len(parsed):
        raise UsageError("axis values are not distinct after parsing")

    merged = []
    for v, cfg, run_dir in runs:
        cfg = cfg.replace(run_id=f"{base.run_id}-{name}={v}")
        run_training(cfg, run_dir)
        with open(os.path.join(run_dir, "history.csv"), encoding="utf-8") as fh:
            for row in csv.DictReader(fh):
                merged.append({"axis": name, "axis_value": v, **row})
    merged.sort(key=lambda r: (_sort_key(r["axis_value"]), int(r["step"])))
    with open(os.path.join(args.out, "merged.csv"), "w", encoding="utf-8") as fh:
        fh.write(_csv_text(merged, ("axis", "axis_value") + HISTORY_COLUMNS))
    print(f"{len(runs)} runs, {len(merged)} merged rows -> {os.path.join(args.out, 'merged.csv')}")
    return EXIT_OK


# ----------------------------------------------------------------- toy-mdp

def cmd_toymdp(args) -> int:
    if args.seeds < 1:
        raise UsageError("--seeds must be >= 1")
    mdp = ToyMdp(chain_length=args.chain_length, noise=args.noise, horizon=args.horizon)
    tcfg = ToyTrainConfig(lam=args.lam, gamma=args.gamma, alpha=args.alpha, steps=args.steps,
                          episodes=args.episodes)
    rows = run_toy_comparison(mdp, tcfg, seeds=range(args.seeds))
    table = toy_gap_table(rows)
    os.makedirs(args.out, exist_ok=True)
    dict_rows = toy_rows_as_dicts(rows)
    with open(os.path.join(args.out, "toy_results.csv"), "w", encoding="utf-8") as fh:
        fh.write(_csv_text(dict_rows, ("variant", "algorithm", "seed", "success_rate", "stderr",
                                       "episodes")))
    gap_cols = ("variant", "offline_mean", "offline_stderr", "online_mean", "online_stderr", "gap",
                "within_bounds", "seeds")
    with open(os.path.join(args.out, "toy_gaps.csv"), "w", encoding="utf-8") as fh:
        fh.write(_csv_text(table, gap_cols))
    print(f"{'variant':<16}{'offline':>16}{'online':>16}{'gap':>9}  within 2se")
    for r in table:
        print(f"{r['variant']:<16}{r['offline_mean']:>8.3f} ±{r['offline_stderr']:.3f}"
              f"{r['online_mean']:>9.3f} ±{r['online_stderr']:.3f}{r['gap']:>+9.3f}  "
              f"{'yes' if r['within_bounds'] else 'no'}")
    return EXIT_OK


# --------------------------------------------------------------- correlate

def cmd_correlate(args) -> int:
    ck = _load_policy(args.checkpoint)
    task, cfg = _task_for(ck, args.task)
    model = ck.model
    prompts = _eval_prompts(task, cfg, args.prompts, args.seed + 7_919)
    lam = args.lam if args.lam is not None else (cfg.lam if cfg.lam > 0 else 1.0)
    iql = IqlConfig(lam=lam, gamma=args.gamma if args.gamma is not None else cfg.gamma)
    scfg = SamplerConfig(temperature=args.temperature, max_len=rollout_max_len(cfg, model, prompts))
    rows = []
    for metric in [m.strip() for m in args.metric.split(",") if m.strip()]:
        if metric not in ("task", "accuracy", "total_return"):
            raise UsageError(f"unknown metric {metric!r}")
        with warnings.catch_warnings(record=True) as caught:
            warnings.simplefilter("always")
            rep = reward_metric_correlation(model, prompts, task, scfg, iql,
                                            np.random.default_rng(args.seed), metric=metric)
        if math.isnan(rep.spearman_rho):
            for w in caught:
                print(f"warning: {metric}: {w.message}", file=sys.stderr)
        name, rho = rep.row()
        rows.append({"metric": name, "rho": rho, "n": rep.n})
    _emit(_csv_text(rows, ("metric", "rho", "n")), args.out)
    return EXIT_OK


# -------------------------------------------------------------------- main

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="imitlab", description="Imitation-learning experiments on synthetic tasks.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    t = sub.add_parser("train", help="train one run into a directory")
    t.add_argument("--config", help="flat key = value config file (defaults if omitted)")
    t.add_argument("--out", required=True, help="run directory")
    t.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config field")
    t.add_argument("--data", help="training set in the tab-separated dataset format")
    t.add_argument("--resume", action="store_true", help="continue from the run directory's checkpoint")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="accuracy / Self-BLEU / entropy across decoding settings")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--task", help="task kind; must match the checkpoint")
    e.add_argument("--temps", default="1.0", help="comma-separated sampling temperatures")
    e.add_argument("--mode", choices=("sample", "greedy", "beam"), default="sample")
    e.add_argument("--beam-size", type=int, default=4)
    e.add_argument("--length-penalty", type=float, default=0.6)
    e.add_argument("--prompts", type=int, default=50)
    e.add_argument("--samples", type=int, default=4, help="samples per prompt")
    e.add_argument("--seed", type=int, default=0)
    e.add_argument("--out", help="CSV path (stdout if omitted)")
    e.set_defaults(func=cmd_eval)

    s = sub.add_parser("sweep", help="one run per value of a config field")
    s.add_argument("--config")
    s.add_argument("--axis", required=True, help="field=v1,v2,... e.g. lambda=0,0.1,0.5")
    s.add_argument("--out", required=True)
    s.add_argument("--set", action="append", metavar="KEY=VALUE")
    s.set_defaults(func=cmd_sweep)

    m = sub.add_parser("toy-mdp", help="offline vs online comparison on the chain MDP")
    m.add_argument("--noise", type=float, default=0.1)
    m.add_argument("--seeds", type=int, default=3, help="number of seeds")
    m.add_argument("--chain-length", type=int, default=5)
    m.add_argument("--horizon", type=int, default=20)
    m.add_argument("--episodes", type=int, default=1000)
    m.add_argument("--steps", type=int, default=500)
    m.add_argument("--lambda", dest="lam", type=float, default=0.1)
    m.add_argument("--gamma", type=float, default=1.0)
    m.add_argument("--alpha", type=float, default=0.1)
    m.add_argument("--out", default="toy-mdp-out")
    m.set_defaults(func=cmd_toymdp)

    c = sub.add_parser("correlate", help="rank correlation of extracted returns with task metrics")
    c.add_argument("--checkpoint", required=True)
    c.add_argument("--task")
    c.add_argument("--metric", default="task,accuracy,total_return")
    c.add_argument("--prompts", type=int, default=200)
    c.add_argument("--temperature", type=float, default=1.0)
    c.add_argument("--lambda", dest="lam", type=float, help="reward scale (default: the run's)")
    c.add_argument("--gamma", type=float)
    c.add_argument("--seed", type=int, default=0)
    c.add_argument("--out")
    c.set_defaults(func=cmd_correlate)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    except (UsageError, ConfigError, CheckpointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except Exception as exc:  # noqa: BLE001 - any other failure is a runtime error
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
