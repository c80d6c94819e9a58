"""Command line entry points.

Subcommands cover the whole pipeline: gen-data, pretrain, finetune,
probe, eval, bench, and ablate. Every run leaves a directory with the
canonical config, checkpoints, and metrics; reruns of a completed run
are skipped unless --force is given. Exit codes: 0 success, 2 for
configuration and usage errors, 3 for runtime failures such as training
divergence.
"""

from __future__ import annotations

import argparse
import os
import sys
import time
from pathlib import Path
from typing import Dict, List, Optional

import numpy as np

from .config import (
    canonical_text,
    config_fingerprint,
    default_config,
    describe_registry,
    load_config,
    model_config,
    parse_grid,
    save_config,
    train_config,
)
from .data import generate_dataset, read_dataset, write_dataset
from .errors import ConfigError, FormatError, MaskingError, NumericsError, \
    SceneError, ShapeError, TrainingDiverged
from .model import load_model
from .rollout import (
    ModelPolicy,
    OraclePolicy,
    RandomPolicy,
    bench_latency,
    evaluate,
    write_eval_report,
)
from .sim import TASKS
from .train import finetune, pretrain, train_from_scratch
from .utils import ensure_dir, sha256_file

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_RUNTIME = 3

_USER_ERRORS = (ConfigError, FormatError, ShapeError, MaskingError,
                FileNotFoundError)
_RUNTIME_ERRORS = (TrainingDiverged, NumericsError, SceneError)


def _config_from(args) -> Dict[str, object]:
    if getattr(args, "config", None):
        return load_config(args.config)
    return default_config()


def _run_dir(args) -> Path:
    return ensure_dir(args.out)


def _read_datasets(paths: List[str]):
    trajs = []
    for p in paths:
        trajs.extend(read_dataset(p))
    return trajs


# ------------------------------------------------------------- gen-data

def cmd_gen_data(args) -> int:
    cfg = _config_from(args)
    task = args.task or cfg["data.task"]
    count = cfg["data.count"] if args.count is None else args.count
    base_seed = cfg["data.base_seed"] if args.seed is None else args.seed
    tasks = TASKS if task == "all" else (task,)
    if task != "all" and task not in TASKS:
        raise ConfigError(f"unknown task '{task}'")
    out = Path(args.out)
    if task == "all":
        ensure_dir(out)
    for t in tasks:
        trajs = generate_dataset(t, count, base_seed)
        path = out / f"{t}.rptd" if task == "all" else out
        if path.parent != Path("."):
            ensure_dir(path.parent)
        write_dataset(trajs, path)
        lens = [len(tr) for tr in trajs] or [0]
        rate = sum(tr.success for tr in trajs) / max(1, len(trajs))
        print(f"{t}: {len(trajs)} trajectories, success {rate:.3f}, "
              f"steps min/mean/max {min(lens)}/{np.mean(lens):.1f}/{max(lens)}"
              f" -> {path} ({sha256_file(path)[:12]})")
    return EXIT_OK


# ------------------------------------------------------------- pretrain

def cmd_pretrain(args) -> int:
    cfg = _config_from(args)
    run = _run_dir(args)
    final = run / "checkpoints" / "model.rptc"
    if final.exists() and not args.force:
        print(f"{run}: pretrain already complete ({final}); use --force to redo")
        return EXIT_OK
    trajs = _read_datasets(args.data)
    mc, tc = model_config(cfg), train_config(cfg)
    save_config(cfg, run / "config")
    ensure_dir(run / "checkpoints")
    t0 = time.perf_counter()
    _, loss = pretrain(trajs, mc, tc, out_checkpoint=final,
                       metrics_path=run / "metrics.csv",
                       checkpoints_dir=run / "checkpoints")
    print(f"pretrained on {len(trajs)} trajectories: final epoch loss "
          f"{loss:.6f} in {time.perf_counter() - t0:.1f}s -> {final}")
    print(f"config fingerprint {config_fingerprint(cfg)[:12]}")
    return EXIT_OK


# ------------------------------------------------------------- finetune

def _load_demos(path, limit: Optional[int] = None):
    demos = [t for t in read_dataset(path) if t.success]
    if not demos:
        raise ConfigError(f"no successful demos in {path}")
    if limit is not None:
        demos = demos[:limit]
    return demos


def cmd_finetune(args, forced_mode: Optional[str] = None) -> int:
    cfg = _config_from(args)
    run = _run_dir(args)
    final = run / "checkpoints" / "model.rptc"
    if final.exists() and not args.force:
        print(f"{run}: transfer already complete ({final}); use --force to redo")
        return EXIT_OK
    mode = forced_mode or args.mode or cfg["transfer.mode"]
    if args.from_scratch and args.checkpoint:
        raise ConfigError("pass either --checkpoint or --from-scratch, not both")
    if not args.from_scratch and not args.checkpoint:
        raise ConfigError("finetune needs --checkpoint, or --from-scratch to "
                          "train a no-pretraining baseline explicitly")
    demos = _load_demos(args.demos, args.demo_limit)
    tc = train_config(cfg)
    save_config(cfg, run / "config")
    ensure_dir(run / "checkpoints")
    t0 = time.perf_counter()
    if args.from_scratch:
        if mode != "full":
            raise ConfigError("--from-scratch always trains full; drop --mode")
        mc = model_config(cfg)
        params, loss = train_from_scratch(demos, mc, tc,
                                          metrics_path=run / "metrics.csv")
    else:
        params, mc = load_model(args.checkpoint)
        if mc != model_config(cfg):
            raise ConfigError(
                f"checkpoint model shape {mc} disagrees with the config; "
                "align the model.* keys with the checkpoint")
        params, loss = finetune(params, demos, mode, mc, tc,
                                metrics_path=run / "metrics.csv")
    from .model import save_model
    save_model(final, params)
    source = "scratch" if args.from_scratch else "pretrained"
    print(f"{mode} transfer from {source} on {len(demos)} demos: final loss "
          f"{loss:.6f} in {time.perf_counter() - t0:.1f}s -> {final}")
    return EXIT_OK


def cmd_probe(args) -> int:
    args.from_scratch = False
    return cmd_finetune(args, forced_mode="probe")


# ----------------------------------------------------------------- eval

def cmd_eval(args) -> int:
    cfg = _config_from(args)
    run = _run_dir(args)
    task = args.task or cfg["eval.task"]
    if task not in TASKS:
        raise ConfigError(f"unknown task '{task}'")
    episodes = cfg["eval.episodes"] if args.episodes is None else args.episodes
    base_seed = cfg["eval.base_seed"] if args.seed is None else args.seed
    max_steps = cfg["eval.max_steps"] or None
    if args.policy == "model":
        if not args.checkpoint:
            raise ConfigError("eval --policy model needs --checkpoint")
        params, mc = load_model(args.checkpoint)
        k = cfg["eval.execute_k"] if args.execute_k is None else args.execute_k
        policy = ModelPolicy(params, mc, execute_k=k)
    elif args.policy == "oracle":
        policy = OraclePolicy()
    else:
        policy = RandomPolicy()
    save_config(cfg, run / "config")
    report, _ = evaluate(policy, task, episodes, base_seed=base_seed,
                         max_steps=max_steps,
                         fingerprint=config_fingerprint(cfg),
                         traces_path=run / "traces.rptd")
    write_eval_report(report, run)
    print(f"{task} x{episodes} ({args.policy}): success rate "
          f"{report.success_rate:.3f}, mean steps {report.mean_steps:.1f}, "
          f"latency p95 {report.latency_p95_s * 1e3:.2f}ms -> {run}/report.csv")
    return EXIT_OK


# ---------------------------------------------------------------- bench

def cmd_bench(args) -> int:
    cfg = _config_from(args)
    mc = model_config(cfg)
    rows = bench_latency(mc, contexts=(1, mc.context), calls=args.calls)
    for r in rows:
        print(f"context {r['context']:>3}: mean {r['mean_ms']:.2f}ms  "
              f"p50 {r['p50_ms']:.2f}ms  p95 {r['p95_ms']:.2f}ms  "
              f"max {r['max_ms']:.2f}ms  [{r['fingerprint']}]")
    if args.out:
        out = ensure_dir(args.out)
        with open(out / "bench.csv", "w") as f:
            f.write("context,calls,mean_ms,p50_ms,p95_ms,max_ms,fingerprint\n")
            for r in rows:
                f.write(f"{r['context']},{r['calls']},{r['mean_ms']:.4f},"
                        f"{r['p50_ms']:.4f},{r['p95_ms']:.4f},{r['max_ms']:.4f},"
                        f"{r['fingerprint']}\n")
        print(f"wrote {out}/bench.csv")
    return EXIT_OK


# --------------------------------------------------------------- ablate

class _Lock:
    """Exclusive-create lock file so concurrent grid runners can merge
    rows into one results CSV."""

    def __init__(self, path: Path, timeout: float = 30.0):
        self.path = path
        self.timeout = timeout

    def __enter__(self):
        deadline = time.monotonic() + self.timeout
        while True:
            try:
                fd = os.open(self.path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
                os.close(fd)
                return self
            except FileExistsError:
                if time.monotonic() > deadline:
                    raise TrainingDiverged(
                        f"could not acquire {self.path} within {self.timeout}s; "
                        "remove it if a previous run crashed") from None
                time.sleep(0.05)

    def __exit__(self, *exc):
        try:
            os.unlink(self.path)
        except FileNotFoundError:
            pass


def _read_result_fingerprints(path: Path):
    if not path.exists():
        return None, set()
    lines = path.read_text().splitlines()
    if not lines:
        return None, set()
    header = lines[0].split(",")
    done = {row.split(",", 1)[0] for row in lines[1:] if row.strip()}
    return header, done


def _append_result(path: Path, header: List[str], row: Dict[str, object]):
    with _Lock(path.with_suffix(path.suffix + ".lock")):
        existing, _ = _read_result_fingerprints(path)
        if existing is None:
            path.write_text(",".join(header) + "\n")
            existing = header
        if existing != header:
            raise ConfigError(
                f"{path} has columns {existing}, grid wants {header}; "
                "use a fresh --out directory")
        with open(path, "a") as f:
            f.write(",".join(str(row[c]) for c in header) + "\n")


def _ablate_point(cfg: Dict[str, object], point_dir: Path, data_cache: Path):
    """gen-data -> pretrain -> transfer -> eval for one grid point."""
    mc, tc = model_config(cfg), train_config(cfg)
    task = cfg["eval.task"]
    count, base_seed = cfg["data.count"], cfg["data.base_seed"]

    tasks = TASKS if cfg["data.task"] == "all" else (cfg["data.task"],)
    corpus = []
    for t in tasks:
        cache = data_cache / f"{t}_{count}_{base_seed}_{cfg['model.d_v']}.rptd"
        if not cache.exists():
            write_dataset(generate_dataset(t, count, base_seed), cache)
        corpus.extend(read_dataset(cache))

    demo_cache = data_cache / (f"{task}_demo_{cfg['transfer.demos']}_"
                               f"{cfg['transfer.demo_seed']}_{cfg['model.d_v']}.rptd")
    if not demo_cache.exists():
        write_dataset(generate_dataset(task, cfg["transfer.demos"],
                                       cfg["transfer.demo_seed"]), demo_cache)
    demos = [t for t in read_dataset(demo_cache) if t.success]

    ensure_dir(point_dir / "checkpoints")
    save_config(cfg, point_dir / "config")
    params, _ = pretrain(corpus, mc, tc,
                         out_checkpoint=point_dir / "checkpoints" / "pretrained.rptc",
                         metrics_path=point_dir / "metrics.csv")
    tuned, loss = finetune(params, demos, cfg["transfer.mode"], mc, tc)
    from .model import save_model
    save_model(point_dir / "checkpoints" / "model.rptc", tuned)
    policy = ModelPolicy(tuned, mc, execute_k=cfg["eval.execute_k"])
    report, _ = evaluate(policy, task, cfg["eval.episodes"],
                         base_seed=cfg["eval.base_seed"],
                         max_steps=cfg["eval.max_steps"] or None,
                         fingerprint=config_fingerprint(cfg))
    write_eval_report(report, point_dir)
    return report, loss


def cmd_ablate(args) -> int:
    base = _config_from(args)
    grid_text = Path(args.grid).read_text()
    combos = parse_grid(grid_text, source=args.grid)
    out = ensure_dir(args.out)
    results = out / "ablation.csv"
    grid_keys = sorted({k for combo in combos for k in combo})
    header = ["fingerprint"] + grid_keys + ["episodes", "success_rate",
                                            "final_loss"]
    if not combos:
        if not results.exists():
            with _Lock(results.with_suffix(".csv.lock")):
                results.write_text(",".join(header) + "\n")
        print(f"empty grid: wrote header-only {results}")
        return EXIT_OK
    existing_header, done = _read_result_fingerprints(results)
    if existing_header is not None and existing_header != header:
        raise ConfigError(f"{results} has columns {existing_header}, this grid "
                          f"wants {header}; use a fresh --out directory")
    data_cache = ensure_dir(out / "data")
    ran = skipped = 0
    for combo in combos:
        cfg = dict(base)
        cfg.update(combo)
        fp = config_fingerprint(cfg)
        if fp in done and not args.force:
            skipped += 1
            continue
        point_dir = ensure_dir(out / "runs" / fp[:12])
        report, loss = _ablate_point(cfg, point_dir, data_cache)
        row = {"fingerprint": fp, "episodes": report.episodes,
               "success_rate": f"{report.success_rate:.6f}",
               "final_loss": f"{loss:.6f}"}
        for k in grid_keys:
            row[k] = combo.get(k, base[k])
        _append_result(results, header, row)
        done.add(fp)
        ran += 1
        print(f"{fp[:12]} {combo}: success {report.success_rate:.3f}")
    print(f"grid complete: {ran} ran, {skipped} already done -> {results}")
    return EXIT_OK


# ----------------------------------------------------------------- main

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="smpt",
        description="Masked sensorimotor pre-training on a toy arm.",
        epilog="Config keys:\n" + describe_registry(),
        formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="generate scripted trajectories")
    g.add_argument("--config")
    g.add_argument("--task", help="pick, bin_pick, stack, destack, or all")
    g.add_argument("--count", type=int)
    g.add_argument("--seed", type=int)
    g.add_argument("--out", required=True,
                   help="output .rptd file, or a directory for --task all")
    g.set_defaults(fn=cmd_gen_data)

    t = sub.add_parser("pretrain", help="masked pre-training")
    t.add_argument("--config")
    t.add_argument("--data", nargs="+", required=True,
                   help="one or more .rptd dataset files")
    t.add_argument("--out", required=True, help="run directory")
    t.add_argument("--force", action="store_true")
    t.set_defaults(fn=cmd_pretrain)

    f = sub.add_parser("finetune", help="behavior-clone the action head")
    f.add_argument("--config")
    f.add_argument("--checkpoint", help="pretrained model.rptc")
    f.add_argument("--from-scratch", action="store_true",
                   help="train from random init (explicit baseline)")
    f.add_argument("--demos", required=True, help=".rptd demo file")
    f.add_argument("--demo-limit", type=int)
    f.add_argument("--mode", help="full, partial:<k>, or probe")
    f.add_argument("--out", required=True)
    f.add_argument("--force", action="store_true")
    f.set_defaults(fn=cmd_finetune)

    pr = sub.add_parser("probe", help="linear probe on frozen features")
    pr.add_argument("--config")
    pr.add_argument("--checkpoint", required=True)
    pr.add_argument("--demos", required=True)
    pr.add_argument("--demo-limit", type=int)
    pr.add_argument("--out", required=True)
    pr.add_argument("--force", action="store_true")
    pr.set_defaults(fn=cmd_probe)

    e = sub.add_parser("eval", help="closed-loop evaluation")
    e.add_argument("--config")
    e.add_argument("--checkpoint")
    e.add_argument("--policy", choices=("model", "oracle", "random"),
                   default="model")
    e.add_argument("--task")
    e.add_argument("--episodes", type=int)
    e.add_argument("--seed", type=int)
    e.add_argument("--execute-k", type=int)
    e.add_argument("--out", required=True)
    e.set_defaults(fn=cmd_eval)

    b = sub.add_parser("bench", help="decision latency benchmark")
    b.add_argument("--config")
    b.add_argument("--calls", type=int, default=50)
    b.add_argument("--out")
    b.set_defaults(fn=cmd_bench)

    a = sub.add_parser("ablate", help="run a config grid end to end")
    a.add_argument("--config")
    a.add_argument("--grid", required=True, help="key=v1,v2,... grid file")
    a.add_argument("--out", required=True)
    a.add_argument("--force", action="store_true")
    a.set_defaults(fn=cmd_ablate)
    return p


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except _USER_ERRORS as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_CONFIG
    except _RUNTIME_ERRORS as err:
        print(f"runtime failure: {err}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
