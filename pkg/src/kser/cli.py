"""``kser`` command-line entry point.

Exit codes: 0 success, 1 invalid configuration, 2 runtime or data error,
3 training divergence.
"""
from __future__ import annotations

import argparse
import contextlib
import hashlib
import logging
import os
import sys
from pathlib import Path

from .config import ConfigError, ExperimentConfig
from .data import DataError, load_interactions, prepare, save_prepared, write_interactions
from .experiments import (ABLATION_COLUMNS, run_ablation, run_diagnostics, run_evaluate, run_train, synthetic_spec,
                          write_json, write_table)
from .knowledge import PackError, write_pack
from .synthetic import generate
from .training import DivergenceError, MetricError

logger = logging.getLogger("kser")

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME, EXIT_DIVERGED = 0, 1, 2, 3
LOCK_NAME = ".kser.lock"


class LockError(RuntimeError):
    pass


@contextlib.contextmanager
def output_lock(out: Path):
    """Exclusive per-directory lock; a lock left by a dead process is taken over."""
    out.mkdir(parents=True, exist_ok=True)
    lock = out / LOCK_NAME
    for _ in range(2):
        try:
            fd = os.open(lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
        except FileExistsError:
            try:
                pid = int(lock.read_text().strip() or 0)
            except (OSError, ValueError):
                pid = 0
            if pid and _alive(pid):
                raise LockError(f"{out} is in use by process {pid} ({lock})") from None
            lock.unlink(missing_ok=True)
            continue
        with os.fdopen(fd, "w") as fh:
            fh.write(str(os.getpid()))
        break
    else:
        raise LockError(f"could not acquire {lock}")
    try:
        yield
    finally:
        lock.unlink(missing_ok=True)


def _alive(pid: int) -> bool:
    try:
        os.kill(pid, 0)
    except ProcessLookupError:
        return False
    except PermissionError:
        return True
    return True


def cmd_gen_synth(cfg: ExperimentConfig, out: Path) -> int:
    spec = synthetic_spec(cfg)
    data = generate(spec, cfg.synthetic_seed)
    write_interactions(data.samples, out / "interactions.tsv")
    write_pack(data.pack, out / "knowledge")
    write_json(out / "synthetic_spec.json", spec.to_dict())
    write_json(out / "oracle.json", {"seed": cfg.synthetic_seed, **data.oracle_auc})
    # a ready-to-run config pointing at the files just written
    follow = {k: v for k, v in cfg.to_dict().items() if k not in ("synthetic", "synthetic_seed")}
    follow.update(data="interactions.tsv", knowledge="knowledge")
    write_json(out / "experiment.json", follow)
    print(f"wrote {len(data.samples)} samples and {data.pack.n_fields} knowledge fields to {out}")
    return EXIT_OK


def cmd_prepare(cfg: ExperimentConfig, out: Path) -> int:
    if cfg.data is None:
        raise ConfigError("data: prepare needs an interaction TSV path")
    path = Path(cfg.data)
    if not path.is_file():
        raise FileNotFoundError(f"interaction file not found: {path}")
    prep = prepare(load_interactions(path, cfg.dataset_kind), cfg.history_len, tuple(cfg.split), cfg.embed_dim)
    source = {"sha256": hashlib.sha256(path.read_bytes()).hexdigest(), "dataset_kind": cfg.dataset_kind,
              "history_len": cfg.history_len, "split": cfg.split, "embed_dim": cfg.embed_dim}
    save_prepared(prep, out, {"source": source})
    print("prepared " + ", ".join(f"{k}={v}" for k, v in prep.counts.items()) + f" in {out}")
    return EXIT_OK


def cmd_train(cfg: ExperimentConfig, out: Path) -> int:
    report = run_train(cfg, out)
    print(f"{cfg.strategy} ({cfg.ablation}): test auc {report.auc:.5f} logloss {report.logloss:.5f}")
    return EXIT_OK


def cmd_evaluate(cfg: ExperimentConfig, out: Path) -> int:
    r = run_evaluate(cfg, out)
    print(f"{r['split']}: auc {r['auc']:.5f} logloss {r['logloss']:.5f}")
    return EXIT_OK


def cmd_ablate(cfg: ExperimentConfig, out: Path) -> int:
    rows, failures = run_ablation(cfg)
    write_table(out / "ablation.tsv", ABLATION_COLUMNS, rows)
    write_json(out / "ablation.json", {"rows": rows, "failures": failures, "config": cfg.to_dict()})
    for r in rows:
        auc = "-" if r["auc"] is None else f"{r['auc']:.5f}"
        print(f"seed {r['seed']} {r['variant']:<10} auc {auc} ({r['status']})")
    if failures:
        print(f"{len(failures)} variant(s) failed; partial table written", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


def cmd_diagnostics(cfg: ExperimentConfig, out: Path) -> int:
    m = run_diagnostics(cfg, out)
    print(f"exported diagnostics for {m['n_samples']} samples to {out}")
    return EXIT_OK


COMMANDS = {
    "prepare": cmd_prepare,
    "gen-synth": cmd_gen_synth,
    "train": cmd_train,
    "evaluate": cmd_evaluate,
    "ablate": cmd_ablate,
    "diagnostics": cmd_diagnostics,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="kser", description="Knowledge selection and alignment for CTR models.")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", type=Path, help="flat JSON experiment config")
        p.add_argument("--set", dest="overrides", action="append", default=[], metavar="K=V",
                       help="override one config key (value parsed as JSON when possible)")
        p.add_argument("--out", type=Path, required=True, help="output directory")
        p.add_argument("--seed", type=int, help="run seed (overrides the config)")
        p.add_argument("-v", "--verbose", action="store_true")
    return parser


def _resolve_paths(cfg: ExperimentConfig, base: Path | None) -> None:
    """Relative paths inside a config file are taken relative to that file."""
    if base is None:
        return
    for key in ("data", "knowledge", "base_checkpoint", "checkpoint"):
        v = getattr(cfg, key)
        if v and not Path(v).is_absolute() and (base / v).exists():
            setattr(cfg, key, str(base / v))
    if isinstance(cfg.synthetic, str) and not Path(cfg.synthetic).is_absolute():
        if (base / cfg.synthetic).exists():
            cfg.synthetic = str(base / cfg.synthetic)


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = ExperimentConfig.load(args.config, args.overrides, seed=args.seed)
        _resolve_paths(cfg, args.config.parent if args.config else None)
        with output_lock(args.out):
            return COMMANDS[args.command](cfg, args.out)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DivergenceError as exc:
        print(f"training diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except (DataError, PackError, MetricError, LockError, OSError, KeyError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
