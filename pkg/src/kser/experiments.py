"""Orchestration behind the CLI: dataset loading, training dispatch, ablation
tables and diagnostics export. Kept importable so tests and notebooks can run
the same code paths without spawning processes."""
from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .config import ConfigError, ExperimentConfig
from .data import Prepared, load_interactions, load_prepared, prepare
from .knowledge import KnowledgePack, load_pack
from .model import CTRModel, load_checkpoint, save_checkpoint
from .synthetic import SyntheticSpec, generate
from .training import (Batches, MetricsReport, Splits, evaluate, improvement, make_splits, train_all_params,
                       train_base, train_extractor_only)

logger = logging.getLogger(__name__)


@dataclass
class Dataset:
    prepared: Prepared
    pack: KnowledgePack | None
    splits: Splits
    oracle: dict | None = None


def synthetic_spec(cfg: ExperimentConfig) -> SyntheticSpec:
    if isinstance(cfg.synthetic, dict):
        return SyntheticSpec.from_dict(cfg.synthetic)
    if isinstance(cfg.synthetic, str):
        path = Path(cfg.synthetic)
        if not path.exists():
            raise ConfigError(f"synthetic: spec file not found: {path}")
        return SyntheticSpec.from_file(path)
    raise ConfigError("synthetic: no synthetic spec configured")


def load_dataset(cfg: ExperimentConfig, need_knowledge: bool = True) -> Dataset:
    pack = oracle = None
    if cfg.synthetic is not None:
        gen = generate(synthetic_spec(cfg), cfg.synthetic_seed)
        prep = prepare(gen.samples, cfg.history_len, tuple(cfg.split), cfg.embed_dim)
        pack, oracle = gen.pack, gen.oracle_auc
    elif cfg.data is not None:
        path = Path(cfg.data)
        if path.is_dir():
            prep = load_prepared(path)
        elif path.is_file():
            prep = prepare(load_interactions(path, cfg.dataset_kind), cfg.history_len, tuple(cfg.split),
                           cfg.embed_dim)
        else:
            raise FileNotFoundError(f"data path not found: {path}")
    else:
        raise ConfigError("data: set a TSV path, a prepared cache directory, or a synthetic spec")
    if cfg.knowledge is not None:
        pack = load_pack(cfg.knowledge)
    if need_knowledge and pack is None:
        raise ConfigError("knowledge: a knowledge pack is required for this strategy")
    splits = make_splits(prep.train, prep.val, prep.test, pack if need_knowledge else None, cfg.strict_knowledge)
    return Dataset(prep, pack, splits, oracle)


def train_one(cfg: ExperimentConfig, ds: Dataset, strategy: str | None = None, ablation: str | None = None,
              seed: int | None = None, base: CTRModel | None = None) -> tuple[CTRModel, MetricsReport]:
    strategy = strategy or cfg.strategy
    tcfg = cfg.train_config(strategy=strategy, seed=cfg.seed if seed is None else seed)
    mcfg = cfg.model_config(ablation=ablation or cfg.ablation)
    schema = ds.prepared.schema
    if strategy == "base":
        model, report = train_base(tcfg, ds.splits, schema, mcfg)
    elif strategy == "all_params":
        model, report = train_all_params(tcfg, ds.splits, ds.pack, schema, mcfg)
    else:
        if base is None:
            if not cfg.base_checkpoint:
                raise ConfigError("base_checkpoint: required when strategy is extractor_only")
            base = load_checkpoint(cfg.base_checkpoint, schema)
        model, report = train_extractor_only(tcfg, ds.splits, ds.pack, base, mcfg)
    report.config["experiment"] = {**cfg.to_dict(), "strategy": strategy, "ablation": mcfg.ablation,
                                   "seed": tcfg.seed}
    return model, report


def write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def run_train(cfg: ExperimentConfig, out: Path) -> MetricsReport:
    ds = load_dataset(cfg, need_knowledge=cfg.strategy != "base")
    model, report = train_one(cfg, ds)
    save_checkpoint(model, out / "checkpoint", {"knowledge_fields": ds.pack.names if ds.pack else []})
    write_json(out / "report.json", report.to_dict())
    return report


def run_evaluate(cfg: ExperimentConfig, out: Path) -> dict:
    if not cfg.checkpoint:
        raise ConfigError("checkpoint: required for evaluate")
    ds_probe = load_dataset(cfg, need_knowledge=False)
    model = load_checkpoint(cfg.checkpoint, ds_probe.prepared.schema)
    ds = ds_probe if model.strategy == "base" else load_dataset(cfg, need_knowledge=True)
    auc, ll = evaluate(model, getattr(ds.splits, cfg.eval_split))
    result = {"auc": auc, "logloss": ll, "split": cfg.eval_split, "count": ds.prepared.counts[cfg.eval_split],
              "strategy": model.strategy, "ablation": model.cfg.ablation, "checkpoint": str(cfg.checkpoint)}
    write_json(out / "metrics.json", result)
    return result


ABLATION_COLUMNS = ("seed", "variant", "strategy", "status", "auc", "logloss", "base_auc", "base_logloss",
                    "auc_improv_vs_base", "logloss_improv_vs_base", "best_epoch", "steps")


def run_ablation(cfg: ExperimentConfig, ds: Dataset | None = None) -> tuple[list[dict], list[str]]:
    """Train base plus each variant for every seed; failures become rows with a status message.

    The knowledge strategy is the configured one, or all-params when the
    config says ``base``.
    """
    ds = ds or load_dataset(cfg)
    strategy = cfg.strategy if cfg.strategy != "base" else "all_params"
    rows, failures = [], []
    for seed in cfg.seeds or [cfg.seed]:
        if cfg.base_checkpoint:
            base = load_checkpoint(cfg.base_checkpoint, ds.prepared.schema)
            b_auc, b_ll = evaluate(base, ds.splits.test)
            base_report = MetricsReport(auc=b_auc, logloss=b_ll)
        else:
            base, base_report = train_one(cfg, ds, "base", "none", seed)
        for variant in cfg.variants:
            row = {"seed": seed, "variant": "full" if variant == "none" else variant, "strategy": strategy,
                   "base_auc": base_report.auc, "base_logloss": base_report.logloss}
            try:
                _, rep = train_one(cfg, ds, strategy, variant, seed, base=base)
            except Exception as exc:  # keep the partial table
                logger.exception("variant %s (seed %d) failed", variant, seed)
                failures.append(f"{row['variant']} seed {seed}: {exc}")
                row.update(status=f"failed: {type(exc).__name__}: {exc}", auc=None, logloss=None,
                           auc_improv_vs_base=None, logloss_improv_vs_base=None, best_epoch=None, steps=None)
            else:
                gain_auc, gain_ll = improvement(base_report, rep)
                row.update(status="ok", auc=rep.auc, logloss=rep.logloss, auc_improv_vs_base=gain_auc,
                           logloss_improv_vs_base=gain_ll, best_epoch=rep.best_epoch, steps=rep.steps)
            rows.append(row)
    return rows, failures


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return f"{v:.9g}"
    return str(v)


def write_table(path: Path, columns, rows) -> None:
    with path.open("w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, delimiter="\t", lineterminator="\n")
        w.writerow(columns)
        for r in rows:
            w.writerow([_fmt(r[c]) for c in columns])


def export_diagnostics(model: CTRModel, data: Batches, field_names: list[str], n_samples: int, seed: int,
                       out: Path) -> dict:
    """Gate weights, cross-attention scores and pre/post-filter knowledge for sampled rows.

    Samples are drawn without replacement with ``numpy.random.default_rng(seed)``.
    Knowledge matrices are stored as ``n x (L * d_k)`` little-endian float32,
    one row per sample, field blocks in pack order (column-wise vec).
    """
    if model.strategy == "base":
        raise ConfigError("checkpoint: diagnostics need a KSER checkpoint; this one is base-only")
    if data.knowledge is None:
        raise ConfigError("knowledge: diagnostics need the knowledge pack")
    if n_samples > len(data):
        raise ConfigError(f"n_samples: asked for {n_samples} but the split has {len(data)} samples")
    out.mkdir(parents=True, exist_ok=True)
    idx = np.random.default_rng(seed).choice(len(data), size=n_samples, replace=False)
    sample_ids = [data.split.sample_ids[i] for i in idx]
    L, d_k = model.n_fields, model.d_k
    pre = np.zeros((n_samples, L * d_k), dtype="<f4")
    post = np.zeros_like(pre)
    files = {}
    gate_rows, cross_rows = [], []
    if n_samples:
        b = data.batch(idx)
        model.eval()
        with torch.no_grad():
            _, aux = model(b["fields"], b["history"], b["knowledge"], return_aux=True)
        pre[:] = b["knowledge"].transpose(1, 2).reshape(n_samples, -1).numpy()
        post[:] = aux["kbar"].transpose(1, 2).reshape(n_samples, -1).numpy()
        if aux["gate"] is not None:
            w = aux["gate"].numpy()  # (B, C, L)
            for r, sid in enumerate(sample_ids):
                for j, name in enumerate(field_names):
                    gate_rows.append([sid, name, *(f"{x:.9g}" for x in w[r, :, j])])
        for j, scores in enumerate(aux["cross_scores"]):
            s = scores.numpy()
            for r, sid in enumerate(sample_ids):
                for q in range(s.shape[1]):
                    for k in range(s.shape[2]):
                        cross_rows.append([sid, field_names[j], q, k, f"{s[r, q, k]:.9g}"])
    if model.gate is not None:
        with (out / "gates.tsv").open("w", encoding="utf-8", newline="") as fh:
            w_ = csv.writer(fh, delimiter="\t", lineterminator="\n")
            w_.writerow(["sample_id", "field_name", *(f"c{c}" for c in range(model.cfg.chunks))])
            w_.writerows(gate_rows)
        files["gates"] = "gates.tsv"
    if model.cfg.ablation != "no_esa":
        with (out / "cross_attention.tsv").open("w", encoding="utf-8", newline="") as fh:
            w_ = csv.writer(fh, delimiter="\t", lineterminator="\n")
            w_.writerow(["sample_id", "field", "qchunk", "kchunk", "score"])
            w_.writerows(cross_rows)
        files["cross_attention"] = "cross_attention.tsv"
    (out / "pre_esfnet.f32").write_bytes(pre.tobytes())
    (out / "post_esfnet.f32").write_bytes(post.tobytes())
    files.update(pre_esfnet="pre_esfnet.f32", post_esfnet="post_esfnet.f32")
    manifest = {
        "n_samples": n_samples, "sample_ids": sample_ids, "seed": seed, "fields": field_names, "d_k": d_k,
        "matrix_shape": [n_samples, L * d_k], "dtype": "f32", "byte_order": "little-endian",
        "layout": "row-major; each row is field blocks of width d_k in field order",
        "strategy": model.strategy, "ablation": model.cfg.ablation, "chunks": model.cfg.chunks, "files": files,
    }
    write_json(out / "manifest.json", manifest)
    return manifest


def run_diagnostics(cfg: ExperimentConfig, out: Path) -> dict:
    if not cfg.checkpoint:
        raise ConfigError("checkpoint: required for diagnostics")
    ds = load_dataset(cfg)
    model = load_checkpoint(cfg.checkpoint, ds.prepared.schema)
    return export_diagnostics(model, getattr(ds.splits, cfg.eval_split), ds.pack.names, cfg.n_samples, cfg.seed,
                              out)
