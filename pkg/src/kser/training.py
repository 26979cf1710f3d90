"""Training loops for the three strategies, plus AUC / LogLoss metrics."""
from __future__ import annotations

import copy
import hashlib
import logging
import math
import time
from dataclasses import dataclass, field, asdict

import numpy as np
import torch
from scipy.stats import rankdata
from torch.nn import functional as F

from .data import EncodedSplit, FeatureSchema
from .knowledge import KnowledgeIndex, KnowledgePack
from .model import CTRModel, ModelConfig

logger = logging.getLogger(__name__)

LR_GRID = (1e-4, 5e-4, 1e-3)
EPS = 1e-7


class MetricError(ValueError):
    pass


class DivergenceError(RuntimeError):
    pass


def compute_auc(scores, labels) -> float:
    """Rank-based ROC AUC; tied scores contribute one half."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    if scores.shape != labels.shape:
        raise MetricError("scores and labels differ in length")
    pos = labels == 1
    n_pos, n_neg = int(pos.sum()), int((~pos).sum())
    if n_pos == 0 or n_neg == 0:
        raise MetricError("AUC is undefined with a single class")
    ranks = rankdata(scores)
    return float((ranks[pos].sum() - n_pos * (n_pos + 1) / 2) / (n_pos * n_neg))


def compute_logloss(scores, labels, eps: float = EPS) -> float:
    p = np.clip(np.asarray(scores, dtype=np.float64), eps, 1 - eps)
    y = np.asarray(labels, dtype=np.float64)
    if p.shape != y.shape:
        raise MetricError("scores and labels differ in length")
    return float(-np.mean(y * np.log(p) + (1 - y) * np.log(1 - p)))


@dataclass
class MetricsReport:
    auc: float
    logloss: float
    val_auc: float | None = None
    val_logloss: float | None = None
    history: list[dict] = field(default_factory=list)
    best_epoch: int | None = None
    steps: int = 0
    seed: int | None = None
    wall_clock: float = 0.0
    config: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)


def improvement(ref: MetricsReport, new: MetricsReport) -> tuple[float, float]:
    """Relative gain of ``new`` over ``ref``.

    AUC gain is divided by the *new* AUC, LogLoss reduction by the *reference*
    LogLoss; both as fractions, not percent.
    """
    if new.auc == 0 or ref.logloss == 0:
        raise ZeroDivisionError("improvement denominator is zero")
    return (new.auc - ref.auc) / new.auc, (ref.logloss - new.logloss) / ref.logloss


@dataclass
class TrainConfig:
    strategy: str = "base"
    lr: float = 1e-3
    batch_size: int = 256
    max_epochs: int = 10
    patience: int = 3
    seed: int = 0
    max_steps: int | None = None
    audit_every: int = 0  # stop-gradient audit period in steps; 0 disables
    base_checkpoint: str | None = None

    def __post_init__(self):
        if self.strategy not in ("base", "all_params", "extractor_only"):
            raise ValueError(f"unknown strategy {self.strategy!r}")
        if self.lr <= 0 or self.batch_size < 1 or self.max_epochs < 0:
            raise ValueError("lr, batch_size and max_epochs must be positive")


class Batches:
    """Encoded split plus optional knowledge lookups, served as tensor batches."""

    def __init__(self, split: EncodedSplit, knowledge: KnowledgeIndex | None = None):
        self.split = split
        self.knowledge = knowledge

    def __len__(self):
        return len(self.split)

    def batch(self, idx) -> dict:
        idx = np.asarray(idx)
        out = {
            "fields": torch.from_numpy(self.split.fields[idx]),
            "history": torch.from_numpy(self.split.history[idx]),
            "label": torch.from_numpy(self.split.labels[idx]),
        }
        if self.knowledge is not None:
            out["knowledge"] = torch.from_numpy(self.knowledge.gather(idx))
        return out

    def iterate(self, batch_size: int, rng: np.random.Generator | None = None):
        order = rng.permutation(len(self)) if rng is not None else np.arange(len(self))
        for start in range(0, len(order), batch_size):
            yield self.batch(order[start:start + batch_size])


@dataclass
class Splits:
    train: Batches
    val: Batches
    test: Batches


def make_splits(train: EncodedSplit, val: EncodedSplit, test: EncodedSplit,
                pack: KnowledgePack | None = None, strict: bool = False) -> Splits:
    def wrap(s):
        k = KnowledgeIndex(pack, s.user_ids, s.item_ids, s.sample_ids, strict) if pack is not None else None
        return Batches(s, k)
    return Splits(wrap(train), wrap(val), wrap(test))


def predict(model: CTRModel, data: Batches, batch_size: int = 4096) -> np.ndarray:
    model.eval()
    out = []
    with torch.no_grad():
        for b in data.iterate(batch_size):
            out.append(model(b["fields"], b["history"], b.get("knowledge")).numpy())
    model.train()
    return np.concatenate(out) if out else np.zeros(0, dtype=np.float32)


def evaluate(model: CTRModel, data: Batches) -> tuple[float, float]:
    p = predict(model, data)
    return compute_auc(p, data.split.labels), compute_logloss(p, data.split.labels)


def param_checksum(params) -> str:
    h = hashlib.sha256()
    for p in params:
        h.update(p.detach().cpu().numpy().tobytes())
    return h.hexdigest()


def gate_gradient_into_embeddings(model: CTRModel, batch: dict) -> float:
    """Largest |grad| reaching the embedding tables from the gate output alone."""
    if model.gate is None:
        return 0.0
    model.zero_grad(set_to_none=True)
    emb = model.embedding(batch["fields"], batch["history"])
    w = model.gate.weights(batch["knowledge"], emb.flat)
    w.sum().backward()
    worst = 0.0
    for p in model.embedding.parameters():
        if p.grad is not None:
            worst = max(worst, float(p.grad.abs().max()))
    model.zero_grad(set_to_none=True)
    return worst


def fit(model: CTRModel, data: Splits, cfg: TrainConfig, params=None) -> MetricsReport:
    """Adam on binary cross-entropy with early stopping on validation AUC.

    The best-validation weights are restored before the final test evaluation.
    """
    start = time.perf_counter()
    params = [p for p in (params if params is not None else model.parameters()) if p.requires_grad]
    opt = torch.optim.Adam(params, lr=cfg.lr)
    rng = np.random.default_rng(cfg.seed)
    best_auc, best_state, best_epoch, bad = -math.inf, None, None, 0
    history, step = [], 0
    model.train()
    for epoch in range(1, cfg.max_epochs + 1):
        total, count = 0.0, 0
        for b in data.train.iterate(cfg.batch_size, rng):
            if cfg.audit_every and step % cfg.audit_every == 0:
                g = gate_gradient_into_embeddings(model, b)
                if g != 0.0:
                    raise AssertionError(f"gate path leaked gradient {g} into embeddings at step {step}")
            p = model(b["fields"], b["history"], b.get("knowledge"))
            if not torch.isfinite(p).all():
                raise DivergenceError(f"non-finite predictions at epoch {epoch}, step {step}")
            loss = F.binary_cross_entropy(p, b["label"])
            if not torch.isfinite(loss):
                raise DivergenceError(f"non-finite loss at epoch {epoch}, step {step}")
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
            total += float(loss.detach()) * len(b["label"])
            count += len(b["label"])
            step += 1
            if cfg.max_steps is not None and step >= cfg.max_steps:
                break
        if not all(torch.isfinite(p).all() for p in params):
            raise DivergenceError(f"non-finite parameters after epoch {epoch}")
        val_auc, val_ll = evaluate(model, data.val)
        history.append({"epoch": epoch, "train_loss": total / max(count, 1), "val_auc": val_auc,
                        "val_logloss": val_ll})
        logger.info("epoch %d loss %.5f val_auc %.5f val_logloss %.5f", epoch, total / max(count, 1),
                    val_auc, val_ll)
        if val_auc > best_auc:
            best_auc, best_epoch, bad = val_auc, epoch, 0
            best_state = copy.deepcopy(model.state_dict())
        else:
            bad += 1
            if bad >= cfg.patience:
                break
        if cfg.max_steps is not None and step >= cfg.max_steps:
            break
    if best_state is not None:
        model.load_state_dict(best_state)
    val_auc, val_ll = evaluate(model, data.val)
    auc, ll = evaluate(model, data.test)
    return MetricsReport(auc=auc, logloss=ll, val_auc=val_auc, val_logloss=val_ll, history=history,
                         best_epoch=best_epoch, steps=step, seed=cfg.seed,
                         wall_clock=time.perf_counter() - start, config={"train": asdict(cfg)})


def train_base(cfg: TrainConfig, data: Splits, schema: FeatureSchema,
               model_cfg: ModelConfig | None = None) -> tuple[CTRModel, MetricsReport]:
    torch.manual_seed(cfg.seed)
    model = CTRModel(schema, model_cfg or ModelConfig(), "base")
    return model, fit(model, data, cfg)


def train_all_params(cfg: TrainConfig, data: Splits, pack: KnowledgePack, schema: FeatureSchema,
                     model_cfg: ModelConfig | None = None) -> tuple[CTRModel, MetricsReport]:
    torch.manual_seed(cfg.seed)
    model = CTRModel(schema, model_cfg or ModelConfig(), "all_params", pack.dim, pack.n_fields)
    return model, fit(model, data, cfg)


def train_extractor_only(cfg: TrainConfig, data: Splits, pack: KnowledgePack, base: CTRModel,
                         model_cfg: ModelConfig | None = None) -> tuple[CTRModel, MetricsReport]:
    """Train gate, aligner, embedding layer and the widened head against a frozen trunk."""
    if base.strategy != "base":
        raise ValueError("extractor-only training needs a base-strategy checkpoint")
    torch.manual_seed(cfg.seed)
    model_cfg = model_cfg or ModelConfig(backbone=base.cfg.backbone, hidden=list(base.cfg.hidden))
    model = CTRModel(base.schema, model_cfg, "extractor_only", pack.dim, pack.n_fields)
    model.warm_start_from(base)
    model.freeze_trunk()
    before = param_checksum(model.trunk_parameters())
    report = fit(model, data, cfg)
    if param_checksum(model.trunk_parameters()) != before:
        raise AssertionError("frozen trunk parameters changed during extractor-only training")
    report.config["trunk_checksum"] = before
    return model, report
