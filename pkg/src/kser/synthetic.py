"""Planted-signal datasets for desk-scale experiments.

Each sample's click propensity mixes three sources:

* a feature part (item bias + context effect) visible to any backbone,
* a general user preference ``g_u``,
* a user-by-category affinity ``a[u, category(item)]``.

The user-level parts live only in the ``user_preference`` knowledge field.
Chunk ``c`` of that field stores ``g_u + a[u, c]`` along a fixed direction
(``encoding="linear"``) or as the norm of a random per-user direction
(``"radial"``, softplus-squashed), so the relevant chunk depends on the target
item's category. Chunks beyond the
category count hold per-user noise. Every field also carries a shared vector
common to all entities (homogeneous content), and a ``hallucination`` share of
users get their informative chunks replaced by loud noise.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, asdict, fields as dc_fields
from pathlib import Path

import numpy as np
from sklearn.metrics import roc_auc_score

from .data import DataError, Sample, SampleSet
from .knowledge import KnowledgeField, KnowledgePack


@dataclass(frozen=True)
class SyntheticSpec:
    n_samples: int = 50_000
    n_users: int = 10_000
    n_items: int = 500
    n_categories: int = 4
    n_contexts: int = 8
    d_k: int = 32
    n_chunks: int = 4
    n_fields: int = 2
    signal_field: int = 0
    snr: float = 3.0
    feature_weight: float = 1.0
    knowledge_weight: float = 1.0
    interaction_weight: float = 1.0
    homogeneity: float = 1.0
    noise_scale: float = 1.0
    info_noise: float = 0.05
    hallucination: float = 0.0
    hallucination_scale: float = 3.0
    positive_rate: float = 0.4
    min_margin: float = 0.0
    encoding: str = "linear"

    def validate(self):
        if self.n_samples < 3 or self.n_users < 1 or self.n_items < 1:
            raise DataError("synthetic spec needs n_samples >= 3 and at least one user and item")
        if self.n_categories < 1 or self.n_contexts < 1:
            raise DataError("n_categories and n_contexts must be >= 1")
        if self.n_chunks < 1 or self.d_k % self.n_chunks:
            raise DataError(f"d_k={self.d_k} not divisible by n_chunks={self.n_chunks}")
        if not 0 <= self.signal_field < self.n_fields:
            raise DataError(f"signal_field {self.signal_field} outside [0, {self.n_fields})")
        if self.n_categories > self.n_chunks:
            raise DataError("need at least one knowledge chunk per item category")
        if not 0 <= self.hallucination < 1:
            raise DataError("hallucination share must be in [0, 1)")
        if not 0 < self.positive_rate < 1:
            raise DataError("positive_rate must be in (0, 1)")
        if self.encoding not in ("linear", "radial"):
            raise DataError(f"encoding must be 'linear' or 'radial', got {self.encoding!r}")
        if self.snr < 0:
            raise DataError("snr must be non-negative")

    def field_layout(self) -> list[tuple[str, str]]:
        """(name, keyed_by) per knowledge field; the signal field is user-keyed."""
        out = []
        for j in range(self.n_fields):
            if j == self.signal_field:
                out.append(("user_preference", "user_id"))
            elif not any(n == "item_factual" for n, _ in out):
                out.append(("item_factual", "item_id"))
            else:
                out.append((f"aux_{j}", "item_id"))
        return out

    def to_dict(self) -> dict:
        d = asdict(self)
        if math.isinf(d["snr"]):
            d["snr"] = "inf"
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SyntheticSpec":
        known = {f.name for f in dc_fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise DataError(f"unknown synthetic spec keys: {sorted(unknown)}")
        d = dict(d)
        if "snr" in d:
            d["snr"] = float(d["snr"])
        return cls(**d)

    @classmethod
    def from_file(cls, path) -> "SyntheticSpec":
        return cls.from_dict(json.loads(Path(path).read_text()))


@dataclass
class SyntheticData:
    samples: SampleSet
    pack: KnowledgePack
    score: np.ndarray          # noiseless latent per sample
    feature_score: np.ndarray  # part of the latent visible without knowledge
    oracle_auc: dict


def generate(spec: SyntheticSpec, seed: int = 0) -> SyntheticData:
    spec.validate()
    rng = np.random.default_rng(seed)
    s = spec.d_k // spec.n_chunks

    general = rng.standard_normal(spec.n_users)
    affinity = rng.standard_normal((spec.n_users, spec.n_categories))
    item_bias = rng.standard_normal(spec.n_items)
    item_cat = rng.integers(0, spec.n_categories, spec.n_items)
    ctx_effect = rng.standard_normal(spec.n_contexts)

    users = rng.integers(0, spec.n_users, spec.n_samples)
    items = rng.integers(0, spec.n_items, spec.n_samples)
    ctxs = rng.integers(0, spec.n_contexts, spec.n_samples)
    times = np.sort(rng.choice(10 * spec.n_samples, spec.n_samples, replace=False))

    feature_score = spec.feature_weight * (item_bias[items] + ctx_effect[ctxs]) / math.sqrt(2)
    score = (feature_score
             + spec.knowledge_weight * general[users]
             + spec.interaction_weight * affinity[users, item_cat[items]])
    noise = rng.standard_normal(spec.n_samples)
    sd = score.std()
    if sd == 0:
        latent = noise
    elif math.isinf(spec.snr):
        latent = score
    elif spec.snr == 0:
        latent = noise
    else:
        latent = score + noise * sd / spec.snr
    thresh = np.quantile(latent, 1 - spec.positive_rate)
    labels = (latent > thresh).astype(np.int64)

    shared = spec.homogeneity * rng.standard_normal(spec.d_k)
    directions = rng.standard_normal((spec.n_categories, s))
    directions /= np.linalg.norm(directions, axis=1, keepdims=True)
    informative = spec.n_categories * s
    fields = []
    for j, (name, keyed_by) in enumerate(spec.field_layout()):
        if j == spec.signal_field:
            vec = shared + spec.noise_scale * rng.standard_normal((spec.n_users, spec.d_k))
            strength = spec.knowledge_weight * general[:, None] + spec.interaction_weight * affinity
            if spec.encoding == "radial":
                # signal lives in the chunk norm, along a random per-user direction
                axes = rng.standard_normal((spec.n_users, spec.n_categories, s))
                axes /= np.linalg.norm(axes, axis=2, keepdims=True)
                info = (np.logaddexp(0.0, strength)[:, :, None] * axes).reshape(spec.n_users, informative)
            else:
                info = (strength[:, :, None] * directions[None]).reshape(spec.n_users, informative)
            info += spec.info_noise * rng.standard_normal(info.shape)
            bad = rng.random(spec.n_users) < spec.hallucination
            info[bad] = spec.hallucination_scale * rng.standard_normal((int(bad.sum()), informative))
            vec[:, :informative] = shared[:informative] + info
            keys = [f"u{u}" for u in range(spec.n_users)]
        else:
            vec = shared + spec.noise_scale * rng.standard_normal((spec.n_items, spec.d_k))
            keys = [f"i{i}" for i in range(spec.n_items)]
        fields.append(KnowledgeField(name, keyed_by, keys, vec.astype(np.float32)))
    pack = KnowledgePack(fields)

    samples = [
        Sample(user_id=f"u{u}", item_id=f"i{i}", label=int(y), timestamp=int(t),
               context={"category": f"c{item_cat[i]}", "context": f"x{c}"}, sample_id=str(k))
        for k, (u, i, c, t, y) in enumerate(zip(users, items, ctxs, times, labels))
    ]
    sset = SampleSet(samples, ("category", "context"))

    oracle = {}
    if 0 < labels.sum() < len(labels):
        oracle["bayes_full"] = float(roc_auc_score(labels, score))
        oracle["bayes_features"] = (float(roc_auc_score(labels, feature_score))
                                    if feature_score.std() > 0 else 0.5)
        if oracle["bayes_full"] - oracle["bayes_features"] < spec.min_margin:
            raise DataError(
                f"planted knowledge signal too weak: Bayes AUC {oracle['bayes_full']:.4f} vs "
                f"feature-only {oracle['bayes_features']:.4f}, margin {spec.min_margin}")
    return SyntheticData(sset, pack, score, feature_score, oracle)


def gen_synthetic_dataset(spec: SyntheticSpec, seed: int = 0) -> tuple[SampleSet, KnowledgePack]:
    data = generate(spec, seed)
    return data.samples, data.pack
