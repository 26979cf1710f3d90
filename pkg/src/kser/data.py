"""Feature schemas, interaction-log ingestion, history construction and splits.

Tokens are kept as strings in :class:`Sample`; integer encoding happens once a
vocabulary has been frozen on the training split (see :class:`Vocabulary`).
"""
from __future__ import annotations

import csv
import hashlib
import json
import logging
import math
from collections import defaultdict, deque
from dataclasses import dataclass, field, asdict
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

logger = logging.getLogger(__name__)

PAD = 0
OOV = 1
N_RESERVED = 2

RATING_SCALE = {"movielens": (1.0, 5.0), "amazon_book": (1.0, 5.0)}
BASE_COLUMNS = ("user_id", "item_id", "rating", "timestamp")


class DataError(ValueError):
    """Malformed input data or an inconsistent dataset specification."""


@dataclass(frozen=True)
class FieldSpec:
    name: str
    kind: str = "categorical"  # categorical | item-sequence
    vocab_size: int = 1
    embed_dim: int = 8
    shares: str | None = None  # sequence fields embed through this field's table

    def __post_init__(self):
        if self.kind not in ("categorical", "item-sequence"):
            raise DataError(f"field {self.name!r}: unknown kind {self.kind!r}")
        if self.vocab_size < 1:
            raise DataError(f"field {self.name!r}: vocab_size must be >= 1")
        if self.embed_dim < 1:
            raise DataError(f"field {self.name!r}: embed_dim must be >= 1")


@dataclass(frozen=True)
class FeatureSchema:
    """Ordered feature fields of the recommender input.

    ``vocab_size`` counts the reserved pad and OOV slots. The single optional
    ``item-sequence`` field is the behaviour history; it is mean-pooled to one
    vector and shares the embedding table named by its ``shares`` attribute.
    """

    fields: tuple[FieldSpec, ...]
    history_len: int = 30

    def __post_init__(self):
        names = [f.name for f in self.fields]
        if len(set(names)) != len(names):
            raise DataError(f"duplicate field names in schema: {names}")
        seq = [f for f in self.fields if f.kind == "item-sequence"]
        if len(seq) > 1:
            raise DataError("at most one item-sequence field is allowed")
        for f in seq:
            if f.shares is not None:
                target = self.field(f.shares)
                if target.embed_dim != f.embed_dim:
                    raise DataError(
                        f"sequence field {f.name!r} must match width of {f.shares!r}"
                    )

    def field(self, name: str) -> FieldSpec:
        for f in self.fields:
            if f.name == name:
                return f
        raise KeyError(name)

    @property
    def categorical(self) -> tuple[FieldSpec, ...]:
        return tuple(f for f in self.fields if f.kind == "categorical")

    @property
    def sequence(self) -> FieldSpec | None:
        for f in self.fields:
            if f.kind == "item-sequence":
                return f
        return None

    @property
    def embed_width(self) -> int:
        """Total feature-embedding width ``d_e``."""
        return sum(f.embed_dim for f in self.fields)

    def to_dict(self) -> dict:
        return {"fields": [asdict(f) for f in self.fields], "history_len": self.history_len}

    @classmethod
    def from_dict(cls, d: dict) -> "FeatureSchema":
        return cls(tuple(FieldSpec(**f) for f in d["fields"]), d.get("history_len", 30))

    def hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()


@dataclass
class Sample:
    user_id: str
    item_id: str
    label: int
    timestamp: int
    context: dict[str, str] = field(default_factory=dict)
    history: list[str] = field(default_factory=list)
    sample_id: str = ""


@dataclass
class SampleSet:
    samples: list[Sample]
    context_fields: tuple[str, ...] = ()
    split: str = "all"

    def __len__(self):
        return len(self.samples)

    def __iter__(self):
        return iter(self.samples)

    @property
    def labels(self) -> np.ndarray:
        return np.array([s.label for s in self.samples], dtype=np.int64)


def binarize_rating(rating: float, dataset_kind: str) -> int:
    """Map a raw star rating to a click label.

    MovieLens counts a rating as positive only when it is strictly above 4;
    Amazon-Book treats anything below 5 as negative.
    """
    try:
        lo, hi = RATING_SCALE[dataset_kind]
    except KeyError:
        raise DataError(f"unknown dataset kind {dataset_kind!r}") from None
    if not (lo <= rating <= hi) or math.isnan(rating):
        raise DataError(f"rating {rating} outside [{lo:g}, {hi:g}] for {dataset_kind}")
    if dataset_kind == "movielens":
        return int(rating > 4)
    return 0 if rating < 5 else 1


def load_interactions(path: str | Path, dataset_kind: str = "movielens") -> SampleSet:
    """Read an interaction TSV (header ``user_id item_id rating timestamp [extras]``).

    Columns after ``timestamp`` become categorical context fields. Samples are
    returned in file order; each sample id is its 0-based data-row index.
    """
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"interaction file not found: {path}")
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh, delimiter="\t")
        try:
            header = next(reader)
        except StopIteration:
            logger.warning("empty interaction file %s", path)
            return SampleSet([], ())
        if tuple(header[:4]) != BASE_COLUMNS:
            raise DataError(f"{path}:1: header must start with {'/'.join(BASE_COLUMNS)}")
        extras = tuple(header[4:])
        samples = []
        for row_idx, row in enumerate(reader):
            lineno = row_idx + 2
            if len(row) != len(header):
                raise DataError(f"{path}:{lineno}: expected {len(header)} columns, got {len(row)}")
            try:
                rating = float(row[2])
                ts = int(row[3])
            except ValueError as exc:
                raise DataError(f"{path}:{lineno}: {exc}") from None
            try:
                label = binarize_rating(rating, dataset_kind)
            except DataError as exc:
                raise DataError(f"{path}:{lineno}: {exc}") from None
            samples.append(
                Sample(
                    user_id=row[0],
                    item_id=row[1],
                    label=label,
                    timestamp=ts,
                    context=dict(zip(extras, row[4:])),
                    sample_id=str(row_idx),
                )
            )
    if not samples:
        logger.warning("no interactions in %s", path)
    return SampleSet(samples, extras)


def convert_movielens_1m(src: str | Path, dst: str | Path) -> int:
    """Turn an extracted ``ml-1m`` directory into an interaction TSV.

    Reads ``ratings.dat`` and, when present, adds the first listed genre from
    ``movies.dat`` and gender/age/occupation from ``users.dat`` as context
    columns. Returns the number of rows written.
    """
    src = Path(src)
    ratings = src / "ratings.dat"
    if not ratings.is_file():
        raise FileNotFoundError(f"ratings file not found: {ratings}")

    def table(name):
        p = src / name
        if not p.is_file():
            return None
        with p.open(encoding="latin-1") as fh:
            return {parts[0]: parts[1:] for parts in (line.rstrip("\n").split("::") for line in fh) if parts[0]}

    movies, users = table("movies.dat"), table("users.dat")
    extras = (["genre"] if movies else []) + (["gender", "age", "occupation"] if users else [])
    n = 0
    with ratings.open(encoding="latin-1") as fh, Path(dst).open("w", newline="", encoding="utf-8") as out:
        w = csv.writer(out, delimiter="\t", lineterminator="\n")
        w.writerow(list(BASE_COLUMNS) + extras)
        for lineno, line in enumerate(fh, 1):
            parts = line.rstrip("\n").split("::")
            if len(parts) != 4:
                raise DataError(f"{ratings}:{lineno}: expected user::movie::rating::timestamp")
            u, m, r, t = parts
            row = [u, m, r, t]
            if movies:
                row.append(movies.get(m, ["", "unknown"])[1].split("|")[0])
            if users:
                row += users.get(u, ["unknown"] * 4)[:3]
            w.writerow(row)
            n += 1
    return n


def write_interactions(sset: SampleSet, path: str | Path, ratings: Sequence[float] | None = None):
    """Write samples as an interaction TSV; positives get rating 5, negatives 1."""
    path = Path(path)
    with path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, delimiter="\t", lineterminator="\n")
        w.writerow(list(BASE_COLUMNS) + list(sset.context_fields))
        for i, s in enumerate(sset.samples):
            r = ratings[i] if ratings is not None else (5 if s.label else 1)
            w.writerow([s.user_id, s.item_id, r, s.timestamp] + [s.context[c] for c in sset.context_fields])


def build_history(sset: SampleSet, max_len: int = 30) -> SampleSet:
    """Attach each sample's behaviour history.

    The history is the user's most recent ``max_len`` positively-labelled items
    with a timestamp strictly earlier than the sample's own. Padding is applied
    at encode time, so lists here hold real tokens only (oldest first).
    """
    if max_len < 1:
        raise DataError("history length must be >= 1")
    order = sorted(range(len(sset.samples)), key=lambda i: sset.samples[i].timestamp)
    recent: dict[str, deque] = defaultdict(lambda: deque(maxlen=max_len))
    out = [None] * len(sset.samples)
    i = 0
    while i < len(order):
        # samples sharing a timestamp must not see each other
        j = i
        ts = sset.samples[order[i]].timestamp
        while j < len(order) and sset.samples[order[j]].timestamp == ts:
            j += 1
        group = order[i:j]
        for k in group:
            s = sset.samples[k]
            out[k] = Sample(s.user_id, s.item_id, s.label, s.timestamp, dict(s.context),
                            list(recent[s.user_id]), s.sample_id)
        for k in group:
            s = sset.samples[k]
            if s.label == 1:
                recent[s.user_id].append(s.item_id)
        i = j
    return SampleSet(out, sset.context_fields, sset.split)


def split_sizes(n: int, ratios: Sequence[float]) -> tuple[int, int, int]:
    """Floor the val/test shares; the remainder goes to train."""
    if len(ratios) != 3 or any(r <= 0 for r in ratios) or not math.isclose(sum(ratios), 1.0):
        raise DataError(f"split ratios must be three positive numbers summing to 1, got {ratios}")
    if n < 3:
        raise DataError(f"need at least 3 samples to split, got {n}")
    # the epsilon absorbs float error such as 10 * 0.1 -> 0.9999999
    n_val = max(1, math.floor(n * ratios[1] + 1e-9))
    n_test = max(1, math.floor(n * ratios[2] + 1e-9))
    return n - n_val - n_test, n_val, n_test


def chronological_split(sset: SampleSet, ratios=(0.8, 0.1, 0.1)) -> tuple[SampleSet, SampleSet, SampleSet]:
    n_train, n_val, _ = split_sizes(len(sset), ratios)
    # sorted() is stable, so equal timestamps keep input order
    ordered = sorted(sset.samples, key=lambda s: s.timestamp)
    parts = (ordered[:n_train], ordered[n_train:n_train + n_val], ordered[n_train + n_val:])
    return tuple(SampleSet(p, sset.context_fields, tag) for p, tag in zip(parts, ("train", "val", "test")))


class Vocabulary:
    """Token to index map with reserved pad (0) and OOV (1) slots."""

    def __init__(self, tokens: Iterable[str] = ()):
        self.tokens: list[str] = []
        self.index: dict[str, int] = {}
        for t in tokens:
            self.add(t)

    def add(self, token: str) -> int:
        if token not in self.index:
            self.index[token] = len(self.tokens) + N_RESERVED
            self.tokens.append(token)
        return self.index[token]

    def encode(self, token: str) -> int:
        return self.index.get(token, OOV)

    def __len__(self):
        return len(self.tokens) + N_RESERVED


def build_vocabs(train: SampleSet) -> dict[str, Vocabulary]:
    """Vocabularies frozen on the training split (history items count as items)."""
    vocabs = {"user_id": Vocabulary(), "item_id": Vocabulary()}
    vocabs.update({c: Vocabulary() for c in train.context_fields})
    for s in train.samples:
        vocabs["user_id"].add(s.user_id)
        vocabs["item_id"].add(s.item_id)
        for c in train.context_fields:
            vocabs[c].add(s.context[c])
    for s in train.samples:
        for h in s.history:
            vocabs["item_id"].add(h)
    return vocabs


def make_schema(vocabs: dict[str, Vocabulary], context_fields: Sequence[str],
                embed_dim: int = 8, history_len: int = 30) -> FeatureSchema:
    specs = [FieldSpec("user_id", "categorical", len(vocabs["user_id"]), embed_dim),
             FieldSpec("item_id", "categorical", len(vocabs["item_id"]), embed_dim)]
    specs += [FieldSpec(c, "categorical", len(vocabs[c]), embed_dim) for c in context_fields]
    specs.append(FieldSpec("history", "item-sequence", len(vocabs["item_id"]), embed_dim, shares="item_id"))
    return FeatureSchema(tuple(specs), history_len)


@dataclass
class EncodedSplit:
    """Integer-encoded samples ready for batching.

    ``fields`` holds one column per categorical schema field; ``history`` is
    right-padded with :data:`PAD` to the schema's history length (most recent
    items kept). Raw user/item tokens are retained for knowledge joins.
    """

    fields: np.ndarray
    history: np.ndarray
    labels: np.ndarray
    timestamps: np.ndarray
    sample_ids: list[str]
    user_ids: list[str]
    item_ids: list[str]

    def __len__(self):
        return len(self.labels)

    def take(self, idx) -> "EncodedSplit":
        idx = np.asarray(idx, dtype=np.int64)
        return EncodedSplit(self.fields[idx], self.history[idx], self.labels[idx], self.timestamps[idx],
                            [self.sample_ids[i] for i in idx], [self.user_ids[i] for i in idx],
                            [self.item_ids[i] for i in idx])


def encode(sset: SampleSet, schema: FeatureSchema, vocabs: dict[str, Vocabulary]) -> EncodedSplit:
    cat = schema.categorical
    n, h = len(sset), schema.history_len
    fields = np.zeros((n, len(cat)), dtype=np.int64)
    hist = np.full((n, h), PAD, dtype=np.int64)
    item_vocab = vocabs["item_id"]
    for i, s in enumerate(sset.samples):
        for j, f in enumerate(cat):
            tok = {"user_id": s.user_id, "item_id": s.item_id}.get(f.name)
            if tok is None:
                tok = s.context[f.name]
            fields[i, j] = vocabs[f.name].encode(tok)
        recent = s.history[-h:]
        for j, tok in enumerate(recent):
            hist[i, j] = item_vocab.encode(tok)
    return EncodedSplit(
        fields=fields,
        history=hist,
        labels=np.array([s.label for s in sset.samples], dtype=np.float32),
        timestamps=np.array([s.timestamp for s in sset.samples], dtype=np.int64),
        sample_ids=[s.sample_id for s in sset.samples],
        user_ids=[s.user_id for s in sset.samples],
        item_ids=[s.item_id for s in sset.samples],
    )


@dataclass
class Prepared:
    schema: FeatureSchema
    vocabs: dict[str, Vocabulary]
    train: EncodedSplit
    val: EncodedSplit
    test: EncodedSplit
    counts: dict[str, int]


def prepare(sset: SampleSet, history_len: int = 30, ratios=(0.8, 0.1, 0.1), embed_dim: int = 8) -> Prepared:
    """History, chronological split, train-frozen vocabularies and encoding."""
    with_hist = build_history(sset, history_len)
    train, val, test = chronological_split(with_hist, ratios)
    vocabs = build_vocabs(train)
    schema = make_schema(vocabs, sset.context_fields, embed_dim, history_len)
    enc = [encode(s, schema, vocabs) for s in (train, val, test)]
    return Prepared(schema, vocabs, *enc, counts={"train": len(train), "val": len(val), "test": len(test)})


_ARRAYS = (("fields", "<i8"), ("history", "<i8"), ("labels", "<f4"), ("timestamps", "<i8"))
CACHE_VERSION = 1


def save_prepared(prep: Prepared, directory: str | Path, extra: dict | None = None) -> None:
    """Write a prepared dataset as raw little-endian arrays plus ``manifest.json``.

    Per split ``s``: ``s.fields.i64`` (n x F), ``s.history.i64`` (n x H),
    ``s.labels.f32``, ``s.timestamps.i64`` and ``s.ids.tsv`` (sample, user,
    item tokens). Vocabularies go to ``vocab/<field>.tokens`` in index order.
    Output bytes depend only on the inputs.
    """
    directory = Path(directory)
    (directory / "vocab").mkdir(parents=True, exist_ok=True)
    splits = {}
    for name in ("train", "val", "test"):
        enc: EncodedSplit = getattr(prep, name)
        files = {}
        for attr, dtype in _ARRAYS:
            arr = np.ascontiguousarray(getattr(enc, attr), dtype=dtype)
            fname = f"{name}.{attr}.{'f32' if dtype == '<f4' else 'i64'}"
            (directory / fname).write_bytes(arr.tobytes())
            files[attr] = {"file": fname, "shape": list(arr.shape), "dtype": dtype}
        with (directory / f"{name}.ids.tsv").open("w", encoding="utf-8", newline="") as fh:
            w = csv.writer(fh, delimiter="\t", lineterminator="\n")
            w.writerow(["sample_id", "user_id", "item_id"])
            w.writerows(zip(enc.sample_ids, enc.user_ids, enc.item_ids))
        files["ids"] = {"file": f"{name}.ids.tsv"}
        splits[name] = {"count": len(enc), "files": files}
    for field_name, vocab in sorted(prep.vocabs.items()):
        text = "".join(t + "\n" for t in vocab.tokens)
        (directory / "vocab" / f"{field_name}.tokens").write_text(text, encoding="utf-8")
    manifest = {
        "version": CACHE_VERSION,
        "schema": prep.schema.to_dict(),
        "schema_hash": prep.schema.hash(),
        "counts": prep.counts,
        "splits": splits,
        "vocabs": sorted(prep.vocabs),
    }
    if extra:
        manifest.update(extra)
    (directory / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def load_prepared(directory: str | Path) -> Prepared:
    directory = Path(directory)
    path = directory / "manifest.json"
    if not path.exists():
        raise DataError(f"{directory}: not a prepared cache (no manifest.json)")
    manifest = json.loads(path.read_text())
    if manifest.get("version") != CACHE_VERSION:
        raise DataError(f"{path}: unsupported cache version {manifest.get('version')!r}")
    schema = FeatureSchema.from_dict(manifest["schema"])
    if schema.hash() != manifest["schema_hash"]:
        raise DataError(f"{path}: schema hash mismatch")
    vocabs = {}
    for name in manifest["vocabs"]:
        text = (directory / "vocab" / f"{name}.tokens").read_text(encoding="utf-8")
        vocabs[name] = Vocabulary(text.split("\n")[:-1])
    parts = []
    for name in ("train", "val", "test"):
        files = manifest["splits"][name]["files"]
        arrays = {}
        for attr, dtype in _ARRAYS:
            meta = files[attr]
            raw = (directory / meta["file"]).read_bytes()
            expected = int(np.prod(meta["shape"])) * np.dtype(dtype).itemsize
            if len(raw) != expected:
                raise DataError(f"{directory / meta['file']}: byte-length mismatch "
                                f"(expected {expected}, found {len(raw)})")
            arrays[attr] = np.frombuffer(raw, dtype=dtype).reshape(meta["shape"]).astype(dtype[1:])
        with (directory / files["ids"]["file"]).open(encoding="utf-8", newline="") as fh:
            rows = list(csv.reader(fh, delimiter="\t"))[1:]
        ids = list(zip(*rows)) if rows else ([], [], [])
        parts.append(EncodedSplit(arrays["fields"], arrays["history"], arrays["labels"], arrays["timestamps"],
                                  list(ids[0]), list(ids[1]), list(ids[2])))
    return Prepared(schema, vocabs, *parts, counts=dict(manifest["counts"]))
