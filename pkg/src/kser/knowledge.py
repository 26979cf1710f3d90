"""On-disk knowledge packs and per-sample knowledge matrices.

A pack directory looks like::

    manifest.json
    <field>.keys   newline-delimited UTF-8 tokens, one per matrix row
    <field>.f32    raw little-endian row-major float32, count x dim

Every field shares the same width ``d_k``. A sample's knowledge matrix is
``d_k x L`` with one column per field, in manifest order.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

KEYED_BY = ("user_id", "item_id", "sample_id")
DTYPE = np.dtype("<f4")


class PackError(ValueError):
    pass


@dataclass
class KnowledgeField:
    name: str
    keyed_by: str
    keys: list[str]
    vectors: np.ndarray  # (count, dim) float32
    _index: dict[str, int] = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        if self.keyed_by not in KEYED_BY:
            raise PackError(f"field {self.name!r}: keyed_by must be one of {KEYED_BY}")
        self.vectors = np.ascontiguousarray(self.vectors, dtype=DTYPE)
        if self.vectors.ndim != 2 or self.vectors.shape[0] != len(self.keys):
            raise PackError(f"field {self.name!r}: {len(self.keys)} keys but vectors of shape {self.vectors.shape}")
        if not self.keys:
            raise PackError(f"field {self.name!r}: empty key set")
        index = {}
        for row, k in enumerate(self.keys):
            if "\n" in k or "\r" in k:
                raise PackError(f"field {self.name!r}: key at row {row} contains a newline")
            if k in index:
                raise PackError(f"field {self.name!r}: duplicate key {k!r} at row {row}")
            index[k] = row
        self._index = index
        bad = np.nonzero(~np.isfinite(self.vectors).all(axis=1))[0]
        if bad.size:
            raise PackError(f"field {self.name!r}: non-finite value at row {int(bad[0])}")

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]

    def row(self, key: str) -> int:
        return self._index.get(key, -1)

    def __eq__(self, other):
        return (isinstance(other, KnowledgeField) and self.name == other.name
                and self.keyed_by == other.keyed_by and self.keys == other.keys
                and np.array_equal(self.vectors, other.vectors))


@dataclass
class KnowledgePack:
    fields: list[KnowledgeField]

    def __post_init__(self):
        if not self.fields:
            raise PackError("a knowledge pack needs at least one field")
        dims = {f.dim for f in self.fields}
        if len(dims) != 1:
            raise PackError(f"all knowledge fields must share one width, got {sorted(dims)}")
        names = [f.name for f in self.fields]
        if len(set(names)) != len(names):
            raise PackError(f"duplicate field names {names}")

    @property
    def dim(self) -> int:
        return self.fields[0].dim

    @property
    def n_fields(self) -> int:
        return len(self.fields)

    @property
    def names(self) -> list[str]:
        return [f.name for f in self.fields]

    def __getitem__(self, name: str) -> KnowledgeField:
        for f in self.fields:
            if f.name == name:
                return f
        raise KeyError(name)


def manifest(pack: KnowledgePack) -> dict:
    return {
        "fields": [{"name": f.name, "dim": f.dim, "keyed_by": f.keyed_by, "count": len(f.keys)}
                   for f in pack.fields],
        "dtype": "f32",
        "byte_order": "little-endian",
        "layout": "row-major",
    }


def write_pack(pack: KnowledgePack, directory: str | Path) -> None:
    directory = Path(directory)
    try:
        directory.mkdir(parents=True, exist_ok=True)
        (directory / "manifest.json").write_text(json.dumps(manifest(pack), indent=2) + "\n", encoding="utf-8")
        for f in pack.fields:
            (directory / f"{f.name}.keys").write_bytes(("\n".join(f.keys) + "\n").encode("utf-8"))
            (directory / f"{f.name}.f32").write_bytes(f.vectors.astype(DTYPE, copy=False).tobytes(order="C"))
    except OSError as exc:
        raise OSError(f"cannot write knowledge pack to {directory}: {exc}") from exc


def load_pack(directory: str | Path) -> KnowledgePack:
    directory = Path(directory)
    try:
        meta = json.loads((directory / "manifest.json").read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise PackError(f"{directory}: missing manifest.json") from None
    if meta.get("dtype") != "f32" or meta.get("byte_order") != "little-endian" or meta.get("layout") != "row-major":
        raise PackError(f"{directory}: unsupported dtype/byte_order/layout in manifest")
    fields = []
    for spec in meta["fields"]:
        name, dim, count = spec["name"], int(spec["dim"]), int(spec["count"])
        raw = (directory / f"{name}.f32").read_bytes()
        if len(raw) != count * dim * DTYPE.itemsize:
            raise PackError(
                f"field {name!r}: byte-length mismatch ({len(raw)} bytes, expected {count}x{dim}x4)")
        text = (directory / f"{name}.keys").read_bytes().decode("utf-8")
        keys = text.split("\n")
        if keys and keys[-1] == "":
            keys.pop()
        if len(keys) != count:
            raise PackError(f"field {name!r}: {len(keys)} keys but manifest count {count}")
        vectors = np.frombuffer(raw, dtype=DTYPE).reshape(count, dim).copy()
        fields.append(KnowledgeField(name, spec["keyed_by"], keys, vectors))
    return KnowledgePack(fields)


def _join_key(keyed_by: str, user_id: str, item_id: str, sample_id: str) -> str:
    return {"user_id": user_id, "item_id": item_id, "sample_id": sample_id}[keyed_by]


def assemble_knowledge(sample, pack: KnowledgePack, strict: bool = False) -> tuple[np.ndarray, bool]:
    """Knowledge matrix (d_k x L) for one sample, plus a missing-key flag.

    Missing keys yield a zero column unless ``strict`` is set.
    """
    out = np.zeros((pack.dim, pack.n_fields), dtype=DTYPE)
    missing = False
    for j, f in enumerate(pack.fields):
        key = _join_key(f.keyed_by, sample.user_id, sample.item_id, sample.sample_id)
        row = f.row(key)
        if row < 0:
            if strict:
                raise KeyError(f"knowledge field {f.name!r} has no entry for {f.keyed_by}={key!r}")
            missing = True
            continue
        out[:, j] = f.vectors[row]
    return out, missing


class KnowledgeIndex:
    """Row lookups of a pack for a whole encoded split, gathered per batch.

    Avoids materialising an N x d_k x L array for large logs.
    """

    def __init__(self, pack: KnowledgePack, user_ids: Sequence[str], item_ids: Sequence[str],
                 sample_ids: Sequence[str], strict: bool = False):
        self.pack = pack
        n = len(user_ids)
        self.rows = np.empty((n, pack.n_fields), dtype=np.int64)
        # row `count` of each padded table is the zero fallback vector
        self.tables = []
        for j, f in enumerate(pack.fields):
            ids = {"user_id": user_ids, "item_id": item_ids, "sample_id": sample_ids}[f.keyed_by]
            rows = np.fromiter((f.row(k) for k in ids), dtype=np.int64, count=n)
            if strict and (rows < 0).any():
                bad = int(np.argmax(rows < 0))
                raise KeyError(f"knowledge field {f.name!r} has no entry for {f.keyed_by}={ids[bad]!r}")
            rows[rows < 0] = len(f.keys)
            self.rows[:, j] = rows
            self.tables.append(np.vstack([f.vectors, np.zeros((1, f.dim), dtype=DTYPE)]))
        self.missing = np.stack([self.rows[:, j] == len(f.keys) for j, f in enumerate(pack.fields)], axis=1)

    def gather(self, idx) -> np.ndarray:
        """Knowledge matrices for sample positions ``idx``: shape (B, d_k, L)."""
        cols = [t[self.rows[idx, j]] for j, t in enumerate(self.tables)]
        return np.stack(cols, axis=2)


def chunk(k: np.ndarray, n_chunks: int) -> np.ndarray:
    """Partition each knowledge column into ``n_chunks`` contiguous slices.

    ``k`` is ``(d_k, L)`` (or batched ``(..., d_k, L)``); the result is
    ``(..., C, L, s)`` with ``s = d_k / C``, where entry ``[c, j]`` is rows
    ``c*s:(c+1)*s`` of column ``j``.
    """
    d_k = k.shape[-2]
    if n_chunks < 1 or d_k % n_chunks:
        raise ValueError(
            f"knowledge width d_k={d_k} must be divisible by the number of chunks C={n_chunks}")
    s = d_k // n_chunks
    lead = k.shape[:-2]
    L = k.shape[-1]
    grid = k.reshape(*lead, n_chunks, s, L)
    return np.swapaxes(grid, -1, -2)


def unchunk(chunks: np.ndarray) -> np.ndarray:
    """Inverse of :func:`chunk`."""
    *lead, C, L, s = chunks.shape
    return np.swapaxes(chunks, -1, -2).reshape(*lead, C * s, L)
