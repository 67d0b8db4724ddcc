"""Shared domain types, the embedding store, and vector math."""

from __future__ import annotations

import json
import os
import struct
from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

SI_KEYS = ("brand", "basecolor", "fabric", "priceband", "neck", "pattern")
EVENT_TYPES = ("click", "bag", "purchase")
DEFAULT_DIM = 100

MAGIC = b"EMBK"
STORE_VERSION = 1


class ProdEmbedError(Exception):
    """Base class for every error raised by this package."""


class UsageError(ProdEmbedError, ValueError):
    pass


class ConfigError(ProdEmbedError, ValueError):
    pass


class DataError(ProdEmbedError, ValueError):
    pass


class DegenerateInputError(DataError):
    pass


class IntegrityError(DataError):
    pass


class NotFoundError(ProdEmbedError, KeyError):
    def __str__(self) -> str:  # KeyError quotes its message otherwise
        return str(self.args[0]) if self.args else ""


class FormatError(DataError):
    def __init__(self, message: str, offset: int | None = None, line: int | None = None):
        where = []
        if offset is not None:
            where.append(f"byte offset {offset}")
        if line is not None:
            where.append(f"line {line}")
        super().__init__(f"{message} ({', '.join(where)})" if where else message)
        self.offset = offset
        self.line = line


def si_token(key: str, value: str) -> str:
    if key not in SI_KEYS:
        raise UsageError(f"unknown side-information key {key!r}")
    if not value:
        raise UsageError(f"empty value for side-information key {key!r}")
    return f"{key}={value}"


def is_si_token(token: str) -> bool:
    key, sep, _ = token.partition("=")
    return bool(sep) and key in SI_KEYS


def is_product_token(token: str) -> bool:
    return not is_si_token(token)


@dataclass(frozen=True)
class ProductRecord:
    """One catalog entry. ``si`` maps a subset of SI_KEYS to canonical values."""

    product_id: str
    si: Mapping[str, str] = field(default_factory=dict)

    def __post_init__(self):
        if not self.product_id or any(c.isspace() for c in self.product_id):
            raise UsageError(f"invalid product id {self.product_id!r}")
        for key, value in self.si.items():
            si_token(key, value)

    def si_tokens(self) -> list[str]:
        """SI tokens in canonical key order, absent keys skipped."""
        return [f"{k}={self.si[k]}" for k in SI_KEYS if k in self.si]


class EmbeddingTable:
    """Immutable mapping from token to a fixed-length float32 vector.

    Vectors are stored as one ``(n, dimension)`` float32 matrix in token
    insertion order; ``metadata`` carries the method name and config digest.
    """

    def __init__(
        self,
        tokens: Sequence[str],
        vectors: np.ndarray,
        metadata: Mapping[str, str] | None = None,
    ):
        vectors = np.array(vectors, dtype=np.float32, copy=True)
        if vectors.ndim != 2:
            raise UsageError("vectors must be a 2-d array")
        if len(tokens) != vectors.shape[0]:
            raise UsageError(f"{len(tokens)} tokens but {vectors.shape[0]} vectors")
        if vectors.shape[1] < 1:
            raise UsageError("dimension must be positive")
        if not np.all(np.isfinite(vectors)):
            raise UsageError("embedding vectors must be finite")
        self.tokens: tuple[str, ...] = tuple(tokens)
        self.index = {t: i for i, t in enumerate(self.tokens)}
        if len(self.index) != len(self.tokens):
            raise UsageError("duplicate tokens in embedding table")
        for t in self.tokens:
            if not isinstance(t, str) or not t:
                raise UsageError(f"invalid token {t!r}")
        vectors.flags.writeable = False
        self.vectors = vectors
        self.metadata = dict(metadata or {})
        self._unit: np.ndarray | None = None
        self._token_rank: np.ndarray | None = None

    @property
    def dimension(self) -> int:
        return self.vectors.shape[1]

    def __len__(self) -> int:
        return len(self.tokens)

    def __contains__(self, token: object) -> bool:
        return token in self.index

    def __getitem__(self, token: str) -> np.ndarray:
        try:
            return self.vectors[self.index[token]]
        except KeyError:
            raise NotFoundError(f"token {token!r} not in table") from None

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, EmbeddingTable):
            return NotImplemented
        return (
            self.tokens == other.tokens
            and self.vectors.shape == other.vectors.shape
            and self.vectors.tobytes() == other.vectors.tobytes()
        )

    def __repr__(self) -> str:
        name = self.metadata.get("method", "?")
        return f"EmbeddingTable(method={name}, n={len(self)}, dimension={self.dimension})"

    @classmethod
    def from_dict(cls, entries: Mapping[str, Sequence[float]], metadata=None) -> "EmbeddingTable":
        tokens = list(entries)
        if not tokens:
            raise UsageError("cannot build an empty embedding table")
        return cls(tokens, np.array([entries[t] for t in tokens], dtype=np.float32), metadata)

    def product_tokens(self) -> list[str]:
        return [t for t in self.tokens if is_product_token(t)]

    def subset(self, tokens: Iterable[str]) -> "EmbeddingTable":
        tokens = list(tokens)
        rows = [self.index[t] for t in tokens]
        return EmbeddingTable(tokens, self.vectors[rows], self.metadata)

    def with_metadata(self, **extra: str) -> "EmbeddingTable":
        meta = dict(self.metadata)
        meta.update(extra)
        return EmbeddingTable(self.tokens, self.vectors, meta)

    def unit_vectors(self) -> np.ndarray:
        """Row-normalized float64 copy; raises on any zero-norm row."""
        if self._unit is None:
            v = self.vectors.astype(np.float64)
            norms = np.linalg.norm(v, axis=1)
            if np.any(norms == 0):
                bad = self.tokens[int(np.argmax(norms == 0))]
                raise DegenerateInputError(f"zero-norm vector for token {bad!r}")
            self._unit = v / norms[:, None]
        return self._unit

    def token_rank(self) -> np.ndarray:
        """Position of each row in ascending token order (tie-break key)."""
        if self._token_rank is None:
            order = sorted(range(len(self.tokens)), key=self.tokens.__getitem__)
            rank = np.empty(len(order), dtype=np.int64)
            rank[order] = np.arange(len(order))
            self._token_rank = rank
        return self._token_rank


def cosine_similarity(a: Sequence[float], b: Sequence[float]) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise UsageError(f"dimension mismatch: {a.shape} vs {b.shape}")
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        raise DegenerateInputError("cosine similarity of a zero-norm vector")
    return float(np.clip(np.dot(a, b) / (na * nb), -1.0, 1.0))


def rank_order(similarities: np.ndarray, token_rank: np.ndarray) -> np.ndarray:
    """Indices sorted by descending similarity, ties by ascending token."""
    return np.lexsort((token_rank, -similarities))


def top_k_neighbors(
    table: EmbeddingTable,
    query: str,
    k: int,
    filter: Callable[[str], bool] | None = None,
) -> list[tuple[str, float]]:
    """The ``k`` tokens most cosine-similar to ``query``, query excluded.

    Ties are broken by ascending token. ``filter`` restricts the candidate
    set, e.g. ``is_product_token`` to skip side-information tokens.
    """
    if k < 1:
        raise UsageError("k must be >= 1")
    if query not in table:
        raise NotFoundError(f"query token {query!r} not in table")
    unit = table.unit_vectors()
    qi = table.index[query]
    sims = np.clip(unit @ unit[qi], -1.0, 1.0)
    mask = np.ones(len(table), dtype=bool)
    mask[qi] = False
    if filter is not None:
        mask &= np.fromiter((bool(filter(t)) for t in table.tokens), bool, len(table))
    candidates = np.flatnonzero(mask)
    order = candidates[rank_order(sims[candidates], table.token_rank()[candidates])]
    return [(table.tokens[i], float(sims[i])) for i in order[:k]]


# -- persistence -------------------------------------------------------------

_HEADER = struct.Struct("<4sBIQ")
_TEXT_ESCAPES = {"%": "%25", " ": "%20", "\t": "%09", "\n": "%0A", "\r": "%0D"}


def _is_text_path(path: str | os.PathLike) -> bool:
    return str(path).endswith((".txt", ".vec"))


def _meta_path(path: str | os.PathLike) -> str:
    return str(path) + ".meta.json"


def _escape(token: str) -> str:
    return "".join(_TEXT_ESCAPES.get(c, c) for c in token)


def _unescape(token: str) -> str:
    if "%" not in token:
        return token
    out, i = [], 0
    while i < len(token):
        if token[i] == "%" and i + 3 <= len(token):
            out.append(chr(int(token[i + 1 : i + 3], 16)))
            i += 3
        else:
            out.append(token[i])
            i += 1
    return "".join(out)


def encode_table(table: EmbeddingTable) -> bytes:
    if len(table) == 0:
        raise UsageError("refusing to save an empty embedding table")
    parts = [_HEADER.pack(MAGIC, STORE_VERSION, table.dimension, len(table))]
    vecs = table.vectors.astype("<f4")
    for token, row in zip(table.tokens, vecs):
        raw = token.encode("utf-8")
        if len(raw) > 0xFFFF:
            raise UsageError(f"token too long to store: {token[:40]!r}...")
        parts.append(struct.pack("<H", len(raw)))
        parts.append(raw)
        parts.append(row.tobytes())
    return b"".join(parts)


def decode_table(data: bytes, metadata: Mapping[str, str] | None = None) -> EmbeddingTable:
    if len(data) < _HEADER.size:
        raise FormatError("truncated header", offset=len(data))
    magic, version, dim, count = _HEADER.unpack_from(data, 0)
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}", offset=0)
    if version != STORE_VERSION:
        raise FormatError(f"unsupported version {version}", offset=4)
    if dim < 1:
        raise FormatError("dimension must be positive", offset=5)
    if count < 1:
        raise FormatError("empty table", offset=9)
    pos = _HEADER.size
    row_bytes = 4 * dim
    tokens: list[str] = []
    vectors = np.empty((count, dim), dtype=np.float32)
    for n in range(count):
        if pos + 2 > len(data):
            raise FormatError(f"truncated entry {n} token length", offset=pos)
        (tlen,) = struct.unpack_from("<H", data, pos)
        pos += 2
        if pos + tlen + row_bytes > len(data):
            raise FormatError(f"truncated entry {n}", offset=pos)
        try:
            tokens.append(data[pos : pos + tlen].decode("utf-8"))
        except UnicodeDecodeError as exc:
            raise FormatError(f"entry {n} token is not UTF-8", offset=pos) from exc
        pos += tlen
        vectors[n] = np.frombuffer(data, dtype="<f4", count=dim, offset=pos)
        pos += row_bytes
    if pos != len(data):
        raise FormatError("trailing bytes after last entry", offset=pos)
    try:
        return EmbeddingTable(tokens, vectors, metadata)
    except UsageError as exc:
        raise FormatError(str(exc), offset=_HEADER.size) from exc


def save_table(table: EmbeddingTable, path: str | os.PathLike) -> None:
    """Write ``table`` in binary (default) or text (``.txt``/``.vec``) format.

    Metadata, when present, goes to a ``<path>.meta.json`` sidecar.
    """
    if len(table) == 0:
        raise UsageError("refusing to save an empty embedding table")
    if _is_text_path(path):
        with open(path, "w", encoding="utf-8") as fh:
            for token, row in zip(table.tokens, table.vectors):
                fh.write(_escape(token) + " " + " ".join("%.6f" % x for x in row) + "\n")
    else:
        with open(path, "wb") as fh:
            fh.write(encode_table(table))
    if table.metadata:
        with open(_meta_path(path), "w", encoding="utf-8") as fh:
            json.dump(table.metadata, fh, sort_keys=True, indent=1)
            fh.write("\n")


def load_table(path: str | os.PathLike) -> EmbeddingTable:
    metadata = None
    if os.path.exists(_meta_path(path)):
        with open(_meta_path(path), encoding="utf-8") as fh:
            metadata = json.load(fh)
    if _is_text_path(path):
        return _load_text(path, metadata)
    with open(path, "rb") as fh:
        return decode_table(fh.read(), metadata)


def _load_text(path, metadata) -> EmbeddingTable:
    tokens, rows = [], []
    offset = 0
    dim = None
    with open(path, "rb") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.decode("utf-8").rstrip("\n")
            parts = line.split(" ")
            if len(parts) < 2:
                raise FormatError("line has no vector", offset=offset, line=lineno)
            if dim is None:
                dim = len(parts) - 1
            elif len(parts) - 1 != dim:
                raise FormatError(
                    f"expected {dim} values, found {len(parts) - 1}", offset=offset, line=lineno
                )
            try:
                rows.append([float(x) for x in parts[1:]])
            except ValueError as exc:
                raise FormatError(f"bad float: {exc}", offset=offset, line=lineno) from None
            tokens.append(_unescape(parts[0]))
            offset += len(raw)
    if not tokens:
        raise FormatError("empty table", offset=0)
    return EmbeddingTable(tokens, np.array(rows, dtype=np.float32), metadata)
