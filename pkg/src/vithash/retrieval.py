"""Binary codes, exhaustive Hamming ranking and retrieval metrics.

Codes are stored packed in 64-bit words: bit ``j`` of a code lives in word
``j // 64`` at bit position ``j % 64`` (least-significant bit first). A set
bit encodes +1 and a clear bit encodes -1. Unused high bits of the last word
are always zero.

Relevance between a query and a gallery item means their label sets overlap.
"""
from __future__ import annotations

import os
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .errors import ContractError, FormatError

# -- packing -----------------------------------------------------------------


def num_words(nbits: int) -> int:
    return (nbits + 63) // 64


def sign_bits(values) -> np.ndarray:
    """+1 where value > 0, else -1 (so zero maps to -1)."""
    return np.where(np.asarray(values) > 0, 1, -1).astype(np.int8)


def pack_bits(values) -> np.ndarray:
    """(..., B) real or +-1 array -> (..., ceil(B/64)) uint64 words."""
    bits = np.asarray(values) > 0
    nbits = bits.shape[-1]
    pad = num_words(nbits) * 64 - nbits
    if pad:
        bits = np.concatenate([bits, np.zeros(bits.shape[:-1] + (pad,), dtype=bool)], axis=-1)
    packed = np.packbits(bits, axis=-1, bitorder="little")
    return np.ascontiguousarray(packed).view("<u8").astype(np.uint64)


def unpack_bits(words: np.ndarray, nbits: int) -> np.ndarray:
    """Inverse of :func:`pack_bits`, returning a +-1 int8 array."""
    words = np.ascontiguousarray(np.asarray(words, dtype="<u8"))
    bits = np.unpackbits(words.view(np.uint8), axis=-1, bitorder="little")[..., :nbits]
    return np.where(bits == 1, 1, -1).astype(np.int8)


@dataclass(frozen=True)
class HashCode:
    words: np.ndarray
    nbits: int

    @classmethod
    def from_values(cls, values) -> HashCode:
        values = np.asarray(values)
        return cls(pack_bits(values), values.shape[-1])

    def signs(self) -> np.ndarray:
        return unpack_bits(self.words, self.nbits)

    def __eq__(self, other) -> bool:
        return (
            isinstance(other, HashCode)
            and self.nbits == other.nbits
            and np.array_equal(self.words, other.words)
        )

    def __hash__(self) -> int:
        return hash((self.nbits, self.words.tobytes()))


def binarize(hset, expected_bits: int | None = None) -> list[HashCode]:
    """Concatenate global then local 1..K hash vectors and sign-threshold.

    ``hset`` is a :class:`HashVectorSet` (batched) or a sequence of stream
    arrays. Returns one code per row.
    """
    streams = hset.streams if hasattr(hset, "streams") else hset
    arrays = [np.atleast_2d(np.asarray(getattr(s, "data", s))) for s in streams]
    values = np.concatenate(arrays, axis=-1)
    if expected_bits is not None and values.shape[-1] != expected_bits:
        raise ContractError(f"hash vectors have {values.shape[-1]} entries, expected {expected_bits}")
    words = pack_bits(values)
    return [HashCode(w, values.shape[-1]) for w in words]


# -- distances ---------------------------------------------------------------


def hamming_distance(a: HashCode, b: HashCode) -> int:
    """Number of differing bits (popcount of the XOR of packed words)."""
    if a.nbits != b.nbits:
        raise ContractError(f"cannot compare {a.nbits}-bit and {b.nbits}-bit codes")
    return int(np.bitwise_count(a.words ^ b.words).sum())


def hamming_to_all(words: np.ndarray, gallery: np.ndarray) -> np.ndarray:
    """Distances from one packed code (W,) to every row of (n, W)."""
    return np.bitwise_count(gallery ^ words).sum(axis=-1, dtype=np.int64)


# -- index -------------------------------------------------------------------


@dataclass(frozen=True)
class CodeIndex:
    """Immutable gallery of packed codes with ids and label sets."""

    words: np.ndarray
    nbits: int
    ids: np.ndarray
    labels: tuple[frozenset, ...]

    @classmethod
    def build(cls, codes: Sequence[HashCode], ids: Iterable[int], labels: Iterable[Iterable[int]]) -> CodeIndex:
        ids = np.asarray(list(ids), dtype=np.uint64)
        labels = tuple(frozenset(int(x) for x in lab) for lab in labels)
        if not (len(codes) == len(ids) == len(labels)):
            raise ContractError(
                f"index arrays differ in length: {len(codes)} codes, {len(ids)} ids, {len(labels)} label sets"
            )
        nbits = codes[0].nbits if codes else 0
        if any(c.nbits != nbits for c in codes):
            raise ContractError("all codes in an index must have the same length")
        words = np.stack([c.words for c in codes]) if codes else np.zeros((0, 0), dtype=np.uint64)
        return cls.from_words(words, nbits, ids, labels)

    @classmethod
    def from_words(cls, words, nbits, ids, labels) -> CodeIndex:
        words = np.asarray(words, dtype=np.uint64).copy()
        words.setflags(write=False)
        ids = np.asarray(ids, dtype=np.uint64).copy()
        ids.setflags(write=False)
        return cls(words, int(nbits), ids, tuple(frozenset(lab) for lab in labels))

    def __len__(self) -> int:
        return len(self.ids)

    def code(self, i: int) -> HashCode:
        return HashCode(self.words[i], self.nbits)

    @property
    def codes(self) -> list[HashCode]:
        return [self.code(i) for i in range(len(self))]

    def relevance(self, query_labels: Iterable[int]) -> np.ndarray:
        """Boolean mask: gallery items sharing a label with the query."""
        q = frozenset(query_labels)
        return np.fromiter((not q.isdisjoint(lab) for lab in self.labels), dtype=bool, count=len(self))


def rank(query: HashCode, index: CodeIndex) -> list[tuple[int, int]]:
    """Gallery ``(id, distance)`` by ascending distance; ties keep insertion order."""
    order, dist = _rank_positions(query, index)
    return [(int(index.ids[i]), int(dist[i])) for i in order]


def _rank_positions(query: HashCode, index: CodeIndex) -> tuple[np.ndarray, np.ndarray]:
    if len(index) == 0:
        raise ContractError("cannot rank against an empty index")
    if query.nbits != index.nbits:
        raise ContractError(f"query has {query.nbits} bits but the index holds {index.nbits}-bit codes")
    dist = hamming_to_all(query.words, index.words)
    return np.argsort(dist, kind="stable"), dist


# -- metrics -----------------------------------------------------------------


def average_precision(relevant, n: int) -> float:
    """AP over the first ``n`` ranked items.

    ``relevant`` is the 0/1 relevance of the ranked list. The denominator is
    the number of relevant items found within the top ``n``; a list with none
    scores 0.
    """
    if n < 1:
        raise ContractError(f"AP cutoff must be >= 1, got {n}")
    rel = np.asarray(relevant, dtype=bool)
    if rel.size == 0:
        raise ContractError("AP of an empty ranking is undefined")
    rel = rel[:n]
    hits = np.cumsum(rel)
    found = int(hits[-1])
    if found == 0:
        return 0.0
    positions = np.arange(1, rel.size + 1)
    return float((hits[rel] / positions[rel]).sum() / found)


def average_precision_at_n(ranking, query_labels, n: int, index: CodeIndex | None = None) -> float:
    """AP@n for a ranking.

    ``ranking`` is either a list of ranked gallery label sets or, with
    ``index`` given, the ``(id, distance)`` list returned by :func:`rank`.
    """
    if len(ranking) == 0:
        raise ContractError("AP of an empty ranking is undefined")
    q = frozenset(query_labels)
    if index is not None:
        pos = {int(i): p for p, i in enumerate(index.ids)}
        ranked_labels = [index.labels[pos[int(item_id)]] for item_id, _ in ranking]
    else:
        ranked_labels = ranking
    rel = [not q.isdisjoint(lab) for lab in ranked_labels]
    return average_precision(rel, n)


def _thread_count() -> int:
    try:
        return max(1, int(os.environ.get("THASH_THREADS", "1")))
    except ValueError:
        return 1


def _per_query(queries: CodeIndex, index: CodeIndex, fn) -> list:
    if queries.nbits != index.nbits:
        raise ContractError(f"query codes have {queries.nbits} bits, database codes {index.nbits}")

    def one(qi):
        order, dist = _rank_positions(queries.code(qi), index)
        return fn(index.relevance(queries.labels[qi]), order, dist)

    threads = _thread_count()
    if threads == 1:
        return [one(i) for i in range(len(queries))]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(one, range(len(queries))))


def mean_ap(queries: CodeIndex, index: CodeIndex, n: int | None = None) -> float:
    """Mean of per-query AP@n; ``n=None`` uses the whole database."""
    if len(queries) == 0:
        raise ContractError("mAP needs at least one query")
    n = len(index) if n is None else n
    aps = _per_query(queries, index, lambda rel, order, dist: average_precision(rel[order], n))
    return float(np.mean(aps))


def precision_at_topk(queries: CodeIndex, index: CodeIndex, ks: Sequence[int]) -> list[float]:
    """Mean over queries of (#relevant in top k) / k, for each k."""
    ks = [int(k) for k in ks]
    for k in ks:
        if not 1 <= k <= len(index):
            raise ContractError(f"top-k cutoff {k} outside [1, {len(index)}]")

    def fn(rel, order, dist):
        hits = np.cumsum(rel[order])
        return [hits[k - 1] / k for k in ks]

    rows = np.array(_per_query(queries, index, fn), dtype=np.float64)
    return [float(v) for v in rows.mean(axis=0)]


@dataclass(frozen=True)
class PRPoint:
    threshold: int
    recall: float
    precision: float


def precision_recall_curve(queries: CodeIndex, index: CodeIndex) -> list[PRPoint]:
    """Micro-averaged precision/recall for Hamming radius r = 0..B.

    At radius r every gallery item within distance r is retrieved. Radii at
    which no query retrieves anything have no defined precision and are
    omitted.
    """
    nbits = index.nbits

    def fn(rel, order, dist):
        retrieved = np.bincount(dist, minlength=nbits + 1)
        hits = np.bincount(dist[rel], minlength=nbits + 1)
        return np.cumsum(retrieved), np.cumsum(hits), int(rel.sum())

    out = _per_query(queries, index, fn)
    retrieved = sum(o[0] for o in out)
    hits = sum(o[1] for o in out)
    relevant = sum(o[2] for o in out)
    points = []
    for r in range(nbits + 1):
        if retrieved[r] == 0:
            continue
        recall = hits[r] / relevant if relevant else 0.0
        points.append(PRPoint(r, float(recall), float(hits[r] / retrieved[r])))
    return points


def precision_recall_by_rank(queries: CodeIndex, index: CodeIndex) -> list[PRPoint]:
    """Micro-averaged precision/recall at every rank cutoff 1..n (threshold = cutoff)."""
    def fn(rel, order, dist):
        return np.cumsum(rel[order]), int(rel.sum())

    out = _per_query(queries, index, fn)
    hits = sum(o[0] for o in out)
    relevant = sum(o[1] for o in out)
    nq = len(queries)
    return [
        PRPoint(k, float(hits[k - 1] / relevant) if relevant else 0.0, float(hits[k - 1] / (nq * k)))
        for k in range(1, len(index) + 1)
    ]


# -- index file --------------------------------------------------------------

INDEX_MAGIC = b"THIX"
INDEX_VERSION = 1


def index_to_bytes(index: CodeIndex) -> bytes:
    """Little-endian layout::

        "THIX" | version u16 | B u16 | count u64
        per item: id u64 | nlabels u16 | nlabels x u32 | ceil(B/64) x u64 words
    """
    parts = [INDEX_MAGIC, struct.pack("<HHQ", INDEX_VERSION, index.nbits, len(index))]
    for i in range(len(index)):
        labels = sorted(index.labels[i])
        parts.append(struct.pack(f"<QH{len(labels)}I", int(index.ids[i]), len(labels), *labels))
        parts.append(np.asarray(index.words[i], dtype="<u8").tobytes())
    return b"".join(parts)


def index_from_bytes(buf: bytes) -> CodeIndex:
    view = memoryview(buf)
    pos = 0

    def need(n: int, what: str):
        if pos + n > len(view):
            raise FormatError(f"truncated index file while reading {what}", pos)

    need(4, "magic")
    if bytes(view[:4]) != INDEX_MAGIC:
        raise FormatError(f"bad magic {bytes(view[:4])!r}, expected {INDEX_MAGIC!r}", 0)
    pos = 4
    need(12, "header")
    version, nbits, count = struct.unpack_from("<HHQ", view, pos)
    if version != INDEX_VERSION:
        raise FormatError(f"unsupported index version {version}", pos)
    pos += 12
    nw = num_words(nbits)
    ids = np.empty(count, dtype=np.uint64)
    words = np.empty((count, nw), dtype=np.uint64)
    labels = []
    for i in range(count):
        need(10, f"item {i} header")
        ids[i], nl = struct.unpack_from("<QH", view, pos)
        pos += 10
        need(4 * nl, f"item {i} labels")
        labels.append(frozenset(struct.unpack_from(f"<{nl}I", view, pos)))
        pos += 4 * nl
        need(8 * nw, f"item {i} code")
        words[i] = np.frombuffer(view, dtype="<u8", count=nw, offset=pos)
        pos += 8 * nw
    if pos != len(view):
        raise FormatError(f"{len(view) - pos} trailing bytes after last item", pos)
    return CodeIndex.from_words(words, nbits, ids, labels)


def save_index(index: CodeIndex, path) -> None:
    with open(path, "wb") as fh:
        fh.write(index_to_bytes(index))


def load_index(path) -> CodeIndex:
    with open(path, "rb") as fh:
        return index_from_bytes(fh.read())
