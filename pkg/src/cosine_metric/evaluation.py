"""Embedding extraction, distances and single-shot cross-view re-id metrics.

Ranking is by ascending distance; ties keep gallery input order.  For every
query, gallery items sharing both its identity and its camera are removed,
as are distractors (identity < 0).  A relevant item has the query's identity
and a different camera.  Queries without any relevant item are skipped and
do not enter the CMC or mAP denominators.
"""

from __future__ import annotations

import json
import logging
import math
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ShapeError, SizeOverflowError, ZeroNormError
from .tensor import MAX_ELEMENTS, BinaryReader

log = logging.getLogger(__name__)

METRICS = ("cosine", "euclidean")
EMBEDDING_MAGIC = b"CMLE"
EMBEDDING_VERSION = 1
# Distance rows are computed in fixed-size chunks so results never depend on
# how many threads share the work.
DISTANCE_CHUNK_ELEMENTS = 1 << 22


@dataclass(frozen=True)
class EmbeddingRecord:
    identity: int
    camera: int
    vector: np.ndarray


@dataclass
class EmbeddingSet:
    """Column-oriented collection of :class:`EmbeddingRecord`."""

    identities: np.ndarray
    cameras: np.ndarray
    vectors: np.ndarray

    def __post_init__(self):
        self.identities = np.asarray(self.identities, dtype=np.int64)
        self.cameras = np.asarray(self.cameras, dtype=np.int64)
        self.vectors = np.asarray(self.vectors, dtype=np.float64)
        if self.vectors.ndim != 2:
            self.vectors = self.vectors.reshape(len(self.identities), -1)
        n = len(self.identities)
        if self.cameras.shape != (n,) or self.vectors.shape[0] != n:
            raise ShapeError("identities, cameras and vectors must have matching lengths")

    @classmethod
    def from_records(cls, records) -> "EmbeddingSet":
        records = list(records)
        if not records:
            raise ValueError("cannot build an embedding set from zero records")
        return cls([r.identity for r in records], [r.camera for r in records],
                   np.stack([np.asarray(r.vector, dtype=np.float64) for r in records]))

    def __len__(self):
        return len(self.identities)

    def __getitem__(self, i: int) -> EmbeddingRecord:
        return EmbeddingRecord(int(self.identities[i]), int(self.cameras[i]), self.vectors[i])

    def __iter__(self):
        return (self[i] for i in range(len(self)))

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]


# -- file format ------------------------------------------------------------

def encode_embeddings(es: EmbeddingSet) -> bytes:
    parts = [EMBEDDING_MAGIC, struct.pack("<IQI", EMBEDDING_VERSION, len(es), es.dim)]
    rec = np.dtype([("identity", "<i8"), ("camera", "<i4"), ("vector", "<f4", (es.dim,))])
    table = np.empty(len(es), dtype=rec)
    table["identity"] = es.identities
    table["camera"] = es.cameras
    table["vector"] = es.vectors
    parts.append(table.tobytes())
    return b"".join(parts)


def decode_embeddings(data: bytes) -> EmbeddingSet:
    r = BinaryReader(data, "embedding file")
    r.magic(EMBEDDING_MAGIC)
    r.version(EMBEDDING_VERSION)
    count, dim = r.unpack("<QI")
    rec = np.dtype([("identity", "<i8"), ("camera", "<i4"), ("vector", "<f4", (dim,))])
    if count * max(dim, 1) > MAX_ELEMENTS or dim == 0:
        raise SizeOverflowError(f"embedding file declares {count} x {dim} values")
    table = np.frombuffer(r.take(count * rec.itemsize), dtype=rec)
    r.finish()
    return EmbeddingSet(table["identity"].copy(), table["camera"].copy(),
                        table["vector"].astype(np.float64).reshape(count, dim))


def save_embeddings(path, es: EmbeddingSet) -> None:
    Path(path).write_bytes(encode_embeddings(es))


def load_embeddings(path) -> EmbeddingSet:
    return decode_embeddings(Path(path).read_bytes())


# -- extraction -------------------------------------------------------------

def extract_embeddings(encoder, dataset, batch_size: int = 64, threads: int = 1) -> EmbeddingSet:
    """Embed every entry of ``dataset`` in inference mode, preserving order."""
    n = len(dataset)
    starts = list(range(0, n, batch_size))

    def run(start):
        positions = range(start, min(start + batch_size, n))
        return encoder.embed(dataset.load_batch(positions))

    if threads > 1 and len(starts) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            chunks = list(pool.map(run, starts))
    else:
        chunks = [run(s) for s in starts]
    vectors = np.concatenate(chunks, axis=0) if chunks else np.zeros((0, encoder.embedding_dim))
    return EmbeddingSet(dataset.identities, dataset.cameras, vectors)


# -- distances --------------------------------------------------------------

def _unit_rows(x: np.ndarray, what: str) -> np.ndarray:
    norms = np.linalg.norm(x, axis=1)
    zero = np.flatnonzero(norms == 0.0)
    if zero.size:
        raise ZeroNormError(f"{what} record {int(zero[0])} has a zero-length vector")
    return x / norms[:, None]


def distance_matrix(queries, gallery, metric: str = "cosine", threads: int = 1) -> np.ndarray:
    """``cosine``: ``1 - a.b / (|a||b|)``;  ``euclidean``: ``|a - b|_2``."""
    q = np.asarray(queries, dtype=np.float64)
    g = np.asarray(gallery, dtype=np.float64)
    if q.ndim != 2 or g.ndim != 2 or q.shape[1] != g.shape[1]:
        raise ShapeError(f"distance matrix: query {q.shape} and gallery {g.shape} dims differ")
    if metric not in METRICS:
        raise ValueError(f"unknown metric {metric!r}; expected one of {METRICS}")
    if metric == "cosine":
        q, g = _unit_rows(q, "query"), _unit_rows(g, "gallery")
    rows = max(1, DISTANCE_CHUNK_ELEMENTS // max(1, g.shape[0] * g.shape[1]))
    starts = range(0, q.shape[0], rows)
    out = np.empty((q.shape[0], g.shape[0]))

    def fill(start):
        block = q[start:start + rows]
        if metric == "cosine":
            out[start:start + rows] = 1.0 - block @ g.T
        else:
            diff = block[:, None, :] - g[None, :, :]
            out[start:start + rows] = np.sqrt(np.einsum("ijk,ijk->ij", diff, diff))

    if threads > 1 and len(starts) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            list(pool.map(fill, starts))
    else:
        for s in starts:
            fill(s)
    return out


# -- single-shot protocol ---------------------------------------------------

@dataclass
class QueryResult:
    ranking: np.ndarray  # gallery indices after exclusion, best first
    ap: float
    first_hit: int | None  # 1-based rank of the first relevant item
    valid: bool


@dataclass
class EvalReport:
    cmc: np.ndarray
    map: float
    num_valid_queries: int
    num_skipped: int = 0
    per_query: list[QueryResult] = field(default_factory=list, repr=False)

    def rank(self, k: int) -> float:
        return float(self.cmc[k - 1])

    def to_dict(self) -> dict:
        return {"cmc": [float(v) for v in self.cmc], "map": float(self.map),
                "num_valid_queries": int(self.num_valid_queries)}

    def to_json(self) -> str:
        return json.dumps(self.to_dict())


def _summarise(first_hits: list[int | None], aps: list[float], max_rank: int,
               per_query: list[QueryResult]) -> EvalReport:
    valid = [r for r in first_hits if r is not None]
    n_valid = len(valid)
    cmc = np.zeros(max_rank)
    if n_valid:
        hits = np.array(valid)
        cmc = np.array([np.count_nonzero(hits <= k) for k in range(1, max_rank + 1)]) / n_valid
        mean_ap = float(np.mean(aps))
    else:
        mean_ap = 0.0
    skipped = len(first_hits) - n_valid
    if skipped:
        log.info("skipped %d query(ies) without a cross-camera match", skipped)
    return EvalReport(cmc, mean_ap, n_valid, skipped, per_query)


def evaluate_single_shot(queries: EmbeddingSet, gallery: EmbeddingSet, metric: str = "cosine",
                         max_rank: int = 50, threads: int = 1,
                         distances: np.ndarray | None = None) -> EvalReport:
    if queries.dim != gallery.dim:
        raise ShapeError(f"query dim {queries.dim} != gallery dim {gallery.dim}")
    dist = distance_matrix(queries.vectors, gallery.vectors, metric, threads) if distances is None else distances
    order_all = np.argsort(dist, axis=1, kind="stable")
    first_hits, aps, per_query = [], [], []
    for qi in range(len(queries)):
        qid, qcam = queries.identities[qi], queries.cameras[qi]
        order = order_all[qi]
        gid, gcam = gallery.identities[order], gallery.cameras[order]
        keep = (gid >= 0) & ~((gid == qid) & (gcam == qcam))
        ranking = order[keep]
        relevant = gid[keep] == qid
        if qid < 0 or not relevant.any():
            first_hits.append(None)
            per_query.append(QueryResult(ranking, 0.0, None, False))
            continue
        positions = np.flatnonzero(relevant) + 1
        precision = np.arange(1, positions.size + 1) / positions
        ap = float(precision.mean())
        first_hits.append(int(positions[0]))
        aps.append(ap)
        per_query.append(QueryResult(ranking, ap, int(positions[0]), True))
    return _summarise(first_hits, aps, max_rank, per_query)


def oracle_evaluate(queries: EmbeddingSet, gallery: EmbeddingSet, metric: str = "cosine",
                    max_rank: int = 50) -> EvalReport:
    """Reference implementation with pure-Python loops; for verification only."""

    def dist(a, b):
        if metric == "euclidean":
            return math.sqrt(math.fsum((x - y) ** 2 for x, y in zip(a, b)))
        na = math.sqrt(math.fsum(x * x for x in a))
        nb = math.sqrt(math.fsum(y * y for y in b))
        if na == 0.0 or nb == 0.0:
            raise ZeroNormError("zero-length vector under cosine distance")
        return 1.0 - math.fsum(x * y for x, y in zip(a, b)) / (na * nb)

    gvecs = [list(map(float, v)) for v in gallery.vectors]
    first_hits, aps, per_query = [], [], []
    for qi in range(len(queries)):
        qid, qcam = int(queries.identities[qi]), int(queries.cameras[qi])
        qvec = list(map(float, queries.vectors[qi]))
        candidates = []
        for gi in range(len(gallery)):
            gid, gcam = int(gallery.identities[gi]), int(gallery.cameras[gi])
            if gid < 0 or (gid == qid and gcam == qcam):
                continue
            candidates.append((dist(qvec, gvecs[gi]), gi))
        candidates.sort()
        ranking = [gi for _, gi in candidates]
        hits = 0
        precisions = []
        first = None
        for rank, gi in enumerate(ranking, start=1):
            if int(gallery.identities[gi]) == qid:
                hits += 1
                precisions.append(hits / rank)
                if first is None:
                    first = rank
        if qid < 0 or first is None:
            first_hits.append(None)
            per_query.append(QueryResult(np.array(ranking, dtype=np.int64), 0.0, None, False))
            continue
        ap = sum(precisions) / len(precisions)
        first_hits.append(first)
        aps.append(ap)
        per_query.append(QueryResult(np.array(ranking, dtype=np.int64), ap, first, True))

    valid = [r for r in first_hits if r is not None]
    cmc = np.zeros(max_rank)
    for k in range(1, max_rank + 1):
        cmc[k - 1] = sum(1 for r in valid if r <= k) / len(valid) if valid else 0.0
    mean_ap = sum(aps) / len(aps) if aps else 0.0
    return EvalReport(cmc, mean_ap, len(valid), len(first_hits) - len(valid), per_query)


@dataclass(frozen=True)
class Match:
    distance: float
    index: int
    record: EmbeddingRecord


def topk_query(probe, gallery: EmbeddingSet, metric: str = "cosine", k: int = 5) -> tuple[list[Match], list[Match]]:
    """The ``k`` nearest and ``k`` farthest gallery records for one probe vector.

    The far list is the tail of the ascending ranking, reversed (farthest first).
    """
    if k > len(gallery):
        raise ValueError(f"k={k} exceeds gallery size {len(gallery)}")
    d = distance_matrix(np.asarray(probe, dtype=np.float64).reshape(1, -1), gallery.vectors, metric)[0]
    order = np.argsort(d, kind="stable")
    near = [Match(float(d[i]), int(i), gallery[int(i)]) for i in order[:k]]
    far = [Match(float(d[i]), int(i), gallery[int(i)]) for i in order[::-1][:k]]
    return near, far


def embedding_separation(es: EmbeddingSet) -> float:
    """Mean within-identity minus mean between-identity cosine similarity."""
    unit = _unit_rows(es.vectors, "embedding")
    sim = unit @ unit.T
    same = es.identities[:, None] == es.identities[None, :]
    off = ~np.eye(len(es), dtype=bool)
    return float(sim[same & off].mean() - sim[~same].mean())
