"""Exhaustive Euclidean retrieval, the five evaluation metrics, and the EGSE file format."""
from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path

import numpy as np

from .errors import DataError, DimensionError, DomainError, FormatError
from .fsutil import atomic_write_bytes, atomic_write_text

EMBEDDING_MAGIC = b"EGSE"
EMBEDDING_VERSION = 1
RECALL_KS = (1, 5, 10)
UNIT_TOL = 1e-6


class Direction(str, Enum):
    DRONE_TO_SATELLITE = "drone->satellite"
    SATELLITE_TO_DRONE = "satellite->drone"


@dataclass
class GalleryIndex:
    embeddings: np.ndarray
    ids: np.ndarray
    views: list[str] = field(default_factory=list)

    def __post_init__(self):
        self.embeddings = np.asarray(self.embeddings, dtype=np.float64)
        self.ids = np.asarray(self.ids, dtype=np.int64)
        if self.embeddings.ndim != 2 or len(self.embeddings) == 0:
            raise DomainError("gallery must hold at least one (d,) embedding")
        if len(self.ids) != len(self.embeddings):
            raise DimensionError(f"{len(self.ids)} ids for {len(self.embeddings)} embeddings")
        norms = np.linalg.norm(self.embeddings, axis=1)
        if np.any(np.abs(norms - 1.0) > UNIT_TOL):
            raise DomainError("gallery embeddings must be L2-normalized")

    def __len__(self):
        return len(self.ids)

    @property
    def dim(self) -> int:
        return self.embeddings.shape[1]


@dataclass
class RankingResult:
    order: np.ndarray
    distances: np.ndarray


def _distances(queries: np.ndarray, gallery: np.ndarray) -> np.ndarray:
    diff = queries[:, None, :] - gallery[None, :, :]
    return np.sqrt(np.einsum("qmd,qmd->qm", diff, diff))


def rank(query, gallery: GalleryIndex) -> RankingResult:
    """Order the whole gallery by distance to ``query``; ties keep index order."""
    if len(gallery) == 0:
        raise DomainError("empty gallery")
    q = np.asarray(query, dtype=np.float64).reshape(1, -1)
    if q.shape[1] != gallery.dim:
        raise DimensionError(f"query dim {q.shape[1]} != gallery dim {gallery.dim}")
    d = _distances(q, gallery.embeddings)[0]
    order = np.argsort(d, kind="stable")
    return RankingResult(order, d[order])


def _hit_ranks(ranking: RankingResult, gallery_ids: np.ndarray, relevant) -> np.ndarray:
    rel = np.isin(gallery_ids[ranking.order], np.fromiter(relevant, dtype=np.int64))
    return np.flatnonzero(rel) + 1


def average_precision(ranking: RankingResult, gallery_ids, relevant) -> float:
    """Mean of precision@k over the ranks k at which relevant items appear."""
    relevant = set(relevant)
    if not relevant:
        raise DomainError("relevant set is empty")
    hits = _hit_ranks(ranking, np.asarray(gallery_ids), relevant)
    if len(hits) == 0:
        raise DomainError("no relevant item present in the gallery")
    precisions = np.arange(1, len(hits) + 1) / hits
    # fsum is correctly rounded, so the value does not depend on summation order
    return math.fsum(precisions.tolist()) / len(hits)


def percent_cutoff(gallery_size: int, percent: float = 1.0) -> int:
    return max(1, math.ceil(percent / 100.0 * gallery_size))


def recall_at(ranking: RankingResult, gallery_ids, relevant, k: int | None = None,
              percent: float | None = None) -> float:
    """1.0 if any relevant item sits within the cutoff, else 0.0."""
    if (k is None) == (percent is None):
        raise DomainError("give exactly one of k or percent")
    if k is not None and k < 1:
        raise DomainError(f"k must be >= 1, got {k}")
    if percent is not None:
        if percent <= 0:
            raise DomainError(f"percent must be positive, got {percent}")
        k = percent_cutoff(len(ranking.order), percent)
    hits = _hit_ranks(ranking, np.asarray(gallery_ids), set(relevant))
    if len(hits) == 0:
        raise DomainError("no relevant item present in the gallery")
    return float(hits[0] <= k)


@dataclass
class MetricsReport:
    direction: str
    query_ids: list[int]
    per_query: dict[str, list[float]]
    gallery_size: int
    percent_cutoff: int
    first_hit: list[int] = field(default_factory=list)

    def recall_curve(self, max_k: int | None = None) -> tuple[np.ndarray, np.ndarray]:
        """(K, fraction of queries with a relevant hit within the top K) for K = 1..max_k."""
        max_k = max_k or self.gallery_size
        ks = np.arange(1, max_k + 1)
        ranks = np.asarray(self.first_hit)
        if len(ranks) == 0:
            return ks, np.zeros(len(ks))
        return ks, (ranks[None, :] <= ks[:, None]).mean(axis=1)

    @property
    def means(self) -> dict[str, float]:
        return {name: float(np.mean(vals)) if vals else 0.0 for name, vals in self.per_query.items()}

    def to_dict(self) -> dict:
        return {
            "direction": self.direction,
            "num_queries": len(self.query_ids),
            "gallery_size": self.gallery_size,
            "r1pct_cutoff": self.percent_cutoff,
            "means": self.means,
            "query_ids": self.query_ids,
            "per_query": self.per_query,
            "first_hit_rank": self.first_hit,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


METRIC_NAMES = ("AP", "R@1", "R@5", "R@10", "R@1%")


def evaluate(queries, query_ids, gallery: GalleryIndex,
             direction: Direction | str = Direction.DRONE_TO_SATELLITE) -> MetricsReport:
    """Per-query AP / R@1,5,10 / R@1% and their means.

    Every gallery entry sharing a query's id counts as relevant, so the
    satellite->drone direction naturally has several relevant items per query.
    """
    direction = Direction(direction)
    Q = np.asarray(queries, dtype=np.float64)
    qids = np.asarray(query_ids, dtype=np.int64)
    if Q.ndim != 2 or len(Q) != len(qids):
        raise DimensionError("queries must be (n, d) with one id each")
    if Q.shape[1] != gallery.dim:
        raise DimensionError(f"query dim {Q.shape[1]} != gallery dim {gallery.dim}")
    missing = sorted(set(qids.tolist()) - set(gallery.ids.tolist()))
    if missing:
        raise DataError(f"query ids without a gallery match: {missing[:10]}")
    cutoff = percent_cutoff(len(gallery))
    per = {name: [] for name in METRIC_NAMES}
    first = []
    chunk = max(1, 4_000_000 // max(1, len(gallery) * gallery.dim))
    for start in range(0, len(Q), chunk):
        D = _distances(Q[start:start + chunk], gallery.embeddings)
        for row, qid in zip(D, qids[start:start + chunk]):
            order = np.argsort(row, kind="stable")
            ranking = RankingResult(order, row[order])
            rel = {int(qid)}
            first.append(int(_hit_ranks(ranking, gallery.ids, rel)[0]))
            per["AP"].append(average_precision(ranking, gallery.ids, rel))
            for k in RECALL_KS:
                per[f"R@{k}"].append(recall_at(ranking, gallery.ids, rel, k=k))
            per["R@1%"].append(recall_at(ranking, gallery.ids, rel, k=cutoff))
    return MetricsReport(direction.value, qids.tolist(), per, len(gallery), cutoff, first)


# --- EGSE embedding files ---------------------------------------------------

_HEADER = struct.Struct("<4sIQQ")


def encode_embeddings(ids, embeddings) -> bytes:
    E = np.asarray(embeddings, dtype="<f4")
    ids = np.asarray(ids, dtype="<u8")
    if E.ndim != 2 or len(ids) != len(E):
        raise DimensionError("embeddings must be (M, d) with one id per row")
    M, d = E.shape
    records = np.empty(M, dtype=np.dtype([("id", "<u8"), ("v", "<f4", (d,))]))
    records["id"] = ids
    records["v"] = E
    return _HEADER.pack(EMBEDDING_MAGIC, EMBEDDING_VERSION, M, d) + records.tobytes()


def decode_embeddings(blob: bytes) -> tuple[np.ndarray, np.ndarray]:
    if len(blob) < _HEADER.size:
        raise FormatError("embedding file truncated before header end")
    magic, version, M, d = _HEADER.unpack_from(blob)
    if magic != EMBEDDING_MAGIC:
        raise FormatError(f"bad embedding magic {magic!r}")
    if version != EMBEDDING_VERSION:
        raise FormatError(f"unsupported embedding version {version}")
    rec = np.dtype([("id", "<u8"), ("v", "<f4", (d,))])
    expected = _HEADER.size + M * rec.itemsize
    if len(blob) != expected:
        raise FormatError(f"embedding file has {len(blob)} bytes, header implies {expected}")
    records = np.frombuffer(blob, dtype=rec, offset=_HEADER.size, count=M)
    return records["id"].astype(np.int64), records["v"].reshape(M, d).copy()


def write_embeddings(path, ids, embeddings) -> None:
    atomic_write_bytes(Path(path), encode_embeddings(ids, embeddings))


def read_embeddings(path) -> tuple[np.ndarray, np.ndarray]:
    return decode_embeddings(Path(path).read_bytes())


def write_metrics(path, report: MetricsReport) -> None:
    atomic_write_text(Path(path), report.to_json() + "\n")
