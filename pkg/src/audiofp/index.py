"""Fingerprint storage and two-stage sequence retrieval.

The database is a flat float32 matrix of unit-norm fingerprints in track
order plus a boundary sidecar mapping tracks to index ranges. Retrieval
runs in two stages: an inverted-file (IVF) scan proposes the top-k most
similar segments per query position, then every implied candidate start
is rescored by the average inner product over the whole query sequence
against the full-precision rows. Candidate windows that would cross a
track boundary are discarded.

File formats (little-endian throughout):

* fingerprints: magic ``NMFP``, version u16, dim u32, count u64, 32-byte
  feature-config digest, then row-major float32 data. Memory-mappable.
* boundary sidecar: CSV of (track_id, start_index, n_segments).
* IVF index: magic ``NMIV``, version u16, dim u32, nlist u32, count u64,
  centroids float32, list offsets u64[nlist+1], row ids u64[count].
"""

from __future__ import annotations

import csv
import struct
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np

__all__ = [
    "TrackBoundary",
    "FingerprintDB",
    "IvfIndex",
    "CandidateScore",
    "build_db",
    "build_ivf",
    "stage1_topk",
    "sequence_search",
]

FP_MAGIC = b"NMFP"
IVF_MAGIC = b"NMIV"
_FORMAT_VERSION = 1
_FP_HEADER = struct.Struct("<4sHIQ32s")
_IVF_HEADER = struct.Struct("<4sHIIQ")


@dataclass
class TrackBoundary:
    track_id: str
    start_index: int
    n_segments: int


@dataclass
class CandidateScore:
    track_id: str
    db_start_index: int
    mean_similarity: float


class FingerprintDB:
    """Flat store of unit-norm fingerprints plus track boundaries."""

    def __init__(self, vectors: np.ndarray, boundaries: list[TrackBoundary], config_digest: bytes):
        if vectors.ndim != 2:
            raise ValueError("vectors must be a 2-D matrix")
        if len(config_digest) != 32:
            raise ValueError("config digest must be 32 bytes")
        total = sum(b.n_segments for b in boundaries)
        if total != vectors.shape[0]:
            raise ValueError(f"boundaries cover {total} rows, vectors have {vectors.shape[0]}")
        expected = 0
        for b in boundaries:
            if b.start_index != expected or b.n_segments < 1:
                raise ValueError("boundaries must partition the rows without gaps or overlap")
            expected += b.n_segments
        self.vectors = vectors
        self.boundaries = boundaries
        self.config_digest = bytes(config_digest)
        self._starts = np.array([b.start_index for b in boundaries], dtype=np.int64)

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]

    @property
    def count(self) -> int:
        return self.vectors.shape[0]

    def track_of(self, index: int) -> TrackBoundary:
        """Boundary entry owning a row index (binary search; total)."""
        if not 0 <= index < self.count:
            raise IndexError(f"row {index} outside [0, {self.count})")
        pos = int(np.searchsorted(self._starts, index, side="right")) - 1
        return self.boundaries[pos]

    def track_range(self, track_id: str) -> tuple[int, int]:
        for b in self.boundaries:
            if b.track_id == track_id:
                return b.start_index, b.start_index + b.n_segments
        raise KeyError(f"unknown track {track_id!r}")

    def save(self, path, sidecar_path=None) -> None:
        path = Path(path)
        header = _FP_HEADER.pack(
            FP_MAGIC, _FORMAT_VERSION, self.dim, self.count, self.config_digest
        )
        with open(path, "wb") as f:
            f.write(header)
            f.write(np.ascontiguousarray(self.vectors, dtype="<f4").tobytes())
        sidecar = Path(sidecar_path) if sidecar_path else path.with_suffix(path.suffix + ".csv")
        with open(sidecar, "w", newline="") as f:
            writer = csv.writer(f)
            writer.writerow(["track_id", "start_index", "n_segments"])
            for b in self.boundaries:
                writer.writerow([b.track_id, b.start_index, b.n_segments])

    @classmethod
    def load(cls, path, sidecar_path=None, mmap: bool = False) -> "FingerprintDB":
        path = Path(path)
        with open(path, "rb") as f:
            magic, version, dim, count, digest = _FP_HEADER.unpack(f.read(_FP_HEADER.size))
        if magic != FP_MAGIC:
            raise ValueError(f"{path}: not a fingerprint file (magic {magic!r})")
        if version != _FORMAT_VERSION:
            raise ValueError(f"{path}: unsupported version {version}")
        if mmap:
            vectors = np.memmap(path, dtype="<f4", mode="r", offset=_FP_HEADER.size,
                                shape=(count, dim))
        else:
            data = np.fromfile(path, dtype="<f4", offset=_FP_HEADER.size)
            vectors = data.reshape(count, dim)
        sidecar = Path(sidecar_path) if sidecar_path else path.with_suffix(path.suffix + ".csv")
        boundaries = []
        with open(sidecar, newline="") as f:
            for row in csv.DictReader(f):
                boundaries.append(
                    TrackBoundary(row["track_id"], int(row["start_index"]), int(row["n_segments"]))
                )
        return cls(vectors, boundaries, digest)


def build_db(per_track, config_digest: bytes) -> FingerprintDB:
    """Concatenate per-track fingerprints into a database.

    ``per_track`` yields (track_id, matrix) pairs in the intended track
    order. Rows deviating from unit norm are re-normalized; deviations
    beyond 1e-3 draw a warning.
    """
    blocks = []
    boundaries = []
    start = 0
    dim = None
    for track_id, vectors in per_track:
        vectors = np.ascontiguousarray(vectors, dtype=np.float32)
        if vectors.ndim != 2 or vectors.shape[0] < 1:
            raise ValueError(f"track {track_id!r}: need at least one fingerprint row")
        if dim is None:
            dim = vectors.shape[1]
        elif vectors.shape[1] != dim:
            raise ValueError(f"track {track_id!r}: dim {vectors.shape[1]} != {dim}")
        norms = np.linalg.norm(vectors, axis=1)
        if np.any(norms == 0):
            raise ValueError(f"track {track_id!r}: zero fingerprint row")
        worst = float(np.max(np.abs(norms - 1.0)))
        if worst > 1e-3:
            warnings.warn(
                f"track {track_id!r}: fingerprints off unit norm by up to {worst:.2e}; "
                "re-normalizing",
                stacklevel=2,
            )
        blocks.append(vectors / norms[:, None])
        boundaries.append(TrackBoundary(str(track_id), start, vectors.shape[0]))
        start += vectors.shape[0]
    if not blocks:
        raise ValueError("no fingerprints supplied")
    return FingerprintDB(np.vstack(blocks), boundaries, config_digest)


class IvfIndex:
    """Inverted-file index: k-means centroids plus per-centroid row ids."""

    def __init__(self, centroids: np.ndarray, lists: list[np.ndarray]):
        if len(lists) != centroids.shape[0]:
            raise ValueError("need one inverted list per centroid")
        self.centroids = centroids.astype(np.float32)
        self.lists = [np.asarray(l, dtype=np.int64) for l in lists]

    @property
    def nlist(self) -> int:
        return self.centroids.shape[0]

    def save(self, path) -> None:
        offsets = np.zeros(self.nlist + 1, dtype="<u8")
        offsets[1:] = np.cumsum([len(l) for l in self.lists])
        ids = np.concatenate(self.lists) if self.lists else np.zeros(0, dtype=np.int64)
        with open(path, "wb") as f:
            f.write(_IVF_HEADER.pack(IVF_MAGIC, _FORMAT_VERSION, self.centroids.shape[1],
                                     self.nlist, len(ids)))
            f.write(np.ascontiguousarray(self.centroids, dtype="<f4").tobytes())
            f.write(offsets.tobytes())
            f.write(ids.astype("<u8").tobytes())

    @classmethod
    def load(cls, path) -> "IvfIndex":
        with open(path, "rb") as f:
            magic, version, dim, nlist, count = _IVF_HEADER.unpack(f.read(_IVF_HEADER.size))
            if magic != IVF_MAGIC:
                raise ValueError(f"{path}: not an IVF index file (magic {magic!r})")
            if version != _FORMAT_VERSION:
                raise ValueError(f"{path}: unsupported version {version}")
            centroids = np.frombuffer(f.read(4 * nlist * dim), dtype="<f4").reshape(nlist, dim)
            offsets = np.frombuffer(f.read(8 * (nlist + 1)), dtype="<u8")
            ids = np.frombuffer(f.read(8 * count), dtype="<u8").astype(np.int64)
        lists = [ids[offsets[i] : offsets[i + 1]] for i in range(nlist)]
        return cls(centroids.copy(), lists)


def _kmeans_pp_init(x: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    """k-means++ seeding on squared Euclidean distance."""
    n = x.shape[0]
    centroids = np.empty((k, x.shape[1]), dtype=np.float64)
    centroids[0] = x[rng.integers(n)]
    d2 = np.sum((x - centroids[0]) ** 2, axis=1)
    for i in range(1, k):
        total = d2.sum()
        if total <= 0:
            centroids[i] = x[rng.integers(n)]
            continue
        centroids[i] = x[rng.choice(n, p=d2 / total)]
        d2 = np.minimum(d2, np.sum((x - centroids[i]) ** 2, axis=1))
    return centroids


def build_ivf(db: FingerprintDB, nlist: int, seed: int, n_iter: int = 20) -> IvfIndex:
    """k-means clustering of the db rows (fixed iteration count,
    k-means++ seeding, assignment by max inner product)."""
    if nlist < 1:
        raise ValueError("nlist must be at least 1")
    if db.count < nlist:
        raise ValueError(f"need at least nlist={nlist} rows, have {db.count}")
    x = np.asarray(db.vectors, dtype=np.float64)
    rng = np.random.default_rng(seed)
    centroids = _kmeans_pp_init(x, nlist, rng)
    assign = np.zeros(db.count, dtype=np.int64)
    for _ in range(n_iter):
        assign = np.argmax(x @ centroids.T, axis=1)
        for c in range(nlist):
            members = np.nonzero(assign == c)[0]
            if len(members):
                centroids[c] = x[members].mean(axis=0)
            else:
                # Re-seed an empty cluster with the worst-represented row.
                sims = np.max(x @ centroids.T, axis=1)
                centroids[c] = x[int(np.argmin(sims))]
    assign = np.argmax(x @ centroids.T, axis=1)
    lists = [np.nonzero(assign == c)[0] for c in range(nlist)]
    return IvfIndex(centroids.astype(np.float32), lists)


def stage1_topk(
    index: IvfIndex,
    db: FingerprintDB,
    query_vec: np.ndarray,
    k: int = 20,
    nprobe: int = 32,
) -> list[tuple[int, float]]:
    """Approximate top-k segment matches for one query fingerprint.

    Scans the ``nprobe`` inverted lists whose centroids are most similar,
    scoring candidates by exact inner product against the stored rows.
    Ties break toward the lower row index.
    """
    if k < 1:
        raise ValueError("k must be at least 1")
    nprobe = min(nprobe, index.nlist)
    q = np.asarray(query_vec, dtype=np.float64)
    centroid_sims = index.centroids.astype(np.float64) @ q
    probe = np.argsort(-centroid_sims, kind="stable")[:nprobe]
    candidates = np.concatenate([index.lists[c] for c in probe]) if nprobe else np.zeros(0, int)
    if len(candidates) == 0:
        return []
    sims = db.vectors[candidates].astype(np.float64) @ q
    order = np.lexsort((candidates, -sims))[:k]
    return [(int(candidates[i]), float(sims[i])) for i in order]


def sequence_search(
    index: IvfIndex,
    db: FingerprintDB,
    query_seq: np.ndarray,
    k: int = 20,
    nprobe: int = 32,
) -> list[CandidateScore]:
    """Two-stage retrieval of a query fingerprint sequence.

    Stage 1 fetches top-k segment matches per query position; each hit c
    at position i implies a candidate start c - i. Starts whose window
    [start, start + L) leaves the database or crosses a track boundary
    are discarded. Stage 2 scores every surviving unique start by the
    mean inner product over the sequence (full-precision rows) and ranks
    descending, ties toward the lower start index.
    """
    q = np.asarray(query_seq, dtype=np.float64)
    if q.ndim != 2 or q.shape[0] < 1:
        raise ValueError("query_seq must be a non-empty (L, dim) matrix")
    length = q.shape[0]
    starts: set[int] = set()
    for i in range(length):
        for c, _sim in stage1_topk(index, db, q[i], k=k, nprobe=nprobe):
            starts.add(c - i)
    feasible = []
    for s in sorted(starts):
        if s < 0 or s + length > db.count:
            continue
        first = db.track_of(s)
        if s + length > first.start_index + first.n_segments:
            continue  # window would cross into the next track
        feasible.append(s)
    if not feasible:
        return []
    scores = np.empty(len(feasible), dtype=np.float64)
    block = 4096
    offsets = np.arange(length)
    starts_arr = np.asarray(feasible, dtype=np.int64)
    for lo in range(0, len(feasible), block):
        idx = starts_arr[lo : lo + block, None] + offsets[None, :]
        windows = db.vectors[idx].astype(np.float64)  # (c, L, d)
        scores[lo : lo + block] = np.einsum("cld,ld->c", windows, q) / length
    order = np.lexsort((starts_arr, -scores))
    return [
        CandidateScore(db.track_of(int(starts_arr[i])).track_id, int(starts_arr[i]), float(scores[i]))
        for i in order
    ]
