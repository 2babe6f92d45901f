"""Query generation and Top-1 scoring for track- and segment-level
identification.

Queries are produced the corrected way: every clean track is degraded from
start to end with full-length IRs, one 30-second chunk is cut per track
(start snapped to the fingerprint grid so "exact" is well defined), and a
fixed number of equally spaced start indices per sequence length keeps
every track represented the same number of times. Query sequences never
span two tracks by construction.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .audio import AudioBuffer
from .degrade import AssetStore, degrade_chain, random_plan
from .encoder import EncoderParams, forward
from .features import MelConfig, SegmentSpec, mel_spectrogram, segment_audio
from .index import CandidateScore, FingerprintDB, IvfIndex, sequence_search

__all__ = [
    "QuerySpec",
    "GroundTruth",
    "QueryChunk",
    "SequenceQuery",
    "EvalReport",
    "start_indices",
    "make_queries",
    "sequence_queries",
    "run_identification",
    "score",
    "extract_fingerprints",
]


@dataclass
class QuerySpec:
    chunk_s: float = 30.0
    n_start_indices: int = 6
    seq_lengths: tuple[int, ...] = (1, 3, 9, 19)


@dataclass
class GroundTruth:
    track_id: str
    segment_start: int  # within-track fingerprint index of the query start


@dataclass
class QueryChunk:
    track_id: str
    audio: AudioBuffer
    chunk_segment0: int  # grid index of the chunk start within its track


@dataclass
class SequenceQuery:
    vectors: np.ndarray  # (L, dim)
    truth: GroundTruth

    @property
    def length(self) -> int:
        return self.vectors.shape[0]


@dataclass
class EvalReport:
    """Top-1 hit rates (percent) per query sequence length."""

    per_length: dict[int, dict] = field(default_factory=dict)

    def add(self, length, n_queries, track_hits, exact_hits, near_hits):
        self.per_length[int(length)] = {
            "n_queries": int(n_queries),
            "track_top1": 100.0 * track_hits / n_queries if n_queries else 0.0,
            "segment_exact_top1": 100.0 * exact_hits / n_queries if n_queries else 0.0,
            "segment_near_top1": 100.0 * near_hits / n_queries if n_queries else 0.0,
        }

    def to_json(self) -> str:
        return json.dumps({str(k): v for k, v in sorted(self.per_length.items())}, indent=2)

    @classmethod
    def from_json(cls, text: str) -> "EvalReport":
        raw = json.loads(text)
        return cls({int(k): v for k, v in raw.items()})

    def format_table(self, hop_s: float = 0.5) -> str:
        lines = [
            f"{'len':>4} {'secs':>5} {'queries':>8} {'track':>7} {'exact':>7} {'near':>7}",
        ]
        for length, row in sorted(self.per_length.items()):
            secs = (length + 1) * hop_s
            lines.append(
                f"{length:>4} {secs:>5.1f} {row['n_queries']:>8} "
                f"{row['track_top1']:>6.1f}% {row['segment_exact_top1']:>6.1f}% "
                f"{row['segment_near_top1']:>6.1f}%"
            )
        return "\n".join(lines)


def start_indices(n_segments: int, seq_len: int, n_indices: int) -> np.ndarray:
    """Equally spaced query start indices so the longest sequence fits."""
    max_start = n_segments - seq_len
    if max_start < 0:
        raise ValueError(f"chunk of {n_segments} segments cannot host length {seq_len}")
    return np.round(np.linspace(0, max_start, n_indices)).astype(int)


def make_queries(
    tracks: dict[str, AudioBuffer],
    assets: AssetStore,
    qspec: QuerySpec,
    seed: int,
    seg_spec: SegmentSpec | None = None,
    split: str = "test",
    snr_range: tuple[float, float] = (0.0, 10.0),
    gain_range: tuple[float, float] = (-6.0, 0.0),
) -> list[QueryChunk]:
    """Degrade each track start-to-end (full IR durations) and cut one
    random grid-aligned chunk of ``qspec.chunk_s`` seconds per track."""
    seg_spec = seg_spec or SegmentSpec()
    rng = np.random.default_rng(seed)
    noise_ids = assets.ids("noise", split)
    room_ids = assets.ids("room", split)
    mic_ids = assets.ids("microphone", split)
    chunks = []
    for track_id in sorted(tracks):
        track = tracks[track_id]
        rate = track.sample_rate
        hop = seg_spec.hop_samples(rate)
        chunk_len = int(round(qspec.chunk_s * rate))
        if len(track) < chunk_len:
            raise ValueError(f"track {track_id!r} shorter than one {qspec.chunk_s}-s chunk")
        plan = random_plan(rng, noise_ids, room_ids, mic_ids, snr_range, gain_range)
        degraded = degrade_chain(track, plan, assets, ir_truncate_s=None)
        max_grid = (len(track) - chunk_len) // hop
        seg0 = int(rng.integers(max_grid + 1))
        start = seg0 * hop
        chunks.append(
            QueryChunk(track_id, AudioBuffer(degraded.samples[start : start + chunk_len], rate),
                       seg0)
        )
    return chunks


def extract_fingerprints(
    audio: AudioBuffer,
    params: EncoderParams,
    mel_cfg: MelConfig,
    seg_spec: SegmentSpec,
) -> np.ndarray:
    """Fingerprint matrix (n_segments, dim) for one buffer."""
    windows = segment_audio(audio, seg_spec)
    feats = np.stack(
        [mel_spectrogram(w, mel_cfg).values.reshape(-1) for _, w in windows]
    ).astype(np.float32)
    return forward(params, feats)


def sequence_queries(
    chunks: list[QueryChunk],
    params: EncoderParams,
    mel_cfg: MelConfig,
    seg_spec: SegmentSpec,
    qspec: QuerySpec,
) -> dict[int, list[SequenceQuery]]:
    """Fingerprint each chunk and slice it into per-length query sequences.

    Every chunk contributes exactly ``qspec.n_start_indices`` queries per
    length, each contained within its single source track.
    """
    queries: dict[int, list[SequenceQuery]] = {length: [] for length in qspec.seq_lengths}
    for chunk in chunks:
        fp = extract_fingerprints(chunk.audio, params, mel_cfg, seg_spec)
        n_segments = fp.shape[0]
        for length in qspec.seq_lengths:
            for s in start_indices(n_segments, length, qspec.n_start_indices):
                truth = GroundTruth(chunk.track_id, chunk.chunk_segment0 + int(s))
                queries[length].append(SequenceQuery(fp[s : s + length], truth))
    return queries


def run_identification(
    index: IvfIndex,
    db: FingerprintDB,
    queries: list[SequenceQuery],
    k: int = 20,
    nprobe: int = 32,
) -> list[list[CandidateScore]]:
    return [sequence_search(index, db, q.vectors, k=k, nprobe=nprobe) for q in queries]


def score(
    results_by_length: dict[int, list[list[CandidateScore]]],
    queries_by_length: dict[int, list[SequenceQuery]],
    db: FingerprintDB,
    hop_s: float = 0.5,
) -> EvalReport:
    """Top-1 hit rates per sequence length.

    Track hit: top-1 candidate names the right track. Segment exact hit:
    also starts at the true fingerprint index; near hit: starts within
    one index either side. All rates average uniformly over queries.
    """
    report = EvalReport()
    for length, queries in queries_by_length.items():
        results = results_by_length[length]
        if len(results) != len(queries):
            raise ValueError(f"length {length}: {len(results)} results for {len(queries)} queries")
        track_hits = exact_hits = near_hits = 0
        for ranked, query in zip(results, queries):
            if not ranked:
                continue
            top = ranked[0]
            if top.track_id != query.truth.track_id:
                continue
            track_hits += 1
            track_start, _ = db.track_range(top.track_id)
            predicted = top.db_start_index - track_start
            delta = abs(predicted - query.truth.segment_start)
            if delta == 0:
                exact_hits += 1
            if delta <= 1:
                near_hits += 1
        report.add(length, len(queries), track_hits, exact_hits, near_hits)
    return report
