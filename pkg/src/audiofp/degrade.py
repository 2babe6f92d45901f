"""Real-world degradation simulation: scene noise, room and microphone IRs.

A degradation chain turns a clean segment (plus its acoustic past) into a
realistically damaged one: additive noise at a target SNR, a gain stage,
room reverberation computed from the segment's past context so tails of
earlier audio bleed in, another gain stage, then microphone coloration.
The chain is a pure deterministic function of (audio, plan).

Assets (noise clips and impulse responses) live in an :class:`AssetStore`
backed by a JSON manifest; sources must not leak across the train/test
partition, which :func:`validate_partition` checks.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.signal import fftconvolve

from .audio import AudioBuffer, apply_gain, load_wav, resample

__all__ = [
    "ImpulseResponse",
    "DegradationPlan",
    "PartitionManifest",
    "AssetStore",
    "mix_noise",
    "truncate_ir",
    "convolve_with_history",
    "degrade_chain",
    "random_plan",
    "validate_partition",
]

# Below this tap count plain time-domain convolution is both faster and exact
# for degenerate IRs such as unit deltas.
_FFT_CONV_MIN_TAPS = 64


@dataclass
class ImpulseResponse:
    """A measured (or synthesized) room or microphone response."""

    samples: np.ndarray
    sample_rate: int
    kind: str  # "room" | "microphone"
    source_id: str

    def __post_init__(self):
        samples = np.asarray(self.samples, dtype=np.float32)
        if samples.ndim != 1 or len(samples) == 0:
            raise ValueError("impulse response must be a non-empty 1-D array")
        if not np.all(np.isfinite(samples)):
            raise ValueError("impulse response must be finite")
        if not np.any(samples != 0):
            raise ValueError("impulse response has zero energy")
        if self.kind not in ("room", "microphone"):
            raise ValueError(f"kind must be 'room' or 'microphone', got {self.kind!r}")
        self.samples = samples


@dataclass
class DegradationPlan:
    """Everything needed to reproduce one degradation exactly.

    ``snr_db`` of None (or +inf) disables the noise stage; a None asset id
    skips that stage. ``seed`` drives the noise-slice choice.
    """

    noise_clip_id: str | None
    snr_db: float | None
    room_ir_id: str | None
    mic_ir_id: str | None
    gain1_db: float = 0.0
    gain2_db: float = 0.0
    seed: int = 0

    def to_dict(self) -> dict:
        return dict(self.__dict__)

    @classmethod
    def from_dict(cls, d: dict) -> "DegradationPlan":
        return cls(**d)


@dataclass
class PartitionManifest:
    """(asset_id, source_id, split) triples; splits are 'train' or 'test'."""

    entries: list[tuple[str, str, str]] = field(default_factory=list)


def mix_noise(
    signal: AudioBuffer, noise: AudioBuffer, snr_db: float, rng: np.random.Generator
) -> AudioBuffer:
    """Add a seeded random slice of ``noise`` scaled to the target SNR.

    The scale k = sqrt(P_signal / (P_noise * 10^(snr/10))) with P the mean
    squared amplitude of the mixed region, so the achieved SNR matches the
    target by construction.
    """
    if signal.sample_rate != noise.sample_rate:
        raise ValueError(
            f"sample rate mismatch: signal {signal.sample_rate}, noise {noise.sample_rate}"
        )
    if snr_db is None or np.isinf(snr_db):
        return AudioBuffer(signal.samples.copy(), signal.sample_rate)
    if len(noise) < len(signal):
        raise ValueError(f"noise ({len(noise)}) shorter than signal ({len(signal)})")
    start = int(rng.integers(0, len(noise) - len(signal) + 1))
    slice_ = noise.samples[start : start + len(signal)].astype(np.float64)
    sig = signal.samples.astype(np.float64)
    p_signal = np.mean(sig**2)
    p_noise = np.mean(slice_**2)
    if p_signal == 0.0 or p_noise == 0.0:
        raise ValueError("cannot set an SNR with zero-power signal or noise")
    k = np.sqrt(p_signal / (p_noise * 10.0 ** (snr_db / 10.0)))
    return AudioBuffer((sig + k * slice_).astype(np.float32), signal.sample_rate)


def truncate_ir(ir: ImpulseResponse, context_s: float) -> ImpulseResponse:
    """Hard-cut an IR to at most ``context_s`` seconds (no fade)."""
    if context_s <= 0:
        raise ValueError("context_s must be positive")
    n = min(len(ir.samples), int(round(context_s * ir.sample_rate)))
    return ImpulseResponse(ir.samples[:n].copy(), ir.sample_rate, ir.kind, ir.source_id)


def _convolve(x: np.ndarray, h: np.ndarray) -> np.ndarray:
    if len(h) < _FFT_CONV_MIN_TAPS:
        return np.convolve(x, h)
    return fftconvolve(x, h)


def convolve_with_history(
    signal: AudioBuffer,
    segment_start: int,
    segment_len: int,
    past_s: float,
    ir: ImpulseResponse,
) -> AudioBuffer:
    """Reverberate a segment including the tails of what came before it.

    Convolution starts ``past_s`` seconds before the segment (less at
    track start) and the past is discarded afterwards, so the output is
    exactly ``segment_len`` samples of the segment carrying reverberation
    from both current and past audio. With at least len(ir)-1 samples of
    history this equals the corresponding slice of convolving the whole
    track.
    """
    if signal.sample_rate != ir.sample_rate:
        raise ValueError(f"IR at {ir.sample_rate} Hz, signal at {signal.sample_rate} Hz")
    if segment_start < 0 or segment_start + segment_len > len(signal):
        raise ValueError("segment out of signal bounds")
    pre_len = min(segment_start, int(round(past_s * signal.sample_rate)))
    x = signal.samples[segment_start - pre_len : segment_start + segment_len].astype(np.float64)
    y = _convolve(x, ir.samples.astype(np.float64))
    out = y[pre_len : pre_len + segment_len]
    return AudioBuffer(out.astype(np.float32), signal.sample_rate)


def degrade_chain(
    context: AudioBuffer,
    plan: DegradationPlan,
    assets: "AssetStore",
    segment_start: int = 0,
    segment_len: int | None = None,
    *,
    past_s: float = 1.0,
    ir_truncate_s: float | None = None,
    meta: dict | None = None,
) -> AudioBuffer:
    """Run the full degradation chain over a segment within its context.

    Order: noise at plan.snr_db -> gain1 -> room IR (with acoustic
    history, truncated to ``ir_truncate_s`` when given, full length when
    None) -> gain2 -> microphone IR. The output covers exactly
    [segment_start, segment_start + segment_len) and is peak-normalized
    only if it exceeds full scale; the factor lands in ``meta`` when a
    dict is supplied.
    """
    if segment_len is None:
        segment_len = len(context) - segment_start
    rng = np.random.default_rng(plan.seed)

    sig = context
    if plan.noise_clip_id is not None and plan.snr_db is not None and not np.isinf(plan.snr_db):
        sig = mix_noise(sig, assets.noise(plan.noise_clip_id), plan.snr_db, rng)
    sig = apply_gain(sig, plan.gain1_db)

    if plan.room_ir_id is not None:
        room = assets.ir(plan.room_ir_id)
        if ir_truncate_s is not None:
            room = truncate_ir(room, ir_truncate_s)
        sig = convolve_with_history(sig, segment_start, segment_len, past_s, room)
    else:
        sig = AudioBuffer(
            sig.samples[segment_start : segment_start + segment_len], sig.sample_rate
        )

    sig = apply_gain(sig, plan.gain2_db)

    if plan.mic_ir_id is not None:
        mic = assets.ir(plan.mic_ir_id)
        out = _convolve(sig.samples.astype(np.float64), mic.samples.astype(np.float64))
        sig = AudioBuffer(out[:segment_len].astype(np.float32), sig.sample_rate)

    peak = float(np.max(np.abs(sig.samples))) if len(sig) else 0.0
    norm = 1.0
    if peak > 1.0:
        norm = 1.0 / peak
        sig = AudioBuffer(sig.samples * np.float32(norm), sig.sample_rate)
    if meta is not None:
        meta["normalization_factor"] = norm
    return sig


def random_plan(
    rng: np.random.Generator,
    noise_ids: list[str],
    room_ids: list[str],
    mic_ids: list[str],
    snr_range: tuple[float, float] = (0.0, 10.0),
    gain_range: tuple[float, float] = (-6.0, 0.0),
) -> DegradationPlan:
    """Draw a plan: uniform SNR in ``snr_range``, independent per-stage
    gains in ``gain_range``, uniformly chosen assets, and a fresh seed."""
    return DegradationPlan(
        noise_clip_id=noise_ids[rng.integers(len(noise_ids))] if noise_ids else None,
        snr_db=float(rng.uniform(*snr_range)),
        room_ir_id=room_ids[rng.integers(len(room_ids))] if room_ids else None,
        mic_ir_id=mic_ids[rng.integers(len(mic_ids))] if mic_ids else None,
        gain1_db=float(rng.uniform(*gain_range)),
        gain2_db=float(rng.uniform(*gain_range)),
        seed=int(rng.integers(2**63)),
    )


def validate_partition(manifest: PartitionManifest) -> list[str]:
    """Source ids appearing in more than one split; empty means valid."""
    splits_by_source: dict[str, set[str]] = {}
    for _asset_id, source_id, split in manifest.entries:
        splits_by_source.setdefault(source_id, set()).add(split)
    return sorted(s for s, splits in splits_by_source.items() if len(splits) > 1)


class AssetStore:
    """Immutable store of degradation assets keyed by id.

    Backed either by a directory + JSON manifest (list of entries with
    id, path, source_id, kind, split, tags) or built in memory from
    already-loaded buffers. All audio is resampled to ``sample_rate`` on
    load.
    """

    def __init__(self, sample_rate: int):
        self.sample_rate = sample_rate
        self._noise: dict[str, AudioBuffer] = {}
        self._irs: dict[str, ImpulseResponse] = {}
        self._entries: list[dict] = []

    @classmethod
    def from_manifest(cls, manifest_path, sample_rate: int) -> "AssetStore":
        manifest_path = Path(manifest_path)
        entries = json.loads(manifest_path.read_text())
        store = cls(sample_rate)
        base = manifest_path.parent
        for e in entries:
            buf = load_wav(base / e["path"])
            if buf.sample_rate != sample_rate:
                buf = resample(buf, sample_rate)
            store.add(
                e["id"], e["kind"], buf, source_id=e.get("source_id", e["id"]),
                split=e.get("split", "train"), tags=e.get("tags", {}),
            )
        return store

    def add(
        self,
        asset_id: str,
        kind: str,
        buf: AudioBuffer,
        source_id: str | None = None,
        split: str = "train",
        tags: dict | None = None,
    ) -> None:
        if asset_id in self._noise or asset_id in self._irs:
            raise ValueError(f"duplicate asset id {asset_id!r}")
        source_id = source_id or asset_id
        if kind == "noise":
            self._noise[asset_id] = buf
        elif kind in ("room", "microphone"):
            self._irs[asset_id] = ImpulseResponse(buf.samples, buf.sample_rate, kind, source_id)
        else:
            raise ValueError(f"unknown asset kind {kind!r}")
        self._entries.append(
            {"id": asset_id, "kind": kind, "source_id": source_id, "split": split,
             "tags": tags or {}}
        )

    def noise(self, asset_id: str) -> AudioBuffer:
        try:
            return self._noise[asset_id]
        except KeyError:
            raise KeyError(f"unknown noise clip id {asset_id!r}") from None

    def ir(self, asset_id: str) -> ImpulseResponse:
        try:
            return self._irs[asset_id]
        except KeyError:
            raise KeyError(f"unknown IR id {asset_id!r}") from None

    def ids(self, kind: str, split: str | None = None) -> list[str]:
        return [
            e["id"]
            for e in self._entries
            if e["kind"] == kind and (split is None or e["split"] == split)
        ]

    def partition_manifest(self) -> PartitionManifest:
        return PartitionManifest(
            [(e["id"], e["source_id"], e["split"]) for e in self._entries]
        )
