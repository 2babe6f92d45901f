"""Log-mel segment features: the exact representation the encoder consumes.

Audio is cut into 1-second windows every 500 ms; each window becomes a
magnitude mel spectrogram, converted to dB and affinely scaled to [-1, 1]
over a fixed dynamic range referenced to the segment peak. A seeded
random offset of up to half the hop shifts training windows to build
robustness against query/reference misalignment.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from scipy.signal import get_window

from .audio import AudioBuffer

__all__ = [
    "MelConfig",
    "SegmentSpec",
    "MelSegment",
    "segment_audio",
    "mel_filterbank",
    "mel_spectrogram",
    "random_offset",
]


@dataclass(frozen=True)
class MelConfig:
    """Mel extraction parameters. The defaults are the working configuration."""

    sample_rate: int = 8000
    stft_size: int = 1024
    stft_hop: int = 256
    n_mels: int = 256
    f_low: float = 160.0
    f_high: float = 4000.0
    dyn_range_db: float = 80.0
    # Fixed per-config conventions, recorded so they travel with the data.
    mel_variant: str = "htk-peak1"
    amplitude_floor: float = 1e-10

    def __post_init__(self):
        if not (0 <= self.f_low < self.f_high <= self.sample_rate / 2):
            raise ValueError(
                f"need 0 <= f_low < f_high <= nyquist, got "
                f"({self.f_low}, {self.f_high}) at {self.sample_rate} Hz"
            )
        if self.stft_hop > self.stft_size:
            raise ValueError("stft_hop must not exceed stft_size")

    def n_frames(self, window_samples: int) -> int:
        """Frame count for windows fully inside the buffer (no padding)."""
        return (window_samples - self.stft_size) // self.stft_hop + 1

    def to_json(self) -> str:
        return json.dumps(self.__dict__, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "MelConfig":
        return cls(**json.loads(text))


@dataclass(frozen=True)
class SegmentSpec:
    """Windowing grid: window length, hop, and max random training offset.

    ``max_offset_s`` defaults to half the hop, so a shifted window never
    strays past the neighbouring grid points.
    """

    window_s: float = 1.0
    hop_s: float = 0.5
    max_offset_s: float | None = None

    def __post_init__(self):
        if self.window_s <= 0 or self.hop_s <= 0:
            raise ValueError("window and hop must be positive")
        if self.max_offset_s is None:
            object.__setattr__(self, "max_offset_s", self.hop_s / 2.0)
        if self.max_offset_s < 0:
            raise ValueError("max_offset_s must be >= 0")

    def window_samples(self, rate: int) -> int:
        return int(round(self.window_s * rate))

    def hop_samples(self, rate: int) -> int:
        return int(round(self.hop_s * rate))

    def max_offset_samples(self, rate: int) -> int:
        return int(round(self.max_offset_s * rate))

    def to_json(self) -> str:
        return json.dumps(
            {"window_s": self.window_s, "hop_s": self.hop_s, "max_offset_s": self.max_offset_s},
            sort_keys=True,
        )


@dataclass
class MelSegment:
    """One scaled log-mel patch: values in [-1, 1], shape (n_mels, n_frames)."""

    values: np.ndarray
    track_id: str = ""
    segment_index: int = 0


def segment_audio(buf: AudioBuffer, spec: SegmentSpec) -> list[tuple[int, np.ndarray]]:
    """Cut a buffer into (start_sample, window) pairs on the hop grid.

    Windows start at 0, hop, 2*hop, ...; a trailing partial window is
    discarded, so the count is floor((len - window) / hop) + 1.
    """
    window = spec.window_samples(buf.sample_rate)
    hop = spec.hop_samples(buf.sample_rate)
    if len(buf) < window:
        raise ValueError(f"audio shorter than one window ({len(buf)} < {window} samples)")
    n = (len(buf) - window) // hop + 1
    return [(i * hop, buf.samples[i * hop : i * hop + window]) for i in range(n)]


def _hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def _mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


@lru_cache(maxsize=8)
def _filterbank_cached(key: tuple) -> np.ndarray:
    sample_rate, stft_size, n_mels, f_low, f_high = key
    n_bins = stft_size // 2 + 1
    bin_hz = np.arange(n_bins) * sample_rate / stft_size
    edges_hz = _mel_to_hz(np.linspace(_hz_to_mel(f_low), _hz_to_mel(f_high), n_mels + 2))
    fb = np.zeros((n_mels, n_bins), dtype=np.float64)
    for m in range(n_mels):
        lo, center, hi = edges_hz[m], edges_hz[m + 1], edges_hz[m + 2]
        rising = (bin_hz - lo) / (center - lo)
        falling = (hi - bin_hz) / (hi - center)
        fb[m] = np.clip(np.minimum(rising, falling), 0.0, None)
    return fb.astype(np.float32)


def mel_filterbank(cfg: MelConfig) -> np.ndarray:
    """Triangular HTK-mel filterbank matrix, shape (n_mels, n_fft_bins).

    Peak-normalized triangles (each filter tops out at 1). Cached and
    immutable, so it is shareable across threads.
    """
    return _filterbank_cached((cfg.sample_rate, cfg.stft_size, cfg.n_mels, cfg.f_low, cfg.f_high))


def mel_spectrogram(
    window: AudioBuffer | np.ndarray,
    cfg: MelConfig,
    track_id: str = "",
    segment_index: int = 0,
) -> MelSegment:
    """Scaled log-mel patch for one analysis window.

    Pipeline: Hann STFT magnitudes (frames fully inside the window, no
    centering padding) -> mel filterbank -> 20*log10 with an amplitude
    floor -> clip to [ref - dyn_range, ref] -> affine map to [-1, 1].

    The reference ``ref`` is the segment's peak dB, but never less than
    floor_db + dyn_range; this keeps silence at exactly -1 instead of
    letting the peak reference collapse onto the floor.
    """
    samples = window.samples if isinstance(window, AudioBuffer) else np.asarray(window)
    if isinstance(window, AudioBuffer) and window.sample_rate != cfg.sample_rate:
        raise ValueError(f"window at {window.sample_rate} Hz, config expects {cfg.sample_rate}")
    if len(samples) < cfg.stft_size:
        raise ValueError(f"window of {len(samples)} samples is shorter than one STFT frame")

    n_frames = cfg.n_frames(len(samples))
    win = get_window("hann", cfg.stft_size, fftbins=True)
    starts = np.arange(n_frames) * cfg.stft_hop
    frames = samples[starts[:, None] + np.arange(cfg.stft_size)[None, :]].astype(np.float64)
    mag = np.abs(np.fft.rfft(frames * win, axis=1))  # (n_frames, n_bins)
    mel = mel_filterbank(cfg).astype(np.float64) @ mag.T  # (n_mels, n_frames)

    db = 20.0 * np.log10(np.maximum(mel, cfg.amplitude_floor))
    floor_db = 20.0 * np.log10(cfg.amplitude_floor)
    ref = max(db.max(), floor_db + cfg.dyn_range_db)
    db = np.clip(db, ref - cfg.dyn_range_db, ref)
    values = ((db - ref) / cfg.dyn_range_db) * 2.0 + 1.0
    return MelSegment(values.astype(np.float32), track_id, segment_index)


def random_offset(
    window_start: int,
    rng: np.random.Generator,
    spec: SegmentSpec,
    sample_rate: int,
    track_len: int,
) -> int:
    """Shift a window start by a uniform integer offset in +-max_offset.

    The result is clamped so the window stays inside the track.
    """
    max_off = spec.max_offset_samples(sample_rate)
    if max_off > 0:
        window_start = window_start + int(rng.integers(-max_off, max_off + 1))
    window = spec.window_samples(sample_rate)
    return int(np.clip(window_start, 0, track_len - window))
