"""Mono audio buffers: WAV I/O, band-limited resampling, and gain.

Everything downstream operates on :class:`AudioBuffer`, a float32 mono
sample stream tagged with its sample rate. All operations are pure
functions over immutable inputs.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.io import wavfile

__all__ = ["AudioBuffer", "load_wav", "write_wav", "resample", "apply_gain"]

# Windowed-sinc resampler: taps per output sample, Kaiser window shape.
_RESAMPLE_TAPS = 64
_KAISER_BETA = 8.0


@dataclass
class AudioBuffer:
    """Mono audio: float32 samples in nominal [-1, 1] plus a sample rate."""

    samples: np.ndarray
    sample_rate: int

    def __post_init__(self):
        samples = np.asarray(self.samples, dtype=np.float32)
        if samples.ndim != 1:
            raise ValueError(f"expected mono 1-D samples, got shape {samples.shape}")
        if not np.all(np.isfinite(samples)):
            raise ValueError("audio samples must be finite (no NaN/Inf)")
        if self.sample_rate <= 0:
            raise ValueError(f"sample_rate must be positive, got {self.sample_rate}")
        self.samples = samples
        self.sample_rate = int(self.sample_rate)

    def __len__(self) -> int:
        return len(self.samples)

    @property
    def duration_s(self) -> float:
        return len(self.samples) / self.sample_rate


def load_wav(path) -> AudioBuffer:
    """Load a RIFF WAV file as a mono float32 buffer.

    Accepts 16-bit PCM or 32-bit float encodings with one or two
    channels. Stereo is downmixed by channel average; integer PCM is
    scaled to [-1, 1] by 1/32768.

    Raises:
        FileNotFoundError: the file does not exist.
        ValueError: unsupported encoding, channel count, or empty audio.
    """
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"no such audio file: {path}")
    with warnings.catch_warnings():
        # scipy warns about non-data chunks (e.g. LIST); they are harmless.
        warnings.simplefilter("ignore", wavfile.WavFileWarning)
        rate, data = wavfile.read(str(path))
    if data.size == 0:
        raise ValueError(f"zero-length audio: {path}")
    if data.dtype == np.int16:
        scaled = data.astype(np.float64) / 32768.0
    elif data.dtype in (np.float32, np.float64):
        scaled = data.astype(np.float64)
    else:
        raise ValueError(f"{path}: unsupported WAV encoding {data.dtype}; use PCM16 or float32")
    if scaled.ndim == 2:
        if scaled.shape[1] > 2:
            raise ValueError(f"{path}: expected mono or stereo, got {scaled.shape[1]} channels")
        scaled = scaled.mean(axis=1)
    return AudioBuffer(scaled.astype(np.float32), rate)


def write_wav(path, buf: AudioBuffer) -> None:
    """Write a buffer as 32-bit float mono WAV (little-endian)."""
    wavfile.write(str(path), buf.sample_rate, buf.samples.astype("<f4"))


def _kaiser_sinc(dx: np.ndarray, cutoff: float) -> np.ndarray:
    """Low-pass interpolation kernel at fractional offsets ``dx`` (input samples)."""
    half = _RESAMPLE_TAPS // 2
    x = dx / half
    window = np.zeros_like(dx)
    inside = np.abs(x) <= 1.0
    window[inside] = np.i0(_KAISER_BETA * np.sqrt(1.0 - x[inside] ** 2)) / np.i0(_KAISER_BETA)
    return 2.0 * cutoff * np.sinc(2.0 * cutoff * dx) * window


def resample_cutoff(source_rate: int, target_rate: int) -> float:
    """Design cutoff (cycles/input-sample) with the transition band placed
    entirely below the band edge, so the stopband starts at min(Nyquist)."""
    nominal = 0.5 * min(1.0, target_rate / source_rate)
    # Kaiser beta 8 gives ~81 dB stopband; transition width for the tap count.
    atten_db = _KAISER_BETA / 0.1102 + 8.7
    transition = (atten_db - 7.95) / (2.285 * 2.0 * np.pi * _RESAMPLE_TAPS)
    return max(nominal - transition / 2.0, nominal * 0.5)


def resample(buf: AudioBuffer, target_rate: int) -> AudioBuffer:
    """Band-limited resampling via a windowed-sinc (Kaiser) interpolator.

    Output length is round(len * target/source). Each output sample is a
    64-tap dot product against the source at the corresponding fractional
    position; the kernel cutoff keeps aliasing above the new Nyquist below
    the window's stopband level.
    """
    if target_rate <= 0:
        raise ValueError(f"target_rate must be positive, got {target_rate}")
    if target_rate == buf.sample_rate:
        return AudioBuffer(buf.samples.copy(), buf.sample_rate)

    ratio = target_rate / buf.sample_rate
    n_out = int(np.floor(len(buf) * ratio + 0.5))
    half = _RESAMPLE_TAPS // 2
    cutoff = resample_cutoff(buf.sample_rate, target_rate)

    src = np.pad(buf.samples.astype(np.float64), (half, half))
    offsets = np.arange(-half + 1, half + 1)
    out = np.empty(n_out, dtype=np.float64)
    # Chunked to bound the (chunk, taps) scratch matrices.
    for lo in range(0, n_out, 1 << 16):
        hi = min(lo + (1 << 16), n_out)
        t = np.arange(lo, hi) / ratio
        base = np.floor(t).astype(np.int64)
        idx = base[:, None] + offsets[None, :]
        weights = _kaiser_sinc(t[:, None] - idx, cutoff)
        weights /= weights.sum(axis=1, keepdims=True)
        out[lo:hi] = (src[idx + half] * weights).sum(axis=1)
    return AudioBuffer(out.astype(np.float32), target_rate)


def apply_gain(buf: AudioBuffer, gain_db: float) -> AudioBuffer:
    """Scale every sample by 10^(gain_db/20)."""
    if not np.isfinite(gain_db):
        raise ValueError(f"gain must be finite, got {gain_db}")
    factor = np.float32(10.0 ** (gain_db / 20.0))
    return AudioBuffer(buf.samples * factor, buf.sample_rate)
