"""Deterministic synthetic corpora for desk-scale experiments and tests.

Tracks are sums of random sinusoidal partials with per-block amplitude
envelopes plus a little filtered noise, which makes them spectrally
distinctive between tracks and non-stationary within a track (so
segment-level identification is meaningful). Degradation assets are
colored noise scenes, exponentially decaying room responses, and short
microphone responses.
"""

from __future__ import annotations

import numpy as np
from scipy.signal import fftconvolve

from .audio import AudioBuffer
from .degrade import AssetStore

__all__ = ["make_track", "make_corpus", "make_asset_store"]


def make_track(rng: np.random.Generator, duration_s: float, rate: int = 8000) -> AudioBuffer:
    """One synthetic music-like track: 4-8 partials with random per-second
    amplitude envelopes, plus low-passed noise."""
    n = int(round(duration_s * rate))
    t = np.arange(n) / rate
    x = np.zeros(n)
    n_partials = int(rng.integers(4, 9))
    freqs = rng.uniform(120.0, 3200.0, n_partials)
    phases = rng.uniform(0, 2 * np.pi, n_partials)
    block = rate // 2  # envelope changes every half second
    n_blocks = int(np.ceil(n / block))
    for f, p in zip(freqs, phases):
        env_points = rng.uniform(0.05, 1.0, n_blocks + 1)
        env = np.interp(np.arange(n), np.arange(n_blocks + 1) * block, env_points)
        x += env * np.sin(2 * np.pi * f * t + p)
    noise = rng.normal(0, 1, n)
    kernel = np.ones(8) / 8.0
    x += 0.15 * fftconvolve(noise, kernel, mode="same")
    x *= 0.5 / np.max(np.abs(x))
    return AudioBuffer(x.astype(np.float32), rate)


def make_corpus(
    n_tracks: int, duration_s: float, seed: int, rate: int = 8000
) -> dict[str, AudioBuffer]:
    rng = np.random.default_rng(seed)
    return {f"track{i:04d}": make_track(rng, duration_s, rate) for i in range(n_tracks)}


def _scene_noise(rng: np.random.Generator, n: int, color: float) -> np.ndarray:
    """Colored noise: 1/f^color spectral shaping."""
    spectrum = np.fft.rfft(rng.normal(0, 1, n))
    freqs = np.arange(len(spectrum), dtype=np.float64)
    freqs[0] = 1.0
    shaped = np.fft.irfft(spectrum / freqs**color, n)
    return (0.3 * shaped / np.max(np.abs(shaped))).astype(np.float32)


def _room_ir(rng: np.random.Generator, rate: int, rt_s: float) -> np.ndarray:
    n = int(rate * rt_s * 1.2)
    h = rng.normal(0, 1, n) * np.exp(-6.9 * np.arange(n) / (rate * rt_s))
    h[0] = 1.0  # direct path
    return (h / np.sqrt(np.sum(h**2))).astype(np.float32)


def _mic_ir(rng: np.random.Generator, rate: int) -> np.ndarray:
    n = int(rng.integers(24, 96))
    h = rng.normal(0, 1, n) * np.exp(-np.arange(n) / (n / 3))
    h[0] = 1.0
    return (h / np.sqrt(np.sum(h**2))).astype(np.float32)


def make_asset_store(
    seed: int,
    rate: int = 8000,
    n_noise: int = 4,
    n_rooms: int = 3,
    n_mics: int = 3,
    noise_duration_s: float = 40.0,
    max_rt_s: float = 1.5,
) -> AssetStore:
    """Synthetic degradation assets with disjoint train/test sources.

    Each kind gets ``n_*`` sources per split; room reverberation times
    span up to ``max_rt_s`` seconds so full IRs genuinely exceed a
    one-second model context.
    """
    rng = np.random.default_rng(seed)
    store = AssetStore(rate)
    n_samples = int(noise_duration_s * rate)
    for split in ("train", "test"):
        for i in range(n_noise):
            name = f"scene_{split}_{i}"
            color = rng.uniform(0.2, 1.0)
            store.add(name, "noise", AudioBuffer(_scene_noise(rng, n_samples, color), rate),
                      source_id=name, split=split)
        for i in range(n_rooms):
            name = f"room_{split}_{i}"
            rt = rng.uniform(0.3, max_rt_s)
            store.add(name, "room", AudioBuffer(_room_ir(rng, rate, rt), rate),
                      source_id=name, split=split, tags={"rt_s": round(rt, 3)})
        for i in range(n_mics):
            name = f"mic_{split}_{i}"
            store.add(name, "microphone", AudioBuffer(_mic_ir(rng, rate), rate),
                      source_id=name, split=split)
    return store
