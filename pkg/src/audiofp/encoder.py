"""A small fully-connected encoder: flattened mel segment -> unit-norm
fingerprint, with a hand-written backward pass.

The supervision, losses, and batch geometry are encoder-agnostic, so a
compact affine/ELU stack is enough to demonstrate the pipeline end to end
while keeping the analytic backward tractable and exactly testable.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass

import numpy as np

from .features import MelSegment

__all__ = [
    "EncoderParams",
    "forward",
    "forward_with_cache",
    "backward",
    "spec_augment",
    "save_checkpoint",
    "load_checkpoint",
]

_CHECKPOINT_MAGIC = b"NMCK"
_CHECKPOINT_VERSION = 1

# Rows whose pre-normalization norm falls below this map to the fixed
# basis vector e1 instead of dividing by ~0.
_NORM_GUARD = 1e-12


@dataclass
class EncoderParams:
    """Affine layer stack; ELU between layers, L2 normalization at the end."""

    weights: list[np.ndarray]
    biases: list[np.ndarray]

    @property
    def layer_sizes(self) -> list[int]:
        return [self.weights[0].shape[0]] + [w.shape[1] for w in self.weights]

    @property
    def n_params(self) -> int:
        return sum(w.size for w in self.weights) + sum(b.size for b in self.biases)

    @classmethod
    def init(cls, layer_sizes: list[int], rng: np.random.Generator, dtype=np.float32):
        """He-scaled random weights, zero biases."""
        weights, biases = [], []
        for fan_in, fan_out in zip(layer_sizes[:-1], layer_sizes[1:]):
            scale = np.sqrt(2.0 / fan_in)
            weights.append((rng.normal(0.0, scale, (fan_in, fan_out))).astype(dtype))
            biases.append(np.zeros(fan_out, dtype=dtype))
        return cls(weights, biases)

    def copy(self) -> "EncoderParams":
        return EncoderParams([w.copy() for w in self.weights], [b.copy() for b in self.biases])


def _elu(x):
    return np.where(x > 0, x, np.expm1(x))


def forward_with_cache(params: EncoderParams, features: np.ndarray):
    """Forward pass returning (unit-norm embeddings, cache for backward)."""
    x = np.asarray(features)
    if x.ndim != 2 or x.shape[1] != params.weights[0].shape[0]:
        raise ValueError(
            f"expected features of shape (batch, {params.weights[0].shape[0]}), got {x.shape}"
        )
    activations = [x]
    pre_acts = []
    h = x
    last = len(params.weights) - 1
    for i, (w, b) in enumerate(zip(params.weights, params.biases)):
        z = h @ w + b
        pre_acts.append(z)
        h = z if i == last else _elu(z)
        activations.append(h)
    norms = np.linalg.norm(h, axis=1, keepdims=True)
    guarded = norms[:, 0] < _NORM_GUARD
    safe = np.where(norms < _NORM_GUARD, 1.0, norms)
    y = h / safe
    if np.any(guarded):
        y[guarded] = 0.0
        y[guarded, 0] = 1.0
    return y, (activations, pre_acts, norms, guarded, y)


def forward(params: EncoderParams, features: np.ndarray) -> np.ndarray:
    """Unit-norm embeddings for a (batch, input_dim) feature matrix."""
    y, _ = forward_with_cache(params, features)
    return y


def backward(params: EncoderParams, cache, grad_embeddings: np.ndarray):
    """Gradients of a scalar loss wrt all weights and biases.

    ``grad_embeddings`` is dLoss/dY for the normalized output Y. Rows that
    hit the norm guard are constants, so their gradient is zero.
    """
    activations, pre_acts, norms, guarded, y = cache
    g = np.asarray(grad_embeddings)
    # Through y = z / ||z||: dz = (g - (g.y) y) / ||z||.
    dot = np.sum(g * y, axis=1, keepdims=True)
    safe = np.where(norms < _NORM_GUARD, 1.0, norms)
    dz = (g - dot * y) / safe
    dz[guarded] = 0.0

    grad_w = [None] * len(params.weights)
    grad_b = [None] * len(params.biases)
    last = len(params.weights) - 1
    for i in range(last, -1, -1):
        if i != last:
            # ELU'(z) = 1 for z > 0, exp(z) otherwise.
            dz = dz * np.where(pre_acts[i] > 0, 1.0, np.exp(pre_acts[i]))
        grad_w[i] = activations[i].T @ dz
        grad_b[i] = dz.sum(axis=0)
        if i > 0:
            dz = dz @ params.weights[i].T
    return grad_w, grad_b


def spec_augment(
    mel: MelSegment,
    rng: np.random.Generator,
    n_time_masks: int = 1,
    n_freq_masks: int = 1,
    max_width: int | tuple[int, int] | None = None,
) -> MelSegment:
    """Mask random time columns and mel rows to the silence value (-1).

    ``max_width`` bounds the mask width (uniform integer in [0, max]);
    None picks 10% of each axis. A pair gives (freq, time) bounds.
    """
    values = mel.values.copy()
    n_mels, n_frames = values.shape
    if max_width is None:
        max_f, max_t = max(1, round(0.1 * n_mels)), max(1, round(0.1 * n_frames))
    elif isinstance(max_width, tuple):
        max_f, max_t = max_width
    else:
        max_f = max_t = int(max_width)
    if max_f >= n_mels or max_t >= n_frames:
        raise ValueError("mask width bound must be smaller than the masked dimension")
    for _ in range(n_freq_masks):
        width = int(rng.integers(0, max_f + 1))
        start = int(rng.integers(0, n_mels - width + 1))
        values[start : start + width, :] = -1.0
    for _ in range(n_time_masks):
        width = int(rng.integers(0, max_t + 1))
        start = int(rng.integers(0, n_frames - width + 1))
        values[:, start : start + width] = -1.0
    return MelSegment(values, mel.track_id, mel.segment_index)


def save_checkpoint(path, params: EncoderParams, header: dict | None = None) -> None:
    """JSON header + little-endian float32 parameter blob."""
    meta = dict(header or {})
    meta["layer_sizes"] = params.layer_sizes
    header_bytes = json.dumps(meta, sort_keys=True).encode("utf-8")
    blob = b"".join(
        np.ascontiguousarray(arr, dtype="<f4").tobytes()
        for w, b in zip(params.weights, params.biases)
        for arr in (w, b)
    )
    with open(path, "wb") as f:
        f.write(_CHECKPOINT_MAGIC)
        f.write(struct.pack("<HI", _CHECKPOINT_VERSION, len(header_bytes)))
        f.write(header_bytes)
        f.write(blob)


def load_checkpoint(path) -> tuple[EncoderParams, dict]:
    with open(path, "rb") as f:
        magic = f.read(4)
        if magic != _CHECKPOINT_MAGIC:
            raise ValueError(f"{path}: not a checkpoint file (magic {magic!r})")
        version, header_len = struct.unpack("<HI", f.read(6))
        if version != _CHECKPOINT_VERSION:
            raise ValueError(f"{path}: unsupported checkpoint version {version}")
        header = json.loads(f.read(header_len).decode("utf-8"))
        blob = f.read()
    sizes = header["layer_sizes"]
    weights, biases = [], []
    offset = 0
    flat = np.frombuffer(blob, dtype="<f4")
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        weights.append(flat[offset : offset + fan_in * fan_out].reshape(fan_in, fan_out).copy())
        offset += fan_in * fan_out
        biases.append(flat[offset : offset + fan_out].copy())
        offset += fan_out
    if offset != flat.size:
        raise ValueError(f"{path}: parameter blob size mismatch")
    return EncoderParams(weights, biases), header
