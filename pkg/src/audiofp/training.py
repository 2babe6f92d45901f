"""Self-supervised training loop for the fingerprint encoder.

Each step builds a fresh batch plan (distinct tracks, one anchor segment
per track), realizes it into features (anchors stay clean, positives are
shifted, run through the training degradation chain, and SpecAugment-ed),
pushes the features through the encoder, evaluates the configured metric
loss, backpropagates analytically, and applies an Adam update under a
warmup + cosine learning-rate schedule.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from .audio import AudioBuffer
from .degrade import AssetStore, degrade_chain
from .encoder import EncoderParams, backward, forward_with_cache, spec_augment
from .features import MelConfig, MelSegment, SegmentSpec, mel_spectrogram
from .losses import BatchPlan, EmbeddingBatch, LossConfig, build_batch, compute_loss

__all__ = ["TrainConfig", "TrainResult", "Adam", "train", "realize_batch", "learning_rate_at"]


@dataclass
class TrainConfig:
    n_anchors: int = 16
    n_ppa: int = 2
    loss: LossConfig = field(default_factory=LossConfig)
    epochs: int = 100
    steps: int | None = None  # overrides epochs * steps_per_epoch when set
    lr: float = 1e-3
    lr_min: float = 1e-5
    warmup_frac: float = 0.05
    seed: int = 0
    hidden: tuple[int, ...] = (256,)
    out_dim: int = 128
    past_s: float = 1.0
    ir_truncate_s: float | None = 1.0
    snr_range: tuple[float, float] = (0.0, 10.0)
    gain_range: tuple[float, float] = (-6.0, 0.0)
    augment_positives: bool = True
    n_time_masks: int = 1
    n_freq_masks: int = 1

    def __post_init__(self):
        if self.n_anchors < 2:
            raise ValueError("n_anchors must be at least 2")

    def to_dict(self) -> dict:
        d = dict(self.__dict__)
        d["loss"] = self.loss.to_dict()
        d["hidden"] = list(self.hidden)
        d["snr_range"] = list(self.snr_range)
        d["gain_range"] = list(self.gain_range)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        d["loss"] = LossConfig.from_dict(d["loss"])
        d["hidden"] = tuple(d["hidden"])
        d["snr_range"] = tuple(d["snr_range"])
        d["gain_range"] = tuple(d["gain_range"])
        return cls(**d)


@dataclass
class TrainResult:
    params: EncoderParams
    loss_curve: list[float]
    initial_params: EncoderParams


class Adam:
    """Standard Adam over a flat list of parameter arrays."""

    def __init__(self, shapes, beta1=0.9, beta2=0.999, eps=1e-8, dtype=np.float32):
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = [np.zeros(s, dtype=dtype) for s in shapes]
        self.v = [np.zeros(s, dtype=dtype) for s in shapes]
        self.t = 0

    def step(self, arrays, grads, lr):
        self.t += 1
        bias1 = 1.0 - self.beta1**self.t
        bias2 = 1.0 - self.beta2**self.t
        for arr, g, m, v in zip(arrays, grads, self.m, self.v):
            g = g.astype(arr.dtype)
            m *= self.beta1
            m += (1 - self.beta1) * g
            v *= self.beta2
            v += (1 - self.beta2) * g * g
            arr -= lr * (m / bias1) / (np.sqrt(v / bias2) + self.eps)


def learning_rate_at(step: int, total_steps: int, lr: float, lr_min: float, warmup_frac: float):
    """Linear warmup to ``lr`` then cosine decay to ``lr_min``."""
    warmup = max(1, int(round(warmup_frac * total_steps)))
    if step < warmup:
        return lr * (step + 1) / warmup
    span = max(1, total_steps - warmup)
    progress = (step - warmup) / span
    return lr_min + 0.5 * (lr - lr_min) * (1.0 + np.cos(np.pi * progress))


def realize_batch(
    plan: BatchPlan,
    corpus: dict[str, AudioBuffer],
    assets: AssetStore,
    mel_cfg: MelConfig,
    seg_spec: SegmentSpec,
    rng: np.random.Generator,
    cfg: TrainConfig,
) -> tuple[np.ndarray, list[str]]:
    """Turn a batch plan into flattened mel features in batch-row layout.

    Anchors are clean windows; positives run through the training chain
    (truncated IRs, acoustic history) and optional SpecAugment.
    """
    rate = mel_cfg.sample_rate
    window = seg_spec.window_samples(rate)
    past = int(round(cfg.past_s * rate))
    rows = []
    track_ids = []
    for sel in plan.selections:
        track = corpus[sel.track_id]
        anchor = mel_spectrogram(track.samples[sel.anchor_start : sel.anchor_start + window], mel_cfg)
        rows.append(anchor.values.reshape(-1))
        track_ids.append(sel.track_id)
        for start, dplan in zip(sel.positive_starts, sel.plans):
            ctx_start = max(0, start - past)
            context = AudioBuffer(track.samples[ctx_start : start + window], rate)
            degraded = degrade_chain(
                context,
                dplan,
                assets,
                segment_start=start - ctx_start,
                segment_len=window,
                past_s=cfg.past_s,
                ir_truncate_s=cfg.ir_truncate_s,
            )
            mel = mel_spectrogram(degraded, mel_cfg)
            if cfg.augment_positives:
                mel = spec_augment(mel, rng, cfg.n_time_masks, cfg.n_freq_masks)
            rows.append(mel.values.reshape(-1))
    return np.asarray(rows, dtype=np.float32), track_ids


def train(
    corpus: dict[str, AudioBuffer],
    assets: AssetStore,
    cfg: TrainConfig,
    mel_cfg: MelConfig | None = None,
    seg_spec: SegmentSpec | None = None,
    loss_csv_path=None,
) -> TrainResult:
    """Train the encoder over a corpus of clean tracks.

    Deterministic for a fixed config seed. Raises if the corpus is
    smaller than one batch of anchors or if the loss turns non-finite.
    """
    mel_cfg = mel_cfg or MelConfig()
    seg_spec = seg_spec or SegmentSpec()
    rate = mel_cfg.sample_rate
    window = seg_spec.window_samples(rate)
    pool = [(tid, len(buf)) for tid, buf in sorted(corpus.items())]
    if len(pool) < cfg.n_anchors:
        raise ValueError(f"corpus has {len(pool)} tracks, need at least {cfg.n_anchors}")
    if any(n < window + seg_spec.max_offset_samples(rate) for _, n in pool):
        raise ValueError("every track must be longer than window + max offset")

    input_dim = mel_cfg.n_mels * mel_cfg.n_frames(window)
    layer_sizes = [input_dim, *cfg.hidden, cfg.out_dim]
    rng = np.random.default_rng(cfg.seed)
    params = EncoderParams.init(layer_sizes, rng)
    initial = params.copy()

    steps_per_epoch = max(1, len(pool) // cfg.n_anchors)
    total_steps = cfg.steps if cfg.steps is not None else cfg.epochs * steps_per_epoch
    opt = Adam([w.shape for w in params.weights] + [b.shape for b in params.biases])

    noise_ids = assets.ids("noise", "train")
    room_ids = assets.ids("room", "train")
    mic_ids = assets.ids("microphone", "train")

    curve: list[float] = []
    for step in range(total_steps):
        plan = build_batch(
            pool,
            cfg.n_anchors,
            cfg.n_ppa,
            rng,
            spec=seg_spec,
            sample_rate=rate,
            noise_ids=noise_ids,
            room_ids=room_ids,
            mic_ids=mic_ids,
            snr_range=cfg.snr_range,
            gain_range=cfg.gain_range,
        )
        features, track_ids = realize_batch(plan, corpus, assets, mel_cfg, seg_spec, rng, cfg)
        embeddings, cache = forward_with_cache(params, features)
        batch = EmbeddingBatch(embeddings, cfg.n_anchors, cfg.n_ppa, track_ids)
        out = compute_loss(batch, cfg.loss)
        if not np.isfinite(out.value) or not np.all(np.isfinite(out.gradient)):
            raise RuntimeError(
                f"non-finite loss at step {step}: value={out.value}; "
                f"check degradation assets and loss config"
            )
        grad_w, grad_b = backward(params, cache, out.gradient)
        lr = learning_rate_at(step, total_steps, cfg.lr, cfg.lr_min, cfg.warmup_frac)
        opt.step(params.weights + params.biases, grad_w + grad_b, lr)
        curve.append(float(out.value))

    if loss_csv_path is not None:
        with open(loss_csv_path, "w", newline="") as f:
            writer = csv.writer(f)
            writer.writerow(["step", "value"])
            writer.writerows(enumerate(curve))
    return TrainResult(params, curve, initial)
