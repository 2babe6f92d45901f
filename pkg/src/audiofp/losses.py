"""Batch construction and metric-learning losses with analytic gradients.

A training batch holds N_A anchor groups, each one anchor row followed by
its N_PPA positives, so the total row count is N_A * (1 + N_PPA). Groups
come from distinct tracks, which removes same-track pairs masquerading as
negatives. Every loss returns its scalar value together with the exact
gradient with respect to the raw embedding rows (before any projection
back onto the unit sphere), so no autodiff framework is needed; finite
differences are the safety net in the tests.

Losses:

* ``triplet_loss``      hard-positive / semi-hard-negative mining, squared
                        Euclidean distances, hinge with margin.
* ``ntxent_loss``       temperature-scaled cross entropy over cosine
                        similarities; symmetric for one positive per
                        anchor, and the multi-positive generalization
                        (mean over an anchor's positives) otherwise.
* ``dcl_loss``          ntxent with the positive similarity removed from
                        the denominator (one positive per anchor only).
* ``align_uniform_loss``  mean positive-pair distance^alpha plus a
                        log-mean Gaussian potential over cross-group pairs.
* ``kcl_loss``          kernelized variant of align/uniform: both terms
                        expressed through a Gaussian kernel on the sphere.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .degrade import DegradationPlan, random_plan
from .features import SegmentSpec, random_offset

__all__ = [
    "EmbeddingBatch",
    "LossConfig",
    "LossOutput",
    "SegmentSelection",
    "BatchPlan",
    "build_batch",
    "pairwise_sq_dist",
    "pairwise_cos_sim",
    "triplet_mine",
    "triplet_loss",
    "ntxent_loss",
    "dcl_loss",
    "align_uniform_loss",
    "kcl_loss",
    "compute_loss",
]


@dataclass
class EmbeddingBatch:
    """Unit-norm embedding rows in anchor-group layout.

    Row g*(1+n_pos_per_anchor) is anchor g; the following
    ``n_pos_per_anchor`` rows are its positives. ``track_ids`` has one
    entry per group.
    """

    vectors: np.ndarray
    n_anchors: int
    n_pos_per_anchor: int
    track_ids: list[str] = field(default_factory=list)

    @property
    def group_size(self) -> int:
        return 1 + self.n_pos_per_anchor

    @property
    def n_rows(self) -> int:
        return self.n_anchors * self.group_size

    def anchor_rows(self) -> np.ndarray:
        return np.arange(self.n_anchors) * self.group_size

    def group_of_rows(self) -> np.ndarray:
        return np.repeat(np.arange(self.n_anchors), self.group_size)

    def validate(self, norm_atol: float = 1e-5) -> None:
        if self.vectors.ndim != 2 or self.vectors.shape[0] != self.n_rows:
            raise ValueError(
                f"expected {self.n_rows} rows "
                f"(= {self.n_anchors} * (1 + {self.n_pos_per_anchor})), "
                f"got shape {self.vectors.shape}"
            )
        norms = np.linalg.norm(self.vectors, axis=1)
        worst = float(np.max(np.abs(norms - 1.0)))
        if worst > norm_atol:
            raise ValueError(f"rows must be unit-norm within {norm_atol}, worst |n-1| = {worst}")
        if self.track_ids:
            if len(self.track_ids) != self.n_anchors:
                raise ValueError("need one track id per anchor group")
            if len(set(self.track_ids)) != self.n_anchors:
                raise ValueError("anchor groups must come from distinct tracks")


@dataclass
class LossConfig:
    """Loss selection plus every tunable the loss family exposes."""

    kind: str = "triplet"  # triplet | ntxent | dcl | align_uniform | kcl
    tau: float = 0.05
    margin_alpha: float = 0.5
    au_align_alpha: float = 2.0
    au_uniform_t: float = 2.0
    au_lambda: float = 1.0
    kcl_kernel_t: float = 2.0

    def __post_init__(self):
        if self.tau <= 0:
            raise ValueError("tau must be positive")
        if self.margin_alpha <= 0:
            raise ValueError("margin_alpha must be positive")

    def to_dict(self) -> dict:
        return dict(self.__dict__)

    @classmethod
    def from_dict(cls, d: dict) -> "LossConfig":
        return cls(**d)


@dataclass
class LossOutput:
    value: float
    gradient: np.ndarray


# ---------------------------------------------------------------------------
# batch construction


@dataclass
class SegmentSelection:
    """One group's recipe: a clean anchor window plus shifted, individually
    degraded positives."""

    track_id: str
    anchor_start: int
    positive_starts: list[int]
    plans: list[DegradationPlan]


@dataclass
class BatchPlan:
    selections: list[SegmentSelection]
    n_anchors: int
    n_pos_per_anchor: int


def build_batch(
    track_pool: list[tuple[str, int]],
    n_anchors: int,
    n_ppa: int,
    rng: np.random.Generator,
    *,
    spec: SegmentSpec,
    sample_rate: int,
    noise_ids: list[str],
    room_ids: list[str],
    mic_ids: list[str],
    snr_range: tuple[float, float] = (0.0, 10.0),
    gain_range: tuple[float, float] = (-6.0, 0.0),
) -> BatchPlan:
    """Plan a batch: ``n_anchors`` distinct tracks sampled without
    replacement, one random grid segment per track as the anchor, and
    ``n_ppa`` positives per anchor, each independently shifted by up to
    half a hop and given its own degradation plan.

    ``track_pool`` is a list of (track_id, n_samples) pairs.
    """
    if len(track_pool) < n_anchors:
        raise ValueError(f"pool of {len(track_pool)} tracks < {n_anchors} anchors")
    window = spec.window_samples(sample_rate)
    hop = spec.hop_samples(sample_rate)
    chosen = rng.choice(len(track_pool), size=n_anchors, replace=False)
    selections = []
    for idx in chosen:
        track_id, n_samples = track_pool[idx]
        n_segments = (n_samples - window) // hop + 1
        if n_segments < 1:
            raise ValueError(f"track {track_id!r} shorter than one window")
        anchor_start = int(rng.integers(n_segments)) * hop
        positive_starts = [
            random_offset(anchor_start, rng, spec, sample_rate, n_samples)
            for _ in range(n_ppa)
        ]
        plans = [
            random_plan(rng, noise_ids, room_ids, mic_ids, snr_range, gain_range)
            for _ in range(n_ppa)
        ]
        selections.append(SegmentSelection(track_id, anchor_start, positive_starts, plans))
    return BatchPlan(selections, n_anchors, n_ppa)


# ---------------------------------------------------------------------------
# pairwise geometry


def _as_matrix(batch) -> np.ndarray:
    return batch.vectors if isinstance(batch, EmbeddingBatch) else np.asarray(batch)


def pairwise_sq_dist(batch) -> np.ndarray:
    """Squared Euclidean distances, symmetric with a zero diagonal."""
    x = _as_matrix(batch)
    sq = np.einsum("ij,ij->i", x, x)
    d2 = sq[:, None] + sq[None, :] - 2.0 * (x @ x.T)
    np.maximum(d2, 0.0, out=d2)
    np.fill_diagonal(d2, 0.0)
    return d2


def pairwise_cos_sim(batch) -> np.ndarray:
    """Cosine similarities of unit rows (inner products), unit diagonal."""
    x = _as_matrix(batch)
    s = x @ x.T
    np.fill_diagonal(s, 1.0)
    return s


# ---------------------------------------------------------------------------
# triplet with mining


def triplet_mine(batch: EmbeddingBatch, margin: float = 0.5) -> tuple[np.ndarray, np.ndarray]:
    """Mining step of the triplet loss, exposed for inspection.

    Per anchor: the hard positive p* is its farthest positive (squared
    distance); the negative n* is the closest negative inside the
    semi-hard band (d2_pos, d2_pos + margin), falling back to the overall
    closest negative when the band is empty. Returns (p_star, n_star)
    row indices, one entry per anchor.
    """
    return _mine(batch, margin)


def _mine(batch: EmbeddingBatch, margin: float) -> tuple[np.ndarray, np.ndarray]:
    d2 = pairwise_sq_dist(batch.vectors)
    groups = batch.group_of_rows()
    gs = batch.group_size
    p_star = np.empty(batch.n_anchors, dtype=np.int64)
    n_star = np.empty(batch.n_anchors, dtype=np.int64)
    for g in range(batch.n_anchors):
        a = g * gs
        pos_rows = np.arange(a + 1, a + gs)
        p_star[g] = pos_rows[np.argmax(d2[a, pos_rows])]
        d_pos = d2[a, p_star[g]]
        neg_rows = np.nonzero(groups != g)[0]
        if len(neg_rows) == 0:
            raise ValueError("triplet loss needs at least two anchor groups")
        d_neg = d2[a, neg_rows]
        semi = (d_neg > d_pos) & (d_neg < d_pos + margin)
        if np.any(semi):
            cands = neg_rows[semi]
            n_star[g] = cands[np.argmin(d2[a, cands])]
        else:
            # No negative in the semi-hard band: fall back to the hardest
            # (closest) negative so every anchor keeps contributing.
            n_star[g] = neg_rows[np.argmin(d_neg)]
    return p_star, n_star


def triplet_loss(batch: EmbeddingBatch, cfg: LossConfig) -> LossOutput:
    """Hinge over mined triplets, mean over anchors.

    Per anchor a: loss = max(0, d2(a, p*) - d2(a, n*) + margin) with the
    hard positive p* and semi-hard negative n* from :func:`_mine`. The
    gradient treats the mining selection as fixed (subgradient through
    the argmax/argmin choices).
    """
    x = batch.vectors
    p_star, n_star = _mine(batch, cfg.margin_alpha)
    grad = np.zeros_like(x)
    total = 0.0
    inv = 1.0 / batch.n_anchors
    for g in range(batch.n_anchors):
        a = g * batch.group_size
        p, n = p_star[g], n_star[g]
        d_pos = float(np.sum((x[a] - x[p]) ** 2))
        d_neg = float(np.sum((x[a] - x[n]) ** 2))
        hinge = d_pos - d_neg + cfg.margin_alpha
        if hinge > 0:
            total += hinge
            grad[a] += inv * 2.0 * (x[n] - x[p])
            grad[p] += inv * -2.0 * (x[a] - x[p])
            grad[n] += inv * 2.0 * (x[a] - x[n])
    return LossOutput(total * inv, grad)


# ---------------------------------------------------------------------------
# temperature cross-entropy family


def _info_nce(
    x: np.ndarray,
    pairs: list[tuple[int, int, float]],
    tau: float,
    exclude_positive: bool,
) -> LossOutput:
    """Shared core: sum of coeff * (-s(u,p)/tau + logsumexp_k s(u,k)/tau).

    ``pairs`` are (anchor_row, positive_row, coefficient). The logsumexp
    runs over k != u, additionally excluding the positive itself when
    ``exclude_positive`` (the decoupled variant).
    """
    n = x.shape[0]
    s = x @ x.T
    w = np.zeros_like(s)
    value = 0.0
    for u, p, coeff in pairs:
        mask = np.ones(n, dtype=bool)
        mask[u] = False
        if exclude_positive:
            mask[p] = False
        logits = s[u, mask] / tau
        m = logits.max()
        e = np.exp(logits - m)
        z = e.sum()
        value += coeff * (-s[u, p] / tau + (m + np.log(z)))
        soft = np.zeros(n, dtype=x.dtype)
        soft[mask] = e / z
        w[u] += coeff / tau * soft
        w[u, p] -= coeff / tau
    grad = (w + w.T) @ x
    return LossOutput(float(value), grad)


def _ordered_pairs(batch: EmbeddingBatch) -> list[tuple[int, int, float]]:
    gs = batch.group_size
    if batch.n_pos_per_anchor == 1:
        # Symmetric pairwise form: both directions of every (anchor,
        # positive) pair, matching the classic two-view objective.
        coeff = 1.0 / (2 * batch.n_anchors)
        pairs = []
        for g in range(batch.n_anchors):
            a = g * gs
            pairs += [(a, a + 1, coeff), (a + 1, a, coeff)]
        return pairs
    # Multi-positive generalization: each anchor averages over its
    # positives; positives do not act as anchors.
    coeff = 1.0 / (batch.n_anchors * batch.n_pos_per_anchor)
    return [
        (g * gs, g * gs + 1 + j, coeff)
        for g in range(batch.n_anchors)
        for j in range(batch.n_pos_per_anchor)
    ]


def ntxent_loss(batch: EmbeddingBatch, cfg: LossConfig) -> LossOutput:
    """Temperature cross-entropy over cosine similarities.

    The denominator for anchor u sums exp(s(u,k)/tau) over every other
    row k, positives included. With one positive per anchor this is the
    standard symmetric two-view loss; with several it is the mean over
    an anchor's positives (the multi-positive extension, which reduces
    to the former exactly at one positive).
    """
    return _info_nce(batch.vectors, _ordered_pairs(batch), cfg.tau, exclude_positive=False)


def dcl_loss(batch: EmbeddingBatch, cfg: LossConfig) -> LossOutput:
    """Decoupled variant: the positive term leaves the denominator.

    ell(u, p) = -s(u,p)/tau + log sum_{k not in {u,p}} exp(s(u,k)/tau),
    averaged over both directions of each pair. Defined for one positive
    per anchor only.
    """
    if batch.n_pos_per_anchor != 1:
        raise ValueError("dcl_loss is defined for exactly one positive per anchor")
    return _info_nce(batch.vectors, _ordered_pairs(batch), cfg.tau, exclude_positive=True)


# ---------------------------------------------------------------------------
# alignment / uniformity family


def _check_au_batch(batch: EmbeddingBatch) -> None:
    if batch.n_pos_per_anchor != 1:
        raise ValueError("alignment/uniformity losses take exactly one positive per anchor")
    if batch.n_anchors < 2:
        raise ValueError("uniformity needs at least two anchor groups")


def _cross_group_mask(batch: EmbeddingBatch) -> np.ndarray:
    groups = batch.group_of_rows()
    return groups[:, None] != groups[None, :]


def _uniformity(x: np.ndarray, mask: np.ndarray, t: float) -> tuple[float, np.ndarray]:
    """log mean_{cross-group pairs} exp(-t * ||xi - xj||^2) and its gradient."""
    d2 = pairwise_sq_dist(x)
    w = np.where(mask, np.exp(-t * d2), 0.0)
    n_pairs = mask.sum() / 2.0
    mean_k = w.sum() / 2.0 / n_pairs
    value = float(np.log(mean_k))
    # d/dx_i of log mean: sum over partners j of w_ij * (-2t)(x_i - x_j),
    # normalized by (mean * n_pairs).
    coef = -2.0 * t / (mean_k * n_pairs)
    grad = coef * (w.sum(axis=1)[:, None] * x - w @ x)
    return value, grad.astype(x.dtype)


def align_uniform_loss(batch: EmbeddingBatch, cfg: LossConfig) -> LossOutput:
    """Positive-pair closeness plus spread over the hypersphere.

    value = mean_g ||a_g - p_g||^alpha
            + lambda * log mean_{cross-group pairs} exp(-t ||xi - xj||^2)
    """
    _check_au_batch(batch)
    x = batch.vectors
    a_rows = batch.anchor_rows()
    p_rows = a_rows + 1
    diff = x[a_rows] - x[p_rows]
    dist = np.linalg.norm(diff, axis=1)
    alpha = cfg.au_align_alpha
    align = float(np.mean(dist**alpha))

    grad = np.zeros_like(x)
    # alpha * d^(alpha-2) * diff, with zero-distance pairs contributing 0.
    safe = np.where(dist > 0, dist, 1.0)
    scale = np.where(dist > 0, alpha * safe ** (alpha - 2.0), 0.0) / batch.n_anchors
    grad[a_rows] += scale[:, None] * diff
    grad[p_rows] -= scale[:, None] * diff

    unif, unif_grad = _uniformity(x, _cross_group_mask(batch), cfg.au_uniform_t)
    return LossOutput(align + cfg.au_lambda * unif, grad + cfg.au_lambda * unif_grad)


def kcl_loss(batch: EmbeddingBatch, cfg: LossConfig) -> LossOutput:
    """Kernel form of alignment/uniformity with a Gaussian kernel
    k(x, y) = exp(-t ||x - y||^2) of width ``kcl_kernel_t``.

    value = -log(mean_g k(a_g, p_g)) / t
            + lambda * log mean_{cross-group pairs} k(xi, xj)

    With the kernel width equal to the uniformity width of
    :func:`align_uniform_loss` (and quadratic alignment there), the two
    losses coincide on batches whose positive distances are all equal.
    """
    _check_au_batch(batch)
    x = batch.vectors
    t = cfg.kcl_kernel_t
    a_rows = batch.anchor_rows()
    p_rows = a_rows + 1
    diff = x[a_rows] - x[p_rows]
    kpos = np.exp(-t * np.einsum("ij,ij->i", diff, diff))
    mean_k = float(np.mean(kpos))
    align = -np.log(mean_k) / t

    grad = np.zeros_like(x)
    scale = (2.0 * kpos / (mean_k * batch.n_anchors)).astype(x.dtype)
    grad[a_rows] += scale[:, None] * diff
    grad[p_rows] -= scale[:, None] * diff

    unif, unif_grad = _uniformity(x, _cross_group_mask(batch), t)
    return LossOutput(align + cfg.au_lambda * unif, grad + cfg.au_lambda * unif_grad)


_LOSSES = {
    "triplet": triplet_loss,
    "ntxent": ntxent_loss,
    "dcl": dcl_loss,
    "align_uniform": align_uniform_loss,
    "kcl": kcl_loss,
}


def compute_loss(batch: EmbeddingBatch, cfg: LossConfig) -> LossOutput:
    try:
        fn = _LOSSES[cfg.kind]
    except KeyError:
        raise ValueError(f"unknown loss kind {cfg.kind!r}; choose from {sorted(_LOSSES)}") from None
    return fn(batch, cfg)
