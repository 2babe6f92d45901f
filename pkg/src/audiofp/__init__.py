"""Audio fingerprinting engine.

Compact unit-norm fingerprints from 1-second log-mel segments, realistic
degradation simulation for self-supervised training, a suite of metric
losses with analytic gradients, and scalable two-stage sequence retrieval
with track- and segment-level evaluation.
"""

from .audio import AudioBuffer, apply_gain, load_wav, resample, write_wav
from .degrade import (
    AssetStore,
    DegradationPlan,
    ImpulseResponse,
    PartitionManifest,
    convolve_with_history,
    degrade_chain,
    mix_noise,
    random_plan,
    truncate_ir,
    validate_partition,
)
from .features import (
    MelConfig,
    MelSegment,
    SegmentSpec,
    mel_filterbank,
    mel_spectrogram,
    random_offset,
    segment_audio,
)
from .losses import (
    BatchPlan,
    EmbeddingBatch,
    LossConfig,
    LossOutput,
    align_uniform_loss,
    build_batch,
    compute_loss,
    dcl_loss,
    kcl_loss,
    ntxent_loss,
    pairwise_cos_sim,
    pairwise_sq_dist,
    triplet_loss,
)

__version__ = "0.1.0"
