"""Concept-keyed watermarking for causal training-data attribution.

Pipeline: assign each training concept a bit secret, convert secrets to
spread-spectrum spatial watermarks, encrypt the concept's images, train
a toy diffusion model with a combined denoising + bit-recovery loss, and
attribute generated or held-out images by decoding bits and matching
them against the concept codebook.
"""

from .attribution import (
    AttributionResult,
    DualEvalReport,
    EvalReport,
    agreement,
    attribute,
    attribute_dual,
    attribute_image,
    evaluate_codec,
    evaluate_heldout,
    evaluate_sampled,
)
from .codebook import ConceptRegistry, assign_secrets, audit_min_hamming
from .codec import (
    CarrierBank,
    EmbedConfig,
    Secret,
    SpatialWatermark,
    build_carrier_bank,
    decode_hard,
    decode_soft,
    embed,
    embed_dual,
    psnr,
    resize_watermark,
    watermark_from_secret,
)
from .data import ConceptStyle, EncryptedDataset, build_encrypted_dataset, synth_concept_image
from .degradations import KINDS, Degradation, degrade, robustness_report
from .diffusion import (
    Denoiser,
    IdentityCodec,
    NoiseSchedule,
    TinyAutoencoder,
    TrainConfig,
    denoise_from,
    linear_schedule,
    loss_bce,
    loss_ldm,
    q_sample,
    sample,
    train_model,
)

__version__ = "0.1.0"
