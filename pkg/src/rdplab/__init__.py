"""Fixed-rate perception-distortion analysis for learned image compression.

Train a small hyperprior codec under a rate-distortion loss, freeze every
sub-network the bitstream depends on, fine-tune only the decoder under a
perception-distortion loss, sweep the trade-off weight, and pick the knee of
the resulting curve -- with a real range coder proving that the rate stays
byte-identical across the whole sweep.
"""

from .analysis import KneeResult, PDCurve, PDPoint, assemble_curve, knee_point
from .bitstream import decode_image, encode_image, frozen_hash
from .codec import (
    ArchConfig,
    Codec,
    estimate_bpp,
    likelihood_conditional,
    likelihood_factorized,
    load_checkpoint,
    new_codec,
    params_hash,
    quantize,
    save_checkpoint,
)
from .harness import ExperimentConfig, ingest_dataset, load_config, run_experiment
from .metrics import (
    FeatureExtractorSpec,
    MetricReport,
    evaluate_image,
    mse,
    perceptual_distance,
    psnr,
    ssim,
)
from .training import (
    CheckpointMeta,
    FreezeMask,
    SweepConfig,
    TrainConfig,
    finetune_pd,
    freeze,
    pd_loss,
    rd_loss,
    sweep_gamma,
    train_rd,
)

__version__ = "0.1.0"
