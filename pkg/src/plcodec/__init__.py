"""Learned image compression with per-image latent refinement.

The package splits into transform/entropy modeling (model, transforms,
entropy), losses and rate targeting (losses, adversarial), per-image
latent optimization (refinement), lossless transport (rangecoder, codec,
rans_backend), training loops (training), and evaluation (metrics, data).
"""

from .adversarial import (
    Discriminator,
    adversarial_loss,
    discriminator_loss,
    fit_codebook,
    nearest_code,
    semantic_labels,
)
from .codec import (
    CompressedObject,
    CompressReport,
    ConfigMismatchError,
    RefineOptions,
    UnknownCoderError,
    compress,
    compress_with_report,
    decompress,
    get_coder,
    read_plc,
    register_coder,
    unpack_latents,
    write_plc,
)
from .data import (
    extract_patches,
    list_images,
    load_image,
    make_synthetic_images,
    save_image,
    synthetic_image,
)
from .entropy import (
    FactorizedDensity,
    GaussianParams,
    GroupedEntropyModel,
    GroupSpec,
    NonFiniteError,
    dequantize,
    gaussian_cdf_rows,
    hyper_cdf_rows,
    merge_groups,
    quantize_symbols,
    rate_noised,
    rate_quantized,
    split_groups,
)
from .losses import (
    ConvPyramidExtractor,
    DistortionWeights,
    FeatureExtractor,
    IdentityExtractor,
    RateTargetConfig,
    charbonnier,
    ensemble_distortion,
    lambda_select,
    perceptual_loss,
    rd_loss,
    style_loss,
    try_vgg_extractor,
)
from .metrics import EvalReport, RdCurve, bd_rate, bpp, evaluate_dataset, psnr
from .model import CodecModel, hard_forward, load_checkpoint, save_checkpoint, tensors_digest
from .rangecoder import (
    CdfTable,
    CorruptPayloadError,
    InvalidTableError,
    OutOfAlphabetError,
    decode_indexed,
    decode_symbols,
    encode_indexed,
    encode_symbols,
)
from .rans_backend import BackendUnavailableError, RansBackend, find_rans_cli, load_rans_backend
from .refinement import (
    AnnealSchedule,
    RoiConfig,
    load_roi_mask,
    refine_latents,
    sga_round,
    write_trace_csv,
)
from .training import (
    TrainConfig,
    TrainResult,
    load_train_config,
    save_train_config,
    train_stage1,
    train_stage2,
)
from .transforms import TransformConfig, crop_to_size, pad_to_multiple

__version__ = "0.1.0"

__all__ = [
    "AnnealSchedule",
    "BackendUnavailableError",
    "CdfTable",
    "CodecModel",
    "CompressReport",
    "CompressedObject",
    "ConfigMismatchError",
    "ConvPyramidExtractor",
    "CorruptPayloadError",
    "Discriminator",
    "DistortionWeights",
    "EvalReport",
    "FactorizedDensity",
    "FeatureExtractor",
    "GaussianParams",
    "GroupSpec",
    "GroupedEntropyModel",
    "IdentityExtractor",
    "InvalidTableError",
    "NonFiniteError",
    "OutOfAlphabetError",
    "RansBackend",
    "RateTargetConfig",
    "RdCurve",
    "RefineOptions",
    "RoiConfig",
    "TrainConfig",
    "TrainResult",
    "TransformConfig",
    "UnknownCoderError",
    "adversarial_loss",
    "bd_rate",
    "bpp",
    "charbonnier",
    "compress",
    "compress_with_report",
    "crop_to_size",
    "decode_indexed",
    "decode_symbols",
    "decompress",
    "dequantize",
    "discriminator_loss",
    "encode_indexed",
    "encode_symbols",
    "ensemble_distortion",
    "evaluate_dataset",
    "extract_patches",
    "find_rans_cli",
    "fit_codebook",
    "gaussian_cdf_rows",
    "get_coder",
    "hard_forward",
    "hyper_cdf_rows",
    "lambda_select",
    "list_images",
    "load_checkpoint",
    "load_image",
    "load_rans_backend",
    "load_roi_mask",
    "load_train_config",
    "make_synthetic_images",
    "merge_groups",
    "nearest_code",
    "pad_to_multiple",
    "perceptual_loss",
    "psnr",
    "quantize_symbols",
    "rate_noised",
    "rate_quantized",
    "rd_loss",
    "read_plc",
    "refine_latents",
    "register_coder",
    "save_checkpoint",
    "save_image",
    "save_train_config",
    "semantic_labels",
    "sga_round",
    "split_groups",
    "style_loss",
    "synthetic_image",
    "tensors_digest",
    "train_stage1",
    "train_stage2",
    "try_vgg_extractor",
    "unpack_latents",
    "write_plc",
    "write_trace_csv",
]
