"""Hybrid spatial/spectral architecture search with an attention-augmented
compact network, for pixel-to-pixel hyperspectral image classification."""

__version__ = "0.1.0"

from .tensor import (
    Parameter,
    Tensor,
    backward,
    concat,
    grad_check,
    leaky_relu,
    log_softmax,
    matmul,
    no_grad,
    precision,
    set_default_dtype,
    softmax,
)
from .optim import SGD, Adam, cosine_lr, poly_lr
from .config import RunConfig, apply_preset, load_config
from .data import HSICube, SynthSpec, load_cube, normalize, save_cube, synth_generate
from .genotype import Genotype, build_compact, derive_genotype, genotype_stats
from .pipeline import (
    compute_metrics,
    infer_overlap,
    masked_cross_entropy,
    sample_split,
    train_compact,
)
from .supernet import build_supernet, search

__all__ = [
    "Adam", "Genotype", "HSICube", "Parameter", "RunConfig", "SGD",
    "SynthSpec", "Tensor", "apply_preset", "backward", "build_compact",
    "build_supernet", "compute_metrics", "concat", "cosine_lr",
    "derive_genotype", "genotype_stats", "grad_check", "infer_overlap",
    "leaky_relu", "load_config", "load_cube", "log_softmax",
    "masked_cross_entropy", "matmul", "no_grad", "normalize", "poly_lr",
    "precision", "sample_split", "save_cube", "search", "set_default_dtype",
    "softmax", "synth_generate", "train_compact",
]
