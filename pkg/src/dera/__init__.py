"""Decoupled dual-stream 1D video tokenizer with conflict-projected
representation alignment and autoregressive token generation."""

from ._tuning import configure_allocator

configure_allocator()

from .argen import ARConfig, ARModel, SamplingError, cfg_combine, sample
from .autodiff import (
    ContractError,
    GradientVector,
    NumericError,
    ParamStore,
    Parameter,
    Tensor,
    backward,
    grad_check,
    run_catalogue,
    stop_gradient,
)
from .config import OptimConfig, RunConfig, TeacherSpec
from .estimators import TokenGenerator, VideoTokenizer
from .objective import LossWeights, recon_l1, total_loss, vq_objective
from .sacp import SacpOutcome, conflict_rate, sacp_reformulate
from .tokenizer import TokenizerConfig, TokenizerModel, TokenSequence, swap_tokens
from .train import evaluate, train_ar, train_tokenizer
from .video import SceneSpec, VideoClip, generate_clip, load_clip, make_dataset, save_clip

__version__ = "0.1.0"

__all__ = [
    "ARConfig",
    "ARModel",
    "ContractError",
    "GradientVector",
    "LossWeights",
    "NumericError",
    "OptimConfig",
    "ParamStore",
    "Parameter",
    "RunConfig",
    "SacpOutcome",
    "SamplingError",
    "SceneSpec",
    "TeacherSpec",
    "Tensor",
    "TokenGenerator",
    "TokenSequence",
    "TokenizerConfig",
    "TokenizerModel",
    "VideoClip",
    "VideoTokenizer",
    "backward",
    "cfg_combine",
    "conflict_rate",
    "evaluate",
    "generate_clip",
    "grad_check",
    "load_clip",
    "make_dataset",
    "recon_l1",
    "run_catalogue",
    "sacp_reformulate",
    "sample",
    "save_clip",
    "stop_gradient",
    "swap_tokens",
    "total_loss",
    "train_ar",
    "train_tokenizer",
    "vq_objective",
    "__version__",
]
