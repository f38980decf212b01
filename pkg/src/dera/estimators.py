"""Scikit-learn style estimators wrapping the tokenizer and generator.

`VideoTokenizer` is a transformer: fit on clips, transform clips to token
index arrays, inverse_transform indices back to pixel volumes.
`TokenGenerator` fits the autoregressive model on token sequences and
samples new ones.  Both expose get_params/set_params through
sklearn.base.BaseEstimator so they compose with pipelines and search.
"""

from __future__ import annotations

import tempfile
from dataclasses import replace
from pathlib import Path

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.exceptions import NotFittedError

from .argen import ARConfig, sample
from .config import OptimConfig, RunConfig, TeacherSpec
from .objective import LossWeights
from .tokenizer import TokenizerConfig, TokenSequence
from .train import ARTrainer, TokenizerTrainer, evaluate
from .video import VideoClip


def _as_clips(X) -> list[VideoClip]:
    if isinstance(X, VideoClip):
        return [X]
    if isinstance(X, (list, tuple)) and X and isinstance(X[0], VideoClip):
        return list(X)
    arr = np.asarray(X, dtype=np.float32)
    if arr.ndim == 4:
        arr = arr[None]
    if arr.ndim != 5 or arr.shape[-1] != 3:
        raise ValueError(
            f"expected clips shaped (N, T, H, W, 3) or a list of VideoClip, got {arr.shape}")
    if arr.min() < -1.0 or arr.max() > 1.0:
        raise ValueError("pixel values must lie in [-1, 1]")
    return [VideoClip(a) for a in arr]


class VideoTokenizer(TransformerMixin, BaseEstimator):
    """Trainable discrete video tokenizer.

    Parameters mirror the run configuration; fitted state lives in
    trailing-underscore attributes (`model_`, `result_`).
    """

    def __init__(self, frames=8, height=32, width=32, t_patch=2, patch=8,
                 tokens_appearance=16, tokens_motion=48, dim=128, code_dim=8,
                 codebook_size=256, n_layers=4, align_depth=0,
                 align_appearance=1.0, align_motion=0.5, sacp=True,
                 teacher_seed=0, teacher_dim=32, steps=500, batch_size=4,
                 lr=1e-3, warmup_steps=100, seed=0, log_interval=10):
        self.frames = frames
        self.height = height
        self.width = width
        self.t_patch = t_patch
        self.patch = patch
        self.tokens_appearance = tokens_appearance
        self.tokens_motion = tokens_motion
        self.dim = dim
        self.code_dim = code_dim
        self.codebook_size = codebook_size
        self.n_layers = n_layers
        self.align_depth = align_depth
        self.align_appearance = align_appearance
        self.align_motion = align_motion
        self.sacp = sacp
        self.teacher_seed = teacher_seed
        self.teacher_dim = teacher_dim
        self.steps = steps
        self.batch_size = batch_size
        self.lr = lr
        self.warmup_steps = warmup_steps
        self.seed = seed
        self.log_interval = log_interval

    def _run_config(self) -> RunConfig:
        tok = TokenizerConfig(
            frames=self.frames, height=self.height, width=self.width,
            t_patch=self.t_patch, patch=self.patch,
            tokens_appearance=self.tokens_appearance,
            tokens_motion=self.tokens_motion, dim=self.dim,
            code_dim=self.code_dim, codebook_size=self.codebook_size,
            n_layers=self.n_layers, align_depth=self.align_depth)
        aligned = self.align_appearance > 0 or self.align_motion > 0
        return RunConfig(
            tokenizer=tok,
            weights=LossWeights(align_appearance=self.align_appearance,
                                align_motion=self.align_motion),
            optim=OptimConfig(lr=self.lr, warmup_steps=self.warmup_steps),
            teacher=TeacherSpec(kind="random" if aligned else "none",
                                seed=self.teacher_seed,
                                feature_dim=self.teacher_dim),
            seed=self.seed, steps=self.steps, batch_size=self.batch_size,
            sacp_enabled=self.sacp, log_interval=self.log_interval,
            eval_interval=max(self.steps, 1))

    def fit(self, X, y=None):
        clips = _as_clips(X)
        config = self._run_config()
        with tempfile.TemporaryDirectory(prefix="dera-fit-") as tmp:
            trainer = TokenizerTrainer(config, out_dir=tmp, clips=clips)
            self.result_ = trainer.run()
            self.model_ = trainer.model
        self.config_ = config
        return self

    def _check_fitted(self):
        if not hasattr(self, "model_"):
            raise NotFittedError("VideoTokenizer is not fitted; call fit first")

    def transform(self, X) -> np.ndarray:
        """Clips -> (N, seq_len) int token indices."""
        self._check_fitted()
        clips = _as_clips(X)
        return np.stack([self.model_.tokenize(c).indices for c in clips])

    def inverse_transform(self, tokens) -> np.ndarray:
        """Token indices -> (N, T, H, W, 3) pixel volumes."""
        self._check_fitted()
        tokens = np.asarray(tokens, dtype=np.int64)
        if tokens.ndim == 1:
            tokens = tokens[None]
        cfg = self.model_.cfg
        out = []
        for row in tokens:
            seq = TokenSequence(row, cfg.tokens_appearance, cfg.tokens_motion)
            out.append(self.model_.detokenize(seq).pixels)
        return np.stack(out)

    def score(self, X, y=None) -> float:
        """Mean reconstruction PSNR in dB (higher is better)."""
        self._check_fitted()
        return evaluate(self.model_, _as_clips(X)).mean_psnr


class TokenGenerator(BaseEstimator):
    """Class-conditional autoregressive sequence model over token ids."""

    def __init__(self, codebook_size=256, n_classes=4, seq_len=64, n_layers=4,
                 n_heads=4, dim=128, cfg_scale=1.2, temperature=1.0, top_k=0,
                 cond_dropout=0.1, steps=500, batch_size=16, lr=1e-3,
                 warmup_steps=50, seed=0):
        self.codebook_size = codebook_size
        self.n_classes = n_classes
        self.seq_len = seq_len
        self.n_layers = n_layers
        self.n_heads = n_heads
        self.dim = dim
        self.cfg_scale = cfg_scale
        self.temperature = temperature
        self.top_k = top_k
        self.cond_dropout = cond_dropout
        self.steps = steps
        self.batch_size = batch_size
        self.lr = lr
        self.warmup_steps = warmup_steps
        self.seed = seed

    def _run_config(self) -> RunConfig:
        ar = ARConfig(codebook_size=self.codebook_size, n_classes=self.n_classes,
                      seq_len=self.seq_len, n_layers=self.n_layers,
                      n_heads=self.n_heads, dim=self.dim, cfg_scale=self.cfg_scale,
                      temperature=self.temperature, top_k=self.top_k,
                      cond_dropout=self.cond_dropout)
        return RunConfig(ar=ar, seed=self.seed, steps=self.steps,
                         batch_size=self.batch_size,
                         optim=OptimConfig(lr=self.lr, warmup_steps=self.warmup_steps),
                         log_interval=max(1, self.steps // 20))

    def fit(self, X, y=None):
        tokens = np.asarray(X, dtype=np.int64)
        if tokens.ndim != 2:
            raise ValueError(f"expected (N, seq_len) token table, got {tokens.shape}")
        labels = (np.zeros(len(tokens), np.int64) if y is None
                  else np.asarray(y, dtype=np.int64))
        if labels.min(initial=0) < 0 or labels.max(initial=0) >= self.n_classes:
            raise ValueError(f"labels must lie in [0, {self.n_classes})")
        config = self._run_config()
        with tempfile.TemporaryDirectory(prefix="dera-arfit-") as tmp:
            trainer = ARTrainer(config, out_dir=tmp, tokens=tokens, labels=labels)
            self.result_ = trainer.run()
            self.model_ = trainer.model
        self.config_ = config
        return self

    def sample(self, class_index: int, n: int = 1, seed: int = 0, **overrides) -> np.ndarray:
        if not hasattr(self, "model_"):
            raise NotFittedError("TokenGenerator is not fitted; call fit first")
        return np.stack([
            sample(self.model_, class_index, seed=seed + i, **overrides)
            for i in range(n)
        ])
