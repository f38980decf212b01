"""Training loops, evaluation and the convergence-comparison experiment.

Determinism: every stochastic choice (batch order, condition dropout,
dead-code reseeding) is drawn from a stateless stream keyed by
(seed, purpose, step/epoch), so a run resumed from a checkpoint continues
bit-identically to an uninterrupted one.  Checkpoints carry parameters,
optimizer moments and the in-epoch codebook usage counters.

When both alignment weights are zero (or the teacher is "none") the
alignment modules are never constructed, which makes such runs
bit-identical to runs of a model without those modules.
"""

from __future__ import annotations

import zlib
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .alignment import FileTeacher, ProjectionHead, RandomTeacher, align_loss
from .argen import (
    ARModel,
    build_class_batch,
    build_prediction_batch,
    load_token_sequences,
    save_token_sequences,
    stack_batches,
)
from .autodiff import ContractError, NumericError, backward
from .checkpoint import load_checkpoint, save_checkpoint
from .config import RunConfig, TeacherSpec
from .metrics import MetricsWriter, codebook_perplexity, codebook_usage, psnr, read_metrics
from .objective import recon_l1, total_loss, vq_objective
from .optim import Adam
from .sacp import sacp_reformulate
from .tokenizer import TokenizerConfig, TokenizerModel, patchify_frame, patchify_video
from .video import VideoClip, list_dataset, load_clip

TOKENIZER_HEADER = [
    "step", "loss_total", "loss_rec", "loss_vq", "loss_align_a", "loss_align_m",
    "sacp_s", "sacp_conflict", "grad_norm_align_a", "grad_norm_align_m",
    "codebook_usage", "codebook_perplexity", "psnr",
]

AR_HEADER = ["step", "loss", "lr"]


def _stream_rng(seed: int, purpose: str, index: int) -> np.random.Generator:
    return np.random.default_rng([seed & 0x7FFFFFFF, zlib.crc32(purpose.encode()), index])


def make_teacher(spec: TeacherSpec, cfg: TokenizerConfig):
    if spec.kind == "random":
        return RandomTeacher(spec.seed, spec.feature_dim, cfg)
    if spec.kind == "files":
        return FileTeacher(spec.directory, cfg)
    return None


def load_clips(config: RunConfig) -> list[VideoClip]:
    return [load_clip(p) for p in list_dataset(config.data_dir)]


@dataclass
class TrainResult:
    checkpoint_path: Path
    metrics_path: Path
    final_step: int
    final_breakdown: dict


class TokenizerTrainer:
    def __init__(self, config: RunConfig, out_dir=None,
                 clips: list[VideoClip] | None = None, resume_from=None):
        self.config = config
        self.out_dir = Path(out_dir if out_dir is not None else config.out_dir)
        self.out_dir.mkdir(parents=True, exist_ok=True)

        self.clips = clips if clips is not None else load_clips(config)
        if not self.clips:
            raise ContractError("empty dataset")
        cfg = config.tokenizer
        self.pixels = np.stack([c.pixels for c in self.clips]).astype(np.float32)
        self.frame_rows = np.stack(
            [patchify_frame(c.pixels, cfg.patch) for c in self.clips]).astype(np.float32)
        self.clip_rows = np.stack(
            [patchify_video(c.pixels, cfg.t_patch, cfg.patch)
             for c in self.clips]).astype(np.float32)

        self.model = TokenizerModel(cfg, seed=config.seed)
        w = config.weights
        self.alignment_active = (
            config.teacher.kind != "none"
            and (w.align_appearance > 0 or w.align_motion > 0))
        self.head_appearance = self.head_motion = None
        self.teacher = None
        if self.alignment_active:
            self.teacher = make_teacher(config.teacher, cfg)
            d_t = config.teacher.feature_dim
            store = self.model.store
            if w.align_appearance > 0:
                self.head_appearance = ProjectionHead(
                    store, "align.head_appearance", cfg.dim, d_t)
            if w.align_motion > 0:
                self.head_motion = ProjectionHead(
                    store, "align.head_motion", cfg.dim, d_t)
            feats = [self.teacher.features(c) for c in self.clips]
            self.image_targets = np.stack([f.image_tokens for f in feats])
            self.video_targets = np.stack([f.video_tokens for f in feats])
            if self.image_targets.shape[2] != d_t:
                raise ContractError(
                    f"teacher feature dim {self.image_targets.shape[2]} != "
                    f"configured {d_t}")

        self.optimizer = Adam(self.model.store, config.optim, config.steps)
        self.usage_counts = np.zeros(cfg.codebook_size, dtype=np.int64)
        self.start_step = 0
        self.sacp_history: list = []

        if resume_from is not None:
            self._load_resume(resume_from)

        self.eval_clips = self.clips
        if config.val_dir:
            self.eval_clips = [load_clip(p) for p in list_dataset(config.val_dir)]

        n = len(self.clips)
        self.steps_per_epoch = max(1, (n + config.batch_size - 1) // config.batch_size)

    # -- persistence ---------------------------------------------------------

    def _meta(self, step: int) -> dict:
        return {
            "kind": "tokenizer",
            "config": self.config.to_dict(),
            "state": {"step": step},
        }

    def _tensors(self) -> dict:
        tensors = dict(self.model.store.state_arrays())
        tensors.update(self.optimizer.state_arrays())
        tensors["state.usage_counts"] = self.usage_counts.astype(np.float32)
        return tensors

    def save(self, path, step: int) -> Path:
        save_checkpoint(path, self._meta(step), self._tensors())
        return Path(path)

    def _load_resume(self, path) -> None:
        meta, tensors = load_checkpoint(path)
        if meta.get("kind") != "tokenizer":
            raise ContractError(f"{path} is not a tokenizer checkpoint")
        saved = RunConfig.from_dict(meta["config"])
        if saved.tokenizer != self.config.tokenizer:
            raise ContractError("checkpoint tokenizer config differs from run config")
        if saved.seed != self.config.seed:
            raise ContractError("checkpoint seed differs from run config")
        params = {k: v for k, v in tensors.items()
                  if not k.startswith(("opt.", "state."))}
        self.model.store.load_state_arrays(params)
        self.optimizer.load_state_arrays(tensors)
        self.usage_counts = tensors["state.usage_counts"].astype(np.int64)
        self.start_step = int(meta["state"]["step"])

    # -- data order ------------------------------------------------------------

    def _batch_indices(self, step: int) -> np.ndarray:
        n = len(self.clips)
        b = self.config.batch_size
        epoch = step // self.steps_per_epoch
        pos = step % self.steps_per_epoch
        perm = _stream_rng(self.config.seed, "batch-order", epoch).permutation(n)
        return perm[pos * b:(pos + 1) * b]

    # -- one optimizer step ------------------------------------------------------

    def _step(self, step: int) -> dict:
        config = self.config
        w = config.weights
        idx = self._batch_indices(step)
        epoch = step // self.steps_per_epoch

        fwd = self.model.forward(
            self.pixels[idx],
            precomputed_rows=(self.frame_rows[idx], self.clip_rows[idx]))
        parts = {
            "recon": recon_l1(self.pixels[idx], fwd.recon),
            "vq": vq_objective(fwd.quant.pre, fwd.quant.snapped, w.commitment),
        }

        outcome = None
        raw_align_a = raw_align_m = None
        if self.alignment_active:
            motion_stage = epoch >= config.align_motion_start_epoch
            if self.head_appearance is not None:
                raw_align_a = align_loss(fwd.encoded.feat_appearance,
                                         self.image_targets[idx], self.head_appearance)
                parts["align_a"] = raw_align_a
            if self.head_motion is not None and motion_stage:
                raw_align_m = align_loss(fwd.encoded.feat_motion,
                                         self.video_targets[idx], self.head_motion)
                parts["align_m"] = raw_align_m
            if (config.sacp_enabled and raw_align_a is not None
                    and raw_align_m is not None):
                re_a, re_m, outcome = sacp_reformulate(
                    raw_align_a, raw_align_m, self.model.encoder_params())
                parts["align_re_a"] = re_a
                parts["align_re_m"] = re_m
                self.sacp_history.append(outcome)

        total, breakdown = total_loss(parts, w, config.sacp_enabled)
        if not np.isfinite(total.data):
            raise NumericError(f"non-finite loss at step {step + 1}")

        grads = backward(total, self.model.store)
        self.optimizer.step(grads, step)

        self.usage_counts += np.bincount(
            fwd.quant.indices.reshape(-1), minlength=config.tokenizer.codebook_size)

        interval = config.dead_code_interval
        if interval > 0 and (step + 1) % interval == 0:
            pool = fwd.quant.pre.data.reshape(-1, config.tokenizer.code_dim)
            self.model.quantizer.reinit_dead(
                self.usage_counts, pool,
                _stream_rng(config.seed, "dead-code", step))
            usage_snapshot = self.usage_counts.copy()
            self.usage_counts[:] = 0
        else:
            usage_snapshot = self.usage_counts

        row = {
            "step": step + 1,
            "loss_total": float(total.data),
            "loss_rec": breakdown["recon"][1],
            "loss_vq": breakdown["vq"][1],
            "loss_align_a": None if raw_align_a is None else float(raw_align_a.data),
            "loss_align_m": None if raw_align_m is None else float(raw_align_m.data),
            "sacp_s": None if outcome is None else outcome.inner,
            "sacp_conflict": None if outcome is None else int(outcome.conflicted),
            "grad_norm_align_a": None if outcome is None else outcome.norm_a,
            "grad_norm_align_m": None if outcome is None else outcome.norm_m,
            "codebook_usage": codebook_usage(usage_snapshot),
            "codebook_perplexity": codebook_perplexity(usage_snapshot),
        }
        return row

    def evaluate_psnr(self) -> float:
        values = []
        for clip in self.eval_clips:
            recon = self.model.reconstruct(clip)
            values.append(psnr(clip.pixels, recon.pixels))
        return float(np.mean(values))

    def run(self) -> TrainResult:
        config = self.config
        metrics_path = self.out_dir / "metrics.csv"
        ckpt_path = self.out_dir / "checkpoint.dckp"
        last_row: dict = {}
        with MetricsWriter(metrics_path, TOKENIZER_HEADER) as writer:
            for step in range(self.start_step, config.steps):
                try:
                    row = self._step(step)
                except NumericError:
                    # parameters still hold the last completed update
                    self.save(self.out_dir / "last_good.dckp", step)
                    raise
                is_last = step + 1 == config.steps
                if (step + 1) % config.eval_interval == 0 or is_last:
                    row["psnr"] = self.evaluate_psnr()
                if (step + 1) % config.log_interval == 0 or is_last:
                    writer.row(row)
                    last_row = row
        self.save(ckpt_path, config.steps)
        return TrainResult(ckpt_path, metrics_path, config.steps, last_row)


def train_tokenizer(config: RunConfig, out_dir=None, clips=None,
                    resume_from=None) -> TrainResult:
    return TokenizerTrainer(config, out_dir=out_dir, clips=clips,
                            resume_from=resume_from).run()


# ---------------------------------------------------------------------------
# Tokenizer loading / evaluation
# ---------------------------------------------------------------------------


def load_tokenizer(ckpt_path) -> tuple[TokenizerModel, RunConfig]:
    meta, tensors = load_checkpoint(ckpt_path)
    if meta.get("kind") != "tokenizer":
        raise ContractError(f"{ckpt_path} is not a tokenizer checkpoint")
    config = RunConfig.from_dict(meta["config"])
    model = TokenizerModel(config.tokenizer, seed=config.seed)
    params = {}
    for key, value in tensors.items():
        if key.startswith(("opt.", "state.")):
            continue
        if key.startswith("align."):
            continue  # projection heads are train-time only
        params[key] = value
    model.store.load_state_arrays(params)
    return model, config


@dataclass
class EvalReport:
    psnr_per_clip: list[float]
    mean_psnr: float
    usage: float
    perplexity: float


def evaluate(model: TokenizerModel, clips: list[VideoClip]) -> EvalReport:
    if not clips:
        raise ContractError("empty dataset")
    counts = np.zeros(model.cfg.codebook_size, dtype=np.int64)
    values = []
    for clip in clips:
        seq = model.tokenize(clip)
        counts += np.bincount(seq.indices, minlength=model.cfg.codebook_size)
        recon = model.detokenize(seq)
        values.append(psnr(clip.pixels, recon.pixels))
    return EvalReport(values, float(np.mean(values)),
                      codebook_usage(counts), codebook_perplexity(counts))


def frame_prediction_context(clip: VideoClip, model: TokenizerModel) -> np.ndarray:
    """Tokens of the first half of a clip, frames duplicated to full length.

    The 1D tokens are not frame-aligned, so partial clips are represented
    by tokenizing a frame-duplicated stand-in of the observed prefix.
    """
    T = clip.pixels.shape[0]
    half = clip.pixels[:T // 2]
    duplicated = np.repeat(half, 2, axis=0)[:T]
    return model.tokenize(VideoClip(duplicated)).indices


# ---------------------------------------------------------------------------
# AR training
# ---------------------------------------------------------------------------


class ARTrainer:
    def __init__(self, config: RunConfig, out_dir=None, tokenizer_ckpt=None,
                 tokens: np.ndarray | None = None,
                 labels: np.ndarray | None = None,
                 contexts: np.ndarray | None = None,
                 resume_from=None):
        self.config = config
        self.out_dir = Path(out_dir if out_dir is not None else config.out_dir)
        self.out_dir.mkdir(parents=True, exist_ok=True)
        ar = config.ar

        if tokens is None:
            tokens, labels, contexts = self._prepare_tokens(tokenizer_ckpt)
        self.tokens = np.asarray(tokens, dtype=np.int64)
        if self.tokens.ndim != 2 or self.tokens.shape[1] != ar.seq_len:
            raise ContractError(
                f"token table shape {self.tokens.shape} incompatible with "
                f"seq_len {ar.seq_len}")
        if self.tokens.max() >= ar.codebook_size:
            raise ContractError("token id outside the generation vocabulary")
        self.labels = (np.zeros(len(self.tokens), np.int64)
                       if labels is None else np.asarray(labels, dtype=np.int64))
        self.contexts = None if contexts is None else np.asarray(contexts, dtype=np.int64)
        if ar.mode == "prediction" and self.contexts is None:
            raise ContractError("prediction mode needs context sequences")

        self.model = ARModel(ar, seed=config.seed)
        self.optimizer = Adam(self.model.store, config.optim, config.steps)
        self.start_step = 0
        if resume_from is not None:
            self._load_resume(resume_from)
        n = len(self.tokens)
        self.steps_per_epoch = max(1, (n + config.batch_size - 1) // config.batch_size)

    def _prepare_tokens(self, tokenizer_ckpt):
        """Pre-tokenize the dataset once; reuse the cached file on reruns."""
        config = self.config
        cache = (Path(config.tokens_file) if config.tokens_file
                 else self.out_dir / "tokens.toks")
        contexts_cache = cache.with_suffix(".contexts.toks")
        if cache.exists():
            tokens, labels = load_token_sequences(cache)
            contexts = None
            if contexts_cache.exists():
                contexts, _ = load_token_sequences(contexts_cache)
            return tokens, labels, contexts
        if tokenizer_ckpt is None:
            raise ContractError("no cached tokens and no tokenizer checkpoint given")
        model, tok_config = load_tokenizer(tokenizer_ckpt)
        ar = config.ar
        if tok_config.tokenizer.codebook_size != ar.codebook_size:
            raise ContractError(
                f"tokenizer codebook {tok_config.tokenizer.codebook_size} != "
                f"generation vocab base {ar.codebook_size}")
        if tok_config.tokenizer.seq_len != ar.seq_len:
            raise ContractError(
                f"tokenizer sequence length {tok_config.tokenizer.seq_len} != "
                f"generation seq_len {ar.seq_len}")
        clips = load_clips(config)
        tokens = np.stack([model.tokenize(c).indices for c in clips])
        labels = np.array([c.class_label or 0 for c in clips], dtype=np.int64)
        save_token_sequences(cache, tokens, labels)
        contexts = None
        if ar.mode == "prediction":
            contexts = np.stack([frame_prediction_context(c, model) for c in clips])
            save_token_sequences(contexts_cache, contexts)
        return tokens, labels, contexts

    def _meta(self, step: int) -> dict:
        return {"kind": "ar", "config": self.config.to_dict(),
                "state": {"step": step}}

    def save(self, path, step: int) -> Path:
        tensors = dict(self.model.store.state_arrays())
        tensors.update(self.optimizer.state_arrays())
        save_checkpoint(path, self._meta(step), tensors)
        return Path(path)

    def _load_resume(self, path) -> None:
        meta, tensors = load_checkpoint(path)
        if meta.get("kind") != "ar":
            raise ContractError(f"{path} is not a generation checkpoint")
        saved = RunConfig.from_dict(meta["config"])
        if saved.ar != self.config.ar or saved.seed != self.config.seed:
            raise ContractError("checkpoint generation config differs from run config")
        params = {k: v for k, v in tensors.items() if not k.startswith("opt.")}
        self.model.store.load_state_arrays(params)
        self.optimizer.load_state_arrays(tensors)
        self.start_step = int(meta["state"]["step"])

    def _batch(self, step: int):
        config = self.config
        ar = config.ar
        n = len(self.tokens)
        b = config.batch_size
        epoch = step // self.steps_per_epoch
        pos = step % self.steps_per_epoch
        perm = _stream_rng(config.seed, "batch-order", epoch).permutation(n)
        idx = perm[pos * b:(pos + 1) * b]
        if ar.cond_dropout > 0:
            draws = _stream_rng(config.seed, "cond-dropout", step).random(len(idx))
            uncond = draws < ar.cond_dropout
        else:
            uncond = np.zeros(len(idx), dtype=bool)
        if ar.mode == "class":
            return build_class_batch(ar, self.tokens[idx], self.labels[idx], uncond)
        batches = [
            build_prediction_batch(ar, self.contexts[i], self.tokens[i], uncond=u)
            for i, u in zip(idx, uncond)
        ]
        return stack_batches(batches)

    def run(self) -> TrainResult:
        config = self.config
        metrics_path = self.out_dir / "metrics.csv"
        ckpt_path = self.out_dir / "ar_checkpoint.dckp"
        last_row: dict = {}
        with MetricsWriter(metrics_path, AR_HEADER) as writer:
            for step in range(self.start_step, config.steps):
                batch = self._batch(step)
                loss = self.model.loss(batch)
                if not np.isfinite(loss.data):
                    self.save(self.out_dir / "last_good.dckp", step)
                    raise NumericError(f"non-finite loss at step {step + 1}")
                grads = backward(loss, self.model.store)
                lr = self.optimizer.step(grads, step)
                if (step + 1) % config.log_interval == 0 or step + 1 == config.steps:
                    last_row = {"step": step + 1, "loss": float(loss.data), "lr": lr}
                    writer.row(last_row)
        self.save(ckpt_path, config.steps)
        return TrainResult(ckpt_path, metrics_path, config.steps, last_row)


def train_ar(config: RunConfig, out_dir=None, tokenizer_ckpt=None,
             tokens=None, labels=None, contexts=None, resume_from=None) -> TrainResult:
    return ARTrainer(config, out_dir=out_dir, tokenizer_ckpt=tokenizer_ckpt,
                     tokens=tokens, labels=labels, contexts=contexts,
                     resume_from=resume_from).run()


def load_ar_model(ckpt_path) -> tuple[ARModel, RunConfig]:
    meta, tensors = load_checkpoint(ckpt_path)
    if meta.get("kind") != "ar":
        raise ContractError(f"{ckpt_path} is not a generation checkpoint")
    config = RunConfig.from_dict(meta["config"])
    model = ARModel(config.ar, seed=config.seed)
    params = {k: v for k, v in tensors.items() if not k.startswith("opt.")}
    model.store.load_state_arrays(params)
    return model, config


# ---------------------------------------------------------------------------
# Convergence comparison (alignment on vs off)
# ---------------------------------------------------------------------------


def compare_convergence(config: RunConfig, out_dir, clips=None) -> Path:
    """Train twice with the same seed/data (alignment on, then off) and
    write both reconstruction-loss curves to one paired CSV."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    aligned_cfg = config
    baseline_cfg = replace(
        config,
        weights=replace(config.weights, align_appearance=0.0, align_motion=0.0))
    aligned = train_tokenizer(aligned_cfg, out_dir=out_dir / "aligned", clips=clips)
    baseline = train_tokenizer(baseline_cfg, out_dir=out_dir / "baseline", clips=clips)
    rows_a = read_metrics(aligned.metrics_path)
    rows_b = read_metrics(baseline.metrics_path)
    paired_path = out_dir / "convergence_comparison.csv"
    with MetricsWriter(paired_path, ["step", "recon_aligned", "recon_baseline"]) as w:
        for ra, rb in zip(rows_a, rows_b):
            w.row({"step": int(ra["step"]), "recon_aligned": ra["loss_rec"],
                   "recon_baseline": rb["loss_rec"]})
    return paired_path


def smoothed_recon(metrics_path, window: int = 10, at_start: bool = False) -> float:
    """Mean reconstruction loss over the first/last `window` logged rows."""
    rows = [r for r in read_metrics(metrics_path) if r.get("loss_rec") is not None]
    if not rows:
        raise ContractError(f"no reconstruction rows in {metrics_path}")
    chunk = rows[:window] if at_start else rows[-window:]
    return float(np.mean([r["loss_rec"] for r in chunk]))
