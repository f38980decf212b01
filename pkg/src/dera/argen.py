"""Decoder-only autoregressive model over discrete token sequences.

Vocabulary layout: code ids [0, K), then one class-prompt id per class,
then a separator id (frame prediction) and an unconditional id
(classifier-free guidance).  Class-conditional sequences are
[CLS_c, y_1..y_L]; prediction sequences are [context, SEP, target].
Targets are the inputs shifted left by one; positions whose target is not
a generation token are masked out of the loss.

Sampling runs the conditional and unconditional prefixes as a batch of
two, interpolates logits with the guidance scale, filters to top-k,
masks special ids and draws with a seeded generator (temperature 0 is
argmax).  DERATOKS container for sequences: magic "DERATOKS", u32
version=1, u32 n_seqs, u32 seq_len, u8 has_labels, u8 reserved x3,
u32 LE indices row-major, then n_seqs u32 LE labels when flagged.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .autodiff import (
    ContractError,
    ParamStore,
    Tensor,
    add,
    constant,
    cross_entropy_with_logits,
    div,
    embedding,
    mul,
    reduce_sum,
    reshape,
    take_slice,
)
from .nn import Linear, LayerNorm, TransformerStack

TOKS_MAGIC = b"DERATOKS"
TOKS_VERSION = 1


class SamplingError(RuntimeError):
    """The filtered distribution left no admissible code token."""


@dataclass
class ARConfig:
    codebook_size: int = 256
    n_classes: int = 4
    seq_len: int = 64
    mode: str = "class"            # class | prediction
    n_layers: int = 4
    n_heads: int = 4
    dim: int = 128
    cfg_scale: float = 1.2
    temperature: float = 1.0
    top_k: int = 0                 # 0 -> no filtering
    cond_dropout: float = 0.1

    def __post_init__(self):
        self.validate()

    def validate(self) -> "ARConfig":
        if self.mode not in ("class", "prediction"):
            raise ContractError(f"unknown mode {self.mode!r}")
        if self.codebook_size < 1 or self.seq_len < 1 or self.n_classes < 1:
            raise ContractError("codebook_size, seq_len, n_classes must be >= 1")
        if not 0.0 <= self.cond_dropout <= 1.0:
            raise ContractError("cond_dropout must be in [0, 1]")
        return self

    @property
    def n_special(self) -> int:
        return self.n_classes + 2

    @property
    def vocab(self) -> int:
        return self.codebook_size + self.n_special

    @property
    def sep_id(self) -> int:
        return self.codebook_size + self.n_classes

    @property
    def uncond_id(self) -> int:
        return self.codebook_size + self.n_classes + 1

    def cls_id(self, class_index: int) -> int:
        if not 0 <= class_index < self.n_classes:
            raise ContractError(f"class {class_index} outside [0, {self.n_classes})")
        return self.codebook_size + class_index

    @property
    def context_len(self) -> int:
        if self.mode == "class":
            return self.seq_len + 1
        return 2 * self.seq_len + 1


@dataclass
class GenBatch:
    inputs: np.ndarray        # (B, S) int
    targets: np.ndarray       # (B, S) int, shifted left; last column padded
    mask: np.ndarray          # (B, S) float, 1 where the target counts
    conditions: np.ndarray    # (B,) class ids or -1


def build_class_batch(cfg: ARConfig, sequences: np.ndarray, classes: np.ndarray,
                      uncond: np.ndarray | None = None) -> GenBatch:
    """[CLS_c | UNCOND] + tokens; every next-token position carries loss."""
    sequences = np.asarray(sequences, dtype=np.int64)
    classes = np.asarray(classes, dtype=np.int64)
    B, L = sequences.shape
    if L != cfg.seq_len:
        raise ContractError(f"sequence length {L} != configured {cfg.seq_len}")
    if sequences.max() >= cfg.codebook_size or sequences.min() < 0:
        raise ContractError("token id outside codebook range")
    prompts = cfg.codebook_size + classes
    if uncond is not None:
        prompts = np.where(uncond, cfg.uncond_id, prompts)
    full = np.concatenate([prompts[:, None], sequences], axis=1)       # (B, L+1)
    inputs = full
    targets = np.concatenate([full[:, 1:], np.zeros((B, 1), np.int64)], axis=1)
    mask = np.ones((B, L + 1), dtype=np.float32)
    mask[:, -1] = 0.0
    return GenBatch(inputs, targets, mask, classes)


def build_prediction_batch(cfg: ARConfig, context_seq: np.ndarray,
                           target_seq: np.ndarray,
                           uncond: bool = False) -> GenBatch:
    """context + SEP + target; loss masked on context and SEP positions."""
    context_seq = np.asarray(context_seq, dtype=np.int64)
    target_seq = np.asarray(target_seq, dtype=np.int64)
    n = context_seq.size + 1 + target_seq.size
    if n > cfg.context_len:
        raise ContractError(f"sequence length {n} exceeds context {cfg.context_len}")
    ctx = np.full(context_seq.size, cfg.uncond_id, np.int64) if uncond else context_seq
    full = np.concatenate([ctx, [cfg.sep_id], target_seq])
    inputs = full[None]
    targets = np.concatenate([full[1:], [0]])[None]
    mask = np.zeros((1, n), dtype=np.float32)
    mask[0, context_seq.size:n - 1] = 1.0   # positions predicting target tokens
    return GenBatch(inputs, targets, mask, np.array([-1]))


def stack_batches(batches: list[GenBatch]) -> GenBatch:
    return GenBatch(
        np.concatenate([b.inputs for b in batches]),
        np.concatenate([b.targets for b in batches]),
        np.concatenate([b.mask for b in batches]),
        np.concatenate([b.conditions for b in batches]),
    )


class ARModel:
    def __init__(self, cfg: ARConfig, seed: int = 0, store: ParamStore | None = None):
        cfg.validate()
        self.cfg = cfg
        self.store = store if store is not None else ParamStore(seed)
        s = self.store
        self.token_embed = s.create("ar.token_embed", (cfg.vocab, cfg.dim))
        self.pos = s.create("ar.pos", (cfg.context_len, cfg.dim))
        self.stack = TransformerStack(s, "ar.stack", cfg.dim, cfg.n_layers, cfg.n_heads)
        self.ln_out = LayerNorm(s, "ar.ln_out", cfg.dim)
        self.head = Linear(s, "ar.head", cfg.dim, cfg.vocab)

    def all_params(self) -> dict:
        return self.store.as_dict()

    def forward(self, ids: np.ndarray) -> Tensor:
        """Causal logits over the vocabulary, shape (B, S, vocab)."""
        ids = np.asarray(ids, dtype=np.int64)
        if ids.ndim == 1:
            ids = ids[None]
        if ids.max() >= self.cfg.vocab or ids.min() < 0:
            raise ContractError(f"id outside vocab of {self.cfg.vocab}")
        B, S = ids.shape
        if S > self.cfg.context_len:
            raise ContractError(f"sequence length {S} exceeds context {self.cfg.context_len}")
        x = embedding(self.token_embed.value, ids)
        pos = take_slice(self.pos.value, (slice(0, S),))
        x = add(x, pos)
        x, _ = self.stack(x, causal=True)
        return self.head(self.ln_out(x))

    def loss(self, batch: GenBatch) -> Tensor:
        """Mean next-token cross entropy over unmasked positions."""
        total_weight = float(batch.mask.sum())
        if total_weight <= 0:
            raise ContractError("all positions masked")
        logits = self.forward(batch.inputs)
        B, S, V = logits.shape
        flat = reshape(logits, (B * S, V))
        nll = cross_entropy_with_logits(flat, batch.targets.reshape(-1))
        weighted = mul(nll, constant(batch.mask.reshape(-1).astype(logits.data.dtype)))
        return div(reduce_sum(weighted),
                   constant(np.asarray(total_weight, dtype=logits.data.dtype)))


def cfg_combine(logits_cond: np.ndarray, logits_uncond: np.ndarray,
                scale: float) -> np.ndarray:
    """Guided logits: uncond + scale * (cond - uncond)."""
    logits_cond = np.asarray(logits_cond)
    logits_uncond = np.asarray(logits_uncond)
    if logits_cond.shape != logits_uncond.shape:
        raise ContractError(
            f"logit shapes differ: {logits_cond.shape} vs {logits_uncond.shape}")
    return logits_uncond + scale * (logits_cond - logits_uncond)


def _top_k_filter(logits: np.ndarray, k: int) -> np.ndarray:
    if k <= 0 or k >= logits.size:
        return logits
    order = np.argsort(-logits, kind="stable")
    filtered = np.full_like(logits, -np.inf)
    filtered[order[:k]] = logits[order[:k]]
    return filtered


def sample(model: ARModel, condition, seed: int, cfg_scale: float | None = None,
           temperature: float | None = None, top_k: int | None = None) -> np.ndarray:
    """Draw one code-token sequence of length cfg.seq_len.

    `condition` is a class index (class mode) or a 1D context token array
    (prediction mode).  Fully determined by (params, condition, settings,
    seed); temperature 0 ignores the seed and takes the argmax.
    """
    cfg = model.cfg
    scale = cfg.cfg_scale if cfg_scale is None else cfg_scale
    temp = cfg.temperature if temperature is None else temperature
    k = cfg.top_k if top_k is None else top_k

    if cfg.mode == "class":
        cond_prefix = [cfg.cls_id(int(condition))]
        uncond_prefix = [cfg.uncond_id]
    else:
        context = np.asarray(condition, dtype=np.int64)
        if context.ndim != 1:
            raise ContractError("prediction-mode condition must be a 1D token array")
        cond_prefix = list(context) + [cfg.sep_id]
        uncond_prefix = [cfg.uncond_id] * context.size + [cfg.sep_id]

    rng = np.random.default_rng([int(seed) & 0x7FFFFFFF, len(cond_prefix)])
    cond_ids = list(cond_prefix)
    uncond_ids = list(uncond_prefix)
    out: list[int] = []
    for _ in range(cfg.seq_len):
        ids = np.stack([np.asarray(cond_ids), np.asarray(uncond_ids)])
        logits = model.forward(ids).data[:, -1, :]
        mixed = cfg_combine(logits[0], logits[1], scale)
        mixed = _top_k_filter(mixed, k)
        mixed[cfg.codebook_size:] = -np.inf   # never emit special ids
        if not np.isfinite(mixed).any():
            raise SamplingError("no code token has mass after filtering")
        if temp <= 0:
            token = int(np.argmax(mixed))
        else:
            z = mixed / temp
            z = z - z.max()
            probs = np.exp(z)
            probs[~np.isfinite(z)] = 0.0
            total = probs.sum()
            if total <= 0:
                raise SamplingError("no code token has mass after filtering")
            probs /= total
            token = int(rng.choice(len(probs), p=probs))
        out.append(token)
        cond_ids.append(token)
        uncond_ids.append(token)
    return np.asarray(out, dtype=np.int64)


# ---------------------------------------------------------------------------
# DERATOKS I/O
# ---------------------------------------------------------------------------


def save_token_sequences(path, sequences: np.ndarray,
                         labels: np.ndarray | None = None) -> None:
    sequences = np.asarray(sequences, dtype="<u4")
    if sequences.ndim == 1:
        sequences = sequences[None]
    n, L = sequences.shape
    has_labels = labels is not None
    with open(path, "wb") as fh:
        fh.write(TOKS_MAGIC)
        fh.write(struct.pack("<IIIBBBB", TOKS_VERSION, n, L, int(has_labels), 0, 0, 0))
        fh.write(sequences.tobytes())
        if has_labels:
            fh.write(np.asarray(labels, dtype="<u4").tobytes())


def load_token_sequences(path) -> tuple[np.ndarray, np.ndarray | None]:
    raw = Path(path).read_bytes()
    if raw[:8] != TOKS_MAGIC:
        raise ContractError(f"{path}: bad DERATOKS magic")
    version, n, L, has_labels, _, _, _ = struct.unpack("<IIIBBBB", raw[8:24])
    if version != TOKS_VERSION:
        raise ContractError(f"{path}: unsupported version {version}")
    end = 24 + n * L * 4
    if len(raw) < end:
        raise ContractError(f"{path}: truncated payload")
    seqs = np.frombuffer(raw[24:end], dtype="<u4").reshape(n, L).astype(np.int64)
    labels = None
    if has_labels:
        labels = np.frombuffer(raw[end:end + 4 * n], dtype="<u4").astype(np.int64)
    return seqs, labels
