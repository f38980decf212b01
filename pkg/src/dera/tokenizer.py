"""Dual-stream encoder, vector quantizer and decoder.

The appearance stream encodes first-frame patches with appearance queries;
the motion stream encodes full-clip tubelets with motion queries.  Both
passes share the same transformer weights.  The final query outputs of
both streams are concatenated, projected to the code dimension, snapped to
the nearest codebook entry (straight-through gradient) and decoded back to
pixels by a second transformer driven by decoder queries.

Parameter namespaces:
    encoder.*   patch embedders, queries, positions, shared blocks
    quant.*     code projections and the codebook
    decoder.*   decoder queries, positions, blocks, pixel head
The "encoder." subset is the surface the conflict projection operates on.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field

import numpy as np

from .autodiff import (
    ContractError,
    ParamStore,
    Tensor,
    add,
    argmin_rows,
    clip_unit,
    constant,
    embedding,
    mul,
    permute,
    reduce_mean,
    reshape,
    stop_gradient,
    straight_through,
    sub,
    take_slice,
)
from .nn import Linear, LayerNorm, TransformerStack, expand_rows, sequence_concat
from .video import VideoClip


def deterministic_mode() -> bool:
    """Bit-exact kernels unless DERA_DETERMINISTIC=0."""
    return os.environ.get("DERA_DETERMINISTIC", "1") != "0"


@dataclass
class TokenizerConfig:
    frames: int = 8
    height: int = 32
    width: int = 32
    t_patch: int = 2
    patch: int = 8
    tokens_appearance: int = 16
    tokens_motion: int = 48
    dim: int = 128
    code_dim: int = 8
    codebook_size: int = 256
    n_layers: int = 4
    n_heads: int = 0          # 0 -> dim // 32
    align_depth: int = 0      # 0 -> n_layers

    def __post_init__(self):
        self.validate()

    def validate(self) -> "TokenizerConfig":
        if self.frames % self.t_patch:
            raise ContractError(f"frames {self.frames} not divisible by t_patch {self.t_patch}")
        if self.height % self.patch or self.width % self.patch:
            raise ContractError(
                f"{self.height}x{self.width} not divisible by patch {self.patch}")
        if self.tokens_appearance < 1 or self.tokens_motion < 1:
            raise ContractError("token counts must be >= 1")
        depth = self.align_depth or self.n_layers
        if not 1 <= depth <= self.n_layers:
            raise ContractError(f"align_depth {depth} outside [1, {self.n_layers}]")
        return self

    @property
    def patches_per_frame(self) -> int:
        return (self.height // self.patch) * (self.width // self.patch)

    @property
    def patches_per_clip(self) -> int:
        return (self.frames // self.t_patch) * self.patches_per_frame

    @property
    def seq_len(self) -> int:
        return self.tokens_appearance + self.tokens_motion

    @property
    def decoder_queries(self) -> int:
        return self.patches_per_clip

    @property
    def frame_patch_dim(self) -> int:
        return self.patch * self.patch * 3

    @property
    def clip_patch_dim(self) -> int:
        return self.t_patch * self.patch * self.patch * 3

    @property
    def heads(self) -> int:
        return self.n_heads or max(1, self.dim // 32)

    @property
    def tap_depth(self) -> int:
        return self.align_depth or self.n_layers


# ---------------------------------------------------------------------------
# Patchify (pure array transforms; lossless by construction)
# ---------------------------------------------------------------------------


def patchify_frame(pixels: np.ndarray, p: int) -> np.ndarray:
    """First frame -> (patches_per_frame, p*p*3) raster-order rows."""
    frame = pixels[0] if pixels.ndim == 4 else pixels
    H, W, C = frame.shape
    if H % p or W % p:
        raise ContractError(f"{H}x{W} not divisible by patch {p}")
    gh, gw = H // p, W // p
    rows = frame.reshape(gh, p, gw, p, C).transpose(0, 2, 1, 3, 4)
    return np.ascontiguousarray(rows).reshape(gh * gw, p * p * C)


def unpatchify_frame(rows: np.ndarray, H: int, W: int, p: int) -> np.ndarray:
    gh, gw = H // p, W // p
    C = rows.shape[1] // (p * p)
    x = rows.reshape(gh, gw, p, p, C).transpose(0, 2, 1, 3, 4)
    return np.ascontiguousarray(x).reshape(H, W, C)


def patchify_video(pixels: np.ndarray, t: int, p: int) -> np.ndarray:
    """Clip -> (patches_per_clip, t*p*p*3) tubelet rows, temporal-major."""
    T, H, W, C = pixels.shape
    if T % t:
        raise ContractError(f"{T} frames not divisible by t_patch {t}")
    if H % p or W % p:
        raise ContractError(f"{H}x{W} not divisible by patch {p}")
    gt, gh, gw = T // t, H // p, W // p
    x = pixels.reshape(gt, t, gh, p, gw, p, C).transpose(0, 2, 4, 1, 3, 5, 6)
    return np.ascontiguousarray(x).reshape(gt * gh * gw, t * p * p * C)


def unpatchify_video(rows: np.ndarray, T: int, H: int, W: int, t: int, p: int) -> np.ndarray:
    gt, gh, gw = T // t, H // p, W // p
    C = rows.shape[1] // (t * p * p)
    x = rows.reshape(gt, gh, gw, t, p, p, C).transpose(0, 3, 1, 4, 2, 5, 6)
    return np.ascontiguousarray(x).reshape(T, H, W, C)


def _unpatchify_video_node(x: Tensor, cfg: TokenizerConfig) -> Tensor:
    """Graph-side inverse of patchify_video for (B, patches, row_dim) tensors."""
    B = x.shape[0]
    t, p = cfg.t_patch, cfg.patch
    gt = cfg.frames // t
    gh = cfg.height // p
    gw = cfg.width // p
    x = reshape(x, (B, gt, gh, gw, t, p, p, 3))
    x = permute(x, (0, 1, 4, 2, 5, 3, 6, 7))
    return reshape(x, (B, cfg.frames, cfg.height, cfg.width, 3))


# ---------------------------------------------------------------------------
# Token sequences
# ---------------------------------------------------------------------------


@dataclass
class TokenSequence:
    indices: np.ndarray
    n_appearance: int
    n_motion: int

    def __post_init__(self):
        self.indices = np.asarray(self.indices, dtype=np.int64)
        if self.indices.ndim != 1:
            raise ContractError("token sequence must be 1D")
        if len(self.indices) != self.n_appearance + self.n_motion:
            raise ContractError(
                f"sequence length {len(self.indices)} != "
                f"{self.n_appearance}+{self.n_motion}")

    def __len__(self) -> int:
        return len(self.indices)

    @property
    def appearance(self) -> np.ndarray:
        return self.indices[:self.n_appearance]

    @property
    def motion(self) -> np.ndarray:
        return self.indices[self.n_appearance:]

    def same_layout(self, other: "TokenSequence") -> bool:
        return (self.n_appearance == other.n_appearance
                and self.n_motion == other.n_motion)


def swap_tokens(seq_x: TokenSequence, seq_y: TokenSequence,
                which: str) -> tuple[TokenSequence, TokenSequence]:
    """Exchange the appearance or motion index blocks of two sequences."""
    if which not in ("appearance", "motion"):
        raise ContractError(f"which must be appearance|motion, got {which!r}")
    if not seq_x.same_layout(seq_y):
        raise ContractError("token sequences have different layouts")
    ax, mx = seq_x.appearance.copy(), seq_x.motion.copy()
    ay, my = seq_y.appearance.copy(), seq_y.motion.copy()
    if which == "appearance":
        ax, ay = ay, ax
    else:
        mx, my = my, mx
    new_x = TokenSequence(np.concatenate([ax, mx]), seq_x.n_appearance, seq_x.n_motion)
    new_y = TokenSequence(np.concatenate([ay, my]), seq_y.n_appearance, seq_y.n_motion)
    return new_x, new_y


# ---------------------------------------------------------------------------
# Quantizer
# ---------------------------------------------------------------------------


@dataclass
class QuantizeResult:
    codes: Tensor          # (B, L, code_dim) straight-through values
    indices: np.ndarray    # (B, L)
    pre: Tensor            # (B, L, code_dim) pre-quantization projections
    snapped: Tensor        # (B, L, code_dim) codebook rows (graph node)


class Quantizer:
    """Nearest-neighbour codebook with a straight-through gradient.

    Distances use the direct (z - e)^2 form so indices agree exactly with
    an exhaustive per-row scan; ties resolve to the lowest index.  With
    DERA_DETERMINISTIC=0 a faster expanded form may be used instead.
    """

    def __init__(self, store: ParamStore, cfg: TokenizerConfig):
        self.cfg = cfg
        k = cfg.codebook_size
        self.proj_in = Linear(store, "quant.proj_in", cfg.dim, cfg.code_dim)
        self.proj_out = Linear(store, "quant.proj_out", cfg.code_dim, cfg.dim)
        self.codebook = store.create("quant.codebook", (k, cfg.code_dim),
                                     init="uniform", bound=1.0 / k)

    def nearest(self, rows: np.ndarray) -> np.ndarray:
        """Nearest codebook index per row, ties -> lowest index."""
        cb = self.codebook.data
        if cb.shape[0] == 0:
            raise ContractError("empty codebook")
        if deterministic_mode():
            diff = rows[:, None, :] - cb[None, :, :]
            d2 = (diff * diff).sum(axis=-1)
        else:
            d2 = (rows * rows).sum(1, keepdims=True) - 2.0 * rows @ cb.T \
                + (cb * cb).sum(1)
        if not np.isfinite(d2).all():
            raise ContractError("non-finite quantizer distances")
        return argmin_rows(d2)

    def quantize(self, z_queries: Tensor) -> QuantizeResult:
        B, L, _ = z_queries.shape
        pre = self.proj_in(z_queries)
        flat = pre.data.reshape(-1, self.cfg.code_dim)
        indices = self.nearest(flat)
        snapped = reshape(embedding(self.codebook.value, indices),
                          (B, L, self.cfg.code_dim))
        codes = straight_through(pre, snapped)
        return QuantizeResult(codes, indices.reshape(B, L), pre, snapped)

    def lookup(self, indices: np.ndarray) -> np.ndarray:
        indices = np.asarray(indices)
        if indices.max(initial=0) >= self.cfg.codebook_size or indices.min(initial=0) < 0:
            raise ContractError(
                f"token index outside codebook of size {self.cfg.codebook_size}")
        return self.codebook.data[indices]

    def reinit_dead(self, usage_counts: np.ndarray, pool: np.ndarray,
                    rng: np.random.Generator) -> int:
        """Reseed entries with zero usage to random rows from `pool`."""
        dead = np.flatnonzero(usage_counts == 0)
        if dead.size == 0 or pool.size == 0:
            return 0
        picks = rng.integers(0, pool.shape[0], size=dead.size)
        self.codebook.data[dead] = pool[picks]
        return int(dead.size)


# ---------------------------------------------------------------------------
# Full model
# ---------------------------------------------------------------------------


@dataclass
class EncoderOutput:
    z_appearance: Tensor       # (B, tokens_appearance, dim) final-layer queries
    z_motion: Tensor           # (B, tokens_motion, dim)
    feat_appearance: Tensor    # (B, patches_per_frame, dim) at tap depth
    feat_motion: Tensor        # (B, patches_per_clip, dim) at tap depth


@dataclass
class ForwardResult:
    recon: Tensor              # (B, T, H, W, 3) clamped reconstruction
    quant: QuantizeResult
    encoded: EncoderOutput


class TokenizerModel:
    def __init__(self, cfg: TokenizerConfig, seed: int = 0,
                 store: ParamStore | None = None):
        cfg.validate()
        self.cfg = cfg
        self.store = store if store is not None else ParamStore(seed)
        s = self.store
        d = cfg.dim

        self.embed_frame = Linear(s, "encoder.patch_frame", cfg.frame_patch_dim, d)
        self.embed_clip = Linear(s, "encoder.patch_clip", cfg.clip_patch_dim, d)
        self.q_appearance = s.create("encoder.queries_appearance",
                                     (cfg.tokens_appearance, d))
        self.q_motion = s.create("encoder.queries_motion", (cfg.tokens_motion, d))
        self.pos_q_appearance = s.create("encoder.pos_queries_appearance",
                                         (cfg.tokens_appearance, d))
        self.pos_q_motion = s.create("encoder.pos_queries_motion",
                                     (cfg.tokens_motion, d))
        self.pos_frame = s.create("encoder.pos_patch_frame", (cfg.patches_per_frame, d))
        self.pos_clip = s.create("encoder.pos_patch_clip", (cfg.patches_per_clip, d))
        self.encoder = TransformerStack(s, "encoder.stack", d, cfg.n_layers, cfg.heads)

        self.quantizer = Quantizer(s, cfg)

        self.q_decoder = s.create("decoder.queries", (cfg.decoder_queries, d))
        self.pos_q_decoder = s.create("decoder.pos_queries", (cfg.decoder_queries, d))
        self.pos_code = s.create("decoder.pos_code", (cfg.seq_len, d))
        self.decoder = TransformerStack(s, "decoder.stack", d, cfg.n_layers, cfg.heads)
        self.ln_out = LayerNorm(s, "decoder.ln_out", d)
        self.pixel_head = Linear(s, "decoder.pixel_head", d, cfg.clip_patch_dim)

    # -- gradient scopes -----------------------------------------------------

    def encoder_params(self) -> dict:
        return self.store.subset("encoder.")

    def all_params(self) -> dict:
        return self.store.as_dict()

    # -- pixel <-> patch helpers ---------------------------------------------

    def _check_pixels(self, pixels: np.ndarray) -> np.ndarray:
        cfg = self.cfg
        pixels = np.asarray(pixels, dtype=self.store.dtype)
        if pixels.ndim == 4:
            pixels = pixels[None]
        if pixels.shape[1:] != (cfg.frames, cfg.height, cfg.width, 3):
            raise ContractError(
                f"clip shape {pixels.shape[1:]} != "
                f"({cfg.frames}, {cfg.height}, {cfg.width}, 3)")
        return pixels

    def _patch_batches(self, pixels: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        cfg = self.cfg
        frame_rows = np.stack([patchify_frame(clip, cfg.patch) for clip in pixels])
        clip_rows = np.stack([patchify_video(clip, cfg.t_patch, cfg.patch)
                              for clip in pixels])
        return frame_rows, clip_rows

    # -- forward passes --------------------------------------------------------

    def _encode_stream(self, patch_rows: np.ndarray, embed: Linear,
                       queries, pos_queries, pos_patches) -> tuple[Tensor, Tensor]:
        cfg = self.cfg
        B = patch_rows.shape[0]
        patches = add(embed(constant(patch_rows)), pos_patches.value)
        n_q = queries.data.shape[0]
        q = expand_rows(add(queries.value, pos_queries.value), B)
        seq = sequence_concat(q, patches)
        out, tapped = self.encoder(seq, tap_layer=cfg.tap_depth)
        z = take_slice(out, (slice(None), slice(0, n_q)))
        feats = take_slice(tapped, (slice(None), slice(n_q, None)))
        return z, feats

    def encode(self, pixels: np.ndarray,
               precomputed_rows: tuple[np.ndarray, np.ndarray] | None = None) -> EncoderOutput:
        """Run both streams through the shared encoder.

        Returns final-layer query blocks and tap-depth patch blocks.
        """
        pixels = self._check_pixels(pixels)
        frame_rows, clip_rows = (precomputed_rows if precomputed_rows is not None
                                 else self._patch_batches(pixels))
        z_a, f_a = self._encode_stream(frame_rows, self.embed_frame,
                                       self.q_appearance, self.pos_q_appearance,
                                       self.pos_frame)
        z_m, f_m = self._encode_stream(clip_rows, self.embed_clip,
                                       self.q_motion, self.pos_q_motion,
                                       self.pos_clip)
        z_a.assert_finite("encoder appearance queries")
        z_m.assert_finite("encoder motion queries")
        return EncoderOutput(z_a, z_m, f_a, f_m)

    def quantize(self, encoded: EncoderOutput) -> QuantizeResult:
        z = sequence_concat(encoded.z_appearance, encoded.z_motion)
        return self.quantizer.quantize(z)

    def decode(self, codes) -> Tensor:
        """Code rows -> clamped pixel volume (graph node)."""
        cfg = self.cfg
        if not isinstance(codes, Tensor):
            codes = constant(np.asarray(codes, dtype=self.store.dtype))
        if codes.ndim == 2:
            codes = reshape(codes, (1, *codes.shape))
        if codes.shape[1] != cfg.seq_len:
            raise ContractError(f"expected {cfg.seq_len} code rows, got {codes.shape[1]}")
        B = codes.shape[0]
        lifted = add(self.quantizer.proj_out(codes), self.pos_code.value)
        q = expand_rows(add(self.q_decoder.value, self.pos_q_decoder.value), B)
        seq = sequence_concat(q, lifted)
        out, _ = self.decoder(seq)
        out = take_slice(out, (slice(None), slice(0, cfg.decoder_queries)))
        rows = self.pixel_head(self.ln_out(out))
        video = _unpatchify_video_node(rows, cfg)
        video.assert_finite("decoder output")
        return clip_unit(video)

    def forward(self, pixels: np.ndarray,
                precomputed_rows=None) -> ForwardResult:
        encoded = self.encode(pixels, precomputed_rows)
        quant = self.quantize(encoded)
        recon = self.decode(quant.codes)
        return ForwardResult(recon, quant, encoded)

    # -- inference ---------------------------------------------------------

    def tokenize(self, clip: VideoClip) -> TokenSequence:
        encoded = self.encode(clip.pixels)
        quant = self.quantize(encoded)
        return TokenSequence(quant.indices[0], self.cfg.tokens_appearance,
                             self.cfg.tokens_motion)

    def tokenize_batch(self, pixels: np.ndarray) -> np.ndarray:
        encoded = self.encode(pixels)
        return self.quantize(encoded).indices

    def detokenize(self, seq: TokenSequence) -> VideoClip:
        codes = self.quantizer.lookup(seq.indices)
        recon = self.decode(codes[None])
        return VideoClip(np.asarray(recon.data[0], dtype=np.float32))

    def reconstruct(self, clip: VideoClip) -> VideoClip:
        return self.detokenize(self.tokenize(clip))
