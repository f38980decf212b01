"""Frozen teacher-feature providers and the two alignment losses.

A teacher provider maps a clip to two target token grids: image tokens for
the appearance stream (one row per first-frame patch) and video tokens for
the motion stream (one row per tubelet).  Providers never receive
gradients; their outputs enter the graph as constants.

Two providers ship:
  * RandomTeacher -- a seeded, frozen two-layer random network over raw
    patch vectors.  Deterministic per seed; good enough to exercise the
    alignment machinery without bundling pretrained weights.
  * FileTeacher -- precomputed features loaded from DFEA files keyed by
    clip content hash, enabling features exported offline from real
    models.  Token counts must match the tokenizer grid exactly; no
    resampling is attempted.

DFEA container: magic "DERAFEA\\0", u32 version=1, u32 n_tokens, u32 dim,
u8 stream tag (0=image, 1=video), 32-byte clip content hash, f32 LE
row-major payload.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .autodiff import ContractError, ParamStore, Tensor, constant, cosine_similarity, gelu, mul, reduce_mean
from .nn import Linear
from .tokenizer import TokenizerConfig, patchify_frame, patchify_video
from .video import VideoClip, clip_content_hash

DFEA_MAGIC = b"DERAFEA\x00"
DFEA_VERSION = 1
STREAM_IMAGE = 0
STREAM_VIDEO = 1


class FeatureFormatError(ValueError):
    """Malformed or mismatched DFEA payload."""


@dataclass
class TeacherFeatures:
    image_tokens: np.ndarray   # (patches_per_frame, feature_dim)
    video_tokens: np.ndarray   # (patches_per_clip, feature_dim)
    teacher_id: str

    def validate(self, expected_image: int, expected_video: int) -> "TeacherFeatures":
        if self.image_tokens.shape[0] != expected_image:
            raise FeatureFormatError(
                f"image token count {self.image_tokens.shape[0]} != expected {expected_image}")
        if self.video_tokens.shape[0] != expected_video:
            raise FeatureFormatError(
                f"video token count {self.video_tokens.shape[0]} != expected {expected_video}")
        for name, arr in (("image", self.image_tokens), ("video", self.video_tokens)):
            if not np.isfinite(arr).all():
                raise FeatureFormatError(f"non-finite {name} teacher features")
            if not np.abs(arr).sum():
                raise FeatureFormatError(f"all-zero {name} teacher features")
        return self


class RandomTeacher:
    """Frozen two-layer random feature maps over raw patch vectors."""

    def __init__(self, seed: int, feature_dim: int, cfg: TokenizerConfig):
        self.seed = int(seed)
        self.feature_dim = int(feature_dim)
        self.cfg = cfg
        self.teacher_id = f"random-seed{seed}-d{feature_dim}"
        hidden = 2 * feature_dim
        self._image_net = self._make_net("image", cfg.frame_patch_dim, hidden)
        self._video_net = self._make_net("video", cfg.clip_patch_dim, hidden)

    def _make_net(self, tag: str, d_in: int, hidden: int):
        rng = np.random.default_rng([self.seed, len(tag), d_in])
        w1 = rng.normal(0, 1.0 / np.sqrt(d_in), (d_in, hidden)).astype(np.float32)
        b1 = rng.normal(0, 0.1, hidden).astype(np.float32)
        w2 = rng.normal(0, 1.0 / np.sqrt(hidden), (hidden, self.feature_dim)).astype(np.float32)
        b2 = rng.normal(0, 0.1, self.feature_dim).astype(np.float32)
        return w1, b1, w2, b2

    @staticmethod
    def _apply(net, rows: np.ndarray) -> np.ndarray:
        w1, b1, w2, b2 = net
        h = np.tanh(rows.astype(np.float32) @ w1 + b1)
        return h @ w2 + b2

    def features(self, clip: VideoClip) -> TeacherFeatures:
        cfg = self.cfg
        img = self._apply(self._image_net, patchify_frame(clip.pixels, cfg.patch))
        vid = self._apply(self._video_net,
                          patchify_video(clip.pixels, cfg.t_patch, cfg.patch))
        feats = TeacherFeatures(img, vid, self.teacher_id)
        return feats.validate(cfg.patches_per_frame, cfg.patches_per_clip)


class FileTeacher:
    """Serves precomputed features from a directory of DFEA files."""

    def __init__(self, directory, cfg: TokenizerConfig):
        self.directory = Path(directory)
        self.cfg = cfg
        self.teacher_id = f"files:{self.directory}"
        if not self.directory.is_dir():
            raise FileNotFoundError(f"feature directory {self.directory} not found")

    def features(self, clip: VideoClip) -> TeacherFeatures:
        digest = clip_content_hash(clip)
        img_path = self.directory / f"{digest.hex()}.image.dfea"
        vid_path = self.directory / f"{digest.hex()}.video.dfea"
        for path in (img_path, vid_path):
            if not path.exists():
                raise FileNotFoundError(
                    f"no precomputed features for clip {digest.hex()[:12]}... "
                    f"(missing {path.name})")
        img, tag_i, hash_i = load_features(img_path)
        vid, tag_v, hash_v = load_features(vid_path)
        if tag_i != STREAM_IMAGE or tag_v != STREAM_VIDEO:
            raise FeatureFormatError("stream tag mismatch in feature files")
        if hash_i != digest or hash_v != digest:
            raise FeatureFormatError("content hash mismatch in feature files")
        feats = TeacherFeatures(img, vid, self.teacher_id)
        return feats.validate(self.cfg.patches_per_frame, self.cfg.patches_per_clip)


def save_features(path, tokens: np.ndarray, stream_tag: int, clip_hash: bytes) -> None:
    tokens = np.asarray(tokens, dtype="<f4")
    if tokens.ndim != 2:
        raise FeatureFormatError("feature tokens must be 2D")
    if len(clip_hash) != 32:
        raise FeatureFormatError("clip hash must be 32 bytes")
    with open(path, "wb") as fh:
        fh.write(DFEA_MAGIC)
        fh.write(struct.pack("<IIIB", DFEA_VERSION, tokens.shape[0], tokens.shape[1],
                             stream_tag))
        fh.write(clip_hash)
        fh.write(tokens.tobytes())


def load_features(path) -> tuple[np.ndarray, int, bytes]:
    raw = Path(path).read_bytes()
    if raw[:8] != DFEA_MAGIC:
        raise FeatureFormatError(f"{path}: bad magic at offset 0")
    version, n_tokens, dim, tag = struct.unpack("<IIIB", raw[8:21])
    if version != DFEA_VERSION:
        raise FeatureFormatError(f"{path}: unsupported version {version}")
    clip_hash = raw[21:53]
    end = 53 + n_tokens * dim * 4
    if len(raw) < end:
        raise FeatureFormatError(f"{path}: truncated payload")
    tokens = np.frombuffer(raw[53:end], dtype="<f4").reshape(n_tokens, dim).copy()
    return tokens, tag, clip_hash


def export_features(provider, clips: list[VideoClip], out_dir) -> list[Path]:
    """Write one DFEA pair per clip, keyed by content hash."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    for clip in clips:
        digest = clip_content_hash(clip)
        feats = provider.features(clip)
        img_path = out_dir / f"{digest.hex()}.image.dfea"
        vid_path = out_dir / f"{digest.hex()}.video.dfea"
        save_features(img_path, feats.image_tokens, STREAM_IMAGE, digest)
        save_features(vid_path, feats.video_tokens, STREAM_VIDEO, digest)
        written += [img_path, vid_path]
    return written


class ProjectionHead:
    """Two-layer GELU MLP projecting encoder features into teacher space."""

    def __init__(self, store: ParamStore, name: str, dim: int, feature_dim: int,
                 hidden: int = 0):
        hidden = hidden or 2 * feature_dim
        self.fc1 = Linear(store, f"{name}.fc1", dim, hidden)
        self.fc2 = Linear(store, f"{name}.fc2", hidden, feature_dim)

    def __call__(self, x: Tensor) -> Tensor:
        return self.fc2(gelu(self.fc1(x)))


def align_loss(features: Tensor, targets, head: ProjectionHead) -> Tensor:
    """Mean negative cosine similarity between projected features and
    frozen targets.  Differentiable w.r.t. features and head only."""
    targets = targets if isinstance(targets, Tensor) else constant(targets)
    if features.shape[:-1] != targets.shape[:-1]:
        raise ContractError(
            f"feature rows {features.shape[:-1]} != target rows {targets.shape[:-1]}")
    projected = head(features)
    cos = cosine_similarity(projected, constant(targets.data), axis=-1)
    return mul(reduce_mean(cos), constant(np.asarray(-1.0, dtype=features.dtype)))
