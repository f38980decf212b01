"""Procedural video clips with known appearance/motion factors, plus file I/O.

Clips are dense T x H x W x C float volumes in [-1, 1].  The synthetic
dataset renders a single colored shape drifting over a flat background:
frame 0 fully determines the appearance factors (shape, fill color), the
trajectory determines the motion factors (one of four drift directions).
That separability is what the token-swapping probe measures.

DVID container: magic "DERAVID\\0", u32 version=1, u32 T,H,W,C, u8 dtype
(0=u8, 1=f32), u8 flags (bit 0: trailing u32 class label), u8 reserved x2,
row-major little-endian payload, optional trailing u32 label.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

DVID_MAGIC = b"DERAVID\x00"
DVID_VERSION = 1

# (dx, dy) pixel drift per frame for each motion class
MOTION_FAMILIES = {
    0: (1, 0),    # right
    1: (-1, 0),   # left
    2: (0, -1),   # up
    3: (0, 1),    # down
}

# fill colors in [-1, 1]; index = appearance variant
PALETTE = np.array(
    [
        [1.0, -0.6, -0.6],
        [-0.6, 1.0, -0.6],
        [-0.6, -0.6, 1.0],
        [1.0, 1.0, -0.7],
        [1.0, -0.7, 1.0],
        [-0.7, 1.0, 1.0],
        [0.9, 0.9, 0.9],
        [0.9, 0.3, -0.3],
    ],
    dtype=np.float32,
)

SHAPES = ("rect", "circle", "cross")
BACKGROUND = np.array([-0.85, -0.85, -0.85], dtype=np.float32)


class VideoFormatError(ValueError):
    """Malformed DVID payload."""


@dataclass
class VideoClip:
    pixels: np.ndarray  # (T, H, W, 3) float32 in [-1, 1]
    class_label: int | None = None

    @property
    def frames(self) -> int:
        return self.pixels.shape[0]

    @property
    def height(self) -> int:
        return self.pixels.shape[1]

    @property
    def width(self) -> int:
        return self.pixels.shape[2]

    @property
    def channels(self) -> int:
        return self.pixels.shape[3]

    def validate(self) -> "VideoClip":
        if self.pixels.ndim != 4 or self.pixels.shape[3] != 3:
            raise VideoFormatError(f"expected (T,H,W,3) pixels, got {self.pixels.shape}")
        if self.pixels.min() < -1.0 or self.pixels.max() > 1.0:
            raise VideoFormatError("pixels outside [-1, 1]")
        return self


@dataclass
class SceneSpec:
    shape_kind: str              # rect | circle | cross
    fill: tuple[float, float, float]
    position: tuple[int, int]    # (x, y) of the object center, pixels
    velocity: tuple[int, int]    # pixels per frame
    background: tuple[float, float, float]
    motion_class: int
    size: int = 9                # object bounding-box side, odd

    def __post_init__(self):
        if self.shape_kind not in SHAPES:
            raise ValueError(f"unknown shape {self.shape_kind!r}")


def _shape_mask(kind: str, size: int) -> np.ndarray:
    half = size // 2
    yy, xx = np.mgrid[-half:half + 1, -half:half + 1]
    if kind == "rect":
        return np.ones((size, size), dtype=bool)
    if kind == "circle":
        return xx * xx + yy * yy <= half * half
    # cross: horizontal and vertical bars
    bar = max(1, size // 3)
    return (np.abs(xx) <= bar // 2) | (np.abs(yy) <= bar // 2)


def generate_clip(spec: SceneSpec, seed: int, T: int, H: int, W: int) -> VideoClip:
    """Render a clip deterministically from (spec, seed).

    The object bounces off borders so the full shape stays on canvas.
    `seed` is reserved for future stochastic texturing; the trajectory is a
    pure function of the spec.
    """
    half = spec.size // 2
    if spec.size > min(H, W):
        raise ValueError(f"object size {spec.size} exceeds {H}x{W} canvas")
    mask = _shape_mask(spec.shape_kind, spec.size)
    bg = np.asarray(spec.background, dtype=np.float32)
    fill = np.asarray(spec.fill, dtype=np.float32)

    pixels = np.empty((T, H, W, 3), dtype=np.float32)
    x, y = spec.position
    vx, vy = spec.velocity
    lo_x, hi_x = half, W - 1 - half
    lo_y, hi_y = half, H - 1 - half
    x = min(max(x, lo_x), hi_x)
    y = min(max(y, lo_y), hi_y)
    for t in range(T):
        frame = np.broadcast_to(bg, (H, W, 3)).copy()
        ys = slice(y - half, y + half + 1)
        xs = slice(x - half, x + half + 1)
        region = frame[ys, xs]
        region[mask] = fill
        pixels[t] = frame
        nx, ny = x + vx, y + vy
        if nx < lo_x or nx > hi_x:
            vx = -vx
            nx = x + vx
        if ny < lo_y or ny > hi_y:
            vy = -vy
            ny = y + vy
        x, y = nx, ny
    return VideoClip(pixels, class_label=spec.motion_class).validate()


def spec_for(appearance_id: int, motion_class: int, seed: int,
             H: int = 32, W: int = 32, speed: int = 1, T: int = 8) -> SceneSpec:
    """Derive a renderable scene from (appearance variant, motion class).

    The start position leaves T frames of headroom along the drift axis so
    the clip never bounces; measured drift direction then always matches
    the motion class.
    """
    rng = np.random.default_rng([seed, appearance_id, motion_class])
    n = len(PALETTE)
    fill = tuple(float(c) for c in PALETTE[appearance_id % n])
    shape = SHAPES[appearance_id % len(SHAPES)]
    dx, dy = MOTION_FAMILIES[motion_class % len(MOTION_FAMILIES)]
    size = min(9, max(3, (min(H, W) // 3) | 1))   # odd, scaled to the canvas
    half = size // 2
    travel = (T - 1) * speed
    lo_x, hi_x = half, W - 1 - half
    lo_y, hi_y = half, H - 1 - half
    x = int(rng.integers(lo_x + (travel if dx < 0 else 0),
                         hi_x - (travel if dx > 0 else 0) + 1))
    y = int(rng.integers(lo_y + (travel if dy < 0 else 0),
                         hi_y - (travel if dy > 0 else 0) + 1))
    return SceneSpec(
        shape_kind=shape,
        fill=fill,
        position=(x, y),
        velocity=(dx * speed, dy * speed),
        background=tuple(float(c) for c in BACKGROUND),
        motion_class=motion_class % len(MOTION_FAMILIES),
        size=size,
    )


def make_dataset(out_dir, n_clips: int, seed: int,
                 T: int = 8, H: int = 32, W: int = 32) -> list[Path]:
    """Generate a clip set cycling appearance variants x motion classes.

    Pure function of (arguments): regenerating writes identical bytes.
    Writes clip_0000.dvid ... plus a manifest.json.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = []
    for i in range(n_clips):
        appearance = i % len(PALETTE)
        motion = (i // len(PALETTE)) % len(MOTION_FAMILIES) if n_clips > len(PALETTE) \
            else i % len(MOTION_FAMILIES)
        spec = spec_for(appearance, motion, seed=seed * 1000 + i, H=H, W=W, T=T)
        clip = generate_clip(spec, seed=seed * 1000 + i, T=T, H=H, W=W)
        path = out_dir / f"clip_{i:04d}.dvid"
        save_clip(path, clip)
        paths.append(path)
    manifest = {
        "n_clips": n_clips, "seed": seed, "frames": T, "height": H, "width": W,
        "clips": [p.name for p in paths],
    }
    (out_dir / "manifest.json").write_text(json.dumps(manifest, sort_keys=True, indent=2))
    return paths


def list_dataset(data_dir) -> list[Path]:
    data_dir = Path(data_dir)
    paths = sorted(data_dir.glob("*.dvid"))
    if not paths:
        raise FileNotFoundError(f"no .dvid clips in {data_dir}")
    return paths


# ---------------------------------------------------------------------------
# DVID I/O
# ---------------------------------------------------------------------------

_FLAG_LABEL = 0x01


def save_clip(path, clip: VideoClip, dtype: str = "f32") -> None:
    clip.validate()
    T, H, W, C = clip.pixels.shape
    flags = _FLAG_LABEL if clip.class_label is not None else 0
    dtype_code = {"u8": 0, "f32": 1}[dtype]
    header = DVID_MAGIC + struct.pack(
        "<IIIIIBBBB", DVID_VERSION, T, H, W, C, dtype_code, flags, 0, 0)
    if dtype == "f32":
        payload = clip.pixels.astype("<f4").tobytes()
    else:
        quant = np.clip((clip.pixels + 1.0) * 127.5, 0, 255)
        payload = np.floor(quant + 0.5).astype(np.uint8).tobytes()
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(payload)
        if clip.class_label is not None:
            fh.write(struct.pack("<I", clip.class_label))


def load_clip(path) -> VideoClip:
    raw = Path(path).read_bytes()
    if raw[:8] != DVID_MAGIC:
        raise VideoFormatError(f"{path}: bad magic at offset 0")
    if len(raw) < 8 + 24:
        raise VideoFormatError(f"{path}: truncated header")
    version, T, H, W, C, dtype_code, flags, _, _ = struct.unpack("<IIIIIBBBB", raw[8:32])
    if version != DVID_VERSION:
        raise VideoFormatError(f"{path}: unsupported version {version}")
    count = T * H * W * C
    if max(T, H, W, C) > 1 << 16 or count > 1 << 31:
        raise VideoFormatError(f"{path}: dimension overflow {T}x{H}x{W}x{C}")
    item = 1 if dtype_code == 0 else 4
    end = 32 + count * item
    if len(raw) < end:
        raise VideoFormatError(f"{path}: truncated payload ({len(raw)} < {end} bytes)")
    if dtype_code == 0:
        data = np.frombuffer(raw[32:end], dtype=np.uint8).astype(np.float32)
        pixels = (data / 127.5 - 1.0).reshape(T, H, W, C).astype(np.float32)
    elif dtype_code == 1:
        pixels = np.frombuffer(raw[32:end], dtype="<f4").reshape(T, H, W, C).copy()
    else:
        raise VideoFormatError(f"{path}: unknown dtype code {dtype_code}")
    label = None
    if flags & _FLAG_LABEL:
        if len(raw) < end + 4:
            raise VideoFormatError(f"{path}: missing class label")
        label = struct.unpack("<I", raw[end:end + 4])[0]
    return VideoClip(pixels, class_label=label)


def dump_frames(path_prefix, clip: VideoClip) -> list[Path]:
    """Write one binary PPM (P6) per frame, 8-bit, clamped.

    Rounding rule: round half away from zero, so gray 0.0 -> 128.
    """
    paths = []
    for t in range(clip.frames):
        frame = np.clip(clip.pixels[t], -1.0, 1.0)
        scaled = (frame + 1.0) * 127.5
        data = np.floor(scaled + 0.5).clip(0, 255).astype(np.uint8)
        path = Path(f"{path_prefix}_{t:03d}.ppm")
        with open(path, "wb") as fh:
            fh.write(f"P6\n{clip.width} {clip.height}\n255\n".encode())
            fh.write(data.tobytes())
        paths.append(path)
    return paths


def clip_content_hash(clip: VideoClip) -> bytes:
    """32-byte digest of dims + f32 pixel payload; keys teacher-feature files."""
    h = hashlib.sha256()
    h.update(struct.pack("<IIII", *clip.pixels.shape))
    h.update(clip.pixels.astype("<f4").tobytes())
    return h.digest()


def object_mask(clip: VideoClip, frame: int = 0, tol: float = 0.25) -> np.ndarray:
    """Pixels that differ from the dominant (background) color of a frame."""
    img = clip.pixels[frame]
    flat = img.reshape(-1, 3)
    # background = most common quantized color
    q = np.round((flat + 1.0) * 8).astype(np.int32)
    codes = q[:, 0] * 1000000 + q[:, 1] * 1000 + q[:, 2]
    vals, counts = np.unique(codes, return_counts=True)
    bg_code = vals[counts.argmax()]
    bg = flat[codes == bg_code].mean(axis=0)
    return np.abs(img - bg).sum(axis=-1) > tol


def dominant_palette_color(clip: VideoClip, frame: int = 0) -> int:
    """Nearest palette index of the mean object-region color (report probe)."""
    mask = object_mask(clip, frame)
    if not mask.any():
        mask = np.ones(clip.pixels[frame].shape[:2], dtype=bool)
    mean_color = clip.pixels[frame][mask].mean(axis=0)
    dists = ((PALETTE - mean_color) ** 2).sum(axis=1)
    return int(dists.argmin())


def centroid(clip: VideoClip, frame: int) -> tuple[float, float]:
    """(x, y) centroid of the object region in one frame."""
    mask = object_mask(clip, frame)
    ys, xs = np.nonzero(mask)
    return float(xs.mean()), float(ys.mean())
