"""Procedural clips, DVID container, frame dumps."""

import numpy as np
import pytest

from dera.video import (
    MOTION_FAMILIES,
    PALETTE,
    SceneSpec,
    VideoClip,
    VideoFormatError,
    centroid,
    clip_content_hash,
    dominant_palette_color,
    dump_frames,
    generate_clip,
    load_clip,
    make_dataset,
    save_clip,
    spec_for,
)


def static_spec():
    return SceneSpec(shape_kind="rect", fill=(1.0, -0.6, -0.6), position=(16, 16),
                     velocity=(0, 0), background=(-0.85, -0.85, -0.85),
                     motion_class=0)


class TestGeneration:
    def test_static_scene_has_identical_frames(self):
        clip = generate_clip(static_spec(), seed=0, T=8, H=32, W=32)
        for t in range(1, 8):
            np.testing.assert_array_equal(clip.pixels[t], clip.pixels[0])

    def test_determinism(self):
        spec = spec_for(3, 1, seed=5)
        a = generate_clip(spec, seed=7, T=8, H=32, W=32)
        b = generate_clip(spec, seed=7, T=8, H=32, W=32)
        assert np.array_equal(a.pixels, b.pixels)
        assert a.class_label == b.class_label == spec.motion_class

    def test_centroid_drift_matches_velocity(self):
        spec = SceneSpec(shape_kind="circle", fill=(0.9, 0.9, 0.9),
                         position=(10, 16), velocity=(1, 0),
                         background=(-0.85, -0.85, -0.85), motion_class=0)
        clip = generate_clip(spec, seed=0, T=8, H=32, W=32)
        xs = [centroid(clip, t)[0] for t in range(8)]
        for t in range(7):
            assert xs[t + 1] - xs[t] == pytest.approx(1.0, abs=1e-6)

    def test_all_motion_classes_drift_in_family_direction(self):
        for motion_class, (dx, dy) in MOTION_FAMILIES.items():
            for appearance in range(len(PALETTE)):
                spec = spec_for(appearance, motion_class, seed=3)
                clip = generate_clip(spec, seed=3, T=8, H=32, W=32)
                x0, y0 = centroid(clip, 0)
                x1, y1 = centroid(clip, 1)
                measured = (x1 - x0, y1 - y0)
                assert np.sign(measured[0]) == np.sign(dx)
                assert np.sign(measured[1]) == np.sign(dy)

    def test_oversized_object_rejected(self):
        spec = static_spec()
        spec.size = 33
        with pytest.raises(ValueError):
            generate_clip(spec, seed=0, T=2, H=32, W=32)

    def test_dataset_regeneration_identical_bytes(self, tmp_path):
        a = make_dataset(tmp_path / "a", 6, seed=4)
        b = make_dataset(tmp_path / "b", 6, seed=4)
        for pa, pb in zip(a, b):
            assert pa.read_bytes() == pb.read_bytes()

    def test_dominant_palette_color_recovers_fill(self):
        for appearance in range(len(PALETTE)):
            spec = spec_for(appearance, 0, seed=1)
            clip = generate_clip(spec, seed=1, T=4, H=32, W=32)
            assert dominant_palette_color(clip) == appearance % len(PALETTE)


class TestDvid:
    def test_f32_roundtrip_bitwise(self, tmp_path):
        clip = generate_clip(spec_for(2, 1, seed=0), seed=0, T=8, H=32, W=32)
        path = tmp_path / "clip.dvid"
        save_clip(path, clip)
        loaded = load_clip(path)
        assert np.array_equal(loaded.pixels, clip.pixels)
        assert loaded.class_label == clip.class_label

    def test_bad_magic_names_offset_zero(self, tmp_path):
        path = tmp_path / "bad.dvid"
        path.write_bytes(b"NOTMAGIC" + b"\x00" * 64)
        with pytest.raises(VideoFormatError, match="offset 0"):
            load_clip(path)

    def test_truncated_payload(self, tmp_path):
        clip = generate_clip(static_spec(), seed=0, T=2, H=16, W=16)
        path = tmp_path / "t.dvid"
        save_clip(path, clip)
        path.write_bytes(path.read_bytes()[:-17])
        with pytest.raises(VideoFormatError, match="truncated"):
            load_clip(path)

    def test_u8_affine_mapping(self, tmp_path):
        pixels = np.zeros((1, 2, 2, 3), dtype=np.float32)
        pixels[0, 0, 0] = -1.0
        pixels[0, 0, 1] = 1.0
        path = tmp_path / "u8.dvid"
        save_clip(path, VideoClip(pixels), dtype="u8")
        loaded = load_clip(path)
        assert loaded.pixels[0, 0, 0, 0] == pytest.approx(-1.0)   # 0 -> -1
        assert loaded.pixels[0, 0, 1, 0] == pytest.approx(1.0)    # 255 -> +1

    def test_label_flag_optional(self, tmp_path):
        clip = generate_clip(static_spec(), seed=0, T=2, H=16, W=16)
        clip.class_label = None
        path = tmp_path / "nolabel.dvid"
        save_clip(path, clip)
        assert load_clip(path).class_label is None


class TestFrameDump:
    def test_all_black_and_all_white(self, tmp_path):
        black = VideoClip(np.full((2, 4, 4, 3), -1.0, dtype=np.float32))
        white = VideoClip(np.full((2, 4, 4, 3), 1.0, dtype=np.float32))
        for clip, expected in [(black, 0), (white, 255)]:
            paths = dump_frames(tmp_path / "f", clip)
            assert len(paths) == 2
            for p in paths:
                raw = p.read_bytes()
                pixels = np.frombuffer(raw.split(b"\n", 3)[3], dtype=np.uint8)
                assert (pixels == expected).all()

    def test_midgray_rounds_half_away_from_zero(self, tmp_path):
        gray = VideoClip(np.zeros((1, 4, 4, 3), dtype=np.float32))
        (path,) = dump_frames(tmp_path / "g", gray)
        pixels = np.frombuffer(path.read_bytes().split(b"\n", 3)[3], dtype=np.uint8)
        assert (pixels == 128).all()


class TestContentHash:
    def test_hash_is_stable_and_content_sensitive(self):
        a = generate_clip(spec_for(0, 0, seed=0), seed=0, T=4, H=16, W=16)
        b = generate_clip(spec_for(1, 0, seed=0), seed=0, T=4, H=16, W=16)
        assert clip_content_hash(a) == clip_content_hash(a)
        assert clip_content_hash(a) != clip_content_hash(b)
        assert len(clip_content_hash(a)) == 32
