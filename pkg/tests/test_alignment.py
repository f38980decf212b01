"""Teacher providers, DFEA files, alignment losses."""

import numpy as np
import pytest

from dera.alignment import (
    FeatureFormatError,
    FileTeacher,
    ProjectionHead,
    RandomTeacher,
    STREAM_IMAGE,
    align_loss,
    export_features,
    load_features,
    save_features,
)
from dera.autodiff import ContractError, ParamStore, Parameter, backward, constant
from dera.tokenizer import TokenizerConfig
from dera.video import clip_content_hash, generate_clip, spec_for

CFG = TokenizerConfig(frames=8, height=32, width=32, t_patch=2, patch=8,
                      tokens_appearance=16, tokens_motion=48, dim=64,
                      code_dim=8, codebook_size=64, n_layers=2)


def sample_clip(i=0):
    return generate_clip(spec_for(i, i % 4, seed=i), seed=i, T=8, H=32, W=32)


class TestRandomTeacher:
    def test_deterministic_per_seed(self):
        clip = sample_clip()
        a = RandomTeacher(5, 32, CFG).features(clip)
        b = RandomTeacher(5, 32, CFG).features(clip)
        assert np.array_equal(a.image_tokens, b.image_tokens)
        assert np.array_equal(a.video_tokens, b.video_tokens)
        c = RandomTeacher(6, 32, CFG).features(clip)
        assert not np.array_equal(a.image_tokens, c.image_tokens)

    def test_token_counts_match_grid(self):
        feats = RandomTeacher(0, 32, CFG).features(sample_clip())
        assert feats.image_tokens.shape == (CFG.patches_per_frame, 32)
        assert feats.video_tokens.shape == (CFG.patches_per_clip, 32)

    def test_distinct_clips_give_distinct_features(self):
        teacher = RandomTeacher(0, 32, CFG)
        fa = teacher.features(sample_clip(0))
        fb = teacher.features(sample_clip(1))
        cos = (fa.image_tokens * fb.image_tokens).sum(1) / (
            np.linalg.norm(fa.image_tokens, axis=1)
            * np.linalg.norm(fb.image_tokens, axis=1) + 1e-9)
        assert cos.min() < 1.0 - 1e-4


class TestFileTeacher:
    def test_export_then_load_bitwise(self, tmp_path):
        clips = [sample_clip(i) for i in range(3)]
        teacher = RandomTeacher(1, 32, CFG)
        export_features(teacher, clips, tmp_path)
        file_teacher = FileTeacher(tmp_path, CFG)
        for clip in clips:
            direct = teacher.features(clip)
            loaded = file_teacher.features(clip)
            assert np.array_equal(direct.image_tokens, loaded.image_tokens)
            assert np.array_equal(direct.video_tokens, loaded.video_tokens)

    def test_missing_file_reported(self, tmp_path):
        file_teacher = FileTeacher(tmp_path, CFG)
        with pytest.raises(FileNotFoundError, match="missing"):
            file_teacher.features(sample_clip())

    def test_count_mismatch_cites_expected(self, tmp_path):
        clip = sample_clip()
        digest = clip_content_hash(clip)
        bad = np.zeros((7, 32), dtype=np.float32)  # wrong token count
        bad[:, 0] = 1.0
        save_features(tmp_path / f"{digest.hex()}.image.dfea", bad, 0, digest)
        save_features(tmp_path / f"{digest.hex()}.video.dfea", bad, 1, digest)
        with pytest.raises(FeatureFormatError, match=str(CFG.patches_per_frame)):
            FileTeacher(tmp_path, CFG).features(clip)

    def test_corrupted_magic(self, tmp_path):
        path = tmp_path / "x.dfea"
        path.write_bytes(b"WRONGMAG" + b"\x00" * 100)
        with pytest.raises(FeatureFormatError, match="magic"):
            load_features(path)

    def test_truncated_payload(self, tmp_path):
        path = tmp_path / "t.dfea"
        save_features(path, np.ones((4, 8), dtype=np.float32), STREAM_IMAGE,
                      b"\x01" * 32)
        path.write_bytes(path.read_bytes()[:-8])
        with pytest.raises(FeatureFormatError, match="truncated"):
            load_features(path)


class IdentityHead:
    def __call__(self, x):
        return x


class TestAlignLoss:
    def test_self_alignment_is_minus_one(self):
        rng = np.random.default_rng(0)
        e = constant(rng.normal(size=(2, 5, 8)).astype(np.float32))
        loss = align_loss(e, e.data, IdentityHead())
        assert float(loss.data) == pytest.approx(-1.0, abs=1e-5)

    def test_orthogonal_targets_give_zero(self):
        e = constant(np.tile([1.0, 0.0], (3, 4, 1)).astype(np.float32))
        targets = np.tile([0.0, 1.0], (3, 4, 1)).astype(np.float32)
        loss = align_loss(e, targets, IdentityHead())
        assert float(loss.data) == pytest.approx(0.0, abs=1e-7)

    def test_mean_of_mixed_cosines(self):
        e = constant(np.array([[[1.0, 0.0], [1.0, 0.0]]], dtype=np.float32))
        targets = np.array([[[1.0, 0.0], [0.0, 1.0]]], dtype=np.float32)
        loss = align_loss(e, targets, IdentityHead())
        assert float(loss.data) == pytest.approx(-0.5, abs=1e-6)

    def test_loss_bounded_and_scale_invariant(self):
        # exact invariance verified in the 64-bit checking mode; float32
        # training arithmetic is allowed rounding-level drift
        rng = np.random.default_rng(4)
        store = ParamStore(seed=0, dtype=np.float64)
        head = ProjectionHead(store, "h", 16, 8)
        e = constant(rng.normal(size=(2, 6, 16)))
        targets = rng.normal(size=(2, 6, 8))
        base = float(align_loss(e, targets, head).data)
        assert -1.0 - 1e-9 <= base <= 1.0 + 1e-9
        # the declared 1e-8 denominator epsilon gains relative weight as the
        # target norm shrinks, so "any positive constant" is bounded below
        for k in (0.1, 0.5, 3.0, 1000.0, 1e6):
            scaled = float(align_loss(e, targets * k, head).data)
            assert scaled == pytest.approx(base, abs=1e-6)

        store32 = ParamStore(seed=0)
        head32 = ProjectionHead(store32, "h", 16, 8)
        e32 = constant(e.data.astype(np.float32))
        t32 = targets.astype(np.float32)
        base32 = float(align_loss(e32, t32, head32).data)
        for k in (0.1, 3.0, 1000.0):
            scaled32 = float(align_loss(e32, t32 * np.float32(k), head32).data)
            assert scaled32 == pytest.approx(base32, abs=1e-5)

    def test_targets_never_receive_gradient(self):
        rng = np.random.default_rng(1)
        store = ParamStore(seed=2)
        head = ProjectionHead(store, "h", 16, 8)
        e = Parameter("e", rng.normal(size=(1, 4, 16)).astype(np.float32))
        targets = Parameter("t", rng.normal(size=(1, 4, 8)).astype(np.float32))
        loss = align_loss(e.value, targets.value, head)
        gv = backward(loss, {"e": e, "t": targets})
        assert np.abs(gv.block("t")).sum() == 0.0
        assert np.abs(gv.block("e")).sum() > 0.0

    def test_zero_norm_rows_stay_finite(self):
        e = constant(np.zeros((1, 3, 4), dtype=np.float32))
        targets = np.ones((1, 3, 4), dtype=np.float32)
        loss = align_loss(e, targets, IdentityHead())
        assert np.isfinite(loss.data)

    def test_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(9)
        store = ParamStore(seed=0, dtype=np.float64)
        head = ProjectionHead(store, "h", 6, 4)
        e = Parameter("e", rng.normal(size=(1, 3, 6)))
        targets = rng.normal(size=(1, 3, 4))
        gv = backward(align_loss(e.value, targets, head), [e])
        analytic = gv.block("e")
        step = 1e-6
        flat = e.data.reshape(-1)
        numeric = np.zeros_like(analytic).reshape(-1)
        for j in range(flat.size):
            orig = flat[j]
            flat[j] = orig + step
            hi = float(align_loss(e.value, targets, head).data)
            flat[j] = orig - step
            lo = float(align_loss(e.value, targets, head).data)
            flat[j] = orig
            numeric[j] = (hi - lo) / (2 * step)
        rel = np.abs(analytic.reshape(-1) - numeric) / (np.abs(numeric) + 1e-8)
        assert rel.max() < 1e-4

    def test_row_count_mismatch_rejected(self):
        e = constant(np.zeros((1, 4, 8), dtype=np.float32))
        with pytest.raises(ContractError):
            align_loss(e, np.zeros((1, 5, 8), dtype=np.float32), IdentityHead())
