"""Encoder/quantizer/decoder contracts and the token-sequence algebra."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dera.autodiff import Parameter, backward, constant, reduce_sum, mul
from dera.tokenizer import (
    EncoderOutput,
    TokenSequence,
    TokenizerConfig,
    TokenizerModel,
    patchify_frame,
    patchify_video,
    swap_tokens,
    unpatchify_frame,
    unpatchify_video,
)
from dera.autodiff import ContractError
from dera.video import generate_clip, spec_for


TINY = TokenizerConfig(frames=4, height=8, width=8, t_patch=2, patch=4,
                       tokens_appearance=3, tokens_motion=5, dim=32,
                       code_dim=4, codebook_size=16, n_layers=2)


def tiny_pixels(batch=2, cfg=TINY, seed=0):
    rng = np.random.default_rng(seed)
    return rng.uniform(-1, 1, size=(batch, cfg.frames, cfg.height,
                                    cfg.width, 3)).astype(np.float32)


class TestPatchify:
    def test_paper_scale_frame_patch_count(self):
        frame = np.zeros((1, 128, 128, 3), dtype=np.float32)
        assert patchify_frame(frame, 8).shape == (256, 192)

    def test_small_frame_patch_count(self):
        frame = np.zeros((1, 32, 32, 3), dtype=np.float32)
        assert patchify_frame(frame, 4).shape == (64, 48)

    def test_constant_frame_rows_identical(self):
        frame = np.full((1, 16, 16, 3), 0.25, dtype=np.float32)
        rows = patchify_frame(frame, 4)
        assert (rows == rows[0]).all()

    def test_paper_scale_video_patch_count(self):
        clip = np.zeros((16, 128, 128, 3), dtype=np.float32)
        assert patchify_video(clip, 4, 8).shape == (1024, 768)

    def test_small_video_patch_count(self):
        clip = np.zeros((8, 32, 32, 3), dtype=np.float32)
        assert patchify_video(clip, 2, 4).shape == (256, 96)

    def test_zero_motion_tubelets_repeat_subblocks(self):
        frame = np.random.default_rng(0).uniform(-1, 1, (8, 8, 3)).astype(np.float32)
        clip = np.broadcast_to(frame, (4, 8, 8, 3)).copy()
        rows = patchify_video(clip, 2, 4)
        halves = rows.reshape(rows.shape[0], 2, -1)
        np.testing.assert_array_equal(halves[:, 0], halves[:, 1])

    def test_frame_roundtrip_bitwise(self):
        rng = np.random.default_rng(1)
        frame = rng.uniform(-1, 1, (16, 24, 3)).astype(np.float32)
        rows = patchify_frame(frame, 4)
        assert np.array_equal(unpatchify_frame(rows, 16, 24, 4), frame)

    @given(st.integers(0, 2**31 - 1))
    @settings(max_examples=20, deadline=None)
    def test_video_roundtrip_bitwise(self, seed):
        rng = np.random.default_rng(seed)
        clip = rng.uniform(-1, 1, (4, 8, 12, 3)).astype(np.float32)
        rows = patchify_video(clip, 2, 4)
        assert np.array_equal(unpatchify_video(rows, 4, 8, 12, 2, 4), clip)

    def test_indivisible_dims_rejected(self):
        frame = np.zeros((1, 10, 10, 3), dtype=np.float32)
        with pytest.raises(ContractError):
            patchify_frame(frame, 4)


class TestConfig:
    def test_token_count_arithmetic(self):
        cfg = TokenizerConfig(frames=16, height=128, width=128, t_patch=4,
                              patch=8, tokens_appearance=256, tokens_motion=768,
                              dim=768, code_dim=16, codebook_size=8192,
                              n_layers=12)
        assert cfg.patches_per_frame == 256
        assert cfg.patches_per_clip == 1024
        assert cfg.seq_len == 1024
        assert cfg.decoder_queries == 1024

    def test_invalid_configs_rejected(self):
        with pytest.raises(ContractError):
            TokenizerConfig(frames=7, t_patch=2)
        with pytest.raises(ContractError):
            TokenizerConfig(height=30, patch=8)
        with pytest.raises(ContractError):
            TokenizerConfig(align_depth=9, n_layers=4)
        with pytest.raises(ContractError):
            TokenizerConfig(tokens_appearance=0)


class TestEncoder:
    def test_output_shapes_desk_scale(self):
        cfg = TokenizerConfig(frames=8, height=32, width=32, t_patch=2, patch=4,
                              tokens_appearance=16, tokens_motion=48, dim=64,
                              code_dim=8, codebook_size=32, n_layers=2)
        model = TokenizerModel(cfg, seed=0)
        pix = np.zeros((2, 8, 32, 32, 3), dtype=np.float32)
        out = model.encode(pix)
        assert out.z_appearance.shape == (2, 16, 64)
        assert out.z_motion.shape == (2, 48, 64)
        assert out.feat_appearance.shape == (2, 64, 64)
        assert out.feat_motion.shape == (2, 256, 64)

    def test_streams_are_independent_passes(self):
        model = TokenizerModel(TINY, seed=0)
        pix = tiny_pixels()
        out1 = model.encode(pix)
        # permute frames 1.. (appearance input untouched, motion input changes)
        permuted = pix.copy()
        permuted[:, 1:] = permuted[:, :0:-1]
        out2 = model.encode(permuted)
        assert np.array_equal(out1.z_appearance.data, out2.z_appearance.data)
        assert not np.array_equal(out1.z_motion.data, out2.z_motion.data)

    def test_align_depth_final_layer_taps_final_block(self):
        # tap at depth == n_layers is the final output itself
        from dera.autodiff import ParamStore
        from dera.nn import TransformerStack
        store = ParamStore(seed=0)
        stack = TransformerStack(store, "s", 32, 3, 2)
        x = constant(np.random.default_rng(0).normal(size=(2, 6, 32)).astype(np.float32))
        out, tapped = stack(x, tap_layer=3)
        assert tapped is out
        out2, tapped2 = stack(x, tap_layer=2)
        assert tapped2 is not out2
        assert not np.array_equal(tapped2.data, out2.data)

    def test_align_depth_changes_tapped_features_only(self):
        kw = dict(frames=4, height=8, width=8, t_patch=2, patch=4,
                  tokens_appearance=3, tokens_motion=5, dim=32,
                  code_dim=4, codebook_size=16, n_layers=2)
        shallow = TokenizerModel(TokenizerConfig(align_depth=1, **kw), seed=1)
        deep = TokenizerModel(TokenizerConfig(align_depth=2, **kw), seed=1)
        pix = tiny_pixels(cfg=shallow.cfg)
        out_s = shallow.encode(pix)
        out_d = deep.encode(pix)
        assert np.array_equal(out_s.z_appearance.data, out_d.z_appearance.data)
        assert not np.array_equal(out_s.feat_appearance.data,
                                  out_d.feat_appearance.data)

    def test_shape_mismatch_rejected(self):
        model = TokenizerModel(TINY, seed=0)
        with pytest.raises(ContractError):
            model.encode(np.zeros((1, 4, 8, 10, 3), dtype=np.float32))

    def test_stream_isolation_gradients(self):
        # a loss on appearance queries leaves motion queries with zero grads
        model = TokenizerModel(TINY, seed=0)
        out = model.encode(tiny_pixels())
        loss = reduce_sum(mul(out.z_appearance, out.z_appearance))
        gv = backward(loss, model.store)
        assert np.abs(gv.block("encoder.queries_motion")).sum() == 0.0
        assert np.abs(gv.block("encoder.queries_appearance")).sum() > 0.0
        # shared encoder weights receive gradient from the appearance pass
        assert np.abs(gv.block("encoder.stack.block0.attn.wq.w")).sum() > 0.0

        loss_m = reduce_sum(mul(out.z_motion, out.z_motion))
        gv_m = backward(loss_m, model.store)
        assert np.abs(gv_m.block("encoder.queries_appearance")).sum() == 0.0
        assert np.abs(gv_m.block("encoder.queries_motion")).sum() > 0.0


class TestQuantizer:
    def test_exact_codebook_row_snaps_with_zero_loss(self):
        cfg = TokenizerConfig(frames=4, height=8, width=8, t_patch=2, patch=4,
                              tokens_appearance=2, tokens_motion=2, dim=4,
                              code_dim=4, codebook_size=16, n_layers=1)
        model = TokenizerModel(cfg, seed=0)
        q = model.quantizer
        # make the projection the identity
        q.proj_in.w.data[:] = np.eye(4, dtype=np.float32)
        q.proj_in.b.data[:] = 0
        z = constant(q.codebook.data[7][None, None, :].copy())
        result = q.quantize(z)
        assert result.indices[0, 0] == 7
        np.testing.assert_array_equal(result.codes.data[0, 0], q.codebook.data[7])
        diff = result.pre.data - result.snapped.data
        assert np.abs(diff).max() == 0.0

    def test_tie_breaks_to_lowest_index(self):
        cfg = TokenizerConfig(frames=4, height=8, width=8, t_patch=2, patch=4,
                              tokens_appearance=2, tokens_motion=2, dim=2,
                              code_dim=2, codebook_size=8, n_layers=1)
        model = TokenizerModel(cfg, seed=0)
        q = model.quantizer
        q.codebook.data[:] = 99.0
        q.codebook.data[2] = [1.0, 0.0]
        q.codebook.data[5] = [-1.0, 0.0]   # equidistant from the origin
        idx = q.nearest(np.zeros((1, 2), dtype=np.float32))
        assert idx[0] == 2

    @given(st.integers(0, 2**31 - 1))
    @settings(max_examples=15, deadline=None)
    def test_indices_match_exhaustive_scan(self, seed):
        rng = np.random.default_rng(seed)
        cfg = TokenizerConfig(frames=4, height=8, width=8, t_patch=2, patch=4,
                              tokens_appearance=2, tokens_motion=2, dim=4,
                              code_dim=4, codebook_size=16, n_layers=1)
        model = TokenizerModel(cfg, seed=0)
        q = model.quantizer
        q.codebook.data[:] = rng.normal(size=q.codebook.data.shape).astype(np.float32)
        rows = rng.normal(size=(40, 4)).astype(np.float32)
        got = q.nearest(rows)
        expected = [
            min(range(16), key=lambda k: ((row - q.codebook.data[k]) ** 2).sum())
            for row in rows
        ]
        np.testing.assert_array_equal(got, expected)

    def test_quantized_rows_are_codebook_rows(self):
        model = TokenizerModel(TINY, seed=3)
        out = model.encode(tiny_pixels(seed=4))
        result = model.quantize(out)
        flat_codes = result.codes.data.reshape(-1, TINY.code_dim)
        flat_idx = result.indices.reshape(-1)
        np.testing.assert_array_equal(flat_codes,
                                      model.quantizer.codebook.data[flat_idx])

    @pytest.mark.parametrize("seed", range(10))
    def test_straight_through_gradient_equality(self, seed):
        # d(downstream)/d(pre-projection) through the snap equals
        # d(downstream)/d(quantized value) evaluated at the same point
        from dera.autodiff import embedding, gelu, straight_through
        rng = np.random.default_rng(seed)
        codebook = Parameter("cb", rng.normal(size=(16, 4)).astype(np.float32))
        pre = Parameter("pre", rng.normal(size=(6, 4)).astype(np.float32))
        d2 = ((pre.data[:, None, :] - codebook.data[None]) ** 2).sum(-1)
        idx = d2.argmin(1)
        snapped = embedding(codebook.value, idx)
        codes = straight_through(pre.value, snapped)
        w = constant(rng.normal(size=(6, 4)).astype(np.float32))
        grad_pre = backward(reduce_sum(gelu(mul(codes, w))), [pre]).flat

        y_leaf = Parameter("y", codes.data.copy())
        grad_y = backward(reduce_sum(gelu(mul(y_leaf.value, w))), [y_leaf]).flat
        rel = np.abs(grad_pre - grad_y) / (np.abs(grad_y) + 1e-8)
        assert rel.max() < 1e-5

    def test_dead_code_reinit(self):
        model = TokenizerModel(TINY, seed=0)
        q = model.quantizer
        counts = np.zeros(TINY.codebook_size, dtype=np.int64)
        counts[:4] = 5
        pool = np.full((6, TINY.code_dim), 3.25, dtype=np.float32)
        n = q.reinit_dead(counts, pool, np.random.default_rng(0))
        assert n == TINY.codebook_size - 4
        np.testing.assert_array_equal(q.codebook.data[4:],
                                      np.full((n, TINY.code_dim), 3.25))


class TestDecodeAndCompose:
    def test_decode_shape_and_determinism(self):
        model = TokenizerModel(TINY, seed=0)
        rng = np.random.default_rng(0)
        codes = rng.normal(size=(2, TINY.seq_len, TINY.code_dim)).astype(np.float32)
        a = model.decode(codes)
        b = model.decode(codes)
        assert a.shape == (2, 4, 8, 8, 3)
        assert np.array_equal(a.data, b.data)
        assert a.data.min() >= -1.0 and a.data.max() <= 1.0

    def test_decode_length_mismatch_rejected(self):
        model = TokenizerModel(TINY, seed=0)
        with pytest.raises(ContractError):
            model.decode(np.zeros((1, 3, TINY.code_dim), dtype=np.float32))

    def test_tokenize_lengths(self):
        paper = TokenizerConfig(frames=16, height=128, width=128, t_patch=4,
                                patch=8, tokens_appearance=256,
                                tokens_motion=768, dim=768, code_dim=16,
                                codebook_size=8192, n_layers=12)
        assert paper.seq_len == 1024
        model = TokenizerModel(TINY, seed=0)
        clip = generate_clip(spec_for(0, 0, seed=0, H=8, W=8, T=4), seed=0,
                             T=4, H=8, W=8)
        seq = model.tokenize(clip)
        assert len(seq) == TINY.seq_len
        assert seq.indices.max() < TINY.codebook_size

    def test_detokenize_matches_reconstruction_path_bitwise(self):
        model = TokenizerModel(TINY, seed=0)
        clip = generate_clip(spec_for(1, 1, seed=0, H=8, W=8, T=4), seed=0,
                             T=4, H=8, W=8)
        seq = model.tokenize(clip)
        via_tokens = model.detokenize(seq)
        via_graph = model.forward(clip.pixels[None]).recon
        assert np.array_equal(via_tokens.pixels,
                              np.asarray(via_graph.data[0], dtype=np.float32))

    def test_detokenize_rejects_out_of_range(self):
        model = TokenizerModel(TINY, seed=0)
        seq = TokenSequence(np.zeros(TINY.seq_len, dtype=np.int64),
                            TINY.tokens_appearance, TINY.tokens_motion)
        seq.indices[0] = TINY.codebook_size
        with pytest.raises(ContractError):
            model.detokenize(seq)


class TestSwap:
    def make_pair(self):
        rng = np.random.default_rng(0)
        a = TokenSequence(rng.integers(0, 16, 8), 3, 5)
        b = TokenSequence(rng.integers(0, 16, 8), 3, 5)
        return a, b

    def test_swap_appearance_is_involution(self):
        a, b = self.make_pair()
        a2, b2 = swap_tokens(*swap_tokens(a, b, "appearance"), "appearance")
        np.testing.assert_array_equal(a2.indices, a.indices)
        np.testing.assert_array_equal(b2.indices, b.indices)

    @given(st.integers(0, 2**31 - 1))
    @settings(max_examples=20, deadline=None)
    def test_swap_motion_keeps_appearance_blocks(self, seed):
        rng = np.random.default_rng(seed)
        a = TokenSequence(rng.integers(0, 16, 8), 3, 5)
        b = TokenSequence(rng.integers(0, 16, 8), 3, 5)
        a2, b2 = swap_tokens(a, b, "motion")
        np.testing.assert_array_equal(a2.appearance, a.appearance)
        np.testing.assert_array_equal(b2.appearance, b.appearance)
        np.testing.assert_array_equal(a2.motion, b.motion)
        assert len(a2) == len(a) and len(b2) == len(b)

    def test_layout_mismatch_rejected(self):
        a = TokenSequence(np.zeros(8, np.int64), 3, 5)
        b = TokenSequence(np.zeros(8, np.int64), 4, 4)
        with pytest.raises(ContractError):
            swap_tokens(a, b, "appearance")

    def test_unknown_block_rejected(self):
        a, b = self.make_pair()
        with pytest.raises(ContractError):
            swap_tokens(a, b, "texture")
