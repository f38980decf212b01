"""Conflict detection and loss reformulation over a 2-parameter toy model."""

import numpy as np
import pytest

from dera.autodiff import Parameter, backward, constant, mul, reduce_sum
from dera.sacp import conflict_rate, sacp_reformulate


def toy_losses(coeff_a, coeff_m, dtype=np.float64):
    """Two linear losses over one 2-vector parameter; gradients are the
    coefficient vectors themselves."""
    p = Parameter("theta", np.zeros(2, dtype=dtype))
    la = reduce_sum(mul(p.value, constant(np.asarray(coeff_a, dtype=dtype))))
    lm = reduce_sum(mul(p.value, constant(np.asarray(coeff_m, dtype=dtype))))
    return p, la, lm


def grads_of(loss, p):
    return backward(loss, [p]).flat


class TestHandDerivedCases:
    def test_orthogonal_passes_through_unchanged(self):
        p, la, lm = toy_losses([1, 0], [0, 1])
        re_a, re_m, outcome = sacp_reformulate(la, lm, [p])
        assert re_a is la and re_m is lm
        assert not outcome.conflicted
        assert outcome.inner == pytest.approx(0.0)
        assert outcome.coeff_a is None and outcome.coeff_m is None

    def test_antiparallel_equal_norms_cancel(self):
        p, la, lm = toy_losses([1, 0], [-1, 0])
        re_a, re_m, outcome = sacp_reformulate(la, lm, [p], eps=1e-12)
        assert outcome.conflicted
        assert outcome.inner == pytest.approx(-1.0)
        assert outcome.coeff_a == pytest.approx(-1.0, abs=1e-9)
        assert outcome.coeff_m == pytest.approx(-1.0, abs=1e-9)
        np.testing.assert_allclose(grads_of(re_a, p), [0.0, 0.0], atol=1e-5)
        np.testing.assert_allclose(grads_of(re_m, p), [0.0, 0.0], atol=1e-5)

    def test_oblique_conflict_case(self):
        p, la, lm = toy_losses([1, 0], [-1, 1])
        re_a, re_m, outcome = sacp_reformulate(la, lm, [p], eps=1e-12)
        assert outcome.inner == pytest.approx(-1.0)
        assert outcome.coeff_a == pytest.approx(-1 / np.sqrt(2), abs=1e-9)
        assert outcome.coeff_m == pytest.approx(-1.0, abs=1e-9)
        np.testing.assert_allclose(grads_of(re_a, p),
                                   [1 - 1 / np.sqrt(2), 1 / np.sqrt(2)],
                                   atol=1e-5)
        np.testing.assert_allclose(grads_of(re_m, p), [0.0, 1.0], atol=1e-5)


class TestBranchAndAlgebra:
    def test_pass_through_is_bitwise_identity_over_random_pairs(self):
        rng = np.random.default_rng(0)
        checked = 0
        for _ in range(1000):
            ca = rng.normal(size=2)
            cm = rng.normal(size=2)
            p, la, lm = toy_losses(ca, cm)
            re_a, re_m, outcome = sacp_reformulate(la, lm, [p])
            if outcome.conflicted:
                assert float(ca @ cm) < 0
                continue
            assert re_a is la and re_m is lm
            checked += 1
        assert checked > 300  # both branches exercised

    def test_reformulated_gradients_match_linear_combination(self):
        rng = np.random.default_rng(7)
        for _ in range(50):
            ca = rng.normal(size=2)
            cm = rng.normal(size=2)
            if float(ca @ cm) >= 0:
                continue
            p, la, lm = toy_losses(ca, cm)
            re_a, re_m, outcome = sacp_reformulate(la, lm, [p])
            g_re_a = grads_of(re_a, p)
            g_re_m = grads_of(re_m, p)
            expect_a = ca - outcome.coeff_a * cm
            expect_m = cm - outcome.coeff_m * ca
            rel_a = np.abs(g_re_a - expect_a) / (np.abs(expect_a) + 1e-8)
            rel_m = np.abs(g_re_m - expect_m) / (np.abs(expect_m) + 1e-8)
            assert rel_a.max() < 1e-5
            assert rel_m.max() < 1e-5

    def test_weighted_total_backward_matches_reformulated_combination(self):
        # backward of wa*re_a + wm*re_m equals wa(ga - ca gm) + wm(gm - cm ga)
        rng = np.random.default_rng(11)
        wa, wm = 1.0, 0.5
        for _ in range(20):
            ca = rng.normal(size=2)
            cm = rng.normal(size=2)
            if float(ca @ cm) >= 0:
                continue
            p, la, lm = toy_losses(ca, cm)
            re_a, re_m, outcome = sacp_reformulate(la, lm, [p])
            total = mul(constant(np.float64(wa)), re_a) \
                + mul(constant(np.float64(wm)), re_m)
            got = grads_of(total, p)
            expect = wa * (ca - outcome.coeff_a * cm) + wm * (cm - outcome.coeff_m * ca)
            rel = np.abs(got - expect) / (np.abs(expect) + 1e-8)
            assert rel.max() < 1e-5

    def test_conflict_coefficients_nonpositive(self):
        rng = np.random.default_rng(3)
        seen = 0
        for _ in range(200):
            ca = rng.normal(size=2)
            cm = rng.normal(size=2)
            p, la, lm = toy_losses(ca, cm)
            _, _, outcome = sacp_reformulate(la, lm, [p])
            if outcome.conflicted:
                assert outcome.coeff_a <= 0
                assert outcome.coeff_m <= 0
                seen += 1
        assert seen > 30

    def test_symmetry_under_argument_swap(self):
        p1, la1, lm1 = toy_losses([2.0, -1.0], [-3.0, 0.5])
        re_a, re_m, out1 = sacp_reformulate(la1, lm1, [p1])
        p2, la2, lm2 = toy_losses([2.0, -1.0], [-3.0, 0.5])
        sw_m, sw_a, out2 = sacp_reformulate(lm2, la2, [p2])
        assert out1.inner == out2.inner
        assert out1.coeff_a == out2.coeff_m
        assert out1.coeff_m == out2.coeff_a
        assert float(re_a.data) == float(sw_a.data)
        assert float(re_m.data) == float(sw_m.data)
        np.testing.assert_array_equal(grads_of(re_a, p1), grads_of(sw_a, p2))

    def test_positive_rescaling_relation(self):
        eps = 1e-8
        ca = np.array([1.0, -2.0])
        cm = np.array([-1.5, -0.5])
        assert float(ca @ cm) < 0
        p, la, lm = toy_losses(ca, cm)
        _, _, base = sacp_reformulate(la, lm, [p], eps=eps)
        for k in (0.1, 2.0, 25.0):
            p2, la2, lm2 = toy_losses(ca, k * cm)
            _, _, scaled = sacp_reformulate(la2, lm2, [p2], eps=eps)
            expect_ca = k * base.inner / (k * base.norm_m + eps)
            expect_cm = k * base.inner / (base.norm_a + eps)
            assert scaled.coeff_a == pytest.approx(expect_ca, rel=1e-9)
            assert scaled.coeff_m == pytest.approx(expect_cm, rel=1e-9)

    def test_epsilon_validation_and_empty_params(self):
        p, la, lm = toy_losses([1, 0], [0, 1])
        with pytest.raises(Exception):
            sacp_reformulate(la, lm, [p], eps=0.0)
        with pytest.raises(Exception):
            sacp_reformulate(la, lm, {})


class TestConflictRate:
    def test_extremes_and_mixture(self):
        assert conflict_rate([True] * 10) == 1.0
        assert conflict_rate([False] * 10) == 0.0
        assert conflict_rate([True] * 3 + [False] * 7) == pytest.approx(0.3)

    def test_window(self):
        history = [True] * 5 + [False] * 5
        assert conflict_rate(history, window=5) == 0.0
        assert conflict_rate(history, window=10) == 0.5

    def test_accepts_outcomes(self):
        p, la, lm = toy_losses([1, 0], [-1, 0])
        _, _, out = sacp_reformulate(la, lm, [p])
        assert conflict_rate([out]) == 1.0
