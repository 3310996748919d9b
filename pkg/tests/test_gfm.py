"""Orbit sampling, attention pooling, and the equivariance harness."""

import math

import numpy as np
import pytest

from lagr.autodiff import DiffValue, backward
from lagr.field import DimensionError, FeatureField
from lagr.gfm import (
    ConstructiveOrbitExtractor,
    ConvBaselineExtractor,
    EmptyOverlap,
    GfmOutput,
    GfmParams,
    attention_weights,
    ee_margin,
    ee_sweep,
    equivariance_error,
    generate_transforms,
    gfm_forward,
    gfm_forward_diff,
    random_smooth_field,
    sweep_curves,
    sweep_to_csv,
)
from lagr.projective import (
    DegenerateTransform,
    canonicalize,
    identity,
    pixel_frame,
    random_perturbation,
    scaling,
    translation,
    warp_field,
)


def params_with_bias_orbit(channels=3, k=2, out_channels=None, hidden=4):
    """w1 = w2 = 0 so the transforms come straight from b2."""
    out_channels = channels if out_channels is None else out_channels
    return GfmParams(
        w1=np.zeros((hidden, channels)),
        b1=np.zeros(hidden),
        w2=np.zeros((9 * k, hidden)),
        b2=np.tile(np.eye(3).ravel(), k),
        attn_w=np.zeros((k, channels)),
        attn_b=np.zeros(k),
        w_proj=np.eye(out_channels, channels),
        k=k,
    )


class TestGenerateTransforms:
    def test_bias_only_orbit_is_identity(self):
        f = FeatureField(np.random.default_rng(0).standard_normal((2, 3, 5, 5)))
        p = params_with_bias_orbit()
        ts = generate_transforms(f, p)
        want = canonicalize(np.eye(3)).m
        for row in ts:
            assert len(row) == 2
            for t in row:
                np.testing.assert_array_equal(t.m, want)

    def test_identical_batch_items_get_identical_transforms(self):
        rng = np.random.default_rng(1)
        one = rng.standard_normal((1, 3, 6, 6))
        f = FeatureField(np.concatenate([one, one]))
        p = GfmParams.init(3, k=3, rng=2)
        p.w2 = rng.standard_normal(p.w2.shape) * 0.05
        ts = generate_transforms(f, p)
        for a, b in zip(ts[0], ts[1]):
            np.testing.assert_array_equal(a.m, b.m)

    def test_norms_are_unit_across_random_params(self):
        rng = np.random.default_rng(7)
        f = FeatureField(rng.standard_normal((1, 3, 4, 4)))
        checked = 0
        for trial in range(100):
            p = GfmParams.init(3, k=2, rng=1000 + trial)
            p.b2 = rng.standard_normal(18)
            try:
                ts = generate_transforms(f, p)
            except DegenerateTransform:
                continue
            for t in ts[0]:
                assert abs(np.linalg.norm(t.m) - 1.0) <= 1e-9
                checked += 1
        assert checked >= 150  # the degenerate-draw rate is tiny

    def test_degenerate_raw_matrix_reports_indices(self):
        f = FeatureField(np.ones((1, 3, 4, 4)))
        p = params_with_bias_orbit()
        p.b2 = np.zeros(18)
        with pytest.raises(DegenerateTransform, match="batch item 0, orbit sample 0"):
            generate_transforms(f, p)

    def test_channel_mismatch_rejected(self):
        f = FeatureField(np.ones((1, 5, 4, 4)))
        with pytest.raises(DimensionError):
            generate_transforms(f, params_with_bias_orbit(channels=3))


class TestAttentionWeights:
    def test_zero_head_is_uniform(self):
        p = params_with_bias_orbit(k=2)
        w = attention_weights(np.array([1.0, -2.0, 0.5]), p)
        np.testing.assert_allclose(w, [0.5, 0.5], rtol=0, atol=1e-15)

    def test_large_bias_saturates_to_one_hot(self):
        p = params_with_bias_orbit(channels=3, k=4)
        p.attn_w = np.zeros((4, 3))
        p.attn_b = np.array([40.0, 0.0, 0.0, 0.0])
        w = attention_weights(np.zeros(3), p)
        assert abs(w[0] - 1.0) < 1e-6
        assert w[0] <= 1.0 and w[0] > 1.0 - 1e-15
        assert w[1:].max() < 1e-6

    def test_logit_shift_invariance(self):
        p = params_with_bias_orbit(channels=3, k=4)
        p.attn_b = np.array([0.3, -1.2, 2.0, 0.1])
        w1 = attention_weights(np.zeros(3), p)
        p.attn_b = p.attn_b + 7.5
        w2 = attention_weights(np.zeros(3), p)
        np.testing.assert_allclose(w1, w2, rtol=0, atol=1e-15)

    def test_simplex_postcondition(self):
        rng = np.random.default_rng(3)
        p = GfmParams.init(4, k=5, rng=0)
        p.attn_w = rng.standard_normal((5, 4))
        p.attn_b = rng.standard_normal(5)
        w = attention_weights(rng.standard_normal(4), p)
        assert (w >= 0).all()
        assert abs(w.sum() - 1.0) <= 1e-9


class TestGfmForward:
    def test_identity_orbit_identity_projection_is_bitwise(self):
        rng = np.random.default_rng(5)
        f = FeatureField(rng.standard_normal((2, 3, 8, 8)))
        p = params_with_bias_orbit(channels=3, k=1)
        out = gfm_forward(f, p)
        np.testing.assert_array_equal(out.features.data, f.data)

    def test_one_hot_attention_selects_single_warp(self):
        rng = np.random.default_rng(6)
        f = FeatureField(rng.standard_normal((1, 3, 10, 10)))
        p = params_with_bias_orbit(channels=3, k=2)
        shift = translation(2.0, 1.0)
        p.b2 = np.concatenate([np.eye(3).ravel(), shift.m.ravel()])
        p.attn_b = np.array([0.0, 60.0])
        out = gfm_forward(f, p)
        want = warp_field(shift, FeatureField(f.data)).field.data
        np.testing.assert_allclose(out.features.data, want, rtol=0, atol=1e-15)

    def test_constant_field_stays_constant_under_expanding_orbit(self):
        c = 0.7
        f = FeatureField(np.full((1, 2, 16, 16), c))
        p = params_with_bias_orbit(channels=2, k=3)
        thetas = [np.eye(3), np.diag([1.1, 1.2, 1.0]), np.diag([1.25, 1.0, 1.0])]
        p.b2 = np.concatenate([t.ravel() for t in thetas])
        for t in thetas:
            wr = warp_field(canonicalize(t), f)
            assert wr.valid_mask.min() == 1.0  # full coverage, nothing masked
        out = gfm_forward(f, p)
        np.testing.assert_allclose(out.features.data, c, rtol=0, atol=1e-12)

    def test_blend_is_convex_before_projection(self):
        rng = np.random.default_rng(8)
        f = FeatureField(rng.standard_normal((1, 2, 12, 12)))
        p = GfmParams.init(2, k=3, rng=4)
        p.attn_w = rng.standard_normal((3, 2))
        p.b2 = np.concatenate([
            np.eye(3).ravel(),
            translation(1.0, 0.0).m.ravel(),
            scaling(1.1, 1.1).m.ravel(),
        ])
        ts = generate_transforms(f, p)[0]
        alpha = attention_weights(f.data.mean(axis=(2, 3))[0], p)
        etas, valids = [], []
        for t in ts:
            wr = warp_field(t, f)
            etas.append(wr.field.data[0])
            valids.append(wr.valid_mask)
        blend = sum(a * e for a, e in zip(alpha, etas))
        all_valid = np.logical_and.reduce([v > 0 for v in valids])
        lo = np.minimum.reduce(etas)
        hi = np.maximum.reduce(etas)
        assert (blend[:, all_valid] >= lo[:, all_valid] - 1e-12).all()
        assert (blend[:, all_valid] <= hi[:, all_valid] + 1e-12).all()

    def test_attention_rows_validated_on_output(self):
        with pytest.raises(ValueError):
            GfmOutput(FeatureField(np.ones((1, 1, 2, 2))), [[identity()]],
                      np.array([[0.7, 0.7]]))


class TestDiffForward:
    def test_matches_plain_forward_near_identity(self):
        rng = np.random.default_rng(9)
        f = FeatureField(rng.standard_normal((2, 3, 9, 9)))
        p = GfmParams.init(3, k=2, rng=11)
        p.w2 = rng.standard_normal(p.w2.shape) * 1e-3
        p.attn_w = rng.standard_normal((2, 3)) * 0.3
        want = gfm_forward(f, p).features.data
        leaves = {name: DiffValue(getattr(p, name), requires_grad=True)
                  for name in ("w1", "b1", "w2", "b2", "attn_w", "attn_b", "w_proj")}
        got = gfm_forward_diff(DiffValue(f.data), leaves, k=2)
        np.testing.assert_allclose(got.value, want, rtol=0, atol=1e-10)

    def test_generator_weights_receive_gradient(self):
        rng = np.random.default_rng(10)
        f = FeatureField(rng.standard_normal((1, 2, 8, 8)))
        p = GfmParams.init(2, k=2, rng=12)
        leaves = {name: DiffValue(getattr(p, name), requires_grad=True)
                  for name in ("w1", "b1", "w2", "b2", "attn_w", "attn_b", "w_proj")}
        out = gfm_forward_diff(DiffValue(f.data), leaves, k=2)
        backward((out * out).sum())
        assert leaves["b2"].grad is not None
        assert np.abs(leaves["b2"].grad).max() > 0
        assert leaves["w_proj"].grad is not None
        assert np.abs(leaves["w_proj"].grad).max() > 0


class _Pointwise:
    """Test double: channelwise linear map, validity passes straight through."""

    def __init__(self, w):
        self.w = np.asarray(w, dtype=np.float64)

    def __call__(self, f):
        return FeatureField(np.einsum("oc,bchw->bohw", self.w, f.data))

    def propagate_mask(self, mask):
        return mask >= 1.0 - 1e-12


class TestEquivarianceError:
    def setup_method(self):
        self.f = random_smooth_field(np.random.default_rng(21), 1, 3, 32, 32)

    def test_identity_extractor_scores_zero(self):
        ex = _Pointwise(np.eye(3))
        g = pixel_frame(random_perturbation(0.05, 2), 32, 32)
        assert equivariance_error(ex, g, self.f, 4) <= 1e-9

    def test_pointwise_doubling_scores_zero(self):
        ex = _Pointwise(2.0 * np.eye(3))
        g = pixel_frame(random_perturbation(0.08, 3), 32, 32)
        assert equivariance_error(ex, g, self.f, 5) <= 1e-9

    def test_integer_translation_with_channel_mixer(self):
        w = np.random.default_rng(4).standard_normal((3, 3))
        ex = _Pointwise(w)
        assert equivariance_error(ex, translation(4.0, -3.0), self.f, 5) <= 1e-12

    def test_empty_overlap_raises(self):
        ex = _Pointwise(np.eye(3))
        with pytest.raises(EmptyOverlap):
            equivariance_error(ex, translation(40.0, 0.0), self.f, 14)

    def test_negative_margin_rejected(self):
        with pytest.raises(ValueError):
            equivariance_error(_Pointwise(np.eye(3)), identity(), self.f, -1)


class TestConstructiveCommutation:
    def test_integer_translations_commute_exactly(self):
        f = random_smooth_field(np.random.default_rng(30), 1, 4, 64, 64)
        ex = ConstructiveOrbitExtractor(4, 64, 64, seed=0)
        for du, dv in [(1.0, 0.0), (3.0, -2.0), (-5.0, 7.0)]:
            g = translation(du, dv)
            ee = equivariance_error(ex, g, f, 8, extractor_warped=ex.conjugated(g))
            assert ee <= 1e-9

    def test_small_random_warps_commute_to_interpolation_error(self):
        f = random_smooth_field(np.random.default_rng(31), 1, 4, 64, 64)
        ex = ConstructiveOrbitExtractor(4, 64, 64, seed=0)
        margin = ee_margin(0.1, 64, 64)
        for seed in range(5):
            g = pixel_frame(random_perturbation(0.1, 100 + seed), 64, 64)
            ee = equivariance_error(ex, g, f, margin, extractor_warped=ex.conjugated(g))
            assert ee < 0.05

    def test_conjugated_extractor_shares_projection(self):
        ex = ConstructiveOrbitExtractor(3, 16, 16, seed=5)
        conj = ex.conjugated(translation(1.0, 0.0))
        assert conj.w_proj is ex.w_proj
        assert len(conj.thetas) == len(ex.thetas)


class TestSweep:
    def test_margin_formula_and_cap(self):
        assert ee_margin(0.1, 64, 64) == 9  # ceil(6.4) + 2
        assert ee_margin(0.3, 64, 64) == 22
        assert ee_margin(0.5, 64, 64) == 28  # capped at (64-8)//2
        assert ee_margin(0.0, 64, 64) == 2

    def test_monotone_and_dominated(self):
        rows = ee_sweep([0.1, 0.2, 0.3, 0.4, 0.5], 12)
        curves = sweep_curves(rows)
        sigmas = sorted(curves)
        orbit = [curves[s][0] for s in sigmas]
        base = [curves[s][1] for s in sigmas]
        for a, b in zip(orbit, orbit[1:]):
            assert b >= a
        for a, b in zip(base, base[1:]):
            assert b >= a
        for o, b in zip(orbit, base):
            assert o < b

    def test_rows_are_deterministic(self):
        a = ee_sweep([0.2], 3, height=32, width=32, channels=2)
        b = ee_sweep([0.2], 3, height=32, width=32, channels=2)
        assert a == b

    def test_csv_layout(self):
        rows = [(0.1, 0, 0.005, 0.03), (0.1, 1, math.nan, 0.04)]
        text = sweep_to_csv(rows)
        lines = text.splitlines()
        assert lines[0] == "sigma,seed,ee_gfm,ee_baseline"
        assert lines[1] == "0.1,0,0.005,0.03"
        assert "nan" in lines[2]
        assert text.endswith("\n")

    def test_baseline_mask_erodes_one_ring(self):
        ex = ConvBaselineExtractor(2)
        mask = np.ones((6, 6))
        got = ex.propagate_mask(mask)
        assert got[1:-1, 1:-1].all()
        assert not got[0].any() and not got[-1].any()
        assert not got[:, 0].any() and not got[:, -1].any()
