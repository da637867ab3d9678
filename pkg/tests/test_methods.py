import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from numpy.testing import assert_allclose

from prefmargin.errors import ValidationError
from prefmargin.methods import (
    LOGISTIC_METHODS,
    METHOD_NAMES,
    MethodConfig,
    evaluate_batch,
    evaluate_scored_batch,
    instance_margin,
    instance_score,
    loss_grad,
    registry_lookup,
    unified_grad,
    unified_loss,
)

import oracles
from conftest import make_scored

logp = st.floats(-30.0, -0.01)
length = st.integers(1, 50)


class TestRegistry:
    def test_dpo(self):
        spec = registry_lookup("dpo")
        assert spec.margin_source == "reference-ratio"
        assert spec.transform_hw == spec.transform_hl == "beta*a"

    def test_simpo(self):
        spec = registry_lookup("simpo")
        assert spec.margin_source == "constant"
        assert spec.transform_hw == "beta/|y_w|*a"

    def test_unknown_lists_names(self):
        with pytest.raises(ValidationError, match="unknown method") as info:
            registry_lookup("zzz")
        for name in METHOD_NAMES:
            assert name in str(info.value)

    def test_ten_methods(self):
        assert len(METHOD_NAMES) == 10
        assert len({registry_lookup(n).margin_source for n in METHOD_NAMES}) >= 6

    @pytest.mark.parametrize("kw", [{"beta": 0.0}, {"tau": -1.0}, {"lambda_w": 0.0}, {"focal_gamma": -0.5}])
    def test_config_validation(self, kw):
        with pytest.raises(ValidationError):
            MethodConfig(**kw)


class TestScore:
    def test_simpo_hand(self):
        spec = registry_lookup("simpo", MethodConfig(beta=2.0))
        assert instance_score(spec, make_scored(-1.0, -2.0)) == 2.0
        assert instance_score(spec, make_scored(-10.0, -10.0, 10, 5)) == 2.0

    @pytest.mark.parametrize("name", [n for n in METHOD_NAMES if n != "kto"])
    def test_symmetric_zero(self, name):
        spec = registry_lookup(name)
        s = make_scored(-3.0, -3.0, 7, 7, ref=(-2.0, -2.5), oracle=(1.0, 0.0))
        assert instance_score(spec, s) == 0.0

    def test_reference_required(self):
        spec = registry_lookup("dpo")
        with pytest.raises(ValidationError, match="reference log-probs required"):
            instance_score(spec, make_scored(-1.0, -2.0))


class TestLossValues:
    def test_dpo_zero_u(self):
        spec = registry_lookup("dpo", MethodConfig(beta=0.1))
        s = make_scored(-2.0, -3.0, ref=(-2.0, -3.0))
        assert_allclose(unified_loss(spec, s, instance_margin(spec, s)), 0.6931472, atol=1e-7)

    def test_simpo(self):
        spec = registry_lookup("simpo", MethodConfig(beta=2.0, gamma_const=1.0))
        s = make_scored(-1.0, -2.0)
        assert_allclose(unified_loss(spec, s, 1.0), 0.3132617, atol=1e-7)

    def test_ipo_residual(self):
        spec = registry_lookup("ipo", MethodConfig(beta=0.5))
        # gamma = 0 + 1/(2*0.5) = 1; r = 0 so r - gamma = -1
        s = make_scored(-2.0, -2.0, ref=(-1.0, -1.0))
        assert_allclose(unified_loss(spec, s, instance_margin(spec, s)), 1.0, rtol=1e-15)

    def test_dpo_equals_simpo_c0(self):
        cfg = MethodConfig(beta=1.3, gamma_const=0.0)
        s = make_scored(-4.0, -6.5, ref=(-5.0, -5.0))
        dpo = registry_lookup("dpo", cfg)
        simpo = registry_lookup("simpo", cfg)
        assert_allclose(unified_loss(dpo, s, instance_margin(dpo, s)), unified_loss(simpo, s, 0.0), atol=1e-12)

    def test_kto_loss_is_weight_minus_score(self):
        spec = registry_lookup("kto", MethodConfig(beta=0.7, lambda_w=1.3, lambda_l=0.8))
        s = make_scored(-2.0, -4.0, ref=(-3.0, -3.5))
        g = unified_grad(spec, s, None, z_ref=0.2)
        assert_allclose(g.loss, 1.3 - instance_score(spec, s, z_ref=0.2), rtol=1e-12)
        assert g.margin_used is None


class TestGradValues:
    def test_dpo(self):
        spec = registry_lookup("dpo", MethodConfig(beta=0.1))
        s = make_scored(-2.0, -3.0, ref=(-2.0, -3.0))
        g = unified_grad(spec, s, instance_margin(spec, s))
        assert_allclose([g.d_logp_w, g.d_logp_l], [-0.05, 0.05], rtol=1e-12)

    def test_cpo(self):
        spec = registry_lookup("cpo", MethodConfig(beta=1.0, lambda_sft=1.0))
        g = unified_grad(spec, make_scored(-2.0, -2.0), None)
        assert_allclose([g.d_logp_w, g.d_logp_l], [-1.5, 0.5], rtol=1e-12)

    @pytest.mark.parametrize("name", sorted(LOGISTIC_METHODS - {"cpo"}))
    def test_saturation(self, name):
        spec = registry_lookup(name)
        g = loss_grad(spec, -0.01, -900.0, 0.0, 1, 1, -1.0, -1.0, 0.0)
        assert abs(g.d_logp_w) < 1e-12 and abs(g.d_logp_l) < 1e-12

    def test_slic_kink(self):
        spec = registry_lookup("slic", MethodConfig(tau=1.0, lambda_sft=0.5))
        # 1 - tau * (r - gamma) == 0 exactly
        g = loss_grad(spec, -1.0, -2.0, 0.0, c_w=-1.0, c_l=-1.0)
        assert g.kink
        assert g.d_theta_magnitude == 0.0
        assert g.d_logp_l == 0.0
        assert g.d_logp_w == -0.5

    def test_unified_grad_requires_margin(self):
        with pytest.raises(ValidationError, match="requires a margin"):
            unified_grad(registry_lookup("simpo"), make_scored(-1.0, -2.0), None)


def _fd(f, x, h=1e-5):
    return (f(x + h) - f(x - h)) / (2 * h)


class TestAgainstOracle:
    """Loss values and partials against the closed-form oracle losses."""

    @pytest.mark.parametrize("name", METHOD_NAMES)
    def test_random_instances(self, name):
        rng = np.random.default_rng(METHOD_NAMES.index(name))
        cfg = MethodConfig(
            beta=float(rng.uniform(0.2, 3.0)),
            gamma_const=float(rng.uniform(0, 2)),
            tau=float(rng.uniform(0.5, 2)),
            lambda_sft=float(rng.uniform(0, 1)),
            lambda_w=float(rng.uniform(0.5, 1.5)),
            lambda_l=float(rng.uniform(0.5, 1.5)),
            focal_gamma=float(rng.uniform(0, 2)),
        )
        spec = registry_lookup(name, cfg)
        for _ in range(50):
            a_w, a_l, c_w, c_l = rng.uniform(-8, -0.1, 4)
            len_w, len_l = rng.integers(1, 20, 2)
            delta_r = float(rng.normal())
            margin_in = float(rng.uniform(0, 3))
            z_ref = float(rng.uniform(0, 1))
            if name in ("alpha_dpo", "amapo"):
                margin = margin_in
            else:
                margin = instance_margin(spec, make_scored(a_w, a_l, len_w, len_l, (c_w, c_l), (delta_r, 0.0)))
            g = loss_grad(spec, a_w, a_l, margin, len_w, len_l, c_w, c_l, z_ref)

            def f(aw, al):
                return oracles.method_loss(name, cfg, aw, al, len_w, len_l, c_w, c_l, delta_r, margin_in, z_ref)

            assert_allclose(g.loss, f(a_w, a_l), rtol=1e-10, atol=1e-12)
            if g.kink:
                continue
            assert_allclose(g.d_logp_w, _fd(lambda x: f(x, a_l), a_w), rtol=1e-5, atol=1e-7)
            assert_allclose(g.d_logp_l, _fd(lambda x: f(a_w, x), a_l), rtol=1e-5, atol=1e-7)


class TestProperties:
    @pytest.mark.parametrize("name", sorted(LOGISTIC_METHODS))
    @given(a_w=logp, a_l=logp, c=logp, lw=length, ll=length, margin=st.floats(0, 5))
    @settings(max_examples=60, deadline=None)
    def test_sign_structure(self, name, a_w, a_l, c, lw, ll, margin):
        cfg = MethodConfig(lambda_sft=0.5)
        spec = registry_lookup(name, cfg)
        g = loss_grad(spec, a_w, a_l, margin, lw, ll, c, c, 0.0)
        assert g.d_logp_w <= 0.0 and g.d_logp_l >= 0.0
        if name == "cpo":
            plain = loss_grad(registry_lookup("dpo", cfg), a_w, a_l, 0.0, lw, ll, c, c)
            assert_allclose(g.d_logp_w, plain.d_logp_w - 0.5, rtol=1e-12)

    @pytest.mark.parametrize("name", ["dpo", "simpo", "odpo", "alpha_dpo", "amapo"])
    @given(r=st.floats(-20, 20), g1=st.floats(-5, 5), dg=st.floats(1e-3, 5))
    @settings(max_examples=60, deadline=None)
    def test_d_theta_increasing_in_margin(self, name, r, g1, dg):
        spec = registry_lookup(name, MethodConfig(beta=1.0))
        # equal unit lengths and zero reference: score equals a_w - a_l for every method here
        a_l = -30.0
        a_w = a_l + r
        lo = loss_grad(spec, a_w, a_l, g1, 1, 1, 0.0, 0.0).d_theta_magnitude
        hi = loss_grad(spec, a_w, a_l, g1 + dg, 1, 1, 0.0, 0.0).d_theta_magnitude
        assert hi > lo or (lo == hi == 1.0)

    def test_focal_interior_maximum(self):
        spec = registry_lookup("focalpo", MethodConfig(beta=1.0, focal_gamma=1.0))
        grid = np.linspace(-10, 10, 2001)
        d = np.array([loss_grad(spec, -20.0 + u, -20.0, 0.0, c_w=0.0, c_l=0.0).d_theta_magnitude for u in grid])
        peak = int(np.argmax(d))
        assert 0 < peak < len(grid) - 1
        assert d[peak] > d[0] and d[peak] > d[-1]


class TestBatch:
    def test_kto_reference_point_clamped(self):
        spec = registry_lookup("kto", MethodConfig(beta=1.0))
        ev = evaluate_batch(spec, [-1.0, -1.0], [-3.0, -2.0], [1, 1], [1, 1], [-1.0, -1.0], [-1.0, -1.0])
        assert ev.z_ref == 0.0
        ev = evaluate_batch(spec, [-1.0, -1.0], [-0.5, -1.5], [1, 1], [1, 1], [-1.0, -1.0], [-2.0, -2.0])
        assert_allclose(ev.z_ref, 1.0)

    def test_alpha_margins_vs_oracle(self, rng):
        cfg = MethodConfig(beta=1.5, gamma_const=0.7, alpha=0.3)
        spec = registry_lookup("alpha_dpo", cfg)
        a_w, a_l, c_w, c_l = (rng.uniform(-9, -0.5, 6).tolist() for _ in range(4))
        ev = evaluate_batch(spec, a_w, a_l, [3] * 6, [4] * 6, c_w, c_l)
        gaps = [1.5 * ((a_w[i] - c_w[i]) - (a_l[i] - c_l[i])) for i in range(6)]
        assert_allclose(ev.margins, oracles.alpha_margins(gaps, 0.7, 0.3), rtol=1e-12)

    def test_alpha_constant_batch(self):
        spec = registry_lookup("alpha_dpo", MethodConfig(gamma_const=0.4))
        ev = evaluate_batch(spec, [-1.0] * 3, [-2.0] * 3, [1] * 3, [1] * 3, [-1.0] * 3, [-2.0] * 3)
        assert ev.margins == [0.4] * 3

    def test_oracle_required(self):
        s = make_scored(-1.0, -2.0, ref=(-1.0, -1.0))
        with pytest.raises(ValidationError, match="oracle rewards required"):
            evaluate_scored_batch(registry_lookup("odpo"), [s])
        ev = evaluate_scored_batch(registry_lookup("odpo", MethodConfig(delta_r_from_oracle=False)), [s])
        assert ev.margins == [0.0]

    def test_odpo_offset(self):
        spec = registry_lookup("odpo", MethodConfig(beta=2.0))
        s = make_scored(-1.0, -2.0, ref=(-1.0, -1.5), oracle=(0.9, 0.1))
        assert_allclose(evaluate_scored_batch(spec, [s]).margins[0], 2.0 * 0.5 + 0.8, rtol=1e-12)

    def test_empty(self):
        with pytest.raises(ValidationError, match="empty batch"):
            evaluate_batch(registry_lookup("simpo"), [], [], [], [])

    def test_margins_override(self):
        spec = registry_lookup("amapo")
        ev = evaluate_batch(spec, [-1.0, -5.0], [-2.0, -1.0], [1, 1], [1, 1], margins=[0.5, 0.25])
        assert ev.margins == [0.5, 0.25]
        assert_allclose(ev.results[0].loss, -oracles.log_sigmoid(2.0 - 0.5), rtol=1e-12)

    def test_logistic_d_theta_is_sigmoid(self, rng):
        spec = registry_lookup("simpo", MethodConfig(beta=1.0, gamma_const=1.2))
        a_w = rng.uniform(-5, -0.1, 20).tolist()
        a_l = rng.uniform(-5, -0.1, 20).tolist()
        ev = evaluate_batch(spec, a_w, a_l, [1] * 20, [1] * 20)
        for r, d in zip(ev.scores, ev.d_theta):
            assert_allclose(d, oracles.sigmoid(1.2 - r), rtol=1e-12)
            assert math.isfinite(d)
