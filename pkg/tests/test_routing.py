import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from weetherapy.errors import ConfigError, ShapeError
from weetherapy.numerics import DiffArray, grad_check, parameter, softmax
from weetherapy.routing import (
    AdapterParams,
    RouterParams,
    RoutingDecision,
    adapt_project,
    fuse,
    keep_top1,
    mix_experts,
    route_dep,
    route_indep,
    stack_frames,
)


def _router(M=3, d=4, w=None, W=None):
    p = RouterParams.init(M, d, np.random.default_rng(0))
    if w is not None:
        p.w_indep.values = np.asarray(w, dtype=float)
    if W is not None:
        p.W_dep.values = np.asarray(W, dtype=float)
    return p


class TestKeepTop1:
    def test_examples(self):
        np.testing.assert_array_equal(keep_top1([0.2, 0.5, 0.3]), [0, 1, 0])
        np.testing.assert_array_equal(keep_top1([0.5, 0.5]), [1, 0])
        np.testing.assert_array_equal(keep_top1([0.0, 0.0, 1.0]), [0, 0, 1])

    def test_random_with_ties(self):
        rng = np.random.default_rng(0)
        n, M = 100_000, 4
        p = rng.integers(0, 3, size=(n, M)).astype(float)  # coarse values, many exact ties
        p[p.sum(axis=1) == 0, 0] = 1.0
        p /= p.sum(axis=1, keepdims=True)
        h = keep_top1(p)
        assert np.all(h.sum(axis=1) == 1.0)
        assert np.all(np.count_nonzero(h, axis=1) == 1)
        first_max = np.array([row.tolist().index(row.max()) for row in p[:2000]])
        np.testing.assert_array_equal(h[:2000].argmax(axis=1), first_max)
        # vectorised check on all rows: no earlier entry attains the maximum
        chosen = h.argmax(axis=1)
        mx = p.max(axis=1)
        for k in range(M):
            earlier = k < chosen
            assert not np.any(earlier & (p[:, k] == mx))
        assert np.all(p[np.arange(n), chosen] == mx)

    @settings(max_examples=200, deadline=None)
    @given(st.lists(st.floats(0, 1), min_size=1, max_size=6))
    def test_property_one_hot(self, xs):
        h = keep_top1(xs)
        assert h.sum() == 1.0 and np.count_nonzero(h) == 1
        assert xs[int(h.argmax())] == max(xs)


class TestRouteIndep:
    def test_hand_oracle(self):
        d = route_indep(_router(w=[0, 0, 1]))
        e = math.e
        np.testing.assert_allclose(d.soft.values, [1 / (2 + e), 1 / (2 + e), e / (2 + e)], atol=1e-15)
        np.testing.assert_allclose(d.soft.values, [0.2119, 0.2119, 0.5761], atol=1e-4)
        np.testing.assert_array_equal(d.hard, [0, 0, 1])
        assert d.chosen_index == 2

    def test_equal_weights(self):
        d = route_indep(_router(w=[0.3, 0.3, 0.3]))
        np.testing.assert_allclose(d.soft.values, [1 / 3] * 3)
        assert d.chosen_index == 0

    def test_shift_invariant_decision(self):
        p = _router(w=[0.1, 0.9, -0.4])
        a = route_indep(p).chosen_index
        p.w_indep.values = p.w_indep.values + 5.0
        assert route_indep(p).chosen_index == a

    def test_same_for_every_sample(self):
        rng = np.random.default_rng(1)
        p = _router(w=[0.2, -0.1, 0.5])
        d = route_indep(p)
        experts = rng.normal(size=(5, 3, 6, 2))
        out = mix_experts(d, experts).values
        for b in range(5):
            np.testing.assert_array_equal(out[b], experts[b, d.chosen_index])

    def test_prior_init(self):
        p = RouterParams.init(3, 4, np.random.default_rng(0), prior_index=0, prior_value=1.0)
        np.testing.assert_array_equal(p.w_indep.values, [1.0, 0.0, 0.0])
        assert route_indep(p).chosen_index == 0


class TestRouteDep:
    def test_zero_weights_uniform(self):
        z = np.random.default_rng(0).normal(size=(2, 5, 4))
        d = route_dep(z, _router(W=np.zeros((4, 3))))
        np.testing.assert_allclose(d.soft.values, 1 / 3)
        np.testing.assert_array_equal(d.chosen_index, [0, 0])

    def test_zero_features_uniform(self):
        W = np.random.default_rng(1).normal(size=(4, 3))
        d = route_dep(np.zeros((5, 4)), _router(W=W))
        np.testing.assert_allclose(d.soft.values, 1 / 3)

    def test_column_permutation(self):
        rng = np.random.default_rng(2)
        z, W = rng.normal(size=(3, 5, 4)), rng.normal(size=(4, 3))
        perm = [2, 0, 1]
        a = route_dep(z, _router(W=W)).soft.values
        b = route_dep(z, _router(W=W[:, perm])).soft.values
        np.testing.assert_allclose(b, a[:, perm], atol=1e-15)

    def test_matches_formula(self):
        rng = np.random.default_rng(3)
        z, W = rng.normal(size=(2, 7, 4)), rng.normal(size=(4, 3))
        ref = softmax(z.mean(axis=1) @ W).values
        np.testing.assert_allclose(route_dep(z, _router(W=W)).soft.values, ref, atol=1e-15)

    def test_dim_mismatch(self):
        with pytest.raises(ShapeError):
            route_dep(np.zeros((5, 6)), _router(d=4))

    def test_gradient_reaches_router_and_features(self):
        rng = np.random.default_rng(4)
        p = _router(W=rng.normal(size=(4, 3)))
        p.W_dep.requires_grad = True
        z = parameter(rng.normal(size=(2, 5, 4)))
        w = rng.normal(size=(2, 3))
        reports = grad_check(lambda: (route_dep(z, p).soft * w).sum(), {"W_dep": p.W_dep, "z": z})
        assert max(r.max_rel_error for r in reports) < 1e-6


class TestMixExperts:
    def _decision(self, soft):
        return RoutingDecision.from_soft(parameter(np.asarray(soft, dtype=float)))

    def test_one_hot_selects_exactly(self):
        rng = np.random.default_rng(0)
        experts = [rng.normal(size=(6, 2)) for _ in range(3)]
        d = RoutingDecision(DiffArray([0.0, 1.0, 0.0]), np.array([0.0, 1.0, 0.0]), np.array(1))
        assert np.array_equal(mix_experts(d, experts).values, experts[1])

    def test_identical_experts(self):
        e = np.random.default_rng(1).normal(size=(6, 2))
        d = self._decision([0.2, 0.5, 0.3])
        for mode in ("hard_st", "soft"):
            np.testing.assert_allclose(mix_experts(d, [e, e, e], mode).values, e, atol=1e-15)

    def test_forward_bit_equals_chosen(self):
        rng = np.random.default_rng(2)
        experts = rng.normal(size=(4, 3, 5, 2))
        soft = softmax(rng.normal(size=(4, 3)))
        d = RoutingDecision.from_soft(soft)
        out = mix_experts(d, experts).values
        for b in range(4):
            assert np.array_equal(out[b], experts[b, d.chosen_index[b]])

    def test_straight_through_equals_soft_twin(self):
        rng = np.random.default_rng(3)
        logits0 = rng.normal(size=(4, 3))
        experts0 = rng.normal(size=(4, 3, 5, 2))
        w = rng.normal(size=(4, 5, 2))

        def grads(mode):
            logits, experts = parameter(logits0), parameter(experts0)
            if mode == "twin":  # explicit soft-weighted sum, no custom op
                s = softmax(logits)
                out = (experts * s.reshape((4, 3, 1, 1))).sum(axis=1)
            else:
                out = mix_experts(RoutingDecision.from_soft(softmax(logits)), experts, "hard_st")
            (out * w).sum().backward()
            return logits.grad, experts.grad

        (gl, ge), (tl, te) = grads("st"), grads("twin")
        np.testing.assert_allclose(gl, tl, atol=1e-10, rtol=0)
        np.testing.assert_allclose(ge, te, atol=1e-10, rtol=0)

    def test_shared_decision_gradient_sums_over_batch(self):
        rng = np.random.default_rng(4)
        w0 = rng.normal(size=3)
        experts0 = rng.normal(size=(2, 3, 4, 2))
        g = rng.normal(size=(2, 4, 2))
        w = parameter(w0)
        (mix_experts(RoutingDecision.from_soft(softmax(w)), experts0) * g).sum().backward()
        wt = parameter(w0)
        s = softmax(wt)
        ((DiffArray(experts0) * s.reshape((1, 3, 1, 1))).sum(axis=1) * g).sum().backward()
        np.testing.assert_allclose(w.grad, wt.grad, atol=1e-12)

    def test_soft_mode_finite_differences(self):
        rng = np.random.default_rng(5)
        logits = parameter(rng.normal(size=(2, 3)))
        experts = parameter(rng.normal(size=(2, 3, 4, 2)))
        w = rng.normal(size=(2, 4, 2))
        closure = lambda: (mix_experts(RoutingDecision.from_soft(softmax(logits)), experts, "soft") * w).sum()
        reports = grad_check(closure, {"logits": logits, "experts": experts})
        assert max(r.max_rel_error for r in reports) < 1e-6

    def test_shape_errors(self):
        d = self._decision([0.2, 0.5, 0.3])
        with pytest.raises(ShapeError):
            mix_experts(d, [np.zeros((4, 2)), np.zeros((4, 2)), np.zeros((5, 2))])
        with pytest.raises(ShapeError):
            mix_experts(d, np.zeros((2, 4, 2)))
        with pytest.raises(ConfigError):
            mix_experts(d, np.zeros((3, 4, 2)), mode="gumbel")


class TestFuse:
    def test_shapes_and_slices(self):
        rng = np.random.default_rng(0)
        zb, zd, zi = rng.normal(size=(39, 32)), rng.normal(size=(39, 16)), rng.normal(size=(39, 16))
        out = fuse(zb, zd, zi).values
        assert out.shape == (39, 64)
        np.testing.assert_array_equal(out[:, :32], zb)
        np.testing.assert_array_equal(out[:, 32:48], zd)
        np.testing.assert_array_equal(out[:, 48:], zi)

    @settings(max_examples=50, deadline=None)
    @given(st.integers(1, 12), st.integers(1, 3), st.booleans(), st.booleans())
    def test_length_preserved(self, T, B, with_dep, with_indep):
        zb = np.zeros((B, T, 3))
        out = fuse(zb, np.ones((B, T, 2)) if with_dep else None, np.ones((B, T, 2)) if with_indep else None)
        assert out.shape[-2] == T

    def test_mismatch(self):
        with pytest.raises(ShapeError):
            fuse(np.zeros((39, 32)), np.zeros((38, 16)))


class TestAdapter:
    def test_desk_shapes(self):
        p = AdapterParams.init(64, 64, 48, 3, np.random.default_rng(0))
        assert adapt_project(np.zeros((39, 64)), p).shape == (13, 48)
        assert adapt_project(np.zeros((2, 39, 64)), p).shape == (2, 13, 48)

    def test_identity_k1(self):
        p = AdapterParams.init(4, 4, 4, 1, np.random.default_rng(0), identity=True)
        z = np.random.default_rng(1).normal(size=(5, 4))
        from weetherapy.numerics import gelu
        np.testing.assert_allclose(adapt_project(z, p).values, gelu(z).values, atol=1e-15)

    def test_stack_frames_pads(self):
        z = np.arange(10.0).reshape(5, 2)
        s = stack_frames(DiffArray(z), 2).values
        assert s.shape == (3, 4)
        np.testing.assert_array_equal(s[0], [0, 1, 2, 3])
        np.testing.assert_array_equal(s[2], [8, 9, 0, 0])

    def test_bad_k(self):
        with pytest.raises(ConfigError):
            stack_frames(DiffArray(np.zeros((3, 2))), 0)
        with pytest.raises(ConfigError):
            AdapterParams.init(4, 4, 4, 0, np.random.default_rng(0))

    def test_gradient(self):
        rng = np.random.default_rng(2)
        p = AdapterParams.init(3, 5, 4, 2, rng)
        z = parameter(rng.normal(size=(2, 7, 3)))
        w = rng.normal(size=(2, 4, 4))
        reports = grad_check(lambda: (adapt_project(z, p) * w).sum(), {**p.arrays(), "z": z})
        assert max(r.max_rel_error for r in reports) < 1e-6
