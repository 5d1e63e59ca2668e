import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from aptkit import numkit as nk
from aptkit.apt import (
    AptParams,
    SingularTransformError,
    aggregate_softmax,
    apt_alpha,
    apt_attention,
    apt_delta,
    apt_scores,
    exact_diffusion,
    exact_representation_check,
    factorize,
    init_apt,
    key_transform,
    low_rank_keys,
    vk_transform_gap,
)
from aptkit.attention import (
    AttentionParams,
    decompose_attention,
    input_row_attention,
    partition_weights,
    prompt_extended_attention,
    self_attention,
)


def direct_delta(x, p_v, w1, w2):
    k = p_v @ w1 @ w2 + p_v
    return k.max() * np.maximum(x @ k.T, 0.0) @ p_v


def random_apt(g, p, d, r, s=0.0, scale=0.5):
    return AptParams(g.normal(size=(p, d)) * scale, g.normal(size=(d, r)) * scale, g.normal(size=(r, d)) * scale, s)


class TestInit:
    def test_shapes_and_zeros(self, rng):
        apt = init_apt(5, 8, 3, rng)
        assert apt.p_v.shape == (5, 8) and apt.w1.shape == (8, 3) and apt.w2.shape == (3, 8)
        assert np.all(apt.w2 == 0.0)
        assert apt.s == 0.0
        assert apt.n_params == 5 * 8 + 2 * 8 * 3 + 1

    def test_rank_checks(self, rng):
        with pytest.raises(ValueError):
            init_apt(2, 4, 5, rng)
        with pytest.raises(ValueError):
            init_apt(0, 4, 2, rng)
        with pytest.raises(ValueError):
            init_apt(2, 4, 0, rng)

    def test_prompt_statistics(self):
        apt = init_apt(200, 768, 4, np.random.default_rng(5))
        n = apt.p_v.size
        assert abs(apt.p_v.mean()) < 3 * 0.02 / math.sqrt(n)
        assert abs(apt.p_v.std() - 0.02) < 1e-3

    def test_fresh_module_adds_gated_prompt_term(self, rng):
        # with w2 = 0 the keys equal the prompts themselves, so the delta is
        # max(p_v) * relu(X p_v^T) p_v rather than zero
        params = AttentionParams.random(6, rng)
        apt = init_apt(4, 6, 2, rng)
        x = rng.normal(size=(3, 6))
        expect = self_attention(x, params) + apt.p_v.max() * np.maximum(x @ apt.p_v.T, 0) @ apt.p_v
        np.testing.assert_allclose(apt_attention(x, params, apt), expect, atol=1e-15)

    def test_zero_prompt_identity(self, rng):
        params = AttentionParams.random(6, rng)
        apt = init_apt(4, 6, 2, rng)
        apt.p_v = np.zeros_like(apt.p_v)
        x = rng.normal(size=(3, 6))
        np.testing.assert_array_equal(apt_attention(x, params, apt), self_attention(x, params))


class TestDelta:
    def test_zero_prompts(self, rng):
        apt = AptParams(np.zeros((3, 4)), rng.normal(size=(4, 2)), np.zeros((2, 4)))
        np.testing.assert_array_equal(apt_delta(rng.normal(size=(5, 4)), apt), np.zeros((5, 4)))

    def test_relu_gates_all(self, rng):
        apt = random_apt(rng, 3, 4, 2)
        keys = low_rank_keys(apt)
        # pick x in the polar cone of the keys: -keys mean direction scaled up
        x = -np.linalg.lstsq(keys, np.ones(3), rcond=None)[0][None, :] * 10
        assert np.all(x @ keys.T < 0)
        np.testing.assert_array_equal(apt_delta(x, apt), np.zeros((1, 4)))

    def test_direct_transcription(self):
        g = np.random.default_rng(11)
        apt = random_apt(g, 4, 6, 2)
        x = g.normal(size=(3, 6))
        np.testing.assert_allclose(apt_delta(x, apt), direct_delta(x, apt.p_v, apt.w1, apt.w2), atol=1e-12)

    def test_dimension_mismatch(self, rng):
        apt = random_apt(rng, 2, 4, 1)
        with pytest.raises(nk.ShapeError):
            apt_delta(rng.normal(size=(2, 5)), apt)
        with pytest.raises(nk.ShapeError):
            apt_attention(rng.normal(size=(2, 5)), AttentionParams.random(5, rng), apt)

    def test_alpha_independent_of_x(self, rng):
        apt = random_apt(rng, 4, 5, 2)
        keys = low_rank_keys(apt)
        alphas = []
        for x in (rng.normal(size=(3, 5)), rng.normal(size=(7, 5)) * 4):
            gated = np.maximum(x @ keys.T, 0)
            i, j = np.unravel_index(np.argmax(gated), gated.shape)
            alphas.append(apt_scores(x, apt)[i, j] / gated[i, j])
        assert alphas[0] == pytest.approx(alphas[1], rel=1e-15)
        assert apt_alpha(apt) == nk.global_max(keys)

    @settings(max_examples=50, deadline=None)
    @given(st.integers(0, 2**31), st.floats(0.01, 100))
    def test_positive_homogeneity(self, seed, c):
        g = np.random.default_rng(seed)
        apt = random_apt(g, 3, 5, 2)
        x = g.normal(size=(4, 5))
        np.testing.assert_allclose(apt_scores(c * x, apt), c * apt_scores(x, apt), rtol=1e-12, atol=1e-12)
        np.testing.assert_allclose(apt_delta(c * x, apt), c * apt_delta(x, apt), rtol=1e-11, atol=1e-11)

    def test_per_row_alpha(self, rng):
        apt = random_apt(rng, 3, 5, 2)
        x = rng.normal(size=(4, 5))
        k = low_rank_keys(apt)
        expect = (np.maximum(x @ k.T, 0) * k.max(axis=1)[None, :]) @ apt.p_v
        np.testing.assert_allclose(apt_delta(x, apt, per_row=True), expect, atol=1e-12)
        np.testing.assert_array_equal(apt_alpha(apt, per_row=True), k.max(axis=1))


class TestAttention:
    def test_pure_scale(self, rng):
        params = AttentionParams.random(4, rng)
        apt = AptParams(np.zeros((2, 4)), np.zeros((4, 1)), np.zeros((1, 4)), s=math.log(2))
        x = rng.normal(size=(3, 4))
        np.testing.assert_allclose(apt_attention(x, params, apt), 2 * self_attention(x, params), atol=1e-14)

    def test_composed_oracle(self, rng):
        params = AttentionParams.random(6, rng, heads=2)
        apt = random_apt(rng, 4, 6, 2, s=0.3)
        x = rng.normal(size=(5, 6))
        expect = math.exp(0.3) * (self_attention(x, params) + direct_delta(x, apt.p_v, apt.w1, apt.w2))
        np.testing.assert_allclose(apt_attention(x, params, apt), expect, atol=1e-12)

    def test_checkpoint_round_trip(self, tmp_path, rng):
        apt = random_apt(rng, 3, 4, 2, s=-0.7)
        nk.save_tensors(tmp_path / "apt.aptm", apt.to_tensors("l0."))
        back = AptParams.from_tensors(nk.load_tensors(tmp_path / "apt.aptm"), "l0.")
        for name in ("p_v", "w1", "w2"):
            assert getattr(back, name).tobytes() == getattr(apt, name).tobytes()
        assert back.s == apt.s


class TestExactSide:
    def test_diffusion_empty_prompt(self, rng):
        params = AttentionParams.random(3, rng)
        np.testing.assert_array_equal(exact_diffusion(rng.normal(size=(2, 3)), np.zeros((0, 3)), params), 0.0)

    @pytest.mark.parametrize("seed", range(10))
    def test_diffusion_completes_output(self, seed):
        g = np.random.default_rng(seed)
        params = AttentionParams.random(5, g)
        x, p = g.normal(size=(4, 5)), g.normal(size=(3, 5))
        blocks = decompose_attention(x, p, params)
        w_i, _ = partition_weights(blocks)
        core_i = w_i[:, None] * (nk.softmax_rows(blocks.scores_i) @ (x @ params.w_v))
        x_out = prompt_extended_attention(x, p, params)[0]
        np.testing.assert_allclose((core_i + exact_diffusion(x, p, params)) @ params.w_o, x_out, atol=1e-12)
        np.testing.assert_allclose(exact_diffusion(x, p, params), blocks.a_ip @ p @ params.w_v, atol=1e-12)

    def test_aggregate_single_prompt(self, rng):
        params = AttentionParams.random(4, rng)
        p = rng.normal(size=(1, 4))
        out = aggregate_softmax(rng.normal(size=(3, 4)), p, params)
        np.testing.assert_allclose(out, np.repeat(p @ params.w_v, 3, axis=0), atol=1e-14)

    def test_aggregate_recovers_diffusion(self, rng):
        d = 4
        params = AttentionParams.random(d, rng)
        x, p = rng.normal(size=(3, d)), rng.normal(size=(2, d))
        # queries pre-multiplied by sqrt(d) make the scaled scores equal the unscaled ones
        lifted = AttentionParams(params.w_q * math.sqrt(d), params.w_k, params.w_v, params.w_o)
        _, w_ip = partition_weights(decompose_attention(x, p, lifted))
        np.testing.assert_allclose(
            exact_diffusion(x, p, lifted) / w_ip[:, None], aggregate_softmax(x, p, params), atol=1e-12
        )

    def test_aggregate_direct(self):
        g = np.random.default_rng(3)
        params = AttentionParams.random(4, g)
        x, p = g.normal(size=(3, 4)), g.normal(size=(2, 4))
        s = x @ params.w_q @ params.w_k.T @ p.T
        e = np.exp(s - s.max(axis=1, keepdims=True))
        expect = (e / e.sum(axis=1, keepdims=True)) @ p @ params.w_v
        np.testing.assert_allclose(aggregate_softmax(x, p, params), expect, atol=1e-12)

    def test_vk_gap(self, rng):
        a, b = rng.normal(size=(4, 4)), rng.normal(size=(4, 4))
        params = AttentionParams(b, a, a @ b.T, np.eye(4))
        np.testing.assert_allclose(vk_transform_gap(rng.normal(size=(3, 4)), params), 0.0, atol=1e-12)
        g = np.random.default_rng(2)
        params = AttentionParams.random(4, g)
        p = g.normal(size=(2, 4))
        np.testing.assert_allclose(
            vk_transform_gap(p, params), p @ params.w_k @ params.w_q.T - p @ params.w_v, atol=1e-12
        )

    def test_multi_head_rejected(self, rng):
        params = AttentionParams.random(4, rng, heads=2)
        with pytest.raises(ValueError):
            exact_diffusion(rng.normal(size=(2, 4)), rng.normal(size=(1, 4)), params)


class TestRepresentation:
    @pytest.mark.parametrize("seed", range(100))
    def test_full_rank_reproduces_aggregation(self, seed):
        g = np.random.default_rng(seed)
        d = int(g.integers(2, 7))
        w_v = np.linalg.qr(g.normal(size=(d, d)))[0] * g.uniform(0.5, 1.5)
        params = AttentionParams(g.normal(size=(d, d)) / d, g.normal(size=(d, d)) / d, w_v, np.eye(d))
        x, p = g.normal(size=(int(g.integers(1, 6)), d)), g.normal(size=(int(g.integers(1, 6)), d))
        rep = exact_representation_check(x, p, params)
        assert rep.passed, rep
        assert rep.max_abs_error < 1e-8

    def test_identity_weights(self, rng):
        params = AttentionParams(np.eye(3), np.eye(3), np.eye(3), np.eye(3))
        transform, cond = key_transform(params)
        np.testing.assert_allclose(transform, 0.0, atol=1e-15)
        assert cond == pytest.approx(1.0)
        x, p = rng.normal(size=(2, 3)), rng.normal(size=(4, 3))
        rep = exact_representation_check(x, p, params)
        np.testing.assert_allclose(
            aggregate_softmax(x, p, params), nk.softmax_rows(x @ p.T) @ p, atol=1e-14
        )
        assert rep.max_abs_error < 1e-14

    def test_singular_value_map(self, rng):
        w_v = np.zeros((3, 3))
        w_v[0, 0] = 1.0
        params = AttentionParams(np.eye(3), np.eye(3), w_v, np.eye(3))
        with pytest.raises(SingularTransformError, match="cond"):
            exact_representation_check(rng.normal(size=(2, 3)), rng.normal(size=(2, 3)), params)

    def test_residual_non_increasing_in_rank(self, rng):
        d = 8
        params = AttentionParams.random(d, rng)
        x, p = rng.normal(size=(3, d)), rng.normal(size=(4, d))
        residuals = [exact_representation_check(x, p, params, r=r).factor_residual for r in (1, 2, 4, d // 2, d)]
        assert all(a >= b - 1e-12 for a, b in zip(residuals, residuals[1:]))
        assert residuals[0] > 1e-6
        assert residuals[-1] < 1e-10

    def test_factor_rank(self, rng):
        w1, w2 = factorize(rng.normal(size=(6, 6)), 2)
        assert nk.numerical_rank(w1 @ w2) <= 2


def counted(fn):
    with nk.count_flops() as c:
        fn()
    return c


class TestFlopBound:
    @pytest.mark.parametrize("d,n,p,r", [(16, 8, 8, 2), (32, 16, 16, 4), (24, 12, 20, 23), (8, 4, 4, 1)])
    def test_delta_cheaper_than_prompt_attention(self, d, n, p, r):
        g = np.random.default_rng(d + n + p + r)
        params = AttentionParams.random(d, g)
        x, prompts = g.normal(size=(n, d)), g.normal(size=(p, d))
        apt = random_apt(g, p, d, r)
        base = counted(lambda: self_attention(x, params))
        deep = counted(lambda: input_row_attention(x, prompts, params)) - base
        delta = counted(lambda: apt_delta(x, apt))
        assert delta.total_flops < deep.total_flops
        gap_macs = deep.macs - delta.macs
        assert gap_macs == 2 * p * d * d - 2 * p * d * r - n * d

    @settings(max_examples=100, deadline=None)
    @given(st.integers(2, 12), st.integers(1, 30), st.integers(1, 8), st.data())
    def test_sign_of_gap_follows_closed_form(self, d, n, p, data):
        r = data.draw(st.integers(1, d - 1))
        g = np.random.default_rng(d * 1000 + n * 10 + p)
        params = AttentionParams.random(d, g)
        x, prompts = g.normal(size=(n, d)), g.normal(size=(p, d))
        apt = random_apt(g, p, d, r)
        base = counted(lambda: self_attention(x, params))
        gap = (counted(lambda: input_row_attention(x, prompts, params)) - base).total_flops - counted(
            lambda: apt_delta(x, apt)
        ).total_flops
        assert gap == 4 * p * d * (d - r) - 2 * p * d + 4 * n * p - 2 * n * d

    def test_bound_fails_for_long_sequences_few_prompts(self, rng):
        # the n*d output scaling outweighs the saved projections once n > 2*p*d
        d, n, p, r = 8, 1000, 1, 7
        params = AttentionParams.random(d, rng)
        x, prompts = rng.normal(size=(n, d)), rng.normal(size=(p, d))
        apt = random_apt(rng, p, d, r)
        base = counted(lambda: self_attention(x, params))
        deep = counted(lambda: input_row_attention(x, prompts, params)) - base
        assert counted(lambda: apt_delta(x, apt)).total_flops > deep.total_flops
