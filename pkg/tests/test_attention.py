import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from aptkit import numkit as nk
from aptkit.attention import (
    AttentionParams,
    FeedForward,
    Layer,
    PromptBank,
    assemble_blocks,
    assemble_partition,
    attention_dump_csv,
    decompose_attention,
    deep_prompt_forward,
    input_row_attention,
    plain_forward,
    prompt_extended_attention,
    read_attention_dump,
    self_attention,
    shallow_prompt_forward,
)


def naive_attention(x, params):
    """Direct single-head formula: softmax(x Wq (x Wk)^T / sqrt(d)) x Wv Wo."""
    d = params.d
    s = (x @ params.w_q) @ (x @ params.w_k).T / math.sqrt(d)
    e = np.exp(s - s.max(axis=1, keepdims=True))
    a = e / e.sum(axis=1, keepdims=True)
    return a @ x @ params.w_v @ params.w_o


def instance(seed, d=None, n=None, p=None, heads=1):
    g = np.random.default_rng(seed)
    d = d or int(g.integers(2, 9)) * heads
    n = n or int(g.integers(1, 7))
    p = int(g.integers(0, 6)) if p is None else p
    return g, AttentionParams.random(d, g, heads=heads), g.normal(size=(n, d)), g.normal(size=(p, d))


def make_stack(g, d, depth, heads=1):
    return [Layer(AttentionParams.random(d, g, heads=heads), FeedForward.random(d, g)) for _ in range(depth)]


class TestSelfAttention:
    def test_single_token(self, rng):
        params = AttentionParams.random(4, rng)
        x = rng.normal(size=(1, 4))
        np.testing.assert_allclose(self_attention(x, params), x @ params.w_v @ params.w_o, atol=1e-14)

    def test_direct_formula(self, rng):
        params = AttentionParams.random(4, rng)
        x = rng.normal(size=(3, 4))
        np.testing.assert_allclose(self_attention(x, params), naive_attention(x, params), atol=1e-12)

    def test_multi_head_splits_columns(self, rng):
        params = AttentionParams.random(6, rng, heads=2)
        x = rng.normal(size=(4, 6))
        out = np.zeros((4, 6))
        for h in range(2):
            cols = slice(3 * h, 3 * h + 3)
            s = (x @ params.w_q[:, cols]) @ (x @ params.w_k[:, cols]).T / math.sqrt(3)
            out[:, cols] = nk.softmax_rows(s) @ (x @ params.w_v[:, cols])
        np.testing.assert_allclose(self_attention(x, params), out @ params.w_o, atol=1e-12)

    def test_permutation_equivariant(self, rng):
        params = AttentionParams.random(5, rng)
        x = rng.normal(size=(6, 5))
        perm = rng.permutation(6)
        np.testing.assert_allclose(self_attention(x[perm], params), self_attention(x, params)[perm], atol=1e-12)

    def test_dimension_mismatch(self, rng):
        params = AttentionParams.random(4, rng)
        with pytest.raises(nk.ShapeError):
            self_attention(rng.normal(size=(2, 3)), params)

    def test_params_validation_and_frozen(self, rng):
        with pytest.raises(ValueError):
            AttentionParams.random(6, rng, heads=4)
        params = AttentionParams.random(4, rng)
        with pytest.raises(ValueError):
            params.w_q[0, 0] = 1.0
        w = rng.normal(size=(4, 4))
        p2 = AttentionParams(w, w, w, w)
        w[0, 0] = 99.0
        assert p2.w_q[0, 0] != 99.0


class TestPromptExtended:
    def test_empty_prompt(self, rng):
        params = AttentionParams.random(4, rng)
        x = rng.normal(size=(3, 4))
        x_out, p_out = prompt_extended_attention(x, np.zeros((0, 4)), params)
        np.testing.assert_allclose(x_out, self_attention(x, params), atol=1e-14)
        assert p_out.shape == (0, 4)

    def test_concat_then_slice(self, rng):
        params = AttentionParams.random(4, rng, heads=2)
        x, p = rng.normal(size=(3, 4)), rng.normal(size=(2, 4))
        full = self_attention(np.vstack([p, x]), params)
        x_out, p_out = prompt_extended_attention(x, p, params)
        np.testing.assert_allclose(x_out, full[2:], atol=1e-12)
        np.testing.assert_allclose(p_out, full[:2], atol=1e-12)

    def test_fixed_block_assembly(self):
        _, params, x, p = instance(7, d=4, n=2, p=2)
        blocks = decompose_attention(x, p, params)
        np.testing.assert_allclose(
            assemble_blocks(blocks, x, p, params), prompt_extended_attention(x, p, params)[0], atol=1e-12
        )


class TestDecompose:
    def test_rejects_multi_head(self, rng):
        params = AttentionParams.random(4, rng, heads=2)
        with pytest.raises(ValueError, match="each head"):
            decompose_attention(rng.normal(size=(2, 4)), rng.normal(size=(1, 4)), params)

    def test_empty_prompt(self, rng):
        params = AttentionParams.random(3, rng)
        x = rng.normal(size=(4, 3))
        b = decompose_attention(x, np.zeros((0, 3)), params)
        assert b.a_ip.shape == (4, 0)
        np.testing.assert_array_equal(b.gamma_ip, 0.0)
        s = (x @ params.w_q_scaled) @ (x @ params.w_k).T
        np.testing.assert_allclose(b.a_i, nk.softmax_rows(s), atol=1e-14)

    @settings(max_examples=100, deadline=None)
    @given(st.integers(0, 2**31))
    def test_block_and_partition_identities(self, seed):
        _, params, x, p = instance(seed)
        x_out = prompt_extended_attention(x, p, params)[0]
        blocks = decompose_attention(x, p, params)
        np.testing.assert_allclose(np.hstack([blocks.a_i, blocks.a_ip]).sum(axis=1), 1.0, atol=1e-12)
        assert np.max(np.abs(assemble_blocks(blocks, x, p, params) - x_out)) < 1e-12
        assert np.max(np.abs(assemble_partition(blocks, x, p, params) - x_out)) < 1e-9

    def test_partition_sums(self, rng):
        params = AttentionParams.random(4, rng)
        x, p = rng.normal(size=(3, 4)), rng.normal(size=(2, 4))
        b = decompose_attention(x, p, params)
        joint = (x @ params.w_q_scaled) @ np.vstack([x, p]).dot(params.w_k).T
        direct = np.exp(joint - b.shift[:, None]).sum(axis=1)
        np.testing.assert_allclose(b.gamma_i + b.gamma_ip, direct, rtol=1e-9)

    def test_partition_stable_when_prompts_dominate(self, rng):
        d = 4
        w = np.eye(d)
        params = AttentionParams(w * math.sqrt(d), w, w, w)
        x = rng.normal(size=(3, d))
        # prompts aligned with each x row so prompt scores exceed input scores by ~300
        p = 300.0 * x / np.sum(x * x, axis=1, keepdims=True) + x
        b = decompose_attention(x, p, params)
        assert np.all(b.scores_ip.max(axis=1) - b.scores_i.max(axis=1) > 250)
        x_out = prompt_extended_attention(x, p, params)[0]
        assert np.all(np.isfinite(assemble_partition(b, x, p, params)))
        assert np.max(np.abs(assemble_partition(b, x, p, params) - x_out)) < 1e-9


class TestDeepAndShallow:
    @pytest.mark.parametrize("depth", [1, 2, 3, 4])
    @pytest.mark.parametrize("heads", [1, 2])
    def test_row_drop_invariance(self, depth, heads):
        g = np.random.default_rng(depth * 10 + heads)
        d, n, p = 6, 4, 3
        stack = make_stack(g, d, depth, heads)
        bank = PromptBank("deep", [g.normal(size=(p, d)) for _ in range(depth)])
        x = g.normal(size=(n, d))
        skip = deep_prompt_forward(x, bank, stack, skip=True)
        full = deep_prompt_forward(x, bank, stack, skip=False)
        assert skip.shape == (n, d)
        assert np.max(np.abs(skip - full)) <= 1e-12

    def test_single_layer_row_drop(self, rng):
        params = AttentionParams.random(5, rng)
        x, p = rng.normal(size=(4, 5)), rng.normal(size=(3, 5))
        np.testing.assert_allclose(
            input_row_attention(x, p, params), prompt_extended_attention(x, p, params)[0], atol=1e-12
        )

    def test_zero_prompts_shape(self, rng):
        stack = make_stack(rng, 4, 2)
        bank = PromptBank("deep", [np.zeros((3, 4)) for _ in range(2)])
        assert deep_prompt_forward(rng.normal(size=(5, 4)), bank, stack).shape == (5, 4)

    def test_site_count_mismatch(self, rng):
        stack = make_stack(rng, 4, 2)
        with pytest.raises(ValueError, match="sites"):
            deep_prompt_forward(rng.normal(size=(2, 4)), PromptBank("deep", [np.zeros((1, 4))]), stack)

    def test_bank_validation(self):
        with pytest.raises(ValueError):
            PromptBank("shallow", [np.zeros((1, 2)), np.zeros((1, 2))])
        with pytest.raises(ValueError):
            PromptBank("wide", [np.zeros((1, 2))])

    def test_shallow_equals_deep_for_one_layer(self, rng):
        stack = make_stack(rng, 4, 1)
        p = rng.normal(size=(2, 4))
        x = rng.normal(size=(3, 4))
        shallow = shallow_prompt_forward(x, PromptBank("shallow", [p]), stack)
        deep = deep_prompt_forward(x, PromptBank("deep", [p]), stack)
        np.testing.assert_allclose(shallow, deep, atol=1e-12)

    def test_skip_saving_counted(self, rng):
        d, n, p = 8, 5, 3
        stack = make_stack(rng, d, 2)
        bank = PromptBank("deep", [rng.normal(size=(p, d)) for _ in range(2)])
        x = rng.normal(size=(n, d))
        with nk.count_flops() as skip:
            deep_prompt_forward(x, bank, stack, skip=True)
        with nk.count_flops() as full:
            deep_prompt_forward(x, bank, stack, skip=False)
        saved = (full - skip).macs
        per_layer = 2 * p * d * d + 2 * n * p * d + 2 * p * p * d
        assert saved == 2 * per_layer

    def test_plain_forward_matches_zero_prompt_shallow(self, rng):
        stack = make_stack(rng, 4, 2)
        x = rng.normal(size=(3, 4))
        out = shallow_prompt_forward(x, PromptBank("shallow", [np.zeros((0, 4))]), stack)
        np.testing.assert_allclose(out, plain_forward(x, stack), atol=1e-14)


class TestDump:
    def test_round_trip(self, rng):
        m = rng.random((2, 3))
        text = attention_dump_csv([(0, "IP", m, [4, 5], None)])
        assert text.splitlines()[0] == "layer,block,row,col,weight"
        rows = read_attention_dump(text)
        assert len(rows) == 6
        assert rows[0] == {"layer": 0, "block": "IP", "row": 4, "col": 0, "weight": m[0, 0]}

    def test_unknown_block(self):
        with pytest.raises(ValueError):
            attention_dump_csv([(0, "XX", np.ones((1, 1)), None, None)])
