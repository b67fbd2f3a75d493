"""Pyramid attention head: algebraic properties and loop-oracle equivalence.

The reference implementation in ``loop_attention`` below recomputes the
whole attention map with per-element python loops and plain numpy scalar
math, sharing no code with the library path.
"""

import numpy as np
import pytest

from multimod import ops
from multimod.attention import (
    GUARD_THRESHOLD,
    AttentionStats,
    LatentPyramid,
    PyramidFeatures,
    attention_pass,
    build_attention,
    encode_pyramid,
    make_paf_params,
    paf_forward,
)
from multimod.tensor import Tensor, backward, no_grad


def _flat(x):
    """(N, C, H, W) -> (N, H*W, C) with plain numpy."""
    n, c, h, w = x.shape
    return x.transpose(0, 2, 3, 1).reshape(n, h * w, c)


def loop_attention(query, context, keys, view_weights, channel_bias, eps=1e-8):
    """Independent reference: scalar loops over every attention entry."""
    n = query.shape[0]
    q = _flat(query)
    z = _flat(context)
    p, latent = q.shape[1], q.shape[2]
    l = keys[0].shape[2] * keys[0].shape[3]
    out = np.zeros((n, p, l))
    for ni in range(n):
        chan = np.tanh(z[ni].T @ z[ni]) + channel_bias
        qm = q[ni] @ chan
        for pi in range(p):
            scores = np.zeros(l)
            for w, key in zip(view_weights, keys):
                kf = _flat(key)[ni]
                for li in range(l):
                    s = 0.0
                    for ci in range(latent):
                        s += qm[pi, ci] * kf[li, ci]
                    scores[li] += w * max(s, 0.0)
            out[ni, pi] = scores / (scores.sum() + eps)
    return out


def random_latents(rng, n=1, c=3, hq=4, wq=4, hk=2, wk=2, views=3):
    query = rng.standard_normal((n, c, hq, wq))
    context = rng.standard_normal((n, c, hq // 2, wq // 2))
    keys = [rng.standard_normal((n, c, hk, wk)) for _ in range(views)]
    return query, context, keys


def make_params(rng, c, views, view_weights=None, channel_bias=None):
    params = make_paf_params(rng, widths=(c, c, c), latent=c, fused=c, num_views=views)
    if view_weights is not None:
        for t, v in zip(params.view_weights, view_weights):
            t.data[...] = v
    if channel_bias is not None:
        params.channel_bias.data[...] = channel_bias
    return params


def lat_from_arrays(query, context, keys):
    return LatentPyramid(
        query=Tensor(query),
        context=Tensor(context),
        keys=[Tensor(k) for k in keys],
    )


class TestAgainstLoopOracle:
    def test_random_instances_match_to_1e6(self, rng):
        for trial in range(25):
            n = int(rng.integers(1, 3))
            c = int(rng.integers(1, 5))
            hw = int(rng.integers(1, 3))
            views = int(rng.integers(1, 4))
            query, context, keys = random_latents(
                rng, n=n, c=c, hq=2 * hw, wq=2 * hw, hk=hw, wk=hw, views=views
            )
            weights = rng.uniform(0.5, 2.0, views)
            bias = rng.standard_normal((c, c))
            params = make_params(rng, c, views, weights, bias)
            got = build_attention(lat_from_arrays(query, context, keys), params).data
            want = loop_attention(query, context, keys, weights, bias)
            np.testing.assert_allclose(got, want, atol=1e-6)

    def test_hand_computed_single_view_case(self):
        # latent 1, one query pixel q = 0.3, context z = [1, 2], key row
        # k = [0.5, -1], view weight 2, channel bias 0.5:
        #   chan  = tanh(1 + 4) + 0.5 = 1.499909204262595
        #   q_mod = 0.3 * chan       = 0.449972761278...
        #   scores= relu(q_mod * k) * 2 = [0.449972761278..., 0]
        #   row   = scores / (sum + 1e-8) = [0.999999977..., 0]
        query = np.array([[[[0.3]]]])
        context = np.array([[[[1.0, 2.0]]]])
        keys = [np.array([[[[0.5, -1.0]]]])]
        rng = np.random.default_rng(0)
        params = make_params(rng, 1, 1, [2.0], [[0.5]])
        got = build_attention(lat_from_arrays(query, context, keys), params).data
        np.testing.assert_allclose(got[0, 0], [0.99999998, 0.0], atol=1e-7)


class TestRowStochasticity:
    def test_rows_sum_to_one_and_are_non_negative(self, rng):
        for trial in range(40):
            query, context, keys = random_latents(rng, n=2, c=4)
            params = make_params(rng, 4, 3)
            attn = build_attention(lat_from_arrays(query, context, keys), params).data
            assert (attn >= 0).all()
            sums = attn.sum(axis=-1)
            mass = np.abs(sums - 1.0)
            # healthy rows hit 1 within 1e-5; the others must be guarded rows
            stats = AttentionStats()
            build_attention(lat_from_arrays(query, context, keys), params, stats)
            assert (mass < 1e-5).sum() >= stats.rows - stats.guarded

    def test_guarded_rows_counted_and_left_finite(self, rng):
        # zero query -> zero scores -> every row guarded, output all zero
        query = np.zeros((1, 2, 2, 2))
        context = rng.standard_normal((1, 2, 1, 1))
        keys = [rng.standard_normal((1, 2, 1, 2))]
        params = make_params(rng, 2, 1)
        stats = AttentionStats()
        attn = build_attention(lat_from_arrays(query, context, keys), params, stats)
        assert stats.rows == 4
        assert stats.guarded == 4
        assert stats.guarded_fraction == 1.0
        np.testing.assert_array_equal(attn.data, np.zeros((1, 4, 2)))

    def test_stats_accumulate_across_calls(self, rng):
        query, context, keys = random_latents(rng, n=1, c=2, hq=2, wq=2, hk=1, wk=1)
        params = make_params(rng, 2, 3)
        stats = AttentionStats()
        build_attention(lat_from_arrays(query, context, keys), params, stats)
        build_attention(lat_from_arrays(query, context, keys), params, stats)
        assert stats.rows == 8

    def test_guard_threshold_consistent_with_row_tolerance(self):
        # a row of mass exactly at the guard threshold still sums to one
        # within 1e-5: eps / (threshold + eps) < 1e-5
        assert 1e-8 / (GUARD_THRESHOLD + 1e-8) < 1e-5


class TestViewWeightScaling:
    @pytest.mark.parametrize("lam", [0.5, 2.0, 10.0])
    def test_uniform_scaling_leaves_attention_unchanged(self, rng, lam):
        query, context, keys = random_latents(rng, n=2, c=3)
        weights = rng.uniform(0.5, 1.5, 3)
        bias = rng.standard_normal((3, 3))
        base = build_attention(
            lat_from_arrays(query, context, keys),
            make_params(rng, 3, 3, weights, bias),
        ).data
        scaled = build_attention(
            lat_from_arrays(query, context, keys),
            make_params(rng, 3, 3, weights * lam, bias),
        ).data
        np.testing.assert_allclose(scaled, base, atol=1e-6)


class TestViewCollapse:
    def test_identical_keys_collapse_to_single_view(self, rng):
        # when all key maps are equal the multi-view blend is a scalar
        # multiple of any one view's scores, which normalisation removes
        query, context, keys = random_latents(rng, n=1, c=3, views=1)
        same = [keys[0], keys[0].copy(), keys[0].copy()]
        weights = rng.uniform(0.5, 1.5, 3)
        multi = build_attention(
            lat_from_arrays(query, context, same), make_params(rng, 3, 3, weights)
        ).data
        single = build_attention(
            lat_from_arrays(query, context, [keys[0]]), make_params(rng, 3, 1, [1.0])
        ).data
        np.testing.assert_allclose(multi, single, atol=1e-6)

    def test_constant_deep_map_makes_views_identical(self, rng):
        # a spatially constant deep map is invariant under transpose and
        # flip, so the three projected key maps must coincide bitwise
        feats = PyramidFeatures(
            low=Tensor(rng.standard_normal((1, 3, 8, 8)).astype(np.float32)),
            mid=Tensor(rng.standard_normal((1, 3, 4, 4)).astype(np.float32)),
            deep=Tensor(np.full((1, 3, 2, 2), 0.7, dtype=np.float32)),
        )
        np_rng = np.random.default_rng(5)
        params = make_paf_params(np_rng, (3, 3, 3), latent=4, fused=6)
        lat = encode_pyramid(feats, params, mode="eval")
        np.testing.assert_array_equal(lat.keys[0].data, lat.keys[1].data)
        np.testing.assert_array_equal(lat.keys[0].data, lat.keys[2].data)


class TestAttentionPass:
    def test_matches_numpy_reimplementation(self, rng):
        n, d, h, w, u = 2, 5, 2, 2, 4
        deep = rng.standard_normal((n, d, h, w))
        attn = rng.uniform(0, 1, (n, 16 * h * w, h * w))
        params = make_paf_params(rng, (d, d, d), latent=3, fused=u)
        got = attention_pass(Tensor(attn), Tensor(deep), params, mode="eval").data

        flat = deep.transpose(0, 2, 3, 1).reshape(n, h * w, d)
        msg = flat @ params.passing_weight.data
        carried = attn @ msg
        grid = carried.reshape(n, 4 * h, 4 * w, u).transpose(0, 3, 1, 2)
        bn = params.passing_bn
        norm = (grid - bn.running_mean.reshape(1, u, 1, 1)) / np.sqrt(
            bn.running_var.reshape(1, u, 1, 1) + 1e-5
        )
        want = np.maximum(
            bn.gamma.data.reshape(1, u, 1, 1) * norm + bn.beta.data.reshape(1, u, 1, 1),
            0.0,
        )
        np.testing.assert_allclose(got, want, atol=1e-6)

    def test_row_count_must_be_sixteen_deep_pixels(self, rng):
        deep = Tensor(rng.standard_normal((1, 3, 2, 2)))
        params = make_paf_params(rng, (3, 3, 3), latent=2, fused=4)
        with pytest.raises(ValueError):
            attention_pass(Tensor(rng.uniform(0, 1, (1, 8, 4))), deep, params, "eval")
        with pytest.raises(ValueError):
            attention_pass(Tensor(rng.uniform(0, 1, (1, 64, 3))), deep, params, "eval")


class TestHeadPlumbing:
    def test_paf_forward_output_shape(self, rng):
        feats = PyramidFeatures(
            low=Tensor(rng.standard_normal((2, 4, 16, 16)).astype(np.float32)),
            mid=Tensor(rng.standard_normal((2, 6, 8, 8)).astype(np.float32)),
            deep=Tensor(rng.standard_normal((2, 8, 4, 4)).astype(np.float32)),
        )
        params = make_paf_params(rng, (4, 6, 8), latent=3, fused=5)
        stats = AttentionStats()
        with no_grad():
            out = paf_forward(feats, params, mode="eval", stats=stats)
        assert out.shape == (2, 5, 16, 16)
        assert stats.rows == 2 * 16 * 16

    def test_pyramid_validation_rejects_bad_halving(self, rng):
        feats = PyramidFeatures(
            low=Tensor(rng.standard_normal((1, 4, 16, 16)).astype(np.float32)),
            mid=Tensor(rng.standard_normal((1, 6, 8, 8)).astype(np.float32)),
            deep=Tensor(rng.standard_normal((1, 8, 3, 4)).astype(np.float32)),
        )
        params = make_paf_params(rng, (4, 6, 8), latent=3, fused=5)
        with pytest.raises(ValueError):
            paf_forward(feats, params, mode="eval")

    def test_latent_width_mismatch_rejected(self, rng):
        query, context, keys = random_latents(rng, c=3)
        bad = LatentPyramid(
            query=Tensor(query),
            context=Tensor(rng.standard_normal((1, 2, 2, 2))),
            keys=[Tensor(k) for k in keys],
        )
        with pytest.raises(ValueError):
            build_attention(bad, make_params(rng, 3, 3))

    def test_num_views_bounds(self, rng):
        with pytest.raises(ValueError):
            make_paf_params(rng, (3, 3, 3), latent=2, fused=4, num_views=0)
        with pytest.raises(ValueError):
            make_paf_params(rng, (3, 3, 3), latent=2, fused=4, num_views=4)

    def test_fresh_params_start_neutral(self, rng):
        params = make_paf_params(rng, (3, 3, 3), latent=4, fused=6)
        for w in params.view_weights:
            assert float(w.data) == 1.0
        np.testing.assert_array_equal(params.channel_bias.data, np.eye(4))

    def test_gradients_flow_to_every_head_parameter(self, rng):
        feats = PyramidFeatures(
            low=Tensor(rng.standard_normal((2, 4, 8, 8)).astype(np.float32)),
            mid=Tensor(rng.standard_normal((2, 6, 4, 4)).astype(np.float32)),
            deep=Tensor(rng.standard_normal((2, 8, 2, 2)).astype(np.float32)),
        )
        params = make_paf_params(rng, (4, 6, 8), latent=3, fused=5)
        out = paf_forward(feats, params, mode="train")
        backward(ops.mean_all(ops.mul(out, out)))
        for name, kind, p in params.named_params():
            assert p.grad is not None, name
            assert np.isfinite(p.grad).all(), name
