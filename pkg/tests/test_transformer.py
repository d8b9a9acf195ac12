"""Graph-masked attention: oracle equality, locality, equivariance, gradients."""

import numpy as np
import pytest

from helpers import fd_check, scalar_attention
from stylegraph import autodiff as ad
from stylegraph import transformer as tr
from stylegraph.autodiff import constant, parameter
from stylegraph.classifiers import TextCNNParams, textcnn_forward
from stylegraph.graphs import augment_with_style_node, build_adjacency

rng = np.random.default_rng(42)


def small_config(**kw):
    return tr.ModelConfig(d_n=8, heads=2, layers=2, feature_maps=4, **kw)


def identity_attention(d):
    eye = np.eye(d)
    return tr.AttentionParams(constant(eye), constant(eye), constant(eye), constant(eye))


class TestMaskedAttention:
    def test_identity_mask_identity_weights(self):
        d = 4
        x = rng.standard_normal((3, d))
        out = tr.masked_multihead_attention(
            constant(x), constant(x), np.eye(3), identity_attention(d), heads=1
        )
        # each node attends only to itself: softmax over one slot is 1
        assert np.allclose(out.data, x + x, atol=1e-12)

    def test_masked_position_bit_invisible(self):
        d = 8
        p = tr.AttentionParams.create(rng, d)
        q = constant(rng.standard_normal((3, d)))
        kv = rng.standard_normal((3, d))
        kv2 = kv.copy()
        kv2[2] += 1e6  # huge perturbation at a masked-out position
        mask = np.array([[1, 1, 0], [1, 1, 0], [0, 0, 1]])
        o1 = tr.masked_multihead_attention(q, constant(kv), mask, p, 2)
        o2 = tr.masked_multihead_attention(q, constant(kv2), mask, p, 2)
        assert np.array_equal(o1.data[:2], o2.data[:2])

    def test_matches_scalar_oracle(self):
        d = 2
        wq = [[0.3, -0.5], [0.8, 0.1]]
        wk = [[1.0, 0.2], [-0.4, 0.6]]
        wv = [[0.5, 0.5], [-0.2, 0.9]]
        wo = [[0.7, -0.1], [0.3, 0.4]]
        q_rows = [[1.0, 2.0], [-1.0, 0.5]]
        kv_rows = [[0.2, -0.7], [1.5, 0.3]]
        mask = [[1, 1], [1, 1]]
        expected = scalar_attention(q_rows, kv_rows, mask, wq, wk, wv, wo, d_k=d)
        p = tr.AttentionParams(constant(wq), constant(wk), constant(wv), constant(wo))
        out = tr.masked_multihead_attention(
            constant(q_rows), constant(kv_rows), np.array(mask), p, heads=1
        )
        assert np.allclose(out.data, expected, atol=1e-12)

    def test_degenerate_mask_rejected(self):
        d = 4
        p = tr.AttentionParams.create(rng, d)
        x = constant(rng.standard_normal((2, d)))
        with pytest.raises(tr.DegenerateMaskError):
            tr.masked_multihead_attention(x, x, np.array([[1, 0], [0, 0]]), p, 1)


class TestStyleEmbed:
    def test_distinct_labels_distinct_vectors(self):
        p = tr.StyleEmbedderParams.create(rng, 8)
        v0 = tr.style_embed(0, p).data
        v1 = tr.style_embed(1, p).data
        assert np.linalg.norm(v0 - v1) > 0

    def test_zero_weights_gives_bias(self):
        p = tr.StyleEmbedderParams.create(rng, 4)
        for t in (p.w1, p.w2, p.b1):
            t.data = np.zeros_like(t.data)
        p.b2.data = np.arange(4.0)
        assert np.array_equal(tr.style_embed(0, p).data, np.arange(4.0))
        assert np.array_equal(tr.style_embed(1, p).data, np.arange(4.0))

    def test_output_length(self):
        p = tr.StyleEmbedderParams.create(rng, 16)
        assert tr.style_embed(1, p).shape == (16,)
        assert tr.style_embed(np.array([0, 1, 1]), p).shape == (3, 16)

    def test_label_validation(self):
        p = tr.StyleEmbedderParams.create(rng, 4)
        with pytest.raises(ValueError):
            tr.style_embed(2, p)


def path_graph(k):
    """1-2-3-...-k chain (head of token i is i+1, root at the end)."""
    return build_adjacency([i + 2 for i in range(k - 1)] + [0])


class TestSGT:
    def test_single_token_attends_self_and_style(self):
        cfg = small_config()
        params = tr.SGTParams.create(rng, cfg)
        aug = augment_with_style_node(build_adjacency([0]))
        out = tr.sgt_encode(constant(rng.standard_normal((1, 8))), aug, 1, params, cfg)
        assert out.shape == (1, 8)
        assert np.all(np.isfinite(out.data))

    def test_styles_change_output(self):
        cfg = small_config()
        params = tr.SGTParams.create(rng, cfg)
        aug = augment_with_style_node(path_graph(4))
        x = constant(rng.standard_normal((4, 8)))
        o0 = tr.sgt_encode(x, aug, 0, params, cfg)
        o1 = tr.sgt_encode(x, aug, 1, params, cfg)
        assert np.linalg.norm(o0.data - o1.data) > 0

    @pytest.mark.parametrize("static", [True, False])
    def test_permutation_equivariance(self, static):
        cfg = small_config(style_node_static=static)
        params = tr.SGTParams.create(rng, cfg)
        adj = build_adjacency([2, 3, 0, 3, 2])
        x = rng.standard_normal((5, 8))
        perm = np.array([3, 0, 4, 1, 2])
        out = tr.sgt_encode(constant(x), augment_with_style_node(adj), 1, params, cfg)
        out_p = tr.sgt_encode(
            constant(x[perm]),
            augment_with_style_node(adj[np.ix_(perm, perm)]),
            1,
            params,
            cfg,
        )
        assert np.abs(out_p.data - out.data[perm]).max() <= 1e-9

    def test_single_layer_locality_bit_exact(self):
        cfg = small_config()
        cfg1 = tr.ModelConfig(d_n=8, heads=2, layers=1, feature_maps=4)
        params = tr.SGTParams.create(rng, cfg1)
        adj = path_graph(5)
        aug = augment_with_style_node(adj)
        x = rng.standard_normal((5, 8))
        x2 = x.copy()
        x2[4] += 123.0  # node 4 is not a neighbor of node 0 or 1
        o1 = tr.sgt_encode(constant(x), aug, 0, params, cfg1)
        o2 = tr.sgt_encode(constant(x2), aug, 0, params, cfg1)
        assert np.array_equal(o1.data[0], o2.data[0])
        assert np.array_equal(o1.data[1], o2.data[1])
        assert not np.array_equal(o1.data[4], o2.data[4])

    def test_multilayer_locality_static_style(self):
        # with N_T=2 and a static style node, node 0 sees only its 2-hop ball
        cfg = small_config(style_node_static=True)
        params = tr.SGTParams.create(rng, cfg)
        adj = path_graph(6)
        aug = augment_with_style_node(adj)
        x = rng.standard_normal((6, 8))
        x2 = x.copy()
        x2[4] += 50.0  # 4 hops away from node 0
        x2[5] += 50.0
        o1 = tr.sgt_encode(constant(x), aug, 1, params, cfg)
        o2 = tr.sgt_encode(constant(x2), aug, 1, params, cfg)
        assert np.array_equal(o1.data[0], o2.data[0])
        assert not np.array_equal(o1.data[3], o2.data[3])

    def test_updating_style_node_breaks_locality(self):
        # the non-static variant routes information through the style node
        cfg = small_config(style_node_static=False)
        params = tr.SGTParams.create(rng, cfg)
        aug = augment_with_style_node(path_graph(6))
        x = rng.standard_normal((6, 8))
        x2 = x.copy()
        x2[5] += 50.0
        o1 = tr.sgt_encode(constant(x), aug, 1, params, cfg)
        o2 = tr.sgt_encode(constant(x2), aug, 1, params, cfg)
        assert not np.array_equal(o1.data[0], o2.data[0])


class TestCGT:
    def test_shapes_and_finiteness(self):
        cfg = small_config()
        params = tr.CGTParams.create(rng, cfg)
        adj = path_graph(4)
        x = constant(rng.standard_normal((4, 8)))
        out = tr.cgt_decode_nodes(x, x, adj, params, cfg)
        assert out.shape == (4, 8)
        assert np.all(np.isfinite(out.data))

    def test_source_outside_neighborhood_invisible(self):
        cfg1 = tr.ModelConfig(d_n=8, heads=2, layers=1, feature_maps=4)
        params = tr.CGTParams.create(rng, cfg1)
        adj = path_graph(5)
        q = constant(rng.standard_normal((5, 8)))
        src = rng.standard_normal((5, 8))
        src2 = src.copy()
        src2[4] += 77.0
        o1 = tr.cgt_decode_nodes(q, constant(src), adj, params, cfg1)
        o2 = tr.cgt_decode_nodes(q, constant(src2), adj, params, cfg1)
        assert np.array_equal(o1.data[0], o2.data[0])

    def test_matches_scalar_oracle_two_nodes(self):
        wq = [[0.3, -0.5], [0.8, 0.1]]
        wk = [[1.0, 0.2], [-0.4, 0.6]]
        wv = [[0.5, 0.5], [-0.2, 0.9]]
        wo = [[0.7, -0.1], [0.3, 0.4]]
        q_rows = [[0.4, -1.2], [2.0, 0.1]]
        src_rows = [[0.2, -0.7], [1.5, 0.3]]
        mask = [[1, 1], [1, 0]]
        expected = scalar_attention(q_rows, src_rows, mask, wq, wk, wv, wo, d_k=2)
        p = tr.AttentionParams(constant(wq), constant(wk), constant(wv), constant(wo))
        out = tr.masked_multihead_attention(
            constant(q_rows), constant(src_rows), np.array(mask), p, heads=1
        )
        assert np.allclose(out.data, expected, atol=1e-12)

    def test_size_mismatch_rejected(self):
        cfg = small_config()
        params = tr.CGTParams.create(rng, cfg)
        with pytest.raises(ad.ShapeError):
            tr.cgt_decode_nodes(
                constant(rng.standard_normal((3, 8))),
                constant(rng.standard_normal((4, 8))),
                path_graph(3),
                params,
                cfg,
            )

    def test_permutation_equivariance(self):
        cfg = small_config()
        params = tr.CGTParams.create(rng, cfg)
        adj = build_adjacency([2, 3, 0, 3])
        q = rng.standard_normal((4, 8))
        src = rng.standard_normal((4, 8))
        perm = np.array([2, 3, 1, 0])
        out = tr.cgt_decode_nodes(constant(q), constant(src), adj, params, cfg)
        out_p = tr.cgt_decode_nodes(
            constant(q[perm]), constant(src[perm]), adj[np.ix_(perm, perm)], params, cfg
        )
        assert np.abs(out_p.data - out.data[perm]).max() <= 1e-9


class TestComposedGradient:
    def test_sgt_cgt_classifier_path(self):
        cfg = small_config()
        sgt = tr.SGTParams.create(rng, cfg)
        cgt = tr.CGTParams.create(rng, cfg)
        cnn = TextCNNParams.create(rng, 8, 4)
        adj = build_adjacency([2, 0, 2])
        aug = augment_with_style_node(adj)
        nodes = parameter(rng.standard_normal((3, 8)))

        def f():
            enc = tr.sgt_encode(nodes, aug, 1, sgt, cfg)
            fused = tr.cgt_decode_nodes(enc, nodes, adj, cgt, cfg)
            return ad.cross_entropy(textcnn_forward(fused, cnn), 1)

        fd_check(
            f,
            [
                nodes,
                sgt.layers[0].attn.wq,
                sgt.layers[1].ffn.w1,
                sgt.style_mlp.w1,
                cgt.layers[0].attn.wk,
                cgt.layers[1].ln2_gain,
                cnn.filters[0].w,
            ],
        )


class TestBatchedMasks:
    def test_batch_matches_single(self):
        cfg = small_config()
        params = tr.SGTParams.create(rng, cfg)
        adjs = [build_adjacency([2, 0, 2]), build_adjacency([0, 1])]
        k = 3
        tok = tr.batch_token_adjacency(adjs, k)
        aug_b = tr.augment_batch_adjacency(tok, np.array([3, 2]))
        nb = rng.standard_normal((2, 3, 8))
        out_b = tr.sgt_encode(constant(nb), aug_b, np.array([1, 0]), params, cfg)
        o0 = tr.sgt_encode(constant(nb[0]), augment_with_style_node(adjs[0]), 1, params, cfg)
        o1 = tr.sgt_encode(constant(nb[1, :2]), augment_with_style_node(adjs[1]), 0, params, cfg)
        assert np.allclose(out_b.data[0], o0.data, atol=1e-12)
        assert np.allclose(out_b.data[1, :2], o1.data, atol=1e-12)

    def test_identity_ablation_mask(self):
        adjs = [build_adjacency([2, 0, 2])]
        tok = tr.batch_token_adjacency(adjs, 3, identity=True)
        assert np.array_equal(tok[0], np.eye(3, dtype=np.int8))
