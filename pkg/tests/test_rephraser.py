"""GRU cell, node-sequence encoding, teacher-forced and sampled decoding."""

import math

import numpy as np
import pytest

from helpers import fd_check
from stylegraph import autodiff as ad
from stylegraph import rephraser as rp
from stylegraph.autodiff import constant, parameter
from stylegraph.graphs import BOS_ID, EOS_ID
from stylegraph.optim import Adam

rng = np.random.default_rng(77)


def zero_gru(d_in, d_h):
    return rp.GRUParams(
        wx=constant(np.zeros((d_in, 3 * d_h))),
        wh=constant(np.zeros((d_h, 3 * d_h))),
        b=constant(np.zeros(3 * d_h)),
    )


class TestGRUCell:
    def test_zero_weights_halve_state(self):
        p = zero_gru(4, 4)
        h = constant(rng.standard_normal((2, 4)))
        x = constant(rng.standard_normal((2, 4)))
        out = rp.gru_cell(x, h, p)
        assert np.allclose(out.data, 0.5 * h.data, atol=1e-12)

    def test_zero_state_zero_candidate(self):
        p = zero_gru(4, 4)
        h = constant(np.zeros((1, 4)))
        out = rp.gru_cell(constant(rng.standard_normal((1, 4))), h, p)
        assert np.array_equal(out.data, np.zeros((1, 4)))

    def test_shape_mismatch(self):
        p = zero_gru(4, 4)
        with pytest.raises(ad.ShapeError):
            rp.gru_cell(constant(np.zeros((1, 5))), constant(np.zeros((1, 4))), p)

    def test_gradient(self):
        d = 3
        p = rp.GRUParams.create(rng, d, d)
        x = parameter(rng.standard_normal((2, d)))
        h = parameter(rng.standard_normal((2, d)))
        fd_check(lambda: (rp.gru_cell(x, h, p) ** 2.0).sum(), [x, h, p.wx, p.wh, p.b])


class TestEncodeNodes:
    def test_single_node_is_one_cell_step(self):
        d = 4
        p = rp.GRUParams.create(rng, d, d)
        x = rng.standard_normal((1, d))
        direct = rp.gru_cell(constant(x), constant(np.zeros((1, d))), p)
        scanned = rp.encode_nodes(constant(x[None, :, :]), p)
        assert np.allclose(scanned.data, direct.data, atol=1e-12)

    def test_trailing_pads_invisible_with_lengths(self):
        d = 4
        p = rp.GRUParams.create(rng, d, d)
        x = rng.standard_normal((1, 3, d))
        padded = np.concatenate([x, np.full((1, 2, d), 9.0)], axis=1)
        h1 = rp.encode_nodes(constant(x), p, lengths=np.array([3]))
        h2 = rp.encode_nodes(constant(padded), p, lengths=np.array([3]))
        assert np.array_equal(h1.data, h2.data)

    def test_distinct_inputs_distinct_states(self):
        d = 4
        p = rp.GRUParams.create(rng, d, d)
        a = rp.encode_nodes(constant(rng.standard_normal((1, 3, d))), p)
        b = rp.encode_nodes(constant(rng.standard_normal((1, 3, d))), p)
        assert np.linalg.norm(a.data - b.data) > 0

    def test_empty_sequence_rejected(self):
        p = rp.GRUParams.create(rng, 4, 4)
        with pytest.raises(ad.ShapeError):
            rp.encode_nodes(constant(np.zeros((1, 0, 4))), p)


def make_params(d=6, v=11):
    return rp.RephraserParams.create(rng, d, v)


class TestTeacherForced:
    def test_logit_count_matches_targets(self):
        p = make_params()
        emb = constant(rng.standard_normal((11, 6)))
        targets = np.array([[4, 5, EOS_ID]])
        logits = rp.decode_teacher_forced(constant(rng.standard_normal((1, 6))), targets, emb, p)
        assert logits.shape == (1, 3, 11)

    def test_uniform_logits_loss_is_len_log_v(self):
        # zero output projection -> uniform distribution over the vocabulary
        p = make_params()
        p.out_w.data = np.zeros_like(p.out_w.data)
        p.out_b.data = np.zeros_like(p.out_b.data)
        emb = constant(rng.standard_normal((11, 6)))
        targets = np.array([[4, 5, 6, EOS_ID]])
        logits = rp.decode_teacher_forced(constant(rng.standard_normal((1, 6))), targets, emb, p)
        nll = ad.cross_entropy_with_logits(logits, targets).sum()
        assert nll.item() == pytest.approx(4 * math.log(11), abs=1e-9)

    def test_empty_targets_rejected(self):
        p = make_params()
        with pytest.raises(ad.ShapeError):
            rp.decode_teacher_forced(
                constant(np.zeros((1, 6))), np.zeros((1, 0), dtype=int), constant(np.zeros((11, 6))), p
            )

    def test_overfit_smoke(self):
        # teacher-forced loss shrinks over 50 optimizer steps on one sentence
        d, v = 6, 11
        p = make_params(d, v)
        emb = parameter(rng.standard_normal((v, d)) * 0.1)
        nodes = parameter(rng.standard_normal((1, 4, d)))
        targets = np.array([[4, 7, 9, EOS_ID]])
        params = {"emb": emb, "nodes": nodes, "wod": p.out_w, "wxd": p.decoder.wx,
                  "whd": p.decoder.wh, "bd": p.decoder.b, "iw": p.init_w, "ib": p.init_b,
                  "ob": p.out_b, "wxe": p.encoder.wx, "whe": p.encoder.wh, "be": p.encoder.b}
        opt = Adam(params, 0.01)
        losses = []
        for _ in range(50):
            opt.zero_grad()
            h = rp.encode_nodes(nodes, p.encoder)
            logits = rp.decode_teacher_forced(h, targets, emb, p, nodes=nodes)
            loss = ad.cross_entropy_with_logits(logits, targets).sum()
            losses.append(loss.item())
            loss.backward()
            opt.step()
        assert losses[-1] < 0.25 * losses[0]


class TestSampledDecode:
    def test_zero_noise_peaked_logits_reduce_to_greedy(self):
        # at tau -> 0 the relaxed one-hots sharpen, so the trajectory is greedy
        p = make_params()
        emb = constant(rng.standard_normal((11, 6)))
        h = constant(rng.standard_normal((2, 6)))
        nodes = constant(rng.standard_normal((2, 3, 6)))
        dec = rp.decode_sample(h, emb, p, temperature=0.005, noise_fn=np.zeros, nodes=nodes)
        dec2 = rp.decode_sample(h, emb, p, temperature=0.005, noise_fn=np.zeros, nodes=nodes)
        ids, _ = rp.decode_greedy(h, emb, p, nodes=nodes)
        t = min(dec.token_ids.shape[1], ids.shape[1])
        assert np.array_equal(dec.token_ids[:, :t], ids[:, :t])
        assert np.array_equal(dec.token_ids, dec2.token_ids)  # deterministic

    def test_zero_noise_step_distribution_is_scaled_softmax(self):
        p = make_params()
        emb = constant(rng.standard_normal((11, 6)))
        h = constant(rng.standard_normal((1, 6)))
        dec = rp.decode_sample(h, emb, p, temperature=0.5, noise_fn=np.zeros, max_len=1)
        expected = ad.softmax(ad.mul(constant(dec.logits.data[:, 0, :]), 2.0), axis=-1)
        assert np.array_equal(dec.relaxed.data[:, 0, :], expected.data)

    def test_relaxed_rows_on_simplex(self):
        p = make_params()
        emb = constant(rng.standard_normal((11, 6)))
        g = np.random.Generator(np.random.Philox(3))
        dec = rp.decode_sample(constant(rng.standard_normal((3, 6))), emb, p, 1.0, rng=g)
        sums = dec.relaxed.data.sum(-1)
        assert np.abs(sums - 1.0).max() <= 1e-9

    def test_max_len_respected(self):
        p = make_params()
        # eos is never the argmax when its logit is forced very low
        p.out_b.data = np.zeros_like(p.out_b.data)
        p.out_b.data[EOS_ID] = -1e9
        emb = constant(rng.standard_normal((11, 6)))
        g = np.random.Generator(np.random.Philox(3))
        dec = rp.decode_sample(constant(rng.standard_normal((1, 6))), emb, p, 1.0, rng=g, max_len=5)
        assert dec.token_ids.shape[1] == 5
        assert dec.lengths.tolist() == [5]

    def test_gradient_reaches_decoder_params(self):
        p = make_params()
        emb = parameter(rng.standard_normal((11, 6)) * 0.1)
        g = np.random.Generator(np.random.Philox(9))
        h = constant(rng.standard_normal((2, 6)))
        dec = rp.decode_sample(h, emb, p, 1.0, rng=g)
        (dec.relaxed ** 2.0).sum().backward()
        assert p.out_w.grad is not None and np.abs(p.out_w.grad).sum() > 0
        assert p.decoder.wx.grad is not None and np.abs(p.decoder.wx.grad).sum() > 0

    def test_temperature_validation(self):
        p = make_params()
        with pytest.raises(ValueError):
            rp.decode_sample(constant(np.zeros((1, 6))), constant(np.zeros((11, 6))), p, 0.0, noise_fn=np.zeros)

    def test_greedy_deterministic(self):
        p = make_params()
        emb = constant(rng.standard_normal((11, 6)))
        h = constant(rng.standard_normal((2, 6)))
        a = rp.decode_greedy(h, emb, p)
        b = rp.decode_greedy(h, emb, p)
        assert np.array_equal(a[0], b[0])
        assert np.array_equal(a[1], b[1])
