"""Fusion tests: encoder oracle, inter-attention formula, decoder identities."""

import numpy as np
import pytest

import oracles
from lstmn import autodiff as ad
from lstmn import cells, fusion
from lstmn.autodiff import Tensor, grad_check
from lstmn.cells import TapeError, Tapes
from lstmn.fusion import (
    DecoderWeights,
    InterAttentionWeights,
    SourceTapes,
    deep_decode_step,
    encode,
    inter_attend,
    run_decoder,
    shallow_decode_step,
)


def row(vec):
    return Tensor(np.asarray(vec, dtype=np.float64)[None, :])


def randomize(rng, tensors, scale=0.8):
    for t in tensors:
        if t is not None:
            t.data[...] = rng.normal(scale=scale, size=t.data.shape)


def random_encoder(rng, hidden, embed, attn, layers=1):
    stack = cells.init_stack(rng, layers, hidden, embed, attn)
    for layer in stack.layers:
        randomize(rng, [layer.gates.w, layer.gates.bias, layer.attn.v,
                        layer.attn.w_h, layer.attn.w_x, layer.attn.w_htilde,
                        layer.attn.bias])
    return stack


def random_decoder(rng, hidden, embed, attn):
    dec = fusion.init_decoder(rng, hidden, embed, attn)
    randomize(rng, [dec.cell.gates.w, dec.cell.gates.bias, dec.cell.attn.v,
                    dec.cell.attn.w_h, dec.cell.attn.w_x, dec.cell.attn.w_htilde,
                    dec.cell.attn.bias, dec.inter.u, dec.inter.w_gamma,
                    dec.inter.w_x, dec.inter.w_gammatilde, dec.inter.w_r])
    return dec


def encode_ref(xs, layer):
    """Source tapes via the straight-line cell oracle (single layer)."""
    H, C = [], []
    hp = np.zeros(layer.gates.hidden_size)
    args = dict(W=layer.gates.w.data, b=layer.gates.bias.data,
                v=layer.attn.v.data, w_h=layer.attn.w_h.data,
                w_x=layer.attn.w_x.data, w_ht=layer.attn.w_htilde.data,
                bias=layer.attn.bias.data)
    for x in xs:
        h, c, _, ht, _ = oracles.lstmn_step_ref(x, H, C, hp, **args)
        H.append(h)
        C.append(c)
        hp = ht
    return H, C


class TestEncode:
    def test_length_one_source(self):
        rng = np.random.default_rng(30)
        enc = random_encoder(rng, 2, 2, 2)
        src, traces = encode([row(rng.normal(size=2))], enc)
        assert src.length == 1
        assert src.y.data.shape == (1, 1, 2)
        assert traces[0].weights is None   # no attention at the first step

    def test_zero_weights_zero_tapes(self):
        enc = cells.init_stack(np.random.default_rng(0), 1, 2, 2, 2)
        for t in (enc.layers[0].gates.w, enc.layers[0].gates.bias):
            t.data[...] = 0.0
        src, _ = encode([row([0.5, -0.5]), row([1.0, 2.0])], enc)
        np.testing.assert_array_equal(src.y.data, np.zeros((1, 2, 2)))
        np.testing.assert_array_equal(src.a.data, np.zeros((1, 2, 2)))

    def test_matches_stepwise_oracle(self):
        rng = np.random.default_rng(31)
        enc = random_encoder(rng, 2, 2, 2)
        xs = [rng.normal(size=2) for _ in range(3)]
        src, _ = encode([row(x) for x in xs], enc)
        H, C = encode_ref(xs, enc.layers[0])
        np.testing.assert_allclose(src.y.data[0], np.stack(H), atol=1e-12)
        np.testing.assert_allclose(src.a.data[0], np.stack(C), atol=1e-12)

    def test_empty_source_rejected(self):
        enc = cells.init_stack(np.random.default_rng(0), 1, 2, 2, 2)
        with pytest.raises(TapeError, match="empty"):
            encode([], enc)


class TestInterAttend:
    def test_zero_u_uniform(self):
        rng = np.random.default_rng(32)
        dec = fusion.init_decoder(rng, 2, 2, 3)   # u stays zero
        src = SourceTapes(y=Tensor(rng.normal(size=(1, 4, 2))),
                          a=Tensor(rng.normal(size=(1, 4, 2))))
        out = inter_attend(row(rng.normal(size=2)), src,
                           Tensor(np.zeros((1, 2))), dec.inter)
        np.testing.assert_allclose(out.weights.data[0], np.full(4, 0.25), atol=1e-12)

    def test_singleton_source(self):
        rng = np.random.default_rng(33)
        dec = random_decoder(rng, 2, 2, 3)
        y = rng.normal(size=(1, 1, 2))
        a = rng.normal(size=(1, 1, 2))
        out = inter_attend(row(rng.normal(size=2)),
                           SourceTapes(y=Tensor(y), a=Tensor(a)),
                           Tensor(np.zeros((1, 2))), dec.inter)
        np.testing.assert_array_equal(out.weights.data, [[1.0]])
        np.testing.assert_array_equal(out.gamma_tilde.data, y[:, 0])
        np.testing.assert_array_equal(out.alpha_tilde.data, a[:, 0])

    def test_matches_direct_formula(self):
        rng = np.random.default_rng(34)
        dec = random_decoder(rng, 3, 2, 2)
        Y = [rng.normal(size=3) for _ in range(3)]
        A = [rng.normal(size=3) for _ in range(3)]
        x, gprev = rng.normal(size=2), rng.normal(size=3)
        src = SourceTapes(y=Tensor(np.stack(Y)[None]), a=Tensor(np.stack(A)[None]))
        out = inter_attend(row(x), src, row(gprev), dec.inter)
        w = dec.inter
        p_ref, g_ref, a_ref = oracles.inter_attend_ref(
            x, Y, A, gprev, w.u.data, w.w_gamma.data, w.w_x.data, w.w_gammatilde.data)
        np.testing.assert_allclose(out.weights.data[0], p_ref, atol=1e-12)
        np.testing.assert_allclose(out.gamma_tilde.data[0], g_ref, atol=1e-12)
        np.testing.assert_allclose(out.alpha_tilde.data[0], a_ref, atol=1e-12)

    def test_masked_source_slots_get_zero_weight(self):
        rng = np.random.default_rng(35)
        dec = random_decoder(rng, 2, 2, 2)
        src = SourceTapes(y=Tensor(rng.normal(size=(2, 3, 2))),
                          a=Tensor(rng.normal(size=(2, 3, 2))),
                          mask=np.array([[1.0, 1.0, 0.0], [1.0, 1.0, 1.0]]))
        out = inter_attend(Tensor(rng.normal(size=(2, 2))), src,
                           Tensor(np.zeros((2, 2))), dec.inter)
        assert out.weights.data[0, 2] == 0.0
        np.testing.assert_allclose(out.weights.data.sum(axis=1), 1.0, atol=1e-9)


class TestDeepDecode:
    def test_zero_weights_zero_state(self):
        # r = sigma(0) = 0.5 everywhere, but the zero encoder gives
        # alpha~ = 0, so the new memory is exactly zero.
        rng = np.random.default_rng(36)
        dec = fusion.init_decoder(rng, 2, 2, 2)
        for t in (dec.cell.gates.w, dec.cell.gates.bias, dec.inter.w_r,
                  dec.inter.w_gamma, dec.inter.w_x, dec.inter.w_gammatilde):
            t.data[...] = 0.0
        src = SourceTapes(y=Tensor(np.zeros((1, 2, 2))), a=Tensor(np.zeros((1, 2, 2))))
        state, intra, inter = deep_decode_step(
            row([0.7, -0.3]), Tapes(), Tensor(np.zeros((1, 2))),
            Tensor(np.zeros((1, 2))), src, dec)
        np.testing.assert_allclose(inter.gate.data, np.full((1, 2), 0.5))
        np.testing.assert_array_equal(state.c.data, np.zeros((1, 2)))
        np.testing.assert_array_equal(state.h.data, np.zeros((1, 2)))

    def test_first_step_singleton_source_closed_form(self):
        # Empty target tape kills the intra terms: c = r*alpha_1 + i*c-hat.
        rng = np.random.default_rng(37)
        dec = random_decoder(rng, 3, 2, 2)
        y = rng.normal(size=(1, 1, 3))
        a = rng.normal(size=(1, 1, 3))
        x = rng.normal(size=2)
        src = SourceTapes(y=Tensor(y), a=Tensor(a))
        state, intra, inter = deep_decode_step(
            row(x), Tapes(), Tensor(np.zeros((1, 3))), Tensor(np.zeros((1, 3))),
            src, dec)
        i, f, o, chat = oracles.gate_blocks(
            np.zeros(3), x, dec.cell.gates.w.data, dec.cell.gates.bias.data)
        r = oracles.sigmoid(dec.inter.w_r.data @ np.concatenate([y[0, 0], x]))
        c_ref = r * a[0, 0] + i * chat
        np.testing.assert_allclose(state.c.data[0], c_ref, atol=1e-12)
        np.testing.assert_allclose(state.h.data[0], o * np.tanh(c_ref), atol=1e-12)

    def test_matches_straight_line_oracle_over_steps(self):
        rng = np.random.default_rng(38)
        dec = random_decoder(rng, 3, 2, 2)
        Y = [rng.normal(size=3) for _ in range(3)]
        A = [rng.normal(size=3) for _ in range(3)]
        src = SourceTapes(y=Tensor(np.stack(Y)[None]), a=Tensor(np.stack(A)[None]))
        xs = [rng.normal(size=2) for _ in range(3)]
        tapes = Tapes()
        htilde = Tensor(np.zeros((1, 3)))
        gamma = Tensor(np.zeros((1, 3)))
        H, C = [], []
        hp, gp = np.zeros(3), np.zeros(3)
        for x in xs:
            state, intra, inter = deep_decode_step(row(x), tapes, htilde, gamma, src, dec)
            h_ref, c_ref, w_ref, p_ref, r_ref, ht_ref, g_ref, a_ref = \
                oracles.deep_decode_step_ref(
                    x, H, C, hp, Y, A, gp,
                    dec.cell.gates.w.data, dec.cell.gates.bias.data,
                    dec.cell.attn.v.data, dec.cell.attn.w_h.data, dec.cell.attn.w_x.data,
                    dec.cell.attn.w_htilde.data, dec.cell.attn.bias.data,
                    dec.inter.u.data, dec.inter.w_gamma.data, dec.inter.w_x.data,
                    dec.inter.w_gammatilde.data, dec.inter.w_r.data)
            np.testing.assert_allclose(state.h.data[0], h_ref, atol=1e-12)
            np.testing.assert_allclose(state.c.data[0], c_ref, atol=1e-12)
            np.testing.assert_allclose(inter.weights.data[0], p_ref, atol=1e-12)
            np.testing.assert_allclose(inter.gate.data[0], r_ref, atol=1e-12)
            htilde, gamma = intra.htilde, inter.gamma_tilde
            H.append(h_ref)
            C.append(c_ref)
            hp, gp = ht_ref, g_ref

    def test_end_to_end_gradients(self):
        rng = np.random.default_rng(39)
        enc = random_encoder(rng, 2, 2, 2)
        dec = random_decoder(rng, 2, 2, 2)
        src_x = [rng.normal(size=(1, 2)) for _ in range(3)]
        tgt_x = [rng.normal(size=(1, 2)) for _ in range(3)]
        read = [rng.normal(size=(1, 2)) for _ in range(3)]
        params = dict(enc.named("encoder."))
        params.update(dec.named("decoder."))

        def loss():
            src, _ = encode([Tensor(x) for x in src_x], enc)
            run = run_decoder([Tensor(x) for x in tgt_x], src, dec, "deep")
            total = None
            for h, r in zip(run.outputs, read):
                term = ad.sum_all(ad.mul(h, Tensor(r)))
                total = term if total is None else ad.add(total, term)
            return total

        report = grad_check(loss, params, tolerance=1e-4)
        assert report.passed, str(report)


class TestShallowDecode:
    def test_zero_weights_prediction_input_zero(self):
        rng = np.random.default_rng(40)
        dec = fusion.init_decoder(rng, 2, 2, 2)
        for t in (dec.cell.gates.w, dec.cell.gates.bias,
                  dec.inter.w_gamma, dec.inter.w_x, dec.inter.w_gammatilde):
            t.data[...] = 0.0
        src = SourceTapes(y=Tensor(np.zeros((1, 2, 2))), a=Tensor(np.zeros((1, 2, 2))))
        _, _, _, context = shallow_decode_step(
            row([1.0, 1.0]), Tapes(), Tensor(np.zeros((1, 2))),
            Tensor(np.zeros((1, 2))), src, dec)
        np.testing.assert_array_equal(context.data, np.zeros((1, 4)))

    def test_singleton_source_context_is_that_slot(self):
        rng = np.random.default_rng(41)
        dec = random_decoder(rng, 2, 2, 2)
        y = rng.normal(size=(1, 1, 2))
        src = SourceTapes(y=Tensor(y), a=Tensor(rng.normal(size=(1, 1, 2))))
        _, _, inter, context = shallow_decode_step(
            row(rng.normal(size=2)), Tapes(), Tensor(np.zeros((1, 2))),
            Tensor(np.zeros((1, 2))), src, dec)
        np.testing.assert_array_equal(context.data[:, 2:], y[:, 0])

    def test_cell_update_is_plain_tape_step(self):
        rng = np.random.default_rng(42)
        dec = random_decoder(rng, 3, 2, 2)
        src = SourceTapes(y=Tensor(rng.normal(size=(1, 2, 3))),
                          a=Tensor(rng.normal(size=(1, 2, 3))))
        xs = [row(rng.normal(size=2)) for _ in range(3)]
        t_ref, t_dec = Tapes(), Tapes()
        ht_r = ht_d = Tensor(np.zeros((1, 3)))
        gamma = Tensor(np.zeros((1, 3)))
        for x in xs:
            s_ref, a_ref = cells.lstmn_step(x, t_ref, ht_r, dec.cell)
            s_dec, a_dec, inter, _ = shallow_decode_step(x, t_dec, ht_d, gamma, src, dec)
            np.testing.assert_array_equal(s_dec.h.data, s_ref.h.data)
            np.testing.assert_array_equal(s_dec.c.data, s_ref.c.data)
            ht_r, ht_d, gamma = a_ref.htilde, a_dec.htilde, inter.gamma_tilde

    def test_end_to_end_gradients(self):
        rng = np.random.default_rng(43)
        enc = random_encoder(rng, 2, 2, 2)
        dec = random_decoder(rng, 2, 2, 2)
        src_x = [rng.normal(size=(1, 2)) for _ in range(3)]
        tgt_x = [rng.normal(size=(1, 2)) for _ in range(3)]
        read = [rng.normal(size=(1, 4)) for _ in range(3)]
        params = dict(enc.named("encoder."))
        params.update(dec.named("decoder."))

        def loss():
            src, _ = encode([Tensor(x) for x in src_x], enc)
            run = run_decoder([Tensor(x) for x in tgt_x], src, dec, "shallow")
            total = None
            for ctx, r in zip(run.outputs, read):
                term = ad.sum_all(ad.mul(ctx, Tensor(r)))
                total = term if total is None else ad.add(total, term)
            return total

        report = grad_check(loss, params, tolerance=1e-4)
        assert report.passed, str(report)


class TestFusionIdentities:
    def _run_deep(self, dec, src, xs):
        tapes = Tapes()
        ht = Tensor(np.zeros((1, dec.cell.gates.hidden_size)))
        g = Tensor(np.zeros((1, dec.cell.gates.hidden_size)))
        hs, gates = [], []
        for x in xs:
            state, intra, inter = deep_decode_step(x, tapes, ht, g, src, dec)
            ht, g = intra.htilde, inter.gamma_tilde
            hs.append(state.h.data.copy())
            gates.append(inter.gate.data.copy())
        return np.stack(hs), np.stack(gates)

    def test_gate_forced_to_zero_reproduces_plain_decoder(self):
        # A -inf transfer-gate bias saturates r to exactly 0, collapsing
        # c = r*a~ + f*c~ + i*c-hat term-by-term onto the plain update.
        rng = np.random.default_rng(44)
        dec = random_decoder(rng, 3, 2, 2)
        dec.inter.r_bias = Tensor(np.full(3, -1e4))
        src = SourceTapes(y=Tensor(rng.normal(size=(1, 3, 3))),
                          a=Tensor(rng.normal(size=(1, 3, 3))))
        xs = [row(rng.normal(size=2)) for _ in range(4)]
        deep_hs, gates = self._run_deep(dec, src, xs)
        assert np.all(gates == 0.0)
        tapes = Tapes()
        ht = Tensor(np.zeros((1, 3)))
        plain_hs = []
        for x in xs:
            state, attn = cells.lstmn_step(x, tapes, ht, dec.cell)
            ht = attn.htilde
            plain_hs.append(state.h.data.copy())
        np.testing.assert_allclose(deep_hs, np.stack(plain_hs), atol=1e-10)

    def test_deep_equals_shallow_when_gate_dead_and_context_severed(self):
        rng = np.random.default_rng(46)
        dec = random_decoder(rng, 3, 2, 2)
        dec.inter.r_bias = Tensor(np.full(3, -1e4))
        src = SourceTapes(y=Tensor(rng.normal(size=(1, 4, 3))),
                          a=Tensor(rng.normal(size=(1, 4, 3))))
        xs = [row(rng.normal(size=2)) for _ in range(4)]
        deep_hs, _ = self._run_deep(dec, src, xs)
        run = run_decoder(xs, src, dec, "shallow")
        # Sever the context path: compare only the h half of each output.
        shallow_hs = np.stack([out.data[:, :3] for out in run.outputs])
        np.testing.assert_allclose(deep_hs, shallow_hs, atol=1e-10)

    def test_inter_distribution_over_m_slots_every_step(self):
        rng = np.random.default_rng(45)
        enc = random_encoder(rng, 2, 2, 2)
        dec = random_decoder(rng, 2, 2, 2)
        src, _ = encode([Tensor(rng.normal(size=(2, 2))) for _ in range(4)], enc)
        run = run_decoder([Tensor(rng.normal(size=(2, 2))) for _ in range(5)],
                          src, dec, "deep")
        for inter in run.inter:
            assert inter.weights.data.shape == (2, 4)
            np.testing.assert_allclose(inter.weights.data.sum(axis=1), 1.0, atol=1e-9)
            assert (inter.weights.data >= 0).all()
            assert ((inter.gate.data > 0) & (inter.gate.data < 1)).all()
