import math

import numpy as np
import pytest

from rmn import nn
from rmn import tensor as T
from rmn.gradcheck import check
from rmn.tensor import ParameterStore, Tensor

from oracles import attend_oracle


def zero_all(store):
    for p in store.values():
        p.data[...] = 0.0


class TestLstm:
    def test_zero_weights_give_zero_state(self, rng):
        store = ParameterStore()
        cell = nn.LstmCell(store, "c", 3, 4)
        zero_all(store)
        h, c = nn.lstm_step(cell, Tensor(rng.standard_normal(3)), *cell.zero_state())
        assert np.all(h.data == 0) and np.all(c.data == 0)

    def test_saturation_bounded(self, rng):
        store = ParameterStore(seed=3)
        cell = nn.LstmCell(store, "c", 5, 6)
        h, c = cell.zero_state()
        for _ in range(10):
            h, c = nn.lstm_step(cell, Tensor(rng.standard_normal(5) * 100), h, c)
        assert np.all(np.isfinite(h.data)) and np.all(np.isfinite(c.data))
        assert np.all(np.abs(h.data) <= 1.0)

    def test_forget_bias(self):
        cell = nn.LstmCell(ParameterStore(), "c", 2, 3)
        np.testing.assert_array_equal(cell.b.data, [0, 0, 0, 1, 1, 1, 0, 0, 0, 0, 0, 0])

    def test_gate_order_against_oracle(self, rng):
        store = ParameterStore(seed=2)
        cell = nn.LstmCell(store, "c", 3, 2)
        x, h0, c0 = rng.standard_normal(3), rng.standard_normal(2), rng.standard_normal(2)
        h, c = nn.lstm_step(cell, Tensor(x), Tensor(h0), Tensor(c0))
        z = x @ cell.W_x.data + h0 @ cell.W_h.data + cell.b.data
        sig = lambda v: 1 / (1 + np.exp(-v))  # noqa: E731
        i, f, g, o = sig(z[0:2]), sig(z[2:4]), np.tanh(z[4:6]), sig(z[6:8])
        c_ref = f * c0 + i * g
        np.testing.assert_allclose(c.data, c_ref, rtol=1e-12)
        np.testing.assert_allclose(h.data, o * np.tanh(c_ref), rtol=1e-12)

    def test_gradient(self, rng):
        store = ParameterStore(seed=4)
        cell = nn.LstmCell(store, "c", 3, 2)
        x = Tensor(rng.standard_normal(3), requires_grad=True)
        w = rng.standard_normal(2)

        def loss():
            h, c = nn.lstm_step(cell, x, Tensor(np.zeros(2)), Tensor(np.zeros(2)))
            return T.sum(h * Tensor(w)) + T.sum(c)

        assert check("lstm", loss, [x, *store.values()]).max_rel_error < 1e-4

    def test_width_check(self):
        cell = nn.LstmCell(ParameterStore(), "c", 3, 2)
        with pytest.raises(T.ShapeMismatch):
            nn.lstm_step(cell, Tensor(np.zeros(4)), *cell.zero_state())


class TestBiLstm:
    def test_single_frame(self, rng):
        store = ParameterStore(seed=1)
        bl = nn.BiLstm(store, "b", 3, 4)
        x = rng.standard_normal((1, 3))
        out = nn.bilstm_encode(bl, Tensor(x))
        hf, _ = nn.lstm_step(bl.fwd, Tensor(x[0]), *bl.fwd.zero_state())
        hb, _ = nn.lstm_step(bl.bwd, Tensor(x[0]), *bl.bwd.zero_state())
        np.testing.assert_array_equal(out.data[0], np.concatenate([hf.data, hb.data]))

    def test_paper_scale_shape(self, rng):
        bl = nn.BiLstm(ParameterStore(), "b", 8, 512)
        with T.no_grad():
            out = nn.bilstm_encode(bl, Tensor(rng.standard_normal((26, 8))))
        assert out.shape == (26, 512)

    def test_reversal_symmetry(self, rng):
        store = ParameterStore(seed=6)
        bl = nn.BiLstm(store, "b", 3, 4)
        x = rng.standard_normal((5, 3))
        out = nn.bilstm_encode(bl, Tensor(x)).data
        # swap the two directions' weights and feed the reversed sequence
        swapped = nn.BiLstm(ParameterStore(), "b", 3, 4)
        for a, b in ((swapped.fwd, bl.bwd), (swapped.bwd, bl.fwd)):
            a.W_x.data, a.W_h.data, a.b.data = b.W_x.data, b.W_h.data, b.b.data
        rev = nn.bilstm_encode(swapped, Tensor(x[::-1].copy())).data
        np.testing.assert_allclose(np.concatenate([rev[::-1, 2:], rev[::-1, :2]], axis=1), out, rtol=1e-12)

    def test_odd_size(self):
        with pytest.raises(nn.OddHiddenSize):
            nn.BiLstm(ParameterStore(), "b", 3, 5)

    def test_empty(self):
        bl = nn.BiLstm(ParameterStore(), "b", 3, 4)
        with pytest.raises(nn.EmptySequence):
            nn.bilstm_encode(bl, Tensor(np.zeros((0, 3))))


class TestAttention:
    def make(self, d_v=2, d_q=3, d_att=2, seed=0):
        return nn.AdditiveAttention(ParameterStore(seed=seed), "a", d_v, d_q, d_att)

    def test_singleton(self, rng):
        att = self.make()
        V = rng.standard_normal((1, 2))
        out, w = nn.attend(att, Tensor(V), Tensor(rng.standard_normal(3)))
        np.testing.assert_array_equal(out.data, V[0])
        np.testing.assert_array_equal(w.data, [1.0])

    def test_zero_w1_uniform(self, rng):
        att = self.make()
        att.w_1.data[...] = 0
        V = rng.standard_normal((4, 2))
        out, w = nn.attend(att, Tensor(V), Tensor(rng.standard_normal(3)))
        np.testing.assert_allclose(w.data, 0.25)
        np.testing.assert_allclose(out.data, V.mean(axis=0))

    def test_hand_case(self):
        att = self.make(d_q=2)
        att.w_1.data[...] = [1.0, 0.0]
        att.W_2.data[...] = np.eye(2)
        att.W_3.data[...] = 0.0
        out, w = nn.attend(att, Tensor(np.eye(2)), Tensor([0.3, -7.0]))
        e = math.exp(math.tanh(1.0))
        assert math.tanh(1.0) == pytest.approx(0.7616, abs=1e-4)
        np.testing.assert_allclose(w.data, [e / (e + 1), 1 / (e + 1)], rtol=1e-12)
        np.testing.assert_allclose(w.data, [0.6817, 0.3183], atol=1e-4)
        np.testing.assert_allclose(out.data, [0.6817, 0.3183], atol=1e-4)

    def test_matches_oracle(self, rng):
        att = self.make(d_v=3, d_q=4, d_att=5, seed=3)
        V, q = rng.standard_normal((6, 3)), rng.standard_normal(4)
        out, w = nn.attend(att, Tensor(V), Tensor(q))
        ref_out, ref_w = attend_oracle(V, q, att.W_2.data, att.W_3.data, att.w_1.data)
        np.testing.assert_allclose(out.data, ref_out, rtol=1e-12)
        np.testing.assert_allclose(w.data, ref_w, rtol=1e-12)

    def test_permutation_equivariance(self, rng):
        att = self.make(seed=2)
        V, q = rng.standard_normal((5, 2)), Tensor(rng.standard_normal(3))
        perm = rng.permutation(5)
        out, w = nn.attend(att, Tensor(V), q)
        out_p, w_p = nn.attend(att, Tensor(V[perm]), q)
        np.testing.assert_allclose(w_p.data, w.data[perm], rtol=1e-12)
        np.testing.assert_allclose(out_p.data, out.data, rtol=1e-12)

    def test_convex_hull(self, rng):
        att = self.make(seed=4)
        V = rng.standard_normal((5, 2))
        out, w = nn.attend(att, Tensor(V), Tensor(rng.standard_normal(3)))
        assert np.all(w.data >= 0) and abs(w.data.sum() - 1) < 1e-6
        assert np.all(out.data <= V.max(axis=0) + 1e-12) and np.all(out.data >= V.min(axis=0) - 1e-12)

    def test_aos_single_region_identity(self, rng):
        att = self.make()
        V = rng.standard_normal((2, 1, 2))
        out, _ = nn.attend_over_space(att, Tensor(V), Tensor(rng.standard_normal(3)))
        np.testing.assert_array_equal(out.data, V[:, 0])

    def test_aot_single_step_identity(self, rng):
        att = self.make()
        V = rng.standard_normal((1, 2))
        out, _ = nn.attend_over_time(att, Tensor(V), Tensor(rng.standard_normal(3)))
        np.testing.assert_array_equal(out.data, V[0])

    def test_aos_then_aot_compositional(self, rng):
        aos, aot = self.make(seed=1), self.make(seed=2)
        V = rng.standard_normal((2, 2, 2))
        q = rng.standard_normal(3)
        per_frame, _ = nn.attend_over_space(aos, Tensor(V), Tensor(q))
        out, _ = nn.attend_over_time(aot, per_frame, Tensor(q))
        rows = [attend_oracle(V[n], q, aos.W_2.data, aos.W_3.data, aos.w_1.data)[0] for n in range(2)]
        ref, _ = attend_oracle(np.array(rows), q, aot.W_2.data, aot.W_3.data, aot.w_1.data)
        np.testing.assert_allclose(out.data, ref, rtol=1e-12)

    def test_rank_checks(self):
        att = self.make()
        with pytest.raises(T.ShapeMismatch):
            nn.attend_over_space(att, Tensor(np.zeros((2, 2))), Tensor(np.zeros(3)))
        with pytest.raises(T.ShapeMismatch):
            nn.attend_over_time(att, Tensor(np.zeros((1, 2, 2))), Tensor(np.zeros(3)))

    def test_gradient(self, rng):
        store = ParameterStore(seed=9)
        att = nn.AdditiveAttention(store, "a", 3, 2, 4)
        V = Tensor(rng.standard_normal((4, 3)), requires_grad=True)
        q = Tensor(rng.standard_normal(2), requires_grad=True)
        w = rng.standard_normal(3)
        res = check("att", lambda: T.sum(nn.attend(att, V, q)[0] * Tensor(w)), [V, q, *store.values()])
        assert res.max_rel_error < 1e-4


class TestHead:
    def test_zero_weights_uniform(self, rng):
        store = ParameterStore()
        head = nn.MlpHead(store, "h", 6, 4, 5)
        zero_all(store)
        logits = nn.mlp_head(head, *(Tensor(rng.standard_normal(2)) for _ in range(3)))
        np.testing.assert_array_equal(logits.data, 0)
        np.testing.assert_allclose(T.softmax(logits).data, 0.2)

    def test_msvd_vocab_width(self, rng):
        head = nn.MlpHead(ParameterStore(), "h", 3 * 4, 4, 7351)
        with T.no_grad():
            logits = nn.mlp_head(head, *(Tensor(rng.standard_normal(4)) for _ in range(3)))
        assert logits.shape == (7351,)

    def test_gradient(self, rng):
        store = ParameterStore(seed=5)
        head = nn.MlpHead(store, "h", 6, 3, 5)
        xs = [Tensor(rng.standard_normal(2), requires_grad=True) for _ in range(3)]
        res = check("head", lambda: T.sum(T.log_softmax(nn.mlp_head(head, *xs)) * Tensor(np.eye(5)[2])),
                    [*xs, *store.values()])
        assert res.max_rel_error < 1e-4


class TestEmbedding:
    def test_lookup_and_range(self):
        emb = nn.Embedding(ParameterStore(), "e", 5, 3)
        np.testing.assert_array_equal(emb(2).data, emb.table.data[2])
        with pytest.raises(IndexError):
            emb(5)

    def test_gradient_hits_only_row(self):
        emb = nn.Embedding(ParameterStore(), "e", 5, 3)
        T.sum(emb(1)).backward()
        expected = np.zeros((5, 3))
        expected[1] = 1
        np.testing.assert_array_equal(emb.table.grad, expected)
