import numpy as np
import pytest

from rmn import tensor as T
from rmn.gradcheck import check
from rmn.modules import (EmptyHistory, FeatureBundle, ReasoningModules, func, locate, pairwise,
                         project_candidates, relate)
from rmn.tensor import ParameterStore, Tensor

from oracles import attend_oracle

D_O, D_H, D_ATT = 3, 4, 5


def bundle(rng, n, r):
    return FeatureBundle(Tensor(rng.standard_normal((n, D_H))), Tensor(rng.standard_normal((n, r, D_O))),
                         Tensor(rng.standard_normal((n, D_H))), Tensor(rng.standard_normal(D_H)))


@pytest.fixture
def mods():
    return ReasoningModules(ParameterStore(seed=11), D_O, D_H, D_ATT)


def _o(att, V, q):
    return attend_oracle(V, q, att.W_2.data, att.W_3.data, att.w_1.data)[0]


class TestLocate:
    def test_singleton_identity(self, mods, rng):
        fb = bundle(rng, 1, 1)
        v, _ = locate(mods, fb, Tensor(rng.standard_normal(D_H)))
        np.testing.assert_array_equal(v.data, np.concatenate([fb.V_o.data[0, 0], fb.V_a.data[0]]))

    @pytest.mark.parametrize("n,r", [(1, 3), (4, 2), (5, 5)])
    def test_width(self, mods, rng, n, r):
        v, w = locate(mods, bundle(rng, n, r), Tensor(rng.standard_normal(D_H)))
        assert v.shape == (D_O + D_H,)
        assert w["space"].shape == (n, r) and w["time"].shape == (n,)

    def test_compositional_oracle(self, mods, rng):
        fb = bundle(rng, 2, 2)
        q = rng.standard_normal(D_H)
        v, _ = locate(mods, fb, Tensor(q))
        rows = [np.concatenate([_o(mods.locate_aos, fb.V_o.data[n], q), fb.V_a.data[n]]) for n in range(2)]
        np.testing.assert_allclose(v.data, _o(mods.locate_aot, np.array(rows), q), rtol=1e-12)


class TestPairwise:
    def test_enumeration(self):
        P = pairwise(Tensor([[1.0], [2.0]]), Tensor([[3.0], [4.0]]))
        np.testing.assert_array_equal(P.data, [[1, 3], [1, 4], [2, 3], [2, 4]])

    def test_singleton(self):
        P = pairwise(Tensor([[1.0, 2.0]]), Tensor([[5.0]]))
        np.testing.assert_array_equal(P.data, [[1, 2, 5]])

    def test_row_count(self, rng):
        assert pairwise(Tensor(rng.standard_normal((26, 2))), Tensor(rng.standard_normal((26, 3)))).shape == (676, 5)

    def test_diagonal(self, rng):
        A, B = rng.standard_normal((4, 2)), rng.standard_normal((4, 3))
        P = pairwise(Tensor(A), Tensor(B)).data
        np.testing.assert_array_equal(P[[i * 4 + i for i in range(4)]], np.concatenate([A, B], axis=1))

    def test_mismatch(self):
        with pytest.raises(T.ShapeMismatch):
            pairwise(Tensor(np.zeros((2, 1))), Tensor(np.zeros((3, 1))))


class TestRelate:
    def test_singleton(self, mods, rng):
        fb = bundle(rng, 1, 1)
        v, _ = relate(mods, fb, Tensor(rng.standard_normal(D_H)))
        m0 = np.concatenate([fb.V_o.data[0, 0], fb.V_m.data[0]])
        np.testing.assert_array_equal(v.data, np.concatenate([m0, m0]))

    def test_width(self, mods, rng):
        v, w = relate(mods, bundle(rng, 3, 2), Tensor(rng.standard_normal(D_H)))
        assert v.shape == (2 * (D_O + D_H),)
        assert w["time"].shape == (9,)

    def test_compositional_oracle(self, mods, rng):
        fb = bundle(rng, 2, 3)
        q = rng.standard_normal(D_H)
        v, _ = relate(mods, fb, Tensor(q))
        M = np.array([np.concatenate([_o(mods.relate_aos, fb.V_o.data[n], q), fb.V_m.data[n]]) for n in range(2)])
        P = np.array([np.concatenate([M[i], M[j]]) for i in range(2) for j in range(2)])
        ref = _o(mods.relate_aot, P, q)
        np.testing.assert_allclose(v.data, ref, rtol=1e-12)
        assert np.all(v.data <= P.max(axis=0) + 1e-12) and np.all(v.data >= P.min(axis=0) - 1e-12)


class TestFunc:
    def test_singleton_history(self, mods, rng):
        c = rng.standard_normal(D_H)
        v, _ = func(mods, [Tensor(c)], Tensor(rng.standard_normal(D_H)))
        np.testing.assert_array_equal(v.data, c)

    def test_zero_seed(self, mods, rng):
        v, _ = func(mods, [Tensor(np.zeros(D_H))], Tensor(rng.standard_normal(D_H)))
        np.testing.assert_array_equal(v.data, 0)

    def test_identical_states(self, mods, rng):
        c = rng.standard_normal(D_H)
        v, _ = func(mods, [Tensor(c)] * 4, Tensor(rng.standard_normal(D_H)))
        np.testing.assert_allclose(v.data, c, rtol=1e-12)

    def test_oracle(self, mods, rng):
        hist = rng.standard_normal((3, D_H))
        q = rng.standard_normal(D_H)
        v, _ = func(mods, [Tensor(h) for h in hist], Tensor(q))
        np.testing.assert_allclose(v.data, _o(mods.func_aot, hist, q), rtol=1e-12)

    def test_empty(self, mods, rng):
        with pytest.raises(EmptyHistory):
            func(mods, [], Tensor(np.zeros(D_H)))


class TestProjection:
    def test_zero_weights(self, mods, rng):
        mods.proj_l.W.data[...] = 0
        mods.proj_r.W.data[...] = 0
        vl, vr, vf = project_candidates(mods, Tensor(rng.standard_normal(D_O + D_H)),
                                        Tensor(rng.standard_normal(2 * (D_O + D_H))), Tensor(np.zeros(D_H)))
        for v in (vl, vr, vf):
            assert v.shape == (D_H,)
            np.testing.assert_array_equal(v.data, 0)

    def test_gradient_reaches_every_attention(self, mods, rng):
        fb = bundle(rng, 3, 2)
        h = Tensor(rng.standard_normal(D_H))
        v_l, _ = locate(mods, fb, h)
        v_r, _ = relate(mods, fb, h)
        v_f, _ = func(mods, [Tensor(rng.standard_normal(D_H)) for _ in range(3)], h)
        loss = T.sum(T.stack(list(project_candidates(mods, v_l, v_r, v_f))) * Tensor(rng.standard_normal((3, D_H))))
        loss.backward()
        for att in (mods.locate_aos, mods.locate_aot, mods.relate_aos, mods.relate_aot, mods.func_aot):
            assert att.w_1.grad is not None and np.any(att.w_1.grad != 0)


def test_modules_gradcheck(rng):
    store = ParameterStore(seed=2)
    mods = ReasoningModules(store, D_O, D_H, D_ATT)
    fb = FeatureBundle(*(Tensor(rng.standard_normal(s), requires_grad=True)
                         for s in ((3, D_H), (3, 2, D_O), (3, D_H), (D_H,))))
    h = Tensor(rng.standard_normal(D_H), requires_grad=True)
    hist = [Tensor(rng.standard_normal(D_H), requires_grad=True) for _ in range(2)]
    w = rng.standard_normal((3, D_H))

    def loss():
        cands = project_candidates(mods, locate(mods, fb, h)[0], relate(mods, fb, h)[0], func(mods, hist, h)[0])
        return T.sum(T.stack(list(cands)) * Tensor(w))

    res = check("modules", loss, [h, fb.V_a, fb.V_o, fb.V_m, *hist, *store.values()])
    assert res.max_rel_error < 1e-4, res.line()
