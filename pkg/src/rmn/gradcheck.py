"""Central finite-difference checks for every differentiable op, block,
reasoning module, and the full single-caption loss."""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from rmn import tensor as T
from rmn.tensor import ParameterStore, Tensor

STEP = 1e-5
BLOCK_TOL = 1e-4
MODEL_TOL = 1e-3
# absolute floor of the relative-error denominator; below it FD round-off dominates
REL_FLOOR = 1e-6


@dataclass
class CheckResult:
    name: str
    max_rel_error: float
    tolerance: float
    n_checked: int

    @property
    def passed(self) -> bool:
        return bool(np.isfinite(self.max_rel_error)) and self.max_rel_error < self.tolerance

    def line(self) -> str:
        flag = "PASS" if self.passed else "FAIL"
        return f"{flag}  {self.name:<34} max_rel_err={self.max_rel_error:.3e}  tol={self.tolerance:.0e}  entries={self.n_checked}"


def relative_error(a, n) -> np.ndarray:
    a, n = np.asarray(a, dtype=np.float64), np.asarray(n, dtype=np.float64)
    return np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), REL_FLOOR)


def numeric_grad(fn, x: Tensor, indices, h: float = STEP) -> np.ndarray:
    """Central differences of scalar ``fn()`` w.r.t. the listed entries of ``x``."""
    out = np.empty(len(indices))
    with T.no_grad():
        for k, idx in enumerate(indices):
            orig = x.data[idx]
            x.data[idx] = orig + h
            fp = float(fn().data)
            x.data[idx] = orig - h
            fm = float(fn().data)
            x.data[idx] = orig
            out[k] = (fp - fm) / (2 * h)
    return out


def check(name: str, fn, inputs, tol: float = BLOCK_TOL, max_entries: int | None = None,
          rng=None) -> CheckResult:
    """Compare autodiff and finite-difference gradients of scalar ``fn()``.

    ``inputs`` are leaf tensors with ``requires_grad``; when ``max_entries`` is
    set, that many randomly chosen entries per tensor are checked.
    """
    rng = rng or np.random.default_rng(0)
    for x in inputs:
        x.grad = None
    loss = fn()
    loss.backward()
    worst, count = 0.0, 0
    for x in inputs:
        analytic = x.grad if x.grad is not None else np.zeros_like(x.data)
        all_idx = list(np.ndindex(x.shape))
        if max_entries is not None and len(all_idx) > max_entries:
            pick = rng.choice(len(all_idx), size=max_entries, replace=False)
            all_idx = [all_idx[i] for i in sorted(pick)]
        num = numeric_grad(fn, x, all_idx)
        ana = np.array([analytic[i] for i in all_idx])
        if len(all_idx):
            worst = max(worst, float(np.max(relative_error(ana, num))))
        count += len(all_idx)
    return CheckResult(name, worst, tol, count)


def _leaf(rng, shape, scale=1.0, positive=False):
    x = rng.standard_normal(shape) * scale
    if positive:
        x = np.abs(x) + 0.5
    return Tensor(x, requires_grad=True)


def _weighted(out: Tensor, w: np.ndarray) -> Tensor:
    return T.sum(out * Tensor(w))


def tensor_op_checks(rng) -> list:
    """One check per registered tensor op, on random shapes."""
    res = []

    def r(*shape):
        return rng.standard_normal(shape)

    a, b = _leaf(rng, (3, 4)), _leaf(rng, (4,))
    w = r(3, 4)
    res.append(check("add (broadcast)", lambda: _weighted(a + b, w), [a, b]))
    res.append(check("sub (broadcast)", lambda: _weighted(a - b, w), [a, b]))
    c = _leaf(rng, (3, 1))
    res.append(check("mul (broadcast)", lambda: _weighted(a * c, w), [a, c]))
    d = _leaf(rng, (3, 4), positive=True)
    res.append(check("div", lambda: _weighted(a / d, w), [a, d]))
    res.append(check("neg", lambda: _weighted(-a, w), [a]))

    m1, m2 = _leaf(rng, (3, 4)), _leaf(rng, (4, 2))
    res.append(check("matmul", lambda w=r(3, 2): _weighted(m1 @ m2, w), [m1, m2]))
    bm, bv = _leaf(rng, (2, 3, 4)), _leaf(rng, (4, 5))
    res.append(check("matmul (batched)", lambda w=r(2, 3, 5): _weighted(bm @ bv, w), [bm, bv]))
    vec = _leaf(rng, (4,))
    res.append(check("matmul (vector)", lambda w=r(3): _weighted(m1 @ vec, w), [m1, vec]))

    x3 = _leaf(rng, (2, 3, 4))
    res.append(check("sum(axis=1)", lambda w=r(2, 4): _weighted(T.sum(x3, axis=1), w), [x3]))
    res.append(check("mean(axis=0)", lambda w=r(3, 4): _weighted(T.mean(x3, axis=0), w), [x3]))

    v5 = _leaf(rng, (5,))
    pos = _leaf(rng, (5,), positive=True)
    w5 = r(5)
    res.append(check("tanh", lambda: _weighted(T.tanh(v5), w5), [v5]))
    res.append(check("sigmoid", lambda: _weighted(T.sigmoid(v5), w5), [v5]))
    res.append(check("exp", lambda: _weighted(T.exp(v5), w5), [v5]))
    res.append(check("log", lambda: _weighted(T.log(pos), w5), [pos]))
    res.append(check("softplus", lambda: _weighted(T.softplus(v5), w5), [v5]))
    res.append(check("softmax", lambda: _weighted(T.softmax(v5, axis=0), w5), [v5]))
    res.append(check("log_softmax", lambda: _weighted(T.log_softmax(v5, axis=0), w5), [v5]))
    res.append(check("softmax(axis=1)", lambda w=r(2, 3, 4): _weighted(T.softmax(x3, axis=1), w), [x3]))

    res.append(check("reshape", lambda w=r(4, 3): _weighted(T.tanh(T.reshape(a, (4, 3))), w), [a]))
    e = _leaf(rng, (3, 2))
    res.append(check("concat", lambda w=r(3, 6): _weighted(T.tanh(T.concat([a, e], axis=1)), w), [a, e]))
    res.append(check("slice", lambda w=r(2, 2): _weighted(T.tanh(a[1:, ::2]), w), [a]))
    res.append(check("take (repeated rows)", lambda w=r(4, 4): _weighted(T.take(a, [0, 2, 2, 1]), w), [a]))
    res.append(check("stack", lambda w=r(2, 5): _weighted(T.stack([v5, pos]), w), [v5, pos]))
    return res


def block_checks(rng) -> list:
    from rmn import nn

    res = []
    store = ParameterStore(seed=1)
    cell = nn.LstmCell(store, "lstm", 3, 2)
    x, h0, c0 = _leaf(rng, (3,)), _leaf(rng, (2,)), _leaf(rng, (2,))
    w2 = rng.standard_normal(2)

    def lstm_loss():
        h, c = nn.lstm_step(cell, x, h0, c0)
        return _weighted(h, w2) + _weighted(c, w2[::-1].copy())

    res.append(check("lstm_step", lstm_loss, [cell.W_x, cell.W_h, cell.b, x, h0, c0]))

    bi = nn.BiLstm(store, "bilstm", 3, 4)
    seq = _leaf(rng, (4, 3))
    wb = rng.standard_normal((4, 4))
    res.append(check("bilstm_encode", lambda: _weighted(nn.bilstm_encode(bi, seq), wb),
                     [seq, bi.fwd.W_x, bi.fwd.W_h, bi.fwd.b, bi.bwd.W_x, bi.bwd.W_h, bi.bwd.b]))

    att = nn.AdditiveAttention(store, "att", 3, 4, 5)
    V, q = _leaf(rng, (4, 3)), _leaf(rng, (4,))
    wa = rng.standard_normal(3)
    res.append(check("attend", lambda: _weighted(nn.attend(att, V, q)[0], wa),
                     [V, q, att.W_2, att.W_3, att.w_1]))
    Vo = _leaf(rng, (2, 3, 3))
    ws = rng.standard_normal((2, 3))
    res.append(check("attend_over_space", lambda: _weighted(nn.attend_over_space(att, Vo, q)[0], ws),
                     [Vo, q, att.W_2, att.W_3, att.w_1]))
    res.append(check("attend_over_time", lambda: _weighted(nn.attend_over_time(att, V, q)[0], wa),
                     [V, q, att.W_2, att.W_3, att.w_1]))

    emb = nn.Embedding(store, "emb", 6, 3)
    res.append(check("embedding", lambda: _weighted(T.tanh(emb(4)), wa), [emb.table]))

    head = nn.MlpHead(store, "head", 6, 4, 5)
    v, he, hd = _leaf(rng, (2,)), _leaf(rng, (2,)), _leaf(rng, (2,))
    gold = 3
    res.append(check("mlp_head + log_softmax",
                     lambda: -T.log_softmax(nn.mlp_head(head, v, he, hd), axis=0)[gold],
                     [v, he, hd, head.fc1.W, head.fc1.b, head.fc2.W, head.fc2.b]))
    return res


def _toy_bundle(rng, n=3, r=2, d_o=3, d_h=4):
    from rmn.modules import FeatureBundle
    return FeatureBundle(_leaf(rng, (n, d_h)), _leaf(rng, (n, r, d_o)), _leaf(rng, (n, d_h)),
                         _leaf(rng, (d_h,)))


def module_checks(rng) -> list:
    from rmn import modules as M
    from rmn import selector as S

    res = []
    store = ParameterStore(seed=2)
    d_o, d_h = 3, 4
    mods = M.ReasoningModules(store, d_o, d_h, 5)
    fb = _toy_bundle(rng, d_o=d_o, d_h=d_h)
    h_en = _leaf(rng, (d_h,))
    feats = [fb.V_a, fb.V_o, fb.V_m, h_en]
    wl = rng.standard_normal(d_o + d_h)
    wr = rng.standard_normal(2 * (d_o + d_h))
    res.append(check("locate", lambda: _weighted(M.locate(mods, fb, h_en)[0], wl),
                     feats + [mods.locate_aos.W_2, mods.locate_aos.w_1, mods.locate_aot.W_3]))
    A, B = _leaf(rng, (3, 2)), _leaf(rng, (3, 1))
    res.append(check("pairwise", lambda w=rng.standard_normal((9, 3)): _weighted(T.tanh(M.pairwise(A, B)), w), [A, B]))
    res.append(check("relate", lambda: _weighted(M.relate(mods, fb, h_en)[0], wr),
                     feats + [mods.relate_aos.W_3, mods.relate_aot.W_2, mods.relate_aot.w_1]))
    hist = [_leaf(rng, (d_h,)) for _ in range(3)]
    wf = rng.standard_normal(d_h)
    res.append(check("func", lambda: _weighted(M.func(mods, hist, h_en)[0], wf),
                     hist + [h_en, mods.func_aot.W_2, mods.func_aot.W_3, mods.func_aot.w_1]))
    vl, vr, vf = _leaf(rng, (d_o + d_h,)), _leaf(rng, (2 * (d_o + d_h),)), _leaf(rng, (d_h,))
    wp = rng.standard_normal(d_h)
    res.append(check("project_candidates",
                     lambda: sum(_weighted(c, wp) for c in M.project_candidates(mods, vl, vr, vf)),
                     [vl, vr, vf, mods.proj_l.W, mods.proj_r.W]))

    scorer = S.Scorer(store, "score", d_h, d_h, 3)
    v = _leaf(rng, (d_h,))
    res.append(check("score", lambda: S.score(scorer, h_en, v),
                     [h_en, v, scorer.fc_h.W, scorer.fc_v.W, scorer.fc_out.W, scorer.fc_out.b]))

    scores = _leaf(rng, (3,), positive=True)
    noise = rng.gumbel(size=3)
    gold = 1
    res.append(check("select (relaxed decision)",
                     lambda: -S.select(scores, 0.7, mode="train", noise=noise).log_z_backward[gold],
                     [scores]))

    # straight-through contract: the hard combine back-propagates exactly like
    # the soft mixture sum_k z_backward[k] v_k evaluated at the same point
    cands = [_leaf(rng, (d_h,)) for _ in range(3)]
    wc = rng.standard_normal(d_h)

    def st_loss():
        dec = S.select(scores, 0.7, mode="train", noise=noise)
        return _weighted(S.combine(dec, cands), wc)

    def soft_loss():
        dec = S.select(scores, 0.7, mode="train", noise=noise)
        return _weighted(S.combine_soft(dec, cands), wc)

    for x in cands + [scores]:
        x.grad = None
    st_loss().backward()
    st_grads = [x.grad.copy() for x in cands + [scores]]
    soft = check("combine (soft mixture)", soft_loss, cands + [scores])
    soft_grads = [x.grad for x in cands + [scores]]
    err = max(float(np.max(relative_error(a, b))) for a, b in zip(st_grads, soft_grads))
    res.append(soft)
    res.append(CheckResult("combine (straight-through rule)", max(err, soft.max_rel_error),
                           BLOCK_TOL, soft.n_checked))
    return res


TOY = dict(d_h=8, vocab_size=12, n_frames=3, n_regions=2, steps=4, d_feat=5)


def end_to_end_checks(rng, max_entries: int | None = None) -> list:
    """Whole-caption loss on a toy configuration with fixed Gumbel noise.

    Hard selection is checked with the exact derivative of the chosen branch
    (the decision is locally constant); soft selection through the relaxation.
    """
    from rmn.data import BOS, EOS, CaptionSample, RawFeatures
    from rmn.model import RMN, ModelConfig, unroll_teacher_forced
    from rmn.selector import ModuleKind

    cfg = TOY
    n, r, d = cfg["n_frames"], cfg["n_regions"], cfg["d_feat"]
    feats = RawFeatures(rng.standard_normal((n, d)), rng.standard_normal((n, r, d)),
                        rng.standard_normal((n, d)))
    words = list(rng.integers(4, cfg["vocab_size"], size=cfg["steps"] - 1))
    labels = [ModuleKind(int(k)) for k in rng.integers(0, 3, size=len(words))]
    sample = CaptionSample("toy", [BOS, *words, EOS], labels)
    noise = [rng.gumbel(size=3) for _ in range(cfg["steps"])]
    res = []
    for selection, estimator in (("hard", "exact"), ("soft", "straight_through")):
        mcfg = ModelConfig(cfg["vocab_size"], d, d, d, d_h=cfg["d_h"], selection=selection,
                           estimator=estimator, dtype="float64")
        model = RMN(mcfg, seed=3)
        params = list(model.store.values())

        def loss():
            return unroll_teacher_forced(model, feats, sample, 1.0, noise=noise).total

        res.append(check(f"end-to-end loss ({selection})", loss, params, MODEL_TOL, max_entries,
                         np.random.default_rng(4)))
    return res


def run_all(seed: int = 0, max_entries: int | None = 40, report=print) -> list:
    """Run every check; ``report`` receives one line per check."""
    rng = np.random.default_rng(seed)
    t0 = time.time()
    results = []
    for group in (tensor_op_checks, block_checks, module_checks):
        for res in group(rng):
            results.append(res)
            report(res.line())
    for res in end_to_end_checks(rng, max_entries):
        results.append(res)
        report(res.line())
    report(f"{sum(r.passed for r in results)}/{len(results)} checks passed in {time.time() - t0:.1f}s")
    return results
