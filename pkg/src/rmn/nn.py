"""Neural building blocks: linear layers, LSTM cell, Bi-LSTM pass, additive
attention, embeddings and the two-layer word head.

Parameters live in a :class:`~rmn.tensor.ParameterStore` under
``block/<name>/<weight>``; the block objects only hold references.
"""

from __future__ import annotations

import math

import numpy as np

from rmn import tensor as T
from rmn.tensor import ParameterStore, ShapeMismatch, Tensor


class OddHiddenSize(ValueError):
    pass


class EmptySequence(ValueError):
    pass


def _bound(d_in: int) -> float:
    return 1.0 / math.sqrt(d_in)


def _check_width(x: Tensor, width: int, what: str) -> None:
    if x.shape[-1] != width:
        raise ShapeMismatch(f"{what}: expected last dim {width}, got {x.shape}")


class Linear:
    def __init__(self, store: ParameterStore, name: str, d_in: int, d_out: int, bias: bool = True):
        self.d_in, self.d_out = d_in, d_out
        self.W = store.uniform(f"block/{name}/W", (d_in, d_out), _bound(d_in))
        self.b = store.zeros(f"block/{name}/b", (d_out,)) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        _check_width(x, self.d_in, "linear")
        y = x @ self.W
        return y + self.b if self.b is not None else y


class LstmCell:
    """Gate layout along the 4*d_h axis is input, forget, candidate, output."""

    def __init__(self, store: ParameterStore, name: str, d_in: int, d_h: int):
        self.d_in, self.d_h = d_in, d_h
        self.W_x = store.uniform(f"block/{name}/W_x", (d_in, 4 * d_h), _bound(d_in))
        self.W_h = store.uniform(f"block/{name}/W_h", (d_h, 4 * d_h), _bound(d_h))
        bias = np.zeros(4 * d_h)
        bias[d_h:2 * d_h] = 1.0
        self.b = store.add(f"block/{name}/b", bias)

    def zero_state(self, dtype=np.float64):
        z = np.zeros(self.d_h, dtype=dtype)
        return Tensor(z), Tensor(z.copy())


def lstm_step(cell: LstmCell, x: Tensor, h_prev: Tensor, c_prev: Tensor):
    """One LSTM recurrence; returns ``(h, c)``."""
    _check_width(x, cell.d_in, "lstm input")
    _check_width(h_prev, cell.d_h, "lstm hidden")
    _check_width(c_prev, cell.d_h, "lstm cell")
    d = cell.d_h
    gates = x @ cell.W_x + h_prev @ cell.W_h + cell.b
    i = T.sigmoid(gates[..., 0:d])
    f = T.sigmoid(gates[..., d:2 * d])
    g = T.tanh(gates[..., 2 * d:3 * d])
    o = T.sigmoid(gates[..., 3 * d:4 * d])
    c = f * c_prev + i * g
    h = o * T.tanh(c)
    return h, c


class BiLstm:
    def __init__(self, store: ParameterStore, name: str, d_in: int, d_h: int):
        if d_h % 2:
            raise OddHiddenSize(f"Bi-LSTM output width must be even, got {d_h}")
        self.d_h = d_h
        self.fwd = LstmCell(store, f"{name}/fwd", d_in, d_h // 2)
        self.bwd = LstmCell(store, f"{name}/bwd", d_in, d_h // 2)


def bilstm_encode(bilstm: BiLstm, seq: Tensor) -> Tensor:
    """Run both directions over ``seq`` (N x d) and concatenate per step -> N x d_h."""
    n = seq.shape[0]
    if n == 0:
        raise EmptySequence("Bi-LSTM over an empty sequence")
    dt = seq.dtype
    rows = [seq[t] for t in range(n)]
    h, c = bilstm.fwd.zero_state(dt)
    fwd = []
    for t in range(n):
        h, c = lstm_step(bilstm.fwd, rows[t], h, c)
        fwd.append(h)
    h, c = bilstm.bwd.zero_state(dt)
    bwd = [None] * n
    for t in reversed(range(n)):
        h, c = lstm_step(bilstm.bwd, rows[t], h, c)
        bwd[t] = h
    return T.concat([T.stack(fwd), T.stack(bwd)], axis=1)


class AdditiveAttention:
    """softmax(w1 . tanh(V W2 + q W3)) weighted sum over the rows of V."""

    def __init__(self, store: ParameterStore, name: str, d_v: int, d_q: int, d_att: int):
        self.d_v, self.d_q, self.d_att = d_v, d_q, d_att
        self.W_2 = store.uniform(f"block/{name}/W_2", (d_v, d_att), _bound(d_v))
        self.W_3 = store.uniform(f"block/{name}/W_3", (d_q, d_att), _bound(d_q))
        self.w_1 = store.uniform(f"block/{name}/w_1", (d_att,), _bound(d_att))


def attend(att: AdditiveAttention, V: Tensor, q: Tensor):
    """Attend over the second-to-last axis of ``V`` (``... x K x d_v``).

    Returns ``(out, weights)`` with shapes ``... x d_v`` and ``... x K``.
    """
    if V.ndim < 2 or V.shape[-2] < 1:
        raise ShapeMismatch(f"attend needs at least one row, got {V.shape}")
    _check_width(V, att.d_v, "attention values")
    _check_width(q, att.d_q, "attention query")
    hidden = T.tanh(V @ att.W_2 + q @ att.W_3)
    weights = T.softmax(hidden @ att.w_1, axis=-1)
    out = T.sum(T.reshape(weights, weights.shape + (1,)) * V, axis=-2)
    return out, weights


def attend_over_space(att: AdditiveAttention, V_o: Tensor, q: Tensor):
    """Per-frame attention over regions: N x R x d -> N x d."""
    if V_o.ndim != 3:
        raise ShapeMismatch(f"AoS expects N x R x d, got {V_o.shape}")
    return attend(att, V_o, q)


def attend_over_time(att: AdditiveAttention, V_seq: Tensor, q: Tensor):
    """Attention collapsing the time axis: K x d -> d."""
    if V_seq.ndim != 2:
        raise ShapeMismatch(f"AoT expects K x d, got {V_seq.shape}")
    return attend(att, V_seq, q)


class Embedding:
    def __init__(self, store: ParameterStore, name: str, vocab_size: int, d_e: int):
        self.vocab_size, self.d_e = vocab_size, d_e
        self.table = store.uniform(f"block/{name}/table", (vocab_size, d_e), _bound(d_e))

    def __call__(self, token_id: int) -> Tensor:
        if not 0 <= int(token_id) < self.vocab_size:
            raise IndexError(f"token id {token_id} outside vocabulary of {self.vocab_size}")
        return T.take(self.table, int(token_id), axis=0)


class MlpHead:
    """Two linear layers with tanh between them; returns unnormalized logits."""

    def __init__(self, store: ParameterStore, name: str, d_in: int, d_hidden: int, vocab_size: int):
        self.d_in = d_in
        self.fc1 = Linear(store, f"{name}/fc1", d_in, d_hidden)
        self.fc2 = Linear(store, f"{name}/fc2", d_hidden, vocab_size)


def mlp_head(head: MlpHead, v: Tensor, h_en: Tensor, h_de: Tensor) -> Tensor:
    x = T.concat([v, h_en, h_de], axis=-1)
    if x.shape[-1] != head.d_in:
        raise ShapeMismatch(f"word head expects width {head.d_in}, got {x.shape[-1]}")
    return head.fc2(T.tanh(head.fc1(x)))
