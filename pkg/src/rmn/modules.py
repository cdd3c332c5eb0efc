"""Locate, Relate and Func reasoning modules.

Each module maps the encoder hidden state and the video features to one
candidate reasoning vector; ``project_candidates`` brings the three to the
common decoder width.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from rmn import tensor as T
from rmn.nn import AdditiveAttention, Linear, attend_over_space, attend_over_time
from rmn.tensor import ParameterStore, ShapeMismatch, Tensor


class EmptyHistory(ValueError):
    pass


@dataclass
class FeatureBundle:
    """Model-ready features of one video.

    ``V_a`` and ``V_m`` are the Bi-LSTM outputs (N x d_h), ``V_o`` the raw
    region features (N x R x d_o), ``v_bar`` the global summary (d_h).
    """

    V_a: Tensor
    V_o: Tensor
    V_m: Tensor
    v_bar: Tensor

    def __post_init__(self):
        n = self.V_o.shape[0]
        if self.V_o.ndim != 3:
            raise ShapeMismatch(f"V_o must be N x R x d_o, got {self.V_o.shape}")
        if self.V_a.shape[0] != n or self.V_m.shape[0] != n:
            raise ShapeMismatch(
                f"frame counts differ: V_a {self.V_a.shape[0]}, V_o {n}, V_m {self.V_m.shape[0]}"
            )

    @property
    def N(self) -> int:
        return self.V_o.shape[0]

    @property
    def R(self) -> int:
        return self.V_o.shape[1]


class ReasoningModules:
    """Parameters of the three modules; every attention site is independent."""

    def __init__(self, store: ParameterStore, d_o: int, d_h: int, d_att: int):
        self.d_o, self.d_h = d_o, d_h
        w = d_o + d_h
        self.locate_aos = AdditiveAttention(store, "locate/aos", d_o, d_h, d_att)
        self.locate_aot = AdditiveAttention(store, "locate/aot", w, d_h, d_att)
        self.relate_aos = AdditiveAttention(store, "relate/aos", d_o, d_h, d_att)
        self.relate_aot = AdditiveAttention(store, "relate/aot", 2 * w, d_h, d_att)
        self.func_aot = AdditiveAttention(store, "func/aot", d_h, d_h, d_att)
        self.proj_l = Linear(store, "project/locate", w, d_h, bias=False)
        self.proj_r = Linear(store, "project/relate", 2 * w, d_h, bias=False)


def locate(mods: ReasoningModules, features: FeatureBundle, h_en: Tensor):
    """Attend over regions per frame, join with appearance, attend over frames.

    Returns ``(v_l, weights)`` where ``weights`` has ``space`` (N x R) and
    ``time`` (N) attention maps.
    """
    objects, w_space = attend_over_space(mods.locate_aos, features.V_o, h_en)
    per_frame = T.concat([objects, features.V_a], axis=1)
    v_l, w_time = attend_over_time(mods.locate_aot, per_frame, h_en)
    return v_l, {"space": w_space.data, "time": w_time.data}


def pairwise(A: Tensor, B: Tensor) -> Tensor:
    """Row ``i*N + j`` is ``A[i] ⊕ B[j]`` for every ordered pair, diagonal included."""
    if A.shape[0] != B.shape[0]:
        raise ShapeMismatch(f"pairwise needs equal first dims, got {A.shape} and {B.shape}")
    n = A.shape[0]
    idx = np.arange(n)
    return T.concat([T.take(A, np.repeat(idx, n)), T.take(B, np.tile(idx, n))], axis=1)


def relate(mods: ReasoningModules, features: FeatureBundle, h_en: Tensor):
    """Pairwise interaction of (object ⊕ motion) frame vectors, then attention over pairs."""
    objects, w_space = attend_over_space(mods.relate_aos, features.V_o, h_en)
    M = T.concat([objects, features.V_m], axis=1)
    v_r, w_pairs = attend_over_time(mods.relate_aot, pairwise(M, M), h_en)
    return v_r, {"space": w_space.data, "time": w_pairs.data}


def func(mods: ReasoningModules, history: list, h_en: Tensor):
    """Attend over the decoder cell-state history."""
    if not history:
        raise EmptyHistory("Func needs at least one cell state; seed the history")
    C = T.stack(history) if len(history) > 1 else T.reshape(history[0], (1, -1))
    v_f, w_time = attend_over_time(mods.func_aot, C, h_en)
    return v_f, {"time": w_time.data}


def project_candidates(mods: ReasoningModules, v_l: Tensor, v_r: Tensor, v_f: Tensor):
    """Map the three candidates to width d_h (Func output already has it)."""
    if v_f.shape[-1] != mods.d_h:
        raise ShapeMismatch(f"Func output width {v_f.shape[-1]} != d_h {mods.d_h}")
    return mods.proj_l(v_l), mods.proj_r(v_r), v_f
