"""Discrete module selection with Gumbel noise and a straight-through backward."""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

from rmn import tensor as T
from rmn.nn import Linear
from rmn.tensor import ParameterStore, ShapeMismatch, Tensor

GUMBEL_EPS = 1e-20


class NonPositiveScore(ValueError):
    pass


class NonPositiveTemperature(ValueError):
    pass


class ModuleKind(enum.IntEnum):
    LOCATE = 0
    RELATE = 1
    FUNC = 2

    @property
    def label(self) -> str:
        return self.name.capitalize()

    @classmethod
    def parse(cls, text: str) -> "ModuleKind":
        return cls[text.strip().upper()]


@dataclass
class ModuleDecision:
    scores: Tensor          # softplus-transformed, strictly positive
    gumbel_noise: np.ndarray
    z_forward: np.ndarray   # one-hot
    z_backward: Tensor      # tempered softmax of the noisy log-scores
    log_z_backward: Tensor
    temperature: float

    @property
    def index(self) -> int:
        return int(np.argmax(self.z_forward))

    @property
    def module(self) -> ModuleKind:
        return ModuleKind(self.index)

    def normalized_scores(self) -> np.ndarray:
        s = self.scores.data.astype(np.float64)
        return s / s.sum()


class Scorer:
    """fc(tanh(fc(h) + fc(v))) -> one raw scalar."""

    def __init__(self, store: ParameterStore, name: str, d_h: int, d_v: int, d_s: int):
        self.d_h, self.d_v = d_h, d_v
        self.fc_h = Linear(store, f"{name}/fc_h", d_h, d_s)
        self.fc_v = Linear(store, f"{name}/fc_v", d_v, d_s, bias=False)
        self.fc_out = Linear(store, f"{name}/fc_out", d_s, 1)


def score(scorer: Scorer, h_en: Tensor, v: Tensor) -> Tensor:
    if h_en.shape[-1] != scorer.d_h or v.shape[-1] != scorer.d_v:
        raise ShapeMismatch(f"scorer widths {scorer.d_h}/{scorer.d_v}, got {h_en.shape}/{v.shape}")
    out = scorer.fc_out(T.tanh(scorer.fc_h(h_en) + scorer.fc_v(v)))
    return T.reshape(out, ())


def gumbel_sample(rng: np.random.Generator, n: int) -> np.ndarray:
    """i.i.d. Gumbel(0, 1) via -log(-log U) with U clamped away from 0 and 1."""
    u = rng.random(n)
    u = np.clip(u, GUMBEL_EPS, np.nextafter(1.0, 0.0))
    return -np.log(-np.log(u))


def select(scores: Tensor, tau: float, rng=None, mode: str = "train", noise=None) -> ModuleDecision:
    """Choose one module from positive scores.

    In train mode Gumbel noise is drawn from ``rng`` (or taken from ``noise``);
    in eval mode the noise is zero so the choice is the plain argmax. Ties go
    to the lowest index.
    """
    if tau <= 0:
        raise NonPositiveTemperature(f"temperature must be > 0, got {tau}")
    if np.any(scores.data <= 0):
        raise NonPositiveScore(f"scores must be positive, got {scores.data}")
    n = scores.shape[0]
    if noise is not None:
        g = np.asarray(noise, dtype=np.float64)
    elif mode == "train":
        g = gumbel_sample(rng, n)
    elif mode == "eval":
        g = np.zeros(n)
    else:
        raise ValueError(f"unknown selector mode {mode!r}")
    g = g.astype(scores.dtype)
    logits = T.log(scores) + Tensor(g)
    z_fwd = np.zeros(n, dtype=scores.dtype)
    z_fwd[int(np.argmax(logits.data))] = 1.0
    tempered = logits * (1.0 / tau)
    return ModuleDecision(
        scores=scores,
        gumbel_noise=g,
        z_forward=z_fwd,
        z_backward=T.softmax(tempered, axis=0),
        log_z_backward=T.log_softmax(tempered, axis=0),
        temperature=float(tau),
    )


def combine(decision: ModuleDecision, candidates, estimator: str = "straight_through") -> Tensor:
    """Pick the selected candidate.

    The forward value is a copy of the chosen candidate. ``straight_through``
    back-propagates as if the output were ``sum_k z_backward[k] * v_k``;
    ``exact`` is the true derivative of the hard choice (used by the
    finite-difference checks, where the decision is locally constant).
    """
    v_l, v_r, v_f = candidates
    if not (v_l.shape == v_r.shape == v_f.shape):
        raise ShapeMismatch(f"candidate shapes differ: {v_l.shape}, {v_r.shape}, {v_f.shape}")
    k = decision.index
    vals = (v_l.data, v_r.data, v_f.data)
    out = vals[k].copy()
    if estimator == "exact":
        def backward(g):
            return tuple(g if i == k else None for i in range(3)) + (None,)
    elif estimator == "straight_through":
        zb = decision.z_backward.data

        def backward(g):
            grads_v = tuple(zb[i] * g for i in range(3))
            grad_z = np.array([np.sum(g * v) for v in vals], dtype=g.dtype)
            return grads_v + (grad_z,)
    else:
        raise ValueError(f"unknown estimator {estimator!r}")
    return T.custom_op(out, (v_l, v_r, v_f, decision.z_backward), backward, "combine")


def combine_soft(decision: ModuleDecision, candidates) -> Tensor:
    """Soft fusion: every candidate weighted by the relaxed decision vector."""
    return decision.z_backward @ T.stack(list(candidates))
