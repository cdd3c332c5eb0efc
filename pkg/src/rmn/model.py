"""The full captioning model: encoder LSTM, reasoning modules, module
selector, decoder LSTM and word head, plus the caption/linguistic losses."""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field

import numpy as np

from rmn import tensor as T
from rmn.data import BOS, EOS, MAX_CAPTION_WORDS, PAD, CaptionSample, CaptionTooLong, RawFeatures
from rmn.modules import FeatureBundle, ReasoningModules, func, locate, project_candidates, relate
from rmn.nn import BiLstm, Embedding, Linear, LstmCell, MlpHead, bilstm_encode, lstm_step, mlp_head
from rmn.selector import ModuleDecision, Scorer, combine, combine_soft, score, select
from rmn.tensor import ParameterStore, Tensor


class LengthMismatch(ValueError):
    pass


class IdOutOfRange(IndexError):
    pass


class NegativeLambda(ValueError):
    pass


NO_LABEL = -1


@dataclass
class ModelConfig:
    vocab_size: int
    d_a: int
    d_o: int
    d_m: int
    d_h: int = 512
    d_e: int | None = None
    d_att: int | None = None
    d_score: int | None = None
    tau: float = 1.0
    selection: str = "hard"               # hard | soft
    estimator: str = "straight_through"   # straight_through | exact
    dtype: str = "float64"

    def __post_init__(self):
        self.d_e = self.d_e or self.d_h
        self.d_att = self.d_att or self.d_h
        self.d_score = self.d_score or self.d_h
        if self.selection not in ("hard", "soft"):
            raise ValueError(f"selection must be hard or soft, got {self.selection!r}")
        if self.tau <= 0:
            raise ValueError("tau must be positive")

    def architecture_hash(self) -> str:
        """Hash of everything that fixes parameter names and shapes."""
        keys = ("vocab_size", "d_a", "d_o", "d_m", "d_h", "d_e", "d_att", "d_score")
        blob = json.dumps({k: getattr(self, k) for k in keys}, sort_keys=True)
        return hashlib.sha256(blob.encode()).hexdigest()[:16]

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class DecoderState:
    h_en: Tensor
    c_en: Tensor
    h_de: Tensor
    c_de: Tensor
    history: list
    t: int = 1


@dataclass
class StepOutput:
    log_probs: Tensor
    decision: ModuleDecision
    new_state: DecoderState
    attention: dict
    v_t: Tensor
    candidates: tuple


@dataclass
class LossBundle:
    caption_loss: Tensor
    linguistic_loss: Tensor
    total: Tensor
    lam: float
    steps: list = field(default_factory=list, repr=False)


class RMN:
    def __init__(self, cfg: ModelConfig, seed: int = 0):
        self.cfg = cfg
        self.dtype = np.dtype(cfg.dtype)
        store = self.store = ParameterStore(seed, self.dtype)
        d_h = cfg.d_h
        self.bilstm_a = BiLstm(store, "encoder/bilstm_a", cfg.d_a, d_h)
        self.bilstm_m = BiLstm(store, "encoder/bilstm_m", cfg.d_m, d_h)
        self.global_proj = Linear(store, "encoder/global", 2 * d_h, d_h)
        self.embed = Embedding(store, "encoder/embed", cfg.vocab_size, cfg.d_e)
        self.en_lstm = LstmCell(store, "encoder/en_lstm", d_h + cfg.d_e + d_h, d_h)
        self.modules = ReasoningModules(store, cfg.d_o, d_h, cfg.d_att)
        self.scorers = tuple(
            Scorer(store, f"selector/{name}", d_h, d_h, cfg.d_score)
            for name in ("locate", "relate", "func")
        )
        self.de_lstm = LstmCell(store, "decoder/de_lstm", 2 * d_h, d_h)
        self.head = MlpHead(store, "decoder/head", 3 * d_h, d_h, cfg.vocab_size)

    # -- encoding ----------------------------------------------------------
    def prepare(self, raw: RawFeatures) -> FeatureBundle:
        """Bi-LSTM over appearance and motion, and the pooled global feature."""
        if raw.vo.shape[2] != self.cfg.d_o or raw.va.shape[1] != self.cfg.d_a or raw.vm.shape[1] != self.cfg.d_m:
            raise T.ShapeMismatch(
                f"feature widths {raw.va.shape[1]}/{raw.vo.shape[2]}/{raw.vm.shape[1]} "
                f"do not match model {self.cfg.d_a}/{self.cfg.d_o}/{self.cfg.d_m}"
            )
        dt = self.dtype
        V_a = bilstm_encode(self.bilstm_a, Tensor(raw.va.astype(dt)))
        V_m = bilstm_encode(self.bilstm_m, Tensor(raw.vm.astype(dt)))
        pooled = T.mean(T.concat([V_a, V_m], axis=1), axis=0)
        v_bar = self.global_proj(pooled)
        return FeatureBundle(V_a, Tensor(raw.vo.astype(dt)), V_m, v_bar)

    def initial_state(self) -> DecoderState:
        z = np.zeros(self.cfg.d_h, dtype=self.dtype)
        return DecoderState(Tensor(z), Tensor(z), Tensor(z), Tensor(z), [Tensor(z)], 1)

    def encode_step(self, v_bar: Tensor, e_prev: Tensor, state: DecoderState):
        x = T.concat([v_bar, e_prev, state.h_de], axis=0)
        return lstm_step(self.en_lstm, x, state.h_en, state.c_en)

    # -- one timestep ------------------------------------------------------
    def decode_step(self, features: FeatureBundle, state: DecoderState, prev_token: int,
                    mode: str = "train", rng=None, noise=None) -> StepOutput:
        cfg = self.cfg
        h_en, c_en = self.encode_step(features.v_bar, self.embed(prev_token), state)
        v_l, att_l = locate(self.modules, features, h_en)
        v_r, att_r = relate(self.modules, features, h_en)
        v_f, att_f = func(self.modules, state.history, h_en)
        cands = project_candidates(self.modules, v_l, v_r, v_f)
        raw_scores = T.stack([score(s, h_en, v) for s, v in zip(self.scorers, cands)])
        decision = select(T.softplus(raw_scores), cfg.tau, rng, mode, noise)
        if cfg.selection == "soft":
            v_t = combine_soft(decision, cands)
        else:
            v_t = combine(decision, cands, cfg.estimator)
        h_de, c_de = lstm_step(self.de_lstm, T.concat([v_t, h_en], axis=0), state.h_de, state.c_de)
        log_probs = T.log_softmax(mlp_head(self.head, v_t, h_en, h_de), axis=0)
        new_state = DecoderState(h_en, c_en, h_de, c_de, state.history + [c_de], state.t + 1)
        attention = {"locate": att_l, "relate": att_r, "func": att_f}
        return StepOutput(log_probs, decision, new_state, attention, v_t, cands)


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------

def caption_loss(log_probs_seq, gold) -> Tensor:
    """Sum over non-pad positions of -log p_t(gold_t)."""
    if len(log_probs_seq) != len(gold):
        raise LengthMismatch(f"{len(log_probs_seq)} steps but {len(gold)} gold tokens")
    if not log_probs_seq:
        return Tensor(0.0)
    lp = T.stack(log_probs_seq)
    vocab = lp.shape[1]
    mask = np.zeros(lp.shape, dtype=lp.dtype)
    for t, w in enumerate(gold):
        w = int(w)
        if not 0 <= w < vocab:
            raise IdOutOfRange(f"gold id {w} outside vocabulary of {vocab}")
        if w != PAD:
            mask[t, w] = 1.0
    return -T.sum(lp * Tensor(mask))


def linguistic_loss(decisions, gold_modules) -> Tensor:
    """Sum over labelled steps of -log z_backward[gold] (cross-entropy to the one-hot label).

    Steps whose label is ``NO_LABEL`` (end token, padding) contribute nothing.
    """
    if len(decisions) != len(gold_modules):
        raise LengthMismatch(f"{len(decisions)} decisions but {len(gold_modules)} labels")
    terms = [d.log_z_backward[int(k)] for d, k in zip(decisions, gold_modules) if int(k) != NO_LABEL]
    if not terms:
        return Tensor(0.0)
    return -T.sum(T.stack(terms))


def total_loss(cap: Tensor, pos: Tensor, lam: float) -> LossBundle:
    if lam < 0:
        raise NegativeLambda(f"lambda must be >= 0, got {lam}")
    cap = T.as_tensor(cap)
    pos = T.as_tensor(pos)
    total = cap + pos * float(lam)
    return LossBundle(cap, pos, total, float(lam))


def step_targets(sample: CaptionSample):
    """(inputs, targets, labels) for teacher forcing; the end token has no module label."""
    tokens = list(sample.tokens)
    labels = [int(m) for m in sample.module_labels] + [NO_LABEL]
    return tokens[:-1], tokens[1:], labels


def unroll_teacher_forced(model: RMN, features, sample: CaptionSample, lam: float, rng=None,
                          mode: str = "train", noise=None) -> LossBundle:
    """Run the decoder over the gold caption and return the joint loss.

    ``features`` may be raw (prepared here, so the Bi-LSTMs get gradients) or
    an already prepared bundle. ``noise`` optionally fixes the Gumbel draw per step.
    """
    if sample.length > MAX_CAPTION_WORDS:
        raise CaptionTooLong(f"caption of {sample.length} words exceeds {MAX_CAPTION_WORDS}")
    bundle = model.prepare(features) if isinstance(features, RawFeatures) else features
    inputs, targets, labels = step_targets(sample)
    state = model.initial_state()
    steps = []
    for t, prev in enumerate(inputs):
        out = model.decode_step(bundle, state, prev, mode, rng, None if noise is None else noise[t])
        steps.append(out)
        state = out.new_state
    cap = caption_loss([s.log_probs for s in steps], targets)
    pos = linguistic_loss([s.decision for s in steps], labels)
    bundle_out = total_loss(cap, pos, lam)
    bundle_out.steps = steps
    return bundle_out


__all__ = [
    "BOS", "EOS", "NO_LABEL", "DecoderState", "LossBundle", "ModelConfig", "RMN", "StepOutput",
    "caption_loss", "linguistic_loss", "step_targets", "total_loss", "unroll_teacher_forced",
]
