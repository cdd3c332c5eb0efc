"""Greedy and beam-search caption generation with per-word module traces."""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from rmn import tensor as T
from rmn.data import BOS, EOS, MAX_CAPTION_WORDS, PAD, UNK, RawFeatures
from rmn.selector import ModuleKind

BANNED = (PAD, BOS, UNK)

ANSI = {ModuleKind.LOCATE: "\033[34m", ModuleKind.RELATE: "\033[31m", ModuleKind.FUNC: "\033[32m"}
ANSI_RESET = "\033[0m"


@dataclass
class StepTrace:
    module: ModuleKind
    scores: np.ndarray          # normalized, sums to 1
    attention: dict = field(default_factory=dict)


@dataclass
class BeamHypothesis:
    tokens: list
    log_prob: float
    state: object = field(repr=False, default=None)
    trace: list = field(default_factory=list, repr=False)
    step_log_probs: list = field(default_factory=list, repr=False)

    @property
    def finished(self) -> bool:
        return bool(self.tokens) and self.tokens[-1] == EOS

    @property
    def words(self) -> list:
        return self.tokens[:-1] if self.finished else list(self.tokens)

    @property
    def word_trace(self) -> list:
        return self.trace[:len(self.words)]


def _top_attention(module: ModuleKind, att: dict, n_frames: int) -> dict:
    if module == ModuleKind.LOCATE:
        a = att["locate"]
        frame = int(np.argmax(a["time"]))
        return {"frame": frame, "region": int(np.argmax(a["space"][frame]))}
    if module == ModuleKind.RELATE:
        a = att["relate"]
        i, j = divmod(int(np.argmax(a["time"])), n_frames)
        return {"frames": [i, j],
                "regions": [int(np.argmax(a["space"][i])), int(np.argmax(a["space"][j]))]}
    return {"history_step": int(np.argmax(att["func"]["time"]))}


class RMNDecoder:
    """Adapts a model to the ``start`` / ``step`` interface used by the decoders.

    Selection runs in eval mode (no Gumbel noise) so decoding is deterministic.
    """

    def __init__(self, model, features):
        self.model = model
        with T.no_grad():
            self.bundle = model.prepare(features) if isinstance(features, RawFeatures) else features

    def start(self):
        return self.model.initial_state()

    def step(self, state, token: int):
        with T.no_grad():
            out = self.model.decode_step(self.bundle, state, token, mode="eval")
        d = out.decision
        info = StepTrace(d.module, d.normalized_scores(),
                         _top_attention(d.module, out.attention, self.bundle.N))
        return out.log_probs.data.astype(np.float64), out.new_state, info


def _as_decoder(model, features):
    if hasattr(model, "start") and hasattr(model, "step"):
        return model
    return RMNDecoder(model, features)


def _masked(log_probs: np.ndarray, banned) -> np.ndarray:
    lp = np.array(log_probs, dtype=np.float64)
    for b in banned:
        if 0 <= b < lp.shape[0]:
            lp[b] = -np.inf
    return lp


def greedy_decode(model, features=None, max_len: int = MAX_CAPTION_WORDS, banned=BANNED):
    """Argmax decoding; returns ``(tokens, trace)`` without the end token."""
    dec = _as_decoder(model, features)
    state = dec.start()
    prev, tokens, trace = BOS, [], []
    for _ in range(max_len):
        lp, state, info = dec.step(state, prev)
        prev = int(np.argmax(_masked(lp, banned)))
        if prev == EOS:
            break
        tokens.append(prev)
        trace.append(info)
    return tokens, trace


def beam_decode(model, features=None, beam: int = 2, max_len: int = MAX_CAPTION_WORDS,
                banned=BANNED) -> list:
    """Beam search over summed log-probabilities (no length normalization).

    Finished hypotheses stay in the pool unchanged; search stops when the
    best ``beam`` entries are all finished or ``max_len`` steps have run.
    Returns the kept hypotheses, best first.
    """
    if beam < 1:
        raise ValueError("beam must be >= 1")
    dec = _as_decoder(model, features)
    alive = [BeamHypothesis([], 0.0, dec.start())]
    finished = []
    pool = alive
    for _ in range(max_len):
        expansions = []
        for h in alive:
            prev = h.tokens[-1] if h.tokens else BOS
            lp, state, info = dec.step(h.state, prev)
            lp = _masked(lp, banned)
            order = np.argsort(-lp, kind="stable")[:beam]
            for tok in order:
                if not np.isfinite(lp[tok]):
                    continue
                expansions.append(BeamHypothesis(
                    h.tokens + [int(tok)], h.log_prob + float(lp[tok]), state,
                    h.trace + [info], h.step_log_probs + [float(lp[tok])],
                ))
        pool = finished + expansions
        # stable sort keeps earlier entries first on equal scores
        pool = sorted(pool, key=lambda h: -h.log_prob)[:beam]
        finished = [h for h in pool if h.finished]
        alive = [h for h in pool if not h.finished]
        if not alive:
            break
    return pool


def render_trace(hypothesis, vocab) -> list:
    """One record per emitted word: word, module, normalized scores, top attention."""
    records = []
    for tok, st in zip(hypothesis.words, hypothesis.word_trace):
        records.append({
            "word": vocab.token(tok),
            "module": st.module.label,
            "score_locate": float(st.scores[0]),
            "score_relate": float(st.scores[1]),
            "score_func": float(st.scores[2]),
            "attention": st.attention,
        })
    return records


def trace_to_jsonl(records, video_id: str | None = None) -> str:
    lines = []
    for i, r in enumerate(records):
        row = {"video_id": video_id, "position": i, **r} if video_id is not None else {"position": i, **r}
        lines.append(json.dumps(row, sort_keys=False))
    return "\n".join(lines) + ("\n" if lines else "")


def colorize(records) -> str:
    """Words colored by module: blue Locate, red Relate, green Func."""
    return " ".join(f"{ANSI[ModuleKind.parse(r['module'])]}{r['word']}{ANSI_RESET}" for r in records)
