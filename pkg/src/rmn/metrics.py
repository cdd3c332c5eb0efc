"""Corpus BLEU-4, ROUGE-L and CIDEr over tokenized captions.

Candidates are token lists (or whitespace-separated strings); references are
one list of token lists per candidate.
"""

from __future__ import annotations

import math
from collections import Counter

from rmn.data import EmptyCorpus

ROUGE_BETA = 1.2
CIDER_SCALE = 10.0


def _toks(s):
    return s.split() if isinstance(s, str) else list(s)


def _prep(candidates, references):
    cands = [_toks(c) for c in candidates]
    refs = [[_toks(r) for r in rs] for rs in references]
    if not cands:
        raise EmptyCorpus("no candidates to score")
    if len(cands) != len(refs):
        raise ValueError(f"{len(cands)} candidates but {len(refs)} reference sets")
    if any(not rs for rs in refs):
        raise ValueError("every candidate needs at least one reference")
    return cands, refs


def ngrams(tokens, n: int) -> Counter:
    return Counter(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))


def bleu4(candidates, references, smooth: bool = True) -> float:
    """Corpus BLEU with clipped n-gram precisions (n = 1..4) and brevity penalty.

    With ``smooth``, a zero match count for n >= 2 is replaced by
    ``1 / (total + 1)`` (add-one on the zero count only); without it any zero
    precision makes the score 0.
    """
    cands, refs = _prep(candidates, references)
    matched = [0] * 4
    total = [0] * 4
    cand_len = ref_len = 0
    for c, rs in zip(cands, refs):
        cand_len += len(c)
        # closest reference length, shorter wins ties
        ref_len += min((abs(len(r) - len(c)), len(r)) for r in rs)[1]
        for n in range(1, 5):
            cn = ngrams(c, n)
            max_ref = Counter()
            for r in rs:
                max_ref |= ngrams(r, n)
            matched[n - 1] += sum(min(k, max_ref[g]) for g, k in cn.items())
            total[n - 1] += max(len(c) - n + 1, 0)
    if cand_len == 0:
        return 0.0
    log_p = 0.0
    for n in range(4):
        m, t = matched[n], total[n]
        if m == 0:
            if not smooth or n == 0:
                return 0.0
            m, t = 1, t + 1
        log_p += math.log(m / t) / 4
    bp = 1.0 if cand_len > ref_len else math.exp(1 - ref_len / cand_len)
    return bp * math.exp(log_p)


def lcs_length(a, b) -> int:
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0]
        for j, y in enumerate(b):
            cur.append(prev[j] + 1 if x == y else max(prev[j + 1], cur[j]))
        prev = cur
    return prev[-1]


def rouge_l_sentence(candidate, references, beta: float = ROUGE_BETA) -> float:
    """LCS F-measure against each reference; the best reference counts."""
    c = _toks(candidate)
    best = 0.0
    for r in references:
        r = _toks(r)
        lcs = lcs_length(c, r)
        if lcs == 0:
            continue
        p, rec = lcs / len(c), lcs / len(r)
        f = (1 + beta ** 2) * p * rec / (rec + beta ** 2 * p)
        best = max(best, f)
    return best


def rouge_l(candidates, references, beta: float = ROUGE_BETA) -> float:
    """Mean sentence-level ROUGE-L over the corpus."""
    cands, refs = _prep(candidates, references)
    return sum(rouge_l_sentence(c, rs, beta) for c, rs in zip(cands, refs)) / len(cands)


def _tfidf(tokens, n, df, log_n):
    vec = {}
    for g, tf in ngrams(tokens, n).items():
        vec[g] = tf * (log_n - math.log(max(1.0, df[g])))
    norm = math.sqrt(sum(v * v for v in vec.values()))
    return vec, norm


def _cos(a, na, b, nb) -> float:
    if na == 0 or nb == 0:
        return 0.0
    return sum(v * b.get(g, 0.0) for g, v in a.items()) / (na * nb)


def cider_scores(candidates, references, n_max: int = 4) -> list:
    """Per-candidate CIDEr; document frequencies come from the reference sets."""
    cands, refs = _prep(candidates, references)
    df = [Counter() for _ in range(n_max)]
    for rs in refs:
        for n in range(1, n_max + 1):
            seen = set()
            for r in rs:
                seen.update(ngrams(r, n))
            df[n - 1].update(seen)
    log_n = math.log(len(refs))
    out = []
    for c, rs in zip(cands, refs):
        total = 0.0
        for n in range(1, n_max + 1):
            cv, cn = _tfidf(c, n, df[n - 1], log_n)
            sims = [_cos(cv, cn, *_tfidf(r, n, df[n - 1], log_n)) for r in rs]
            total += sum(sims) / len(sims)
        out.append(CIDER_SCALE * total / n_max)
    return out


def cider(candidates, references, n_max: int = 4) -> float:
    scores = cider_scores(candidates, references, n_max)
    return sum(scores) / len(scores)


def evaluate_captions(candidates, references) -> dict:
    return {
        "bleu4": bleu4(candidates, references),
        "rouge_l": rouge_l(candidates, references),
        "cider": cider(candidates, references),
    }
