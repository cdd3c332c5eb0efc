"""Independent reference computations shared by several test files."""

import math
from collections import Counter

import numpy as np


def attend_oracle(V, q, W2, W3, w1):
    """Direct evaluation of softmax(w1 . tanh(V W2 + q W3)) V."""
    s = np.tanh(V @ W2 + q @ W3) @ w1
    a = np.exp(s - s.max())
    a /= a.sum()
    return a @ V, a


def cider_oracle(cands, refs):
    """Spreadsheet-style: explicit df table, tf-idf vectors and cosines per n."""
    N = len(refs)
    total = []
    for c, rs in zip(cands, refs):
        c = c.split()
        per_n = []
        for n in range(1, 5):
            grams = lambda toks: Counter(tuple(toks[i:i + n]) for i in range(len(toks) - n + 1))  # noqa: E731
            df = Counter()
            for ref_set in refs:
                seen = set()
                for r in ref_set:
                    seen |= set(grams(r.split()))
                df.update(seen)
            vec = lambda g: {k: v * (math.log(N) - math.log(max(1, df[k]))) for k, v in g.items()}  # noqa: E731
            cv = vec(grams(c))
            sims = []
            for r in rs:
                rv = vec(grams(r.split()))
                dot = sum(cv[k] * rv.get(k, 0.0) for k in cv)
                nc = math.sqrt(sum(x * x for x in cv.values()))
                nr = math.sqrt(sum(x * x for x in rv.values()))
                sims.append(dot / (nc * nr) if nc and nr else 0.0)
            per_n.append(sum(sims) / len(sims))
        total.append(10 * sum(per_n) / 4)
    return total
