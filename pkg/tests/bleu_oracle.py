"""Brute-force sentence BLEU, written without Counter arithmetic.

Every n-gram is compared position by position against every window of every
reference, which is slow but leaves little room for bookkeeping mistakes.
"""

import math


def _windows(words, n):
    return [words[i:i + n] for i in range(len(words) - n + 1)]


def _occurrences(gram, words):
    return sum(1 for w in _windows(words, len(gram)) if w == gram)


def oracle_bleu(candidate, references, max_n=4):
    cand = candidate.split()
    refs = [r.split() for r in references]
    if not cand:
        return 0.0
    log_sum = 0.0
    for n in range(1, max_n + 1):
        grams = _windows(cand, n)
        seen = []
        clipped = 0
        for g in grams:
            if g in seen:
                continue
            seen.append(g)
            mine = _occurrences(g, cand)
            theirs = max(_occurrences(g, r) for r in refs)
            clipped += min(mine, theirs)
        if n == 1 and clipped == 0:
            return 0.0
        if clipped:
            p = clipped / len(grams)
        else:
            p = 1.0 / (2 * max(1, len(grams)))
        log_sum += math.log(p)
    c = len(cand)
    # closest reference length, shorter one on ties
    r = sorted((abs(len(x) - c), len(x)) for x in refs)[0][1]
    bp = 1.0 if c >= r else math.exp(1 - r / c)
    return bp * math.exp(log_sum / max_n)


def random_case(rng, vocab=("a", "b", "c", "d", "e", "f")):
    def sentence(lo, hi):
        return " ".join(rng.choice(vocab, size=int(rng.integers(lo, hi + 1))))

    cand = sentence(1, 12)
    refs = [sentence(1, 14) for _ in range(int(rng.integers(1, 4)))]
    return cand, refs
