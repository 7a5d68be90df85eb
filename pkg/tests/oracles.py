"""Independent reference implementations used only to check the real code.

These deliberately avoid sharing any logic with src/uasr: counts are gathered
by brute-force scans, edit distance is the plain recursion, and matching is
augmenting-path maximum bipartite matching.
"""

import math
from functools import lru_cache

from uasr.lm import BOS


class CountOracle:
    """Absolute-discounting probabilities straight from raw n-gram counts."""

    def __init__(self, sequences, n_symbols, order, discount):
        self.order = order
        self.discount = discount
        self.n_symbols = n_symbols
        self.eos = n_symbols
        self.padded = [[BOS] * (order - 1) + list(map(int, s)) + [self.eos] for s in sequences]

    def _events(self, ctx):
        k = len(ctx)
        for padded in self.padded:
            for i in range(self.order - 1, len(padded)):
                if tuple(padded[i - k:i]) == ctx:
                    yield padded[i]

    def prob(self, token, ctx):
        ctx = tuple(ctx)
        events = list(self._events(ctx))
        lower = 1.0 / (self.n_symbols + 1) if not ctx else self.prob(token, ctx[1:])
        if not events:
            return lower
        total = len(events)
        c = sum(1 for e in events if e == token)
        distinct = len(set(events))
        return max(c - self.discount, 0.0) / total + self.discount * distinct / total * lower

    def nll(self, seq):
        padded = [BOS] * (self.order - 1) + list(map(int, seq)) + [self.eos]
        total = 0.0
        for i in range(self.order - 1, len(padded)):
            total -= math.log(self.prob(padded[i], tuple(padded[max(0, i - self.order + 1):i])))
        return total


def lev_oracle(a, b):
    """Plain recursive memoized edit distance."""
    a, b = tuple(a), tuple(b)

    @lru_cache(maxsize=None)
    def go(i, j):
        if i == 0:
            return j
        if j == 0:
            return i
        return min(
            go(i - 1, j) + 1,
            go(i, j - 1) + 1,
            go(i - 1, j - 1) + (a[i - 1] != b[j - 1]),
        )

    return go(len(a), len(b))


def max_matching_oracle(ref_pos, hyp_pos, tol):
    """Maximum bipartite matching size via augmenting paths."""
    edges = [[j for j, h in enumerate(hyp_pos) if abs(int(r) - int(h)) <= tol] for r in ref_pos]
    match_hyp = [-1] * len(hyp_pos)

    def try_augment(i, seen):
        for j in edges[i]:
            if j in seen:
                continue
            seen.add(j)
            if match_hyp[j] == -1 or try_augment(match_hyp[j], seen):
                match_hyp[j] = i
                return True
        return False

    size = 0
    for i in range(len(ref_pos)):
        if try_augment(i, set()):
            size += 1
    return size


def matching_brute_force(ref_pos, hyp_pos, tol):
    """Exhaustive maximum matching by recursion over the ref side."""
    hyp_pos = list(hyp_pos)

    def go(i, used):
        if i == len(ref_pos):
            return 0
        best = go(i + 1, used)
        for j, h in enumerate(hyp_pos):
            if j not in used and abs(int(ref_pos[i]) - int(h)) <= tol:
                best = max(best, 1 + go(i + 1, used | {j}))
        return best

    return go(0, frozenset())
