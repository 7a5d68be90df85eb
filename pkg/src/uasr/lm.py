"""Backoff n-gram language model over phoneme token ids.

Smoothing is absolute discounting with interpolation: a single discount is
subtracted from every seen count and the freed mass is routed through the
next-lower order, bottoming out at a uniform distribution over all outcomes
(every symbol plus the end token). Sentences are padded with order-1 begin
tokens and one end token; the end token is scored, begin tokens only condition.
"""

from __future__ import annotations

import math
from collections import defaultdict
from dataclasses import dataclass, field

from . import binio
from .corpus import TextCorpus

LM_MAGIC = b"RBLM"
LM_VERSION = 1

BOS = -1  # context padding only, never predicted


@dataclass
class NGramLM:
    order: int
    n_symbols: int  # real tokens are 0..n_symbols-1; the end token is n_symbols
    # context tuple -> {token id: probability}; probabilities already include
    # the interpolated lower-order mass
    table: dict[tuple[int, ...], dict[int, float]] = field(default_factory=dict)
    # context tuple -> discounted mass routed to the next-lower order
    backoff: dict[tuple[int, ...], float] = field(default_factory=dict)
    symbols: tuple[str, ...] | None = None
    discount: float = 0.0

    @property
    def eos(self) -> int:
        return self.n_symbols

    @property
    def base_prob(self) -> float:
        """Uniform floor over every outcome (all symbols + end token)."""
        return 1.0 / (self.n_symbols + 1)

    def prob(self, token: int, context) -> float:
        if not 0 <= token <= self.n_symbols:
            raise ValueError(f"token {token} outside closed vocabulary of size {self.n_symbols}")
        ctx = tuple(int(t) for t in context)[-(self.order - 1):] if self.order > 1 else ()
        return self._prob(int(token), ctx)

    def _prob(self, token: int, ctx: tuple[int, ...]) -> float:
        stored = self.table.get(ctx)
        if stored is not None and token in stored:
            return stored[token]
        if not ctx:
            return self.backoff.get((), 1.0) * self.base_prob
        return self.backoff.get(ctx, 1.0) * self._prob(token, ctx[1:])

    def score_nll(self, seq) -> float:
        """Natural-log NLL of seq plus its end token, begin-padded."""
        seq = [int(t) for t in seq]
        for t in seq:
            if not 0 <= t < self.n_symbols:
                raise ValueError(f"token {t} outside closed vocabulary of size {self.n_symbols}")
        padded = [BOS] * (self.order - 1) + seq + [self.eos]
        nll = 0.0
        for i in range(self.order - 1, len(padded)):
            ctx = tuple(padded[max(0, i - self.order + 1):i])
            nll -= math.log(self._prob(padded[i], ctx))
        return nll

    def perplexity(self, seq) -> float:
        length = len(seq) + 1  # end token included
        return math.exp(self.score_nll(seq) / length)

    def context_mass(self, context) -> float:
        """Total probability over every outcome given a context (tests: == 1)."""
        ctx = tuple(int(t) for t in context)[-(self.order - 1):] if self.order > 1 else ()
        return sum(self._prob(t, ctx) for t in range(self.n_symbols + 1))

    @classmethod
    def uniform(cls, n_outcomes: int) -> "NGramLM":
        """Reference model scoring every outcome at 1/n_outcomes; the end
        token is one of the outcomes, so real tokens are 0..n_outcomes-2.

        Deliberately side-steps training: perplexity is n_outcomes for any
        sequence, which several tests rely on.
        """
        p = 1.0 / n_outcomes
        table = {(): {t: p for t in range(n_outcomes)}}
        return cls(order=1, n_symbols=n_outcomes - 1, table=table, backoff={(): 0.0})


def train_ngram_sequences(
    sequences,
    n_symbols: int,
    order: int = 4,
    discount: float = 0.75,
    symbols: tuple[str, ...] | None = None,
) -> NGramLM:
    if order < 1:
        raise ValueError("order must be >= 1")
    if not 0 < discount < 1:
        raise ValueError("discount must be in (0, 1)")
    sequences = list(sequences)
    if not sequences:
        raise ValueError("cannot train on an empty corpus")

    eos = n_symbols
    counts: list[dict[tuple[int, ...], dict[int, int]]] = [defaultdict(lambda: defaultdict(int)) for _ in range(order)]
    for seq in sequences:
        seq = [int(t) for t in seq]
        for t in seq:
            if not 0 <= t < n_symbols:
                raise ValueError(f"token {t} outside closed vocabulary of size {n_symbols}")
        padded = [BOS] * (order - 1) + seq + [eos]
        for i in range(order - 1, len(padded)):
            for k in range(order):
                counts[k][tuple(padded[i - k:i])][padded[i]] += 1

    lm = NGramLM(order=order, n_symbols=n_symbols, symbols=symbols, discount=discount)
    for k in range(order):
        for ctx, ctx_counts in counts[k].items():
            total = sum(ctx_counts.values())
            distinct = len(ctx_counts)
            bw = discount * distinct / total
            lm.backoff[ctx] = bw
            stored: dict[int, float] = {}
            for tok, c in ctx_counts.items():
                lower = lm.base_prob if k == 0 else lm._prob(tok, ctx[1:])
                stored[tok] = (c - discount) / total + bw * lower
            lm.table[ctx] = stored
    return lm


def train_ngram(corpus: TextCorpus, order: int = 4, discount: float = 0.75) -> NGramLM:
    inv = corpus.inventory
    return train_ngram_sequences(
        corpus.sentences, n_symbols=inv.size, order=order, discount=discount, symbols=inv.symbols
    )


def save_lm(lm: NGramLM, path) -> None:
    with open(path, "wb") as fh:
        binio.write_header(fh, LM_MAGIC, LM_VERSION)
        binio.pack_u32(fh, lm.order, lm.n_symbols)
        binio.pack_f64(fh, lm.discount)
        syms = lm.symbols or ()
        binio.pack_u32(fh, len(syms))
        for s in syms:
            binio.pack_str(fh, s)
        binio.pack_u32(fh, len(lm.table))
        for ctx, stored in lm.table.items():
            binio.pack_u32(fh, len(ctx))
            if ctx:
                binio.pack_i64(fh, *ctx)
            binio.pack_f64(fh, lm.backoff.get(ctx, 1.0))
            binio.pack_u32(fh, len(stored))
            for tok, p in stored.items():
                binio.pack_i64(fh, tok)
                binio.pack_f64(fh, p)


def load_lm(path) -> NGramLM:
    with open(path, "rb") as fh:
        binio.read_header(fh, LM_MAGIC, LM_VERSION)
        order, n_symbols = binio.unpack_u32(fh, 2)
        (discount,) = binio.unpack_f64(fh, 1)
        (n_syms,) = binio.unpack_u32(fh, 1)
        symbols = tuple(binio.unpack_str(fh) for _ in range(n_syms)) or None
        lm = NGramLM(order=order, n_symbols=n_symbols, symbols=symbols, discount=discount)
        (n_ctx,) = binio.unpack_u32(fh, 1)
        for _ in range(n_ctx):
            (k,) = binio.unpack_u32(fh, 1)
            ctx = binio.unpack_i64(fh, k) if k else ()
            (bw,) = binio.unpack_f64(fh, 1)
            lm.backoff[ctx] = bw
            (n_tok,) = binio.unpack_u32(fh, 1)
            stored = {}
            for _ in range(n_tok):
                (tok,) = binio.unpack_i64(fh, 1)
                (p,) = binio.unpack_f64(fh, 1)
                stored[tok] = p
            lm.table[ctx] = stored
    return lm


def export_arpa(lm: NGramLM, path) -> None:
    """ARPA-style text export for eyeballing; log10 probabilities and backoffs."""

    def name(tok: int) -> str:
        if tok == BOS:
            return "<s>"
        if tok == lm.eos:
            return "</s>"
        return lm.symbols[tok] if lm.symbols else f"t{tok}"

    grams: list[list[tuple[tuple[int, ...], int, float]]] = [[] for _ in range(lm.order)]
    for ctx, stored in lm.table.items():
        for tok, p in stored.items():
            grams[len(ctx)].append((ctx, tok, p))
    with open(path, "w") as fh:
        fh.write("\\data\\\n")
        for n in range(lm.order):
            fh.write(f"ngram {n + 1}={len(grams[n])}\n")
        for n in range(lm.order):
            fh.write(f"\n\\{n + 1}-grams:\n")
            for ctx, tok, p in sorted(grams[n]):
                words = " ".join(name(t) for t in ctx + (tok,))
                line = f"{math.log10(p):.6f}\t{words}"
                full = ctx + (tok,)
                if n + 1 < lm.order and full in lm.backoff:
                    line += f"\t{math.log10(lm.backoff[full]):.6f}"
                fh.write(line + "\n")
        fh.write("\n\\end\\\n")
