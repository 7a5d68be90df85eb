import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from uasr.corpus import TextCorpus, make_inventory
from uasr.lm import BOS, NGramLM, export_arpa, load_lm, save_lm, train_ngram, train_ngram_sequences


# ---------------------------------------------------------------------------
# independent oracle: recompute absolute-discounting probabilities from raw
# counts with a direct recursion (no sharing with the implementation)


class CountOracle:
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


def random_corpus(rng, n_sentences, n_symbols, max_len=8):
    return [rng.integers(0, n_symbols, size=rng.integers(1, max_len + 1)).tolist() for _ in range(n_sentences)]


class TestTraining:
    def test_order1_hand_count(self):
        # corpus "a a b" with 2-symbol vocab: discounted mass returns as the
        # uniform base over {a, b, end}, so probabilities are exactly MLE
        for discount in (0.75, 0.3):
            lm = train_ngram_sequences([[0, 0, 1]], n_symbols=2, order=1, discount=discount)
            assert lm.prob(0, []) == pytest.approx(0.5, abs=1e-12)
            assert lm.prob(1, []) == pytest.approx(0.25, abs=1e-12)
            assert lm.prob(lm.eos, []) == pytest.approx(0.25, abs=1e-12)

    def test_repeated_sentence_ppl_to_one(self):
        # needs a sentence with no repeated context: every continuation is
        # deterministic, so PPL approaches 1 as the discount vanishes
        sent = [0, 1, 2, 0, 1]
        lm = train_ngram_sequences([sent] * 4, n_symbols=3, order=4, discount=1e-9)
        assert lm.perplexity(sent) == pytest.approx(1.0, abs=1e-6)

    def test_against_count_oracle_order4(self):
        rng = np.random.default_rng(5)
        seqs = random_corpus(rng, 200, n_symbols=6)
        lm = train_ngram_sequences(seqs, n_symbols=6, order=4, discount=0.75)
        oracle = CountOracle(seqs, 6, 4, 0.75)
        # every stored n-gram probability matches the direct recursion
        for ctx, stored in lm.table.items():
            for tok, p in stored.items():
                assert p == pytest.approx(oracle.prob(tok, ctx), abs=1e-9)
        # unseen combinations too
        for _ in range(200):
            ctx = tuple(rng.integers(0, 6, size=rng.integers(0, 4)).tolist())
            tok = int(rng.integers(0, 7))
            assert lm.prob(tok, ctx) == pytest.approx(oracle.prob(tok, ctx), abs=1e-9)

    def test_empty_corpus_rejected(self):
        with pytest.raises(ValueError):
            train_ngram_sequences([], n_symbols=3)

    def test_bad_discount_rejected(self):
        with pytest.raises(ValueError):
            train_ngram_sequences([[0]], n_symbols=2, discount=1.0)

    def test_textcorpus_entry_point(self):
        inv = make_inventory(3)
        corpus = TextCorpus(sentences=[np.array([0, 1, 2]), np.array([2, 3])], inventory=inv)
        lm = train_ngram(corpus, order=2, discount=0.5)
        assert lm.n_symbols == inv.size
        assert lm.symbols == inv.symbols


class TestScoring:
    def test_uniform_nll_and_ppl(self):
        lm = NGramLM.uniform(8)
        assert lm.score_nll([0, 1, 2]) == pytest.approx(4 * math.log(8), abs=1e-12)
        for seq in ([0], [3, 4], [1, 1, 1, 1, 1]):
            assert lm.perplexity(seq) == pytest.approx(8.0, abs=1e-9)

    def test_uniform_ppl_invariant_to_duplication(self):
        lm = NGramLM.uniform(5)
        seq = [0, 2, 3]
        assert lm.perplexity(seq) == pytest.approx(lm.perplexity(seq * 2), abs=1e-12)

    def test_trained_unigram_ppl_invariant_to_duplication(self):
        seq = [0, 2, 4]
        lm = train_ngram_sequences([seq], n_symbols=5, order=1, discount=0.4)
        assert lm.perplexity(seq) == pytest.approx(lm.perplexity(seq * 2), abs=1e-12)

    def test_empty_sequence_scores_only_end(self):
        rng = np.random.default_rng(0)
        seqs = random_corpus(rng, 30, n_symbols=4)
        lm = train_ngram_sequences(seqs, n_symbols=4, order=3, discount=0.75)
        expected = -math.log(lm.prob(lm.eos, [BOS, BOS]))
        assert lm.score_nll([]) == pytest.approx(expected, abs=1e-12)

    def test_oov_rejected(self):
        lm = train_ngram_sequences([[0, 1]], n_symbols=2, order=2, discount=0.5)
        with pytest.raises(ValueError):
            lm.score_nll([0, 5])

    def test_chain_rule_oracle(self):
        rng = np.random.default_rng(9)
        seqs = random_corpus(rng, 60, n_symbols=5)
        lm = train_ngram_sequences(seqs, n_symbols=5, order=4, discount=0.75)
        oracle = CountOracle(seqs, 5, 4, 0.75)
        for seq in random_corpus(rng, 10, n_symbols=5):
            assert lm.score_nll(seq) == pytest.approx(oracle.nll(seq), abs=1e-9)

    def test_hand_counted_bigram_ppl(self):
        # corpus: one sentence [0 1]; score [0 1] under order-2, discount D
        d = 0.5
        lm = train_ngram_sequences([[0, 1]], n_symbols=2, order=2, discount=d)
        base = 1.0 / 3.0
        # unigrams: events 0,1,eos once each -> p1(t) = (1-d)/3 + d*base
        p1 = (1 - d) / 3 + d * base
        # each bigram context seen once with one continuation
        p_ctx = (1 - d) + d * p1
        expected_nll = -3 * math.log(p_ctx)
        assert lm.score_nll([0, 1]) == pytest.approx(expected_nll, abs=1e-12)
        assert lm.perplexity([0, 1]) == pytest.approx(math.exp(expected_nll / 3), abs=1e-12)


class TestInvariants:
    def test_normalization_random_contexts(self):
        rng = np.random.default_rng(3)
        seqs = random_corpus(rng, 100, n_symbols=5)
        lm = train_ngram_sequences(seqs, n_symbols=5, order=4, discount=0.75)
        for _ in range(100):
            ctx = rng.integers(0, 5, size=rng.integers(0, 4)).tolist()
            assert lm.context_mass(ctx) == pytest.approx(1.0, abs=1e-9)

    def test_normalization_bos_contexts(self):
        rng = np.random.default_rng(4)
        seqs = random_corpus(rng, 50, n_symbols=4)
        lm = train_ngram_sequences(seqs, n_symbols=4, order=3, discount=0.75)
        assert lm.context_mass([BOS, BOS]) == pytest.approx(1.0, abs=1e-9)

    def test_seen_ngrams_beat_pure_backoff(self):
        rng = np.random.default_rng(6)
        seqs = random_corpus(rng, 80, n_symbols=5)
        lm = train_ngram_sequences(seqs, n_symbols=5, order=4, discount=0.75)
        for ctx, stored in lm.table.items():
            if not ctx:
                continue
            bw = lm.backoff[ctx]
            for tok, p in stored.items():
                assert p > bw * lm._prob(tok, ctx[1:])

    def test_probabilities_in_unit_interval(self):
        rng = np.random.default_rng(8)
        seqs = random_corpus(rng, 40, n_symbols=4)
        lm = train_ngram_sequences(seqs, n_symbols=4, order=4, discount=0.75)
        for stored in lm.table.values():
            for p in stored.values():
                assert 0 < p <= 1

    @settings(max_examples=40, deadline=None)
    @given(data=st.data())
    def test_ppl_is_exp_mean_nll(self, data):
        rng = np.random.default_rng(data.draw(st.integers(0, 10_000)))
        seqs = random_corpus(rng, 20, n_symbols=4)
        lm = train_ngram_sequences(seqs, n_symbols=4, order=3, discount=0.6)
        seq = data.draw(st.lists(st.integers(0, 3), max_size=10))
        assert lm.perplexity(seq) == math.exp(lm.score_nll(seq) / (len(seq) + 1))


class TestSerialization:
    def test_binary_roundtrip(self, tmp_path):
        rng = np.random.default_rng(2)
        seqs = random_corpus(rng, 50, n_symbols=4)
        lm = train_ngram_sequences(seqs, n_symbols=4, order=4, discount=0.75,
                                   symbols=("<sil>", "a", "b", "c"))
        path = tmp_path / "lm.bin"
        save_lm(lm, path)
        back = load_lm(path)
        assert back.order == lm.order
        assert back.n_symbols == lm.n_symbols
        assert back.symbols == lm.symbols
        assert back.table == lm.table
        assert back.backoff == lm.backoff

    def test_arpa_export(self, tmp_path):
        lm = train_ngram_sequences([[0, 1, 0], [1, 0]], n_symbols=2, order=2, discount=0.5,
                                   symbols=("x", "y"))
        path = tmp_path / "lm.arpa"
        export_arpa(lm, path)
        text = path.read_text()
        assert text.startswith("\\data\\")
        assert "\\1-grams:" in text and "\\2-grams:" in text and "\\end\\" in text
        # log10 probabilities in the unigram section are consistent
        for line in text.splitlines():
            if line.startswith("-") and "\tx" in line:
                logp = float(line.split("\t")[0])
                assert 10 ** logp == pytest.approx(lm.prob(0, []), rel=1e-6)
                break
        else:
            pytest.fail("no unigram line for symbol x")
