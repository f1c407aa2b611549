import itertools

import numpy as np
import pytest

from qrewrite.metrics import (
    EvalPair,
    _lcs_length,
    bleu4,
    corpus_eval,
    eval_tokenize,
    exact_match,
    meteor_lite,
    rouge_l,
)


def pair(pred, *refs):
    return EvalPair.from_strings(pred, refs)


class TestTokenize:
    def test_lowercase_and_punct_detach(self):
        assert eval_tokenize("Who directed Interstellar?") == [
            "who", "directed", "interstellar", "?",
        ]

    def test_idempotent(self):
        once = eval_tokenize("A b, C.")
        assert eval_tokenize(" ".join(once)) == once


class TestBleu4:
    def test_identical(self):
        assert bleu4(pair("a b c d e", "a b c d e")) == pytest.approx(1.0)

    def test_zero_four_gram_overlap(self):
        assert bleu4(pair("a b c d", "a x b y c z d")) == 0.0

    def test_hand_value(self):
        # p1=4/5 p2=3/4 p3=2/3 p4=1/2, BP=1
        got = bleu4(pair("a b c d e", "a b c d f"))
        assert got == pytest.approx(0.66874, abs=1e-5)

    def test_empty_prediction(self):
        assert bleu4(EvalPair([], [["a", "b"]])) == 0.0

    def test_brevity_penalty(self):
        # shorter prediction with perfect precisions is penalized
        full = bleu4(pair("a b c d e f", "a b c d e f"))
        short = bleu4(pair("a b c d e", "a b c d e f"))
        assert short < full

    def test_appending_junk_never_raises_score(self):
        rng = np.random.default_rng(0)
        letters = list("abcdefg")
        for _ in range(50):
            n = int(rng.integers(4, 9))
            ref = " ".join(rng.choice(letters, size=n))
            prd = " ".join(rng.choice(letters, size=n))
            base = bleu4(pair(prd, ref))
            extended = bleu4(pair(prd + " zzz", ref))
            assert extended <= base + 1e-12


class TestRougeL:
    def test_identical(self):
        assert rouge_l(pair("a b c d", "a b c d")) == pytest.approx(1.0)

    def test_disjoint(self):
        assert rouge_l(pair("a b", "c d")) == 0.0

    def test_hand_value(self):
        assert rouge_l(pair("a b c d", "a c b d")) == pytest.approx(0.75, abs=1e-9)

    def test_lcs_matches_brute_force(self):
        rng = np.random.default_rng(1)
        letters = list("abc")
        for _ in range(40):
            a = list(rng.choice(letters, size=int(rng.integers(1, 8))))
            b = list(rng.choice(letters, size=int(rng.integers(1, 8))))
            brute = 0
            for k in range(len(a), 0, -1):
                for comb in itertools.combinations(range(len(a)), k):
                    sub = [a[i] for i in comb]
                    it = iter(b)
                    if all(tok in it for tok in sub):
                        brute = k
                        break
                if brute:
                    break
            assert _lcs_length(a, b) == brute

    def test_recall_bias(self):
        # same LCS and prediction, shorter reference -> higher recall -> F
        # never drops
        rng = np.random.default_rng(2)
        for _ in range(30):
            n = int(rng.integers(2, 6))
            prd = " ".join(f"t{i}" for i in range(n))
            junk = ["x", "y", "z", "w"]
            long_ref = prd + " " + " ".join(junk)
            short_ref = prd + " " + " ".join(junk[:2])
            assert rouge_l(pair(prd, short_ref)) >= rouge_l(pair(prd, long_ref))

    def test_max_over_references(self):
        p = pair("a b c", "z z z", "a b c")
        assert rouge_l(p) == pytest.approx(1.0)


class TestMeteorLite:
    def test_hand_value(self):
        got = meteor_lite(pair("the cat sat", "the cat slept"))
        assert got == pytest.approx(0.625, abs=1e-4)

    def test_no_common_tokens(self):
        assert meteor_lite(pair("a b", "c d")) == 0.0

    def test_identical_formula(self):
        m = 5
        got = meteor_lite(pair("a b c d e", "a b c d e"))
        expected = 1.0 * (1.0 - 0.5 * (1.0 / m) ** 3)
        assert got == pytest.approx(expected, abs=1e-12)

    def test_chunk_minimization_with_duplicates(self):
        # "a b a" vs "b a": two matches are forced; aligning the second "a"
        # keeps 'b a' contiguous, one chunk instead of two
        got = meteor_lite(pair("a b a", "b a"))
        p, r, matches, chunks = 2 / 3, 2 / 2, 2, 1
        f_mean = 10 * p * r / (r + 9 * p)
        expected = f_mean * (1 - 0.5 * (chunks / matches) ** 3)
        assert got == pytest.approx(expected, abs=1e-12)

    def test_fragmentation_penalty_orders_scores(self):
        contiguous = meteor_lite(pair("a b c d", "a b c d x"))
        scattered = meteor_lite(pair("a b c d", "a x b y c z d"))
        assert contiguous > scattered


class TestCorpusEval:
    def test_single_pair_mean(self):
        summary, records = corpus_eval([("e1", pair("a b c d", "a b c d"))])
        assert summary["rouge_l"] == records[0]["rouge_l"] == pytest.approx(1.0)
        assert summary["count"] == 1

    def test_identical_pairs_all_ones(self):
        pairs = [(f"e{i}", pair("a b c d", "a b c d")) for i in range(3)]
        summary, _ = corpus_eval(pairs)
        assert summary["bleu4"] == pytest.approx(1.0)
        assert summary["rouge_l"] == pytest.approx(1.0)
        assert summary["exact_match"] == pytest.approx(1.0)

    def test_mean_of_zero_and_one(self):
        pairs = [
            ("good", pair("a b c d", "a b c d")),
            ("bad", pair("x y z w", "a b c d")),
        ]
        summary, records = corpus_eval(pairs, metric_names=("rouge_l",))
        assert summary["rouge_l"] == pytest.approx(0.5)
        assert [r["id"] for r in records] == ["good", "bad"]

    def test_empty_corpus_rejected(self):
        with pytest.raises(ValueError):
            corpus_eval([])


class TestExactMatch:
    def test_match_any_reference(self):
        assert exact_match(pair("a b", "c", "a b")) == 1.0
        assert exact_match(pair("a b", "a b c")) == 0.0

    def test_scores_in_unit_interval(self):
        rng = np.random.default_rng(3)
        letters = list("abcd")
        for _ in range(60):
            prd = " ".join(rng.choice(letters, size=int(rng.integers(1, 8))))
            ref = " ".join(rng.choice(letters, size=int(rng.integers(1, 8))))
            p = pair(prd, ref)
            for fn in (bleu4, rouge_l, meteor_lite, exact_match):
                assert 0.0 <= fn(p) <= 1.0
