import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from alnbeam.constraints import Constraint
from alnbeam.errors import DataError
from alnbeam.metrics import (SpanPair, bleu, bleu_c, corpus_bleu_c, csr, extract_spans, paired_bootstrap,
                             satisfied_flags, score_report)

W = str.split


def test_bleu_identity_and_disjoint():
    refs = [W("a b c d e"), W("f g h i")]
    assert bleu(refs, refs) == 100.0
    assert bleu(refs, [W("x y z w q"), W("p q r s")]) == 0.0


def test_bleu_hand_computed_brevity_case():
    # all precisions are 1, brevity penalty exp(1 - 5/4)
    assert bleu([W("a b c d e")], [W("a b c d")]) == pytest.approx(100 * math.exp(-0.25), abs=1e-12)
    assert abs(bleu([W("a b c d e")], [W("a b c d")]) - 77.88) < 0.01


def test_bleu_clipped_counts():
    # hyp "a a a a" vs ref "a b c d": unigram 1/4, no bigram match
    assert bleu([W("a b c d")], [W("a a a a")]) == 0.0
    assert bleu([W("a b c d")], [W("a a a a")], max_n=1) == pytest.approx(25.0)


def test_bleu_smoothing_only_above_unigrams():
    ref, hyp = W("a b c d e"), W("a x c y e")
    # unigram 3/5; bigram/trigram/4-gram get add-one: 1/5, 1/4, 1/3
    expected = 100 * math.exp((math.log(3 / 5) + math.log(1 / 5) + math.log(1 / 4) + math.log(1 / 3)) / 4)
    assert bleu([ref], [hyp], smoothing=True) == pytest.approx(expected, abs=1e-12)
    assert bleu([ref], [hyp]) == 0.0


def test_bleu_errors():
    with pytest.raises(ValueError):
        bleu([], [])
    with pytest.raises(ValueError):
        bleu([W("a")], [])


toks = st.lists(st.sampled_from("abcd"), min_size=0, max_size=8)


@settings(max_examples=80, deadline=None)
@given(st.lists(st.tuples(toks, toks), min_size=1, max_size=6), st.randoms(use_true_random=False))
def test_bleu_range_and_permutation_invariance(pairs, rnd):
    refs, hyps = [p[0] for p in pairs], [p[1] for p in pairs]
    b = bleu(refs, hyps, smoothing=True)
    assert 0.0 <= b <= 100.0 + 1e-9
    order = list(range(len(pairs)))
    rnd.shuffle(order)
    assert bleu([refs[i] for i in order], [hyps[i] for i in order], smoothing=True) == b


def test_bleu_c_worked_example():
    ref = W("we consider the development of a robust security system that is independent of the")
    hyp = W("we consider developing a robust security system which is independent of the")
    cs = [Constraint((0, 0), ("development",)), Constraint((1, 2), ("security", "system"))]
    spans = extract_spans(ref, hyp, cs, satisfied_flags(cs, hyp), window=2)
    assert spans[0] == SpanPair(tuple(W("consider the development of a")), ())
    assert spans[1] == SpanPair(tuple(W("a robust security system that is")), tuple(W("a robust security system which is")))
    assert bleu_c(spans) == bleu([p.ref_span for p in spans], [p.hyp_span for p in spans])


def test_span_clipped_at_sentence_start():
    ref = W("alpha beta gamma delta")
    [p] = extract_spans(ref, ref, [Constraint((0, 0), ("alpha",))], [True], window=3)
    assert p.ref_span == tuple(ref) and p.hyp_span == tuple(ref)


def test_span_absent_from_reference():
    with pytest.raises(DataError):
        extract_spans(W("a b"), W("a b"), [Constraint((0, 0), ("z",))], [False])


def test_first_occurrence_anchors_window():
    hyp = W("k a q q q q q a m")
    [p] = extract_spans(W("x a y"), hyp, [Constraint((0, 0), ("a",))], [True], window=1)
    assert p.hyp_span == ("k", "a", "q")


def test_bleu_c_all_or_nothing():
    refs = [W("p q r s t u v")]
    cs = [[Constraint((0, 0), ("s",))]]
    assert corpus_bleu_c(refs, refs, cs) == 100.0
    assert corpus_bleu_c(refs, [W("p q r t u v")], cs) == 0.0


@settings(max_examples=60, deadline=None)
@given(st.lists(st.tuples(st.lists(st.sampled_from("abcde"), min_size=3, max_size=9),
                          st.lists(st.sampled_from("abcde"), min_size=0, max_size=9)), min_size=1, max_size=5),
       st.integers(0, 4))
def test_bleu_c_equals_bleu_on_manual_spans(pairs, window):
    refs, hyps, cons, ref_spans, hyp_spans = [], [], [], [], []
    for ref, hyp in pairs:
        c = Constraint((0, 0), (ref[1],))
        refs.append(ref), hyps.append(hyp), cons.append([c])
        # manual extraction, written out independently
        i = ref.index(ref[1])
        ref_spans.append(tuple(ref[max(0, i - window):i + 1 + window]))
        j = hyp.index(ref[1]) if ref[1] in hyp else None
        hyp_spans.append(() if j is None else tuple(hyp[max(0, j - window):j + 1 + window]))
    assert corpus_bleu_c(refs, hyps, cons, window) == bleu(ref_spans, hyp_spans)


def test_csr_arithmetic():
    cs = [[Constraint((0, 0), ("a",)), Constraint((1, 1), ("b", "c"))], [Constraint((0, 0), ("d",)),
                                                                        Constraint((1, 1), ("e",))]]
    assert csr(cs, [W("a b c"), W("d e")]) == 100.0
    assert csr(cs, [W("x"), W("y")]) == 0.0
    assert csr(cs, [W("a b x c"), W("d e")]) == 75.0
    assert csr([[]], [W("a")]) == 100.0


@settings(max_examples=80, deadline=None)
@given(st.lists(st.lists(st.sampled_from("abc"), min_size=1, max_size=3), min_size=1, max_size=4),
       st.lists(st.sampled_from("abc"), max_size=8), st.randoms(use_true_random=False))
def test_csr_substring_oracle_and_order(phrases, hyp, rnd):
    cs = [Constraint((i, i), tuple(p)) for i, p in enumerate(phrases)]
    hs = " ".join(hyp)
    expected = 100.0 * sum(f" {' '.join(p)} " in f" {hs} " for p in phrases) / len(phrases)
    assert csr([cs], [hyp]) == pytest.approx(expected, abs=1e-12)
    shuffled = list(cs)
    rnd.shuffle(shuffled)
    assert csr([shuffled], [hyp]) == csr([cs], [hyp])


def _medium_corpus(seed=0, n=60):
    r = np.random.default_rng(seed)
    refs, a, b = [], [], []
    for _ in range(n):
        ref = [f"x{v}" for v in r.integers(0, 8, size=10)]

        def corrupt(k):
            h = list(ref)
            for i in r.choice(10, size=k, replace=False):
                h[i] = "zz"
            return h

        refs.append(ref)
        a.append(corrupt(2))
        b.append(corrupt(int(r.integers(2, 4)) if r.random() < 0.5 else 2))
    return refs, a, b


def test_bootstrap_identical_systems():
    refs, a, _ = _medium_corpus()
    assert paired_bootstrap("bleu", refs, a, a, n_samples=500) == 1.0


def test_bootstrap_dominance():
    refs, a, _ = _medium_corpus()
    b = [["zz"] * len(r) for r in refs]
    n = 2000
    assert paired_bootstrap("bleu", refs, refs, b, n_samples=n) < 1 / n + 1e-12


def test_bootstrap_seed_behaviour():
    refs, a, b = _medium_corpus()
    ps = [paired_bootstrap("bleu", refs, a, b, n_samples=10000, seed=s) for s in range(3)]
    assert 0.02 < ps[0] < 0.98
    assert max(ps) - min(ps) <= 0.02
    assert paired_bootstrap("bleu", refs, a, b, n_samples=10000, seed=0) == ps[0]


def test_bootstrap_callable_with_aux():
    refs = [W("a b"), W("c d"), W("e f")]
    cons = [[Constraint((0, 0), ("a",))], [Constraint((0, 0), ("d",))], [Constraint((0, 0), ("f",))]]
    worse = [W("x b"), W("c x"), W("e x")]
    p = paired_bootstrap(lambda r, h, c: csr(c, h), refs, refs, worse, n_samples=300, aux=cons)
    assert p == 0.0


def test_score_report_shape():
    refs = [W("a b c d"), W("e f g h")]
    cs = [[Constraint((0, 0), ("b",))], [Constraint((0, 0), ("g",))]]
    rep = score_report(refs, [W("a b c d"), W("e f x h")], cs, time_seconds=1.5)
    assert set(rep) == {"bleu", "bleu_c", "csr", "time_seconds", "per_constraint"}
    assert rep["csr"] == 50.0 and rep["per_constraint"] == [[True], [False]] and rep["time_seconds"] == 1.5
