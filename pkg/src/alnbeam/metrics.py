"""Corpus BLEU, the constraint-window BLEU-C, constraint satisfaction rate and paired bootstrap."""
from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass
from typing import Callable, Hashable, Sequence

import numpy as np

from .constraints import Constraint, find_phrase
from .errors import DataError

Tokens = Sequence[Hashable]


def _ngrams(toks: Tokens, n: int) -> Counter:
    return Counter(tuple(toks[i:i + n]) for i in range(len(toks) - n + 1))


def bleu_stats(ref: Tokens, hyp: Tokens, max_n: int = 4) -> np.ndarray:
    """Sufficient statistics ``[c, r, match_1, total_1, ..., match_n, total_n]`` for one sentence."""
    out = [len(hyp), len(ref)]
    for n in range(1, max_n + 1):
        h, r = _ngrams(hyp, n), _ngrams(ref, n)
        out += [sum(min(v, r[g]) for g, v in h.items()), max(len(hyp) - n + 1, 0)]
    return np.array(out, dtype=np.int64)


def bleu_from_stats(stats: np.ndarray, smoothing: bool = False) -> float:
    c, r = int(stats[0]), int(stats[1])
    max_n = (len(stats) - 2) // 2
    if c == 0:
        return 0.0
    log_p = 0.0
    for n in range(max_n):
        match, total = int(stats[2 + 2 * n]), int(stats[3 + 2 * n])
        if smoothing and n > 0:
            match, total = match + 1, total + 1
        if match == 0 or total == 0:
            return 0.0
        log_p += math.log(match / total)
    bp = 0.0 if c >= r else 1.0 - r / c
    return 100.0 * math.exp(bp + log_p / max_n)


def bleu(refs: Sequence[Tokens], hyps: Sequence[Tokens], max_n: int = 4, smoothing: bool = False) -> float:
    """Corpus BLEU in [0, 100] with clipped n-gram counts and brevity penalty.

    ``smoothing`` adds one to the matches and totals of every order above 1.
    """
    if len(refs) != len(hyps):
        raise ValueError(f"{len(refs)} references but {len(hyps)} hypotheses")
    if not refs:
        raise ValueError("empty corpus")
    stats = sum(bleu_stats(r, h, max_n) for r, h in zip(refs, hyps))
    return bleu_from_stats(stats, smoothing)


@dataclass(frozen=True)
class SpanPair:
    ref_span: tuple
    hyp_span: tuple


def _window(toks: Tokens, start: int, length: int, window: int) -> tuple:
    return tuple(toks[max(0, start - window):start + length + window])


def extract_spans(ref: Tokens, hyp: Tokens, constraints: Sequence[Constraint], satisfied: Sequence[bool],
                  window: int = 3) -> list[SpanPair]:
    """The constraint phrase plus ``window`` words either side, in the reference and in the output.

    Windows are anchored at each phrase's first occurrence and clipped at
    sentence edges.  An unsatisfied constraint gets an empty output span.
    """
    if len(constraints) != len(satisfied):
        raise ValueError("one satisfied flag per constraint is required")
    out = []
    for c, ok in zip(constraints, satisfied):
        phrase = c.tgt_tokens
        at = find_phrase(ref, phrase)
        if at < 0:
            raise DataError(f"constraint {' '.join(map(str, phrase))!r} does not occur in the reference")
        hyp_span: tuple = ()
        if ok:
            h_at = find_phrase(hyp, phrase)
            if h_at >= 0:
                hyp_span = _window(hyp, h_at, len(phrase), window)
        out.append(SpanPair(_window(ref, at, len(phrase), window), hyp_span))
    return out


def bleu_c(span_pairs: Sequence[SpanPair], max_n: int = 4, smoothing: bool = False) -> float:
    return bleu([p.ref_span for p in span_pairs], [p.hyp_span for p in span_pairs], max_n, smoothing)


def satisfied_flags(constraints: Sequence[Constraint], hyp: Tokens) -> list[bool]:
    return [find_phrase(hyp, c.tgt_tokens) >= 0 for c in constraints]


def csr(constraints: Sequence[Sequence[Constraint]], hyps: Sequence[Tokens]) -> float:
    """Percentage of constraints whose phrase occurs contiguously in its sentence's output."""
    if len(constraints) != len(hyps):
        raise ValueError("one constraint list per hypothesis is required")
    flags = [f for cs, h in zip(constraints, hyps) for f in satisfied_flags(cs, h)]
    if not flags:
        return 100.0
    return 100.0 * sum(flags) / len(flags)


def corpus_bleu_c(refs, hyps, constraints, window: int = 3) -> float:
    pairs = [p for r, h, cs in zip(refs, hyps, constraints)
             for p in extract_spans(r, h, cs, satisfied_flags(cs, h), window)]
    return bleu_c(pairs) if pairs else 0.0


def paired_bootstrap(metric: str | Callable, refs, hyps_a, hyps_b, n_samples: int = 10000, seed: int = 0,
                     aux: Sequence | None = None) -> float:
    """One-sided p-value that system A beats baseline B: fraction of resamples with B >= A.

    ``metric`` is ``"bleu"`` or a callable ``(refs, hyps) -> float``; with
    ``aux`` (per-sentence extras such as constraint lists) the callable gets
    ``(refs, hyps, aux)``.  BLEU resamples precomputed sentence statistics.
    """
    n = len(refs)
    if not (n == len(hyps_a) == len(hyps_b)):
        raise ValueError("all inputs must have the same number of sentences")
    if n == 0:
        raise ValueError("empty corpus")
    rng = np.random.default_rng(seed)
    hits = 0
    if metric == "bleu":
        sa = np.array([bleu_stats(r, h) for r, h in zip(refs, hyps_a)])
        sb = np.array([bleu_stats(r, h) for r, h in zip(refs, hyps_b)])
        for _ in range(n_samples):
            idx = rng.integers(0, n, size=n)
            hits += bleu_from_stats(sb[idx].sum(0)) >= bleu_from_stats(sa[idx].sum(0))
    else:
        for _ in range(n_samples):
            idx = rng.integers(0, n, size=n)
            r = [refs[i] for i in idx]
            extra = () if aux is None else ([aux[i] for i in idx],)
            hits += metric(r, [hyps_b[i] for i in idx], *extra) >= metric(r, [hyps_a[i] for i in idx], *extra)
    return hits / n_samples


def score_report(refs, hyps, constraints=None, time_seconds: float | None = None, window: int = 3) -> dict:
    """BLEU, BLEU-C, CSR, time and per-constraint satisfaction for one system."""
    report = {"bleu": bleu(refs, hyps)}
    if constraints is not None:
        report["bleu_c"] = corpus_bleu_c(refs, hyps, constraints, window)
        report["csr"] = csr(constraints, hyps)
        report["per_constraint"] = [satisfied_flags(cs, h) for cs, h in zip(constraints, hyps)]
    report["time_seconds"] = time_seconds
    return report
