"""Beam search, alignment-triggered token replacement, VDBA and Align-VDBA.

Every decoder talks to a *scorer*: an object with ``eos``, ``src_len``,
``log_probs(prefix)`` and ``align(prefix, ys)``.  ``ModelScorer`` adapts a
``Model`` (with a prefix-keyed state cache); ``TableScorer`` wraps plain
functions so decoders can be driven by hand-built distributions.

Scores are sums of natural-log token probabilities.  Constraint-consuming
extensions in Align-VDBA add ``log(span mass) / T``.  Ties are broken by
lexicographic order of the token-id sequence, so every decoder is
deterministic.
"""
from __future__ import annotations

import heapq
import math
import time
from dataclasses import dataclass, replace
from typing import Callable, NamedTuple, Sequence

import numpy as np

from .align import AlignHead, _g, hard_align, head_distribution, naive_att, posterior_align_many, prior_align
from .constraints import Constraint, ConstraintProgress, advance, bank_index, find_phrase, next_tokens
from .errors import ConfigError
from .model import Model, decode_step, encode
from .numerics import log_softmax

DECODE_METHODS = ("none", "replace", "vdba", "align_vdba")
ALIGN_METHODS = ("naive", "shift", "prior", "shift_aet", "postaln")
_HEAD_KIND = {"prior": "prior", "shift_aet": "shift_aet", "postaln": "post"}


@dataclass(frozen=True)
class DecodeConfig:
    """``threshold=None`` resolves to 0.1 for beams of at most 5 and 0 otherwise.

    ``max_len=None`` allows ``len(src) + 10`` tokens.  ``expand`` is how many
    tokens per hypothesis replacement decoding considers.
    """

    beam_size: int = 5
    max_len: int | None = None
    method: str = "none"
    align_method: str | None = None
    threshold: float | None = None
    temperature: float = 2.0
    layer: int | None = None
    expand: int = 2
    length_norm: bool = False

    def validate(self) -> "DecodeConfig":
        if self.beam_size < 1:
            raise ConfigError("beam size must be at least 1")
        if self.method not in DECODE_METHODS:
            raise ConfigError(f"unknown decode method {self.method!r}")
        if self.align_method is not None and self.align_method not in ALIGN_METHODS:
            raise ConfigError(f"unknown alignment method {self.align_method!r}")
        if self.threshold is not None and not 0.0 <= self.threshold <= 1.0:
            raise ConfigError(f"threshold {self.threshold} outside [0, 1]")
        if not self.temperature > 0:
            raise ConfigError("temperature must be positive")
        if self.max_len is not None and self.max_len < 0:
            raise ConfigError("max_len must be non-negative")
        if self.expand < 1:
            raise ConfigError("expand must be at least 1")
        return self

    @property
    def resolved_threshold(self) -> float:
        if self.threshold is not None:
            return self.threshold
        return 0.1 if self.beam_size <= 5 else 0.0


@dataclass(frozen=True)
class Hypothesis:
    tokens: tuple[int, ...]
    log_score: float
    progress: ConstraintProgress = ConstraintProgress()
    alignments: tuple[int, ...] = ()
    finished: bool = False
    complete: bool = True                 # False for a fallback that misses constraints
    satisfied: tuple[int, ...] = ()
    unsatisfied: tuple[int, ...] = ()
    micros: int = 0

    @property
    def state_ref(self) -> tuple[int, ...]:
        """Key of this hypothesis's decoder state in its scorer's cache."""
        return self.tokens

    def as_json(self, vocab=None, timing: bool = True) -> dict:
        toks = vocab.decode(self.tokens) if vocab is not None else list(self.tokens)
        out = {
            "tokens": toks,
            "log_score": self.log_score,
            "alignments": list(self.alignments),
            "satisfied": list(self.satisfied),
            "unsatisfied": list(self.unsatisfied),
            "complete": self.complete,
        }
        if timing:
            out["micros"] = self.micros
        return out


def _key(score: float, tokens: tuple) -> tuple:
    return (-score, tokens)


# -- scorers ------------------------------------------------------------------

class ModelScorer:
    """Scorer over a ``Model`` for one source sentence; caches one decoder state per prefix."""

    def __init__(self, model: Model, src: Sequence[int], head: AlignHead | None = None,
                 align_method: str = "naive", layer: int | None = None):
        if align_method not in ALIGN_METHODS:
            raise ConfigError(f"unknown alignment method {align_method!r}")
        if align_method in _HEAD_KIND:
            if head is None:
                raise ConfigError(f"alignment method {align_method!r} needs a trained alignment head")
            if head.kind != _HEAD_KIND[align_method]:
                raise ConfigError(f"head of kind {head.kind!r} cannot serve method {align_method!r}")
        self.model = model
        self.head = head
        self.align_method = align_method
        self.layer = model.penultimate if layer is None else layer
        if not 0 <= self.layer < model.config.n_layers:
            raise ConfigError(f"layer {self.layer} out of range")
        self.vocab = model.tgt_vocab
        self.eos = self.vocab.eos
        self._bos = self.vocab.bos
        _, first = decode_step(model, encode(model, src), self._bos)
        self.src_len = len(src)
        self._states = {(): first}
        self._lp: dict[tuple, np.ndarray] = {}

    def state(self, prefix: tuple):
        st = self._states.get(prefix)
        if st is None:
            _, st = decode_step(self.model, self.state(prefix[:-1]), prefix[-1])
            self._states[prefix] = st
        return st

    def log_probs(self, prefix: tuple) -> np.ndarray:
        lp = self._lp.get(prefix)
        if lp is None:
            lp = log_softmax(self.state(prefix).logits[-1])
            lp[self._bos] = -np.inf
            self._lp[prefix] = lp
        return lp

    def align(self, prefix: tuple, ys: Sequence[int]) -> np.ndarray:
        """One alignment distribution over source positions per candidate token ``y`` after ``prefix``."""
        st = self.state(prefix)
        t = len(prefix)
        m = self.align_method
        if m == "naive":
            return np.tile(naive_att(st, self.layer, t), (len(ys), 1))
        if m == "prior":
            return np.tile(prior_align(self.head, self.model, st, t), (len(ys), 1))
        if m == "postaln":
            return posterior_align_many(self.head, self.model, st, t, ys)
        rows = []
        for y in ys:
            nxt = self.state(prefix + (int(y),))
            if m == "shift":
                rows.append(naive_att(nxt, self.layer, t + 1))
            else:
                rows.append(head_distribution(self.head, _g(nxt, self.head.layer, t + 1), nxt.H)[0])
        return np.array(rows)


class TableScorer:
    """Scorer backed by plain functions of the prefix.

    ``logp_fn(prefix)`` returns log-probabilities over the whole vocabulary;
    ``align_fn(prefix, y)`` returns a distribution over ``src_len`` positions
    (uniform when omitted).
    """

    def __init__(self, logp_fn: Callable, eos: int, src_len: int, align_fn: Callable | None = None):
        self.logp_fn = logp_fn
        self.align_fn = align_fn
        self.eos = eos
        self.src_len = src_len
        self._lp: dict[tuple, np.ndarray] = {}

    def log_probs(self, prefix: tuple) -> np.ndarray:
        lp = self._lp.get(prefix)
        if lp is None:
            lp = np.asarray(self.logp_fn(prefix), dtype=np.float64)
            self._lp[prefix] = lp
        return lp

    def align(self, prefix: tuple, ys: Sequence[int]) -> np.ndarray:
        if self.align_fn is None:
            return np.full((len(ys), self.src_len), 1.0 / self.src_len)
        return np.array([self.align_fn(prefix, int(y)) for y in ys], dtype=np.float64)


def _default_align_method(head: AlignHead | None) -> str:
    if head is None:
        return "naive"
    return {"post": "postaln", "prior": "prior", "shift_aet": "shift_aet"}[head.kind]


def make_scorer(model, src, head: AlignHead | None, config: DecodeConfig):
    """A ``ModelScorer`` for ``model``; objects that already are scorers pass through."""
    if hasattr(model, "log_probs"):
        return model
    method = config.align_method or _default_align_method(head)
    return ModelScorer(model, src, head, method, config.layer)


def _max_len(scorer, config: DecodeConfig) -> int:
    return config.max_len if config.max_len is not None else scorer.src_len + 10


def resolve_constraints(constraints: Sequence[Constraint], scorer) -> tuple[list[Constraint], list[int]]:
    """Map token strings to ids; returns (feasible constraints, original ids of each feasible one).

    A constraint is infeasible when one of its tokens is outside the
    scorer's vocabulary or is the end-of-sentence symbol.
    """
    vocab = getattr(scorer, "vocab", None)
    n_vocab = len(vocab) if vocab is not None else None
    feasible, ids = [], []
    for cid, c in enumerate(constraints):
        toks = []
        for tok in c.tgt_tokens:
            if isinstance(tok, str):
                tok = vocab.index.get(tok) if vocab is not None else None
            elif isinstance(tok, (int, np.integer)) and (n_vocab is None or 0 <= tok < n_vocab):
                tok = int(tok)
            else:
                tok = None
            if tok is None or tok == scorer.eos:
                break
            toks.append(tok)
        else:
            feasible.append(Constraint(c.src_span, tuple(toks)))
            ids.append(cid)
    return feasible, ids


def joint_score(token_logprob: float, align_dist: Sequence[float], span: Sequence[int] | range,
                T: float = 2.0) -> float:
    """``token_logprob + log(span mass) / T``; ``-inf`` when the span holds no mass."""
    if not T > 0:
        raise ConfigError("temperature must be positive")
    if math.isinf(T):
        return token_logprob
    mass = span_mass(align_dist, span)
    if mass <= 0.0:
        return -math.inf
    return token_logprob + math.log(mass) / T


def span_mass(align_dist: Sequence[float], span: Sequence[int] | range) -> float:
    return math.fsum(float(align_dist[r]) for r in span if 0 <= r < len(align_dist))


# -- shared bookkeeping ---------------------------------------------------------

class _Cand(NamedTuple):
    score: float
    tokens: tuple
    progress: ConstraintProgress
    parent: Hypothesis
    y: int              # emitted token (eos for finished candidates)
    cid: int | None
    finished: bool
    aligned: int | None = None


def _with_alignments(scorer, chosen: list[_Cand], record: bool) -> list[Hypothesis]:
    """Turn surviving candidates into hypotheses, appending a hard alignment for each new token."""
    out = []
    need: dict[tuple, list[int]] = {}
    if record:
        for c in chosen:
            if not c.finished and c.aligned is None:
                need.setdefault(c.parent.tokens, []).append(c.y)
    found: dict[tuple, int] = {}
    for prefix, ys in need.items():
        ys = sorted(set(ys))
        for y, row in zip(ys, scorer.align(prefix, ys)):
            found[(prefix, y)] = hard_align(row)
    for c in chosen:
        al = c.parent.alignments
        if not c.finished:
            idx = c.aligned if c.aligned is not None else found.get((c.parent.tokens, c.y), -1)
            al = al + (idx,)
        toks = c.tokens[:-1] if c.finished else c.tokens
        out.append(Hypothesis(toks, c.score, c.progress, al, c.finished))
    return out


def _finalize(h: Hypothesis, constraints: Sequence[Constraint], feasible_ids=None, *, complete=True,
              micros=0) -> Hypothesis:
    """Attach satisfaction report: a constraint is satisfied when its phrase occurs in the output."""
    sat, unsat = [], []
    for cid, c in enumerate(constraints):
        if feasible_ids is not None and cid not in feasible_ids:
            unsat.append(cid)
        elif find_phrase(h.tokens, c.tgt_tokens) >= 0:
            sat.append(cid)
        else:
            unsat.append(cid)
    return replace(h, finished=True, complete=complete, satisfied=tuple(sat), unsatisfied=tuple(unsat), micros=micros)


def _rank_key(h: Hypothesis, length_norm: bool) -> tuple:
    score = h.log_score / (len(h.tokens) + 1) if length_norm else h.log_score
    return _key(score, h.tokens)


def _allowed(lp: np.ndarray, eos: int, at_max: bool, eos_ok: bool) -> np.ndarray:
    """Token ids that may extend a hypothesis (finite score, EOS gating, forced EOS at max length)."""
    if at_max:
        return np.array([eos] if eos_ok and np.isfinite(lp[eos]) else [], dtype=int)
    ok = np.isfinite(lp)
    if not eos_ok:
        ok[eos] = False
    return np.flatnonzero(ok)


# -- unconstrained beam search ------------------------------------------------

def _beam(scorer, config: DecodeConfig, trace: list | None = None, record_alignments: bool = True) -> list[Hypothesis]:
    K = config.beam_size
    max_len = _max_len(scorer, config)
    eos = scorer.eos
    beam = [Hypothesis((), 0.0)]
    finished: list[Hypothesis] = []
    while beam:
        cands = []
        for h in beam:
            lp = scorer.log_probs(h.tokens)
            for y in _allowed(lp, eos, len(h.tokens) >= max_len, True):
                y = int(y)
                cands.append(_Cand(h.log_score + lp[y], h.tokens + (y,),
                                   h.progress, h, y, None, y == eos))
        chosen = heapq.nsmallest(K, cands, key=lambda c: _key(c.score, c.tokens))
        if trace is not None:
            trace.append([(c.tokens, c.progress, c.score, c.cid, c.finished) for c in cands])
        hyps = _with_alignments(scorer, chosen, record_alignments)
        finished += [h for h in hyps if h.finished]
        beam = [h for h in hyps if not h.finished]
        if finished and beam and max(f.log_score for f in finished) >= beam[0].log_score:
            break
    finished.sort(key=lambda h: _rank_key(h, config.length_norm))
    return finished[:K]


def beam_search(model, src, config: DecodeConfig | None = None, trace: list | None = None) -> list[Hypothesis]:
    """K best complete hypotheses, best first."""
    config = (config or DecodeConfig()).validate()
    t0 = time.perf_counter()
    scorer = make_scorer(model, src, None, config)
    hyps = _beam(scorer, config, trace)
    micros = int((time.perf_counter() - t0) * 1e6)
    return [_finalize(h, [], micros=micros) for h in hyps]


# -- replacement decoding -----------------------------------------------------

def _replace(scorer, constraints: list[Constraint], config: DecodeConfig, trace=None) -> Hypothesis | None:
    K = config.beam_size
    max_len = _max_len(scorer, config)
    eos = scorer.eos
    beam = [Hypothesis((), 0.0)]
    finished: list[Hypothesis] = []
    while beam:
        pool: dict[tuple, _Cand] = {}

        def offer(c: _Cand):
            k = (c.tokens, c.progress.key())
            old = pool.get(k)
            if old is None or _key(c.score, c.tokens) < _key(old.score, old.tokens):
                pool[k] = c

        for h in beam:
            lp = scorer.log_probs(h.tokens)
            allowed = _allowed(lp, eos, len(h.tokens) >= max_len, True)
            top = sorted(allowed.tolist(), key=lambda y: (-lp[y], y))[:config.expand]
            prog = h.progress
            if prog.in_progress is None and top:
                dists = scorer.align(h.tokens, top)
            for i, y in enumerate(top):
                s = h.log_score + lp[y]
                if prog.in_progress is not None and len(h.tokens) < max_len:
                    cid, off = prog.in_progress
                    tok = constraints[cid].tgt_tokens[off]
                    new_prog = advance(prog, constraints, tok)[0][0]
                    offer(_Cand(s, h.tokens + (tok,), new_prog, h, tok, cid, False))
                    continue
                if y == eos:
                    offer(_Cand(s, h.tokens + (eos,), prog, h, eos, None, True))
                    continue
                a = hard_align(dists[i])
                hit = next((cid for cid, c in enumerate(constraints)
                            if cid not in prog.met and a in c.positions), None)
                if hit is None:
                    offer(_Cand(s, h.tokens + (y,), prog, h, y, None, False, a))
                else:
                    tok = constraints[hit].tgt_tokens[0]
                    new_prog = next(p for p, c in advance(prog, constraints, tok) if c == hit)
                    offer(_Cand(s, h.tokens + (tok,), new_prog, h, tok, hit, False, a))
        cands = list(pool.values())
        if trace is not None:
            trace.append([(c.tokens, c.progress, c.score, c.cid, c.finished) for c in cands])
        chosen = heapq.nsmallest(K, cands, key=lambda c: _key(c.score, c.tokens))
        hyps = _with_alignments(scorer, chosen, True)
        finished += [h for h in hyps if h.finished]
        beam = [h for h in hyps if not h.finished]
        if finished and beam and max(f.log_score for f in finished) >= beam[0].log_score:
            break
    if not finished:
        return None
    return min(finished, key=lambda h: _rank_key(h, config.length_norm))


def replace_decode(model, align_head: AlignHead | None, src, constraints: Sequence[Constraint],
                   config: DecodeConfig | None = None, trace: list | None = None) -> Hypothesis:
    """Beam search that overwrites a token with a constraint when its hard alignment lands in the span.

    Replaced tokens keep the score of the token the model proposed.
    """
    config = (config or DecodeConfig(method="replace")).validate()
    t0 = time.perf_counter()
    scorer = make_scorer(model, src, align_head, config)
    feasible, ids = resolve_constraints(constraints, scorer)
    h = _replace(scorer, feasible, config, trace)
    micros = int((time.perf_counter() - t0) * 1e6)
    return _finalize(_decoded(h), _as_ids(constraints, feasible, ids), ids,
                     complete=h is not None, micros=micros)


# -- VDBA / Align-VDBA --------------------------------------------------------

def allocate(cands: Sequence[_Cand], K: int, n_banks: int) -> list[_Cand]:
    """Split ``K`` slots evenly over banks (remainder to the highest banks), then hand unused slots
    to the best leftover candidates."""
    banks: list[list[_Cand]] = [[] for _ in range(n_banks)]
    for c in cands:
        banks[min(bank_index(c.progress), n_banks - 1)].append(c)
    quota, extra = divmod(K, n_banks)
    chosen, leftover = [], []
    for b, bank in enumerate(banks):
        bank.sort(key=lambda c: _key(c.score, c.tokens))
        q = quota + (1 if b >= n_banks - extra else 0)
        chosen += bank[:q]
        leftover += bank[q:]
    leftover.sort(key=lambda c: _key(c.score, c.tokens))
    chosen += leftover[:K - len(chosen)]
    chosen.sort(key=lambda c: _key(c.score, c.tokens))
    return chosen


def expand_candidates(scorer, beam: Sequence[Hypothesis], constraints: Sequence[Constraint],
                      config: DecodeConfig, use_alignment: bool) -> list[_Cand]:
    """One step of candidate generation for (Align-)VDBA, deduplicated on (tokens, progress).

    Sources: the global top-K extensions, every constraint-continuing or
    -starting token of each hypothesis, and each hypothesis's best token.
    With ``use_alignment`` every constraint-consuming successor is scored by
    ``joint_score`` and dropped when its raw span mass is at or below the
    threshold (threshold 0 disables the gate).
    """
    K = config.beam_size
    max_len = _max_len(scorer, config)
    eos = scorer.eos
    n_c = len(constraints)
    T = config.temperature
    thr = config.resolved_threshold
    lps, allowed = [], []
    for h in beam:
        lp = scorer.log_probs(h.tokens)
        lps.append(lp)
        allowed.append(_allowed(lp, eos, len(h.tokens) >= max_len, h.progress.all_met(n_c)))

    pairs: dict[int, set[int]] = {i: set() for i in range(len(beam))}
    flat = [(beam[i].log_score + lps[i][y], beam[i].tokens + (int(y),), i, int(y))
            for i in range(len(beam)) for y in allowed[i]]
    for _, _, i, y in heapq.nsmallest(K, flat, key=lambda r: _key(r[0], r[1])):
        pairs[i].add(y)
    for i, h in enumerate(beam):
        if len(allowed[i]) == 0:
            continue
        ok = set(allowed[i].tolist())
        pairs[i].update(tok for tok, _ in next_tokens(h.progress, constraints) if tok in ok)
        lp = lps[i]
        pairs[i].add(int(min(allowed[i], key=lambda y: (-lp[y], y))))

    pool: dict[tuple, _Cand] = {}
    for i, h in enumerate(beam):
        ys = sorted(pairs[i])
        if not ys:
            continue
        lp = lps[i]
        consuming = {}
        for y in ys:
            if y == eos:
                c = _Cand(h.log_score + lp[eos], h.tokens + (eos,), h.progress, h, eos, None, True)
                pool.setdefault((c.tokens, c.progress.key()), c)
                continue
            consuming[y] = advance(h.progress, constraints, y)
        dists = {}
        if use_alignment:
            need = [y for y, succ in consuming.items() if any(cid is not None for _, cid in succ)]
            if need:
                dists = dict(zip(need, scorer.align(h.tokens, need)))
        for y, succ in consuming.items():
            for prog, cid in succ:
                if cid is None or not use_alignment:
                    s = h.log_score + lp[y]
                else:
                    dist = dists[y]
                    span = constraints[cid].positions
                    if thr > 0 and span_mass(dist, span) <= thr:
                        continue
                    js = joint_score(lp[y], dist, span, T)
                    if js == -math.inf:
                        continue
                    s = h.log_score + js
                c = _Cand(s, h.tokens + (y,), prog, h, y, cid, False)
                k = (c.tokens, prog.key())
                old = pool.get(k)
                if old is None or c.score > old.score:
                    pool[k] = c
    return sorted(pool.values(), key=lambda c: _key(c.score, c.tokens))


def _constrained(scorer, constraints: list[Constraint], config: DecodeConfig, use_alignment: bool,
                 trace: list | None = None) -> tuple[Hypothesis | None, bool]:
    """Returns (best hypothesis, whether it meets every constraint)."""
    K = config.beam_size
    max_len = _max_len(scorer, config)
    eos = scorer.eos
    n_c = len(constraints)
    n_banks = sum(len(c) for c in constraints) + 1
    beam = [Hypothesis((), 0.0)]
    finished: list[Hypothesis] = []
    fallback: Hypothesis | None = None
    while beam:
        for h in beam:
            if len(h.tokens) >= max_len and not h.progress.all_met(n_c):
                lp = scorer.log_probs(h.tokens)
                f = Hypothesis(h.tokens, h.log_score + lp[eos], h.progress, h.alignments, True)
                if fallback is None or _rank_key(f, config.length_norm) < _rank_key(fallback, config.length_norm):
                    fallback = f
        cands = expand_candidates(scorer, beam, constraints, config, use_alignment)
        if trace is not None:
            trace.append([(c.tokens, c.progress, c.score, c.cid, c.finished) for c in cands])
        if not cands:
            if fallback is None or beam[0].log_score > fallback.log_score:
                fallback = beam[0]
            break
        chosen = allocate(cands, K, n_banks)
        hyps = _with_alignments(scorer, chosen, True)
        finished += [h for h in hyps if h.finished]
        beam = [h for h in hyps if not h.finished]
        if finished and beam and max(f.log_score for f in finished) >= max(h.log_score for h in beam):
            break
    if finished:
        return min(finished, key=lambda h: _rank_key(h, config.length_norm)), True
    return fallback, False


def _as_ids(constraints, feasible, ids):
    """Original constraint list with feasible entries swapped for their id form (for reporting)."""
    out = list(constraints)
    for c, cid in zip(feasible, ids):
        out[cid] = c
    return out


def _decoded(h: Hypothesis | None) -> Hypothesis:
    return h if h is not None else Hypothesis((), -math.inf)


def _run_constrained(model, head, src, constraints, config, use_alignment, trace):
    t0 = time.perf_counter()
    scorer = make_scorer(model, src, head, config)
    feasible, ids = resolve_constraints(constraints, scorer)
    h, ok = _constrained(scorer, feasible, config, use_alignment, trace)
    micros = int((time.perf_counter() - t0) * 1e6)
    complete = ok and len(feasible) == len(constraints)
    return _finalize(_decoded(h), _as_ids(constraints, feasible, ids), ids,
                     complete=complete, micros=micros)


def vdba_decode(model, src, constraints: Sequence[Constraint], config: DecodeConfig | None = None,
                trace: list | None = None) -> Hypothesis:
    """Dynamic beam allocation over banks indexed by consumed constraint tokens."""
    config = (config or DecodeConfig(method="vdba", beam_size=10)).validate()
    return _run_constrained(model, None, src, constraints, config, False, trace)


def align_vdba_decode(model, align_head: AlignHead | None, src, constraints: Sequence[Constraint],
                      config: DecodeConfig | None = None, trace: list | None = None) -> Hypothesis:
    """VDBA whose constraint extensions are scored jointly with their (tempered) alignment mass."""
    config = (config or DecodeConfig(method="align_vdba")).validate()
    return _run_constrained(model, align_head, src, constraints, config, True, trace)


def decode(model, align_head: AlignHead | None, src, constraints: Sequence[Constraint],
           config: DecodeConfig) -> Hypothesis:
    """Dispatch on ``config.method``."""
    config.validate()
    if config.method == "none":
        t0 = time.perf_counter()
        scorer = make_scorer(model, src, align_head, config)
        feasible, ids = resolve_constraints(constraints, scorer)
        best = _beam(scorer, config)[0]
        micros = int((time.perf_counter() - t0) * 1e6)
        return _finalize(best, _as_ids(constraints, feasible, ids), ids, micros=micros)
    if config.method == "replace":
        return replace_decode(model, align_head, src, constraints, config)
    if config.method == "vdba":
        # the head only feeds the reported alignments here
        return _run_constrained(model, align_head, src, constraints, config, False, None)
    return align_vdba_decode(model, align_head, src, constraints, config)
