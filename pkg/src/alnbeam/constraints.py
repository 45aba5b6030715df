"""Lexical constraints: representation, test-set extraction, and per-hypothesis progress."""
from __future__ import annotations

import json
import random
from dataclasses import dataclass
from pathlib import Path
from typing import Hashable, Iterable, Sequence

from .align import Alignment
from .errors import DataError, FormatError


@dataclass(frozen=True)
class Constraint:
    """A source span ``[start, end]`` (inclusive) that must surface as ``tgt_tokens``."""

    src_span: tuple[int, int]
    tgt_tokens: tuple

    def __post_init__(self):
        p, q = self.src_span
        object.__setattr__(self, "src_span", (int(p), int(q)))
        object.__setattr__(self, "tgt_tokens", tuple(self.tgt_tokens))
        if p < 0 or q < p:
            raise DataError(f"bad source span {self.src_span}")
        if not self.tgt_tokens:
            raise DataError("constraint needs at least one target token")

    def __len__(self):
        return len(self.tgt_tokens)

    @property
    def positions(self) -> range:
        return range(self.src_span[0], self.src_span[1] + 1)

    def overlaps(self, other: "Constraint") -> bool:
        return not (self.src_span[1] < other.src_span[0] or other.src_span[1] < self.src_span[0])


def check_constraints(constraints: Sequence[Constraint]):
    for i, a in enumerate(constraints):
        for b in constraints[i + 1:]:
            if a.overlaps(b):
                raise DataError(f"constraints {a.src_span} and {b.src_span} overlap on the source side")


def find_phrase(seq: Sequence[Hashable], phrase: Sequence[Hashable]) -> int:
    """Start index of the first contiguous occurrence of ``phrase`` in ``seq``, or -1."""
    n, m = len(seq), len(phrase)
    if m == 0:
        return 0
    for i in range(n - m + 1):
        if tuple(seq[i:i + m]) == tuple(phrase):
            return i
    return -1


@dataclass(frozen=True)
class ConstraintProgress:
    """What one hypothesis has consumed: met constraint ids and an optional (id, next offset)."""

    met: frozenset = frozenset()
    in_progress: tuple[int, int] | None = None
    met_token_count: int = 0

    def all_met(self, n_constraints: int) -> bool:
        return self.in_progress is None and len(self.met) == n_constraints

    def key(self) -> tuple:
        return (tuple(sorted(self.met)), self.in_progress or (-1, 0))


def bank_index(progress: ConstraintProgress) -> int:
    return progress.met_token_count


def _consume(progress: ConstraintProgress, constraints, cid: int, offset: int) -> ConstraintProgress:
    """Progress after consuming token ``offset`` (0-based) of constraint ``cid``."""
    base = progress.met_token_count - (progress.in_progress[1] if progress.in_progress else 0)
    if offset + 1 == len(constraints[cid]):
        return ConstraintProgress(progress.met | {cid}, None, base + len(constraints[cid]))
    return ConstraintProgress(progress.met, (cid, offset + 1), base + offset + 1)


def advance(progress: ConstraintProgress, constraints: Sequence[Constraint], y) -> list[tuple[ConstraintProgress, int | None]]:
    """Every legal successor of ``progress`` after emitting ``y``.

    If a constraint is in progress and ``y`` is its next token the only
    successor continues it.  Otherwise the partial match (if any) is
    abandoned, and ``y`` may start any unmet constraint whose first token it
    is, or be a free token.  The second element names the constraint that
    consumed ``y`` (``None`` for a free token).
    """
    if progress.in_progress is not None:
        cid, off = progress.in_progress
        if constraints[cid].tgt_tokens[off] == y:
            return [(_consume(progress, constraints, cid, off), cid)]
        progress = ConstraintProgress(progress.met, None, progress.met_token_count - off)
    out = []
    for cid, c in enumerate(constraints):
        if cid not in progress.met and c.tgt_tokens[0] == y:
            out.append((_consume(progress, constraints, cid, 0), cid))
    out.append((progress, None))
    return out


def next_tokens(progress: ConstraintProgress, constraints: Sequence[Constraint]) -> list[tuple[Hashable, int]]:
    """(token, constraint id) pairs that would continue or start a constraint."""
    if progress.in_progress is not None:
        cid, off = progress.in_progress
        out = [(constraints[cid].tgt_tokens[off], cid)]
    else:
        out = []
    out += [(c.tgt_tokens[0], cid) for cid, c in enumerate(constraints) if cid not in progress.met]
    return out


# -- test-set construction ----------------------------------------------------

def phrase_pairs(gold: Alignment, tgt_len: int, max_len: int = 3) -> list[tuple[tuple[int, int], tuple[int, int]]]:
    """Alignment-consistent (source span, target span) pairs over sure links.

    Target spans have at most ``max_len`` words, every target word is
    aligned, and no link leaves the box.
    """
    links = gold.sure
    by_tgt: dict[int, set[int]] = {}
    for s, t in links:
        by_tgt.setdefault(t, set()).add(s)
    out = []
    for a in range(tgt_len):
        for b in range(a, min(tgt_len, a + max_len)):
            if any(t not in by_tgt for t in range(a, b + 1)):
                break
            srcs = set().union(*(by_tgt[t] for t in range(a, b + 1)))
            p, q = min(srcs), max(srcs)
            if all((a <= t <= b) == (p <= s <= q) for s, t in links if p <= s <= q or a <= t <= b):
                out.append(((p, q), (a, b)))
    return out


def extract_constraints(gold: Alignment, src: Sequence, ref: Sequence, greedy_hyp: Sequence, rng_seed: int,
                        max_constraints: int = 3, max_len: int = 3) -> list[Constraint]:
    """Sample up to ``max_constraints`` non-overlapping gold phrase pairs the greedy output got wrong.

    Candidates are alignment-consistent phrase pairs (sure links only) of at
    most ``max_len`` reference words whose reference phrase does not occur
    in ``greedy_hyp``.  Picks are uniform among the candidates still
    compatible with earlier picks.  Constraints come back sorted by source span.
    """
    rng = random.Random(rng_seed)
    pool = []
    for (p, q), (a, b) in phrase_pairs(gold, len(ref), max_len):
        if q >= len(src):
            raise DataError(f"gold link to source position {q} in a sentence of {len(src)} words")
        phrase = tuple(ref[a:b + 1])
        if find_phrase(greedy_hyp, phrase) < 0:
            pool.append(((p, q), (a, b), phrase))
    chosen = []
    while pool and len(chosen) < max_constraints:
        pick = pool[rng.randrange(len(pool))]
        chosen.append(pick)
        (p, q), (a, b), _ = pick
        pool = [c for c in pool if c[0][1] < p or c[0][0] > q]
        pool = [c for c in pool if c[1][1] < a or c[1][0] > b]
    return sorted((Constraint(span, phrase) for span, _, phrase in chosen), key=lambda c: c.src_span)


# -- JSON Lines --------------------------------------------------------------

def constraints_to_json(constraints: Iterable[Constraint]) -> dict:
    return {"constraints": [{"src_span": list(c.src_span), "tgt_tokens": list(c.tgt_tokens)} for c in constraints]}


def constraints_from_json(obj, lineno: int | None = None) -> list[Constraint]:
    where = f" on line {lineno}" if lineno is not None else ""
    try:
        items = obj["constraints"]
        out = [Constraint(tuple(c["src_span"]), tuple(c["tgt_tokens"])) for c in items]
    except (KeyError, TypeError, ValueError) as e:
        raise FormatError(f"malformed constraint record{where}: {e}") from None
    except DataError as e:
        raise FormatError(f"invalid constraint{where}: {e}") from None
    check_constraints(out)
    return out


def write_constraints(path, per_sentence: Iterable[Sequence[Constraint]]):
    Path(path).write_text("".join(json.dumps(constraints_to_json(cs)) + "\n" for cs in per_sentence),
                          encoding="utf-8")


def read_constraints(path) -> list[list[Constraint]]:
    out = []
    for i, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines()):
        try:
            obj = json.loads(line)
        except json.JSONDecodeError as e:
            raise FormatError(f"{path}: line {i + 1} is not JSON ({e.msg})") from None
        out.append(constraints_from_json(obj, i + 1))
    return out
