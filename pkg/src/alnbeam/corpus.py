"""Synthetic bilingual corpus with gold word alignments.

Source sentences are drawn without repeated words from a toy lexicon.  The
target is a word-by-word translation followed by a deterministic reordering
rule (``verb-final`` moves the single verb to the end, ``reverse`` mirrors
the sentence).  An ``ambiguity`` fraction of source word types are
*ambiguous*: each occurrence picks one of two target words at random and,
with probability one half, trades places with the following target word.
The target word still identifies its source word, but the prefix alone no
longer tells which source word comes next, so knowing the emitted token
helps alignment.  With ``ambiguity=0`` every sentence has exactly one
translation and a one-to-one alignment.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .align import Alignment, read_pharaoh, write_pharaoh
from .errors import ConfigError, DataError
from .model import SPECIALS, Vocab

REORDER_RULES = ("none", "verb-final", "reverse")


@dataclass(frozen=True)
class ToySpec:
    lexicon_size: int = 24
    ambiguity: float = 0.5
    reorder: str = "verb-final"
    n_sentences: int = 2000
    seed: int = 0
    min_len: int = 4
    max_len: int = 8
    verb_fraction: float = 0.25
    identity: bool = False           # copy task: target words are the source words

    def validate(self):
        if not 0.0 <= self.ambiguity <= 1.0:
            raise ConfigError(f"ambiguity {self.ambiguity} outside [0, 1]")
        if self.reorder not in REORDER_RULES:
            raise ConfigError(f"unknown reorder rule {self.reorder!r}")
        if not 1 <= self.min_len <= self.max_len:
            raise ConfigError("need 1 <= min_len <= max_len")
        if self.n_sentences < 0:
            raise ConfigError("n_sentences must be non-negative")
        n_verbs = self.n_verbs
        if self.reorder == "verb-final" and (n_verbs < 1 or self.max_len < 2):
            raise ConfigError("verb-final needs at least one verb and sentences of length >= 2")
        if self.lexicon_size - n_verbs < self.max_len - (1 if self.reorder == "verb-final" else 0):
            raise ConfigError("lexicon too small for sentences without repeated words")

    @property
    def n_verbs(self) -> int:
        if self.reorder != "verb-final":
            return 0
        return max(1, round(self.verb_fraction * self.lexicon_size))


@dataclass
class ToyCorpus:
    src: list[list[str]]
    tgt: list[list[str]]
    gold: list[Alignment]
    vocab: Vocab
    lexicon: dict[str, list[str]]
    spec: ToySpec | None = None

    def __len__(self):
        return len(self.src)

    def pairs(self) -> list[tuple[list[int], list[int]]]:
        return [(self.vocab.encode(s), self.vocab.encode(t)) for s, t in zip(self.src, self.tgt)]

    def split(self, n_heldout: int) -> tuple["ToyCorpus", "ToyCorpus"]:
        """(train, held-out); the held-out part is the last ``n_heldout`` sentences."""
        if not 0 <= n_heldout <= len(self):
            raise DataError(f"cannot hold out {n_heldout} of {len(self)} sentences")
        cut = len(self) - n_heldout
        part = lambda a, b: ToyCorpus(self.src[a:b], self.tgt[a:b], self.gold[a:b], self.vocab, self.lexicon, self.spec)  # noqa: E731
        return part(0, cut), part(cut, len(self))

    def subset(self, n: int) -> "ToyCorpus":
        return ToyCorpus(self.src[:n], self.tgt[:n], self.gold[:n], self.vocab, self.lexicon, self.spec)


def _src_word(i: int) -> str:
    return f"s{i:02d}"


def gen_toy_corpus(spec: ToySpec) -> ToyCorpus:
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    n = spec.lexicon_size
    src_words = [_src_word(i) for i in range(n)]
    verbs = src_words[n - spec.n_verbs:] if spec.n_verbs else []
    nouns = src_words[: n - spec.n_verbs]
    if spec.identity:
        lexicon = {w: [w] for w in src_words}
        ambiguous = set()
    else:
        n_amb = round(spec.ambiguity * n)
        ambiguous = {src_words[i] for i in rng.choice(n, size=n_amb, replace=False)} if n_amb else set()
        lexicon = {w: ["t" + w[1:]] + (["t" + w[1:] + "b"] if w in ambiguous else []) for w in src_words}

    tgt_words = sorted({t for ts in lexicon.values() for t in ts} - set(src_words))
    vocab = Vocab(list(SPECIALS) + src_words + tgt_words)

    src_out, tgt_out, gold = [], [], []
    for _ in range(spec.n_sentences):
        length = int(rng.integers(spec.min_len, spec.max_len + 1))
        if spec.reorder == "verb-final":
            length = max(length, 2)
            words = [nouns[i] for i in rng.choice(len(nouns), size=length - 1, replace=False)]
            vpos = int(rng.integers(1, length)) if length > 2 else 1
            words.insert(vpos, verbs[int(rng.integers(len(verbs)))])
        else:
            words = [src_words[i] for i in rng.choice(n, size=length, replace=False)]
        # target order as a list of source positions
        order = list(range(length))
        if spec.reorder == "verb-final":
            order = [i for i in order if words[i] not in verbs] + [i for i in order if words[i] in verbs]
        elif spec.reorder == "reverse":
            order = order[::-1]
        i = 0
        while i < length - 1:
            if words[order[i]] in ambiguous and rng.random() < 0.5:
                order[i], order[i + 1] = order[i + 1], order[i]
                i += 2
            else:
                i += 1
        tgt = []
        for s in order:
            options = lexicon[words[s]]
            tgt.append(options[int(rng.integers(len(options)))] if len(options) > 1 else options[0])
        src_out.append(words)
        tgt_out.append(tgt)
        gold.append(Alignment.of((s, t) for t, s in enumerate(order)))
    return ToyCorpus(src_out, tgt_out, gold, vocab, lexicon, spec)


def save_corpus(corpus: ToyCorpus, outdir):
    """Write src.txt, tgt.txt, gold.align, vocab.txt and lexicon.json."""
    out = Path(outdir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "src.txt").write_text("".join(" ".join(s) + "\n" for s in corpus.src), encoding="utf-8")
    (out / "tgt.txt").write_text("".join(" ".join(t) + "\n" for t in corpus.tgt), encoding="utf-8")
    write_pharaoh(out / "gold.align", corpus.gold)
    corpus.vocab.save(out / "vocab.txt")
    meta = {"lexicon": corpus.lexicon, "spec": asdict(corpus.spec) if corpus.spec else None}
    (out / "lexicon.json").write_text(json.dumps(meta, sort_keys=True), encoding="utf-8")


def read_lines(path) -> list[list[str]]:
    lines = Path(path).read_text(encoding="utf-8").split("\n")
    if lines and lines[-1] == "":
        lines.pop()
    return [line.split() for line in lines]


def load_corpus(indir) -> ToyCorpus:
    d = Path(indir)
    src, tgt = read_lines(d / "src.txt"), read_lines(d / "tgt.txt")
    gold = read_pharaoh(d / "gold.align") if (d / "gold.align").exists() else [Alignment() for _ in src]
    if not (len(src) == len(tgt) == len(gold)):
        raise DataError(f"{d}: {len(src)} source, {len(tgt)} target and {len(gold)} alignment lines")
    vocab = Vocab.load(d / "vocab.txt")
    lexicon, spec = {}, None
    if (d / "lexicon.json").exists():
        meta = json.loads((d / "lexicon.json").read_text(encoding="utf-8"))
        lexicon = meta.get("lexicon", {})
        spec = ToySpec(**meta["spec"]) if meta.get("spec") else None
    return ToyCorpus(src, tgt, gold, vocab, lexicon, spec)


def is_valid_translation(corpus: ToyCorpus, src: Sequence[str], hyp: Sequence[str]) -> bool:
    """Whether ``hyp`` uses each source word's translation exactly once (order ignored)."""
    if len(src) != len(hyp):
        return False
    remaining = list(hyp)
    for w in src:
        hit = next((t for t in corpus.lexicon.get(w, []) if t in remaining), None)
        if hit is None:
            return False
        remaining.remove(hit)
    return True
