import time

import numpy as np
import pytest

from alnbeam.align import AlignTrainConfig, init_align_head, train_align_head
from alnbeam.constraints import extract_constraints
from alnbeam.corpus import ToySpec, gen_toy_corpus
from alnbeam.model import ModelConfig, Vocab, greedy_decode, init_model

WORDS = [f"w{i}" for i in range(6)]


def tiny_model(seed=0, d=8, n_heads=2, n_layers=2, d_ff=16, words=WORDS, scale=None):
    vocab = Vocab(["<bos>", "<eos>", *words])
    model = init_model(ModelConfig(len(vocab), len(vocab), d=d, n_heads=n_heads, n_layers=n_layers, d_ff=d_ff,
                                   seed=seed), vocab)
    if scale is not None:
        for k in model.weights:
            if not k.endswith(".g") and not k.endswith(".b"):
                model.weights[k] = model.weights[k] * scale
    return model


@pytest.fixture
def model():
    return tiny_model()


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


class ToyWorld:
    """A trained base model plus alignment heads on the ambiguous toy corpus, built once per session."""

    def __init__(self):
        from alnbeam.training import TrainConfig, train_toy_model

        t0 = time.perf_counter()
        self.corpus = gen_toy_corpus(ToySpec(ambiguity=0.5, n_sentences=2200, seed=0))
        self.train, self.heldout = self.corpus.split(200)
        self.model = train_toy_model(self.train.pairs(), self.corpus.vocab, TrainConfig(steps=1500))
        pairs = self.train.pairs()[:1000]
        gold = self.train.gold[:1000]
        cfg = AlignTrainConfig(steps=300, batch_size=200)
        self.heads = {kind: train_align_head(self.model, pairs, gold, kind, cfg)
                      for kind in ("post", "prior", "shift_aet")}
        self.build_seconds = time.perf_counter() - t0
        self._suite = None

    def constraint_suite(self):
        """(src ids, ref ids, constraints) for the 200 held-out sentences."""
        if self._suite is None:
            out = []
            for i, (s, t) in enumerate(self.heldout.pairs()):
                g = greedy_decode(self.model, s, len(t) + 10)
                out.append((s, t, extract_constraints(self.heldout.gold[i], s, t, g, rng_seed=i)))
            self._suite = out
        return self._suite


_WORLD = None


@pytest.fixture(scope="session")
def toy_world():
    global _WORLD
    if _WORLD is None:
        _WORLD = ToyWorld()
    return _WORLD


@pytest.fixture
def post_head(model):
    return init_align_head(model, "post", seed=3, scale=0.5)
