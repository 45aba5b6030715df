"""Base-model training on a toy corpus.

Gradients come from a float64 torch mirror of the numpy forward pass in
``alnbeam.model``; trained weights are copied back into a numpy ``Model``.
Torch runs single-threaded with deterministic algorithms so a fixed seed
reproduces the same weights bit for bit.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import TrainingError
from .model import LN_EPS, Model, ModelConfig, Vocab, greedy_decode, init_model, positional_encoding, weight_shapes

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    d: int = 32
    n_heads: int = 4
    n_layers: int = 2
    d_ff: int = 64
    steps: int = 1500
    batch_size: int = 64
    lr: float = 3e-3
    beta1: float = 0.9
    beta2: float = 0.98
    seed: int = 0


def _torch():
    import torch

    return torch


class _Mirror:
    """Torch re-statement of the numpy forward pass (batched, padded)."""

    def __init__(self, model: Model):
        torch = _torch()
        self.cfg = model.config
        self.params = {
            n: torch.tensor(model.weights[n], dtype=torch.float64, requires_grad=True) for n in weight_shapes(self.cfg)
        }

    def _ln(self, prefix, x):
        torch = _torch()
        mean = x.mean(-1, keepdim=True)
        var = ((x - mean) ** 2).mean(-1, keepdim=True)
        return (x - mean) / torch.sqrt(var + LN_EPS) * self.params[prefix + ".g"][0] + self.params[prefix + ".b"][0]

    def _attn(self, prefix, xq, xkv, mask):
        torch = _torch()
        p = self.params
        B, Tq, d = xq.shape
        h = self.cfg.n_heads
        split = lambda m: m.reshape(B, m.shape[1], h, d // h).transpose(1, 2)  # noqa: E731
        q, k, v = split(xq @ p[prefix + ".wq"]), split(xkv @ p[prefix + ".wk"]), split(xkv @ p[prefix + ".wv"])
        z = q @ k.transpose(-1, -2) / math.sqrt(d)
        z = z.masked_fill(~mask[:, None], float("-inf"))
        out = torch.softmax(z, dim=-1) @ v
        return out.transpose(1, 2).reshape(B, Tq, d) @ p[prefix + ".wo"]

    def _ffn(self, prefix, x):
        torch = _torch()
        p = self.params
        return torch.relu(x @ p[prefix + ".w1"] + p[prefix + ".b1"][0]) @ p[prefix + ".w2"] + p[prefix + ".b2"][0]

    def logits(self, src, src_mask, tgt_in):
        torch = _torch()
        p = self.params
        d = self.cfg.d
        S, T = src.shape[1], tgt_in.shape[1]
        x = p["src_embed"][src] + torch.tensor(positional_encoding(S, d))
        enc_mask = src_mask[:, None, :].expand(-1, S, -1)
        for i in range(self.cfg.n_layers):
            x = self._ln(f"enc.{i}.ln1", x + self._attn(f"enc.{i}.attn", x, x, enc_mask))
            x = self._ln(f"enc.{i}.ln2", x + self._ffn(f"enc.{i}.ff", x))
        H = x
        y = p["tgt_embed"][tgt_in] + torch.tensor(positional_encoding(T, d))
        causal = torch.tril(torch.ones(T, T, dtype=torch.bool))[None].expand(src.shape[0], -1, -1)
        cross_mask = src_mask[:, None, :].expand(-1, T, -1)
        for i in range(self.cfg.n_layers):
            g = self._ln(f"dec.{i}.ln1", y + self._attn(f"dec.{i}.self", y, y, causal))
            c = self._ln(f"dec.{i}.ln2", g + self._attn(f"dec.{i}.cross", g, H, cross_mask))
            y = self._ln(f"dec.{i}.ln3", c + self._ffn(f"dec.{i}.ff", c))
        return y @ p["out.w"] + p["out.b"][0]

    def export(self, model: Model) -> Model:
        weights = {n: t.detach().numpy().copy() for n, t in self.params.items()}
        return Model(model.config, weights, model.src_vocab, model.tgt_vocab)


def _pad_batch(pairs, bos: int, eos: int):
    torch = _torch()
    B = len(pairs)
    S = max(len(s) for s, _ in pairs)
    T = max(len(t) for _, t in pairs) + 1
    src = torch.zeros(B, S, dtype=torch.long)
    src_mask = torch.zeros(B, S, dtype=torch.bool)
    tgt_in = torch.full((B, T), eos, dtype=torch.long)
    tgt_out = torch.full((B, T), -100, dtype=torch.long)
    for b, (s, t) in enumerate(pairs):
        src[b, :len(s)] = torch.tensor(s)
        src_mask[b, :len(s)] = True
        tgt_in[b, :len(t) + 1] = torch.tensor([bos, *t])
        tgt_out[b, :len(t) + 1] = torch.tensor([*t, eos])
    return src, src_mask, tgt_in, tgt_out


def torch_logits(model: Model, src: Sequence[int], tgt_in: Sequence[int]) -> np.ndarray:
    """Logits from the torch mirror; cross-checks the numpy forward pass."""
    torch = _torch()
    mirror = _Mirror(model)
    with torch.no_grad():
        out = mirror.logits(torch.tensor([list(src)]), torch.ones(1, len(src), dtype=torch.bool),
                            torch.tensor([list(tgt_in)]))
    return out[0].numpy()


def train_toy_model(pairs: Sequence[tuple[Sequence[int], Sequence[int]]], vocab: Vocab,
                    config: TrainConfig | None = None, progress: bool = False) -> Model:
    """Cross-entropy training with Adam over shuffled mini-batches.

    ``pairs`` are (source ids, target ids) without special tokens.
    """
    torch = _torch()
    config = config or TrainConfig()
    if not pairs:
        raise TrainingError("no training pairs")
    mc = ModelConfig(len(vocab), len(vocab), d=config.d, n_heads=config.n_heads, n_layers=config.n_layers,
                     d_ff=config.d_ff, seed=config.seed)
    model = init_model(mc, vocab)
    threads = torch.get_num_threads()
    torch.set_num_threads(1)
    det = torch.are_deterministic_algorithms_enabled()
    torch.use_deterministic_algorithms(True)
    try:
        mirror = _Mirror(model)
        opt = torch.optim.Adam(list(mirror.params.values()), lr=config.lr, betas=(config.beta1, config.beta2))
        rng = np.random.default_rng(config.seed)
        n = len(pairs)
        bs = min(config.batch_size, n)
        order, pos = rng.permutation(n), 0
        for step in range(1, config.steps + 1):
            if pos + bs > n:
                order, pos = rng.permutation(n), 0
            batch = [pairs[i] for i in order[pos:pos + bs]]
            pos += bs
            src, src_mask, tgt_in, tgt_out = _pad_batch(batch, vocab.bos, vocab.eos)
            logits = mirror.logits(src, src_mask, tgt_in)
            loss = torch.nn.functional.cross_entropy(logits.reshape(-1, logits.shape[-1]), tgt_out.reshape(-1),
                                                     ignore_index=-100)
            if not torch.isfinite(loss):
                raise TrainingError(f"loss diverged at step {step}")
            opt.zero_grad()
            loss.backward()
            opt.step()
            if progress and step % 100 == 0:
                log.info("step %d loss %.4f", step, loss.item())
        return mirror.export(model)
    finally:
        torch.set_num_threads(threads)
        torch.use_deterministic_algorithms(det)


def teacher_forced_accuracy(model: Model, pairs) -> float:
    """Fraction of reference next tokens (EOS included) that are the argmax under the gold prefix."""
    from .model import forward_full

    hits = total = 0
    for s, t in pairs:
        logits = forward_full(model, s, [model.tgt_vocab.bos, *t]).logits
        gold = [*t, model.tgt_vocab.eos]
        hits += int(np.sum(np.argmax(logits, axis=1) == np.array(gold)))
        total += len(gold)
    return hits / total


def greedy_token_accuracy(model: Model, pairs, extra_len: int = 5) -> float:
    """Position-wise agreement of greedy output with the reference, over the longer of the two."""
    hits = total = 0
    for s, t in pairs:
        hyp = greedy_decode(model, s, len(t) + extra_len)
        hits += sum(a == b for a, b in zip(hyp, t))
        total += max(len(hyp), len(t))
    return hits / total
