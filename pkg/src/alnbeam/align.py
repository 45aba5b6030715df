"""Online alignment extraction, the trainable alignment sub-layer, and alignment evaluation.

Five extractors share one convention: for target step ``t`` (0-based, the
step whose logits predict ``y_t``) they return a distribution over source
positions.

* ``naive_att``  - head-averaged cross-attention at step ``t``.
* ``shift_att``  - the same quantity at step ``t + 1``, after feeding ``y_t``.
* ``prior_align`` - a learned attention sub-layer queried with ``g_t`` only.
* ``posterior_align`` - the learned sub-layer queried with ``[g_t, e(y_t)]``;
  synchronous with emitting ``y_t``.
* ``shift_aet`` - the prior-style sub-layer queried with ``g_{t+1}``.

The learned sub-layers read the penultimate decoder layer by default.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import ConfigError, FormatError, StateError, SupervisionError, UnsupportedVersionError
from .model import Model, ModelState, decode_step, forward_full, read_json, _read_tensor, _tensor_payload
from .numerics import _accumulate, bmatmul, softmax_rows

Link = tuple[int, int]

HEAD_FORMAT = "alnbeam-align-head"
HEAD_VERSION = 1
HEAD_KINDS = ("post", "prior", "shift_aet")


# -- alignment sets ----------------------------------------------------------

@dataclass(frozen=True)
class Alignment:
    """(source index, target index) links.

    ``possible`` always contains ``sure``.  Predicted alignments carry all
    their links in both sets.
    """

    sure: frozenset = frozenset()
    possible: frozenset = frozenset()

    def __post_init__(self):
        sure = frozenset((int(s), int(t)) for s, t in self.sure)
        object.__setattr__(self, "sure", sure)
        object.__setattr__(self, "possible", sure | frozenset((int(s), int(t)) for s, t in self.possible))

    @classmethod
    def of(cls, links: Iterable[Link]) -> "Alignment":
        return cls(frozenset(links))

    @property
    def links(self) -> frozenset:
        return self.possible

    def transpose(self) -> "Alignment":
        return Alignment(frozenset((t, s) for s, t in self.sure), frozenset((t, s) for s, t in self.possible))

    def __len__(self):
        return len(self.possible)


def format_pharaoh(a: Alignment) -> str:
    items = [f"{s}-{t}" if (s, t) in a.sure else f"{s}?{t}" for s, t in sorted(a.possible)]
    return " ".join(items)


def parse_pharaoh(line: str, lineno: int | None = None) -> Alignment:
    sure, possible = set(), set()
    for item in line.split():
        sep = "-" if "-" in item else "?"
        parts = item.split(sep)
        try:
            s, t = int(parts[0]), int(parts[1])
            if len(parts) != 2 or s < 0 or t < 0:
                raise ValueError
        except (ValueError, IndexError):
            where = f" on line {lineno}" if lineno is not None else ""
            raise FormatError(f"bad alignment link {item!r}{where}") from None
        (sure if sep == "-" else possible).add((s, t))
    return Alignment(frozenset(sure), frozenset(possible))


def read_pharaoh(path) -> list[Alignment]:
    lines = Path(path).read_text(encoding="utf-8").split("\n")
    if lines and lines[-1] == "":
        lines.pop()
    return [parse_pharaoh(line, i + 1) for i, line in enumerate(lines)]


def write_pharaoh(path, alignments: Iterable[Alignment]):
    Path(path).write_text("".join(format_pharaoh(a) + "\n" for a in alignments), encoding="utf-8")


def aer(pred: Alignment, gold: Alignment) -> float:
    """Alignment error rate; 0.0 when both the prediction and the sure set are empty."""
    return corpus_aer([pred], [gold])


def corpus_aer(preds: Sequence[Alignment], golds: Sequence[Alignment]) -> float:
    if len(preds) != len(golds):
        raise ValueError(f"{len(preds)} predicted vs {len(golds)} gold alignments")
    hit_p = hit_s = n_a = n_s = 0
    for pred, gold in zip(preds, golds):
        a = pred.possible
        hit_p += len(a & gold.possible)
        hit_s += len(a & gold.sure)
        n_a += len(a)
        n_s += len(gold.sure)
    if n_a + n_s == 0:
        return 0.0
    return 1.0 - (hit_p + hit_s) / (n_a + n_s)


def project_subword_to_word(a: Alignment, src_map: Sequence[int], tgt_map: Sequence[int]) -> Alignment:
    """Collapse piece-level links to word level; ``*_map[i]`` is the word of piece ``i``."""
    sure = {(src_map[s], tgt_map[t]) for s, t in a.sure}
    possible = {(src_map[s], tgt_map[t]) for s, t in a.possible}
    return Alignment(frozenset(sure), frozenset(possible))


_NEIGHBOURS = ((-1, 0), (0, -1), (1, 0), (0, 1), (-1, -1), (-1, 1), (1, -1), (1, 1))


def symmetrize_grow_diag(fwd: Alignment, rev: Alignment, final_and: bool = True,
                         src_len: int | None = None, tgt_len: int | None = None) -> Alignment:
    """grow-diag(-final-and) symmetrization.

    Both inputs use (source, target) indices.  Grows the intersection with
    8-neighbours from the union that touch an uncovered source or target
    position until nothing changes, then (``final_and``) adds union links
    whose source and target are both still uncovered, forward links first.
    """
    f, r = fwd.links, rev.links
    union = f | r
    if src_len is None:
        src_len = 1 + max((s for s, _ in union), default=-1)
    if tgt_len is None:
        tgt_len = 1 + max((t for _, t in union), default=-1)
    out = set(f & r)
    covered_s = {s for s, _ in out}
    covered_t = {t for _, t in out}

    def add(s, t):
        out.add((s, t))
        covered_s.add(s)
        covered_t.add(t)

    changed = True
    while changed:
        changed = False
        for s in range(src_len):
            for t in range(tgt_len):
                if (s, t) not in out:
                    continue
                for ds, dt in _NEIGHBOURS:
                    ns, nt = s + ds, t + dt
                    if (ns, nt) in union and (ns, nt) not in out and (ns not in covered_s or nt not in covered_t):
                        add(ns, nt)
                        changed = True
    if final_and:
        for links in (f, r):
            for s in range(src_len):
                for t in range(tgt_len):
                    if (s, t) in links and s not in covered_s and t not in covered_t:
                        add(s, t)
    return Alignment.of(out)


# -- attention-based extractors ---------------------------------------------

def _head_mean(rows: np.ndarray) -> np.ndarray:
    """Average over the leading (head) axis, summing heads in order."""
    return _accumulate(rows, axis=0) / rows.shape[0]


def hard_align(dist: Sequence[float]) -> int:
    """Argmax; ties go to the lowest source index."""
    return int(np.argmax(np.asarray(dist)))


def _check_step(state: ModelState, layer: int, t: int):
    if not 0 <= layer < len(state.cross_attn):
        raise IndexError(f"layer {layer} out of range (model has {len(state.cross_attn)})")
    if not 0 <= t < state.n_steps:
        raise IndexError(f"step {t} not decoded yet ({state.n_steps} steps available)")


def naive_att(state: ModelState, layer: int, t: int) -> np.ndarray:
    _check_step(state, layer, t)
    return _head_mean(state.cross_attn[layer][t])


def advance_with(model: Model, state: ModelState, t: int, y_t: int) -> ModelState:
    """A state holding step ``t + 1`` computed from input ``y_t``; reuses the cache when it already matches."""
    if state.n_steps > t + 1 and state.inputs[t + 1] == y_t:
        return state
    if state.n_steps < t + 1:
        raise StateError(f"step {t} not decoded yet")
    _, nxt = decode_step(model, state.truncate(t + 1), y_t)
    return nxt


def shift_att(model: Model, state: ModelState, layer: int, t: int, y_t: int) -> np.ndarray:
    _check_step(state, layer, t)
    return naive_att(advance_with(model, state, t, y_t), layer, t + 1)


@dataclass
class AlignHead:
    """Learned alignment attention sub-layer.

    ``wq`` is (heads, query width, d_head) and ``wk`` is (heads, d, d_head);
    the query width is 2d for ``post`` and d for ``prior``/``shift_aet``.
    """

    kind: str
    layer: int
    wq: np.ndarray
    wk: np.ndarray
    loss_history: list = field(default_factory=list, compare=False)

    def __post_init__(self):
        if self.kind not in HEAD_KINDS:
            raise ConfigError(f"unknown alignment head kind {self.kind!r}")
        d = self.wk.shape[1]
        if self.wq.shape[1] != (2 * d if self.kind == "post" else d) or self.wq.shape[::2] != self.wk.shape[::2]:
            raise ConfigError(f"inconsistent head shapes {self.wq.shape} / {self.wk.shape}")

    @property
    def n_heads(self) -> int:
        return self.wq.shape[0]

    @property
    def d(self) -> int:
        return self.wk.shape[1]

    @property
    def n_params(self) -> int:
        return self.wq.size + self.wk.size


def init_align_head(model: Model, kind: str = "post", seed: int = 0, scale: float = 0.1,
                    layer: int | None = None) -> AlignHead:
    cfg = model.config
    layer = model.penultimate if layer is None else layer
    if not 0 <= layer < cfg.n_layers:
        raise ConfigError(f"layer {layer} out of range")
    dq = 2 * cfg.d if kind == "post" else cfg.d
    rng = np.random.default_rng(seed)
    wq = rng.uniform(-scale, scale, size=(cfg.n_heads, dq, cfg.d_head))
    wk = rng.uniform(-scale, scale, size=(cfg.n_heads, cfg.d, cfg.d_head))
    return AlignHead(kind, layer, wq, wk)


def head_distribution(head: AlignHead, queries: np.ndarray, H: np.ndarray) -> np.ndarray:
    """(m, query width) x (S, d) -> (m, S) head-averaged alignment distributions."""
    q = bmatmul(queries[None], head.wq)
    k = bmatmul(H[None], head.wk)
    p = softmax_rows(bmatmul(q, k.transpose(0, 2, 1)) * (1.0 / math.sqrt(head.d)))
    return _head_mean(p)


def _g(state: ModelState, layer: int, t: int) -> np.ndarray:
    if not 0 <= t < state.n_steps or not state.g:
        raise StateError(f"decoder state for step {t} is not cached")
    return state.g[layer][t]


def post_queries(head: AlignHead, model: Model, state: ModelState, t: int, ys: Sequence[int]) -> np.ndarray:
    g = _g(state, head.layer, t)
    e = model.weights["tgt_embed"][list(ys)]
    return np.concatenate([np.repeat(g, len(ys), axis=0), e], axis=1)


def posterior_align(head: AlignHead, model: Model, state: ModelState, t: int, y_t: int) -> np.ndarray:
    if head.kind != "post":
        raise ConfigError(f"posterior_align needs a 'post' head, got {head.kind!r}")
    return head_distribution(head, post_queries(head, model, state, t, [y_t]), state.H)[0]


def posterior_align_many(head: AlignHead, model: Model, state: ModelState, t: int, ys: Sequence[int]) -> np.ndarray:
    """``posterior_align`` for several candidate tokens at once; one row per token."""
    return head_distribution(head, post_queries(head, model, state, t, ys), state.H)


def prior_align(head: AlignHead, model: Model, state: ModelState, t: int) -> np.ndarray:
    if head.kind == "post":
        raise ConfigError("prior_align needs a query of width d")
    return head_distribution(head, _g(state, head.layer, t), state.H)[0]


def shift_aet(head: AlignHead, model: Model, state: ModelState, t: int, y_t: int) -> np.ndarray:
    if head.kind == "post":
        raise ConfigError("shift_aet needs a query of width d")
    nxt = advance_with(model, state, t, y_t)
    return head_distribution(head, _g(nxt, head.layer, t + 1), nxt.H)[0]


# -- training ---------------------------------------------------------------

@dataclass
class AlignTrainConfig:
    steps: int = 300
    lr: float = 0.02
    batch_size: int = 0          # 0 means full batch
    optimizer: str = "adam"      # "adam" or "sgd"
    beta1: float = 0.9
    beta2: float = 0.98
    eps: float = 1e-8
    seed: int = 0
    init_scale: float = 0.1


@dataclass
class AlignBatch:
    """Padded per-sentence features for the alignment objective."""

    queries: np.ndarray   # B x T x query width
    H: np.ndarray         # B x S x d
    sup: np.ndarray       # B x T x S (0/1)
    src_mask: np.ndarray  # B x S
    tgt_len: np.ndarray   # B

    def subset(self, idx) -> "AlignBatch":
        return AlignBatch(self.queries[idx], self.H[idx], self.sup[idx], self.src_mask[idx], self.tgt_len[idx])


def sentence_queries(kind: str, model: Model, src, tgt, layer: int) -> tuple[np.ndarray, np.ndarray]:
    """Query rows for target positions 0..T-1 and the encoder output, from a frozen base model."""
    fp = forward_full(model, src, [model.tgt_vocab.bos, *tgt])
    g = fp.g[layer]
    n = len(tgt)
    if kind == "post":
        q = np.concatenate([g[:n], model.weights["tgt_embed"][list(tgt)]], axis=1)
    elif kind == "prior":
        q = g[:n]
    elif kind == "shift_aet":
        q = g[1:n + 1]
    else:
        raise ConfigError(f"unknown alignment head kind {kind!r}")
    return q, fp.H


def supervision_matrix(a: Alignment, src_len: int, tgt_len: int) -> np.ndarray:
    """T x S 0/1 matrix of sure links."""
    m = np.zeros((tgt_len, src_len))
    for s, t in a.sure:
        if not (0 <= s < src_len and 0 <= t < tgt_len):
            raise SupervisionError(f"link {s}-{t} outside a {src_len}x{tgt_len} sentence pair")
        m[t, s] = 1.0
    return m


def build_batch(features: Sequence[tuple[np.ndarray, np.ndarray]], sups: Sequence[np.ndarray]) -> AlignBatch:
    if len(features) != len(sups):
        raise SupervisionError(f"{len(features)} sentences but {len(sups)} supervision matrices")
    if not features:
        raise SupervisionError("no training sentences")
    B = len(features)
    T = max(q.shape[0] for q, _ in features)
    S = max(h.shape[0] for _, h in features)
    dq, d = features[0][0].shape[1], features[0][1].shape[1]
    queries, H = np.zeros((B, T, dq)), np.zeros((B, S, d))
    sup, src_mask, tgt_len = np.zeros((B, T, S)), np.zeros((B, S), dtype=bool), np.zeros(B)
    for b, ((q, h), m) in enumerate(zip(features, sups)):
        if m.shape != (q.shape[0], h.shape[0]):
            raise SupervisionError(f"sentence {b}: supervision {m.shape} vs lengths {(q.shape[0], h.shape[0])}")
        queries[b, :q.shape[0]] = q
        H[b, :h.shape[0]] = h
        sup[b, :m.shape[0], :m.shape[1]] = m
        src_mask[b, :h.shape[0]] = True
        tgt_len[b] = q.shape[0]
    return AlignBatch(queries, H, sup, src_mask, tgt_len)


def align_loss_and_grad(wq: np.ndarray, wk: np.ndarray, batch: AlignBatch, with_grad: bool = True):
    """Negative supervised log-likelihood, averaged over sentences, with analytic gradients.

    Per sentence the loss is ``-(1/T) sum_ij S_ij log P_ij`` where ``P`` is
    the head-averaged softmax of ``q K^T / sqrt(d)``.
    """
    n_heads, d = wq.shape[0], wk.shape[1]
    scale = 1.0 / math.sqrt(d)
    B = batch.queries.shape[0]
    q = bmatmul(batch.queries[:, None], wq[None])          # B x h x T x dn
    k = bmatmul(batch.H[:, None], wk[None])                # B x h x S x dn
    z = bmatmul(q, k.transpose(0, 1, 3, 2)) * scale        # B x h x T x S
    z = np.where(batch.src_mask[:, None, None, :], z, -np.inf)
    p = softmax_rows(z)
    P = _accumulate(p, axis=1) / n_heads                   # B x T x S
    on = batch.sup > 0
    logP = np.log(np.where(on, P, 1.0))
    per_sent = -np.sum(batch.sup * logP, axis=(1, 2)) / np.maximum(batch.tgt_len, 1)
    loss = float(np.mean(per_sent))
    if not with_grad:
        return loss, None, None
    G = np.where(on, -batch.sup / np.where(on, P, 1.0), 0.0) / (B * np.maximum(batch.tgt_len, 1))[:, None, None]
    dp = G[:, None] / n_heads
    dz = p * (dp - np.sum(dp * p, axis=-1, keepdims=True)) * scale
    dq = bmatmul(dz, k)                                    # B x h x T x dn
    dk = bmatmul(dz.transpose(0, 1, 3, 2), q)              # B x h x S x dn
    gq = np.sum(bmatmul(batch.queries.transpose(0, 2, 1)[:, None], dq), axis=0)
    gk = np.sum(bmatmul(batch.H.transpose(0, 2, 1)[:, None], dk), axis=0)
    return loss, gq, gk


def train_align_head(model: Model, pairs: Sequence[tuple[Sequence[int], Sequence[int]]],
                     supervision: Sequence[Alignment], kind: str = "post",
                     config: AlignTrainConfig | None = None, layer: int | None = None) -> AlignHead:
    """Fit a fresh alignment head on (src, tgt) id pairs with the base model frozen."""
    config = config or AlignTrainConfig()
    head = init_align_head(model, kind, seed=config.seed, scale=config.init_scale, layer=layer)
    feats = [sentence_queries(kind, model, s, t, head.layer) for s, t in pairs]
    if len(supervision) != len(feats):
        raise SupervisionError(f"{len(feats)} sentence pairs but {len(supervision)} supervision alignments")
    sups = [supervision_matrix(a, len(s), len(t)) for a, (s, t) in zip(supervision, pairs)]
    batch = build_batch(feats, sups)
    rng = np.random.default_rng(config.seed)
    n = len(feats)
    bs = config.batch_size or n
    params = [head.wq, head.wk]
    m = [np.zeros_like(w) for w in params]
    v = [np.zeros_like(w) for w in params]
    history = []
    order = np.arange(n)
    pos = n
    for step in range(1, config.steps + 1):
        if bs >= n:
            sub = batch
        else:
            if pos + bs > n:
                order, pos = rng.permutation(n), 0
            sub = batch.subset(np.sort(order[pos:pos + bs]))
            pos += bs
        loss, gq, gk = align_loss_and_grad(params[0], params[1], sub)
        if not math.isfinite(loss):
            from .errors import TrainingError
            raise TrainingError(f"alignment loss diverged at step {step}")
        history.append(loss)
        for i, g in enumerate((gq, gk)):
            if config.optimizer == "sgd":
                params[i] = params[i] - config.lr * g
            elif config.optimizer == "adam":
                m[i] = config.beta1 * m[i] + (1 - config.beta1) * g
                v[i] = config.beta2 * v[i] + (1 - config.beta2) * g * g
                mhat = m[i] / (1 - config.beta1 ** step)
                vhat = v[i] / (1 - config.beta2 ** step)
                params[i] = params[i] - config.lr * mhat / (np.sqrt(vhat) + config.eps)
            else:
                raise ConfigError(f"unknown optimizer {config.optimizer!r}")
    final, _, _ = align_loss_and_grad(params[0], params[1], batch, with_grad=False)
    history.append(final)
    return AlignHead(kind, head.layer, params[0], params[1], history)


def save_align_head(head: AlignHead, path):
    tensors = {}
    for n in range(head.n_heads):
        tensors[f"wq.{n}"] = _tensor_payload(head.wq[n])
        tensors[f"wk.{n}"] = _tensor_payload(head.wk[n])
    obj = {"format": HEAD_FORMAT, "version": HEAD_VERSION, "kind": head.kind, "layer": head.layer,
           "n_heads": head.n_heads, "final_loss": head.loss_history[-1] if head.loss_history else None,
           "tensors": tensors}
    Path(path).write_text(json.dumps(obj), encoding="utf-8")


def load_align_head(path) -> AlignHead:
    obj = read_json(path, HEAD_FORMAT)
    if obj.get("version") != HEAD_VERSION:
        raise UnsupportedVersionError(f"{path}: unsupported alignment head version {obj.get('version')!r}")
    try:
        n_heads, tensors = int(obj["n_heads"]), obj["tensors"]
        wq = np.stack([_read_tensor(f"wq.{n}", tensors.get(f"wq.{n}")) for n in range(n_heads)])
        wk = np.stack([_read_tensor(f"wk.{n}", tensors.get(f"wk.{n}")) for n in range(n_heads)])
        return AlignHead(obj["kind"], int(obj["layer"]), wq, wk)
    except (KeyError, TypeError, ValueError, ConfigError) as e:
        raise FormatError(f"{path}: malformed alignment head ({e})") from None


# -- whole-sentence extraction ----------------------------------------------

METHODS = ("naive", "shift", "prior", "shift_aet", "postaln")


def forced_alignment(method: str, model: Model, src: Sequence[int], tgt: Sequence[int],
                     head: AlignHead | None = None, layer: int | None = None) -> Alignment:
    """Online alignment of a fixed target: one hard link per target token."""
    from .model import teacher_force

    if len(tgt) == 0:
        return Alignment()
    layer = model.penultimate if layer is None else layer
    state = teacher_force(model, src, tgt)
    n = len(tgt)
    if method == "naive":
        dists = [naive_att(state, layer, t) for t in range(n)]
    elif method == "shift":
        dists = [shift_att(model, state, layer, t, tgt[t]) for t in range(n)]
    else:
        if head is None:
            raise ConfigError(f"method {method!r} needs a trained alignment head")
        if method == "postaln":
            g = np.concatenate([_g(state, head.layer, t) for t in range(n)])
            q = np.concatenate([g, model.weights["tgt_embed"][list(tgt)]], axis=1)
        elif method == "prior":
            q = np.concatenate([_g(state, head.layer, t) for t in range(n)])
        elif method == "shift_aet":
            q = np.concatenate([_g(state, head.layer, t + 1) for t in range(n)])
        else:
            raise ConfigError(f"unknown alignment method {method!r}")
        if (head.kind == "post") != (method == "postaln"):
            raise ConfigError(f"head of kind {head.kind!r} cannot serve method {method!r}")
        dists = list(head_distribution(head, q, state.H))
    return Alignment.of((hard_align(p), t) for t, p in enumerate(dists))
