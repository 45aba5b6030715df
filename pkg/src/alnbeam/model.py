"""A small post-norm transformer encoder-decoder.

The forward pass keeps every quantity alignment extraction needs: the
encoder output ``H``, each decoder layer's self-attention sub-layer output
``g`` per step, each layer/head cross-attention distribution per step, and
the next-token logits.

Attention scores are scaled by ``1/sqrt(d)`` (model width), not by the
per-head width.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import ConfigError, FormatError, StateError, UnsupportedVersionError, VocabularyError
from .numerics import bmatmul, checksum, layer_norm, matmul, softmax_rows

BOS = "<bos>"
EOS = "<eos>"
SPECIALS = (BOS, EOS)

MODEL_FORMAT = "alnbeam-model"
MODEL_VERSION = 1
LN_EPS = 1e-5


class Vocab:
    """Token inventory; index is the position in ``tokens``."""

    def __init__(self, tokens: Sequence[str]):
        self.tokens = list(tokens)
        self.index = {t: i for i, t in enumerate(self.tokens)}
        if len(self.index) != len(self.tokens):
            raise ConfigError("duplicate token in vocabulary")

    def __len__(self):
        return len(self.tokens)

    def __contains__(self, tok):
        return tok in self.index

    def __eq__(self, other):
        return isinstance(other, Vocab) and self.tokens == other.tokens

    def encode(self, toks: Iterable[str]) -> list[int]:
        out = []
        for t in toks:
            try:
                out.append(self.index[t])
            except KeyError:
                raise VocabularyError(f"unknown token {t!r}") from None
        return out

    def decode(self, ids: Iterable[int]) -> list[str]:
        return [self.tokens[i] for i in ids]

    @property
    def bos(self) -> int:
        return self.index[BOS]

    @property
    def eos(self) -> int:
        return self.index[EOS]

    def save(self, path):
        Path(path).write_text("".join(t + "\n" for t in self.tokens), encoding="utf-8")

    @classmethod
    def load(cls, path) -> "Vocab":
        lines = Path(path).read_text(encoding="utf-8").split("\n")
        if lines and lines[-1] == "":
            lines.pop()
        return cls(lines)


@dataclass(frozen=True)
class ModelConfig:
    src_vocab: int
    tgt_vocab: int
    d: int = 32
    n_heads: int = 4
    n_layers: int = 2
    d_ff: int = 64
    seed: int = 0

    @property
    def d_head(self) -> int:
        return self.d // self.n_heads

    def validate(self):
        if self.d <= 0 or self.n_heads <= 0 or self.d % self.n_heads:
            raise ConfigError(f"d={self.d} is not divisible into {self.n_heads} heads")
        if self.n_layers < 2:
            raise ConfigError("need at least two decoder layers (alignment reads the penultimate one)")
        if self.d_ff <= 0 or self.src_vocab <= 0 or self.tgt_vocab <= 0:
            raise ConfigError("widths and vocabulary sizes must be positive")


def _attn_names(prefix):
    return [f"{prefix}.{w}" for w in ("wq", "wk", "wv", "wo")]


def _ln_names(prefix):
    return [f"{prefix}.g", f"{prefix}.b"]


def _ff_names(prefix):
    return [f"{prefix}.w1", f"{prefix}.b1", f"{prefix}.w2", f"{prefix}.b2"]


def weight_shapes(cfg: ModelConfig) -> dict[str, tuple[int, int]]:
    """Name -> shape for every tensor, in canonical order."""
    d, ff = cfg.d, cfg.d_ff
    shapes: dict[str, tuple[int, int]] = {"src_embed": (cfg.src_vocab, d), "tgt_embed": (cfg.tgt_vocab, d)}

    def attn(prefix):
        for n in _attn_names(prefix):
            shapes[n] = (d, d)

    def ln(prefix):
        for n in _ln_names(prefix):
            shapes[n] = (1, d)

    def ffn(prefix):
        w1, b1, w2, b2 = _ff_names(prefix)
        shapes[w1], shapes[b1], shapes[w2], shapes[b2] = (d, ff), (1, ff), (ff, d), (1, d)

    for i in range(cfg.n_layers):
        attn(f"enc.{i}.attn")
        ln(f"enc.{i}.ln1")
        ffn(f"enc.{i}.ff")
        ln(f"enc.{i}.ln2")
    for i in range(cfg.n_layers):
        attn(f"dec.{i}.self")
        ln(f"dec.{i}.ln1")
        attn(f"dec.{i}.cross")
        ln(f"dec.{i}.ln2")
        ffn(f"dec.{i}.ff")
        ln(f"dec.{i}.ln3")
    shapes["out.w"] = (d, cfg.tgt_vocab)
    shapes["out.b"] = (1, cfg.tgt_vocab)
    return shapes


@dataclass
class Model:
    config: ModelConfig
    weights: dict[str, np.ndarray]
    src_vocab: Vocab
    tgt_vocab: Vocab

    def __getitem__(self, name):
        return self.weights[name]

    def checksum(self) -> str:
        return checksum(self.weights[n] for n in weight_shapes(self.config))

    @property
    def penultimate(self) -> int:
        """0-based index of the penultimate decoder layer."""
        return self.config.n_layers - 2


def init_model(config: ModelConfig, src_vocab: Vocab, tgt_vocab: Vocab | None = None) -> Model:
    """Seeded initialisation.

    Projection, embedding and feed-forward matrices are uniform in
    [-0.1, 0.1]; biases start at zero and layer-norm gains at one.
    """
    tgt_vocab = src_vocab if tgt_vocab is None else tgt_vocab
    config.validate()
    if len(src_vocab) != config.src_vocab or len(tgt_vocab) != config.tgt_vocab:
        raise ConfigError("vocabulary sizes disagree with the config")
    if BOS not in tgt_vocab or EOS not in tgt_vocab:
        raise ConfigError("target vocabulary needs <bos> and <eos>")
    rng = np.random.default_rng(config.seed)
    weights = {}
    for name, shape in weight_shapes(config).items():
        leaf = name.rsplit(".", 1)[-1]
        if leaf == "g":
            weights[name] = np.ones(shape)
        elif leaf in ("b", "b1", "b2"):
            weights[name] = np.zeros(shape)
        else:
            weights[name] = rng.uniform(-0.1, 0.1, size=shape)
    return Model(config, weights, src_vocab, tgt_vocab)


def positional_encoding(n: int, d: int, offset: int = 0) -> np.ndarray:
    pos = np.arange(offset, offset + n, dtype=np.float64)[:, None]
    i = np.arange(d)[None, :]
    angle = pos / np.power(10000.0, (2 * (i // 2)) / d)
    return np.where(i % 2 == 0, np.sin(angle), np.cos(angle))


def split_heads(x: np.ndarray, n_heads: int) -> np.ndarray:
    """(rows, d) -> (heads, rows, d_head)."""
    return x.reshape(x.shape[0], n_heads, -1).transpose(1, 0, 2)


def _attend(model: Model, q: np.ndarray, k: np.ndarray, v: np.ndarray, mask=None):
    """Multi-head attention core on projected q/k/v; returns (concat output, heads x rows x S probs)."""
    n_heads = model.config.n_heads
    qh, kh, vh = (split_heads(m, n_heads) for m in (q, k, v))
    z = bmatmul(qh, kh.transpose(0, 2, 1)) * (1.0 / math.sqrt(model.config.d))
    if mask is not None:
        z = np.where(mask, z, -np.inf)
    p = softmax_rows(z)
    out = bmatmul(p, vh)
    return out.transpose(1, 0, 2).reshape(q.shape[0], -1), p


def _ffn(model: Model, prefix: str, x: np.ndarray) -> np.ndarray:
    w = model.weights
    h = np.maximum(matmul(x, w[prefix + ".w1"]) + w[prefix + ".b1"], 0.0)
    return matmul(h, w[prefix + ".w2"]) + w[prefix + ".b2"]


def _ln(model: Model, prefix: str, x: np.ndarray) -> np.ndarray:
    return layer_norm(x, model.weights[prefix + ".g"], model.weights[prefix + ".b"], LN_EPS)


@dataclass
class ModelState:
    """Decoder cache for one sentence.

    Per-step lists grow by exactly one entry per ``decode_step``.  States are
    treated as values: ``decode_step`` returns a new state and leaves its
    argument untouched, so hypotheses may share a parent.
    """

    src: tuple[int, ...]
    H: np.ndarray
    cross_kv: tuple[tuple[np.ndarray, np.ndarray], ...]
    inputs: tuple[int, ...] = ()
    self_k: tuple[tuple[np.ndarray, ...], ...] = ()
    self_v: tuple[tuple[np.ndarray, ...], ...] = ()
    g: tuple[tuple[np.ndarray, ...], ...] = ()
    cross_attn: tuple[tuple[np.ndarray, ...], ...] = ()
    logits: tuple[np.ndarray, ...] = ()

    @property
    def n_steps(self) -> int:
        return len(self.inputs)

    def truncate(self, n_steps: int) -> "ModelState":
        """State as it was after the first ``n_steps`` decode steps."""
        if not 0 <= n_steps <= self.n_steps:
            raise StateError(f"cannot truncate {self.n_steps} steps to {n_steps}")
        cut = lambda per_layer: tuple(rows[:n_steps] for rows in per_layer)  # noqa: E731
        return ModelState(
            self.src, self.H, self.cross_kv, self.inputs[:n_steps], cut(self.self_k), cut(self.self_v),
            cut(self.g), cut(self.cross_attn), self.logits[:n_steps],
        )


def _check_tokens(vocab: Vocab, tokens: Sequence[int]):
    for t in tokens:
        if not (isinstance(t, (int, np.integer)) and 0 <= t < len(vocab)):
            raise VocabularyError(f"token id {t!r} outside vocabulary of {len(vocab)}")


def encode(model: Model, src: Sequence[int]) -> ModelState:
    if len(src) == 0:
        raise VocabularyError("empty source sentence")
    _check_tokens(model.src_vocab, src)
    w = model.weights
    cfg = model.config
    x = w["src_embed"][list(src)] + positional_encoding(len(src), cfg.d)
    for i in range(cfg.n_layers):
        p = f"enc.{i}"
        a, _ = _attend(model, matmul(x, w[p + ".attn.wq"]), matmul(x, w[p + ".attn.wk"]), matmul(x, w[p + ".attn.wv"]))
        x = _ln(model, p + ".ln1", x + matmul(a, w[p + ".attn.wo"]))
        x = _ln(model, p + ".ln2", x + _ffn(model, p + ".ff", x))
    cross_kv = tuple(
        (matmul(x, w[f"dec.{i}.cross.wk"]), matmul(x, w[f"dec.{i}.cross.wv"])) for i in range(cfg.n_layers)
    )
    empty = tuple(() for _ in range(cfg.n_layers))
    return ModelState(tuple(int(t) for t in src), x, cross_kv, (), empty, empty, empty, empty, ())


def decode_step(model: Model, state: ModelState, y_prev: int) -> tuple[np.ndarray, ModelState]:
    """Feed ``y_prev`` and compute the next step; returns (logits, new state)."""
    _check_tokens(model.tgt_vocab, [y_prev])
    w = model.weights
    cfg = model.config
    t = state.n_steps
    x = w["tgt_embed"][[y_prev]] + positional_encoding(1, cfg.d, offset=t)
    new_k, new_v, new_g, new_attn = [], [], [], []
    for i in range(cfg.n_layers):
        p = f"dec.{i}"
        k_rows = state.self_k[i] + (matmul(x, w[p + ".self.wk"]),)
        v_rows = state.self_v[i] + (matmul(x, w[p + ".self.wv"]),)
        a, _ = _attend(model, matmul(x, w[p + ".self.wq"]), np.concatenate(k_rows), np.concatenate(v_rows))
        g = _ln(model, p + ".ln1", x + matmul(a, w[p + ".self.wo"]))
        ck, cv = state.cross_kv[i]
        c, probs = _attend(model, matmul(g, w[p + ".cross.wq"]), ck, cv)
        c = _ln(model, p + ".ln2", g + matmul(c, w[p + ".cross.wo"]))
        x = _ln(model, p + ".ln3", c + _ffn(model, p + ".ff", c))
        new_k.append(k_rows)
        new_v.append(v_rows)
        new_g.append(state.g[i] + (g,))
        new_attn.append(state.cross_attn[i] + (probs[:, 0, :],))
    logits = (matmul(x, w["out.w"]) + w["out.b"])[0]
    new_state = ModelState(
        state.src, state.H, state.cross_kv, state.inputs + (int(y_prev),), tuple(new_k), tuple(new_v),
        tuple(new_g), tuple(new_attn), state.logits + (logits,),
    )
    return logits, new_state


@dataclass
class FullPass:
    """All-positions forward pass over a fixed decoder input."""

    H: np.ndarray
    g: list[np.ndarray]            # per layer, T x d
    cross_attn: list[np.ndarray]   # per layer, heads x T x S
    logits: np.ndarray             # T x V


def forward_full(model: Model, src: Sequence[int], tgt_in: Sequence[int]) -> FullPass:
    """Non-incremental pass with a causal mask; used as the recomputation oracle and for training features."""
    state = encode(model, src)
    _check_tokens(model.tgt_vocab, tgt_in)
    w = model.weights
    cfg = model.config
    n = len(tgt_in)
    x = w["tgt_embed"][list(tgt_in)] + positional_encoding(n, cfg.d)
    causal = np.tril(np.ones((n, n), dtype=bool))
    gs, attns = [], []
    for i in range(cfg.n_layers):
        p = f"dec.{i}"
        a, _ = _attend(model, matmul(x, w[p + ".self.wq"]), matmul(x, w[p + ".self.wk"]),
                       matmul(x, w[p + ".self.wv"]), mask=causal)
        g = _ln(model, p + ".ln1", x + matmul(a, w[p + ".self.wo"]))
        ck, cv = state.cross_kv[i]
        c, probs = _attend(model, matmul(g, w[p + ".cross.wq"]), ck, cv)
        c = _ln(model, p + ".ln2", g + matmul(c, w[p + ".cross.wo"]))
        x = _ln(model, p + ".ln3", c + _ffn(model, p + ".ff", c))
        gs.append(g)
        attns.append(probs)
    logits = matmul(x, w["out.w"]) + w["out.b"]
    return FullPass(state.H, gs, attns, logits)


def teacher_force(model: Model, src: Sequence[int], tgt: Sequence[int]) -> ModelState:
    """Incremental state after feeding ``<bos> tgt``: steps 0..len(tgt)."""
    state = encode(model, src)
    for y in (model.tgt_vocab.bos, *tgt):
        _, state = decode_step(model, state, y)
    return state


def greedy_decode(model: Model, src: Sequence[int], max_len: int) -> list[int]:
    """Argmax decoding, ``<bos>`` never emitted."""
    state = encode(model, src)
    y = model.tgt_vocab.bos
    out = []
    for _ in range(max_len):
        logits, state = decode_step(model, state, y)
        logits = logits.copy()
        logits[model.tgt_vocab.bos] = -np.inf
        y = int(np.argmax(logits))
        if y == model.tgt_vocab.eos:
            return out
        out.append(y)
    return out


# -- persistence ------------------------------------------------------------

def _tensor_payload(arr: np.ndarray) -> dict:
    return {"shape": list(arr.shape), "data": [float(v) for v in arr.ravel()]}


def _read_tensor(name: str, obj, shape=None) -> np.ndarray:
    try:
        rows, cols = obj["shape"]
        data = obj["data"]
    except (KeyError, TypeError, ValueError):
        raise FormatError(f"tensor {name!r}: missing shape/data") from None
    if shape is not None and (rows, cols) != tuple(shape):
        raise FormatError(f"tensor {name!r}: shape {(rows, cols)} expected {tuple(shape)}")
    if not isinstance(data, list) or len(data) != rows * cols:
        raise FormatError(f"tensor {name!r}: expected {rows * cols} values")
    try:
        arr = np.array(data, dtype=np.float64).reshape(rows, cols)
    except (TypeError, ValueError):
        raise FormatError(f"tensor {name!r}: non-numeric values") from None
    if not np.all(np.isfinite(arr)):
        raise FormatError(f"tensor {name!r}: non-finite values")
    return arr


def read_json(path, kind: str) -> dict:
    try:
        obj = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise FormatError(f"{path}: not valid JSON ({e.msg} at char {e.pos})") from None
    if not isinstance(obj, dict) or obj.get("format") != kind:
        raise FormatError(f"{path}: not an {kind} file")
    return obj


def save_model(model: Model, path):
    obj = {
        "format": MODEL_FORMAT,
        "version": MODEL_VERSION,
        "config": asdict(model.config),
        "src_vocab": model.src_vocab.tokens,
        "tgt_vocab": model.tgt_vocab.tokens,
        "tensors": {n: _tensor_payload(model.weights[n]) for n in weight_shapes(model.config)},
    }
    Path(path).write_text(json.dumps(obj), encoding="utf-8")


def load_model(path) -> Model:
    obj = read_json(path, MODEL_FORMAT)
    if obj.get("version") != MODEL_VERSION:
        raise UnsupportedVersionError(f"{path}: unsupported model version {obj.get('version')!r}")
    try:
        config = ModelConfig(**obj["config"])
        src_vocab, tgt_vocab = Vocab(obj["src_vocab"]), Vocab(obj["tgt_vocab"])
        tensors = obj["tensors"]
    except (KeyError, TypeError) as e:
        raise FormatError(f"{path}: malformed header ({e})") from None
    config.validate()
    weights = {}
    for name, shape in weight_shapes(config).items():
        if name not in tensors:
            raise FormatError(f"tensor {name!r}: missing")
        weights[name] = _read_tensor(name, tensors[name], shape)
    return Model(config, weights, src_vocab, tgt_vocab)
