"""Instrumented pre-norm encoder-decoder Transformer on top of :mod:`nmtattn.autodiff`."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

MASK_VALUE = -1e9
CHECKPOINT_VERSION = 1


class VocabError(ValueError):
    pass


class SequenceError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    src_vocab: int
    tgt_vocab: int
    num_encoder_layers: int = 2
    num_decoder_layers: int = 2
    num_heads: int = 4
    d_model: int = 64
    d_ff: int = 128
    max_len: int = 64
    dropout: float = 0.1
    eos_id: int = 1
    pad_id: int = 0

    def __post_init__(self):
        for name in ("src_vocab", "tgt_vocab", "num_encoder_layers", "num_decoder_layers",
                     "num_heads", "d_model", "d_ff", "max_len"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.d_model % self.num_heads:
            raise ValueError("d_model must be divisible by num_heads")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must be in [0, 1)")

    @property
    def d_head(self) -> int:
        return self.d_model // self.num_heads


@dataclass
class AttentionRecord:
    """Encoder-decoder attention internals of one sentence.

    Per decoder layer ``l``:

    * ``attn[l]``: ``(H, T, S)`` weights, row ``t`` is decoding step ``t``
    * ``values[l]``: ``(H, S, d_head)`` projected value vectors
    * ``head_out[l]``: ``(H, T, d_head)`` per-head outputs ``z``
    * ``attn_out[l]``: ``(T, d_model)`` merged output after the output projection

    plus ``enc_out`` ``(S, d_model)``, the final encoder states.
    """

    attn: list[np.ndarray]
    values: list[np.ndarray]
    head_out: list[np.ndarray]
    attn_out: list[np.ndarray]
    enc_out: np.ndarray

    @property
    def num_layers(self) -> int:
        return len(self.attn)

    @property
    def num_heads(self) -> int:
        return self.attn[0].shape[0]

    def value_norms(self, layer: int) -> np.ndarray:
        return np.linalg.norm(self.values[layer], axis=-1)


@dataclass
class Trace:
    """Live tensors of one batched forward pass (for taking gradients)."""

    src_emb: Tensor
    tgt_emb: Tensor
    cross_values: list[Tensor] = field(default_factory=list)
    attn: list[np.ndarray] = field(default_factory=list)
    head_out: list[np.ndarray] = field(default_factory=list)
    attn_out: list[np.ndarray] = field(default_factory=list)
    enc_out: np.ndarray | None = None
    watch_values: bool = False

    def record(self, b: int, src_len: int, tgt_len: int) -> AttentionRecord:
        """Copy batch item ``b``, trimmed of padding, into an :class:`AttentionRecord`."""
        return AttentionRecord(
            attn=[a[b, :, :tgt_len, :src_len].copy() for a in self.attn],
            values=[v.data[b, :, :src_len].copy() for v in self.cross_values],
            head_out=[z[b, :, :tgt_len].copy() for z in self.head_out],
            attn_out=[o[b, :tgt_len].copy() for o in self.attn_out],
            enc_out=self.enc_out[b, :src_len].copy(),
        )


def sinusoidal_positions(n: int, d: int) -> np.ndarray:
    pos = np.arange(n)[:, None]
    i = np.arange(d)[None, :]
    angle = pos / np.power(10000.0, (2 * (i // 2)) / d)
    return np.where(i % 2 == 0, np.sin(angle), np.cos(angle))


def _linear_shapes(prefix: str, d_in: int, d_out: int) -> dict[str, tuple[int, ...]]:
    return {f"{prefix}.w": (d_in, d_out), f"{prefix}.b": (d_out,)}


def _attn_shapes(prefix: str, d: int) -> dict[str, tuple[int, ...]]:
    # no key bias: it adds the same constant to every score of a query row
    out = {}
    for p in ("q", "k", "v", "o"):
        out.update(_linear_shapes(f"{prefix}.{p}", d, d))
    del out[f"{prefix}.k.b"]
    return out


def _ln_shapes(prefix: str, d: int) -> dict[str, tuple[int, ...]]:
    return {f"{prefix}.g": (d,), f"{prefix}.b": (d,)}


def param_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    d, f = cfg.d_model, cfg.d_ff
    shapes: dict[str, tuple[int, ...]] = {
        "src_embed": (cfg.src_vocab, d),
        "tgt_embed": (cfg.tgt_vocab, d),
    }
    for l in range(cfg.num_encoder_layers):
        p = f"enc.{l}"
        shapes.update(_ln_shapes(f"{p}.ln1", d))
        shapes.update(_attn_shapes(f"{p}.self", d))
        shapes.update(_ln_shapes(f"{p}.ln2", d))
        shapes.update(_linear_shapes(f"{p}.ff1", d, f))
        shapes.update(_linear_shapes(f"{p}.ff2", f, d))
    shapes.update(_ln_shapes("enc.ln", d))
    for l in range(cfg.num_decoder_layers):
        p = f"dec.{l}"
        shapes.update(_ln_shapes(f"{p}.ln1", d))
        shapes.update(_attn_shapes(f"{p}.self", d))
        shapes.update(_ln_shapes(f"{p}.ln2", d))
        shapes.update(_attn_shapes(f"{p}.cross", d))
        shapes.update(_ln_shapes(f"{p}.ln3", d))
        shapes.update(_linear_shapes(f"{p}.ff1", d, f))
        shapes.update(_linear_shapes(f"{p}.ff2", f, d))
    shapes.update(_ln_shapes("dec.ln", d))
    shapes.update(_linear_shapes("out", d, cfg.tgt_vocab))
    return shapes


def init_params(cfg: ModelConfig, seed: int = 0) -> dict[str, np.ndarray]:
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape in param_shapes(cfg).items():
        if name.endswith("_embed"):
            arr = rng.normal(0.0, cfg.d_model ** -0.5, size=shape)
        elif name.endswith(".g"):
            arr = np.ones(shape)
        elif name.endswith(".w"):
            limit = math.sqrt(6.0 / (shape[0] + shape[1]))
            arr = rng.uniform(-limit, limit, size=shape)
        else:
            arr = np.zeros(shape)
        params[name] = arr
    return params


def attention_head(q, keys, values, mask=None):
    """Scaled dot-product attention for one head.

    ``q`` is ``(T, d_k)`` or ``(d_k,)``, ``keys`` ``(S, d_k)``, ``values``
    ``(S, d_v)``. Returns ``(z, alpha)`` with ``z = alpha @ values``.
    """
    q, keys, values = ad._as_tensor(q), ad._as_tensor(keys), ad._as_tensor(values)
    if q.shape[-1] != keys.shape[-1]:
        raise ad.ShapeError("attention_head: query and key widths differ")
    if keys.shape[0] != values.shape[0] or keys.shape[0] < 1:
        raise ad.ShapeError("attention_head: need |x| >= 1 keys matching values")
    scores = ad.scale(ad.matmul(q, ad.transpose(keys, (1, 0))), 1.0 / math.sqrt(keys.shape[-1]))
    if mask is not None:
        scores = ad.add(scores, mask)
    alpha = ad.softmax(scores, axis=-1)
    return ad.matmul(alpha, values), alpha


class Transformer:
    """Encoder-decoder Transformer with always-on cross-attention capture.

    Parameters are held as numpy arrays in ``self.params``; each forward pass
    wraps them in fresh tensors, so gradient tracking never leaks between
    passes.
    """

    def __init__(self, config: ModelConfig, params: dict[str, np.ndarray] | None = None,
                 seed: int = 0):
        self.config = config
        self.params = init_params(config, seed) if params is None else params
        expected = param_shapes(config)
        for name, shape in expected.items():
            if name not in self.params:
                raise KeyError(f"missing parameter {name}")
            if tuple(self.params[name].shape) != shape:
                raise ad.ShapeError(f"parameter {name}: {self.params[name].shape} != {shape}")
        extra = sorted(set(self.params) - set(expected))
        if extra:
            raise KeyError(f"unexpected parameters {extra}")
        self._pe = sinusoidal_positions(config.max_len, config.d_model)
        self.embed_scale = math.sqrt(config.d_model)

    # -- helpers -----------------------------------------------------------

    def tensors(self, requires_grad: bool = False) -> dict[str, Tensor]:
        return {k: Tensor._wrap(v, requires_grad) for k, v in self.params.items()}

    def _check_ids(self, ids: np.ndarray, vocab: int, what: str) -> None:
        if ids.size and (ids.min() < 0 or ids.max() >= vocab):
            raise VocabError(f"{what}: token id outside vocabulary of size {vocab}")
        if ids.shape[-1] > self.config.max_len:
            raise SequenceError(f"{what}: length {ids.shape[-1]} exceeds max_len {self.config.max_len}")
        if ids.shape[-1] < 1:
            raise SequenceError(f"{what}: empty sequence")

    def embed_source(self, src_ids) -> np.ndarray:
        """Scaled token embeddings (no positions) for source ids."""
        src_ids = np.asarray(src_ids, dtype=np.int64)
        self._check_ids(src_ids, self.config.src_vocab, "source")
        return self.params["src_embed"][src_ids] * self.embed_scale

    def embed_target(self, tgt_ids) -> np.ndarray:
        tgt_ids = np.asarray(tgt_ids, dtype=np.int64)
        self._check_ids(tgt_ids, self.config.tgt_vocab, "target")
        return self.params["tgt_embed"][tgt_ids] * self.embed_scale

    @staticmethod
    def _linear(P, prefix, x):
        return ad.add(ad.matmul(x, P[f"{prefix}.w"]), P[f"{prefix}.b"])

    def _split(self, x, B, n):
        H, dh = self.config.num_heads, self.config.d_head
        return ad.transpose(ad.reshape(x, (B, n, H, dh)), (0, 2, 1, 3))

    def _mha(self, P, prefix, xq, xkv, mask, trace=None):
        cfg = self.config
        B, T = xq.shape[0], xq.shape[1]
        S = xkv.shape[1]
        q = self._split(self._linear(P, f"{prefix}.q", xq), B, T)
        k = self._split(ad.matmul(xkv, P[f"{prefix}.k.w"]), B, S)
        v = self._split(self._linear(P, f"{prefix}.v", xkv), B, S)
        if trace is not None and trace.watch_values:
            v = ad.watch(v)
        scores = ad.scale(ad.matmul(q, ad.transpose(k, (0, 1, 3, 2))), 1.0 / math.sqrt(cfg.d_head))
        if mask is not None:
            scores = ad.add(scores, mask)
        alpha = ad.softmax(scores, axis=-1)
        z = ad.matmul(alpha, v)
        merged = ad.reshape(ad.transpose(z, (0, 2, 1, 3)), (B, T, cfg.d_model))
        out = self._linear(P, f"{prefix}.o", merged)
        if trace is not None:
            trace.cross_values.append(v)
            trace.attn.append(alpha.data)
            trace.head_out.append(z.data)
            trace.attn_out.append(out.data)
        return out

    def _ffn(self, P, prefix, x):
        return self._linear(P, f"{prefix}.ff2", ad.relu(self._linear(P, f"{prefix}.ff1", x)))

    # -- public forward ----------------------------------------------------

    def encode(self, src_ids, *, src_emb=None, src_mask=None, P=None, rng=None):
        """Encoder states ``(B, S, d)`` (a 1-D id sequence gives ``(S, d)``)."""
        src_ids = np.asarray(src_ids, dtype=np.int64)
        single = src_ids.ndim == 1
        if single:
            src_ids = src_ids[None]
            if src_emb is not None and src_emb.ndim == 2:
                src_emb = Tensor._wrap(src_emb.data[None]) if isinstance(src_emb, Tensor) \
                    else np.asarray(src_emb)[None]
        enc, _ = self._encode(src_ids, src_emb, src_mask, P, rng)
        return ad.reshape(enc, enc.shape[1:]) if single else enc

    def _encode(self, src_ids, src_emb, src_mask, P, rng):
        cfg = self.config
        P = self.tensors() if P is None else P
        B, S = src_ids.shape
        self._check_ids(src_ids, cfg.src_vocab, "source")
        if src_emb is None:
            src_emb = ad.scale(ad.embedding(P["src_embed"], src_ids), self.embed_scale)
        src_emb = ad._as_tensor(src_emb)
        drop = cfg.dropout if rng is not None else 0.0
        x = ad.dropout(ad.add(src_emb, self._pe[:S]), drop, rng)
        if src_mask is None:
            src_mask = np.ones((B, S), dtype=bool)
        key_mask = np.where(src_mask, 0.0, MASK_VALUE)[:, None, None, :]
        for l in range(cfg.num_encoder_layers):
            p = f"enc.{l}"
            h = ad.layer_norm(x, P[f"{p}.ln1.g"], P[f"{p}.ln1.b"])
            x = ad.add(x, ad.dropout(self._mha(P, f"{p}.self", h, h, key_mask), drop, rng))
            h = ad.layer_norm(x, P[f"{p}.ln2.g"], P[f"{p}.ln2.b"])
            x = ad.add(x, ad.dropout(self._ffn(P, p, h), drop, rng))
        enc = ad.layer_norm(x, P["enc.ln.g"], P["enc.ln.b"])
        return enc, key_mask

    def forward(self, src_ids, tgt_in, *, src_mask=None, src_emb=None, tgt_emb=None,
                P=None, rng=None, watch_values: bool = False) -> tuple[Tensor, Trace]:
        """Batched teacher-forced pass.

        ``src_ids`` ``(B, S)`` and ``tgt_in`` ``(B, T)`` (decoder inputs,
        starting with the sentinel). ``src_emb``/``tgt_emb`` optionally
        replace the token embeddings (before positions are added). Passing
        ``rng`` enables dropout. ``watch_values`` turns the cross-attention
        value tensors into gradient targets (analysis only: it cuts their
        path to the parameters). Returns log-probabilities ``(B, T, V)`` and
        the :class:`Trace`.
        """
        cfg = self.config
        P = self.tensors() if P is None else P
        src_ids = np.asarray(src_ids, dtype=np.int64)
        tgt_in = np.asarray(tgt_in, dtype=np.int64)
        B, T = tgt_in.shape
        self._check_ids(tgt_in, cfg.tgt_vocab, "target")
        if src_emb is None:
            src_emb = ad.scale(ad.embedding(P["src_embed"], src_ids), self.embed_scale)
        if tgt_emb is None:
            tgt_emb = ad.scale(ad.embedding(P["tgt_embed"], tgt_in), self.embed_scale)
        src_emb, tgt_emb = ad._as_tensor(src_emb), ad._as_tensor(tgt_emb)
        trace = Trace(src_emb=src_emb, tgt_emb=tgt_emb, watch_values=watch_values)
        enc, key_mask = self._encode(src_ids, src_emb, src_mask, P, rng)
        trace.enc_out = enc.data

        drop = cfg.dropout if rng is not None else 0.0
        causal = np.triu(np.full((T, T), MASK_VALUE), k=1)[None, None]
        y = ad.dropout(ad.add(tgt_emb, self._pe[:T]), drop, rng)
        for l in range(cfg.num_decoder_layers):
            p = f"dec.{l}"
            h = ad.layer_norm(y, P[f"{p}.ln1.g"], P[f"{p}.ln1.b"])
            y = ad.add(y, ad.dropout(self._mha(P, f"{p}.self", h, h, causal), drop, rng))
            h = ad.layer_norm(y, P[f"{p}.ln2.g"], P[f"{p}.ln2.b"])
            y = ad.add(y, ad.dropout(self._mha(P, f"{p}.cross", h, enc, key_mask, trace), drop, rng))
            h = ad.layer_norm(y, P[f"{p}.ln3.g"], P[f"{p}.ln3.b"])
            y = ad.add(y, ad.dropout(self._ffn(P, p, h), drop, rng))
        y = ad.layer_norm(y, P["dec.ln.g"], P["dec.ln.b"])
        return ad.log_softmax(self._linear(P, "out", y), axis=-1), trace

    def forward_teacher_forced(self, src_ids, tgt_ids):
        """Single-sentence analysis pass.

        ``tgt_ids`` is the framed target ``[</s>, y_1, ..., </s>]``. Returns
        ``(logp, record)`` where ``logp[t]`` is the log-probability of the
        reference token at decoding step ``t`` (predicting ``tgt_ids[t + 1]``).
        """
        src_ids = np.asarray(src_ids, dtype=np.int64)
        tgt_ids = np.asarray(tgt_ids, dtype=np.int64)
        if tgt_ids.size < 2:
            raise SequenceError("target must be framed by sentinels")
        logp, trace = self.forward(src_ids[None], tgt_ids[None, :-1])
        ref = ad.pick(logp, tgt_ids[None, 1:])
        return ref.data[0].copy(), trace.record(0, src_ids.size, tgt_ids.size - 1)

    def greedy_decode(self, src_ids, max_len: int = 50) -> list[int]:
        """Greedy translation; stops after emitting the sentinel or ``max_len`` tokens."""
        cfg = self.config
        src_ids = np.asarray(src_ids, dtype=np.int64)[None]
        max_len = min(max_len, cfg.max_len)
        P = self.tensors()
        out = [cfg.eos_id]
        while len(out) <= max_len:
            logp, _ = self.forward(src_ids, np.array([out]), P=P)
            nxt = int(np.argmax(logp.data[0, -1]))
            out.append(nxt)
            if nxt == cfg.eos_id or len(out) >= cfg.max_len:
                break
        return out[1:]


# ---------------------------------------------------------------------------
# checkpoint format: one line of JSON header, then little-endian f64 payload


def save_checkpoint(path, config: ModelConfig, tensors: dict[str, np.ndarray],
                    meta: dict | None = None) -> None:
    index = {}
    chunks = []
    offset = 0
    for name in sorted(tensors):
        arr = np.ascontiguousarray(tensors[name], dtype="<f8")
        index[name] = {"shape": list(arr.shape), "dtype": "f64", "offset": offset}
        buf = arr.tobytes()
        chunks.append(buf)
        offset += len(buf)
    header = {
        "format_version": CHECKPOINT_VERSION,
        "config": asdict(config),
        "tensors": index,
        "meta": meta or {},
    }
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as f:
        f.write(json.dumps(header, sort_keys=True).encode("utf-8") + b"\n")
        for buf in chunks:
            f.write(buf)


def load_checkpoint(path):
    """Return ``(config, tensors, meta)``."""
    raw = Path(path).read_bytes()
    nl = raw.find(b"\n")
    if nl < 0:
        raise ValueError(f"{path}: not a checkpoint (no header)")
    header = json.loads(raw[:nl].decode("utf-8"))
    if header.get("format_version") != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {header.get('format_version')}")
    payload = memoryview(raw)[nl + 1:]
    tensors = {}
    for name, info in header["tensors"].items():
        if info["dtype"] != "f64":
            raise ValueError(f"{path}: tensor {name} has dtype {info['dtype']}")
        count = int(np.prod(info["shape"], dtype=np.int64))
        arr = np.frombuffer(payload, dtype="<f8", count=count, offset=info["offset"])
        tensors[name] = arr.reshape(info["shape"]).astype(np.float64)
    return ModelConfig(**header["config"]), tensors, header["meta"]


def save_model(path, model: Transformer, meta: dict | None = None) -> None:
    save_checkpoint(path, model.config, model.params, meta)


def load_model(path) -> tuple[Transformer, dict]:
    config, tensors, meta = load_checkpoint(path)
    params = {k: v for k, v in tensors.items() if not k.startswith("adam.")}
    return Transformer(config, params), meta
