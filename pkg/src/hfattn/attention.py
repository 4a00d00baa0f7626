"""Encoder/decoder attention model for count-series regression.

Parameters live in a flat ``dict[str, np.ndarray]`` on the model.  A training
step binds them to a tape with :meth:`AttentionModel.bind` and runs
:meth:`AttentionModel.forward` on the tracked copies; inference binds them
untracked.  Every op accepts leading batch axes, so a whole set of windows
runs as one ``[B, n, f]`` tensor.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Callable, Mapping, Optional

import numpy as np

from . import tensor as T
from .tensor import ShapeError, Tape, Tensor

MODES = ("encoder_regression", "encoder_decoder")
HEADS = ("linear", "sigmoid")


class ConfigError(ValueError):
    pass


@dataclass
class ModelConfig:
    d_model: int = 64
    h: int = 4
    d_k: Optional[int] = None
    d_v: Optional[int] = None
    n_encoder_layers: int = 2
    n_decoder_layers: int = 2
    d_ff: Optional[int] = None
    dropout: float = 0.1
    max_len: int = 64
    mode: str = "encoder_regression"
    n_features: int = 1
    head: str = "linear"
    eps: float = 1e-5
    horizon: int = 1

    def __post_init__(self):
        if self.d_k is None:
            self.d_k = self.d_model // self.h if self.h > 0 else 0
        if self.d_v is None:
            self.d_v = self.d_k
        if self.d_ff is None:
            self.d_ff = 4 * self.d_model
        self.validate()

    def validate(self) -> None:
        if self.h < 1 or self.d_model < 1:
            raise ConfigError("d_model and h must be positive")
        if self.d_model != self.h * self.d_k or self.d_model != self.h * self.d_v:
            raise ConfigError(
                f"d_model={self.d_model} must equal h*d_k and h*d_v (h={self.h}, d_k={self.d_k}, d_v={self.d_v})")
        if self.d_model % 2:
            raise ConfigError("d_model must be even for the sinusoidal position table")
        if self.n_encoder_layers < 1 or self.n_decoder_layers < 1:
            raise ConfigError("layer counts must be >= 1")
        if self.max_len < 1 or self.d_ff < 1 or self.n_features < 1 or self.horizon < 1:
            raise ConfigError("max_len, d_ff, n_features and horizon must be >= 1")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError("dropout must lie in [0, 1)")
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}")
        if self.head not in HEADS:
            raise ConfigError(f"head must be one of {HEADS}")

    @classmethod
    def full_scale(cls, **overrides) -> "ModelConfig":
        """Full-size transformer: width 512, six encoder and six decoder layers."""
        base = dict(d_model=512, h=8, n_encoder_layers=6, n_decoder_layers=6)
        base.update(overrides)
        return cls(**base)

    def to_dict(self) -> dict:
        return asdict(self)


# ---------------------------------------------------------------- primitives


def causal_mask(n: int) -> np.ndarray:
    """``[n, n]`` boolean mask, True where key index exceeds query index."""
    if n < 1:
        raise ValueError("causal_mask needs n >= 1")
    return np.triu(np.ones((n, n), dtype=bool), k=1)


def positional_encoding(max_len: int, d_model: int) -> Tensor:
    if d_model % 2:
        raise ValueError(f"positional encoding needs an even width, got {d_model}")
    pos = np.arange(max_len, dtype=np.float64)[:, None]
    i = np.arange(0, d_model, 2, dtype=np.float64)
    angle = pos / np.power(10000.0, i / d_model)
    pe = np.empty((max_len, d_model))
    pe[:, 0::2] = np.sin(angle)
    pe[:, 1::2] = np.cos(angle)
    return Tensor(pe)


def scaled_dot_product_attention(q, k, v, mask=None) -> tuple[Tensor, Tensor]:
    """softmax(q k^T / sqrt(d_k)) v, with optional ``[n, m]`` boolean mask.

    Leading batch axes on q, k, v are allowed; the mask is shared by the
    batch.
    """
    q, k, v = T.as_tensor(q), T.as_tensor(k), T.as_tensor(v)
    if q.shape[-1] != k.shape[-1]:
        raise ShapeError(f"attention: query width {q.shape[-1]} != key width {k.shape[-1]}")
    if k.shape[-2] != v.shape[-2]:
        raise ShapeError(f"attention: {k.shape[-2]} keys but {v.shape[-2]} values")
    d_k = q.shape[-1]
    scores = T.matmul(q, T.transpose(k))
    if d_k != 1:
        scores = T.scale(scores, 1.0 / math.sqrt(d_k))
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        if mask.shape != scores.shape[-2:]:
            raise ShapeError(f"attention: mask {mask.shape} does not match scores {scores.shape[-2:]}")
        scores = T.masked_fill(scores, np.broadcast_to(mask, scores.shape))
    weights = T.softmax_lastdim(scores)
    return T.matmul(weights, v), weights


@dataclass
class MultiHeadAttention:
    wq: list
    wk: list
    wv: list
    wo: object

    @property
    def h(self) -> int:
        return len(self.wq)

    @classmethod
    def from_params(cls, params: Mapping[str, Tensor], prefix: str, h: int) -> "MultiHeadAttention":
        return cls(
            wq=[params[f"{prefix}.wq.{i}"] for i in range(h)],
            wk=[params[f"{prefix}.wk.{i}"] for i in range(h)],
            wv=[params[f"{prefix}.wv.{i}"] for i in range(h)],
            wo=params[f"{prefix}.wo"],
        )


def _project_heads(x: Tensor, weights: list) -> list[Tensor]:
    # one matmul for all heads, then slice per head
    if len(weights) == 1:
        return [T.matmul(x, weights[0])]
    w = T.concat_lastdim(weights)
    return T.split_lastdim(T.matmul(x, w), [T.as_tensor(wi).shape[-1] for wi in weights])


def multi_head_attention(mha: MultiHeadAttention, q_in, k_in, v_in, mask=None) -> Tensor:
    q_in, k_in, v_in = T.as_tensor(q_in), T.as_tensor(k_in), T.as_tensor(v_in)
    d_model = T.as_tensor(mha.wq[0]).shape[0]
    for name, x in (("query", q_in), ("key", k_in), ("value", v_in)):
        if x.shape[-1] != d_model:
            raise ShapeError(f"multi-head attention: {name} width {x.shape[-1]} != d_model {d_model}")
    qs = _project_heads(q_in, mha.wq)
    ks = _project_heads(k_in, mha.wk)
    vs = _project_heads(v_in, mha.wv)
    heads = [scaled_dot_product_attention(q, k, v, mask)[0] for q, k, v in zip(qs, ks, vs)]
    joined = heads[0] if len(heads) == 1 else T.concat_lastdim(heads)
    return T.matmul(joined, mha.wo)


def position_wise_ffn(x, w1, b1, w2, b2) -> Tensor:
    hidden = T.relu(T.add_bias(T.matmul(x, w1), b1))
    return T.add_bias(T.matmul(hidden, w2), b2)


def sublayer(x, f: Callable[[Tensor], Tensor], gamma, beta, *, eps: float = 1e-5,
             dropout: float = 0.0, training: bool = False,
             rng: Optional[np.random.Generator] = None) -> Tensor:
    """layer_norm(x + f(x)), with dropout on f(x) while training."""
    x = T.as_tensor(x)
    fx = f(x)
    if fx.shape != x.shape:
        raise ShapeError(f"sublayer changed shape {x.shape} -> {fx.shape}")
    if training and dropout > 0:
        if rng is None:
            raise ValueError("dropout in training mode needs an rng")
        fx = T.dropout(fx, dropout, rng)
    return T.layer_norm(T.add(x, fx), gamma, beta, eps)


# --------------------------------------------------------------------- model


def _glorot(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out))


@dataclass
class AttentionModel:
    config: ModelConfig
    params: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        self.pe = positional_encoding(self.config.max_len, self.config.d_model)

    def bind(self, tape: Optional[Tape] = None) -> dict[str, Tensor]:
        if tape is None:
            return {k: Tensor(v) for k, v in self.params.items()}
        return {k: tape.watch(v) for k, v in self.params.items()}

    # -- building blocks

    def _embed(self, x: Tensor, P, prefix: str) -> Tensor:
        n = x.shape[-2]
        e = T.add_bias(T.matmul(x, P[f"{prefix}.w"]), P[f"{prefix}.b"])
        pe = self.pe.data[:n]
        return T.add(e, Tensor(np.broadcast_to(pe, e.shape)))

    def _ffn(self, P, prefix):
        return lambda y: position_wise_ffn(y, P[f"{prefix}.w1"], P[f"{prefix}.b1"],
                                           P[f"{prefix}.w2"], P[f"{prefix}.b2"])

    def _sub(self, x, f, P, ln, training, rng):
        c = self.config
        return sublayer(x, f, P[f"{ln}.gamma"], P[f"{ln}.beta"], eps=c.eps,
                        dropout=c.dropout, training=training, rng=rng)

    def encoder_layer(self, x, P, i, training=False, rng=None, mask=None) -> Tensor:
        pre = f"enc{i}"
        mha = MultiHeadAttention.from_params(P, f"{pre}.attn", self.config.h)
        x = self._sub(x, lambda y: multi_head_attention(mha, y, y, y, mask), P, f"{pre}.ln1", training, rng)
        return self._sub(x, self._ffn(P, f"{pre}.ffn"), P, f"{pre}.ln2", training, rng)

    def decoder_layer(self, y, memory, P, i, training=False, rng=None) -> Tensor:
        pre = f"dec{i}"
        h = self.config.h
        self_attn = MultiHeadAttention.from_params(P, f"{pre}.self", h)
        cross = MultiHeadAttention.from_params(P, f"{pre}.cross", h)
        mask = causal_mask(y.shape[-2])
        y = self._sub(y, lambda z: multi_head_attention(self_attn, z, z, z, mask), P, f"{pre}.ln1", training, rng)
        y = self._sub(y, lambda z: multi_head_attention(cross, z, memory, memory), P, f"{pre}.ln2", training, rng)
        return self._sub(y, self._ffn(P, f"{pre}.ffn"), P, f"{pre}.ln3", training, rng)

    def _head(self, z, P) -> Tensor:
        out = T.add_bias(T.matmul(z, P["out.w"]), P["out.b"])
        return T.sigmoid(out) if self.config.head == "sigmoid" else out

    # -- passes

    def encode(self, features, P, training=False, rng=None) -> Tensor:
        z = self._embed(features, P, "in")
        for i in range(self.config.n_encoder_layers):
            z = self.encoder_layer(z, P, i, training, rng)
        return z

    def decode(self, targets_in, memory, P, training=False, rng=None) -> Tensor:
        y = self._embed(targets_in, P, "dec_in")
        for i in range(self.config.n_decoder_layers):
            y = self.decoder_layer(y, memory, P, i, training, rng)
        return self._head(y, P)

    def _check_input(self, x: Tensor, what: str) -> None:
        c = self.config
        if x.data.ndim < 2:
            raise ShapeError(f"{what} must be at least 2-D, got {x.shape}")
        if x.shape[-2] > c.max_len:
            raise ShapeError(f"{what} length {x.shape[-2]} exceeds max_len {c.max_len}")

    def forward(self, features, training: bool = False, rng: Optional[np.random.Generator] = None,
                params: Optional[Mapping[str, Tensor]] = None, decoder_inputs=None) -> Tensor:
        """Per-position predictions ``[..., n, 1]``.

        In ``encoder_decoder`` mode, ``decoder_inputs`` (right-shifted
        targets, ``[..., m, 1]``) gives teacher-forced outputs ``[..., m, 1]``.
        Without them the decoder runs greedily for ``config.horizon`` steps,
        seeded with the last value of the first input feature.
        """
        c = self.config
        P = params if params is not None else self.bind()
        x = T.as_tensor(features)
        self._check_input(x, "features")
        if x.shape[-1] != c.n_features:
            raise ShapeError(f"feature width {x.shape[-1]} != configured {c.n_features}")
        if training and c.dropout > 0 and rng is None:
            raise ValueError("training with dropout needs an rng")
        memory = self.encode(x, P, training, rng)
        if c.mode == "encoder_regression":
            return self._head(memory, P)
        if decoder_inputs is not None:
            d = T.as_tensor(decoder_inputs)
            self._check_input(d, "decoder inputs")
            return self.decode(d, memory, P, training, rng)
        seq = T.take(x, (Ellipsis, slice(-1, None), slice(0, 1)))
        outs = []
        for _ in range(c.horizon):
            step = self.decode(seq, memory, P, training, rng)
            last = T.take(step, (Ellipsis, slice(-1, None), slice(None)))
            outs.append(last)
            seq = _append_rows(seq, last)
        return outs[0] if len(outs) == 1 else _stack_rows(outs)

    def predict_windows(self, inputs, training=False, rng=None, params=None) -> Tensor:
        """One next-value prediction per window: ``[B, L, f] -> [B, 1]``."""
        x = T.as_tensor(inputs)
        b = x.shape[0]
        if self.config.mode == "encoder_regression":
            out = self.forward(x, training, rng, params)
            return T.reshape(T.take(out, (slice(None), -1, slice(None))), (b, 1))
        dec_in = T.take(x, (slice(None), slice(-1, None), slice(0, 1)))
        out = self.forward(x, training, rng, params, decoder_inputs=dec_in)
        return T.reshape(out, (b, 1))

    def n_parameters(self) -> int:
        return int(sum(v.size for v in self.params.values()))


def _append_rows(seq: Tensor, row: Tensor) -> Tensor:
    # concat along the sequence axis via a transpose round trip
    joined = T.concat_lastdim([T.transpose(seq), T.transpose(row)])
    return T.transpose(joined)


def _stack_rows(rows: list[Tensor]) -> Tensor:
    return T.transpose(T.concat_lastdim([T.transpose(r) for r in rows]))


def _mha_params(rng, prefix, c: ModelConfig) -> dict[str, np.ndarray]:
    p = {}
    for kind, width in (("wq", c.d_k), ("wk", c.d_k), ("wv", c.d_v)):
        for i in range(c.h):
            p[f"{prefix}.{kind}.{i}"] = _glorot(rng, c.d_model, width)
    p[f"{prefix}.wo"] = _glorot(rng, c.h * c.d_v, c.d_model)
    return p


def _ffn_params(rng, prefix, c: ModelConfig) -> dict[str, np.ndarray]:
    return {
        f"{prefix}.w1": _glorot(rng, c.d_model, c.d_ff),
        f"{prefix}.b1": np.zeros(c.d_ff),
        f"{prefix}.w2": _glorot(rng, c.d_ff, c.d_model),
        f"{prefix}.b2": np.zeros(c.d_model),
    }


def _ln_params(prefix, c: ModelConfig) -> dict[str, np.ndarray]:
    return {f"{prefix}.gamma": np.ones(c.d_model), f"{prefix}.beta": np.zeros(c.d_model)}


def init_parameters(config: ModelConfig, seed: int) -> AttentionModel:
    """Glorot-uniform weights, zero biases, unit LayerNorm gains."""
    config.validate()
    c = config
    rng = np.random.default_rng(seed)
    p: dict[str, np.ndarray] = {"in.w": _glorot(rng, c.n_features, c.d_model), "in.b": np.zeros(c.d_model)}
    for i in range(c.n_encoder_layers):
        p.update(_mha_params(rng, f"enc{i}.attn", c))
        p.update(_ln_params(f"enc{i}.ln1", c))
        p.update(_ffn_params(rng, f"enc{i}.ffn", c))
        p.update(_ln_params(f"enc{i}.ln2", c))
    if c.mode == "encoder_decoder":
        p["dec_in.w"] = _glorot(rng, 1, c.d_model)
        p["dec_in.b"] = np.zeros(c.d_model)
        for i in range(c.n_decoder_layers):
            p.update(_mha_params(rng, f"dec{i}.self", c))
            p.update(_ln_params(f"dec{i}.ln1", c))
            p.update(_mha_params(rng, f"dec{i}.cross", c))
            p.update(_ln_params(f"dec{i}.ln2", c))
            p.update(_ffn_params(rng, f"dec{i}.ffn", c))
            p.update(_ln_params(f"dec{i}.ln3", c))
    p["out.w"] = _glorot(rng, c.d_model, 1)
    p["out.b"] = np.zeros(1)
    return AttentionModel(config, p)
