"""Single-layer unidirectional LSTM regressor used as the comparison baseline."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Mapping, Optional

import numpy as np

from . import tensor as T
from .tensor import ShapeError, Tape, Tensor

GATES = ("i", "f", "o", "g")


@dataclass
class LstmConfig:
    d_in: int = 1
    d_h: int = 32
    forget_bias: float = 1.0

    def __post_init__(self):
        if self.d_in < 1 or self.d_h < 1:
            raise ValueError("d_in and d_h must be >= 1")

    def to_dict(self) -> dict:
        return asdict(self)


def lstm_step(p: Mapping[str, Tensor], x_t, h, c) -> tuple[Tensor, Tensor]:
    """One cell update on ``[..., d_in]`` input with state ``[..., d_h]``."""
    x_t, h, c = T.as_tensor(x_t), T.as_tensor(h), T.as_tensor(c)
    d_in, d_h = T.as_tensor(p["W_i"]).shape
    if x_t.shape[-1] != d_in or h.shape[-1] != d_h or c.shape != h.shape:
        raise ShapeError(f"lstm_step: x {x_t.shape}, h {h.shape}, c {c.shape} vs W [{d_in}x{d_h}]")
    squeeze = x_t.data.ndim == 1
    if squeeze:
        x_t, h, c = (T.reshape(v, (1, v.shape[0])) for v in (x_t, h, c))

    def pre(g):
        z = T.add(T.matmul(x_t, p[f"W_{g}"]), T.matmul(h, p[f"U_{g}"]))
        return T.add_bias(z, p[f"b_{g}"])

    i = T.sigmoid(pre("i"))
    f = T.sigmoid(pre("f"))
    o = T.sigmoid(pre("o"))
    g = T.tanh(pre("g"))
    c_new = T.add(T.mul(f, c), T.mul(i, g))
    h_new = T.mul(o, T.tanh(c_new))
    if squeeze:
        return T.reshape(h_new, (d_h,)), T.reshape(c_new, (d_h,))
    return h_new, c_new


@dataclass
class LstmModel:
    config: LstmConfig
    params: dict[str, np.ndarray] = field(default_factory=dict)

    def bind(self, tape: Optional[Tape] = None) -> dict[str, Tensor]:
        if tape is None:
            return {k: Tensor(v) for k, v in self.params.items()}
        return {k: tape.watch(v) for k, v in self.params.items()}

    def forward(self, seq, training: bool = False, rng=None,
                params: Optional[Mapping[str, Tensor]] = None) -> Tensor:
        """Per-step predictions ``[..., n, 1]`` from zero initial state.

        ``training`` and ``rng`` are accepted for interface parity with the
        attention model; the LSTM has no dropout.
        """
        P = params if params is not None else self.bind()
        x = T.as_tensor(seq)
        unbatched = x.data.ndim == 2
        if unbatched:
            x = T.reshape(x, (1,) + x.shape)
        if x.data.ndim != 3 or x.shape[-1] != self.config.d_in:
            raise ShapeError(f"lstm_forward: expected [..., n, {self.config.d_in}], got {T.as_tensor(seq).shape}")
        b, n, _ = x.shape
        h = Tensor(np.zeros((b, self.config.d_h)))
        c = Tensor(np.zeros((b, self.config.d_h)))
        outs = []
        for t in range(n):
            h, c = lstm_step(P, T.take(x, (slice(None), t, slice(None))), h, c)
            outs.append(T.add_bias(T.matmul(h, P["out.w"]), P["out.b"]))
        y = T.reshape(T.concat_lastdim(outs), (b, n, 1))
        return T.reshape(y, (n, 1)) if unbatched else y

    def predict_windows(self, inputs, training=False, rng=None, params=None) -> Tensor:
        x = T.as_tensor(inputs)
        out = self.forward(x, training, rng, params)
        return T.reshape(T.take(out, (slice(None), -1, slice(None))), (x.shape[0], 1))

    def n_parameters(self) -> int:
        return int(sum(v.size for v in self.params.values()))


def lstm_forward(model: LstmModel, seq) -> Tensor:
    return model.forward(seq)


def init_lstm(config: LstmConfig, seed: int) -> LstmModel:
    """Glorot-uniform weights, zero biases except the forget gate."""
    rng = np.random.default_rng(seed)
    d_in, d_h = config.d_in, config.d_h
    p: dict[str, np.ndarray] = {}
    for g in GATES:
        lim_w = math.sqrt(6.0 / (d_in + d_h))
        lim_u = math.sqrt(6.0 / (2 * d_h))
        p[f"W_{g}"] = rng.uniform(-lim_w, lim_w, size=(d_in, d_h))
        p[f"U_{g}"] = rng.uniform(-lim_u, lim_u, size=(d_h, d_h))
        p[f"b_{g}"] = np.full(d_h, config.forget_bias if g == "f" else 0.0)
    lim = math.sqrt(6.0 / (d_h + 1))
    p["out.w"] = rng.uniform(-lim, lim, size=(d_h, 1))
    p["out.b"] = np.zeros(1)
    return LstmModel(config, p)
