"""Finite-difference verification of every differentiable op and layer."""

from __future__ import annotations

import time
from contextlib import contextmanager
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import tensor as T
from .attention import (AttentionModel, ModelConfig, MultiHeadAttention, init_parameters,
                        multi_head_attention, position_wise_ffn, scaled_dot_product_attention,
                        sublayer)
from .lstm import LstmConfig, init_lstm

H = 1e-5
# central differences are meaningless within H of a ReLU kink; such draws are redrawn
KINK_MARGIN = 1e-3
MAX_REDRAWS = 20


@dataclass
class CheckResult:
    name: str
    max_error: float
    instances: int
    seconds: float


def _weighted(out: T.Tensor, w: np.ndarray) -> T.Tensor:
    # random projection so every output coordinate carries a distinct weight
    return T.sum_all(T.mul(out, T.Tensor(w)))


def _unary(fn, shape=(3, 4)):
    def build(rng):
        x = rng.normal(size=shape)
        w = rng.normal(size=fn(T.Tensor(x)).shape)
        return (lambda a: _weighted(fn(a), w)), [x]
    return build


def _binary(fn, sa=(3, 4), sb=(3, 4)):
    def build(rng):
        a, b = rng.normal(size=sa), rng.normal(size=sb)
        w = rng.normal(size=fn(T.Tensor(a), T.Tensor(b)).shape)
        return (lambda x, y: _weighted(fn(x, y), w)), [a, b]
    return build


def _layer_norm(rng):
    x, g, b = rng.normal(size=(2, 3, 5)), rng.normal(size=5), rng.normal(size=5)
    w = rng.normal(size=x.shape)
    return (lambda x_, g_, b_: _weighted(T.layer_norm(x_, g_, b_), w)), [x, g, b]


def _concat(rng):
    a, b, c = rng.normal(size=(3, 2)), rng.normal(size=(3, 4)), rng.normal(size=(3, 1))
    w = rng.normal(size=(3, 7))
    return (lambda *ps: _weighted(T.concat_lastdim(ps), w)), [a, b, c]


def _split(rng):
    x = rng.normal(size=(2, 6))
    ws = [rng.normal(size=(2, s)) for s in (1, 2, 3)]

    def f(x_):
        parts = T.split_lastdim(x_, [1, 2, 3])
        total = _weighted(parts[0], ws[0])
        for p, w in zip(parts[1:], ws[1:]):
            total = T.add(total, _weighted(p, w))
        return total
    return f, [x]


def _masked_fill(rng):
    x = rng.normal(size=(4, 4))
    mask = rng.random((4, 4)) < 0.4
    w = rng.normal(size=(4, 4))
    return (lambda x_: _weighted(T.softmax_lastdim(T.masked_fill(x_, mask)), w)), [x]


def _mse(rng):
    p, t = rng.normal(size=(5, 1)), rng.normal(size=(5, 1))
    return T.mse_loss, [p, t]


def _bce(rng):
    p, t = rng.uniform(0.05, 0.95, size=(6,)), rng.random(6)
    return T.bce_loss, [p, t]


def _dropout(rng):
    x = rng.normal(size=(3, 5))
    seed = int(rng.integers(1 << 30))
    w = rng.normal(size=x.shape)
    # same noise on every call so the function is deterministic
    return (lambda x_: _weighted(T.dropout(x_, 0.3, np.random.default_rng(seed)), w)), [x]


def _attention(rng):
    q, k, v = rng.normal(size=(3, 4)), rng.normal(size=(5, 4)), rng.normal(size=(5, 2))
    mask = np.zeros((3, 5), dtype=bool)
    mask[0, 3:] = True
    w = rng.normal(size=(3, 2))
    return (lambda *a: _weighted(scaled_dot_product_attention(*a, mask=mask)[0], w)), [q, k, v]


def _mha(rng):
    d, h, n = 6, 2, 3
    x = rng.normal(size=(n, d))
    ws = [rng.normal(size=(d, d // h)) * 0.5 for _ in range(3 * h)] + [rng.normal(size=(d, d)) * 0.5]
    w = rng.normal(size=(n, d))

    def f(x_, *p):
        mha = MultiHeadAttention(list(p[0:h]), list(p[h:2 * h]), list(p[2 * h:3 * h]), p[3 * h])
        return _weighted(multi_head_attention(mha, x_, x_, x_), w)
    return f, [x] + ws


def _ffn(rng):
    d, ff = 4, 6
    args = [rng.normal(size=(3, d)), rng.normal(size=(d, ff)), rng.normal(size=ff),
            rng.normal(size=(ff, d)), rng.normal(size=d)]
    w = rng.normal(size=(3, d))
    return (lambda *a: _weighted(position_wise_ffn(*a), w)), args


def _sublayer(rng):
    x, m = rng.normal(size=(3, 4)), rng.normal(size=(4, 4))
    g, b = rng.normal(size=4), rng.normal(size=4)
    w = rng.normal(size=(3, 4))
    return (lambda x_, m_, g_, b_: _weighted(sublayer(x_, lambda y: T.tanh(T.matmul(y, m_)), g_, b_), w)), [x, m, g, b]


def _model_fn(model, names, call, w):
    def f(x_, *p):
        P = dict(zip(names, p))
        return _weighted(call(model, x_, P), w)
    return f


def _encoder_layer(rng):
    cfg = ModelConfig(d_model=8, h=2, n_encoder_layers=1, d_ff=16, dropout=0.0, max_len=8)
    model = init_parameters(cfg, int(rng.integers(1 << 30)))
    names = [k for k in model.params if k.startswith("enc0.")]
    # perturb LayerNorm gains/biases off their init so their gradients are exercised
    vals = [model.params[k] + (rng.normal(size=model.params[k].shape) * 0.1 if ".ln" in k else 0.0) for k in names]
    x = rng.normal(size=(4, 8))
    w = rng.normal(size=(4, 8))
    return _model_fn(model, names, lambda m, x_, P: m.encoder_layer(x_, P, 0), w), [x] + vals


def _decoder_layer(rng):
    cfg = ModelConfig(d_model=8, h=2, n_encoder_layers=1, n_decoder_layers=1, d_ff=16, dropout=0.0,
                      max_len=8, mode="encoder_decoder")
    model = init_parameters(cfg, int(rng.integers(1 << 30)))
    names = [k for k in model.params if k.startswith("dec0.")]
    vals = [model.params[k] for k in names]
    mem = rng.normal(size=(5, 8))
    x = rng.normal(size=(4, 8))
    w = rng.normal(size=(4, 8))
    return _model_fn(model, names, lambda m, x_, P: m.decoder_layer(x_, T.Tensor(mem), P, 0), w), [x] + vals


def _full_model(rng):
    cfg = ModelConfig(d_model=4, h=2, n_encoder_layers=1, n_decoder_layers=1, dropout=0.0,
                      max_len=8, d_ff=4, mode="encoder_decoder")
    model = init_parameters(cfg, int(rng.integers(1 << 30)))
    names = list(model.params)
    vals = [model.params[k] for k in names]
    x = rng.normal(size=(2, 4, 1))
    y = rng.normal(size=(2, 1))
    return (lambda x_, *p: T.mse_loss(model.predict_windows(x_, params=dict(zip(names, p))), T.Tensor(y))), [x] + vals


def _lstm_unroll(rng):
    model = init_lstm(LstmConfig(d_in=2, d_h=3), int(rng.integers(1 << 30)))
    names = list(model.params)
    vals = [model.params[k] + rng.normal(size=model.params[k].shape) * 0.3 for k in names]
    seq = rng.normal(size=(5, 2))
    w = rng.normal(size=(5, 1))
    return _model_fn(model, names, lambda m, x_, P: m.forward(x_, params=P), w), [seq] + vals


CHECKS: dict[str, Callable] = {
    "matmul": _binary(T.matmul, (3, 4), (4, 2)),
    "matmul_batched": _binary(T.matmul, (2, 3, 4), (4, 2)),
    "add": _binary(T.add),
    "sub": _binary(T.sub),
    "mul": _binary(T.mul),
    "scale": _unary(lambda x: T.scale(x, -1.7)),
    "add_bias": _binary(T.add_bias, (2, 3, 4), (4,)),
    "transpose": _unary(T.transpose, (2, 3, 4)),
    "reshape": _unary(lambda x: T.reshape(x, (4, 3))),
    "take": _unary(lambda x: T.take(x, (slice(None), -1))),
    "sum": _unary(T.sum_all),
    "relu": _unary(T.relu),
    "sigmoid": _unary(T.sigmoid),
    "tanh": _unary(T.tanh),
    "softmax": _unary(T.softmax_lastdim, (3, 5)),
    "layer_norm": _layer_norm,
    "concat": _concat,
    "split": _split,
    "masked_fill": _masked_fill,
    "dropout": _dropout,
    "mse": _mse,
    "bce": _bce,
    "attention": _attention,
    "multi_head_attention": _mha,
    "position_wise_ffn": _ffn,
    "sublayer": _sublayer,
    "encoder_layer": _encoder_layer,
    "decoder_layer": _decoder_layer,
    "encoder_decoder_model": _full_model,
    "lstm_unroll_5": _lstm_unroll,
}


@contextmanager
def _relu_inputs():
    seen: list[float] = []
    orig = T.relu

    def probe(x):
        x = T.as_tensor(x)
        seen.append(float(np.abs(x.data).min()))
        return orig(x)

    T.relu = probe
    try:
        yield seen
    finally:
        T.relu = orig


def _draw(build, seed: int, i: int, j: int):
    for attempt in range(MAX_REDRAWS):
        f, inputs = build(np.random.default_rng([seed, i, j, attempt]))
        with _relu_inputs() as seen:
            f(*[T.Tensor(a) for a in inputs])
        if not seen or min(seen) > KINK_MARGIN:
            return f, inputs
    raise RuntimeError("could not draw an instance away from ReLU kinks")


# whole-decoder checks are slow; they run on a handful of instances
HEAVY = {"decoder_layer": 4, "encoder_decoder_model": 4}


def run_checks(instances: int = 20, seed: int = 0, names=None) -> list[CheckResult]:
    results = []
    for name in names or CHECKS:
        build = CHECKS[name]
        i = list(CHECKS).index(name)
        count = min(instances, HEAVY.get(name, instances))
        t0 = time.perf_counter()
        worst = 0.0
        for j in range(count):
            f, inputs = _draw(build, seed, i, j)
            worst = max(worst, T.grad_check(f, inputs, H))
        results.append(CheckResult(name, worst, count, time.perf_counter() - t0))
    return results
