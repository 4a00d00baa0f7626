"""SGD, RMSProp, Adam and Adadelta as element-wise state updates."""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Mapping, Optional

import numpy as np

KINDS = ("sgd", "rmsprop", "adam", "adadelta")
DEFAULT_LRS = (0.01, 0.001, 0.0001)

_DEFAULTS = {
    "sgd": {},
    "rmsprop": {"rho": 0.9, "eps": 1e-8},
    "adam": {"beta1": 0.9, "beta2": 0.999, "eps": 1e-8},
    "adadelta": {"rho": 0.95, "eps": 1e-6},
}


@dataclass(frozen=True)
class OptimizerSpec:
    kind: str
    lr: float
    rho: float = 0.9
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown optimizer {self.kind!r}; expected one of {KINDS}")
        if not self.lr > 0:
            raise ValueError(f"learning rate must be positive, got {self.lr}")
        for name in ("rho", "beta1", "beta2"):
            v = getattr(self, name)
            if not 0.0 < v < 1.0:
                raise ValueError(f"{name} must lie in (0, 1), got {v}")
        if self.eps < 0:
            raise ValueError("eps must be non-negative")

    @classmethod
    def make(cls, kind: str, lr: float, **overrides) -> "OptimizerSpec":
        """Spec with the per-optimizer default hyperparameters."""
        if kind not in _DEFAULTS:
            raise ValueError(f"unknown optimizer {kind!r}; expected one of {KINDS}")
        kw = dict(_DEFAULTS[kind])
        kw.update(overrides)
        return cls(kind=kind, lr=lr, **kw)


@dataclass
class ParamState:
    t: int = 0
    m: Optional[np.ndarray] = None
    v: Optional[np.ndarray] = None
    u: Optional[np.ndarray] = None


def _check(w, g):
    w = np.asarray(w, dtype=np.float64)
    g = np.asarray(g, dtype=np.float64)
    if w.shape != g.shape:
        raise ValueError(f"parameter shape {w.shape} != gradient shape {g.shape}")
    return w, g


def _zeros(buf, like):
    return np.zeros_like(like) if buf is None else buf


def sgd_step(w, g, spec: OptimizerSpec) -> np.ndarray:
    w, g = _check(w, g)
    return w - spec.lr * g


def rmsprop_step(w, g, state: ParamState, spec: OptimizerSpec) -> tuple[np.ndarray, ParamState]:
    w, g = _check(w, g)
    v = spec.rho * _zeros(state.v, w) + (1.0 - spec.rho) * g * g
    w_new = w - spec.lr * g / (np.sqrt(v) + spec.eps)
    return w_new, replace(state, t=state.t + 1, v=v)


def adam_step(w, g, state: ParamState, spec: OptimizerSpec) -> tuple[np.ndarray, ParamState]:
    w, g = _check(w, g)
    t = state.t + 1
    m = spec.beta1 * _zeros(state.m, w) + (1.0 - spec.beta1) * g
    v = spec.beta2 * _zeros(state.v, w) + (1.0 - spec.beta2) * g * g
    m_hat = m / (1.0 - spec.beta1 ** t)
    v_hat = v / (1.0 - spec.beta2 ** t)
    w_new = w - spec.lr * m_hat / (np.sqrt(v_hat) + spec.eps)
    return w_new, replace(state, t=t, m=m, v=v)


def adadelta_step(w, g, state: ParamState, spec: OptimizerSpec) -> tuple[np.ndarray, ParamState]:
    """Adadelta with ``lr`` scaling the native step (``lr=1`` is the original rule)."""
    w, g = _check(w, g)
    v = spec.rho * _zeros(state.v, w) + (1.0 - spec.rho) * g * g
    u_old = _zeros(state.u, w)
    delta = -(np.sqrt(u_old + spec.eps) / np.sqrt(v + spec.eps)) * g
    u = spec.rho * u_old + (1.0 - spec.rho) * delta * delta
    return w + spec.lr * delta, replace(state, t=state.t + 1, v=v, u=u)


def step(w, g, state: ParamState, spec: OptimizerSpec) -> tuple[np.ndarray, ParamState]:
    if spec.kind == "sgd":
        w, g = _check(w, g)
        return sgd_step(w, g, spec), replace(state, t=state.t + 1)
    if spec.kind == "rmsprop":
        return rmsprop_step(w, g, state, spec)
    if spec.kind == "adam":
        return adam_step(w, g, state, spec)
    return adadelta_step(w, g, state, spec)


@dataclass
class Optimizer:
    """Steps every entry of a parameter dict with its own state."""

    spec: OptimizerSpec
    states: dict[str, ParamState] = field(default_factory=dict)

    def apply(self, params: dict[str, np.ndarray], grads: Mapping[str, np.ndarray]) -> dict[str, np.ndarray]:
        missing = [k for k in params if k not in grads]
        if missing:
            raise KeyError(f"no gradient for parameter(s): {', '.join(missing)}")
        for name in params:
            state = self.states.get(name, ParamState())
            params[name], self.states[name] = step(params[name], grads[name], state, self.spec)
        return params
