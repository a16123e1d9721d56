"""Adam and momentum-SGD updates over plain arrays, plus a Tensor-facing wrapper."""

from dataclasses import dataclass, field

import numpy as np

from ..errors import ConfigError, StateError


@dataclass
class OptimizerState:
    algorithm: str
    learning_rate: float
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    momentum_coefficient: float = 0.949
    l2_coefficient: float = 0.0
    step_count: int = 0
    # adam: first/second moments; sgd_momentum: velocity (second list unused)
    first: list = field(default_factory=list)
    second: list = field(default_factory=list)

    def __post_init__(self):
        if self.algorithm not in ("adam", "sgd_momentum"):
            raise ConfigError(f"unknown optimizer {self.algorithm!r}")
        if self.learning_rate <= 0:
            raise ConfigError("learning rate must be > 0")
        if self.l2_coefficient < 0:
            raise ConfigError("l2 coefficient must be >= 0")

    def buffers(self):
        """Named moment buffers, for checkpointing."""
        named = {}
        for i, m in enumerate(self.first):
            named[f"first.{i}"] = m
        for i, v in enumerate(self.second):
            named[f"second.{i}"] = v
        return named

    def scalars(self):
        return {
            "algorithm": self.algorithm,
            "learning_rate": self.learning_rate,
            "beta1": self.beta1,
            "beta2": self.beta2,
            "epsilon": self.epsilon,
            "momentum_coefficient": self.momentum_coefficient,
            "l2_coefficient": self.l2_coefficient,
            "step_count": self.step_count,
        }

    @classmethod
    def restore(cls, scalars, buffers):
        state = cls(**{k: v for k, v in scalars.items()})
        state.first = [buffers[f"first.{i}"] for i in range(_count(buffers, "first."))]
        state.second = [buffers[f"second.{i}"] for i in range(_count(buffers, "second."))]
        return state


def _count(buffers, prefix):
    return sum(1 for k in buffers if k.startswith(prefix))


def _ensure_buffers(state, params, n_lists):
    if not state.first:
        state.first = [np.zeros_like(p) for p in params]
        if n_lists == 2:
            state.second = [np.zeros_like(p) for p in params]
    bufs = state.first + (state.second if n_lists == 2 else [])
    if len(state.first) != len(params) or (n_lists == 2 and len(state.second) != len(params)):
        raise StateError("optimizer state does not match parameter count")
    for i, b in enumerate(bufs):
        if b.shape != params[i % len(params)].shape:
            raise StateError(f"moment buffer {i} has shape {b.shape}, parameter has {params[i % len(params)].shape}")


def _decayed(params, grads, l2):
    if l2 == 0.0:
        return list(grads)
    return [g + 2.0 * l2 * p if p.ndim >= 2 else g for p, g in zip(params, grads)]


def adam_step(params, grads, state):
    """One bias-corrected Adam update, applied in place; returns ``params``."""
    if state.algorithm != "adam":
        raise StateError(f"adam_step on a {state.algorithm} state")
    _ensure_buffers(state, params, 2)
    grads = _decayed(params, grads, state.l2_coefficient)
    state.step_count += 1
    t = state.step_count
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**t
    c2 = 1.0 - b2**t
    for p, g, m, v in zip(params, grads, state.first, state.second):
        if g.shape != p.shape:
            raise StateError(f"gradient shape {g.shape} != parameter shape {p.shape}")
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * np.square(g)
        p -= (state.learning_rate * (m / c1) / (np.sqrt(v / c2) + state.epsilon)).astype(p.dtype)
    return params


def sgd_momentum_step(params, grads, state):
    """``v <- mu*v - lr*g; w <- w + v``, applied in place; returns ``params``."""
    if state.algorithm != "sgd_momentum":
        raise StateError(f"sgd_momentum_step on a {state.algorithm} state")
    _ensure_buffers(state, params, 1)
    grads = _decayed(params, grads, state.l2_coefficient)
    state.step_count += 1
    for p, g, v in zip(params, grads, state.first):
        if g.shape != p.shape:
            raise StateError(f"gradient shape {g.shape} != parameter shape {p.shape}")
        v *= state.momentum_coefficient
        v -= state.learning_rate * g
        p += v
    return params


class Optimizer:
    """Binds an :class:`OptimizerState` to a list of parameter tensors."""

    def __init__(self, params, state):
        self.params = list(params)
        self.state = state

    def zero_grad(self):
        for p in self.params:
            p.grad = None

    def step(self):
        data = [p.data for p in self.params]
        grads = [p.grad if p.grad is not None else np.zeros_like(p.data) for p in self.params]
        if self.state.algorithm == "adam":
            adam_step(data, grads, self.state)
        else:
            sgd_momentum_step(data, grads, self.state)


def adam(params, lr=1e-4, l2=0.0):
    return Optimizer(params, OptimizerState("adam", lr, l2_coefficient=l2))


def sgd_momentum(params, lr=1e-3, momentum=0.949, l2=0.0):
    return Optimizer(
        params, OptimizerState("sgd_momentum", lr, momentum_coefficient=momentum, l2_coefficient=l2)
    )
