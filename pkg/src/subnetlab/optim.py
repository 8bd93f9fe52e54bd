"""Adam with a path-predicate freeze filter.

Updates are functional: adam_step returns a new tree and a new state,
sharing the arrays of every parameter the filter rejects, so frozen
parameters (and their moments) stay bitwise identical.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Mapping

import numpy as np

from .params import ParameterTree


class NonFiniteGradientError(ArithmeticError):
    def __init__(self, path: str):
        super().__init__(f"non-finite gradient for parameter {path!r}")
        self.path = path


@dataclass(frozen=True)
class AdamHyper:
    lr: float = 3e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0

    @classmethod
    def zeros(cls, params: ParameterTree) -> "AdamState":
        return cls(
            m={p: np.zeros_like(t, dtype=np.float32) for p, t in params.items()},
            v={p: np.zeros_like(t, dtype=np.float32) for p, t in params.items()},
        )


def adam_step(params: ParameterTree, grads: Mapping[str, np.ndarray], state: AdamState,
              hyper: AdamHyper,
              trainable_filter: Callable[[str], bool] = lambda path: True,
              ) -> tuple[ParameterTree, AdamState]:
    """One Adam update. Parameters failing the filter are left untouched.

    Math runs in float64 and the result is rounded back to float32, so a
    given (params, grads, state) always produces the same bits. Missing
    gradient entries count as zero.
    """
    t = state.step + 1
    bc1 = 1.0 - hyper.beta1**t
    bc2 = 1.0 - hyper.beta2**t

    new_params = ParameterTree(config=params.config)
    new_state = AdamState(step=t)
    for path, value in params.items():
        if not trainable_filter(path):
            new_params[path] = value
            new_state.m[path] = state.m[path]
            new_state.v[path] = state.v[path]
            continue
        g = np.asarray(grads[path], dtype=np.float64) if path in grads else \
            np.zeros(value.shape, dtype=np.float64)
        if g.shape != value.shape:
            raise ValueError(f"gradient shape {g.shape} != parameter shape "
                             f"{value.shape} at {path!r}")
        if not np.all(np.isfinite(g)):
            raise NonFiniteGradientError(path)
        m = state.m[path].astype(np.float64) * hyper.beta1 + (1.0 - hyper.beta1) * g
        v = state.v[path].astype(np.float64) * hyper.beta2 + (1.0 - hyper.beta2) * g**2
        update = hyper.lr * (m / bc1) / (np.sqrt(v / bc2) + hyper.eps)
        new_params[path] = (value.astype(np.float64) - update).astype(np.float32)
        new_state.m[path] = m.astype(np.float32)
        new_state.v[path] = v.astype(np.float32)
    return new_params, new_state
