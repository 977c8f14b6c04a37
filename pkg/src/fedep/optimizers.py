"""Adaptive optimizers over natural-parameter deltas.

An EP update ``param += delta * sum_k(Delta_k)`` is a gradient step in
disguise, so the summed delta can be fed through any first-order optimizer.
:meth:`Optimizer.apply` returns the transformed step; the caller adds
``damping * step`` to the parameter.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

OPTIMIZER_KINDS = ("sgd-momentum", "adagrad", "adam")


@dataclass
class Optimizer:
    kind: str = "sgd-momentum"
    lr: float = 1.0
    momentum: float = 0.0
    tau: float = 1e-5
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = field(default=0, init=False)
    slots: dict[str, np.ndarray] = field(default_factory=dict, init=False, repr=False)

    def __post_init__(self):
        if self.kind not in OPTIMIZER_KINDS:
            raise ValueError(f"unknown optimizer {self.kind!r}; expected one of {OPTIMIZER_KINDS}")

    @property
    def dim(self) -> int | None:
        return next(iter(self.slots.values())).size if self.slots else None

    def apply(self, g) -> np.ndarray:
        g = np.asarray(g, dtype=float)
        if self.dim is not None and g.shape != (self.dim,):
            raise ValueError(f"optimizer was initialised for dimension {self.dim}, got {g.shape}")
        self.step += 1
        if self.kind == "sgd-momentum":
            v = self.slots.get("velocity", np.zeros_like(g))
            v = self.momentum * v + g
            self.slots["velocity"] = v
            return self.lr * v
        if self.kind == "adagrad":
            acc = self.slots.get("sum_sq", np.zeros_like(g)) + g * g
            self.slots["sum_sq"] = acc
            return self.lr * g / (np.sqrt(acc) + self.tau)
        m = self.beta1 * self.slots.get("m", np.zeros_like(g)) + (1 - self.beta1) * g
        v = self.beta2 * self.slots.get("v", np.zeros_like(g)) + (1 - self.beta2) * g * g
        self.slots["m"], self.slots["v"] = m, v
        m_hat = m / (1 - self.beta1**self.step)
        v_hat = v / (1 - self.beta2**self.step)
        return self.lr * m_hat / (np.sqrt(v_hat) + self.eps)

    def reset(self) -> Optimizer:
        self.step = 0
        self.slots.clear()
        return self

    def fresh(self) -> Optimizer:
        """A new optimizer with the same hyperparameters and empty state."""
        return Optimizer(self.kind, self.lr, self.momentum, self.tau, self.beta1, self.beta2, self.eps)

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "lr": self.lr,
            "momentum": self.momentum,
            "tau": self.tau,
            "beta1": self.beta1,
            "beta2": self.beta2,
            "eps": self.eps,
            "step": self.step,
            "slots": {k: v.tolist() for k, v in self.slots.items()},
        }

    @classmethod
    def from_dict(cls, data: dict) -> Optimizer:
        opt = cls(data["kind"], data["lr"], data["momentum"], data["tau"], data["beta1"], data["beta2"], data["eps"])
        opt.step = int(data["step"])
        opt.slots = {k: np.array(v, dtype=float) for k, v in data["slots"].items()}
        return opt


def identity() -> Optimizer:
    """Plain undamped EP algebra: momentum-free SGD with unit rate."""
    return Optimizer("sgd-momentum", lr=1.0, momentum=0.0)


def optim_apply(state: Optimizer, g) -> np.ndarray:
    return state.apply(g)


def optim_reset(state: Optimizer) -> Optimizer:
    return state.reset()
