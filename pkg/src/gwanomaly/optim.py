"""NAdam, reduce-on-plateau and early stopping.

The NAdam update is the bias-corrected Nesterov form without a momentum
warm-up schedule::

    m  <- b1 m + (1 - b1) g            v  <- b2 v + (1 - b2) g^2
    mh <- m / (1 - b1^t)               vh <- v / (1 - b2^t)
    p  <- p - lr (b1 mh + (1 - b1) g / (1 - b1^t)) / (sqrt(vh) + eps)
"""
from __future__ import annotations

import math
from typing import Optional

import numpy as np

from .errors import NumericsError, ShapeError


class NAdam:
    def __init__(self, lr: float = 1e-4, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> None:
        """Update ``params`` in place. Nothing changes if any gradient is non-finite."""
        for name, p in params.items():
            g = grads[name]
            if g.shape != p.shape:
                raise ShapeError(f"{name}: gradient shape {g.shape} != parameter shape {p.shape}")
            if not np.all(np.isfinite(g)):
                raise NumericsError(f"non-finite gradient for {name}")
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        bc1 = 1.0 - b1 ** self.t
        bc2 = 1.0 - b2 ** self.t
        for name, p in params.items():
            g = grads[name]
            if name not in self.m:
                self.m[name] = np.zeros_like(p)
                self.v[name] = np.zeros_like(p)
            m, v = self.m[name], self.v[name]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            m_hat = m / bc1
            v_hat = v / bc2
            update = self.lr * (b1 * m_hat + (1.0 - b1) * g / bc1) / (np.sqrt(v_hat) + self.eps)
            p -= update.astype(p.dtype, copy=False)

    def state_arrays(self) -> dict[str, np.ndarray]:
        state = {"t": np.asarray(self.t, dtype=np.float64)}
        for name in self.m:
            state[f"m.{name}"] = self.m[name]
            state[f"v.{name}"] = self.v[name]
        return state

    def hyperparams(self) -> dict:
        return {"lr": self.lr, "beta1": self.beta1, "beta2": self.beta2, "eps": self.eps}

    def load_state_arrays(self, state: dict[str, np.ndarray]) -> None:
        self.t = int(np.asarray(state["t"]).item())
        self.m = {k[2:]: np.array(v) for k, v in state.items() if k.startswith("m.")}
        self.v = {k[2:]: np.array(v) for k, v in state.items() if k.startswith("v.")}


def nadam_step(state: NAdam, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> dict[str, np.ndarray]:
    state.step(params, grads)
    return params


class PlateauScheduler:
    """Multiply the learning rate by ``factor`` after ``patience`` epochs without improvement.

    The rate is always recomputed as ``lr0 * factor**k`` so repeated
    reductions do not drift.
    """

    def __init__(self, lr0: float = 1e-4, factor: float = 0.1, patience: int = 5, min_delta: float = 0.0):
        if patience < 1:
            raise ValueError("patience must be >= 1")
        self.lr0 = lr0
        self.factor = factor
        self.patience = patience
        self.min_delta = min_delta
        self.best = math.inf
        self.wait = 0
        self.reductions = 0

    @property
    def lr(self) -> float:
        return self.lr0 * self.factor ** self.reductions

    def epoch_end(self, val_loss: float) -> float:
        if val_loss < self.best - self.min_delta:
            self.best = val_loss
            self.wait = 0
        else:
            self.wait += 1
            if self.wait == self.patience:
                self.reductions += 1
                self.wait = 0
        return self.lr


def scheduler_epoch_end(sched: PlateauScheduler, val_loss: float) -> float:
    return sched.epoch_end(val_loss)


class EarlyStopper:
    """Track the best validation loss and keep a copy of the weights that produced it."""

    def __init__(self, patience: int = 10, min_delta: float = 0.0):
        if patience < 1:
            raise ValueError("patience must be >= 1")
        self.patience = patience
        self.min_delta = min_delta
        self.best = math.inf
        self.best_epoch = 0
        self.wait = 0
        self.epoch = 0
        self.best_state: Optional[dict] = None

    def check(self, val_loss: float, model=None) -> str:
        self.epoch += 1
        if val_loss < self.best - self.min_delta:
            self.best = val_loss
            self.best_epoch = self.epoch
            self.wait = 0
            if model is not None:
                self.best_state = model.state_dict()
            return "continue"
        self.wait += 1
        return "stop" if self.wait >= self.patience else "continue"

    def restore(self, model) -> None:
        if self.best_state is not None:
            model.load_state_dict(self.best_state)


def early_stop_check(stopper: EarlyStopper, val_loss: float, model=None) -> str:
    return stopper.check(val_loss, model)
