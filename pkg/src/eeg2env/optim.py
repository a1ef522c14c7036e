"""Adaptive-moment optimization and global gradient clipping.

Training alternates adversarially and is prone to gradient spikes, so the
clip operates on the global norm across a whole parameter collection, and
the optimizer refuses to fold a non-finite gradient into its moments.
"""

from __future__ import annotations

import numpy as np

from .autodiff import Tensor
from .errors import ParameterError, TrainingAbort


class Adam:
    """Bias-corrected adaptive moments over a named parameter collection."""

    def __init__(self, params: dict[str, Tensor], lr: float, *,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        if lr <= 0:
            raise ParameterError(f"Adam: lr must be positive, got {lr}")
        if not (0.0 <= beta1 < 1.0 and 0.0 <= beta2 < 1.0):
            raise ParameterError(f"Adam: betas must lie in [0, 1), got {beta1}, {beta2}")
        if eps <= 0:
            raise ParameterError(f"Adam: eps must be positive, got {eps}")
        self.params = dict(params)
        self.lr = float(lr)
        self.beta1, self.beta2, self.eps = float(beta1), float(beta2), float(eps)
        self.t = 0
        self._m = {k: np.zeros_like(p.data) for k, p in self.params.items()}
        self._v = {k: np.zeros_like(p.data) for k, p in self.params.items()}

    def step(self) -> None:
        """Apply one update from the gradients currently on the parameters.

        Parameters whose grad is None are skipped entirely (their moments
        do not decay), so partial graphs do not drift untouched weights.
        """
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for name, p in self.params.items():
            g = p.grad
            if g is None:
                continue
            if not np.isfinite(g).all():
                raise TrainingAbort(f"non-finite gradient in parameter {name!r}")
            m = self._m[name]
            v = self._v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            p.data = p.data - self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def export_state(self) -> dict:
        return {
            "t": self.t,
            "m": {k: a.copy() for k, a in self._m.items()},
            "v": {k: a.copy() for k, a in self._v.items()},
        }

    def load_state(self, state: dict) -> None:
        for slot in ("m", "v"):
            if set(state[slot]) != set(self.params):
                raise ParameterError(f"Adam: moment names in {slot!r} do not match parameters")
        for name, p in self.params.items():
            if state["m"][name].shape != p.data.shape or state["v"][name].shape != p.data.shape:
                raise ParameterError(f"Adam: moment shape mismatch for {name!r}")
        self.t = int(state["t"])
        self._m = {k: np.asarray(a, dtype=np.float64).copy() for k, a in state["m"].items()}
        self._v = {k: np.asarray(a, dtype=np.float64).copy() for k, a in state["v"].items()}


def clip_gradients(params: dict[str, Tensor], max_norm: float) -> float:
    """Scale all gradients so their joint L2 norm is at most max_norm.

    Returns the pre-clip norm.  A non-finite norm clips nothing; the
    following optimizer step aborts with the offending parameter's name.
    """
    if max_norm <= 0:
        raise ParameterError(f"clip_gradients: max_norm must be positive, got {max_norm}")
    total = 0.0
    grads = [p.grad for p in params.values() if p.grad is not None]
    for g in grads:
        total += float((g * g).sum())
    norm = float(np.sqrt(total))
    if np.isfinite(norm) and norm > max_norm:
        scale = max_norm / norm
        for g in grads:
            g *= scale
    return norm
