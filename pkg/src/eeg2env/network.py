"""Shared plumbing for networks built on the autodiff engine: a named
parameter registry with freeze/thaw, array import/export, and hashing."""

from __future__ import annotations

import hashlib
from contextlib import contextmanager

import numpy as np

from .autodiff import Tensor
from .errors import DimensionError, ParameterError


def he_conv(rng: np.random.Generator, c_out: int, c_in: int, k: int) -> np.ndarray:
    return rng.normal(0.0, np.sqrt(2.0 / (c_in * k)), size=(c_out, c_in, k))


def he_dense(rng: np.random.Generator, g: int, f: int) -> np.ndarray:
    return rng.normal(0.0, np.sqrt(2.0 / f), size=(g, f))


def xavier_dense(rng: np.random.Generator, g: int, f: int) -> np.ndarray:
    return rng.normal(0.0, np.sqrt(1.0 / f), size=(g, f))


class Network:
    """Base class: subclasses register parameters under dotted names."""

    def __init__(self):
        self._params: dict[str, Tensor] = {}

    def _register(self, name: str, value: np.ndarray) -> Tensor:
        if name in self._params:
            raise ParameterError(f"parameter {name!r} registered twice")
        t = Tensor(value, requires_grad=True)
        self._params[name] = t
        return t

    def parameters(self) -> dict[str, Tensor]:
        return dict(self._params)

    def set_trainable(self, flag: bool) -> None:
        """Toggle gradient tracking for every parameter.

        A frozen network still evaluates; backward passes simply treat its
        parameters as constants, so they can never accumulate gradients.
        """
        for t in self._params.values():
            t.requires_grad = flag

    def export_arrays(self) -> dict[str, np.ndarray]:
        return {name: t.data.copy() for name, t in self._params.items()}

    def load_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        if set(arrays) != set(self._params):
            missing = sorted(set(self._params) - set(arrays))
            extra = sorted(set(arrays) - set(self._params))
            raise ParameterError(f"parameter names differ: missing={missing}, unexpected={extra}")
        for name, value in arrays.items():
            slot = self._params[name]
            if slot.data.shape != value.shape:
                raise DimensionError(
                    f"parameter {name!r}: checkpoint shape {value.shape} != model shape {slot.data.shape}")
            slot.data = np.asarray(value, dtype=np.float64).copy()
            slot.grad = None

    def checksum(self) -> str:
        """SHA-256 over all parameter bytes in name order."""
        h = hashlib.sha256()
        for name in sorted(self._params):
            h.update(name.encode())
            h.update(np.ascontiguousarray(self._params[name].data).tobytes())
        return h.hexdigest()


@contextmanager
def frozen(net: Network):
    """Evaluate net without recording graphs; prior flags are restored."""
    flags = {name: t.requires_grad for name, t in net._params.items()}
    net.set_trainable(False)
    try:
        yield net
    finally:
        for name, t in net._params.items():
            t.requires_grad = flags[name]
