"""Nominal controllers exposed to the filters only through ``__call__``."""

from __future__ import annotations

import importlib
from dataclasses import dataclass

import numpy as np


def _relu(y):
    return np.maximum(y, 0.0)


@dataclass(frozen=True)
class LinearNominal:
    """u = K x (+ u0)."""

    gain: np.ndarray
    offset: np.ndarray | None = None

    def __call__(self, X):
        X = np.atleast_2d(np.asarray(X, dtype=float))
        K = np.atleast_2d(np.asarray(self.gain, dtype=float))
        U = X @ K.T
        if self.offset is not None:
            U = U + np.asarray(self.offset, dtype=float)
        return U


@dataclass(frozen=True)
class ZeroNominal:
    m: int = 1

    def __call__(self, X):
        return np.zeros((np.atleast_2d(X).shape[0], self.m))


@dataclass(frozen=True)
class NnNominal:
    """Two-layer rectifier network relu(W2 relu(W1 x + b1) + b2)."""

    W1: np.ndarray
    b1: np.ndarray
    W2: np.ndarray
    b2: np.ndarray

    def __call__(self, X):
        X = np.atleast_2d(np.asarray(X, dtype=float))
        W1 = np.atleast_2d(np.asarray(self.W1, dtype=float))
        W2 = np.atleast_2d(np.asarray(self.W2, dtype=float))
        h = _relu(X @ W1.T + np.asarray(self.b1, dtype=float))
        return _relu(h @ W2.T + np.asarray(self.b2, dtype=float))


class BlackBox:
    """Opaque wrapper: only evaluations of the wrapped policy are reachable."""

    __slots__ = ("_call",)

    def __init__(self, policy):
        object.__setattr__(self, "_call", policy.__call__ if hasattr(policy, "__call__") else policy)

    def __call__(self, X):
        return np.asarray(self._call(X), dtype=float)

    def __setattr__(self, name, value):
        raise AttributeError("BlackBox is read-only")

    def __repr__(self):
        return "BlackBox(<opaque>)"


def load_command(target: str):
    """Import ``package.module:function`` as an external black-box controller."""
    module, _, attr = target.partition(":")
    if not module or not attr:
        raise ValueError(f"expected 'module:function', got {target!r}")
    return BlackBox(getattr(importlib.import_module(module), attr))
