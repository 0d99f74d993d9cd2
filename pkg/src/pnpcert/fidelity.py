"""Smooth data-fidelity terms f(x) built from a linear forward model y ~ A x."""

from __future__ import annotations

import numpy as np

from pnpcert.errors import InvalidParameterError, ShapeError


class Fidelity:
    """Base: residual r = A x - y, value/gradient supplied by subclasses."""

    kind = "abstract"

    def __init__(self, A, y):
        A = np.atleast_2d(np.asarray(A, dtype=float))
        y = np.atleast_1d(np.asarray(y, dtype=float))
        if y.shape != (A.shape[0],):
            raise ShapeError(f"y has shape {y.shape}, A has {A.shape[0]} rows")
        self.A = A
        self.y = y
        self.dim = A.shape[1]
        self._spec_norm_sq = float(np.linalg.norm(A, 2)) ** 2

    def _res(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        if x.shape[-1] != self.dim:
            raise ShapeError(f"fidelity acts on R^{self.dim}, got shape {x.shape}")
        return x @ self.A.T - self.y

    def value(self, x) -> float:
        raise NotImplementedError

    def grad(self, x) -> np.ndarray:
        raise NotImplementedError

    @property
    def lipschitz_grad(self) -> float:
        raise NotImplementedError

    lower_bound = 0.0

    def to_dict(self) -> dict:
        return {"kind": self.kind, "A": self.A.tolist(), "y": self.y.tolist()}


class LeastSquares(Fidelity):
    """0.5 ||A x - y||^2, gradient Lipschitz constant ||A||_2^2."""

    kind = "least_squares"

    def value(self, x):
        r = self._res(x)
        return 0.5 * np.sum(r * r, axis=-1)

    def grad(self, x):
        return self._res(x) @ self.A

    @property
    def lipschitz_grad(self) -> float:
        return self._spec_norm_sq


class Welsch(Fidelity):
    """sum_j c^2 (1 - exp(-r_j^2 / (2 c^2))): smooth, bounded, nonconvex.

    rho''(r) = (1 - r^2/c^2) exp(-r^2/(2c^2)) lies in [-2 e^{-3/2}, 1], so the
    gradient is ||A||_2^2-Lipschitz for every c.
    """

    kind = "welsch"

    def __init__(self, A, y, c: float = 1.0):
        super().__init__(A, y)
        if not c > 0:
            raise InvalidParameterError(f"welsch scale must be positive, got {c}")
        self.c = float(c)

    def value(self, x):
        r = self._res(x)
        c2 = self.c**2
        return np.sum(c2 * -np.expm1(-r * r / (2 * c2)), axis=-1)

    def grad(self, x):
        r = self._res(x)
        return (r * np.exp(-r * r / (2 * self.c**2))) @ self.A

    @property
    def lipschitz_grad(self) -> float:
        return self._spec_norm_sq

    def to_dict(self) -> dict:
        return {**super().to_dict(), "c": self.c}


def f_value(fid: Fidelity, x) -> float:
    return fid.value(x)


def f_grad(fid: Fidelity, x) -> np.ndarray:
    return fid.grad(x)


def f_lipschitz(fid: Fidelity) -> float:
    return fid.lipschitz_grad


def fidelity_from_dict(doc: dict) -> Fidelity:
    kind = doc["kind"]
    if kind == "least_squares":
        return LeastSquares(doc["A"], doc["y"])
    if kind == "welsch":
        return Welsch(doc["A"], doc["y"], doc.get("c", 1.0))
    raise InvalidParameterError(f"unknown fidelity kind {kind!r}")
