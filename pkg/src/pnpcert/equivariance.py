"""Group-averaged denoisers and the bias/variance split of their error."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from pnpcert.denoisers import Denoiser
from pnpcert.errors import InvalidParameterError, ShapeError
from pnpcert.groups import GroupAction, apply_transform, inverse_transform


class EquivariantDenoiser(Denoiser):
    """v -> mean_g T_g^{-1}(D(T_g v)) over the group (exact) or a seeded subsample."""

    kind = "equivariant"

    def __init__(self, base: Denoiser, group: GroupAction, mode="exact"):
        if group.dim != base.dim:
            raise ShapeError(f"group acts on R^{group.dim}, denoiser on R^{base.dim}")
        self.base = base
        self.group = group
        self.dim = base.dim
        self.sigma = base.sigma
        self._lipschitz = None
        if mode == "exact":
            self.mode = "exact"
            self._elements = group.elements
        else:
            _, count, seed = mode
            if count < 1:
                raise InvalidParameterError("sampled mode needs count >= 1")
            self.mode = ("sampled", int(count), int(seed))
            self._elements = None

    def _draw(self):
        if self._elements is not None:
            return self._elements
        _, count, seed = self.mode
        idx = np.random.default_rng(seed).integers(len(self.group), size=count)
        return [self.group.elements[i] for i in idx]

    def transformed_outputs(self, v) -> np.ndarray:
        """T_g^{-1}(D(T_g v)) for every element, stacked on a new leading axis."""
        v = self._check(v)
        elems = self._draw()
        moved = np.stack([apply_transform(g, v) for g in elems])
        out = self.base.apply(moved.reshape(-1, self.dim)).reshape(moved.shape)
        return np.stack([inverse_transform(g, o) for g, o in zip(elems, out)])

    def apply(self, v) -> np.ndarray:
        return self.transformed_outputs(v).mean(axis=0)

    def reference_prior(self):
        return self.base.reference_prior()

    def to_dict(self) -> dict:
        mode = self.mode if self.mode == "exact" else list(self.mode)
        return {"kind": "equivariant", "group": self.group.to_dict(), "mode": mode, "base": self.base.to_dict()}


def wrap_equivariant(d: Denoiser, group: GroupAction, mode="exact") -> EquivariantDenoiser:
    if isinstance(mode, list):
        mode = tuple(mode)
    return EquivariantDenoiser(d, group, mode)


@dataclass(frozen=True)
class EquivarianceReport:
    max_violation: float
    passed: bool


def check_equivariance(d: Denoiser, group: GroupAction, samples: int, tol: float, seed: int = 0) -> EquivarianceReport:
    """max over sampled x and all g of ||T_g^{-1}(D(T_g x)) - D(x)||."""
    if samples < 1:
        raise InvalidParameterError("samples must be >= 1")
    prior = d.reference_prior()
    if prior is not None:
        xs = prior.smooth(d.sigma).sample(seed, samples)
    else:
        xs = np.random.default_rng(seed).standard_normal((samples, d.dim))
    ref = d.apply(xs)
    worst = 0.0
    for g in group.elements:
        back = inverse_transform(g, d.apply(apply_transform(g, xs)))
        worst = max(worst, float(np.max(np.linalg.norm(back - ref, axis=-1))))
    return EquivarianceReport(worst, worst <= tol)


@dataclass(frozen=True)
class BiasDecomposition:
    """||mean_g V_g||^2 = mean_g ||V_g||^2 - Var_g(V_g) with V_g = a_g^T E(T_g x)."""

    mean_sq_bias: float
    avg_sq_bias: float
    variance_gain: float
    anisotropy: float

    @property
    def identity_gap(self) -> float:
        return abs(self.mean_sq_bias + self.variance_gain - self.avg_sq_bias)


def bias_decompose(d_hat: Denoiser, d_target: Denoiser, group: GroupAction, x) -> BiasDecomposition:
    """Split the squared bias of the group-averaged denoiser at ``x``.

    ``anisotropy`` is max_g ||V_g - V_identity||, the witness that the bias
    field is not constant along the orbit.
    """
    x = np.asarray(x, dtype=float)
    vs = []
    for g in group.elements:
        u = apply_transform(g, x)
        err = d_hat.apply(u) - d_target.apply(u)
        vs.append(g.a.T @ err)
    vs = np.stack(vs)
    mean = vs.mean(axis=0)
    avg_sq = float(np.mean(np.sum(vs**2, axis=1)))
    var = float(np.mean(np.sum((vs - mean) ** 2, axis=1)))
    ident = vs[group.identity_index()]
    aniso = float(np.max(np.linalg.norm(vs - ident, axis=1)))
    return BiasDecomposition(float(mean @ mean), avg_sq, var, aniso)
