"""Denoisers with gradient-step structure.

A denoiser ``D`` is written ``D = Id - grad g``.  When the residual
``grad g`` is L-Lipschitz with L < 1, ``D`` is the proximal operator of the
potential

    phi(x) = g(D^{-1}(x)) - 0.5 * ||D^{-1}(x) - x||^2,

with ``grad phi(x) = D^{-1}(x) - x``.  Everything here is vectorised over a
leading batch axis: ``apply`` accepts shape (n,) or (m, n).

The gauge ``g(0) = 0`` is used throughout.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np
from scipy.optimize import minimize_scalar

from pnpcert.errors import InvalidParameterError, NonConvergenceError, ShapeError
from pnpcert.priors import GmmPrior

DEFAULT_PROBES = 256
DEFAULT_TOL = 1e-12


def _fd_jacobian(fn: Callable, points: np.ndarray, step: float = 1e-6) -> np.ndarray:
    """Central-difference Jacobians of ``fn`` at each row of ``points``; shape (m, n, n)."""
    m, n = points.shape
    eye = np.eye(n) * step
    plus = (points[:, None, :] + eye[None]).reshape(m * n, n)
    minus = (points[:, None, :] - eye[None]).reshape(m * n, n)
    cols = (fn(plus) - fn(minus)).reshape(m, n, n) / (2 * step)
    return np.swapaxes(cols, 1, 2)


def _gauss_legendre_line(field: Callable, z: np.ndarray, rtol: float = 1e-10) -> float:
    """int_0^1 <field(t z), z> dt with node doubling until successive estimates agree."""
    prev = None
    nodes = 8
    while nodes <= 2048:
        t, w = np.polynomial.legendre.leggauss(nodes)
        t = 0.5 * (t + 1.0)
        vals = field(t[:, None] * z[None, :]) @ z
        est = 0.5 * float(w @ vals)
        if prev is not None and abs(est - prev) <= rtol * max(1.0, abs(est)):
            return est
        prev = est
        nodes *= 2
    return prev


class Denoiser:
    """Base class. Subclasses implement ``apply`` and may override the rest."""

    dim: int
    sigma: float
    kind: str = "abstract"

    def _check(self, v) -> np.ndarray:
        v = np.asarray(v, dtype=float)
        if v.ndim == 0 or v.shape[-1] != self.dim:
            raise ShapeError(f"denoiser acts on R^{self.dim}, got shape {v.shape}")
        return v

    def apply(self, v) -> np.ndarray:
        raise NotImplementedError

    def __call__(self, v) -> np.ndarray:
        return self.apply(v)

    def residual(self, v) -> np.ndarray:
        """grad g(v) = v - D(v)."""
        v = self._check(v)
        return v - self.apply(v)

    def jacobian(self, v) -> np.ndarray:
        v = self._check(v)
        pts = np.atleast_2d(v)
        jac = _fd_jacobian(self.apply, pts)
        return jac if v.ndim == 2 else jac[0]

    def residual_jacobian(self, v) -> np.ndarray:
        return np.eye(self.dim) - self.jacobian(v)

    # Lipschitz constant of the residual -------------------------------------

    def reference_prior(self) -> GmmPrior | None:
        return None

    def default_probes(self) -> np.ndarray:
        prior = self.reference_prior()
        if prior is None:
            return np.random.default_rng(0).standard_normal((DEFAULT_PROBES, self.dim))
        return prior.smooth(self.sigma).sample(0, DEFAULT_PROBES)

    def lipschitz_residual(self, probe_points=None) -> float:
        """Largest spectral norm of the residual Jacobian over the probes; cached."""
        if probe_points is None:
            probe_points = self.default_probes()
        pts = np.atleast_2d(self._check(probe_points))
        if pts.shape[0] == 0:
            raise InvalidParameterError("need at least one probe point")
        jac = np.eye(self.dim) - np.atleast_3d(self.jacobian(pts)).reshape(-1, self.dim, self.dim)
        value = float(np.max(np.linalg.norm(jac, ord=2, axis=(1, 2))))
        self._lipschitz = value
        return value

    @property
    def L(self) -> float:
        cached = getattr(self, "_lipschitz", None)
        return cached if cached is not None else self.lipschitz_residual()

    # Inverse and potential --------------------------------------------------

    def invert(self, x, tol: float = DEFAULT_TOL, z0=None, max_iter: int | None = None) -> np.ndarray:
        """Preimage z with ||D(z) - x|| <= tol by the contraction z <- x + grad g(z)."""
        x = self._check(x)
        if x.ndim != 1:
            return np.stack([self.invert(xi, tol, None if z0 is None else z0[i]) for i, xi in enumerate(x)])
        lip = self.L
        xnorm = float(np.linalg.norm(x))
        if max_iter is None:
            if lip <= 0.0:
                max_iter = 64
            elif lip < 1.0:
                ratio = tol / max(xnorm, tol)
                max_iter = int(math.ceil(math.log(ratio) / math.log(lip))) + 64 if ratio < 1 else 64
            else:
                max_iter = 10_000
        tol_eff = max(tol, 1e-14 * (1.0 + xnorm))
        z = x.copy() if z0 is None else np.array(z0, dtype=float)
        for _ in range(max_iter):
            z_next = x + self.residual(z)
            # ||D(z) - x|| equals the fixed-point step
            if np.linalg.norm(z_next - z) <= tol_eff:
                return z_next
            z = z_next
        raise NonConvergenceError(
            f"invert did not reach tol={tol:g} in {max_iter} iterations (L={lip:.4g}); "
            "the point may lie outside the denoiser's image"
        )

    def g_value(self, z) -> float:
        """g(z) under the gauge g(0) = 0, by line integration of the residual."""
        z = self._check(z)
        return _gauss_legendre_line(self.residual, z)

    def potential_phi(self, x, tol: float = DEFAULT_TOL, z0=None) -> float:
        return self.phi_and_grad(x, tol, z0)[0]

    def grad_phi(self, x, tol: float = DEFAULT_TOL, z0=None) -> np.ndarray:
        x = self._check(x)
        return self.invert(x, tol, z0) - x

    def phi_and_grad(self, x, tol: float = DEFAULT_TOL, z0=None):
        """(phi(x), grad phi(x), D^{-1}(x)) sharing a single inversion."""
        x = self._check(x)
        z = self.invert(x, tol, z0)
        d = z - x
        return self.g_value(z) - 0.5 * float(d @ d), d, z

    def phi_at_output(self, z) -> float:
        """phi(D(z)) without inversion: g(z) - 0.5 ||grad g(z)||^2."""
        r = self.residual(z)
        return self.g_value(z) - 0.5 * float(r @ r)

    def relax(self, alpha: float) -> "Denoiser":
        return relax(self, alpha)

    def perturb(self, bias: "BiasModel") -> "Denoiser":
        return perturb(self, bias)

    def to_dict(self) -> dict:
        raise NotImplementedError


class MmseDenoiser(Denoiser):
    """Exact posterior mean for a GMM prior under N(0, sigma^2 I) noise.

    D(v) = v + sigma^2 * score_{p_sigma}(v) (Tweedie), and the residual
    potential is g(v) = -sigma^2 (log p_sigma(v) - log p_sigma(0)).
    """

    kind = "mmse"

    def __init__(self, prior: GmmPrior, sigma: float):
        if not sigma > 0:
            raise InvalidParameterError(f"sigma must be positive, got {sigma}")
        self.prior = prior
        self.sigma = float(sigma)
        self.dim = prior.dim
        self.smoothed = prior.smooth(self.sigma)
        self._log_p0 = self.smoothed.log_density(np.zeros(self.dim))
        self._lipschitz = None
        if prior.n_components == 1:
            self._lipschitz = self._gaussian_lipschitz()

    def _gaussian_lipschitz(self) -> float:
        s2 = self.sigma**2
        return float(s2 / (np.min(np.linalg.eigvalsh(self.prior.covs[0])) + s2))

    def apply(self, v) -> np.ndarray:
        v = self._check(v)
        return v + self.sigma**2 * self.smoothed.score(v)

    def residual(self, v) -> np.ndarray:
        v = self._check(v)
        return -self.sigma**2 * self.smoothed.score(v)

    def jacobian(self, v) -> np.ndarray:
        v = self._check(v)
        return np.eye(self.dim) + self.sigma**2 * self.smoothed.hessian_log_density(v)

    def g_value(self, z) -> float:
        z = self._check(z)
        return -self.sigma**2 * (self.smoothed.log_density(z) - self._log_p0)

    def default_probes(self) -> np.ndarray:
        """Samples of p_sigma plus component means and pairwise midpoints.

        The residual Jacobian peaks between modes, where samples are rare.
        """
        mu = self.prior.means
        extra = [mu]
        if self.prior.n_components <= 64:
            i, j = np.triu_indices(self.prior.n_components, k=1)
            extra.append(0.5 * (mu[i] + mu[j]))
        return np.concatenate([super().default_probes(), *extra])

    def lipschitz_residual(self, probe_points=None) -> float:
        if probe_points is None and self.prior.n_components == 1:
            self._lipschitz = self._gaussian_lipschitz()
            return self._lipschitz
        value = super().lipschitz_residual(probe_points)
        if probe_points is None and self.prior.n_components <= 16:
            value = max(value, self._segment_sup())
            self._lipschitz = value
        return value

    def _residual_norm(self, pts) -> np.ndarray:
        jac = np.eye(self.dim) - np.atleast_3d(self.jacobian(pts)).reshape(-1, self.dim, self.dim)
        return np.linalg.norm(jac, ord=2, axis=(1, 2))

    def _segment_sup(self) -> float:
        """Max residual Jacobian norm along the lines through pairs of means.

        With a shared covariance the Jacobian depends on the responsibilities
        only, and for two components these sweep [0, 1] along that line, so the
        grid plus a bounded 1D refinement recovers the sup. Far from all modes
        the Jacobian tends to sigma^2 (Sigma + sigma^2 I)^{-1}, which is included.
        """
        mu = self.prior.means
        grid = np.linspace(-0.5, 1.5, 201)
        best = 0.0
        cov = self.prior.shared_covariance()
        if cov is not None:
            s2 = self.sigma**2
            best = s2 * float(np.linalg.eigvalsh(np.linalg.inv(cov + s2 * np.eye(self.dim)))[-1])
        for i, j in zip(*np.triu_indices(self.prior.n_components, k=1)):
            step = mu[j] - mu[i]
            vals = self._residual_norm(mu[i] + grid[:, None] * step)
            k = int(np.argmax(vals))
            lo, hi = grid[max(k - 1, 0)], grid[min(k + 1, len(grid) - 1)]
            res = minimize_scalar(lambda s: -self._residual_norm(mu[i] + s * step)[0],
                                  bounds=(lo, hi), method="bounded", options={"xatol": 1e-12})
            best = max(best, float(vals[k]), float(-res.fun))
        return best

    def lipschitz_bound(self) -> float | None:
        """Global upper bound on the residual Lipschitz constant.

        Available when all components share one covariance: the residual
        Jacobian is sigma^2 P - sigma^2 P Cov_r(mu) P with P = (Sigma + sigma^2 I)^{-1},
        and Cov_r(mu) is bounded by diam(means)^2 / 4.
        """
        cov = self.prior.shared_covariance()
        if cov is None:
            return None
        s2 = self.sigma**2
        eig = np.linalg.eigvalsh(np.linalg.inv(cov + s2 * np.eye(self.dim)))
        mu = self.prior.means
        diam2 = float(np.max(((mu[:, None, :] - mu[None, :, :]) ** 2).sum(-1)))
        upper = s2 * eig[-1]
        lower = s2 * eig[0] - s2 * eig[-1] ** 2 * diam2 / 4.0
        return float(max(upper, -lower))

    def reference_prior(self) -> GmmPrior:
        return self.prior

    def to_dict(self) -> dict:
        return {"kind": "mmse", "sigma": self.sigma, "prior": self.prior.to_dict()}


class LinearDenoiser(Denoiser):
    """D(v) = W v + b with symmetric W; closed-form inverse and potential."""

    kind = "linear"

    def __init__(self, matrix, offset=None, sigma: float = 1.0):
        w = np.atleast_2d(np.asarray(matrix, dtype=float))
        if w.shape[0] != w.shape[1] or np.max(np.abs(w - w.T)) > 1e-12:
            raise InvalidParameterError("linear denoiser needs a symmetric square matrix")
        self.matrix = 0.5 * (w + w.T)
        self.dim = w.shape[0]
        self.offset = np.zeros(self.dim) if offset is None else np.asarray(offset, dtype=float).reshape(self.dim)
        self.sigma = float(sigma)
        self._res = np.eye(self.dim) - self.matrix
        self._lipschitz = float(np.linalg.norm(self._res, 2))

    def apply(self, v) -> np.ndarray:
        v = self._check(v)
        return v @ self.matrix.T + self.offset

    def jacobian(self, v) -> np.ndarray:
        v = self._check(v)
        return np.broadcast_to(self.matrix, v.shape[:-1] + (self.dim, self.dim)).copy()

    def lipschitz_residual(self, probe_points=None) -> float:
        self._lipschitz = float(np.linalg.norm(self._res, 2))
        return self._lipschitz

    def invert(self, x, tol: float = DEFAULT_TOL, z0=None, max_iter=None) -> np.ndarray:
        x = self._check(x)
        return np.linalg.solve(self.matrix, (x - self.offset).T).T

    def g_value(self, z) -> float:
        z = self._check(z)
        return 0.5 * float(z @ self._res @ z) - float(self.offset @ z)

    def to_dict(self) -> dict:
        return {"kind": "linear", "matrix": self.matrix.tolist(), "offset": self.offset.tolist(), "sigma": self.sigma}


class RelaxedDenoiser(Denoiser):
    """alpha * D + (1 - alpha) * Id, i.e. residual alpha * grad g."""

    kind = "relaxed"

    def __init__(self, base: Denoiser, alpha: float):
        if not 0.0 < alpha <= 1.0:
            raise InvalidParameterError(f"alpha must lie in (0, 1], got {alpha}")
        self.base = base
        self.alpha = float(alpha)
        self.dim = base.dim
        self.sigma = base.sigma
        self._lipschitz = None
        base_l = getattr(base, "_lipschitz", None)
        if base_l is not None:
            self._lipschitz = self.alpha * base_l

    def apply(self, v) -> np.ndarray:
        v = self._check(v)
        return self.alpha * self.base.apply(v) + (1.0 - self.alpha) * v

    def residual(self, v) -> np.ndarray:
        return self.alpha * self.base.residual(v)

    def jacobian(self, v) -> np.ndarray:
        v = self._check(v)
        return self.alpha * self.base.jacobian(v) + (1.0 - self.alpha) * np.eye(self.dim)

    def lipschitz_residual(self, probe_points=None) -> float:
        self._lipschitz = self.alpha * self.base.lipschitz_residual(probe_points)
        return self._lipschitz

    def g_value(self, z) -> float:
        return self.alpha * self.base.g_value(z)

    def reference_prior(self):
        return self.base.reference_prior()

    def to_dict(self) -> dict:
        return {"kind": "relaxed", "alpha": self.alpha, "base": self.base.to_dict()}


@dataclass(frozen=True, eq=False)
class BiasModel:
    """Additive error field E(v) for a mismatched denoiser.

    ``constant``: E = scale * c.  ``linear``: E = scale * B v.
    ``wrong_prior``: E = MMSE_{p_hat}(v) - MMSE_p(v), rescaled so that its
    largest norm over the default probe set equals ``scale``.
    """

    kind: str
    c: np.ndarray | None = None
    B: np.ndarray | None = None
    prior: GmmPrior | None = None
    scale: float = 1.0

    def __post_init__(self):
        if self.kind not in ("constant", "linear", "wrong_prior"):
            raise InvalidParameterError(f"unknown bias kind {self.kind!r}")
        if self.kind == "constant":
            object.__setattr__(self, "c", np.atleast_1d(np.asarray(self.c, dtype=float)))
        if self.kind == "linear":
            object.__setattr__(self, "B", np.atleast_2d(np.asarray(self.B, dtype=float)))
        if self.kind == "wrong_prior" and self.prior is None:
            raise InvalidParameterError("wrong_prior bias needs a prior")

    @property
    def dim(self) -> int:
        if self.kind == "constant":
            return self.c.shape[0]
        if self.kind == "linear":
            return self.B.shape[0]
        return self.prior.dim

    @classmethod
    def constant(cls, c, scale: float = 1.0) -> "BiasModel":
        return cls("constant", c=c, scale=scale)

    @classmethod
    def linear(cls, B, scale: float = 1.0) -> "BiasModel":
        return cls("linear", B=B, scale=scale)

    @classmethod
    def wrong_prior(cls, prior: GmmPrior, scale: float = 1.0) -> "BiasModel":
        return cls("wrong_prior", prior=prior, scale=scale)

    def to_dict(self) -> dict:
        doc = {"kind": self.kind, "scale": self.scale}
        if self.kind == "constant":
            doc["c"] = self.c.tolist()
        elif self.kind == "linear":
            doc["B"] = self.B.tolist()
        else:
            doc["prior"] = self.prior.to_dict()
        return doc

    @classmethod
    def from_dict(cls, doc: dict) -> "BiasModel":
        kind = doc["kind"]
        scale = float(doc.get("scale", 1.0))
        if kind == "constant":
            return cls.constant(doc["c"], scale)
        if kind == "linear":
            return cls.linear(doc["B"], scale)
        if kind == "wrong_prior":
            return cls.wrong_prior(GmmPrior.from_dict(doc["prior"]), scale)
        raise InvalidParameterError(f"unknown bias kind {kind!r}")


def _root_mmse(d: Denoiser) -> MmseDenoiser | None:
    while not isinstance(d, MmseDenoiser):
        d = getattr(d, "base", None)
        if d is None:
            return None
    return d


class MismatchedDenoiser(Denoiser):
    """D_hat = D + E for a :class:`BiasModel` E."""

    kind = "mismatched"

    def __init__(self, base: Denoiser, bias: BiasModel):
        if bias.dim != base.dim:
            raise ShapeError(f"bias acts on R^{bias.dim}, denoiser on R^{base.dim}")
        self.base = base
        self.bias = bias
        self.dim = base.dim
        self.sigma = base.sigma
        self._lipschitz = None
        self._wrong = None
        self._factor = bias.scale
        if bias.kind == "wrong_prior":
            ref = _root_mmse(base)
            if ref is None:
                raise InvalidParameterError("wrong_prior bias needs an MMSE denoiser underneath")
            self._ref = ref
            self._wrong = MmseDenoiser(bias.prior, ref.sigma)
            probes = ref.default_probes()
            peak = float(np.max(np.linalg.norm(self._wrong.apply(probes) - ref.apply(probes), axis=-1)))
            self._factor = bias.scale / peak if peak > 0 else 0.0

    def error(self, v) -> np.ndarray:
        """E(v)."""
        v = self._check(v)
        b = self.bias
        if b.kind == "constant":
            return np.broadcast_to(b.scale * b.c, v.shape).copy()
        if b.kind == "linear":
            return b.scale * (v @ b.B.T)
        if self._factor == 0.0:
            return np.zeros_like(v)
        return self._factor * (self._wrong.apply(v) - self._ref.apply(v))

    def apply(self, v) -> np.ndarray:
        v = self._check(v)
        return self.base.apply(v) + self.error(v)

    def reference_prior(self):
        return self.base.reference_prior()

    def to_dict(self) -> dict:
        return {"kind": "mismatched", "bias": self.bias.to_dict(), "base": self.base.to_dict()}


def relax(d: Denoiser, alpha: float) -> Denoiser:
    """alpha * D + (1 - alpha) * Id; the residual Lipschitz constant scales by alpha."""
    if not 0.0 < alpha <= 1.0:
        raise InvalidParameterError(f"alpha must lie in (0, 1], got {alpha}")
    if isinstance(d, LinearDenoiser):
        return LinearDenoiser(alpha * d.matrix + (1 - alpha) * np.eye(d.dim), alpha * d.offset, d.sigma)
    return RelaxedDenoiser(d, alpha)


def perturb(d: Denoiser, bias: BiasModel) -> MismatchedDenoiser:
    return MismatchedDenoiser(d, bias)


def denoiser_from_dict(doc: dict) -> Denoiser:
    """Rebuild a denoiser from its JSON form.

    Nested form uses ``base``; the flat form
    ``{"kind", "sigma", "prior", "bias", "alpha"}`` builds the MMSE denoiser,
    perturbs it when ``bias`` is present and relaxes it when ``alpha`` < 1.
    """
    kind = doc["kind"]
    if kind == "linear":
        return LinearDenoiser(doc["matrix"], doc.get("offset"), doc.get("sigma", 1.0))
    if kind == "mmse" or "base" not in doc:
        d: Denoiser = MmseDenoiser(GmmPrior.from_dict(doc["prior"]), doc["sigma"])
        if kind == "mmse":
            return d
        if doc.get("bias") is not None:
            d = perturb(d, BiasModel.from_dict(doc["bias"]))
        if doc.get("alpha") is not None and float(doc["alpha"]) != 1.0:
            d = relax(d, float(doc["alpha"]))
        if kind == "equivariant":
            from pnpcert.equivariance import wrap_equivariant
            from pnpcert.groups import GroupAction

            d = wrap_equivariant(d, GroupAction.from_dict(doc["group"], d.dim), doc.get("mode", "exact"))
        return d
    base = denoiser_from_dict(doc["base"])
    if kind == "relaxed":
        return relax(base, float(doc["alpha"]))
    if kind == "mismatched":
        return perturb(base, BiasModel.from_dict(doc["bias"]))
    if kind == "equivariant":
        from pnpcert.equivariance import wrap_equivariant
        from pnpcert.groups import GroupAction

        return wrap_equivariant(base, GroupAction.from_dict(doc["group"], base.dim), doc.get("mode", "exact"))
    raise InvalidParameterError(f"unknown denoiser kind {kind!r}")
