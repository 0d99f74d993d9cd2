"""Gaussian mixture priors with closed-form smoothing, scores and Hessians.

Every denoiser in the package is built on top of a :class:`GmmPrior`, so the
"target" MMSE denoiser is available exactly through Tweedie's formula.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from pnpcert.errors import InvalidParameterError, ShapeError

_LOG_2PI = math.log(2.0 * math.pi)


def _logsumexp(a: np.ndarray, keepdims: bool = False) -> np.ndarray:
    # scipy.special.logsumexp costs ~100us per call on tiny arrays; this runs in the inner solver loop
    m = np.max(a, axis=-1, keepdims=True)
    out = np.log(np.sum(np.exp(a - m), axis=-1, keepdims=True)) + m
    return out if keepdims else out[..., 0]


@dataclass(frozen=True, eq=False)
class GmmPrior:
    """Weighted Gaussian mixture on R^n.

    ``weights`` has shape (K,), ``means`` (K, n) and ``covs`` (K, n, n).
    Cholesky factors, precisions and log-determinants are computed once at
    construction.
    """

    weights: np.ndarray
    means: np.ndarray
    covs: np.ndarray
    _chol: np.ndarray = field(init=False, repr=False)
    _prec: np.ndarray = field(init=False, repr=False)
    _log_norm: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        w = np.atleast_1d(np.asarray(self.weights, dtype=float)).copy()
        mu = np.asarray(self.means, dtype=float).copy()
        if mu.ndim == 1:
            mu = mu[:, None] if w.size > 1 or mu.size == 1 else mu[None, :]
        cov = np.asarray(self.covs, dtype=float).copy()
        k, n = mu.shape
        if cov.ndim == 2 and k == 1 and cov.shape == (n, n):
            cov = cov[None]
        if cov.ndim == 1 and n == 1:
            cov = cov.reshape(k, 1, 1)
        if w.shape != (k,) or cov.shape != (k, n, n):
            raise ShapeError(
                f"inconsistent mixture shapes: weights {w.shape}, means {mu.shape}, covs {cov.shape}"
            )
        if np.any(w <= 0) or abs(w.sum() - 1.0) > 1e-12:
            raise InvalidParameterError("mixture weights must be positive and sum to 1")
        if np.max(np.abs(cov - np.swapaxes(cov, 1, 2)), initial=0.0) > 1e-12:
            raise InvalidParameterError("covariances must be symmetric")
        cov = 0.5 * (cov + np.swapaxes(cov, 1, 2))
        try:
            chol = np.linalg.cholesky(cov)
        except np.linalg.LinAlgError as exc:
            raise InvalidParameterError("covariances must be positive definite") from exc
        if np.min(np.linalg.eigvalsh(cov)) <= 0:
            raise InvalidParameterError("covariances must be positive definite")
        eye = np.broadcast_to(np.eye(n), cov.shape)
        linv = np.linalg.solve(chol, eye)
        prec = np.swapaxes(linv, 1, 2) @ linv
        prec = 0.5 * (prec + np.swapaxes(prec, 1, 2))
        logdet = 2.0 * np.log(np.diagonal(chol, axis1=1, axis2=2)).sum(axis=1)
        log_norm = np.log(w) - 0.5 * logdet - 0.5 * n * _LOG_2PI
        for arr in (w, mu, cov, chol, prec, log_norm):
            arr.setflags(write=False)
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "means", mu)
        object.__setattr__(self, "covs", cov)
        object.__setattr__(self, "_chol", chol)
        object.__setattr__(self, "_prec", prec)
        object.__setattr__(self, "_log_norm", log_norm)

    @property
    def dim(self) -> int:
        return self.means.shape[1]

    @property
    def n_components(self) -> int:
        return self.weights.shape[0]

    @property
    def precisions(self) -> np.ndarray:
        return self._prec

    @classmethod
    def gaussian(cls, mean, cov) -> "GmmPrior":
        mean = np.atleast_1d(np.asarray(mean, dtype=float))
        cov = np.atleast_2d(np.asarray(cov, dtype=float))
        return cls(np.ones(1), mean[None, :], cov[None])

    def _check(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        if x.ndim == 0 or x.shape[-1] != self.dim:
            raise ShapeError(f"expected trailing dimension {self.dim}, got shape {x.shape}")
        return x

    def _terms(self, x):
        # diff_i = mu_i - x, s_i = P_i diff_i, log of weighted component densities
        diff = self.means - x[..., None, :]
        s = (self._prec @ diff[..., None])[..., 0]
        quad = np.sum(diff * s, axis=-1)
        return s, self._log_norm - 0.5 * quad

    def log_density(self, x) -> np.ndarray | float:
        x = self._check(x)
        _, logc = self._terms(x)
        out = _logsumexp(logc)
        return float(out) if out.ndim == 0 else out

    def responsibilities(self, x) -> np.ndarray:
        x = self._check(x)
        _, logc = self._terms(x)
        return np.exp(logc - _logsumexp(logc, keepdims=True))

    def score(self, x) -> np.ndarray:
        """Gradient of the log-density, sum_i r_i(x) P_i (mu_i - x)."""
        x = self._check(x)
        s, logc = self._terms(x)
        r = np.exp(logc - np.max(logc, axis=-1, keepdims=True))
        r /= np.sum(r, axis=-1, keepdims=True)
        return (r[..., None, :] @ s)[..., 0, :]

    def hessian_log_density(self, x) -> np.ndarray:
        """Hessian of log p at ``x``: -E_r[P_i] + Cov_r(s_i)."""
        x = self._check(x)
        s, logc = self._terms(x)
        r = np.exp(logc - _logsumexp(logc, keepdims=True))
        mean_s = np.einsum("...k,...ki->...i", r, s)
        second = np.einsum("...k,...ki,...kj->...ij", r, s, s)
        avg_prec = np.einsum("...k,kij->...ij", r, self._prec)
        return -avg_prec + second - mean_s[..., :, None] * mean_s[..., None, :]

    def smooth(self, sigma: float) -> "GmmPrior":
        """Law of x + e with e ~ N(0, sigma^2 I)."""
        if not sigma > 0:
            raise InvalidParameterError(f"sigma must be positive, got {sigma}")
        return GmmPrior(self.weights, self.means, self.covs + sigma**2 * np.eye(self.dim))

    def sample(self, seed: int, count: int) -> np.ndarray:
        if count < 1:
            raise InvalidParameterError("count must be >= 1")
        rng = np.random.default_rng(seed)
        labels = rng.choice(self.n_components, size=count, p=self.weights)
        noise = rng.standard_normal((count, self.dim))
        return self.means[labels] + np.einsum("kij,kj->ki", self._chol[labels], noise)

    def symmetrize(self, group) -> "GmmPrior":
        """Orbit mixture: every component pushed through every group element.

        The result is exactly invariant under ``group``.
        """
        if group.dim != self.dim:
            raise ShapeError(f"group acts on R^{group.dim}, prior lives on R^{self.dim}")
        order = len(group.elements)
        weights, means, covs = [], [], []
        for a, c in group.elements:
            weights.append(self.weights / order)
            means.append(self.means @ a.T + c)
            covs.append(a @ self.covs @ a.T)
        w = np.concatenate(weights)
        return GmmPrior(w / w.sum(), np.concatenate(means), np.concatenate(covs))

    def shared_covariance(self) -> np.ndarray | None:
        """The common covariance if every component has the same one (to 1e-12)."""
        if np.max(np.abs(self.covs - self.covs[0]), initial=0.0) <= 1e-12:
            return self.covs[0]
        return None

    def to_dict(self) -> dict:
        return {
            "dim": self.dim,
            "components": [
                {"weight": float(w), "mean": m.tolist(), "cov": c.tolist()}
                for w, m, c in zip(self.weights, self.means, self.covs)
            ],
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "GmmPrior":
        comps = doc["components"]
        dim = int(doc["dim"])
        weights = np.array([c["weight"] for c in comps], dtype=float)
        means = np.array([c["mean"] for c in comps], dtype=float).reshape(len(comps), dim)
        covs = np.array([c["cov"] for c in comps], dtype=float).reshape(len(comps), dim, dim)
        return cls(weights, means, covs)

    def to_json(self) -> str:
        return json.dumps(self.to_dict())

    @classmethod
    def from_json(cls, text: str) -> "GmmPrior":
        return cls.from_dict(json.loads(text))


def smooth(prior: GmmPrior, sigma: float) -> GmmPrior:
    return prior.smooth(sigma)


def symmetrize(prior: GmmPrior, group) -> GmmPrior:
    return prior.symmetrize(group)


def random_gmm(
    dim: int,
    components: int,
    seed: int,
    mean_scale: float = 1.0,
    cov_range: Sequence[float] = (0.5, 1.5),
    shared_cov: bool = True,
) -> GmmPrior:
    """Random mixture with covariance eigenvalues drawn from ``cov_range``."""
    rng = np.random.default_rng(seed)

    def spd():
        q, _ = np.linalg.qr(rng.standard_normal((dim, dim)))
        eig = rng.uniform(cov_range[0], cov_range[1], size=dim)
        c = (q * eig) @ q.T
        return 0.5 * (c + c.T)

    weights = rng.dirichlet(np.full(components, 2.0))
    means = mean_scale * rng.standard_normal((components, dim))
    if shared_cov:
        c = spd()
        covs = np.repeat(c[None], components, axis=0)
    else:
        covs = np.stack([spd() for _ in range(components)])
    return GmmPrior(weights, means, covs)
