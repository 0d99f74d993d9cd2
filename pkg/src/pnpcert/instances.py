"""Seeded random problem instances for the certification batches.

Every generator takes an integer seed and returns a :class:`ProblemSpec`
(plus the group for equivariant runs). Priors are symmetrized mixtures with a
group-invariant shared covariance, so the target residual has the global
Lipschitz bound of :meth:`MmseDenoiser.lipschitz_bound`.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from pnpcert.denoisers import BiasModel, Denoiser, MmseDenoiser, perturb, relax
from pnpcert.equivariance import wrap_equivariant
from pnpcert.fidelity import Fidelity, LeastSquares, Welsch
from pnpcert.groups import GroupAction, make_group
from pnpcert.priors import GmmPrior
from pnpcert.solver import ProblemSpec

DIMS = (1, 2, 4, 8)
BIAS_KINDS = ("constant", "linear", "wrong_prior")
MAX_BIAS = 0.05
L_CAP = 0.9


@dataclass
class Instance:
    spec: ProblemSpec
    group: GroupAction | None
    meta: dict


def default_group(n: int, rng: np.random.Generator) -> GroupAction:
    """sign_flip, or cyclic shifts for n >= 2 (picked at random)."""
    if n == 1 or rng.random() < 0.5:
        return make_group("sign_flip", n)
    return make_group("cyclic_shift", n)


def invariant_prior(n: int, group: GroupAction, rng: np.random.Generator, components: int = 2,
                    mean_scale: float = 1.5, var_range=(0.3, 1.5)) -> GmmPrior:
    """Random mixture pushed through ``group``; covariance s I + b 11^T (invariant
    under signed permutations only when b = 0, so b is used for plain permutations)."""
    s = rng.uniform(*var_range)
    cov = s * np.eye(n)
    signed = any(np.any(g.a < 0) for g in group.elements)
    if n > 1 and not signed:
        cov = cov + rng.uniform(0.0, 0.5 * s) * np.ones((n, n))
    weights = rng.dirichlet(np.full(components, 2.0))
    means = mean_scale * rng.standard_normal((components, n))
    covs = np.repeat(cov[None], components, axis=0)
    return GmmPrior(weights, means, covs).symmetrize(group)


def target_denoiser(prior: GmmPrior, sigma: float, cap: float = L_CAP) -> tuple[Denoiser, float]:
    """MMSE denoiser, relaxed when its residual bound is not below ``cap``."""
    d = MmseDenoiser(prior, sigma)
    bound = d.lipschitz_bound()
    alpha = 1.0
    if bound is not None and bound >= cap:
        alpha = 0.8 * cap / bound
        d = relax(d, alpha)
    return d, alpha


def random_operator(n: int, rng: np.random.Generator, norm_sq_range=(0.5, 0.95), m: int | None = None) -> np.ndarray:
    m = n if m is None else m
    A = rng.standard_normal((m, n))
    norm_sq = rng.uniform(*norm_sq_range)
    return A * np.sqrt(norm_sq) / np.linalg.norm(A, 2)


def random_fidelity(n: int, rng: np.random.Generator, kind: str | None = None, A=None) -> Fidelity:
    kind = kind or ("least_squares" if rng.random() < 0.5 else "welsch")
    A = random_operator(n, rng) if A is None else A
    x_true = 1.5 * rng.standard_normal(n)
    y = A @ x_true + 0.1 * rng.standard_normal(A.shape[0])
    if kind == "least_squares":
        return LeastSquares(A, y)
    return Welsch(A, y, c=rng.uniform(0.5, 2.0))


def random_bias(kind: str, n: int, rng: np.random.Generator, prior: GmmPrior, max_norm: float = MAX_BIAS) -> BiasModel:
    """Bias field with sup-norm (or operator norm, for ``linear``) at most ``max_norm``."""
    size = max_norm * rng.uniform(0.3, 1.0)
    if kind == "constant":
        c = rng.standard_normal(n)
        return BiasModel.constant(c / np.linalg.norm(c), size)
    if kind == "linear":
        B = rng.standard_normal((n, n))
        return BiasModel.linear(B / np.linalg.norm(B, 2), size)
    # wrong prior: means shifted, weights redrawn
    wrong = GmmPrior(
        rng.dirichlet(np.full(prior.n_components, 2.0)),
        prior.means + 0.5 * rng.standard_normal(prior.means.shape),
        prior.covs,
    )
    return BiasModel.wrong_prior(wrong, size)


def theorem1_instance(seed: int, iterations: int = 500) -> Instance:
    """Mismatched PnP-PGD instance: dims cycle through 1, 2, 4, 8 and bias kinds
    through constant, linear, wrong_prior."""
    rng = np.random.default_rng(seed)
    n = DIMS[seed % len(DIMS)]
    kind = BIAS_KINDS[(seed // len(DIMS)) % len(BIAS_KINDS)]
    group = default_group(n, rng)
    prior = invariant_prior(n, group, rng)
    sigma = rng.uniform(0.4, 1.0)
    target, alpha = target_denoiser(prior, sigma)
    fid = random_fidelity(n, rng)
    lam = rng.uniform(0.3, 0.9) / fid.lipschitz_grad
    bias = random_bias(kind, n, rng, prior)
    spec = ProblemSpec(fid, target, perturb(target, bias), lam, 2.0 * rng.standard_normal(n), iterations)
    meta = {"seed": seed, "dim": n, "bias": kind, "fidelity": fid.kind, "group": group.name, "sigma": sigma, "alpha": alpha}
    return Instance(spec, group, meta)


def theorem2_instance(seed: int, iterations: int = 1000) -> Instance:
    """Matched instance tuned for slow linear convergence.

    A wide prior relative to sigma keeps the denoiser Jacobian near the identity
    and a small singular value of A keeps 1 - lambda s^2 near one, so the
    gradient decays over hundreds of iterations instead of hitting round-off.
    """
    rng = np.random.default_rng(seed)
    n = DIMS[seed % len(DIMS)]
    group = default_group(n, rng)
    prior = invariant_prior(n, group, rng, mean_scale=1.0, var_range=(3.0, 6.0))
    sigma = rng.uniform(0.2, 0.4)
    target, alpha = target_denoiser(prior, sigma)
    q, _ = np.linalg.qr(rng.standard_normal((n, n)))
    sv = np.sqrt(rng.uniform(0.01, 0.9, size=n))
    sv[0] = np.sqrt(rng.uniform(0.6, 0.9))
    sv[-1] = np.sqrt(rng.uniform(0.005, 0.02)) if n > 1 else sv[0]
    r, _ = np.linalg.qr(rng.standard_normal((n, n)))
    A = (q * sv) @ r.T
    kind = "least_squares" if seed % 2 == 0 else "welsch"
    fid = random_fidelity(n, rng, kind=kind, A=A)
    # in 1D there is no small singular value, so the step itself is kept short
    lam = rng.uniform(0.5, 0.9) if n > 1 else rng.uniform(0.005, 0.03)
    lam /= fid.lipschitz_grad
    spec = ProblemSpec(fid, target, target, lam, 2.0 * rng.standard_normal(n), iterations)
    meta = {"seed": seed, "dim": n, "fidelity": fid.kind, "group": group.name, "sigma": sigma, "alpha": alpha}
    return Instance(spec, group, meta)


def theorem3_instance(seed: int, iterations: int = 300, bias_kind: str | None = None) -> Instance:
    """Equivariant instance. Even seeds: 2x2 image deblurring with the dihedral
    group. Odd seeds: sign flips or cyclic shifts in 1, 2, 4 or 8 dims."""
    rng = np.random.default_rng(seed)
    kind = bias_kind or BIAS_KINDS[seed % len(BIAS_KINDS)]
    if seed % 2 == 0:
        n = 4
        group = make_group("dihedral_image", 2, 2)
        A = blur_2x2(rng.uniform(0.1, 0.3))
    else:
        n = DIMS[(seed // 2) % len(DIMS)]
        group = default_group(n, rng)
        A = random_operator(n, rng)
    prior = invariant_prior(n, group, rng)
    sigma = rng.uniform(0.4, 1.0)
    target, alpha = target_denoiser(prior, sigma)
    fid = random_fidelity(n, rng, kind="least_squares", A=A)
    lam = rng.uniform(0.3, 0.9) / fid.lipschitz_grad
    bias = random_bias(kind, n, rng, prior)
    run = wrap_equivariant(perturb(target, bias), group, "exact")
    spec = ProblemSpec(fid, target, run, lam, 2.0 * rng.standard_normal(n), iterations)
    meta = {"seed": seed, "dim": n, "bias": kind, "group": group.name, "sigma": sigma, "alpha": alpha}
    return Instance(spec, group, meta)


def plain_twin(spec: ProblemSpec) -> ProblemSpec:
    """Same problem run with the unwrapped mismatched denoiser."""
    return ProblemSpec(spec.fidelity, spec.target_denoiser, spec.run_denoiser.base, spec.lam, spec.x0,
                       spec.iterations, spec.f_star_starts, spec.f_star_steps, spec.f_star_margin, spec.invert_tol)


def blur_2x2(w: float) -> np.ndarray:
    """Row-major 2x2 image blur: each pixel keeps 1 - 2w and takes w from both
    edge neighbours (periodic). Commutes with the dihedral group; norm 1."""
    nbr = np.array([[0, 1, 1, 0], [1, 0, 0, 1], [1, 0, 0, 1], [0, 1, 1, 0]], dtype=float)
    A = (1 - 2 * w) * np.eye(4) + w * nbr
    # scale so ||A||^2 = 0.9
    return A * np.sqrt(0.9) / np.linalg.norm(A, 2)
