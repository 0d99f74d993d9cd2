"""PGD / PnP-PGD / equivariant PnP-PGD with per-iteration instrumentation.

Every run is measured against the *target* denoiser's potential phi: the
objective is F = lambda * f + phi, and the prox gap

    eps_{k+1} = H(x_{k+1}) - min_u H(u),   H(u) = 0.5 ||u - z_{k+1}||^2 + phi(u)

is computed exactly because min_u H(u) = H(D(z_{k+1})) = g(z_{k+1}).
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field

import numpy as np

from pnpcert.denoisers import DEFAULT_TOL, Denoiser
from pnpcert.equivariance import EquivariantDenoiser
from pnpcert.errors import DivergenceError, NonConvergenceError, PreconditionError
from pnpcert.fidelity import Fidelity
from pnpcert.groups import GroupAction, apply_transform, check_invariance

TRACE_HEADER = ("k", "F", "grad_F_sq", "eps", "eps_hat", "delta_norm", "x_norm")


@dataclass
class ProblemSpec:
    fidelity: Fidelity
    target_denoiser: Denoiser
    run_denoiser: Denoiser
    lam: float
    x0: np.ndarray
    iterations: int
    f_star_starts: int = 3
    f_star_steps: int = 1000
    f_star_margin: float = 1e-6
    invert_tol: float = DEFAULT_TOL

    def __post_init__(self):
        self.x0 = np.atleast_1d(np.asarray(self.x0, dtype=float))
        if self.iterations < 1:
            raise PreconditionError("iterations must be >= 1")
        if not self.lam > 0:
            raise PreconditionError("lambda must be positive")

    @property
    def sigma(self) -> float:
        return self.target_denoiser.sigma

    def validate(self) -> None:
        lf = self.fidelity.lipschitz_grad
        if not self.lam * lf < 1:
            raise PreconditionError(f"need lambda * L_f < 1, got {self.lam} * {lf:.6g} = {self.lam * lf:.6g}")
        lip = self.target_denoiser.L
        if not lip < 1:
            raise PreconditionError(f"target residual must be a contraction, estimated L = {lip:.6g}")


@dataclass
class SolverTrace:
    """Iterates x_0..x_t and per-iteration diagnostics for k = 1..t."""

    xs: np.ndarray
    zs: np.ndarray
    F: np.ndarray
    grad_F_sq: np.ndarray
    eps: np.ndarray
    delta_norm: np.ndarray
    target_gap: np.ndarray
    L: float
    L_f: float
    lam: float
    F0: float
    F_star_lower: float
    eps_hat: np.ndarray | None = None
    label: str = "pnp"
    extra: dict = field(default_factory=dict)

    @property
    def t(self) -> int:
        return len(self.F)

    @property
    def step_sq(self) -> np.ndarray:
        """||x_k - x_{k-1}||^2 for k = 1..t."""
        return np.sum(np.diff(self.xs, axis=0) ** 2, axis=1)

    def truncate(self, t: int) -> "SolverTrace":
        """The first ``t`` iterations; F_star_lower is kept."""
        cut = lambda a: None if a is None else a[:t].copy()
        return SolverTrace(
            self.xs[: t + 1].copy(), cut(self.zs), cut(self.F), cut(self.grad_F_sq), cut(self.eps),
            cut(self.delta_norm), cut(self.target_gap), self.L, self.L_f, self.lam, self.F0,
            self.F_star_lower, cut(self.eps_hat), self.label, dict(self.extra),
        )

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(TRACE_HEADER)
        fmt = lambda v: format(float(v), ".17g")
        xnorm = np.linalg.norm(self.xs[1:], axis=1)
        for i in range(self.t):
            eh = "" if self.eps_hat is None else fmt(self.eps_hat[i])
            w.writerow([i + 1, fmt(self.F[i]), fmt(self.grad_F_sq[i]), fmt(self.eps[i]), eh,
                        fmt(self.delta_norm[i]), fmt(xnorm[i])])
        return buf.getvalue()


def _objective_at_output(spec: ProblemSpec, z: np.ndarray) -> float:
    """F(D(z)) for the target denoiser, with no inversion."""
    d = spec.target_denoiser
    r = d.residual(z)
    x = z - r
    return spec.lam * float(spec.fidelity.value(x)) + d.g_value(z) - 0.5 * float(r @ r)


def estimate_f_star(spec: ProblemSpec, starts) -> float:
    """Smallest F reached by long exact-PGD runs from the given starts.

    Exact PGD decreases F monotonically, so only the final value is kept.
    """
    d, fid, lam = spec.target_denoiser, spec.fidelity, spec.lam
    best = np.inf
    for x in starts:
        x = np.asarray(x, dtype=float)
        z = x - lam * fid.grad(x)
        for _ in range(spec.f_star_steps - 1):
            x = d.apply(z)
            z = x - lam * fid.grad(x)
        best = min(best, _objective_at_output(spec, z))
    return float(best)


def _run(spec: ProblemSpec, group: GroupAction | None = None, label: str = "pnp") -> SolverTrace:
    spec.validate()
    target, run, fid, lam, tol = spec.target_denoiser, spec.run_denoiser, spec.fidelity, spec.lam, spec.invert_tol
    matched = run is target
    t, n = spec.iterations, spec.x0.shape[0]
    xs = np.empty((t + 1, n))
    zs = np.empty((t, n))
    F = np.empty(t)
    gsq = np.empty(t)
    eps = np.empty(t)
    dnorm = np.empty(t)
    gap = np.empty(t)
    eps_hat = np.empty(t) if group is not None else None
    mismatched_base = run.base if group is not None else None

    x = spec.x0.copy()
    xs[0] = x
    try:
        phi0, _, _ = target.phi_and_grad(x, tol)
    except NonConvergenceError as exc:
        raise NonConvergenceError(f"iteration 0: {exc}") from exc
    F0 = lam * float(fid.value(x)) + phi0
    bound = 1e6 * (np.linalg.norm(spec.x0) + 1.0)

    for k in range(1, t + 1):
        z = x - lam * fid.grad(x)
        x_new = run.apply(z)
        try:
            phi, gphi, _ = target.phi_and_grad(x_new, tol, z0=z)
        except NonConvergenceError as exc:
            raise NonConvergenceError(f"iteration {k}: {exc}") from exc
        grad = lam * fid.grad(x_new) + gphi
        i = k - 1
        zs[i] = z
        F[i] = lam * float(fid.value(x_new)) + phi
        gsq[i] = float(grad @ grad)
        d = x_new - z
        if matched:
            eps[i] = 0.0
            gap[i] = 0.0
        else:
            eps[i] = 0.5 * float(d @ d) + phi - target.g_value(z)
            gap[i] = float(np.linalg.norm(x_new - target.apply(z)))
        delta = z - x_new - gphi
        dnorm[i] = float(np.linalg.norm(delta))
        if group is not None:
            eps_hat[i] = _group_averaged_gap(target, mismatched_base, group, z, tol, k)
        x = x_new
        xs[k] = x
        if not np.all(np.isfinite(x)) or np.linalg.norm(x) > bound:
            raise DivergenceError(f"iteration {k}: ||x|| = {np.linalg.norm(x):.3g} exceeds {bound:.3g}")

    starts = [spec.x0, x, np.zeros(n)][: max(spec.f_star_starts, 0)]
    f_star = min(F0, float(np.min(F)))
    if starts:
        f_star = min(f_star, estimate_f_star(spec, starts))
    return SolverTrace(
        xs, zs, F, gsq, eps, dnorm, gap,
        L=target.L, L_f=fid.lipschitz_grad, lam=lam, F0=F0,
        F_star_lower=f_star - spec.f_star_margin, eps_hat=eps_hat, label=label,
    )


def _group_averaged_gap(target, mismatched, group, z, tol, k) -> float:
    """mean_g [H_{T_g z}(D_hat(T_g z)) - min H_{T_g z}]."""
    moved = np.stack([apply_transform(g, z) for g in group.elements])
    outs = mismatched.apply(moved)
    total = 0.0
    for u, zg in zip(outs, moved):
        try:
            phi, _, _ = target.phi_and_grad(u, tol, z0=zg)
        except NonConvergenceError as exc:
            raise NonConvergenceError(f"iteration {k} (group average): {exc}") from exc
        d = u - zg
        total += 0.5 * float(d @ d) + phi - target.g_value(zg)
    return total / len(group.elements)


def pnp_pgd_run(spec: ProblemSpec) -> SolverTrace:
    """z_{k+1} = x_k - lambda grad f(x_k);  x_{k+1} = run_denoiser(z_{k+1})."""
    return _run(spec, label="matched" if spec.run_denoiser is spec.target_denoiser else "mismatched")


def pgd_exact_run(spec: ProblemSpec) -> SolverTrace:
    """PGD with the exact prox of phi, i.e. the target denoiser itself."""
    if spec.run_denoiser is not spec.target_denoiser:
        raise PreconditionError("exact PGD requires run_denoiser to be the target denoiser")
    return pnp_pgd_run(spec)


def epnp_pgd_run(spec: ProblemSpec, group: GroupAction, invariance_tol: float = 1e-8) -> SolverTrace:
    """Equivariant PnP-PGD; also records the group-averaged gap of the unwrapped denoiser."""
    run = spec.run_denoiser
    if not isinstance(run, EquivariantDenoiser) or run.mode != "exact" or run.group is not group:
        raise PreconditionError("run_denoiser must be wrap_equivariant(..., group, 'exact')")
    prior = spec.target_denoiser.reference_prior()
    if prior is None:
        raise PreconditionError("target denoiser has no prior to check for invariance")
    report = check_invariance(prior, group, samples=200, tol=invariance_tol)
    if not report.passed:
        raise PreconditionError(
            f"target prior is not invariant under group element {report.worst_element} "
            f"(max |log p(T_g x) - log p(x)| = {report.max_violation:.3g})"
        )
    return _run(spec, group=group, label="equivariant")
