"""Instance-level checks of the convergence bounds and the lemmas behind them.

Two constant sets are computed for every bound:

* ``paper`` uses the published constants (16/(1-L_f), 8/(1-L_f), 4/(1-L)).
* ``derived`` retraces the descent step with the lambda-scaled gradient, which
  gives (1 - lambda L_f)/2 in the sufficient-decrease inequality and keeps
  (1 + lambda L_f)^2 unbounded.

Only the derived bound is a hard assertion.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from pnpcert.errors import InvalidParameterError, NonConvergenceError
from pnpcert.solver import SolverTrace

SUMMARY_HEADER = ("instance_id", "theorem", "lhs_avg", "rhs_paper", "rhs_derived", "eps_sum", "pass_paper", "pass_derived")


def _paper_coef(L_f: float, numerator: float) -> float:
    # undefined once L_f >= 1 even though lambda * L_f < 1 may still hold
    return numerator / (1.0 - L_f) if L_f < 1.0 else math.nan


def rhs_theorem1_paper(t: int, F0: float, F_star: float, eps_sum: float, L: float, L_f: float) -> float:
    c = _paper_coef(L_f, 16.0)
    return (c * (F0 - F_star) + (c + 4.0 / (1.0 - L)) * eps_sum) / t


def rhs_theorem1_derived(t: int, F0: float, F_star: float, eps_sum: float, L: float, L_f: float, lam: float) -> float:
    q = lam * L_f
    c = 4.0 * (1.0 + q) ** 2 / (1.0 - q)
    return (c * (F0 - F_star) + (c + 4.0 / (1.0 - L)) * eps_sum) / t


def rhs_theorem2_paper(t: int, F0: float, F_star: float, L_f: float) -> float:
    return _paper_coef(L_f, 8.0) * (F0 - F_star) / t


def rhs_theorem2_derived(t: int, F0: float, F_star: float, L_f: float, lam: float) -> float:
    q = lam * L_f
    return 2.0 * (1.0 + q) ** 2 / (1.0 - q) * (F0 - F_star) / t


@dataclass
class CertificateReport:
    theorem: str
    lhs_min: float
    lhs_avg: float
    rhs_paper: float
    rhs_derived: float
    eps_sum: float
    pass_paper: bool
    pass_derived: bool
    constants_used: dict
    details: dict = field(default_factory=dict)

    @property
    def slack_ratio(self) -> float:
        return self.lhs_avg / self.rhs_derived if self.rhs_derived > 0 else math.inf

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        def clean(v):
            if isinstance(v, float) and not math.isfinite(v):
                return None
            if isinstance(v, dict):
                return {k: clean(x) for k, x in v.items()}
            if isinstance(v, (np.floating, np.integer, np.bool_)):
                return clean(v.item())
            return v

        return json.dumps(clean(self.to_dict()), indent=2, sort_keys=True)


def _constants(trace: SolverTrace, f_star: float) -> dict:
    return {"L": trace.L, "L_f": trace.L_f, "lambda": trace.lam, "F0": trace.F0, "F_star": f_star, "t": trace.t}


def _lhs(trace: SolverTrace):
    g = trace.grad_F_sq
    return float(np.min(g)), float(np.mean(g))


def _le(a: float, b: float) -> bool:
    return bool(np.isfinite(b) and a <= b)


def certify_theorem1(trace: SolverTrace, f_star: float | None = None, theorem: str = "T1") -> CertificateReport:
    """Mismatched bound: mean ||grad F||^2 against the eps-augmented right-hand side."""
    if trace.eps is None or not np.all(np.isfinite(trace.eps)):
        raise InvalidParameterError("trace carries no eps values")
    f_star = trace.F_star_lower if f_star is None else f_star
    lhs_min, lhs_avg = _lhs(trace)
    eps_sum = float(np.sum(np.maximum(trace.eps, 0.0)))
    paper = rhs_theorem1_paper(trace.t, trace.F0, f_star, eps_sum, trace.L, trace.L_f)
    derived = rhs_theorem1_derived(trace.t, trace.F0, f_star, eps_sum, trace.L, trace.L_f, trace.lam)
    return CertificateReport(
        theorem, lhs_min, lhs_avg, paper, derived, eps_sum,
        _le(lhs_avg, paper), _le(lhs_avg, derived), _constants(trace, f_star),
    )


def certify_theorem2(trace: SolverTrace, f_star: float | None = None) -> CertificateReport:
    """Matched bound (no eps term)."""
    f_star = trace.F_star_lower if f_star is None else f_star
    lhs_min, lhs_avg = _lhs(trace)
    paper = rhs_theorem2_paper(trace.t, trace.F0, f_star, trace.L_f)
    derived = rhs_theorem2_derived(trace.t, trace.F0, f_star, trace.L_f, trace.lam)
    return CertificateReport(
        "T2", lhs_min, lhs_avg, paper, derived, float(np.sum(trace.eps)),
        _le(lhs_avg, paper), _le(lhs_avg, derived), _constants(trace, f_star),
    )


def certify_theorem3(trace_equivariant: SolverTrace, trace_plain: SolverTrace, f_star: float | None = None) -> CertificateReport:
    """Bound on the equivariant run plus sum(eps_tilde) <= sum(eps_hat).

    ``eps_hat`` is the group-averaged gap of the unwrapped denoiser recorded
    along the equivariant trajectory.
    """
    te, tp = trace_equivariant, trace_plain
    if te.eps_hat is None:
        raise InvalidParameterError("equivariant trace carries no eps_hat")
    if te.t != tp.t or te.lam != tp.lam or te.L_f != tp.L_f or not np.array_equal(te.xs[0], tp.xs[0]):
        raise InvalidParameterError("traces do not share a problem specification")
    rep = certify_theorem1(te, f_star, theorem="T3")
    eps_tilde = float(np.sum(te.eps))
    eps_hat = float(np.sum(te.eps_hat))
    reduction = eps_tilde <= eps_hat + 1e-12
    rep.details = {
        "eps_tilde_sum": eps_tilde,
        "eps_hat_sum": eps_hat,
        "eps_plain_sum": float(np.sum(tp.eps)),
        "reduction_gap": eps_hat - eps_tilde,
        "bound_pass_derived": rep.pass_derived,
        "reduction_pass": bool(reduction),
    }
    rep.pass_derived = bool(rep.pass_derived and reduction)
    rep.pass_paper = bool(rep.pass_paper and reduction)
    return rep


# Lemma-level checks along a trace ------------------------------------------


def descent_violations(trace: SolverTrace, use_paper_constant: bool = False, slack: float = 1e-10) -> np.ndarray:
    """F_k - ((1 - c)/2) ||x_k - x_{k-1}||^2 + eps_k - F_{k} margins; negative means violated.

    ``c`` is lambda * L_f (derived) or L_f (paper).
    """
    c = trace.L_f if use_paper_constant else trace.lam * trace.L_f
    F_prev = np.concatenate([[trace.F0], trace.F[:-1]])
    rhs = F_prev - 0.5 * (1.0 - c) * trace.step_sq + trace.eps + slack
    return rhs - trace.F


def delta_bound_margins(trace: SolverTrace, slack: float = 1e-10) -> np.ndarray:
    """sqrt(2 eps / (1 - L)) + slack - ||delta||; negative means violated."""
    return np.sqrt(2.0 * np.maximum(trace.eps, 0.0) / (1.0 - trace.L)) + slack - trace.delta_norm


def target_gap_margins(trace: SolverTrace, slack: float = 1e-10) -> np.ndarray:
    """sqrt(2 (L + 1) eps) + slack - ||x_k - D(z_k)||."""
    return np.sqrt(2.0 * (trace.L + 1.0) * np.maximum(trace.eps, 0.0)) + slack - trace.target_gap


@dataclass(frozen=True)
class ScheduleReport:
    C: float
    summable_witness: float
    partial_sum: float
    first_violation: int | None
    passed: bool


def check_error_schedule(epsilons, delta: float) -> ScheduleReport:
    """Is eps_k <= C / k^(1 + delta) with C = eps_1?

    The witness C (1 + 1/delta) bounds the whole series by the integral test.
    """
    if not delta > 0:
        raise InvalidParameterError("delta must be positive")
    eps = np.asarray(epsilons, dtype=float)
    k = np.arange(1, eps.size + 1, dtype=float)
    C = float(eps[0]) if eps.size else 0.0
    envelope = C / k ** (1.0 + delta)
    bad = np.nonzero(eps > envelope * (1.0 + 1e-12) + 1e-300)[0]
    first = int(bad[0]) + 1 if bad.size else None
    # fsum keeps the 1e4-term partial sums exact to rounding
    return ScheduleReport(C, C * (1.0 + 1.0 / delta), math.fsum(eps.tolist()), first, first is None)


@dataclass(frozen=True)
class StrongConvexityReport:
    min_modulus: float
    required: float
    worst_violation: float
    passed: bool


def check_strong_convexity_H(d_target, z, pairs: int, seed: int, spread: float = 1.0, max_resample: int = 100) -> StrongConvexityReport:
    """Sample pairs (u, v) and test the 1/(L+1) strong-convexity inequality of
    H(x) = 0.5 ||x - z||^2 + phi(x).

    Points are drawn around D(z); a failed inversion triggers a resample.
    """
    if pairs < 1:
        raise InvalidParameterError("pairs must be >= 1")
    z = np.asarray(z, dtype=float)
    rng = np.random.default_rng(seed)
    centre = d_target.apply(z)
    mu = 1.0 / (d_target.L + 1.0)

    def H_and_grad(x):
        phi, gphi, _ = d_target.phi_and_grad(x)
        return 0.5 * float((x - z) @ (x - z)) + phi, x - z + gphi

    min_mod, worst, done, failures = math.inf, -math.inf, 0, 0
    while done < pairs:
        u = centre + spread * rng.standard_normal(z.shape)
        v = centre + spread * rng.standard_normal(z.shape)
        try:
            Hu, gu = H_and_grad(u)
            Hv, _ = H_and_grad(v)
        except NonConvergenceError:
            failures += 1
            if failures > max_resample:
                raise
            continue
        dist2 = float((v - u) @ (v - u))
        gap = Hv - Hu - float(gu @ (v - u))
        worst = max(worst, 0.5 * mu * dist2 - gap)
        if dist2 > 0:
            min_mod = min(min_mod, 2.0 * gap / dist2)
        done += 1
    return StrongConvexityReport(min_mod, mu, worst, worst <= 1e-8)
