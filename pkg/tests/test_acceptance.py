"""Acceptance gate: one test per criterion, each recording a PASS/FAIL line."""

import csv
import json
import math
import time
from pathlib import Path

import numpy as np
import pytest
from scipy.optimize import minimize

from pnpcert import cli
from pnpcert.certify import (
    certify_theorem2,
    certify_theorem3,
    check_error_schedule,
    check_strong_convexity_H,
    delta_bound_margins,
)
from pnpcert.denoisers import LinearDenoiser, MmseDenoiser, relax
from pnpcert.equivariance import bias_decompose, check_equivariance
from pnpcert.fidelity import LeastSquares
from pnpcert.groups import make_group
from pnpcert.instances import invariant_prior, plain_twin, theorem2_instance, theorem3_instance
from pnpcert.priors import GmmPrior, random_gmm
from pnpcert.solver import ProblemSpec, epnp_pgd_run, pgd_exact_run, pnp_pgd_run

CONFIGS = Path(__file__).resolve().parents[1] / "configs"
T3_SEEDS = range(12)


@pytest.fixture(scope="module")
def t1_batch(tmp_path_factory):
    out = tmp_path_factory.mktemp("t1_batch")
    start = time.perf_counter()
    code = cli.run_experiment(CONFIGS / "t1_batch.json", out)
    return code, time.perf_counter() - start, out


@pytest.fixture(scope="module")
def t3_batch():
    runs = []
    for seed in T3_SEEDS:
        inst = theorem3_instance(seed)
        te = epnp_pgd_run(inst.spec, inst.group)
        tp = pnp_pgd_run(plain_twin(inst.spec))
        runs.append((inst, te, tp, certify_theorem3(te, tp)))
    return runs


def prop1_configs():
    """20 target denoisers: mixtures in 1-4 dims, some relaxed, plus Gaussians."""
    out = []
    for i in range(20):
        dim = 1 + i % 4
        sigma = 0.5 + 0.05 * i
        prior = random_gmm(dim, 1 + i % 3, seed=100 + i, mean_scale=1.0 + 0.1 * (i % 5))
        d = MmseDenoiser(prior, sigma)
        bound = d.lipschitz_bound()
        if bound >= 0.9 or i % 5 == 4:
            d = relax(d, min(0.8, 0.8 * 0.9 / bound))
        out.append(d)
    return out


def test_c1_theorem1_batch(t1_batch, acceptance_log):
    code, elapsed, out = t1_batch
    rows = list(csv.DictReader((out / "summary.csv").open()))
    passed = sum(r["pass_derived"] == "true" for r in rows)
    ok = code == 0 and len(rows) == 100 and passed == 100 and elapsed <= 300
    acceptance_log("C1 mismatched batch bound", ok, f"{passed}/{len(rows)} derived bounds hold, exit {code}, {elapsed:.1f}s (limit 300s)")
    assert ok


def test_c2_theorem2_batch(acceptance_log):
    passed = trend = 0
    for seed in range(100):
        tr = pgd_exact_run(theorem2_instance(seed, iterations=1000).spec)
        passed += certify_theorem2(tr).pass_derived
        trend += tr.grad_F_sq.min() <= 0.6 * tr.grad_F_sq[:500].min()
    ok = passed == 100 and trend >= 90
    acceptance_log("C2 matched batch bound", ok, f"{passed}/100 derived bounds hold; min-gradient ratio <= 0.6 in {trend}/100 (need 90)")
    assert ok


def test_c3_theorem3_and_bias_reduction(t3_batch, acceptance_log):
    strict_needed = strict_ok = 0
    worst_identity = 0.0
    bounds = 0
    cancel = []
    for inst, te, tp, rep in t3_batch:
        aniso = 0.0
        for z in te.zs[::10]:
            dec = bias_decompose(inst.spec.run_denoiser.base, inst.spec.target_denoiser, inst.group, z)
            worst_identity = max(worst_identity, dec.identity_gap)
            aniso = max(aniso, dec.anisotropy)
        if aniso > 1e-8:
            strict_needed += 1
            strict_ok += rep.details["eps_tilde_sum"] < rep.details["eps_hat_sum"]
        bounds += rep.pass_derived
        if inst.meta["bias"] == "constant" and inst.group.name.startswith("sign_flip"):
            cancel.append(rep.details["eps_tilde_sum"])
    ok = strict_ok == strict_needed and worst_identity <= 1e-10 and bool(cancel) and max(cancel) <= 1e-10 and bounds == len(t3_batch)
    acceptance_log(
        "C3 equivariant bias reduction", ok,
        f"strict reduction {strict_ok}/{strict_needed} anisotropic instances; identity gap max {worst_identity:.2e}; "
        f"sign-flip constant-bias sum eps_tilde max {max(cancel, default=math.nan):.2e} over {len(cancel)} runs; "
        f"bounds {bounds}/{len(t3_batch)}",
    )
    assert ok


def test_c4_potential_properties(acceptance_log):
    worst_fd = worst_prox = worst_lip = 0.0
    for ci, d in enumerate(prop1_configs()):
        rng = np.random.default_rng(ci)
        n = d.dim
        vs = d.reference_prior().smooth(d.sigma).sample(ci, 100)
        xs = d.apply(vs)
        h = 1e-5
        grads = []
        for v, x in zip(vs, xs):
            g = d.grad_phi(x, z0=v)
            grads.append(g)
            fd = np.array([(d.potential_phi(x + h * e) - d.potential_phi(x - h * e)) / (2 * h) for e in np.eye(n)])
            worst_fd = max(worst_fd, np.linalg.norm(g - fd) / max(1.0, np.linalg.norm(g)))
            # independent prox: quasi-Newton on u -> 0.5 ||u - v||^2 + phi(u), started at v
            res = minimize(
                lambda u: (0.5 * float((u - v) @ (u - v)) + d.potential_phi(u), u - v + d.grad_phi(u)),
                v, jac=True, method="BFGS", options={"gtol": 1e-11, "maxiter": 500},
            )
            worst_prox = max(worst_prox, float(np.linalg.norm(res.x - x)))
        grads = np.array(grads)
        cap = d.L / (1 - d.L)
        near = xs + 1e-3 * rng.standard_normal(xs.shape)
        g_near = np.array([d.grad_phi(u) for u in near])
        for a, b, ga, gb in ((xs[1:], xs[:-1], grads[1:], grads[:-1]), (xs, near, grads, g_near)):
            q = np.linalg.norm(ga - gb, axis=1) / np.linalg.norm(a - b, axis=1)
            worst_lip = max(worst_lip, float(np.max(q / (cap * (1 + 1e-6)))))
    ok = worst_fd <= 1e-5 and worst_prox <= 1e-6 and worst_lip <= 1.0
    acceptance_log(
        "C4 potential (20 configs x 100 points)", ok,
        f"grad_phi vs FD rel err max {worst_fd:.2e} (<= 1e-5); prox oracle gap max {worst_prox:.2e} (<= 1e-6); "
        f"quotient / (L/(1-L)(1+1e-6)) max {worst_lip:.4f} (<= 1)",
    )
    assert ok


def test_c5_delta_bound(t1_batch, t3_batch, acceptance_log):
    _, _, out = t1_batch
    worst = math.inf
    traces = 0
    for cert_path in sorted((out / "certificates").glob("*_T1.json")):
        L = json.loads(cert_path.read_text())["constants_used"]["L"]
        trace_path = out / "traces" / cert_path.name.replace("_T1.json", "_mismatched.csv")
        rows = list(csv.DictReader(trace_path.open()))
        eps = np.array([float(r["eps"]) for r in rows])
        dn = np.array([float(r["delta_norm"]) for r in rows])
        worst = min(worst, float(np.min(np.sqrt(2 * np.maximum(eps, 0) / (1 - L)) + 1e-10 - dn)))
        traces += 1
    for _, te, tp, _ in t3_batch:
        worst = min(worst, float(delta_bound_margins(te).min()), float(delta_bound_margins(tp).min()))
        traces += 2
    # tight case: D(v) = v/2, z = 0, x_hat = sqrt(eps) gives ||delta|| = 2 sqrt(eps) = sqrt(2 eps / (1 - 1/2))
    d = LinearDenoiser([[0.5]])
    tight = 0.0
    for eps in (1e-6, 1e-2, 0.3, 2.0):
        x_hat = np.array([math.sqrt(eps)])
        z = np.zeros(1)
        phi, gphi, _ = d.phi_and_grad(x_hat)
        eps_measured = 0.5 * float((x_hat - z) @ (x_hat - z)) + phi - d.g_value(z)
        delta = float(np.linalg.norm(z - x_hat - gphi))
        tight = max(tight, abs(eps_measured - eps), abs(delta - math.sqrt(2 * eps / (1 - d.L))))
    ok = worst >= 0 and tight <= 1e-10
    acceptance_log("C5 inexactness (delta) bound", ok, f"min margin {worst:.2e} over {traces} mismatched traces; tight case equality gap {tight:.1e}")
    assert ok


def test_c6_strong_convexity(acceptance_log):
    worst = math.inf
    configs = prop1_configs() + [LinearDenoiser([[0.5]])]
    for ci, d in enumerate(configs):
        z = np.random.default_rng(ci).standard_normal(d.dim)
        rep = check_strong_convexity_H(d, z, 200, seed=ci)
        worst = min(worst, rep.min_modulus - (rep.required - 1e-6))
    ok = worst >= 0
    acceptance_log("C6 strong convexity of H", ok, f"min (modulus - (1/(L+1) - 1e-6)) = {worst:.3e} over {len(configs)} configs x 200 pairs")
    assert ok


def test_c7_equivariance_of_target(acceptance_log):
    cases = [("sign_flip", (1,)), ("sign_flip", (3,)), ("coordinate_permutations", (3,)), ("cyclic_shift", (4,)),
             ("cyclic_shift", (6,)), ("dihedral_image", (2, 2)), ("dihedral_image", (3, 3)), ("trivial", (2,))]
    worst = 0.0
    for i, (kind, args) in enumerate(cases):
        g = make_group(kind, *args)
        d = MmseDenoiser(invariant_prior(g.dim, g, np.random.default_rng(i)), 0.6)
        worst = max(worst, check_equivariance(d, g, 200, 1e-8, seed=i).max_violation)
    ok = worst <= 1e-8
    acceptance_log("C7 target equivariance", ok, f"max violation {worst:.2e} across {len(cases)} built-in groups")
    assert ok


def test_c8_error_schedule(acceptance_log):
    k = np.arange(1, 10_001, dtype=float)
    square = check_error_schedule(1 / k**2, 1.0)
    harmonic = [check_error_schedule(1 / k, delta).passed for delta in (0.01, 0.1, 1.0)]
    gap = abs(square.partial_sum - math.pi**2 / 6)
    ok = gap <= 1e-4 and square.passed and not any(harmonic)
    acceptance_log("C8 error schedule", ok, f"1/k^2: |S - pi^2/6| = {gap:.6e}, pass={square.passed}; 1/k: pass={harmonic}")
    assert ok


def test_c9_closed_form(acceptance_log):
    d = MmseDenoiser(GmmPrior.gaussian([0.0], [[1.0]]), 1.0)
    tr = pgd_exact_run(ProblemSpec(LeastSquares([[1.0]], [3.0]), d, d, 0.5, [0.0], 200))
    err = abs(tr.xs[-1, 0] - 1.0)
    gnorm = math.sqrt(tr.grad_F_sq[-1])
    ok = err <= 1e-8 and gnorm <= 1e-8
    acceptance_log("C9 closed-form 1D", ok, f"|x - 1| = {err:.1e}, ||grad F|| = {gnorm:.1e}")
    assert ok


def test_c10_reproducibility(tmp_path, acceptance_log):
    doc = json.loads((CONFIGS / "t1_batch.json").read_text())
    doc.update(instances=6, iterations=60, theorems=["T1", "T2", "T3"], group={"kind": "sign_flip"})
    cfg = tmp_path / "repro.json"
    cfg.write_text(json.dumps(doc))
    codes = [cli.run_experiment(cfg, tmp_path / name) for name in ("a", "b")]
    files = sorted(p.relative_to(tmp_path / "a") for p in (tmp_path / "a").rglob("*.csv"))
    same = all((tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes() for f in files)
    ok = codes == [0, 0] and same and len(files) == 1 + 6 * 3
    acceptance_log("C10 reproducibility", ok, f"{len(files)} CSV files byte-identical across two runs: {same}")
    assert ok
