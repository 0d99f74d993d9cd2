"""Experiment runner.

    pnpcert run --config PATH [--out-dir PATH] [--jobs N] [--seed-override S] [--validate-only]
    pnpcert validate --config PATH

Exit codes: 0 all hard assertions pass, 1 an assertion failed, 2 config
error, 3 runtime abort (divergence or failed inversion).
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from pnpcert.certify import (
    SUMMARY_HEADER,
    CertificateReport,
    certify_theorem1,
    certify_theorem2,
    certify_theorem3,
    delta_bound_margins,
)
from pnpcert.denoisers import BiasModel, MmseDenoiser, perturb, relax
from pnpcert.equivariance import bias_decompose, wrap_equivariant
from pnpcert.errors import DivergenceError, NonConvergenceError, PreconditionError
from pnpcert.fidelity import fidelity_from_dict
from pnpcert.groups import GroupAction, check_invariance, trivial
from pnpcert.instances import invariant_prior, random_bias, random_fidelity, target_denoiser
from pnpcert.priors import GmmPrior
from pnpcert.solver import ProblemSpec, epnp_pgd_run, pgd_exact_run, pnp_pgd_run

EXIT_OK, EXIT_ASSERT, EXIT_CONFIG, EXIT_ABORT = 0, 1, 2, 3
THEOREMS = ("T1", "T2", "T3")
REQUIRED = ("name", "seed", "instances", "dim", "prior", "fidelity", "sigma", "lambda", "iterations", "theorems")
DECOMPOSITION_TOL = 1e-10
ANISOTROPY_WITNESS = 1e-8
CHECK_EVERY = 10


class ConfigError(Exception):
    def __init__(self, field_name: str, message: str):
        super().__init__(f"config field '{field_name}': {message}")
        self.field = field_name


@dataclass
class ExperimentConfig:
    name: str
    seed: int
    instances: int
    dim: list
    prior: dict
    fidelity: dict
    sigma: float
    lam: object
    iterations: int
    theorems: list
    group: dict | None = None
    bias: dict | None = None
    alpha: object = 1.0
    x0: list | None = None
    out_dir: str | None = None
    f_star_margin: float = 1e-6
    raw: dict = field(default_factory=dict, repr=False)

    @classmethod
    def from_dict(cls, doc) -> "ExperimentConfig":
        if not isinstance(doc, dict):
            raise ConfigError("<root>", "expected a JSON object")
        for key in REQUIRED:
            if key not in doc:
                raise ConfigError(key, "missing required field")
        dims = doc["dim"] if isinstance(doc["dim"], list) else [doc["dim"]]
        if not dims or not all(isinstance(d, int) and d >= 1 for d in dims):
            raise ConfigError("dim", "must be a positive integer or a list of them")
        for key in ("seed", "instances", "iterations"):
            if not isinstance(doc[key], int) or isinstance(doc[key], bool):
                raise ConfigError(key, "must be an integer")
        if doc["instances"] < 1:
            raise ConfigError("instances", "must be >= 1")
        if doc["iterations"] < 1:
            raise ConfigError("iterations", "must be >= 1")
        sigma = doc["sigma"]
        if not isinstance(sigma, (int, float)) or not sigma > 0:
            raise ConfigError("sigma", "must be a positive number")
        lam = doc["lambda"]
        if isinstance(lam, dict):
            rel = lam.get("relative")
            if not (isinstance(rel, list) and len(rel) == 2 and 0 < rel[0] <= rel[1]):
                raise ConfigError("lambda", "expected a number or {\"relative\": [lo, hi]}")
        elif not isinstance(lam, (int, float)) or not lam > 0:
            raise ConfigError("lambda", "must be positive")
        theorems = doc["theorems"]
        if not isinstance(theorems, list) or not theorems or any(t not in THEOREMS for t in theorems):
            raise ConfigError("theorems", f"must be a non-empty subset of {list(THEOREMS)}")
        alpha = doc.get("alpha", 1.0)
        if alpha != "auto" and not (isinstance(alpha, (int, float)) and 0 < alpha <= 1):
            raise ConfigError("alpha", "must lie in (0, 1] or be \"auto\"")
        if not isinstance(doc["prior"], dict):
            raise ConfigError("prior", "must be an object")
        if not isinstance(doc["fidelity"], dict) or "kind" not in doc["fidelity"]:
            raise ConfigError("fidelity", "must be an object with a 'kind'")
        bias = doc.get("bias")
        if ("T1" in theorems or "T3" in theorems) and bias is None:
            raise ConfigError("bias", "T1 and T3 need a mismatched denoiser")
        group = doc.get("group")
        if "T3" in theorems and group is None:
            raise ConfigError("group", "T3 needs a group")
        return cls(
            name=str(doc["name"]), seed=doc["seed"], instances=doc["instances"], dim=dims,
            prior=doc["prior"], fidelity=doc["fidelity"], sigma=float(sigma), lam=lam,
            iterations=doc["iterations"], theorems=list(theorems), group=group, bias=bias,
            alpha=alpha, x0=doc.get("x0"), out_dir=doc.get("out_dir"),
            f_star_margin=float(doc.get("f_star_margin", 1e-6)), raw=doc,
        )


def load_config(path) -> ExperimentConfig:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError("<file>", str(exc)) from exc
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError("<json>", f"line {exc.lineno}, column {exc.colno}: {exc.msg}") from exc
    return ExperimentConfig.from_dict(doc)


@dataclass
class BuiltInstance:
    index: int
    spec: ProblemSpec
    group: GroupAction | None
    plain_run: object
    equivariant_run: object


def _pick(value, i):
    return value[i % len(value)] if isinstance(value, list) else value


def build_instance(cfg: ExperimentConfig, i: int, seed: int | None = None) -> BuiltInstance:
    """Instance ``i`` draws all of its randomness from default_rng(seed + i)."""
    rng = np.random.default_rng((cfg.seed if seed is None else seed) + i)
    n = cfg.dim[i % len(cfg.dim)]
    try:
        group = GroupAction.from_dict(cfg.group, n) if cfg.group is not None else None
    except (KeyError, ValueError, TypeError) as exc:
        raise ConfigError("group", str(exc)) from exc
    if group is not None and group.dim != n:
        raise ConfigError("group", f"acts on R^{group.dim} but dim is {n}")

    try:
        if "random" in cfg.prior:
            opts = dict(cfg.prior["random"])
            if "var_range" in opts:
                opts["var_range"] = tuple(opts["var_range"])
            prior = invariant_prior(n, group if group is not None else trivial(n), rng, **opts)
        else:
            prior = GmmPrior.from_dict(cfg.prior)
    except (KeyError, ValueError, TypeError) as exc:
        raise ConfigError("prior", str(exc)) from exc
    if prior.dim != n:
        raise ConfigError("prior", f"lives on R^{prior.dim} but dim is {n}")

    if cfg.alpha == "auto":
        target, _ = target_denoiser(prior, cfg.sigma)
    else:
        target = MmseDenoiser(prior, cfg.sigma)
        if cfg.alpha < 1:
            target = relax(target, float(cfg.alpha))

    try:
        if "random" in cfg.fidelity:
            kind = _pick(cfg.fidelity["kind"], i)
            fid = random_fidelity(n, rng, kind=kind)
        else:
            fid = fidelity_from_dict(cfg.fidelity)
    except (KeyError, ValueError, TypeError) as exc:
        raise ConfigError("fidelity", str(exc)) from exc
    if fid.dim != n:
        raise ConfigError("fidelity", f"acts on R^{fid.dim} but dim is {n}")

    if isinstance(cfg.lam, dict):
        lo, hi = cfg.lam["relative"]
        lam = rng.uniform(lo, hi) / fid.lipschitz_grad
    else:
        lam = float(cfg.lam)

    plain = None
    if cfg.bias is not None:
        try:
            if "random" in cfg.bias:
                kind = _pick(cfg.bias["kind"], i)
                bias = random_bias(kind, n, rng, prior, **cfg.bias["random"])
            else:
                bias = BiasModel.from_dict(cfg.bias)
            plain = perturb(target, bias)
        except (KeyError, ValueError, TypeError) as exc:
            raise ConfigError("bias", str(exc)) from exc
    equi = wrap_equivariant(plain, group, "exact") if ("T3" in cfg.theorems) else None

    if cfg.x0 is not None:
        x0 = np.asarray(cfg.x0, dtype=float)
        if x0.shape != (n,):
            raise ConfigError("x0", f"expected length {n}")
    else:
        x0 = 2.0 * rng.standard_normal(n)
    run = plain if plain is not None else target
    spec = ProblemSpec(fid, target, run, lam, x0, cfg.iterations, f_star_margin=cfg.f_star_margin)
    return BuiltInstance(i, spec, group, plain, equi)


def check_instance(cfg: ExperimentConfig, inst: BuiltInstance) -> list[str]:
    """Config-level invariants; returns report lines, raises ConfigError."""
    spec = inst.spec
    lf = spec.fidelity.lipschitz_grad
    q = spec.lam * lf
    if not q < 1:
        raise ConfigError(
            "lambda",
            f"instance {inst.index}: lambda * L_f = {spec.lam:.6g} * {lf:.6g} = {q:.6g}; "
            "the convergence bounds hold only with lambda L_f < 1",
        )
    L = spec.target_denoiser.L
    if not L < 1:
        raise ConfigError("sigma", f"instance {inst.index}: target residual Lipschitz estimate L = {L:.6g} >= 1; use alpha < 1")
    if "T3" in cfg.theorems:
        rep = check_invariance(spec.target_denoiser.reference_prior(), inst.group, samples=200, tol=1e-8)
        if not rep.passed:
            raise ConfigError(
                "prior",
                f"instance {inst.index}: prior is not invariant under group element {rep.worst_element} "
                f"(max |log p(T_g x) - log p(x)| = {rep.max_violation:.3g})",
            )
    return [f"instance {inst.index}: dim={spec.x0.shape[0]} L_f={lf:.6g} lambda*L_f={q:.6g} < 1 L={L:.6g}"]


def _fmt(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return "true" if v else "false"
    return format(float(v), ".17g")


def _atomic_write(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "w", newline="") as fh:
        fh.write(text)
    os.replace(tmp, path)


def _certificate_json(i: int, rep: CertificateReport) -> str:
    doc = json.loads(rep.to_json())
    doc["instance_id"] = i
    return json.dumps(doc, indent=2, sort_keys=True) + "\n"


def run_instance(cfg_doc: dict, i: int, out_dir: str, seed: int | None) -> dict:
    """Build, run, certify and write one instance. Returns rows and failures."""
    cfg = ExperimentConfig.from_dict(cfg_doc)
    inst = build_instance(cfg, i, seed)
    check_instance(cfg, inst)
    out = Path(out_dir)
    tag = f"instance_{i:04d}"
    rows, failures = [], []
    try:
        reports = []
        if "T2" in cfg.theorems:
            s = inst.spec
            matched = ProblemSpec(s.fidelity, s.target_denoiser, s.target_denoiser, s.lam, s.x0, s.iterations,
                                  f_star_margin=s.f_star_margin)
            tr = pgd_exact_run(matched)
            _atomic_write(out / "traces" / f"{tag}_matched.csv", tr.to_csv())
            reports.append(("T2", certify_theorem2(tr), tr))
        plain_trace = None
        if "T1" in cfg.theorems or "T3" in cfg.theorems:
            plain_trace = pnp_pgd_run(inst.spec)
            _atomic_write(out / "traces" / f"{tag}_mismatched.csv", plain_trace.to_csv())
        if "T1" in cfg.theorems:
            reports.append(("T1", certify_theorem1(plain_trace), plain_trace))
        if "T3" in cfg.theorems:
            s = inst.spec
            es = ProblemSpec(s.fidelity, s.target_denoiser, inst.equivariant_run, s.lam, s.x0, s.iterations,
                             f_star_margin=s.f_star_margin)
            te = epnp_pgd_run(es, inst.group)
            _atomic_write(out / "traces" / f"{tag}_equivariant.csv", te.to_csv())
            rep = certify_theorem3(te, plain_trace)
            _decomposition_checks(inst, te, rep)
            reports.append(("T3", rep, te))
    except (DivergenceError, NonConvergenceError, PreconditionError) as exc:
        return {"index": i, "rows": [], "failures": [], "abort": f"instance {i}: {exc}", "lines": []}

    lines = []
    for thm, rep, tr in reports:
        _atomic_write(out / "certificates" / f"{tag}_{thm}.json", _certificate_json(i, rep))
        rows.append([str(i), thm, _fmt(rep.lhs_avg), _fmt(rep.rhs_paper), _fmt(rep.rhs_derived),
                     _fmt(rep.eps_sum), _fmt(rep.pass_paper), _fmt(rep.pass_derived)])
        if not rep.pass_derived:
            failures.append(f"instance {i} theorem {thm}: lhs_avg={rep.lhs_avg:.6g} rhs_derived={rep.rhs_derived:.6g} "
                            f"details={rep.details}")
        if thm in ("T1", "T3"):
            worst = float(np.min(delta_bound_margins(tr)))
            if worst < 0:
                failures.append(f"instance {i} theorem {thm}: delta bound violated by {-worst:.3g}")
        lines.append(f"instance {i} {thm}: lhs_avg={rep.lhs_avg:.6g} rhs_derived={rep.rhs_derived:.6g} "
                     f"pass_derived={_fmt(rep.pass_derived)} x_final={np.array2string(tr.xs[-1], precision=10)}")
    return {"index": i, "rows": rows, "failures": failures, "abort": None, "lines": lines}


def _decomposition_checks(inst: BuiltInstance, te, rep: CertificateReport) -> None:
    """Bias decomposition identity at every CHECK_EVERY-th input point, plus a
    strict reduction whenever the bias is anisotropic somewhere."""
    d_hat, target = inst.plain_run, inst.spec.target_denoiser
    worst_identity, aniso = 0.0, 0.0
    for z in te.zs[::CHECK_EVERY]:
        dec = bias_decompose(d_hat, target, inst.group, z)
        worst_identity = max(worst_identity, dec.identity_gap)
        aniso = max(aniso, dec.anisotropy)
    rep.details["identity_gap_max"] = worst_identity
    rep.details["anisotropy_max"] = aniso
    ok = worst_identity <= DECOMPOSITION_TOL
    if aniso > ANISOTROPY_WITNESS:
        ok = ok and rep.details["eps_tilde_sum"] < rep.details["eps_hat_sum"]
    rep.details["decomposition_pass"] = bool(ok)
    rep.pass_derived = bool(rep.pass_derived and ok)


def summary_csv(rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(SUMMARY_HEADER)
    w.writerows(rows)
    return buf.getvalue()


def validate(config_path, out=None) -> int:
    out = out or sys.stdout
    try:
        cfg = load_config(config_path)
        for i in range(cfg.instances):
            for line in check_instance(cfg, build_instance(cfg, i)):
                print(line, file=out)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    print(f"config {cfg.name!r} is valid ({cfg.instances} instances, theorems {cfg.theorems})", file=out)
    return EXIT_OK


def run_experiment(config_path, out_dir=None, jobs: int = 1, seed_override: int | None = None,
                   validate_only: bool = False, out=None) -> int:
    out = out or sys.stdout
    try:
        cfg = load_config(config_path)
        # validate everything before running anything
        for i in range(cfg.instances):
            check_instance(cfg, build_instance(cfg, i, seed_override))
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    if validate_only:
        return validate(config_path, out)
    target_dir = Path(out_dir or cfg.out_dir or os.path.join("runs", cfg.name))
    args = [(cfg.raw, i, str(target_dir), seed_override) for i in range(cfg.instances)]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(run_instance, *zip(*args)))
    else:
        results = [run_instance(*a) for a in args]
    results.sort(key=lambda r: r["index"])

    rows = [row for r in results for row in r["rows"]]
    _atomic_write(target_dir / "summary.csv", summary_csv(rows))
    for r in results:
        for line in r["lines"]:
            print(line, file=out)
    aborts = [r["abort"] for r in results if r["abort"]]
    failures = [f for r in results for f in r["failures"]]
    for msg in aborts:
        print(f"runtime abort: {msg}", file=sys.stderr)
    for msg in failures:
        print(f"assertion failed: {msg}", file=sys.stderr)
    if aborts:
        return EXIT_ABORT
    if failures:
        return EXIT_ASSERT
    print(f"{len(rows)} certificates, all derived bounds hold; summary at {target_dir / 'summary.csv'}", file=out)
    return EXIT_OK


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="pnpcert", description="Certify PnP-PGD convergence bounds on GMM instances.")
    sub = parser.add_subparsers(dest="command", required=True)
    run = sub.add_parser("run", help="run an experiment config")
    run.add_argument("--config", required=True)
    run.add_argument("--out-dir")
    run.add_argument("--jobs", type=int, default=1)
    run.add_argument("--seed-override", type=int)
    run.add_argument("--validate-only", action="store_true")
    val = sub.add_parser("validate", help="check a config without running it")
    val.add_argument("--config", required=True)
    ns = parser.parse_args(argv)
    if ns.command == "validate":
        return validate(ns.config)
    return run_experiment(ns.config, ns.out_dir, max(ns.jobs, 1), ns.seed_override, ns.validate_only)


if __name__ == "__main__":
    sys.exit(main())
