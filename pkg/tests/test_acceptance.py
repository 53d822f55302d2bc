"""Acceptance criteria 1-15, each at its stated tolerance.

Every criterion prints one ``C<n> PASS|FAIL`` line (repeated in the terminal
summary). Monte Carlo runs go through the runner into ``$NDHOMOG_ACCEPTANCE_DIR``
(default ``acceptance_runs/`` in the repository); a finished run directory with
the same resolved config is reused rather than recomputed.
"""

import math
import os
import time
from pathlib import Path

import numpy as np
import pytest

from conftest import constant_field, random_field
from ndhomog.analysis import DegenerateInput, interpolation_check, quadratic_cascade
from ndhomog.concentration import kernel_sum_ratio
from ndhomog.config import ExperimentConfig
from ndhomog.corrector import CorrectorProblem, approximate_corrector
from ndhomog.env import FieldSpec, realize_field
from ndhomog.green import decay_exponent_fit, invariant_measure, modified_green
from ndhomog.grid import Grid, GridFunction, assemble, check_monotone, solve
from ndhomog.runner import run_to_dir

RESULTS: list[str] = []
RUNS = Path(os.environ.get("NDHOMOG_ACCEPTANCE_DIR", Path(__file__).resolve().parents[1] / "acceptance_runs"))
CB2 = FieldSpec.checkerboard((1.0, 4.0), dim=2)
CB3 = FieldSpec.checkerboard((1.0, 4.0), dim=3)


def verdict(n, ok, detail):
    line = f"C{n} {'PASS' if ok else 'FAIL'}: {detail}"
    RESULTS.append(line)
    print(line)
    assert ok, line


def run(name, workers=1, **kw):
    return run_to_dir(ExperimentConfig(experiment_id=name, **kw), RUNS / name, workers=workers)


def cell(rep, eps):
    return next(c for c in rep.cells if c.label == f"eps={eps!r}")


@pytest.fixture(scope="module")
def scaling_d2():
    return run("c2_c3_scaling_d2", kind="scaling", field=CB2.to_dict(), eps=[1 / 4, 1 / 8, 1 / 16, 1 / 32],
               samples=500, box_factor=8, base_seed=2023)


def test_c01_constant_coefficient_exactness():
    t0 = time.perf_counter()
    errs = []
    for eps in (1 / 4, 1 / 16):
        u = approximate_corrector(CorrectorProblem(constant_field(np.eye(2)), np.eye(2), eps, h=1.0, tol=1e-10))
        errs.append(abs(eps**2 * u.center_value() - 2.0))
    dt = time.perf_counter() - t0
    verdict(1, max(errs) <= 1e-6 and dt < 5.0, f"max |eps^2 phi(0) - 2| = {max(errs):.2e}, {dt:.2f} s")


@pytest.mark.slow
def test_c02_homogenized_coefficient(scaling_d2):
    c = cell(scaling_d2, 1 / 32)
    ratio = c.mean / 2.0
    verdict(2, c.n >= 200 and abs(ratio - 1.6) <= 0.16,
            f"mean eps^2 phi(0)/tr M = {ratio:.4f} +- {c.stderr / 2:.4f} (n={c.n}), target 1.6")


@pytest.mark.slow
def test_c03_variance_scaling_d2(scaling_d2):
    fit = scaling_d2.fits["log_sd_vs_log_E"]
    verdict(3, 0.8 <= fit.slope <= 1.2, f"slope of log sd vs log(eps|log eps|) = {fit.slope:.3f}, want [0.8, 1.2]")


@pytest.mark.slow
def test_c04_variance_scaling_d3():
    rep = run("c4_scaling_d3", kind="scaling", field=CB3.to_dict(), eps=[1 / 4, 1 / 8, 1 / 16], samples=200,
              box_factor=4, base_seed=2024)
    fit = rep.fits["log_sd_vs_log_E"]
    verdict(4, 0.75 <= fit.slope <= 1.25, f"slope of log sd vs log eps^(3/2) = {fit.slope:.3f}, want [0.75, 1.25]")


@pytest.mark.slow
def test_c05_deterministic_green_tail():
    spec = FieldSpec(kind="full_symmetric", dim=3, lam=1.0, Lam=4.0, offdiag=0.6)
    rep = run("c5_green_tail", kind="green_decay", field=spec.to_dict(), eps=[1 / 4, 1 / 8], samples=50,
              box_factor=3, annulus=[2, 5], tol=1e-10, base_seed=5)
    v = rep.checks["tail_violations"]
    verdict(5, v == 0 and rep.failures == 0,
            f"{v} violations over 50 media x 2 eps, min slack {rep.checks['tail_min_slack']:.3e}")


@pytest.mark.slow
def test_c06_random_green_decay():
    rep = run("c6_green_decay", kind="green_decay", field=CB3.to_dict(), eps=[1 / 8], samples=50, box_factor=4,
              fit_mode="screened", annulus=[4, 15], tol=1e-10, base_seed=6)
    frac = rep.extra["frac_slope_within_0.5_of_-1 eps=0.125"]
    c = cell(rep, 1 / 8)
    verdict(6, frac >= 0.8, f"{frac:.0%} of slopes in [-1.5, -0.5], mean slope {c.mean:.3f}")


@pytest.mark.slow
def test_c07_counterexample_exponent():
    spec = FieldSpec(kind="radial_counterexample", dim=3, lam=1.0, Lam=4.0, variant="A1")
    G = modified_green(realize_field(None, spec), 1 / 64, box_radius=40, h=1.0, tol=1e-10, allow_nonmonotone=True)
    fit = decay_exponent_fit(G, (4, 12), mode="derivative", eps=1 / 64)
    target = (3 - 1) / 4.0 - 1
    verdict(7, abs(fit["gamma_hat"] - target) <= 0.3, f"fitted gamma_hat {fit['gamma_hat']:.3f}, target {target}")


def test_c08_barrier_audit():
    lines, ok = [], True
    for name, spec, samples, h in [
        ("c8_barrier_id", FieldSpec.constant(np.eye(3)), 1, 0.5),
        ("c8_barrier_random", FieldSpec(kind="full_symmetric", dim=3, lam=1.0, Lam=4.0, offdiag=0.6), 20, 1.0),
    ]:
        rep = run(name, kind="barrier_audit", field=spec.to_dict(), samples=samples, h=h, base_seed=8)
        for check in ("phi_R", "continuity"):
            r = rep.checks[check]
            ok &= r["ok"]
            lines.append(f"{name}:{check}={r.get('min', r.get('max')):.3g} (bound {r['bound']:.3g})")
    verdict(8, ok, "; ".join(lines))


def _monotone_instance(seed):
    rng = np.random.default_rng(1000 + seed)
    d = int(rng.integers(2, 4))
    if seed % 2:
        spec = FieldSpec.checkerboard((1.0, float(rng.uniform(1.5, 9.0))), dim=d)
    else:
        spec = FieldSpec(kind="full_symmetric", dim=d, lam=1.0, Lam=5.0, offdiag=float(rng.uniform(0, 2.0 / (d - 1))))
    g = Grid((0,) * d, 6 if d == 2 else 3, 0.5)
    op = assemble(random_field(spec, seed), float(rng.choice([0.0, 0.25, 1.0])), g)
    f1 = rng.normal(size=g.shape)
    f2 = f1 + np.abs(rng.normal(size=g.shape))
    return op.with_boundary(GridFunction(g, rng.normal(size=g.shape))), GridFunction(g, f1), GridFunction(g, f2)


def test_c09_comparison_principle():
    tol, violations = 1e-10, 0
    for seed in range(50):
        op, f1, f2 = _monotone_instance(seed)
        assert check_monotone(op).is_monotone
        u1, u2 = solve(op, f1, tol=tol), solve(op, f2, tol=tol)
        violations += int(np.sum(u1.values > u2.values + 2 * tol))
    verdict(9, violations == 0, f"{violations} pointwise violations over 50 instances")


def test_c10_cascade_identities():
    worst = {}
    g = Grid((0, 0), 32, 1.0)
    for seed in range(100):
        rng = np.random.default_rng(seed)
        u = GridFunction(g, rng.normal(size=g.shape))
        t = quadratic_cascade(u, float(rng.choice([0.125, 0.25, 0.4])), 2, 32)
        for k, v in t.margins.items():
            worst[k] = min(worst.get(k, math.inf), min(v))
    verdict(10, min(worst.values()) >= -1e-8,
            "worst margins over 100 i.i.d. functions: " + ", ".join(f"{k} {v:.3e}" for k, v in worst.items()))


def test_c11_interpolation_lemma():
    g = Grid((0, 0), 16, 1.0)
    rng = np.random.default_rng(11)
    ratios = []
    while len(ratios) < 20:
        c, w, amp, tilt = rng.uniform(-6, 6, 2), rng.uniform(2, 8), rng.uniform(-3, 3), rng.normal(size=2)
        u = GridFunction.from_callable(g, lambda x: amp * np.exp(-((x - c) ** 2).sum(1) / (2 * w**2)) + x @ tilt)
        res = interpolation_check(u, h_floor=1.0, R=16)
        if res.proof_regime:
            ratios.append(res.ratio)
    try:
        interpolation_check(GridFunction.from_callable(g, lambda x: 2 * x[:, 0] + 1), R=16)
        rejected = False
    except DegenerateInput:
        rejected = True
    verdict(11, max(ratios) <= 1.0 and rejected, f"max lhs/rhs {max(ratios):.3f} over 20 functions; affine rejected")


@pytest.mark.slow
def test_c12_efron_stein_suite():
    rep = run("c12_concentration", kind="concentration_suite", field=CB2.to_dict(), samples=10_000, n_sites=100,
              base_seed=12)
    bad = [k for k, v in rep.checks.items() if not v]
    verdict(12, not bad, f"{len(rep.checks)} checks, failing: {bad or 'none'}")


def test_c13_duality():
    spec = FieldSpec(kind="full_symmetric", dim=2, lam=1.0, Lam=4.0, offdiag=1.0)
    worst = 0.0
    for seed in range(20):
        fld = random_field(spec, 100 + seed)
        eps = (0.25, 0.5)[seed % 2]
        m = invariant_measure(fld, eps, box_radius=20, h=1.0, tol=1e-12)
        G = modified_green(fld, eps, box_radius=20, h=1.0, tol=1e-12)
        chi = (G.grid.distance() < spec.ell).astype(float)
        chi[0, :] = chi[-1, :] = chi[:, 0] = chi[:, -1] = 0.0
        lhs, rhs = float(np.sum(chi * m.values)), eps**2 * float(np.sum(G.values))
        worst = max(worst, abs(lhs - rhs) / abs(rhs))
    verdict(13, worst <= 1e-5, f"max relative duality gap {worst:.2e}")


@pytest.mark.slow
def test_c14_sensitivity_envelope():
    rep = run("c14_sensitivity", kind="sensitivity", field=CB3.to_dict(), eps=[1 / 8], samples=4, window=10,
              sites_per_shell=6, box_factor=3, tol=1e-10, base_seed=14)
    slope = rep.fits["screened eps=0.125"].slope
    a = 1 / math.sqrt(8)
    ratios = {d: kernel_sum_ratio(e, d, a) for d in (2, 3, 5) for e in (1 / 4, 1 / 8, 1 / 16)}
    ok = abs(slope + 1.0) <= 0.7 and all(1e-3 <= r <= 1e3 for r in ratios.values())
    verdict(14, ok, f"shell exponent {slope:.3f} (target -1); kernel ratios in "
                    f"[{min(ratios.values()):.3g}, {max(ratios.values()):.3g}]")


@pytest.mark.slow
def test_c15_reproducibility(tmp_path):
    cases = {
        "scaling": dict(kind="scaling", field=CB2.to_dict(), eps=[0.5, 0.25, 0.125], samples=8, box_factor=3),
        "green": dict(kind="green_decay", field=CB2.to_dict(), eps=[0.25], samples=4, box_factor=3),
        "sensitivity": dict(kind="sensitivity", field=CB2.to_dict(), eps=[0.25], samples=2, window=3,
                            sites_per_shell=2, box_factor=3),
        "suite": dict(kind="concentration_suite", field=CB2.to_dict(), samples=50, n_sites=20),
    }
    same = []
    for name, kw in cases.items():
        cfg = ExperimentConfig(experiment_id=name, base_seed=15, **kw)
        run_to_dir(cfg, tmp_path / f"{name}_1", workers=1)
        run_to_dir(cfg, tmp_path / f"{name}_3", workers=3)
        same.append((tmp_path / f"{name}_1/raw.csv").read_bytes() == (tmp_path / f"{name}_3/raw.csv").read_bytes())
    verdict(15, all(same), f"{sum(same)}/{len(same)} experiments byte-identical across 1 and 3 workers")
