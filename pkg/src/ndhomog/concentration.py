"""Vertical derivatives, Efron–Stein type inequalities and their empirical validators.

A functional is any deterministic map ``lattice -> float``. Its vertical
derivative at a site ``z`` is ``X - E[X | all sites but z]``; the conditional
expectation is estimated by resampling the seed at ``z`` (or computed
exactly by enumeration when the site law is finite).

The validators are one-sided: they report that an inequality was not
violated beyond the sampling margin and never certify tightness.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import brentq
from scipy.signal import fftconvolve
from scipy.special import logsumexp

from .env import FieldSpec, SiteSeedLattice, _uniform, hash_seed, realize_field, resample_site, sample_environment
from .green import envelope_xi, screened_regression
from .stats import Fit, StatReport, linear_fit, summarize_cell

__all__ = [
    "KAPPA",
    "ALPHA",
    "VerticalDerivative",
    "ConcentrationReport",
    "WindowTooSmall",
    "vertical_derivative",
    "total_vertical_variance",
    "required_window",
    "efron_stein_check",
    "moment_bound_check",
    "stretched_bound",
    "stretched_bound_log",
    "kernel_sum",
    "kernel_sum_ratio",
    "convolution_ratio",
    "sensitivity_experiment",
]

KAPPA = 1.271
ALPHA = 20.0


class WindowTooSmall(ValueError):
    def __init__(self, required: float, given: float):
        super().__init__(f"window radius {given:g} is below the envelope requirement {required:.6g}")
        self.required = required
        self.given = given


@dataclass
class VerticalDerivative:
    site: tuple
    estimate: float
    stderr: float
    K: int
    exact: bool = False


@dataclass
class ConcentrationReport:
    empirical_lhs: float
    bound_rhs: float
    margin: float
    n_samples: int
    stderr: float
    passed: bool
    beta: float | None = None
    p: float | None = None
    overflow: bool = False
    extra: dict = field(default_factory=dict)

    def to_dict(self):
        return {k: v for k, v in self.__dict__.items()}


# --------------------------------------------------------------------------
# vertical derivatives


def _fresh_seed(seed: int, z, k: int) -> int:
    return hash_seed(seed, 0x5EED, k, *(int(c) & 0xFFFFFFFF for c in z))


def value_seeds(law, tag: int = 0, max_tries: int = 10_000) -> dict:
    """One site seed per support point of a finite law (stream 0 uniform)."""
    found = {}
    for j in range(max_tries):
        s = hash_seed(tag, 0xFACE, j)
        v = float(law.quantile(_uniform(np.array([s], dtype=np.uint64), 0))[0])
        found.setdefault(v, s)
        if len(found) == len(law.values):
            return found
    raise RuntimeError("could not realize every support point")


def vertical_derivative(functional, lattice: SiteSeedLattice, z, K: int = 32, seed: int = 0,
                        law=None, base_value: float | None = None) -> VerticalDerivative:
    """``X - (1/K) sum_k X(resampled at z)``; exact when a finite scalar ``law`` is given.

    With ``law`` (the site law of a scalar checkerboard), the conditional
    expectation is the weighted sum over the support points, each realized
    by a seed that maps to it.
    """
    z = tuple(int(c) for c in z)
    X = functional(lattice) if base_value is None else base_value
    if law is not None and law.is_discrete:
        seeds = value_seeds(law, seed)
        cur = float(law.quantile(lattice.uniforms(np.asarray([z]), 0))[0])
        cond = 0.0
        for v, p in zip(law.values, law.probs):
            xv = X if v == cur else functional(resample_site(lattice, z, seeds[v]))
            cond += p * xv
        return VerticalDerivative(z, float(X - cond), 0.0, len(law.values), True)
    if K < 2:
        raise ValueError("K must be at least 2")
    vals = np.array([functional(resample_site(lattice, z, _fresh_seed(seed, z, k))) for k in range(K)])
    return VerticalDerivative(z, float(X - vals.mean()), float(vals.std(ddof=1) / math.sqrt(K)), K)


def required_window(eps: float, d: int, a: float, floor: float = 1e-4) -> float:
    """Radius beyond which ``xi_eps < floor * xi_eps(0)``."""
    f = lambda r: float(envelope_xi(eps, r, d, a)) - floor * float(envelope_xi(eps, 0.0, d, a))
    hi = 1.0
    while f(hi) > 0:
        hi *= 2.0
    return brentq(f, 0.0, hi)


def window_sites(radius: float, d: int) -> np.ndarray:
    m = int(math.floor(radius))
    ax = np.arange(-m, m + 1)
    pts = np.stack(np.meshgrid(*([ax] * d), indexing="ij"), axis=-1).reshape(-1, d)
    return pts[np.linalg.norm(pts, axis=1) <= radius + 1e-12]


def total_vertical_variance(functional, lattice: SiteSeedLattice, window, K: int = 32, seed: int = 0,
                            envelope: tuple | None = None, law=None) -> dict:
    """``sum_z D(z)^2`` over a window, each square bias-corrected by ``- stderr^2``.

    ``window`` is a radius or an explicit array of sites. With
    ``envelope = (eps, a)`` (optionally ``(eps, a, floor)``) a radius window
    smaller than :func:`required_window` is refused.
    """
    d = lattice.dim
    if np.isscalar(window):
        if envelope is not None:
            need = required_window(envelope[0], d, envelope[1], *(envelope[2:] or (1e-4,)))
            if window < need:
                raise WindowTooSmall(need, float(window))
        sites = window_sites(float(window), d)
    else:
        sites = np.atleast_2d(np.asarray(window, dtype=int))
    X = functional(lattice)
    total, raw = 0.0, 0.0
    for z in sites:
        vd = vertical_derivative(functional, lattice, z, K, seed, law, base_value=X)
        raw += vd.estimate**2
        total += vd.estimate**2 - vd.stderr**2
    return {"value": total, "uncorrected": raw, "n_sites": len(sites)}


# --------------------------------------------------------------------------
# inequalities


def _paired(X, V):
    X = np.asarray(X, dtype=float)
    V = np.asarray(V, dtype=float)
    if X.shape != V.shape or X.ndim != 1:
        raise ValueError("samples_X and samples_V must be paired 1-d arrays")
    if X.size < 2:
        raise ValueError("need at least 2 samples")
    return X, V


def efron_stein_check(samples_X, samples_V) -> ConcentrationReport:
    """``var X <= E V`` with a 3-stderr allowance; ``margin = E V - var X``."""
    X, V = _paired(samples_X, samples_V)
    n = X.size
    c = X - X.mean()
    var = float(c @ c / (n - 1))
    meanV = float(V.mean())
    se_var = float(np.std(c**2, ddof=1) / math.sqrt(n))
    se_V = float(V.std(ddof=1) / math.sqrt(n))
    se = math.hypot(se_var, se_V)
    return ConcentrationReport(var, meanV, meanV - var, n, se, var <= meanV + 3 * se, p=2.0)


def moment_bound_check(samples_X, samples_V, p: float) -> ConcentrationReport:
    """``E|X - EX|^p <= 1.271 p^(p/2) E[V^(p/2)]`` with a 3-stderr allowance on the left."""
    if p < 2:
        raise ValueError("p must be at least 2")
    X, V = _paired(samples_X, samples_V)
    dev = np.abs(X - X.mean()) ** p
    lhs = float(dev.mean())
    rhs = float(KAPPA * p ** (p / 2) * np.mean(V ** (p / 2)))
    se = float(dev.std(ddof=1) / math.sqrt(X.size))
    return ConcentrationReport(lhs, rhs, rhs - lhs, X.size, se, lhs <= rhs + 3 * se, p=float(p))


def stretched_bound_log(beta: float, samples_V, alpha: float = ALPHA, kappa: float = KAPPA) -> float:
    """Natural log of :func:`stretched_bound` (finite even when the bound overflows a float)."""
    if not (0 < beta < 2):
        raise ValueError("beta must lie in (0, 2)")
    if alpha <= math.e * kappa * beta:
        raise ValueError("need alpha > e * kappa * beta")
    V = np.asarray(samples_V, dtype=float)
    if V.size == 0 or np.any(V < 0):
        raise ValueError("samples_V must be nonempty and nonnegative")
    t1 = float(V.mean()) ** (beta / 2)
    expo = (alpha * V) ** (beta / (2 - beta))
    lme = float(logsumexp(expo) - math.log(V.size))
    t2 = (beta / 2) * math.log(alpha / (alpha - math.e * kappa * beta)) + ((2 - beta) / 2) * lme
    return float(np.logaddexp(t1, t2))


def stretched_bound(beta: float, samples_V, alpha: float = ALPHA, kappa: float = KAPPA) -> float:
    """``exp(E[V]^(b/2)) + (alpha/(alpha - e kappa b))^(b/2) E[exp((alpha V)^(b/(2-b)))]^((2-b)/2)``.

    Plug-in estimate from samples of ``V``; returns ``inf`` when the value
    overflows a float (the bound is then vacuous, see ``stretched_bound_log``).
    """
    lg = stretched_bound_log(beta, samples_V, alpha, kappa)
    return math.exp(lg) if lg < 709.0 else float("inf")


def stretched_check(samples_X, samples_V, beta: float) -> ConcentrationReport:
    X, V = _paired(samples_X, samples_V)
    vals = np.exp(np.abs(X - X.mean()) ** beta)
    lhs = float(vals.mean())
    lg = stretched_bound_log(beta, V)
    overflow = lg >= 709.0
    rhs = math.exp(lg) if not overflow else float("inf")
    se = float(vals.std(ddof=1) / math.sqrt(X.size))
    return ConcentrationReport(lhs, rhs, rhs - lhs, X.size, se, lhs <= rhs + 3 * se, beta=beta,
                               overflow=overflow, extra={"log_bound": lg})


# --------------------------------------------------------------------------
# kernel sums (pure numerics)


def shell_counts(d: int, kmax: int) -> np.ndarray:
    """``counts[k] = #{z in Z^d : |z|^2 = k}`` for ``k <= kmax``."""
    one = np.zeros(kmax + 1)
    n = np.arange(0, math.isqrt(kmax) + 1)
    one[n**2] += 2.0
    one[0] = 1.0
    out = one.copy()
    for _ in range(d - 1):
        out = np.rint(fftconvolve(out, one)[: kmax + 1])
    return out


def kernel_sum(eps: float, d: int, a: float, tail: float = 40.0) -> float:
    """``sum_{z in Z^d} xi_eps(z)^2``, truncated where ``exp(-2 a eps r) < e^-tail``."""
    rmax = tail / (2 * a * eps)
    kmax = int(math.ceil(rmax**2))
    counts = shell_counts(d, kmax)
    k = np.flatnonzero(counts)
    r = np.sqrt(k)
    return float(np.sum(counts[k] * envelope_xi(eps, r, d, a) ** 2))


def kernel_sum_ratio(eps: float, d: int, a: float) -> float:
    """``sum xi_eps^2 / (eps^-4 E(eps)^2)``."""
    from .corrector import error_scale

    return kernel_sum(eps, d, a) / (eps**-4 * error_scale(eps, d) ** 2)


def convolution_ratio(eps: float, r: float, d: int = 5, a: float = 1.0, L: int = 12) -> float:
    """``sum_y xi(y) xi(x - y)`` at ``x = r e_1`` over the box ``|y|_inf <= L``, divided by
    ``exp(-a eps r)((1 + r)^(4-d) + eps^(d-4))``."""
    ax = np.arange(-L, L + 1, dtype=float)
    total = 0.0
    rest = np.stack(np.meshgrid(*([ax] * (d - 1)), indexing="ij"), axis=-1).reshape(-1, d - 1)
    rest2 = (rest**2).sum(axis=1)
    for y1 in ax:
        ry = np.sqrt(y1**2 + rest2)
        rx = np.sqrt((r - y1) ** 2 + rest2)
        total += float(np.sum(envelope_xi(eps, ry, d, a) * envelope_xi(eps, rx, d, a)))
    form = math.exp(-a * eps * r) * ((1 + r) ** (4 - d) + eps ** (d - 4))
    return total / form


# --------------------------------------------------------------------------
# experiments


def _site_law(spec: FieldSpec):
    return spec.law if spec.kind == "scalar_checkerboard" and spec.law.is_discrete else None


def _shell_sites(window: float, d: int, per_shell: int, seed: int) -> list[tuple]:
    sites = window_sites(window, d)
    r = np.linalg.norm(sites, axis=1)
    shell = np.rint(r).astype(int)
    rng = np.random.default_rng(seed)
    out = []
    for k in range(1, int(math.floor(window)) + 1):
        cand = sites[shell == k]
        if len(cand) == 0:
            continue
        pick = rng.choice(len(cand), size=min(per_shell, len(cand)), replace=False)
        out.extend(tuple(int(c) for c in cand[i]) for i in sorted(pick))
    return out


class SensitivityExperiment:
    """Vertical derivatives of ``eps^2 phi_eps(0)`` at sampled sites, shell by shell."""

    kind = "sensitivity"
    columns = ("sample_index", "eps", "site", "r", "estimate", "stderr", "seed")
    order_columns = ("r", "site")

    def cells(self, cfg):
        return [float(e) for e in cfg.eps]

    def window(self, cfg, eps):
        return float(cfg.window) if cfg.window else math.floor(1.0 / (2.0 * eps))

    def sample(self, cfg, index):
        from .corrector import (
            CorrectorProblem,
            _trace_rhs,
            reference_preconditioner,
            sample_seed,
        )
        from .grid import assemble, assemble_coefficients, solve

        spec = cfg.field_spec()
        seed = sample_seed(cfg.base_seed, cfg.exp_id, index)
        lattice = sample_environment(spec, seed)
        M = cfg.matrix_M()
        law = _site_law(spec)
        rows = []
        for eps in self.cells(cfg):
            box_factor = cfg.box_factor if cfg.box_factor else 3.0
            p0 = CorrectorProblem(realize_field(lattice, spec), M, eps, cfg.trunc_tol, cfg.h, box_factor,
                                  cfg.box_rule, cfg.max_unknowns, cfg.tol)
            grid = p0.grid()
            pc = reference_preconditioner(spec, eps, grid) if cfg.solver == "amg" else None
            state = {}

            def functional(lat):
                A = assemble_coefficients(realize_field(lat, spec), grid)
                op = assemble(None, eps, grid, coefficients=A)
                u = solve(op, _trace_rhs(A, M, grid), tol=cfg.tol, method=cfg.solver, preconditioner=pc,
                          x0=state.get("x0"))
                state.setdefault("x0", u.values)
                return eps**2 * u.center_value()

            X = functional(lattice)
            sites = _shell_sites(self.window(cfg, eps), spec.dim, cfg.sites_per_shell, seed)
            for z in sites:
                vd = vertical_derivative(functional, lattice, z, cfg.K, seed, law, base_value=X)
                rows.append({"sample_index": index, "eps": eps, "site": "_".join(map(str, z)),
                             "r": float(np.linalg.norm(z)), "estimate": vd.estimate, "stderr": vd.stderr,
                             "seed": seed})
        return rows

    def summarize(self, cfg, rows):
        rep = StatReport(self.kind)
        spec = cfg.field_spec()
        d = spec.dim
        a = 1.0 / math.sqrt(2.0 * spec.Lam)
        for eps in self.cells(cfg):
            sub = [r for r in rows if float(r["eps"]) == eps]
            rep.cells.append(summarize_cell(f"eps={eps!r}", [abs(r["estimate"]) for r in sub]))
            if not sub:
                continue
            shell = np.rint([r["r"] for r in sub]).astype(int)
            absd = np.abs([r["estimate"] for r in sub])
            ks = np.unique(shell)
            means = np.array([absd[shell == k].mean() for k in ks])
            rr = ks.astype(float)
            rep.extra[f"shell_profile eps={eps!r}"] = {"r": rr.tolist(), "mean_abs_D": means.tolist()}
            lo, hi = (cfg.annulus or (1.0, self.window(cfg, eps)))
            sel = (rr >= lo) & (rr <= hi) & (means > 0)
            if sel.sum() >= 4:
                slope, ci, kappa = screened_regression(rr[sel], means[sel])
                rep.fits[f"screened eps={eps!r}"] = Fit(slope, float("nan"), ci, int(sel.sum()),
                                                        note=f"log|D| ~ c + s log r - kappa r, kappa={kappa:.4g}")
                rep.fits[f"direct eps={eps!r}"] = linear_fit(np.log(rr[sel]), np.log(means[sel]))
                xi = envelope_xi(eps, rr[sel], d, a)
                rep.extra[f"ratio_to_envelope eps={eps!r}"] = (means[sel] / xi).tolist()
            rep.extra[f"kernel_sum_ratio eps={eps!r}"] = kernel_sum_ratio(eps, d, a)
        rep.extra["target_exponent"] = 2.0 - d
        rep.seeds = {"base_seed": cfg.base_seed, "experiment_id": cfg.exp_id}
        return rep

    def plot_tables(self, cfg, report):
        out = {}
        for eps in self.cells(cfg):
            prof = report.extra.get(f"shell_profile eps={eps!r}")
            if prof:
                out[f"sensitivity_eps{eps:g}"] = (("r", "mean_abs_D"), list(zip(prof["r"], prof["mean_abs_D"])))
        return out


FUNCTIONALS = ("sum_pm1", "sum_uniform", "sum_heavy", "max_uniform")


def synthetic_sample(name: str, n_sites: int, seed: int):
    """One draw of a synthetic functional and its exact ``V = sum_z (X - E_z X)^2``.

    Sites are i.i.d.; sums are normalized by ``n^-1/2``. ``sum_heavy`` uses
    the bounded heavy-tailed site law ``min((1-U)^(-2/3), 50)``.
    """
    lat = SiteSeedLattice(seed, 1)
    u = lat.uniforms(np.arange(n_sites)[:, None], 0)
    s = 1.0 / math.sqrt(n_sites)
    if name == "sum_pm1":
        w = np.where(u < 0.5, -1.0, 1.0)
        return float(s * w.sum()), float(s**2 * np.sum(w**2))
    if name == "sum_uniform":
        w = u - 0.5
        return float(s * w.sum()), float(s**2 * np.sum(w**2))
    if name == "sum_heavy":
        w = np.minimum((1.0 - u) ** (-2.0 / 3.0), 50.0)
        mu = heavy_mean()
        return float(s * w.sum()), float(s**2 * np.sum((w - mu) ** 2))
    if name == "max_uniform":
        w = u
        X = float(w.max())
        order = np.sort(w)
        V = 0.0
        for k in range(n_sites):
            m = order[-1] if w[k] != order[-1] or np.sum(w == order[-1]) > 1 else order[-2]
            cond = 0.5 * (1.0 + m * m)
            V += (X - cond) ** 2
        return X, float(V)
    raise ValueError(f"unknown functional {name!r}")


def heavy_mean() -> float:
    # E[min((1-U)^(-2/3), 50)] = int_0^{1-c} (1-u)^(-2/3) du + 50 c with c = 50^(-3/2)
    c = 50.0**-1.5
    return 3.0 * (1.0 - c ** (1.0 / 3.0)) + 50.0 * c


class ConcentrationSuiteExperiment:
    """Synthetic i.i.d. functionals with exact ``V``: Efron–Stein, moment and stretched bounds."""

    kind = "concentration_suite"
    cell_column = "functional"
    columns = ("sample_index", "functional", "X", "V", "seed")

    def cells(self, cfg):
        return list(FUNCTIONALS)

    def sample(self, cfg, index):
        from .corrector import sample_seed

        seed = sample_seed(cfg.base_seed, cfg.exp_id, index)
        rows = []
        for name in FUNCTIONALS:
            X, V = synthetic_sample(name, cfg.n_sites, seed)
            rows.append({"sample_index": index, "functional": name, "X": X, "V": V, "seed": seed})
        return rows

    def summarize(self, cfg, rows):
        rep = StatReport(self.kind)
        for name in FUNCTIONALS:
            sub = [r for r in rows if r["functional"] == name]
            if len(sub) < 2:
                continue
            X = np.array([r["X"] for r in sub])
            V = np.array([r["V"] for r in sub])
            rep.cells.append(summarize_cell(f"functional={name}", X))
            es = efron_stein_check(X, V)
            entry = {"efron_stein": es.to_dict()}
            entry["moments"] = {f"p={p:g}": moment_bound_check(X, V, p).to_dict() for p in cfg.p_values}
            entry["stretched"] = {f"beta={b:g}": stretched_check(X, V, b).to_dict() for b in cfg.betas}
            rep.extra[name] = entry
            if name.startswith("sum"):
                rep.checks[f"{name} equality"] = bool(abs(es.margin) <= 3 * es.stderr)
            else:
                rep.checks[f"{name} strict"] = bool(es.margin > 3 * es.stderr)
            rep.checks[f"{name} moments"] = all(v["passed"] for v in entry["moments"].values())
            rep.checks[f"{name} stretched"] = all(v["passed"] for v in entry["stretched"].values())
        rep.seeds = {"base_seed": cfg.base_seed, "experiment_id": cfg.exp_id}
        return rep

    def plot_tables(self, cfg, report):
        rows = []
        for name in FUNCTIONALS:
            e = report.extra.get(name)
            if e:
                es = e["efron_stein"]
                rows.append((name, es["empirical_lhs"], es["bound_rhs"], es["stderr"]))
        return {"efron_stein": (("functional", "var_X", "mean_V", "stderr"), rows)}


def sensitivity_experiment(config, workers: int = 1) -> StatReport:
    from .runner import run_in_memory

    return run_in_memory(config, workers=workers)


def concentration_suite(config, workers: int = 1) -> StatReport:
    from .runner import run_in_memory

    return run_in_memory(config, workers=workers)
