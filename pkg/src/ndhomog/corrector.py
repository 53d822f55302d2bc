"""Approximate correctors and the experiments built on them.

The approximate corrector solves ``eps^2 phi - tr(A (M + D^2 phi)) = 0`` in
all of space; numerically it is computed on a cube with zero Dirichlet data,
which is harmless because the massive term screens the boundary at rate
about ``eps / sqrt(Lam)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse.linalg as spla

from .env import FieldSpec, MatrixField, hash_seed, realize_field, sample_environment
from .grid import (
    Grid,
    GridFunction,
    Preconditioner,
    apply,
    assemble,
    assemble_coefficients,
    check_monotone,
    solve,
)
from .stats import Fit, StatReport, bootstrap_slope, linear_fit, summarize_cell

__all__ = [
    "error_scale",
    "truncation_radius",
    "BoxTooLarge",
    "NonMonotone",
    "CorrectorProblem",
    "AhomEstimate",
    "approximate_corrector",
    "ahom_estimate",
    "corrector_difference",
    "scaling_experiment",
    "checkerboard_dirichlet_experiment",
]


class BoxTooLarge(RuntimeError):
    """The requested truncation box exceeds the configured unknown budget."""


class NonMonotone(RuntimeError):
    """Assembly produced a matrix without the M-matrix sign pattern."""


def error_scale(eps: float, d: int) -> float:
    """The error scale: eps|log eps| (d=2), eps^1.5 (d=3), eps^2|log eps|^0.5 (d=4), eps^2 (d>4)."""
    if not (0 < eps <= 0.5):
        raise ValueError("eps must lie in (0, 1/2]")
    if int(d) != d or d < 2:
        raise ValueError("d must be an integer >= 2")
    L = abs(math.log(eps))
    if d == 2:
        return eps * L
    if d == 3:
        return eps**1.5
    if d == 4:
        return eps**2 * math.sqrt(L)
    return eps**2


def truncation_radius(
    eps: float,
    Lam: float,
    d: int,
    M_norm: float = 1.0,
    trunc_tol: float = 1e-6,
    h: float = 1.0,
    rule: str = "cosh",
) -> float:
    """Box radius for which ``eps^2 |phi_box(0) - phi(0)| <= trunc_tol``.

    ``tail`` is the continuum rule ``(2/(a eps)) log(1/(eps^2 tau))`` with
    ``a = 1/sqrt(2 Lam)``. ``cosh`` is certified for the discrete scheme: the
    separable barrier ``sum_i cosh(b x_i)`` with ``2 Lam (cosh(b h) - 1) = (eps h)^2``
    is a supersolution for every admissible field, and it bounds the error at
    the center by ``2 d^2 Lam |M| exp(-b R)``.
    """
    if rule == "tail":
        a = 1.0 / math.sqrt(2.0 * Lam)
        return (2.0 / (a * eps)) * math.log(1.0 / (eps**2 * trunc_tol))
    if rule == "cosh":
        b = math.acosh(1.0 + (eps * h) ** 2 / (2.0 * Lam)) / h
        return max(math.log(2.0 * d * d * Lam * max(M_norm, 1e-300) / trunc_tol), 0.0) / b
    raise ValueError(f"unknown truncation rule {rule!r}")


def box_radius(eps, spec: FieldSpec, h=1.0, M_norm=1.0, trunc_tol=1e-6, rule="cosh", box_factor=None) -> float:
    """Truncation radius rounded up to a whole number (a multiple of every allowed h)."""
    if box_factor is not None:
        R = box_factor / eps
    else:
        R = truncation_radius(eps, spec.Lam, spec.dim, M_norm, trunc_tol, h, rule)
    return float(max(math.ceil(R - 1e-9), 2))


def _check_budget(R, h, d, max_unknowns):
    n = int(round(2 * R / h)) - 1
    if float(n) ** d > max_unknowns:
        raise BoxTooLarge(f"box radius {R} at h={h} needs {n}^{d} unknowns > budget {max_unknowns}")


@dataclass(frozen=True, eq=False)
class CorrectorProblem:
    field: MatrixField
    M: np.ndarray
    eps: float
    trunc_tol: float = 1e-6
    h: float = 0.5
    box_factor: float | None = None
    box_rule: str = "cosh"
    max_unknowns: int = 20_000_000
    tol: float = 1e-8

    def __post_init__(self):
        M = np.atleast_2d(np.asarray(self.M, dtype=float))
        if not np.array_equal(M, M.T):
            raise ValueError("M must be symmetric")
        if np.abs(np.linalg.eigvalsh(M)).max(initial=0.0) > 1.0 + 1e-12:
            raise ValueError("normalize M so that |M| <= 1")
        if not (0 < self.eps <= 0.5):
            raise ValueError("eps must lie in (0, 1/2]")
        object.__setattr__(self, "M", M)

    @property
    def M_norm(self) -> float:
        return float(np.abs(np.linalg.eigvalsh(self.M)).max(initial=0.0))

    def grid(self) -> Grid:
        spec = self.field.spec
        R = box_radius(self.eps, spec, self.h, max(self.M_norm, 1e-12), self.trunc_tol,
                       self.box_rule, self.box_factor)
        _check_budget(R, self.h, spec.dim, self.max_unknowns)
        return Grid((0.0,) * spec.dim, R, self.h)


@dataclass
class AhomEstimate:
    matrix: np.ndarray
    per_entry_stderr: np.ndarray
    samples: int
    eps: float
    per_sample: np.ndarray = field(repr=False, default=None)

    def eigenvalues(self) -> np.ndarray:
        return np.linalg.eigvalsh(self.matrix)


# per-process cache of AMG hierarchies keyed by grid and reference operator
_PRECOND_CACHE: dict = {}


def reference_preconditioner(spec: FieldSpec, eps: float, grid: Grid) -> Preconditioner:
    """Hierarchy of the operator with the mean coefficient, built once per process."""
    key = (grid, float(eps), tuple(np.asarray(spec.mean_matrix()).reshape(-1)))
    pc = _PRECOND_CACHE.get(key)
    if pc is None:
        mean = FieldSpec.constant(spec.mean_matrix())
        pc = Preconditioner(assemble(realize_field(None, mean), eps, grid))
        if len(_PRECOND_CACHE) > 8:
            _PRECOND_CACHE.clear()
        _PRECOND_CACHE[key] = pc
    return pc


def _trace_rhs(A: np.ndarray, M: np.ndarray, grid: Grid) -> np.ndarray:
    out = np.zeros(grid.shape)
    out[(slice(1, -1),) * grid.dim] = np.einsum("...ij,ji->...", A, M)
    return out


def approximate_corrector(
    p: CorrectorProblem,
    method: str = "amg",
    preconditioner: Preconditioner | None = None,
    allow_nonmonotone: bool = False,
) -> GridFunction:
    """Discrete approximate corrector on the truncation box centered at 0."""
    grid = p.grid()
    A = assemble_coefficients(p.field, grid)
    op = assemble(None, p.eps, grid, coefficients=A)
    rep = check_monotone(op)
    if not rep.is_monotone and not allow_nonmonotone:
        raise NonMonotone(f"assembly is not monotone (margin {rep.margin:.3g} at {rep.worst_row})")
    rhs = _trace_rhs(A, p.M, grid)
    if not np.any(rhs):
        return GridFunction(grid, np.zeros(grid.shape), {"iterations": 0, "residual": 0.0})
    u = solve(op, rhs, tol=p.tol, method=method, preconditioner=preconditioner)
    u.meta["box_radius"] = grid.radius
    u.meta["monotone_margin"] = rep.margin
    return u


def _symmetric_basis(d: int):
    basis = []
    for i in range(d):
        for j in range(i, d):
            E = np.zeros((d, d))
            if i == j:
                E[i, i] = 1.0
            else:
                E[i, j] = E[j, i] = 1.0
            basis.append(((i, j), E))
    return basis


def ahom_estimate(
    spec: FieldSpec,
    eps: float,
    n_samples: int,
    seed: int,
    h: float = 1.0,
    box_factor: float | None = None,
    trunc_tol: float = 1e-6,
    tol: float = 1e-10,
    method: str = "amg",
) -> AhomEstimate:
    """Monte Carlo estimate of the homogenized matrix from ``eps^2 phi_eps(0)``.

    For each basis matrix ``E`` (``e_i e_i^T`` or ``e_i e_j^T + e_j e_i^T``)
    the sample mean of ``eps^2 phi_eps(0)`` estimates ``tr(Abar E)``, which is
    ``Abar_ii`` or ``2 Abar_ij``.
    """
    if n_samples < 2:
        raise ValueError("need at least two samples")
    d = spec.dim
    basis = _symmetric_basis(d)
    grid = Grid((0.0,) * d, box_radius(eps, spec, h, 1.0, trunc_tol, "cosh", box_factor), h)
    pc = reference_preconditioner(spec, eps, grid) if method == "amg" else None
    vals = np.zeros((n_samples, d, d))
    for s in range(n_samples):
        lat = sample_environment(spec, hash_seed(seed, s)) if spec.random else None
        fld = realize_field(lat, spec)
        A = assemble_coefficients(fld, grid)
        op = assemble(None, eps, grid, coefficients=A)
        for (i, j), E in basis:
            rhs = _trace_rhs(A, E, grid)
            if not np.any(rhs):
                continue
            u = solve(op, rhs, tol=tol, method=method, preconditioner=pc)
            v = eps**2 * u.center_value()
            if i == j:
                vals[s, i, i] = v
            else:
                vals[s, i, j] = vals[s, j, i] = 0.5 * v
    mat = vals.mean(axis=0)
    mat = 0.5 * (mat + mat.T)
    se = vals.std(axis=0, ddof=1) / math.sqrt(n_samples)
    return AhomEstimate(mat, se, n_samples, eps, vals)


def corrector_difference(
    field: MatrixField,
    M,
    eps: float,
    h: float = 0.5,
    trunc_tol: float = 1e-6,
    box_factor: float | None = None,
    tol: float = 1e-10,
    method: str = "amg",
) -> GridFunction:
    """``psi = phi_eps - phi_{2 eps}``, both on the box required by ``eps``.

    ``meta`` carries ``phi_2eps`` and ``identity_residual``, the sup of
    ``eps^2 psi - tr(A D^2 psi) - 3 eps^2 phi_{2eps}`` over interior nodes.
    """
    if not (0 < eps <= 0.25):
        raise ValueError("eps must lie in (0, 1/4] so that 2 eps is admissible")
    p = CorrectorProblem(field, M, eps, trunc_tol, h, box_factor, tol=tol)
    grid = p.grid()
    A = assemble_coefficients(field, grid)
    rhs = _trace_rhs(A, p.M, grid)
    op1 = assemble(None, eps, grid, coefficients=A)
    op2 = assemble(None, 2 * eps, grid, coefficients=A)
    phi1 = solve(op1, rhs, tol=tol, method=method)
    phi2 = solve(op2, rhs, tol=tol, method=method)
    psi = phi1 - phi2
    resid = apply(op1, psi).interior() - 3 * eps**2 * phi2.interior()
    scale = np.abs(rhs).max(initial=0.0) + (2 * eps) ** 2 * np.abs(phi2.values).max(initial=0.0)
    psi.meta.update(
        phi_2eps=phi2,
        phi_eps=phi1,
        identity_residual=float(np.abs(resid).max(initial=0.0)),
        residual_scale=float(scale),
    )
    return psi


# --------------------------------------------------------------------------
# experiments


def sample_seed(base_seed: int, exp_id: str, index: int) -> int:
    import zlib

    return hash_seed(base_seed, zlib.crc32(exp_id.encode()), index)


class ScalingExperiment:
    """``eps^2 phi_eps(0)`` over an eps sweep; one row per (sample, eps)."""

    kind = "scaling"
    columns = ("sample_index", "eps", "value", "seed")

    def cells(self, cfg):
        return [float(e) for e in cfg.eps]

    def sample(self, cfg, index):
        spec = cfg.field_spec()
        seed = sample_seed(cfg.base_seed, cfg.exp_id, index)
        fld = realize_field(sample_environment(spec, seed) if spec.random else None, spec)
        M = cfg.matrix_M()
        rows = []
        for eps in self.cells(cfg):
            p = CorrectorProblem(fld, M, eps, cfg.trunc_tol, cfg.h, cfg.box_factor, cfg.box_rule,
                                 cfg.max_unknowns, cfg.tol)
            grid = p.grid()
            pc = None
            if cfg.solver == "amg" and cfg.reuse_hierarchy:
                pc = reference_preconditioner(spec, eps, grid)
            u = approximate_corrector(p, method=cfg.solver, preconditioner=pc)
            rows.append({"sample_index": index, "eps": eps, "value": eps**2 * u.center_value(), "seed": seed})
        return rows

    def summarize(self, cfg, rows) -> StatReport:
        d = cfg.field["dim"]
        return _variance_scaling_report(self.kind, cfg, rows, d, np.trace(cfg.matrix_M()))

    def plot_tables(self, cfg, report):
        return _scaling_tables(report)


def _variance_scaling_report(kind, cfg, rows, d, trM) -> StatReport:
    rep = StatReport(kind)
    eps_list = [float(e) for e in cfg.eps]
    groups = []
    for eps in eps_list:
        vals = [r["value"] for r in rows if float(r["eps"]) == eps and np.isfinite(r["value"])]
        groups.append(np.asarray(vals))
        rep.cells.append(summarize_cell(f"eps={eps!r}", vals))
    rep.failures = sum(1 for r in rows if not np.isfinite(r["value"]))
    E = np.array([error_scale(e, d) for e in eps_list])
    sds = np.array([c.sd for c in rep.cells])
    if np.any(sds <= 1e-14) or any(g.size < 2 for g in groups):
        rep.fits["log_sd_vs_log_E"] = Fit(float("nan"), float("nan"), (float("nan"),) * 2, len(eps_list),
                                          True, "zero variance: degenerate fit")
    else:
        fit = linear_fit(np.log(E), np.log(sds))
        fit.note = "bootstrap 95% interval in extra.bootstrap_ci"
        rep.fits["log_sd_vs_log_E"] = fit
        rep.extra["bootstrap_ci"] = bootstrap_slope(groups, np.log(E), lambda a: a.std(ddof=1),
                                                    seed=cfg.base_seed)
        rep.fits["log_sd_vs_log_eps"] = linear_fit(np.log(eps_list), np.log(sds))
    rep.extra["eps"] = eps_list
    rep.extra["E_eps"] = E.tolist()
    if trM:
        rep.extra["mean_over_trM"] = [c.mean / trM for c in rep.cells]
    rep.seeds = {"base_seed": cfg.base_seed, "experiment_id": cfg.exp_id}
    return rep


def _scaling_tables(report):
    fit = report.fits.get("log_sd_vs_log_E")
    rows = []
    for eps, E, c in zip(report.extra.get("eps", []), report.extra.get("E_eps", []), report.cells):
        fitted = math.exp(fit.intercept + fit.slope * math.log(E)) if fit and not fit.degenerate else float("nan")
        rows.append((eps, E, c.sd, fitted))
    return {"scaling": (("eps", "E_eps", "sd", "fit"), rows)}


def gaussian_bump(width: float):
    def f(x):
        return np.exp(-np.sum(x**2, axis=-1) / (2.0 * width**2))

    return f


def dirichlet_ball_solve(fld, eps, h, source, tol=1e-10):
    """``-tr(A(y) D^2 U) = eps^2 f(eps y)`` on the ball of radius 1/eps, U = 0 outside.

    Returns ``U(0)``, which equals ``u^eps(0)`` for ``-tr(A(x/eps) D^2 u) = f``
    on the unit ball.
    """
    import pyamg

    d = fld.dim
    R = math.ceil(1.0 / eps)
    grid = Grid((0.0,) * d, float(R), h)
    op = assemble(fld, 0.0, grid)
    inside = (grid.distance()[(slice(1, -1),) * d] < 1.0 / eps).reshape(-1)
    idx = np.flatnonzero(inside)
    K = op.matrix[idx][:, idx].tocsr()
    pts = grid.points(interior=True)[idx]
    b = eps**2 * source(eps * pts)
    ml = pyamg.ruge_stuben_solver(K)
    x = ml.solve(b, tol=tol * 1e-2, accel="bcgs", maxiter=500)
    res = float(np.abs(b - K @ x).max())
    if res > tol * np.abs(b).max():
        x = spla.spsolve(K.tocsc(), b)
    center = np.flatnonzero(np.all(np.abs(pts) < 1e-12, axis=1))[0]
    return float(x[center])


class DirichletCheckerboardExperiment:
    kind = "dirichlet_checkerboard"
    columns = ("sample_index", "eps", "value", "seed")

    def cells(self, cfg):
        return [float(e) for e in cfg.eps]

    def sample(self, cfg, index):
        spec = cfg.field_spec()
        seed = sample_seed(cfg.base_seed, cfg.exp_id, index)
        fld = realize_field(sample_environment(spec, seed) if spec.random else None, spec)
        src = gaussian_bump(cfg.source_width)
        return [
            {"sample_index": index, "eps": eps, "value": dirichlet_ball_solve(fld, eps, cfg.h, src, cfg.tol),
             "seed": seed}
            for eps in self.cells(cfg)
        ]

    def summarize(self, cfg, rows) -> StatReport:
        d = cfg.field["dim"]
        rep = _variance_scaling_report(self.kind, cfg, rows, d, 0.0)
        sds = np.array([c.sd for c in rep.cells])
        E = np.asarray(rep.extra["E_eps"])
        if np.all(sds > 1e-14):
            rep.fits["log_var_vs_log_E2"] = linear_fit(np.log(E**2), np.log(sds**2))
        means = [c.mean for c in rep.cells]
        errs = [c.stderr for c in rep.cells]
        diffs = [abs(means[k + 1] - means[k]) for k in range(len(means) - 1)]
        rep.extra["cauchy_differences"] = diffs
        rep.extra["cauchy_stderr"] = [math.hypot(errs[k], errs[k + 1]) for k in range(len(diffs))]
        return rep

    def plot_tables(self, cfg, report):
        return _scaling_tables(report)


def scaling_experiment(config, workers: int = 1) -> StatReport:
    """Variance of ``eps^2 phi_eps(0)`` across an eps sweep and its scaling fit."""
    from .runner import run_in_memory

    return run_in_memory(config, workers=workers)


def checkerboard_dirichlet_experiment(config, workers: int = 1) -> StatReport:
    """Variance of ``u^eps(0)`` for the Dirichlet problem in a random checkerboard."""
    from .runner import run_in_memory

    return run_in_memory(config, workers=workers)
