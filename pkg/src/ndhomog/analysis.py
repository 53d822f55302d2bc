"""Coarsened Hölder seminorms from exact minimax fits.

Every infimum over affine or quadratic polynomials is computed as a linear
program over the grid nodes of a closed ball ``|x - c| <= r``::

    minimize  hi - lo   subject to   lo <= u(x) - fit(x) <= hi.

``achieved_osc`` is then recomputed directly from the optimal coefficients,
so it is the exact oscillation of the returned fit.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import linprog

from .env import FieldSpec, realize_field, sample_environment
from .grid import Grid, GridFunction, assemble, solve
from .stats import StatReport, linear_fit, summarize_cell

__all__ = [
    "MinimaxFit",
    "CascadeTrace",
    "DegenerateBall",
    "DegenerateInput",
    "best_fit",
    "coarsened_seminorm",
    "interpolation_check",
    "quadratic_cascade",
    "spectral_norm",
    "regularity_experiment",
    "homogenization_error_experiment",
]

LP_OPTIONS = {"primal_feasibility_tolerance": 1e-10, "dual_feasibility_tolerance": 1e-10}


class DegenerateBall(ValueError):
    """The ball holds too few nodes to determine the fit."""


class DegenerateInput(ValueError):
    """Input is (numerically) affine, so the interpolation bound is void."""


@dataclass
class MinimaxFit:
    kind: str
    p: np.ndarray
    constant: float
    Q: np.ndarray | None
    achieved_osc: float
    center: tuple
    r: float
    dual_gap: float = 0.0
    n_points: int = 0

    def __call__(self, x) -> np.ndarray:
        y = np.atleast_2d(np.asarray(x, dtype=float)) - np.asarray(self.center)
        out = self.constant + y @ self.p
        if self.Q is not None:
            out = out + 0.5 * np.einsum("ni,ij,nj->n", y, self.Q, y)
        return out

    @property
    def sup_error(self) -> float:
        """``inf_c sup |u - fit - c|``, i.e. half the oscillation."""
        return 0.5 * self.achieved_osc


def spectral_norm(Q) -> float:
    return float(np.max(np.abs(np.linalg.eigvalsh(np.asarray(Q))), initial=0.0))


def _ball(u: GridFunction, center, r):
    g = u.grid
    c = np.asarray(center, dtype=float)
    if np.any(np.abs(c - np.asarray(g.center)) + r > g.radius + 1e-9):
        raise ValueError("ball leaves the grid")
    dist = g.distance(c)
    mask = dist <= r + 1e-9 * max(1.0, r)
    pts = g.points()[mask.reshape(-1)]
    return pts, u.values[mask]


def _features(y, kind):
    n, d = y.shape
    cols = [y[:, i] for i in range(d)]
    if kind == "quadratic":
        for i in range(d):
            for j in range(i, d):
                cols.append(0.5 * y[:, i] ** 2 if i == j else y[:, i] * y[:, j])
    return np.column_stack(cols) if cols else np.zeros((n, 0))


def _unpack(coef, d, kind):
    p = coef[:d]
    if kind == "affine":
        return p, None
    Q = np.zeros((d, d))
    k = d
    for i in range(d):
        for j in range(i, d):
            Q[i, j] = Q[j, i] = coef[k]
            k += 1
    return p, Q


def fit_points(pts, vals, center, r, kind) -> MinimaxFit:
    """Minimax fit over explicit points (used by best_fit and by tests)."""
    if kind not in ("affine", "quadratic"):
        raise ValueError("kind must be affine or quadratic")
    d = pts.shape[1]
    c = np.asarray(center, dtype=float)
    y = (pts - c) / r
    F = _features(y, kind)
    nc = F.shape[1]
    if len(vals) < nc + 1:
        raise DegenerateBall(f"{len(vals)} nodes for {nc + 1} coefficients")
    scale = float(np.max(np.abs(vals), initial=0.0)) or 1.0
    v = vals / scale
    n = len(v)
    # variables: coef (nc), lo, hi ;  F coef + lo <= v ;  -F coef - hi <= -v
    A = np.vstack([np.hstack([F, np.ones((n, 1)), np.zeros((n, 1))]),
                   np.hstack([-F, np.zeros((n, 1)), -np.ones((n, 1))])])
    b = np.concatenate([v, -v])
    cost = np.zeros(nc + 2)
    cost[-2], cost[-1] = -1.0, 1.0
    res = linprog(cost, A_ub=A, b_ub=b, bounds=[(None, None)] * (nc + 2), method="highs", options=LP_OPTIONS)
    if res.status != 0:
        raise RuntimeError(f"LP failed: {res.message}")
    coef = res.x[:nc]
    resid = v - F @ coef
    osc = float(resid.max() - resid.min())
    dual = float(b @ res.ineqlin.marginals)
    gap = abs(osc - dual)
    # back to unscaled coordinates: y = (x - c)/r
    p_s, Q_s = _unpack(coef * scale, d, kind)
    p = p_s / r
    Q = None if Q_s is None else Q_s / r**2
    const = float(scale * 0.5 * (resid.max() + resid.min()))
    return MinimaxFit(kind, p, const, Q, osc * scale, tuple(c), float(r), gap * scale, n)


def best_fit(u: GridFunction, center, r: float, kind: str) -> MinimaxFit:
    """Exact Chebyshev fit of ``u`` over the grid nodes of the closed ball ``B_r(center)``."""
    pts, vals = _ball(u, center, r)
    return fit_points(pts, vals, center, r, kind)


def osc_ball(u: GridFunction, center, r: float) -> float:
    _, vals = _ball(u, center, r)
    return float(vals.max() - vals.min())


def dyadic_radii(h_floor: float, R: float) -> list[float]:
    out = []
    r = 2.0 * h_floor
    while r <= R + 1e-12:
        out.append(r)
        r *= 2.0
    return out


def max_radius(u: GridFunction, center) -> float:
    g = u.grid
    return g.radius - float(np.max(np.abs(np.asarray(center, dtype=float) - np.asarray(g.center))))


def coarsened_seminorm(u: GridFunction, center=None, h_floor: float = 1.0, order: str = "first",
                       alpha: float = 1.0, R: float | None = None, details: bool = False):
    """``sup_r r^-alpha osc`` (zeroth) or ``sup_r r^-(1+alpha) inf_l osc(u - l)`` (first).

    The sup runs over the dyadic radii ``h_floor * 2^k`` in ``(h_floor, R]``.
    """
    if h_floor < u.grid.h - 1e-12:
        raise ValueError("h_floor must be at least the grid spacing")
    center = u.grid.center if center is None else center
    R = max_radius(u, center) if R is None else R
    best, arg, prof = 0.0, None, []
    for r in dyadic_radii(h_floor, R):
        if order == "zeroth":
            val = osc_ball(u, center, r) / r**alpha
        elif order == "first":
            val = best_fit(u, center, r, "affine").achieved_osc / r ** (1 + alpha)
        else:
            raise ValueError("order must be zeroth or first")
        prof.append((r, val))
        if val > best:
            best, arg = val, r
    if details:
        return best, arg, prof
    return best


@dataclass
class InterpolationResult:
    lhs: float
    rhs: float
    ratio: float
    c11: float
    osc: float
    K: float = float("nan")
    R: float = float("nan")

    @property
    def proof_regime(self) -> bool:
        """``K = (osc / c11)^(1/2) <= R``: the scales the bound's argument actually covers."""
        return self.K <= self.R


def interpolation_check(u: GridFunction, center=None, h_floor: float = 1.0, R: float | None = None,
                        constant: float = 14.0) -> InterpolationResult:
    """Compare ``[u]_{C^{0,1}_h}`` with ``14 ([u]_{C^{1,1}_h} osc_{B_R} u)^(1/2)``."""
    center = u.grid.center if center is None else center
    R = max_radius(u, center) if R is None else R
    c11 = coarsened_seminorm(u, center, h_floor, "first", 1.0, R)
    if c11 <= 1e-9:
        raise DegenerateInput("first-order seminorm <= 1e-9: input is affine at these scales")
    lhs = coarsened_seminorm(u, center, h_floor, "zeroth", 1.0, R)
    osc = osc_ball(u, center, R)
    rhs = constant * math.sqrt(c11 * osc)
    return InterpolationResult(lhs, rhs, lhs / rhs, c11, osc, math.sqrt(osc / c11), float(R))


@dataclass
class CascadeTrace:
    radii: list
    G: list
    H: list
    Q: list
    margins: dict = field(default_factory=dict)
    theta: float = 0.25

    def min_margin(self) -> float:
        vals = [m for ms in self.margins.values() for m in ms]
        return min(vals) if vals else float("inf")

    def to_rows(self):
        rows = []
        for j, s in enumerate(self.radii):
            rows.append({"j": j, "s": s, "G": self.G[j], "H": self.H[j], "normQ": spectral_norm(self.Q[j])})
        return rows


def cascade_radii(theta: float, r0: float, R: float) -> list[float]:
    radii = [float(R)]
    s = R / 4.0
    while s >= r0 - 1e-12:
        radii.append(s)
        s *= theta
    return radii


def quadratic_cascade(u: GridFunction, theta: float, r0: float, R: float, center=None) -> CascadeTrace:
    """Track ``G_j``, ``H_j`` and the Hessians ``Q_j`` along ``s_0 = R``, ``s_j = theta^(j-1) R/4``.

    ``G(r) = r^-2 inf_q sup_{B_r}|u - q|`` and ``H(r)`` likewise over affine
    functions. Recorded margins (right side minus left side):

    * ``GH_lower``: ``H_j - G_j``
    * ``GH_upper``: ``G_j + |Q_j|/2 - H_j``
    * ``Qdiff``: ``(2/rho_j^2) G_j + 2 G_{j+1} - |Q_{j+1} - Q_j|`` with
      ``rho_j = s_{j+1}/s_j`` (equal to ``theta`` for ``j >= 1``)
    * ``Qstup``: ``4 H_j - |Q_j|``

    ``|Q|`` is the spectral norm.
    """
    if not (0 < theta < 0.5):
        raise ValueError("theta must lie in (0, 1/2)")
    if not (1 <= 4 * r0 <= R):
        raise ValueError("need 1 <= 4 r0 <= R")
    center = u.grid.center if center is None else center
    if R > max_radius(u, center) + 1e-9:
        raise ValueError("radius schedule exits the grid")
    radii = cascade_radii(theta, r0, R)
    G, H, Q = [], [], []
    for s in radii:
        fq = best_fit(u, center, s, "quadratic")
        fa = best_fit(u, center, s, "affine")
        G.append(fq.sup_error / s**2)
        H.append(fa.sup_error / s**2)
        Q.append(fq.Q)
    m = {"GH_lower": [], "GH_upper": [], "Qdiff": [], "Qstup": []}
    for j in range(len(radii)):
        nq = spectral_norm(Q[j])
        m["GH_lower"].append(H[j] - G[j])
        m["GH_upper"].append(G[j] + 0.5 * nq - H[j])
        m["Qstup"].append(4 * H[j] - nq)
        if j + 1 < len(radii):
            rho = radii[j + 1] / radii[j]
            m["Qdiff"].append(2 / rho**2 * G[j] + 2 * G[j + 1] - spectral_norm(Q[j + 1] - Q[j]))
    return CascadeTrace(radii, G, H, Q, m, theta)


# --------------------------------------------------------------------------
# experiments


def _sample_field(cfg, index):
    from .corrector import sample_seed

    spec = cfg.field_spec()
    seed = sample_seed(cfg.base_seed, cfg.exp_id, index)
    return realize_field(sample_environment(spec, seed) if spec.random else None, spec), seed


def _trace_free(d):
    M = np.zeros((d, d))
    M[0, 0], M[1, 1] = 1.0, -1.0
    return M


class RegularityExperiment:
    """C^{1,1} regularity down to the unit scale for ``tr(A D^2 w) = 0`` with quadratic data."""

    kind = "regularity"
    cell_column = "R"
    columns = ("sample_index", "R", "c11", "driver", "ratio", "c01", "interp_rhs", "ks_exponent", "seed")

    def cells(self, cfg):
        return [float(r) for r in cfg.R]

    def sample(self, cfg, index):
        fld, seed = _sample_field(cfg, index)
        d = fld.dim
        M = cfg.matrix_M()
        rows = []
        for R in self.cells(cfg):
            grid = Grid((0.0,) * d, R, cfg.h)
            op = assemble(fld, 0.0, grid).with_boundary(
                GridFunction.from_callable(grid, lambda x: 0.5 * np.einsum("ni,ij,nj->n", x, M, x)))
            w = solve(op, np.zeros(grid.shape), tol=cfg.tol, method=cfg.solver)
            c11 = coarsened_seminorm(w, None, 1.0, "first", 1.0, R / 2)
            driver = best_fit(w, w.grid.center, R, "affine").achieved_osc / R**2
            c01 = coarsened_seminorm(w, None, 1.0, "zeroth", 1.0, R / 2)
            osc = osc_ball(w, w.grid.center, R / 2)
            interp = 14.0 * math.sqrt(c11 * osc)
            radii = dyadic_radii(1.0, R / 2)
            oscs = [osc_ball(w, w.grid.center, r) for r in radii]
            ks = linear_fit(np.log(radii), np.log(np.maximum(oscs, 1e-300))).slope if len(radii) > 1 else float("nan")
            rows.append({"sample_index": index, "R": R, "c11": c11, "driver": driver,
                         "ratio": c11 / driver if driver > 0 else float("nan"), "c01": c01,
                         "interp_rhs": interp, "ks_exponent": ks, "seed": seed})
        return rows

    def summarize(self, cfg, rows):
        rep = StatReport(self.kind)
        for R in self.cells(cfg):
            sub = [r for r in rows if float(r["R"]) == R]
            rep.cells.append(summarize_cell(f"R={R!r}", [r["ratio"] for r in sub]))
            rep.extra[f"interp_ratio_max R={R!r}"] = max((r["c01"] / r["interp_rhs"] for r in sub), default=float("nan"))
            rep.extra[f"ks_exponent_mean R={R!r}"] = float(np.mean([r["ks_exponent"] for r in sub])) if sub else float("nan")
        q90 = [c.quantiles.get("0.9", float("nan")) for c in rep.cells]
        rep.extra["ratio_q90"] = q90
        rep.checks["q90_growth_factor"] = (max(q90) / min(q90)) if q90 and min(q90) > 0 else float("nan")
        rep.seeds = {"base_seed": cfg.base_seed, "experiment_id": cfg.exp_id}
        return rep

    def plot_tables(self, cfg, report):
        rows = [(float(c.label.split("=")[1]), c.mean, c.quantiles.get("0.9", float("nan"))) for c in report.cells]
        return {"regularity": (("R", "ratio_mean", "ratio_q90"), rows)}


class HomogRateExperiment:
    """``R^-2 sup|u - v|`` for heterogeneous versus homogenized Dirichlet problems on cubes."""

    kind = "homog_rate"
    cell_column = "R"
    columns = ("sample_index", "R", "error", "seed")

    def cells(self, cfg):
        return [float(r) for r in cfg.R]

    def _ahom(self, cfg):
        spec = cfg.field_spec()
        if spec.kind == "constant":
            return np.asarray(spec.matrix)
        if cfg.ahom is not None:
            return np.asarray(cfg.ahom, dtype=float)
        if spec.kind == "scalar_checkerboard":
            # harmonic mean of the site law: exact for scalar fields (divide by a)
            law = spec.law
            if law.is_discrete:
                inv = float(np.dot(law.probs, 1.0 / np.asarray(law.values)))
            elif law.high > law.low:
                inv = math.log(law.high / law.low) / (law.high - law.low)
            else:
                inv = 1.0 / law.low
            return np.eye(spec.dim) / inv
        raise ValueError("homogenized matrix missing: set ahom (e.g. from corrector.ahom_estimate)")

    def sample(self, cfg, index):
        fld, seed = _sample_field(cfg, index)
        d = fld.dim
        Abar = self._ahom(cfg)
        M = cfg.matrix_M() if cfg.M is not None else _trace_free(d)
        rows = []
        for R in self.cells(cfg):
            grid = Grid((0.0,) * d, R, cfg.h)
            g = GridFunction.from_callable(grid, lambda x: 0.5 * np.einsum("ni,ij,nj->n", x, M, x))
            f = np.full(grid.shape, cfg.rhs_f)
            u = solve(assemble(fld, 0.0, grid).with_boundary(g), f, tol=cfg.tol, method=cfg.solver)
            cst = realize_field(None, FieldSpec.constant(Abar))
            v = solve(assemble(cst, 0.0, grid).with_boundary(g), f, tol=cfg.tol, method=cfg.solver)
            err = float(np.abs(u.values - v.values).max()) / R**2
            rows.append({"sample_index": index, "R": R, "error": err, "seed": seed})
        return rows

    def summarize(self, cfg, rows):
        rep = StatReport(self.kind)
        Rs = self.cells(cfg)
        for R in Rs:
            rep.cells.append(summarize_cell(f"R={R!r}", [r["error"] for r in rows if float(r["R"]) == R]))
        means = np.array([c.mean for c in rep.cells])
        if np.all(means > 1e-12):
            fit = linear_fit(np.log(Rs), np.log(means))
            # error ~ R^-alpha, so the rate is minus the slope
            rep.fits["rate"] = type(fit)(-fit.slope, fit.intercept, (-fit.ci[1], -fit.ci[0]), fit.n_points)
        else:
            from .stats import Fit

            rep.fits["rate"] = Fit(float("nan"), float("nan"), (float("nan"),) * 2, len(Rs), True,
                                   "errors at discretization level: degenerate")
        rep.checks["monotone_decrease"] = bool(np.all(np.diff(means) < 0))
        rep.seeds = {"base_seed": cfg.base_seed, "experiment_id": cfg.exp_id}
        return rep

    def plot_tables(self, cfg, report):
        rows = [(float(c.label.split("=")[1]), c.mean, c.stderr) for c in report.cells]
        return {"homog_rate": (("R", "error_mean", "error_stderr"), rows)}


def regularity_experiment(config, workers: int = 1) -> StatReport:
    from .runner import run_in_memory

    return run_in_memory(config, workers=workers)


def homogenization_error_experiment(config, workers: int = 1) -> StatReport:
    from .runner import run_in_memory

    return run_in_memory(config, workers=workers)
