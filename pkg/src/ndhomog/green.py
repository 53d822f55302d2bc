"""Modified Green's functions, explicit barriers and decay measurements.

The modified Green's function solves ``eps^2 G - tr(A D^2 G) = chi_{B_ell(y)}``.
The barrier families ``phi_R`` (d >= 3) and ``phi_{R,eps}`` (d = 2) are
radial functions that are supersolutions of the same operator for every
admissible coefficient field, up to the pieces where they are only C^0.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .env import FieldSpec, MatrixField, realize_field, sample_environment
from .grid import (
    Grid,
    GridFunction,
    Preconditioner,
    adjoint_solve,
    assemble,
    assemble_coefficients,
    check_monotone,
    solve,
)
from .stats import StatReport, linear_fit, summarize_cell

__all__ = [
    "BarrierParams",
    "modified_green",
    "deterministic_tail_bound",
    "envelope_xi",
    "barrier_value",
    "verify_supersolution",
    "invariant_measure",
    "shell_profile",
    "decay_exponent_fit",
]


@dataclass(frozen=True)
class BarrierParams:
    """Constants of the barrier families; ``beta = alpha / 2``."""

    lam: float
    Lam: float
    ell: float
    d: int
    alpha: float = 0.1

    def __post_init__(self):
        if not (0 < self.lam <= self.Lam):
            raise ValueError("need 0 < lam <= Lam")
        if self.d < 2:
            raise ValueError("d must be at least 2")
        if not (0 < self.alpha < 2):
            raise ValueError("alpha must lie in (0, 2)")

    @classmethod
    def from_spec(cls, spec: FieldSpec, alpha: float = 0.1) -> "BarrierParams":
        return cls(spec.lam, spec.Lam, spec.ell, spec.dim, alpha)

    @property
    def a(self) -> float:
        return 1.0 / math.sqrt(2.0 * self.Lam)

    @property
    def beta(self) -> float:
        return self.alpha / 2.0

    @property
    def gamma(self) -> float:
        return max(0.5, 1.0 - self.lam / (2.0 * self.Lam))

    @property
    def h_coef(self) -> float:
        return (2.0 / self.lam) * (2.0 * self.ell) ** (2.0 - self.gamma)

    def _check_R(self, R, eps=None):
        if R < 4 * self.ell:
            raise ValueError(f"R must be at least 4*ell = {4 * self.ell:.6g}")
        if self.d == 2:
            if eps is None or not (0 < eps <= 0.5):
                raise ValueError("d = 2 barriers need eps in (0, 1/2]")
            if R > 1.0 / eps:
                raise ValueError("d = 2 barriers need R <= 1/eps")

    def k_R(self, R: float) -> float:
        b, d, h = self.beta, self.d, self.h_coef
        if d == 2:
            return 2.0 * h * math.exp(2.0**b * R ** (-b) / b) * R**self.gamma
        den = d - 2 - 2.0**b * R ** (-b)
        if den <= 0:
            raise ValueError("R too small for this beta: d - 2 - 2^beta R^-beta <= 0")
        return h / den * R ** (d - 2 + self.gamma) * math.exp(2.0**b * R ** (-b) / b)

    def m_R(self, R: float) -> float:
        b, d, g = self.beta, self.d, self.gamma
        return (self.h_coef / g) * (self.ell**2 + R**2) ** (g / 2) + self.k_R(R) * R ** (2 - d) * math.exp(
            -(R ** (-b)) / b
        )

    def m_R_eps(self, R: float, eps: float) -> float:
        b, g, a = self.beta, self.gamma, self.a
        inner = (self.h_coef / g) * (self.ell**2 + R**2) ** (g / 2)
        return inner + self.k_R(R) * (math.exp(a) / a + abs(math.log(eps)) - math.log(R)) * math.exp(-(R ** (-b)) / b)

    def b_R_eps(self, R: float, eps: float) -> float:
        a, b = self.a, self.beta
        return self.k_R(R) / a * math.exp(2 * a - eps**b / b)


def deterministic_tail_bound(eps, x, y, params: BarrierParams):
    """``exp(a ell) eps^-2 exp(-a eps |x - y|)`` with ``a = 1/sqrt(2 Lam)``."""
    if not (0 < eps <= 1):
        raise ValueError("eps must lie in (0, 1]")
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    r = np.linalg.norm(x - y, axis=-1)
    a = params.a
    return math.exp(a * params.ell) * eps**-2 * np.exp(-eps * a * r)


def envelope_xi(eps, r, d: int, a: float):
    """Decay envelope: ``exp(-a eps r) log(2 + 1/(eps(1+r)))`` in d=2, ``exp(-a eps r)(1+r)^(2-d)`` else."""
    if d < 2:
        raise ValueError("d must be at least 2")
    r = np.asarray(r, dtype=float)
    if np.any(r < 0):
        raise ValueError("r must be nonnegative")
    damp = np.exp(-a * eps * r)
    if d == 2:
        return damp * np.log(2.0 + 1.0 / (eps * (1.0 + r)))
    return damp * (1.0 + r) ** (2 - d)


KINDS = ("phi_R", "psi_R", "phi_R_eps", "psi_R_eps")


def barrier_value(kind: str, R: float, eps, x, params: BarrierParams):
    """Evaluate a barrier at points ``x`` (shape (n, d)) or radii (1-d array, flagged by ``x.ndim == 1``)."""
    if kind not in KINDS:
        raise ValueError(f"kind must be one of {KINDS}")
    x = np.asarray(x, dtype=float)
    r = np.abs(x) if x.ndim <= 1 else np.linalg.norm(x, axis=-1)
    p = params
    b, g, h, d = p.beta, p.gamma, p.h_coef, p.d
    if kind in ("phi_R", "psi_R"):
        if d < 3:
            raise ValueError("phi_R and psi_R are the d >= 3 family")
        p._check_R(R)
        k = p.k_R(R)
        with np.errstate(divide="ignore", over="ignore", invalid="ignore"):
            outer = k * r ** (2 - d) * np.exp(-(r ** (-b)) / b)
        outer = np.where(r > 0, outer, 0.0)
        if kind == "psi_R":
            return outer
        inner = p.m_R(R) - (h / g) * (p.ell**2 + r**2) ** (g / 2)
        return np.where(r <= R, inner, outer)
    if d != 2:
        raise ValueError("phi_R_eps and psi_R_eps are the d = 2 family")
    p._check_R(R, eps)
    k = p.k_R(R)
    a = p.a
    with np.errstate(divide="ignore", over="ignore", invalid="ignore"):
        middle = k * (math.exp(a) / a + abs(math.log(eps)) - np.log(r)) * np.exp(-(r ** (-b)) / b)
    middle = np.where(r > 0, middle, 0.0)
    if kind == "psi_R_eps":
        return middle
    inner = p.m_R_eps(R, eps) - (h / g) * (p.ell**2 + r**2) ** (g / 2)
    outer = p.b_R_eps(R, eps) * np.exp(-a * eps * r)
    return np.where(r <= R, inner, np.where(r <= 1.0 / eps, middle, outer))


@dataclass
class SupersolutionReport:
    min_margin: float
    witness: tuple
    n_points: int
    region: str
    h: float
    c_min: float | None = None

    def to_dict(self):
        return {"min_margin": self.min_margin, "witness": list(self.witness), "n_points": self.n_points,
                "region": self.region, "h": self.h, "c_min": self.c_min}


def verify_supersolution(kind, R, eps, field: MatrixField | None, region="valid", h=0.5,
                         params: BarrierParams | None = None, outer_extent=None) -> SupersolutionReport:
    """Apply the discrete operator to the sampled barrier and subtract ``chi_{B_ell}``.

    ``region``: ``"valid"`` is where the barrier is claimed to be a
    supersolution (``B_R`` for ``phi_R``; ``B_R`` and the exterior of
    ``B_{1/eps}`` for ``phi_R_eps``), ``"inner"``/``"outer"`` select one part,
    and a pair ``(r_min, r_max)`` selects an annulus. Nodes within ``2h`` of a
    piece interface are skipped. For ``psi`` kinds the operator is the
    Laplacian and ``c_min`` is the smallest ratio ``-Delta psi / (|x|^(-2-beta) psi)``.
    """
    if params is None:
        if field is None:
            raise ValueError("need params or a field")
        params = BarrierParams.from_spec(field.spec)
    d = params.d
    interfaces = [R]
    if kind == "phi_R_eps":
        interfaces.append(1.0 / eps)
    if isinstance(region, (tuple, list)):
        r_lo, r_hi = float(region[0]), float(region[1])
    elif region == "inner":
        r_lo, r_hi = 0.0, R
    elif region in ("outer", "valid"):
        far = 1.0 / eps if kind == "phi_R_eps" else R
        r_lo = 0.0 if region == "valid" else far
        r_hi = outer_extent or (far + 8.0 if kind == "phi_R_eps" else R)
    else:
        raise ValueError(f"unknown region {region!r}")
    ext = math.ceil((r_hi + 2 * h) / h) * h
    grid = Grid((0.0,) * d, ext, h)
    op_eps = 0.0 if kind in ("phi_R", "psi_R") else float(eps)
    psi_kind = kind.startswith("psi")
    if psi_kind or field is None:
        A = np.broadcast_to(np.eye(d), grid.interior_shape + (d, d))
    else:
        A = assemble_coefficients(field, grid)
    op = assemble(None, 0.0 if psi_kind else op_eps, grid, coefficients=A)
    vals = barrier_value(kind, R, eps, grid.points(), params).reshape(grid.shape)
    Lu = op._apply_full(vals)
    r = grid.distance()[(slice(1, -1),) * d]
    keep = (r >= r_lo) & (r <= r_hi)
    if region == "valid" and kind == "phi_R_eps":
        keep &= (r <= R) | (r >= 1.0 / eps)
    for s in interfaces:
        keep &= np.abs(r - s) > 2 * h
    if psi_kind:
        keep &= r > 2 * h
    if not keep.any():
        raise ValueError("region contains no grid nodes")
    chi = (r < params.ell).astype(float)
    pts = grid.points(interior=True).reshape(grid.interior_shape + (d,))
    if psi_kind:
        inner = vals[(slice(1, -1),) * d]
        with np.errstate(divide="ignore", invalid="ignore"):
            ratio = Lu / (r ** (-2 - params.beta) * inner)
        ratio_k = ratio[keep]
        k = int(np.argmin(ratio_k))
        wit = tuple(pts[keep][k])
        return SupersolutionReport(float(ratio_k[k]), wit, int(keep.sum()), str(region), h, float(ratio_k[k]))
    margin = (Lu - chi)[keep]
    k = int(np.argmin(margin))
    return SupersolutionReport(float(margin[k]), tuple(float(v) for v in pts[keep][k]), int(keep.sum()),
                               str(region), h)


def modified_green(field: MatrixField, eps: float, y=None, box_radius: float = 16.0, h: float = 0.5,
                   tol: float = 1e-10, method: str = "amg", preconditioner: Preconditioner | None = None,
                   allow_nonmonotone: bool = False) -> GridFunction:
    """Discrete ``eps^2 G - tr(A D^2 G) = 1{|x - y| < ell}`` with zero data on a cube around ``y``."""
    d = field.dim
    ell = field.spec.ell
    y = np.zeros(d) if y is None else np.asarray(y, dtype=float)
    if box_radius < 2 * ell:
        raise ValueError("box_radius must be at least 2*ell")
    grid = Grid(tuple(y), box_radius, h)
    op = assemble(field, eps, grid)
    rep = check_monotone(op)
    if not rep.is_monotone and not allow_nonmonotone:
        raise RuntimeError(f"assembly not monotone (margin {rep.margin:.3g} at {rep.worst_row})")
    rhs = (grid.distance(y) < ell).astype(float)
    G = solve(op, rhs, tol=tol, method=method, preconditioner=preconditioner)
    G.meta.update(monotone_margin=rep.margin, source=tuple(y))
    return G


def invariant_measure(field: MatrixField, eps: float, box_radius: float = 16.0, h: float = 0.5,
                      tol: float = 1e-10, method: str = "amg") -> GridFunction:
    """Adjoint solve with right side ``eps^2``: the discrete invariant measure."""
    grid = Grid((0.0,) * field.dim, box_radius, h)
    op = assemble(field, eps, grid)
    return adjoint_solve(op, np.full(grid.shape, eps**2), tol=tol, method=method)


def shell_profile(g: GridFunction, center=None, dr: float = 1.0, r_max=None):
    """Shell statistics of ``g``; shell ``k`` collects nodes with ``round(|x - c|/dr) = k``.

    Returns a dict of arrays ``r, mean, min, max, count`` (shells that are
    complete inside the cube only).
    """
    grid = g.grid
    c = np.asarray(grid.center if center is None else center, dtype=float)
    dist = grid.distance(c).reshape(-1)
    vals = g.values.reshape(-1)
    lim = grid.radius - np.max(np.abs(c - np.asarray(grid.center)))
    if r_max is not None:
        lim = min(lim, r_max)
    k = np.rint(dist / dr).astype(int)
    kmax = int(math.floor(lim / dr - 0.5))
    sel = k <= kmax
    k, vals = k[sel], vals[sel]
    count = np.bincount(k, minlength=kmax + 1)
    s = np.bincount(k, weights=vals, minlength=kmax + 1)
    mins = np.full(kmax + 1, np.inf)
    maxs = np.full(kmax + 1, -np.inf)
    np.minimum.at(mins, k, vals)
    np.maximum.at(maxs, k, vals)
    ok = count > 0
    r = np.arange(kmax + 1) * dr
    return {"r": r[ok], "mean": s[ok] / count[ok], "min": mins[ok], "max": maxs[ok], "count": count[ok]}


def profile_csv(profile) -> str:
    lines = ["r,mean,min,max,count"]
    for row in zip(profile["r"], profile["mean"], profile["min"], profile["max"], profile["count"]):
        lines.append(",".join([repr(float(v)) for v in row[:4]] + [str(int(row[4]))]))
    return "\n".join(lines) + "\n"


def screened_regression(r, m, level: float = 0.95):
    """Fit ``log m = c + s log r - kappa r``; returns ``(s, ci_s, kappa)``."""
    from scipy.stats import t as tdist

    r = np.asarray(r, dtype=float)
    X = np.column_stack([np.ones(r.size), np.log(r), r])
    yv = np.log(np.asarray(m, dtype=float))
    coef, *_ = np.linalg.lstsq(X, yv, rcond=None)
    resid = yv - X @ coef
    dof = max(r.size - 3, 1)
    cov = float(resid @ resid) / dof * np.linalg.inv(X.T @ X)
    half = tdist.ppf(0.5 + level / 2, dof) * math.sqrt(max(cov[1, 1], 0.0))
    s = float(coef[1])
    return s, (float(s - half), float(s + half)), -float(coef[2])


def decay_exponent_fit(g, annulus, mode: str = "direct", eps: float | None = None, dr: float = 1.0,
                       offset: float = 0.0):
    """Power-law exponent of shell averages of ``g`` over ``r_min <= r <= r_max``.

    Modes
    -----
    direct
        slope of ``log mean`` against ``log(offset + r)``.
    screened
        joint regression of ``log mean`` on ``log r`` and ``r``; the linear
        term absorbs the exponential screening ``exp(-kappa r)`` so the
        power law can be read off at radii comparable to ``1/eps``.
    derivative
        slope ``s`` of ``log |d mean / dr|`` against ``log r``, reported as
        the exponent ``-s - 1`` (the exponent of a function whose gradient
        decays like ``r^s``); suited to profiles ``C - c r^p``.

    Returns ``gamma_hat`` (``g ~ r^-gamma_hat``), ``slope = -gamma_hat``
    and a 95% interval for ``gamma_hat``. ``g`` may be a GridFunction or a
    callable of ``r`` (analytic profiles).
    """
    r_min, r_max = float(annulus[0]), float(annulus[1])
    if not (0 < r_min < r_max):
        raise ValueError("empty annulus")
    if isinstance(g, GridFunction):
        if r_max >= g.grid.radius / 2 + 1e-12:
            raise ValueError("annulus must satisfy r_max < box_radius / 2")
        if mode == "direct" and eps is not None and r_max > 1.0 / (4.0 * eps) + 1e-12:
            raise ValueError("direct fits need r_max <= 1/(4 eps); use mode='screened'")
        prof = shell_profile(g, dr=dr, r_max=r_max + 2 * dr)
        r, m = prof["r"], prof["mean"]
    else:
        r = np.arange(math.floor(r_min / dr), math.ceil(r_max / dr) + 3) * dr
        r = r[r > 0]
        m = np.asarray(g(r), dtype=float)
    if mode == "derivative":
        dm = np.gradient(m, r)
        sel = (r >= r_min) & (r <= r_max) & (np.abs(dm) > 0)
        x, yv = np.log(r[sel]), np.log(np.abs(dm[sel]))
        fit = linear_fit(x, yv)
        gam = -fit.slope - 1.0
        ci = (-fit.ci[1] - 1.0, -fit.ci[0] - 1.0)
    else:
        sel = (r >= r_min) & (r <= r_max) & (m > 0)
        if sel.sum() < 3:
            raise ValueError("annulus holds fewer than 3 shells")
        if mode == "direct":
            fit = linear_fit(np.log(offset + r[sel]), np.log(m[sel]))
            gam, ci = -fit.slope, (-fit.ci[1], -fit.ci[0])
        elif mode == "screened":
            slope, ci_s, kappa = screened_regression(r[sel], m[sel])
            gam = -slope
            return {"gamma_hat": gam, "slope": slope, "ci": (-ci_s[1], -ci_s[0]), "mode": mode,
                    "n_shells": int(sel.sum()), "screening": kappa}
        else:
            raise ValueError(f"unknown mode {mode!r}")
    return {"gamma_hat": float(gam), "slope": -float(gam), "ci": (float(ci[0]), float(ci[1])), "mode": mode,
            "n_shells": int(sel.sum())}


# --------------------------------------------------------------------------
# experiments


def _realize(cfg, index):
    from .corrector import sample_seed

    spec = cfg.field_spec()
    seed = sample_seed(cfg.base_seed, cfg.exp_id, index)
    return realize_field(sample_environment(spec, seed) if spec.random else None, spec), seed


def _tail_check(G: GridFunction, eps, params, tol):
    bound = deterministic_tail_bound(eps, G.grid.points(), np.zeros(G.grid.dim), params).reshape(G.grid.shape)
    slack = bound - G.values
    return int(np.sum(slack < -10 * tol)), float(slack.min())


class GreenDecayExperiment:
    """Shell-fit decay exponents of ``G_eps(., 0)`` plus the deterministic tail check.

    ``gamma_hat`` is the exponent in ``G ~ r^-gamma_hat`` and ``slope`` its
    negative. Counterexample fields are deterministic and may assemble
    non-monotone at coarse h; their monotone margin is recorded instead of
    refusing the solve.
    """

    kind = "green_decay"
    columns = ("sample_index", "eps", "gamma_hat", "slope", "ci_lo", "ci_hi", "screening", "tail_violations",
               "tail_min_slack", "monotone_margin", "seed")

    def cells(self, cfg):
        return [float(e) for e in cfg.eps]

    def annulus(self, cfg, eps):
        return tuple(cfg.annulus) if cfg.annulus else (4.0, 1.0 / (4.0 * eps))

    def sample(self, cfg, index):
        from .corrector import _check_budget, box_radius, reference_preconditioner

        fld, seed = _realize(cfg, index)
        spec = fld.spec
        params = BarrierParams.from_spec(spec, cfg.alpha)
        rows = []
        for eps in self.cells(cfg):
            R = box_radius(eps, spec, cfg.h, 1.0, cfg.trunc_tol, cfg.box_rule, cfg.box_factor)
            _check_budget(R, cfg.h, spec.dim, cfg.max_unknowns)
            pc = None
            if cfg.solver == "amg" and cfg.reuse_hierarchy and spec.random:
                pc = reference_preconditioner(spec, eps, Grid((0.0,) * spec.dim, R, cfg.h))
            G = modified_green(fld, eps, None, R, cfg.h, cfg.tol, cfg.solver, pc,
                               allow_nonmonotone=spec.kind == "radial_counterexample")
            fit = decay_exponent_fit(G, self.annulus(cfg, eps), cfg.fit_mode, eps)
            viol, slack = _tail_check(G, eps, params, cfg.tol)
            rows.append({"sample_index": index, "eps": eps, "gamma_hat": fit["gamma_hat"], "slope": fit["slope"],
                         "ci_lo": fit["ci"][0], "ci_hi": fit["ci"][1],
                         "screening": fit.get("screening", float("nan")), "tail_violations": viol,
                         "tail_min_slack": slack, "monotone_margin": float(G.meta["monotone_margin"]),
                         "seed": seed})
        return rows

    def summarize(self, cfg, rows):
        rep = StatReport(self.kind)
        d = cfg.field["dim"]
        target = 2.0 - d
        for eps in self.cells(cfg):
            sub = [r for r in rows if float(r["eps"]) == eps]
            slopes = np.array([r["slope"] for r in sub], dtype=float)
            rep.cells.append(summarize_cell(f"eps={eps!r}", slopes))
            ok = np.abs(slopes - target) <= 0.5
            rep.extra[f"frac_slope_within_0.5_of_{target:g} eps={eps!r}"] = float(ok.mean()) if len(sub) else 0.0
            rep.extra[f"annulus eps={eps!r}"] = list(self.annulus(cfg, eps))
        rep.checks["tail_violations"] = int(sum(r["tail_violations"] for r in rows))
        rep.checks["tail_min_slack"] = float(min((r["tail_min_slack"] for r in rows), default=float("nan")))
        rep.extra["fit_mode"] = cfg.fit_mode
        rep.seeds = {"base_seed": cfg.base_seed, "experiment_id": cfg.exp_id}
        return rep

    def plot_tables(self, cfg, report):
        rows = [(float(c.label.split("=")[1]), c.mean, c.sd, c.n) for c in report.cells]
        return {"green_decay": (("eps", "slope_mean", "slope_sd", "n"), rows)}


def barrier_continuity_gaps(kind, R, eps, params: BarrierParams) -> list[float]:
    """Absolute jumps of the barrier across its piece interfaces."""
    gaps = []
    if kind == "phi_R":
        inner = params.m_R(R) - (params.h_coef / params.gamma) * (params.ell**2 + R**2) ** (params.gamma / 2)
        gaps.append(abs(inner - float(barrier_value("psi_R", R, eps, np.array([R]), params)[0])))
    else:
        inner = params.m_R_eps(R, eps) - (params.h_coef / params.gamma) * (params.ell**2 + R**2) ** (params.gamma / 2)
        gaps.append(abs(inner - float(barrier_value("psi_R_eps", R, eps, np.array([R]), params)[0])))
        s = 1.0 / eps
        mid = float(barrier_value("psi_R_eps", R, eps, np.array([s]), params)[0])
        gaps.append(abs(mid - params.b_R_eps(R, eps) * math.exp(-params.a * eps * s)))
    return gaps


class BarrierAuditExperiment:
    """Discrete supersolution margins of the barrier families over sampled fields."""

    kind = "barrier_audit"
    cell_column = "check"
    columns = ("sample_index", "check", "value", "bound", "witness_r", "seed")

    def cells(self, cfg):
        if cfg.field["dim"] == 2:
            return ["phi_R_eps", "continuity"]
        return ["phi_R", "psi_R", "continuity", "monotone_radial", "ordering"]

    def sample(self, cfg, index):
        fld, seed = _realize(cfg, index)
        params = BarrierParams.from_spec(fld.spec, cfg.alpha)
        d = params.d
        R = cfg.barrier_R_factor * params.ell
        eps = float(cfg.eps[0]) if cfg.eps else None
        kind = "phi_R_eps" if d == 2 else "phi_R"
        h = cfg.h
        out = []

        def row(check, value, bound, wr=float("nan")):
            out.append({"sample_index": index, "check": check, "value": float(value), "bound": float(bound),
                        "witness_r": float(wr), "seed": seed})

        rep = verify_supersolution(kind, R, eps, fld, "valid", h, params)
        row(kind, rep.min_margin, -10 * h**2, np.linalg.norm(rep.witness))
        if d >= 3:
            rp = verify_supersolution("psi_R", R, eps, None, (R / 2, 2 * R), h, params)
            row("psi_R", rp.c_min, -10 * h**2, np.linalg.norm(rp.witness))
        row("continuity", max(barrier_continuity_gaps(kind, R, eps, params)), 1e-10)
        if d >= 3:
            # only the d >= 3 family is radially decreasing
            rr = np.linspace(0.0, 2 * R, 1000)
            row("monotone_radial", float(np.max(np.diff(barrier_value(kind, R, eps, rr, params)))), 0.0)
            rr = np.linspace(R / 2, R, 1000)
            gap = barrier_value(kind, R, eps, rr, params) - barrier_value("psi_R", R, eps, rr, params)
            row("ordering", float(gap.max()), 0.0, rr[int(np.argmax(gap))])
        return out

    def summarize(self, cfg, rows):
        rep = StatReport(self.kind)
        for check in self.cells(cfg):
            sub = [r for r in rows if r["check"] == check]
            vals = [r["value"] for r in sub]
            rep.cells.append(summarize_cell(f"check={check}", vals))
            if not sub:
                continue
            if check in ("phi_R", "phi_R_eps", "psi_R"):
                worst = min(vals)
                rep.checks[check] = {"min": worst, "bound": sub[0]["bound"], "ok": bool(worst >= sub[0]["bound"])}
            else:
                worst = max(vals)
                rep.checks[check] = {"max": worst, "bound": sub[0]["bound"], "ok": bool(worst <= sub[0]["bound"])}
        rep.seeds = {"base_seed": cfg.base_seed, "experiment_id": cfg.exp_id}
        return rep

    def plot_tables(self, cfg, report):
        rows = [(c.label.split("=")[1], c.mean, c.quantiles.get("0.05", float("nan")), c.n) for c in report.cells]
        return {"barrier_audit": (("check", "mean", "q05", "n"), rows)}
