import math

import numpy as np
import pytest

from conftest import constant_field, random_field
from ndhomog.env import FieldSpec, realize_field
from ndhomog.green import (
    BarrierParams,
    barrier_continuity_gaps,
    barrier_value,
    decay_exponent_fit,
    deterministic_tail_bound,
    envelope_xi,
    invariant_measure,
    modified_green,
    profile_csv,
    shell_profile,
    verify_supersolution,
)
from ndhomog.grid import Grid, GridFunction


def test_tail_constants():
    p = BarrierParams(1.0, 1.0, 2 * math.sqrt(2), 2)
    assert p.a == pytest.approx(0.70710678, abs=1e-8)
    assert deterministic_tail_bound(0.5, [0, 0], [0, 0], p) == pytest.approx(math.exp(2.0) / 0.25, rel=1e-12)
    assert math.exp(p.a * p.ell) == pytest.approx(7.389056, abs=1e-6)


def test_envelope_values():
    assert envelope_xi(0.25, 0.0, 3, 1.0) == pytest.approx(1.0)
    assert envelope_xi(0.25, 4.0, 3, 1.0) == pytest.approx(math.exp(-1) / 5, abs=1e-7)
    assert envelope_xi(0.25, 4.0, 3, 1.0) == pytest.approx(0.0735758, abs=1e-7)
    assert envelope_xi(0.5, 0.0, 2, 3.7) == pytest.approx(math.log(4))
    with pytest.raises(ValueError):
        envelope_xi(0.5, 1.0, 1, 1.0)


def test_barrier_params_domain():
    p = BarrierParams(1.0, 4.0, 2 * math.sqrt(3), 3)
    assert 0.5 <= p.gamma < 1
    assert p.h_coef > 0 and p.k_R(4 * p.ell) > 0 and p.m_R(4 * p.ell) > 0
    Rs = np.linspace(4 * p.ell, 20 * p.ell, 30)
    assert np.all(np.diff([p.k_R(R) for R in Rs]) > 0)
    assert np.all(np.diff([p.m_R(R) for R in Rs]) > 0)
    with pytest.raises(ValueError):
        barrier_value("phi_R", 2 * p.ell, None, np.array([1.0]), p)
    p2 = BarrierParams(1.0, 4.0, 2 * math.sqrt(2), 2)
    with pytest.raises(ValueError):
        barrier_value("phi_R_eps", 4 * p2.ell, 0.25, np.array([1.0]), p2)


def test_barrier_continuity():
    p3 = BarrierParams(1.0, 4.0, 2 * math.sqrt(3), 3)
    assert max(barrier_continuity_gaps("phi_R", 8 * p3.ell, None, p3)) < 1e-10
    p2 = BarrierParams(1.0, 4.0, 2 * math.sqrt(2), 2)
    assert max(barrier_continuity_gaps("phi_R_eps", 4 * p2.ell, 1 / 64, p2)) < 1e-10


def test_barrier_monotone_and_ordering():
    p = BarrierParams(1.0, 4.0, 2 * math.sqrt(3), 3)
    R = 8 * p.ell
    r = np.linspace(0, 2 * R, 1000)
    assert np.all(np.diff(barrier_value("phi_R", R, None, r, p)) <= 0)
    r = np.linspace(R / 2, R, 1000)
    assert np.all(barrier_value("phi_R", R, None, r, p) <= barrier_value("psi_R", R, None, r, p))


def test_supersolution_identity_field():
    spec = FieldSpec.constant(np.eye(3))
    p = BarrierParams.from_spec(spec)
    rep = verify_supersolution("phi_R", 8 * p.ell, None, realize_field(None, spec), h=0.5, params=p)
    assert rep.min_margin >= -10 * 0.25


def test_supersolution_random_fields():
    spec = FieldSpec(kind="full_symmetric", dim=3, lam=1.0, Lam=4.0, offdiag=0.6)
    p = BarrierParams.from_spec(spec)
    for seed in range(3):
        rep = verify_supersolution("phi_R", 8 * p.ell, None, random_field(spec, seed), h=1.0, params=p)
        assert rep.min_margin >= -10.0


def test_psi_R_laplacian_ratio():
    p = BarrierParams(1.0, 4.0, 2 * math.sqrt(3), 3)
    R = 8 * p.ell
    rep = verify_supersolution("psi_R", R, None, None, (R / 2, 2 * R), 1.0, p)
    assert rep.c_min >= -10.0


def test_supersolution_d2():
    spec = FieldSpec.checkerboard((1.0, 4.0), dim=2)
    p = BarrierParams.from_spec(spec)
    rep = verify_supersolution("phi_R_eps", 4 * p.ell, 1 / 32, random_field(spec, 0), h=1.0, params=p)
    assert rep.min_margin >= -10.0


def test_green_nonnegative_and_nested():
    spec = FieldSpec.checkerboard((1.0, 4.0), dim=2)
    tol = 1e-10
    for seed in range(20):
        fld = random_field(spec, seed)
        small = modified_green(fld, 0.25, box_radius=8, h=1.0, tol=tol)
        big = modified_green(fld, 0.25, box_radius=16, h=1.0, tol=tol)
        assert small.values.min() >= -tol
        inner = big.values[8:-8, 8:-8]
        assert np.all(small.values <= inner + 2 * tol)


def test_green_identity_d3_resolution():
    fld = constant_field(np.eye(3))
    coarse = modified_green(fld, 0.25, box_radius=8, h=1.0, tol=1e-10)
    fine = modified_green(fld, 0.25, box_radius=8, h=0.5, tol=1e-10)
    for x in ([2, 0, 0], [3, 1, 0], [4, 2, 2]):
        a, b = coarse.at(x), fine.at(x)
        assert abs(a - b) <= 0.15 * b


def test_tail_bound_never_fails():
    spec = FieldSpec.checkerboard((1.0, 4.0), dim=3)
    for seed in range(3):
        fld = random_field(spec, seed)
        p = BarrierParams.from_spec(spec)
        G = modified_green(fld, 0.25, box_radius=12, h=1.0, tol=1e-10)
        bound = deterministic_tail_bound(0.25, G.grid.points(), np.zeros(3), p).reshape(G.grid.shape)
        assert np.all(G.values <= bound + 1e-9)


def test_invariant_measure_constant_field():
    eps, R = 0.5, 30
    m = invariant_measure(constant_field(np.eye(2)), eps, box_radius=R, h=1.0, tol=1e-12)
    # leakage is dominated by the discrete barrier sum_i cosh(b x_i) / cosh(b R)
    b = math.acosh(1 + eps**2 / 2)
    x = m.grid.points()
    leak = (np.cosh(b * x[:, 0]) + np.cosh(b * x[:, 1])).reshape(m.grid.shape) / math.cosh(b * R)
    inner = (slice(1, -1),) * 2
    assert np.all(np.abs(m.values[inner] - 1.0) <= leak[inner] + 1e-10)
    assert np.max(np.abs(m.values[20:-20, 20:-20] - 1.0)) < 1e-3


def test_invariant_measure_duality_and_sign():
    spec = FieldSpec(kind="full_symmetric", dim=2, lam=1.0, Lam=4.0, offdiag=1.0)
    eps = 0.25
    for seed in range(5):
        fld = random_field(spec, seed)
        m = invariant_measure(fld, eps, box_radius=24, h=1.0, tol=1e-12)
        G = modified_green(fld, eps, box_radius=24, h=1.0, tol=1e-12)
        chi = (G.grid.distance() < spec.ell).astype(float)
        chi[0, :] = chi[-1, :] = chi[:, 0] = chi[:, -1] = 0.0
        lhs = float(np.sum(chi * m.values))
        rhs = eps**2 * float(np.sum(G.values))
        assert abs(lhs - rhs) / abs(rhs) < 1e-5
        assert m.values.min() >= -1e-12


def test_invariant_measure_window_mean():
    spec = FieldSpec(kind="full_symmetric", dim=2, lam=1.0, Lam=4.0, offdiag=1.0)
    m = invariant_measure(random_field(spec, 1), 0.25, box_radius=48, h=1.0, tol=1e-10)
    assert abs(m.values[24:-24, 24:-24].mean() - 1.0) < 0.05


def test_fit_analytic_power_law():
    fit = decay_exponent_fit(lambda r: (1 + r) ** -1.0, (4, 200), offset=1.0)
    assert fit["gamma_hat"] == pytest.approx(1.0, abs=0.05)


def test_fit_screened_recovers_power():
    fit = decay_exponent_fit(lambda r: r**-1.0 * np.exp(-0.2 * r), (3, 20), mode="screened")
    assert fit["gamma_hat"] == pytest.approx(1.0, abs=1e-8)
    assert fit["screening"] == pytest.approx(0.2, abs=1e-8)


def test_fit_derivative_mode():
    fit = decay_exponent_fit(lambda r: 10 - r**0.5, (4, 40), mode="derivative")
    assert fit["gamma_hat"] == pytest.approx(-0.5, abs=0.02)


def test_fit_rejects_empty_annulus():
    with pytest.raises(ValueError):
        decay_exponent_fit(lambda r: r, (5, 5))
    g = GridFunction.constant(Grid((0, 0), 8, 1.0), 1.0)
    with pytest.raises(ValueError):
        decay_exponent_fit(g, (1, 6))


def test_shell_profile_csv():
    g = GridFunction.from_callable(Grid((0, 0), 6, 1.0), lambda x: np.linalg.norm(x, axis=1))
    prof = shell_profile(g)
    assert prof["r"][0] == 0 and prof["count"][0] == 1
    text = profile_csv(prof)
    assert text.splitlines()[0] == "r,mean,min,max,count"


def test_A2_decays_faster_than_laplacian():
    spec = FieldSpec(kind="radial_counterexample", dim=3, lam=1.0, Lam=4.0, variant="A2")
    fld = realize_field(None, spec)
    G = modified_green(fld, 1 / 64, box_radius=24, h=1.0, tol=1e-10, allow_nonmonotone=True)
    fit = decay_exponent_fit(G, (4, 10), mode="direct", eps=1 / 64)
    assert fit["gamma_hat"] >= 1.5
