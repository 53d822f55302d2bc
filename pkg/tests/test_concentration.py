import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ndhomog.concentration import (
    ALPHA,
    KAPPA,
    FUNCTIONALS,
    WindowTooSmall,
    concentration_suite,
    convolution_ratio,
    efron_stein_check,
    heavy_mean,
    kernel_sum_ratio,
    moment_bound_check,
    required_window,
    sensitivity_experiment,
    shell_counts,
    stretched_bound,
    stretched_bound_log,
    synthetic_sample,
    total_vertical_variance,
    vertical_derivative,
)
from ndhomog.config import ExperimentConfig
from ndhomog.corrector import CorrectorProblem, approximate_corrector
from ndhomog.env import FieldSpec, Law, SiteSeedLattice, hash_seed, realize_field, sample_environment

PM1 = Law(values=(-1.0, 1.0))
GAMMA = np.array([(i, j) for i in range(10) for j in range(10)])


def omega(lat, sites):
    return PM1.quantile(lat.uniforms(np.atleast_2d(sites), 0))


def additive(lat):
    return float(omega(lat, GAMMA).sum())


def test_additive_exact_enumeration():
    lat = SiteSeedLattice(3, 2)
    for z in [(0, 0), (4, 7), (9, 9)]:
        vd = vertical_derivative(additive, lat, z, law=PM1)
        assert vd.exact and vd.stderr == 0.0
        assert vd.estimate == pytest.approx(omega(lat, z)[0], abs=1e-12)


def test_additive_resampling_converges():
    lat = SiteSeedLattice(4, 2)
    z = (2, 3)
    vd = vertical_derivative(additive, lat, z, K=400, seed=1)
    assert abs(vd.estimate - omega(lat, z)[0]) <= 3 * vd.stderr + 1e-12
    assert vd.stderr < 0.06


def test_independent_site_gives_zero():
    lat = SiteSeedLattice(5, 2)
    vd = vertical_derivative(additive, lat, (40, 40), K=16, seed=2)
    assert vd.estimate == 0.0 and vd.stderr == 0.0


def test_total_vertical_variance_additive():
    lat = SiteSeedLattice(6, 2)
    out = total_vertical_variance(additive, lat, GAMMA, K=64, seed=3)
    assert out["n_sites"] == 100
    assert out["value"] == pytest.approx(100.0, rel=0.05)
    exact = total_vertical_variance(additive, lat, GAMMA, law=PM1)
    assert exact["value"] == pytest.approx(100.0, abs=1e-9)


def test_total_vertical_variance_constant():
    out = total_vertical_variance(lambda lat: 1.0, SiteSeedLattice(0, 2), 3.0, K=4)
    assert out["value"] == 0.0


def test_window_refusal():
    need = required_window(0.25, 2, 1 / math.sqrt(8))
    with pytest.raises(WindowTooSmall) as info:
        total_vertical_variance(additive, SiteSeedLattice(0, 2), need / 2, K=2, envelope=(0.25, 1 / math.sqrt(8)))
    assert info.value.required == pytest.approx(need)


def test_stderr_shrinks_like_inverse_sqrt_K():
    lat = SiteSeedLattice(7, 2)
    Ks = [8, 32, 128, 512]
    ses = [vertical_derivative(lambda L: float(L.uniforms(GAMMA, 0).sum()), lat, (1, 1), K=k, seed=9).stderr
           for k in Ks]
    slope = np.polyfit(np.log(Ks), np.log(ses), 1)[0]
    assert -0.7 <= slope <= -0.3


def test_efron_stein_additive_equality_and_constant():
    X, V = zip(*(synthetic_sample("sum_uniform", 50, s) for s in range(4000)))
    rep = efron_stein_check(X, V)
    assert rep.passed and abs(rep.margin) <= 3 * rep.stderr
    const = efron_stein_check(np.ones(10), np.zeros(10))
    assert const.empirical_lhs == 0 and const.bound_rhs == 0 and const.passed


def test_efron_stein_max_strict():
    X, V = zip(*(synthetic_sample("max_uniform", 20, s) for s in range(2000)))
    rep = efron_stein_check(X, V)
    assert rep.passed and rep.margin > 3 * rep.stderr


def test_efron_stein_rejects_mismatch():
    with pytest.raises(ValueError):
        efron_stein_check([1.0, 2.0], [1.0])


@pytest.mark.parametrize("name", ["sum_pm1", "sum_heavy"])
@pytest.mark.parametrize("p", [2, 4, 6])
def test_moment_bounds(name, p):
    X, V = zip(*(synthetic_sample(name, 50, s) for s in range(2000)))
    rep = moment_bound_check(X, V, p)
    assert rep.passed and rep.margin > 0


def test_moment_bound_domain():
    with pytest.raises(ValueError):
        moment_bound_check([1.0, 2.0], [1.0, 1.0], 1.5)


def test_heavy_mean_matches_samples():
    X = [synthetic_sample("sum_heavy", 400, s)[0] / 20.0 for s in range(500)]
    assert np.mean(X) == pytest.approx(heavy_mean(), rel=0.05)


def test_stretched_zero_V():
    for beta in (0.5, 1.0, 1.5):
        expected = 1.0 + (ALPHA / (ALPHA - math.e * KAPPA * beta)) ** (beta / 2)
        assert stretched_bound(beta, np.zeros(5)) == pytest.approx(expected, rel=1e-12)


def test_stretched_hand_evaluated():
    expected = math.e + math.sqrt(20.0 / (20.0 - math.e * 1.271)) * math.exp(10.0)
    assert stretched_bound(1.0, np.ones(3)) == pytest.approx(expected, rel=1e-12)


def test_stretched_overflow_and_domain():
    assert stretched_bound(1.5, np.full(4, 50.0)) == math.inf
    assert math.isfinite(stretched_bound_log(1.5, np.full(4, 50.0)))
    with pytest.raises(ValueError):
        stretched_bound(2.0, np.ones(3))
    with pytest.raises(ValueError):
        stretched_bound(1.0, np.ones(3), alpha=1.0)


@settings(max_examples=40, deadline=None)
@given(
    st.sampled_from([0.5, 1.0, 1.5]),
    st.lists(st.floats(0.0, 2.0), min_size=1, max_size=20),
    st.floats(0.0, 1.0),
)
def test_stretched_monotone_in_V(beta, vs, bump):
    V = np.asarray(vs)
    assert stretched_bound_log(beta, V + bump) >= stretched_bound_log(beta, V) - 1e-12


def test_shell_counts():
    c = shell_counts(2, 10)
    assert c.tolist() == [1, 4, 4, 0, 4, 8, 0, 0, 4, 4, 8]
    assert shell_counts(3, 3).tolist() == [1, 6, 12, 8]


@pytest.mark.parametrize("d", [2, 3, 5])
def test_kernel_sum_ratio_bounded(d):
    a = 1 / math.sqrt(8)
    for eps in (0.25, 0.125, 0.0625):
        assert 1e-3 <= kernel_sum_ratio(eps, d, a) <= 1e3


def test_convolution_ratio_d5():
    for r in (0.0, 2.0, 5.0):
        assert 1e-3 <= convolution_ratio(0.25, r, d=5, L=8) <= 1e3


def _sens_cfg(**kw):
    base = dict(kind="sensitivity", field=FieldSpec.checkerboard((1.0, 4.0), dim=2).to_dict(), eps=[0.25],
                samples=1, window=3, sites_per_shell=2, K=2, tol=1e-10, box_factor=3)
    base.update(kw)
    return ExperimentConfig(**base)


def test_sensitivity_constant_field_zero():
    rep = sensitivity_experiment(_sens_cfg(field=FieldSpec.constant(np.eye(2)).to_dict()))
    assert rep.cells[0].mean == 0.0


def test_sensitivity_small_run():
    rep = sensitivity_experiment(_sens_cfg(samples=2))
    assert rep.failures == 0
    assert rep.cells[0].n > 0
    assert "kernel_sum_ratio eps=0.25" in rep.extra


def test_total_variance_of_corrector_is_order_of_variance():
    spec = FieldSpec.checkerboard((1.0, 4.0), dim=2)
    eps = 0.25
    p0 = CorrectorProblem(realize_field(None, FieldSpec.constant(np.eye(2))), np.eye(2), eps, h=1.0, box_factor=3)
    R = int(p0.grid().radius)
    box = np.array([(i, j) for i in range(-R, R + 1) for j in range(-R, R + 1)])

    def X(lat):
        p = CorrectorProblem(realize_field(lat, spec), np.eye(2), eps, h=1.0, box_factor=3, tol=1e-10)
        return eps**2 * approximate_corrector(p, method="direct").center_value()

    xs, vs = [], []
    for s in range(12):
        lat = sample_environment(spec, hash_seed(99, s))
        xs.append(X(lat))
        vs.append(total_vertical_variance(X, lat, box, law=spec.law)["value"])
    ratio = np.mean(vs) / np.var(xs, ddof=1)
    assert 0.1 <= ratio <= 10


def test_suite_small():
    cfg = ExperimentConfig(kind="concentration_suite", field=FieldSpec.checkerboard().to_dict(), samples=400,
                           n_sites=50)
    rep = concentration_suite(cfg)
    assert set(FUNCTIONALS) <= set(rep.extra)
    assert all(rep.checks.values()), rep.checks
