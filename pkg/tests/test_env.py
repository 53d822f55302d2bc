import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from ndhomog.env import (
    FieldSpec,
    InvalidSpec,
    Law,
    hash_seed,
    realize_field,
    resample_site,
    sample_environment,
    translate,
)

from conftest import random_field


def site_values(spec, lattice, sites):
    return realize_field(lattice, spec).site_matrices(np.asarray(sites))[:, 0, 0]


def test_sample_environment_deterministic(checkerboard2):
    a = sample_environment(checkerboard2, 7)
    b = sample_environment(checkerboard2, 7)
    sites = np.array([[i, j] for i in range(-5, 6) for j in range(-5, 6)])
    assert np.array_equal(site_values(checkerboard2, a, sites), site_values(checkerboard2, b, sites))
    assert a == b


def test_neighbouring_sites_independent(checkerboard2):
    # contingency table of (value at 0, value at e1) across 10^4 seeds
    x = np.array([site_values(checkerboard2, sample_environment(checkerboard2, s), [[0, 0], [1, 0]])
                  for s in range(10_000)])
    table = np.zeros((2, 2))
    for u, v in x:
        table[int(u == 4.0), int(v == 4.0)] += 1
    assert stats.chi2_contingency(table)[1] > 0.01


def test_marginal_probabilities(checkerboard2):
    lat = sample_environment(checkerboard2, 3)
    vals = site_values(checkerboard2, lat, [[i, 0] for i in range(10_000)])
    assert set(np.unique(vals)) == {1.0, 4.0}
    assert abs(np.mean(vals == 4.0) - 0.5) < 0.02


@given(st.integers(0, 2**32), st.integers(-50, 50), st.integers(-50, 50))
@settings(max_examples=30, deadline=None)
def test_translation_identity(seed, z1, z2):
    spec = FieldSpec.checkerboard(dim=2)
    lat = sample_environment(spec, seed)
    moved = translate(lat, (z1, z2))
    assert site_values(spec, moved, [[0, 0]])[0] == site_values(spec, lat, [[z1, z2]])[0]
    x = np.array([[0.3, -1.2], [4.0, 2.49]])
    f0, f1 = realize_field(lat, spec), realize_field(moved, spec)
    assert np.array_equal(f1.eval(x), f0.eval(x + np.array([z1, z2])))


def test_translate_group_law(checkerboard2):
    lat = sample_environment(checkerboard2, 11)
    assert translate(lat, (0, 0)) == lat
    sites = np.array([[i, j] for i in range(-4, 5) for j in range(-4, 5)])
    a = translate(translate(lat, (2, -3)), (5, 1))
    b = translate(lat, (7, -2))
    assert np.array_equal(site_values(checkerboard2, a, sites), site_values(checkerboard2, b, sites))


def test_checkerboard_values_and_constant():
    spec = FieldSpec.checkerboard(dim=2)
    A = random_field(spec, 5).eval([[0.5, 0.5]])[0]
    assert np.allclose(A, np.eye(2)) or np.allclose(A, 4 * np.eye(2))
    c = realize_field(None, FieldSpec.constant(2 * np.eye(2)))
    assert np.array_equal(c.eval(np.random.default_rng(0).normal(size=(50, 2))), np.broadcast_to(2 * np.eye(2), (50, 2, 2)))


def test_resample_locality_and_identity(checkerboard2):
    lat = sample_environment(checkerboard2, 9)
    z = (3, -2)
    same = resample_site(lat, z, lat.seed_at(np.array(z)))
    assert same == lat
    new = resample_site(lat, z, 12345)
    f0, f1 = realize_field(lat, checkerboard2), realize_field(new, checkerboard2)
    x = np.random.default_rng(1).uniform(-10, 10, size=(4000, 2))
    far = np.max(np.abs(x - np.array(z)), axis=1) > 0.5
    assert np.array_equal(f0.eval(x[far]), f1.eval(x[far]))


def test_resample_smoothing_locality():
    spec = FieldSpec.checkerboard(dim=2, smoothing_radius=0.25)
    lat = sample_environment(spec, 2)
    new = resample_site(lat, (0, 0), 777)
    x = np.random.default_rng(2).uniform(-4, 4, size=(4000, 2))
    far = np.max(np.abs(x), axis=1) > 0.5 + 0.25
    assert np.array_equal(realize_field(lat, spec).eval(x[far]), realize_field(new, spec).eval(x[far]))
    assert spec.ell_eff == pytest.approx(spec.ell + 0.5)


def test_resample_marginal_ks():
    spec = FieldSpec(kind="scalar_checkerboard", dim=2, lam=1, Lam=4, law=Law(low=1.0, high=4.0))
    lat = sample_environment(spec, 4)
    fresh = [site_values(spec, resample_site(lat, (0, 0), hash_seed(99, k)), [[0, 0]])[0] for k in range(1000)]
    base = [site_values(spec, sample_environment(spec, s), [[0, 0]])[0] for s in range(1000)]
    assert stats.ks_2samp(fresh, base).pvalue > 0.01


@pytest.mark.parametrize("kind", ["scalar_checkerboard", "diagonal_iid", "full_symmetric"])
def test_ellipticity_and_symmetry(kind):
    d = 3
    kw = dict(kind=kind, dim=d, lam=1.0, Lam=4.0)
    if kind == "full_symmetric":
        kw["offdiag"] = 0.5
    else:
        kw["law"] = Law(low=1.0, high=4.0)
    spec = FieldSpec(**kw)
    rng = np.random.default_rng(0)
    for s in range(20):
        A = random_field(spec, s).eval(rng.uniform(-20, 20, size=(500, d)))
        assert np.array_equal(A, np.swapaxes(A, 1, 2))
        ev = np.linalg.eigvalsh(A)
        assert ev.min() >= 1.0 - 1e-12 and ev.max() <= 4.0 + 1e-12


def test_invalid_specs():
    with pytest.raises(InvalidSpec):
        FieldSpec(kind="full_symmetric", dim=3, lam=1.0, Lam=2.0, offdiag=0.4)
    with pytest.raises(InvalidSpec):
        FieldSpec.checkerboard(dim=2, ell=1.0)
    with pytest.raises(InvalidSpec):
        FieldSpec(kind="bogus")


def test_spec_roundtrip():
    spec = FieldSpec(kind="full_symmetric", dim=3, lam=1.0, Lam=4.0, offdiag=0.3)
    assert FieldSpec.from_dict(spec.to_dict()) == spec


def test_radial_counterexample_blend():
    spec = FieldSpec(kind="radial_counterexample", dim=3, lam=1.0, Lam=4.0, variant="A1")
    f = realize_field(None, spec)
    A0 = f.eval([[0.0, 0.0, 0.0]])[0]
    assert np.allclose(A0, np.eye(3))
    A = f.eval([[3.0, 0.0, 0.0]])[0]
    assert np.allclose(A, np.diag([4.0, 1.0, 1.0]))
