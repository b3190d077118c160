import numpy as np
import pytest

from bnspec.analysis import (
    SweepRecord,
    bifurcation_check,
    bubble_initializer,
    bubble_profile,
    bubble_profile_slope,
    bubble_sobolev_quotient,
    bubble_test_family,
    check_sweep,
    concentration_level,
    direct_coercive_minimize,
    second_order_check,
    smooth_perturbations,
    sobolev_constant,
    sweep_energy,
)
from bnspec.errors import ConfigError
from bnspec.mesh import DomainSpec, build_mesh, lp_norm
from bnspec.relaxopt import continuation_minimize
from bnspec.spectral import dirichlet_spectrum

BALL = build_mesh(DomainSpec("RadialBall3D", 200))
TABLE = dirichlet_spectrum(BALL, 6)

# Sharp Sobolev constant in three dimensions, 3 (pi/2)^(4/3), from its closed form.
SHARP_SOBOLEV_3D = 3 * (np.pi / 2) ** (4 / 3)


def test_sobolev_constant_against_closed_form():
    constant = sobolev_constant(3)
    assert constant.K_inv_sq == pytest.approx(SHARP_SOBOLEV_3D, rel=1e-12)
    assert constant.K_inv_n == pytest.approx(constant.K_inv_sq**1.5, rel=1e-12)
    assert constant.quadrature_error <= 1e-6
    with pytest.raises(ValueError):
        sobolev_constant(2)


def test_bubble_profile_solves_critical_equation():
    # -(1/r^2)(r^2 U')' = U^5, checked with the analytic slope and a central difference.
    r = np.linspace(0.2, 6.0, 30)
    step = 1e-4
    flux = lambda s: s**2 * bubble_profile_slope(s)
    laplacian = (flux(r + step) - flux(r - step)) / (2 * step) / r**2
    np.testing.assert_allclose(-laplacian, bubble_profile(r) ** 5, rtol=1e-6)
    numeric_slope = (bubble_profile(r + step) - bubble_profile(r - step)) / (2 * step)
    np.testing.assert_allclose(bubble_profile_slope(r), numeric_slope, rtol=1e-7)


def test_concentration_level_sits_below_sharp_constant():
    level = concentration_level(BALL)
    assert 4.5 < level < SHARP_SOBOLEV_3D
    assert concentration_level(BALL) == level  # cached
    # Wide bubbles feel the boundary truncation and lie above the level.
    assert bubble_sobolev_quotient(BALL, 0.3) > level


def test_bubble_initializer_is_normalized():
    u = bubble_initializer(BALL)
    assert lp_norm(BALL, u, 6) == pytest.approx(1.0, rel=1e-12)
    assert np.argmax(u) == 0
    with pytest.raises(ConfigError):
        bubble_initializer(BALL, width=0.0)


@pytest.mark.parametrize("fraction", [0.3, 0.7])
def test_direct_minimization_agrees_with_continuation(fraction):
    lam = fraction * np.pi**2
    _, value = direct_coercive_minimize(BALL, lam)
    result = continuation_minimize(BALL, lam, 1)
    assert value == pytest.approx(result.mu_star, rel=1e-8)


def test_direct_minimization_rejects_non_coercive_lambda():
    with pytest.raises(ConfigError):
        direct_coercive_minimize(BALL, 1.1 * TABLE.Lambda(1))
    with pytest.raises(ConfigError):
        direct_coercive_minimize(BALL, -1.0)


def test_small_sweep_is_monotone_and_sandwiched():
    grid = [0.5 * np.pi**2, 0.7 * np.pi**2, 0.9 * np.pi**2]
    records = sweep_energy(BALL, TABLE, grid)
    assert [r.i for r in records] == [0, 0, 0]
    assert all(not r.error for r in records)
    assert all(r.energy == pytest.approx(r.mu_star**1.5) for r in records)
    assert check_sweep(BALL, TABLE, records).ok


def test_sweep_records_failures_and_keeps_going():
    records = sweep_energy(BALL, TABLE, [0.5 * np.pi**2, TABLE.Lambda(1)], starts=("constant",))
    assert np.isfinite(records[0].mu_star)
    assert np.isnan(records[1].mu_star) and records[1].error
    with pytest.raises(ConfigError):
        sweep_energy(BALL, TABLE, [3.0, 2.0])


def test_check_sweep_flags_violations():
    lam1 = TABLE.Lambda(1)
    fake = [
        SweepRecord(0.5 * lam1, 0, 1, 1.0, 1.0, True, 0.0),
        SweepRecord(0.6 * lam1, 0, 1, 2.0, 2.0, True, 0.0),
        SweepRecord(0.99 * lam1, 0, 1, 5.0, 5.0, True, 0.0),
    ]
    report = check_sweep(BALL, TABLE, fake)
    assert not report.ok
    assert report.monotonicity_violations and report.endpoint_violations


def test_second_order_model_is_exact_for_dilations():
    lam = 0.8 * np.pi**2
    result = continuation_minimize(BALL, lam, 1)
    report = second_order_check(BALL, lam, (result.u, result.pair), np.ones(BALL.size))
    # mu((1+t)u) = mu (1+t)^-4 has t^2 coefficient 10 and a vanishing gradient term.
    assert report.second_order_model == pytest.approx(10.0, rel=1e-8)
    assert report.second_order_fd == pytest.approx(10.0, rel=1e-5)
    assert report.first_order_model == pytest.approx(-4.0, rel=1e-8)
    assert report.gradient_term == pytest.approx(0.0, abs=1e-12)
    assert report.stability_holds and report.variance_holds


def test_second_order_model_on_smooth_perturbations():
    lo, hi = TABLE.interval(1)
    lam = lo + 0.9 * (hi - lo)
    result = continuation_minimize(BALL, lam, 2)
    for h in smooth_perturbations(BALL, TABLE, 5, seed=3):
        report = second_order_check(BALL, lam, (result.u, result.pair), h)
        assert report.model_mismatch < 1e-4
        assert report.first_order_fd == pytest.approx(report.first_order_model, rel=1e-5, abs=1e-8)
        assert report.stability_holds and report.variance_holds
        assert report.constraint_residual < 1e-8


def test_smooth_perturbations_are_reproducible():
    a = smooth_perturbations(BALL, TABLE, 3, seed=7)
    b = smooth_perturbations(BALL, TABLE, 3, seed=7)
    assert all(np.array_equal(x, y) for x, y in zip(a, b))


def test_bubble_family_requires_radial_mesh():
    box = build_mesh(DomainSpec("Box3D", 8))
    with pytest.raises(ConfigError):
        bubble_test_family(box, dirichlet_spectrum(box, 3), 5.0)


def test_bubble_family_normalization():
    report = bubble_test_family(BALL, TABLE, 0.8 * np.pi**2, eps_list=(0.2, 0.1))
    assert report.hypothesis_met
    np.testing.assert_allclose(report.normalized_integral, 1.0, rtol=1e-12)
    assert len(report.objective) == 2 and len(report.deviation_ratios) == 1


def test_bifurcation_grid_validation():
    top = TABLE.Lambda(1)
    with pytest.raises(ConfigError):
        bifurcation_check(BALL, TABLE, 0, [0.9 * top, 0.8 * top])
    with pytest.raises(ConfigError):
        bifurcation_check(BALL, TABLE, 0, [0.9 * top, top])


def test_bifurcation_residual_shrinks_towards_eigenvalue():
    top = TABLE.Lambda(1)
    report = bifurcation_check(BALL, TABLE, 0, [0.9 * top, 0.97 * top, 0.99 * top])
    assert not report.errors
    assert report.residual_decreasing
    assert report.energies[0] > report.energies[-1]
