import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from bnspec.analysis import sobolev_constant
from bnspec.errors import ConfigError, SolverError
from bnspec.mesh import DomainSpec, build_mesh, lp_norm
from bnspec.relaxopt import (
    RelaxOptions,
    continuation_minimize,
    derivative_pair,
    directional_derivative,
    evaluate_F,
    extract_solution,
    minimize_relaxed,
    nodal_domains,
    relaxed_floor,
    relaxed_inverse,
)
from bnspec.spectral import WeightField, dirichlet_spectrum, generalized_eigs, multiplicity_index

BALL = build_mesh(DomainSpec("RadialBall3D", 200))
TABLE = dirichlet_spectrum(BALL, 6)


@settings(max_examples=60, deadline=None)
@given(
    t=st.lists(st.floats(0.0, 1e4), min_size=1, max_size=20),
    ratio=st.floats(1e-12, 10.0),
    exponent=st.floats(0.5, 5.0),
)
def test_relaxed_inverse_round_trip(t, ratio, exponent):
    t = np.array(t)
    v = relaxed_inverse(t, ratio, exponent)
    np.testing.assert_allclose(v - ratio * v ** (-exponent), t, rtol=1e-9, atol=1e-9 * (1 + ratio))
    assert np.all(v >= t)


def test_relaxed_inverse_rejects_negative_input():
    with pytest.raises(ConfigError):
        relaxed_inverse(np.array([-1.0]), 0.1, 2.0)
    np.testing.assert_array_equal(relaxed_inverse(np.array([0.0, 2.0]), 0.0, 2.0), [0.0, 2.0])


@pytest.mark.parametrize("eps", [1e-1, 1e-3])
def test_relaxed_floor_solves_its_fixed_point(eps):
    ratio, q, crit = 3e-3, 4.0, 6.0
    v = relaxed_floor(ratio, q, crit, eps)
    assert v == pytest.approx(ratio * v ** (-(q + eps) / 2), rel=1e-12)


def test_evaluate_f_constant_weight():
    lam, eps = 0.5 * np.pi**2, 0.01
    u = WeightField.constant(BALL)
    mu = generalized_eigs(BALL, lam, u, 1)[0].mu
    penalty = np.sum(BALL.quad_weights * u.values ** (-eps))
    assert evaluate_F(BALL, lam, 1, eps, u) == pytest.approx(mu + eps * penalty, rel=1e-12)
    with pytest.raises(ConfigError):
        evaluate_F(BALL, lam, 1, 0.0, u)


def test_derivative_matches_finite_difference(rng):
    lam = 0.4 * np.pi**2
    u = 0.5 + rng.random(BALL.size)
    h = np.cos(3 * BALL.radii)
    left, right, degenerate = derivative_pair(BALL, lam, 1, u, h)
    assert not degenerate and left == pytest.approx(right, rel=1e-12)
    step = 1e-6
    up = generalized_eigs(BALL, lam, u * (1 + step * h), 1)[0].mu
    down = generalized_eigs(BALL, lam, u * (1 - step * h), 1)[0].mu
    assert (up - down) / (2 * step) == pytest.approx(right, rel=1e-6)
    assert directional_derivative(BALL, lam, 1, u, h, "left") == left
    with pytest.raises(ConfigError):
        directional_derivative(BALL, lam, 1, u, h, "middle")


def test_minimize_relaxed_preconditions():
    with pytest.raises(ConfigError):
        minimize_relaxed(BALL, 1.0, 1, 0.1, np.ones(BALL.size))  # not normalized
    with pytest.raises(ConfigError):
        minimize_relaxed(BALL, 1.0, 1, 0.0, WeightField.constant(BALL))


def test_relaxed_stage_decreases_objective():
    lam = 0.8 * np.pi**2
    start = WeightField.constant(BALL)
    state = minimize_relaxed(BALL, lam, 1, 0.1, start)
    assert state.converged
    assert state.F_value <= evaluate_F(BALL, lam, 1, 0.1, start) + 1e-12
    values = [entry[1] for entry in state.iteration_log]
    assert values[-1] <= values[0]
    assert lp_norm(BALL, state.u.values, 6) == pytest.approx(1.0, rel=1e-12)


@pytest.mark.parametrize("schedule", [(), (1e-1, 1e-1, 1e-4), (0.5, 1e-4), (1e-1, 1e-3)])
def test_schedule_validation(schedule):
    with pytest.raises(ConfigError):
        continuation_minimize(BALL, 1.0, 1, schedule)


@pytest.mark.parametrize("i,fraction,nodes", [(0, 0.8, 1), (1, 0.9, 2)])
def test_certified_minimizer_on_ball(i, fraction, nodes):
    lo, hi = TABLE.interval(i)
    lam = lo + fraction * (hi - lo) if i else fraction * hi
    k = multiplicity_index(TABLE, i)
    result = continuation_minimize(BALL, lam, k)
    solution = extract_solution(BALL, lam, result.pair, i)
    assert result.certified and result.certificate <= 1e-3
    assert solution.relative_residual <= 1e-6
    assert solution.nodal_count == nodes
    assert solution.energy == pytest.approx(result.mu_star**1.5, rel=1e-8)
    upper = BALL.volume ** (2 / 3) * (TABLE.lambdas_with_mult[k - 1] - lam)
    assert result.mu_star <= upper * (1 + 1e-12)
    assert result.mu_star < sobolev_constant(3).K_inv_sq
    # Stationarity: the final weight is |phi_k| up to the certificate.
    assert lp_norm(BALL, result.u.values - np.abs(result.pair.phi), 6) == result.certificate


def test_box_minimizer_with_degenerate_cluster():
    # Even resolution keeps nodes off the symmetry planes where |phi_2| vanishes.
    mesh = build_mesh(DomainSpec("Box3D", 8))
    table = dirichlet_spectrum(mesh, 6)
    lo, hi = table.interval(1)
    lam = lo + 0.7 * (hi - lo)
    result = continuation_minimize(mesh, lam, 2)
    solution = extract_solution(mesh, lam, result.pair, 1)
    assert result.certified
    assert solution.nodal_count == 2
    assert solution.relative_residual <= 1e-6


def test_nodal_domains_counts_sign_regions():
    r = BALL.radii
    assert nodal_domains(BALL, np.sin(np.pi * r) / r) == 1
    assert nodal_domains(BALL, np.sin(3 * np.pi * r) / r) == 3
    box = build_mesh(DomainSpec("Box3D", 8))
    x, y, z = box.nodes.T
    assert nodal_domains(box, np.sin(np.pi * x) * np.sin(2 * np.pi * y) * np.sin(2 * np.pi * z)) == 4
    assert nodal_domains(box, np.zeros(box.size)) == 0


def test_extract_solution_rejects_nonpositive_mu():
    pair = generalized_eigs(BALL, 1.5 * TABLE.Lambda(1), np.ones(BALL.size), 1)[0]
    with pytest.raises(ConfigError):
        extract_solution(BALL, pair.lambda_, pair)


def test_iteration_cap_surfaces_as_solver_error():
    options = RelaxOptions(max_iters=1, polish=False)
    with pytest.raises(SolverError):
        continuation_minimize(BALL, 0.8 * np.pi**2, 1, options=options)
