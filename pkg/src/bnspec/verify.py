"""Named invariant checks run by ``bnspec verify``.

Each check returns a dict ``{"name", "status", "detail"}`` with status one of
``pass``, ``fail`` or ``skip``. Checks that need lambda off the spectrum are
skipped (with a reason) when the configured lambda sits on it.
"""

from __future__ import annotations

import logging
from typing import Callable

import numpy as np

from .errors import BnspecError, ConfigError
from .mesh import build_mesh, lp_norm

log = logging.getLogger(__name__)


def _result(name: str, ok: bool | None, detail: str) -> dict:
    status = "skip" if ok is None else ("pass" if ok else "fail")
    return {"name": name, "status": status, "detail": detail}


class _Suite:
    def __init__(self):
        self.results: list[dict] = []

    def run(self, name: str, check: Callable[[], tuple[bool | None, str]]) -> None:
        try:
            ok, detail = check()
        except BnspecError as exc:
            ok, detail = False, f"{type(exc).__name__}: {exc}"
        log.info("%s: %s (%s)", name, ok, detail)
        self.results.append(_result(name, ok, detail))

    def skip(self, name: str, reason: str) -> None:
        self.results.append(_result(name, None, reason))


def run_suite(config, inject_fault: bool = False) -> list[dict]:
    from .analysis import (
        second_order_check,
        smooth_perturbations,
        sobolev_constant,
    )
    from .greenmass import mass_at, mass_lambda_derivative_check, spectral_gap_check
    from .relaxopt import continuation_minimize, extract_solution
    from .spectral import (
        WeightField,
        dirichlet_spectrum,
        generalized_eigs,
        multiplicity_index,
        sign_law_check,
    )

    suite = _Suite()
    rng = np.random.default_rng(config.seed)
    mesh = build_mesh(config.domain_spec())
    table = dirichlet_spectrum(mesh, min(max(config.problem.count, config.problem.i + 3), mesh.size - 1))
    i = config.problem.i
    lo, hi = table.interval(i)
    lam = config.problem.lambda_
    if lam is None:
        lam = lo + 0.7 * (hi - lo)
    lam = float(lam)

    def mesh_weights():
        w = mesh.quad_weights
        sym = abs(mesh.stiffness - mesh.stiffness.T).max()
        return bool(np.all(w > 0) and sym == 0), f"min weight {w.min():.3g}, asymmetry {sym:.3g}"

    def lp_homogeneity():
        f = rng.standard_normal(mesh.size)
        lhs = lp_norm(mesh, 2.5 * f, 6.0)
        rhs = 2.5 * lp_norm(mesh, f, 6.0)
        return abs(lhs - rhs) <= 1e-12 * rhs, f"relative gap {abs(lhs - rhs) / rhs:.3g}"

    def spectrum_ordered():
        vals = table.lambdas_with_mult
        v = table.eigvectors
        gram = v.T @ (mesh.quad_weights[:, None] * v)
        orth = np.max(np.abs(gram - np.eye(gram.shape[0])))
        ok = bool(np.all(np.diff(vals) >= 0) and vals[0] > 0 and orth < 1e-8)
        return ok, f"lambda_1 = {vals[0]:.12g}, M-orthonormality error {orth:.3g}"

    def scale_covariance():
        u = WeightField.on(mesh, 0.5 + rng.random(mesh.size))
        t = 1.7
        mu = generalized_eigs(mesh, lam, u, 3)
        mu_t = generalized_eigs(mesh, lam, WeightField.on(mesh, t * u.values), 3)
        power = mesh.weight_exponent
        gap = max(abs(a.mu * t ** (-power) - b.mu) / max(abs(a.mu), 1e-300) for a, b in zip(mu, mu_t))
        return gap < 1e-9, f"max relative gap {gap:.3g}"

    suite.run("mesh.weights_positive_stiffness_symmetric", mesh_weights)
    suite.run("mesh.lp_norm_homogeneous", lp_homogeneity)
    suite.run("spectral.dirichlet_ordered_orthonormal", spectrum_ordered)
    suite.run("spectral.scale_covariance", scale_covariance)

    sobolev = sobolev_constant(mesh.spec.dimension_n)
    suite.run(
        "analysis.sobolev_constant_consistent",
        lambda: (
            abs(sobolev.K_inv_n - sobolev.K_inv_sq ** 1.5) <= 1e-12 * sobolev.K_inv_n,
            f"K^-2 = {sobolev.K_inv_sq:.15g}, K^-3 = {sobolev.K_inv_n:.15g}",
        ),
    )

    on_spectrum = False
    try:
        spectral_gap_check(mesh, lam, table)
    except ConfigError as exc:
        on_spectrum = True
        reason = f"lambda = {lam:.12g} is on the spectrum: {exc}"

    k = multiplicity_index(table, i)
    if on_spectrum or not lo < lam < hi:
        for name in ("relaxopt.minimizer_certified", "relaxopt.sign_law", "relaxopt.pde_residual",
                     "relaxopt.below_sobolev_level", "analysis.second_order_stability"):
            suite.skip(name, reason if on_spectrum else f"lambda = {lam:.12g} outside interval {i}")
    else:
        result = continuation_minimize(mesh, lam, k, config.relax.eps_schedule, options=config.relax_options())
        sol = extract_solution(mesh, lam, result.pair, i)
        suite.run("relaxopt.minimizer_certified",
                  lambda: (result.certified, f"certificate {result.certificate:.3g}"))

        def sign_law():
            pairs = generalized_eigs(mesh, lam, result.u, k + 1)
            report = sign_law_check(pairs, k)
            return report.ok, "; ".join([f"mu_k = {report.mu_k:.12g}", *report.violations])

        suite.run("relaxopt.sign_law", sign_law)
        suite.run("relaxopt.pde_residual",
                  lambda: (sol.relative_residual < 1e-6, f"relative residual {sol.relative_residual:.3g}"))
        suite.run("relaxopt.below_sobolev_level",
                  lambda: (result.mu_star <= sobolev.K_inv_sq * (1 + 1e-9),
                           f"mu* = {result.mu_star:.12g}, K^-2 = {sobolev.K_inv_sq:.12g}"))

        def stability():
            perturbations = smooth_perturbations(mesh, table, 3, seed=config.seed)
            reports = [second_order_check(mesh, lam, (result.u, result.pair), h) for h in perturbations]
            ok = all(r.stability_holds and r.variance_holds for r in reports)
            worst = max(r.model_mismatch for r in reports)
            return ok, f"{len(reports)} perturbations, worst second-order mismatch {worst:.3g}"

        suite.run("analysis.second_order_stability", stability)

    if on_spectrum:
        for name in ("greenmass.mass_increasing", "greenmass.mass_derivative"):
            suite.skip(name, reason)
    else:
        x = np.zeros(1) if mesh.is_radial else 0.5 * np.asarray(mesh.spec.box_lengths)
        step = 1e-3 * min(lam - lo, hi - lam) if lam > lo else 1e-3 * (hi - lam)

        def derivative():
            report = mass_lambda_derivative_check(mesh, x, lam, step, table)
            tol = 2e-3 if mesh.is_radial else 5e-2
            return report.positive and report.mismatch < tol, (
                f"finite difference {report.finite_difference:.10g}, "
                f"sum w g^2 {report.green_square:.10g}, mismatch {report.mismatch:.3g}"
            )

        def increasing():
            values = [mass_at(mesh, lam + s * step, x, table) for s in (-1, 0, 1)]
            return bool(values[0] < values[1] < values[2]), "m at lambda -/0/+ step: " + ", ".join(
                f"{v:.12g}" for v in values)

        suite.run("greenmass.mass_increasing", increasing)
        suite.run("greenmass.mass_derivative", derivative)

    if inject_fault:
        target = next(r for r in suite.results if r["status"] == "pass")
        target["status"] = "fail"
        target["detail"] = "injected fault: " + target["detail"]
    return suite.results
