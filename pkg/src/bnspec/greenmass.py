"""Green's functions of -Delta - lam, the mass m_lam(x) and the thresholds lam_{i,*}.

The mass is read off the regular part H = G - 1/(4 pi |x - y|), which solves

    (-Delta - lam) H = lam / (4 pi |x - y|)   in the domain,
    H = -1 / (4 pi |x - y|)                   on the boundary,

so that m_lam(x) = H(x). Unlike the self-value of a discrete Green column, the
node values of H converge as the mesh is refined.

On radial meshes the only admissible probe is the centre. It is not a node
(cell-centred grid), so H(0) comes from the even extrapolation
(9 H(h/2) - H(3h/2)) / 8.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as sla

from .errors import ConfigError, SolverError
from .mesh import MeshedDomain
from .spectral import SpectrumTable, dirichlet_spectrum, shifted_operator, sparse_factor

log = logging.getLogger(__name__)

SPEC_TOL_FRACTION = 1e-3  # rejected distance to the spectrum, relative to the local gap
PROBE_MARGIN_CELLS = 2.0
ITERATIVE_RTOL = 1e-10


@dataclass(frozen=True, eq=False)
class MassField:
    lambda_: float
    probes: np.ndarray  # (P, dim) snapped probe coordinates
    values: np.ndarray
    probe_margin: float


@dataclass(frozen=True)
class ThresholdEstimate:
    i: int
    lambda_star: float
    bracket: tuple[float, float]
    probes: str
    note: str = ""


@dataclass(frozen=True)
class DerivativeReport:
    lambda_: float
    dlambda: float
    finite_difference: float
    green_square: float  # sum_i w_i g_i^2
    mismatch: float  # relative

    @property
    def positive(self) -> bool:
        return self.finite_difference > 0 and self.green_square > 0


# ---------------------------------------------------------------- plumbing


def _table(mesh: MeshedDomain, lam: float, table: SpectrumTable | None) -> SpectrumTable:
    """A spectrum table reaching past lam (computed and cached when not supplied)."""
    if table is not None and table.distinct_Lambdas[-1] > lam:
        return table
    cached = mesh._cache.get("green_table")
    if cached is not None and cached.distinct_Lambdas[-1] > lam:
        return cached
    count = 8 if cached is None else 2 * cached.lambdas_with_mult.size
    while True:
        count = min(count, mesh.size - 1)
        cached = dirichlet_spectrum(mesh, count)
        if cached.distinct_Lambdas[-1] > lam or count >= mesh.size - 1:
            break
        count *= 2
    mesh._cache["green_table"] = cached
    return cached


def spectral_gap_check(mesh: MeshedDomain, lam: float, table: SpectrumTable | None = None) -> int:
    """Reject lam within SPEC_TOL_FRACTION * (local gap) of the spectrum; returns the interval i."""
    if lam <= 0 and table is None:
        return 0  # A is positive definite
    table = _table(mesh, lam, table)
    i = table.interval_of(lam)
    lo, hi = table.interval(i)
    gap = hi - lo
    distance = hi - lam if i == 0 else min(lam - lo, hi - lam)
    if distance < SPEC_TOL_FRACTION * gap:
        nearest = lo if i > 0 and lam - lo < hi - lam else hi
        raise ConfigError(
            f"lambda = {lam:.12g} is within {distance:.3g} of the eigenvalue {nearest:.12g} "
            f"(tolerance {SPEC_TOL_FRACTION * gap:.3g})"
        )
    return i


def probe_node(mesh: MeshedDomain, point, margin_cells: float = PROBE_MARGIN_CELLS) -> int:
    """Node index for a probe point, enforcing the interior margin.

    Radial meshes accept only the centre and return -1 for it.
    """
    point = np.atleast_1d(np.asarray(point, dtype=float))
    if mesh.is_radial:
        if point.size != 1 or point[0] != 0.0:
            raise ConfigError(f"radial meshes support the centre probe only, got {point.tolist()}")
        return -1
    if point.shape != (3,):
        raise ConfigError(f"box probes need three coordinates, got {point.tolist()}")
    node = int(np.argmin(np.linalg.norm(mesh.nodes - point, axis=1)))
    if margin_cells < PROBE_MARGIN_CELLS:
        raise ConfigError(f"probe margin must be at least {PROBE_MARGIN_CELLS} cells")
    margin = margin_cells * max(mesh.cell_size)
    if mesh.boundary_distance[node] < margin:
        raise ConfigError(
            f"probe {point.tolist()} is {mesh.boundary_distance[node]:.4g} from the boundary "
            f"(margin {margin:.4g})"
        )
    return node


def _probe_coordinates(mesh: MeshedDomain, node: int) -> np.ndarray:
    return np.zeros(1) if node < 0 else mesh.nodes[node].copy()


def _solve(mesh: MeshedDomain, lam: float, rhs: np.ndarray, definite: bool) -> np.ndarray:
    k = shifted_operator(mesh, lam)
    if mesh.is_radial:
        return sla.spsolve(k.tocsc(), rhs)
    precond = sp.diags(1.0 / mesh.stiffness.diagonal())
    solver = sla.cg if definite else sla.minres
    x, info = solver(k, rhs, M=precond, rtol=ITERATIVE_RTOL, maxiter=5000)
    residual = np.linalg.norm(k @ x - rhs) / np.linalg.norm(rhs)
    if info != 0 or residual > 10 * ITERATIVE_RTOL:
        # Near the spectrum Krylov convergence degrades; fall back to a direct solve.
        log.debug("iterative solve stalled (info=%d, residual %.2e); using LU", info, residual)
        try:
            x = sparse_factor(k).solve(rhs)
        except RuntimeError as exc:
            raise SolverError(f"shifted operator is singular at lambda = {lam}: {exc}") from exc
    return x


def _singular_kernel(mesh: MeshedDomain, node: int) -> np.ndarray:
    """Node values of 1/(4 pi |x - y|), with the equal-volume ball average at y = x."""
    if node < 0:
        return 1.0 / (4.0 * np.pi * mesh.radii)
    dist = np.linalg.norm(mesh.nodes - mesh.nodes[node], axis=1)
    dist[node] = 1.0
    kernel = 1.0 / (4.0 * np.pi * dist)
    radius = (3.0 * mesh.quad_weights[node] / (4.0 * np.pi)) ** (1.0 / 3.0)
    kernel[node] = 3.0 / (8.0 * np.pi * radius)
    return kernel


def _boundary_kernel(mesh: MeshedDomain, node: int) -> np.ndarray:
    """-1/(4 pi |x - p|) at the boundary points of the eliminated links."""
    centre = np.zeros(mesh.boundary.point.shape[1]) if node < 0 else mesh.nodes[node]
    return -1.0 / (4.0 * np.pi * np.linalg.norm(mesh.boundary.point - centre, axis=1))


def _at_probe(mesh: MeshedDomain, node: int, f: np.ndarray) -> float:
    if node >= 0:
        return float(f[node])
    return float((9.0 * f[0] - f[1]) / 8.0)


def _regular_part(mesh: MeshedDomain, lam: float, node: int, definite: bool) -> np.ndarray:
    kernel = _singular_kernel(mesh, node)
    rhs = mesh.quad_weights * lam * kernel + mesh.boundary.fold(_boundary_kernel(mesh, node), mesh.size)
    return _solve(mesh, lam, rhs, definite)


def _definite(mesh: MeshedDomain, lam: float, table: SpectrumTable | None) -> bool:
    if lam <= 0:
        return True
    return lam < _table(mesh, lam, table).lambdas_with_mult[0]


# ---------------------------------------------------------------- operations


def green_column(mesh: MeshedDomain, lam: float, x, table: SpectrumTable | None = None) -> np.ndarray:
    """Discrete Green's function with pole at probe x.

    Solves (A - lam M) g = e_x. Since A and M are the cell-integrated forms,
    this is the strong-form equation with right-hand side e_x / w_x.
    """
    spectral_gap_check(mesh, lam, table)
    node = probe_node(mesh, x)
    rhs = np.zeros(mesh.size)
    rhs[max(node, 0)] = 1.0
    return _solve(mesh, lam, rhs, _definite(mesh, lam, table))


def mass_at(mesh: MeshedDomain, lam: float, x, table: SpectrumTable | None = None) -> float:
    spectral_gap_check(mesh, lam, table)
    node = probe_node(mesh, x)
    h_values = _regular_part(mesh, lam, node, _definite(mesh, lam, table))
    return _at_probe(mesh, node, h_values)


def mass_field(
    mesh: MeshedDomain, lam: float, probes, table: SpectrumTable | None = None,
    margin_cells: float = PROBE_MARGIN_CELLS,
) -> MassField:
    probes = [np.atleast_1d(np.asarray(p, dtype=float)) for p in probes]
    if not probes:
        raise ConfigError("at least one probe is required")
    spectral_gap_check(mesh, lam, table)
    nodes = [probe_node(mesh, p, margin_cells) for p in probes]
    definite = _definite(mesh, lam, table)
    values = np.array([_at_probe(mesh, n, _regular_part(mesh, lam, n, definite)) for n in nodes])
    if not np.all(np.isfinite(values)):
        raise SolverError("non-finite mass values", {"lambda": lam})
    return MassField(
        lambda_=float(lam),
        probes=np.array([_probe_coordinates(mesh, n) for n in nodes]),
        values=values,
        probe_margin=0.0 if mesh.is_radial else margin_cells * max(mesh.cell_size),
    )


def mass_lambda_derivative_check(
    mesh: MeshedDomain, x, lam: float, dlambda: float, table: SpectrumTable | None = None
) -> DerivativeReport:
    """Central difference of m_lam(x) against sum_i w_i g_i^2 for the Green column at x."""
    if not dlambda > 0:
        raise ConfigError("dlambda must be positive")
    intervals = {spectral_gap_check(mesh, l, table) for l in (lam - dlambda, lam, lam + dlambda)}
    if len(intervals) != 1:
        raise ConfigError(f"[{lam - dlambda}, {lam + dlambda}] crosses an eigenvalue")
    upper = mass_at(mesh, lam + dlambda, x, table)
    lower = mass_at(mesh, lam - dlambda, x, table)
    fd = (upper - lower) / (2.0 * dlambda)
    g = green_column(mesh, lam, x, table)
    quad = float(np.sum(mesh.quad_weights * g**2))
    return DerivativeReport(float(lam), float(dlambda), fd, quad, abs(fd - quad) / abs(quad))


def lambda_star(
    mesh: MeshedDomain,
    table: SpectrumTable,
    i: int,
    probes,
    bisect_tol: float | None = None,
    margin_cells: float = PROBE_MARGIN_CELLS,
) -> ThresholdEstimate:
    """Bisect the sign of max over probes of m_lam on (Lambda_i, Lambda_{i+1}).

    Each probe's mass increases with lam inside the interval, so the maximum
    does too and the sign change is unique.
    """
    probes = [np.atleast_1d(np.asarray(p, dtype=float)) for p in probes]
    if not probes:
        raise ConfigError("at least one probe is required")
    if i < 0:
        raise ConfigError("interval index must be >= 0")
    lo, hi = table.interval(i)
    gap = hi - lo
    tol = 1e-3 * gap if bisect_tol is None else float(bisect_tol)
    if not tol > 0:
        raise ConfigError("bisect_tol must be positive")
    delta = 1.0001 * SPEC_TOL_FRACTION * gap
    description = "; ".join(str(p.tolist()) for p in probes)

    def max_mass(lam):
        return float(mass_field(mesh, lam, probes, table, margin_cells).values.max())

    left, right = (delta if i == 0 else lo + delta), hi - delta
    if max_mass(right) <= 0:
        raise SolverError(
            "threshold beyond probe horizon: max mass is still negative at Lambda_{i+1} - delta",
            {"i": i, "lambda": right},
        )
    if max_mass(left) > 0:
        return ThresholdEstimate(
            i, float(left), (float(lo), float(left)), description,
            note="mass already positive next to Lambda_i",
        )
    while right - left > tol:
        mid = 0.5 * (left + right)
        if max_mass(mid) > 0:
            right = mid
        else:
            left = mid
    return ThresholdEstimate(i, 0.5 * (left + right), (float(left), float(right)), description)


def deflated_green_mass(
    mesh: MeshedDomain, table: SpectrumTable, i: int, x, basis_tol: float = 1e-6
) -> tuple[float, float]:
    """Regular part of the Green's function at lam = Lambda_i with the eigenspace removed.

    Solves the saddle system for Hbar (pole regular part) with Lagrange
    multipliers enforcing M-orthogonality of Hbar + Gamma to every eigenvector
    of Lambda_i. Returns (mass, max |constraint residual|).
    """
    if i < 1:
        raise ConfigError("deflation needs an eigenvalue cluster, i >= 1")
    node = probe_node(mesh, x)
    big_lambda = table.Lambda(i)
    phi = table.eigenspace(i)
    k = shifted_operator(mesh, big_lambda)
    w = mesh.quad_weights
    basis_residual = np.linalg.norm(k @ phi, axis=0) / np.linalg.norm(mesh.stiffness @ phi, axis=0)
    if np.any(basis_residual > basis_tol):
        raise SolverError(
            "eigenspace basis residual too large for deflation",
            {"residuals": basis_residual.tolist()},
        )
    kernel = _singular_kernel(mesh, node)
    phi_at_x = np.array([_at_probe(mesh, node, phi[:, j]) for j in range(phi.shape[1])])
    m_phi = w[:, None] * phi
    rhs_top = (
        w * big_lambda * kernel
        + mesh.boundary.fold(_boundary_kernel(mesh, node), mesh.size)
        - m_phi @ phi_at_x
    )
    rhs_bottom = -(m_phi.T @ kernel)
    h_bar = _deflated_solve(mesh, k, phi, m_phi, rhs_top, rhs_bottom)
    constraint = float(np.max(np.abs(m_phi.T @ (h_bar + kernel))))
    return _at_probe(mesh, node, h_bar), constraint


def _deflated_solve(mesh, k, phi, m_phi, rhs_top, rhs_bottom):
    """Solve K H + M Phi c = f, Phi^T M H = r with K singular on span(Phi).

    Since Phi^T K = 0 and Phi is M-orthonormal, c = Phi^T f and the first block
    becomes the consistent singular system K H = f - M Phi Phi^T f, solved by
    MINRES. The kernel component is then set from the constraint.
    """
    consistent = rhs_top - m_phi @ (phi.T @ rhs_top)
    if not mesh.is_radial:
        precond = sp.diags(1.0 / mesh.stiffness.diagonal())
        x, _ = sla.minres(k, consistent, M=precond, rtol=ITERATIVE_RTOL, maxiter=5000)
        x = x + phi @ (rhs_bottom - m_phi.T @ x)
        residual = np.linalg.norm(k @ x - consistent) / np.linalg.norm(consistent)
        if residual <= 1e3 * ITERATIVE_RTOL:
            return x
        log.debug("deflated MINRES residual %.2e; using the saddle LU", residual)
    saddle = sp.bmat([[k, sp.csr_matrix(m_phi)], [sp.csr_matrix(m_phi.T), None]]).tocsc()
    try:
        solution = sparse_factor(saddle).solve(np.concatenate([rhs_top, rhs_bottom]))
    except RuntimeError as exc:
        raise SolverError(f"deflated saddle system is singular: {exc}") from exc
    return solution[: mesh.size]


def eigenspace_density(mesh: MeshedDomain, table: SpectrumTable, i: int, x) -> float:
    """sum_j phi_j(x)^2 over an M-orthonormal basis of the Lambda_i eigenspace."""
    node = probe_node(mesh, x)
    phi = table.eigenspace(i)
    return float(sum(_at_probe(mesh, node, phi[:, j]) ** 2 for j in range(phi.shape[1])))
