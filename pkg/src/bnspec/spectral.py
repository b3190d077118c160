"""Dirichlet spectrum, the multiplicity map and the weighted pencil

    (A - lam M) phi = mu B_u phi,    B_u = diag(w_i u_i^(2*-2)).

Radial meshes are tridiagonal, so the pencil is reduced with L = sqrt(B_u)
to a symmetric tridiagonal matrix and handed to LAPACK. Boxes go through
shift-invert Lanczos with a sparse LU factorization.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as sla
from scipy.linalg import eigh, eigh_tridiagonal, solve_banded

from .errors import ConfigError, SolverError
from .mesh import MeshedDomain, lp_norm

CLUSTER_TOL = 1e-6
GRADED_WEIGHT_RATIO = 1e6  # max/min of B_u beyond which reduced eigenvectors get polished
DENSE_LIMIT = 1500  # 3-D meshes up to this size use the dense pencil path


@dataclass(frozen=True, eq=False)
class SpectrumTable:
    lambdas_with_mult: np.ndarray
    distinct_Lambdas: np.ndarray
    multiplicities: np.ndarray
    cluster_index: np.ndarray  # 1-based cluster of each lambda_p
    eigvectors: np.ndarray
    cluster_tol: float = CLUSTER_TOL

    def Lambda(self, i: int) -> float:
        """Distinct eigenvalue with the convention Lambda_0 = 0."""
        if i == 0:
            return 0.0
        if not 1 <= i <= self.distinct_Lambdas.size:
            raise ConfigError(f"cluster {i} not computed (have {self.distinct_Lambdas.size})")
        return float(self.distinct_Lambdas[i - 1])

    def eigenspace(self, i: int) -> np.ndarray:
        """M-orthonormal basis of the Lambda_i eigenspace (columns)."""
        if not 1 <= i <= self.distinct_Lambdas.size:
            raise ConfigError(f"cluster {i} not computed")
        cols = np.flatnonzero(self.cluster_index == i)
        if cols.size != self.multiplicities[i - 1]:
            raise ConfigError(f"cluster {i} is truncated; request more eigenvalues")
        return self.eigvectors[:, cols]

    def interval(self, i: int) -> tuple[float, float]:
        return self.Lambda(i), self.Lambda(i + 1)

    def interval_of(self, lam: float) -> int:
        """Index i with Lambda_i <= lam < Lambda_{i+1}."""
        i = int(np.searchsorted(self.distinct_Lambdas, lam, side="right"))
        if i >= self.distinct_Lambdas.size:
            raise ConfigError(f"lambda = {lam} lies beyond the computed spectrum")
        return i

    def distance_to_spectrum(self, lam: float) -> tuple[float, float]:
        """(distance, nearest eigenvalue) over the computed lambda_p."""
        j = int(np.argmin(np.abs(self.lambdas_with_mult - lam)))
        return float(abs(self.lambdas_with_mult[j] - lam)), float(self.lambdas_with_mult[j])


@dataclass(frozen=True, eq=False)
class WeightField:
    values: np.ndarray
    floor: float = 0.0
    norm_2star: float = field(default=np.nan)

    @classmethod
    def on(cls, mesh: MeshedDomain, values: np.ndarray, floor: float | None = None) -> "WeightField":
        values = mesh.check_node_function(values, "weight")
        floor = float(values.min()) if floor is None else float(floor)
        if floor < 0 or np.any(values < floor):
            raise ConfigError("weight values fall below the declared floor")
        return cls(values, floor, lp_norm(mesh, values, mesh.critical_exponent))

    @classmethod
    def constant(cls, mesh: MeshedDomain, normalized: bool = True) -> "WeightField":
        c = mesh.volume ** (-1.0 / mesh.critical_exponent) if normalized else 1.0
        return cls.on(mesh, np.full(mesh.size, c))

    def normalized(self, mesh: MeshedDomain) -> "WeightField":
        return WeightField.on(mesh, self.values / self.norm_2star)


@dataclass(frozen=True, eq=False)
class GeneralizedEigenpair:
    index_p: int
    mu: float
    phi: np.ndarray
    lambda_: float
    weight: WeightField


def _as_weight(mesh: MeshedDomain, u) -> WeightField:
    if isinstance(u, WeightField):
        return u
    return WeightField.on(mesh, np.asarray(u, dtype=float))


def weighted_mass(mesh: MeshedDomain, u) -> np.ndarray:
    """Diagonal of B_u."""
    values = u.values if isinstance(u, WeightField) else np.asarray(u, dtype=float)
    return mesh.quad_weights * values**mesh.weight_exponent


def shifted_operator(mesh: MeshedDomain, lam: float) -> sp.csr_matrix:
    return (mesh.stiffness - lam * mesh.lumped_mass).tocsr()


def sparse_factor(matrix: sp.spmatrix):
    """Sparse LU with a symmetric fill-reducing ordering (much cheaper on 3-D stencils)."""
    return sla.splu(
        sp.csc_matrix(matrix), permc_spec="MMD_AT_PLUS_A", options=dict(SymmetricMode=True)
    )


def _rayleigh_ritz(k, b, vecs):
    vecs = vecs / np.sqrt(np.einsum("ij,i,ij->j", vecs, b, vecs))
    gram = vecs.T @ (b[:, None] * vecs)
    if np.linalg.cond(gram) > 1e8:
        raise SolverError("refined eigenvectors collapsed onto each other")
    proj = vecs.T @ (k @ vecs)
    vals, coef = eigh(0.5 * (proj + proj.T), 0.5 * (gram + gram.T))
    return vals, vecs @ coef


def _refine(k, b, vals, vecs, solve):
    """Block shifted inverse iteration with Rayleigh-Ritz after every sweep.

    Reduced (L^{-1} K L^{-T}) eigenvectors lose accuracy when the weight is
    strongly graded; iterating in the original variables restores it. The
    Rayleigh-Ritz step keeps the block B-orthogonal, so (near-)degenerate
    pairs span their eigenspace instead of collapsing onto one vector.
    """
    for _ in range(8):
        # A tiny offset keeps the shifted matrix nonsingular when a shift is exact.
        shifts = vals - 1e-10 * np.maximum(np.abs(vals), 1e-300)
        vecs = np.column_stack([solve(shifts[j], b * vecs[:, j]) for j in range(vecs.shape[1])])
        if not np.all(np.isfinite(vecs)):
            raise SolverError("shifted inverse iteration produced non-finite vectors")
        vals, vecs = _rayleigh_ritz(k, b, vecs)
        kv = k @ vecs
        residual = np.linalg.norm(kv - (b[:, None] * vecs) * vals, axis=0)
        if np.all(residual <= 1e-13 * np.linalg.norm(kv, axis=0)):
            break
    return vals, vecs


def _tridiagonal_pencil(mesh, lam, b, count):
    """Lowest `count` pairs of the tridiagonal pencil via L^{-1}(A - lam M)L^{-T}."""
    k = shifted_operator(mesh, lam)
    s = 1.0 / np.sqrt(b)
    diag = k.diagonal() * s * s
    off = k.diagonal(1) * s[:-1] * s[1:]
    n = b.size
    m = min(n, count + 2)
    # Bisection to full precision: the default absolute tolerance eps*||C|| is
    # useless once the weight spans many orders of magnitude.
    vals, vecs = eigh_tridiagonal(
        diag, off, select="i", select_range=(0, m - 1), lapack_driver="stebz", tol=1e-300
    )
    vecs = vecs * s[:, None]
    if b.max() / b.min() >= GRADED_WEIGHT_RATIO:
        band = np.zeros((3, n))
        band[0, 1:] = k.diagonal(1)
        band[2, :-1] = k.diagonal(-1)

        def solve(shift, rhs):
            band[1] = k.diagonal() - shift * b
            return solve_banded((1, 1), band, rhs)

        vals, vecs = _refine(k, b, vals, vecs, solve)
    return vals[:count], vecs[:, :count]


def _dense_pencil(mesh, lam, b, count):
    """Small 3-D meshes: dense reduction, then the same refinement as the radial path."""
    k = shifted_operator(mesh, lam)
    s = 1.0 / np.sqrt(b)
    m = min(b.size, count + 2)
    reduced = (s[:, None] * k.toarray()) * s[None, :]
    vals, vecs = eigh(reduced, subset_by_index=[0, m - 1])
    vecs = vecs * s[:, None]
    if b.max() / b.min() >= GRADED_WEIGHT_RATIO:
        def solve(shift, rhs):
            return sla.spsolve((k - shift * sp.diags(b)).tocsc(), rhs)

        vals, vecs = _refine(k, b, vals, vecs, solve)
    return vals[:count], vecs[:, :count]


def _sparse_pencil(mesh, lam, b, count, sigma):
    k = shifted_operator(mesh, lam)
    bmat = sp.diags(b).tocsr()
    try:
        lu = sparse_factor(k - sigma * bmat)
    except RuntimeError as exc:
        raise SolverError(f"pencil factorization failed at shift {sigma}: {exc}") from exc
    op = sla.LinearOperator(k.shape, matvec=lu.solve, dtype=float)
    n = k.shape[0]
    ncv = min(n, max(2 * count + 1, count + 20))
    try:
        vals, vecs = sla.eigsh(
            k, k=count, M=bmat, sigma=sigma, which="LM", OPinv=op, ncv=ncv, tol=1e-12,
            maxiter=20 * n,
        )
    except sla.ArpackNoConvergence as exc:
        raise SolverError(
            "shift-invert Lanczos did not converge",
            {"requested": count, "converged": len(exc.eigenvalues), "shift": sigma},
        ) from exc
    # Rayleigh-Ritz on the returned subspace cleans up clustered eigenvectors.
    gram = vecs.T @ (b[:, None] * vecs)
    proj = vecs.T @ (k @ vecs)
    vals, coef = eigh(0.5 * (proj + proj.T), 0.5 * (gram + gram.T))
    return vals, vecs @ coef


def _lowest_dirichlet(mesh: MeshedDomain) -> float:
    key = "lambda1"
    if key not in mesh._cache:
        mesh._cache[key] = float(dirichlet_spectrum(mesh, 1).lambdas_with_mult[0])
    return mesh._cache[key]


def _pencil_pairs(mesh: MeshedDomain, lam: float, b: np.ndarray, count: int):
    if mesh.is_radial:
        return _tridiagonal_pencil(mesh, lam, b, count)
    if mesh.size <= DENSE_LIMIT:
        return _dense_pencil(mesh, lam, b, count)
    # Lower bound for mu_1 from K >= (lambda_1 - lam) M and B >= min(b/w) M.
    ratio = b / mesh.quad_weights
    gap = _lowest_dirichlet(mesh) - lam
    bound = gap / ratio.max() if gap >= 0 else gap / ratio.min()
    sigma = bound - 0.05 * abs(bound) - 1e-3
    return _sparse_pencil(mesh, lam, b, count, sigma)


def dirichlet_spectrum(
    mesh: MeshedDomain, count: int, cluster_tol: float = CLUSTER_TOL
) -> SpectrumTable:
    n = mesh.size
    if not 1 <= count <= n:
        raise ConfigError(f"count must be in [1, {n}], got {count}")
    # Extra eigenvalues so that a cluster straddling `count` keeps its true multiplicity.
    extended = min(n - 1 if not mesh.is_radial else n, count + 8)
    extended = max(extended, count)
    w = mesh.quad_weights
    if mesh.is_radial:
        vals, vecs = _tridiagonal_pencil(mesh, 0.0, w, extended)
    else:
        lu = sparse_factor(mesh.stiffness)
        op = sla.LinearOperator(mesh.stiffness.shape, matvec=lu.solve, dtype=float)
        try:
            vals, vecs = sla.eigsh(
                mesh.stiffness, k=extended, M=mesh.lumped_mass, sigma=0.0, OPinv=op,
                tol=1e-12, maxiter=20 * n,
            )
        except sla.ArpackNoConvergence as exc:
            raise SolverError(
                "Dirichlet eigensolver did not converge",
                {"requested": extended, "converged": len(exc.eigenvalues)},
            ) from exc
        gram = vecs.T @ (w[:, None] * vecs)
        proj = vecs.T @ (mesh.stiffness @ vecs)
        vals, coef = eigh(0.5 * (proj + proj.T), 0.5 * (gram + gram.T))
        vecs = vecs @ coef

    labels = np.zeros(extended, dtype=int)
    label = 0
    for p in range(extended):
        if p == 0 or vals[p] - vals[p - 1] > cluster_tol * abs(vals[p]):
            label += 1
        labels[p] = label
    keep = labels[count - 1]
    distinct = np.array([vals[labels == c].mean() for c in range(1, keep + 1)])
    mult = np.array([np.count_nonzero(labels == c) for c in range(1, keep + 1)])
    if mesh._cache.get("lambda1") is None:
        mesh._cache["lambda1"] = float(vals[0])
    return SpectrumTable(
        lambdas_with_mult=vals[:count].copy(),
        distinct_Lambdas=distinct,
        multiplicities=mult,
        cluster_index=labels[:count].copy(),
        eigvectors=vecs[:, :count].copy(),
        cluster_tol=cluster_tol,
    )


def multiplicity_index(table: SpectrumTable, i: int) -> int:
    """k = N(i) + 1, the index of the first lambda_p strictly above Lambda_i."""
    if i < 0:
        raise ConfigError(f"interval index must be >= 0, got {i}")
    if i == 0:
        return 1
    if i + 1 > table.distinct_Lambdas.size:
        raise ConfigError(
            f"interval {i} needs {i + 1} eigenvalue clusters, table has {table.distinct_Lambdas.size}"
        )
    return int(table.multiplicities[:i].sum()) + 1


def generalized_eigs(
    mesh: MeshedDomain, lam: float, u, count: int
) -> list[GeneralizedEigenpair]:
    u = _as_weight(mesh, u)
    if count < 1:
        raise ConfigError("count must be >= 1")
    if np.any(u.values <= 0):
        raise ConfigError("generalized eigenproblem needs a strictly positive weight")
    b = weighted_mass(mesh, u)
    vals, vecs = _pencil_pairs(mesh, lam, b, count)
    # Weighted normalization sum_i w_i u_i^(2*-2) phi_i^2 = 1, with a sign fixed by the largest entry.
    vecs = vecs / np.sqrt(np.einsum("ij,i,ij->j", vecs, b, vecs))
    signs = np.sign(vecs[np.argmax(np.abs(vecs), axis=0), np.arange(vecs.shape[1])])
    vecs = vecs * signs
    vals = _quotients(mesh, lam, b, vecs)
    return [
        GeneralizedEigenpair(p + 1, float(vals[p]), vecs[:, p].copy(), float(lam), u)
        for p in range(count)
    ]


def pencil_residual(mesh: MeshedDomain, pair: GeneralizedEigenpair) -> tuple[float, float]:
    """(||(A - lam M)phi - mu B_u phi||, ||(A - lam M)phi||) in the Euclidean norm."""
    k_phi = shifted_operator(mesh, pair.lambda_) @ pair.phi
    r = k_phi - pair.mu * weighted_mass(mesh, pair.weight) * pair.phi
    return float(np.linalg.norm(r)), float(np.linalg.norm(k_phi))


def stiffness_form(mesh: MeshedDomain, v: np.ndarray) -> np.ndarray:
    """v^T A v for each column of v, summed as squared differences over edges.

    The sum of non-negative terms keeps full relative precision, unlike the
    matrix-vector product whose rounding error scales with ||A||.
    """
    i, j, c = mesh.edges
    diff = v[i] - v[j]
    row_sums = mesh._cache.get("row_sums")
    if row_sums is None:
        row_sums = mesh._cache["row_sums"] = np.asarray(mesh.stiffness.sum(axis=1)).ravel()
    if v.ndim == 1:
        return c @ diff**2 + row_sums @ v**2
    return c @ diff**2 + row_sums @ v**2


def _quotients(mesh, lam, b, vecs):
    num = stiffness_form(mesh, vecs) - lam * (mesh.quad_weights @ vecs**2)
    return num / (b @ vecs**2)


def rayleigh_quotient(mesh: MeshedDomain, lam: float, u, v: np.ndarray) -> float:
    u = _as_weight(mesh, u)
    v = mesh.check_node_function(v, "v")
    den = float(v @ (weighted_mass(mesh, u) * v))
    if not den > 0:
        raise ConfigError("weighted denominator of the Rayleigh quotient vanishes")
    return float(stiffness_form(mesh, v) - lam * (mesh.quad_weights @ v**2)) / den


@dataclass(frozen=True)
class SignLawReport:
    k: int
    ok: bool
    max_nonpositive: float  # max of mu_p over p <= k-1 (or -inf)
    mu_k: float
    violations: tuple[str, ...]


def sign_law_check(
    pairs: list[GeneralizedEigenpair], k: int, tol: float = 1e-8
) -> SignLawReport:
    """mu_p <= tol for p <= k-1 and mu_k > tol."""
    mus = {pair.index_p: pair.mu for pair in pairs}
    if k not in mus:
        raise ConfigError(f"pairs do not include index k = {k}")
    violations = [
        f"mu_{p} = {mus[p]:.6g} > {tol:g}" for p in range(1, k) if mus[p] > tol
    ]
    if not mus[k] > tol:
        violations.append(f"mu_{k} = {mus[k]:.6g} is not positive")
    lower = max((mus[p] for p in range(1, k)), default=-np.inf)
    return SignLawReport(k, not violations, float(lower), float(mus[k]), tuple(violations))
