"""Cell-centred finite-difference meshes for the unit ball (radial) and boxes.

Both domain kinds use cell-centred unknowns with the Dirichlet face sitting
half a cell beyond the outermost nodes. Boundary values enter through a
ghost-node reflection, so the eliminated stencil entry of a boundary face is
twice the interior face coefficient.

The radial ball is reduced to the 1-D finite-volume scheme for
``-(r^2 u')' / r^2``: node ``j`` sits at ``r_j = (j - 1/2) h`` with shell
weight ``4 pi r_j^2 h`` and faces at ``r = j h`` carrying area ``4 pi r^2``.
The face at ``r = 0`` has zero area, which encodes regularity at the centre.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum
from functools import cached_property

import numpy as np
import scipy.sparse as sp

from .errors import ConfigError


class DomainKind(str, Enum):
    RADIAL_BALL = "RadialBall3D"
    BOX = "Box3D"


@dataclass(frozen=True)
class DomainSpec:
    """What to discretize. ``resolution`` counts nodes per axis (radial: shells)."""

    kind: DomainKind
    resolution: int
    box_lengths: tuple[float, float, float] = (1.0, 1.0, 1.0)
    dimension_n: int = 3

    def __post_init__(self) -> None:
        object.__setattr__(self, "kind", DomainKind(self.kind))
        object.__setattr__(self, "box_lengths", tuple(float(x) for x in self.box_lengths))

    @property
    def critical_exponent(self) -> float:
        n = self.dimension_n
        return 2.0 * n / (n - 2.0)


@dataclass(frozen=True)
class BoundaryLinks:
    """Eliminated stencil entries: node ``node[j]`` couples to the boundary
    point ``point[j]`` with coefficient ``coeff[j]``."""

    node: np.ndarray
    coeff: np.ndarray
    point: np.ndarray

    def fold(self, boundary_values: np.ndarray, size: int) -> np.ndarray:
        """Right-hand-side contribution of Dirichlet data sampled at ``point``."""
        return np.bincount(self.node, weights=self.coeff * boundary_values, minlength=size)


@dataclass(frozen=True, eq=False)
class MeshedDomain:
    spec: DomainSpec
    nodes: np.ndarray
    quad_weights: np.ndarray
    stiffness: sp.csr_matrix
    boundary_distance: np.ndarray
    boundary: BoundaryLinks
    cell_size: tuple[float, ...]
    grid_shape: tuple[int, ...]
    _cache: dict = field(default_factory=dict, repr=False)

    @property
    def kind(self) -> DomainKind:
        return self.spec.kind

    @property
    def is_radial(self) -> bool:
        return self.spec.kind is DomainKind.RADIAL_BALL

    @property
    def size(self) -> int:
        return self.quad_weights.size

    @property
    def critical_exponent(self) -> float:
        return self.spec.critical_exponent

    @property
    def weight_exponent(self) -> float:
        """2* - 2, the power of u in the weighted mass form."""
        return self.spec.critical_exponent - 2.0

    @cached_property
    def lumped_mass(self) -> sp.dia_matrix:
        return sp.diags(self.quad_weights).tocsr()

    @cached_property
    def volume(self) -> float:
        return float(self.quad_weights.sum())

    @cached_property
    def cell_measure(self) -> float:
        """Smallest cell measure, used for the probe margin and singular quadrature."""
        return float(self.quad_weights.min())

    @cached_property
    def radii(self) -> np.ndarray:
        """Distance of each node from the origin (radial) or the box centre."""
        if self.is_radial:
            return self.nodes[:, 0].copy()
        centre = 0.5 * np.asarray(self.spec.box_lengths)
        return np.linalg.norm(self.nodes - centre, axis=1)

    @cached_property
    def edges(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Upper-triangular stiffness couplings ``(i, j, -A_ij)`` with ``i < j``."""
        upper = sp.triu(self.stiffness, k=1).tocoo()
        return upper.row, upper.col, -upper.data

    def check_node_function(self, f: np.ndarray, name: str = "f") -> np.ndarray:
        f = np.asarray(f, dtype=float)
        if f.shape != (self.size,):
            raise ValueError(f"{name} must have shape ({self.size},), got {f.shape}")
        if not np.all(np.isfinite(f)):
            raise ValueError(f"{name} contains non-finite values")
        return f


def build_mesh(spec: DomainSpec) -> MeshedDomain:
    if spec.dimension_n != 3:
        raise ConfigError("built-in domains are three-dimensional (dimension_n = 3)")
    if int(spec.resolution) != spec.resolution or spec.resolution < 8:
        raise ConfigError(f"resolution must be an integer >= 8, got {spec.resolution}")
    if spec.kind is DomainKind.RADIAL_BALL:
        return _radial_ball(spec)
    if len(spec.box_lengths) != 3 or any(not np.isfinite(x) or x <= 0 for x in spec.box_lengths):
        raise ConfigError(f"box lengths must be three positive reals, got {spec.box_lengths}")
    return _box(spec)


def _radial_ball(spec: DomainSpec) -> MeshedDomain:
    n = int(spec.resolution)
    h = 1.0 / n
    r = (np.arange(n) + 0.5) * h
    weights = 4.0 * np.pi * r**2 * h
    faces = np.arange(1, n) * h  # interior faces between node j-1 and j
    coupling = 4.0 * np.pi * faces**2 / h
    outer = 2.0 * 4.0 * np.pi / h  # ghost reflection at r = 1

    diag = np.zeros(n)
    diag[:-1] += coupling
    diag[1:] += coupling
    diag[-1] += outer
    stiffness = sp.diags([-coupling, diag, -coupling], [-1, 0, 1], format="csr")

    boundary = BoundaryLinks(
        node=np.array([n - 1]),
        coeff=np.array([outer]),
        point=np.array([[1.0]]),
    )
    return MeshedDomain(
        spec=spec,
        nodes=r[:, None],
        quad_weights=weights,
        stiffness=stiffness,
        boundary_distance=1.0 - r,
        boundary=boundary,
        cell_size=(h,),
        grid_shape=(n,),
    )


def _laplacian_1d(n: int, h: float) -> sp.csr_matrix:
    main = np.full(n, 2.0)
    main[0] = main[-1] = 3.0  # ghost reflection at both faces
    off = -np.ones(n - 1)
    return sp.diags([off, main, off], [-1, 0, 1], format="csr") / h**2


def _box(spec: DomainSpec) -> MeshedDomain:
    n = int(spec.resolution)
    lengths = np.asarray(spec.box_lengths)
    h = lengths / n
    cell = float(np.prod(h))
    axes = [(np.arange(n) + 0.5) * hx for hx in h]
    grid = np.meshgrid(*axes, indexing="ij")
    nodes = np.stack([g.ravel() for g in grid], axis=1)

    eye = sp.identity(n, format="csr")
    lap = [_laplacian_1d(n, hx) for hx in h]
    stiffness = cell * (
        sp.kron(sp.kron(lap[0], eye), eye)
        + sp.kron(sp.kron(eye, lap[1]), eye)
        + sp.kron(sp.kron(eye, eye), lap[2])
    )
    stiffness = stiffness.tocsr()

    index = np.arange(n**3).reshape(n, n, n)
    link_nodes, link_coeff, link_points = [], [], []
    for axis in range(3):
        coeff = 2.0 * cell / h[axis] ** 2
        for side, face in ((0, 0.0), (n - 1, lengths[axis])):
            sel = np.take(index, side, axis=axis).ravel()
            pts = nodes[sel].copy()
            pts[:, axis] = face
            link_nodes.append(sel)
            link_coeff.append(np.full(sel.size, coeff))
            link_points.append(pts)
    boundary = BoundaryLinks(
        node=np.concatenate(link_nodes),
        coeff=np.concatenate(link_coeff),
        point=np.concatenate(link_points),
    )
    distance = np.min(np.concatenate([nodes, lengths - nodes], axis=1), axis=1)
    return MeshedDomain(
        spec=spec,
        nodes=nodes,
        quad_weights=np.full(n**3, cell),
        stiffness=stiffness,
        boundary_distance=distance,
        boundary=boundary,
        cell_size=tuple(float(x) for x in h),
        grid_shape=(n, n, n),
    )


def lp_norm(mesh: MeshedDomain, f: np.ndarray, p: float) -> float:
    if not p >= 1:
        raise ValueError(f"p must be >= 1, got {p}")
    f = mesh.check_node_function(f)
    return float(np.sum(mesh.quad_weights * np.abs(f) ** p) ** (1.0 / p))
