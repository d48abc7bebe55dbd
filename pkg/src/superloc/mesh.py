"""Nested uniform Cartesian meshes on the unit cube, patches and hat functions.

All lattice entities use lexicographic indexing with the first coordinate
running fastest. Patches on Cartesian meshes are always axis-aligned boxes
of coarse elements, which is what every routine below relies on.
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass
from functools import cached_property

import numpy as np


def lattice_index(coords, shape):
    """Linear index of integer coordinates in a lattice (x fastest)."""
    coords = np.asarray(coords)
    idx = np.zeros(coords.shape[:-1], dtype=np.int64) if coords.ndim > 1 else 0
    stride = 1
    for k, n in enumerate(shape):
        idx = idx + coords[..., k] * stride
        stride *= n
    return idx


def lattice_coords(index, shape):
    """Inverse of :func:`lattice_index`."""
    index = np.asarray(index, dtype=np.int64)
    out = []
    for n in shape:
        out.append(index % n)
        index = index // n
    return np.stack(out, axis=-1)


def box_indices(lo, hi, shape):
    """Linear indices of all lattice points in the box lo <= c < hi."""
    axes = [np.arange(a, b) for a, b in zip(lo, hi)]
    grids = np.meshgrid(*axes[::-1], indexing="ij")[::-1]
    coords = np.stack([g.ravel() for g in grids], axis=-1)
    return lattice_index(coords, shape)


@dataclass(frozen=True)
class CoarseMesh:
    d: int
    nH: int

    def __post_init__(self):
        if self.d not in (2, 3):
            raise ValueError(f"dimension must be 2 or 3, got {self.d}")
        if self.nH < 2:
            raise ValueError("nH must be at least 2, otherwise every patch is the whole domain")

    @property
    def H(self) -> float:
        return 1.0 / self.nH

    @property
    def element_shape(self):
        return (self.nH,) * self.d

    @property
    def node_shape(self):
        return (self.nH + 1,) * self.d

    @property
    def n_elements(self) -> int:
        return self.nH**self.d

    @property
    def n_nodes(self) -> int:
        return (self.nH + 1) ** self.d

    def element_coords(self, T):
        return tuple(int(c) for c in lattice_coords(T, self.element_shape))

    def node_coords(self, z):
        return tuple(int(c) for c in lattice_coords(z, self.node_shape))

    def element_index(self, coords) -> int:
        return int(lattice_index(coords, self.element_shape))

    def node_index(self, coords) -> int:
        return int(lattice_index(coords, self.node_shape))

    def is_boundary_node(self, z) -> bool:
        return any(c in (0, self.nH) for c in self.node_coords(z))


def build_coarse(d: int, nH: int) -> CoarseMesh:
    return CoarseMesh(d, nH)


@dataclass(frozen=True)
class FineMesh:
    coarse: CoarseMesh
    r: int

    def __post_init__(self):
        if self.r < 2 or self.r & (self.r - 1):
            raise ValueError(f"refinement factor must be a power of 2 and >= 2, got {self.r}")

    @property
    def d(self) -> int:
        return self.coarse.d

    @property
    def nf(self) -> int:
        """Fine elements per axis."""
        return self.coarse.nH * self.r

    @property
    def h(self) -> float:
        return 1.0 / self.nf

    @property
    def node_shape(self):
        return (self.nf + 1,) * self.d

    @property
    def element_shape(self):
        return (self.nf,) * self.d

    @property
    def n_nodes(self) -> int:
        return (self.nf + 1) ** self.d

    @property
    def n_elements(self) -> int:
        return self.nf**self.d

    @property
    def n_dofs(self) -> int:
        """Number of free (non-Dirichlet) fine nodes, i.e. the FineVector length."""
        return (self.nf - 1) ** self.d

    @cached_property
    def free_nodes(self) -> np.ndarray:
        """Full-lattice indices of the free nodes, in FineVector order."""
        return box_indices((1,) * self.d, (self.nf,) * self.d, self.node_shape)

    @cached_property
    def dirichlet_mask(self) -> np.ndarray:
        mask = np.ones(self.n_nodes, dtype=bool)
        mask[self.free_nodes] = False
        return mask

    def node_to_dof(self, coords):
        """FineVector index of fine node coordinates; -1 for nodes on the boundary."""
        coords = np.asarray(coords)
        inside = np.all((coords > 0) & (coords < self.nf), axis=-1)
        idx = lattice_index(coords - 1, (self.nf - 1,) * self.d)
        return np.where(inside, idx, -1)

    def restrict(self, full: np.ndarray) -> np.ndarray:
        """Drop boundary nodes from a full nodal vector."""
        return np.asarray(full)[self.free_nodes]

    def extend(self, v: np.ndarray) -> np.ndarray:
        """Full nodal vector from a FineVector (zeros on the boundary)."""
        full = np.zeros(self.n_nodes)
        full[self.free_nodes] = v
        return full

    def node_points(self) -> np.ndarray:
        coords = lattice_coords(np.arange(self.n_nodes), self.node_shape)
        return coords * self.h

    def coarse_to_fine(self, T) -> np.ndarray:
        """Fine element indices inside coarse element T."""
        c = np.array(self.coarse.element_coords(T))
        return box_indices(c * self.r, (c + 1) * self.r, self.element_shape)


def refine(mesh: CoarseMesh, r: int) -> FineMesh:
    return FineMesh(mesh, r)


@dataclass(frozen=True)
class Patch:
    """Box of coarse elements ``lo <= t < hi`` grown ``order`` times from a seed."""

    coarse: CoarseMesh
    kind: str  # "node" or "element"
    seed: int
    order: int
    lo: tuple
    hi: tuple

    @cached_property
    def elements(self) -> np.ndarray:
        return box_indices(self.lo, self.hi, self.coarse.element_shape)

    @property
    def n_elements(self) -> int:
        return int(np.prod(np.subtract(self.hi, self.lo)))

    @property
    def covers_domain(self) -> bool:
        return all(a == 0 and b == self.coarse.nH for a, b in zip(self.lo, self.hi))

    def contains(self, other: "Patch") -> bool:
        return all(a <= c and d <= b for a, b, c, d in zip(self.lo, self.hi, other.lo, other.hi))

    def fine_box(self, fine: FineMesh):
        """Fine node lattice box [lo, hi] (inclusive) covered by the patch."""
        lo = tuple(a * fine.r for a in self.lo)
        hi = tuple(b * fine.r for b in self.hi)
        return lo, hi

    def local_node_coords(self, fine: FineMesh) -> np.ndarray:
        """Global fine node coordinates of all box nodes, local lexicographic order."""
        lo, hi = self.fine_box(fine)
        shape = tuple(b - a + 1 for a, b in zip(lo, hi))
        return lattice_coords(np.arange(int(np.prod(shape))), shape) + np.array(lo)

    def classify_nodes(self, fine: FineMesh):
        """Local node index sets (interior, patch boundary off dOmega).

        Nodes on dOmega belong to neither set.
        """
        lo, hi = self.fine_box(fine)
        coords = self.local_node_coords(fine)
        on_box = np.any((coords == np.array(lo)) | (coords == np.array(hi)), axis=1)
        on_domain = np.any((coords == 0) | (coords == fine.nf), axis=1)
        interior = np.flatnonzero(~on_box)
        boundary = np.flatnonzero(on_box & ~on_domain)
        return interior, boundary

    def interior_dofs(self, fine: FineMesh) -> np.ndarray:
        interior, _ = self.classify_nodes(fine)
        return fine.node_to_dof(self.local_node_coords(fine)[interior])

    def boundary_dofs(self, fine: FineMesh) -> np.ndarray:
        _, boundary = self.classify_nodes(fine)
        return fine.node_to_dof(self.local_node_coords(fine)[boundary])


def _grow(mesh: CoarseMesh, lo, hi, order):
    lo = np.array(lo)
    hi = np.array(hi)
    for _ in range(order):
        lo = np.maximum(lo - 1, 0)
        hi = np.minimum(hi + 1, mesh.nH)
    return tuple(int(a) for a in lo), tuple(int(b) for b in hi)


def element_patch(mesh: CoarseMesh, T: int, order: int) -> Patch:
    if order < 0:
        raise ValueError("patch order must be nonnegative")
    c = np.array(mesh.element_coords(T))
    lo, hi = _grow(mesh, c, c + 1, order)
    return Patch(mesh, "element", int(T), order, lo, hi)


def node_patch(mesh: CoarseMesh, z: int, order: int) -> Patch:
    if order < 0:
        raise ValueError("patch order must be nonnegative")
    c = np.array(mesh.node_coords(z))
    lo = np.maximum(c - 1, 0)
    hi = np.minimum(c + 1, mesh.nH)
    lo, hi = _grow(mesh, lo, hi, order)
    return Patch(mesh, "node", int(z), order, lo, hi)


def hat_1d(fine_idx, coarse_idx, r):
    """Coarse hat centred at coarse node ``coarse_idx`` evaluated at fine nodes."""
    return np.clip(1.0 - np.abs(np.asarray(fine_idx) - coarse_idx * r) / r, 0.0, None)


def hat_at(fine: FineMesh, z: int, coords) -> np.ndarray:
    """Values of the coarse hat function of node z at fine node coordinates."""
    zc = fine.coarse.node_coords(z)
    coords = np.asarray(coords)
    out = np.ones(coords.shape[0])
    for k in range(fine.d):
        out *= hat_1d(coords[:, k], zc[k], fine.r)
    return out


def hat_values(fine: FineMesh, z: int) -> np.ndarray:
    """Nodal values of the hat function of z at every fine node (full lattice)."""
    coords = lattice_coords(np.arange(fine.n_nodes), fine.node_shape)
    return hat_at(fine, z, coords)


def overlap_constant(mesh: CoarseMesh) -> int:
    """Maximal number of hat supports containing one element."""
    best = 0
    for T in range(mesh.n_elements):
        tc = np.array(mesh.element_coords(T))
        count = 0
        for offs in itertools.product((-1, 0, 1, 2), repeat=mesh.d):
            zc = tc + np.array(offs)
            if np.any(zc < 0) or np.any(zc > mesh.nH):
                continue
            # omega_z is the box [zc-1, zc+1] of elements
            if np.all(tc >= zc - 1) and np.all(tc + 1 <= zc + 1):
                count += 1
        best = max(best, count)
    return best
