"""Super-localized generalized finite elements.

For every coarse node z the snapshot space consists of patch solutions
A^{-1}_{omega_z^l} q for all piecewise polynomials q on the oversampling patch.
A generalized eigenproblem between the energy of the hat-weighted snapshots on
supp(Lambda_z) and their energy on the patch selects the n modes that best
approximate Lambda_z times the snapshot space. The hat-weighted modes of all
nodes are glued into one conforming ansatz space for a Galerkin solve.
"""
from __future__ import annotations

import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from . import fem, poly
from .mesh import FineMesh, Patch, hat_at, node_patch

log = logging.getLogger(__name__)

RANK_TOL = 1e-12  # relative, on eigenvalues of the snapshot energy Gram matrix
MODE_TOL = 1e-14  # relative, on singular values of the hat-weighted modes (rounding floor)


@dataclass
class SnapshotSpace:
    node: int
    ell: int
    patch: Patch
    solver: fem.PatchSolver
    vectors: np.ndarray  # (n_interior, N) on the patch interior nodes
    gram: np.ndarray  # (N, N) patch energy inner products

    @property
    def N(self) -> int:
        return self.vectors.shape[1]


@dataclass
class SpectralBasis:
    node: int
    eigenvalues: np.ndarray  # descending, length N'
    coords: np.ndarray  # (N, N') eigenvectors in snapshot coordinates
    dofs: np.ndarray  # global FineVector indices where the hat is positive
    vectors: np.ndarray  # (len(dofs), N') hat-weighted eigenfunctions
    n_snapshots: int = 0
    seconds: float = 0.0
    patch_solves: int = 0

    @property
    def rank(self) -> int:
        return self.eigenvalues.size

    def retained(self, n: int) -> np.ndarray:
        return self.vectors[:, : min(n, self.rank)]


def snapshots(fine: FineMesh, A: fem.CoefficientField, z: int, ell: int, p: int) -> SnapshotSpace:
    patch = node_patch(fine.coarse, z, ell)
    solver = fem.PatchSolver(fine, A, patch)
    space = poly.PolySpace(fine.coarse, p)
    loads = poly.patch_moments(space, fine, patch)[solver.interior]
    V = solver.solve_local(loads)
    V = V.reshape(solver.n_interior, -1)
    G = V.T @ loads  # = V^T K V since K V = loads
    return SnapshotSpace(z, ell, patch, solver, V, 0.5 * (G + G.T))


def local_evp(s: SnapshotSpace, hat: np.ndarray) -> SpectralBasis:
    """Eigenpairs of a_{omega_z}(hat v, hat w) = lambda a_{patch}(v, w) on the snapshot space.

    ``hat`` holds the hat values at the patch interior nodes. Both energies are
    handled through the element-wise factor R (R^T R = K_ii) and SVDs instead
    of Gram matrices, so small eigenvalues keep their accuracy relative to the
    largest singular value rather than to its square. Snapshot directions with
    Gram eigenvalue (squared singular value) below RANK_TOL times the largest
    are dropped, as are modes with singular value below MODE_TOL times the
    largest: those sit at the rounding floor and carry no direction.
    """
    R = s.solver.energy_factor
    _, sv, Zt = np.linalg.svd(R @ s.vectors, full_matrices=False)
    if sv.size == 0 or sv[0] <= 0:
        raise fem.NumericalFailure(f"snapshot space of node {s.node} is numerically empty")
    keep = sv**2 > RANK_TOL * sv[0] ** 2
    W = Zt[keep].T / sv[keep]  # energy-orthonormal snapshot coordinates
    HV = hat[:, None] * (s.vectors @ W)
    _, sig, Yt = np.linalg.svd(R @ HV, full_matrices=False)
    good = sig > MODE_TOL * sig[0]
    sig, Y = sig[good], Yt[good].T
    support = np.flatnonzero(hat > 0)
    return SpectralBasis(
        node=s.node,
        eigenvalues=sig**2,
        coords=W @ Y,
        dofs=s.solver.interior_dofs[support],
        vectors=HV[support] @ Y,
        n_snapshots=s.N,
    )


def n_width_estimate(basis: SpectralBasis, n: int) -> float:
    """sqrt(lambda_{n+1}): worst-case error of the n retained modes within the snapshot model."""
    if n >= basis.rank:
        return 0.0
    return float(np.sqrt(basis.eigenvalues[n]))


def node_basis(fine: FineMesh, A: fem.CoefficientField, z: int, ell: int, p: int) -> SpectralBasis:
    t0 = time.perf_counter()
    s = snapshots(fine, A, z, ell, p)
    hat = hat_at(fine, z, s.solver.node_coords[s.solver.interior])
    b = local_evp(s, hat)
    b.patch_solves = s.solver.n_solves
    b.seconds = time.perf_counter() - t0
    return b


def build_bases(fine: FineMesh, A: fem.CoefficientField, ell: int, p: int, threads: int = 1) -> list:
    """Spectral bases of every coarse node, in node order."""
    nodes = range(fine.coarse.n_nodes)
    if threads > 1:
        with ThreadPoolExecutor(threads) as pool:
            return list(pool.map(lambda z: node_basis(fine, A, z, ell, p), nodes))
    return [node_basis(fine, A, z, ell, p) for z in nodes]


def glued_basis(fine: FineMesh, bases, n: int) -> sp.csc_matrix:
    """Sparse FineVector columns of all retained hat-weighted modes, node by node.

    Each column is scaled to unit energy (retained singular values are positive).
    """
    rows, cols, vals = [], [], []
    offset = 0
    for b in bases:
        m = min(n, b.rank)
        block = b.vectors[:, :m] / np.sqrt(b.eigenvalues[:m])
        rows.append(np.repeat(b.dofs, m))
        cols.append(np.tile(np.arange(offset, offset + m), b.dofs.size))
        vals.append(block.ravel())
        offset += m
    return sp.csc_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(fine.n_dofs, offset)
    )


@dataclass
class GlobalAnsatz:
    n: int
    solution: fem.GalerkinSolution
    counts: list = field(default_factory=list)

    @property
    def u(self) -> np.ndarray:
        return self.solution.u

    @property
    def basis(self):
        return self.solution.basis

    @property
    def dim(self) -> int:
        return self.solution.basis.shape[1]


def assemble_and_solve(fine: FineMesh, K, load: np.ndarray, bases, n: int) -> GlobalAnsatz:
    """Galerkin solve in the glued space; K is the eliminated fine stiffness."""
    Phi = glued_basis(fine, bases, n)
    sol = fem.galerkin_solve(K, Phi, load)
    return GlobalAnsatz(n, sol, [min(n, b.rank) for b in bases])


def solve(fine: FineMesh, A: fem.CoefficientField, load: np.ndarray, ell: int, n: int, p: int = 0, threads: int = 1):
    """Convenience wrapper: build all node bases and solve."""
    K = fem.stiffness(fine, A)
    bases = build_bases(fine, A, ell, p, threads)
    return assemble_and_solve(fine, K, load, bases, n)
