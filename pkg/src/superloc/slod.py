"""Super-localized orthogonal decomposition (baseline comparator).

For each coarse element T with patch omega = N^l(T), the discrete A-harmonic
functions on omega are spanned by the harmonic extensions of the fine
boundary hats on d(omega) minus dOmega. The L2 projection restricted to that
space is decomposed by an SVD with respect to the H^1(omega) norm; the left
singular vectors of the J smallest singular values become the source terms
g_{T,j}, and the localized basis functions solve patch problems with those
sources.

Patches touching dOmega need care: taken verbatim, their smallest singular
vectors pile up at the boundary and the global source set becomes numerically
dependent. The default ``stabilized`` selection caps such patches at the worst
interior sigma instead (see :func:`capped_sources`).
"""
from __future__ import annotations

import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp

from . import fem, poly
from .mesh import FineMesh, Patch, element_patch

log = logging.getLogger(__name__)

ZERO_SIGMA = 1e-14


@dataclass
class HarmonicSpaceData:
    element: int
    patch: Patch
    solver: fem.PatchSolver
    moments: np.ndarray  # (box nodes, K) poly moments against fine hats
    extension: np.ndarray  # (n_interior, n_boundary) interior values of the extensions
    M: np.ndarray  # (K, n_boundary) poly coefficients of the projected extensions
    G: np.ndarray  # (n_boundary, n_boundary) H^1(omega) Gram matrix

    @property
    def K(self) -> int:
        return self.M.shape[0]

    @property
    def n_boundary(self) -> int:
        return self.M.shape[1]

    def extend(self, boundary_values: np.ndarray) -> np.ndarray:
        """Harmonic extension as a global FineVector (zero outside the patch)."""
        s = self.solver
        u = np.zeros(s.fine.n_dofs)
        u[s.interior_dofs] = self.extension @ boundary_values
        u[s.boundary_dofs] = boundary_values
        return u


@dataclass
class SlodPatchData:
    element: int
    patch: Patch
    sigmas: np.ndarray  # descending, length K
    sources: np.ndarray  # (K, J) coefficients on the patch poly dofs, L2-orthonormal
    psi: np.ndarray  # (n_interior, J) localized basis on the patch interior nodes
    interior_dofs: np.ndarray
    poly_dofs: np.ndarray  # global PolySpace dofs of the patch elements
    sigma_T: float = np.nan  # sup over unit harmonic y of |(g_j, y)|, j = 1..J
    flagged: bool = False
    seconds: float = 0.0
    patch_solves: int = 0

    @property
    def sigma(self) -> float:
        return self.sigma_T


def h1_box(solver: fem.PatchSolver) -> sp.csr_matrix:
    """Unweighted H^1 inner product (mass + unit stiffness) on the patch box nodes."""
    fine = solver.fine
    ones = np.ones(int(np.prod(solver.shape)))
    return fem.assemble_box(solver.shape, fine.h, ones, fem.local_mass(fine.h) + fem.local_stiffness(fine.h))


def harmonic_space(fine: FineMesh, A: fem.CoefficientField, T: int, ell: int, p: int) -> HarmonicSpaceData:
    patch = element_patch(fine.coarse, T, ell)
    if patch.covers_domain:
        raise ValueError(f"patch of element {T} with l={ell} is the whole domain")
    solver = fem.PatchSolver(fine, A, patch)
    I, B = solver.interior, solver.boundary
    K_ib = solver.K[I][:, B].toarray()
    X = -solver.solve_local(K_ib).reshape(I.size, B.size)
    space = poly.PolySpace(fine.coarse, p)
    mom = poly.patch_moments(space, fine, patch)
    M = mom[I].T @ X + mom[B].T
    nodes = np.concatenate([I, B])
    H1 = h1_box(solver)[nodes][:, nodes]
    Xf = np.vstack([X, np.eye(B.size)])
    G = Xf.T @ (H1 @ Xf)
    return HarmonicSpaceData(T, patch, solver, mom, X, M, 0.5 * (G + G.T))


def weighted_projection(hs: HarmonicSpaceData) -> np.ndarray:
    """M L^{-T} with G = L L^T: the projection in H^1-orthonormal boundary coordinates."""
    L = sla.cholesky(hs.G, lower=True)
    return sla.solve_triangular(L, hs.M.T, lower=True).T


def svd_sources(hs: HarmonicSpaceData, J: int):
    """Singular values (descending, length K) and the J sources of the smallest ones.

    The thin SVD of the K x n_boundary matrix M L^{-T} gives the same singular
    triplets as the K x K eigenproblem for M G^{-1} M^T without squaring the
    small singular values. Missing singular values (K > n_boundary) are zero.
    """
    W = weighted_projection(hs)
    U, s, _ = sla.svd(W, full_matrices=True)
    K = hs.K
    sig = np.zeros(K)
    sig[: s.size] = s
    sources = U[:, K - J:]
    sigma_T = sig[K - J]
    flagged = bool(sigma_T < ZERO_SIGMA)
    if flagged:
        log.info("element %d: selected singular value %.1e is numerically zero", hs.element, sigma_T)
    if K > J and np.isclose(sig[K - J - 1], sigma_T, rtol=1e-8, atol=0.0):
        flagged = True
        log.info("element %d: multiple singular value at the selection cut", hs.element)
    return sig, sources, flagged


def touches_boundary(patch: Patch) -> bool:
    return min(patch.lo) == 0 or max(patch.hi) == patch.coarse.nH


def capped_sources(hs: HarmonicSpaceData, J: int, cap: float):
    """Sources for a patch touching dOmega, limited to singular values <= cap.

    Near dOmega the smallest singular vectors concentrate at the boundary and
    are shared between neighbouring patches, which makes the global source set
    linearly dependent. Here the J sources are taken from the span of all left
    singular vectors with sigma_k <= cap (at least the J smallest), choosing
    the J-dimensional subspace closest to the polynomials of the element
    itself. Returns (singular values, sources, achieved sigma_T).
    """
    W = weighted_projection(hs)
    U, s, _ = sla.svd(W, full_matrices=True)
    K = hs.K
    sig = np.zeros(K)
    sig[: s.size] = s
    m = max(J, int(np.count_nonzero(sig <= cap)))
    Q = U[:, K - m:]
    loc = int(np.flatnonzero(hs.patch.elements == hs.element)[0])
    E = np.zeros((K, J))
    E[loc * J:(loc + 1) * J] = np.eye(J)
    sources, _ = np.linalg.qr(Q @ (Q.T @ E))
    sigma_T = float(np.linalg.norm(sources.T @ W, 2))
    return sig, sources, sigma_T


def localized_basis(hs: HarmonicSpaceData, sources: np.ndarray) -> np.ndarray:
    """Patch solutions with the selected sources, on the patch interior nodes."""
    loads = hs.moments[hs.solver.interior] @ sources
    return hs.solver.solve_local(loads).reshape(loads.shape)


def element_data(fine: FineMesh, A: fem.CoefficientField, T: int, ell: int, p: int, cap=None) -> SlodPatchData:
    """Sources and localized basis of element T.

    With ``cap=None`` the J smallest singular vectors are used; otherwise, for
    patches touching dOmega, :func:`capped_sources` with that cap.
    """
    t0 = time.perf_counter()
    hs = harmonic_space(fine, A, T, ell, p)
    J = (p + 1) ** fine.d
    if cap is not None and touches_boundary(hs.patch):
        sig, sources, sigma_T = capped_sources(hs, J, cap)
        flagged = False
    else:
        sig, sources, flagged = svd_sources(hs, J)
        sigma_T = float(sig[sig.size - J])
    psi = localized_basis(hs, sources)
    space = poly.PolySpace(fine.coarse, p)
    return SlodPatchData(
        element=T,
        patch=hs.patch,
        sigmas=sig,
        sources=sources,
        psi=psi,
        interior_dofs=hs.solver.interior_dofs,
        poly_dofs=space.element_dofs(hs.patch.elements),
        sigma_T=sigma_T,
        flagged=flagged,
        seconds=time.perf_counter() - t0,
        patch_solves=hs.solver.n_solves,
    )


SELECTIONS = ("stabilized", "verbatim")


def build_slod(fine: FineMesh, A: fem.CoefficientField, ell: int, p: int, threads: int = 1,
               selection: str = "stabilized") -> list:
    """Per-element SLOD data in element order.

    ``verbatim`` uses the J smallest singular vectors on every patch.
    ``stabilized`` does so on patches away from dOmega and caps patches
    touching dOmega at the largest interior sigma_T (see :func:`capped_sources`);
    without interior patches it falls back to ``verbatim``.
    """
    if selection not in SELECTIONS:
        raise ValueError(f"unknown source selection {selection!r}")

    def run(elements, cap=None):
        if threads > 1:
            with ThreadPoolExecutor(threads) as pool:
                return list(pool.map(lambda T: element_data(fine, A, T, ell, p, cap), elements))
        return [element_data(fine, A, T, ell, p, cap) for T in elements]

    elements = list(range(fine.coarse.n_elements))
    if selection == "verbatim":
        return run(elements)
    inner = [T for T in elements if not touches_boundary(element_patch(fine.coarse, T, ell))]
    if not inner:
        log.warning("no interior patches for l=%d; using verbatim source selection", ell)
        return run(elements)
    outer = [T for T in elements if T not in set(inner)]
    first = run(inner)
    cap = max(d.sigma_T for d in first)
    out = {d.element: d for d in first}
    out.update({d.element: d for d in run(outer, cap)})
    return [out[T] for T in elements]


def sigma_global(datas) -> float:
    return max(d.sigma for d in datas)


def source_matrix(space: poly.PolySpace, datas) -> sp.csc_matrix:
    """Global poly coefficients of all sources, one column per (T, j)."""
    rows, cols, vals = [], [], []
    J = space.J
    for k, d in enumerate(datas):
        Kp = d.poly_dofs.size
        rows.append(np.repeat(d.poly_dofs, J))
        cols.append(np.tile(np.arange(k * J, (k + 1) * J), Kp))
        vals.append(d.sources.ravel())
    return sp.csc_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(space.dim, len(datas) * J)
    )


def riesz_bounds(space: poly.PolySpace, datas):
    """Extreme eigenvalues of the L2 Gram matrix C^T C of all sources.

    Computed as squared extreme singular values of C, which resolves lower
    bounds far below the rounding level of the Gram matrix itself.
    """
    C = source_matrix(space, datas)
    s = sla.svd(C.toarray(), compute_uv=False)
    return float(s[-1] ** 2), float(s[0] ** 2)


def basis_matrix(fine: FineMesh, datas) -> sp.csc_matrix:
    rows, cols, vals = [], [], []
    offset = 0
    for d in datas:
        J = d.psi.shape[1]
        rows.append(np.repeat(d.interior_dofs, J))
        cols.append(np.tile(np.arange(offset, offset + J), d.interior_dofs.size))
        vals.append(d.psi.ravel())
        offset += J
    return sp.csc_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(fine.n_dofs, offset)
    )


def slod_solve(fine: FineMesh, K, load: np.ndarray, datas) -> fem.GalerkinSolution:
    """Galerkin solve in span{psi_{T,j}}."""
    return fem.galerkin_solve(K, basis_matrix(fine, datas), load)


def collocation_solve(fine: FineMesh, space: poly.PolySpace, datas, f_coeffs: np.ndarray) -> np.ndarray:
    """Diagnostic variant: coefficients c with sum c_{T,j} g_{T,j} = Pi_H f, then u = sum c psi."""
    C = source_matrix(space, datas).toarray()
    c = np.linalg.solve(C, np.asarray(f_coeffs).ravel())
    return basis_matrix(fine, datas) @ c
