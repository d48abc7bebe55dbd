"""Element-wise orthonormal Legendre spaces and the L2 projection onto them.

On every coarse element T of side H the basis is

    Theta_{T,(a,b)}(x) = sqrt((2a+1)(2b+1)) / H * L_a(xi_1) L_b(xi_2),

with L_k the Legendre polynomials and xi the affine map of T onto [-1, 1]^2.
Basis index j = a + (p+1) b. Because the basis is L2(T)-orthonormal the
projection is a plain quadrature sum, and because the mesh is uniform the
fine-node integrals of Theta against Q1 hats are the same matrix for every
coarse element.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
from numpy.polynomial import legendre as npleg

from .fem import gauss_points
from .mesh import CoarseMesh, FineMesh, lattice_coords

MAX_DEGREE = 4


def legendre_1d(p: int, t: np.ndarray) -> np.ndarray:
    """L2(0,1)-orthonormal shifted Legendre polynomials of degree 0..p at t in [0,1].

    Returns an array of shape t.shape + (p+1,).
    """
    t = np.asarray(t, dtype=float)
    xi = 2.0 * t - 1.0
    out = np.empty(t.shape + (p + 1,))
    for k in range(p + 1):
        c = np.zeros(k + 1)
        c[k] = 1.0
        out[..., k] = np.sqrt(2 * k + 1) * npleg.legval(xi, c)
    return out


def hat_moments_1d(r: int, p: int) -> np.ndarray:
    """Integrals over [0,1] of fine hats (r cells) against orthonormal Legendre polys.

    Shape (r+1, p+1). Exact: Gauss with ceil((p+2)/2) points per fine cell.
    """
    npts = (p + 3) // 2
    xq, wq = gauss_points(npts, 0.0, 1.0 / r)
    out = np.zeros((r + 1, p + 1))
    for c in range(r):
        t = c / r + xq
        leg = legendre_1d(p, t)  # (npts, p+1)
        left = 1.0 - xq * r
        right = xq * r
        out[c] += (wq * left) @ leg
        out[c + 1] += (wq * right) @ leg
    return out


@dataclass(frozen=True)
class PolySpace:
    coarse: CoarseMesh
    p: int

    def __post_init__(self):
        if not 0 <= self.p <= MAX_DEGREE:
            raise ValueError(f"polynomial degree must be in [0, {MAX_DEGREE}], got {self.p}")
        if self.coarse.d != 2:
            raise NotImplementedError("polynomial spaces are implemented for d=2 only")

    @property
    def J(self) -> int:
        return (self.p + 1) ** self.coarse.d

    @property
    def dim(self) -> int:
        return self.J * self.coarse.n_elements

    def dof(self, T, j):
        return np.asarray(T) * self.J + np.asarray(j)

    def element_dofs(self, elements) -> np.ndarray:
        elements = np.asarray(elements)
        return (elements[:, None] * self.J + np.arange(self.J)[None, :]).ravel()

    def evaluate(self, coeffs: np.ndarray, x: np.ndarray) -> np.ndarray:
        """Evaluate a piecewise polynomial (coeffs shape (n_elements, J)) at points x (m, 2)."""
        x = np.asarray(x, dtype=float)
        nH = self.coarse.nH
        H = self.coarse.H
        idx = np.minimum((x / H).astype(int), nH - 1)
        t = x / H - idx
        T = idx[:, 0] + nH * idx[:, 1]
        lx = legendre_1d(self.p, t[:, 0])
        ly = legendre_1d(self.p, t[:, 1])
        vals = (ly[:, :, None] * lx[:, None, :]).reshape(len(x), self.J) / H
        return np.einsum("mj,mj->m", vals, np.asarray(coeffs).reshape(-1, self.J)[T])

    def local_moments(self, r: int) -> np.ndarray:
        """(Theta_j, phi_node) on one coarse element for its (r+1)^2 fine nodes.

        Local node order is lexicographic on the element's node lattice.
        """
        return _local_moments(r, self.p, self.coarse.H)

    def element_node_indices(self, fine: FineMesh, elements=None) -> np.ndarray:
        """Full-lattice fine node indices of each coarse element's (r+1)^2 nodes."""
        if elements is None:
            elements = np.arange(self.coarse.n_elements)
        r = fine.r
        local = lattice_coords(np.arange((r + 1) ** 2), (r + 1, r + 1))
        ec = lattice_coords(np.asarray(elements), self.coarse.element_shape) * r
        coords = ec[:, None, :] + local[None, :, :]
        return coords[..., 0] + (fine.nf + 1) * coords[..., 1]


def _local_moments(r, p, H):
    m1 = hat_moments_1d(r, p) * np.sqrt(H)  # scale [0,1] -> [0,H] for orthonormal basis
    return np.kron(m1, m1)


def build_space(coarse: CoarseMesh, p: int) -> PolySpace:
    return PolySpace(coarse, p)


def project(space: PolySpace, fine: FineMesh, v: np.ndarray) -> np.ndarray:
    """Coefficients (n_elements, J) of the L2 projection of the Q1 FineVector v."""
    full = fine.extend(v)
    nodes = space.element_node_indices(fine)
    return full[nodes] @ space.local_moments(fine.r)


def project_function(space: PolySpace, f, npts: int = 8, sub: int = 4) -> np.ndarray:
    """L2 projection of an analytic f(x1, x2) by composite Gauss quadrature.

    Each coarse element is split into sub x sub cells with npts^2 points each.
    """
    H = space.coarse.H
    xq, wq = gauss_points(npts, 0.0, 1.0 / sub)
    t = (np.arange(sub)[:, None] / sub + xq[None, :]).ravel()
    w = np.tile(wq, sub)
    leg = legendre_1d(space.p, t)  # (nq, p+1)
    ec = lattice_coords(np.arange(space.coarse.n_elements), space.coarse.element_shape) * H
    X = ec[:, 0][:, None, None] + H * t[None, None, :]
    Y = ec[:, 1][:, None, None] + H * t[None, :, None]
    F = np.broadcast_to(f(X, Y), (ec.shape[0], t.size, t.size))
    # integral of f * Theta over T = H * sum w_y w_x f L_b(y) L_a(x)
    c = np.einsum("eyx,y,x,yb,xa->eba", F, w, w, leg, leg) * H
    return c.reshape(ec.shape[0], space.J)


def l2_error_function(space: PolySpace, f, coeffs: np.ndarray, npts: int = 8, sub: int = 4) -> float:
    """||f - sum coeffs Theta||_{L2(Omega)} by composite Gauss quadrature."""
    H = space.coarse.H
    xq, wq = gauss_points(npts, 0.0, 1.0 / sub)
    t = (np.arange(sub)[:, None] / sub + xq[None, :]).ravel()
    w = np.tile(wq, sub)
    leg = legendre_1d(space.p, t)
    ec = lattice_coords(np.arange(space.coarse.n_elements), space.coarse.element_shape) * H
    X = ec[:, 0][:, None, None] + H * t[None, None, :]
    Y = ec[:, 1][:, None, None] + H * t[None, :, None]
    F = np.broadcast_to(f(X, Y), (ec.shape[0], t.size, t.size))
    C = np.asarray(coeffs).reshape(-1, space.p + 1, space.p + 1)  # (e, b, a)
    P = np.einsum("eba,yb,xa->eyx", C, leg, leg) / H
    err2 = np.einsum("eyx,y,x->", (F - P) ** 2, w, w) * H**2
    return float(np.sqrt(err2))


def poly_load_matrix(space: PolySpace, fine: FineMesh, elements=None) -> sp.csc_matrix:
    """Sparse FineVector loads of Theta_{T,j}; one column per (T, j) of ``elements``.

    Column order is element-major, matching :meth:`PolySpace.element_dofs`.
    """
    if elements is None:
        elements = np.arange(space.coarse.n_elements)
    elements = np.asarray(elements)
    nodes = space.element_node_indices(fine, elements)  # (nel, nloc)
    loc = space.local_moments(fine.r)  # (nloc, J)
    dofs = np.full(fine.n_nodes, -1, dtype=np.int64)
    dofs[fine.free_nodes] = np.arange(fine.n_dofs)
    rows = np.repeat(dofs[nodes][:, :, None], space.J, axis=2)  # (nel, nloc, J)
    cols = np.broadcast_to(
        (np.arange(elements.size)[:, None] * space.J + np.arange(space.J)[None, :])[:, None, :], rows.shape
    )
    vals = np.broadcast_to(loc[None], rows.shape)
    keep = rows >= 0
    return sp.csc_matrix(
        (vals[keep], (rows[keep], cols[keep])), shape=(fine.n_dofs, elements.size * space.J)
    )


def poly_load(space: PolySpace, fine: FineMesh, coeffs: np.ndarray) -> np.ndarray:
    """FineVector (q, phi_i) for the piecewise polynomial with coefficients (n_elements, J)."""
    coeffs = np.asarray(coeffs).reshape(space.coarse.n_elements, space.J)
    nodes = space.element_node_indices(fine)
    local = coeffs @ space.local_moments(fine.r).T  # (nel, nloc)
    full = np.bincount(nodes.ravel(), weights=local.ravel(), minlength=fine.n_nodes)
    return fine.restrict(full)


def patch_moments(space: PolySpace, fine: FineMesh, patch) -> np.ndarray:
    """Dense moments (Theta_{T,j}, phi_node) for all box nodes of a patch.

    Rows follow the patch's local node order, columns are element-major over
    ``patch.elements`` (J per element).
    """
    lo, hi = patch.fine_box(fine)
    node_shape = tuple(b - a + 1 for a, b in zip(lo, hi))
    r = fine.r
    loc = space.local_moments(r)
    local_nodes = lattice_coords(np.arange((r + 1) ** 2), (r + 1, r + 1))
    out = np.zeros((int(np.prod(node_shape)), patch.n_elements * space.J))
    ecoords = lattice_coords(patch.elements, space.coarse.element_shape)
    for k, c in enumerate(ecoords):
        off = (c - np.array(patch.lo)) * r
        idx = (local_nodes[:, 0] + off[0]) + node_shape[0] * (local_nodes[:, 1] + off[1])
        out[idx, k * space.J:(k + 1) * space.J] = loc
    return out


def fit_rate(hs, errors) -> float:
    """Least-squares slope of log(error) against log(h)."""
    hs = np.asarray(hs, dtype=float)
    errors = np.asarray(errors, dtype=float)
    if hs.size < 2:
        raise ValueError("need at least two mesh sizes")
    return float(np.polyfit(np.log(hs), np.log(errors), 1)[0])


def approximation_error_rate(f, nHs, p: int = 0) -> float:
    """Slope of ||(1 - Pi_H) f||_{L2} against H over the coarse meshes nH in nHs."""
    errs = []
    for nH in nHs:
        space = PolySpace(CoarseMesh(2, nH), p)
        errs.append(l2_error_function(space, f, project_function(space, f)))
    return fit_rate([1.0 / n for n in nHs], errs)
