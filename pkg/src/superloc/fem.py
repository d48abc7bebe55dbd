"""Q1 finite elements on the fine Cartesian mesh.

Operators are assembled on boxes of fine elements (the whole domain or a
patch) from a piecewise constant scalar coefficient. Patch problems are
homogeneous Dirichlet problems on the box interior and are factored once,
then reused for every right-hand side.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .mesh import FineMesh, Patch, box_indices, lattice_coords

log = logging.getLogger(__name__)


class NumericalFailure(RuntimeError):
    """A linear system could not be solved to the required accuracy."""


@dataclass(frozen=True)
class CoefficientField:
    """Scalar coefficient, one value per fine element (lexicographic order)."""

    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float)
        if not np.all(np.isfinite(v)) or np.any(v <= 0):
            raise ValueError("coefficient values must be finite and positive")
        object.__setattr__(self, "values", v)

    @property
    def alpha(self) -> float:
        return float(self.values.min())

    @property
    def beta(self) -> float:
        return float(self.values.max())

    @property
    def contrast(self) -> float:
        return self.beta / self.alpha

    @classmethod
    def constant(cls, fine: FineMesh, value: float = 1.0):
        return cls(np.full(fine.n_elements, float(value)))

    def box(self, fine: FineMesh, lo, hi) -> np.ndarray:
        """Values on the fine element box lo <= c < hi, local lexicographic order."""
        return self.values[box_indices(lo, hi, fine.element_shape)]


def _local_1d(h):
    k = np.array([[1.0, -1.0], [-1.0, 1.0]]) / h
    m = np.array([[2.0, 1.0], [1.0, 2.0]]) * h / 6.0
    return k, m


def local_stiffness(h: float, d: int = 2) -> np.ndarray:
    """Q1 element stiffness for a unit coefficient on a cube of side h."""
    k, m = _local_1d(h)
    if d == 2:
        return np.kron(m, k) + np.kron(k, m)
    return np.kron(np.kron(m, m), k) + np.kron(np.kron(m, k), m) + np.kron(np.kron(k, m), m)


def local_mass(h: float, d: int = 2) -> np.ndarray:
    _, m = _local_1d(h)
    out = m
    for _ in range(d - 1):
        out = np.kron(m, out)
    return out


def _element_nodes(shape):
    """Node indices (local box lattice) of every element of an element box."""
    d = len(shape)
    node_shape = tuple(n + 1 for n in shape)
    ecoords = lattice_coords(np.arange(int(np.prod(shape))), shape)
    corners = lattice_coords(np.arange(2**d), (2,) * d)
    nodes = ecoords[:, None, :] + corners[None, :, :]
    stride = np.cumprod((1,) + node_shape[:-1])
    return nodes @ stride


def assemble_box(shape, h, weights, local) -> sp.csr_matrix:
    """Assemble sum_e weights[e] * local over an element box of the given shape.

    The result lives on all (shape+1) box nodes; no boundary conditions.
    """
    if len(shape) != 2:
        raise NotImplementedError("assembly is implemented for d=2 only")
    en = _element_nodes(shape)
    nloc = en.shape[1]
    rows = np.repeat(en, nloc, axis=1).ravel()
    cols = np.tile(en, (1, nloc)).ravel()
    vals = (np.asarray(weights)[:, None] * local.ravel()[None, :]).ravel()
    n = int(np.prod([s + 1 for s in shape]))
    # duplicates are summed in a fixed order, so results are bit-reproducible
    return sp.csr_matrix((vals, (rows, cols)), shape=(n, n))


def local_factor(local: np.ndarray) -> np.ndarray:
    """D with D^T D = local for a symmetric PSD element matrix (rank rows only)."""
    w, U = np.linalg.eigh(local)
    keep = w > 1e-12 * w.max()
    return np.sqrt(w[keep])[:, None] * U[:, keep].T


def factor_box(shape, weights, local) -> sp.csr_matrix:
    """R with R^T R = assemble_box(shape, ., weights, local).

    One block of rows per element: sqrt(weights[e]) * D applied to the
    element's nodal values, so v^T K v is evaluated as a sum of squares.
    """
    D = local_factor(local)
    en = _element_nodes(shape)
    rank, nloc = D.shape
    ne = en.shape[0]
    rows = np.repeat(np.arange(ne * rank), nloc)
    cols = np.repeat(en, rank, axis=0).ravel()
    vals = (np.sqrt(np.asarray(weights, dtype=float))[:, None, None] * D[None]).ravel()
    n = int(np.prod([s + 1 for s in shape]))
    return sp.csr_matrix((vals, (rows, cols)), shape=(ne * rank, n))


def assemble_stiffness(fine: FineMesh, A: CoefficientField) -> sp.csr_matrix:
    """Full (pre-elimination) stiffness matrix on all fine nodes."""
    return assemble_box(fine.element_shape, fine.h, A.values, local_stiffness(fine.h, fine.d))


def assemble_mass(fine: FineMesh) -> sp.csr_matrix:
    return assemble_box(fine.element_shape, fine.h, np.ones(fine.n_elements), local_mass(fine.h, fine.d))


def eliminate(fine: FineMesh, matrix) -> sp.csr_matrix:
    """Restrict a full nodal operator to the free fine nodes."""
    free = fine.free_nodes
    return sp.csr_matrix(matrix)[free][:, free]


def stiffness(fine: FineMesh, A: CoefficientField) -> sp.csr_matrix:
    """Stiffness on FineVectors (homogeneous Dirichlet on the boundary)."""
    return eliminate(fine, assemble_stiffness(fine, A))


def factorize_spd(matrix):
    """Sparse direct factorization of an SPD matrix; returns a solve callable."""
    lu = spla.splu(
        sp.csc_matrix(matrix),
        permc_spec="MMD_AT_PLUS_A",
        diag_pivot_thresh=0.0,
        options={"SymmetricMode": True},
    )
    return lu.solve


class PatchSolver:
    """Factored Dirichlet problem on the interior fine nodes of a patch.

    Local arrays use the patch box's lexicographic node order restricted to
    the interior (``interior``) or patch-boundary (``boundary``) node sets.
    """

    def __init__(self, fine: FineMesh, A: CoefficientField, patch: Patch):
        self.fine = fine
        self.patch = patch
        lo, hi = patch.fine_box(fine)
        self.shape = tuple(b - a for a, b in zip(lo, hi))
        self.node_coords = patch.local_node_coords(fine)
        self.interior, self.boundary = patch.classify_nodes(fine)
        if self.interior.size == 0:
            raise ValueError(f"patch {patch.kind} {patch.seed} has no interior fine DOFs")
        self.coef = A.box(fine, lo, hi)
        self.K = assemble_box(self.shape, fine.h, self.coef, local_stiffness(fine.h, fine.d))
        self.K_ii = self.K[self.interior][:, self.interior].tocsc()
        self.interior_dofs = fine.node_to_dof(self.node_coords[self.interior])
        self.boundary_dofs = fine.node_to_dof(self.node_coords[self.boundary])
        self._solve = factorize_spd(self.K_ii)
        self.n_solves = 0

    @property
    def n_interior(self) -> int:
        return self.interior.size

    @cached_property
    def energy_factor(self) -> sp.csc_matrix:
        """R on the interior nodes with R^T R = K_ii."""
        R = factor_box(self.shape, self.coef, local_stiffness(self.fine.h, self.fine.d))
        return R.tocsc()[:, self.interior]

    def solve_local(self, rhs: np.ndarray) -> np.ndarray:
        """Solve with right-hand side(s) given on the interior nodes."""
        rhs = np.asarray(rhs, dtype=float)
        self.n_solves += 1 if rhs.ndim == 1 else rhs.shape[1]
        return self._solve(rhs)

    def solve(self, load: np.ndarray) -> np.ndarray:
        """Galerkin solution in H^1_0(patch) for a global load FineVector, extended by zero."""
        u = np.zeros(self.fine.n_dofs)
        u[self.interior_dofs] = self.solve_local(np.asarray(load)[self.interior_dofs])
        return u

    def scatter(self, local: np.ndarray) -> np.ndarray:
        """Extend interior-node values to a global FineVector."""
        u = np.zeros(self.fine.n_dofs)
        u[self.interior_dofs] = local
        return u


def patch_solver(fine: FineMesh, A: CoefficientField, patch: Patch) -> PatchSolver:
    return PatchSolver(fine, A, patch)


def reference_solution(fine: FineMesh, A: CoefficientField, load: np.ndarray, K=None) -> np.ndarray:
    """Global Q1 solution as a longdouble FineVector; ``load`` holds (f, phi_i).

    The direct solve is refined against double-double residuals so that the
    reference stays accurate well below the errors it is compared with.
    """
    if K is None:
        K = stiffness(fine, A)
    Kdd = DDOperator(K)
    (uh, ul), _ = _refine(lambda h, l: dd_residual(Kdd, load, h, l)[0], factorize_spd(K),
                          float(np.linalg.norm(load)), K.shape[0])
    u = uh.astype(np.longdouble) + ul
    if not np.all(np.isfinite(u)):
        raise NumericalFailure("reference solve produced non-finite values")
    return u


# loads -----------------------------------------------------------------------

def gauss_points(n: int, a: float = 0.0, b: float = 1.0):
    x, w = np.polynomial.legendre.leggauss(n)
    return 0.5 * (b - a) * x + 0.5 * (a + b), 0.5 * (b - a) * w


def load_constant(fine: FineMesh, value: float = 1.0, full: bool = False) -> np.ndarray:
    """Exact Q1 load (f, phi_i) of a constant source.

    Interior hats integrate to h^d; with ``full`` the vector covers all fine
    nodes, boundary hats included.
    """
    if not full:
        return np.full(fine.n_dofs, value * fine.h**fine.d)
    en = _element_nodes(fine.element_shape)
    w = np.full(en.size, value * fine.h**fine.d / en.shape[1])
    return np.bincount(en.ravel(), weights=w, minlength=fine.n_nodes)


def load_function(fine: FineMesh, f, npts: int = 3, full: bool = False) -> np.ndarray:
    """(f, phi_i) by tensor Gauss quadrature with ``npts`` points per axis per fine cell.

    ``f`` is vectorized: ``f(x1, x2)`` on arrays.
    """
    if fine.d != 2:
        raise NotImplementedError("loads are implemented for d=2 only")
    h = fine.h
    xq, wq = gauss_points(npts, 0.0, h)
    # 1D shape functions at quadrature points: left node (1 - x/h), right node x/h
    phi = np.stack([1.0 - xq / h, xq / h])  # (2, npts)
    ec = lattice_coords(np.arange(fine.n_elements), fine.element_shape) * h
    X = ec[:, 0][:, None, None] + xq[None, None, :]
    Y = ec[:, 1][:, None, None] + xq[None, :, None]
    F = f(np.broadcast_to(X, (ec.shape[0], npts, npts)), np.broadcast_to(Y, (ec.shape[0], npts, npts)))
    F = np.broadcast_to(F, (ec.shape[0], npts, npts)) * np.outer(wq, wq)[None]
    # local node (ix, iy) -> index ix + 2 iy
    local = np.einsum("eyx,by,ax->eba", F, phi, phi).reshape(ec.shape[0], 4)
    en = _element_nodes(fine.element_shape)
    out = np.bincount(en.ravel(), weights=local.ravel(), minlength=fine.n_nodes)
    return out if full else fine.restrict(out)


# norms -------------------------------------------------------------------------

def energy_norm(v: np.ndarray, K) -> float:
    """sqrt(v^T K v) for the (eliminated) stiffness K."""
    v = np.asarray(v, dtype=float)
    return float(np.sqrt(max(float(v @ (K @ v)), 0.0)))


def rel_energy_error(u_ref: np.ndarray, u: np.ndarray, K) -> float:
    ref = energy_norm(u_ref, K)
    if ref == 0.0:
        raise ValueError("relative energy error undefined for a zero reference solution")
    return energy_norm(u_ref - u, K) / ref


# double-double arithmetic -------------------------------------------------------
# Knuth's two-sum and Dekker's two-product are exact, so carrying values as
# unevaluated pairs hi + lo gives about 32 significant digits. This is what
# Galerkin orthogonality needs once the discretization error itself is close
# to double-precision rounding of the solution.

_SPLITTER = 134217729.0  # 2^27 + 1


def _two_sum(a, b):
    s = a + b
    bb = s - a
    return s, (a - (s - bb)) + (b - bb)


def _split(a):
    t = _SPLITTER * a
    hi = t - (t - a)
    return hi, a - hi


def _two_prod(a, b):
    p = a * b
    ah, al = _split(a)
    bh, bl = _split(b)
    return p, ((ah * bh - p) + ah * bl + al * bh) + al * bl


def dd_add(xh, xl, yh, yl):
    s, e = _two_sum(xh, yh)
    e = e + (xl + yl)
    hi = s + e
    return hi, e - (hi - s)


def dd_split(x):
    """Pair (hi, lo) of doubles representing x (float or longdouble) exactly."""
    x = np.asarray(x)
    hi = x.astype(float)
    return hi, (x - hi).astype(float)


class DDOperator:
    """Sparse matrix applied to double-double vectors.

    Rows are processed slot by slot (k-th stored entry of every row), sorted by
    length so that the active rows of each slot form a prefix.
    """

    def __init__(self, matrix):
        M = sp.csr_matrix(matrix, dtype=float)
        M.sum_duplicates()
        self.shape = M.shape
        self.data, self.indices = M.data, M.indices
        lens = np.diff(M.indptr)
        self.order = np.argsort(-lens, kind="stable")
        self.start = M.indptr[:-1][self.order]
        srt = lens[self.order]
        self.counts = [int(np.count_nonzero(srt > k)) for k in range(int(lens.max(initial=0)))]

    def apply(self, xh, xl=None):
        xl = np.zeros_like(xh) if xl is None else xl
        n = self.shape[0]
        sh, sl = np.zeros(n), np.zeros(n)
        for k, m in enumerate(self.counts):
            idx = self.start[:m] + k
            a, j = self.data[idx], self.indices[idx]
            ph, pl = _two_prod(a, xh[j])
            pl = pl + a * xl[j]
            sh[:m], sl[:m] = dd_add(sh[:m], sl[:m], ph, pl)
        hi, lo = np.empty(n), np.empty(n)
        hi[self.order], lo[self.order] = sh, sl
        return hi, lo


def dd_residual(Kdd: DDOperator, load, uh, ul):
    """f - K u in double-double; returns (hi, lo)."""
    kh, kl = Kdd.apply(uh, ul)
    return dd_add(np.asarray(load, dtype=float), np.zeros(len(load)), -kh, -kl)


# Galerkin solves in a sparse ansatz basis --------------------------------------

@dataclass
class GalerkinSolution:
    """Galerkin approximation in the span of the columns of ``basis``.

    The fine solution is kept as a double-double pair ``u_parts``; ``u`` is
    its longdouble rounding.
    """

    basis: sp.csc_matrix
    matrix: sp.csr_matrix
    rhs: np.ndarray
    coeffs: np.ndarray
    u_parts: tuple
    dropped: int = 0
    method: str = "lu"
    info: dict = field(default_factory=dict)

    @property
    def u(self) -> np.ndarray:
        hi, lo = self.u_parts
        return hi.astype(np.longdouble) + lo


DROP_TOL = 1e-12
DENSE_LIMIT = 20000  # dense fallback memory: 8 * n^2 bytes
REFINE_STEPS = 10


def _refine(residual, solve, rhs_norm, n, steps=REFINE_STEPS):
    """Iterative refinement with double-double iterates.

    ``residual(hi, lo)`` returns the (double) residual of the iterate,
    ``solve`` is a double-precision approximate inverse. Stops on convergence
    or stagnation; returns the best iterate (hi, lo) and its residual norm.
    """
    ch, cl = np.zeros(n), np.zeros(n)
    best, best_res = (ch, cl), np.inf
    for _ in range(steps):
        r = residual(ch, cl)
        res = float(np.linalg.norm(r))
        if not res < best_res:
            break
        improved = res < 0.5 * best_res
        best, best_res = (ch, cl), res
        if res <= 1e-30 * rhs_norm or not improved:
            break
        ch, cl = dd_add(ch, cl, solve(r), np.zeros(n))
    return best, best_res


def semidefinite_solver(matrix):
    """Solve callable for a symmetric positive semidefinite matrix.

    LAPACK pivoted Cholesky on a dense copy, factored in place; columns whose
    pivot falls below n * eps * max pivot are treated as dependent and get
    zero coefficients.
    """
    A = np.asfortranarray(matrix.toarray() if sp.issparse(matrix) else np.array(matrix, dtype=float))
    n = A.shape[0]
    L, piv, rank, info = sla.lapack.dpstrf(A, lower=1, tol=-1.0, overwrite_a=1)
    if info < 0 or rank == 0:
        raise NumericalFailure("pivoted Cholesky of the coarse matrix failed")
    if rank < n:
        log.warning("coarse system rank deficient: %d of %d columns dependent", n - rank, n)
    piv = piv - 1
    # complete the factor with an identity block so dpotrs runs on the full array
    L[rank:, :] = 0.0
    L[:, rank:] = 0.0
    L[np.arange(rank, n), np.arange(rank, n)] = 1.0

    def solve(r):
        y, _ = sla.lapack.dpotrs(L, r[piv], lower=1)
        y[rank:] = 0.0
        x = np.empty_like(y)
        x[piv] = y
        return x

    return solve


def galerkin_solve(K, basis, load: np.ndarray) -> GalerkinSolution:
    """Solve a(u, v) = (f, v) for all v in span(basis).

    The coarse matrix is symmetrically scaled to unit diagonal; columns with
    negligible energy (diag < DROP_TOL * max diag) are dropped. A sparse LU is
    tried first; if it fails or stays inaccurate, a dense pivoted Cholesky
    factorization (rank revealing, in place) solves on the numerically
    independent columns. Either way the coefficients are refined against the
    residual Phi^T (f - K Phi c), with f - K Phi c evaluated in double-double,
    so Galerkin orthogonality holds far below double-precision rounding of
    the fine solution.
    """
    basis = sp.csc_matrix(basis)
    S = (basis.T @ (K @ basis)).tocsr()
    S = ((S + S.T) * 0.5).tocsr()
    b = basis.T @ load
    m = S.shape[0]
    diag = S.diagonal()
    nf = K.shape[0]
    if m == 0 or diag.max(initial=0.0) <= 0.0:
        zero = (np.zeros(nf), np.zeros(nf))
        return GalerkinSolution(basis, S, b, np.zeros(m), zero, dropped=m, method="empty")
    keep = np.flatnonzero(diag > DROP_TOL * diag.max())
    dropped = m - keep.size
    if dropped:
        log.warning("dropping %d basis functions with negligible energy", dropped)
    scale = 1.0 / np.sqrt(diag[keep])
    Ss = (sp.diags(scale) @ S[keep][:, keep] @ sp.diags(scale)).tocsc()
    bs = scale * b[keep]

    Bk = basis[:, keep].tocsr()
    BkT = Bk.T.tocsr()
    Bdd, Kdd = DDOperator(Bk), DDOperator(K)

    def residual(ch, cl):
        # coefficients live in the unscaled basis; residual is returned scaled
        rh, _ = dd_residual(Kdd, load, *Bdd.apply(ch, cl))
        return scale * (BkT @ rh)

    bnorm = float(np.linalg.norm(bs))
    c, res, method = None, np.inf, "lu"
    try:
        solve = factorize_spd(Ss)
        c, res = _refine(residual, lambda r: scale * solve(r), bnorm, keep.size)
    except RuntimeError as exc:
        log.warning("sparse coarse factorization failed (%s)", exc)
    if c is None or not res <= 1e-12 * bnorm:
        if keep.size > DENSE_LIMIT:
            raise NumericalFailure(f"singular coarse system of size {keep.size} without recovery")
        log.warning("sparse coarse solve inaccurate (residual %.2e); switching to dense", res)
        method = "pivoted-cholesky"
        dense_solve = semidefinite_solver(Ss)
        c, res = _refine(residual, lambda r: scale * dense_solve(r), bnorm, keep.size)
        if not res <= 1e-12 * bnorm:
            log.warning("coarse system numerically singular: residual %.2e after recovery", res / bnorm)
    coeffs = np.zeros(m)
    coeffs[keep] = c[0]
    u_parts = Bdd.apply(*c)
    if not np.all(np.isfinite(u_parts[0])):
        raise NumericalFailure("coarse solve produced non-finite values")
    return GalerkinSolution(basis, S, b, coeffs, u_parts, dropped=dropped, method=method,
                            info={"residual": res, "rhs_norm": bnorm})


def galerkin_residual(K, basis, u_ref: np.ndarray, u, load=None) -> float:
    """max_i |a(u_ref - u, v_i)| / (||u_ref - u||_a ||v_i||_a) over the basis columns.

    ``u`` is an array or a double-double pair (hi, lo). With ``load`` given,
    a(u_ref, v_i) is replaced by (f, v_i), which the exact discrete reference
    satisfies by definition, and f - K u is formed in double-double; this is
    the form to use when the error is near the rounding level of u.
    """
    basis = sp.csc_matrix(basis)
    uh, ul = u if isinstance(u, tuple) else dd_split(u)
    u_ld = uh.astype(np.longdouble) + ul
    e = np.asarray(u_ref, dtype=np.longdouble) - u_ld
    enorm = energy_norm(e, K)
    vn = np.sqrt(np.maximum((basis.multiply(K @ basis)).sum(axis=0).A1, 0.0))
    ok = vn > 0
    if enorm == 0.0 or not ok.any():
        return 0.0
    if load is None:
        r = basis.T @ (K @ e.astype(float))
    else:
        rh, _ = dd_residual(DDOperator(K), load, uh, ul)
        r = basis.T @ rh
    r = np.abs(r)[ok] / (enorm * vn[ok])
    return float(r.max())
