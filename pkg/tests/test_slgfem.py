import numpy as np
import pytest
import scipy.linalg as sla
from hypothesis import given, settings, strategies as st

from superloc import fem, poly, slgfem
from superloc.mesh import build_coarse, hat_at, refine


def random_field(fine, seed=0):
    return fem.CoefficientField(np.random.default_rng(seed).uniform(1, 100, fine.n_elements))


@pytest.fixture(scope="module")
def small():
    coarse = build_coarse(2, 8)
    fine = refine(coarse, 4)
    A = random_field(fine, 11)
    z = coarse.node_index((4, 4))
    return fine, A, z


@pytest.mark.parametrize("p,count", [(0, 16), (2, 144)])
def test_snapshot_count(small, p, count):
    fine, A, z = small
    s = slgfem.snapshots(fine, A, z, 1, p)
    assert s.N == count
    assert s.patch.n_elements == 16


def test_snapshots_match_dense(small):
    fine, A, z = small
    s = slgfem.snapshots(fine, A, z, 1, 1)
    loads = poly.patch_moments(poly.PolySpace(fine.coarse, 1), fine, s.patch)[s.solver.interior]
    K = s.solver.K_ii.toarray()
    dense = np.linalg.solve(K, loads)
    assert np.abs(s.vectors - dense).max() <= 1e-10 * np.abs(dense).max()


def dense_evp(fine, A, z, ell, p):
    s = slgfem.snapshots(fine, A, z, ell, p)
    hat = hat_at(fine, z, s.solver.node_coords[s.solver.interior])
    K = s.solver.K_ii.toarray()
    V = s.vectors
    HV = hat[:, None] * V
    lhs = HV.T @ K @ HV
    rhs = V.T @ K @ V
    return sla.eigh(lhs, rhs, eigvals_only=True)[::-1], s, hat


def test_evp_matches_generalized_eigensolver(small):
    fine, A, z = small
    ref, s, hat = dense_evp(fine, A, z, 1, 0)
    b = slgfem.local_evp(s, hat)
    k = 8
    assert np.allclose(b.eigenvalues[:k], ref[:k], rtol=0, atol=1e-8 * ref[0])
    assert np.all(b.eigenvalues >= 0)
    assert np.all(np.diff(b.eigenvalues) <= 0)


def test_modes_energy_orthogonal(small):
    fine, A, z = small
    b = slgfem.node_basis(fine, A, z, 1, 1)
    K = fem.stiffness(fine, A)
    Phi = np.zeros((fine.n_dofs, b.rank))
    Phi[b.dofs] = b.vectors
    G = Phi.T @ (K @ Phi)
    assert np.allclose(G, np.diag(b.eigenvalues), atol=1e-10 * b.eigenvalues[0])


def test_n_width_estimate(small):
    fine, A, z = small
    b = slgfem.node_basis(fine, A, z, 1, 1)
    w = [slgfem.n_width_estimate(b, n) for n in range(b.rank + 2)]
    assert all(a >= c for a, c in zip(w, w[1:]))
    assert w[b.rank] == 0.0
    assert b.rank <= b.n_snapshots


def test_best_approximation(small):
    # the n leading modes approximate hat * u for any snapshot u within sqrt(lambda_{n+1}) ||u||_a
    fine, A, z = small
    s = slgfem.snapshots(fine, A, z, 1, 1)
    hat = hat_at(fine, z, s.solver.node_coords[s.solver.interior])
    b = slgfem.local_evp(s, hat)
    K = s.solver.K_ii.toarray()
    support = np.flatnonzero(hat > 0)
    rng = np.random.default_rng(5)
    for n in (1, 4, 10, 20):
        Q = np.zeros((K.shape[0], n))
        Q[support] = b.vectors[:, :n]
        bound = slgfem.n_width_estimate(b, n)
        for _ in range(100):
            u = s.vectors @ rng.standard_normal(s.N)
            target = hat * u
            c = np.linalg.solve(Q.T @ K @ Q, Q.T @ K @ target)
            e = target - Q @ c
            assert np.sqrt(e @ K @ e) <= bound * np.sqrt(u @ K @ u) * (1 + 1e-6) + 1e-12 * np.sqrt(u @ K @ u)


@pytest.fixture(scope="module")
def global_case():
    coarse = build_coarse(2, 4)
    fine = refine(coarse, 8)
    A = random_field(fine, 2)
    K = fem.stiffness(fine, A)
    load = fem.load_constant(fine)
    u_ref = fem.reference_solution(fine, A, load, K)
    bases = slgfem.build_bases(fine, A, 1, 0)
    return fine, A, K, load, u_ref, bases


def test_error_nonincreasing_in_n(global_case):
    fine, A, K, load, u_ref, bases = global_case
    errs = [fem.rel_energy_error(u_ref, slgfem.assemble_and_solve(fine, K, load, bases, n).u, K)
            for n in (1, 2, 4, 8, 16)]
    assert all(b <= a * (1 + 1e-10) for a, b in zip(errs, errs[1:]))
    assert errs[-1] < errs[0]


def test_glued_columns_unit_energy(global_case):
    fine, A, K, load, u_ref, bases = global_case
    Phi = slgfem.glued_basis(fine, bases, 6)
    diag = (Phi.multiply(K @ Phi)).sum(axis=0).A1
    assert np.allclose(diag, 1.0, atol=1e-8)
    assert Phi.shape[1] == sum(min(6, b.rank) for b in bases)


def test_zero_source(global_case):
    fine, A, K, load, u_ref, bases = global_case
    g = slgfem.assemble_and_solve(fine, K, np.zeros_like(load), bases, 4)
    assert np.all(np.asarray(g.u) == 0.0)


def test_galerkin_orthogonality(global_case):
    fine, A, K, load, u_ref, bases = global_case
    g = slgfem.assemble_and_solve(fine, K, load, bases, 8)
    assert fem.galerkin_residual(K, g.basis, u_ref, g.solution.u_parts, load=load) <= 1e-8


def test_constant_coefficient_accuracy():
    fine = refine(build_coarse(2, 4), 16)
    A = fem.CoefficientField.constant(fine, 1.0)
    load = fem.load_constant(fine)
    K = fem.stiffness(fine, A)
    u_ref = fem.reference_solution(fine, A, load, K)
    g = slgfem.solve(fine, A, load, ell=2, n=10, p=0)
    assert fem.rel_energy_error(u_ref, g.u, K) < 1e-2


def test_threads_bitwise(global_case):
    fine, A, K, load, u_ref, bases = global_case
    other = slgfem.build_bases(fine, A, 1, 0, threads=3)
    for a, b in zip(bases, other):
        assert np.array_equal(a.eigenvalues, b.eigenvalues)
        assert np.array_equal(a.vectors, b.vectors)


@settings(max_examples=10, deadline=None)
@given(seed=st.integers(0, 2**31), p=st.integers(0, 1))
def test_eigenvalues_positive_sorted(seed, p):
    coarse = build_coarse(2, 4)
    fine = refine(coarse, 4)
    A = random_field(fine, seed % 997)
    z = int(seed % coarse.n_nodes)
    b = slgfem.node_basis(fine, A, z, 1, p)
    assert np.all(b.eigenvalues > 0)
    assert np.all(np.diff(b.eigenvalues) <= 0)
    assert b.rank <= b.n_snapshots
