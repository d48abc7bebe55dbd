import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from superloc import fem, poly, slod
from superloc.mesh import build_coarse, refine


def random_field(fine, seed=0):
    return fem.CoefficientField(np.random.default_rng(seed).uniform(1, 100, fine.n_elements))


@pytest.fixture(scope="module")
def case():
    coarse = build_coarse(2, 8)
    fine = refine(coarse, 4)
    A = random_field(fine, 4)
    T = coarse.element_index((3, 4))
    return fine, A, T


def test_boundary_dof_count(case):
    fine, A, T = case
    hs = slod.harmonic_space(fine, A, T, 1, 0)
    side = 3 * fine.r
    assert hs.n_boundary == 4 * side
    assert hs.K == 9
    corner = slod.harmonic_space(fine, A, 0, 1, 0)
    # 2x2 block at the corner: only the two inner sides carry free boundary nodes
    assert corner.n_boundary == 2 * 2 * fine.r - 1


def test_extension_of_constant_is_constant(case):
    fine, A, T = case
    hs = slod.harmonic_space(fine, A, T, 1, 1)
    u = hs.extend(np.ones(hs.n_boundary))
    assert np.allclose(u[hs.solver.interior_dofs], 1.0, atol=1e-12)


def test_extension_is_harmonic(case):
    fine, A, T = case
    hs = slod.harmonic_space(fine, A, T, 1, 0)
    b = np.random.default_rng(0).standard_normal(hs.n_boundary)
    u = hs.extend(b)
    K = fem.stiffness(fine, A)
    r = (K @ u)[hs.solver.interior_dofs]
    assert np.abs(r).max() <= 1e-10 * np.abs(K @ u).max()


def test_singular_values(case):
    fine, A, T = case
    hs = slod.harmonic_space(fine, A, T, 1, 1)
    sig, sources, _ = slod.svd_sources(hs, 4)
    assert np.all(np.diff(sig) <= 0)
    # equivalent K x K eigenproblem M G^-1 M^T
    ev = np.sort(np.linalg.eigvalsh(hs.M @ np.linalg.solve(hs.G, hs.M.T)))[::-1]
    assert np.allclose(sig**2, ev, rtol=0, atol=1e-10 * sig[0] ** 2)
    assert np.allclose(sources.T @ sources, np.eye(4), atol=1e-13)
    W = slod.weighted_projection(hs)
    assert np.isclose(np.linalg.norm(sources.T @ W, 2), sig[hs.K - 4], rtol=1e-6, atol=1e-15)


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 2**31))
def test_projection_bounds(seed):
    coarse = build_coarse(2, 8)
    fine = refine(coarse, 2)
    A = random_field(fine, seed % 101)
    hs = slod.harmonic_space(fine, A, coarse.element_index((4, 3)), 1, 0)
    sig, sources, _ = slod.svd_sources(hs, 1)
    b = np.random.default_rng(seed).standard_normal(hs.n_boundary)
    ynorm = np.sqrt(b @ hs.G @ b)
    assert np.linalg.norm(hs.M @ b) <= sig[0] * ynorm * (1 + 1e-10)
    assert np.abs(sources.T @ (hs.M @ b)).max() <= sig[-1] * ynorm * (1 + 1e-8) + 1e-14 * ynorm


def test_psi_solves_patch_problem(case):
    fine, A, T = case
    d = slod.element_data(fine, A, T, 1, 1)
    hs = slod.harmonic_space(fine, A, T, 1, 1)
    loads = hs.moments[hs.solver.interior] @ d.sources
    r = hs.solver.K_ii @ d.psi - loads
    assert np.abs(r).max() <= 1e-10 * np.abs(loads).max()


def test_localization_identity(case):
    # a(phi - psi, v) = (g, ext(tr v)) for the global solution phi with the same source g
    fine, A, T = case
    hs = slod.harmonic_space(fine, A, T, 1, 0)
    d = slod.element_data(fine, A, T, 1, 0)
    space = poly.PolySpace(fine.coarse, 0)
    coeffs = np.zeros(space.dim)
    coeffs[d.poly_dofs] = d.sources[:, 0]
    g = poly.poly_load(space, fine, coeffs)
    K = fem.stiffness(fine, A)
    phi = np.asarray(fem.reference_solution(fine, A, g, K), dtype=float)
    psi = np.zeros(fine.n_dofs)
    psi[d.interior_dofs] = d.psi[:, 0]
    v = np.random.default_rng(3).standard_normal(fine.n_dofs)
    lhs = (phi - psi) @ (K @ v)
    ext = hs.extend(v[hs.solver.boundary_dofs])
    rhs = g @ ext
    assert abs(lhs - rhs) <= 1e-8 * np.sqrt(v @ (K @ v)) * np.sqrt(phi @ (K @ phi))


def test_decay_with_patch_size():
    coarse = build_coarse(2, 8)
    fine = refine(coarse, 4)
    A = random_field(fine, 9)
    K = fem.stiffness(fine, A)
    space = poly.PolySpace(coarse, 0)
    T = coarse.element_index((3, 3))
    errs = []
    for ell in (1, 2, 3):
        d = slod.element_data(fine, A, T, ell, 0)
        coeffs = np.zeros(space.dim)
        coeffs[d.poly_dofs] = d.sources[:, 0]
        g = poly.poly_load(space, fine, coeffs)
        phi = np.asarray(fem.reference_solution(fine, A, g, K), dtype=float)
        psi = np.zeros(fine.n_dofs)
        psi[d.interior_dofs] = d.psi[:, 0]
        errs.append(fem.rel_energy_error(phi, psi, K))
    assert errs[0] > errs[1] > errs[2]
    assert errs[2] < 1e-2


def test_single_element_riesz():
    coarse = build_coarse(2, 8)
    fine = refine(coarse, 2)
    A = random_field(fine)
    d = slod.element_data(fine, A, coarse.element_index((4, 4)), 1, 1)
    lo, hi = slod.riesz_bounds(poly.PolySpace(coarse, 1), [d])
    assert np.isclose(lo, 1.0) and np.isclose(hi, 1.0)


def test_rejects_whole_domain_patch():
    coarse = build_coarse(2, 4)
    fine = refine(coarse, 2)
    with pytest.raises(ValueError):
        slod.harmonic_space(fine, random_field(fine), 5, 2, 0)
    with pytest.raises(ValueError):
        slod.build_slod(fine, random_field(fine), 1, 0, selection="other")


@pytest.fixture(scope="module")
def global_slod():
    coarse = build_coarse(2, 8)
    fine = refine(coarse, 4)
    A = fem.CoefficientField.constant(fine, 1.0)
    K = fem.stiffness(fine, A)
    load = fem.load_constant(fine)
    u_ref = fem.reference_solution(fine, A, load, K)
    return fine, A, K, load, u_ref


def test_stabilized_vs_verbatim(global_slod):
    fine, A, K, load, u_ref = global_slod
    space = poly.PolySpace(fine.coarse, 0)
    stab = slod.build_slod(fine, A, 2, 0)
    verb = slod.build_slod(fine, A, 2, 0, selection="verbatim")
    for a, b in zip(stab, verb):
        if not slod.touches_boundary(a.patch):
            assert np.array_equal(a.sources, b.sources)
    lo_s, _ = slod.riesz_bounds(space, stab)
    lo_v, _ = slod.riesz_bounds(space, verb)
    assert lo_s > 1e3 * lo_v
    e_s = fem.rel_energy_error(u_ref, slod.slod_solve(fine, K, load, stab).u, K)
    e_v = fem.rel_energy_error(u_ref, slod.slod_solve(fine, K, load, verb).u, K)
    assert e_s < 0.05 and e_s < e_v
    # capped patches stay within the interior cap
    cap = max(d.sigma_T for d in stab if not slod.touches_boundary(d.patch))
    assert all(d.sigma_T <= cap * (1 + 1e-8) for d in stab)


def test_slod_solution(global_slod):
    fine, A, K, load, u_ref = global_slod
    datas = slod.build_slod(fine, A, 1, 0)
    sol = slod.slod_solve(fine, K, load, datas)
    assert fem.galerkin_residual(K, sol.basis, u_ref, sol.u_parts, load=load) <= 1e-8
    zero = slod.slod_solve(fine, K, np.zeros_like(load), datas)
    assert np.all(np.asarray(zero.u) == 0.0)
    assert slod.sigma_global(datas) == max(d.sigma_T for d in datas)


def test_threads_bitwise(global_slod):
    fine, A, K, load, u_ref = global_slod
    a = slod.build_slod(fine, A, 1, 0, threads=1)
    b = slod.build_slod(fine, A, 1, 0, threads=3)
    for x, y in zip(a, b):
        assert np.array_equal(x.psi, y.psi) and np.array_equal(x.sigmas, y.sigmas)
