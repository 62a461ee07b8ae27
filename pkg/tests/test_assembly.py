"""Operator assembly against an independent dense reference implementation."""

import numpy as np
import pytest
import scipy.io
import scipy.sparse as sp

from tridomain.assembly import (ConductivitySpec, ContractViolationError,
                                InvalidConductivityError, assemble,
                                build_system_matrix, check_spd,
                                dump_matrix_market)
from tridomain.geometry import (REGION_E, REGION_I1, REGION_I2, UnitCellSpec,
                                build_unit_cell)

# ---------------------------------------------------------------------------
# reference assemblers: plain per-element loops with their own quadrature,
# sharing no code with the vectorized implementation under test


def ref_stiffness(mesh, tensor_at):
    n = mesh.n_dofs
    K = np.zeros((n, n))
    for tri, region in zip(mesh.triangles, mesh.tri_region):
        p = mesh.nodes[tri]
        V = np.column_stack([np.ones(3), p])
        C = np.linalg.inv(V)            # row k: coefficients (1, x, y) of hat k
        grads = C[1:, :].T              # (3, 2)
        area = 0.5 * abs(np.linalg.det(V))
        A = tensor_at(region, p.mean(axis=0))
        local = area * grads @ A @ grads.T
        for i in range(3):
            for j in range(3):
                K[tri[i], tri[j]] += local[i, j]
    return K


def ref_volume_mass(mesh, region):
    n = mesh.n_dofs
    M = np.zeros((n, n))
    mids = np.array([[0.5, 0.5, 0.0], [0.0, 0.5, 0.5], [0.5, 0.0, 0.5]])
    for tri, reg, area in zip(mesh.triangles, mesh.tri_region, mesh.tri_area):
        if reg != region:
            continue
        # edge-midpoint quadrature, exact for quadratics
        local = (area / 3.0) * mids.T @ mids
        for i in range(3):
            for j in range(3):
                M[tri[i], tri[j]] += local[i, j]
    return M


def ref_interface_mass(facets):
    nn = facets.n_nodes
    B = np.zeros((nn, nn))
    q = np.array([0.5 - 0.5 / np.sqrt(3.0), 0.5 + 0.5 / np.sqrt(3.0)])
    phi = np.column_stack([1 - q, q])   # (2 quad points, 2 hats)
    for f in range(facets.n_facets):
        i, j = facets.slots[f]
        local = facets.lengths[f] * 0.5 * (phi.T @ phi)
        B[np.ix_((i, j), (i, j))] += local
    return B


def identity_tensor(region, xy):
    return np.eye(2)


# ---------------------------------------------------------------------------
# stiffness and mass against the reference


@pytest.mark.parametrize("density", [1, 2, 4])
def test_stiffness_matches_reference(density):
    mesh = build_unit_cell(UnitCellSpec(mesh_density=density))
    op = assemble(mesh, ConductivitySpec())
    ref = ref_stiffness(mesh, identity_tensor)
    assert np.allclose(op.K.toarray(), ref, rtol=0, atol=1e-13)


def test_anisotropic_stiffness_matches_reference():
    ti = ((2.0, 0.5), (0.5, 1.0))
    te = ((3.0, 0.0), (0.0, 0.5))
    mesh = build_unit_cell(UnitCellSpec(mesh_density=4))
    op = assemble(mesh, ConductivitySpec(tensor_i=ti, tensor_e=te))

    def tensor_at(region, xy):
        return np.array(te if region == REGION_E else ti)

    ref = ref_stiffness(mesh, tensor_at)
    assert np.allclose(op.K.toarray(), ref, rtol=0, atol=1e-13)


def test_variable_conductivity_sampled_at_centroids():
    def ti(x, y):
        return np.array([[1.0 + x, 0.0], [0.0, 1.0 + y]])

    mesh = build_unit_cell(UnitCellSpec(mesh_density=4))
    op = assemble(mesh, ConductivitySpec(tensor_i=ti, alpha=0.9, beta=3.1))

    def tensor_at(region, xy):
        if region == REGION_E:
            return np.eye(2)
        return ti(*xy)

    ref = ref_stiffness(mesh, tensor_at)
    assert np.allclose(op.K.toarray(), ref, rtol=0, atol=1e-13)


def test_dirichlet_energy_of_linear_field(mesh8, op8):
    # u = x in every region: energy alpha |Omega_r| per region, identity tensor
    u = mesh8.nodes[:, 0].copy()
    for opk, area in ((op8.K1, 0.125), (op8.K2, 0.125), (op8.Ke, 0.75)):
        assert u @ (opk @ u) == pytest.approx(area, rel=1e-13)
    assert u @ (op8.K @ u) == pytest.approx(1.0, rel=1e-13)


def test_stiffness_row_sums_vanish(op8):
    # constants are in the kernel of each region stiffness
    for opk in (op8.K1, op8.K2, op8.Ke, op8.K):
        assert np.abs(opk @ np.ones(opk.shape[0])).max() < 1e-13


def test_volume_mass_matches_reference(mesh4, op4):
    for region, mat in ((REGION_I1, op4.Mvol1), (REGION_I2, op4.Mvol2),
                        (REGION_E, op4.Mvole)):
        ref = ref_volume_mass(mesh4, region)
        assert np.allclose(mat.toarray(), ref, rtol=0, atol=1e-14)


def test_volume_mass_integrates_quadratics(mesh8, op8):
    # int_{Omega_i1} x^2 over [0.25, 0.5] x [0.25, 0.75], exactly integrated
    # because products of linears are quadratics
    u = mesh8.nodes[:, 0].copy()
    exact = 0.5 * (0.5 ** 3 - 0.25 ** 3) / 3.0
    assert u @ (op8.Mvol1 @ u) == pytest.approx(exact, rel=1e-13)
    ones = np.ones(mesh8.n_dofs)
    assert ones @ (op8.Mvole @ ones) == pytest.approx(0.75, rel=1e-13)


def test_interface_mass_matches_reference(mesh4, op4):
    for fs, mat in ((mesh4.gamma1, op4.B1), (mesh4.gamma2, op4.B2),
                    (mesh4.gamma12, op4.B12)):
        ref = ref_interface_mass(fs)
        assert np.allclose(mat.toarray(), ref, rtol=0, atol=1e-14)


def test_interface_mass_integrates_traces(mesh8, op8):
    # trace of u = x on Gamma1: left edge x = 0.25 (length 0.5), top and
    # bottom x in [0.25, 0.5]; int x^2 = 0.25^2 * 0.5 + 2 * (0.5^3 - 0.25^3)/3
    tr = mesh8.nodes[mesh8.gamma1.pair_in][:, 0]
    exact = 0.25 ** 2 * 0.5 + 2.0 * (0.5 ** 3 - 0.25 ** 3) / 3.0
    assert tr @ (op8.B1 @ tr) == pytest.approx(exact, rel=1e-13)
    ones1 = np.ones(mesh8.gamma1.n_nodes)
    assert ones1 @ (op8.B1 @ ones1) == pytest.approx(1.0, rel=1e-13)
    ones12 = np.ones(mesh8.gamma12.n_nodes)
    assert ones12 @ (op8.B12 @ ones12) == pytest.approx(0.5, rel=1e-13)


def test_difference_maps(mesh8, op8):
    lay = op8.layout
    u = np.sin(3.0 * mesh8.nodes[:, 0]) + np.cos(2.0 * mesh8.nodes[:, 1])
    u[mesh8.blocks[REGION_E]] *= 0.5
    v1 = lay.v1(u)
    assert np.allclose(v1, u[mesh8.gamma1.pair_in] - u[mesh8.gamma1.pair_out])
    s = lay.s(u)
    assert np.allclose(s, u[mesh8.gamma12.pair_in] - u[mesh8.gamma12.pair_out])
    # operator identity: u' D1^T B1 D1 u == v1' B1 v1
    quad = u @ (op8.membrane_difference_mass() @ u)
    direct = v1 @ (op8.B1 @ v1) + lay.v2(u) @ (op8.B2 @ lay.v2(u))
    assert quad == pytest.approx(direct, rel=1e-13)


def test_constraint_vector(mesh8, op8):
    ones = np.ones(mesh8.n_dofs)
    assert op8.constraint @ ones == pytest.approx(0.75, rel=1e-13)
    assert op8.omega_e_area == pytest.approx(0.75, rel=1e-13)
    # supported on the extracellular block only
    e = mesh8.blocks[REGION_E]
    mask = np.ones(mesh8.n_dofs, dtype=bool)
    mask[e] = False
    assert np.all(op8.constraint[mask] == 0.0)


# ---------------------------------------------------------------------------
# the assembled time-step matrix


def quad_form_decomposition(mesh, op, x, eps, delta, dt, beta1, g_gap, c_ratio):
    lay = op.layout
    conduction = x @ (op.K @ x)
    v1, v2, s = lay.v1(x), lay.v2(x), lay.s(x)
    membrane = (eps / dt + beta1 * eps) * (v1 @ (op.B1 @ v1) + v2 @ (op.B2 @ v2))
    gap = (c_ratio * eps / dt + g_gap * c_ratio * eps) * (s @ (op.B12 @ s))
    reg = (delta / dt) * (x @ (op.regularization_mass() @ x))
    return conduction + membrane + gap + reg


@pytest.mark.parametrize("eps,delta", [(1.0, 1e-3), (0.1, 1e-3), (1.0, 0.0)])
def test_system_matrix_quadratic_identity(mesh8, op8, eps, delta):
    dt, beta1, g_gap, c_ratio = 1e-2, 0.5208333333333334, 1.0, 0.5
    A, c = build_system_matrix(op8, eps, delta, dt, beta1, g_gap, c_ratio)
    rng = np.random.default_rng(11)
    for _ in range(10):
        x = rng.standard_normal(mesh8.n_dofs)
        direct = x @ (A @ x)
        split = quad_form_decomposition(mesh8, op8, x, eps, delta, dt,
                                        beta1, g_gap, c_ratio)
        assert direct == pytest.approx(split, rel=1e-12)
    assert np.allclose(c, op8.constraint.toarray().ravel()
                       if sp.issparse(op8.constraint) else op8.constraint)


def test_system_matrix_symmetry(op8):
    A, _ = build_system_matrix(op8, 1.0, 1e-3, 1e-2, 0.5, 1.0, 0.5)
    assert abs(A - A.T).max() == 0.0


def test_timestep_halving_adds_mass(op8):
    eps, delta, dt = 1.0, 2.0 ** -10, 2.0 ** -7
    beta1, g_gap, c_ratio = 0.5, 1.0, 0.5
    A, _ = build_system_matrix(op8, eps, delta, dt, beta1, g_gap, c_ratio)
    A2, _ = build_system_matrix(op8, eps, delta, dt / 2, beta1, g_gap, c_ratio)
    expected = ((eps / dt) * op8.membrane_difference_mass()
                + (c_ratio * eps / dt) * op8.gap_difference_mass()
                + (delta / dt) * op8.regularization_mass())
    diff = (A2 - A) - expected
    assert abs(diff).max() < 1e-12 * abs(A).max()


def test_system_matrix_input_validation(op8):
    with pytest.raises(ContractViolationError):
        build_system_matrix(op8, 0.0, 1e-3, 1e-2, 0.5, 1.0, 0.5)
    with pytest.raises(ContractViolationError):
        build_system_matrix(op8, 1.0, -1e-3, 1e-2, 0.5, 1.0, 0.5)
    with pytest.raises(ContractViolationError):
        build_system_matrix(op8, 1.0, 1e-3, 0.0, 0.5, 1.0, 0.5)


def test_kernel_is_one_dimensional_without_regularization(op4, mesh4):
    A, _ = build_system_matrix(op4, 1.0, 0.0, 1e-2, 0.5, 1.0, 0.5)
    ones = np.ones(mesh4.n_dofs)
    assert np.abs(A @ ones).max() < 1e-13
    evals = np.linalg.eigvalsh(A.toarray())
    near_zero = np.sum(np.abs(evals) < 1e-10 * evals.max())
    assert near_zero == 1


def test_regularization_removes_kernel(op4, mesh4):
    A, _ = build_system_matrix(op4, 1.0, 1e-3, 1e-2, 0.5, 1.0, 0.5)
    evals = np.linalg.eigvalsh(A.toarray())
    assert evals.min() > 0


# ---------------------------------------------------------------------------
# definiteness checks


def test_check_spd_strict_and_semidefinite(op8):
    A_reg, _ = build_system_matrix(op8, 1.0, 1e-3, 1e-2, 0.5, 1.0, 0.5)
    rep = check_spd(A_reg, "strict")
    assert rep.passed and rep.mode == "strict"
    A0, _ = build_system_matrix(op8, 1.0, 0.0, 1e-2, 0.5, 1.0, 0.5)
    assert check_spd(A0, "semidefinite").passed
    assert not check_spd(A0, "strict").passed


def test_check_spd_interface_only(op8):
    M2 = op8.interface_operator(0.5)
    assert check_spd(M2, "semidefinite").passed
    assert not check_spd(M2, "strict").passed


def test_check_spd_small_examples():
    good = sp.csr_matrix(np.diag([1.0, 2.0]))
    assert check_spd(good, "strict").passed
    psd = sp.csr_matrix(np.diag([1.0, 0.0]))
    assert not check_spd(psd, "strict").passed
    assert check_spd(psd, "semidefinite").passed
    indef = sp.csr_matrix(np.diag([1.0, -1e-3]))
    assert not check_spd(indef, "strict").passed
    assert not check_spd(indef, "semidefinite").passed


def test_check_spd_rejects_bad_input():
    asym = sp.csr_matrix(np.array([[1.0, 2.0], [0.0, 1.0]]))
    with pytest.raises(ContractViolationError):
        check_spd(asym, "strict")
    ok = sp.csr_matrix(np.eye(2))
    with pytest.raises(ContractViolationError):
        check_spd(ok, "positive")


def test_check_spd_large_matrix_path():
    n = 4100
    diag = np.linspace(1.0, 2.0, n)
    A = sp.diags(diag).tocsr()
    rep = check_spd(A, "strict")
    assert rep.passed and rep.n == n
    diag2 = diag.copy()
    diag2[0] = 0.0
    assert check_spd(sp.diags(diag2).tocsr(), "semidefinite").passed


def test_spd_report_text(op8):
    A, _ = build_system_matrix(op8, 1.0, 1e-3, 1e-2, 0.5, 1.0, 0.5)
    rep = check_spd(A, "strict")
    text = rep.to_text()
    assert "strict" in text and "pass" in text


# ---------------------------------------------------------------------------
# conductivity validation and matrix output


def test_conductivity_validation():
    with pytest.raises(InvalidConductivityError):
        ConductivitySpec(tensor_i=((1.0, 2.0), (2.0, 1.0)))   # indefinite
    with pytest.raises(InvalidConductivityError):
        ConductivitySpec(tensor_i=((1.0, 0.5), (0.0, 1.0)))   # asymmetric
    with pytest.raises(InvalidConductivityError):
        ConductivitySpec(tensor_i=lambda x, y: np.eye(2))     # missing bounds

    def shrinking(x, y):
        return np.array([[1e-6, 0.0], [0.0, 1e-6]])

    spec = ConductivitySpec(tensor_i=shrinking, alpha=0.5, beta=2.0)
    mesh = build_unit_cell(UnitCellSpec(mesh_density=2))
    with pytest.raises(InvalidConductivityError):
        assemble(mesh, spec)   # samples violate the declared lower bound


def test_matrix_market_round_trip(tmp_path, op8):
    A, _ = build_system_matrix(op8, 1.0, 1e-3, 1e-2, 0.5, 1.0, 0.5)
    path = tmp_path / "system.mtx"
    dump_matrix_market(A, str(path))
    back = scipy.io.mmread(str(path)).tocsr()
    assert abs(A.tocsr() - back).max() == 0.0
