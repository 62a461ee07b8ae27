"""Sparse P1 operators for the three-region interface system.

Per region: stiffness with the region's conductivity tensor (sampled at
element centroids) and a volume mass matrix. Per interface: a 1D linear
mass matrix on the facet chain, plus 0/1 trace selectors from each side's
DOF block and the difference maps realizing v = u_i - u_e and s = u_i1 - u_i2.

The implicit-step matrix combines stiffness, the interface difference
masses scaled by the capacitive/ionic coefficients, and (optionally) a
regularizing mass term on all per-side traces and volumes that removes the
gauge degeneracy; at zero regularization the kernel is the global constant,
handled by a mean-zero Lagrange constraint on the extracellular field.
"""

from __future__ import annotations

import dataclasses

import numpy as np
import scipy.io
import scipy.linalg
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .geometry import GAMMA1, GAMMA2, GAMMA12, REGION_E, REGION_I1, REGION_I2


class InvalidConductivityError(ValueError):
    """A conductivity tensor violates symmetry or the ellipticity bounds."""


class ContractViolationError(ValueError):
    """An operation received input violating its contract."""


@dataclasses.dataclass(frozen=True)
class ConductivitySpec:
    """Conductivity tensors per region with declared ellipticity bounds.

    tensor_i / tensor_e: symmetric positive-definite 2x2 matrices, or
    callables (x, y) -> 2x2 for position-dependent tensors. alpha/beta are
    the declared eigenvalue bounds; for constant tensors they default to
    the exact extremal eigenvalues, for callables they must be given.
    """

    tensor_i: object = ((1.0, 0.0), (0.0, 1.0))
    tensor_e: object = ((1.0, 0.0), (0.0, 1.0))
    alpha: float = None
    beta: float = None

    def __post_init__(self):
        lo, hi = np.inf, -np.inf
        for name in ("tensor_i", "tensor_e"):
            t = getattr(self, name)
            if callable(t):
                if self.alpha is None or self.beta is None:
                    raise InvalidConductivityError(
                        "position-dependent tensors need declared alpha/beta bounds")
                continue
            t = np.asarray(t, dtype=float)
            object.__setattr__(self, name, t)
            e0, e1 = _sym_eigenvalues(name, t)
            lo, hi = min(lo, e0), max(hi, e1)
        if self.alpha is None:
            object.__setattr__(self, "alpha", lo)
        if self.beta is None:
            object.__setattr__(self, "beta", hi)
        if not 0.0 < self.alpha <= self.beta:
            raise InvalidConductivityError(
                f"need 0 < alpha <= beta, got alpha={self.alpha}, beta={self.beta}")
        for name in ("tensor_i", "tensor_e"):
            t = getattr(self, name)
            if not callable(t):
                _check_tensor(name, t, self.alpha, self.beta)

    def tensor_for(self, region):
        return self.tensor_i if region in (REGION_I1, REGION_I2) else self.tensor_e

    def tensors_at(self, region, points):
        """(n, 2, 2) tensor samples at the given points, validated."""
        t = self.tensor_for(region)
        if callable(t):
            out = np.array([np.asarray(t(x, y), dtype=float) for x, y in points])
            for k in range(len(out)):
                _check_tensor(f"tensor at {tuple(points[k])}", out[k],
                              self.alpha, self.beta)
            return out
        return np.broadcast_to(t, (len(points), 2, 2))


def _sym_eigenvalues(name, t):
    if t.shape != (2, 2):
        raise InvalidConductivityError(f"{name} must be 2x2, got shape {t.shape}")
    if t[0, 1] != t[1, 0]:
        raise InvalidConductivityError(f"{name} is not exactly symmetric")
    mean = 0.5 * (t[0, 0] + t[1, 1])
    radius = np.hypot(0.5 * (t[0, 0] - t[1, 1]), t[0, 1])
    return mean - radius, mean + radius


def _check_tensor(name, t, alpha, beta):
    e0, e1 = _sym_eigenvalues(name, t)
    slack = 1e-12 * max(1.0, beta)
    if e0 < alpha - slack or e1 > beta + slack or e0 <= 0.0:
        raise InvalidConductivityError(
            f"{name} eigenvalues [{e0:g}, {e1:g}] outside [{alpha:g}, {beta:g}]")


def _selector(rows_to_dofs, n_dofs):
    nm = len(rows_to_dofs)
    return sp.csr_matrix((np.ones(nm), (np.arange(nm), rows_to_dofs)),
                         shape=(nm, n_dofs))


class DofLayout:
    """Index blocks and trace/difference maps of the mesh's DOF vector.

    Potential DOFs are blocked [u_i1 | u_i2 | u_e]; gating vectors w1/w2
    live on the interface-node registries of gamma1/gamma2. Trace selectors
    S*_in/S*_out are 0/1 matrices; difference maps D1, D2, D12 have one +1
    and one -1 per row and realize v1, v2, s as linear maps on DOFs.
    """

    def __init__(self, mesh):
        self.mesh = mesh
        self.blocks = mesh.blocks
        self.n_dofs = mesh.n_dofs
        n = mesh.n_dofs
        g1, g2, g12 = mesh.gamma1, mesh.gamma2, mesh.gamma12
        self.n_m1, self.n_m2, self.n_m12 = g1.n_nodes, g2.n_nodes, g12.n_nodes
        self.S1_in = _selector(g1.pair_in, n)
        self.S1_out = _selector(g1.pair_out, n)
        self.S2_in = _selector(g2.pair_in, n)
        self.S2_out = _selector(g2.pair_out, n)
        self.S12_in = _selector(g12.pair_in, n)
        self.S12_out = _selector(g12.pair_out, n)
        self.D1 = (self.S1_in - self.S1_out).tocsr()
        self.D2 = (self.S2_in - self.S2_out).tocsr()
        self.D12 = (self.S12_in - self.S12_out).tocsr()

    def v1(self, u):
        return self.D1 @ u

    def v2(self, u):
        return self.D2 @ u

    def s(self, u):
        return self.D12 @ u


class BlockOperator:
    """Assembled sparse blocks of the coupled system.

    K1/K2/Ke: per-region stiffness (global-sized, entries in one block);
    Kplain1/Kplain2/Kplaine: unit-tensor stiffness used by the trace-
    inequality diagnostics; Mvol1/Mvol2/Mvole: per-region volume mass;
    B1/B2/B12: interface-chain mass matrices in interface-node numbering;
    constraint: the vector of e-block integrals representing the mean-zero
    condition on u_e.
    """

    def __init__(self, mesh, layout, stiffness, plain_stiffness, volume_mass,
                 interface_mass, constraint):
        self.mesh = mesh
        self.layout = layout
        self.K1 = stiffness[REGION_I1]
        self.K2 = stiffness[REGION_I2]
        self.Ke = stiffness[REGION_E]
        self.Kplain1 = plain_stiffness[REGION_I1]
        self.Kplain2 = plain_stiffness[REGION_I2]
        self.Kplaine = plain_stiffness[REGION_E]
        self.Mvol1 = volume_mass[REGION_I1]
        self.Mvol2 = volume_mass[REGION_I2]
        self.Mvole = volume_mass[REGION_E]
        self.B1 = interface_mass[GAMMA1]
        self.B2 = interface_mass[GAMMA2]
        self.B12 = interface_mass[GAMMA12]
        self.constraint = constraint
        self.K = (self.K1 + self.K2 + self.Ke).tocsr()
        self._membrane_mass = None
        self._gap_mass = None
        self._reg_mass = None

    def membrane_difference_mass(self):
        """D1' B1 D1 + D2' B2 D2: the sarcolemma part of the interface operator."""
        if self._membrane_mass is None:
            lay = self.layout
            self._membrane_mass = (lay.D1.T @ self.B1 @ lay.D1
                                   + lay.D2.T @ self.B2 @ lay.D2).tocsr()
        return self._membrane_mass

    def gap_difference_mass(self):
        """D12' B12 D12: the gap-junction part of the interface operator."""
        if self._gap_mass is None:
            lay = self.layout
            self._gap_mass = (lay.D12.T @ self.B12 @ lay.D12).tocsr()
        return self._gap_mass

    def interface_operator(self, c_ratio=0.5):
        """Membrane difference masses plus c_ratio times the gap one.

        This is the positive-semidefinite interface block whose quadratic
        form equals sum_k |trace difference|^2 on each membrane plus
        c_ratio * |gap difference|^2.
        """
        return (self.membrane_difference_mass()
                + c_ratio * self.gap_difference_mass()).tocsr()

    def regularization_mass(self):
        """Per-side trace masses on all interfaces plus all volume masses."""
        if self._reg_mass is None:
            lay = self.layout
            trace = (lay.S1_in.T @ self.B1 @ lay.S1_in
                     + lay.S1_out.T @ self.B1 @ lay.S1_out
                     + lay.S2_in.T @ self.B2 @ lay.S2_in
                     + lay.S2_out.T @ self.B2 @ lay.S2_out
                     + lay.S12_in.T @ self.B12 @ lay.S12_in
                     + lay.S12_out.T @ self.B12 @ lay.S12_out)
            self._reg_mass = (trace + self.Mvol1 + self.Mvol2 + self.Mvole).tocsr()
        return self._reg_mass

    @property
    def omega_e_area(self):
        return float(self.constraint.sum())


def _assemble_stiffness(mesh, coeff_tensors):
    """Scatter per-triangle P1 stiffness A * grad' M grad into region blocks."""
    tris = mesh.triangles
    p = mesh.nodes[tris]                       # (m, 3, 2)
    area = mesh.tri_area
    # gradient of barycentric i: opposite edge rotated +90deg over 2A
    e = p[:, [2, 0, 1], :] - p[:, [1, 2, 0], :]
    grads = np.empty_like(e)
    grads[:, :, 0] = -e[:, :, 1]
    grads[:, :, 1] = e[:, :, 0]
    grads /= (2.0 * area)[:, None, None]
    local = np.einsum("tid,tde,tje->tij", grads, coeff_tensors, grads)
    local *= area[:, None, None]
    rows = np.repeat(tris, 3, axis=1)
    cols = np.tile(tris, (1, 3))
    out = {}
    for region in (REGION_I1, REGION_I2, REGION_E):
        mask = mesh.tri_region == region
        out[region] = sp.coo_matrix(
            (local[mask].ravel(), (rows[mask].ravel(), cols[mask].ravel())),
            shape=(mesh.n_dofs, mesh.n_dofs)).tocsr()
    return out


def _assemble_volume_mass(mesh):
    tris = mesh.triangles
    area = mesh.tri_area
    base = np.array([[2.0, 1.0, 1.0], [1.0, 2.0, 1.0], [1.0, 1.0, 2.0]]) / 12.0
    local = area[:, None, None] * base
    out = {}
    for region in (REGION_I1, REGION_I2, REGION_E):
        mask = mesh.tri_region == region
        t = tris[mask]
        rows = np.repeat(t, 3, axis=1).ravel()
        cols = np.tile(t, (1, 3)).ravel()
        out[region] = sp.coo_matrix(
            (local[mask].ravel(), (rows, cols)),
            shape=(mesh.n_dofs, mesh.n_dofs)).tocsr()
    return out


def _assemble_interface_mass(facets):
    """1D linear mass on the facet chain, in interface-node numbering."""
    nm = facets.n_nodes
    if facets.n_facets == 0:
        return sp.csr_matrix((nm, nm))
    base = np.array([[2.0, 1.0], [1.0, 2.0]]) / 6.0
    local = facets.lengths[:, None, None] * base
    rows = np.repeat(facets.slots, 2, axis=1).ravel()
    cols = np.tile(facets.slots, (1, 2)).ravel()
    return sp.coo_matrix((local.ravel(), (rows, cols)), shape=(nm, nm)).tocsr()


def assemble(mesh, cond):
    """Assemble all P1 blocks of the coupled system for one mesh."""
    centroids = mesh.nodes[mesh.triangles].mean(axis=1)
    tensors = np.empty((len(mesh.triangles), 2, 2))
    for region in (REGION_I1, REGION_I2, REGION_E):
        mask = mesh.tri_region == region
        tensors[mask] = cond.tensors_at(region, centroids[mask])
    identity = np.broadcast_to(np.eye(2), (len(mesh.triangles), 2, 2))

    layout = DofLayout(mesh)
    stiffness = _assemble_stiffness(mesh, tensors)
    plain = _assemble_stiffness(mesh, identity)
    volume = _assemble_volume_mass(mesh)
    interface = {GAMMA1: _assemble_interface_mass(mesh.gamma1),
                 GAMMA2: _assemble_interface_mass(mesh.gamma2),
                 GAMMA12: _assemble_interface_mass(mesh.gamma12)}
    constraint = np.asarray(volume[REGION_E] @ np.ones(mesh.n_dofs))
    return BlockOperator(mesh, layout, stiffness, plain, volume, interface,
                         constraint)


def build_system_matrix(op, eps, delta, dt, beta1, G_gap, C_ratio):
    """Implicit-step matrix and the mean-zero constraint vector.

    A = stiffness
        + (eps/dt + beta1*eps) * (membrane difference mass)
        + (C_ratio*eps/dt + C_ratio*G_gap*eps) * (gap difference mass)
        + (delta/dt) * (per-side trace + volume masses).

    With delta = 0, A has the one-dimensional kernel of global constants;
    the returned constraint vector (integral of u_e) removes it in the
    bordered solve.
    """
    if not (eps > 0 and dt > 0 and delta >= 0):
        raise ContractViolationError(
            f"need eps > 0, dt > 0, delta >= 0; got {eps}, {dt}, {delta}")
    a = (op.K
         + (eps / dt + beta1 * eps) * op.membrane_difference_mass()
         + (C_ratio * eps / dt + C_ratio * G_gap * eps) * op.gap_difference_mass())
    if delta > 0:
        a = a + (delta / dt) * op.regularization_mass()
    return a.tocsr(), op.constraint.copy()


@dataclasses.dataclass
class SpdReport:
    mode: str
    value: float      # min pivot (strict) or most negative Ritz value
    norm: float       # largest-magnitude eigenvalue
    passed: bool
    n: int

    def to_text(self):
        kind = "min pivot" if self.mode == "strict" else "most negative Ritz value"
        verdict = "pass" if self.passed else "fail"
        return (f"{self.mode} ({self.n} x {self.n}): {kind} = {self.value:.6e}, "
                f"|A| = {self.norm:.6e} -> {verdict}")


def check_spd(matrix, mode, rtol=1e-10):
    """Positive-definiteness report for a symmetric sparse matrix.

    strict: symmetric factorization, passes when the minimum pivot exceeds
    rtol * |A| (a singular matrix produces a roundoff-sized pivot of either
    sign, so a scaled threshold is required). semidefinite: smallest
    eigenvalue, passes when it is no more negative than -rtol * |A|.
    Asymmetric input is a contract violation.
    """
    a = matrix.tocsr() if sp.issparse(matrix) else sp.csr_matrix(matrix)
    asym = abs(a - a.T)
    if asym.nnz and asym.max() > 0.0:
        raise ContractViolationError("matrix is not exactly symmetric")
    if mode not in ("strict", "semidefinite"):
        raise ContractViolationError(f"unknown mode {mode!r}")
    n = a.shape[0]
    if n <= 4000:
        dense = a.toarray()
        eigs = np.linalg.eigvalsh(dense)
        norm = float(max(abs(eigs[0]), abs(eigs[-1])))
        if mode == "strict":
            _, d, _ = scipy.linalg.ldl(dense)
            value = float(np.linalg.eigvalsh(d).min())
            return SpdReport(mode, value, norm, value > rtol * norm, n)
        value = float(eigs[0])
        return SpdReport(mode, value, norm, value >= -rtol * norm, n)
    # large-scale path: extremal Ritz values from Lanczos
    top = float(spla.eigsh(a, k=1, which="LM", return_eigenvectors=False)[0])
    norm = abs(top)
    low = float(spla.eigsh(a, k=1, which="SA", maxiter=5000,
                           return_eigenvectors=False)[0])
    if mode == "strict":
        return SpdReport(mode, low, norm, low > rtol * norm, n)
    return SpdReport(mode, low, norm, low >= -rtol * norm, n)


def dump_matrix_market(matrix, path):
    """Write a sparse matrix in Matrix Market coordinate format."""
    scipy.io.mmwrite(path, sp.coo_matrix(matrix))
