"""Linearly implicit time stepping for the coupled interface system.

One step solves a single symmetric linear system: capacitive interface
terms, stiffness, the linear ionic stabilization, and the gap conductance
are implicit; the cubic ionic part is explicit; the gating ODE is updated
first from the current traces. The extracellular mean-zero condition is
enforced every step through a Lagrange multiplier row, keeping the system
symmetric. With regularization delta > 0 a backward-difference mass term
on all volume and per-side trace blocks removes the gauge degeneracy.
"""

from __future__ import annotations

import dataclasses
import logging
import math

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .assembly import build_system_matrix
from .geometry import REGION_E, REGION_I1, REGION_I2

log = logging.getLogger(__name__)


class SolverFailure(RuntimeError):
    """The linear solve did not reach the requested tolerance."""

    def __init__(self, message, residual):
        super().__init__(f"{message} (residual {residual:.3e})")
        self.message = message
        self.residual = residual


class DivergenceError(RuntimeError):
    """The state left the range of finite floating-point numbers."""


@dataclasses.dataclass(frozen=True)
class AppliedCurrent:
    """Spatially uniform applied membrane current: zero, constant, or pulse."""

    kind: str = "zero"
    amplitude: float = 0.0
    t_on: float = 0.0
    t_off: float = math.inf

    def __post_init__(self):
        if self.kind not in ("zero", "constant", "pulse"):
            raise ValueError(f"unknown applied-current kind {self.kind!r}")
        if self.kind == "pulse" and not self.t_on < self.t_off:
            raise ValueError("pulse needs t_on < t_off")

    def value(self, t):
        if self.kind == "zero":
            return 0.0
        if self.kind == "constant":
            return self.amplitude
        return self.amplitude if self.t_on <= t < self.t_off else 0.0


@dataclasses.dataclass(frozen=True)
class SolverConfig:
    """Time-stepping and linear-solver parameters.

    eps scales every interface term; delta >= 0 adds the regularizing
    backward-difference mass; C_ratio is the gap-to-membrane capacitance
    ratio; gating_scheme picks the w update (forward Euler, the exact
    integral of the linear ODE with v frozen, or frozen = no update, the
    H == 0 sub-case of the dissipativity analysis); ionic_mode "full"
    keeps the explicit cubic, "linear" replaces the cubic by its implicit
    beta1-linearization (the dissipative mode); iapp1/iapp2 force the two
    membranes; linear_solver picks the bordered-system solver.
    """

    eps: float = 1.0
    delta: float = 0.0
    dt: float = 1e-2
    t_end: float = 1e-1
    C_ratio: float = 0.5
    lin_tol: float = 1e-10
    lin_maxit: int = 2000
    gating_scheme: str = "explicit_euler"
    ionic_mode: str = "full"
    iapp1: AppliedCurrent = AppliedCurrent()
    iapp2: AppliedCurrent = AppliedCurrent()
    linear_solver: str = "direct"

    def __post_init__(self):
        if not (self.eps > 0 and self.dt > 0 and self.delta >= 0):
            raise ValueError("need eps > 0, dt > 0, delta >= 0")
        if not 0.0 < self.lin_tol < 1.0:
            raise ValueError("lin_tol must lie in (0, 1)")
        if self.gating_scheme not in ("explicit_euler", "exact_linear", "frozen"):
            raise ValueError(f"unknown gating scheme {self.gating_scheme!r}")
        if self.ionic_mode not in ("full", "linear"):
            raise ValueError(f"unknown ionic mode {self.ionic_mode!r}")
        if self.linear_solver not in ("direct", "minres"):
            raise ValueError(f"unknown linear solver {self.linear_solver!r}")
        if not self.C_ratio > 0:
            raise ValueError("C_ratio must be positive")


class SystemState:
    """Nodal potentials, gating variables, and the derived interface traces.

    u holds the potential DOFs blocked [u_i1 | u_i2 | u_e]; u1/u2/ue are
    views into it. v1, v2, s are the membrane and gap differences realized
    by the layout's difference maps.
    """

    def __init__(self, layout, u, w1, w2, t=0.0, step_index=0):
        self.layout = layout
        self.u = np.array(u, dtype=float, copy=True)
        self.w1 = np.array(w1, dtype=float, copy=True)
        self.w2 = np.array(w2, dtype=float, copy=True)
        self.t = float(t)
        self.step_index = int(step_index)
        if self.u.shape != (layout.n_dofs,):
            raise ValueError("potential vector does not match the layout")
        if self.w1.shape != (layout.n_m1,) or self.w2.shape != (layout.n_m2,):
            raise ValueError("gating vectors do not match the interface registries")

    @classmethod
    def zeros(cls, layout):
        return cls(layout, np.zeros(layout.n_dofs), np.zeros(layout.n_m1),
                   np.zeros(layout.n_m2))

    @property
    def u1(self):
        return self.u[self.layout.blocks[REGION_I1]]

    @property
    def u2(self):
        return self.u[self.layout.blocks[REGION_I2]]

    @property
    def ue(self):
        return self.u[self.layout.blocks[REGION_E]]

    @property
    def v1(self):
        return self.layout.v1(self.u)

    @property
    def v2(self):
        return self.layout.v2(self.u)

    @property
    def s(self):
        return self.layout.s(self.u)

    def is_finite(self):
        return bool(np.isfinite(self.u).all() and np.isfinite(self.w1).all()
                    and np.isfinite(self.w2).all())

    def norm(self):
        return math.sqrt(float(self.u @ self.u) + float(self.w1 @ self.w1)
                         + float(self.w2 @ self.w2))

    def copy(self):
        return SystemState(self.layout, self.u, self.w1, self.w2, self.t,
                           self.step_index)


@dataclasses.dataclass
class StepReport:
    iterations: int
    residual: float
    flux_balance: dict
    max_change: float
    converged: bool


class BorderedSolver:
    """Solver for the symmetric bordered system [[A, c], [c^T, 0]].

    direct: sparse LU factored once, with one sweep of iterative
    refinement when the first solve misses the tolerance. minres: the
    conjugate-direction fallback on the same symmetric indefinite system.
    """

    def __init__(self, matrix, constraint, config):
        self.config = config
        c = sp.csr_matrix(constraint[None, :])
        self.bordered = sp.bmat([[matrix, c.T], [c, None]], format="csc")
        self.n = matrix.shape[0]
        self._lu = None
        self._precond = None
        if config.linear_solver == "direct":
            self._lu = spla.splu(self.bordered)
        else:
            # Jacobi preconditioner; the border row has a zero diagonal,
            # so it gets the mean weight instead
            d = matrix.diagonal().copy()
            d[d <= 0.0] = 1.0
            self._precond = sp.diags(np.concatenate([1.0 / d,
                                                     [1.0 / d.mean()]])).tocsr()

    def solve(self, rhs, constraint_rhs=0.0):
        """Return (solution, multiplier, iterations, residual)."""
        b = np.concatenate([rhs, [constraint_rhs]])
        scale = float(np.linalg.norm(b))
        if scale == 0.0:
            return np.zeros(self.n), 0.0, 0, 0.0
        if self._lu is not None:
            x = self._lu.solve(b)
            res = float(np.linalg.norm(self.bordered @ x - b)) / scale
            its = 1
            if res > self.config.lin_tol:
                x = x + self._lu.solve(b - self.bordered @ x)
                res = float(np.linalg.norm(self.bordered @ x - b)) / scale
                its = 2
        else:
            count = [0]

            def tick(_xk):
                count[0] += 1

            # request two digits beyond the target: the built-in stopping
            # estimate is optimistic, and the true residual is checked below
            x, info = spla.minres(self.bordered, b,
                                  rtol=max(1e-2 * self.config.lin_tol, 1e-15),
                                  maxiter=self.config.lin_maxit,
                                  M=self._precond, callback=tick)
            res = float(np.linalg.norm(self.bordered @ x - b)) / scale
            its = count[0]
            if info != 0 and res > self.config.lin_tol:
                raise SolverFailure("minres stagnated", res)
        if not np.isfinite(x).all():
            raise DivergenceError("linear solve produced non-finite values")
        if res > self.config.lin_tol:
            raise SolverFailure("linear solve missed tolerance", res)
        return x[:-1], float(x[-1]), its, res


def _nodal_values(spec, coords, name):
    """Evaluate an initial-data spec (scalar, callable, or array) at nodes."""
    if spec is None:
        return np.zeros(len(coords))
    if callable(spec):
        arr = np.array([float(spec(x, y)) for x, y in coords])
    else:
        arr = np.asarray(spec, dtype=float)
        if arr.ndim == 0:
            arr = np.full(len(coords), float(arr))
        elif arr.shape != (len(coords),):
            raise ValueError(f"{name} array has shape {arr.shape}, "
                             f"expected ({len(coords)},)")
        else:
            arr = arr.copy()
    if not np.isfinite(arr).all():
        raise ValueError(f"{name} contains non-finite values")
    return arr


def gap_endpoint_mask(mesh):
    """True for gap-registry nodes that also lie on both sarcolemmas.

    Where the gap segment meets the box boundary the three interface
    chains share a node and v1 - v2 = s is forced by the trace identities,
    so the gap constraint row is linearly dependent there.
    """
    in1 = set(mesh.gamma1.pair_in.tolist())
    in2 = set(mesh.gamma2.pair_in.tolist())
    g = mesh.gamma12
    return np.array([a in in1 and b in in2
                     for a, b in zip(g.pair_in, g.pair_out)], dtype=bool)


def initialize(op, config, v0_spec=(0.0, 0.0), w0_spec=(0.0, 0.0), s0_spec=0.0):
    """Build the initial state from membrane/gap trace data.

    v0_spec = (data on gamma1, data on gamma2) and s0_spec prescribe the
    interface differences; each entry is a scalar, a callable (x, y), or a
    nodal array. Interior potentials come from one stiffness-energy
    minimization constrained to the prescribed traces and mean-zero u_e
    (a symmetric saddle-point solve); gating starts from w0_spec. Where
    the gap chain meets the sarcolemmas the prescribed s is overridden by
    v0_1 - v0_2, which the trace identities force there.
    """
    mesh = op.mesh
    lay = op.layout
    t1 = _nodal_values(v0_spec[0], mesh.gamma1.coords, "v0 on gamma1")
    t2 = _nodal_values(v0_spec[1], mesh.gamma2.coords, "v0 on gamma2")
    ts = _nodal_values(s0_spec, mesh.gamma12.coords, "s0")
    w1 = _nodal_values(w0_spec[0], mesh.gamma1.coords, "w0 on gamma1")
    w2 = _nodal_values(w0_spec[1], mesh.gamma2.coords, "w0 on gamma2")

    keep = ~gap_endpoint_mask(mesh)
    rows = [lay.D1, lay.D2, lay.D12[keep], sp.csr_matrix(op.constraint[None, :])]
    targets = np.concatenate([t1, t2, ts[keep], [0.0]])
    con = sp.vstack(rows, format="csr")
    n, m = lay.n_dofs, con.shape[0]
    kkt = sp.bmat([[op.K.tocsr(), con.T], [con, None]], format="csc")
    b = np.concatenate([np.zeros(n), targets])
    x = spla.splu(kkt).solve(b)
    scale = max(1.0, float(np.linalg.norm(b)))
    res = float(np.linalg.norm(kkt @ x - b)) / scale
    if not np.isfinite(x).all() or res > config.lin_tol:
        raise SolverFailure("initialization solve missed tolerance", res)
    u = x[:n]

    state = SystemState(lay, u, w1, w2, t=0.0, step_index=0)
    e = config.eps
    log.info("initial scaled norms: |sqrt(eps) v1|=%.6e |sqrt(eps) v2|=%.6e "
             "|sqrt(eps) s|=%.6e |sqrt(eps) w1|=%.6e |sqrt(eps) w2|=%.6e",
             math.sqrt(e * float(t1 @ (op.B1 @ t1))),
             math.sqrt(e * float(t2 @ (op.B2 @ t2))),
             math.sqrt(e * float(ts @ (op.B12 @ ts))),
             math.sqrt(e * float(w1 @ (op.B1 @ w1))),
             math.sqrt(e * float(w2 @ (op.B2 @ w2))))
    return state


def _gating_update(v, w, model, config):
    dt = config.dt
    if config.gating_scheme == "frozen":
        return w.copy()
    if config.gating_scheme == "explicit_euler":
        return w + dt * model.gating_rhs(v, w)
    if model.b1 == 0.0:
        return w + dt * model.a1 * v
    decay = math.exp(-model.b1 * dt)
    return decay * w + (model.a1 / model.b1) * (-math.expm1(-model.b1 * dt)) * v


def _explicit_membrane_rhs(v, w_new, iapp_val, model, config):
    """Known part of the membrane current, moved to the right-hand side.

    full mode: the cubic stays explicit, so the bracket
    I_a(v^n) + beta1 (v^{n+1} - v^n) + I_b(w^{n+1}) leaves
    (1/dt + beta1) v^n - I_a(v^n) - I_b(w^{n+1}) + I_app on the right.
    linear mode: the cubic is replaced by beta1 v^{n+1} (fully implicit),
    leaving (1/dt) v^n - I_b(w^{n+1}) + I_app.
    """
    e, dt = config.eps, config.dt
    if config.ionic_mode == "linear":
        return e * (v / dt - model.i_b(w_new) + iapp_val)
    return e * ((1.0 / dt + model.beta1) * v - model.i_a(v)
                - model.i_b(w_new) + iapp_val)


def step(state, op, model, gap, config, solver=None):
    """Advance one time step; returns (new state, StepReport).

    Gating is updated first from the current traces, then one bordered
    solve advances the potentials with the cubic ionic part explicit and
    everything else implicit, then the interface flux balances of the
    three subdomains are assembled from the old and new states.
    """
    if not state.is_finite():
        raise DivergenceError(f"non-finite state at t={state.t:.6g}")
    lay = op.layout
    e, dt, cr = config.eps, config.dt, config.C_ratio
    t_n = state.step_index * dt
    v1n, v2n, sn = state.v1, state.v2, state.s

    w1_new = _gating_update(v1n, state.w1, model, config)
    w2_new = _gating_update(v2n, state.w2, model, config)

    if solver is None:
        matrix, constraint = build_system_matrix(
            op, e, config.delta, dt, model.beta1, gap.G_gap, cr)
        solver = BorderedSolver(matrix, constraint, config)

    g1 = _explicit_membrane_rhs(v1n, w1_new, config.iapp1.value(t_n), model,
                                config)
    g2 = _explicit_membrane_rhs(v2n, w2_new, config.iapp2.value(t_n), model,
                                config)
    rhs = lay.D1.T @ (op.B1 @ g1) + lay.D2.T @ (op.B2 @ g2)
    rhs += lay.D12.T @ (op.B12 @ (cr * e / dt * sn))
    if config.delta > 0:
        rhs += (config.delta / dt) * (op.regularization_mass() @ state.u)

    u_new, mult, its, res = solver.solve(rhs)
    if not np.isfinite(u_new).all():
        raise DivergenceError(f"non-finite potentials after step at t={t_n:.6g}")

    new = SystemState(lay, u_new, w1_new, w2_new, t=(state.step_index + 1) * dt,
                      step_index=state.step_index + 1)
    balance = flux_balance(state, new, op, model, gap, config, multiplier=mult)
    max_change = max(float(np.max(np.abs(u_new - state.u), initial=0.0)),
                     float(np.max(np.abs(w1_new - state.w1), initial=0.0)),
                     float(np.max(np.abs(w2_new - state.w2), initial=0.0)))
    report = StepReport(iterations=its, residual=res, flux_balance=balance,
                        max_change=max_change, converged=res <= config.lin_tol)
    return new, report


def membrane_currents(old, new, model, config):
    """Nodal I_m on both membranes, exactly as the step discretized them.

    full mode: I_m^k = eps [ (v+ - v)/dt + I_a(v) + beta1 (v+ - v)
                             + I_b(w+) - I_app(t) ];
    linear mode: I_m^k = eps [ (v+ - v)/dt + beta1 v+ + I_b(w+) - I_app(t) ].
    """
    e, dt = config.eps, config.dt
    t_n = old.step_index * dt
    out = {}
    for tag, vo, vn, wn, iapp in (("gamma1", old.v1, new.v1, new.w1, config.iapp1),
                                  ("gamma2", old.v2, new.v2, new.w2, config.iapp2)):
        if config.ionic_mode == "linear":
            ionic = model.beta1 * vn
        else:
            ionic = model.i_a(vo) + model.beta1 * (vn - vo)
        out[tag] = e * ((vn - vo) / dt + ionic + model.i_b(wn) - iapp.value(t_n))
    return out


def flux_balance(old, new, op, model, gap, config, multiplier=0.0):
    """Discrete divergence-theorem residuals of the three subdomains.

    Assembled independently of the solver from the two state snapshots:
    the net capacitive-ionic current leaving each subdomain through its
    interfaces (plus the delta-mass and multiplier bookkeeping when
    active) must vanish to solver precision.
    """
    lay = op.layout
    e, dt, cr = config.eps, config.dt, config.C_ratio
    cur = membrane_currents(old, new, model, config)
    i_gap = cr * e * ((new.s - old.s) / dt + gap.G_gap * new.s)
    sum1 = float((op.B1 @ cur["gamma1"]).sum())
    sum2 = float((op.B2 @ cur["gamma2"]).sum())
    sum_gap = float((op.B12 @ i_gap).sum())

    bal = {"omega_i1": sum1 + sum_gap,
           "omega_i2": sum2 - sum_gap,
           "omega_e": -sum1 - sum2 + multiplier * op.omega_e_area}
    if config.delta > 0:
        du = (config.delta / dt) * (new.u - old.u)
        for tag, sel_t, sel_v in (
                ("omega_i1",
                 (lay.S1_in.T @ op.B1 @ lay.S1_in
                  + lay.S12_in.T @ op.B12 @ lay.S12_in), op.Mvol1),
                ("omega_i2",
                 (lay.S2_in.T @ op.B2 @ lay.S2_in
                  + lay.S12_out.T @ op.B12 @ lay.S12_out), op.Mvol2),
                ("omega_e",
                 (lay.S1_out.T @ op.B1 @ lay.S1_out
                  + lay.S2_out.T @ op.B2 @ lay.S2_out), op.Mvole)):
            bal[tag] += float((sel_t @ du).sum() + (sel_v @ du).sum())
    return bal


@dataclasses.dataclass
class Trajectory:
    """Time series and snapshots from a run."""

    times: list
    reports: list
    probe_rows: list
    states: list
    final_state: SystemState

    @property
    def n_steps(self):
        return len(self.reports)


def run(op, model, gap, config, state=None, probes=(), stride=1):
    """Iterate step() from t to t_end; probe at the given stride.

    Probes are callables (state, op) -> mapping, invoked on the initial
    state and after every stride-th step (and always on the final one);
    their rows land in probe_rows. Snapshot states are kept at the same
    stride. The system matrix is factored once and reused.
    """
    if config.t_end < config.dt:
        raise ValueError("t_end must be at least one dt")
    if state is None:
        state = SystemState.zeros(op.layout)
    n_steps = int(round(config.t_end / config.dt))

    matrix, constraint = build_system_matrix(
        op, config.eps, config.delta, config.dt, model.beta1, gap.G_gap,
        config.C_ratio)
    solver = BorderedSolver(matrix, constraint, config)

    def snapshot(st, rep):
        row = {"t": st.t, "step": st.step_index}
        if rep is not None:
            row["residual"] = rep.residual
            row.update({f"flux_{k}": val for k, val in rep.flux_balance.items()})
        for probe in probes:
            row.update(probe(st, op))
        probe_rows.append(row)
        states.append(st.copy())

    times, reports, probe_rows, states = [state.t], [], [], []
    snapshot(state, None)
    for k in range(n_steps):
        t_fail = (k + 1) * config.dt
        try:
            state, report = step(state, op, model, gap, config, solver=solver)
        except SolverFailure as exc:
            raise SolverFailure(f"step {k + 1} at t={t_fail:.6g}: {exc.message}",
                                exc.residual) from exc
        except DivergenceError as exc:
            raise DivergenceError(f"step {k + 1} at t={t_fail:.6g}: {exc}") from exc
        times.append(state.t)
        reports.append(report)
        if (k + 1) % stride == 0 or k + 1 == n_steps:
            snapshot(state, report)
    return Trajectory(times, reports, probe_rows, states, state)
