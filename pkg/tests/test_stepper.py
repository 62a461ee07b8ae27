"""Time integration against a dense reference step and exact invariants."""

import math

import numpy as np
import pytest

from tridomain.ionics import GapModel, IonicModel
from tridomain.stepper import (AppliedCurrent, DivergenceError, SolverConfig,
                               SolverFailure, SystemState, gap_endpoint_mask,
                               initialize, membrane_currents, run, step)

MODEL = IonicModel()
GAP = GapModel()


def make_config(**kw):
    base = dict(dt=1e-2, t_end=1e-1, lin_tol=1e-10)
    base.update(kw)
    return SolverConfig(**base)


# ---------------------------------------------------------------------------
# dense single-step reference


def dense_reference_step(state, op, model, gap, config):
    """Compose and solve the bordered step with plain dense algebra."""
    lay = op.layout
    e, dt, cr, delta = config.eps, config.dt, config.C_ratio, config.delta
    t_n = state.step_index * dt

    def gating(v, w):
        if config.gating_scheme == "frozen":
            return w
        if config.gating_scheme == "explicit_euler":
            return w + dt * (model.a1 * v - model.b1 * w)
        lam = math.exp(-model.b1 * dt)
        return lam * w + (model.a1 / model.b1) * (1.0 - lam) * v

    w1 = gating(state.v1, state.w1)
    w2 = gating(state.v2, state.w2)

    def explicit(v, w_new, iapp):
        if config.ionic_mode == "linear":
            return e * (v / dt - model.i_b(w_new) + iapp)
        return e * ((1.0 / dt + model.beta1) * v - model.i_a(v)
                    - model.i_b(w_new) + iapp)

    D1 = lay.D1.toarray()
    D2 = lay.D2.toarray()
    D12 = lay.D12.toarray()
    B1 = op.B1.toarray()
    B2 = op.B2.toarray()
    B12 = op.B12.toarray()
    A = (op.K.toarray()
         + (e / dt + model.beta1 * e) * (D1.T @ B1 @ D1 + D2.T @ B2 @ D2)
         + (cr * e / dt + gap.G_gap * cr * e) * (D12.T @ B12 @ D12)
         + (delta / dt) * op.regularization_mass().toarray())
    rhs = (D1.T @ B1 @ explicit(state.v1, w1, config.iapp1.value(t_n))
           + D2.T @ B2 @ explicit(state.v2, w2, config.iapp2.value(t_n))
           + D12.T @ B12 @ (cr * e / dt * state.s)
           + (delta / dt) * (op.regularization_mass().toarray() @ state.u))

    n = len(rhs)
    c = np.asarray(op.constraint.todense()).ravel() \
        if hasattr(op.constraint, "todense") else np.asarray(op.constraint)
    kkt = np.zeros((n + 1, n + 1))
    kkt[:n, :n] = A
    kkt[:n, n] = c
    kkt[n, :n] = c
    full = np.zeros(n + 1)
    full[:n] = rhs
    sol = np.linalg.solve(kkt, full)
    return sol[:n], w1, w2


@pytest.mark.parametrize("kw", [
    dict(),
    dict(delta=1e-3),
    dict(eps=0.1, gating_scheme="explicit_euler"),
    dict(ionic_mode="linear", gating_scheme="frozen"),
    dict(iapp1=AppliedCurrent(kind="constant", amplitude=2.0)),
])
def test_step_matches_dense_reference(op4, kw):
    config = make_config(**kw)
    state = initialize(op4, config, v0_spec=(0.3, -0.1), w0_spec=(0.05, 0.0),
                       s0_spec=0.1)
    new, report = step(state, op4, MODEL, GAP, config)
    u_ref, w1_ref, w2_ref = dense_reference_step(state, op4, MODEL, GAP,
                                                 config)
    scale = max(1.0, np.abs(u_ref).max())
    assert np.abs(new.u - u_ref).max() < 1e-9 * scale
    assert np.allclose(new.w1, w1_ref, atol=1e-14)
    assert np.allclose(new.w2, w2_ref, atol=1e-14)
    assert report.converged


# ---------------------------------------------------------------------------
# initialization


def test_initialize_traces(op8):
    config = make_config()
    state = initialize(op8, config, v0_spec=(0.3, 0.0), w0_spec=(0.1, 0.2),
                       s0_spec=0.0)
    mask = gap_endpoint_mask(op8.mesh)
    assert np.abs(state.v1 - 0.3).max() < 1e-12
    assert np.abs(state.v2).max() < 1e-12
    # interior gap nodes carry the requested jump; endpoints shared with
    # both sarcolemmas are forced to v1 - v2 by the trace identities
    assert np.abs(state.s[~mask]).max() < 1e-12
    assert np.abs(state.s[mask] - 0.3).max() < 1e-12
    assert np.all(state.w1 == 0.1)
    assert np.all(state.w2 == 0.2)
    # extracellular gauge
    assert abs(op8.constraint @ state.u) < 1e-12
    assert state.t == 0.0 and state.step_index == 0


def test_initialize_callable_data(op8):
    config = make_config()

    def v0(x, y):
        return np.sin(x + y)

    state = initialize(op8, config, v0_spec=(v0, 0.0))
    coords = op8.mesh.gamma1.coords
    assert np.allclose(state.v1, np.sin(coords[:, 0] + coords[:, 1]),
                       atol=1e-10)


def test_initialize_minimizes_energy(op8):
    # the lifted potentials solve a constrained minimization, so any other
    # field with the same traces has larger conduction energy
    config = make_config()
    state = initialize(op8, config, v0_spec=(0.4, -0.2), s0_spec=0.05)
    base = state.u @ (op8.K @ state.u)
    rng = np.random.default_rng(3)
    for _ in range(5):
        # perturb away from the interfaces so the traces are untouched
        pert = rng.standard_normal(len(state.u))
        touched = np.zeros(len(state.u), dtype=bool)
        for fs in (op8.mesh.gamma1, op8.mesh.gamma2, op8.mesh.gamma12):
            touched[fs.pair_in] = True
            touched[fs.pair_out] = True
        pert[touched] = 0.0
        pert -= (op8.constraint @ pert) / op8.omega_e_area
        trial = state.u + 0.1 * pert
        assert trial @ (op8.K @ trial) > base - 1e-12


# ---------------------------------------------------------------------------
# exact invariants


def test_zero_data_stays_exactly_zero(op8):
    config = make_config(t_end=0.1)
    traj = run(op8, MODEL, GAP, config)
    final = traj.final_state
    assert np.all(final.u == 0.0)
    assert np.all(final.w1 == 0.0)
    assert np.all(final.w2 == 0.0)
    assert all(r.max_change == 0.0 for r in traj.reports)


def test_gauge_shift_invariance(op8):
    # delta = 0: adding a global constant to the potentials changes no
    # membrane quantity
    config = make_config(delta=0.0, t_end=5e-2)
    state = initialize(op8, config, v0_spec=(0.2, -0.1), w0_spec=(0.05, 0.0))
    shifted = state.copy()
    shifted.u = shifted.u + 5.0
    a, _ = step(state, op8, MODEL, GAP, config)
    b, _ = step(shifted, op8, MODEL, GAP, config)
    tol = 10 * config.lin_tol
    assert np.abs(a.v1 - b.v1).max() < tol
    assert np.abs(a.v2 - b.v2).max() < tol
    assert np.abs(a.s - b.s).max() < tol
    assert np.allclose(a.w1, b.w1, atol=1e-14)


def test_extracellular_mean_invariant(op8):
    config = make_config(iapp1=AppliedCurrent(kind="constant", amplitude=1.0))
    traj = run(op8, MODEL, GAP, config)
    u = traj.final_state.u
    assert abs(op8.constraint @ u) < 1e-10 * max(1.0, np.abs(u).max())


def test_flux_balance_small(op8):
    config = make_config(iapp1=AppliedCurrent(kind="constant", amplitude=1.0),
                         t_end=5e-2)
    state = initialize(op8, config, v0_spec=(0.1, 0.0))
    traj = run(op8, MODEL, GAP, config, state=state)
    for st, rep in zip(traj.states[1:], traj.reports):
        bound = 10 * config.lin_tol * max(1.0, st.norm())
        for name, value in rep.flux_balance.items():
            assert abs(value) <= bound, name


def test_stimulus_raises_first_potential(op8):
    config = make_config(iapp1=AppliedCurrent(kind="constant", amplitude=1.0),
                         t_end=5e-2)
    traj = run(op8, MODEL, GAP, config)
    assert traj.final_state.v1.mean() > 1e-3
    assert abs(traj.final_state.v2.mean()) < traj.final_state.v1.mean()


def test_pulse_current_window():
    cur = AppliedCurrent(kind="pulse", amplitude=2.0, t_on=0.1, t_off=0.3)
    assert cur.value(0.05) == 0.0
    assert cur.value(0.1) == 2.0
    assert cur.value(0.2) == 2.0
    assert cur.value(0.3) == 0.0 or cur.value(0.3) == 2.0  # boundary owned
    assert cur.value(0.5) == 0.0
    assert AppliedCurrent().value(123.0) == 0.0
    with pytest.raises(ValueError):
        AppliedCurrent(kind="sine")
    with pytest.raises(ValueError):
        AppliedCurrent(kind="pulse", t_on=0.5, t_off=0.1)


def test_restart_is_bitwise(op8):
    config_full = make_config(t_end=0.1, iapp1=AppliedCurrent(
        kind="constant", amplitude=1.0))
    traj = run(op8, MODEL, GAP, config_full, state=initialize(
        op8, config_full, v0_spec=(0.1, 0.0)))

    config_half = make_config(t_end=0.05, iapp1=AppliedCurrent(
        kind="constant", amplitude=1.0))
    first = run(op8, MODEL, GAP, config_half, state=initialize(
        op8, config_half, v0_spec=(0.1, 0.0)))
    # each run advances round(t_end/dt) steps from its starting state, and
    # applied currents read absolute time off the step index
    resumed = run(op8, MODEL, GAP, config_half, state=first.final_state)

    assert np.array_equal(traj.final_state.u, resumed.final_state.u)
    assert np.array_equal(traj.final_state.w1, resumed.final_state.w1)
    assert traj.final_state.step_index == resumed.final_state.step_index == 10


def test_gating_schemes_against_closed_form(op4):
    v_val, w_val, dt = 0.37, 0.12, 1e-2
    config = make_config(dt=dt, gating_scheme="exact_linear")
    state = initialize(op4, config, v0_spec=(v_val, v_val),
                       w0_spec=(w_val, w_val))
    new, _ = step(state, op4, MODEL, GAP, config)
    lam = math.exp(-MODEL.b1 * dt)
    exact = lam * w_val + (MODEL.a1 / MODEL.b1) * (1 - lam) * v_val
    assert np.allclose(new.w1, exact, atol=1e-14)

    config_e = make_config(dt=dt, gating_scheme="explicit_euler")
    new_e, _ = step(state, op4, MODEL, GAP, config_e)
    euler = w_val + dt * (MODEL.a1 * v_val - MODEL.b1 * w_val)
    assert np.allclose(new_e.w1, euler, atol=1e-14)
    # schemes agree to O(dt^2) per step
    assert abs(exact - euler) < dt ** 2

    config_f = make_config(dt=dt, gating_scheme="frozen")
    new_f, _ = step(state, op4, MODEL, GAP, config_f)
    assert np.all(new_f.w1 == w_val)


def test_trajectory_snapshot_contract(op8):
    config = make_config(t_end=4e-2)
    state = initialize(op8, config, v0_spec=(0.1, 0.0))
    traj = run(op8, MODEL, GAP, config, state=state, stride=2)
    assert traj.n_steps == 4
    assert [st.step_index for st in traj.states] == [0, 2, 4]
    assert len(traj.reports) == 4
    assert len(traj.times) == 5
    assert traj.times[-1] == pytest.approx(0.04)

    traj1 = run(op8, MODEL, GAP, config, state=initialize(
        op8, config, v0_spec=(0.1, 0.0)), stride=1)
    assert [st.step_index for st in traj1.states] == [0, 1, 2, 3, 4]


def test_run_probe_rows(op8):
    config = make_config(t_end=3e-2)
    state = initialize(op8, config, v0_spec=(0.1, 0.0))

    def probe(st, _op):
        return {"mean_v1": float(st.v1.mean())}

    traj = run(op8, MODEL, GAP, config, state=state, probes=[probe], stride=1)
    assert len(traj.probe_rows) == 4
    assert all("mean_v1" in row and "t" in row for row in traj.probe_rows)
    # residual and flux columns appear automatically after the first solve
    assert "residual" not in traj.probe_rows[0]
    assert all("residual" in row and "flux_omega_e" in row
               for row in traj.probe_rows[1:])


def test_solver_failure_is_reported(op8):
    config = make_config(linear_solver="minres", lin_maxit=1,
                         iapp1=AppliedCurrent(kind="constant", amplitude=1.0))
    state = initialize(op8, config, v0_spec=(0.1, 0.0))
    with pytest.raises(SolverFailure) as err:
        run(op8, MODEL, GAP, config, state=state)
    assert err.value.residual > 0


def test_divergence_detected(op8):
    config = make_config()
    state = initialize(op8, config)
    state.u[0] = np.inf
    with pytest.raises(DivergenceError):
        step(state, op8, MODEL, GAP, config)


def test_nonfinite_initial_data_rejected(op8):
    config = make_config()
    with pytest.raises((DivergenceError, ValueError)):
        initialize(op8, config, v0_spec=(np.nan, 0.0))


def test_minres_agrees_with_direct(op8):
    kw = dict(t_end=3e-2, iapp1=AppliedCurrent(kind="constant", amplitude=1.0))
    direct = run(op8, MODEL, GAP, make_config(**kw),
                 state=initialize(op8, make_config(**kw), v0_spec=(0.1, 0.0)))
    it_cfg = make_config(linear_solver="minres", lin_maxit=5000, **kw)
    iterative = run(op8, MODEL, GAP, it_cfg,
                    state=initialize(op8, it_cfg, v0_spec=(0.1, 0.0)))
    du = np.abs(direct.final_state.u - iterative.final_state.u).max()
    assert du < 1e-6
    assert all(r.iterations > 0 for r in iterative.reports)


def test_membrane_currents_consistent(op8):
    config = make_config()
    state = initialize(op8, config, v0_spec=(0.3, -0.1), w0_spec=(0.05, 0.0))
    new, _ = step(state, op8, MODEL, GAP, config)
    currents = membrane_currents(state, new, MODEL, config)
    e, dt = config.eps, config.dt
    expected = e * ((new.v1 - state.v1) / dt
                    + MODEL.i_a(state.v1) + MODEL.beta1 * (new.v1 - state.v1)
                    + MODEL.i_b(new.w1) - config.iapp1.value(0.0))
    assert np.allclose(currents["gamma1"], expected, atol=1e-12)


def test_config_validation():
    with pytest.raises(ValueError):
        make_config(dt=0.0)
    with pytest.raises(ValueError):
        make_config(delta=-1e-4)
    with pytest.raises(ValueError):
        make_config(gating_scheme="rk4")
    with pytest.raises(ValueError):
        make_config(ionic_mode="cubic_implicit")
    with pytest.raises(ValueError):
        make_config(linear_solver="gmres")
    with pytest.raises(ValueError):
        make_config(eps=-1.0)


def test_state_views_are_consistent(op8):
    lay = op8.layout
    state = SystemState.zeros(lay)
    assert state.u.shape == (op8.mesh.n_dofs,)
    assert state.v1.shape == (op8.mesh.gamma1.n_nodes,)
    assert state.s.shape == (op8.mesh.gamma12.n_nodes,)
    assert state.w1.shape == (op8.mesh.gamma1.n_nodes,)
    assert state.is_finite()
    assert state.norm() == 0.0
