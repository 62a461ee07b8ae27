"""Energy reports, a-priori monitors, and verification experiment drivers.

Everything here is a pure function of immutable state snapshots plus the
assembled operators: discrete energy bookkeeping, time-integrated norm
monitors with a duality inequality check, the per-component trace-Poincare
ratio, the physical-to-dimensionless scaling map, and the three experiment
drivers (perturbation stability with a growth-constant fit, manufactured-
solution convergence, and the regularization-limit study).
"""

from __future__ import annotations

import concurrent.futures
import csv
import dataclasses
import logging
import math

import numpy as np

from .assembly import ConductivitySpec, assemble
from .geometry import REGION_E, REGION_I1, REGION_I2, UnitCellSpec, build_unit_cell
from .ionics import GapModel, IonicModel
from .stepper import (BorderedSolver, SolverConfig, SystemState, _nodal_values,
                      initialize, run)

log = logging.getLogger(__name__)


def _write_csv(path, header, rows):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for row in rows:
            writer.writerow([x if isinstance(x, str) else repr(float(x))
                             for x in row])


# ---------------------------------------------------------------------------
# facet quadrature


def facet_function_integral(facets, nodal, fn, roots=(), npts=3):
    """Integrate fn(v(x)) over a facet chain, v the P1 trace given nodally.

    Facets are sub-split where v crosses any value in roots, so kinks of
    fn (absolute values, piecewise definitions) never sit inside a Gauss
    panel. npts=3 is exact through polynomial degree 5 per panel.
    """
    x, w = np.polynomial.legendre.leggauss(npts)
    x = 0.5 * (x + 1.0)
    w = 0.5 * w
    a = nodal[facets.slots[:, 0]]
    b = nodal[facets.slots[:, 1]]
    total = 0.0
    for k in range(facets.n_facets):
        va, vb, length = a[k], b[k], facets.lengths[k]
        cuts = [0.0, 1.0]
        if vb != va:
            for root in roots:
                t = (root - va) / (vb - va)
                if 0.0 < t < 1.0:
                    cuts.append(float(t))
        cuts.sort()
        for t0, t1 in zip(cuts[:-1], cuts[1:]):
            if t1 <= t0:
                continue
            tt = t0 + (t1 - t0) * x
            total += length * (t1 - t0) * float(w @ fn(va + tt * (vb - va)))
    return total


def _quad_form(matrix, vec):
    return float(vec @ (matrix @ vec))


# ---------------------------------------------------------------------------
# energy report


@dataclasses.dataclass
class EnergyReport:
    """All terms of the discrete energy identity for one state snapshot.

    membrane_k = eps |v^k|^2, gating_k = eps |w^k|^2, gap = eps |s|^2 (all
    interface L2 norms squared); delta_reg is delta times the quadratic
    form of the regularizing mass; conduction is the full stiffness form;
    ionic is eps * integral of the shifted cubic times v; r_norm_k is
    eps |v^k|^r in L^r; dt_* are backward-difference time-derivative norms
    (zero when no previous snapshot is given); lyapunov combines the
    capacitive terms into the decreasing quantity of the dissipative mode.
    """

    t: float
    membrane_1: float
    membrane_2: float
    gating_1: float
    gating_2: float
    gap: float
    delta_reg: float
    conduction: float
    ionic: float
    r_norm_1: float
    r_norm_2: float
    dt_v: float
    dt_w: float
    dt_s: float
    lyapunov: float
    r: float
    gamma_measures: tuple

    @property
    def r_norm(self):
        return self.r_norm_1 + self.r_norm_2

    def nonnegative_ok(self, tol=1e-12):
        vals = (self.membrane_1, self.membrane_2, self.gating_1, self.gating_2,
                self.gap, self.delta_reg, self.conduction, self.r_norm_1,
                self.r_norm_2, self.dt_v, self.dt_w, self.dt_s)
        return all(v >= -tol for v in vals)

    def consistency_ok(self, rtol=1e-9):
        """Power-mean check: |v|_L2^2 <= |v|_Lr^2 |Gamma|^(1-2/r) per membrane."""
        for sq, rr, measure in ((self.membrane_1, self.r_norm_1,
                                 self.gamma_measures[0]),
                                (self.membrane_2, self.r_norm_2,
                                 self.gamma_measures[1])):
            if measure == 0.0:
                continue
            bound = rr ** (2.0 / self.r) * measure ** (1.0 - 2.0 / self.r)
            if sq > bound + rtol * (1.0 + bound):
                return False
        return True

    def row(self, prefix="energy_"):
        return {prefix + "lyapunov": self.lyapunov,
                prefix + "membrane_1": self.membrane_1,
                prefix + "membrane_2": self.membrane_2,
                prefix + "gap": self.gap,
                prefix + "gating_1": self.gating_1,
                prefix + "gating_2": self.gating_2,
                prefix + "delta_reg": self.delta_reg,
                prefix + "conduction": self.conduction,
                prefix + "ionic": self.ionic,
                prefix + "r_norm": self.r_norm}


def energy(state, op, model, config, prev=None):
    """Energy report of one snapshot; prev enables the time-derivative norms."""
    e = config.eps
    v1, v2, s = state.v1, state.v2, state.s
    membrane_1 = e * _quad_form(op.B1, v1)
    membrane_2 = e * _quad_form(op.B2, v2)
    gating_1 = e * _quad_form(op.B1, state.w1)
    gating_2 = e * _quad_form(op.B2, state.w2)
    gap_term = e * _quad_form(op.B12, s)
    delta_reg = (config.delta * _quad_form(op.regularization_mass(), state.u)
                 if config.delta > 0 else 0.0)
    conduction = _quad_form(op.K, state.u)
    ionic = e * (facet_function_integral(
        op.mesh.gamma1, v1, lambda t: model.i_a_shifted(t) * t)
        + facet_function_integral(
            op.mesh.gamma2, v2, lambda t: model.i_a_shifted(t) * t))
    r = model.r
    even = abs(r - round(r)) < 1e-14 and round(r) % 2 == 0
    abs_roots = () if even else (0.0,)
    r_norm_1 = e * facet_function_integral(op.mesh.gamma1, v1,
                                           lambda t: np.abs(t) ** r, abs_roots)
    r_norm_2 = e * facet_function_integral(op.mesh.gamma2, v2,
                                           lambda t: np.abs(t) ** r, abs_roots)
    dt_v = dt_w = dt_s = 0.0
    if prev is not None and state.t > prev.t:
        h = state.t - prev.t
        dt_v = e * (_quad_form(op.B1, (v1 - prev.v1) / h)
                    + _quad_form(op.B2, (v2 - prev.v2) / h))
        dt_w = e * (_quad_form(op.B1, (state.w1 - prev.w1) / h)
                    + _quad_form(op.B2, (state.w2 - prev.w2) / h))
        dt_s = e * _quad_form(op.B12, (s - prev.s) / h)
    lyap = 0.5 * (membrane_1 + membrane_2
                  + model.alpha4 * (gating_1 + gating_2)
                  + config.C_ratio * gap_term + delta_reg)
    return EnergyReport(
        t=state.t, membrane_1=membrane_1, membrane_2=membrane_2,
        gating_1=gating_1, gating_2=gating_2, gap=gap_term,
        delta_reg=delta_reg, conduction=conduction, ionic=ionic,
        r_norm_1=r_norm_1, r_norm_2=r_norm_2, dt_v=dt_v, dt_w=dt_w, dt_s=dt_s,
        lyapunov=lyap, r=r,
        gamma_measures=(op.mesh.gamma1.measure, op.mesh.gamma2.measure))


def energy_probe(model, config):
    """A run() probe emitting the energy terms as time-series columns."""
    previous = [None]

    def probe(state, op):
        rep = energy(state, op, model, config, prev=previous[0])
        previous[0] = state
        return rep.row()

    return probe


# ---------------------------------------------------------------------------
# a-priori monitors


@dataclasses.dataclass
class AprioriReport:
    """Time-integrated monitors compared across mesh refinements.

    e_vw: sup in time of the capacitive-plus-gating interface energy;
    e_u: time integral of the full (unit-tensor) H1 norms of all potential
    fields; e_vr: time integral of the L^r membrane norms; e_vr_dual: time
    integral of the dual-exponent norm of the cubic current; e_dtv: time
    integral of the backward-difference derivative norms. duality_margin
    is the minimum over snapshots of the dual-norm inequality slack
    (nonnegative when the growth bound holds).
    """

    horizon: float
    n_snapshots: int
    e_vw: float
    e_u: float
    e_vr: float
    e_vr_dual: float
    e_dtv: float
    duality_margin: float
    duality_ok: bool

    def monitor_values(self):
        return {"e_vw": self.e_vw, "e_u": self.e_u, "e_vr": self.e_vr,
                "e_vr_dual": self.e_vr_dual, "e_dtv": self.e_dtv}

    def to_csv(self, path):
        vals = self.monitor_values()
        _write_csv(path, ["monitor", "value"],
                   [[k, v] for k, v in vals.items()]
                   + [["duality_margin", self.duality_margin],
                      ["duality_ok", "1" if self.duality_ok else "0"]])


def apriori_monitor(traj, op, model, config):
    """Monitors of the energy estimates over a completed trajectory."""
    states = traj.states
    e, r = config.eps, model.r
    rp = r / (r - 1.0)
    mesh = op.mesh
    kplain = op.Kplain1 + op.Kplain2 + op.Kplaine
    mvol = op.Mvol1 + op.Mvol2 + op.Mvole
    gamma_total = mesh.gamma1.measure + mesh.gamma2.measure
    even = abs(r - round(r)) < 1e-14 and round(r) % 2 == 0
    vr_roots = () if even else (0.0,)
    ia_roots = tuple(sorted({0.0, model.theta, 1.0}))

    def vr_of(state):
        return e * (facet_function_integral(mesh.gamma1, state.v1,
                                            lambda t: np.abs(t) ** r, vr_roots)
                    + facet_function_integral(mesh.gamma2, state.v2,
                                              lambda t: np.abs(t) ** r, vr_roots))

    def dual_of(state):
        fn = lambda t: np.abs(model.i_a(t)) ** rp
        return e * (facet_function_integral(mesh.gamma1, state.v1, fn,
                                            ia_roots, npts=7)
                    + facet_function_integral(mesh.gamma2, state.v2, fn,
                                              ia_roots, npts=7))

    e_vw = 0.0
    duality_margin = math.inf
    for st in states:
        cap = e * (_quad_form(op.B1, st.v1) + _quad_form(op.B2, st.v2)
                   + _quad_form(op.B1, st.w1) + _quad_form(op.B2, st.w2)
                   + _quad_form(op.B12, st.s))
        e_vw = max(e_vw, cap)
        lhs = dual_of(st) ** (1.0 / rp)
        rhs = model.alpha1 * (vr_of(st) ** ((r - 1.0) / r)
                              + (e * gamma_total) ** ((r - 1.0) / r))
        duality_margin = min(duality_margin, rhs - lhs)

    e_u = e_vr = e_vr_dual = e_dtv = 0.0
    for prev, st in zip(states[:-1], states[1:]):
        h = st.t - prev.t
        if h <= 0:
            continue
        e_u += h * (_quad_form(kplain, st.u) + _quad_form(mvol, st.u))
        e_vr += h * vr_of(st)
        e_vr_dual += h * dual_of(st)
        e_dtv += h * (e * (_quad_form(op.B1, (st.v1 - prev.v1) / h)
                           + _quad_form(op.B2, (st.v2 - prev.v2) / h)
                           + _quad_form(op.B1, (st.w1 - prev.w1) / h)
                           + _quad_form(op.B2, (st.w2 - prev.w2) / h))
                      + config.C_ratio * e
                      * _quad_form(op.B12, (st.s - prev.s) / h))
    scale = 1.0 + abs(duality_margin)
    return AprioriReport(horizon=states[-1].t, n_snapshots=len(states),
                         e_vw=e_vw, e_u=e_u, e_vr=e_vr, e_vr_dual=e_vr_dual,
                         e_dtv=e_dtv, duality_margin=duality_margin,
                         duality_ok=duality_margin >= -1e-9 * scale)


# ---------------------------------------------------------------------------
# trace-Poincare ratios


@dataclasses.dataclass
class PoincareReport:
    components: list       # (region, cell) per component id
    ratios: list           # |u_i|^2 / (eps |v|^2 + |grad u_i|^2 + |grad u_e|^2)
    undefined: list        # True where the denominator vanished
    eps: float

    @property
    def max_ratio(self):
        vals = [x for x, bad in zip(self.ratios, self.undefined) if not bad]
        return max(vals) if vals else math.nan

    def to_csv(self, path):
        rows = [[f"{reg}@{cell}", rat, "1" if bad else "0"]
                for (reg, cell), rat, bad in zip(self.components, self.ratios,
                                                 self.undefined)]
        _write_csv(path, ["component", "ratio", "undefined"], rows)


def poincare_trace_ratio(state, op, eps=1.0):
    """Per-component ratio of the interior L2 norm to its trace-energy bound.

    For each intracellular component: |u_i|^2_L2 over the component divided
    by eps |v^k|^2 on its membrane facets + |grad u_i|^2 on the component
    + |grad u_e|^2 over the whole extracellular region. The max over many
    random states estimates the constant of the trace-Poincare inequality.
    """
    mesh = op.mesh
    u = state.u
    e_mask = np.zeros(mesh.n_dofs, dtype=bool)
    e_mask[mesh.blocks[REGION_E]] = True
    ue_only = np.where(e_mask, u, 0.0)
    grad_e = _quad_form(op.Kplaine, ue_only)
    components, ratios, undefined = [], [], []
    for cid, (region, h1, h2) in enumerate(mesh.components):
        mask = mesh.node_component == cid
        ui = np.where(mask, u, 0.0)
        mvol, kplain = ((op.Mvol1, op.Kplain1) if region == REGION_I1
                        else (op.Mvol2, op.Kplain2))
        fs = mesh.gamma1 if region == REGION_I1 else mesh.gamma2
        vfull = state.v1 if region == REGION_I1 else state.v2
        node_mask = mask[fs.pair_in]
        v = np.where(node_mask, vfull, 0.0)
        b = op.B1 if region == REGION_I1 else op.B2
        num = _quad_form(mvol, ui)
        den = eps * _quad_form(b, v) + _quad_form(kplain, ui) + grad_e
        components.append((region, (h1, h2)))
        if den <= 0.0:
            ratios.append(math.nan)
            undefined.append(True)
        else:
            ratios.append(num / den)
            undefined.append(False)
    return PoincareReport(components, ratios, undefined, eps)


def poincare_constant_estimate(op, eps=1.0, n_samples=100, seed=0):
    """Max trace-Poincare ratio over random nodal states."""
    rng = np.random.default_rng(seed)
    lay = op.layout
    worst = 0.0
    for _ in range(n_samples):
        u = rng.standard_normal(lay.n_dofs)
        st = SystemState(lay, u, np.zeros(lay.n_m1), np.zeros(lay.n_m2))
        rep = poincare_trace_ratio(st, op, eps)
        if not all(rep.undefined):
            worst = max(worst, rep.max_ratio)
    return worst


# ---------------------------------------------------------------------------
# physical units


@dataclasses.dataclass(frozen=True)
class PhysicalUnits:
    """Physical membrane-tissue parameters in conventional units.

    ell_mic: microscopic cell size (cm); R_m: membrane resistance
    (Ohm cm^2); C_m: membrane capacitance (uF/cm^2); lam: conductivity
    normalization (mS/cm); delta_v/delta_w: potential and gating scales.
    """

    ell_mic: float = 1e-2
    R_m: float = 1e4
    C_m: float = 1.0
    lam: float = 5.0
    delta_v: float = 1.0
    delta_w: float = 1.0

    def __post_init__(self):
        for name in ("ell_mic", "R_m", "C_m", "lam", "delta_v", "delta_w"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")


@dataclasses.dataclass
class NondimReport:
    L: float                 # diffusion length sqrt(R_m lam ell_mic), cm
    tau_m: float             # membrane time constant R_m C_m, ms
    epsilon: float           # ell_mic / L
    epsilon_alt: float       # sqrt(ell_mic / (R_m lam)), the same number
    identity_gap: float      # |L/(R_m lam) - epsilon_alt|
    reported_epsilon: float  # externally quoted value, or nan
    flagged: bool
    flag_rtol: float

    def to_text(self):
        lines = [f"L = {self.L:.6e} cm, tau_m = {self.tau_m:.6e} ms",
                 f"epsilon = ell/L = {self.epsilon:.6e}",
                 f"epsilon (sqrt form) = {self.epsilon_alt:.6e}, "
                 f"identity gap = {self.identity_gap:.3e}"]
        if not math.isnan(self.reported_epsilon):
            verdict = ("DISCREPANCY" if self.flagged else "consistent")
            lines.append(f"reported epsilon = {self.reported_epsilon:.6e} "
                         f"-> {verdict} (rtol {self.flag_rtol:g})")
        return "\n".join(lines)

    def to_csv(self, path):
        _write_csv(path, ["quantity", "value"],
                   [["L_cm", self.L], ["tau_m_ms", self.tau_m],
                    ["epsilon", self.epsilon],
                    ["epsilon_alt", self.epsilon_alt],
                    ["identity_gap", self.identity_gap],
                    ["reported_epsilon", self.reported_epsilon],
                    ["flagged", "1" if self.flagged else "0"]])


def nondimensionalize(units, reported_epsilon=None, flag_rtol=0.05):
    """Scaling map from physical units to the dimensionless parameters.

    L = sqrt(R_m lam ell_mic) in a coherent unit system (lam converted
    mS/cm -> S/cm), tau_m = R_m C_m in ms, epsilon = ell_mic / L. The
    algebraically identical sqrt(ell_mic/(R_m lam)) is computed separately
    as a cross-check, and a reported epsilon differing by more than
    flag_rtol relatively is flagged.
    """
    lam_s = units.lam * 1e-3
    rl = units.R_m * lam_s
    big_l = math.sqrt(rl * units.ell_mic)
    tau_m = units.R_m * units.C_m * 1e-3
    eps = units.ell_mic / big_l
    eps_alt = math.sqrt(units.ell_mic / rl)
    identity_gap = abs(big_l / rl - eps_alt)
    log.info("scaling identity |L/(R_m lam) - sqrt(ell/(R_m lam))| = %.3e",
             identity_gap)
    if reported_epsilon is None:
        reported, flagged = math.nan, False
    else:
        reported = float(reported_epsilon)
        flagged = abs(eps - reported) / reported > flag_rtol
    return NondimReport(L=big_l, tau_m=tau_m, epsilon=eps, epsilon_alt=eps_alt,
                        identity_gap=identity_gap, reported_epsilon=reported,
                        flagged=flagged, flag_rtol=flag_rtol)


# ---------------------------------------------------------------------------
# shared trajectory-difference norm


def difference_norm(op, model, config, a, b):
    """Energy norm of the state difference used by the uniqueness bound:
    sqrt(eps(|dv1|^2 + |dv2|^2) + alpha4 eps(|dw1|^2 + |dw2|^2)
         + C_ratio eps |ds|^2)."""
    e = config.eps
    val = (e * (_quad_form(op.B1, a.v1 - b.v1) + _quad_form(op.B2, a.v2 - b.v2))
           + model.alpha4 * e * (_quad_form(op.B1, a.w1 - b.w1)
                                 + _quad_form(op.B2, a.w2 - b.w2))
           + config.C_ratio * e * _quad_form(op.B12, a.s - b.s))
    return math.sqrt(max(val, 0.0))


# ---------------------------------------------------------------------------
# stability experiment


@dataclasses.dataclass
class StabilityReport:
    etas: tuple
    amplification: dict       # eta -> {"v": ..., "w": ..., "s": ..., "total": ...}
    ratio_spread: float       # relative spread of total amplification over etas
    ratios_consistent: bool
    zero_identical: bool
    gronwall_C: float
    horizon: float
    amp_double: float
    predicted_double: float
    gronwall_ok: bool

    def to_text(self):
        lines = [f"horizon T = {self.horizon:g}"]
        for eta in self.etas:
            a = self.amplification[eta]
            lines.append(f"eta = {eta:g}: |dv|/eta = {a['v']:.6e}, "
                         f"|dw|/eta = {a['w']:.6e}, |ds|/eta = {a['s']:.6e}, "
                         f"total = {a['total']:.6e}")
        lines.append(f"amplification spread = {self.ratio_spread:.3%} -> "
                     f"{'PASS' if self.ratios_consistent else 'FAIL'} (<= 5%)")
        lines.append(f"zero perturbation bitwise identical -> "
                     f"{'PASS' if self.zero_identical else 'FAIL'}")
        if not math.isnan(self.gronwall_C):
            lines.append(f"growth fit C = {self.gronwall_C:.6e}; at 2T "
                         f"amplification {self.amp_double:.6e} vs predicted "
                         f"{self.predicted_double:.6e} -> "
                         f"{'PASS' if self.gronwall_ok else 'FAIL'} (within 20%)")
        return "\n".join(lines)

    def to_csv(self, path):
        rows = [[repr(float(eta)), a["v"], a["w"], a["s"], a["total"]]
                for eta, a in ((eta, self.amplification[eta])
                               for eta in self.etas)]
        _write_csv(path, ["eta", "amp_v", "amp_w", "amp_s", "amp_total"], rows)


def stability_experiment(op, model, gap, config, v0_spec=(0.1, 0.0),
                         w0_spec=(0.0, 0.0), s0_spec=0.0,
                         etas=(1e-2, 1e-3), direction=1.0, gronwall=True):
    """Continuous-dependence study: perturb v0 on gamma1 and compare runs.

    For each eta the gamma1 initial trace is shifted by eta times the
    direction profile; the final-time difference norms divided by eta give
    the amplification. Ratios must be eta-independent (linearized
    uniqueness bound); a growth constant C is fitted at horizon T from the
    smallest eta and validated at horizon 2T.
    """
    if len(etas) < 2:
        raise ValueError("need at least two perturbation sizes")
    mesh = op.mesh
    base1 = _nodal_values(v0_spec[0], mesh.gamma1.coords, "v0 on gamma1")
    dirvals = _nodal_values(direction, mesh.gamma1.coords, "direction")

    def run_with(eta, cfg):
        st = initialize(op, cfg, (base1 + eta * dirvals, v0_spec[1]),
                        w0_spec, s0_spec)
        return run(op, model, gap, cfg, state=st)

    base = run_with(0.0, config)
    zero = run_with(0.0, config)
    zero_identical = (np.array_equal(base.final_state.u, zero.final_state.u)
                      and np.array_equal(base.final_state.w1,
                                          zero.final_state.w1)
                      and np.array_equal(base.final_state.w2,
                                          zero.final_state.w2))

    e = config.eps
    amplification = {}
    for eta in etas:
        perturbed = run_with(eta, config)
        fa, fb = perturbed.final_state, base.final_state
        dv = math.sqrt(e * (_quad_form(op.B1, fa.v1 - fb.v1)
                            + _quad_form(op.B2, fa.v2 - fb.v2)))
        dw = math.sqrt(e * (_quad_form(op.B1, fa.w1 - fb.w1)
                            + _quad_form(op.B2, fa.w2 - fb.w2)))
        ds = math.sqrt(config.C_ratio * e * _quad_form(op.B12, fa.s - fb.s))
        total = difference_norm(op, model, config, fa, fb)
        amplification[eta] = {"v": dv / eta, "w": dw / eta, "s": ds / eta,
                              "total": total / eta}
    totals = [amplification[eta]["total"] for eta in etas]
    spread = (max(totals) - min(totals)) / max(totals) if max(totals) > 0 else 0.0

    gronwall_c = amp2 = pred2 = math.nan
    gronwall_ok = True
    if gronwall:
        eta0 = min(etas)
        amp1 = amplification[eta0]["total"]
        t1 = config.t_end
        gronwall_c = math.log(amp1) / t1
        cfg2 = dataclasses.replace(config, t_end=2.0 * t1)
        base2 = run_with(0.0, cfg2)
        pert2 = run_with(eta0, cfg2)
        amp2 = difference_norm(op, model, config, pert2.final_state,
                               base2.final_state) / eta0
        pred2 = math.exp(gronwall_c * 2.0 * t1)
        gronwall_ok = abs(amp2 - pred2) <= 0.2 * pred2
    return StabilityReport(etas=tuple(etas), amplification=amplification,
                           ratio_spread=spread,
                           ratios_consistent=spread <= 0.05,
                           zero_identical=zero_identical,
                           gronwall_C=gronwall_c, horizon=config.t_end,
                           amp_double=amp2, predicted_double=pred2,
                           gronwall_ok=gronwall_ok)


# ---------------------------------------------------------------------------
# manufactured-solution convergence


@dataclasses.dataclass(frozen=True)
class ExactSolution:
    """Manufactured fields: (value, gradient) callables per region plus the
    matching volumetric sources f = -div(M grad u)."""

    name: str
    u1: tuple
    u2: tuple
    ue: tuple
    f1: object
    f2: object
    fe: object


def constant_solution(c=0.7):
    val = lambda x, y: c
    grad = lambda x, y: (0.0, 0.0)
    zero = lambda x, y: 0.0
    return ExactSolution("constant", (val, grad), (val, grad), (val, grad),
                         zero, zero, zero)


def linear_solution():
    """Linear intracellular fields over a constant extracellular one.

    The exterior zero-flux condition forces the extracellular field to be
    constant; the intracellular slopes feed the interface sources.
    """
    u1 = (lambda x, y: 0.25 + 0.5 * x - 0.25 * y, lambda x, y: (0.5, -0.25))
    u2 = (lambda x, y: -0.3 + 0.2 * x + 0.1 * y, lambda x, y: (0.2, 0.1))
    ue = (lambda x, y: 0.0, lambda x, y: (0.0, 0.0))
    zero = lambda x, y: 0.0
    return ExactSolution("linear", u1, u2, ue, zero, zero, zero)


def trig_solution(lengths=(1.0, 1.0)):
    """Smooth trigonometric fields; the extracellular one has zero normal
    flux on the outer rectangle, as the geometry requires."""
    kx, ky = math.pi / lengths[0], math.pi / lengths[1]
    lam = kx * kx + ky * ky

    def u1v(x, y):
        return np.sin(kx * x) * np.sin(ky * y)

    def u1g(x, y):
        return (kx * np.cos(kx * x) * np.sin(ky * y),
                ky * np.sin(kx * x) * np.cos(ky * y))

    def u2v(x, y):
        return np.cos(kx * x) * np.sin(ky * y)

    def u2g(x, y):
        return (-kx * np.sin(kx * x) * np.sin(ky * y),
                ky * np.cos(kx * x) * np.cos(ky * y))

    def uev(x, y):
        return np.cos(kx * x) * np.cos(ky * y)

    def ueg(x, y):
        return (-kx * np.sin(kx * x) * np.cos(ky * y),
                -ky * np.cos(kx * x) * np.sin(ky * y))

    return ExactSolution("trig", (u1v, u1g), (u2v, u2g), (uev, ueg),
                         lambda x, y: lam * u1v(x, y),
                         lambda x, y: lam * u2v(x, y),
                         lambda x, y: lam * uev(x, y))


def _facet_load(fs, mesh, grad, tensors, sign):
    """Nodal load vector of the conormal source sign*(M grad u).n per facet."""
    load = np.zeros(fs.n_nodes)
    for k in range(fs.n_facets):
        n = fs.normals[k]
        g = np.empty(2)
        for e_idx in range(2):
            p = mesh.nodes[fs.nodes_in[k, e_idx]]
            gv = np.asarray(grad(p[0], p[1]), dtype=float)
            g[e_idx] = sign * float((tensors[k] @ gv) @ n)
        length = fs.lengths[k]
        local = length / 6.0 * np.array([[2.0, 1.0], [1.0, 2.0]]) @ g
        load[fs.slots[k, 0]] += local[0]
        load[fs.slots[k, 1]] += local[1]
    return load


@dataclasses.dataclass
class MmsReport:
    name: str
    densities: tuple
    hs: list
    err_u: list
    err_v: list
    err_s: list
    slope_u: float
    slope_v: float
    exact_tol: float

    @property
    def exact_everywhere(self):
        return (max(self.err_u) <= self.exact_tol
                and max(self.err_v) <= self.exact_tol)

    def to_text(self):
        lines = [f"manufactured solution: {self.name}",
                 "density  h          err_u         err_v         err_s"]
        for d, h, eu, ev, es in zip(self.densities, self.hs, self.err_u,
                                    self.err_v, self.err_s):
            lines.append(f"{d:7d}  {h:.4e}  {eu:.6e}  {ev:.6e}  {es:.6e}")
        if self.exact_everywhere:
            lines.append(f"reproduced exactly (<= {self.exact_tol:g}) -> PASS")
        else:
            ok = 1.7 <= self.slope_u <= 2.3 and 1.7 <= self.slope_v <= 2.3
            lines.append(f"slopes: u {self.slope_u:.3f}, v {self.slope_v:.3f} "
                         f"-> {'PASS' if ok else 'FAIL'} (window [1.7, 2.3])")
        return "\n".join(lines)

    def to_csv(self, path):
        rows = [[str(d), h, eu, ev, es]
                for d, h, eu, ev, es in zip(self.densities, self.hs,
                                            self.err_u, self.err_v, self.err_s)]
        _write_csv(path, ["density", "h", "err_u", "err_v", "err_s"], rows)


def mms_convergence(exact, densities, cond=None, model=None, gap=None,
                    eps=1.0, C_ratio=0.5, cell=None, lin_tol=1e-11,
                    exact_tol=1e-9, jobs=1):
    """Steady manufactured-solution study on a sequence of refinements.

    Solves stiffness + eps*beta1*(membrane mass) + eps*G_gap*C_ratio*(gap
    mass) with the bordered mean-zero constraint, against sources built
    from the exact fields: volumetric loads, per-side conormal interface
    sources, and the interface-difference data. Reports L2 errors of the
    potentials and the interface differences plus fitted slopes. Each
    refinement level is independent, so jobs > 1 fans them out over a
    thread pool without changing any numbers.
    """
    cond = cond or ConductivitySpec()
    model = model or IonicModel()
    gap = gap or GapModel()
    cell = cell or UnitCellSpec()

    def solve_one(density):
        mesh = build_unit_cell(dataclasses.replace(cell, mesh_density=density))
        op = assemble(mesh, cond)
        lay = op.layout
        n = mesh.n_dofs
        matrix = (op.K + eps * model.beta1 * op.membrane_difference_mass()
                  + eps * gap.G_gap * C_ratio * op.gap_difference_mass())

        u_ex = np.empty(n)
        for region, (val, _grad) in ((REGION_I1, exact.u1),
                                     (REGION_I2, exact.u2),
                                     (REGION_E, exact.ue)):
            sl = mesh.blocks[region]
            pts = mesh.nodes[sl]
            u_ex[sl] = np.array([val(x, y) for x, y in pts])
        v1_ex = lay.v1(u_ex)
        v2_ex = lay.v2(u_ex)
        s_ex = lay.s(u_ex)

        rhs = np.zeros(n)
        for region, f in ((REGION_I1, exact.f1), (REGION_I2, exact.f2),
                          (REGION_E, exact.fe)):
            sl = mesh.blocks[region]
            f_nodal = np.zeros(n)
            f_nodal[sl] = np.array([f(x, y) for x, y in mesh.nodes[sl]])
            mvol = {REGION_I1: op.Mvol1, REGION_I2: op.Mvol2,
                    REGION_E: op.Mvole}[region]
            rhs += mvol @ f_nodal

        def tensors_on(fs, region):
            mids = 0.5 * (mesh.nodes[fs.nodes_in[:, 0]]
                          + mesh.nodes[fs.nodes_in[:, 1]])
            return cond.tensors_at(region, mids) if fs.n_facets else np.zeros((0, 2, 2))

        t_g1_i = tensors_on(mesh.gamma1, REGION_I1)
        t_g1_e = tensors_on(mesh.gamma1, REGION_E)
        t_g2_i = tensors_on(mesh.gamma2, REGION_I2)
        t_g2_e = tensors_on(mesh.gamma2, REGION_E)
        t_g12 = tensors_on(mesh.gamma12, REGION_I1)
        rhs += lay.S1_in.T @ _facet_load(mesh.gamma1, mesh, exact.u1[1],
                                         t_g1_i, +1.0)
        rhs += lay.S1_out.T @ _facet_load(mesh.gamma1, mesh, exact.ue[1],
                                          t_g1_e, -1.0)
        rhs += lay.S2_in.T @ _facet_load(mesh.gamma2, mesh, exact.u2[1],
                                         t_g2_i, +1.0)
        rhs += lay.S2_out.T @ _facet_load(mesh.gamma2, mesh, exact.ue[1],
                                          t_g2_e, -1.0)
        rhs += lay.S12_in.T @ _facet_load(mesh.gamma12, mesh, exact.u1[1],
                                          t_g12, +1.0)
        rhs += lay.S12_out.T @ _facet_load(mesh.gamma12, mesh, exact.u2[1],
                                           t_g12, -1.0)
        rhs += eps * model.beta1 * (lay.D1.T @ (op.B1 @ v1_ex)
                                    + lay.D2.T @ (op.B2 @ v2_ex))
        rhs += eps * gap.G_gap * C_ratio * (lay.D12.T @ (op.B12 @ s_ex))

        cfg = SolverConfig(eps=eps, dt=1.0, t_end=1.0, lin_tol=lin_tol)
        solver = BorderedSolver(matrix.tocsr(), op.constraint, cfg)
        u_h, _mult, _its, _res = solver.solve(rhs)

        shift = float(op.constraint @ u_ex) / op.omega_e_area
        diff = u_h - (u_ex - shift)
        mvol_sum = op.Mvol1 + op.Mvol2 + op.Mvole
        err_u = math.sqrt(max(_quad_form(mvol_sum, diff), 0.0))
        err_v = math.sqrt(max(
            _quad_form(op.B1, lay.v1(u_h) - v1_ex)
            + _quad_form(op.B2, lay.v2(u_h) - v2_ex), 0.0))
        err_s = math.sqrt(max(_quad_form(op.B12, lay.s(u_h) - s_ex), 0.0))
        return err_u, err_v, err_s

    if jobs > 1 and len(densities) > 1:
        with concurrent.futures.ThreadPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(solve_one, densities))
    else:
        results = [solve_one(d) for d in densities]
    errs_u = [r[0] for r in results]
    errs_v = [r[1] for r in results]
    errs_s = [r[2] for r in results]
    hs = [1.0 / d for d in densities]

    def fit(errors):
        if max(errors) <= exact_tol:
            return math.nan
        return float(np.polyfit(np.log(hs), np.log(np.maximum(errors, 1e-300)),
                                1)[0])

    return MmsReport(name=exact.name, densities=tuple(densities), hs=hs,
                     err_u=errs_u, err_v=errs_v, err_s=errs_s,
                     slope_u=fit(errs_u), slope_v=fit(errs_v),
                     exact_tol=exact_tol)


# ---------------------------------------------------------------------------
# regularization-limit study


@dataclasses.dataclass
class DeltaLimitReport:
    deltas: tuple
    distances: list          # sup-in-time L2 distance between delta and delta/2
    strictly_decreasing: bool

    def to_text(self):
        lines = ["delta      |u(delta) - u(delta/2)|_L2 (sup in time)"]
        for d, dist in zip(self.deltas, self.distances):
            lines.append(f"{d:9.3e}  {dist:.6e}")
        lines.append("strictly decreasing -> "
                     + ("PASS" if self.strictly_decreasing else "FAIL"))
        return "\n".join(lines)

    def to_csv(self, path):
        _write_csv(path, ["delta", "distance"],
                   [[repr(float(d)), dist]
                    for d, dist in zip(self.deltas, self.distances)])


def delta_limit_experiment(op, model, gap, config, v0_spec=(0.1, 0.0),
                           w0_spec=(0.0, 0.0), s0_spec=0.0,
                           deltas=(1e-2, 1e-3, 1e-4)):
    """Cauchy-in-delta study of the regularized trajectories.

    All runs start from the same initial state; for each delta, the
    distance d(delta) is the sup over snapshots of the potentials' L2
    difference between the runs at delta and delta/2. As the
    regularization vanishes the trajectories become Cauchy, so d(delta)
    must decrease strictly along a decreasing delta sequence.
    """
    deltas = tuple(sorted(deltas, reverse=True))
    if len(deltas) < 2 or min(deltas) <= 0.0 or len(set(deltas)) != len(deltas):
        raise ValueError("deltas must be at least two distinct positive values")
    state0 = initialize(op, dataclasses.replace(config, delta=0.0),
                        v0_spec, w0_spec, s0_spec)
    mvol = op.Mvol1 + op.Mvol2 + op.Mvole

    def trajectory_at(delta):
        cfg = dataclasses.replace(config, delta=delta)
        return run(op, model, gap, cfg, state=state0.copy())

    cache = {}

    def states_at(delta):
        if delta not in cache:
            cache[delta] = trajectory_at(delta).states
        return cache[delta]

    distances = []
    for delta in deltas:
        big, small = states_at(delta), states_at(delta / 2.0)
        dist = max(math.sqrt(max(_quad_form(mvol, a.u - b.u), 0.0))
                   for a, b in zip(big, small))
        distances.append(dist)
    decreasing = all(a > b for a, b in zip(distances[:-1], distances[1:]))
    return DeltaLimitReport(deltas=deltas, distances=distances,
                            strictly_decreasing=decreasing)
