"""Membrane ionic model, gap-junction current, and assumption certifier.

The membrane carries a cubic excitation current plus a linear recovery
coupling (FitzHugh-Nagumo): I_ion(v, w) = I_a(v) + I_b(w) with

    I_a(v) = rho * v * (1 - v) * (v - theta),   I_b(w) = -rho * w,

and the gating variable evolves by dw/dt = H(v, w) = a1*v - b1*w. The gap
junction is passive: I_gap(s) = G_gap * s.

The energy and uniqueness arguments for the coupled system rest on growth,
coercivity, and monotonicity properties of these nonlinearities. The
certifier checks each of them numerically over a sample box and reports
worst-case margins, so a parameter choice that silently breaks an estimate
is caught before any simulation runs.
"""

from __future__ import annotations

import csv
import dataclasses

import numpy as np

CERTIFY_TOL = 1e-12  # absolute margin tolerance; polynomial double arithmetic


@dataclasses.dataclass(frozen=True)
class IonicModel:
    """FitzHugh-Nagumo parameters and derived structural constants.

    a1, b1 are positive rates, rho < 0 the reaction coefficient, theta the
    threshold in (0, 1), r the growth exponent (4 for the cubic). beta1 is
    the monotonizing shift: v -> I_a(v) + beta1*v + beta2 must be strictly
    increasing. The default beta1 = |rho|(1+theta)^2/3 exceeds the critical
    value |rho|(1 - theta + theta^2)/3 by |rho|*theta.
    """

    a1: float = 1.0
    b1: float = 1.0
    rho: float = -1.0
    theta: float = 0.25
    r: float = 4.0
    beta1: float = None
    beta2: float = 0.0

    def __post_init__(self):
        if not (self.a1 > 0 and self.b1 > 0):
            raise ValueError(f"rates a1, b1 must be positive, got {self.a1}, {self.b1}")
        if not self.rho < 0:
            raise ValueError(f"rho must be negative, got {self.rho}")
        if not 0.0 < self.theta < 1.0:
            raise ValueError(f"theta must lie in (0, 1), got {self.theta}")
        if not self.r > 2.0:
            raise ValueError(f"growth exponent r must exceed 2, got {self.r}")
        if self.beta1 is None:
            object.__setattr__(self, "beta1",
                               abs(self.rho) * (1.0 + self.theta) ** 2 / 3.0)
        if self.beta1 < 0 or self.beta2 < 0:
            raise ValueError("shifts beta1, beta2 must be nonnegative")

    # current functions (vectorized over numpy inputs)

    def i_a(self, v):
        v = np.asarray(v, dtype=float)
        return self.rho * v * (1.0 - v) * (v - self.theta)

    def i_b(self, w):
        return -self.rho * np.asarray(w, dtype=float)

    def gating_rhs(self, v, w):
        return self.a1 * np.asarray(v, dtype=float) - self.b1 * np.asarray(w, dtype=float)

    def i_a_shifted(self, v):
        """The monotonized map I_a(v) + beta1*v + beta2."""
        return self.i_a(v) + self.beta1 * np.asarray(v, dtype=float) + self.beta2

    # structural constants

    @property
    def growth_c0(self):
        """Constant term of the cubic growth bound |I_a| <= c0 + c3|v|^(r-1)."""
        return (2.0 * self.theta / 3.0 + (1.0 + self.theta) / 3.0) * abs(self.rho)

    @property
    def growth_c3(self):
        """Cubic coefficient of the growth bound."""
        return (self.theta / 3.0 + 2.0 * (1.0 + self.theta) / 3.0 + 1.0) * abs(self.rho)

    @property
    def alpha1(self):
        return max(self.growth_c0, self.growth_c3)

    @property
    def alpha2(self):
        return abs(self.rho)

    @property
    def alpha3(self):
        return max(self.a1, self.b1)

    @property
    def alpha4(self):
        return -self.rho / self.a1

    @property
    def alpha5(self):
        """Coefficient of w^2 in E(v, w) = I_b(w)v - alpha4*H(v, w)w.

        Expanding cancels every v-term and leaves E = -(rho*b1/a1) w^2,
        nonnegative for rho < 0. (A sign-flipped variant of this formula
        circulates; the certifier measures the coefficient rather than
        trusting any printed form.)
        """
        return -self.rho * self.b1 / self.a1


@dataclasses.dataclass(frozen=True)
class GapModel:
    """Passive gap junction: conductance G_gap, capacitance ratio C_12/C_m."""

    G_gap: float = 1.0
    C_ratio: float = 0.5

    def __post_init__(self):
        if not self.G_gap > 0:
            raise ValueError(f"G_gap must be positive, got {self.G_gap}")
        if not self.C_ratio > 0:
            raise ValueError(f"C_ratio must be positive, got {self.C_ratio}")


def eval_ion(model, v, w):
    """Evaluate (I_a(v), I_b(w), H(v, w)) for the membrane model."""
    return model.i_a(v), model.i_b(w), model.gating_rhs(v, w)


def eval_gap(model, s):
    """Gap-junction current G_gap * s."""
    return model.G_gap * np.asarray(s, dtype=float)


@dataclasses.dataclass
class AssumptionCheck:
    name: str
    domain: str
    worst_margin: float
    constant: float
    passed: bool
    detail: str = ""


@dataclasses.dataclass
class AssumptionReport:
    checks: list
    tol: float

    @property
    def passed(self):
        return all(c.passed for c in self.checks)

    def __getitem__(self, name):
        for c in self.checks:
            if c.name == name:
                return c
        raise KeyError(name)

    def to_text(self):
        lines = [f"{'assumption':26s} {'worst_margin':>14s} {'constant':>12s} pass"]
        for c in self.checks:
            lines.append(f"{c.name:26s} {c.worst_margin:14.6e} {c.constant:12.6g} "
                         f"{'yes' if c.passed else 'NO'}"
                         + (f"  [{c.detail}]" if c.detail else ""))
        lines.append(f"overall: {'pass' if self.passed else 'FAIL'} (tol {self.tol:g})")
        return "\n".join(lines)

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["assumption", "worst_margin", "constant", "pass"])
            for c in self.checks:
                writer.writerow([c.name, repr(c.worst_margin),
                                 repr(c.constant), int(c.passed)])


def certify_assumptions(model, v_range=(-10.0, 10.0), w_range=(-10.0, 10.0),
                        samples=2001, tol=CERTIFY_TOL):
    """Check the structural assumptions on a dense sample grid.

    (i)   ionic growth: |I_a(v)| <= c0 + c3 |v|^(r-1) with the explicit
          Young-inequality constants of the cubic, and |I_b(w)| <= alpha2(|w|+1).
    (ii)  gating growth: |H(v, w)| <= alpha3 (|v| + |w| + 1).
    (iii) recovery coercivity: E(v, w) = I_b(w)v - alpha4 H(v, w)w >= alpha5 w^2;
          the w^2 coefficient is measured by sampling and must be nonnegative
          and independent of v.
    (iv)  shifted monotonicity: v -> I_a(v) + beta1 v + beta2 strictly
          increasing, plus the quadratic secant lower bound
          (Ia~(v) - Ia~(v'))(v - v') >= (1/C)(1 + |v| + |v'|)^(r-2)(v - v')^2
          with a fitted constant C.

    Margins follow the convention bound - quantity (>= 0 means satisfied);
    pass means worst margin >= -tol. Failures set flags, never raise.
    """
    if samples < 2:
        raise ValueError("need at least 2 samples per axis")
    vs = np.linspace(v_range[0], v_range[1], samples)
    ws = np.linspace(w_range[0], w_range[1], samples)
    vdom = f"v in [{v_range[0]:g}, {v_range[1]:g}]"
    wdom = f"w in [{w_range[0]:g}, {w_range[1]:g}]"
    checks = []

    # (i) growth of I_a and I_b
    ia = model.i_a(vs)
    bound_a = model.growth_c0 + model.growth_c3 * np.abs(vs) ** (model.r - 1.0)
    margin_a = float(np.min(bound_a - np.abs(ia)))
    margin_b = float(np.min(model.alpha2 * (np.abs(ws) + 1.0) - np.abs(model.i_b(ws))))
    margin = min(margin_a, margin_b)
    checks.append(AssumptionCheck(
        "ionic_growth", f"{vdom}; {wdom}", margin, model.alpha1,
        margin >= -tol, f"c0={model.growth_c0:g}, c3={model.growth_c3:g}"))

    # (ii) gating growth (2D grid)
    vg, wg = np.meshgrid(vs, ws, indexing="ij")
    h = model.gating_rhs(vg, wg)
    margin = float(np.min(model.alpha3 * (np.abs(vg) + np.abs(wg) + 1.0) - np.abs(h)))
    checks.append(AssumptionCheck(
        "gating_growth", f"{vdom}; {wdom}", margin, model.alpha3, margin >= -tol))

    # (iii) recovery coercivity via the E function
    e = model.i_b(wg) * vg - model.alpha4 * h * wg
    margin = float(np.min(e - model.alpha5 * wg ** 2))
    nz = np.abs(wg) > 1e-6 * max(abs(w_range[0]), abs(w_range[1]), 1.0)
    coeff = e[nz] / wg[nz] ** 2
    coeff_min = float(coeff.min())
    spread = float(coeff.max() - coeff.min())
    passed = margin >= -tol and coeff_min >= -tol
    checks.append(AssumptionCheck(
        "recovery_coercivity", f"{vdom}; {wdom}", margin, coeff_min, passed,
        f"w^2 coefficient spread {spread:.3e}"))

    # (iv) strict monotonicity of the shifted map + quadratic secant bound
    tia = model.i_a_shifted(vs)
    slopes = np.diff(tia) / np.diff(vs)
    margin_mono = float(slopes.min())
    stride = max(1, samples // 256)
    sub = vs[::stride]
    tsub = model.i_a_shifted(sub)
    dv = sub[:, None] - sub[None, :]
    dt = tsub[:, None] - tsub[None, :]
    weight = (1.0 + np.abs(sub)[:, None] + np.abs(sub)[None, :]) ** (model.r - 2.0)
    off = ~np.eye(len(sub), dtype=bool)
    quotient = dt[off] * dv[off] / (weight[off] * dv[off] ** 2)
    inv_c = float(quotient.min())
    c_fit = 1.0 / inv_c if inv_c > 0 else np.inf
    passed = margin_mono > tol and inv_c > 0
    checks.append(AssumptionCheck(
        "shifted_monotonicity", vdom, min(margin_mono, inv_c), c_fit, passed,
        f"min slope {margin_mono:.3e}, 1/C={inv_c:.3e}"))

    return AssumptionReport(checks, tol)
