"""Command-line front end: one executable driving every experiment.

A TOML configuration file declares the geometry, models, solver settings,
initial data, outputs, and per-experiment parameters; the subcommand picks
the experiment. Every experiment writes a machine-readable verdict JSON
next to its outputs, and a manifest recording the config hash, library
versions, and wall time. All numeric output is deterministic for a fixed
configuration; only the manifest carries timing.
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import logging
import math
import os
import platform
import sys
import time

import numpy as np
import scipy

try:
    import tomllib
except ModuleNotFoundError:
    import tomli as tomllib

from . import __version__
from .assembly import (ConductivitySpec, InvalidConductivityError, assemble,
                       build_system_matrix, check_spd, dump_matrix_market)
from .diagnostics import (PhysicalUnits, apriori_monitor, delta_limit_experiment,
                          energy_probe, mms_convergence, nondimensionalize,
                          stability_experiment, constant_solution,
                          linear_solution, trig_solution)
from .geometry import (InvalidSpecError, TilingSpec, UnitCellSpec,
                       build_unit_cell, tile, write_vtk)
from .ionics import GapModel, IonicModel, certify_assumptions
from .stepper import (AppliedCurrent, DivergenceError, SolverConfig,
                      SolverFailure, initialize, run)

log = logging.getLogger(__name__)

EXPERIMENTS = ("simulate", "certify", "spd", "stability", "mms",
               "delta_limit", "apriori", "nondim")


class ConfigError(Exception):
    """The configuration file is malformed or inconsistent."""


_SCHEMA = {
    "experiment": None,
    "geometry": {"cell_lengths", "inner_margin", "split_fraction",
                 "mesh_density", "counts", "epsilon"},
    "conductivity": {"tensor_i", "tensor_e", "alpha", "beta"},
    "ionic": {"a1", "b1", "rho", "theta", "r", "beta1", "beta2"},
    "gap": {"G_gap", "C_ratio"},
    "solver": {"eps", "delta", "dt", "t_end", "C_ratio", "lin_tol",
               "lin_maxit", "gating_scheme", "ionic_mode", "linear_solver"},
    "initial": {"v0_gamma1", "v0_gamma2", "w0_gamma1", "w0_gamma2", "s0"},
    "iapp": {"gamma1": {"kind", "amplitude", "t_on", "t_off"},
             "gamma2": {"kind", "amplitude", "t_on", "t_off"}},
    "outputs": {"directory", "stride", "formats"},
    "units": {"ell_mic", "R_m", "C_m", "lam", "delta_v", "delta_w",
              "reported_epsilon"},
    "experiment_params": {"etas", "deltas", "densities", "mms_case",
                          "samples", "v_range", "w_range"},
}


def _check_keys(table, schema, path=""):
    for key, value in table.items():
        if key not in schema:
            raise ConfigError(f"unknown config key: {path}{key}")
        sub = schema[key]
        if isinstance(sub, dict):
            if not isinstance(value, dict):
                raise ConfigError(f"config key {path}{key} must be a table")
            _check_keys(value, sub, f"{path}{key}.")
        elif isinstance(sub, set) and isinstance(value, dict):
            _check_keys(value, {k: None for k in sub}, f"{path}{key}.")


@dataclasses.dataclass
class RunConfig:
    """Everything one invocation needs, parsed and validated."""

    experiment: str
    cell: UnitCellSpec
    tiling: TilingSpec
    cond: ConductivitySpec
    model: IonicModel
    gap: GapModel
    solver: SolverConfig
    initial: dict
    out_dir: str
    stride: int
    formats: tuple
    units: PhysicalUnits
    reported_epsilon: float
    params: dict
    config_bytes: bytes


def _applied_current(table):
    return AppliedCurrent(kind=table.get("kind", "zero"),
                          amplitude=float(table.get("amplitude", 0.0)),
                          t_on=float(table.get("t_on", 0.0)),
                          t_off=float(table.get("t_off", math.inf)))


def parse_config(path, experiment, out_override=None):
    """Load, key-check, and materialize the configuration for one experiment."""
    if path is None:
        raw, data = b"", {}
    else:
        try:
            with open(path, "rb") as fh:
                raw = fh.read()
            data = tomllib.loads(raw.decode("utf-8"))
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError(f"config {path} is not valid TOML: {exc}") from exc
    _check_keys(data, _SCHEMA)

    declared = data.get("experiment")
    if declared is not None:
        if declared not in EXPERIMENTS:
            raise ConfigError(f"unknown experiment {declared!r}; "
                              f"choose one of {', '.join(EXPERIMENTS)}")
        if declared != experiment:
            raise ConfigError(f"config selects experiment {declared!r} but the "
                              f"{experiment!r} subcommand was invoked")

    geo = data.get("geometry", {})
    cell = UnitCellSpec(
        cell_lengths=tuple(geo.get("cell_lengths", (1.0, 1.0))),
        inner_margin=float(geo.get("inner_margin", 0.25)),
        split_fraction=float(geo.get("split_fraction", 0.5)),
        mesh_density=int(geo.get("mesh_density", 8)))
    tiling = TilingSpec(counts=tuple(geo.get("counts", (1, 1))),
                        epsilon=float(geo.get("epsilon", 1.0)))

    ct = data.get("conductivity", {})
    cond = ConductivitySpec(
        tensor_i=ct.get("tensor_i", ((1.0, 0.0), (0.0, 1.0))),
        tensor_e=ct.get("tensor_e", ((1.0, 0.0), (0.0, 1.0))),
        alpha=ct.get("alpha"), beta=ct.get("beta"))

    model = IonicModel(**data.get("ionic", {}))
    gap = GapModel(**data.get("gap", {}))

    sv = dict(data.get("solver", {}))
    if "C_ratio" in sv and sv["C_ratio"] != gap.C_ratio:
        raise ConfigError("solver.C_ratio conflicts with gap.C_ratio")
    sv.setdefault("C_ratio", gap.C_ratio)
    iapp = data.get("iapp", {})
    solver = SolverConfig(iapp1=_applied_current(iapp.get("gamma1", {})),
                          iapp2=_applied_current(iapp.get("gamma2", {})),
                          **sv)

    ini = data.get("initial", {})
    initial = {"v0": (float(ini.get("v0_gamma1", 0.0)),
                      float(ini.get("v0_gamma2", 0.0))),
               "w0": (float(ini.get("w0_gamma1", 0.0)),
                      float(ini.get("w0_gamma2", 0.0))),
               "s0": float(ini.get("s0", 0.0))}

    out = data.get("outputs", {})
    out_dir = out_override or out.get("directory", "out")
    stride = int(out.get("stride", 1))
    formats = tuple(out.get("formats", ("csv",)))
    for fmt in formats:
        if fmt not in ("csv", "vtk", "binary"):
            raise ConfigError(f"unknown output format {fmt!r}")
    if stride < 1:
        raise ConfigError("outputs.stride must be >= 1")

    ut = dict(data.get("units", {}))
    reported = ut.pop("reported_epsilon", None)
    units = PhysicalUnits(**ut) if ut else PhysicalUnits()
    return RunConfig(experiment=experiment, cell=cell, tiling=tiling,
                     cond=cond, model=model, gap=gap, solver=solver,
                     initial=initial, out_dir=out_dir, stride=stride,
                     formats=formats, units=units,
                     reported_epsilon=(float(reported) if reported is not None
                                       else math.nan),
                     params=data.get("experiment_params", {}),
                     config_bytes=raw)


def _build_mesh(cfg):
    return tile(build_unit_cell(cfg.cell), cfg.tiling)


def _ensure_outdir(cfg):
    try:
        os.makedirs(cfg.out_dir, exist_ok=True)
    except OSError as exc:
        raise ConfigError(f"cannot create output directory "
                          f"{cfg.out_dir}: {exc}") from exc
    return cfg.out_dir


def _write_rows_csv(path, rows):
    """Time-series CSV with a deterministic column order and float reprs."""
    header = []
    for row in rows:
        for key in row:
            if key not in header:
                header.append(key)
    with open(path, "w", newline="") as fh:
        fh.write(",".join(header) + "\n")
        for row in rows:
            cells = []
            for key in header:
                if key not in row:
                    cells.append("")
                else:
                    val = row[key]
                    cells.append(str(val) if isinstance(val, (int, str))
                                 else repr(float(val)))
            fh.write(",".join(cells) + "\n")


def emit_outputs(traj, cfg, mesh, outputs, started):
    """Write the trajectory artifacts and the manifest; returns file list."""
    out_dir = _ensure_outdir(cfg)
    written = []
    if "csv" in cfg.formats:
        path = os.path.join(out_dir, "series.csv")
        _write_rows_csv(path, traj.probe_rows)
        written.append(path)
    if "vtk" in cfg.formats:
        for st in traj.states:
            path = os.path.join(out_dir, f"state_{st.step_index:06d}.vtk")
            write_vtk(mesh, path, point_data={"potential": st.u})
            written.append(path)
    if "binary" in cfg.formats:
        st = traj.final_state
        flat = np.concatenate([st.u, st.w1, st.w2]).astype("<f8")
        bin_path = os.path.join(out_dir, "final_state.bin")
        flat.tofile(bin_path)
        lay = st.layout
        header = {"dtype": "<f8",
                  "order": ["u_i1", "u_i2", "u_e", "w1", "w2"],
                  "blocks": {"u_i1": int(mesh.block_size(0)),
                             "u_i2": int(mesh.block_size(1)),
                             "u_e": int(mesh.block_size(2)),
                             "w1": int(lay.n_m1), "w2": int(lay.n_m2)},
                  "t": st.t, "step_index": st.step_index}
        hdr_path = os.path.join(out_dir, "final_state.json")
        with open(hdr_path, "w") as fh:
            json.dump(header, fh, indent=1, sort_keys=True)
        written.extend([bin_path, hdr_path])
    written.append(write_manifest(cfg, outputs=written, started=started))
    return written


def write_manifest(cfg, outputs, started):
    path = os.path.join(_ensure_outdir(cfg), "manifest.json")
    manifest = {
        "experiment": cfg.experiment,
        "config_sha256": hashlib.sha256(cfg.config_bytes).hexdigest(),
        "versions": {"tridomain": __version__,
                     "numpy": np.__version__,
                     "scipy": scipy.__version__,
                     "python": platform.python_version()},
        "wall_time_s": time.monotonic() - started,
        "outputs": [os.path.basename(p) for p in outputs],
    }
    with open(path, "w") as fh:
        json.dump(manifest, fh, indent=1, sort_keys=True)
    return path


def write_verdict(cfg, passed, detail):
    path = os.path.join(_ensure_outdir(cfg), "verdict.json")
    with open(path, "w") as fh:
        json.dump({"experiment": cfg.experiment, "passed": bool(passed),
                   "detail": detail}, fh, indent=1, sort_keys=True)
    return path


# ---------------------------------------------------------------------------
# experiments


def _exp_simulate(cfg, args, started):
    mesh = _build_mesh(cfg)
    op = assemble(mesh, cfg.cond)
    state = initialize(op, cfg.solver, cfg.initial["v0"], cfg.initial["w0"],
                       cfg.initial["s0"])
    traj = run(op, cfg.model, cfg.gap, cfg.solver, state=state,
               probes=[energy_probe(cfg.model, cfg.solver)], stride=cfg.stride)
    emit_outputs(traj, cfg, mesh, cfg.formats, started)
    worst = max((r.residual for r in traj.reports), default=0.0)
    passed = all(r.converged for r in traj.reports)
    write_verdict(cfg, passed, {"steps": traj.n_steps, "worst_residual": worst})
    print(f"simulate: {traj.n_steps} steps, worst residual {worst:.3e} -> "
          f"{'pass' if passed else 'fail'}")
    return passed


def _exp_certify(cfg, args, started):
    p = cfg.params
    rep = certify_assumptions(cfg.model,
                              v_range=tuple(p.get("v_range", (-10.0, 10.0))),
                              w_range=tuple(p.get("w_range", (-10.0, 10.0))),
                              samples=int(p.get("samples", 2001)))
    out_dir = _ensure_outdir(cfg)
    rep.to_csv(os.path.join(out_dir, "assumptions.csv"))
    write_manifest(cfg, outputs=["assumptions.csv"], started=started)
    write_verdict(cfg, rep.passed,
                  {c.name: c.passed for c in rep.checks})
    print(rep.to_text())
    return rep.passed


def _exp_spd(cfg, args, started):
    delta = cfg.solver.delta if args.delta is None else float(args.delta)
    if delta < 0:
        raise ConfigError("delta must be nonnegative")
    mesh = _build_mesh(cfg)
    op = assemble(mesh, cfg.cond)
    sv = cfg.solver
    matrix, _ = build_system_matrix(op, sv.eps, delta, sv.dt, cfg.model.beta1,
                                    cfg.gap.G_gap, sv.C_ratio)
    out_dir = _ensure_outdir(cfg)
    dump_matrix_market(matrix, os.path.join(out_dir, "system_matrix.mtx"))
    detail = {"delta": delta, "n": matrix.shape[0]}
    if delta > 0:
        rep = check_spd(matrix, "strict")
        detail["strict"] = rep.passed
        detail["min_pivot"] = rep.value
        passed = rep.passed
        print(f"strict PD: {'pass' if rep.passed else 'fail'} "
              f"(min pivot {rep.value:.6e})")
    else:
        semi = check_spd(matrix, "semidefinite")
        strict = check_spd(matrix, "strict")
        detail["semidefinite"] = semi.passed
        detail["strict"] = strict.passed
        detail["ritz"] = semi.value
        passed = semi.passed and not strict.passed
        print(f"semidefinite: {'pass' if semi.passed else 'fail'}, "
              f"strict: {'fail' if not strict.passed else 'pass'} "
              f"(most negative Ritz value {semi.value:.6e})")
    write_manifest(cfg, outputs=["system_matrix.mtx"], started=started)
    write_verdict(cfg, passed, detail)
    return passed


def _exp_stability(cfg, args, started):
    mesh = _build_mesh(cfg)
    op = assemble(mesh, cfg.cond)
    etas = tuple(float(x) for x in cfg.params.get("etas", (1e-2, 1e-3)))
    rep = stability_experiment(op, cfg.model, cfg.gap, cfg.solver,
                               v0_spec=cfg.initial["v0"],
                               w0_spec=cfg.initial["w0"],
                               s0_spec=cfg.initial["s0"], etas=etas)
    out_dir = _ensure_outdir(cfg)
    rep.to_csv(os.path.join(out_dir, "stability.csv"))
    with open(os.path.join(out_dir, "stability.txt"), "w") as fh:
        fh.write(rep.to_text() + "\n")
    write_manifest(cfg, outputs=["stability.csv", "stability.txt"],
                   started=started)
    passed = rep.ratios_consistent and rep.zero_identical and rep.gronwall_ok
    write_verdict(cfg, passed, {"spread": rep.ratio_spread,
                                "zero_identical": rep.zero_identical,
                                "gronwall_ok": rep.gronwall_ok})
    print(rep.to_text())
    return passed


_MMS_CASES = {"trig": trig_solution, "constant": constant_solution,
              "linear": linear_solution}


def _exp_mms(cfg, args, started):
    case = cfg.params.get("mms_case", "trig")
    if case not in _MMS_CASES:
        raise ConfigError(f"unknown mms_case {case!r}; "
                          f"choose one of {', '.join(sorted(_MMS_CASES))}")
    densities = tuple(int(d) for d in cfg.params.get("densities", (8, 16, 32)))
    exact = (trig_solution(cfg.cell.cell_lengths) if case == "trig"
             else _MMS_CASES[case]())
    rep = mms_convergence(exact, densities, cond=cfg.cond, model=cfg.model,
                          gap=cfg.gap, eps=cfg.solver.eps,
                          C_ratio=cfg.solver.C_ratio, cell=cfg.cell,
                          jobs=args.jobs)
    out_dir = _ensure_outdir(cfg)
    rep.to_csv(os.path.join(out_dir, "mms.csv"))
    with open(os.path.join(out_dir, "mms.txt"), "w") as fh:
        fh.write(rep.to_text() + "\n")
    write_manifest(cfg, outputs=["mms.csv", "mms.txt"], started=started)
    passed = rep.exact_everywhere or (1.7 <= rep.slope_u <= 2.3
                                      and 1.7 <= rep.slope_v <= 2.3)
    write_verdict(cfg, passed, {"slope_u": rep.slope_u, "slope_v": rep.slope_v,
                                "exact": rep.exact_everywhere})
    print(rep.to_text())
    return passed


def _exp_delta_limit(cfg, args, started):
    mesh = _build_mesh(cfg)
    op = assemble(mesh, cfg.cond)
    deltas = tuple(float(d) for d in
                   cfg.params.get("deltas", (1e-2, 1e-3, 1e-4)))
    rep = delta_limit_experiment(op, cfg.model, cfg.gap, cfg.solver,
                                 v0_spec=cfg.initial["v0"],
                                 w0_spec=cfg.initial["w0"],
                                 s0_spec=cfg.initial["s0"], deltas=deltas)
    out_dir = _ensure_outdir(cfg)
    rep.to_csv(os.path.join(out_dir, "delta_limit.csv"))
    write_manifest(cfg, outputs=["delta_limit.csv"], started=started)
    write_verdict(cfg, rep.strictly_decreasing,
                  {"deltas": list(rep.deltas), "distances": rep.distances})
    print(rep.to_text())
    return rep.strictly_decreasing


def _exp_apriori(cfg, args, started):
    mesh = _build_mesh(cfg)
    op = assemble(mesh, cfg.cond)
    state = initialize(op, cfg.solver, cfg.initial["v0"], cfg.initial["w0"],
                       cfg.initial["s0"])
    traj = run(op, cfg.model, cfg.gap, cfg.solver, state=state,
               stride=cfg.stride)
    rep = apriori_monitor(traj, op, cfg.model, cfg.solver)
    out_dir = _ensure_outdir(cfg)
    rep.to_csv(os.path.join(out_dir, "apriori.csv"))
    write_manifest(cfg, outputs=["apriori.csv"], started=started)
    finite = all(math.isfinite(v) for v in rep.monitor_values().values())
    passed = rep.duality_ok and finite
    write_verdict(cfg, passed, rep.monitor_values())
    for name, value in rep.monitor_values().items():
        print(f"{name} = {value:.6e}")
    print(f"duality margin {rep.duality_margin:.6e} -> "
          f"{'pass' if rep.duality_ok else 'fail'}")
    return passed


def _exp_nondim(cfg, args, started):
    reported = None if math.isnan(cfg.reported_epsilon) else cfg.reported_epsilon
    rep = nondimensionalize(cfg.units, reported_epsilon=reported)
    out_dir = _ensure_outdir(cfg)
    rep.to_csv(os.path.join(out_dir, "nondim.csv"))
    write_manifest(cfg, outputs=["nondim.csv"], started=started)
    passed = rep.identity_gap <= 1e-12 * rep.epsilon_alt
    write_verdict(cfg, passed, {"epsilon": rep.epsilon,
                                "identity_gap": rep.identity_gap,
                                "flagged": rep.flagged})
    print(rep.to_text())
    return passed


_DISPATCH = {"simulate": _exp_simulate, "certify": _exp_certify,
             "spd": _exp_spd, "stability": _exp_stability, "mms": _exp_mms,
             "delta_limit": _exp_delta_limit, "apriori": _exp_apriori,
             "nondim": _exp_nondim}

_SUBCOMMANDS = {"run": "simulate", "certify": "certify", "spd": "spd",
                "stability": "stability", "mms": "mms",
                "delta-limit": "delta_limit", "apriori": "apriori",
                "nondim": "nondim"}


def _build_parser():
    parser = argparse.ArgumentParser(
        prog="tridomain-sim",
        description="Simulator and verification harness for a two-cell "
                    "microscopic tissue model with dynamic gap junctions.")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in _SUBCOMMANDS:
        p = sub.add_parser(name, help=f"{_SUBCOMMANDS[name]} experiment")
        p.add_argument("--config", default=None, help="TOML configuration file")
        p.add_argument("--output", default=None, help="output directory")
        p.add_argument("--jobs", type=int, default=1,
                       help="worker bound for experiment fan-out")
        if name == "spd":
            p.add_argument("--delta", default=None,
                           help="regularization weight override")
    return parser


def main(argv=None):
    args = _build_parser().parse_args(argv)
    level = os.environ.get("TRIDOMAIN_LOG", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING),
                        format="%(levelname)s %(name)s: %(message)s")
    experiment = _SUBCOMMANDS[args.command]
    started = time.monotonic()
    try:
        cfg = parse_config(args.config, experiment, out_override=args.output)
    except (ConfigError, InvalidSpecError, InvalidConductivityError,
            ValueError, TypeError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    try:
        passed = _DISPATCH[experiment](cfg, args, started)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except (SolverFailure, DivergenceError) as exc:
        log.error("experiment failed: %s", exc)
        print(f"experiment failed: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return 1
    return 0 if passed else 1


if __name__ == "__main__":
    sys.exit(main())
