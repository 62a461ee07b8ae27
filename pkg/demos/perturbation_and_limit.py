"""Stability under data perturbations and the vanishing-regularization limit.

Two numerical counterparts of the continuous theory: perturbing the
initial membrane trace must amplify linearly (eta-independent ratios),
and trajectories at regularization delta and delta/2 must approach each
other as delta shrinks.
"""

from tridomain.assembly import ConductivitySpec, assemble
from tridomain.diagnostics import delta_limit_experiment, stability_experiment
from tridomain.geometry import UnitCellSpec, build_unit_cell
from tridomain.ionics import GapModel, IonicModel
from tridomain.stepper import SolverConfig


def main():
    mesh = build_unit_cell(UnitCellSpec(mesh_density=8))
    op = assemble(mesh, ConductivitySpec())
    model, gap = IonicModel(), GapModel()
    config = SolverConfig(dt=1e-2, t_end=0.1, lin_tol=1e-10)

    print("perturbation stability:")
    rep = stability_experiment(op, model, gap, config,
                               v0_spec=(0.1, 0.0), etas=(1e-2, 1e-3))
    print(rep.to_text())

    print("\nvanishing regularization:")
    lim = delta_limit_experiment(op, model, gap, config,
                                 v0_spec=(0.1, 0.0),
                                 deltas=(1e-2, 1e-3, 1e-4))
    print(lim.to_text())


if __name__ == "__main__":
    main()
