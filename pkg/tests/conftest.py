import pytest

from tridomain.assembly import ConductivitySpec, assemble
from tridomain.geometry import UnitCellSpec, build_unit_cell


@pytest.fixture(scope="session")
def mesh8():
    return build_unit_cell(UnitCellSpec(mesh_density=8))


@pytest.fixture(scope="session")
def op8(mesh8):
    return assemble(mesh8, ConductivitySpec())


@pytest.fixture(scope="session")
def mesh4():
    return build_unit_cell(UnitCellSpec(mesh_density=4))


@pytest.fixture(scope="session")
def op4(mesh4):
    return assemble(mesh4, ConductivitySpec())
