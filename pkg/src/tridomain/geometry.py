"""Structured two-dimensional meshes for a three-region microstructure.

A rectangular unit cell contains an axis-aligned inner box split by a
vertical plane into two intracellular regions I1 and I2; the remainder is
the extracellular frame E. The cell is triangulated on a tensor-product
grid whose lines contain all region boundaries, so every interface is
resolved exactly by mesh edges, and it can be tiled N_x x N_y times at
scale eps.

Nodes on an interface are duplicated per adjacent region: each region owns
a contiguous block of degrees of freedom, fields on different regions are
independent, and interface jumps (membrane potential v = u_i - u_e, gap
potential s = u_i1 - u_i2) are plain linear maps on DOF vectors. Facet
records keep both sides' node ids and the normal pointing out of the
intracellular side.
"""

from __future__ import annotations

import dataclasses

import numpy as np

REGION_I1 = 0
REGION_I2 = 1
REGION_E = 2
REGION_NAMES = ("I1", "I2", "E")

# interface identifiers: (intracellular-side region, other-side region)
GAMMA1 = "gamma1"    # I1 | E  (sarcolemma of cell half 1)
GAMMA2 = "gamma2"    # I2 | E  (sarcolemma of cell half 2)
GAMMA12 = "gamma12"  # I1 | I2 (gap junction)


class InvalidSpecError(ValueError):
    """A geometry spec violates its invariants."""


@dataclasses.dataclass(frozen=True)
class UnitCellSpec:
    """Reference cell: outer rectangle, inner box, vertical split plane.

    cell_lengths:   (l1, l2) positive side lengths of the cell.
    inner_margin:   extracellular frame thickness as a fraction in (0, 0.5).
    split_fraction: position of the gap plane inside the inner box, in (0, 1).
    mesh_density:   grid subdivisions per unit length (positive integer).
    """

    cell_lengths: tuple = (1.0, 1.0)
    inner_margin: float = 0.25
    split_fraction: float = 0.5
    mesh_density: int = 8

    def __post_init__(self):
        object.__setattr__(self, "cell_lengths",
                           tuple(float(v) for v in self.cell_lengths))
        if len(self.cell_lengths) != 2 or min(self.cell_lengths) <= 0.0:
            raise InvalidSpecError(
                f"cell_lengths must be two positive numbers, got {self.cell_lengths}")
        if not 0.0 < self.inner_margin < 0.5:
            raise InvalidSpecError(
                f"inner_margin must lie in (0, 0.5), got {self.inner_margin}")
        if not 0.0 < self.split_fraction < 1.0:
            raise InvalidSpecError(
                f"split_fraction must lie in (0, 1), got {self.split_fraction}")
        if int(self.mesh_density) != self.mesh_density or self.mesh_density < 1:
            raise InvalidSpecError(
                f"mesh_density must be a positive integer, got {self.mesh_density}")
        object.__setattr__(self, "mesh_density", int(self.mesh_density))

    def inner_box(self):
        """Return (x0, x1, y0, y1, x_split) of the inner box in cell coordinates."""
        l1, l2 = self.cell_lengths
        x0 = self.inner_margin * l1
        x1 = (1.0 - self.inner_margin) * l1
        y0 = self.inner_margin * l2
        y1 = (1.0 - self.inner_margin) * l2
        xs = x0 + self.split_fraction * (x1 - x0)
        return x0, x1, y0, y1, xs

    def region_at(self, x, y):
        """Region tag of a point strictly inside the cell (boundaries go to E)."""
        x0, x1, y0, y1, xs = self.inner_box()
        if x0 < x < x1 and y0 < y < y1:
            return REGION_I1 if x < xs else REGION_I2
        return REGION_E


@dataclasses.dataclass(frozen=True)
class TilingSpec:
    """counts: (N_x, N_y) copies of the cell; epsilon: geometric scale factor."""

    counts: tuple = (1, 1)
    epsilon: float = 1.0

    def __post_init__(self):
        counts = tuple(int(c) for c in self.counts)
        object.__setattr__(self, "counts", counts)
        if len(counts) != 2 or min(counts) < 1:
            raise InvalidSpecError(f"tiling counts must be positive integers, got {counts}")
        if not self.epsilon > 0.0:
            raise InvalidSpecError(f"epsilon must be positive, got {self.epsilon}")


class FacetSet:
    """Oriented facets of one interface plus the paired trace-node registry.

    Facet arrays (nf facets):
      nodes_in:  (nf, 2) DOF ids of the endpoints on the intracellular side
      nodes_out: (nf, 2) DOF ids on the other side (E, or I2 for the gap)
      lengths:   (nf,)
      normals:   (nf, 2) unit normal pointing out of the intracellular side
      cells:     (nf, 2) integer unit-cell index (h1, h2) of each facet
      slots:     (nf, 2) interface-node index of each endpoint

    Interface-node arrays (nm nodes, ordered by ascending (y, x)):
      pair_in:  (nm,) DOF id on the intracellular side
      pair_out: (nm,) DOF id on the other side
      coords:   (nm, 2) node coordinates
      node_cells: (nm, 2) unit-cell index each node belongs to
    """

    def __init__(self, nodes_in, nodes_out, lengths, normals, cells, slots,
                 pair_in, pair_out, coords, node_cells):
        self.nodes_in = nodes_in
        self.nodes_out = nodes_out
        self.lengths = lengths
        self.normals = normals
        self.cells = cells
        self.slots = slots
        self.pair_in = pair_in
        self.pair_out = pair_out
        self.coords = coords
        self.node_cells = node_cells

    @property
    def n_facets(self):
        return len(self.lengths)

    @property
    def n_nodes(self):
        return len(self.pair_in)

    @property
    def measure(self):
        return float(self.lengths.sum())


def _empty_facetset():
    z2 = np.zeros((0, 2), dtype=np.int64)
    return FacetSet(z2, z2.copy(), np.zeros(0), np.zeros((0, 2)), z2.copy(),
                    z2.copy(), np.zeros(0, dtype=np.int64),
                    np.zeros(0, dtype=np.int64), np.zeros((0, 2)), z2.copy())


class MicroMesh:
    """Triangulated three-region mesh with duplicated interface nodes.

    nodes:      (n, 2) coordinates; DOFs are blocked [I1 | I2 | E].
    triangles:  (m, 3) global DOF triples, counterclockwise.
    tri_region: (m,) region tag per triangle.
    tri_cell:   (m, 2) unit-cell index per triangle.
    blocks:     region tag -> slice into the DOF range.
    gamma1, gamma2, gamma12: FacetSet records for the three interfaces.
    exterior_nodes / exterior_lengths: outer-boundary edges (E side only).
    node_component: (n,) intracellular component id, -1 on the E block.
    components: list of (region, h1, h2) per component id.
    """

    def __init__(self, spec, tiling, nodes, triangles, tri_region, tri_cell,
                 block_sizes, gamma1, gamma2, gamma12,
                 exterior_nodes, exterior_lengths, node_component, components):
        self.spec = spec
        self.tiling = tiling
        self.nodes = nodes
        self.triangles = triangles
        self.tri_region = tri_region
        self.tri_cell = tri_cell
        n1, n2, ne = block_sizes
        self.blocks = {
            REGION_I1: slice(0, n1),
            REGION_I2: slice(n1, n1 + n2),
            REGION_E: slice(n1 + n2, n1 + n2 + ne),
        }
        self.n_dofs = n1 + n2 + ne
        self.gamma1 = gamma1
        self.gamma2 = gamma2
        self.gamma12 = gamma12
        self.exterior_nodes = exterior_nodes
        self.exterior_lengths = exterior_lengths
        self.node_component = node_component
        self.components = components

        a = self.nodes[self.triangles[:, 0]]
        b = self.nodes[self.triangles[:, 1]]
        c = self.nodes[self.triangles[:, 2]]
        self.tri_area = 0.5 * ((b[:, 0] - a[:, 0]) * (c[:, 1] - a[:, 1])
                               - (c[:, 0] - a[:, 0]) * (b[:, 1] - a[:, 1]))
        self._validate()

    def facet_sets(self):
        return {GAMMA1: self.gamma1, GAMMA2: self.gamma2, GAMMA12: self.gamma12}

    def block_size(self, region):
        s = self.blocks[region]
        return s.stop - s.start

    def region_area(self, region):
        return float(self.tri_area[self.tri_region == region].sum())

    @property
    def domain_lengths(self):
        l1, l2 = self.spec.cell_lengths
        nx, ny = self.tiling.counts
        return self.tiling.epsilon * l1 * nx, self.tiling.epsilon * l2 * ny

    def _validate(self):
        if not np.all(self.tri_area > 0.0):
            raise InvalidSpecError("degenerate triangle with nonpositive area")
        for gam in (self.gamma1, self.gamma2, self.gamma12):
            if gam.n_nodes and not np.array_equal(self.nodes[gam.pair_in],
                                                  self.nodes[gam.pair_out]):
                raise InvalidSpecError("paired interface nodes do not coincide")
        # exterior boundary must be extracellular (no-flux side)
        e = self.blocks[REGION_E]
        if self.exterior_nodes.size and not (
                np.all(self.exterior_nodes >= e.start)
                and np.all(self.exterior_nodes < e.stop)):
            raise InvalidSpecError("exterior boundary touches an intracellular region")
        if connected_component_count(self, REGION_E) != 1:
            raise InvalidSpecError("extracellular region is disconnected")
        ncells = self.tiling.counts[0] * self.tiling.counts[1]
        for region in (REGION_I1, REGION_I2):
            if connected_component_count(self, region) != ncells:
                raise InvalidSpecError(
                    f"region {REGION_NAMES[region]} does not split into one "
                    f"component per cell")


def _axis_breaks(length, density, specials, n_copies, eps):
    """Sorted strictly increasing breakpoints of the tiled axis.

    Per cell: the uniform lattice of `density` subdivisions per unit length
    merged with the region boundary coordinates; shared cell boundaries
    appear exactly once.
    """
    n = max(1, round(length * density))
    base = [length * i / n for i in range(n + 1)]
    pts = sorted(set(base[:-1]) | set(s for s in specials if s < length))
    # merge near-coincident points, preferring region boundaries
    tol = 1e-12 * max(length, 1.0)
    merged = []
    for p in pts:
        if merged and p - merged[-1] < tol:
            if p in specials:
                merged[-1] = p
        else:
            merged.append(p)
    for s in specials:
        if s not in merged:
            raise InvalidSpecError(
                "region boundaries collapse onto each other; refine the spec")
    out = []
    for h in range(n_copies):
        off = eps * length * h
        out.extend(off + eps * p for p in merged)
    out.append(eps * length * n_copies)
    arr = np.asarray(out)
    if not np.all(np.diff(arr) > 0.0):
        raise InvalidSpecError("axis breakpoints are not strictly increasing")
    return arr


def _build(spec, tiling):
    """Construct the tiled mesh on a global tensor grid."""
    l1, l2 = spec.cell_lengths
    nx_cells, ny_cells = tiling.counts
    eps = tiling.epsilon
    x0, x1, y0, y1, xs = spec.inner_box()

    xb = _axis_breaks(l1, spec.mesh_density, (x0, xs, x1), nx_cells, eps)
    yb = _axis_breaks(l2, spec.mesh_density, (y0, y1), ny_cells, eps)
    nxv, nyv = len(xb), len(yb)
    nrx, nry = nxv - 1, nyv - 1

    def gvid(ix, iy):
        return iy * nxv + ix

    # classify rectangles by centroid, mapped back into cell coordinates
    cx = 0.5 * (xb[:-1] + xb[1:])
    cy = 0.5 * (yb[:-1] + yb[1:])
    hx = np.minimum((cx / (eps * l1)).astype(np.int64), nx_cells - 1)
    hy = np.minimum((cy / (eps * l2)).astype(np.int64), ny_cells - 1)
    lx = cx / eps - hx * l1
    ly = cy / eps - hy * l2
    rect_region = np.empty((nrx, nry), dtype=np.int64)
    for ix in range(nrx):
        for iy in range(nry):
            rect_region[ix, iy] = spec.region_at(lx[ix], ly[iy])

    # per-region node numbering: grid vertex -> DOF, blocks [I1 | I2 | E]
    used = np.zeros((3, nxv * nyv), dtype=bool)
    for ix in range(nrx):
        for iy in range(nry):
            r = rect_region[ix, iy]
            for g in (gvid(ix, iy), gvid(ix + 1, iy),
                      gvid(ix, iy + 1), gvid(ix + 1, iy + 1)):
                used[r, g] = True
    dof_of = np.full((3, nxv * nyv), -1, dtype=np.int64)
    offset = 0
    block_sizes = []
    for r in (REGION_I1, REGION_I2, REGION_E):
        idx = np.flatnonzero(used[r])
        dof_of[r, idx] = offset + np.arange(len(idx))
        offset += len(idx)
        block_sizes.append(len(idx))
    n_dofs = offset

    gx, gy = np.meshgrid(xb, yb, indexing="xy")
    gcoords = np.column_stack([gx.ravel(), gy.ravel()])
    nodes = np.empty((n_dofs, 2))
    for r in (REGION_I1, REGION_I2, REGION_E):
        idx = np.flatnonzero(used[r])
        nodes[dof_of[r, idx]] = gcoords[idx]

    # two CCW triangles per rectangle, fixed diagonal (v00, v11)
    triangles = []
    tri_region = []
    tri_cell = []
    for iy in range(nry):
        for ix in range(nrx):
            r = rect_region[ix, iy]
            v00 = dof_of[r, gvid(ix, iy)]
            v10 = dof_of[r, gvid(ix + 1, iy)]
            v01 = dof_of[r, gvid(ix, iy + 1)]
            v11 = dof_of[r, gvid(ix + 1, iy + 1)]
            triangles.append((v00, v10, v11))
            triangles.append((v00, v11, v01))
            tri_region.extend((r, r))
            tri_cell.extend(((hx[ix], hy[iy]),) * 2)
    triangles = np.asarray(triangles, dtype=np.int64)
    tri_region = np.asarray(tri_region, dtype=np.int64)
    tri_cell = np.asarray(tri_cell, dtype=np.int64)

    # interface facets: grid edges whose two adjacent rectangles differ in region
    edges = {GAMMA1: [], GAMMA2: [], GAMMA12: []}
    exterior = []

    def classify(ra, rb):
        pair = {ra, rb}
        if pair == {REGION_I1, REGION_E}:
            return GAMMA1, REGION_I1, REGION_E
        if pair == {REGION_I2, REGION_E}:
            return GAMMA2, REGION_I2, REGION_E
        if pair == {REGION_I1, REGION_I2}:
            return GAMMA12, REGION_I1, REGION_I2
        raise InvalidSpecError(f"unexpected region adjacency {ra}|{rb}")

    for iy in range(nry):
        for ix in range(nrx + 1):
            g0, g1 = gvid(ix, iy), gvid(ix, iy + 1)
            left = rect_region[ix - 1, iy] if ix > 0 else None
            right = rect_region[ix, iy] if ix < nrx else None
            if left is None or right is None:
                exterior.append((REGION_E, g0, g1))
                continue
            if left == right:
                continue
            kind, ri, _ = classify(left, right)
            normal = (1.0, 0.0) if left == ri else (-1.0, 0.0)
            edges[kind].append((g0, g1, normal, left, right))
    for ix in range(nrx):
        for iy in range(nry + 1):
            g0, g1 = gvid(ix, iy), gvid(ix + 1, iy)
            below = rect_region[ix, iy - 1] if iy > 0 else None
            above = rect_region[ix, iy] if iy < nry else None
            if below is None or above is None:
                exterior.append((REGION_E, g0, g1))
                continue
            if below == above:
                continue
            kind, ri, _ = classify(below, above)
            normal = (0.0, 1.0) if below == ri else (0.0, -1.0)
            edges[kind].append((g0, g1, normal, below, above))

    def cell_of_point(x, y):
        h1 = min(int(x / (eps * l1)), nx_cells - 1)
        h2 = min(int(y / (eps * l2)), ny_cells - 1)
        return h1, h2

    def build_facetset(kind, items):
        if not items:
            return _empty_facetset()
        _, region_in, region_out = {
            GAMMA1: (None, REGION_I1, REGION_E),
            GAMMA2: (None, REGION_I2, REGION_E),
            GAMMA12: (None, REGION_I1, REGION_I2),
        }[kind]
        items = sorted(items, key=lambda t: (t[0], t[1]))
        gvids = sorted({g for t in items for g in (t[0], t[1])})
        slot_of = {g: i for i, g in enumerate(gvids)}
        nodes_in = np.array([[dof_of[region_in, t[0]], dof_of[region_in, t[1]]]
                             for t in items], dtype=np.int64)
        nodes_out = np.array([[dof_of[region_out, t[0]], dof_of[region_out, t[1]]]
                              for t in items], dtype=np.int64)
        slots = np.array([[slot_of[t[0]], slot_of[t[1]]] for t in items],
                         dtype=np.int64)
        p0 = gcoords[[t[0] for t in items]]
        p1 = gcoords[[t[1] for t in items]]
        lengths = np.linalg.norm(p1 - p0, axis=1)
        normals = np.array([t[2] for t in items])
        mids = 0.5 * (p0 + p1)
        cells = np.array([cell_of_point(x, y) for x, y in mids], dtype=np.int64)
        pair_in = np.array([dof_of[region_in, g] for g in gvids], dtype=np.int64)
        pair_out = np.array([dof_of[region_out, g] for g in gvids], dtype=np.int64)
        coords = gcoords[gvids]
        node_cells = np.array([cell_of_point(x, y) for x, y in coords],
                              dtype=np.int64)
        return FacetSet(nodes_in, nodes_out, lengths, normals, cells, slots,
                        pair_in, pair_out, coords, node_cells)

    gamma1 = build_facetset(GAMMA1, edges[GAMMA1])
    gamma2 = build_facetset(GAMMA2, edges[GAMMA2])
    gamma12 = build_facetset(GAMMA12, edges[GAMMA12])

    ext_nodes = np.array([[dof_of[r, g0], dof_of[r, g1]]
                          for r, g0, g1 in exterior], dtype=np.int64)
    ext_lengths = np.linalg.norm(gcoords[[g1 for _, _, g1 in exterior]]
                                 - gcoords[[g0 for _, g0, _ in exterior]], axis=1)

    # intracellular components: one per (region, cell); E nodes get -1
    components = []
    comp_id = {}
    for h2 in range(ny_cells):
        for h1 in range(nx_cells):
            for r in (REGION_I1, REGION_I2):
                comp_id[(r, h1, h2)] = len(components)
                components.append((r, h1, h2))
    node_component = np.full(n_dofs, -1, dtype=np.int64)
    for r in (REGION_I1, REGION_I2):
        mask = tri_region == r
        for tri, (h1, h2) in zip(triangles[mask], tri_cell[mask]):
            node_component[tri] = comp_id[(r, h1, h2)]

    return MicroMesh(spec, tiling, nodes, triangles, tri_region, tri_cell,
                     block_sizes, gamma1, gamma2, gamma12,
                     ext_nodes, ext_lengths, node_component, components)


def build_unit_cell(spec):
    """Triangulate one reference cell (tiling (1, 1) at scale 1)."""
    return _build(spec, TilingSpec((1, 1), 1.0))


def tile(mesh, tiling):
    """Tile the mesh's generating cell N_x x N_y times at scale eps.

    Copies are glued along shared extracellular edges; intracellular regions
    stay separate per cell; interface records carry their cell index.
    """
    return _build(mesh.spec, tiling)


def interface_measures(mesh):
    """Return (|Gamma1|, |Gamma2|, |Gamma12|, |Omega_i1|, |Omega_i2|, |Omega_e|)."""
    return (mesh.gamma1.measure, mesh.gamma2.measure, mesh.gamma12.measure,
            mesh.region_area(REGION_I1), mesh.region_area(REGION_I2),
            mesh.region_area(REGION_E))


def connected_component_count(mesh, region):
    """Number of connected components of one region (union-find on triangles)."""
    parent = np.arange(mesh.n_dofs)

    def find(a):
        while parent[a] != a:
            parent[a] = parent[parent[a]]
            a = parent[a]
        return a

    mask = mesh.tri_region == region
    for tri in mesh.triangles[mask]:
        ra = find(tri[0])
        for b in tri[1:]:
            rb = find(b)
            parent[rb] = ra
    roots = {find(v) for v in np.unique(mesh.triangles[mask])}
    return len(roots)


def write_vtk(mesh, path, point_data=None, cell_data=None):
    """Write the mesh as legacy ASCII VTK (triangle cells, region tag cell data).

    point_data / cell_data: optional {name: array} of per-node / per-triangle
    scalars appended to the file.
    """
    point_data = point_data or {}
    cell_data = cell_data or {}
    m = len(mesh.triangles)
    lines = [
        "# vtk DataFile Version 3.0",
        "three-region microstructure mesh",
        "ASCII",
        "DATASET UNSTRUCTURED_GRID",
        f"POINTS {mesh.n_dofs} double",
    ]
    for x, y in mesh.nodes:
        lines.append(f"{float(x)!r} {float(y)!r} 0.0")
    lines.append(f"CELLS {m} {4 * m}")
    for a, b, c in mesh.triangles:
        lines.append(f"3 {a} {b} {c}")
    lines.append(f"CELL_TYPES {m}")
    lines.extend(["5"] * m)
    lines.append(f"CELL_DATA {m}")
    lines.append("SCALARS region int 1")
    lines.append("LOOKUP_TABLE default")
    lines.extend(str(int(r)) for r in mesh.tri_region)
    for name, values in cell_data.items():
        lines.append(f"SCALARS {name} double 1")
        lines.append("LOOKUP_TABLE default")
        lines.extend(f"{float(v)!r}" for v in values)
    if point_data:
        lines.append(f"POINT_DATA {mesh.n_dofs}")
        for name, values in point_data.items():
            lines.append(f"SCALARS {name} double 1")
            lines.append("LOOKUP_TABLE default")
            lines.extend(f"{float(v)!r}" for v in values)
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")
