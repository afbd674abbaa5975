"""
Structured tissue grid for the cell-centered finite-volume solver, the
vessel-to-cell coupling map and field output.

Cells are numbered x-fastest: idx = i + nx * (j + ny * k).
"""
import logging as log
import tempfile
import unittest
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import sparse

from libhypoxia.network import NetworkError, straight_tube
from libhypoxia.util import fmt17, read_csv_columns, write_csv

# crossings closer than this (in element parameter) to an end point are dropped
PLANE_EPS = 1e-12


@dataclass(frozen=True)
class TissueGrid:
    extent: tuple
    cells: tuple
    # axes with no flux through their boundary faces, for pseudo-1D runs
    sealed: tuple = (False, False, False)

    def __post_init__(self):
        if len(self.extent) != 3 or len(self.cells) != 3:
            raise ValueError("grid needs three extents and three cell counts")
        if min(self.cells) < 4:
            raise ValueError(f"need at least 4 cells per axis, got {tuple(self.cells)}")
        if not all(e > 0 for e in self.extent):
            raise ValueError("grid extents must be positive")

    @classmethod
    def cube(cls, extent, cells):
        return cls((extent,) * 3, (int(cells),) * 3)

    @property
    def h(self):
        return np.asarray(self.extent, dtype=float) / np.asarray(self.cells)

    @property
    def n_cells(self):
        nx, ny, nz = self.cells
        return nx * ny * nz

    @property
    def cell_volume(self):
        return float(np.prod(self.h))

    def face_area(self, axis):
        h = self.h
        return float(np.prod(np.delete(h, axis)))

    def ijk(self):
        nx, ny, nz = self.cells
        idx = np.arange(self.n_cells)
        return idx % nx, (idx // nx) % ny, idx // (nx * ny)

    def centers(self):
        h = self.h
        i, j, k = self.ijk()
        return np.column_stack(((i + 0.5) * h[0], (j + 0.5) * h[1], (k + 0.5) * h[2]))

    def locate(self, point):
        """Index of the cell holding a point; points on the far faces map into the last cell"""
        ijk = np.floor(np.asarray(point, dtype=float) / self.h).astype(int)
        ijk = np.clip(ijk, 0, np.asarray(self.cells) - 1)
        nx, ny, _ = self.cells
        return int(ijk[0] + nx * (ijk[1] + ny * ijk[2]))

    def internal_faces(self):
        """(left cell, right cell, axis) for every interior face"""
        nx, ny, nz = self.cells
        idx = np.arange(self.n_cells).reshape(nz, ny, nx)
        left, right, axis = [], [], []
        for ax, (a, b) in enumerate((
            (idx[:, :, :-1], idx[:, :, 1:]),
            (idx[:, :-1, :], idx[:, 1:, :]),
            (idx[:-1, :, :], idx[1:, :, :]),
        )):
            left.append(a.ravel())
            right.append(b.ravel())
            axis.append(np.full(a.size, ax))
        return np.concatenate(left), np.concatenate(right), np.concatenate(axis)

    def boundary_faces(self):
        """(cell, axis, outward sign) for every face on an unsealed side of the box"""
        nx, ny, nz = self.cells
        idx = np.arange(self.n_cells).reshape(nz, ny, nx)
        cells, axis, sign = [], [], []
        sides = (
            (idx[:, :, 0], idx[:, :, -1]),
            (idx[:, 0, :], idx[:, -1, :]),
            (idx[0, :, :], idx[-1, :, :]),
        )
        for ax, (lo, hi) in enumerate(sides):
            if self.sealed[ax]:
                continue
            for face, s in ((lo, -1), (hi, 1)):
                cells.append(face.ravel())
                axis.append(np.full(face.size, ax))
                sign.append(np.full(face.size, s))
        if not cells:
            return np.zeros(0, dtype=int), np.zeros(0, dtype=int), np.zeros(0, dtype=int)
        return np.concatenate(cells), np.concatenate(axis), np.concatenate(sign)

    def face_transmissibility(self, axis):
        """Area over center distance of an interior face"""
        return self.face_area(axis) / self.h[axis]

    def diffusion_matrix(self, coeff):
        """Two-point flux operator: (A c)_i = sum over faces of coeff * T * (c_i - c_j)"""
        left, right, axis = self.internal_faces()
        T = coeff * np.array([self.face_transmissibility(a) for a in range(3)])[axis]
        n = self.n_cells
        A = sparse.coo_matrix((
            np.concatenate((T, T, -T, -T)),
            (np.concatenate((left, right, left, right)), np.concatenate((left, right, right, left))),
        ), shape=(n, n))
        return A.tocsr()

    def robin_conductance(self, beta, D):
        """Per-cell conductance of the Robin boundary, flux = g * (c - c_far)

        The half-cell diffusive resistance sits in series with 1/beta.
        """
        g = np.zeros(self.n_cells)
        if beta <= 0:
            return g
        cells, axis, _ = self.boundary_faces()
        for c, ax in zip(cells, axis):
            half = 0.5 * self.h[ax]
            resist = 1.0 / beta + (half / D if D > 0 else np.inf)
            g[c] += self.face_area(ax) / resist
        return g


@dataclass
class LineCouplingMap:
    ptr: np.ndarray
    cells: np.ndarray
    lengths: np.ndarray
    n_cells: int

    @property
    def n_elements(self):
        return len(self.ptr) - 1

    def entries(self, e):
        a, b = self.ptr[e], self.ptr[e + 1]
        return list(zip(self.cells[a:b].tolist(), self.lengths[a:b].tolist()))

    def element_lengths(self):
        return np.add.reduceat(self.lengths, self.ptr[:-1])

    def length_matrix(self):
        """Intersection lengths (elements x cells)"""
        rows = np.repeat(np.arange(self.n_elements), np.diff(self.ptr))
        return sparse.csr_matrix((self.lengths, (rows, self.cells)), shape=(self.n_elements, self.n_cells))

    def weight_matrix(self):
        """Length-weighted averaging of tissue cells onto elements; rows sum to one"""
        L = self.length_matrix()
        return sparse.diags(1.0 / self.element_lengths()) @ L

    def intersected(self):
        mask = np.zeros(self.n_cells, dtype=bool)
        mask[self.cells] = True
        return mask


def _clip_element(p, q, grid):
    h = grid.h
    d = q - p
    ts = [0.0, 1.0]
    for ax in range(3):
        if d[ax] == 0:
            continue
        lo, hi = sorted((p[ax], q[ax]))
        for m in range(int(np.ceil(lo / h[ax])), int(np.floor(hi / h[ax])) + 1):
            t = (m * h[ax] - p[ax]) / d[ax]
            if PLANE_EPS < t < 1.0 - PLANE_EPS:
                ts.append(t)
    ts = np.unique(ts)
    length = float(np.linalg.norm(d))

    res = []
    for t0, t1 in zip(ts[:-1], ts[1:]):
        cell = grid.locate(p + 0.5 * (t0 + t1) * d)
        seg = (t1 - t0) * length
        if res and res[-1][0] == cell:
            res[-1][1] += seg
        else:
            res.append([cell, seg])
    return res


def build_coupling(network, grid, mesh=None):
    """Exact intersection lengths of every vessel element with the grid cells"""
    network.validate(grid.extent)
    mesh = mesh or network.mesh()
    ptr, cells, lengths = [0], [], []
    for e, (u, v) in enumerate(mesh.elements):
        pieces = _clip_element(mesh.points[u], mesh.points[v], grid)
        if not pieces:
            raise NetworkError("element does not intersect the grid", network.segments[mesh.segment[e]].id)
        for c, ell in pieces:
            cells.append(c)
            lengths.append(ell)
        ptr.append(len(cells))
    coupling = LineCouplingMap(
        ptr=np.array(ptr, dtype=int),
        cells=np.array(cells, dtype=int),
        lengths=np.array(lengths, dtype=float),
        n_cells=grid.n_cells,
    )
    log.debug(f"Coupling map: {mesh.n_elements} elements, {len(cells)} entries, "
              f"{int(coupling.intersected().sum())} cells touched")
    return coupling


def spatial_average(field, grid, mask=None):
    """Volume-weighted mean of a cell field, optionally over a mask"""
    field = np.asarray(field, dtype=float)
    if field.size != grid.n_cells:
        raise ValueError(f"field has {field.size} values for {grid.n_cells} cells")
    # uniform cells: the volume weights cancel
    if mask is None:
        return float(np.sum(field) / field.size)
    count = int(np.count_nonzero(mask))
    if not count:
        raise ValueError("empty mask")
    return float(np.sum(field[mask]) / count)


def write_vtk(path, grid, fields, title="tpzctl fields"):
    """Legacy ASCII STRUCTURED_POINTS file with one cell scalar per field"""
    nx, ny, nz = grid.cells
    h = grid.h
    with open(path, "w") as fd:
        fd.write("# vtk DataFile Version 3.0\n")
        fd.write(f"{title}\n")
        fd.write("ASCII\n")
        fd.write("DATASET STRUCTURED_POINTS\n")
        fd.write(f"DIMENSIONS {nx + 1} {ny + 1} {nz + 1}\n")
        fd.write("ORIGIN 0 0 0\n")
        fd.write(f"SPACING {fmt17(h[0])} {fmt17(h[1])} {fmt17(h[2])}\n")
        fd.write(f"CELL_DATA {grid.n_cells}\n")
        for name, values in fields.items():
            fd.write(f"SCALARS {name} double 1\n")
            fd.write("LOOKUP_TABLE default\n")
            for v in np.asarray(values, dtype=float):
                fd.write(f"{fmt17(v)}\n")


def write_field_csv(path, grid, field):
    centers = grid.centers()
    rows = ((i, *centers[i], float(v)) for i, v in enumerate(np.asarray(field, dtype=float)))
    write_csv(path, ("cell", "x", "y", "z", "value"), rows)


class TestGrid(unittest.TestCase):

    def setUp(self):
        self.grid = TissueGrid.cube(1e-3, 10)

    def test_geometry(self):
        g = self.grid
        self.assertEqual(g.n_cells, 1000)
        np.testing.assert_allclose(g.h, 1e-4)
        self.assertEqual(g.locate((0.0, 0.0, 0.0)), 0)
        self.assertEqual(g.locate((1e-3, 1e-3, 1e-3)), 999)
        left, right, axis = g.internal_faces()
        self.assertEqual(left.size, 3 * 9 * 100)
        cells, _, _ = g.boundary_faces()
        self.assertEqual(cells.size, 600)
        with self.assertRaises(ValueError):
            TissueGrid((1.0, 1.0, 1.0), (3, 4, 4))

    def test_diffusion_rows_sum_to_zero(self):
        A = self.grid.diffusion_matrix(2.0)
        np.testing.assert_allclose(A @ np.ones(self.grid.n_cells), 0.0, atol=1e-18)
        self.assertTrue(abs(A - A.T).max() == 0)

    def test_sealed_axes(self):
        g = TissueGrid((1e-3, 1e-3, 1e-3), (4, 4, 20), sealed=(True, True, False))
        cells, axis, _ = g.boundary_faces()
        self.assertTrue(np.all(axis == 2))
        self.assertEqual(cells.size, 32)

    def _tube(self, start, stop):
        net = straight_tube(1e-3, 5e-6, elements=1, box=(1e-3,) * 3)
        net.coords = np.array([start, stop], dtype=float)
        return net

    def test_axis_aligned_three_cells(self):
        net = self._tube((1e-4, 5.5e-4, 5.5e-4), (4e-4, 5.5e-4, 5.5e-4))
        cmap = build_coupling(net, self.grid)
        entries = cmap.entries(0)
        self.assertEqual(len(entries), 3)
        for _, ell in entries:
            self.assertAlmostEqual(ell, 1e-4, delta=1e-16)
        self.assertAlmostEqual(sum(ell for _, ell in entries), 3e-4, delta=1e-16)

    def test_inside_one_cell(self):
        net = self._tube((1.2e-4, 1.3e-4, 1.4e-4), (1.8e-4, 1.6e-4, 1.5e-4))
        entries = build_coupling(net, self.grid).entries(0)
        self.assertEqual(len(entries), 1)
        self.assertAlmostEqual(entries[0][1], np.linalg.norm([6e-5, 3e-5, 1e-5]), delta=1e-18)

    def test_random_lengths(self):
        rng = np.random.default_rng(3)
        for _ in range(50):
            a, b = rng.uniform(0, 1e-3, size=(2, 3))
            net = self._tube(a, b)
            cmap = build_coupling(net, self.grid)
            total = cmap.lengths.sum()
            self.assertLess(abs(total - np.linalg.norm(b - a)) / np.linalg.norm(b - a), 1e-10)
            np.testing.assert_allclose(cmap.weight_matrix().sum(axis=1), 1.0, rtol=1e-12)

    def test_outside_box(self):
        net = self._tube((1e-4, 1e-4, 1e-4), (2e-3, 1e-4, 1e-4))
        with self.assertRaises(NetworkError) as ctx:
            build_coupling(net, self.grid)
        self.assertEqual(ctx.exception.segment, 0)

    def test_spatial_average(self):
        g = self.grid
        self.assertEqual(spatial_average(np.full(g.n_cells, 0.25), g), 0.25)
        self.assertAlmostEqual(spatial_average(g.centers()[:, 0], g), 0.5e-3, delta=1e-18)
        field = np.random.default_rng(0).random(g.n_cells)
        self.assertEqual(spatial_average(field, g), np.sum(field) / g.n_cells)

    def test_output(self):
        g = TissueGrid.cube(1e-3, 4)
        field = np.arange(g.n_cells, dtype=float)
        with tempfile.TemporaryDirectory() as tmp:
            write_vtk(Path(tmp) / "f.vtk", g, {"c": field})
            lines = (Path(tmp) / "f.vtk").read_text().splitlines()
            self.assertEqual(lines[4], "DIMENSIONS 5 5 5")
            self.assertEqual(len(lines), 10 + g.n_cells)
            write_field_csv(Path(tmp) / "f.csv", g, field)
            cols = read_csv_columns(Path(tmp) / "f.csv")
            np.testing.assert_array_equal(cols["value"], field)
