"""
1D vessel networks: nodes, straight cylindrical segments and pressure
boundary data, loaded from the JSON network format and discretized into a
line mesh for the 3D-1D solver.
"""
import json
import logging as log
import unittest
from dataclasses import dataclass

import numpy as np
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components

from libhypoxia import DATA_DIR
from libhypoxia.util import Serialize, dump_json

DEFAULT_BOX = 500e-6


class NetworkError(Exception):

    def __init__(self, message, segment=None):
        self.segment = segment
        super().__init__(f"segment {segment}: {message}" if segment is not None else message)


@dataclass
class Segment(Serialize):
    id: int
    n0: int
    n1: int
    radius: float
    elements: int = 1


@dataclass
class Boundary(Serialize):
    node: int
    kind: str = "pressure"
    value: float | None = None

    def pressure(self, default):
        return default if self.value is None else float(self.value)


@dataclass
class VesselMesh:
    points: np.ndarray
    elements: np.ndarray
    segment: np.ndarray
    radius: np.ndarray
    length: np.ndarray
    inlet_nodes: np.ndarray
    outlet_nodes: np.ndarray

    @property
    def n_nodes(self):
        return len(self.points)

    @property
    def n_elements(self):
        return len(self.elements)

    def midpoints(self):
        return 0.5 * (self.points[self.elements[:, 0]] + self.points[self.elements[:, 1]])

    def incidence(self):
        """Signed element-node incidence matrix D (elements x nodes), +1 at the end node"""
        e = np.arange(self.n_elements)
        rows = np.concatenate((e, e))
        cols = np.concatenate((self.elements[:, 1], self.elements[:, 0]))
        vals = np.concatenate((np.ones(self.n_elements), -np.ones(self.n_elements)))
        return coo_matrix((vals, (rows, cols)), shape=(self.n_elements, self.n_nodes)).tocsr()

    def averaging(self):
        """Element mean of nodal values: M (elements x nodes) with 1/2 at both ends"""
        return abs(self.incidence()) * 0.5


@dataclass
class VesselNetwork:
    node_ids: list
    coords: np.ndarray
    segments: list
    inlets: list
    outlets: list
    box: np.ndarray

    @classmethod
    def from_dict(cls, data):
        try:
            nodes = data["nodes"]
            node_ids = [int(n["id"]) for n in nodes]
            coords = np.array([[float(n["x"]), float(n["y"]), float(n["z"])] for n in nodes], dtype=float)
            segments = [Segment.from_dict(s) for s in data["segments"]]
            inlets = [Boundary.from_dict(b) for b in data.get("inlets", [])]
            outlets = [Boundary.from_dict(b) for b in data.get("outlets", [])]
        except (KeyError, TypeError, ValueError) as E:
            raise NetworkError(f"malformed network: {E}") from E
        box = np.asarray(data.get("box", [DEFAULT_BOX] * 3), dtype=float)
        net = cls(node_ids=node_ids, coords=coords, segments=segments, inlets=inlets, outlets=outlets, box=box)
        net.validate()
        return net

    @classmethod
    def from_json(cls, text):
        try:
            data = json.loads(text)
        except json.JSONDecodeError as E:
            raise NetworkError(f"malformed network file: {E}") from E
        return cls.from_dict(data)

    @classmethod
    def load(cls, path):
        with open(path) as fd:
            return cls.from_json(fd.read())

    def to_dict(self):
        return {
            "box": self.box,
            "nodes": [{"id": i, "x": x, "y": y, "z": z} for i, (x, y, z) in zip(self.node_ids, self.coords)],
            "segments": [s.to_dict() for s in self.segments],
            "inlets": [b.to_dict() for b in self.inlets],
            "outlets": [b.to_dict() for b in self.outlets],
        }

    def to_json(self):
        return dump_json(self.to_dict())

    def index(self, node_id):
        try:
            return self.node_ids.index(node_id)
        except ValueError:
            raise NetworkError(f"unknown node {node_id}") from None

    def degree(self):
        deg = np.zeros(len(self.node_ids), dtype=int)
        for seg in self.segments:
            deg[self.index(seg.n0)] += 1
            deg[self.index(seg.n1)] += 1
        return deg

    def validate(self, box=None):
        box = self.box if box is None else np.asarray(box, dtype=float)
        if len(set(self.node_ids)) != len(self.node_ids):
            raise NetworkError("duplicate node ids")
        if len({s.id for s in self.segments}) != len(self.segments):
            raise NetworkError("duplicate segment ids")
        if not self.segments:
            raise NetworkError("network has no segments")

        for seg in self.segments:
            if seg.n0 not in self.node_ids or seg.n1 not in self.node_ids:
                raise NetworkError("refers to an unknown node", seg.id)
            if not seg.radius > 0:
                raise NetworkError(f"radius must be positive, got {seg.radius}", seg.id)
            if int(seg.elements) < 1:
                raise NetworkError("needs at least one element", seg.id)
            a, b = self.coords[self.index(seg.n0)], self.coords[self.index(seg.n1)]
            if not np.linalg.norm(b - a) > 0:
                raise NetworkError("has zero length", seg.id)
            tol = 1e-12 * np.max(box)
            for p in (a, b):
                if np.any(p < -tol) or np.any(p > box + tol):
                    raise NetworkError(f"lies outside the tissue box {box.tolist()}", seg.id)

        if not self.inlets or not self.outlets:
            raise NetworkError("need at least one inlet and one outlet")
        deg = self.degree()
        for b in self.inlets + self.outlets:
            if b.kind != "pressure":
                raise NetworkError(f"unsupported boundary kind {b.kind!r} at node {b.node}")
            if deg[self.index(b.node)] != 1:
                raise NetworkError(f"boundary node {b.node} is not a terminal node")

        n = len(self.node_ids)
        rows = [self.index(s.n0) for s in self.segments]
        cols = [self.index(s.n1) for s in self.segments]
        adj = coo_matrix((np.ones(len(rows)), (rows, cols)), shape=(n, n))
        _, labels = connected_components(adj, directed=False)
        reach = labels[self.index(self.inlets[0].node)]
        if np.any(labels != reach):
            lost = [self.node_ids[i] for i in np.nonzero(labels != reach)[0]]
            raise NetworkError(f"nodes {lost} are not connected to the inlet")

    def mesh(self):
        """Split every segment into its elements; network nodes keep their index"""
        points = [p for p in self.coords]
        elements, segment, radius = [], [], []
        for s, seg in enumerate(self.segments):
            a, b = self.index(seg.n0), self.index(seg.n1)
            ne = int(seg.elements)
            chain = [a]
            for j in range(1, ne):
                points.append(self.coords[a] + (self.coords[b] - self.coords[a]) * (j / ne))
                chain.append(len(points) - 1)
            chain.append(b)
            for u, v in zip(chain[:-1], chain[1:]):
                elements.append((u, v))
                segment.append(s)
                radius.append(seg.radius)

        points = np.array(points, dtype=float)
        elements = np.array(elements, dtype=int)
        length = np.linalg.norm(points[elements[:, 1]] - points[elements[:, 0]], axis=1)
        log.debug(f"Vessel mesh: {len(points)} nodes, {len(elements)} elements")
        return VesselMesh(
            points=points,
            elements=elements,
            segment=np.array(segment, dtype=int),
            radius=np.array(radius, dtype=float),
            length=length,
            inlet_nodes=np.array([self.index(b.node) for b in self.inlets], dtype=int),
            outlet_nodes=np.array([self.index(b.node) for b in self.outlets], dtype=int),
        )


def default_network():
    """Synthetic two-level bifurcating network shipped with the package"""
    return VesselNetwork.load(DATA_DIR / "network-default.json")


def straight_tube(length, radius, elements=8, box=None, offset=None):
    """Single axis-aligned tube along x, used for calibration runs and tests"""
    box = np.full(3, length) if box is None else np.asarray(box, dtype=float)
    start = np.array([0.0, box[1] / 2, box[2] / 2]) if offset is None else np.asarray(offset, dtype=float)
    return VesselNetwork(
        node_ids=[0, 1],
        coords=np.array([start, start + [length, 0.0, 0.0]]),
        segments=[Segment(0, 0, 1, radius, elements)],
        inlets=[Boundary(0)],
        outlets=[Boundary(1)],
        box=box,
    )


class TestNetwork(unittest.TestCase):

    def test_default_network(self):
        net = default_network()
        self.assertTrue(5 <= len(net.segments) <= 15)
        self.assertEqual(len(net.inlets), 1)
        self.assertEqual(len(net.outlets), 1)
        np.testing.assert_allclose(net.box, [500e-6] * 3)
        mesh = net.mesh()
        self.assertEqual(mesh.n_elements, sum(s.elements for s in net.segments))
        for seg in net.segments:
            total = mesh.length[mesh.segment == net.segments.index(seg)].sum()
            a, b = net.coords[net.index(seg.n0)], net.coords[net.index(seg.n1)]
            self.assertAlmostEqual(total, np.linalg.norm(b - a), delta=1e-18)

    def test_round_trip(self):
        net = default_network()
        again = VesselNetwork.from_json(net.to_json())
        self.assertEqual(again.node_ids, net.node_ids)
        np.testing.assert_array_equal(again.coords, net.coords)
        self.assertEqual(again.segments, net.segments)

    def test_outside_box_names_segment(self):
        data = default_network().to_dict()
        data["nodes"][-1]["x"] = 600e-6
        with self.assertRaises(NetworkError) as ctx:
            VesselNetwork.from_dict(data)
        self.assertEqual(ctx.exception.segment, data["segments"][-1]["id"])
        self.assertIn(str(data["segments"][-1]["id"]), str(ctx.exception))

    def test_invalid(self):
        base = straight_tube(1e-4, 5e-6).to_json()
        bad = json.loads(base)
        bad["segments"][0]["radius"] = 0.0
        with self.assertRaises(NetworkError):
            VesselNetwork.from_dict(bad)
        bad = json.loads(base)
        bad["outlets"] = []
        with self.assertRaises(NetworkError):
            VesselNetwork.from_dict(bad)
        bad = json.loads(base)
        bad["nodes"].append({"id": 7, "x": 0.0, "y": 0.0, "z": 0.0})
        with self.assertRaises(NetworkError):
            VesselNetwork.from_dict(bad)
        with self.assertRaises(NetworkError):
            VesselNetwork.from_json("{nodes")

    def test_mesh_operators(self):
        mesh = straight_tube(1e-4, 5e-6, elements=4).mesh()
        self.assertEqual(mesh.n_nodes, 5)
        x = mesh.points[:, 0]
        np.testing.assert_allclose(mesh.incidence() @ x, mesh.length, rtol=1e-12)
        np.testing.assert_allclose(mesh.averaging() @ x, mesh.midpoints()[:, 0], rtol=1e-12)
