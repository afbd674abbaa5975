"""
Desk-scale mixed-dimensional solver: a 1D vessel network embedded in a
structured 3D tissue grid.

Stages run in order and each feeds the next:

  flow        Poiseuille network + Darcy tissue, Starling exchange, linear
              lymphatic drainage that solutes follow upwind
  hematocrit  upwind transport with equal-discharge splitting at junctions
  oxygen      steady transport, Hill-bound vessel oxygen, Michaelis-Menten
              consumption, solved by damped Picard iteration
  tpz         implicit-Euler transport with the surrogate sink SF(t) r(t)

Vessel unknowns live on mesh nodes, tissue unknowns on cells. Exchange is
evaluated per vessel element from the element mean of the vessel value and
the length-weighted mean of the cells the element crosses; half of the
element flux goes to each end node and the tissue share is deposited by
intersection length.
"""
import math
import logging as log
import unittest
from dataclasses import dataclass, field, replace

import numpy as np
from scipy import sparse
from scipy.integrate import trapezoid
from scipy.sparse.linalg import spsolve

from libhypoxia.grid import TissueGrid, build_coupling, spatial_average
from libhypoxia.network import VesselNetwork, VesselMesh, default_network, straight_tube
from libhypoxia.params import ParameterError, Numerics, baseline_parameters, default_protocol
from libhypoxia.pkpd0d import SUMMARY_TIMES, vascular_tpz
from libhypoxia.surrogate import SigmoidFit, RationalFit, eval_sigmoid, eval_rational, BASELINE_SIGMOID, BASELINE_RATIONAL
from libhypoxia.util import Serialize


class SolverError(Exception):

    def __init__(self, message, stage=None, history=None):
        self.stage = stage
        self.history = history or []
        super().__init__(f"{stage}: {message}" if stage else message)


@dataclass
class Geometry:
    network: VesselNetwork
    grid: TissueGrid
    mesh: VesselMesh
    coupling: object

    def __post_init__(self):
        self.W = self.coupling.weight_matrix().tocsr()
        self.D = self.mesh.incidence()
        self.M = self.mesh.averaging()
        self.surface = 2.0 * math.pi * self.mesh.radius * self.mesh.length
        self.section = math.pi * self.mesh.radius ** 2
        self.faces = self.grid.internal_faces()
        self.intersected = self.coupling.intersected()

    @classmethod
    def build(cls, network, grid):
        mesh = network.mesh()
        return cls(network, grid, mesh, build_coupling(network, grid, mesh))

    @property
    def n_nodes(self):
        return self.mesh.n_nodes

    @property
    def n_cells(self):
        return self.grid.n_cells

    def face_area(self):
        _, _, axis = self.faces
        return np.array([self.grid.face_area(a) for a in range(3)])[axis]


@dataclass
class Hematocrit:
    element: np.ndarray
    node: np.ndarray


@dataclass
class FieldSet:
    geometry: Geometry
    p_t: np.ndarray
    u_t: np.ndarray
    p_v: np.ndarray
    Q: np.ndarray
    u_v: np.ndarray
    F: np.ndarray
    exit_flow: np.ndarray
    drainage: np.ndarray
    diagnostics: dict = field(default_factory=dict)
    H: np.ndarray | None = None
    H_node: np.ndarray | None = None
    c_t_ox: np.ndarray | None = None
    c_v_ox: np.ndarray | None = None
    c_t_tpz: np.ndarray | None = None
    c_v_tpz: np.ndarray | None = None

    def tissue_fields(self):
        res = {"p_t": self.p_t}
        for name in ("c_t_ox", "c_t_tpz"):
            if getattr(self, name) is not None:
                res[name] = getattr(self, name)
        return res

    def segment_rows(self):
        """Per-element vascular profile rows ordered by segment"""
        geom = self.geometry
        mesh = geom.mesh
        mean = lambda v: None if v is None else geom.M @ v
        p, cox, ctpz = mean(self.p_v), mean(self.c_v_ox), mean(self.c_v_tpz)
        start = {}
        for e in range(mesh.n_elements):
            s = mesh.segment[e]
            pos = start.get(s, 0.0)
            start[s] = pos + mesh.length[e]
            yield (
                geom.network.segments[s].id, e, pos + 0.5 * mesh.length[e], float(mesh.radius[e]),
                float(p[e]), float(self.u_v[e]),
                float(self.H[e]) if self.H is not None else "",
                float(cox[e]) if cox is not None else "",
                float(ctpz[e]) if ctpz is not None else "",
            )


SEGMENT_COLUMNS = ("segment", "element", "s", "radius", "p_v", "u_v", "H", "c_v_ox", "c_v_tpz")


def _solve(A, rhs, stage):
    A = A.tocsr()
    d = np.abs(A.diagonal())
    d[d == 0] = 1.0
    S = sparse.diags(1.0 / d)
    x = spsolve((S @ A).tocsc(), S @ rhs)
    if not np.all(np.isfinite(x)):
        raise SolverError("singular or ill-conditioned linear system", stage)
    return x


def _dirichlet(A, rhs, nodes, values, n):
    mask = np.zeros(n)
    mask[nodes] = 1.0
    vals = np.zeros(n)
    vals[nodes] = values
    A = sparse.diags(1.0 - mask) @ A + sparse.diags(mask)
    return A.tocsr(), (1.0 - mask) * rhs + vals


def _upwind(n, up, down, flux, alpha=1.0):
    a = np.abs(flux) * alpha
    return sparse.coo_matrix(
        (np.concatenate((a, -a)), (np.concatenate((up, down)), np.concatenate((up, up)))),
        shape=(n, n),
    ).tocsr()


def _exchange_blocks(geom, a1, a2):
    W, M = geom.W, geom.M
    return (
        M.T @ sparse.diags(a1) @ M,
        -(M.T @ sparse.diags(a2) @ W),
        -(W.T @ sparse.diags(a1) @ M),
        W.T @ sparse.diags(a2) @ W,
    )


def lymph_drainage(p_t, params, cell_volume):
    """Fluid drained from each cell into the lymphatics, m^3/s; negative where lymph flows back"""
    return params.L_p_LF * params.S_over_V * cell_volume * (p_t - params.p_L)


def solve_flow(network, grid, params, geometry=None):
    """Steady coupled vessel/tissue pressures"""
    geom = geometry or Geometry.build(network, grid)
    mesh = geom.mesh
    nv, nt = geom.n_nodes, geom.n_cells
    V = grid.cell_volume

    G = math.pi * mesh.radius ** 4 / (8.0 * params.mu_v * mesh.length)
    g = params.L_p * geom.surface
    lam = params.L_p_LF * params.S_over_V
    dpi = params.sigma_oncotic * (params.pi_v - params.pi_t)

    Evv, Evt, Etv, Ett = _exchange_blocks(geom, g, g)
    Avv = geom.D.T @ sparse.diags(G) @ geom.D + Evv
    Att = grid.diffusion_matrix(params.kappa / params.mu_t) + sparse.identity(nt) * (lam * V) + Ett
    rhs_v = geom.M.T @ (g * dpi)
    rhs_t = np.full(nt, lam * V * params.p_L) - geom.W.T @ (g * dpi)

    if lam == 0 and not np.any(g > 0):
        # tissue pressure is not anchored; it carries no flow either way
        log.debug("Tissue pressure floats, pinning it to p_L")
        Att, Evt, Etv = sparse.identity(nt), sparse.csr_matrix((nv, nt)), sparse.csr_matrix((nt, nv))
        rhs_t = np.full(nt, params.p_L)

    A = sparse.bmat([[Avv, Evt], [Etv, Att]], format="csr")
    rhs = np.concatenate((rhs_v, rhs_t))
    nodes = np.concatenate((mesh.inlet_nodes, mesh.outlet_nodes))
    values = [b.pressure(params.p_0 + params.delta_p) for b in network.inlets]
    values += [b.pressure(params.p_0) for b in network.outlets]
    A, rhs = _dirichlet(A, rhs, nodes, values, nv + nt)
    x = _solve(A, rhs, "flow")
    p_v, p_t = x[:nv], x[nv:]

    a, b = mesh.elements[:, 0], mesh.elements[:, 1]
    Q = G * (p_v[a] - p_v[b])
    F = g * (geom.M @ p_v - geom.W @ p_t - dpi)
    exit_flow = -(geom.D.T @ Q) + geom.M.T @ F

    left, right, axis = geom.faces
    u_t = -(params.kappa / params.mu_t) * (p_t[right] - p_t[left]) / grid.h[axis]

    q_in = float(exit_flow[mesh.inlet_nodes].sum())
    q_out = -float(exit_flow[mesh.outlet_nodes].sum())
    f_tot = float(F.sum())
    drainage = lymph_drainage(p_t, params, V)
    lymph = float(drainage.sum())
    scale = max(abs(q_in), float(np.abs(F).sum()), 1e-300)
    residual = max(abs(q_in - q_out - f_tot), abs(f_tot - lymph)) / scale
    if residual > 1e-8:
        raise SolverError(f"mass balance residual {residual:.3e} exceeds 1e-8", "flow")

    log.debug(f"Flow: Q_in={q_in:.6e} m^3/s, extravasation={f_tot:.6e}, residual={residual:.3e}")
    return FieldSet(
        geometry=geom, p_t=p_t, u_t=u_t, p_v=p_v, Q=Q, u_v=Q / geom.section, F=F, exit_flow=exit_flow,
        drainage=drainage, diagnostics={
            "q_in": q_in,
            "q_out": q_out,
            "extravasation": f_tot,
            "lymphatic_drainage": lymph,
            "mass_balance_residual": residual,
        },
    )


def transport_hematocrit(mesh, Q, F, p_v, exit_flow, H_in):
    """Upwind hematocrit with an extravasation sink, nodes visited from high to low pressure"""
    nv, ne = mesh.n_nodes, mesh.n_elements
    a, b = mesh.elements[:, 0], mesh.elements[:, 1]
    up = np.where(Q >= 0, a, b)
    down = np.where(Q >= 0, b, a)
    flow = np.abs(Q)
    scale = max(float(flow.max(initial=0.0)), 1e-300)

    inflow = [[] for _ in range(nv)]
    outflow = [[] for _ in range(nv)]
    for e in range(ne):
        if flow[e] > 0:
            inflow[down[e]].append(e)
            outflow[up[e]].append(e)
    sink = 0.5 * (np.bincount(a, F, nv) + np.bincount(b, F, nv))
    inlets, outlets = set(mesh.inlet_nodes.tolist()), set(mesh.outlet_nodes.tolist())

    H_elem = np.full(ne, np.nan)
    H_node = np.full(nv, np.nan)
    for i in np.argsort(-p_v, kind="stable"):
        ext_in = max(exit_flow[i], 0.0) if i in inlets or i in outlets else 0.0
        if i in outlets and ext_in > 1e-12 * scale:
            raise SolverError(f"flow enters through outlet node {i}, inflow hematocrit undefined", "hematocrit")
        rbc = sum(flow[e] * H_elem[e] for e in inflow[i]) + ext_in * H_in
        q_in = sum(flow[e] for e in inflow[i]) + ext_in
        if q_in <= 1e-14 * scale:
            H = H_in
        else:
            den = sum(flow[e] for e in outflow[i]) + sink[i] + max(-exit_flow[i], 0.0) * (i in outlets)
            H = rbc / den if den > 0 else rbc / q_in
        if not np.isfinite(H):
            raise SolverError(f"undefined hematocrit at node {i}", "hematocrit")
        H_node[i] = H
        for e in outflow[i]:
            H_elem[e] = H

    stagnant = np.isnan(H_elem)
    H_elem[stagnant] = H_node[a[stagnant]]
    if np.any(H_elem >= 1) or np.any(H_elem < 0):
        raise SolverError(f"hematocrit left [0, 1): range {H_elem.min()}..{H_elem.max()}", "hematocrit")
    return Hematocrit(element=H_elem, node=H_node)


def solve_hematocrit(network, flow, params):
    geom = flow.geometry
    H = transport_hematocrit(geom.mesh, flow.Q, flow.F, flow.p_v, flow.exit_flow, params.H_in)
    flow.H, flow.H_node = H.element, H.node
    return H


def bound_oxygen(c_v, H, params):
    """Hemoglobin-bound oxygen concentration from the Hill saturation curve"""
    p = np.maximum(c_v, 0.0) / params.alpha_pl
    pg = p ** params.gamma
    return params.k_1 * H * pg / (pg + params.p_s50 ** params.gamma)


def _bound_slope(c_v, H, params):
    p = np.maximum(c_v, 0.0) / params.alpha_pl
    ps = params.p_s50 ** params.gamma
    pg = p ** params.gamma
    ds = params.gamma * p ** (params.gamma - 1.0) * ps / (pg + ps) ** 2
    return params.k_1 * H * ds / params.alpha_pl


@dataclass
class _Species:
    """Static part of a vessel/tissue transport system for one solute"""
    A: sparse.csr_matrix
    rhs: np.ndarray
    robin: np.ndarray
    lymph: np.ndarray
    a1: np.ndarray
    a2: np.ndarray
    up: np.ndarray
    down: np.ndarray
    exit_nodes: np.ndarray
    exit_flow: np.ndarray


def _species(flow, params, D_v, D_t, P, reflection, beta, c_far, stage):
    geom = flow.geometry
    grid, mesh = geom.grid, geom.mesh
    nv, nt = geom.n_nodes, geom.n_cells
    V = grid.cell_volume

    Kv = geom.D.T @ sparse.diags(geom.section * D_v / mesh.length) @ geom.D
    S = P * geom.surface
    s = 1.0 - reflection
    a1, a2 = S + 0.5 * s * flow.F, S - 0.5 * s * flow.F
    Evv, Evt, Etv, Ett = _exchange_blocks(geom, a1, a2)

    left, right, _ = geom.faces
    q = flow.u_t * geom.face_area()
    adv_t = _upwind(nt, np.where(q >= 0, left, right), np.where(q >= 0, right, left), q)
    robin = grid.robin_conductance(beta, D_t)
    # upwind on the drained fluid: solute leaves with it, backflow from the lymph carries none
    lymph = np.maximum(flow.drainage, 0.0)
    Att = grid.diffusion_matrix(D_t) + adv_t + sparse.diags(robin + lymph) + Ett

    A = sparse.bmat([[Kv + Evv, Evt], [Etv, Att]], format="csr")
    rhs = np.concatenate((np.zeros(nv), robin * c_far))

    exit_flow = -flow.exit_flow[mesh.outlet_nodes]
    scale = max(float(np.abs(flow.Q).max(initial=0.0)), 1e-300)
    if np.any(exit_flow < -1e-12 * scale):
        raise SolverError("flow enters through an outlet", stage)

    a, b = mesh.elements[:, 0], mesh.elements[:, 1]
    return _Species(
        A=A, rhs=rhs, robin=robin, lymph=lymph, a1=a1, a2=a2,
        up=np.where(flow.Q >= 0, a, b), down=np.where(flow.Q >= 0, b, a),
        exit_nodes=mesh.outlet_nodes, exit_flow=np.maximum(exit_flow, 0.0),
    )


def _advection(sp, flow, n, alpha_elem, beta_elem, alpha_exit, beta_exit):
    """Vessel advection of phi = alpha * c + beta taken at the upstream node"""
    A = _upwind(n, sp.up, sp.down, flow.Q, alpha_elem)
    A = A + sparse.coo_matrix((sp.exit_flow * alpha_exit, (sp.exit_nodes, sp.exit_nodes)), shape=(n, n))
    qb = np.abs(flow.Q) * beta_elem
    rhs = np.zeros(n)
    np.add.at(rhs, sp.up, -qb)
    np.add.at(rhs, sp.down, qb)
    np.add.at(rhs, sp.exit_nodes, -sp.exit_flow * beta_exit)
    return A.tocsr(), rhs


def solve_oxygen(network, grid, flow, H, params, numerics=None, sf=1.0):
    """Steady oxygen in vessels and tissue; returns (c_t_ox, c_v_ox)"""
    numerics = numerics or Numerics()
    geom = flow.geometry
    nv, nt = geom.n_nodes, geom.n_cells
    n = nv + nt
    V = grid.cell_volume
    mesh = geom.mesh

    sp = _species(flow, params, params.D_v_ox, params.D_t_ox, params.P_ox, params.sigma_ox,
                  params.beta_ox, params.c0_ox, "oxygen")
    inlet_values = np.full(mesh.inlet_nodes.size, params.c_v0_ox)
    H_elem, H_exit = H.element, H.node[sp.exit_nodes]

    c = np.concatenate((np.full(nv, params.c_v0_ox), np.full(nt, params.c0_ox)))
    omega = numerics.picard_damping
    history = []
    for it in range(int(numerics.picard_max_iter)):
        cv, ct = c[:nv], c[nv:]
        cu, ce = cv[sp.up], cv[sp.exit_nodes]
        slope, slope_exit = _bound_slope(cu, H_elem, params), _bound_slope(ce, H_exit, params)
        A_adv, rhs_adv = _advection(
            sp, flow, n,
            1.0 + slope, bound_oxygen(cu, H_elem, params) - slope * cu,
            1.0 + slope_exit, bound_oxygen(ce, H_exit, params) - slope_exit * ce,
        )
        consume = params.phi_0 * sf * V * params.V_max_ox / (np.maximum(ct, 0.0) + params.K_m_ox)
        A = sp.A + A_adv + sparse.diags(np.concatenate((np.zeros(nv), consume)))
        A, rhs = _dirichlet(A, sp.rhs + rhs_adv, mesh.inlet_nodes, inlet_values, n)
        solved = _solve(A, rhs, "oxygen")

        new = (1.0 - omega) * c + omega * solved
        change = float(np.max(np.abs(new - c)) / max(float(np.max(np.abs(new))), 1e-300))
        history.append(change)
        c = new
        if change < numerics.picard_tol:
            log.debug(f"Oxygen converged after {it + 1} Picard iterations")
            break
    else:
        raise SolverError(f"Picard iteration stalled at relative change {history[-1]:.3e}", "oxygen", history)

    flow.c_v_ox, flow.c_t_ox = c[:nv], c[nv:]
    return c[nv:], c[:nv]


@dataclass
class TpzResult(Serialize):
    times: np.ndarray
    mean_c_t_tpz: np.ndarray
    sf: np.ndarray
    r: np.ndarray
    c_v_in: np.ndarray
    snapshots: dict
    c_t_tpz: np.ndarray
    c_v_tpz: np.ndarray
    mass_drift: float
    min_concentration: float

    def summary(self):
        res = {}
        for t in sorted(self.snapshots):
            idx = int(np.searchsorted(self.times, t))
            res[f"sf_{t:.0f}"] = float(self.sf[idx])
            res[f"c_t_tpz_{t:.0f}"] = float(self.mean_c_t_tpz[idx])
        span = self.times[-1] - self.times[0]
        res["mean_sf"] = float(trapezoid(self.sf, self.times) / span)
        res["mean_c_t_tpz"] = float(trapezoid(self.mean_c_t_tpz, self.times) / span)
        return res

    def rows(self):
        return zip(self.times, self.mean_c_t_tpz, self.sf, self.r, self.c_v_in)


SERIES_COLUMNS = ("t", "mean_c_t_tpz", "sf", "r", "c_v_in")


def time_grid(proto, dt, extra=()):
    grid = np.arange(0.0, proto.t_end, dt)
    marks = [t for t in tuple(proto.corners()) + tuple(extra) if 0 < t < proto.t_end]
    return np.unique(np.concatenate((grid, marks, [proto.t_end])))


def simulate_tpz(network, grid, flow, sf_fit, r_fit, proto, params, dt=None, numerics=None, initial=None,
                 snapshot_times=SUMMARY_TIMES):
    """Implicit-Euler transport of TPZ driven by the exogenous SF(t) and r(t)"""
    numerics = numerics or Numerics()
    dt = dt or numerics.dt
    if not dt > 0:
        raise SolverError(f"time step must be positive, got {dt}", "tpz")
    geom = flow.geometry
    nv, nt = geom.n_nodes, geom.n_cells
    n = nv + nt
    V = grid.cell_volume
    mesh = geom.mesh

    _, _, axis = geom.faces
    courant = float(np.max(np.abs(flow.u_t) * dt / grid.h[axis], initial=0.0))
    if courant > numerics.max_courant:
        raise SolverError(f"Courant number {courant:.3e} exceeds {numerics.max_courant} at dt={dt}", "tpz")

    sp = _species(flow, params, params.D_v_tpz, params.D_t_tpz, params.P_tpz, 0.0,
                  params.beta_tpz, params.c0_tpz, "tpz")
    A_adv, _ = _advection(sp, flow, n, 1.0, 0.0, 1.0, 0.0)
    A_static = (sp.A + A_adv).tocsr()

    def sf_at(t):
        return min(max(float(eval_sigmoid(sf_fit, t)), 0.0), 1.0)

    def r_at(t):
        if not numerics.metabolism:
            return 0.0
        return max(float(eval_rational(r_fit, max(t, r_fit.t_min))), 0.0)

    times = time_grid(proto, dt, snapshot_times)
    c_t = np.zeros(nt) if initial is None else np.array(initial, dtype=float)
    c_v = np.zeros(nv)
    mass0 = V * float(np.sum(c_t))
    mass_scale = abs(mass0)
    budget = 0.0

    mean_series = [spatial_average(c_t, grid)]
    sf_series, r_series = [sf_at(0.0)], [r_at(0.0)]
    c_in = [vascular_tpz(0.0, proto)]
    snapshots = {}
    lowest = float(min(c_t.min(), 0.0))

    for t0, t1 in zip(times[:-1], times[1:]):
        h = t1 - t0
        sink = params.phi_0 * sf_at(t1) * r_at(t1)
        diag = np.concatenate((np.zeros(nv), np.full(nt, V / h + V * sink)))
        rhs = sp.rhs + np.concatenate((np.zeros(nv), V / h * c_t))
        inlet = vascular_tpz(t1, proto)
        A, rhs = _dirichlet(A_static + sparse.diags(diag), rhs, mesh.inlet_nodes,
                            np.full(mesh.inlet_nodes.size, inlet), n)
        x = _solve(A, rhs, "tpz")
        c_v, c_t = x[:nv], x[nv:]

        J = sp.a1 * (geom.M @ c_v) - sp.a2 * (geom.W @ c_t)
        source = float(J.sum() - np.sum(sp.robin * (c_t - params.c0_tpz)) - np.sum((sp.lymph + V * sink) * c_t))
        budget += h * source

        mean_series.append(spatial_average(c_t, grid))
        sf_series.append(sf_at(t1))
        r_series.append(r_at(t1))
        c_in.append(inlet)
        lowest = min(lowest, float(x.min()))
        mass_scale = max(mass_scale, V * float(np.abs(c_t).sum()))
        if t1 in snapshot_times:
            snapshots[float(t1)] = (c_t.copy(), c_v.copy())

    mass = V * float(np.sum(c_t))
    drift = abs(mass - mass0 - budget) / max(mass_scale, 1e-300)
    log.debug(f"TPZ: {len(times) - 1} steps, mass budget drift {drift:.3e}, min concentration {lowest:.3e}")

    flow.c_t_tpz, flow.c_v_tpz = c_t, c_v
    return TpzResult(
        times=times,
        mean_c_t_tpz=np.array(mean_series),
        sf=np.array(sf_series),
        r=np.array(r_series),
        c_v_in=np.array(c_in),
        snapshots=snapshots,
        c_t_tpz=c_t,
        c_v_tpz=c_v,
        mass_drift=drift,
        min_concentration=lowest,
    )


@dataclass(frozen=True)
class DiffusivityCoefficients(Serialize):
    a: float
    b: float
    c: float
    w: float
    x: float
    y: float
    z: float
    unit: str = "m^2/s"


def predict_diffusivity(MW, logP74, HD, HA, coeffs):
    """Diffusivity from molecular weight, lipophilicity and hydrogen-bond counts"""
    if coeffs is None:
        raise ParameterError("coeffs", "no diffusivity coefficient set given")
    if not MW > 0:
        raise ParameterError("MW", f"molecular weight must be positive, got {MW}")
    if coeffs.w == 0:
        raise ParameterError("w", "coefficient w must be nonzero")
    arg = (logP74 - coeffs.x + coeffs.y * HD + coeffs.z * HA) / coeffs.w
    log_d = coeffs.a + coeffs.b * math.log10(MW) + coeffs.c / (1.0 + math.exp(arg))
    return 10.0 ** log_d


class TestTissue(unittest.TestCase):

    def setUp(self):
        self.params = baseline_parameters()
        self.box = 5e-4

    def tube(self, elements=8):
        return straight_tube(self.box, 5e-6, elements=elements, box=(self.box,) * 3,
                             offset=(0.0, 0.27e-3, 0.23e-3))

    def test_poiseuille(self):
        p = self.params.replace(L_p=0.0)
        flow = solve_flow(self.tube(), TissueGrid.cube(self.box, 4), p)
        expect = math.pi * (5e-6) ** 4 * p.delta_p / (8 * p.mu_v * self.box)
        np.testing.assert_allclose(flow.Q, expect, rtol=1e-10)

    def test_no_coupling(self):
        p = self.params.replace(L_p=0.0, L_p_LF=0.0)
        flow = solve_flow(default_network(), TissueGrid.cube(self.box, 6), p)
        self.assertLess(np.ptp(flow.p_t), 1e-10 * max(1.0, abs(flow.p_t[0])))
        np.testing.assert_array_equal(flow.F, 0.0)

    def test_mass_balance(self):
        flow = solve_flow(default_network(), TissueGrid.cube(self.box, 10), self.params)
        self.assertLess(flow.diagnostics["mass_balance_residual"], 1e-8)
        self.assertGreater(flow.diagnostics["q_in"], 0.0)

    def test_lymph_drainage_shared(self):
        grid = TissueGrid.cube(self.box, 6)
        flow = solve_flow(default_network(), grid, self.params)
        np.testing.assert_array_equal(flow.drainage, lymph_drainage(flow.p_t, self.params, grid.cell_volume))
        self.assertEqual(flow.diagnostics["lymphatic_drainage"], float(flow.drainage.sum()))
        scale = max(flow.diagnostics["q_in"], np.abs(flow.F).sum())
        self.assertLess(abs(flow.drainage.sum() - flow.diagnostics["extravasation"]), 1e-8 * scale)

        # cells with lymph backflow take up no solute, the rest lose it with the drained fluid
        mixed = replace(flow, drainage=flow.drainage - np.median(flow.drainage))
        sp = _species(mixed, self.params, self.params.D_v_tpz, self.params.D_t_tpz, self.params.P_tpz, 0.0,
                      self.params.beta_tpz, self.params.c0_tpz, "tpz")
        back = mixed.drainage < 0
        self.assertTrue(np.any(back) and not np.all(back))
        np.testing.assert_array_equal(sp.lymph[back], 0.0)
        np.testing.assert_array_equal(sp.lymph[~back], mixed.drainage[~back])

    def test_mirror_symmetry(self):
        grid = TissueGrid.cube(self.box, 9)
        flow = solve_flow(default_network(), grid, self.params)
        pts = flow.geometry.mesh.points
        mirrored = pts * [1, -1, 1] + [0, self.box, 0]
        for i, q in enumerate(mirrored):
            j = int(np.argmin(np.linalg.norm(pts - q, axis=1)))
            self.assertLess(np.linalg.norm(pts[j] - q), 1e-12)
            self.assertLess(abs(flow.p_v[i] - flow.p_v[j]), 1e-9 * abs(flow.p_v[i]))
        p_t = flow.p_t.reshape(9, 9, 9)
        np.testing.assert_allclose(p_t, p_t[:, ::-1, :], rtol=1e-9)

    def test_deterministic(self):
        grid = TissueGrid.cube(self.box, 6)
        a = solve_flow(default_network(), grid, self.params)
        b = solve_flow(default_network(), grid, self.params)
        self.assertTrue(np.array_equal(a.p_t, b.p_t) and np.array_equal(a.p_v, b.p_v))

    def test_hematocrit_tube(self):
        flow = solve_flow(self.tube(), TissueGrid.cube(self.box, 4), self.params.replace(L_p=0.0))
        H = solve_hematocrit(None, flow, self.params)
        np.testing.assert_array_equal(H.element, self.params.H_in)

    def test_hematocrit_bifurcation(self):
        flow = solve_flow(default_network(), TissueGrid.cube(self.box, 9), self.params)
        H = solve_hematocrit(None, flow, self.params)
        seg = flow.geometry.mesh.segment
        self.assertEqual(H.element[seg == 1][0], H.element[seg == 2][0])
        self.assertAlmostEqual(H.element[seg == 1][0], H.element[seg == 0][-1], delta=1e-9)
        self.assertTrue(np.all((H.element >= 0) & (H.element < 1)))

    def test_hematocrit_uniform_extravasation(self):
        # d(QH)/ds = -f H with dQ/ds = -f leaves H constant: plasma and cells leak together
        mesh = self.tube(elements=10).mesh()
        f, Q_in = 2e-15, 1e-13
        Q = np.array([1.00, 0.98, 0.96, 0.94, 0.92, 0.90, 0.88, 0.86, 0.84, 0.82]) * Q_in
        F = np.full(10, f)
        p_v = 3000.0 - 2e6 * mesh.points[:, 0]
        exit_flow = -(mesh.incidence().T @ Q) + mesh.averaging().T @ F
        H = transport_hematocrit(mesh, Q, F, p_v, exit_flow, 0.45)

        np.testing.assert_allclose(H.element, 0.45, rtol=1e-12)
        np.testing.assert_allclose(H.node, 0.45, rtol=1e-12)
        # red cell flux falls with the discharge, 18 % over the tube
        self.assertAlmostEqual(H.element[-1] * Q[-1] / (0.45 * Q_in), 0.82, places=12)

    def test_hill_half_saturation(self):
        p = self.params
        self.assertAlmostEqual(bound_oxygen(p.alpha_pl * p.p_s50, 0.45, p), p.k_1 * 0.45 / 2, places=12)

    def test_oxygen_equilibrium(self):
        p = self.params.replace(V_max_ox=0.0, beta_ox=0.0, L_p=0.0)
        grid = TissueGrid.cube(self.box, 5)
        flow = solve_flow(default_network(), grid, p)
        H = solve_hematocrit(None, flow, p)
        c_t, c_v = solve_oxygen(None, grid, flow, H, p)
        np.testing.assert_allclose(c_t, p.c_v0_ox, rtol=1e-7)
        np.testing.assert_allclose(c_v, p.c_v0_ox, rtol=1e-7)

    def test_oxygen_slab(self):
        D, beta, k, L, n = 2e-9, 1e-5, 0.032, self.box, 40
        p = self.params.replace(P_ox=0.0, L_p=0.0, D_t_ox=D, beta_ox=beta, phi_0=1.0,
                                p_m50=1e6, V_max_ox=k * self.params.alpha_t_ox * 1e6)
        grid = TissueGrid((L, L, L), (4, 4, n), sealed=(True, True, False))
        flow = solve_flow(self.tube(elements=4), grid, p)
        H = solve_hematocrit(None, flow, p)
        c_t, _ = solve_oxygen(None, grid, flow, H, p)

        m = math.sqrt(k / D)
        A = beta * p.c0_ox / (beta * math.cosh(m * L / 2) + D * m * math.sinh(m * L / 2))
        z = grid.centers()[:, 2]
        exact = A * np.cosh(m * (z - L / 2))
        np.testing.assert_allclose(c_t, exact, rtol=0.02)

    def test_oxygen_baseline(self):
        grid = TissueGrid.cube(self.box, 6)
        flow = solve_flow(default_network(), grid, self.params)
        H = solve_hematocrit(None, flow, self.params)
        c_t, c_v = solve_oxygen(None, grid, flow, H, self.params)
        self.assertGreaterEqual(c_t.min(), -1e-12)
        self.assertGreaterEqual(c_v.min(), -1e-12)
        self.assertLessEqual(c_v.max(), max(self.params.c_v0_ox, self.params.c0_ox) * (1 + 1e-9))

    def fits(self):
        return SigmoidFit(*BASELINE_SIGMOID, r_squared=1.0), RationalFit(*BASELINE_RATIONAL, r_squared=1.0)

    def test_conservation(self):
        p = self.params.replace(L_p=0.0, L_p_LF=0.0, P_tpz=0.0, beta_tpz=0.0)
        grid = TissueGrid.cube(self.box, 4)
        flow = solve_flow(self.tube(elements=4), grid, p)
        sf, _ = self.fits()
        zero = RationalFit(A=0.0, B=1.0, C=0.0, r_squared=1.0)
        initial = np.random.default_rng(2).uniform(0.0, 0.03, grid.n_cells)
        res = simulate_tpz(None, grid, flow, sf, zero, default_protocol(p), p, dt=10.0, initial=initial)
        mass = lambda c: np.sum(c)
        self.assertLess(abs(mass(res.c_t_tpz) - mass(initial)) / mass(initial), 1e-10)
        self.assertLess(res.mass_drift, 1e-10)

    def test_inflow_profile(self):
        grid = TissueGrid.cube(self.box, 4)
        flow = solve_flow(self.tube(elements=4), grid, self.params)
        proto = default_protocol(self.params)
        res = simulate_tpz(None, grid, flow, *self.fits(), proto, self.params, dt=120.0)
        idx = int(np.searchsorted(res.times, proto.T_P))
        self.assertEqual(res.times[idx], proto.T_P)
        self.assertEqual(res.c_v_in[idx], self.params.c_v0_tpz)
        self.assertGreaterEqual(res.min_concentration, -1e-12)
        self.assertLess(res.mass_drift, 1e-8)

    def test_vascular_contrast(self):
        grid = TissueGrid.cube(self.box, 8)
        flow = solve_flow(default_network(), grid, self.params)
        res = simulate_tpz(None, grid, flow, *self.fits(), default_protocol(self.params), self.params, dt=60.0)
        c_t = res.snapshots[7200.0][0]
        near = flow.geometry.intersected
        self.assertGreater(spatial_average(c_t, grid, near), spatial_average(c_t, grid, ~near))
        self.assertGreaterEqual(res.min_concentration, -1e-12)

    def test_self_convergence(self):
        grid = TissueGrid.cube(self.box, 5)
        flow = solve_flow(default_network(), grid, self.params)
        proto = default_protocol(self.params)
        means = []
        for dt in (40.0, 20.0, 10.0):
            res = simulate_tpz(None, grid, flow, *self.fits(), proto, self.params, dt=dt)
            means.append(res.mean_c_t_tpz[int(np.searchsorted(res.times, 7200.0))])
        ratio = abs(means[0] - means[1]) / abs(means[1] - means[2])
        self.assertTrue(1.5 <= ratio <= 2.6, msg=f"error ratio {ratio}")

    def test_courant(self):
        grid = TissueGrid.cube(self.box, 4)
        flow = solve_flow(self.tube(), grid, self.params)
        with self.assertRaises(SolverError):
            simulate_tpz(None, grid, flow, *self.fits(), default_protocol(self.params), self.params,
                         numerics=Numerics(max_courant=1e-30))

    def test_predict_diffusivity(self):
        c = DiffusivityCoefficients(a=-4.0, b=-0.5, c=0.0, w=1.0, x=0.0, y=0.0, z=0.0)
        self.assertAlmostEqual(predict_diffusivity(100.0, 1.0, 1, 2, c), 10 ** (-4.0 - 1.0), places=15)
        c = DiffusivityCoefficients(a=0.0, b=0.0, c=2.0, w=1.5, x=1.0, y=0.5, z=-0.25)
        self.assertAlmostEqual(math.log10(predict_diffusivity(10.0, 1.0, 1, 2, c)), 1.0, places=12)
        zero = DiffusivityCoefficients(a=0.0, b=0.0, c=0.0, w=1.0, x=0.0, y=0.0, z=0.0)
        self.assertEqual(predict_diffusivity(1.0, 0.0, 0, 0, zero), 1.0)
        with self.assertRaises(ParameterError):
            predict_diffusivity(1.0, 0.0, 0, 0, None)
