"""Peer-to-peer electricity market games on a DC-approximated feeder.

Buses are agents deciding generation, main-grid purchase, storage draw,
bilateral trades, and voltage phase per hour.  Trading reciprocity, nodal
DC power-flow equalities (as paired inequalities), and line limits form the
coupling constraints; per-bus demand balance lives in the local sets.  The
selection objective trades off generation targets, grid draw, phases,
line-flow wear, trades, storage, and dual regularization.
"""

import json
from dataclasses import dataclass, field
from importlib import resources

import numpy as np

from .errors import IslandedBus, PlanMissing, ProfileMismatch, ValidationError
from .game import (
    CommGraph,
    ConstraintSet,
    DiagQuadTerm,
    GameSpec,
    MatQuadTerm,
    ProxForm,
    QuadraticCost,
    SelectionFunction,
    SetForm,
)
from .online import GameSequence


# ---------------------------------------------------------------------------
# network model
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Line:
    a: int
    b: int
    susceptance: float
    limit: float


class BusNetwork:
    """Feeder topology with per-bus devices and hourly demand profiles."""

    def __init__(self, bus_ids, mg_flags, gens, storages, demands, lines, trading):
        self.bus_ids = list(bus_ids)
        self.nbuses = len(bus_ids)
        self.index = {b: i for i, b in enumerate(bus_ids)}
        self.mg = np.asarray(mg_flags, dtype=bool)
        self.gens = list(gens)          # None or {"pmax", "cost"}
        self.storages = list(storages)  # None or {"pmax", "charge0"}
        self.demand = np.asarray(demands, dtype=float)  # (nbuses, 24)
        self.lines = [Line(self.index[l["from"]], self.index[l["to"]],
                           float(l["b"]), float(l["limit"])) for l in lines]
        self.trading = sorted(
            {(min(self.index[i], self.index[j]), max(self.index[i], self.index[j]))
             for i, j in trading}
        )
        touched = set()
        for l in self.lines:
            if l.susceptance <= 0:
                raise ValidationError("line susceptance must be positive")
            touched.update((l.a, l.b))
        missing = set(range(self.nbuses)) - touched
        if missing and self.nbuses > 1:
            raise IslandedBus(f"buses without lines: {sorted(self.bus_ids[i] for i in missing)}")
        if not np.any(self.mg):
            raise ValidationError("no bus is connected to the main grid")

    @classmethod
    def from_json(cls, path_or_dict):
        if isinstance(path_or_dict, dict):
            doc = path_or_dict
        else:
            with open(path_or_dict) as f:
                doc = json.load(f)
        buses = doc["buses"]
        return cls(
            [b["id"] for b in buses],
            [bool(b.get("mg", 0)) for b in buses],
            [b.get("gen") for b in buses],
            [b.get("storage") for b in buses],
            [b["demand"] for b in buses],
            doc["lines"],
            doc.get("trading", []),
        )

    def electric_neighbors(self, i):
        out = set()
        for l in self.lines:
            if l.a == i:
                out.add(l.b)
            if l.b == i:
                out.add(l.a)
        return out

    def trade_partners(self, i):
        return sorted({b for a, b in self.trading if a == i}
                      | {a for a, b in self.trading if b == i})

    def flow_matrix(self):
        """Rows map bus phases to line flows: flow_l = B_l (theta_a - theta_b)."""
        G = np.zeros((len(self.lines), self.nbuses))
        for r, l in enumerate(self.lines):
            G[r, l.a] = l.susceptance
            G[r, l.b] = -l.susceptance
        return G

    def line_index(self, id_a, id_b):
        a, b = self.index[id_a], self.index[id_b]
        for r, l in enumerate(self.lines):
            if {l.a, l.b} == {a, b}:
                return r
        raise ValidationError(f"no line between {id_a} and {id_b}")


def load_reference_network():
    """13-bus distribution feeder shipped as a representative fixture."""
    with resources.files("gneselect.data").joinpath("ieee13.json").open() as f:
        return BusNetwork.from_json(json.load(f))


# ---------------------------------------------------------------------------
# decision layout
# ---------------------------------------------------------------------------

class MarketAgentLayout:
    """Index map of one agent's per-hour block (p_g, p_mg, p_st, trades, theta)."""

    P_G, P_MG, P_ST = 0, 1, 2

    def __init__(self, partners, hours):
        self.partners = list(partners)
        self.hours = int(hours)
        self.block = 4 + len(self.partners)
        self.dim = self.hours * self.block

    def idx(self, field, h, partner=None):
        base = h * self.block
        if field == "p_g":
            return base
        if field == "p_mg":
            return base + 1
        if field == "p_st":
            return base + 2
        if field == "p_tr":
            return base + 3 + self.partners.index(partner)
        if field == "theta":
            return base + 3 + len(self.partners)
        raise KeyError(field)

    def all_indices(self, field):
        return np.array([self.idx(field, h) for h in range(self.hours)], dtype=np.int64)

    def trade_indices(self, partner):
        return np.array([self.idx("p_tr", h, partner) for h in range(self.hours)],
                        dtype=np.int64)


# ---------------------------------------------------------------------------
# market parameters
# ---------------------------------------------------------------------------

@dataclass
class MarketParams:
    """Device bounds, prices, and builder defaults (per-unit quantities)."""

    mg_price_base: float = 1.0
    mg_price_slope: float = 0.25      # aggregate-dependent price coefficient
    trade_fee: float = 0.05
    trade_quad: float = 0.1
    mg_max: float = 4.0
    trade_max: float = 1.5
    theta_max: float = 0.6
    storage_dev_weight: float = 2.0   # real-time charge-deviation weight
    peak_window: tuple = (6, 16)      # wall-clock hours with high line weight


@dataclass
class MarketSelection:
    """Diagonal selection weights plus a line-flow wear term."""

    q_d: float = 0.3
    q_mg: float = 0.2
    q_theta: float = 0.05
    q_pf: float = 4.0
    q_tr: float = 0.05
    q_st: float = 0.05
    q_lam: float = 1e-3
    q_nu: float = 1e-3
    q_pf_per_line: dict = field(default_factory=dict)   # line row -> weight

    def strongly_convex(self):
        return min(self.q_d, self.q_mg, self.q_theta, self.q_tr, self.q_st,
                   self.q_lam, self.q_nu) > 0


# ---------------------------------------------------------------------------
# day-ahead builder
# ---------------------------------------------------------------------------

def _hourly_demand(network, H):
    if network.demand.shape[1] < H:
        raise ProfileMismatch(
            f"profiles cover {network.demand.shape[1]} hours, need {H}"
        )
    return network.demand[:, :H]


def build_day_ahead(network, profiles=None, H=24, params=None, selection=None,
                    storage_tracking=None):
    """Assemble the day-ahead market clearing game.

    ``profiles`` overrides the network's hourly demand, shape (nbuses, H).
    The communication graph is the trading graph, the electric adjacency,
    and the cost-coupling pairs (the aggregate grid price couples every
    agent) merged together.  ``storage_tracking``, used by the real-time
    builder, adds a per-agent charge-deviation quadratic
    weight * (charge_prev - sum_h p_st - target)^2.
    """
    params = params or MarketParams()
    selection = selection or MarketSelection()
    N = network.nbuses
    demand = np.asarray(profiles, float) if profiles is not None else _hourly_demand(network, H)
    if demand.shape != (N, H):
        raise ProfileMismatch(f"demand shape {demand.shape} != {(N, H)}")

    layouts = [MarketAgentLayout(network.trade_partners(i), H) for i in range(N)]
    dims = [lay.dim for lay in layouts]
    nxoff = np.concatenate(([0], np.cumsum(dims)))

    # ---- costs -------------------------------------------------------------
    blocks = {}
    lin = np.zeros(int(nxoff[-1]))
    gamma = params.mg_price_slope
    for i, lay in enumerate(layouts):
        own = np.zeros((dims[i], dims[i]))
        gen = network.gens[i]
        for h in range(H):
            own[lay.idx("p_mg", h), lay.idx("p_mg", h)] = 2.0 * gamma
            lin[nxoff[i] + lay.idx("p_mg", h)] = params.mg_price_base
            if gen is not None:
                lin[nxoff[i] + lay.idx("p_g", h)] = float(gen["cost"])
            for j in lay.partners:
                t = lay.idx("p_tr", h, j)
                own[t, t] = params.trade_quad
                lin[nxoff[i] + t] = params.trade_fee * (1.0 if i < j else -1.0)
        if storage_tracking is not None and network.storages[i] is not None:
            weight, charge_prev, target = storage_tracking
            st = lay.all_indices("p_st")
            own[np.ix_(st, st)] += 2.0 * weight
            lin[nxoff[i] + st] += -2.0 * weight * (charge_prev[i] - target[i])
        blocks[(i, i)] = own
        for j in range(N):
            if j == i:
                continue
            cross = np.zeros((dims[i], dims[j]))
            for h in range(H):
                cross[lay.idx("p_mg", h), layouts[j].idx("p_mg", h)] = gamma
            blocks[(i, j)] = cross
    cost = QuadraticCost(nxoff, blocks, lin)

    # ---- local sets: device boxes + per-hour demand balance -----------------
    sets, ells = [], []
    for i, lay in enumerate(layouts):
        lo = np.zeros(dims[i])
        hi = np.zeros(dims[i])
        gen = network.gens[i]
        sto = network.storages[i]
        pg_max = float(gen["pmax"]) if gen else 0.0
        st_max = float(sto["pmax"]) if sto else 0.0
        for h in range(H):
            hi[lay.idx("p_g", h)] = pg_max
            hi[lay.idx("p_mg", h)] = params.mg_max
            lo[lay.idx("p_st", h)] = -st_max
            hi[lay.idx("p_st", h)] = st_max
            for j in lay.partners:
                t = lay.idx("p_tr", h, j)
                lo[t], hi[t] = -params.trade_max, params.trade_max
            th = lay.idx("theta", h)
            lo[th], hi[th] = -params.theta_max, params.theta_max
        eq_idx = np.array([
            [lay.idx("p_g", h), lay.idx("p_mg", h), lay.idx("p_st", h)]
            + [lay.idx("p_tr", h, j) for j in lay.partners]
            for h in range(H)
        ], dtype=np.int64)
        eq_rhs = demand[i, :H].copy()
        sets.append(SetForm(lo, hi, eq_idx=eq_idx, eq_rhs=eq_rhs))
        ells.append(ProxForm("zero"))

    # ---- coupling rows -------------------------------------------------------
    n_recip = 2 * H * len(network.trading)
    n_flow = 2 * H * N
    n_lim = 2 * H * len(network.lines)
    m = n_recip + n_flow + n_lim
    A = [np.zeros((m, dims[i])) for i in range(N)]
    b = [np.zeros(m) for _ in range(N)]

    row = 0
    recip_rows = {}
    for (i, j) in network.trading:
        for h in range(H):
            for sign in (1.0, -1.0):
                A[i][row, layouts[i].idx("p_tr", h, j)] = sign
                A[j][row, layouts[j].idx("p_tr", h, i)] = sign
                recip_rows[(i, j, h, sign)] = row
                row += 1
    flow_rows = {}
    for q in range(N):
        inc = [l for l in network.lines if q in (l.a, l.b)]
        for h in range(H):
            for sign in (1.0, -1.0):
                A[q][row, layouts[q].idx("p_g", h)] += sign
                A[q][row, layouts[q].idx("p_st", h)] += sign
                if network.mg[q]:
                    for j in range(N):
                        A[j][row, layouts[j].idx("p_mg", h)] += sign
                for l in inc:
                    other = l.b if l.a == q else l.a
                    A[q][row, layouts[q].idx("theta", h)] += -sign * l.susceptance
                    A[other][row, layouts[other].idx("theta", h)] += sign * l.susceptance
                b[q][row] = sign * demand[q, h]
                flow_rows[(q, h, sign)] = row
                row += 1
    for r_l, l in enumerate(network.lines):
        for h in range(H):
            for sign in (1.0, -1.0):
                A[l.a][row, layouts[l.a].idx("theta", h)] = sign * l.susceptance
                A[l.b][row, layouts[l.b].idx("theta", h)] = -sign * l.susceptance
                b[l.a][row] = l.limit
                row += 1
    assert row == m
    constraint = ConstraintSet(m, A, b)

    # ---- communication graph --------------------------------------------------
    edges = set(network.trading)
    for l in network.lines:
        edges.add((min(l.a, l.b), max(l.a, l.b)))
    for i in range(N):          # aggregate grid price couples every pair
        for j in range(i + 1, N):
            edges.add((i, j))
    graph = CommGraph(N, sorted(edges))

    n_omega = int(nxoff[-1]) + 2 * N * m
    phi = _market_selection(network, layouts, nxoff, n_omega, H, selection)

    spec = GameSpec(dims, cost, ells, sets, constraint, graph, phi,
                    name=f"day-ahead-{N}bus-H{H}")
    spec.market = {
        "layouts": layouts, "network": network, "H": H, "params": params,
        "selection": selection, "recip_rows": recip_rows, "flow_rows": flow_rows,
        "demand": demand,
    }
    return spec


def _market_selection(network, layouts, nxoff, n_omega, H, sel, n=None):
    """Selection function of the market game (diag terms + line-flow term)."""
    N = network.nbuses
    n = int(nxoff[-1]) if n is None else n
    diag, mats = [], []

    def add_diag(idx, w, ref):
        idx = np.asarray(idx, dtype=np.int64)
        diag.append(DiagQuadTerm(idx, np.full(idx.shape, float(w)),
                                 np.broadcast_to(np.asarray(ref, float), idx.shape).copy()))

    for i, lay in enumerate(layouts):
        off = int(nxoff[i])
        gen = network.gens[i]
        pg_ref = float(gen["pmax"]) if gen else 0.0
        add_diag(off + lay.all_indices("p_g"), sel.q_d, pg_ref)
        add_diag(off + lay.all_indices("p_mg"), sel.q_mg, 0.0)
        add_diag(off + lay.all_indices("theta"), sel.q_theta, 0.0)
        add_diag(off + lay.all_indices("p_st"), sel.q_st, 0.0)
        for j in lay.partners:
            add_diag(off + lay.trade_indices(j), sel.q_tr, 0.0)
    if n_omega > n:
        add_diag(np.arange(n, n_omega, dtype=np.int64), min(sel.q_lam, sel.q_nu), 0.0)

    G = network.flow_matrix()
    wline = np.array([
        sel.q_pf_per_line.get(r, sel.q_pf) for r in range(len(network.lines))
    ])
    for h in range(H):
        theta_idx = np.array(
            [int(nxoff[i]) + layouts[i].idx("theta", h) for i in range(N)],
            dtype=np.int64,
        )
        mats.append(MatQuadTerm(theta_idx, G.copy(), wline.copy(), np.zeros(len(network.lines))))
    return SelectionFunction(n_omega, diag, mats, name="market-selection")


# ---------------------------------------------------------------------------
# flows and plans
# ---------------------------------------------------------------------------

def line_flows(spec, om):
    """Per-line, per-hour flows B_l (theta_a - theta_b) at a joint state."""
    market = spec.market
    network, layouts, H = market["network"], market["layouts"], market["H"]
    om = np.asarray(om, dtype=float)
    x = om[:spec.n]
    theta = np.empty((network.nbuses, H))
    for i, lay in enumerate(layouts):
        theta[i] = x[spec.nxoff[i] + lay.all_indices("theta")]
    return network.flow_matrix() @ theta


def flows_to_csv(path, network, flows, seed=None):
    with open(path, "w") as f:
        if seed is not None:
            f.write(f"# seed={seed}\n")
        f.write("line,hour,flow\n")
        for r, l in enumerate(network.lines):
            for h in range(flows.shape[1]):
                f.write("%s-%s,%d,%.17g\n"
                        % (network.bus_ids[l.a], network.bus_ids[l.b], h, flows[r, h]))


def selection_flow_energy(spec, om):
    """The line-wear part of the selection value at a state."""
    market = spec.market
    sel = market["selection"]
    network = market["network"]
    flows = line_flows(spec, om)
    wline = np.array([
        sel.q_pf_per_line.get(r, sel.q_pf) for r in range(len(network.lines))
    ])
    return float(np.sum(wline[:, None] * flows ** 2))


def day_ahead_plan(spec, om):
    """Storage schedule and planned charge trajectory from a day-ahead state."""
    market = spec.market
    network, layouts, H = market["network"], market["layouts"], market["H"]
    x = np.asarray(om, dtype=float)[:spec.n]
    p_st = np.zeros((network.nbuses, H))
    charge0 = np.zeros(network.nbuses)
    for i, lay in enumerate(layouts):
        p_st[i] = x[spec.nxoff[i] + lay.all_indices("p_st")]
        sto = network.storages[i]
        charge0[i] = float(sto["charge0"]) if sto else 0.0
    return {"p_st": p_st, "charge0": charge0, "H": H}


# ---------------------------------------------------------------------------
# real-time builder
# ---------------------------------------------------------------------------

def build_real_time(network, plan, H=8, steps=12, params=None, selection=None,
                    peak_weight=None):
    """Rolling real-time market as a state-dependent game sequence.

    Each of ``steps`` problems covers ``H`` 15-minute slots (2 hours), adds a
    storage charge-deviation cost toward the day-ahead plan, and raises the
    flow weight of the penalized line during the peak window.
    """
    if plan is None:
        raise PlanMissing("real-time build needs the day-ahead storage plan")
    params = params or MarketParams()
    selection = selection or MarketSelection()
    N = network.nbuses
    step_span = 24.0 / steps  # wall-clock hours covered by one step
    penal_row = network.line_index(632, 671) if 632 in network.index else 0

    # planned charge at the end of each step, from the day-ahead schedule
    p_st_da = plan["p_st"]
    charge0 = plan["charge0"]
    hours_per_step = p_st_da.shape[1] / steps
    charge_targets = np.empty((steps, N))
    for t in range(steps):
        upto = int(round((t + 1) * hours_per_step))
        charge_targets[t] = charge0 - p_st_da[:, :upto].sum(axis=1)

    # demand per slot: hourly power resampled to 15-minute energy blocks
    hourly = _hourly_demand(network, 24)
    slots_per_hour = H / step_span
    slot_demand = np.empty((steps, N, H))
    for t in range(steps):
        for s in range(H):
            wall = (t * step_span + s / slots_per_hour) % 24.0
            h0 = int(wall) % 24
            h1 = (h0 + 1) % 24
            frac = wall - int(wall)
            ripple = 1.0 + 0.05 * np.sin(2.0 * np.pi * (wall / 24.0) * 3.0)
            slot_demand[t, :, s] = (
                ((1 - frac) * hourly[:, h0] + frac * hourly[:, h1]) * ripple / slots_per_hour
            )

    charges = {0: charge0.copy()}
    cache = {}
    layouts = [MarketAgentLayout(network.trade_partners(i), H) for i in range(N)]

    def peak(t):
        lo_h, hi_h = params.peak_window
        start, end = (t - 1) * step_span, t * step_span
        return start < hi_h and end > lo_h

    def builder(t, context):
        # realize the previous step's end-of-horizon charge from played draws
        if t > 1 and (t - 1) not in charges:
            if context is None or context.get("t") != t - 1 or (t - 1) not in cache:
                raise PlanMissing(f"instance t={t} needs the realized state of t={t - 1}")
            prev_spec = cache[t - 1]
            x = np.asarray(context["state"], float)[:prev_spec.n]
            drawn = np.array([
                x[prev_spec.nxoff[i] + layouts[i].all_indices("p_st")].sum()
                for i in range(N)
            ])
            charges[t - 1] = charges[t - 2] - drawn
        if t in cache:
            return cache[t]
        high = peak_weight if peak_weight is not None else 8.0 * selection.q_pf
        sel_t = MarketSelection(**{
            **{k: v for k, v in selection.__dict__.items() if k != "q_pf_per_line"},
            "q_pf_per_line": {penal_row: high if peak(t) else selection.q_pf},
        })
        spec = build_day_ahead(
            network, profiles=slot_demand[t - 1], H=H, params=params,
            selection=sel_t,
            storage_tracking=(params.storage_dev_weight, charges[t - 1],
                              charge_targets[t - 1]),
        )
        spec.name = f"real-time-t{t}"
        cache[t] = spec
        return spec

    return GameSequence(steps, builder=builder, name="real-time-market"), charge_targets
