"""Round-based simulated message passing executing the solvers per agent.

Agents hold only their own blocks; every cross-agent read goes through a
mailbox that enforces neighbor-only access and counts payload bytes.  Phases
are barrier-synchronized: a phase's deposits are only readable in the next
phase, so the final state is independent of agent scheduling order.
"""

import json

import numpy as np

from .errors import LocalityViolation, ValidationError
from .game import BlackboxCost, as_flat
from .operators import (
    cost_block,
    forward_block,
    full_step_block,
    half_step_block,
    pfb_first_block,
    pfb_lam_block,
)

FBF_PHASES = ("exchange1", "local1", "exchange2", "local2", "coord", "hsdm")
PFB_PHASES = ("exchange1", "local1", "exchange2", "local2", "coord", "hsdm")


class MessageLog:
    """Optional JSON-lines log of every delivered message."""

    def __init__(self):
        self.entries = []

    def record(self, round_, phase, sender, recipient, nbytes):
        self.entries.append(
            {"round": round_, "phase": phase, "from": sender, "to": recipient,
             "bytes": int(nbytes)}
        )

    def dump(self, path):
        with open(path, "w") as f:
            for e in self.entries:
                f.write(json.dumps(e) + "\n")


class Mailbox:
    """Inbound queue of one agent, keyed by (phase round, sender)."""

    def __init__(self, owner, allowed_senders):
        self.owner = owner
        self.allowed = set(allowed_senders)
        self._slots = {}

    def deposit(self, round_, sender, payload):
        self._slots.setdefault((round_, sender), {}).update(payload)

    def fetch(self, round_, sender):
        if sender not in self.allowed:
            raise LocalityViolation(
                f"agent {self.owner} read a block of non-neighbor {sender}"
            )
        return self._slots[(round_, sender)]


class AgentNode:
    """One agent's local state and per-phase update rules."""

    def __init__(self, runtime, i):
        self.rt = runtime
        self.i = i
        spec = runtime.spec
        self.nj = list(spec.nj_sets[i])
        self.nlam = list(spec.graph.neighbors[i])
        self.x = np.zeros(spec.dims[i])
        self.lam = np.zeros(spec.m)
        self.nu = np.zeros(spec.m)
        # per-iteration scratch
        self.fwd = None
        self.tilde = None
        self.fwd2 = None
        self.ring = None
        self.x_scratch = np.zeros(spec.n)

    # -- message helpers -----------------------------------------------------

    def _send(self, round_, payload_items, recipients):
        for j in recipients:
            payload = {k: v.copy() for k, v in payload_items.items()}
            self.rt.deliver(round_, self.i, j, payload)

    def broadcast_state(self, round_, x, lam, nu, with_x=True, with_lam=True, with_nu=True):
        if with_x:
            self._send(round_, {"x": x}, self.rt.x_subscribers[self.i])
        items = {}
        if with_lam:
            items["lam"] = lam
        if with_nu:
            items["nu"] = nu
        if items:
            self._send(round_, items, self.nlam)

    def _gather_xglob(self, round_, own_x):
        """Assemble the cost-dependency view of the primal vector."""
        spec = self.rt.spec
        self.x_scratch[:] = 0.0
        self.x_scratch[spec.x_slice(self.i)] = own_x
        for j in self.nj:
            pay = self.rt.mailboxes[self.i].fetch(round_, j)
            self.x_scratch[spec.x_slice(j)] = pay["x"]
        return self.x_scratch

    def _gather_stack(self, round_, key):
        spec = self.rt.spec
        out = np.empty((len(self.nlam), spec.m))
        for t, j in enumerate(self.nlam):
            out[t] = self.rt.mailboxes[self.i].fetch(round_, j)[key]
        return out

    # -- FBF phases ------------------------------------------------------------

    def fbf_local1(self, round_):
        spec, steps = self.rt.spec, self.rt.steps
        xg = self._gather_xglob(round_, self.x)
        f_i = cost_block(spec, self.i, xg)
        lam_nbrs = self._gather_stack(round_, "lam")
        nu_nbrs = self._gather_stack(round_, "nu")
        self.fwd = forward_block(spec, self.i, f_i, self.x, self.lam, self.nu,
                                 lam_nbrs, nu_nbrs)
        self.tilde = half_step_block(spec, steps, self.i, *self.fwd,
                                     self.x, self.lam, self.nu)

    def fbf_local2(self, round_):
        spec, steps = self.rt.spec, self.rt.steps
        xt, lt, nt = self.tilde
        xg = self._gather_xglob(round_, xt)
        f_i = cost_block(spec, self.i, xg)
        lam_nbrs = self._gather_stack(round_, "lam")
        nu_nbrs = self._gather_stack(round_, "nu")
        self.fwd2 = forward_block(spec, self.i, f_i, xt, lt, nt, lam_nbrs, nu_nbrs)
        self.ring = full_step_block(steps, self.i, *self.fwd, *self.fwd2, xt, lt, nt)

    # -- pFB phases ------------------------------------------------------------

    def pfb_local1(self, round_):
        spec, steps = self.rt.spec, self.rt.steps
        xg = self._gather_xglob(round_, self.x)
        f_i = cost_block(spec, self.i, xg)
        self._lam_nbrs = self._gather_stack(round_, "lam")
        self._nu_nbrs = self._gather_stack(round_, "nu")
        xo, no = pfb_first_block(spec, steps, self.i, f_i, self.x, self.lam,
                                 self.nu, self._lam_nbrs)
        self.tilde = (xo, no)

    def pfb_local2(self, round_):
        spec, steps = self.rt.spec, self.rt.steps
        xo, no = self.tilde
        if spec.m:
            no_nbrs = self._gather_stack(round_, "nu")
            lam_o = pfb_lam_block(spec, steps, self.i, self.x, xo, self.lam,
                                  self.nu, no, self._lam_nbrs, self._nu_nbrs, no_nbrs)
        else:
            lam_o = self.lam
        self.ring = (xo, lam_o, no)

    # -- outer step --------------------------------------------------------------

    def hsdm_step(self, beta, grad_blocks):
        xo, lo, no = self.ring
        if beta != 0.0 and grad_blocks is not None:
            gx, gl, gn = grad_blocks
            xo = xo - beta * gx
            lo = lo - beta * gl
            no = no - beta * gn
        self.x, self.lam, self.nu = xo, lo, no


class Coordinator:
    """Gathers operator outputs and returns selection-gradient blocks."""

    def __init__(self, spec, phi):
        self.spec = spec
        self.phi = phi
        self.gathers = 0
        self.messages = 0

    def round_trip(self, agents, log=None, round_=0):
        spec = self.spec
        om = np.empty(spec.n_omega)
        for a in agents:
            om[spec.x_slice(a.i)] = a.ring[0]
            om[spec.lam_slice(a.i)] = a.ring[1]
            om[spec.nu_slice(a.i)] = a.ring[2]
            self.messages += 1
            if log is not None:
                log.record(round_, "coord", a.i, -1, 8 * (a.ring[0].size + 2 * spec.m))
        self.gathers += 1
        grad = self.phi.grad(om)
        out = {}
        for a in agents:
            out[a.i] = (
                grad[spec.x_slice(a.i)],
                grad[spec.lam_slice(a.i)],
                grad[spec.nu_slice(a.i)],
            )
            self.messages += 1
            if log is not None:
                log.record(round_, "coord", -1, a.i, 8 * (a.ring[0].size + 2 * spec.m))
        return out


class NetworkRuntime:
    """Executes the chosen splitting as per-agent programs with mailboxes."""

    def __init__(self, spec, steps, algo="fbf", phi=None, schedule=None, log=None):
        if algo not in ("fbf", "pfb"):
            raise ValidationError(f"unknown algorithm '{algo}'")
        self.spec = spec
        self.steps = steps
        self.algo = algo
        self.phi = phi if phi is not None else spec.selection
        self.schedule = schedule
        self.log = log
        # who needs x_i: every j with i in N_j^J
        self.x_subscribers = [[] for _ in range(spec.nagents)]
        for j in range(spec.nagents):
            for i in spec.nj_sets[j]:
                self.x_subscribers[i].append(j)
        self.agents = [AgentNode(self, i) for i in range(spec.nagents)]
        self.mailboxes = [
            Mailbox(i, set(spec.nj_sets[i]) | set(spec.graph.neighbors[i]))
            for i in range(spec.nagents)
        ]
        self.coordinator = Coordinator(spec, self.phi)
        self.round = 0
        self.iteration = 0
        self.block_messages = 0
        self.locality_violations = 0

    # -- state io -------------------------------------------------------------

    def set_state(self, om):
        om = as_flat(self.spec, om)
        for a in self.agents:
            a.x = om[self.spec.x_slice(a.i)].copy()
            a.lam = om[self.spec.lam_slice(a.i)].copy()
            a.nu = om[self.spec.nu_slice(a.i)].copy()

    def state(self):
        om = np.empty(self.spec.n_omega)
        for a in self.agents:
            om[self.spec.x_slice(a.i)] = a.x
            om[self.spec.lam_slice(a.i)] = a.lam
            om[self.spec.nu_slice(a.i)] = a.nu
        return om

    def deliver(self, round_, sender, recipient, payload):
        self.mailboxes[recipient].deposit(round_, sender, payload)
        nbytes = 8 * sum(v.size for v in payload.values())
        self.block_messages += len(payload)
        if self.log is not None:
            self.log.record(round_, self.phase, sender, recipient, nbytes)

    # -- phase execution ---------------------------------------------------------

    def run_round(self, phase, order=None, beta=0.0):
        """Execute one barrier-synchronized phase over all agents."""
        self.phase = phase
        order = list(range(len(self.agents))) if order is None else list(order)
        self.round += 1
        r = self.round
        if phase == "exchange1":
            for i in order:
                a = self.agents[i]
                a.broadcast_state(r, a.x, a.lam, a.nu)
        elif phase == "local1":
            for i in order:
                a = self.agents[i]
                if self.algo == "fbf":
                    a.fbf_local1(r - 1)
                else:
                    a.pfb_local1(r - 1)
        elif phase == "exchange2":
            for i in order:
                a = self.agents[i]
                if self.algo == "fbf":
                    xt, lt, nt = a.tilde
                    a.broadcast_state(r, xt, lt, nt)
                else:
                    a._send(r, {"nu": a.tilde[1]}, a.nlam)
        elif phase == "local2":
            for i in order:
                a = self.agents[i]
                if self.algo == "fbf":
                    a.fbf_local2(r - 1)
                else:
                    a.pfb_local2(r - 1)
        elif phase == "coord":
            if self._coordinator_needed(beta):
                self._grad_blocks = self.coordinator.round_trip(
                    self.agents, self.log, r
                )
            else:
                self._grad_blocks = None
        elif phase == "hsdm":
            for i in order:
                a = self.agents[i]
                blocks = None
                if beta != 0.0:
                    if self._grad_blocks is not None:
                        blocks = self._grad_blocks[a.i]
                    else:
                        idx = self.spec.agent_omega_indices(a.i)
                        vals = np.concatenate([a.ring[0], a.ring[1], a.ring[2]])
                        g = self.phi.grad_coords(vals, idx)
                        ni = a.ring[0].size
                        blocks = (g[:ni], g[ni:ni + self.spec.m], g[ni + self.spec.m:])
                a.hsdm_step(beta, blocks)
        else:
            raise ValidationError(f"unknown phase '{phase}'")

    def _coordinator_needed(self, beta):
        local_ok = getattr(self.phi, "separable", False) and hasattr(self.phi, "grad_coords")
        return beta != 0.0 and not local_ok

    def run_iteration(self, k=None, order=None):
        """One full outer iteration (all phases, barrier between each)."""
        self.iteration += 1
        k = self.iteration if k is None else k
        beta = self.schedule.at(k) if self.schedule is not None else 0.0
        for phase in (FBF_PHASES if self.algo == "fbf" else PFB_PHASES):
            self.run_round(phase, order=order, beta=beta)
        return self.state()

    def operator_output(self):
        om = np.empty(self.spec.n_omega)
        for a in self.agents:
            om[self.spec.x_slice(a.i)] = a.ring[0]
            om[self.spec.lam_slice(a.i)] = a.ring[1]
            om[self.spec.nu_slice(a.i)] = a.ring[2]
        return om


# ---------------------------------------------------------------------------
# closed-form message counts
# ---------------------------------------------------------------------------

def block_message_count(spec, algo, separable=None):
    """Neighbor block-messages plus coordinator messages per outer iteration.

    FBF runs two full (x, lam, nu) exchanges: 2 * sum_i(|N_i^J| + 2|N_i^lam|)
    blocks.  pFB runs one full exchange plus a nu-only round:
    sum_i(|N_i^J| + 3|N_i^lam|) blocks.  A non-separable selection adds 2N
    coordinator messages.
    """
    if separable is None:
        separable = spec.selection.separable
    nj = sum(len(s) for s in spec.nj_sets)
    nl = sum(len(s) for s in spec.graph.neighbors)
    coord = 0 if separable else 2 * spec.nagents
    if algo == "fbf":
        return 2 * (nj + 2 * nl) + coord
    return (nj + 3 * nl) + coord


def exchange_rounds(algo):
    """Full neighbor-state exchanges per iteration (pFB re-sends nu only)."""
    return 2 if algo == "fbf" else 1


def equivalence_check(spec, steps, om, iters, algo="fbf", schedule=None, phi=None):
    """Max deviation between the network path and the monolithic operators.

    Both paths run ``iters`` outer iterations from the same state with the
    same outer schedule; identical per-agent kernels and a fixed reduction
    order make the trajectories bit-identical, so the deviation must be 0.
    """
    from .operators import t_fbf, t_pfb

    phi = phi if phi is not None else spec.selection
    net = NetworkRuntime(spec, steps, algo=algo, phi=phi, schedule=schedule)
    net.set_state(om)
    om_mono = as_flat(spec, om).copy()
    worst = 0.0
    for k in range(1, iters + 1):
        om_net = net.run_iteration(k)
        out = t_fbf(spec, steps, om_mono)[0] if algo == "fbf" else t_pfb(spec, steps, om_mono)
        beta = schedule.at(k) if schedule is not None else 0.0
        om_mono = out - beta * phi.grad(out) if beta != 0.0 else out
        worst = max(worst, float(np.max(np.abs(om_net - om_mono))) if om_net.size else 0.0)
    return worst
