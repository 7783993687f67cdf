"""Game definition: agents, costs, constraints, communication graph, selection.

A :class:`GameSpec` is immutable after construction and owns all structural
validation.  The flat-array :class:`~gneselect.kernels.GamePlan` consumed by
the operator kernels is built once and cached.
"""

import json
import warnings
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from . import kernels
from .errors import (
    DimensionMismatch,
    ParseError,
    ValidationError,
)

_I64 = np.int64


class SlaterWarning(UserWarning):
    """Constraint qualification could not be verified."""


# ---------------------------------------------------------------------------
# cost forms
# ---------------------------------------------------------------------------

class QuadraticCost:
    """Coupled quadratic cost family: pseudogradient F(x) = M x + m_vec.

    ``blocks`` maps (i, j) agent pairs to dense gradient row blocks, so agent
    i's gradient reads only the x_j it declares.
    """

    kind = "quadratic-coupled"

    def __init__(self, nxoff, blocks, lin=None):
        n = int(nxoff[-1])
        self.nxoff = np.asarray(nxoff, dtype=_I64)
        rows, cols, vals = [], [], []
        self.block_pairs = set()
        for (i, j), blk in blocks.items():
            blk = np.atleast_2d(np.asarray(blk, dtype=float))
            ni = nxoff[i + 1] - nxoff[i]
            nj = nxoff[j + 1] - nxoff[j]
            if blk.shape != (ni, nj):
                raise DimensionMismatch(
                    f"cost block ({i},{j}) has shape {blk.shape}, expected {(ni, nj)}"
                )
            if np.any(blk != 0.0):
                self.block_pairs.add((i, j))
            r, c = np.nonzero(blk)
            rows.extend((r + nxoff[i]).tolist())
            cols.extend((c + nxoff[j]).tolist())
            vals.extend(blk[r, c].tolist())
        self.matrix = sp.csr_matrix((vals, (rows, cols)), shape=(n, n))
        self.matrix.sort_indices()
        self.lin = np.zeros(n) if lin is None else np.asarray(lin, dtype=float).copy()
        if self.lin.shape != (n,):
            raise DimensionMismatch("cost linear term has wrong length")

    def pseudogradient(self, x):
        return self.matrix @ x + self.lin

    def dependency_sets(self, nagents):
        """N_i^J: agents j != i whose block feeds agent i's gradient."""
        deps = [set() for _ in range(nagents)]
        for i, j in self.block_pairs:
            if i != j:
                deps[i].add(j)
        return deps

    def lipschitz(self):
        n = self.matrix.shape[0]
        if n <= 1500:
            return float(np.linalg.norm(self.matrix.toarray(), 2))
        sv = sp.linalg.svds(self.matrix.astype(float), k=1, return_singular_vectors=False,
                            v0=np.ones(n) / np.sqrt(n))
        return float(sv[0])

    def min_symmetric_eig(self):
        symm = 0.5 * (self.matrix + self.matrix.T)
        n = symm.shape[0]
        if n <= 2500:
            return float(np.linalg.eigvalsh(symm.toarray()).min())
        val = sp.linalg.eigsh(symm, k=1, which="SA", return_eigenvectors=False,
                              v0=np.ones(n) / np.sqrt(n))
        return float(val[0])


class BlackboxCost:
    """Callable pseudogradient oracle with declared constants (in-memory only)."""

    kind = "blackbox"

    def __init__(self, grad_full, grad_block, L_F, dependency=None):
        self.grad_full = grad_full
        self.grad_block = grad_block
        self.L_F = float(L_F)
        self.dependency = dependency

    def pseudogradient(self, x):
        return np.asarray(self.grad_full(x), dtype=float)

    def dependency_sets(self, nagents):
        if self.dependency is None:
            return [set(range(nagents)) - {i} for i in range(nagents)]
        return [set(s) for s in self.dependency]

    def lipschitz(self):
        return self.L_F


# ---------------------------------------------------------------------------
# nonsmooth terms and local sets
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ProxForm:
    """Nonsmooth local term ell_i.

    kind: "zero", "l1-weighted" (weights per coordinate), "indicator-box"
    (extra bounds intersected with the local set), or "custom-callback"
    (test-only; callback(v, step) -> prox point).
    """

    kind: str = "zero"
    weights: np.ndarray | None = None
    lo: np.ndarray | None = None
    hi: np.ndarray | None = None
    callback: object = None

    def __post_init__(self):
        if self.kind not in ("zero", "l1-weighted", "indicator-box", "custom-callback"):
            raise ValidationError(f"unknown prox form '{self.kind}'")
        if self.kind == "l1-weighted" and self.weights is None:
            raise ValidationError("l1-weighted prox needs weights")
        if self.kind == "custom-callback" and self.callback is None:
            raise ValidationError("custom-callback prox needs a callable")


@dataclass(frozen=True)
class SetForm:
    """Local feasible set X_i: a finite box, optionally with equality rows.

    Each equality row fixes the sum of a disjoint group of coordinates (all
    rows of one agent must have the same cardinality).  Only plain boxes are
    serializable; equality rows and projection callbacks are in-memory forms.
    """

    lo: np.ndarray
    hi: np.ndarray
    eq_idx: np.ndarray | None = None   # (rows, card) local coordinate indices
    eq_rhs: np.ndarray | None = None
    projector: object = None           # custom callback, test-only

    def __post_init__(self):
        lo, hi = np.asarray(self.lo, float), np.asarray(self.hi, float)
        if lo.shape != hi.shape:
            raise ValidationError("box bounds shape mismatch")
        if not (np.all(np.isfinite(lo)) and np.all(np.isfinite(hi))):
            raise ValidationError("local set must be bounded (finite box)", )
        if np.any(lo > hi):
            raise ValidationError("empty box (lo > hi)")
        if (self.eq_idx is None) != (self.eq_rhs is None):
            raise ValidationError("equality rows need both indices and rhs")
        if self.eq_idx is not None:
            idx = np.asarray(self.eq_idx)
            if idx.ndim != 2:
                raise ValidationError("equality indices must be (rows, card)")
            flat = idx.ravel()
            if len(np.unique(flat)) != len(flat):
                raise ValidationError("equality rows must touch disjoint coordinates")
            lo_s = lo[idx].sum(axis=1)
            hi_s = hi[idx].sum(axis=1)
            rhs = np.asarray(self.eq_rhs, float)
            if np.any(rhs < lo_s - 1e-12) or np.any(rhs > hi_s + 1e-12):
                raise ValidationError("equality rhs outside box range", rhs)


# ---------------------------------------------------------------------------
# coupling constraints
# ---------------------------------------------------------------------------

def _to_csr(M):
    if sp.issparse(M):
        return sp.csr_matrix(M)
    return sp.csr_matrix(np.atleast_2d(np.asarray(M, dtype=float)))


class ConstraintSet:
    """Separable coupling constraints sum_j g_j(x_j) <= 0.

    Per agent, g_i(x_i) = 0.5 * D_i (x_i^2) + A_i x_i - b_i with D_i >= 0
    held row-wise (diagonal-quadratic columns); affine means D_i == 0.
    """

    def __init__(self, m, A_list, b_list, D_list=None):
        self.m = int(m)
        self.A = [_to_csr(A) for A in A_list]
        for A in self.A:
            A.sort_indices()
        self.b = np.asarray(b_list, dtype=float).reshape(len(A_list), m)
        if D_list is None:
            D_list = [sp.csr_matrix(A.shape) for A in self.A]
        self.D = [_to_csr(D) for D in D_list]
        for D in self.D:
            D.sort_indices()
            if D.nnz and D.data.min() < 0:
                raise ValidationError("diagonal-quadratic constraint needs D >= 0")
        for i, A in enumerate(self.A):
            if A.shape[0] != m:
                raise ValidationError(f"constraint block {i} has {A.shape[0]} rows, expected {m}")
            if self.D[i].shape != A.shape:
                raise ValidationError(f"quad block {i} shape mismatch")

    @property
    def affine(self):
        return all(D.nnz == 0 for D in self.D)

    def value(self, i, x_i):
        g = self.A[i] @ x_i - self.b[i]
        if self.D[i].nnz:
            g = g + 0.5 * (self.D[i] @ (x_i * x_i))
        return g

    def jac_t_lam(self, i, x_i, lam_i):
        out = self.A[i].T @ lam_i
        if self.D[i].nnz:
            out = out + x_i * (self.D[i].T @ lam_i)
        return out

    def grad_bound(self, i, lo_i, hi_i):
        """Upper bound of ||grad g_i(x_i)||_F over the box."""
        A = self.A[i].toarray()
        D = self.D[i].toarray()
        worst = np.maximum(np.abs(A + D * lo_i[None, :]), np.abs(A + D * hi_i[None, :]))
        return float(np.linalg.norm(worst))


# ---------------------------------------------------------------------------
# communication graph
# ---------------------------------------------------------------------------

class CommGraph:
    """Undirected, connected communication graph with its Laplacian."""

    def __init__(self, nagents, edges):
        self.nagents = int(nagents)
        seen = set()
        for e in edges:
            i, j = int(e[0]), int(e[1])
            if i == j or not (0 <= i < nagents and 0 <= j < nagents):
                raise ValidationError(f"bad edge ({i},{j})")
            seen.add((min(i, j), max(i, j)))
        self.edges = sorted(seen)
        nbrs = [set() for _ in range(nagents)]
        for i, j in self.edges:
            nbrs[i].add(j)
            nbrs[j].add(i)
        self.neighbors = [sorted(s) for s in nbrs]
        lap = np.zeros((nagents, nagents))
        for i, j in self.edges:
            lap[i, i] += 1.0
            lap[j, j] += 1.0
            lap[i, j] -= 1.0
            lap[j, i] -= 1.0
        self.laplacian = lap
        if not self._connected():
            raise ValidationError("graph not connected")

    def _connected(self):
        if self.nagents == 1:
            return True
        seen = {0}
        stack = [0]
        while stack:
            u = stack.pop()
            for v in self.neighbors[u]:
                if v not in seen:
                    seen.add(v)
                    stack.append(v)
        return len(seen) == self.nagents

    def fiedler_value(self):
        return float(np.sort(np.linalg.eigvalsh(self.laplacian))[1]) if self.nagents > 1 else np.inf

    def max_degree(self):
        return max(len(s) for s in self.neighbors)


# ---------------------------------------------------------------------------
# selection functions
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class DiagQuadTerm:
    """sum_c w_c (omega[idx_c] - ref_c)^2 with coordinate-unique idx."""

    idx: np.ndarray
    w: np.ndarray
    ref: np.ndarray


@dataclass(frozen=True)
class MatQuadTerm:
    """|| G omega[idx] - ref ||_w^2 with a small dense G."""

    idx: np.ndarray
    G: np.ndarray
    w: np.ndarray
    ref: np.ndarray


class SelectionFunction:
    """Convex quadratic selection objective over the joint state.

    Separable iff every term is diagonal; sigma is the exact strong-convexity
    modulus of the diagonal part (a valid lower bound overall) and L an upper
    bound of the gradient Lipschitz constant.
    """

    def __init__(self, n_omega, diag_terms=(), mat_terms=(), name="selection"):
        self.kind = "weighted-quadratic"
        self.n_omega = int(n_omega)
        self.diag_terms = list(diag_terms)
        self.mat_terms = list(mat_terms)
        self.name = name
        for t in self.diag_terms + self.mat_terms:
            if t.idx.size and (t.idx.min() < 0 or t.idx.max() >= n_omega):
                raise DimensionMismatch("selection term indexes out of range")
            if np.any(t.w < 0):
                raise ValidationError("selection weights must be >= 0")
        wtot = np.zeros(n_omega)
        wref = np.zeros(n_omega)
        offset = 0.0
        for t in self.diag_terms:
            wtot[t.idx] += t.w
            wref[t.idx] += t.w * t.ref
            offset += float(np.dot(t.w * t.ref, t.ref))
        self._w_accum = wtot
        self._wref_accum = wref
        self._offset = offset
        self.sigma = float(2.0 * wtot.min()) if n_omega else 0.0
        self.L = float(max(self._lipschitz(wtot), 1e-12))
        self.separable = not self.mat_terms

    def _lipschitz(self, wtot):
        """2 * lambda_max of the Hessian; exact when the matrix terms touch
        pairwise-disjoint coordinate groups, an upper bound otherwise."""
        if not self.mat_terms:
            return 2.0 * (wtot.max() if self.n_omega else 0.0)
        disjoint = True
        seen = set()
        for t in self.mat_terms:
            s = set(t.idx.tolist())
            if seen & s:
                disjoint = False
                break
            seen |= s
        if not disjoint:
            l_up = 2.0 * wtot.max()
            for t in self.mat_terms:
                gram = (t.G * t.w[:, None]).T @ t.G
                l_up += 2.0 * float(np.linalg.eigvalsh(gram).max())
            return l_up
        covered = np.zeros(self.n_omega, dtype=bool)
        worst = 0.0
        for t in self.mat_terms:
            covered[t.idx] = True
            block = np.diag(wtot[t.idx]) + (t.G * t.w[:, None]).T @ t.G
            worst = max(worst, float(np.linalg.eigvalsh(block).max()))
        rest = wtot[~covered]
        if rest.size:
            worst = max(worst, float(rest.max()))
        return 2.0 * worst

    def value(self, om):
        v = 0.0
        for t in self.diag_terms:
            s = om[t.idx] - t.ref
            v += float(np.dot(t.w * s, s))
        for t in self.mat_terms:
            s = t.G @ om[t.idx] - t.ref
            v += float(np.dot(t.w * s, s))
        return v

    def grad(self, om):
        g = 2.0 * (self._w_accum * om - self._wref_accum)
        for t in self.mat_terms:
            s = t.G @ om[t.idx] - t.ref
            g[t.idx] += 2.0 * (t.G.T @ (t.w * s))
        return g

    def grad_coords(self, values, coords):
        """Gradient at the given coordinates from their values alone.

        Only valid for separable (diagonal) selections; this is the local
        gradient rule each agent applies when the coordinator is bypassed.
        """
        if not self.separable:
            raise ValidationError("coordinate-local gradient needs a separable selection")
        return 2.0 * (self._w_accum[coords] * values - self._wref_accum[coords])

    @staticmethod
    def weighted_distance(n_omega, idx, weights, ref, name="selection"):
        idx = np.asarray(idx, dtype=_I64)
        w = np.broadcast_to(np.asarray(weights, float), idx.shape).copy()
        r = np.broadcast_to(np.asarray(ref, float), idx.shape).copy()
        return SelectionFunction(n_omega, [DiagQuadTerm(idx, w, r)], name=name)


class BlackboxSelection:
    """Callable selection oracle with declared moduli (in-memory only)."""

    def __init__(self, n_omega, value_fn, grad_fn, sigma, L, separable=False):
        self.kind = "blackbox"
        self.n_omega = int(n_omega)
        self._value = value_fn
        self._grad = grad_fn
        self.sigma = float(sigma)
        self.L = float(L)
        self.separable = bool(separable)

    def value(self, om):
        return float(self._value(om))

    def grad(self, om):
        return np.asarray(self._grad(om), dtype=float)


# ---------------------------------------------------------------------------
# joint state
# ---------------------------------------------------------------------------

class JointState:
    """Stacked (x, lambda, nu) state with block views over one flat vector."""

    def __init__(self, spec, flat=None):
        self.spec = spec
        if flat is None:
            flat = np.zeros(spec.n_omega)
        flat = np.asarray(flat, dtype=float)
        if flat.shape != (spec.n_omega,):
            raise DimensionMismatch(
                f"state length {flat.shape} != {(spec.n_omega,)}"
            )
        self.flat = flat

    @property
    def x(self):
        return self.flat[:self.spec.n]

    @property
    def lam(self):
        n, N, m = self.spec.n, self.spec.nagents, self.spec.m
        return self.flat[n:n + N * m].reshape(N, m)

    @property
    def nu(self):
        n, N, m = self.spec.n, self.spec.nagents, self.spec.m
        return self.flat[n + N * m:].reshape(N, m)

    def copy(self):
        return JointState(self.spec, self.flat.copy())


def as_flat(spec, om):
    if isinstance(om, JointState):
        return om.flat
    om = np.asarray(om, dtype=float)
    if om.shape != (spec.n_omega,):
        raise DimensionMismatch(f"state length {om.shape[0]} != {spec.n_omega}")
    return om


# ---------------------------------------------------------------------------
# assumption report
# ---------------------------------------------------------------------------

@dataclass
class AssumptionReport:
    monotone: bool = True
    min_symmetric_eig: float | None = None
    connected: bool = True
    fiedler: float | None = None
    dependency_within_graph: bool = True
    slater_supplied: bool = False
    slater_max_violation: float | None = None
    selection_gradient_ok: bool = True
    notes: list = field(default_factory=list)

    def as_dict(self):
        return {
            "monotone": self.monotone,
            "min_symmetric_eig": self.min_symmetric_eig,
            "connected": self.connected,
            "fiedler": self.fiedler,
            "dependency_within_graph": self.dependency_within_graph,
            "slater_supplied": self.slater_supplied,
            "slater_max_violation": self.slater_max_violation,
            "selection_gradient_ok": self.selection_gradient_ok,
            "notes": list(self.notes),
        }


# ---------------------------------------------------------------------------
# the game spec
# ---------------------------------------------------------------------------

class GameSpec:
    """Immutable game description; safe to share across threads."""

    def __init__(self, dims, cost, ells, sets, constraint, graph, selection,
                 slater_point=None, metadata=None, source=None, name="game"):
        self.name = name
        self.dims = [int(d) for d in dims]
        if any(d <= 0 for d in self.dims):
            raise ValidationError("agent dimensions must be positive")
        self.nagents = len(self.dims)
        self.nxoff = np.concatenate(([0], np.cumsum(self.dims))).astype(_I64)
        self.n = int(self.nxoff[-1])
        self.cost = cost
        self.ells = list(ells)
        self.sets = list(sets)
        self.constraint = constraint
        self.m = 0 if constraint is None else constraint.m
        self.graph = graph
        self.selection = selection
        self.slater_point = None if slater_point is None else np.asarray(slater_point, float)
        self.metadata = dict(metadata or {})
        self.source = source
        self.report = AssumptionReport()
        self._plan = None
        self._validate()

    # -- dimensions ---------------------------------------------------------

    @property
    def n_omega(self):
        return self.n + 2 * self.nagents * self.m

    def x_slice(self, i):
        return slice(int(self.nxoff[i]), int(self.nxoff[i + 1]))

    def lam_slice(self, i):
        base = self.n + i * self.m
        return slice(base, base + self.m)

    def nu_slice(self, i):
        base = self.n + (self.nagents + i) * self.m
        return slice(base, base + self.m)

    def agent_omega_indices(self, i):
        return np.concatenate([
            np.arange(self.nxoff[i], self.nxoff[i + 1], dtype=_I64),
            np.arange(self.lam_slice(i).start, self.lam_slice(i).stop, dtype=_I64),
            np.arange(self.nu_slice(i).start, self.nu_slice(i).stop, dtype=_I64),
        ])

    # -- validation ---------------------------------------------------------

    def _validate(self):
        if len(self.ells) != self.nagents or len(self.sets) != self.nagents:
            raise ValidationError("per-agent form count mismatch")
        if self.graph.nagents != self.nagents:
            raise ValidationError("graph size mismatch")
        for i, s in enumerate(self.sets):
            if s.lo.shape != (self.dims[i],):
                raise ValidationError(f"agent {i} box dimension mismatch")
        if self.constraint is not None and len(self.constraint.A) != self.nagents:
            raise ValidationError("constraint block count mismatch")
        if self.constraint is not None:
            for i, A in enumerate(self.constraint.A):
                if A.shape[1] != self.dims[i]:
                    raise ValidationError(f"constraint block {i} column mismatch")

        # cost dependencies must be covered by the communication graph
        deps = self.cost.dependency_sets(self.nagents)
        self.nj_sets = [sorted(d) for d in deps]
        for i, d in enumerate(deps):
            if not d.issubset(set(self.graph.neighbors[i])):
                self.report.dependency_within_graph = False
                raise ValidationError(
                    "cost dependency outside communication graph",
                    {"agent": i, "extra": sorted(d - set(self.graph.neighbors[i]))},
                )

        # monotonicity of the pseudogradient
        if isinstance(self.cost, QuadraticCost):
            lam_min = self.cost.min_symmetric_eig()
            self.report.min_symmetric_eig = lam_min
            if lam_min < -1e-9:
                self.report.monotone = False
                raise ValidationError("pseudogradient not monotone", lam_min)
        else:
            rng = np.random.default_rng(_probe_seed(self))
            worst = 0.0
            for _ in range(200):
                u = self.random_x(rng)
                v = self.random_x(rng)
                du = u - v
                ip = float(np.dot(self.cost.pseudogradient(u) - self.cost.pseudogradient(v), du))
                worst = min(worst, ip / max(np.dot(du, du), 1e-300))
            self.report.min_symmetric_eig = worst
            if worst < -1e-10:
                self.report.monotone = False
                raise ValidationError("pseudogradient probe failed", worst)

        self.report.connected = True
        self.report.fiedler = self.graph.fiedler_value()

        # quick selection gradient probe (full battery lives in `validate`)
        if self.selection is not None:
            ok, worst = check_gradient(
                lambda om: self.selection.value(om),
                lambda om: self.selection.grad(om),
                self.n_omega, probes=5, seed=_probe_seed(self),
            )
            self.report.selection_gradient_ok = ok
            if not ok:
                raise ValidationError("selection gradient fails finite differences", worst)

        if self.slater_point is not None:
            self.report.slater_supplied = True
            loc, coup = feasible_set_residual(self, self.slater_point)
            viol = max(float(np.max(loc)) if len(loc) else 0.0,
                       float(np.max(coup)) if self.m else 0.0)
            self.report.slater_max_violation = viol
            if viol > 1e-8:
                warnings.warn(f"supplied Slater point is infeasible by {viol:.2e}",
                              SlaterWarning)
        else:
            self.report.slater_supplied = False
            warnings.warn("no Slater point supplied; constraint qualification unchecked",
                          SlaterWarning)

    # -- sampling helpers ----------------------------------------------------

    def random_x(self, rng):
        lo = np.concatenate([s.lo for s in self.sets])
        hi = np.concatenate([s.hi for s in self.sets])
        return lo + (hi - lo) * rng.random(self.n)

    def box_bounds(self):
        lo = np.concatenate([s.lo for s in self.sets])
        hi = np.concatenate([s.hi for s in self.sets])
        return lo, hi

    def default_start(self):
        """x at box centers (projected onto equality rows), lambda = nu = 0."""
        lo, hi = self.box_bounds()
        om = np.zeros(self.n_omega)
        om[:self.n] = 0.5 * (lo + hi)
        for i in range(self.nagents):
            sl = self.x_slice(i)
            om[sl] = self.project_local(i, om[sl].copy())
        return om

    def project_local(self, i, v_i):
        """Euclidean projection onto the local set X_i."""
        s = self.sets[i]
        if s.projector is not None:
            return np.asarray(s.projector(np.asarray(v_i, float)), dtype=float)
        return kernels.prox_agent(self.plan(), i, np.asarray(v_i, float), 0.0)

    # -- oracles -------------------------------------------------------------

    def pseudogradient(self, x):
        if x.shape != (self.n,):
            raise DimensionMismatch("x length mismatch")
        return self.cost.pseudogradient(x)

    def g_value(self, i, x_i):
        if self.m == 0:
            return np.zeros(0)
        return self.constraint.value(i, x_i)

    def g_sum(self, x):
        if self.m == 0:
            return np.zeros(0)
        tot = np.zeros(self.m)
        for i in range(self.nagents):
            tot += self.constraint.value(i, x[self.x_slice(i)])
        return tot

    def prox(self, i, v_i, step):
        """prox of step*(ell_i + indicator of X_i) at v_i."""
        ell = self.ells[i]
        s = self.sets[i]
        if ell.kind == "custom-callback":
            out = np.asarray(ell.callback(v_i, step), dtype=float)
            if not np.all(np.isfinite(out)):
                from .errors import ProxFailure
                raise ProxFailure(f"custom prox of agent {i} returned non-finite values")
            return out
        if s.projector is not None:
            w = np.zeros_like(v_i) if ell.kind == "zero" else step * ell.weights
            z = np.sign(v_i) * np.maximum(np.abs(v_i) - w, 0.0)
            return np.asarray(s.projector(z), dtype=float)
        return kernels.prox_agent(self.plan(), i, np.asarray(v_i, float), float(step))

    @property
    def has_python_oracles(self):
        return (
            isinstance(self.cost, BlackboxCost)
            or any(e.kind == "custom-callback" for e in self.ells)
            or any(s.projector is not None for s in self.sets)
        )

    def lipschitz_F(self):
        if "L_F" in self.metadata:
            return float(self.metadata["L_F"])
        return self.cost.lipschitz()

    def cocoercivity(self):
        """Cocoercivity modulus of F, declared or derived for quadratics."""
        if "eta" in self.metadata:
            return float(self.metadata["eta"])
        if isinstance(self.cost, QuadraticCost):
            mu = self.cost.min_symmetric_eig()
            lf = self.lipschitz_F()
            if lf == 0.0:
                return np.inf
            if mu > 1e-12:
                return mu / lf ** 2
        return None

    # -- kernel plan ---------------------------------------------------------

    def plan(self):
        if self._plan is None:
            self._plan = _build_plan(self)
        return self._plan

    def to_dict(self):
        if self.source is None:
            raise ParseError("spec was built in memory without a serializable source")
        return json.loads(json.dumps(self.source))


def _probe_seed(spec):
    return (hash(spec.name) & 0xFFFF) + spec.n


# ---------------------------------------------------------------------------
# plan assembly
# ---------------------------------------------------------------------------

def _stack_agent_csr(mats, m):
    """Stack per-agent (m, n_i) CSR blocks agent-major into flat arrays."""
    indptr = [np.zeros(1, dtype=_I64)]
    idxs, dats = [], []
    base = 0
    for A in mats:
        indptr.append(A.indptr[1:].astype(_I64) + base)
        base += A.nnz
        idxs.append(A.indices.astype(_I64))
        dats.append(A.data.astype(float))
    indptr = np.concatenate(indptr)
    idx = np.concatenate(idxs) if idxs else np.zeros(0, dtype=_I64)
    dat = np.concatenate(dats) if dats else np.zeros(0)
    row = np.repeat(np.arange(len(indptr) - 1, dtype=_I64), np.diff(indptr))
    return indptr, idx, dat, row


def _build_plan(spec):
    n, m, N = spec.n, spec.m, spec.nagents
    if isinstance(spec.cost, QuadraticCost):
        M = spec.cost.matrix
        f_indptr = M.indptr.astype(_I64)
        f_idx = M.indices.astype(_I64)
        f_dat = M.data.astype(float)
        mvec = spec.cost.lin
    else:
        f_indptr = np.zeros(n + 1, dtype=_I64)
        f_idx = np.zeros(0, dtype=_I64)
        f_dat = np.zeros(0)
        mvec = np.zeros(n)
    f_row = np.repeat(np.arange(n, dtype=_I64), np.diff(f_indptr))

    if m > 0:
        a_indptr, a_idx, a_dat, a_row = _stack_agent_csr(spec.constraint.A, m)
        d_indptr, d_idx, d_dat, d_row = _stack_agent_csr(spec.constraint.D, m)
        bmat = spec.constraint.b.copy()
    else:
        a_indptr = np.zeros(N * m + 1, dtype=_I64)
        a_idx = d_idx = np.zeros(0, dtype=_I64)
        a_dat = d_dat = np.zeros(0)
        a_row = d_row = np.zeros(0, dtype=_I64)
        d_indptr = a_indptr
        bmat = np.zeros((N, m))

    lo, hi = spec.box_bounds()
    l1w = np.zeros(n)
    for i, ell in enumerate(spec.ells):
        sl = spec.x_slice(i)
        if ell.kind == "l1-weighted":
            l1w[sl] = np.broadcast_to(np.asarray(ell.weights, float), (spec.dims[i],))
        elif ell.kind == "indicator-box":
            lo[sl] = np.maximum(lo[sl], ell.lo)
            hi[sl] = np.minimum(hi[sl], ell.hi)

    eq_ptr = np.zeros(N + 1, dtype=_I64)
    eq_card = np.zeros(N, dtype=_I64)
    eq_off = np.zeros(N + 1, dtype=_I64)
    eq_idx_parts, eq_rhs_parts = [], []
    for i, s in enumerate(spec.sets):
        if s.eq_idx is not None:
            rows = np.asarray(s.eq_idx, dtype=_I64)
            eq_card[i] = rows.shape[1]
            eq_ptr[i + 1] = eq_ptr[i] + rows.shape[0]
            eq_off[i + 1] = eq_off[i] + rows.size
            eq_idx_parts.append((rows + spec.nxoff[i]).ravel())
            eq_rhs_parts.append(np.asarray(s.eq_rhs, float))
        else:
            eq_ptr[i + 1] = eq_ptr[i]
            eq_off[i + 1] = eq_off[i]
    eq_idx = np.concatenate(eq_idx_parts) if eq_idx_parts else np.zeros(0, dtype=_I64)
    eq_rhs = np.concatenate(eq_rhs_parts) if eq_rhs_parts else np.zeros(0)

    nbr_ptr = np.zeros(N + 1, dtype=_I64)
    nbr_parts = []
    for i in range(N):
        nbr_ptr[i + 1] = nbr_ptr[i] + len(spec.graph.neighbors[i])
        nbr_parts.append(np.asarray(spec.graph.neighbors[i], dtype=_I64))
    nbr_idx = np.concatenate(nbr_parts) if nbr_parts else np.zeros(0, dtype=_I64)

    return kernels.GamePlan(
        n=n, m=m, nagents=N, nxoff=spec.nxoff,
        f_indptr=f_indptr, f_idx=f_idx, f_dat=f_dat, f_row=f_row, mvec=mvec,
        a_indptr=a_indptr, a_idx=a_idx, a_dat=a_dat, a_row=a_row,
        d_indptr=d_indptr, d_idx=d_idx, d_dat=d_dat, d_row=d_row,
        bmat=bmat, lo=lo, hi=hi, l1w=l1w,
        eq_ptr=eq_ptr, eq_card=eq_card, eq_off=eq_off, eq_idx=eq_idx, eq_rhs=eq_rhs,
        nbr_ptr=nbr_ptr, nbr_idx=nbr_idx,
    )


# ---------------------------------------------------------------------------
# residuals
# ---------------------------------------------------------------------------

def box_distance(spec, i, x_i):
    p = spec.project_local(i, np.asarray(x_i, float))
    return float(np.linalg.norm(x_i - p))


def feasible_set_residual(spec, x):
    """Per-agent local-set distances and positive-part coupling violation."""
    x = np.asarray(x, dtype=float)
    if x.shape != (spec.n,):
        raise DimensionMismatch(f"x length {x.shape} != {(spec.n,)}")
    local = np.array([box_distance(spec, i, x[spec.x_slice(i)]) for i in range(spec.nagents)])
    coupling = np.maximum(spec.g_sum(x), 0.0)
    return local, coupling


def kkt_residual(spec, x, lam_bar):
    """Max of stationarity, primal feasibility, and complementarity residuals.

    Stationarity per agent is the unit-step projected-gradient displacement
    ||x_i - prox(x_i - (F_i(x) + grad g_i^T lam_bar))||, which vanishes
    exactly at KKT points.
    """
    x = np.asarray(x, dtype=float)
    if x.shape != (spec.n,):
        raise DimensionMismatch("x length mismatch")
    lam_bar = np.asarray(lam_bar, dtype=float).reshape(spec.m) if spec.m else np.zeros(0)
    if spec.m and np.any(lam_bar < -1e-12):
        raise ValidationError("lam_bar must be nonnegative")
    F = spec.pseudogradient(x)
    worst = 0.0
    for i in range(spec.nagents):
        sl = spec.x_slice(i)
        step_dir = F[sl].copy()
        if spec.m:
            step_dir += spec.constraint.jac_t_lam(i, x[sl], lam_bar)
        p = spec.prox(i, x[sl] - step_dir, 1.0)
        worst = max(worst, float(np.linalg.norm(x[sl] - p)))
    local, coupling = feasible_set_residual(spec, x)
    worst = max(worst, float(np.max(local)) if len(local) else 0.0)
    if spec.m:
        worst = max(worst, float(np.max(coupling)))
        worst = max(worst, abs(float(np.dot(lam_bar, spec.g_sum(x)))))
    return worst


def dual_disagreement(spec, om):
    """max_i ||lam_i - mean(lam)|| over agents."""
    if spec.m == 0:
        return 0.0
    lam = as_flat(spec, om)[spec.n:spec.n + spec.nagents * spec.m].reshape(spec.nagents, spec.m)
    mean = lam.mean(axis=0)
    return float(np.max(np.linalg.norm(lam - mean[None, :], axis=1)))


# ---------------------------------------------------------------------------
# gradient checking
# ---------------------------------------------------------------------------

def check_gradient(value_fn, grad_fn, dim, probes=100, seed=0, scale=1.0, rtol=1e-5):
    """Central finite-difference check; returns (ok, worst relative error)."""
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(probes):
        z = scale * rng.standard_normal(dim)
        g = np.asarray(grad_fn(z), dtype=float)
        d = rng.standard_normal(dim)
        d /= np.linalg.norm(d)
        h = 1e-6 * max(1.0, np.linalg.norm(z))
        fd = (value_fn(z + h * d) - value_fn(z - h * d)) / (2 * h)
        err = abs(fd - float(np.dot(g, d))) / max(1.0, abs(fd), np.linalg.norm(g))
        worst = max(worst, err)
    return worst <= rtol, worst


# ---------------------------------------------------------------------------
# JSON loading
# ---------------------------------------------------------------------------

def load_game(path_or_dict, name=None):
    """Load and validate a game spec from a JSON document.

    File indices are 1-based; matrices are row-major lists of lists.
    """
    if isinstance(path_or_dict, dict):
        doc = path_or_dict
        src_name = name or doc.get("name", "game")
    else:
        try:
            with open(path_or_dict) as f:
                doc = json.load(f)
        except (OSError, json.JSONDecodeError) as exc:
            raise ParseError(f"cannot read game spec: {exc}") from exc
        src_name = name or doc.get("name", str(path_or_dict))
    try:
        return _game_from_dict(doc, src_name)
    except (KeyError, TypeError, IndexError) as exc:
        raise ParseError(f"malformed game spec: {exc!r}") from exc


def _game_from_dict(doc, name):
    agents = doc["agents"]
    dims = [int(a["dim"]) for a in agents]
    nagents = len(agents)
    nxoff = np.concatenate(([0], np.cumsum(dims))).astype(_I64)
    m = int(doc.get("m", 0))

    blocks = {}
    lin = np.zeros(int(nxoff[-1]))
    for i, a in enumerate(agents):
        cost = a.get("cost", {"kind": "quadratic-coupled"})
        if cost.get("kind", "quadratic-coupled") != "quadratic-coupled":
            raise ParseError("only quadratic-coupled costs are serializable")
        for blk in cost.get("blocks", []):
            j = int(blk["j"]) - 1
            blocks[(i, j)] = np.asarray(blk["M"], dtype=float)
        if "lin" in cost:
            lin[nxoff[i]:nxoff[i + 1]] = np.asarray(cost["lin"], dtype=float)
    cost = QuadraticCost(nxoff, blocks, lin)

    ells, sets = [], []
    A_list, b_list, D_list = [], [], []
    for i, a in enumerate(agents):
        box = a["box"]
        sets.append(SetForm(np.asarray(box["lo"], float), np.asarray(box["hi"], float)))
        ell = a.get("ell", {"kind": "zero"})
        kind = ell.get("kind", "zero")
        if kind == "zero":
            ells.append(ProxForm("zero"))
        elif kind == "l1-weighted":
            ells.append(ProxForm("l1-weighted", weights=np.asarray(ell["weights"], float)))
        else:
            raise ParseError(f"prox kind '{kind}' is not serializable")
        if m > 0:
            g = a.get("g")
            if g is None:
                A_list.append(np.zeros((m, dims[i])))
                b_list.append(np.zeros(m))
                D_list.append(np.zeros((m, dims[i])))
            else:
                A_key = "A" if g.get("kind", "affine") == "affine" else "a"
                A_list.append(np.asarray(g[A_key], dtype=float).reshape(m, dims[i]))
                b_list.append(np.asarray(g["b"], dtype=float).reshape(m))
                if g.get("kind", "affine") == "quad":
                    D_list.append(np.asarray(g["D"], dtype=float).reshape(m, dims[i]))
                else:
                    D_list.append(np.zeros((m, dims[i])))
    constraint = ConstraintSet(m, A_list, b_list, D_list) if m > 0 else None

    edges = [(int(e[0]) - 1, int(e[1]) - 1) for e in doc["graph"]["edges"]]
    graph = CommGraph(nagents, edges)

    n_omega = int(nxoff[-1]) + 2 * nagents * m
    selection = _selection_from_dict(doc.get("selection"), n_omega, int(nxoff[-1]))

    slater = doc.get("slater_point")
    return GameSpec(
        dims, cost, ells, sets, constraint, graph, selection,
        slater_point=slater, metadata=doc.get("metadata"),
        source=doc, name=name,
    )


def _selection_from_dict(sel, n_omega, n):
    if sel is None:
        return SelectionFunction.weighted_distance(
            n_omega, np.arange(n_omega, dtype=_I64), 1.0, 0.0, name="min-norm"
        )
    if sel.get("kind", "weighted-quadratic") != "weighted-quadratic":
        raise ParseError("only weighted-quadratic selections are serializable")
    scope = sel.get("scope", "omega")
    idx = np.arange(n if scope == "x" else n_omega, dtype=_I64)
    return SelectionFunction.weighted_distance(
        n_omega, idx, sel.get("weights", 1.0), sel.get("ref", 0.0),
        name=sel.get("name", "selection"),
    )
