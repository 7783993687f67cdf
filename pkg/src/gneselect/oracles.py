"""Desk-scale reference solvers for ground-truth optimal selections.

These deliberately share no code with the operator-splitting solvers: the
projection oracle enumerates active sets, the strongly monotone oracle runs
a primal-dual extragradient loop, and the segment oracle is a golden-section
search.  Every solution carries a KKT and a VI-optimality certificate.
"""

from dataclasses import dataclass
from itertools import combinations, product

import numpy as np
import scipy.optimize

from .backend import maybe_njit
from .errors import (
    DimensionTooLarge,
    NotStronglyMonotone,
    OracleUnavailable,
)
from .game import QuadraticCost, as_flat, kkt_residual


@dataclass
class OracleSolution:
    omega: np.ndarray
    method: str
    kkt_residual: float
    vi_residual: float
    objective: float | None = None
    lam_bar: np.ndarray | None = None

    def as_dict(self):
        return {
            "method": self.method,
            "kkt_residual": self.kkt_residual,
            "vi_residual": self.vi_residual,
            "objective": self.objective,
            "omega": self.omega.tolist(),
            "lam_bar": None if self.lam_bar is None else self.lam_bar.tolist(),
        }


def stacked_coupling(spec):
    """Aggregate affine coupling G x <= h over all agents."""
    if spec.m == 0:
        return np.zeros((0, spec.n)), np.zeros(0)
    G = np.hstack([A.toarray() for A in spec.constraint.A])
    h = spec.constraint.b.sum(axis=0)
    return G, h


def consensus_fiber(spec, x, lam_bar=None):
    """A consensus state (x, lam_bar, nu) in the solution set over x.

    Solves L nu_block = -g_i(x) + mean_j g_j(x) per coupling component, which
    places the lambda-block inclusion exactly on the normal cone.
    """
    om = np.zeros(spec.n_omega)
    om[:spec.n] = x
    if spec.m == 0:
        return om
    lam_bar = np.zeros(spec.m) if lam_bar is None else lam_bar
    gvals = np.stack([spec.g_value(i, x[spec.x_slice(i)]) for i in range(spec.nagents)])
    targets = -gvals + gvals.sum(axis=0) / spec.nagents
    nu = np.linalg.pinv(spec.graph.laplacian) @ targets
    for i in range(spec.nagents):
        om[spec.lam_slice(i)] = lam_bar
        om[spec.nu_slice(i)] = nu[i]
    return om


def _vi_residual_lp(spec, x_star, grad_x):
    """Exact VI check: optimality gap of x* for the linearized objective."""
    G, h = stacked_coupling(spec)
    lo, hi = spec.box_bounds()
    res = scipy.optimize.linprog(
        grad_x, A_ub=G if spec.m else None, b_ub=h if spec.m else None,
        bounds=list(zip(lo, hi)), method="highs",
    )
    if not res.success:
        raise OracleUnavailable(f"certificate LP failed: {res.message}")
    return max(0.0, float(np.dot(grad_x, x_star - res.x)))


# ---------------------------------------------------------------------------
# projection-game oracle (F == 0)
# ---------------------------------------------------------------------------

def oracle_projection_game(spec, x_ref, weights=None):
    """Optimal selection of an F == 0 game: weighted projection onto the
    collective feasible set, by exhaustive active-set enumeration.

    Limited to 8 primal dimensions; constraints must be affine.
    """
    if spec.n > 8:
        raise DimensionTooLarge(f"enumeration limited to 8 primal dims, got {spec.n}")
    if isinstance(spec.cost, QuadraticCost):
        if spec.cost.matrix.nnz or np.any(spec.cost.lin != 0.0):
            raise OracleUnavailable("projection oracle needs an F == 0 game")
    if spec.m and not spec.constraint.affine:
        raise OracleUnavailable("projection oracle needs affine coupling")
    x_ref = np.asarray(x_ref, dtype=float).reshape(spec.n)
    w = np.ones(spec.n) if weights is None else np.asarray(weights, float).reshape(spec.n)
    if np.any(w <= 0):
        raise OracleUnavailable("projection weights must be positive")
    lo, hi = spec.box_bounds()
    G, h = stacked_coupling(spec)

    best, best_val = None, np.inf
    rows = range(spec.m)
    for k in range(spec.m + 1):
        for S in combinations(rows, k):
            S = list(S)
            for pattern in product((-1, 0, 1), repeat=spec.n):
                pattern = np.array(pattern)
                x = np.where(pattern < 0, lo, np.where(pattern > 0, hi, 0.0))
                free = pattern == 0
                nf = int(free.sum())
                GS = G[S][:, free] if S else np.zeros((0, nf))
                rhs = (h[S] - G[S][:, ~free] @ x[~free]) if S else np.zeros(0)
                if S:
                    # x_free = ref - G_S^T mu / (2w);  G_S x_free = rhs
                    quad = GS @ np.diag(1.0 / (2.0 * w[free])) @ GS.T
                    lin = GS @ x_ref[free] - rhs
                    mu, *_ = np.linalg.lstsq(quad, lin, rcond=None)
                    if np.any(mu < -1e-10):
                        continue
                    x[free] = x_ref[free] - (GS.T @ mu) / (2.0 * w[free])
                    if np.linalg.norm(GS @ x[free] - rhs) > 1e-9:
                        continue
                else:
                    mu = np.zeros(0)
                    x[free] = x_ref[free]
                if np.any(x[free] < lo[free] - 1e-12) or np.any(x[free] > hi[free] + 1e-12):
                    continue
                grad = 2.0 * w * (x - x_ref) + (G[S].T @ mu if S else 0.0)
                if np.any(grad[pattern < 0] < -1e-9) or np.any(grad[pattern > 0] > 1e-9):
                    continue
                if spec.m and np.any(G @ x - h > 1e-9):
                    continue
                val = float(np.dot(w * (x - x_ref), x - x_ref))
                if val < best_val - 1e-15:
                    best_val, best = val, x.copy()
    if best is None:
        raise OracleUnavailable("enumeration found no KKT point (infeasible game?)")

    om = consensus_fiber(spec, best)
    lam_bar = np.zeros(spec.m)
    return OracleSolution(
        omega=om, method="active-set-enumeration",
        kkt_residual=kkt_residual(spec, best, lam_bar),
        vi_residual=_vi_residual_lp(spec, best, 2.0 * w * (best - x_ref)),
        objective=best_val, lam_bar=lam_bar,
    )


# ---------------------------------------------------------------------------
# strongly monotone quadratic oracle
# ---------------------------------------------------------------------------

@maybe_njit
def _extragradient(M, mvec, G, h, lo, hi, step, max_iter, tol):
    n = lo.shape[0]
    m = h.shape[0]
    x = 0.5 * (lo + hi)
    lam = np.zeros(m)
    disp = np.inf
    for _ in range(max_iter):
        fx = M @ x + mvec + G.T @ lam
        fl = -(G @ x - h)
        xh = np.minimum(np.maximum(x - step * fx, lo), hi)
        lh = np.maximum(lam - step * fl, 0.0)
        fx2 = M @ xh + mvec + G.T @ lh
        fl2 = -(G @ xh - h)
        xn = np.minimum(np.maximum(x - step * fx2, lo), hi)
        ln = np.maximum(lam - step * fl2, 0.0)
        disp = np.sqrt(np.dot(xn - x, xn - x) + np.dot(ln - lam, ln - lam))
        x, lam = xn, ln
        if disp <= tol:
            break
    return x, lam, disp


def oracle_unique_vgne(spec, max_iter=1_000_000, tol=1e-15):
    """Reference v-GNE of a strongly monotone quadratic game.

    Runs a primal-dual extragradient over box x nonnegative-orthant, then
    polishes the shared multiplier by nonnegative least squares on the
    active rows.
    """
    if not isinstance(spec.cost, QuadraticCost):
        raise NotStronglyMonotone("reference solver needs a quadratic cost")
    mu = spec.cost.min_symmetric_eig()
    if mu <= 1e-10:
        raise NotStronglyMonotone(f"min symmetric eigenvalue {mu:.3e} <= 0")
    if spec.m and not spec.constraint.affine:
        raise OracleUnavailable("reference solver needs affine coupling")
    M = spec.cost.matrix.toarray()
    G, h = stacked_coupling(spec)
    lo, hi = spec.box_bounds()
    stacked = np.block([[M, G.T], [-G, np.zeros((spec.m, spec.m))]]) if spec.m else M
    L = float(np.linalg.norm(stacked, 2))
    step = 1.0 / (2.0 * max(L, 1e-12))
    x, lam, disp = _extragradient(M, spec.cost.lin, G, h, lo, hi, step,
                                  max_iter, tol)
    if disp > 1e-9:
        raise OracleUnavailable(f"extragradient stalled at displacement {disp:.2e}")

    lam_bar = _polish_multiplier(spec, M, G, h, lo, hi, x, lam)
    om = consensus_fiber(spec, x, lam_bar)
    vi = 0.0  # singleton solution set: the selection problem is vacuous
    return OracleSolution(
        omega=om, method="long-run-extragradient",
        kkt_residual=kkt_residual(spec, x, lam_bar),
        vi_residual=vi, objective=None, lam_bar=lam_bar,
    )


def _polish_multiplier(spec, M, G, h, lo, hi, x, lam):
    """Least-squares multiplier on active rows; keeps the better candidate."""
    if spec.m == 0:
        return np.zeros(0)
    interior = (x > lo + 1e-9) & (x < hi - 1e-9)
    active = (G @ x - h) > -1e-7
    lam_ls = np.zeros(spec.m)
    if np.any(active) and np.any(interior):
        F_int = (M @ x + spec.cost.lin)[interior]
        A_int = G[active][:, interior]
        sol, _ = scipy.optimize.nnls(A_int.T, -F_int)
        lam_ls[active] = sol
    cands = [np.maximum(lam, 0.0), lam_ls]
    residuals = [kkt_residual(spec, x, lb) for lb in cands]
    return cands[int(np.argmin(residuals))]


# ---------------------------------------------------------------------------
# segment oracle
# ---------------------------------------------------------------------------

def oracle_selection_on_segment(spec, om_a, om_b, phi=None, tol=1e-12):
    """Golden-section minimizer of the selection along a known equilibrium
    segment [om_a, om_b] (constructed games only)."""
    phi = phi if phi is not None else spec.selection
    a_pt = as_flat(spec, om_a)
    b_pt = as_flat(spec, om_b)

    def val(t):
        return phi.value(a_pt + t * (b_pt - a_pt))

    invphi = (np.sqrt(5.0) - 1.0) / 2.0
    a, b = 0.0, 1.0
    c, d = b - invphi * (b - a), a + invphi * (b - a)
    fc, fd = val(c), val(d)
    while b - a > tol:
        if fc < fd:
            b, d, fd = d, c, fc
            c = b - invphi * (b - a)
            fc = val(c)
        else:
            a, c, fc = c, d, fd
            d = a + invphi * (b - a)
            fd = val(d)
    t_star = 0.5 * (a + b)
    om = a_pt + t_star * (b_pt - a_pt)
    lam_bar = (
        om[spec.n:spec.n + spec.nagents * spec.m].reshape(spec.nagents, spec.m).mean(axis=0)
        if spec.m else np.zeros(0)
    )
    seg = b_pt - a_pt
    slope = float(np.dot(phi.grad(om), seg))
    if t_star < tol:
        vi = max(0.0, -slope)
    elif t_star > 1.0 - tol:
        vi = max(0.0, slope)
    else:
        vi = abs(slope) * float(np.linalg.norm(seg))
    return OracleSolution(
        omega=om, method="analytic",
        kkt_residual=kkt_residual(spec, om[:spec.n], np.maximum(lam_bar, 0.0)),
        vi_residual=vi, objective=val(t_star), lam_bar=lam_bar,
    )
