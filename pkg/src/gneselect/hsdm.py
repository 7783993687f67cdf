"""Hybrid steepest descent over a quasi-nonexpansive fixed-point operator.

The solver perturbs each operator application with a vanishing gradient step
of the selection objective and converges to the selection-optimal point of
the operator's fixed-point set.
"""

import time
import warnings
from dataclasses import dataclass, field

import numpy as np

from .errors import Diverged, EmptySlice, ValidationError
from .game import as_flat, dual_disagreement, kkt_residual


@dataclass(frozen=True)
class BetaSchedule:
    """Outer step-size sequence.

    ``power``: beta_k = beta0 / k**p with p in (1/2, 1], which is
    non-summable with summable squares.  ``constant``: beta_k = beta
    (beta = 0 reduces the outer loop to the plain fixed-point iteration).
    """

    kind: str = "power"
    beta0: float = 1.0
    p: float = 0.51

    def __post_init__(self):
        if self.kind == "power":
            if self.beta0 <= 0:
                raise ValidationError("power schedule needs beta0 > 0")
            if not (0.5 < self.p <= 1.0):
                raise ValidationError(
                    "power exponent must lie in (1/2, 1]", self.p
                )
        elif self.kind == "constant":
            if self.beta0 < 0:
                raise ValidationError("constant step must be >= 0")
        else:
            raise ValidationError(f"unknown schedule kind '{self.kind}'")

    def at(self, k):
        """Step at 1-based iteration k."""
        if self.kind == "constant":
            return self.beta0
        return self.beta0 / k ** self.p


@dataclass
class StopRule:
    max_iter: int = 10000
    residual_tol: float = 0.0
    phi_stall_tol: float = 0.0
    stall_window: int = 100


TRACE_HEADER = "k,residual,phi,coupling_viol,dual_disagreement,beta,wall_ms"


class RunTrace:
    """Append-only per-iteration record of one solver run."""

    columns = tuple(TRACE_HEADER.split(","))

    def __init__(self):
        self.rows = []
        self.events = []

    def append(self, k, residual, phi, coupling, disagreement, beta, wall_ms):
        self.rows.append((k, residual, phi, coupling, disagreement, beta, wall_ms))

    def column(self, name):
        j = self.columns.index(name)
        return np.array([r[j] for r in self.rows])

    def __len__(self):
        return len(self.rows)

    def to_csv(self, path, seed=None, timing="real"):
        """Write the trace with 17-significant-digit formatting.

        ``timing="zero"`` blanks the wall-clock column so artifacts are
        byte-identical across reruns.
        """
        with open(path, "w") as f:
            if seed is not None:
                f.write(f"# seed={seed}\n")
            f.write(TRACE_HEADER + "\n")
            for row in self.rows:
                vals = list(row)
                if timing == "zero":
                    vals[-1] = 0.0
                f.write("%d,%.17g,%.17g,%.17g,%.17g,%.17g,%.17g\n" % tuple(vals))


def _coupling_violation(spec, x):
    if spec.m == 0:
        return 0.0
    return float(np.max(np.maximum(spec.g_sum(x), 0.0)))


def hsdm_solve(T, phi, om0, schedule, stop=None):
    """Run the gradient-perturbed fixed-point iteration.

    Each iteration applies the operator and takes a vanishing gradient step
    of the selection function at the operator output.  Stops when the
    operator residual is below ``residual_tol`` *and* the selection value
    stalled over the trailing window, or at ``max_iter``.

    Returns ``(om_final, trace)`` where ``om_final`` is the operator image
    of the last iterate (the point the agents actually play).
    """
    stop = stop or StopRule()
    spec = T.spec
    om = as_flat(spec, om0).copy()
    if not np.all(np.isfinite(om)):
        raise ValidationError("initial state must be finite")
    trace = RunTrace()
    out = om
    phi_hist = []
    t0 = time.perf_counter()
    for k in range(1, stop.max_iter + 1):
        out = T.apply(om)
        beta = schedule.at(k)
        residual = T.norm(out - om)
        phi_val = phi.value(om)
        trace.append(
            k, residual, phi_val, _coupling_violation(spec, om[:spec.n]),
            dual_disagreement(spec, om), beta,
            1e3 * (time.perf_counter() - t0),
        )
        phi_hist.append(phi_val)
        if beta != 0.0:
            om = out - beta * phi.grad(out)
        else:
            om = out
        if np.max(np.abs(om)) > 1e12:
            raise Diverged(f"iterate norm exceeded 1e12 at k={k}")
        _maybe_refresh_dual_bound(T, om, k, trace)
        stalled = (
            len(phi_hist) > stop.stall_window
            and abs(phi_hist[-1] - phi_hist[-1 - stop.stall_window]) <= stop.phi_stall_tol
        )
        if residual <= stop.residual_tol and stalled:
            break
    return out, trace


def _maybe_refresh_dual_bound(T, om, k, trace):
    """Shrink steps when quad-constraint duals exceed the assumed bound."""
    est = getattr(T, "estimate", None)
    if est is None or est.b_lambda is None or k % 100:
        return
    spec = T.spec
    lam_inf = float(np.max(np.abs(om[spec.n:spec.n + spec.nagents * spec.m])))
    if lam_inf <= est.b_lambda:
        return
    from .operators import make_stepsizes, refresh_dual_bound

    new_est = refresh_dual_bound(spec, est, lam_inf)
    new_steps = make_stepsizes(spec, new_est, mode=T.steps.mode)
    warnings.warn(
        f"dual bound {est.b_lambda:.3g} exceeded ({lam_inf:.3g}); "
        f"shrinking steps for L_B={new_est.L_B:.3g}"
    )
    trace.events.append({"k": k, "event": "dual-bound-refresh", "L_B": new_est.L_B})
    T.estimate = new_est
    T.steps = new_steps
    T._wdiag = new_steps.psi_diag(spec)


def certify_selection(spec, om_final, oracle_solution, tol):
    """Compare a solver output against a reference optimal selection.

    The pass verdict uses the primal distance, the selection-value gap, and
    the KKT residual; the full joint-state distance is reported but not
    gated because the consensus fiber (nu and inactive duals) of an optimal
    selection need not be unique.
    """
    om = as_flat(spec, om_final)
    ref = as_flat(spec, oracle_solution)
    x, x_ref = om[:spec.n], ref[:spec.n]
    lam_bar = (
        om[spec.n:spec.n + spec.nagents * spec.m].reshape(spec.nagents, spec.m).mean(axis=0)
        if spec.m else np.zeros(0)
    )
    phi_gap = spec.selection.value(om) - spec.selection.value(ref)
    report = {
        "x_err": float(np.linalg.norm(x - x_ref)),
        "omega_err": float(np.linalg.norm(om - ref)),
        "phi_gap": float(phi_gap),
        "kkt_residual": kkt_residual(spec, x, np.maximum(lam_bar, 0.0)),
        "tol": float(tol),
    }
    report["pass"] = bool(
        report["x_err"] <= tol and report["phi_gap"] <= tol and report["kkt_residual"] <= tol
    )
    return report


def shrinkage_probe(T, fix_sample, center, radius, r_grid, samples=500, seed=0, k_nn=1):
    """Sampled lower envelope of the per-step distance decrease.

    For each shell radius r, reports the minimum of
    dist(om, fix) - dist(T(om), fix) over sampled points of the ball with
    dist(om, fix) >= r, where distances are step-metric norms to the given
    fixed-point sample (an upper bound of the true distance, so the table is
    a diagnostic, not a proof).  ``k_nn > 1`` projects onto the convex hull
    of the nearest sample points instead of the nearest point.
    """
    fix_pts = [as_flat(T.spec, f) for f in fix_sample]
    if not fix_pts:
        raise ValidationError("need at least one fixed point")
    center = as_flat(T.spec, center)
    fix_mat = np.stack(fix_pts)
    wdiag = T.steps.psi_diag(T.spec)

    def dist(z):
        d2 = ((fix_mat - z[None, :]) ** 2 @ wdiag)
        if k_nn <= 1 or len(fix_pts) == 1:
            return float(np.sqrt(d2.min()))
        sel = np.argsort(d2)[:k_nn]
        return _hull_distance(z, fix_mat[sel], wdiag)

    rng = np.random.default_rng(seed)
    dim = center.shape[0]
    pts, dists, drops = [], [], []
    for _ in range(samples):
        u = rng.standard_normal(dim)
        nrm = np.sqrt(np.dot(wdiag * u, u))
        r = radius * rng.random() ** (1.0 / dim)
        z = center + (r / nrm) * u
        d0 = dist(z)
        d1 = dist(T.apply(z))
        pts.append(z)
        dists.append(d0)
        drops.append(d0 - d1)
    dists = np.array(dists)
    drops = np.array(drops)

    table = []
    for r in r_grid:
        mask = dists >= r
        if not np.any(mask):
            raise EmptySlice(f"no sample at distance >= {r}")
        table.append((float(r), float(drops[mask].min()), int(mask.sum())))
    return table


def _hull_distance(z, pts, wdiag, iters=200):
    """Distance from z to conv(pts) in the wdiag metric (projected gradient)."""
    k = pts.shape[0]
    alpha = np.full(k, 1.0 / k)
    G = (pts * wdiag[None, :]) @ pts.T
    h = (pts * wdiag[None, :]) @ z
    lip = max(np.linalg.eigvalsh(G).max(), 1e-12)
    for _ in range(iters):
        grad = G @ alpha - h
        alpha = _simplex_project(alpha - grad / lip)
    diff = pts.T @ alpha - z
    return float(np.sqrt(np.dot(wdiag * diff, diff)))


def _simplex_project(v):
    u = np.sort(v)[::-1]
    css = np.cumsum(u) - 1.0
    ind = np.arange(1, len(v) + 1)
    cond = u - css / ind > 0
    rho = ind[cond][-1]
    theta = css[cond][-1] / rho
    return np.maximum(v - theta, 0.0)
