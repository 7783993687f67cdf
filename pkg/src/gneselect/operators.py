"""Splitting operators: forward maps, resolvents, FBF and pFB fixed-point maps.

Step sizes follow the diagonal-scaling rules of the two splittings; the
Lipschitz constant of the combined forward operator is computed exactly for
affine constraints and sampled (with a safety factor) otherwise.
"""

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from . import kernels
from .errors import (
    DimensionMismatch,
    EstimationDiverged,
    MissingCocoercivity,
    NotAffine,
    StepSizeViolation,
)
from .game import BlackboxCost, as_flat


# ---------------------------------------------------------------------------
# step sizes
# ---------------------------------------------------------------------------

@dataclass
class StepSizes:
    """Per-agent primal / dual / consensus step sizes and their metadata."""

    rho: np.ndarray
    tau: np.ndarray
    sig: np.ndarray
    mode: str = "fbf"
    l_b: float | None = None
    delta: float | None = None
    bounds: dict = field(default_factory=dict)

    def max_step(self):
        return float(max(self.rho.max(), self.tau.max(), self.sig.max()))

    def psi_diag(self, spec):
        """Diagonal of the step-size metric Psi = diag(rho, tau, sig)^-1."""
        w = np.empty(spec.n_omega)
        for i in range(spec.nagents):
            w[spec.x_slice(i)] = 1.0 / self.rho[i]
            if spec.m:
                w[spec.lam_slice(i)] = 1.0 / self.tau[i]
                w[spec.nu_slice(i)] = 1.0 / self.sig[i]
        return w

    def mu_min_psi(self):
        return 1.0 / self.max_step()


def psi_norm(spec, steps, v):
    v = np.asarray(v, dtype=float)
    return float(np.sqrt(np.dot(steps.psi_diag(spec) * v, v)))


def phi_quadratic(spec, steps, v):
    """Quadratic form v^T Phi v of the pFB preconditioner (never inverted)."""
    v = as_flat(spec, v)
    n, N, m = spec.n, spec.nagents, spec.m
    x = v[:n]
    q = 0.0
    for i in range(spec.nagents):
        xi = x[spec.x_slice(i)]
        q += float(np.dot(xi, xi)) / steps.rho[i]
    if m:
        lam2 = v[n:n + N * m].reshape(N, m)
        nu2 = v[n + N * m:].reshape(N, m)
        q += float(np.sum(lam2 * lam2, axis=1) @ (1.0 / steps.tau))
        q += float(np.sum(nu2 * nu2, axis=1) @ (1.0 / steps.sig))
        for i in range(N):
            q -= 2.0 * float(lam2[i] @ (spec.constraint.A[i] @ x[spec.x_slice(i)]))
        lap_nu = spec.graph.laplacian @ nu2
        q -= 2.0 * float(np.sum(lam2 * lap_nu))
    return q


def phi_norm(spec, steps, v):
    q = phi_quadratic(spec, steps, v)
    return float(np.sqrt(max(q, 0.0)))


# ---------------------------------------------------------------------------
# Lipschitz estimation
# ---------------------------------------------------------------------------

@dataclass
class LipschitzEstimate:
    L_F: float
    L_B: float
    method: str
    b_grad_g: np.ndarray | None = None
    b_lambda: float | None = None


def _block_diag(mats):
    return sp.block_diag([sp.csr_matrix(M) for M in mats], format="csr")


def _stacked_forward_matrix(spec, A_blocks, xx_diag=None):
    """Sparse matrix of the combined forward map for given constraint rows."""
    n, N, m = spec.n, spec.nagents, spec.m
    M = spec.cost.matrix if not isinstance(spec.cost, BlackboxCost) else sp.csr_matrix((n, n))
    if xx_diag is not None:
        M = M + sp.diags(xx_diag)
    if m == 0:
        return sp.csr_matrix(M)
    A = _block_diag(A_blocks)
    L = sp.kron(sp.csr_matrix(spec.graph.laplacian), sp.eye(m, format="csr"), format="csr")
    Z_xn = sp.csr_matrix((n, N * m))
    Z_nn = sp.csr_matrix((N * m, N * m))
    Z_nx = sp.csr_matrix((N * m, n))
    return sp.bmat(
        [[M, A.T, Z_xn], [-A, L, -L], [Z_nx, L, Z_nn]], format="csr"
    )


def spectral_norm(mat, seed=0):
    mat = sp.csr_matrix(mat)
    k = min(mat.shape)
    if k == 0:
        return 0.0
    if max(mat.shape) <= 1500:
        return float(np.linalg.norm(mat.toarray(), 2))
    rng = np.random.default_rng(seed)
    v0 = rng.standard_normal(mat.shape[1])
    try:
        sv = sp.linalg.svds(mat.astype(float), k=1, return_singular_vectors=False,
                            v0=v0, maxiter=5000, tol=0)
    except Exception as exc:  # pragma: no cover - scipy failure is exotic
        raise EstimationDiverged(str(exc)) from exc
    return float(sv[0])


def estimate_lipschitz(spec, b_lambda=None, seed=0, samples=20):
    """Lipschitz constant of the combined forward operator.

    Affine constraints give the exact spectral norm of the stacked linear
    map.  Diagonal-quadratic constraints are sampled over the box and a dual
    ball of radius ``b_lambda``; the estimate is a lower bound inflated by
    1.1 before use.  A declared ``L_B`` in the spec metadata wins.
    """
    L_F = spec.lipschitz_F()
    if "L_B" in spec.metadata:
        return LipschitzEstimate(L_F, float(spec.metadata["L_B"]), "declared")
    if isinstance(spec.cost, BlackboxCost) and spec.m:
        raise EstimationDiverged("blackbox cost with constraints needs declared L_B")
    if spec.m == 0:
        return LipschitzEstimate(L_F, L_F, "exact-affine")
    lo, hi = spec.box_bounds()
    b_grad = np.array([
        spec.constraint.grad_bound(i, lo[spec.x_slice(i)], hi[spec.x_slice(i)])
        for i in range(spec.nagents)
    ])
    if spec.constraint.affine:
        J = _stacked_forward_matrix(spec, spec.constraint.A)
        return LipschitzEstimate(L_F, spectral_norm(J, seed), "exact-affine", b_grad)

    if b_lambda is None:
        b_lambda = float(spec.metadata.get("b_lambda", 10.0))
    rng = np.random.default_rng(seed)
    best = 0.0
    for _ in range(samples):
        x = spec.random_x(rng)
        lam2 = b_lambda * rng.random((spec.nagents, spec.m))
        A_pts, xx_parts = [], []
        for i in range(spec.nagents):
            xi = x[spec.x_slice(i)]
            D = spec.constraint.D[i]
            A_pts.append(spec.constraint.A[i] + D.multiply(xi[None, :]))
            xx_parts.append(D.T @ lam2[i])
        J = _stacked_forward_matrix(spec, A_pts, np.concatenate(xx_parts))
        best = max(best, spectral_norm(J, seed))
    return LipschitzEstimate(L_F, 1.1 * best, "power-iteration", b_grad, b_lambda)


def refresh_dual_bound(spec, estimate, lam_inf, seed=0):
    """Re-estimate after the dual iterates exceeded the assumed bound."""
    return estimate_lipschitz(spec, b_lambda=10.0 * max(lam_inf, 0.1), seed=seed)


# ---------------------------------------------------------------------------
# step-size construction
# ---------------------------------------------------------------------------

def _pfb_bounds(spec, delta):
    N = spec.nagents
    col = np.zeros(N)
    row = np.zeros(N)
    if spec.m:
        for i in range(N):
            A = np.abs(spec.constraint.A[i].toarray())
            col[i] = A.sum(axis=0).max() if A.size else 0.0
            row[i] = A.sum(axis=1).max() if A.size else 0.0
    deg = np.array([len(nb) for nb in spec.graph.neighbors], dtype=float)
    return {
        "rho": 1.0 / (col + delta),
        "tau": 1.0 / (row + 2.0 * deg + delta),
        "sig": 1.0 / (2.0 * deg + delta),
    }


def make_stepsizes(spec, estimate=None, mode="fbf", delta=None, safety=0.99):
    """Admissible step sizes for the requested splitting.

    FBF: every step equals ``safety / L_B``.  pFB: per-agent bounds from the
    diagonal dominance of the preconditioner, scaled by ``safety``; ``delta``
    defaults to 1.01 times its lower bound.
    """
    N = spec.nagents
    if mode == "fbf":
        if estimate is None:
            estimate = estimate_lipschitz(spec)
        l_b = estimate.L_B
        val = safety / l_b if l_b > 0 else 1.0
        ones = np.full(N, val)
        return StepSizes(ones.copy(), ones.copy(), ones.copy(), "fbf", l_b=l_b)
    if mode != "pfb":
        raise ValueError(f"unknown mode '{mode}'")
    if spec.m and not spec.constraint.affine:
        raise NotAffine("pFB requires affine coupling constraints")
    eta = spec.cocoercivity()
    if eta is None:
        raise MissingCocoercivity("declare metadata['eta'] or use a strongly monotone quadratic cost")
    max_deg = float(spec.graph.max_degree())
    lower = 1.0 / min(eta, 1.0 / (2.0 * max_deg)) if max_deg > 0 else 1.0 / eta
    if delta is None:
        delta = 1.01 * lower
    elif delta <= lower:
        raise StepSizeViolation(f"delta={delta} must exceed {lower}")
    bounds = _pfb_bounds(spec, delta)
    return StepSizes(
        safety * bounds["rho"], safety * bounds["tau"], safety * bounds["sig"],
        "pfb", delta=delta, bounds=bounds,
    )


def _check_fbf_steps(spec, steps):
    if steps.mode != "fbf":
        raise StepSizeViolation("step sizes were not built for FBF")
    if steps.l_b is not None and steps.max_step() > (1.0 + 1e-12) / max(steps.l_b, 1e-300):
        raise StepSizeViolation(
            f"max step {steps.max_step():.3e} exceeds 1/L_B = {1.0 / steps.l_b:.3e}"
        )


def _check_pfb_steps(spec, steps):
    if steps.mode != "pfb":
        raise StepSizeViolation("step sizes were not built for pFB")
    if spec.m and not spec.constraint.affine:
        raise NotAffine("pFB requires affine coupling constraints")
    for key, arr in (("rho", steps.rho), ("tau", steps.tau), ("sig", steps.sig)):
        bound = steps.bounds.get(key)
        if bound is not None and np.any(arr > bound * (1.0 + 1e-12)):
            raise StepSizeViolation(f"{key} exceeds its preconditioner bound")


# ---------------------------------------------------------------------------
# operator building blocks (shared with the agent runtime)
# ---------------------------------------------------------------------------

def cost_block(spec, i, x_glob):
    """Pseudogradient block F_i(x); reads only declared dependency blocks."""
    if isinstance(spec.cost, BlackboxCost):
        return np.asarray(spec.cost.grad_block(i, x_glob), dtype=float)
    return kernels.cost_grad_agent(spec.plan(), i, x_glob)


def forward_block(spec, i, f_i, x_i, lam_i, nu_i, lam_nbrs, nu_nbrs):
    return kernels.forward_agent(spec.plan(), i, f_i, x_i, lam_i, nu_i, lam_nbrs, nu_nbrs)


def half_step_block(spec, steps, i, fx, flam, fnu, x_i, lam_i, nu_i):
    if spec.ells[i].kind == "custom-callback" or spec.sets[i].projector is not None:
        xt = spec.prox(i, x_i - steps.rho[i] * fx, steps.rho[i])
        if spec.m == 0:
            return xt, lam_i, nu_i
        lt = np.maximum(lam_i - steps.tau[i] * flam, 0.0)
        nt = nu_i - steps.sig[i] * fnu
        return xt, lt, nt
    return kernels.fbf_half_agent(
        spec.plan(), i, steps.rho[i], steps.tau[i], steps.sig[i],
        fx, flam, fnu, x_i, lam_i, nu_i,
    )


def full_step_block(steps, i, fx, flam, fnu, f2x, f2lam, f2nu, xt, lt, nt):
    return kernels.fbf_full_agent(
        steps.rho[i], steps.tau[i], steps.sig[i],
        fx, flam, fnu, f2x, f2lam, f2nu, xt, lt, nt,
    )


def pfb_first_block(spec, steps, i, f_i, x_i, lam_i, nu_i, lam_nbrs):
    if spec.ells[i].kind == "custom-callback" or spec.sets[i].projector is not None:
        fx = f_i + (spec.constraint.jac_t_lam(i, x_i, lam_i) if spec.m else 0.0)
        xo = spec.prox(i, x_i - steps.rho[i] * fx, steps.rho[i])
        no = nu_i - steps.sig[i] * kernels.neighbor_consensus(lam_i, lam_nbrs)
        return xo, no
    return kernels.pfb_first_agent(
        spec.plan(), i, steps.rho[i], steps.sig[i], f_i, x_i, lam_i, nu_i, lam_nbrs,
    )


def pfb_lam_block(spec, steps, i, x_i, xo_i, lam_i, nu_i, no_i, lam_nbrs, nu_nbrs, no_nbrs):
    return kernels.pfb_lam_agent(
        spec.plan(), i, steps.tau[i], x_i, xo_i, lam_i, nu_i, no_i,
        lam_nbrs, nu_nbrs, no_nbrs,
    )


def _gather(v2d, nbrs):
    return v2d[nbrs] if len(nbrs) else v2d[:0]


def _fbf_sweep_py(spec, steps, om):
    """Reference sweep for games with python oracles (callbacks, blackbox)."""
    plan = spec.plan()
    n, N, m = spec.n, spec.nagents, spec.m
    x = om[:n]
    lam2 = om[n:n + N * m].reshape(N, m)
    nu2 = om[n + N * m:].reshape(N, m)
    nbrs = spec.graph.neighbors

    fx = np.empty(n)
    flam = np.empty((N, m))
    fnu = np.empty((N, m))
    for i in range(N):
        sl = spec.x_slice(i)
        f_i = cost_block(spec, i, x)
        a, b, c = forward_block(spec, i, f_i, x[sl], lam2[i], nu2[i],
                                _gather(lam2, nbrs[i]), _gather(nu2, nbrs[i]))
        fx[sl] = a
        if m:
            flam[i], fnu[i] = b, c

    xt = np.empty(n)
    lt2 = np.empty((N, m))
    nt2 = np.empty((N, m))
    for i in range(N):
        sl = spec.x_slice(i)
        a, b, c = half_step_block(spec, steps, i, fx[sl], flam[i], fnu[i],
                                  x[sl], lam2[i], nu2[i])
        xt[sl] = a
        if m:
            lt2[i], nt2[i] = b, c

    out = np.empty_like(om)
    tilde = np.empty_like(om)
    tilde[:n] = xt
    tilde[n:n + N * m] = lt2.ravel()
    tilde[n + N * m:] = nt2.ravel()
    for i in range(N):
        sl = spec.x_slice(i)
        f_i = cost_block(spec, i, xt)
        f2x, f2lam, f2nu = forward_block(spec, i, f_i, xt[sl], lt2[i], nt2[i],
                                         _gather(lt2, nbrs[i]), _gather(nt2, nbrs[i]))
        xo, lo_, no = full_step_block(steps, i, fx[sl], flam[i], fnu[i],
                                      f2x, f2lam, f2nu, xt[sl], lt2[i], nt2[i])
        out[sl] = xo
        if m:
            out[spec.lam_slice(i)] = lo_
            out[spec.nu_slice(i)] = no
    return out, tilde


def _pfb_sweep_py(spec, steps, om):
    plan = spec.plan()
    n, N, m = spec.n, spec.nagents, spec.m
    x = om[:n]
    lam2 = om[n:n + N * m].reshape(N, m)
    nu2 = om[n + N * m:].reshape(N, m)
    nbrs = spec.graph.neighbors

    xo = np.empty(n)
    no2 = np.empty((N, m))
    for i in range(N):
        sl = spec.x_slice(i)
        f_i = cost_block(spec, i, x)
        a, b = pfb_first_block(spec, steps, i, f_i, x[sl], lam2[i], nu2[i],
                               _gather(lam2, nbrs[i]))
        xo[sl] = a
        if m:
            no2[i] = b

    out = np.empty_like(om)
    out[:n] = xo
    for i in range(N):
        sl = spec.x_slice(i)
        if m:
            out[spec.lam_slice(i)] = pfb_lam_block(
                spec, steps, i, x[sl], xo[sl], lam2[i], nu2[i], no2[i],
                _gather(lam2, nbrs[i]), _gather(nu2, nbrs[i]), _gather(no2, nbrs[i]),
            )
    out[n + N * m:] = no2.ravel()
    return out


# ---------------------------------------------------------------------------
# public operator API
# ---------------------------------------------------------------------------

def apply_B(spec, om):
    """Forward operator: col(F(x), L lam [+ b in affine mode], 0)."""
    om = as_flat(spec, om)
    n, N, m = spec.n, spec.nagents, spec.m
    out = np.zeros_like(om)
    out[:n] = spec.pseudogradient(om[:n])
    if m:
        lam2 = om[n:n + N * m].reshape(N, m)
        lap = spec.graph.laplacian @ lam2
        if spec.constraint.affine:
            lap = lap + spec.constraint.b
        out[n:n + N * m] = lap.ravel()
    return out


def apply_C(spec, om):
    """Coupling operator: col(grad g^T lam, -g(x) - L nu, L lam)."""
    om = as_flat(spec, om)
    n, N, m = spec.n, spec.nagents, spec.m
    out = np.zeros_like(om)
    if m == 0:
        return out
    x = om[:n]
    lam2 = om[n:n + N * m].reshape(N, m)
    nu2 = om[n + N * m:].reshape(N, m)
    lap_nu = spec.graph.laplacian @ nu2
    lap_lam = spec.graph.laplacian @ lam2
    affine = spec.constraint.affine
    for i in range(N):
        sl = spec.x_slice(i)
        out[sl] = spec.constraint.jac_t_lam(i, x[sl], lam2[i])
        g_i = spec.constraint.A[i] @ x[sl] if affine else spec.constraint.value(i, x[sl])
        out[spec.lam_slice(i)] = -g_i - lap_nu[i]
    out[n + N * m:] = lap_lam.ravel()
    return out


def resolvent_A(spec, steps, v):
    """Backward step: per-agent prox on x, positive part on lambda, id on nu."""
    v = as_flat(spec, v)
    out = v.copy()
    for i in range(spec.nagents):
        sl = spec.x_slice(i)
        out[sl] = spec.prox(i, v[sl], float(steps.rho[i]))
    n, N, m = spec.n, spec.nagents, spec.m
    if m:
        out[n:n + N * m] = np.maximum(v[n:n + N * m], 0.0)
    return out


def t_fbf(spec, steps, om):
    """One forward-backward-forward application: (T(om), om_tilde)."""
    _check_fbf_steps(spec, steps)
    om = as_flat(spec, om)
    if spec.has_python_oracles:
        return _fbf_sweep_py(spec, steps, om)
    return kernels.fbf_sweep(spec.plan(), steps.rho, steps.tau, steps.sig, om)


def t_pfb(spec, steps, om):
    """One preconditioned forward-backward application T(om)."""
    _check_pfb_steps(spec, steps)
    om = as_flat(spec, om)
    if spec.has_python_oracles:
        return _pfb_sweep_py(spec, steps, om)
    return kernels.pfb_sweep(spec.plan(), steps.rho, steps.tau, steps.sig, om)


class FixedPointOperator:
    """Common interface over the two splittings used by the outer solvers."""

    def __init__(self, spec, steps):
        self.spec = spec
        self.steps = steps
        self._wdiag = steps.psi_diag(spec)

    def norm(self, v):
        v = np.asarray(v, dtype=float)
        return float(np.sqrt(np.dot(self._wdiag * v, v)))

    def residual(self, om):
        om = as_flat(self.spec, om)
        return self.norm(self.apply(om) - om)

    def picard(self, om, max_iter, tol=0.0):
        """Banach-Picard run; returns (point, residual, iterations)."""
        om = as_flat(self.spec, om).copy()
        if not self.spec.has_python_oracles:
            fn = kernels.picard_fbf if self.kind == "fbf" else kernels.picard_pfb
            return fn(self.spec.plan(), self.steps.rho, self.steps.tau,
                      self.steps.sig, self._wdiag, om, int(max_iter), float(tol))
        res = np.inf
        it = 0
        for it in range(1, int(max_iter) + 1):
            out = self.apply(om)
            res = self.norm(out - om)
            om = out
            if res <= tol:
                break
        return om, res, it


class FBFOperator(FixedPointOperator):
    kind = "fbf"

    def __init__(self, spec, steps):
        _check_fbf_steps(spec, steps)
        super().__init__(spec, steps)

    def apply(self, om):
        return t_fbf(self.spec, self.steps, om)[0]

    def apply_with_tilde(self, om):
        return t_fbf(self.spec, self.steps, om)


class PFBOperator(FixedPointOperator):
    kind = "pfb"

    def __init__(self, spec, steps):
        _check_pfb_steps(spec, steps)
        super().__init__(spec, steps)

    def apply(self, om):
        return t_pfb(self.spec, self.steps, om)

    def phi_norm(self, v):
        return phi_norm(self.spec, self.steps, v)


def build_operator(spec, algo="fbf", estimate=None, steps=None, delta=None):
    """Convenience constructor: estimate, step sizes, operator."""
    if steps is None:
        if algo == "fbf":
            steps = make_stepsizes(spec, estimate, mode="fbf")
        else:
            steps = make_stepsizes(spec, estimate, mode="pfb", delta=delta)
    return FBFOperator(spec, steps) if algo == "fbf" else PFBOperator(spec, steps)


def fejer_gap(spec, steps, om, om_star):
    """Distance decrease terms of one FBF step in the step metric.

    Returns a dict with ||om - om*||, ||T(om) - om*||, ||om_tilde - om|| (all
    Psi-norms) and the modulus kappa = L_B / mu_min(Psi).
    """
    out, tilde = t_fbf(spec, steps, om)
    w = steps.psi_diag(spec)

    def wn(v):
        return float(np.sqrt(np.dot(w * v, v)))

    kappa = (steps.l_b or 0.0) * steps.max_step()
    return {
        "before": wn(as_flat(spec, om) - om_star),
        "after": wn(out - om_star),
        "tilde_step": wn(tilde - as_flat(spec, om)),
        "kappa": kappa,
    }
