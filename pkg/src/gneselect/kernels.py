"""Per-agent numeric kernels.

Everything the fixed-point operators do per agent lives here: sparse
gradient blocks, constraint evaluation, Laplacian neighbor sums, proximal
steps.  The monolithic operator sweeps and the message-passing runtime call
the *same* functions, so their arithmetic is bit-identical within a backend.

Two primitives (CSR row-range products) have separate numba / numpy
implementations; all composite kernels are single-source and compiled with
``maybe_njit``.
"""

from collections import namedtuple

import numpy as np

from .backend import USE_NUMBA, maybe_njit

# Flat-array view of a game used by compiled kernels.  Cost gradient rows are
# a CSR over the n primal rows (global columns); the coupling constraints are
# stacked agent-major as N*m CSR rows with agent-local columns (linear part in
# a_*, diagonal-quadratic part in d_*).  Local sets are boxes plus optional
# per-agent equality rows (eq_idx holds global coordinate indices, eq_card the
# uniform row cardinality per agent).
GamePlan = namedtuple(
    "GamePlan",
    [
        "n", "m", "nagents", "nxoff",
        "f_indptr", "f_idx", "f_dat", "f_row", "mvec",
        "a_indptr", "a_idx", "a_dat", "a_row",
        "d_indptr", "d_idx", "d_dat", "d_row",
        "bmat",
        "lo", "hi", "l1w",
        "eq_ptr", "eq_card", "eq_off", "eq_idx", "eq_rhs",
        "nbr_ptr", "nbr_idx",
    ],
)


if USE_NUMBA:

    @maybe_njit
    def csr_range_matvec(indptr, idx, dat, row, x, rlo, rhi):
        out = np.zeros(rhi - rlo)
        for r in range(rlo, rhi):
            s = 0.0
            for p in range(indptr[r], indptr[r + 1]):
                s += dat[p] * x[idx[p]]
            out[r - rlo] = s
        return out

    @maybe_njit
    def csr_range_rmatvec(indptr, idx, dat, row, v, rlo, rhi, ncols):
        out = np.zeros(ncols)
        for r in range(rlo, rhi):
            vr = v[r - rlo]
            for p in range(indptr[r], indptr[r + 1]):
                out[idx[p]] += dat[p] * vr
        return out

else:

    def csr_range_matvec(indptr, idx, dat, row, x, rlo, rhi):
        p0, p1 = indptr[rlo], indptr[rhi]
        if p0 == p1:
            return np.zeros(rhi - rlo)
        return np.bincount(
            row[p0:p1] - rlo, weights=dat[p0:p1] * x[idx[p0:p1]], minlength=rhi - rlo
        )

    def csr_range_rmatvec(indptr, idx, dat, row, v, rlo, rhi, ncols):
        p0, p1 = indptr[rlo], indptr[rhi]
        if p0 == p1:
            return np.zeros(ncols)
        return np.bincount(
            idx[p0:p1], weights=dat[p0:p1] * v[row[p0:p1] - rlo], minlength=ncols
        )


@maybe_njit
def neighbor_consensus(v_own, v_nbrs):
    """deg * v_own - sum_j v_nbrs[j], rows subtracted in the given order."""
    out = v_own * float(v_nbrs.shape[0])
    for t in range(v_nbrs.shape[0]):
        out = out - v_nbrs[t]
    return out


if USE_NUMBA:

    @maybe_njit
    def neighbor_consensus_rows(v2d, nbr_idx, p0, p1, i):
        """Copy-free twin of ``neighbor_consensus`` over rows of ``v2d``.

        Subtracts neighbor rows in the same order, so results are
        bit-identical with the stacked variant.
        """
        m = v2d.shape[1]
        out = np.empty(m)
        deg = float(p1 - p0)
        for c in range(m):
            out[c] = v2d[i, c] * deg
        for t in range(p0, p1):
            j = nbr_idx[t]
            for c in range(m):
                out[c] = out[c] - v2d[j, c]
        return out

else:

    def neighbor_consensus_rows(v2d, nbr_idx, p0, p1, i):
        out = v2d[i] * float(p1 - p0)
        for t in range(p0, p1):
            out = out - v2d[nbr_idx[t]]
        return out


@maybe_njit
def prox_box_soft(v, lo, hi, thresh):
    """Soft-threshold by ``thresh`` then clip to [lo, hi] (componentwise)."""
    z = np.sign(v) * np.maximum(np.abs(v) - thresh, 0.0)
    return np.minimum(np.maximum(z, lo), hi)


if USE_NUMBA:

    @maybe_njit
    def project_eq_rows(out, v, lo, hi, eq_idx, eq_rhs, card):
        nrows = eq_rhs.shape[0]
        for e in range(nrows):
            base = e * card
            mlo = 1e300
            mhi = -1e300
            for c in range(card):
                k = eq_idx[base + c]
                a = v[k] - hi[k]
                b = v[k] - lo[k]
                if a < mlo:
                    mlo = a
                if b > mhi:
                    mhi = b
            for _ in range(100):
                mu = 0.5 * (mlo + mhi)
                s = 0.0
                for c in range(card):
                    k = eq_idx[base + c]
                    s += min(max(v[k] - mu, lo[k]), hi[k])
                if s > eq_rhs[e]:
                    mlo = mu
                else:
                    mhi = mu
            mu = 0.5 * (mlo + mhi)
            for c in range(card):
                k = eq_idx[base + c]
                out[k] = min(max(v[k] - mu, lo[k]), hi[k])

else:

    def project_eq_rows(out, v, lo, hi, eq_idx, eq_rhs, card):
        nrows = eq_rhs.shape[0]
        if nrows == 0:
            return
        kk = eq_idx.reshape(nrows, card)
        vv, ll, hh = v[kk], lo[kk], hi[kk]
        mlo = (vv - hh).min(axis=1)
        mhi = (vv - ll).max(axis=1)
        for _ in range(100):
            mu = 0.5 * (mlo + mhi)
            s = np.clip(vv - mu[:, None], ll, hh).sum(axis=1)
            goes_up = s > eq_rhs
            mlo = np.where(goes_up, mu, mlo)
            mhi = np.where(goes_up, mhi, mu)
        mu = 0.5 * (mlo + mhi)
        out[kk.ravel()] = np.clip(vv - mu[:, None], ll, hh).ravel()


@maybe_njit
def prox_agent(plan, i, v_i, step):
    """prox of step * (l1 weight + box/box-eq indicator) at v_i (agent i block)."""
    rlo, rhi = plan.nxoff[i], plan.nxoff[i + 1]
    lo = plan.lo[rlo:rhi]
    hi = plan.hi[rlo:rhi]
    out = prox_box_soft(v_i, lo, hi, step * plan.l1w[rlo:rhi])
    e0, e1 = plan.eq_ptr[i], plan.eq_ptr[i + 1]
    if e1 > e0:
        card = plan.eq_card[i]
        full = np.zeros(plan.n)
        full[rlo:rhi] = out
        vfull = np.zeros(plan.n)
        vfull[rlo:rhi] = v_i
        project_eq_rows(
            full, vfull, plan.lo, plan.hi,
            plan.eq_idx[plan.eq_off[i]:plan.eq_off[i + 1]],
            plan.eq_rhs[e0:e1], card,
        )
        out = full[rlo:rhi]
    return out


@maybe_njit
def g_agent(plan, i, x_i):
    """Constraint block g_i(x_i) in R^m (linear + diagonal-quadratic - b)."""
    rlo, rhi = i * plan.m, (i + 1) * plan.m
    gv = csr_range_matvec(plan.a_indptr, plan.a_idx, plan.a_dat, plan.a_row, x_i, rlo, rhi)
    if plan.d_dat.shape[0] > 0:
        gv = gv + 0.5 * csr_range_matvec(
            plan.d_indptr, plan.d_idx, plan.d_dat, plan.d_row, x_i * x_i, rlo, rhi
        )
    return gv - plan.bmat[i]


@maybe_njit
def g_jac_t_lam(plan, i, x_i, lam_i):
    """Jacobian-transpose product grad g_i(x_i)^T lam_i in R^{n_i}."""
    rlo, rhi = i * plan.m, (i + 1) * plan.m
    ni = plan.nxoff[i + 1] - plan.nxoff[i]
    out = csr_range_rmatvec(plan.a_indptr, plan.a_idx, plan.a_dat, plan.a_row, lam_i, rlo, rhi, ni)
    if plan.d_dat.shape[0] > 0:
        out = out + x_i * csr_range_rmatvec(
            plan.d_indptr, plan.d_idx, plan.d_dat, plan.d_row, lam_i, rlo, rhi, ni
        )
    return out


@maybe_njit
def cost_grad_agent(plan, i, x_glob):
    """Pseudogradient block F_i(x) for the quadratic-coupled cost."""
    rlo, rhi = plan.nxoff[i], plan.nxoff[i + 1]
    return (
        csr_range_matvec(plan.f_indptr, plan.f_idx, plan.f_dat, plan.f_row, x_glob, rlo, rhi)
        + plan.mvec[rlo:rhi]
    )


@maybe_njit
def forward_agent(plan, i, f_i, x_i, lam_i, nu_i, lam_nbrs, nu_nbrs):
    """Forward-operator blocks of agent i at the given neighborhood state.

    Returns the (x, lambda, nu) blocks of the combined single-valued part:
    (F_i + grad g_i^T lam_i,  L lam - g_i - L nu,  L lam).
    """
    if plan.m == 0:
        z = np.zeros(0)
        return f_i, z, z
    fx = f_i + g_jac_t_lam(plan, i, x_i, lam_i)
    lap_l = neighbor_consensus(lam_i, lam_nbrs)
    lap_n = neighbor_consensus(nu_i, nu_nbrs)
    flam = lap_l - g_agent(plan, i, x_i) - lap_n
    return fx, flam, lap_l


@maybe_njit
def forward_agent_rows(plan, i, f_i, x_i, lam2, nu2):
    """Copy-free twin of ``forward_agent`` reading neighbor rows in place."""
    if plan.m == 0:
        z = np.zeros(0)
        return f_i, z, z
    fx = f_i + g_jac_t_lam(plan, i, x_i, lam2[i])
    p0, p1 = plan.nbr_ptr[i], plan.nbr_ptr[i + 1]
    lap_l = neighbor_consensus_rows(lam2, plan.nbr_idx, p0, p1, i)
    lap_n = neighbor_consensus_rows(nu2, plan.nbr_idx, p0, p1, i)
    flam = lap_l - g_agent(plan, i, x_i) - lap_n
    return fx, flam, lap_l


@maybe_njit
def fbf_half_agent(plan, i, rho_i, tau_i, sig_i, fx, flam, fnu, x_i, lam_i, nu_i):
    """Reflected half-step of agent i (prox on x, positive part on lambda)."""
    xt = prox_agent(plan, i, x_i - rho_i * fx, rho_i)
    if plan.m == 0:
        return xt, lam_i, nu_i
    lt = np.maximum(lam_i - tau_i * flam, 0.0)
    nt = nu_i - sig_i * fnu
    return xt, lt, nt


@maybe_njit
def fbf_full_agent(rho_i, tau_i, sig_i, fx, flam, fnu, f2x, f2lam, f2nu, xt, lt, nt):
    """Correction step of agent i: tilde - step * (forward(tilde) - forward(point))."""
    xo = xt - rho_i * (f2x - fx)
    lo_ = lt - tau_i * (f2lam - flam)
    no = nt - sig_i * (f2nu - fnu)
    return xo, lo_, no


@maybe_njit
def pfb_first_agent(plan, i, rho_i, sig_i, f_i, x_i, lam_i, nu_i, lam_nbrs):
    """pFB x and nu updates of agent i (affine constraints)."""
    fx = f_i + g_jac_t_lam(plan, i, x_i, lam_i)
    xo = prox_agent(plan, i, x_i - rho_i * fx, rho_i)
    no = nu_i - sig_i * neighbor_consensus(lam_i, lam_nbrs)
    return xo, no

@maybe_njit
def pfb_lam_agent(plan, i, tau_i, x_i, xo_i, lam_i, nu_i, no_i,
                  lam_nbrs, nu_nbrs, no_nbrs):
    """pFB lambda update of agent i from the reflected x and nu points."""
    gref = g_agent(plan, i, 2.0 * xo_i - x_i)
    lap_ref = 2.0 * neighbor_consensus(no_i, no_nbrs) - neighbor_consensus(nu_i, nu_nbrs)
    lap_l = neighbor_consensus(lam_i, lam_nbrs)
    return np.maximum(lam_i + tau_i * (gref + lap_ref - lap_l), 0.0)


@maybe_njit
def gather_rows(v2d, nbr_ptr, nbr_idx, i):
    """Stack the rows of ``v2d`` owned by agent i's neighbors (sorted order)."""
    return v2d[nbr_idx[nbr_ptr[i]:nbr_ptr[i + 1]]]


@maybe_njit
def split_blocks(plan, om):
    n, m, nagents = plan.n, plan.m, plan.nagents
    x = om[:n]
    lam2 = om[n:n + nagents * m].reshape(nagents, m)
    nu2 = om[n + nagents * m:].reshape(nagents, m)
    return x, lam2, nu2


@maybe_njit
def fbf_sweep(plan, rho, tau, sig, om):
    """One application of the forward-backward-forward map.

    Returns (T(om), om_tilde).  Agents are processed in index order and every
    block is produced by the same per-agent kernels the message-passing
    runtime uses, so the two evaluation paths agree bitwise.
    """
    n, m, nagents = plan.n, plan.m, plan.nagents
    x, lam2, nu2 = split_blocks(plan, om)

    fx = np.empty(n)
    flam = np.empty((nagents, m))
    fnu = np.empty((nagents, m))
    for i in range(nagents):
        rlo, rhi = plan.nxoff[i], plan.nxoff[i + 1]
        f_i = cost_grad_agent(plan, i, x)
        a, b, c = forward_agent_rows(plan, i, f_i, x[rlo:rhi], lam2, nu2)
        fx[rlo:rhi] = a
        if m > 0:
            flam[i] = b
            fnu[i] = c

    xt = np.empty(n)
    lt2 = np.empty((nagents, m))
    nt2 = np.empty((nagents, m))
    for i in range(nagents):
        rlo, rhi = plan.nxoff[i], plan.nxoff[i + 1]
        a, b, c = fbf_half_agent(
            plan, i, rho[i], tau[i], sig[i],
            fx[rlo:rhi], flam[i], fnu[i], x[rlo:rhi], lam2[i], nu2[i],
        )
        xt[rlo:rhi] = a
        if m > 0:
            lt2[i] = b
            nt2[i] = c

    out = np.empty_like(om)
    tilde = np.empty_like(om)
    tilde[:n] = xt
    tilde[n:n + nagents * m] = lt2.ravel()
    tilde[n + nagents * m:] = nt2.ravel()
    for i in range(nagents):
        rlo, rhi = plan.nxoff[i], plan.nxoff[i + 1]
        f_i = cost_grad_agent(plan, i, xt)
        f2x, f2lam, f2nu = forward_agent_rows(plan, i, f_i, xt[rlo:rhi], lt2, nt2)
        xo, lo_, no = fbf_full_agent(
            rho[i], tau[i], sig[i],
            fx[rlo:rhi], flam[i], fnu[i], f2x, f2lam, f2nu,
            xt[rlo:rhi], lt2[i], nt2[i],
        )
        out[rlo:rhi] = xo
        if m > 0:
            out[n + i * m:n + (i + 1) * m] = lo_
            out[n + (nagents + i) * m:n + (nagents + i + 1) * m] = no
    return out, tilde


@maybe_njit
def pfb_sweep(plan, rho, tau, sig, om):
    """One application of the preconditioned forward-backward map.

    Gauss-Seidel order: all x and nu blocks first, then the lambda blocks
    from the reflected points 2x+ - x and 2nu+ - nu.
    """
    n, m, nagents = plan.n, plan.m, plan.nagents
    x, lam2, nu2 = split_blocks(plan, om)

    xo = np.empty(n)
    no2 = np.empty((nagents, m))
    for i in range(nagents):
        rlo, rhi = plan.nxoff[i], plan.nxoff[i + 1]
        f_i = cost_grad_agent(plan, i, x)
        p0, p1 = plan.nbr_ptr[i], plan.nbr_ptr[i + 1]
        fx = f_i + g_jac_t_lam(plan, i, x[rlo:rhi], lam2[i]) if m > 0 else f_i
        xo[rlo:rhi] = prox_agent(plan, i, x[rlo:rhi] - rho[i] * fx, rho[i])
        if m > 0:
            no2[i] = nu2[i] - sig[i] * neighbor_consensus_rows(
                lam2, plan.nbr_idx, p0, p1, i
            )

    out = np.empty_like(om)
    out[:n] = xo
    for i in range(nagents):
        rlo, rhi = plan.nxoff[i], plan.nxoff[i + 1]
        if m > 0:
            p0, p1 = plan.nbr_ptr[i], plan.nbr_ptr[i + 1]
            gref = g_agent(plan, i, 2.0 * xo[rlo:rhi] - x[rlo:rhi])
            lap_ref = (
                2.0 * neighbor_consensus_rows(no2, plan.nbr_idx, p0, p1, i)
                - neighbor_consensus_rows(nu2, plan.nbr_idx, p0, p1, i)
            )
            lap_l = neighbor_consensus_rows(lam2, plan.nbr_idx, p0, p1, i)
            out[n + i * m:n + (i + 1) * m] = np.maximum(
                lam2[i] + tau[i] * (gref + lap_ref - lap_l), 0.0
            )
    out[n + nagents * m:] = no2.ravel()
    return out


@maybe_njit
def picard_fbf(plan, rho, tau, sig, wdiag, om, max_iter, tol):
    """Banach-Picard iteration of the FBF map; stops at residual <= tol.

    The residual is the ``wdiag``-weighted norm of the displacement
    ||T(om) - om||.  Returns the final iterate, the last residual, and the
    number of sweeps performed.
    """
    it = 0
    disp = np.inf
    for it in range(1, max_iter + 1):
        out, _ = fbf_sweep(plan, rho, tau, sig, om)
        d = out - om
        disp = np.sqrt(np.dot(wdiag * d, d))
        om = out
        if disp <= tol:
            break
    return om, disp, it


@maybe_njit
def picard_pfb(plan, rho, tau, sig, wdiag, om, max_iter, tol):
    """Banach-Picard iteration of the pFB map; see ``picard_fbf``."""
    it = 0
    disp = np.inf
    for it in range(1, max_iter + 1):
        out = pfb_sweep(plan, rho, tau, sig, om)
        d = out - om
        disp = np.sqrt(np.dot(wdiag * d, d))
        om = out
        if disp <= tol:
            break
    return om, disp, it
