"""Tracking of time-varying optimal equilibria via the restarted outer loop.

Each time step runs K constant-step gradient-perturbed operator iterations,
warm-started from the previous decision.  The module also evaluates the
contraction factor and the asymptotic tracking-error bound so runs can be
compared against the theory.
"""

import copy
import hashlib
from dataclasses import dataclass, field

import numpy as np

from .errors import (
    AlphaTooLarge,
    BetaOutOfRange,
    InstanceValidationError,
    OracleUnavailable,
    ValidationError,
)
from .game import GameSpec, as_flat, load_game
from .operators import build_operator, estimate_lipschitz, make_stepsizes


# ---------------------------------------------------------------------------
# closed-form quantities
# ---------------------------------------------------------------------------

def tau_beta(beta, sigma, L_phi):
    """Contraction modulus 1 - sqrt(1 - beta*(2*sigma - beta*L_phi^2)).

    Evaluated in the cancellation-free form
    beta*(2*sigma - beta*L_phi^2) / (1 + sqrt(1 - ...)).
    """
    if sigma <= 0 or L_phi <= 0:
        raise BetaOutOfRange("tau(beta) needs sigma > 0 and L_phi > 0")
    if not (0.0 < beta < 2.0 * sigma / L_phi ** 2):
        raise BetaOutOfRange(
            f"beta={beta} outside (0, {2.0 * sigma / L_phi ** 2})"
        )
    q = beta * (2.0 * sigma - beta * L_phi ** 2)
    root = np.sqrt(max(1.0 - q, 0.0))
    tau = q / (1.0 + root)
    assert 0.0 < tau <= 1.0
    return float(tau)


def lemma_gamma(beta, sigma, L_phi, U, xi):
    """Additive per-step error (beta/tau(beta)) * U * (6*xi + 11*beta*U)."""
    tau = tau_beta(beta, sigma, L_phi)
    return float(beta / tau * U * (6.0 * xi + 11.0 * beta * U))


def xi_identity_shrinkage(beta, U, max_dist, K):
    """Smallest xi satisfying the shrinkage condition when D(r) = r.

    For projection-type operators the shrinkage function is the identity, so
    the condition D(xi) >= max(2*beta*U, 2*dist/(K-1)) pins xi directly.
    """
    if K < 2:
        raise ValidationError("need K >= 2 to satisfy the shrinkage condition")
    return float(max(2.0 * beta * U, 2.0 * max_dist / (K - 1)))


def tracking_bound(gamma, delta1, alpha, *, beta=None, sigma=None, L_phi=None,
                   U=None, xi=None):
    """Asymptotic bound (gamma + delta1^2) / (1/2 - alpha) on the squared error.

    ``gamma`` may be None, in which case it is computed from the additive-
    error formula with the supplied (beta, sigma, L_phi, U, xi).
    """
    if gamma is None:
        if None in (beta, sigma, L_phi, U, xi):
            raise ValidationError("gamma is None: need beta, sigma, L_phi, U, xi")
        gamma = lemma_gamma(beta, sigma, L_phi, U, xi)
    if alpha >= 0.5:
        raise AlphaTooLarge(f"alpha={alpha} >= 1/2; increase K")
    return float((gamma + delta1 ** 2) / (0.5 - alpha))


# ---------------------------------------------------------------------------
# game sequences
# ---------------------------------------------------------------------------

def json_merge_patch(target, patch):
    """RFC 7386 merge patch (None removes a key, arrays replace wholesale)."""
    if not isinstance(patch, dict):
        return copy.deepcopy(patch)
    out = dict(target) if isinstance(target, dict) else {}
    for key, val in patch.items():
        if val is None:
            out.pop(key, None)
        else:
            out[key] = json_merge_patch(out.get(key), val)
    return out


class GameSequence:
    """A finite sequence of validated game instances.

    Three construction modes: an explicit instance list, a base document plus
    per-step merge patches, or a state-dependent ``builder(t, context)``.
    Pre-enumerable sequences form a finite operator family, for which uniform
    quasi-shrinking holds by construction; builder sequences are flagged
    ``assumption unchecked``.
    """

    def __init__(self, length, instances=None, base=None, patches=None,
                 builder=None, delta1=None, delta2=None, name="sequence"):
        self.length = int(length)
        if self.length < 1:
            raise ValidationError("sequence needs at least one step")
        self.name = name
        self.delta1 = delta1
        self.delta2 = delta2
        self._instances = list(instances) if instances is not None else None
        self._base = base
        self._patches = patches
        self._builder = builder
        self._cache = {}
        modes = sum(x is not None for x in (instances, base, builder))
        if modes != 1:
            raise ValidationError("pass exactly one of instances / base / builder")
        if instances is not None and len(self._instances) != self.length:
            raise ValidationError("instance count != length")
        self.uniform_quasi_shrinking = (
            "by construction (finite operator family)"
            if builder is None else "assumption unchecked"
        )

    def instance(self, t, context=None):
        """Game at 1-based step t (validated)."""
        if not (1 <= t <= self.length):
            raise ValidationError(f"t={t} outside 1..{self.length}")
        if self._instances is not None:
            return self._instances[t - 1]
        if self._builder is not None:
            try:
                return self._builder(t, context)
            except ValidationError as exc:
                raise InstanceValidationError(t, exc) from exc
        if t not in self._cache:
            doc = self._base
            if self._patches is not None and t - 1 < len(self._patches):
                doc = json_merge_patch(self._base, self._patches[t - 1])
            try:
                self._cache[t] = load_game(doc, name=f"{self.name}[t={t}]")
            except ValidationError as exc:
                raise InstanceValidationError(t, exc) from exc
        return self._cache[t]

    @property
    def state_dependent(self):
        return self._builder is not None

    def sigma_min(self):
        if self.state_dependent:
            return None
        vals = [self.instance(t).selection.sigma for t in range(1, self.length + 1)]
        return float(min(vals))

    def l_phi_max(self):
        if self.state_dependent:
            return None
        return float(max(self.instance(t).selection.L for t in range(1, self.length + 1)))


def load_scenario(path_or_dict, name=None):
    """Scenario document: {"base": <game>, "timeline": [{"t", "patch"}...]}."""
    if isinstance(path_or_dict, dict):
        doc = path_or_dict
    else:
        import json as _json

        with open(path_or_dict) as f:
            doc = _json.load(f)
    base = doc["base"]
    timeline = sorted(doc.get("timeline", []), key=lambda e: e["t"])
    length = doc.get("length", max((e["t"] for e in timeline), default=1))
    patches = [{} for _ in range(length)]
    for entry in timeline:
        patches[entry["t"] - 1] = entry.get("patch", {})
    return GameSequence(
        length, base=base, patches=patches,
        delta1=doc.get("delta1"), delta2=doc.get("delta2"),
        name=name or doc.get("name", "scenario"),
    )


# ---------------------------------------------------------------------------
# the tracker
# ---------------------------------------------------------------------------

@dataclass
class TrackingReport:
    beta: float
    K: int
    sigma: float | None
    L_phi: float | None
    tau: float | None
    alpha: float | None
    t: list = field(default_factory=list)
    err_pre: list = field(default_factory=list)      # ||om_t - om*_t||
    err_post: list = field(default_factory=list)     # ||om_{t+1} - om*_t||
    residual: list = field(default_factory=list)
    phi: list = field(default_factory=list)
    state_norm: list = field(default_factory=list)
    U_measured: float = 0.0
    gamma: float | None = None
    delta1: float | None = None
    bound_sq: float | None = None
    limsup_sq: float | None = None
    uniform_quasi_shrinking: str = ""
    warnings: list = field(default_factory=list)

    def finalize(self, delta1=None, shrinkage="identity"):
        """Fill the empirical limsup and, when possible, the theory bound."""
        if self.err_pre and self.err_pre[0] is not None:
            tail = max(1, len(self.err_pre) // 4)
            errs = np.array(self.err_pre[-tail:], dtype=float)
            self.limsup_sq = float(np.max(errs ** 2))
        if delta1 is not None:
            self.delta1 = float(delta1)
        ready = (
            self.alpha is not None and self.delta1 is not None
            and self.err_pre and self.err_pre[0] is not None
            and shrinkage == "identity"
        )
        if not ready:
            return self
        if self.alpha >= 0.5:
            self.warnings.append("alpha >= 1/2; bound omitted")
            return self
        max_dist = max(self.err_pre)
        xi = xi_identity_shrinkage(self.beta, self.U_measured, max_dist, self.K)
        self.gamma = lemma_gamma(self.beta, self.sigma, self.L_phi, self.U_measured, xi)
        self.bound_sq = tracking_bound(self.gamma, self.delta1, self.alpha)
        return self

    def to_csv(self, path, seed=None):
        bound = np.sqrt(self.bound_sq) if self.bound_sq is not None else float("nan")
        with open(path, "w") as f:
            if seed is not None:
                f.write(f"# seed={seed}\n")
            f.write("t,err_vs_oracle,residual,phi,bound\n")
            for j, t in enumerate(self.t):
                err = self.err_pre[j] if self.err_pre[j] is not None else float("nan")
                f.write("%d,%.17g,%.17g,%.17g,%.17g\n"
                        % (t, err, self.residual[j], self.phi[j], bound))

    def as_dict(self):
        return {
            "beta": self.beta, "K": self.K, "sigma": self.sigma,
            "L_phi": self.L_phi, "tau": self.tau, "alpha": self.alpha,
            "U_measured": self.U_measured, "gamma": self.gamma,
            "delta1": self.delta1, "bound_sq": self.bound_sq,
            "limsup_sq": self.limsup_sq,
            "uniform_quasi_shrinking": self.uniform_quasi_shrinking,
            "warnings": list(self.warnings),
            "avg_residual": float(np.mean(self.residual)) if self.residual else None,
            "avg_phi": float(np.mean(self.phi)) if self.phi else None,
        }


def _structure_key(spec):
    h = hashlib.md5()
    h.update(np.asarray(spec.dims).tobytes())
    if isinstance(spec.cost, object) and hasattr(spec.cost, "matrix"):
        h.update(spec.cost.matrix.data.tobytes())
        h.update(spec.cost.matrix.indices.tobytes())
    if spec.m:
        for A in spec.constraint.A:
            h.update(A.data.tobytes())
            h.update(A.indices.tobytes())
        for D in spec.constraint.D:
            h.update(D.data.tobytes())
    h.update(np.asarray(spec.graph.laplacian).tobytes())
    return h.hexdigest()


def restarted_hsdm(seq, beta, K, om1, algo="fbf", oracle=None, seed=None):
    """Track the optimal-selection trajectory of a game sequence.

    Runs exactly K inner iterations y <- T_t(y) - beta * grad phi_t(T_t(y))
    per time step from the warm start, then hands the result to the next
    step.  ``oracle``, when given, maps t to the exact optimal selection and
    enables the error columns and the theoretical bound.
    """
    if int(K) != K or K < 1:
        raise ValidationError("K must be an integer >= 1")
    K = int(K)
    sigma = seq.sigma_min()
    L_phi = seq.l_phi_max()
    tau = alpha = None
    if sigma is not None:
        if sigma <= 0:
            raise BetaOutOfRange("tracking needs strongly convex selections (sigma > 0)")
        tau = tau_beta(beta, sigma, L_phi)
        alpha = float((1.0 - tau) ** K)

    report = TrackingReport(beta=float(beta), K=K, sigma=sigma, L_phi=L_phi,
                            tau=tau, alpha=alpha,
                            uniform_quasi_shrinking=seq.uniform_quasi_shrinking)
    if alpha is not None and alpha >= 0.5:
        report.warnings.append("alpha >= 1/2; bound omitted")

    states = []
    om = None
    steps_cache = {}
    context = None
    for t in range(1, seq.length + 1):
        spec_t = seq.instance(t, context=context)
        if spec_t.selection.sigma <= 0:
            raise BetaOutOfRange(f"instance t={t} has sigma = 0")
        if sigma is None and beta >= 2.0 * spec_t.selection.sigma / spec_t.selection.L ** 2:
            raise BetaOutOfRange(f"beta inadmissible for instance t={t}")
        key = _structure_key(spec_t)
        if key not in steps_cache:
            if algo == "fbf":
                est = estimate_lipschitz(spec_t)
                steps_cache[key] = make_stepsizes(spec_t, est, mode="fbf")
            else:
                steps_cache[key] = make_stepsizes(spec_t, mode="pfb")
        T = build_operator(spec_t, algo=algo, steps=steps_cache[key])
        if om is None:
            om = as_flat(spec_t, om1).copy()
        om_star = as_flat(spec_t, oracle(t)) if oracle is not None else None

        err_pre = float(np.linalg.norm(om - om_star)) if om_star is not None else None
        y = om
        phi_t = spec_t.selection
        for _ in range(K):
            ty = T.apply(y)
            gy = phi_t.grad(ty)
            report.U_measured = max(report.U_measured, float(np.linalg.norm(gy)))
            y = ty - beta * gy
        om = y
        if om_star is not None:
            report.U_measured = max(
                report.U_measured, float(np.linalg.norm(phi_t.grad(om_star)))
            )
        context = {"state": om, "t": t}
        states.append(om.copy())
        report.t.append(t)
        report.err_pre.append(err_pre)
        report.err_post.append(
            float(np.linalg.norm(om - om_star)) if om_star is not None else None
        )
        report.residual.append(T.residual(om))
        report.phi.append(phi_t.value(om))
        report.state_norm.append(float(np.linalg.norm(om)))

    report.finalize(delta1=seq.delta1)
    return states, report


def measure_variability(seq, oracle, picard_iters=200000, tol=1e-12):
    """Empirical drift of the optimal selections and of the solution sets.

    delta1-hat is the largest consecutive optimal-selection displacement;
    delta2-hat approximates dist(om*_t, fix(T_{t+1})) by the displacement of
    a fixed-point run of T_{t+1} started at om*_t (exact for projections).
    """
    if oracle is None:
        raise OracleUnavailable("variability measurement needs per-step oracles")
    if seq.state_dependent:
        raise OracleUnavailable("variability of builder sequences is undefined offline")
    stars = [as_flat(seq.instance(t), oracle(t)) for t in range(1, seq.length + 1)]
    d1 = 0.0
    d2 = 0.0
    for t in range(1, seq.length):
        d1 = max(d1, float(np.linalg.norm(stars[t] - stars[t - 1])))
        spec_next = seq.instance(t + 1)
        T = build_operator(spec_next, algo="fbf")
        limit, _, _ = T.picard(stars[t - 1], picard_iters, tol)
        d2 = max(d2, float(np.linalg.norm(limit - stars[t - 1])))
    return d1, d2
