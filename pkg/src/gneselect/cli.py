"""Command-line front end: solve, track, validate, oracle, market."""

import argparse
import json
import os
import sys

import numpy as np

from . import operators as ops
from .agentnet import block_message_count
from .backend import backend_name
from .errors import GneError, ValidationError
from .game import (
    QuadraticCost,
    check_gradient,
    dual_disagreement,
    kkt_residual,
    load_game,
)
from .hsdm import BetaSchedule, StopRule, certify_selection, hsdm_solve
from .market import (
    MarketParams,
    MarketSelection,
    build_day_ahead,
    build_real_time,
    day_ahead_plan,
    flows_to_csv,
    line_flows,
    load_reference_network,
    selection_flow_energy,
    BusNetwork,
)
from .online import load_scenario, restarted_hsdm, tau_beta
from .oracles import oracle_projection_game, oracle_unique_vgne


def _write_json(path, payload):
    with open(path, "w") as f:
        json.dump(payload, f, indent=1, sort_keys=True)
        f.write("\n")


def _fail(out_dir, exc, code=1):
    payload = {"error": type(exc).__name__, "message": str(exc)}
    if isinstance(exc, ValidationError) and exc.evidence is not None:
        payload["evidence"] = repr(exc.evidence)
    sys.stderr.write(json.dumps(payload) + "\n")
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
        _write_json(os.path.join(out_dir, "error.json"), payload)
    return code


def _load_config(args):
    cfg = {}
    if args.config:
        with open(args.config) as f:
            cfg = json.load(f)
    merged = dict(cfg)
    for key, val in vars(args).items():
        if val is not None and key not in ("config", "func"):
            merged[key] = val
    return merged


def _auto_oracle(spec):
    """Reference solution when the game sits in an oracle family."""
    try:
        if isinstance(spec.cost, QuadraticCost) and spec.cost.matrix.nnz == 0 \
                and not np.any(spec.cost.lin):
            if spec.n <= 8 and (spec.m == 0 or spec.constraint.affine):
                ref = np.zeros(spec.n)
                w = np.ones(spec.n)
                sel = spec.selection
                if hasattr(sel, "diag_terms"):
                    for t in sel.diag_terms:
                        mask = t.idx < spec.n
                        ref[t.idx[mask]] = t.ref[mask]
                        w[t.idx[mask]] = np.maximum(t.w[mask], 1e-12)
                return oracle_projection_game(spec, ref, w)
        if isinstance(spec.cost, QuadraticCost) and spec.n <= 60 \
                and (spec.m == 0 or spec.constraint.affine):
            if spec.cost.min_symmetric_eig() > 1e-8:
                return oracle_unique_vgne(spec)
    except GneError:
        return None
    return None


# ---------------------------------------------------------------------------
# solve
# ---------------------------------------------------------------------------

def cmd_solve(args):
    cfg = _load_config(args)
    out_dir = cfg.get("out", "gneselect-out")
    try:
        spec = load_game(cfg["spec"])
        algo = cfg.get("algo", "fbf")
        estimate = ops.estimate_lipschitz(spec, seed=cfg.get("seed", 0))
        if cfg.get("step_override"):
            val = float(cfg["step_override"])
            n = spec.nagents
            steps = ops.StepSizes(np.full(n, val), np.full(n, val), np.full(n, val),
                                  mode=algo, l_b=estimate.L_B)
        elif algo == "fbf":
            steps = ops.make_stepsizes(spec, estimate, mode="fbf")
        else:
            steps = ops.make_stepsizes(spec, mode="pfb")
        T = ops.build_operator(spec, algo=algo, steps=steps)
        T.estimate = estimate
        beta0 = cfg.get("beta0")
        if beta0 is None:
            beta0 = 1.0 / spec.selection.L
        if beta0 == 0.0:
            schedule = BetaSchedule("constant", 0.0)
        else:
            schedule = BetaSchedule("power", float(beta0), float(cfg.get("p", 0.51)))
        tol = float(cfg.get("tol", 1e-6))
        stop = StopRule(max_iter=int(cfg.get("max_iter", 10000)),
                        residual_tol=tol, phi_stall_tol=1e-12)
        om0 = spec.default_start()
        om, trace = hsdm_solve(T, spec.selection, om0, schedule, stop)
    except GneError as exc:
        return _fail(out_dir, exc)

    os.makedirs(out_dir, exist_ok=True)
    seed = int(cfg.get("seed", 0))
    timing = "real" if cfg.get("wall_clock") else "zero"
    trace.to_csv(os.path.join(out_dir, "trace.csv"), seed=seed, timing=timing)
    lam_bar = (
        om[spec.n:spec.n + spec.nagents * spec.m]
        .reshape(spec.nagents, spec.m).mean(axis=0)
        if spec.m else np.zeros(0)
    )
    final = {
        "omega": om.tolist(),
        "phi": spec.selection.value(om),
        "kkt_residual": kkt_residual(spec, om[:spec.n], np.maximum(lam_bar, 0.0)),
        "dual_disagreement": dual_disagreement(spec, om),
        "residual": trace.rows[-1][1],
        "iterations": len(trace),
        "seed": seed,
        "backend": backend_name(),
    }
    _write_json(os.path.join(out_dir, "final_state.json"), final)
    oracle = _auto_oracle(spec)
    if oracle is not None:
        report = certify_selection(spec, om, oracle.omega, tol=cfg.get("cert_tol", 1e-4))
        report["oracle_method"] = oracle.method
        _write_json(os.path.join(out_dir, "certification.json"), report)
    converged = trace.rows[-1][1] <= tol
    return 0 if converged else 2


# ---------------------------------------------------------------------------
# track
# ---------------------------------------------------------------------------

def cmd_track(args):
    cfg = _load_config(args)
    out_dir = cfg.get("out", "gneselect-out")
    try:
        seq = load_scenario(cfg["scenario"])
        beta = float(cfg.get("beta", 1e-3))
        K = int(cfg.get("K", 10))
        first = seq.instance(1)
        om1 = first.default_start()

        def oracle(t):
            sol = _auto_oracle(seq.instance(t))
            return None if sol is None else sol.omega

        use_oracle = oracle(1) is not None
        states, report = restarted_hsdm(
            seq, beta, K, om1, algo=cfg.get("algo", "fbf"),
            oracle=oracle if use_oracle else None,
        )
    except GneError as exc:
        return _fail(out_dir, exc)
    os.makedirs(out_dir, exist_ok=True)
    seed = int(cfg.get("seed", 0))
    report.to_csv(os.path.join(out_dir, "tracking.csv"), seed=seed)
    _write_json(os.path.join(out_dir, "tracking_report.json"), report.as_dict())
    return 0


# ---------------------------------------------------------------------------
# validate
# ---------------------------------------------------------------------------

def cmd_validate(args):
    cfg = _load_config(args)
    out_dir = cfg.get("out")
    report = {"spec": cfg["spec"], "backend": backend_name(), "checks": {}}
    checks = report["checks"]
    try:
        spec = load_game(cfg["spec"])
        loaded = True
    except ValidationError as exc:
        checks["load"] = {"pass": False, "assumption": exc.assumption,
                          "evidence": repr(exc.evidence)}
        loaded = False
    except GneError as exc:
        return _fail(out_dir, exc)
    if loaded:
        checks["load"] = {"pass": True}
        checks["structure"] = spec.report.as_dict()
        rng_seed = int(cfg.get("seed", 0))

        worstpair = _monotonicity_probe(spec, rng_seed)
        checks["monotonicity_probe"] = {
            "pass": worstpair >= -1e-10, "min_normalized_inner_product": worstpair,
        }
        eta = spec.cocoercivity()
        checks["cocoercivity"] = {"eta": eta if eta is None else float(eta)}
        est = ops.estimate_lipschitz(spec, seed=rng_seed)
        checks["lipschitz"] = {"L_F": est.L_F, "L_B": est.L_B, "method": est.method}
        steps = ops.make_stepsizes(spec, est, mode="fbf")
        checks["stepsizes_fbf"] = {
            "max_step": steps.max_step(),
            "bound": 1.0 / est.L_B if est.L_B > 0 else None,
            "margin": (1.0 / est.L_B - steps.max_step()) if est.L_B > 0 else None,
            "psi_mu_min": steps.mu_min_psi(),
        }
        if spec.m == 0 or spec.constraint.affine:
            try:
                psteps = ops.make_stepsizes(spec, mode="pfb")
                checks["stepsizes_pfb"] = {
                    "delta": psteps.delta,
                    "rho_max": float(psteps.rho.max()),
                    "tau_max": float(psteps.tau.max()),
                    "sig_max": float(psteps.sig.max()),
                }
            except GneError as exc:
                checks["stepsizes_pfb"] = {"error": str(exc)}
        ok, worst = check_gradient(
            spec.selection.value, spec.selection.grad, spec.n_omega,
            probes=100, seed=rng_seed,
        )
        checks["selection_gradient"] = {"pass": ok, "worst_rel_err": worst}
        checks["selection_moduli"] = _moduli_probe(spec, rng_seed)
        checks["prox_nonexpansive"] = _prox_probe(spec, rng_seed)
    if cfg.get("p") is not None:
        try:
            BetaSchedule("power", 1.0, float(cfg["p"]))
            checks["schedule"] = {"pass": True, "p": float(cfg["p"])}
        except ValidationError:
            checks["schedule"] = {
                "pass": False, "p": float(cfg["p"]),
                "reason": "power exponent outside (1/2, 1]",
            }
    report["pass"] = all(
        c.get("pass", True) for c in checks.values() if isinstance(c, dict)
    )
    text = json.dumps(report, indent=1, sort_keys=True, default=float)
    sys.stdout.write(text + "\n")
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
        with open(os.path.join(out_dir, "validate.json"), "w") as f:
            f.write(text + "\n")
    return 0


def _monotonicity_probe(spec, seed, pairs=1000):
    rng = np.random.default_rng(seed)
    worst = np.inf
    for _ in range(pairs):
        u = spec.random_x(rng)
        v = spec.random_x(rng)
        d = u - v
        denom = float(np.dot(d, d))
        if denom < 1e-300:
            continue
        ip = float(np.dot(spec.pseudogradient(u) - spec.pseudogradient(v), d))
        worst = min(worst, ip / denom)
    return worst


def _moduli_probe(spec, seed, pairs=200):
    sel = spec.selection
    rng = np.random.default_rng(seed + 1)
    worst_sigma = np.inf
    worst_lip = 0.0
    for _ in range(pairs):
        u = rng.standard_normal(spec.n_omega)
        v = rng.standard_normal(spec.n_omega)
        d = u - v
        dn2 = float(np.dot(d, d))
        gd = sel.grad(u) - sel.grad(v)
        worst_sigma = min(worst_sigma, float(np.dot(gd, d)) / dn2)
        worst_lip = max(worst_lip, float(np.linalg.norm(gd)) / np.sqrt(dn2))
    return {
        "declared_sigma": sel.sigma, "observed_sigma_min": worst_sigma,
        "declared_L": sel.L, "observed_L_max": worst_lip,
        "pass": bool(worst_sigma >= sel.sigma - 1e-8 and worst_lip <= sel.L + 1e-8),
    }


def _prox_probe(spec, seed, pairs=100):
    rng = np.random.default_rng(seed + 2)
    worst = 0.0
    for _ in range(pairs):
        i = int(rng.integers(spec.nagents))
        u = rng.standard_normal(spec.dims[i]) * 3.0
        v = rng.standard_normal(spec.dims[i]) * 3.0
        pu = spec.prox(i, u, 0.7)
        pv = spec.prox(i, v, 0.7)
        worst = max(worst, float(np.linalg.norm(pu - pv) / max(np.linalg.norm(u - v), 1e-12)))
    return {"pass": bool(worst <= 1.0 + 1e-9), "max_ratio": worst}


# ---------------------------------------------------------------------------
# oracle
# ---------------------------------------------------------------------------

def cmd_oracle(args):
    cfg = _load_config(args)
    out_dir = cfg.get("out", "gneselect-out")
    try:
        spec = load_game(cfg["spec"])
        sol = _auto_oracle(spec)
        if sol is None:
            raise GneError("no reference family applies to this game")
    except GneError as exc:
        return _fail(out_dir, exc)
    os.makedirs(out_dir, exist_ok=True)
    _write_json(os.path.join(out_dir, "oracle.json"), sol.as_dict())
    sys.stdout.write(json.dumps({k: v for k, v in sol.as_dict().items()
                                 if k != "omega"}) + "\n")
    return 0


# ---------------------------------------------------------------------------
# market
# ---------------------------------------------------------------------------

def _load_network(cfg):
    net_path = cfg.get("network")
    return load_reference_network() if net_path in (None, "builtin") \
        else BusNetwork.from_json(net_path)


def cmd_market(args):
    cfg = _load_config(args)
    out_dir = cfg.get("out", "gneselect-out")
    seed = int(cfg.get("seed", 0))
    try:
        network = _load_network(cfg)
        mode = cfg.get("mode", "day-ahead")
        if mode == "day-ahead":
            return _market_day_ahead(cfg, network, out_dir, seed)
        if mode == "real-time":
            return _market_real_time(cfg, network, out_dir, seed)
        raise GneError(f"unknown market mode '{mode}'")
    except GneError as exc:
        return _fail(out_dir, exc)


def _market_day_ahead(cfg, network, out_dir, seed):
    H = int(cfg.get("hours", 24))
    iters = int(cfg.get("max_iter", 20000))
    spec = build_day_ahead(network, H=H)
    est = ops.estimate_lipschitz(spec, seed=seed)
    steps = ops.make_stepsizes(spec, est, mode="fbf")
    om0 = spec.default_start()
    stop = StopRule(max_iter=iters)
    beta0 = float(cfg.get("beta0", 2.0 / spec.selection.L))

    om_plain, tr_plain = hsdm_solve(ops.FBFOperator(spec, steps), spec.selection,
                                    om0, BetaSchedule("constant", 0.0), stop)
    om_sel, tr_sel = hsdm_solve(ops.FBFOperator(spec, steps), spec.selection,
                                om0, BetaSchedule("power", beta0, 0.51), stop)
    os.makedirs(out_dir, exist_ok=True)
    timing = "real" if cfg.get("wall_clock") else "zero"
    tr_plain.to_csv(os.path.join(out_dir, "trace_plain.csv"), seed=seed, timing=timing)
    tr_sel.to_csv(os.path.join(out_dir, "trace_selected.csv"), seed=seed, timing=timing)
    flows_to_csv(os.path.join(out_dir, "line_flows_plain.csv"), network,
                 line_flows(spec, om_plain), seed=seed)
    flows_to_csv(os.path.join(out_dir, "line_flows.csv"), network,
                 line_flows(spec, om_sel), seed=seed)
    e_plain = selection_flow_energy(spec, om_plain)
    e_sel = selection_flow_energy(spec, om_sel)
    summary = {
        "hours": H, "iterations": iters, "beta0": beta0,
        "flow_energy_plain": e_plain, "flow_energy_selected": e_sel,
        "improvement_percent": 100.0 * (e_plain - e_sel) / max(e_plain, 1e-12),
        "phi_plain": spec.selection.value(om_plain),
        "phi_selected": spec.selection.value(om_sel),
        "messages_per_iteration": block_message_count(spec, "fbf"),
        "seed": seed, "backend": backend_name(),
    }
    _write_json(os.path.join(out_dir, "day_ahead_summary.json"), summary)
    plan = day_ahead_plan(spec, om_sel)
    _write_json(os.path.join(out_dir, "day_ahead_plan.json"),
                {"p_st": plan["p_st"].tolist(), "charge0": plan["charge0"].tolist(),
                 "H": plan["H"]})
    sys.stdout.write(json.dumps(summary) + "\n")
    return 0


def _market_real_time(cfg, network, out_dir, seed):
    beta = float(cfg.get("beta", 5e-4))
    K = int(cfg.get("K", 50))
    steps_count = int(cfg.get("steps", 12))
    H = int(cfg.get("hours", 8))
    plan_path = cfg.get("plan")
    if plan_path:
        with open(plan_path) as f:
            raw = json.load(f)
        plan = {"p_st": np.asarray(raw["p_st"]), "charge0": np.asarray(raw["charge0"]),
                "H": raw["H"]}
    else:
        da_spec = build_day_ahead(network, H=24)
        est = ops.estimate_lipschitz(da_spec, seed=seed)
        da_steps = ops.make_stepsizes(da_spec, est, mode="fbf")
        om_da, _ = hsdm_solve(
            ops.FBFOperator(da_spec, da_steps), da_spec.selection,
            da_spec.default_start(),
            BetaSchedule("power", 2.0 / da_spec.selection.L, 0.51),
            StopRule(max_iter=int(cfg.get("plan_iters", 4000))),
        )
        plan = day_ahead_plan(da_spec, om_da)
    seq, charge_targets = build_real_time(network, plan, H=H, steps=steps_count)
    first = seq.instance(1)
    states, report = restarted_hsdm(seq, beta, K, first.default_start())
    os.makedirs(out_dir, exist_ok=True)
    report.to_csv(os.path.join(out_dir, "tracking.csv"), seed=seed)
    payload = report.as_dict()
    peak_line = network.line_index(632, 671) if 632 in network.index else 0
    peak_flows = []
    for t, om in enumerate(states, start=1):
        spec_t = seq.instance(t)
        fl = line_flows(spec_t, om)
        peak_flows.append(float(np.max(np.abs(fl[peak_line]))))
    payload["peak_line_flows"] = peak_flows
    payload["avg_peak_line_flow"] = float(np.mean(peak_flows))
    payload["steps"] = steps_count
    payload["seed"] = seed
    _write_json(os.path.join(out_dir, "real_time_report.json"), payload)
    sys.stdout.write(json.dumps({k: payload[k] for k in
                                 ("avg_residual", "avg_phi", "avg_peak_line_flow")})
                     + "\n")
    return 0


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------

def build_parser():
    parser = argparse.ArgumentParser(
        prog="gneselect",
        description="Optimal equilibrium selection and tracking in monotone games",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="JSON config; flags override its keys")
        p.add_argument("--out", help="output directory")
        p.add_argument("--seed", type=int, help="seed for all randomized probes")

    p = sub.add_parser("solve", help="compute the optimal equilibrium of a game")
    p.add_argument("--spec", required=True)
    p.add_argument("--algo", choices=("fbf", "pfb"))
    p.add_argument("--beta0", type=float)
    p.add_argument("--p", type=float)
    p.add_argument("--max-iter", dest="max_iter", type=int)
    p.add_argument("--tol", type=float)
    p.add_argument("--step-override", dest="step_override", type=float,
                   help="force all operator step sizes (admissibility still checked)")
    p.add_argument("--wall-clock", dest="wall_clock", action="store_true",
                   default=None, help="record real per-iteration wall time")
    common(p)
    p.set_defaults(func=cmd_solve)

    p = sub.add_parser("track", help="track a time-varying optimal equilibrium")
    p.add_argument("--scenario", required=True)
    p.add_argument("--beta", type=float)
    p.add_argument("--K", type=int)
    p.add_argument("--algo", choices=("fbf", "pfb"))
    common(p)
    p.set_defaults(func=cmd_track)

    p = sub.add_parser("validate", help="check the structural assumptions of a game")
    p.add_argument("--spec", required=True)
    p.add_argument("--p", type=float, help="also gate this outer-schedule exponent")
    common(p)
    p.set_defaults(func=cmd_validate)

    p = sub.add_parser("oracle", help="reference solution for supported families")
    p.add_argument("--spec", required=True)
    common(p)
    p.set_defaults(func=cmd_oracle)

    p = sub.add_parser("market", help="peer-to-peer market case study")
    p.add_argument("--mode", choices=("day-ahead", "real-time"))
    p.add_argument("--network", help="network JSON path or 'builtin'")
    p.add_argument("--hours", type=int)
    p.add_argument("--max-iter", dest="max_iter", type=int)
    p.add_argument("--beta0", type=float)
    p.add_argument("--beta", type=float)
    p.add_argument("--K", type=int)
    p.add_argument("--steps", type=int)
    p.add_argument("--plan", help="day-ahead plan JSON (real-time mode)")
    p.add_argument("--plan-iters", dest="plan_iters", type=int)
    p.add_argument("--wall-clock", dest="wall_clock", action="store_true", default=None)
    common(p)
    p.set_defaults(func=cmd_market)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
