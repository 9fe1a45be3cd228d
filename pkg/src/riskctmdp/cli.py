"""Command line entry point: ``riskctmdp certify|solve|simulate|verify``.

Exit status is 0 on success, 1 when a check fails and 2 for configuration
errors. Every artifact is a CSV file with floats written to 17 significant
digits.
"""

import argparse
import csv
import logging
import math
import sys
import warnings
from pathlib import Path

import numpy as np

from .config import OUTPUT_ENV, ConfigError, fixture_names, load_config
from .hjb import (
    MonotonicityError,
    PolicyField,
    ThetaGrid,
    contraction_bound,
    empirical_contraction,
    extract_policy,
    solve_hjb,
    solve_truncated,
)
from .lyapunov import check_certificate
from .model import truncate, validate_kernel
from .simulate import (
    MarkovControl,
    estimate_J,
    estimate_truncated_functional,
    simulate_batch,
)
from .verify import CheckReport, crosscheck_feynman_kac, oracle_fixed_policy, run_analytic_suite

log = logging.getLogger("riskctmdp")

EXIT_OK, EXIT_FAIL, EXIT_CONFIG = 0, 1, 2


def _fmt(value):
    if isinstance(value, (bool, np.bool_)):
        return "true" if value else "false"
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    if isinstance(value, (float, np.floating)):
        return format(float(value), ".17g")
    return str(value)


def write_csv(path, header, rows, echo=False):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        for row in rows:
            writer.writerow([_fmt(v) for v in row])
    if echo:
        sys.stdout.write(path.read_text())
    return path


def read_policy_csv(path, num_states):
    """PolicyField from a ``solve`` value CSV."""
    path = Path(path)
    if not path.is_file():
        raise ConfigError("--policy", f"file not found: {path}")
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        missing = {"theta", "state_index", "action_index"} - set(reader.fieldnames or [])
        if missing:
            raise ConfigError(str(path), f"missing columns {sorted(missing)}")
        rows = [(float(r["theta"]), int(r["state_index"]), int(r["action_index"])) for r in reader]
    thetas = sorted({r[0] for r in rows})
    index = {t: i for i, t in enumerate(thetas)}
    actions = np.full((len(thetas), num_states), -1, dtype=np.int64)
    for t, x, a in rows:
        if not 0 <= x < num_states:
            raise ConfigError(str(path), f"state_index {x} out of range for {num_states} states")
        actions[index[t], x] = a
    if np.any(actions < 0):
        raise ConfigError(str(path), "policy table does not cover every (theta, state) pair")
    return PolicyField(np.array(thetas), actions)


def _require_cert(cfg):
    if cfg.certificate is None:
        raise ConfigError("certificate", f"config {cfg.name!r} has no certificate; this subcommand needs one")
    return cfg.certificate


def cmd_certify(cfg, args):
    cert = _require_cert(cfg)
    report = check_certificate(cfg.model, cert, tol=args.tol)
    kernel = validate_kernel(cfg.model)
    out = cfg.output_dir
    write_csv(out / "certificate.csv", ["name", "value"], sorted(cert.as_dict().items(), key=lambda kv: kv[0]), echo=True)
    rows = [
        (v.check_id, v.x, v.action, v.lhs, v.rhs, v.margin)
        for v in list(kernel.violations) + list(report.violations)
    ]
    write_csv(out / "violations.csv", ["check_id", "x", "a", "lhs", "rhs", "margin"], rows, echo=True)
    return EXIT_OK if not rows else EXIT_FAIL


def _solve(cfg, args):
    cert = _require_cert(cfg)
    nodes = args.theta_nodes or cfg.theta_nodes
    tol = args.tol or cfg.tol
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        phi, report = solve_hjb(
            cfg.model, cert, cfg.delta_list, cfg.n_list, ThetaGrid.uniform(nodes),
            tol=tol, picard_tol=cfg.picard_tol,
        )
    notes = [str(w.message) for w in caught]
    return phi, report, notes


def cmd_solve(cfg, args):
    try:
        phi, report, notes = _solve(cfg, args)
    except MonotonicityError as exc:
        print(f"solve: {exc}", file=sys.stderr)
        return EXIT_FAIL
    policy = extract_policy(phi, cfg.model)
    coords = cfg.model.space.coords
    rows = [
        (t, x, coords[x], phi.phi[i, x], policy.actions[i, x])
        for i, t in enumerate(phi.theta)
        for x in range(cfg.model.num_states)
    ]
    out = cfg.output_dir
    write_csv(out / "value.csv", ["theta", "state_index", "state_coord", "phi", "action_index"], rows)
    items = report.as_rows() + [("warnings", " | ".join(notes))]
    write_csv(out / "report.csv", ["key", "value"], items)
    for w in notes:
        print(f"solve: warning: {w}", file=sys.stderr)
    ok = report.lower_bound_violations == 0 and report.upper_bound_violations == 0
    return EXIT_OK if ok else EXIT_FAIL


def _policy(cfg, args):
    if args.policy:
        return read_policy_csv(args.policy, cfg.model.num_states)
    phi, _, _ = _solve(cfg, args)
    return extract_policy(phi, cfg.model)


def _sim_param(cfg, args, key, default=None, kind=float):
    value = getattr(args, key, None)
    if value is None:
        value = cfg.simulate.get(key, default)
    if value is None:
        raise ConfigError(f"simulate.{key}", "missing (set it in the config or on the command line)")
    return kind(value)


def cmd_simulate(cfg, args):
    theta = _sim_param(cfg, args, "theta")
    x0 = _sim_param(cfg, args, "x0", kind=int)
    num_traj = _sim_param(cfg, args, "num_traj", kind=int)
    if not 0 < theta <= 1:
        raise ConfigError("simulate.theta", f"must lie in (0, 1], got {theta}")
    if not 0 <= x0 < cfg.model.num_states:
        raise ConfigError("simulate.x0", f"state index {x0} out of range")
    if num_traj < 2:
        raise ConfigError("simulate.num_traj", "must be >= 2")
    seed = cfg.seed if args.seed is None else args.seed
    threads = args.threads or cfg.threads
    policy = _policy(cfg, args)
    control = MarkovControl(policy, theta, cfg.model.alpha)
    delta = args.delta if args.delta is not None else cfg.simulate.get("delta")
    if delta is not None:
        n = args.n if args.n is not None else cfg.simulate.get("n")
        if n is None:
            raise ConfigError("simulate.n", "truncated mode (delta given) needs a truncation level n")
        model = truncate(cfg.model, _require_cert(cfg), float(n))
        est = estimate_truncated_functional(model, control, theta, float(delta), x0, num_traj, seed, threads=threads)
        j_log = math.log(est.mean) / theta
    else:
        model = cfg.model
        tail_eps = _sim_param(cfg, args, "tail_eps", 1e-4)
        res = estimate_J(model, control, theta, x0, num_traj, seed, tail_eps, cfg.certificate, threads=threads)
        est, j_log = res.J_tilde, res.J_log
    out = cfg.output_dir
    write_csv(
        out / "estimate.csv",
        ["estimate", "std_error", "num_samples", "horizon", "j_log"],
        [(est.mean, est.std_error, est.num_samples, est.horizon_used, j_log)],
        echo=True,
    )
    if args.dump:
        batch = simulate_batch(model, control, x0, est.horizon_used, num_traj, seed, threads=threads)
        write_csv(
            out / "trajectories.csv",
            ["index", "cost_integral", "jumps", "final_state"],
            zip(range(num_traj), batch["integral"], batch["jumps"], batch["final"]),
        )
    return EXIT_OK


def verify_config(cfg, threads=1, seed=None, oracle_tol=1e-4, num_traj=None):
    """The solver/oracle/Monte Carlo check battery configured under ``verify``."""
    v = cfg.verify
    for key in ("n", "delta", "theta", "x0"):
        if key not in v:
            raise ConfigError(f"verify.{key}", "missing required field")
    cert = _require_cert(cfg)
    seed = cfg.seed if seed is None else seed
    n, delta, theta = float(v["n"]), float(v["delta"]), float(v["theta"])
    if not 0 < delta < theta <= 1:
        raise ConfigError("verify", f"need 0 < delta < theta <= 1, got delta={delta}, theta={theta}")
    starts = v["x0"] if isinstance(v["x0"], list) else [v["x0"]]
    num_traj = int(num_traj or v.get("num_traj", 100_000))
    num_random = int(v.get("num_random", 20))

    report = CheckReport()
    report.add("certificate_violations", len(check_certificate(cfg.model, cert)), 0)
    model_n = truncate(cfg.model, cert, n)
    grid = ThetaGrid.uniform(cfg.theta_nodes, delta)
    phi, sub = solve_truncated(model_n, grid, cfg.picard_tol)
    scale = float(np.max(phi.phi))

    beta, m = contraction_bound(n, delta, model_n.q_bar, model_n.alpha, 1)
    beta, _ = contraction_bound(n, delta, model_n.q_bar, model_n.alpha, m)
    ratios = empirical_contraction(sub.sweep_changes, m, floor=1e-13 * scale)
    report.add(f"contraction:m={m}", ratios.max() if ratios.size else 0.0, beta)

    policy = extract_policy(phi, model_n)
    oracle = oracle_fixed_policy(model_n, policy, grid)
    report.add("oracle_minimizer", np.max(np.abs(oracle.phi - phi.phi)), oracle_tol)
    rng = np.random.default_rng(seed)
    worst = -np.inf
    for _ in range(num_random):
        pol = PolicyField.constant(rng.integers(0, cfg.model.num_actions, size=cfg.model.num_states))
        worst = max(worst, float(np.max(phi.phi - oracle_fixed_policy(model_n, pol, grid).phi)))
    report.add("oracle_suboptimality", worst, oracle_tol)

    for x0 in starts:
        report.extend(
            crosscheck_feynman_kac(model_n, phi, theta, delta, int(x0), num_traj, seed, num_random=num_random, threads=threads)
        )
    return report


def cmd_verify(cfg, args):
    threads = args.threads or cfg.threads
    report = verify_config(cfg, threads=threads, seed=args.seed)
    if args.analytic:
        report.extend(run_analytic_suite(cfg.model.alpha))
    write_csv(cfg.output_dir / "verify.csv", ["check_id", "lhs", "rhs", "margin", "passed"], report.rows())
    for r in report.failures():
        print(f"verify: FAILED {r.check_id}: {r.lhs:.6g} > {r.rhs:.6g}", file=sys.stderr)
    return EXIT_OK if report.passed else EXIT_FAIL


def build_parser():
    parser = argparse.ArgumentParser(prog="riskctmdp", description="Risk-sensitive discounted CTMDP solver and simulator.")
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        src = p.add_mutually_exclusive_group(required=True)
        src.add_argument("--config", help="JSON run configuration")
        src.add_argument("--fixture", choices=fixture_names(), help="bundled configuration")
        p.add_argument("--out", help=f"output directory (default: ${OUTPUT_ENV} or ./riskctmdp-out)")
        p.add_argument("--seed", type=int, help="override the config seed")
        p.add_argument("--tol", type=float, help="override the tolerance")
        p.add_argument("--threads", type=int, help="worker threads for Monte Carlo")
        p.add_argument("--theta-nodes", dest="theta_nodes", type=int, help="theta grid size")
        return p

    common(sub.add_parser("certify", help="check the Lyapunov certificate on the model grid"))
    common(sub.add_parser("solve", help="solve the HJB equation and extract the policy"))
    sim = common(sub.add_parser("simulate", help="Monte Carlo estimate of the risk-sensitive criterion"))
    sim.add_argument("--policy", help="value CSV written by solve (solved on the fly if omitted)")
    sim.add_argument("--theta", type=float)
    sim.add_argument("--x0", type=int)
    sim.add_argument("--num-traj", dest="num_traj", type=int)
    sim.add_argument("--tail-eps", dest="tail_eps", type=float)
    sim.add_argument("--delta", type=float, help="simulate the truncated functional with this delta")
    sim.add_argument("--n", type=float, help="truncation level for --delta")
    sim.add_argument("--dump", action="store_true", help="also write per-trajectory results")
    ver = common(sub.add_parser("verify", help="cross-check solver, oracle and Monte Carlo"))
    ver.add_argument("--analytic", action="store_true", help="also run the analytic special cases")
    return parser


COMMANDS = {"certify": cmd_certify, "solve": cmd_solve, "simulate": cmd_simulate, "verify": cmd_verify}


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(name)s: %(message)s")
    try:
        for flag in ("tol",):
            value = getattr(args, flag)
            if value is not None and not value > 0:
                raise ConfigError(f"--{flag}", f"must be > 0, got {value}")
        if args.threads is not None and args.threads < 1:
            raise ConfigError("--threads", "must be >= 1")
        if args.theta_nodes is not None and args.theta_nodes < 3:
            raise ConfigError("--theta-nodes", "must be >= 3")
        source = args.config if args.config else f"fixture:{args.fixture}"
        cfg = load_config(source, output_dir=args.out)
        return COMMANDS[args.command](cfg, args)
    except ConfigError as exc:
        print(f"riskctmdp {args.command}: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
