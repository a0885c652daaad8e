"""``switchqvi`` command line: solve, simulate, verify and sweep.

Exit statuses::

    0  success                     4  verification prerequisite violated
    1  configuration / input error 5  solver diverged
    2  model validation failed     6  coupled generators cannot be simulated
    3  check failed
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import io
import logging
import platform
import sys
from importlib import metadata
from pathlib import Path

import numpy as np
import scipy

from .config import RunConfig, canonical_json, load_config
from .errors import (ConfigError, CoupledGeneratorUnsupported, MaxSwitchesExceeded,
                     MonotonicityUnachievable, SolverError)
from .grid import check_cost_subharmonicity, check_m_matrix, discretize_generator
from .model import sample_cloud, validate_problem
from .qvi import field_from_values, picard_iterate, residual, solve_envelopes
from .strategy import feynman_kac_check, write_switch_log
from .verify import run_suite

EXIT_OK, EXIT_CONFIG, EXIT_VALIDATION, EXIT_CHECK = 0, 1, 2, 3
EXIT_PREREQUISITE, EXIT_DIVERGED, EXIT_COUPLED = 4, 5, 6


# ---------------------------------------------------------------------------
# artifact helpers
# ---------------------------------------------------------------------------
def _write_text(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(text)


def _write_json(path: Path, obj) -> None:
    _write_text(path, canonical_json(obj))


def _csv_text(header: list[str], rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([repr(float(v)) if isinstance(v, (float, np.floating)) else v for v in row])
    return buf.getvalue()


def _version() -> str:
    try:
        return metadata.version("artifact")
    except metadata.PackageNotFoundError:
        return "0+unknown"


def values_csv(field, cfg: RunConfig) -> str:
    """Value field as CSV, led by a comment line binding it to the config."""
    grid = field.grid
    V, S = field.values, field.slack
    m, k = V.shape[0], grid.dim
    header = (["node_index"] + [f"x{a + 1}" for a in range(k)]
              + [f"v{i + 1}" for i in range(m)] + [f"slack{i + 1}" for i in range(m)])
    nodes = grid.nodes
    rows = ([n] + [float(c) for c in nodes[n]] + [float(v) for v in V[:, n]] + [float(s) for s in S[:, n]]
            for n in range(grid.n_nodes))
    body = _csv_text(header, rows)
    digest = hashlib.sha256(body.encode()).hexdigest()
    return f"# config_hash={cfg.hash} content_sha256={digest}\n" + body


def read_values_csv(path: Path, cfg: RunConfig, m: int) -> np.ndarray:
    """Parse a values CSV, refusing it unless both hashes match."""
    text = path.read_text(encoding="utf-8")
    first, _, body = text.partition("\n")
    meta = dict(part.split("=", 1) for part in first.lstrip("# ").split() if "=" in part)
    if meta.get("config_hash") != cfg.hash:
        raise ConfigError(f"{path}: config hash {meta.get('config_hash')} does not match {cfg.hash}")
    if meta.get("content_sha256") != hashlib.sha256(body.encode()).hexdigest():
        raise ConfigError(f"{path}: content hash mismatch (file edited after it was written)")
    rows = list(csv.reader(io.StringIO(body)))
    header, data = rows[0], np.array(rows[1:], dtype=float)
    cols = [header.index(f"v{i + 1}") for i in range(m)]
    return data[:, cols].T


def _provenance(cfg: RunConfig, solver_hash: str) -> dict:
    return {"config_hash": cfg.hash, "solver_hash": solver_hash, "config_source": Path(cfg.source).name,
            "seed": cfg.data["mc"]["seed"],
            "versions": {"switchqvi": _version(), "numpy": np.__version__, "scipy": scipy.__version__,
                         "python": platform.python_version()}}


def _say(args, msg: str) -> None:
    if not args.quiet:
        print(msg)


def _error(msg: str) -> None:
    print(f"switchqvi: error: {msg}", file=sys.stderr)


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------
def _validate(cfg: RunConfig, problem, diffusion, grid, op):
    v = cfg.data["validation"]
    cloud = sample_cloud(grid.bounds, None, oversample=max(1, v["sample_points"] // 10), seed=cfg.data["mc"]["seed"])
    x0 = cfg.data["grid"]["x0"] if diffusion.family != "geometric" else None
    report = validate_problem(problem, diffusion, cloud, T=v["T"], n_paths=v["n_paths"],
                              seed=cfg.data["mc"]["seed"], x0=x0, probe_step=v["probe_step"])
    report.extras["cost_subharmonicity"] = check_cost_subharmonicity(problem, op)
    return report


def run_solve(cfg: RunConfig, out: Path, args) -> int:
    problem, diffusion, grid, config = cfg.problem(), cfg.diffusion(), cfg.grid(), cfg.solver()
    try:
        op = discretize_generator(diffusion, grid)
        m_check = check_m_matrix(op, problem.discount)
    except MonotonicityUnachievable as exc:
        _write_json(out / "validation.json", {"passed": False, "error": type(exc).__name__,
                                              "detail": str(exc), "payload": exc.payload})
        _error(str(exc))
        return EXIT_VALIDATION
    report = _validate(cfg, problem, diffusion, grid, op)
    vdict = report.to_dict()
    vdict["m_matrix"] = m_check
    _write_json(out / "validation.json", vdict)
    if not report.passed:
        names = ", ".join(f"{k}: {v.error or 'failed'}" for k, v in report.failures.items())
        _error(f"validation failed ({names}); report in {out / 'validation.json'}")
        return EXIT_VALIDATION
    try:
        envs = solve_envelopes(problem, op, config)
        field, trace = picard_iterate(problem, op, config, envelopes=envs, config_hash=cfg.hash)
    except SolverError as exc:
        _write_json(out / "trace.json", {"error": type(exc).__name__, "detail": str(exc), "payload": exc.payload})
        _error(f"solver diverged: {exc}")
        return EXIT_DIVERGED
    res = residual(field, problem, op)
    _write_text(out / "values.csv", values_csv(field, cfg))
    _write_json(out / "trace.json", {"config_hash": cfg.hash, "iterations": trace.to_list(),
                                     "min_increment": trace.min_increment})
    _write_json(out / "residual.json", {"config_hash": cfg.hash, **res})
    prov = _provenance(cfg, config.hash())
    prov["envelopes"] = {"upper_sup": float(np.max(envs[0])), "lower_inf": float(np.min(envs[1]))}
    _write_json(out / "provenance.json", prov)
    _say(args, f"solved {problem.num_modes} modes on {grid.n_nodes} nodes in {len(trace)} outer iterations; "
               f"residual sup {res['sup']:.3e}; config {cfg.hash}")
    return EXIT_OK


def run_simulate(cfg: RunConfig, out: Path, args) -> int:
    problem, diffusion, grid = cfg.problem(), cfg.diffusion(), cfg.grid()
    if not problem.state_only:
        bad = [problem.labels[i] for i, c in enumerate(problem.coupling) if c != "state_only"]
        _error(f"strategy simulation needs state_only generators; coupled modes {bad} "
               "are checked through PDE residuals only")
        return EXIT_COUPLED
    field_path = Path(args.field) if args.field else out / "values.csv"
    if not field_path.is_file():
        _error(f"field file not found: {field_path}")
        return EXIT_CONFIG
    values = read_values_csv(field_path, cfg, problem.num_modes)
    op = discretize_generator(diffusion, grid)
    field = field_from_values(values, problem, op, {"source": field_path.name})
    mc = cfg.mc()
    m = cfg.data["mc"]
    try:
        report = feynman_kac_check(field, problem, diffusion, grid, cfg.test_points(), mc,
                                   eps_disc=m["eps_disc"], eps_bind=m["eps_bind"])
    except CoupledGeneratorUnsupported as exc:
        _error(str(exc))
        return EXIT_COUPLED
    except MaxSwitchesExceeded as exc:
        _write_json(out / "fk_report.json", {"config_hash": cfg.hash, "error": type(exc).__name__,
                                             "detail": str(exc), "payload": exc.payload})
        _error(str(exc))
        return EXIT_CHECK
    if m["log_paths"]:
        write_switch_log(report["entries"], out / "switch_log.csv")
    for e in report["entries"]:
        e.pop("switch_log", None)
    report["config_hash"] = cfg.hash
    _write_json(out / "fk_report.json", report)
    for e in report["entries"]:
        _say(args, f"x0={e['x0']} mode {e['mode']}: v={e['v']:.6g} J*={e['J_hat']:.6g} "
                   f"(se {e['se']:.2e}) {e['verdict']}")
    return EXIT_OK if report["passed"] else EXIT_CHECK


def _corrupt(field):
    """Test hook: lift one node of mode 1 well above the upper envelope."""
    V = field.values.copy()
    V[0, V.shape[1] // 2] = np.max(V) + 1.0 + abs(np.max(V))
    return field.with_values(V)


def run_verify(cfg: RunConfig, out: Path, args) -> int:
    problem, diffusion, config = cfg.problem(), cfg.diffusion(), cfg.solver()
    v, g = cfg.data["verify"], cfg.data["grid"]
    res = v["resolutions"]
    if len(res) < 3 or any(b != 2 * a for a, b in zip(res, res[1:])):
        _error(f"verify.resolutions needs at least 3 doubling entries, got {res}")
        return EXIT_CONFIG
    try:
        report = run_suite(problem, diffusion, bounds=g["bounds"], n_cells=g["cells"], boundary=g["boundary"],
                           resolutions=res, config=config, delta=v["delta"], region=v["region"],
                           field_override=_corrupt if args.corrupt_field else None,
                           seed=cfg.data["mc"]["seed"])
    except SolverError as exc:
        _error(f"solver diverged: {exc}")
        return EXIT_DIVERGED
    payload = report.to_dict()
    payload["config_hash"] = cfg.hash
    _write_json(out / "verify.json", payload)
    for name in sorted(report.checks):
        c = report.checks[name]
        _say(args, f"{name}: {c.status}" + ("" if c.margin is None else f" (margin {c.margin:.3e})"))
    return report.exit_code


def run_sweep(cfg: RunConfig, out: Path, args) -> int:
    s = cfg.data["sweep"]
    axis = args.axis or s["axis"]
    values = [float(v) for v in (args.values if args.values is not None else s["values"])]
    if not values:
        _error("sweep needs at least one value")
        return EXIT_CONFIG
    base, diffusion, grid, config = cfg.problem(), cfg.diffusion(), cfg.grid(), cfg.solver()
    op = discretize_generator(diffusion, grid)
    x0 = np.atleast_2d(np.asarray(s["x0"], dtype=float))
    m = base.num_modes
    header = ["axis", "value"] + [f"v{i + 1}" for i in range(m)] + ["v_max", "outer_iterations", "status"]
    rows, status = [], EXIT_OK
    for val in values:
        if axis == "shift":
            problem = base.shifted(val)
        elif axis == "discount":
            problem = base.with_discount(val)
        else:
            problem = base.with_cost_scale(val)
        try:
            field, trace = picard_iterate(problem, op, config)
        except (SolverError, ValueError) as exc:
            rows.append([axis, val] + [""] * m + ["", "", f"diverged: {type(exc).__name__}"])
            status = EXIT_DIVERGED
            break
        vx = field.at(x0)[:, 0]
        rows.append([axis, val] + [float(v) for v in vx] + [float(vx.max()), len(trace), "ok"])
    body = _csv_text(header, rows)
    _write_text(out / "sweep.csv", f"# config_hash={cfg.hash} axis={axis}\n" + body)
    if status != EXIT_OK:
        _error(f"sweep stopped at {axis}={rows[-1][1]}: solver diverged (partial table written)")
        return status
    if axis == "shift":
        tol = 10 * config.eps_out
        ok = sorted(zip(values, rows))
        for (a, ra), (b, rb) in zip(ok, ok[1:]):
            if any(rb[2 + i] < ra[2 + i] - tol for i in range(m)):
                _error(f"non-monotone response between shift {a} and {b}")
                return EXIT_CHECK
    _say(args, f"swept {axis} over {len(values)} values; table in {out / 'sweep.csv'}")
    return EXIT_OK


COMMANDS = {"solve": run_solve, "simulate": run_simulate, "verify": run_verify, "sweep": run_sweep}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", required=True, metavar="PATH", help="JSON run configuration")
    common.add_argument("--out", metavar="DIR", help="artifact directory (default: output.directory)")
    common.add_argument("--seed", type=int, metavar="U64", help="override mc.seed")
    common.add_argument("--threads", type=int, metavar="N", help="worker threads across modes")
    common.add_argument("--quiet", action="store_true", help="suppress the summary line")
    parser = argparse.ArgumentParser(prog="switchqvi", description="Optimal switching QVI solver.")
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("solve", parents=[common], help="solve the coupled system and write the value field")
    sim = sub.add_parser("simulate", parents=[common], help="Monte Carlo check of a solved field")
    sim.add_argument("--field", metavar="CSV", help="values.csv from solve (default: OUT/values.csv)")
    ver = sub.add_parser("verify", parents=[common], help="ordering and refinement checks")
    ver.add_argument("--corrupt-field", action="store_true", help=argparse.SUPPRESS)
    sw = sub.add_parser("sweep", parents=[common], help="re-solve across a parameter axis")
    sw.add_argument("--axis", choices=["shift", "discount", "cost_scale"])
    sw.add_argument("--values", type=float, nargs="*", metavar="V")
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO, format="%(message)s")
    try:
        cfg = load_config(args.config)
        if args.seed is not None:
            if not 0 <= args.seed < 2 ** 64:
                raise ConfigError(f"--seed must be an unsigned 64-bit integer, got {args.seed}")
            cfg = cfg.with_seed(args.seed)
        if args.threads is not None:
            if args.threads < 1:
                raise ConfigError("--threads must be >= 1")
            cfg = cfg.with_threads(args.threads)
        out = Path(args.out or cfg.data["output"]["directory"])
        return COMMANDS[args.command](cfg, out, args)
    except ConfigError as exc:
        _error(str(exc))
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
