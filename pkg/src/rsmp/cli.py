"""Command-line experiment runner.

Every command resolves an :class:`ExperimentConfig` from defaults, an optional
JSON file (``--config``) and flag overrides, validates it before touching the
file system, writes ``manifest.json`` into the output directory and only then
starts computing. Exit codes: 0 success, 1 a check failed, 2 invalid
configuration, 3 numerical failure during the run.

Randomness: the config seed drives the Brownian increments through spawn key
(0, block) and derivative validation through spawn key (1,).
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import sys
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from . import __version__
from .adjoint import solve_adjoints
from .benchmarks import BENCHMARKS, get_benchmark, scaled_constraint
from .bsde import solve_bsde
from .export import write_ensemble
from .maxprinciple import check_constrained_mp, check_mp, stream_check_mp
from .model import BoxControlSet, ModelEvaluationError, SpikeConfig, validate_derivatives
from .paths import STREAM_NOISE, STREAM_VALIDATION, TimeGrid, generate_noise, simulate_forward, simulate_gamma
from .regression import FixedPointError, RegressionBasis, RegressionError
from .variation import run_order_study

OUTPUT_ENV = "RSMP_OUTPUT_DIR"
DEFAULT_OUTPUT = "rsmp_out"

log = logging.getLogger("rsmp")


class ConfigError(ValueError):
    pass


@dataclass
class ExperimentConfig:
    """Resolved settings of one run; serializes to and from JSON unchanged.

    ``eps_ladder`` values are fractions of T. ``control_step`` regrids the
    control set as a box between ``control_low`` and ``control_high``;
    ``control_grid`` lists explicit points instead. Both default to the
    benchmark's own set.
    """

    benchmark: str = "example"
    N: int = 100_000
    M: int = 512
    seed: int = 1
    eps_ladder: list = field(default_factory=lambda: [2.0**-k for k in range(3, 8)])
    spike_s: float = 0.25
    spike_u: Optional[list] = None
    base_u: Optional[list] = None
    degree: int = 3
    ridge: float = 1e-8
    max_iter: int = 5
    fp_tol: float = 1e-12
    beta: float = 1.0
    vbs_beta: float = 2.0
    control_grid: Optional[list] = None
    control_step: Optional[float] = None
    control_low: float = 0.0
    control_high: float = 1.0
    tol: float = 1e-8
    node_stride: int = 1
    circle_points: int = 720
    constraint_sign: float = 1.0
    keep_cells: bool = False
    export_format: str = "csv"
    workers: int = 1
    flip_delta_sigma: bool = False
    output_dir: Optional[str] = None

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, data: dict) -> "ExperimentConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(data) - names)
        if unknown:
            raise ConfigError(f"unknown config keys: {unknown}")
        return cls(**data)

    @classmethod
    def from_json(cls, text: str) -> "ExperimentConfig":
        try:
            data = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config is not valid JSON: {exc}") from None
        if not isinstance(data, dict):
            raise ConfigError("config must be a JSON object")
        return cls.from_dict(data)

    def basis(self) -> RegressionBasis:
        return RegressionBasis(self.degree, self.ridge, max_iter=self.max_iter, tol=self.fp_tol)

    def resolved_output(self) -> Path:
        return Path(self.output_dir or os.environ.get(OUTPUT_ENV) or DEFAULT_OUTPUT)


def _positive_int(cfg, name):
    v = getattr(cfg, name)
    if isinstance(v, bool) or not isinstance(v, int) or v < 1:
        raise ConfigError(f"{name} must be a positive integer, got {v!r}")


def _positive(cfg, name):
    v = getattr(cfg, name)
    if isinstance(v, bool) or not isinstance(v, (int, float)) or not v > 0:
        raise ConfigError(f"{name} must be positive, got {v!r}")


def _on_grid(value, dt):
    a = value / dt
    return abs(a - round(a)) <= 1e-8


def validate_config(cfg: ExperimentConfig, command: str):
    """Raise ConfigError on anything that would make the run meaningless."""
    if cfg.benchmark not in BENCHMARKS:
        raise ConfigError(f"unknown benchmark {cfg.benchmark!r}; available: {sorted(BENCHMARKS)}")
    for name in ("N", "M", "max_iter", "node_stride", "circle_points", "workers"):
        _positive_int(cfg, name)
    for name in ("ridge", "fp_tol", "tol", "beta", "vbs_beta"):
        _positive(cfg, name)
    if isinstance(cfg.degree, bool) or not isinstance(cfg.degree, int) or cfg.degree < 0:
        raise ConfigError("degree must be a non-negative integer")
    if not cfg.ridge < 1:
        raise ConfigError("ridge must be below 1")
    if isinstance(cfg.seed, bool) or not isinstance(cfg.seed, int) or not 0 <= cfg.seed < 2**64:
        raise ConfigError("seed must be a non-negative 64-bit integer")
    if cfg.export_format not in ("csv", "bin", "both"):
        raise ConfigError("export_format must be csv, bin or both")
    if cfg.constraint_sign not in (1, -1, 1.0, -1.0):
        raise ConfigError("constraint_sign must be 1 or -1")
    if cfg.control_step is not None:
        _positive(cfg, "control_step")
        if not cfg.control_high > cfg.control_low:
            raise ConfigError("control_high must exceed control_low")
    spec = build_spec(cfg)
    dt = spec.T / cfg.M
    if command == "verify-orders":
        ladder = cfg.eps_ladder
        if not isinstance(ladder, list) or len(ladder) < 3:
            raise ConfigError("eps_ladder needs at least three values")
        if any(not isinstance(e, (int, float)) or not e > 0 for e in ladder):
            raise ConfigError("eps_ladder values must be positive")
        if any(b >= a for a, b in zip(ladder, ladder[1:])):
            raise ConfigError("eps_ladder must be strictly decreasing")
        if not _on_grid(cfg.spike_s, dt):
            raise ConfigError(f"spike_s={cfg.spike_s} is not a multiple of dt={dt}")
        for e in ladder:
            eps = e * spec.T
            if not _on_grid(eps, dt):
                raise ConfigError(f"eps={eps} is not a multiple of dt={dt}")
            if cfg.spike_s < 0 or cfg.spike_s + eps > spec.T + 1e-12:
                raise ConfigError(f"spike [{cfg.spike_s}, {cfg.spike_s + eps}) leaves [0, T]")
        u = spike_control(cfg)
        if len(u) != spec.k or not spec.control_set.contains(np.asarray(u, dtype=float)):
            raise ConfigError(f"spike_u={u} is not in the control set")
    if command == "check-constrained" and spec.constraint is None:
        raise ConfigError(f"benchmark {cfg.benchmark!r} has no state constraint")
    base = base_control(cfg)
    if len(base) != spec.k:
        raise ConfigError(f"base_u needs {spec.k} components")
    if cfg.control_grid is not None:
        grid = np.atleast_2d(np.asarray(cfg.control_grid, dtype=float))
        if grid.size == 0 or grid.shape[1] != spec.k:
            raise ConfigError("control_grid must be a non-empty list of k-vectors")
    return spec


def build_spec(cfg: ExperimentConfig):
    spec = get_benchmark(cfg.benchmark).spec()
    if cfg.control_step is not None:
        cs = BoxControlSet([cfg.control_low] * spec.k, [cfg.control_high] * spec.k, cfg.control_step)
        spec = dataclasses.replace(spec, control_set=cs)
    if spec.constraint is not None and cfg.constraint_sign == -1:
        spec = spec.with_constraint(scaled_constraint(spec.constraint, -1.0))
    return spec


def spike_control(cfg: ExperimentConfig) -> list:
    return list(cfg.spike_u) if cfg.spike_u is not None else list(get_benchmark(cfg.benchmark).spike_control)


def base_control(cfg: ExperimentConfig) -> list:
    return list(cfg.base_u) if cfg.base_u is not None else list(get_benchmark(cfg.benchmark).base_control)


def _policy(cfg):
    from .model import ConstantPolicy
    return ConstantPolicy(base_control(cfg))


def _control_grid(cfg, spec):
    if cfg.control_grid is not None:
        return np.atleast_2d(np.asarray(cfg.control_grid, dtype=float))
    return spec.control_set.grid()


# -- output ------------------------------------------------------------------


def _write_text(path: Path, text: str):
    path.write_text(text if text.endswith("\n") else text + "\n")


def _manifest(cfg, command, status, outputs=()):
    return {
        "command": command,
        "version": __version__,
        "config": cfg.to_dict(),
        "random_streams": {"noise": [STREAM_NOISE, "block"], "validation": [STREAM_VALIDATION]},
        "status": status,
        "outputs": sorted(str(p) for p in outputs),
    }


def _json(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True)


# -- commands ----------------------------------------------------------------


def cmd_simulate(cfg: ExperimentConfig, out: Path) -> tuple:
    spec = build_spec(cfg)
    grid = TimeGrid(spec.T, cfg.M)
    noise = generate_noise(grid, cfg.N, cfg.seed)
    fwd = simulate_forward(spec, _policy(cfg), noise, label="x")
    sol = solve_bsde(spec, fwd, noise, cfg.basis())
    adj = solve_adjoints(spec, sol, noise, cfg.basis())
    files = []
    for ens in (fwd, sol.y, sol.z, adj.p, adj.q, adj.P, adj.Q):
        files += write_ensemble(ens, out / ens.label, cfg.export_format)
    summary = {"y0": sol.y0, "y0_se": sol.y0_se, "config": cfg.to_dict(), "P_asymmetry": adj.asymmetry()}
    _write_text(out / "summary.json", _json(summary))
    files.append(out / "summary.json")
    print(f"y(0) = {sol.y0:.10g} (se {sol.y0_se:.3g})")
    return 0, files


def cmd_verify_orders(cfg: ExperimentConfig, out: Path) -> tuple:
    spec = build_spec(cfg)
    ladder = [e * spec.T for e in cfg.eps_ladder]
    report = run_order_study(
        spec, _policy(cfg), spike_control(cfg), cfg.spike_s, ladder, cfg.N, cfg.M, cfg.seed, cfg.basis(),
        beta=cfg.beta, vbs_beta=cfg.vbs_beta, flip_delta_sigma=cfg.flip_delta_sigma, workers=cfg.workers,
        progress=log.info,
    )
    body = report.to_dict()
    body["config"] = cfg.to_dict()
    body["study"] = report.config
    _write_text(out / "order_report.json", _json(body))
    _write_text(out / "order_report.csv", report.to_csv())
    for line in report.summary_lines():
        print(line)
    inconclusive = [k for k, e in report.estimates.items() if e.verdict == "inconclusive"]
    if inconclusive:
        warnings.warn(f"inconclusive estimates: {', '.join(inconclusive)}", RuntimeWarning, stacklevel=1)
    disagree = [c.eps for c in report.cross if not c.agree]
    if disagree:
        warnings.warn(f"cross-estimator disagreement at eps = {disagree}", RuntimeWarning, stacklevel=1)
    return (0 if report.ok else 1), [out / "order_report.json", out / "order_report.csv"]


def cmd_check_mp(cfg: ExperimentConfig, out: Path) -> tuple:
    spec = build_spec(cfg)
    grid = TimeGrid(spec.T, cfg.M)
    noise = generate_noise(grid, cfg.N, cfg.seed)
    fwd = simulate_forward(spec, _policy(cfg), noise, label="x")
    controls = _control_grid(cfg, spec)
    if cfg.keep_cells:
        sol = solve_bsde(spec, fwd, noise, cfg.basis())
        adj = solve_adjoints(spec, sol, noise, cfg.basis())
        report = check_mp(spec, sol, adj, controls, cfg.tol, cfg.node_stride, keep_cells=True)
    else:
        report = stream_check_mp(spec, fwd, noise, cfg.basis(), controls, cfg.tol, cfg.node_stride)
    files = _write_mp(report, out, "mp_report", cfg)
    for line in report.summary_lines():
        print(line)
    return (1 if report.violated else 0), files


def _write_mp(report, out, stem, cfg, body=None):
    body = dict(body or report.to_dict())
    body["config"] = cfg.to_dict()
    _write_text(out / f"{stem}.json", _json(body))
    _write_text(out / f"{stem}.csv", report.to_csv())
    files = [out / f"{stem}.json", out / f"{stem}.csv"]
    if report.cells is not None:
        _write_text(out / f"{stem}_cells.csv", report.cells_csv())
        files.append(out / f"{stem}_cells.csv")
    return files


def cmd_check_constrained(cfg: ExperimentConfig, out: Path) -> tuple:
    spec = build_spec(cfg)
    grid = TimeGrid(spec.T, cfg.M)
    noise = generate_noise(grid, cfg.N, cfg.seed)
    fwd = simulate_forward(spec, _policy(cfg), noise, label="x")
    sol = solve_bsde(spec, fwd, noise, cfg.basis())
    adj = solve_adjoints(spec, sol, noise, cfg.basis())
    gamma = simulate_gamma(spec, sol, noise)
    res = check_constrained_mp(spec, sol, adj, gamma, noise, cfg.basis(), cfg.circle_points,
                               _control_grid(cfg, spec), cfg.tol, cfg.node_stride, cfg.keep_cells)
    files = _write_mp(res.report, out, "constrained_report", cfg, res.to_dict())
    np.savetxt(out / "circle_scan.csv", np.column_stack([
        np.arange(cfg.circle_points), [m.lam for m in _circle(cfg)], [m.mu for m in _circle(cfg)],
        res.worst_by_angle]), delimiter=",", fmt=["%d", "%.17g", "%.17g", "%.17g"],
        header="index,lambda,mu,worst_mean", comments="")
    files.append(out / "circle_scan.csv")
    for line in res.summary_lines():
        print(line)
    return (0 if res.ok else 1), files


def _circle(cfg):
    from .maxprinciple import ConstraintMultipliers
    return ConstraintMultipliers.circle(cfg.circle_points)


def cmd_validate_model(cfg: ExperimentConfig, out: Path) -> tuple:
    spec = build_spec(cfg)
    rep = validate_derivatives(spec, n_samples=200, tol=1e-4, seed=cfg.seed)
    _write_text(out / "validation.json", rep.to_json())
    print(f"{spec.name}: {'passed' if rep.passed else 'FAILED'} ({len(rep.checks)} checks)")
    for f in rep.failures():
        print(f"  {f}")
    return (0 if rep.passed else 1), [out / "validation.json"]


COMMANDS = {
    "simulate": cmd_simulate,
    "verify-orders": cmd_verify_orders,
    "check-mp": cmd_check_mp,
    "check-constrained": cmd_check_constrained,
    "validate-model": cmd_validate_model,
}


# -- argument parsing --------------------------------------------------------


def _floats(text):
    return [float(v) for v in text.split(",") if v.strip()]


def _points(text):
    return [[float(c) for c in pt.split(":")] for pt in text.split(",") if pt.strip()]


_FLAGS = [
    ("--benchmark", "benchmark", str, "benchmark name (see list-benchmarks)"),
    ("--N", "N", int, "number of paths"),
    ("--M", "M", int, "number of time steps"),
    ("--seed", "seed", int, "random seed"),
    ("--eps", "eps_ladder", _floats, "comma-separated eps ladder as fractions of T"),
    ("--spike-s", "spike_s", float, "spike start time"),
    ("--spike-u", "spike_u", _floats, "spike control value(s)"),
    ("--base-u", "base_u", _floats, "constant candidate control"),
    ("--degree", "degree", int, "regression polynomial degree"),
    ("--ridge", "ridge", float, "relative eigenvalue cutoff"),
    ("--max-iter", "max_iter", int, "implicit-step iterations"),
    ("--control-grid", "control_grid", _points, "explicit control points, e.g. 0,0.5,1 (components joined by ':')"),
    ("--control-step", "control_step", float, "grid the control box at this step"),
    ("--tol", "tol", float, "absolute tolerance floor for violations"),
    ("--node-stride", "node_stride", int, "check every n-th node"),
    ("--circle-points", "circle_points", int, "multiplier grid size"),
    ("--constraint-sign", "constraint_sign", float, "1 or -1 (negates the state constraint)"),
    ("--format", "export_format", str, "trajectory export format: csv, bin or both"),
    ("--workers", "workers", int, "parallel eps-ladder points"),
    ("--out", "output_dir", str, f"output directory (default ${OUTPUT_ENV} or ./{DEFAULT_OUTPUT})"),
]


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="rsmp", description=__doc__.split("\n\n")[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("list-benchmarks", help="print the built-in benchmarks")
    for name in COMMANDS:
        p = sub.add_parser(name, help=COMMANDS[name].__name__.replace("cmd_", "").replace("_", " "))
        p.add_argument("--config", type=Path, help="JSON config file")
        for flag, dest, typ, helptext in _FLAGS:
            p.add_argument(flag, dest=dest, type=typ, default=None, help=helptext)
        p.add_argument("--keep-cells", dest="keep_cells", action="store_const", const=True, default=None,
                       help="store and export every (node, path, control) value")
        p.add_argument("--flip-delta-sigma", dest="flip_delta_sigma", action="store_const", const=True,
                       default=None, help="debug: negate the spike forcing of x1")
        p.add_argument("-v", "--verbose", action="store_true")
    return parser


def resolve_config(args) -> ExperimentConfig:
    data = {}
    if args.config is not None:
        try:
            text = args.config.read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config: {exc}") from None
        data = ExperimentConfig.from_json(text).to_dict()
    cfg = ExperimentConfig.from_dict(data) if data else ExperimentConfig()
    for _, dest, _, _ in _FLAGS:
        v = getattr(args, dest)
        if v is not None:
            setattr(cfg, dest, v)
    for dest in ("keep_cells", "flip_delta_sigma"):
        if getattr(args, dest) is not None:
            setattr(cfg, dest, True)
    return cfg


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.command == "list-benchmarks":
        for name, b in BENCHMARKS.items():
            print(f"{name:20s} {b.summary}")
        return 0
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s", stream=sys.stderr)
    try:
        cfg = resolve_config(args)
        validate_config(cfg, args.command)
    except (ConfigError, TypeError, ValueError, KeyError) as exc:
        print(f"invalid config: {exc}", file=sys.stderr)
        return 2
    out = cfg.resolved_output()
    out.mkdir(parents=True, exist_ok=True)
    manifest = out / "manifest.json"
    _write_text(manifest, _json(_manifest(cfg, args.command, "running")))
    try:
        with warnings.catch_warnings(record=True) as caught:
            warnings.simplefilter("always")
            code, files = COMMANDS[args.command](cfg, out)
    except (ModelEvaluationError, FixedPointError, RegressionError) as exc:
        _write_text(manifest, _json(_manifest(cfg, args.command, f"error: {exc}")))
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 3
    seen = set()
    for w in caught:
        msg = str(w.message)
        if msg not in seen:
            seen.add(msg)
            print(f"warning: {msg}", file=sys.stderr)
    _write_text(manifest, _json(_manifest(cfg, args.command, "complete" if code == 0 else "check failed",
                                          [f.name for f in files])))
    return code


if __name__ == "__main__":
    sys.exit(main())
