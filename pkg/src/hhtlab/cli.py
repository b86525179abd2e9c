"""``hht-lab`` command-line interface.

Every command reads an optional JSON config (``--config``), applies flag
overrides on top and writes one CSV (or SVG for ``plot``).  Exit codes: 0 on
success, 1 for usage or configuration errors, 2 for numerical failures.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from collections import Counter
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .analysis import (AnalysisError, DIRECTIONS, bifurcation_sweep, detect_branch_points, eigenvalue_sweep,
                       lyapunov_spectrum, resolve_threads, s_grid, solve_fixed_point)
from .control import ADAPTIVE_SCHEMES, PID_PROFILES, AdaptiveSettings, PidParams, integrate_adaptive
from .fixed import BASELINE, FIXED_SCHEMES, FixedStepSettings, IntegrationError, integrate
from .metrics import BenchJob, convergence_study, global_l2_norms, local_norm_statistics, runtime_benchmark
from .models import PARAM_TYPES, ModelError, make_system, params_from_mapping
from .output import read_csv, render_svg, write_csv, write_trajectory

ALL_SOLVERS = FIXED_SCHEMES + (BASELINE,) + ADAPTIVE_SCHEMES
COMMANDS = ("simulate", "fixed-points", "eigen-sweep", "lyapunov", "poincare", "isi-sweep", "converge", "norms",
            "bench", "plot")

FIXED_POINT_HEADER = ["S", "x_star", "a_hi", "a_le", "a_li", "re1", "im1", "re2", "im2", "re3", "im3", "re4", "im4"]


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    model: str = "disease"
    params: dict = field(default_factory=dict)
    solver: str = "icn"
    S: float | None = None
    dt: float = 0.01
    T: float = 500.0
    eps_fp: float = 1e-7
    eps_t: float = 1e-7
    max_iter: int = 10
    m: int = 2
    transient: float = 500.0
    plane_offset: float = 40.0
    direction: str = "up"
    s_min: float = 0.0
    s_max: float = 400.0
    s_step: float = 1.0
    levels: int = 8
    renorm_interval: float = 1.0
    repetitions: int = 5
    cluster_tol: float = 0.5
    pid_profile: str = "default"
    threads: int | None = None
    out: str | None = None

    def validate(self, command: str):
        if self.model not in PARAM_TYPES:
            raise ConfigError(f"unknown model {self.model!r}; valid: {', '.join(PARAM_TYPES)}")
        params_from_mapping(self.model, self.params)
        for name in ("dt", "T", "eps_fp", "eps_t", "s_step", "renorm_interval", "cluster_tol"):
            if not getattr(self, name) > 0:
                raise ConfigError(f"{name} must be positive")
        if self.transient < 0:
            raise ConfigError("transient must be non-negative")
        if self.max_iter < 1:
            raise ConfigError("max_iter must be at least 1")
        if self.m < 2:
            raise ConfigError("m must be at least 2")
        if self.levels < 3:
            raise ConfigError("levels must be at least 3")
        if self.repetitions < 3:
            raise ConfigError("repetitions must be at least 3")
        if self.s_max < self.s_min:
            raise ConfigError("s_max must not be below s_min")
        if self.threads is not None and self.threads < 1:
            raise ConfigError("threads must be at least 1")
        if self.direction not in DIRECTIONS:
            raise ConfigError(f"direction must be one of {', '.join(DIRECTIONS)}")
        if self.pid_profile not in PID_PROFILES:
            raise ConfigError(f"unknown PID profile {self.pid_profile!r}; valid: {', '.join(PID_PROFILES)}")
        if self.S is not None and self.model != "disease":
            raise ConfigError("--S applies to the disease model only")
        for s in self.solvers():
            if s not in ALL_SOLVERS:
                raise ConfigError(f"unknown solver {s!r}; valid: {', '.join(ALL_SOLVERS)}")
        if command == "converge" and self.solver not in FIXED_SCHEMES:
            raise ConfigError(f"converge needs a fixed-step solver; valid: {', '.join(FIXED_SCHEMES)}")
        if command == "lyapunov" and self.solver != "icn":
            raise ConfigError("lyapunov propagates with icn only")
        if command in ("fixed-points", "eigen-sweep", "lyapunov", "poincare", "isi-sweep") and self.model != "disease":
            if command != "lyapunov" or self.S is not None:
                raise ConfigError(f"{command} is defined for the disease model")

    def solvers(self) -> list[str]:
        if self.solver == "all":
            return list(ALL_SOLVERS)
        return [s.strip() for s in self.solver.split(",") if s.strip()]

    def to_json(self) -> str:
        return json.dumps(dataclasses.asdict(self), indent=2, sort_keys=True)


# command-specific defaults, applied below config file and flags
COMMAND_DEFAULTS = {
    "converge": dict(dt=0.5, T=50.0, max_iter=5),
    "lyapunov": dict(T=20000.0),
    "isi-sweep": dict(T=10000.0),
    "poincare": dict(T=10000.0),
    "norms": dict(T=10000.0),
}

_FIELDS = {f.name for f in dataclasses.fields(RunConfig)}


def _normalise_keys(mapping: dict) -> dict:
    out = {}
    for k, v in mapping.items():
        key = k.replace("-", "_")
        if key not in _FIELDS:
            raise ConfigError(f"unknown config key {k!r}")
        out[key] = v
    return out


def build_config(command: str, args: argparse.Namespace) -> RunConfig:
    values = dict(COMMAND_DEFAULTS.get(command, {}))
    if getattr(args, "config", None):
        try:
            doc = json.loads(Path(args.config).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {args.config}: {exc}") from None
        if not isinstance(doc, dict):
            raise ConfigError("config file must hold a JSON object")
        values.update(_normalise_keys(doc))
    for name in _FIELDS:
        v = getattr(args, name, None)
        if v is not None:
            values[name] = v
    try:
        cfg = RunConfig(**values)
    except TypeError as exc:
        raise ConfigError(str(exc)) from None
    if not isinstance(cfg.params, dict):
        raise ConfigError("params must be a JSON object")
    try:
        cfg.validate(command)
    except ModelError as exc:
        raise ConfigError(str(exc)) from None
    return cfg


# --------------------------------------------------------------------------
# helpers


def _params(cfg: RunConfig, S=None):
    p = params_from_mapping(cfg.model, cfg.params)
    S = cfg.S if S is None else S
    if S is not None:
        p = p.with_S(S)
    return p


def _system(cfg: RunConfig, S=None):
    return make_system(cfg.model, _params(cfg, S))


def _s_values(cfg: RunConfig) -> np.ndarray:
    if cfg.S is not None:
        return np.array([float(cfg.S)])
    return s_grid(cfg.s_min, cfg.s_max, cfg.s_step)


def _run(cfg: RunConfig, system, solver: str, T: float | None = None):
    u0 = np.zeros(system.dimension)
    T = cfg.T if T is None else T
    if solver in ADAPTIVE_SCHEMES:
        prof = PID_PROFILES[cfg.pid_profile]
        settings = AdaptiveSettings(T=T, dt0=cfg.dt, eps_t=cfg.eps_t, eps_fp=cfg.eps_fp, m=cfg.m,
                                    max_iter_I=cfg.max_iter, max_iter_J=cfg.max_iter)
        return integrate_adaptive(system, solver, u0, settings, PidParams(prof.k_P, prof.k_I, prof.k_D, cfg.eps_t))
    settings = FixedStepSettings(dt=cfg.dt, T=T, eps_fp=cfg.eps_fp, max_iter_I=cfg.max_iter, max_iter_J=cfg.max_iter)
    return integrate(system, solver, u0, settings)


def _out(cfg: RunConfig, command: str, suffix: str = ".csv") -> Path:
    return Path(cfg.out) if cfg.out else Path(command + suffix)


# --------------------------------------------------------------------------
# commands


def cmd_simulate(cfg: RunConfig) -> int:
    system = _system(cfg)
    traj = _run(cfg, system, cfg.solver)
    path = _out(cfg, "simulate")
    n = write_trajectory(path, traj)
    hist = Counter(int(i) for i in traj.iterations[1:])
    print(f"wrote {n} rows to {path}")
    print(f"steps: {len(traj.times) - 1}  final t: {traj.times[-1]:.17g}")
    if hasattr(traj, "rejections") and traj.rejections is not None:
        print(f"rejections: {int(np.sum(traj.rejections))}")
    print(f"non-converged steps: {int(np.sum(~traj.converged[1:]))}")
    print("iterations histogram: " + ", ".join(f"{k}:{hist[k]}" for k in sorted(hist)))
    print("final state: " + " ".join(f"{lab}={v:.10g}" for lab, v in zip(traj.labels, traj.states[-1])))
    return 0


def _fixed_point_rows(points):
    for fp in points:
        eig = list(fp.eigenvalues) + [complex("nan")] * (4 - len(fp.eigenvalues))
        yield [fp.S, fp.x_star, *fp.a_star, *[v for e in eig for v in (e.real, e.imag)]]


def cmd_fixed_points(cfg: RunConfig) -> int:
    p = _params(cfg)
    points = [solve_fixed_point(S, p) for S in _s_values(cfg)]
    n = write_csv(_out(cfg, "fixed-points"), FIXED_POINT_HEADER, _fixed_point_rows(points))
    print(f"wrote {n} fixed points")
    return 0


def cmd_eigen_sweep(cfg: RunConfig) -> int:
    p = _params(cfg)
    if cfg.S is not None:
        sweep = eigenvalue_sweep(cfg.S, cfg.S, cfg.s_step, p)
    else:
        sweep = eigenvalue_sweep(cfg.s_min, cfg.s_max, cfg.s_step, p)
    n = write_csv(_out(cfg, "eigen-sweep"), FIXED_POINT_HEADER, _fixed_point_rows(sweep.points))
    print(f"wrote {n} rows")
    for a, b in sweep.sign_changes:
        print(f"max real part changes sign in S in [{a:g}, {b:g}]")
    for a, b, na, nb in sweep.complex_transitions:
        print(f"complex eigenvalue count {na} -> {nb} in S in [{a:g}, {b:g}]")
    return 0


def cmd_lyapunov(cfg: RunConfig) -> int:
    S_values = _s_values(cfg) if cfg.model == "disease" else np.array([np.nan])
    threads = resolve_threads(cfg.threads)

    def one(S):
        system = _system(cfg, None if np.isnan(S) else S)
        return lyapunov_spectrum(system, horizon=cfg.T, transient=cfg.transient,
                                 renorm_interval=cfg.renorm_interval, dt=cfg.dt, eps_fp=cfg.eps_fp,
                                 max_iter=cfg.max_iter)

    if threads > 1 and len(S_values) > 1:
        one(S_values[0])
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(one, S_values))
    else:
        results = [one(S) for S in S_values]
    dim = len(results[0].exponents)
    header = ["S"] + [f"l{k + 1}" for k in range(dim)]
    n = write_csv(_out(cfg, "lyapunov"), header, ([r.S, *r.exponents] for r in results))
    print(f"wrote {n} rows")
    return 0


def _sweep(cfg: RunConfig):
    return bifurcation_sweep(_s_values(cfg), solver=cfg.solver, horizon=cfg.T, transient=cfg.transient,
                             offset=cfg.plane_offset, dt=cfg.dt, params=_params(cfg, 0.0), eps_fp=cfg.eps_fp,
                             max_iter=cfg.max_iter, threads=cfg.threads, direction=cfg.direction)


def _report_errors(diagram) -> int:
    for S, msg in diagram.errors.items():
        print(f"S={S:g}: {msg}", file=sys.stderr)
    return 2 if diagram.errors else 0


def cmd_poincare(cfg: RunConfig) -> int:
    diagram = _sweep(cfg)
    n = write_csv(_out(cfg, "poincare"), ["S", "t", "x", "a_hi", "a_le", "a_li"], diagram.poincare_rows())
    print(f"wrote {n} crossings")
    return _report_errors(diagram)


def cmd_isi_sweep(cfg: RunConfig) -> int:
    diagram = _sweep(cfg)
    n = write_csv(_out(cfg, "isi-sweep"), ["S", "isi"], diagram.isi_rows())
    print(f"wrote {n} intervals")
    if len(diagram.S) > 1:
        rep = detect_branch_points(diagram, cluster_tol=cfg.cluster_tol)
        for bp in rep.points:
            print(f"branch at S={bp.S:g}: clusters {bp.before} -> {bp.after} ({bp.kind})")
        if rep.feigenbaum_ratio is not None:
            print(f"cascade {rep.doubling_cascade}: ratio {rep.feigenbaum_ratio:.4g}")
    return _report_errors(diagram)


def cmd_converge(cfg: RunConfig) -> int:
    report = convergence_study(_system(cfg), cfg.solver, cfg.dt, cfg.levels, cfg.T, cfg.eps_fp, cfg.max_iter)
    n = write_csv(_out(cfg, "converge"), ["level", "dt", "integral_error", "runtime_ns"], report.rows())
    print(f"wrote {n} levels")
    print(f"slope of log2(error) per halving: {report.slope:.4f} (order {report.order:.4f})")
    if report.failed_level is not None:
        print(f"level {report.failed_level} failed: {report.message}", file=sys.stderr)
        return 2
    return 0


def cmd_norms(cfg: RunConfig) -> int:
    S = _params(cfg).S if cfg.model == "disease" else float("nan")
    rows = []
    for solver in cfg.solvers():
        traj = _run(cfg, _system(cfg), solver)
        rep = global_l2_norms(traj)
        e, v = local_norm_statistics(traj)
        rows.append([solver, S, rep.global_state_norm, rep.global_derivative_norm, e, v])
        print(f"{solver}: |u|={rep.global_state_norm:.10g} |du/dt|={rep.global_derivative_norm:.10g} "
              f"E={e:.6g} V={v:.6g}")
    write_csv(_out(cfg, "norms"),
              ["scheme", "S", "global_state_norm", "global_derivative_norm", "expectation", "variance"], rows)
    return 0


def cmd_bench(cfg: RunConfig) -> int:
    S = _params(cfg).S if cfg.model == "disease" else float("nan")
    rows = []
    for solver in cfg.solvers():
        system = _system(cfg)
        res = runtime_benchmark(lambda: _run(cfg, system, solver), cfg.repetitions)
        rows.append([solver, S, cfg.repetitions, res.min, res.mean, res.max])
        print(f"{solver}: min {res.min:.4f} s  mean {res.mean:.4f} s  max {res.max:.4f} s")
    write_csv(_out(cfg, "bench"), ["scheme", "S", "repetitions", "min_s", "mean_s", "max_s"], rows)
    return 0


def cmd_plot(args) -> int:
    try:
        header, cols = read_csv(args.csv)
    except (OSError, ValueError) as exc:
        raise ConfigError(f"cannot read {args.csv}: {exc}") from None
    names = args.columns.split(",") if args.columns else header[:2]
    if len(names) != 2:
        raise ConfigError("--columns takes exactly two names, e.g. S,isi")
    missing = [c for c in names if c not in cols]
    if missing:
        raise ConfigError(f"missing column(s): {', '.join(missing)}; available: {', '.join(header)}")
    if any(cols[c].dtype.kind != "f" for c in names):
        raise ConfigError("plot columns must be numeric")
    svg = render_svg(cols[names[0]], cols[names[1]], args.kind, names[0], names[1], args.title or "")
    out = Path(args.out) if args.out else Path(args.csv).with_suffix(".svg")
    out.write_text(svg)
    print(f"wrote {out}")
    return 0


HANDLERS = {
    "simulate": cmd_simulate,
    "fixed-points": cmd_fixed_points,
    "eigen-sweep": cmd_eigen_sweep,
    "lyapunov": cmd_lyapunov,
    "poincare": cmd_poincare,
    "isi-sweep": cmd_isi_sweep,
    "converge": cmd_converge,
    "norms": cmd_norms,
    "bench": cmd_bench,
}


# --------------------------------------------------------------------------
# argument parsing


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _common(p: argparse.ArgumentParser):
    a = p.add_argument
    a("--config", help="JSON file with config keys (flags take precedence)")
    a("--model", choices=sorted(PARAM_TYPES))
    a("--solver", help=f"one of {', '.join(ALL_SOLVERS)} (norms/bench: comma list or 'all')")
    a("--S", type=float, dest="S", help="external input of the disease model")
    a("--dt", type=float, help="step size (initial step for adaptive solvers, dt0 for converge)")
    a("--T", type=float, dest="T", help="time horizon")
    a("--eps-fp", type=float, dest="eps_fp")
    a("--eps-t", type=float, dest="eps_t")
    a("--max-iter", type=int, dest="max_iter", help="fixed-point iteration cap (I and J)")
    a("--m", type=int, help="substeps of the step-doubling controllers")
    a("--transient", type=float)
    a("--plane-offset", type=float, dest="plane_offset")
    a("--direction", choices=sorted(DIRECTIONS))
    a("--s-min", type=float, dest="s_min")
    a("--s-max", type=float, dest="s_max")
    a("--s-step", type=float, dest="s_step")
    a("--levels", type=int)
    a("--renorm-interval", type=float, dest="renorm_interval")
    a("--repetitions", type=int)
    a("--cluster-tol", type=float, dest="cluster_tol")
    a("--pid-profile", dest="pid_profile", help=f"one of {', '.join(PID_PROFILES)}")
    a("--threads", type=int, help="worker threads for sweeps (fallback: HHT_LAB_THREADS)")
    a("--out", help="output path")
    a("--dump-config", action="store_true", help="print the effective config as JSON and exit")


def make_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="hht-lab", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name in HANDLERS:
        _common(sub.add_parser(name))
    pp = sub.add_parser("plot")
    pp.add_argument("csv")
    pp.add_argument("--kind", choices=("scatter", "line"), default="scatter")
    pp.add_argument("--columns", help="x,y column names (default: first two)")
    pp.add_argument("--title")
    pp.add_argument("--out")
    return parser


def main(argv=None) -> int:
    args = make_parser().parse_args(argv)
    try:
        if args.command == "plot":
            return cmd_plot(args)
        cfg = build_config(args.command, args)
        if args.dump_config:
            print(cfg.to_json())
            return 0
        return HANDLERS[args.command](cfg)
    except ConfigError as exc:
        print(f"hht-lab: error: {exc}", file=sys.stderr)
        return 1
    except (IntegrationError, AnalysisError, FloatingPointError) as exc:
        print(f"hht-lab: numerical failure: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
