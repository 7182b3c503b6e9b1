"""Command-line front end.

Every run writes its outputs into --out: one CSV per report, a standalone
matplotlib plot script (never imported by the CLI itself), and a
manifest.txt holding the resolved configuration plus result summary
lines.  Each CSV starts with a comment carrying the sha256 of the
manifest, and re-running a command with ``--config manifest.txt``
reproduces every CSV byte for byte.

Option precedence: built-in defaults < --config file < environment
variables (prefix SDDEBEM_, e.g. SDDEBEM_PATHS=100) < flags.  The
--threads knob only schedules work and is deliberately excluded from the
manifest: results are identical for any thread count.
"""

from __future__ import annotations

import argparse
import hashlib
import io
import json
import os
import sys
from dataclasses import dataclass, field
from pathlib import Path

from . import __version__, analysis, brownian, integrator, models
from .errors import GridError, ParameterError, SddeBemError, SolverError

_ENV_PREFIX = "SDDEBEM_"


def _float_list(text):
    return [float(tok) for tok in str(text).split(",") if tok.strip()]


_KEY_PARSERS = {
    "model": str, "T": float, "tau": float, "dt": _float_list,
    "ref_dt": float, "paths": int, "seed": int, "tol": float, "out": str,
    "threads": int, "gamma": float, "t1": float, "gaps": _float_list,
    "samples": int, "radius": float, "K": float, "q": float, "K2": float,
    "c1": float, "c2": float, "c3": float, "c4": float, "l": float,
    "Gamma": float, "epsilon": float, "dump_trajectory": str,
    "dump_increments": str,
}

_COMMON = ("model", "T", "tau", "dt", "ref_dt", "paths", "seed", "tol",
           "out", "threads")

_DEFAULTS = {
    "convergence": {
        "model": "example1", "T": 1.0, "tau": 1.0,
        "dt": [2.0 ** -6, 2.0 ** -7, 2.0 ** -8, 2.0 ** -9],
        "ref_dt": 2.0 ** -11, "paths": 500, "seed": 12345, "tol": 1e-12,
        "out": "sddebem-out", "threads": 1,
        "dump_trajectory": None, "dump_increments": None,
    },
    "residuals": {
        "model": "example1", "T": 1.0, "tau": 1.0,
        "dt": [2.0 ** -5, 2.0 ** -6, 2.0 ** -7, 2.0 ** -8],
        "ref_dt": 2.0 ** -11, "paths": 200, "seed": 12345, "tol": 1e-12,
        "out": "sddebem-out", "threads": 1,
    },
    "holder": {
        "model": "example1", "tau": 1.0, "gamma": 2.0, "t1": 0.5,
        "gaps": [2.0 ** -4, 2.0 ** -5, 2.0 ** -6, 2.0 ** -7, 2.0 ** -8],
        "ref_dt": 2.0 ** -11, "paths": 500, "seed": 12345, "tol": 1e-12,
        "out": "sddebem-out", "threads": 1, "T": None,
    },
    "stability": {
        "model": "example2", "T": 10.0, "tau": 1.0, "dt": [0.001],
        "paths": 500, "seed": 12345, "tol": 1e-12,
        "out": "sddebem-out", "threads": 1,
        "dump_trajectory": None,
    },
    "check": {
        "model": "example1", "samples": 100_000, "radius": 2.0,
        "seed": 12345, "out": "sddebem-out",
        "K": None, "q": None, "K2": None, "l": None, "Gamma": None,
        "c1": None, "c2": None, "c3": None, "c4": None,
    },
    "certify": {
        "tau": 1.0, "c1": None, "c2": None, "c3": None, "c4": None,
        "l": None, "K": None, "epsilon": None, "out": "sddebem-out",
    },
}


@dataclass
class RunConfig:
    """A fully resolved run: the command plus its effective settings."""

    command: str
    settings: dict = field(default_factory=dict)

    def __getitem__(self, key):
        return self.settings[key]

    def get(self, key, default=None):
        return self.settings.get(key, default)


def _read_config_file(path: str, command: str) -> dict:
    values = {}
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ParameterError(f"{path}:{lineno}: expected key=value")
        key, _, val = line.partition("=")
        key = key.strip().replace("-", "_")
        val = val.strip()
        if key == "command":
            if val != command:
                raise ParameterError(
                    f"{path} was written by command {val!r}, not {command!r}")
            continue
        if key == "build" or key.startswith("result_"):
            continue
        if key not in _KEY_PARSERS:
            raise ParameterError(f"{path}:{lineno}: unknown key {key!r}")
        values[key] = _KEY_PARSERS[key](val)
    return values


def resolve_config(command: str, args: argparse.Namespace) -> RunConfig:
    """Merge defaults, config file, environment and flags (in that order)."""
    settings = dict(_DEFAULTS[command])
    if getattr(args, "config", None):
        file_vals = _read_config_file(args.config, command)
        for key, val in file_vals.items():
            if key in settings:
                settings[key] = val
    for key in settings:
        env = os.environ.get(_ENV_PREFIX + key.upper())
        if env is not None:
            settings[key] = _KEY_PARSERS[key](env)
    for key in settings:
        flag = getattr(args, key, None)
        if flag is not None:
            settings[key] = flag  # argparse already applied the right type
    return RunConfig(command=command, settings=settings)


def _fmt(value) -> str:
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, (list, tuple)):
        return ",".join(repr(float(v)) for v in value)
    return str(value)


def _compose_manifest(cfg: RunConfig, results: list[tuple[str, str]]) -> str:
    lines = [f"command={cfg.command}"]
    for key in sorted(cfg.settings):
        if key == "threads" or cfg.settings[key] is None:
            continue  # threads is a scheduling knob, never part of the record
        lines.append(f"{key}={_fmt(cfg.settings[key])}")
    lines.append(f"build=sddebem-{__version__}")
    lines.extend(f"result_{key}={val}" for key, val in results)
    return "\n".join(lines) + "\n"


def _emit(outdir: Path, manifest: str, files: dict[str, str]) -> str:
    """Write the manifest and the already-rendered output files; returns
    the manifest hash carried by every CSV."""
    digest = hashlib.sha256(manifest.encode()).hexdigest()
    outdir.mkdir(parents=True, exist_ok=True)
    for name, text in files.items():
        (outdir / name).write_text(text)
    (outdir / "manifest.txt").write_text(manifest)
    return digest


def _csv_text(writer_fn, *args, digest: str) -> str:
    buf = io.StringIO()
    writer_fn(*args, buf, manifest_hash=digest)
    return buf.getvalue()


# ---------------------------------------------------------------------------
# plot script emission (standalone artifacts; the CLI never imports matplotlib)


def _loglog_plot_script(csvname: str, series, xlabel: str, png: str) -> str:
    body = [
        "#!/usr/bin/env python3",
        f'"""Log-log plot of {csvname} with reference slope guides."""',
        "import csv",
        "import matplotlib.pyplot as plt",
        "",
        f'with open("{csvname}") as fh:',
        '    rows = [r for r in csv.reader(fh) if r and not r[0].startswith("#")]',
        "xs = [float(r[0]) for r in rows[1:]]",
    ]
    for col, label, slope in series:
        body += [
            f"ys = [float(r[{col}]) for r in rows[1:]]",
            f'plt.loglog(xs, ys, "o-", label="{label}")',
            f"guide = [ys[0] * (x / xs[0]) ** {slope} for x in xs]",
            f'plt.loglog(xs, guide, "--", label="reference slope {slope}")',
        ]
    body += [
        f'plt.xlabel("{xlabel}")',
        'plt.legend()',
        'plt.grid(True, which="both", alpha=0.4)',
        f'plt.savefig("{png}", dpi=150)',
        f'print("wrote {png}")',
        "",
    ]
    return "\n".join(body)


def _semilog_plot_script(csvname: str, label: str, rate, png: str) -> str:
    body = [
        "#!/usr/bin/env python3",
        f'"""Semilog plot of {csvname} with the fitted decay guide."""',
        "import csv",
        "import math",
        "import matplotlib.pyplot as plt",
        "",
        f'with open("{csvname}") as fh:',
        '    rows = [r for r in csv.reader(fh) if r and not r[0].startswith("#")]',
        "ts = [float(r[0]) for r in rows[1:]]",
        "ys = [float(r[1]) for r in rows[1:]]",
        f'plt.semilogy(ts, ys, label="{label}")',
    ]
    if rate is not None:
        body += [
            f"rate = {rate!r}",
            "guide = [ys[0] * math.exp(rate * t) for t in ts]",
            'plt.semilogy(ts, guide, "--", label=f"exp({rate:.4g} t) guide")',
        ]
    body += [
        'plt.xlabel("t")',
        'plt.legend()',
        'plt.grid(True, which="both", alpha=0.4)',
        f'plt.savefig("{png}", dpi=150)',
        f'print("wrote {png}")',
        "",
    ]
    return "\n".join(body)


# ---------------------------------------------------------------------------
# command implementations


def _solver_cfg(cfg: RunConfig) -> integrator.SolverConfig:
    return integrator.SolverConfig(tol_residual=cfg.get("tol", 1e-12))


def _maybe_dumps(cfg: RunConfig, model, grid_dt: float, T: float) -> list:
    """Render optional debug dumps (first path only); returns rendered
    entries as (filename, render_fn(digest))."""
    pending = []
    if cfg.get("dump_increments"):
        grid = integrator.make_grid(T, model.delay, grid_dt)
        path = brownian.sample_increments(cfg["seed"], 0, grid.N,
                                          model.dim_noise, grid_dt)
        pending.append((cfg["dump_increments"],
                        lambda digest, p=path: _csv_text(
                            brownian.increments_to_csv, p, digest=digest)))
    if cfg.get("dump_trajectory"):
        grid = integrator.make_grid(T, model.delay, grid_dt)
        path = brownian.sample_increments(cfg["seed"], 0, grid.N,
                                          model.dim_noise, grid_dt)
        traj = integrator.bem_integrate(model, grid, path, _solver_cfg(cfg))
        pending.append((cfg["dump_trajectory"],
                        lambda digest, t=traj: _csv_text(
                            integrator.trajectory_to_csv, t, digest=digest)))
    return pending


def _run_convergence(cfg: RunConfig) -> int:
    model = models.get_model(cfg["model"])
    report = analysis.strong_error_at_T(
        model, cfg["T"], cfg["tau"], cfg["dt"], cfg["ref_dt"], cfg["paths"],
        cfg["seed"], _solver_cfg(cfg), threads=cfg["threads"])
    results = [("fitted_order", repr(report.fitted_order)),
               ("fit_residual", repr(report.fit_residual))]
    results += [(f"rms_{_fmt(s)}", repr(e))
                for s, e in zip(report.stepsizes, report.rms_errors)]
    manifest = _compose_manifest(cfg, results)
    digest = hashlib.sha256(manifest.encode()).hexdigest()
    files = {
        "convergence.csv": _csv_text(analysis.convergence_to_csv, report,
                                     digest=digest),
        "convergence_plot.py": _loglog_plot_script(
            "convergence.csv", [(1, "rms error at T", 0.5)], "dt",
            "convergence.png"),
    }
    for name, render in _maybe_dumps(cfg, model, cfg["ref_dt"], cfg["T"]):
        files[name] = render(digest)
    _emit(Path(cfg["out"]), manifest, files)
    print(f"convergence: fitted order {report.fitted_order:.4f} over "
          f"{len(report.stepsizes)} stepsizes, {report.n_paths} paths "
          f"-> {cfg['out']}/convergence.csv")
    return 0


def _run_residuals(cfg: RunConfig) -> int:
    model = models.get_model(cfg["model"])
    report = analysis.estimate_residual_scaling(
        model, cfg["T"], cfg["tau"], cfg["dt"], cfg["ref_dt"], cfg["paths"],
        cfg["seed"], _solver_cfg(cfg), threads=cfg["threads"])
    results = [("slope_mean_sq_R", repr(report.slope_residual)),
               ("slope_mean_sq_R_drift", repr(report.slope_drift_residual))]
    manifest = _compose_manifest(cfg, results)
    digest = hashlib.sha256(manifest.encode()).hexdigest()
    files = {
        "residuals.csv": _csv_text(analysis.residual_to_csv, report,
                                   digest=digest),
        "residuals_plot.py": _loglog_plot_script(
            "residuals.csv",
            [(1, "mean sq residual", 2.0), (2, "mean sq drift residual", 3.0)],
            "dt", "residuals.png"),
    }
    _emit(Path(cfg["out"]), manifest, files)
    print(f"residuals: slopes total {report.slope_residual:.3f} / drift "
          f"{report.slope_drift_residual:.3f} -> {cfg['out']}/residuals.csv")
    return 0


def _run_holder(cfg: RunConfig) -> int:
    model = models.get_model(cfg["model"])
    pairs = [(cfg["t1"], cfg["t1"] + gap) for gap in cfg["gaps"]]
    gaps, moments, exponent = analysis.holder_curve(
        model, cfg["gamma"], pairs, cfg["ref_dt"], cfg["paths"], cfg["seed"],
        T=cfg.get("T"), cfg=_solver_cfg(cfg), threads=cfg["threads"])
    manifest = _compose_manifest(cfg, [("holder_exponent", repr(exponent))])
    digest = hashlib.sha256(manifest.encode()).hexdigest()
    files = {
        "holder.csv": _csv_text(analysis.holder_to_csv, gaps, moments,
                                digest=digest),
        "holder_plot.py": _loglog_plot_script(
            "holder.csv", [(1, "increment moment", 0.5)], "gap", "holder.png"),
    }
    _emit(Path(cfg["out"]), manifest, files)
    print(f"holder: fitted exponent {exponent:.4f} -> {cfg['out']}/holder.csv")
    return 0


def _run_stability(cfg: RunConfig) -> int:
    model = models.get_model(cfg["model"])
    dt = cfg["dt"][0]
    report = analysis.mean_square_trajectory(
        model, cfg["T"], cfg["tau"], dt, cfg["paths"], cfg["seed"],
        _solver_cfg(cfg), threads=cfg["threads"])
    results = [("final_mean_square", repr(float(report.mean_square[-1]))),
               ("decay_rate", repr(report.fitted_decay_rate))]
    for key in ("epsilon_admissible", "epsilon_used", "delta_star"):
        val = getattr(report, key)
        if val is not None:
            results.append((key, repr(val)))
    if report.delta_caps:
        results.append(("min_step_cap", repr(min(report.delta_caps.values()))))
    manifest = _compose_manifest(cfg, results)
    digest = hashlib.sha256(manifest.encode()).hexdigest()
    files = {
        "stability.csv": _csv_text(analysis.stability_to_csv, report,
                                   digest=digest),
        "stability_plot.py": _semilog_plot_script(
            "stability.csv", "E|Z_n|^2", report.fitted_decay_rate,
            "stability.png"),
    }
    for name, render in _maybe_dumps(cfg, model, dt, cfg["T"]):
        files[name] = render(digest)
    _emit(Path(cfg["out"]), manifest, files)
    decay = report.fitted_decay_rate
    print(f"stability: E|Z_N|^2 = {report.mean_square[-1]:.3e}, fitted decay "
          f"rate {decay if decay is None else round(decay, 4)} "
          f"-> {cfg['out']}/stability.csv")
    return 0


def _run_check(cfg: RunConfig) -> int:
    model = models.get_model(cfg["model"])
    cc = model.constants or models.AssumptionConstants()
    sampler = models.SampleSpec(count=cfg["samples"], radius=cfg["radius"],
                                seed=cfg["seed"])
    reports = []
    K = cc.K if cfg.get("K") is None else cfg.get("K")
    q = cc.q if cfg.get("q") is None else cfg.get("q")
    if K is not None and q is not None:
        reports.append(models.check_monotone_condition(model, K, q, sampler))
    diss = [cfg.get(k) if cfg.get(k) is not None else getattr(cc, k)
            for k in ("l", "Gamma", "c1", "c2", "c3", "c4")]
    if all(v is not None for v in diss):
        reports.append(models.check_dissipativity_condition(model, *diss,
                                                            sampler))
    K2 = cc.K2 if cfg.get("K2") is None else cfg.get("K2")
    if K2 is not None:
        reports.append(models.check_initial_holder(model, K2,
                                                   n_pairs=cfg["samples"],
                                                   seed=cfg["seed"]))
    if not reports:
        raise ParameterError(
            "nothing to check: the model declares no constants and none "
            "were supplied (use --K/--q, --l/--Gamma/--c1..--c4, or --K2)")
    results = [(f"violations_{r.check}", str(r.violations)) for r in reports]
    manifest = _compose_manifest(cfg, results)
    digest = hashlib.sha256(manifest.encode()).hexdigest()
    files = {"checks.csv": _csv_text(models.reports_to_csv, reports,
                                     digest=digest)}
    _emit(Path(cfg["out"]), manifest, files)
    for r in reports:
        status = "ok" if r.passed else f"{r.violations} violations"
        print(f"check {r.check}: {status} over {r.samples} samples "
              f"(max excess {r.max_excess:.3e})")
    return 0


def _run_certify(cfg: RunConfig) -> int:
    for key in ("c1", "c2", "c3", "c4"):
        if cfg.get(key) is None:
            raise ParameterError(f"certify requires --{key}")
    eps_star, cap = analysis.admissible_epsilon(
        cfg["c1"], cfg["c2"], cfg["c3"], cfg["c4"], cfg["tau"])
    epsilon = cfg.get("epsilon")
    if epsilon is None:
        epsilon = 0.5 * (eps_star if cap is None else min(eps_star, cap))
    dstar = analysis.delta_star(cfg["c1"], cfg["c2"], epsilon, cfg["tau"])
    caps = {"delta_star": dstar}
    if cfg.get("l") is not None:
        caps["dissipativity"] = (cfg["l"] - 1.0) / (2.0 * cfg["c1"])
    if cfg.get("K") is not None:
        caps["monotonicity"] = 1.0 / cfg["K"]
    results = [("eps_star", repr(eps_star)),
               ("eps_cap", "none" if cap is None else repr(cap)),
               ("epsilon_used", repr(epsilon)),
               ("delta_star", repr(dstar)),
               ("min_step_cap", repr(min(caps.values())))]
    manifest = _compose_manifest(cfg, results)
    _emit(Path(cfg["out"]), manifest, {})
    print(f"eps_star = {eps_star:.6f}")
    print("eps_cap = " + ("none" if cap is None else f"{cap:.6f}"))
    print(f"epsilon_used = {epsilon:.6f}")
    print(f"delta_star = {dstar:.6f}")
    print(f"min_step_cap = {min(caps.values()):.6f}  (caps: "
          + ", ".join(f"{k}={v:.6f}" for k, v in sorted(caps.items())) + ")")
    return 0


_RUNNERS = {
    "convergence": _run_convergence,
    "residuals": _run_residuals,
    "holder": _run_holder,
    "stability": _run_stability,
    "check": _run_check,
    "certify": _run_certify,
}


def run(config: RunConfig) -> int:
    """Execute a resolved run; returns the process exit status."""
    return _RUNNERS[config.command](config)


# ---------------------------------------------------------------------------
# argument parsing


def _add_common(p):
    p.add_argument("--config", help="key=value file (e.g. a manifest.txt)")
    p.add_argument("--out", help="output directory")
    p.add_argument("--seed", type=int, help="base seed of the path streams")
    p.add_argument("--threads", type=int,
                   help="worker threads (never changes results)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="sddebem",
        description="Backward Euler for stochastic delay differential "
                    "equations: convergence, residual, regularity and "
                    "stability experiments.")
    parser.add_argument("--version", action="version",
                        version=f"sddebem {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("convergence", help="strong error at T vs stepsize")
    _add_common(p)
    p.add_argument("--model")
    p.add_argument("--T", type=float)
    p.add_argument("--tau", type=float)
    p.add_argument("--dt", action="append", type=float)
    p.add_argument("--ref-dt", dest="ref_dt", type=float)
    p.add_argument("--paths", type=int)
    p.add_argument("--tol", type=float)
    p.add_argument("--dump-trajectory", dest="dump_trajectory")
    p.add_argument("--dump-increments", dest="dump_increments")

    p = sub.add_parser("residuals", help="one-step residual scaling")
    _add_common(p)
    p.add_argument("--model")
    p.add_argument("--T", type=float)
    p.add_argument("--tau", type=float)
    p.add_argument("--dt", action="append", type=float)
    p.add_argument("--ref-dt", dest="ref_dt", type=float)
    p.add_argument("--paths", type=int)
    p.add_argument("--tol", type=float)

    p = sub.add_parser("holder", help="path increment-moment exponent")
    _add_common(p)
    p.add_argument("--model")
    p.add_argument("--T", type=float)
    p.add_argument("--tau", type=float)
    p.add_argument("--gamma", type=float)
    p.add_argument("--t1", type=float)
    p.add_argument("--gap", dest="gaps", action="append", type=float)
    p.add_argument("--ref-dt", dest="ref_dt", type=float)
    p.add_argument("--paths", type=int)
    p.add_argument("--tol", type=float)

    p = sub.add_parser("stability", help="mean-square trajectory and decay")
    _add_common(p)
    p.add_argument("--model")
    p.add_argument("--T", type=float)
    p.add_argument("--tau", type=float)
    p.add_argument("--dt", action="append", type=float)
    p.add_argument("--paths", type=int)
    p.add_argument("--tol", type=float)
    p.add_argument("--dump-trajectory", dest="dump_trajectory")

    p = sub.add_parser("check", help="sampled structural-condition audit")
    _add_common(p)
    p.add_argument("--model")
    p.add_argument("--samples", type=int)
    p.add_argument("--radius", type=float)
    for name in ("K", "q", "K2", "l", "Gamma", "c1", "c2", "c3", "c4"):
        p.add_argument(f"--{name}", type=float)

    p = sub.add_parser("certify", help="stability step-size certificates")
    _add_common(p)
    p.add_argument("--tau", type=float)
    p.add_argument("--epsilon", type=float)
    for name in ("c1", "c2", "c3", "c4", "l", "K"):
        p.add_argument(f"--{name}", type=float)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    out_hint = None
    try:
        cfg = resolve_config(args.command, args)
        out_hint = cfg.get("out")
        return run(cfg)
    except SddeBemError as exc:
        if isinstance(exc, GridError):
            code = 3
        elif isinstance(exc, SolverError):
            code = 4
        else:
            code = 2
        return _report_failure(exc, code, out_hint)
    except OSError as exc:
        return _report_failure(exc, 5, out_hint)


def _report_failure(exc: Exception, code: int, out_hint) -> int:
    record = {"error": type(exc).__name__, "message": str(exc),
              "exit_code": code}
    print(json.dumps(record), file=sys.stderr)
    if out_hint:
        try:
            outdir = Path(out_hint)
            outdir.mkdir(parents=True, exist_ok=True)
            (outdir / "error.json").write_text(json.dumps(record) + "\n")
        except OSError:
            pass
    return code


def entry() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entry()
