"""Command-line front end for presets and JSON scenario files.

Exit codes: 0 success, 1 configuration or I/O error, 2 simulation
divergence, 3 acceptance failure (only with ``--check``).
"""
from __future__ import annotations

import argparse
import logging
import math
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import _backend
from .config import PRESETS, ConfigError, parse_config
from .metrics import REPORTED, MetricsError, scenario_report
from .simengine import COLUMNS, ScenarioError, SimResult, SimulationDiverged, run

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_DIVERGED = 2
EXIT_CHECK = 3

CSV_FORMAT = "%.12g"

log = logging.getLogger("hdtsim")


class OutputError(OSError):
    pass


# -------------------------------------------------------------------- output

def emit_csv(result: SimResult | np.ndarray, path) -> Path:
    """Write records with the fixed column header; identical input gives identical bytes."""
    data = result.data if isinstance(result, SimResult) else np.asarray(result, dtype=float)
    if data.ndim != 2 or data.shape[0] == 0:
        raise ValueError("no records to write")
    if data.shape[1] != len(COLUMNS):
        raise ValueError(f"expected {len(COLUMNS)} columns, got {data.shape[1]}")
    path = Path(path)
    try:
        np.savetxt(path, data, fmt=CSV_FORMAT, delimiter=",", header=",".join(COLUMNS), comments="")
    except OSError as exc:
        raise OutputError(f"{path}: cannot write CSV: {exc.strerror}") from None
    return path


def read_csv(path) -> np.ndarray:
    """Inverse of :func:`emit_csv`; checks the header."""
    path = Path(path)
    with path.open() as fh:
        header = fh.readline().strip().split(",")
    if tuple(header) != COLUMNS:
        raise ValueError(f"{path}: unexpected CSV header")
    return np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)


# panel key -> (title, unit, columns)
PANELS = {
    "voltage": ("load voltage dq0", "V", ("v_d", "v_q", "v_0", "v_star")),
    "pf": ("power factor at the grid interface", "PF", ("pf",)),
    "grid_current": ("grid-side current dq0", "A", ("ibeta_d", "ibeta_q", "ibeta_0")),
    "vdc": ("DC-link voltage", "V", ("v_dc",)),
    "power": ("load active power", "W", ("p", "p_star")),
    "frequency": ("grid frequency", "Hz", ("f",)),
}

SCENARIO_PANELS = {
    "voltage_regulation": ("voltage", "vdc"),
    "pf_correction": ("pf", "voltage", "vdc"),
    "phase_balancing": ("grid_current", "vdc", "voltage"),
    "frequency_regulation": ("power", "frequency", "voltage", "vdc"),
}


def panels_for(name: str | None) -> tuple[str, ...]:
    return SCENARIO_PANELS.get(name, tuple(PANELS))


def emit_plots(result: SimResult, prefix, panels=None) -> list[Path]:
    """One SVG per panel at ``<prefix>_<panel>.svg``; output is byte-deterministic."""
    if len(result) == 0:
        raise ValueError("no records to plot")
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    names = panels or panels_for(result.spec.criteria or result.spec.name)
    prefix = Path(prefix)
    t = result["t"]
    written = []
    with matplotlib.rc_context({"svg.hashsalt": "hdtsim", "svg.fonttype": "path"}):
        for key in names:
            title, unit, cols = PANELS[key]
            fig, ax = plt.subplots(figsize=(8, 3.5))
            for col in cols:
                ax.plot(t, result[col], label=col, linewidth=0.8)
            ax.set_title(title)
            ax.set_xlabel("t [s]")
            ax.set_ylabel(unit)
            ax.grid(True, linewidth=0.3)
            if len(cols) > 1:
                ax.legend(loc="best", fontsize="small")
            fig.tight_layout()
            out = prefix.parent / f"{prefix.name}_{key}.svg"
            try:
                fig.savefig(out, format="svg", metadata={"Date": None})
            except OSError as exc:
                raise OutputError(f"{out}: cannot write plot: {exc.strerror}") from None
            finally:
                plt.close(fig)
            written.append(out)
    return written


def write_text(path, text: str) -> Path:
    path = Path(path)
    try:
        path.write_text(text)
    except OSError as exc:
        raise OutputError(f"{path}: cannot write: {exc.strerror}") from None
    return path


# ------------------------------------------------------------------- running

@dataclass
class Job:
    source: str
    out: str | None = None
    report: str | None = None
    plot: str | None = None
    check: bool = False
    dt: float | None = None
    integrator: str | None = None
    backend: str | None = None


@dataclass
class Outcome:
    source: str
    code: int
    messages: list


def _load(job: Job):
    spec = parse_config(job.source)
    if job.dt is not None:
        if not (math.isfinite(job.dt) and job.dt > 0.0):
            raise ConfigError(f"--dt: must be positive, got {job.dt!r}")
        spec.dt = job.dt
    if job.integrator is not None:
        spec.integrator = job.integrator
    try:
        return spec.validate()
    except ScenarioError as exc:
        raise ConfigError(str(exc)) from None


def execute(job: Job) -> Outcome:
    """Run one scenario end to end and map the result to an exit code."""
    msgs = []
    try:
        spec = _load(job)
    except ConfigError as exc:
        return Outcome(job.source, EXIT_CONFIG, [f"config error: {exc}"])
    code = EXIT_OK
    try:
        result = run(spec, backend=job.backend)
    except SimulationDiverged as exc:
        result = exc.result
        msgs.append(f"diverged: {exc}")
        code = EXIT_DIVERGED
    except (RuntimeError, ValueError) as exc:
        return Outcome(job.source, EXIT_CONFIG, [f"error: {exc}"])
    msgs.append(f"{spec.name}: {len(result)} records, backend={result.backend}")
    try:
        if job.out and len(result):
            emit_csv(result, job.out)
            msgs.append(f"wrote {job.out}")
        if job.plot and len(result):
            for p in emit_plots(result, job.plot):
                msgs.append(f"wrote {p}")
        want_report = job.check or job.report
        criteria = spec.criteria or spec.name
        if want_report and criteria in REPORTED:
            rep = scenario_report(result)
            msgs.extend(rep.lines())
            if job.report:
                write_text(job.report, rep.to_json() + "\n")
                msgs.append(f"wrote {job.report}")
            if job.check and not rep.overall and code == EXIT_OK:
                code = EXIT_CHECK
        elif want_report:
            msgs.append(f"no acceptance criteria registered for {criteria!r}")
            if job.check and code == EXIT_OK:
                code = EXIT_CHECK
    except (OutputError, MetricsError) as exc:
        msgs.append(f"error: {exc}")
        code = code or EXIT_CONFIG
    return Outcome(job.source, code, msgs)


def _sweep_jobs(args) -> list[Job]:
    out_dir = Path(args.out_dir)
    stems: dict[str, int] = {}
    jobs = []
    for src in args.configs:
        stem = src if src in PRESETS else Path(src).stem
        n = stems.get(stem, 0)
        stems[stem] = n + 1
        if n:
            stem = f"{stem}_{n}"
        jobs.append(Job(
            source=src,
            out=str(out_dir / f"{stem}.csv"),
            report=str(out_dir / f"{stem}.report.json"),
            plot=str(out_dir / stem) if args.plot else None,
            check=args.check, dt=args.dt, integrator=args.integrator, backend=args.backend,
        ))
    return jobs


# ------------------------------------------------------------------- parsing

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_CONFIG, f"{self.prog}: error: {message}\n")


def _common(p):
    p.add_argument("--dt", type=float, help="override the integration step [s]")
    p.add_argument("--integrator", choices=("euler", "rk4"))
    p.add_argument("--backend", choices=_backend.CHOICES,
                   help="step-loop implementation (default: HDTSIM_BACKEND or auto)")
    p.add_argument("--check", action="store_true",
                   help="evaluate acceptance criteria; exit 3 if any fails")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="hdtsim", description="Averaged hybrid distribution transformer simulator.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p_run = sub.add_parser("run", help="simulate one scenario")
    src = p_run.add_mutually_exclusive_group(required=True)
    src.add_argument("--scenario", choices=PRESETS, help="built-in preset")
    src.add_argument("--config", help="JSON scenario file")
    p_run.add_argument("--out", help="CSV output path")
    p_run.add_argument("--report", help="JSON report path")
    p_run.add_argument("--plot", help="SVG path prefix")
    _common(p_run)

    p_sweep = sub.add_parser("sweep", help="simulate several scenarios in parallel")
    p_sweep.add_argument("configs", nargs="+", help="preset names or JSON files")
    p_sweep.add_argument("--out-dir", required=True, help="directory for per-scenario outputs")
    p_sweep.add_argument("--jobs", type=int, default=None, help="worker processes")
    p_sweep.add_argument("--plot", action="store_true", help="also write SVG panels")
    _common(p_sweep)

    sub.add_parser("presets", help="list built-in presets")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")

    if args.command == "presets":
        print("\n".join(PRESETS))
        return EXIT_OK

    if args.command == "run":
        job = Job(source=args.scenario or args.config, out=args.out, report=args.report,
                  plot=args.plot, check=args.check, dt=args.dt, integrator=args.integrator,
                  backend=args.backend)
        outcome = execute(job)
        stream = sys.stdout if outcome.code == EXIT_OK else sys.stderr
        for m in outcome.messages:
            print(m, file=stream)
        return outcome.code

    out_dir = Path(args.out_dir)
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        print(f"error: {out_dir}: {exc.strerror}", file=sys.stderr)
        return EXIT_CONFIG
    jobs = _sweep_jobs(args)
    if args.jobs is not None and args.jobs < 1:
        print("error: --jobs must be >= 1", file=sys.stderr)
        return EXIT_CONFIG
    with ProcessPoolExecutor(max_workers=args.jobs) as pool:
        outcomes = list(pool.map(execute, jobs))
    for oc in outcomes:
        log.info("%s finished with code %d", oc.source, oc.code)
        for m in oc.messages:
            print(f"[{oc.source}] {m}")
    codes = {oc.code for oc in outcomes}
    for code in (EXIT_CONFIG, EXIT_DIVERGED, EXIT_CHECK):
        if code in codes:
            return code
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
