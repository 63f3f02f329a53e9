"""Command-line front end.

Subcommands: ``simulate``, ``sweep``, ``bound``, ``compare`` and
``list-scenarios``. Exit status is 0 on success, 2 for usage or
configuration problems and 3 for faults raised while simulating.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
import yaml

from . import harness as hn
from .eso import BoundSpec, estimation_error_bound
from .faults import ConfigError, DegenerateConstraint, InfeasibleQP, InvalidParameter, SingularMassMatrix

EXIT_OK, EXIT_USAGE, EXIT_FAULT = 0, 2, 3
FORMATS = ("csv", "json")
_RUNTIME_FAULTS = (InfeasibleQP, SingularMassMatrix, DegenerateConstraint, ArithmeticError)


class UsageError(Exception):
    pass


@dataclass
class RunConfig:
    """Everything a run needs besides the subcommand arguments.

    ``scenario`` is a built-in name or an inline scenario document (a mapping,
    optionally with ``base: <builtin name>``).
    """

    scenario: str | dict = "sim_tracking"
    output_dir: str = "out"
    formats: tuple = ("csv",)
    plot: bool = False
    overrides: dict = field(default_factory=dict)

    def build(self) -> hn.Scenario:
        if isinstance(self.scenario, dict):
            scn = hn.scenario_from_dict(self.scenario)
        else:
            scenarios = hn.builtin_scenarios()
            if self.scenario not in scenarios:
                raise ConfigError(f"unknown scenario {self.scenario!r}")
            scn = scenarios[self.scenario]
        return hn.with_overrides(scn, self.overrides)


def load_config_file(path) -> dict:
    """Read a YAML (or JSON, which YAML also parses) run configuration."""
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    try:
        doc = json.loads(text) if str(path).endswith(".json") else yaml.safe_load(text)
    except (json.JSONDecodeError, yaml.YAMLError) as exc:
        raise ConfigError(f"cannot parse config {path}: {exc}") from None
    if not isinstance(doc, dict):
        raise ConfigError("config document must be a mapping")
    return doc


def _run_config(args) -> RunConfig:
    doc = load_config_file(args.config) if getattr(args, "config", None) else {}
    unknown = set(doc) - {"scenario", "output_dir", "formats", "plot", "overrides"}
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    cfg = RunConfig(
        scenario=doc.get("scenario", "sim_tracking"),
        output_dir=doc.get("output_dir", "out"),
        formats=tuple(doc.get("formats", ("csv",))),
        plot=bool(doc.get("plot", False)),
        overrides=dict(doc.get("overrides") or {}),
    )
    if args.scenario:
        cfg.scenario = args.scenario
    if args.out:
        cfg.output_dir = args.out
    if getattr(args, "format", None):
        cfg.formats = tuple(args.format)
    if getattr(args, "plot", False):
        cfg.plot = True
    for item in args.set or ():
        key, sep, raw = item.partition("=")
        if not sep or not key:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        cfg.overrides[key] = yaml.safe_load(raw)
    if getattr(args, "filter", None):
        cfg.overrides["filter_variant"] = args.filter
    bad = set(cfg.formats) - set(FORMATS)
    if bad:
        raise ConfigError(f"unknown export formats: {sorted(bad)}")
    return cfg


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2) + "\n")


def _trace_json(trace: hn.Trace) -> dict:
    rows = trace.table()
    return {"columns": list(hn.TRACE_COLUMNS), "rows": rows}


def _plot_trace(trace: hn.Trace, out: Path, tag: str = "") -> list:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    out.mkdir(parents=True, exist_ok=True)
    files = []
    fig, axes = plt.subplots(3, 1, sharex=True, figsize=(7, 6))
    for i, ax in enumerate(axes):
        ax.plot(trace.t, trace.q_ref[:, i], "k--", lw=1, label="reference")
        ax.plot(trace.t, trace.q[:, i], lw=1.2, label="measured")
        ax.set_ylabel(f"q{i + 1} [rad]")
    axes[0].legend(loc="upper right")
    axes[-1].set_xlabel("t [s]")
    fig.tight_layout()
    files.append(out / f"joints{tag}.png")
    fig.savefig(files[-1], dpi=120)
    plt.close(fig)
    if trace.h is not None:
        fig, ax = plt.subplots(figsize=(7, 3))
        ax.plot(trace.t, trace.h, lw=1.2)
        ax.axhline(0.0, color="r", lw=1)
        ax.set_xlabel("t [s]")
        ax.set_ylabel("h [m]")
        fig.tight_layout()
        files.append(out / f"barrier{tag}.png")
        fig.savefig(files[-1], dpi=120)
        plt.close(fig)
    return files


def _plot_compare(traces: dict, out: Path) -> list:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt
    from . import arm_dynamics as ad

    out.mkdir(parents=True, exist_ok=True)
    files = []
    if all(tr.h is not None for tr in traces.values()):
        fig, ax = plt.subplots(figsize=(7, 3.5))
        for name, tr in traces.items():
            ax.plot(tr.t, tr.h, lw=1.2, label=name)
        ax.axhline(0.0, color="k", lw=0.8)
        ax.set_xlabel("t [s]")
        ax.set_ylabel("h [m]")
        ax.legend()
        fig.tight_layout()
        files.append(out / "barrier_compare.png")
        fig.savefig(files[-1], dpi=120)
        plt.close(fig)
    fig, ax = plt.subplots(figsize=(5, 5))
    for name, tr in traces.items():
        p = tr.arm.vector
        xyz = np.array([ad._fk(p, np.ascontiguousarray(q)) for q in tr.q])
        ax.plot(xyz[:, 0], xyz[:, 1], lw=1.2, label=name)
    ax.set_xlabel("x [m]")
    ax.set_ylabel("y [m]")
    ax.set_aspect("equal", adjustable="datalim")
    ax.legend()
    fig.tight_layout()
    files.append(out / "trajectory_compare.png")
    fig.savefig(files[-1], dpi=120)
    plt.close(fig)
    return files


def cmd_simulate(args) -> int:
    cfg = _run_config(args)
    scn = cfg.build()
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    resolved = hn.calibrate(scn)
    trace = hn.run(resolved)
    m = hn.scenario_metrics(resolved, trace)
    if "csv" in cfg.formats:
        hn.write_trace_csv(trace, out / "trace.csv")
    if "json" in cfg.formats:
        _write_json(out / "trace.json", _trace_json(trace))
    _write_json(out / "metrics.json", m.to_dict())
    _write_json(out / "scenario.json", hn.scenario_to_dict(resolved))
    if cfg.plot:
        _plot_trace(trace, out / "plots")
    print(json.dumps({"scenario": scn.name, **m.to_dict()}))
    return EXIT_OK


_SWEEP_HEADER = ("parameter", "value", "reported_only", "joint_rmse1", "joint_rmse2",
                 "joint_rmse3", "cartesian_rmse1", "cartesian_rmse2", "cartesian_rmse3",
                 "min_h", "transient_time", "intervention_fraction")


def _cell(v) -> str:
    if v is None:
        return ""
    if isinstance(v, bool):
        return str(v).lower()
    if isinstance(v, float):
        return repr(v)
    if isinstance(v, (list, tuple)):
        return " ".join(_cell(x) for x in v)
    return str(v)


def cmd_sweep(args) -> int:
    cfg = _run_config(args)
    scn = cfg.build()
    if args.param is not None:
        if not args.values:
            raise ConfigError("sweep needs at least one value")
        values = [yaml.safe_load(v) for v in args.values]
        results = hn.run_sweep(scn, args.param, values)
    else:
        if args.values:
            raise ConfigError("--values given without --param")
        results = hn.run_sweep(scn)
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    lines = [",".join(_SWEEP_HEADER)]
    for r in results:
        m = r.metrics
        lines.append(",".join(_cell(v) for v in (
            r.parameter, r.value, r.reported_only, *m.joint_rmse, *m.cartesian_rmse,
            m.min_h, m.transient_time, m.intervention_fraction)))
    text = "\n".join(lines) + "\n"
    (out / "sweep.csv").write_text(text)
    sys.stdout.write(text)
    if cfg.plot:
        for i, r in enumerate(results):
            _plot_trace(r.trace, out / "plots", tag=f"_{i}")
    return EXIT_OK


def cmd_bound(args) -> int:
    omegas = list(args.omega)
    if len(omegas) not in (1, 3):
        raise UsageError("--omega takes one value or one per joint")
    if not args.ts > 0 or args.lf < 0 or any(not w > 0 for w in omegas):
        raise ConfigError("need omega > 0, t_s > 0 and l_f >= 0")
    if len(omegas) == 1:
        omegas = omegas * 3
    for i, w in enumerate(omegas, start=1):
        b = estimation_error_bound(BoundSpec.from_bandwidth(w, args.lf, args.ts))
        print(f"joint {i}: omega_o={w:g} t_s={args.ts:g} l_f={args.lf:g} "
              f"gamma={b.gamma:.6e} terms={b.truncation_terms}")
    return EXIT_OK


def _unique_names(variants) -> list:
    seen: dict = {}
    names = []
    for v in variants:
        seen[v] = seen.get(v, 0) + 1
        names.append(v if seen[v] == 1 else f"{v}#{seen[v]}")
    return names


def cmd_compare(args) -> int:
    if len(args.variants) < 2:
        raise UsageError("compare needs at least two variants")
    cfg = _run_config(args)
    scn = cfg.build()
    variants = [hn.FilterVariant(v).value for v in args.variants]
    names = _unique_names(variants)
    traces, table = {}, {}
    for name, v in zip(names, variants):
        cur = hn.calibrate(replace(scn, filter_variant=v, sweep=None))
        traces[name] = hn.run(cur)
        table[name] = hn.scenario_metrics(cur, traces[name]).to_dict()
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    header = [f"{n}.{c}" for n in names for c in hn.TRACE_COLUMNS]
    tables = [traces[n].table() for n in names]
    with open(out / "compare.csv", "w") as fh:
        fh.write(",".join(header) + "\n")
        for rows in zip(*tables):
            cells = [_cell(None if v is None else float(v)) for row in rows for v in row]
            fh.write(",".join(cells) + "\n")
    _write_json(out / "compare_metrics.json", table)
    if cfg.plot:
        _plot_compare(traces, out / "plots")
    for n in names:
        print(f"{n}: min_h={table[n]['min_h']} joint_rmse={table[n]['joint_rmse']}")
    return EXIT_OK


def cmd_list(args) -> int:
    for name, scn in hn.builtin_scenarios().items():
        print(f"{name}: {scn.description}")
    return EXIT_OK


def _add_run_args(p):
    p.add_argument("--scenario", help="built-in scenario name")
    p.add_argument("--config", help="YAML or JSON run configuration")
    p.add_argument("--set", action="append", metavar="KEY=VALUE",
                   help="override a scenario field by dotted key (repeatable)")
    p.add_argument("--out", help="output directory")
    p.add_argument("--plot", action="store_true", help="write PNG plots")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="esoarm", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="run one scenario and export trace and metrics")
    _add_run_args(p)
    p.add_argument("--filter", choices=[v.value for v in hn.FilterVariant])
    p.add_argument("--format", action="append", choices=FORMATS)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("sweep", help="run a one-parameter sweep")
    _add_run_args(p)
    p.add_argument("--param", help="dotted key to sweep (default: the scenario's own sweep)")
    p.add_argument("--values", nargs="*", help="values (YAML scalars or lists)")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("bound", help="print the observer estimation-error bound")
    p.add_argument("--omega", type=float, nargs="+", required=True)
    p.add_argument("--ts", type=float, default=1e-4)
    p.add_argument("--lf", type=float, required=True)
    p.set_defaults(func=cmd_bound)

    p = sub.add_parser("compare", help="run several safety filters on one scenario")
    _add_run_args(p)
    p.add_argument("--variants", nargs="+", required=True,
                   choices=[v.value for v in hn.FilterVariant])
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("list-scenarios", help="list built-in scenarios")
    p.set_defaults(func=cmd_list)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code else EXIT_OK
    try:
        return args.func(args)
    except (UsageError, ConfigError, InvalidParameter) as exc:
        print(f"{type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except _RUNTIME_FAULTS as exc:
        print(f"{type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_FAULT


if __name__ == "__main__":
    sys.exit(main())
