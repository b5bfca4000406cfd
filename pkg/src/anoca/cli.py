"""Command-line entry point: validate, powerflow, hems, dms and simulate.

Exit codes: 0 success, 1 domain or validation failure, 2 I/O or usage error,
3 solver infeasibility.
"""
from __future__ import annotations

import argparse
import csv
import hashlib
import io
import json
import logging
import platform
import sys
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

from . import __version__
from . import dms as dms_mod
from . import hems as hems_mod
from .loop import (SCENARIOS, ScenarioSpec, SimulationError, load_simulation_config,
                   records_jsonl, resolve_network_path, run_simulation, static_setpoints,
                   summary_csv)
from .network import (BatteryParams, NetworkError, NetworkParseError, load_network, parse_network,
                      parse_phases, validate)
from .powerflow import (InjectionSet, NonConvergence, PowerFlowError, SolverOptions,
                        compute_branch_flows, solve_powerflow, voltages_csv)

EXIT_OK, EXIT_DOMAIN, EXIT_IO, EXIT_INFEASIBLE = 0, 1, 2, 3

log = logging.getLogger("anoca")


class UsageError(Exception):
    pass


@dataclass
class RunManifest:
    subcommand: str
    inputs: dict[str, str] = field(default_factory=dict)  # path -> sha256
    options: dict = field(default_factory=dict)
    version: str = __version__
    python: str = platform.python_version()
    seeds: dict[str, int] = field(default_factory=dict)
    timings_s: dict[str, float] = field(default_factory=dict)

    def add_input(self, path: Path) -> None:
        self.inputs[str(path)] = hashlib.sha256(Path(path).read_bytes()).hexdigest()

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True, default=str)


def _positive(text: str) -> float:
    val = float(text)
    if not val > 0:
        raise argparse.ArgumentTypeError(f"must be positive, got {text}")
    return val


def _network(arg: str) -> tuple[Path, object]:
    try:
        path = resolve_network_path(arg)
    except FileNotFoundError as exc:
        raise OSError(str(exc)) from None
    return path, load_network(path)


def _read_key_csv(path: Path, model, cols: tuple[str, ...]) -> dict:
    """Rows keyed by (bus, phase) with numeric columns ``cols``."""
    out = {}
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.DictReader(fh))
    need = {"bus", "phase", *cols}
    if rows and not need <= set(rows[0]):
        raise UsageError(f"{path}: expected columns {', '.join(sorted(need))}")
    for r in rows:
        key = (r["bus"], parse_phases(r["phase"])[0])
        out[key] = tuple(float(r[c]) for c in cols)
    return out


def _emit(text: str, out: Path | None) -> None:
    if out is None:
        sys.stdout.write(text)
    else:
        out.parent.mkdir(parents=True, exist_ok=True)
        out.write_text(text, encoding="utf-8")


def _write_manifest(man: RunManifest, out: Path | None) -> None:
    if out is None:
        return
    target = out / "manifest.json" if out.is_dir() else out.with_name(out.name + ".manifest.json")
    target.write_text(man.to_json(), encoding="utf-8")


# ---------------------------------------------------------------------------
# subcommands


def cmd_validate(args, man: RunManifest) -> int:
    path = Path(args.network)
    if not path.is_file():
        try:
            path = resolve_network_path(args.network)
        except FileNotFoundError:
            raise OSError(f"{args.network}: no such file") from None
    text = path.read_text(encoding="utf-8")
    man.add_input(path)
    try:
        model = parse_network(text, fmt="json" if path.suffix == ".json" else "text", check=False)
    except NetworkParseError as exc:
        print(f"{path}: {exc}", file=sys.stderr)
        return EXIT_DOMAIN
    diags = validate(model)
    for d in diags:
        print(f"{path}: [{d.code}] {d}", file=sys.stderr)
    if not diags:
        print(f"{path}: ok ({len(model.buses)} buses, {len(model.lines)} lines, "
              f"{len(model.transformers)} transformers, {len(model.prosumers)} prosumers)")
    return EXIT_DOMAIN if diags else EXIT_OK


def cmd_powerflow(args, man: RunManifest) -> int:
    path, model = _network(args.network)
    man.add_input(path)
    if args.injections:
        man.add_input(Path(args.injections))
        inj = InjectionSet(_read_key_csv(Path(args.injections), model, ("p_kw", "q_kvar")))
    else:
        inj = InjectionSet.from_loads(model, args.load_scale)
    t0 = time.perf_counter()
    try:
        sol = solve_powerflow(model, inj, SolverOptions(tol=args.tol))
    except NonConvergence as exc:
        res = exc.best.max_residual if exc.best is not None else float("nan")
        print(f"power flow did not converge: {exc} (max residual {res:.3e})", file=sys.stderr)
        return EXIT_DOMAIN
    except KeyError as exc:  # injection at a node the network does not have
        print(f"error: {exc.args[0]}", file=sys.stderr)
        return EXIT_DOMAIN
    man.timings_s["solve"] = time.perf_counter() - t0
    if args.format == "json":
        flows = compute_branch_flows(model, sol)
        doc = {"iterations": sol.iterations, "max_residual": sol.max_residual,
               "voltages": [{"bus": b, "phase": p.value, "v_real": x.real, "v_imag": x.imag,
                             "v_mag_pu": abs(x)} for (b, p), x in zip(sol.nodes, sol.v)],
               "line_loading": [lf.loading.tolist() for lf in flows.lines],
               "transformer_loading": [tf.loading.tolist() for tf in flows.transformers]}
        _emit(json.dumps(doc, indent=2) + "\n", args.out)
    else:
        _emit(voltages_csv(model, sol), args.out)
    print(f"converged in {sol.iterations} iterations, max residual {sol.max_residual:.3e}",
          file=sys.stderr)
    return EXIT_OK


def _battery(args) -> tuple[BatteryParams, list[Path]]:
    if args.battery:
        vals = [float(v) for v in args.battery.split(",")]
        if len(vals) != 5:
            raise UsageError("--battery needs e_max_kwh,p_max_kw,eta_c,eta_d,e_set_kwh")
        return BatteryParams(*vals), []
    if not (args.network and args.prosumer):
        raise UsageError("give --battery or both --network and --prosumer BUS.PHASE")
    path, model = _network(args.network)
    bus, _, ph = args.prosumer.rpartition(".")
    key = (bus, parse_phases(ph)[0])
    for p in model.prosumers:
        if p.key == key:
            return p.battery, [path]
    raise UsageError(f"no prosumer at {args.prosumer}")


def cmd_hems(args, man: RunManifest) -> int:
    batt, paths = _battery(args)
    for p in paths:
        man.add_input(p)
    fpath = Path(args.forecast)
    text = fpath.read_text(encoding="utf-8")
    man.add_input(fpath)
    try:
        fc, tariff = hems_mod.read_forecast_csv(text, args.dt_minutes / 60.0)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    t0 = time.perf_counter()
    try:
        sol = hems_mod.solve_hems(batt, tariff, fc, e_initial=args.e_initial)
    except hems_mod.Infeasible as exc:
        print(f"infeasible at interval {exc.interval}: {exc}", file=sys.stderr)
        return EXIT_INFEASIBLE
    man.timings_s["solve"] = time.perf_counter() - t0
    if args.format == "json":
        doc = {"objective": sol.objective, "gap": sol.gap, "nodes": sol.nodes,
               "oes_kw": float(sol.p_export[0]), "ois_kw": float(sol.p_import[0]),
               "schedule": list(csv.DictReader(io.StringIO(hems_mod.schedule_csv(sol))))}
        _emit(json.dumps(doc, indent=2) + "\n", args.out)
    else:
        _emit(hems_mod.schedule_csv(sol), args.out)
    oes, ois = hems_mod.current_step_setpoints(sol)
    print(f"objective {sol.objective:.6f}, gap {sol.gap:.1f}, OES {oes:.4f} kW, OIS {ois:.4f} kW",
          file=sys.stderr)
    return EXIT_OK


def _scenario_arg(text: str) -> ScenarioSpec:
    if text.isdigit():
        return ScenarioSpec.named(int(text))
    from .loop import _read_mapping, scenario_from_mapping

    raw = _read_mapping(Path(text))
    return scenario_from_mapping(raw.get("scenario", raw))


def cmd_dms(args, man: RunManifest) -> int:
    path, model = _network(args.network)
    man.add_input(path)
    if args.setpoints:
        man.add_input(Path(args.setpoints))
        setpoints = {k: dms_mod.Setpoint(*v) for k, v in
                     _read_key_csv(Path(args.setpoints), model, ("oes_kw", "ois_kw")).items()}
    elif args.scenario:
        setpoints = static_setpoints(model, _scenario_arg(args.scenario))
    else:
        setpoints = {}
    try:
        prob = dms_mod.build_problem(model, setpoints, strategy=args.strategy,
                                     fixed_taps=args.fixed_taps)
    except dms_mod.UnknownProsumer as exc:
        print(str(exc), file=sys.stderr)
        return EXIT_DOMAIN
    try:
        sol = dms_mod.solve_dms(prob)
    except dms_mod.LocallyInfeasible as exc:
        print(f"locally infeasible: most violated constraint {exc.constraint} "
              f"(violation {exc.violation:.3e})", file=sys.stderr)
        return EXIT_INFEASIBLE
    except dms_mod.NonConvergence as exc:
        print(f"curtailment solve did not converge: {exc}", file=sys.stderr)
        return EXIT_DOMAIN
    man.timings_s["solve"] = sol.solve_time
    if args.format == "csv":
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["bus", "phase", "oes_kw", "p_cu_kw", "aes_kw"])
        for p in model.prosumers:
            k = p.key
            w.writerow([p.bus, p.phase.value, f"{sol.oes_kw[k]:.6f}", f"{sol.p_cu_kw[k]:.6f}",
                        f"{sol.aes_kw[k]:.6f}"])
        _emit(buf.getvalue(), args.out)
    else:
        _emit(dms_mod.solution_to_json(prob, sol) + "\n", args.out)
    print(dms_mod.summary_line(sol))
    return EXIT_OK


def cmd_simulate(args, man: RunManifest) -> int:
    cfg_path = Path(args.config)
    if not cfg_path.is_file():
        raise OSError(f"{cfg_path}: no such file")
    man.add_input(cfg_path)
    try:
        loaded = load_simulation_config(cfg_path, network=args.network, scenario_id=args.scenario,
                                        strategy=args.strategy, seed=args.seed)
    except (ValueError, TypeError, KeyError) as exc:
        raise UsageError(f"{cfg_path}: {exc}") from None
    man.add_input(loaded.network_path)
    man.options["config"] = loaded.raw
    man.seeds["forecast_noise"] = loaded.scenario.rng_seed
    out = args.out or Path("anoca_run")
    out.mkdir(parents=True, exist_ok=True)
    t0 = time.perf_counter()
    try:
        records = run_simulation(loaded.config, loaded.scenario)
    except SimulationError as exc:
        print(f"simulation halted at step {exc.step}: {exc.cause}", file=sys.stderr)
        infeasible = isinstance(exc.cause, (hems_mod.Infeasible, dms_mod.LocallyInfeasible))
        return EXIT_INFEASIBLE if infeasible else EXIT_DOMAIN
    finally:
        man.timings_s["simulate"] = time.perf_counter() - t0
        _write_manifest(man, out)
    (out / "steps.jsonl").write_text(records_jsonl(records), encoding="utf-8")
    (out / "summary.csv").write_text(summary_csv(records), encoding="utf-8")
    net = sum(r.net_curtailed_kw for r in records)
    print(f"{len(records)} steps written to {out}; total curtailed {net:.4f} kW")
    return EXIT_OK


# ---------------------------------------------------------------------------
# argument parsing


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="anoca", description=__doc__.splitlines()[0])
    ap.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    ap.add_argument("-v", "--verbose", action="count", default=0)
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("validate", help="check a network file")
    p.add_argument("network", nargs="?")
    p.add_argument("--network", dest="network_opt")

    p = sub.add_parser("powerflow", help="solve a three-phase power flow")
    p.add_argument("--network", required=True)
    p.add_argument("--injections", help="CSV with bus, phase, p_kw, q_kvar (consumption positive)")
    p.add_argument("--load-scale", type=float, default=1.0)
    p.add_argument("--tol", type=_positive, default=1e-8)
    p.add_argument("--out", type=Path)
    p.add_argument("--format", choices=("csv", "json"), default="csv")

    p = sub.add_parser("hems", help="schedule one prosumer battery")
    p.add_argument("--forecast", required=True,
                   help="CSV with tau, p_load_kw, p_pv_kw, c_import, c_export")
    p.add_argument("--battery", help="e_max_kwh,p_max_kw,eta_c,eta_d,e_set_kwh")
    p.add_argument("--network")
    p.add_argument("--prosumer", help="BUS.PHASE of a prosumer in --network")
    p.add_argument("--dt-minutes", type=_positive, default=5.0)
    p.add_argument("--e-initial", type=float)
    p.add_argument("--out", type=Path)
    p.add_argument("--format", choices=("csv", "json"), default="csv")

    p = sub.add_parser("dms", help="solve one curtailment problem")
    p.add_argument("--network", required=True)
    src = p.add_mutually_exclusive_group()
    src.add_argument("--setpoints", help="CSV with bus, phase, oes_kw, ois_kw")
    src.add_argument("--scenario", help=f"scenario id {sorted(SCENARIOS)} or a TOML/JSON file")
    p.add_argument("--strategy", choices=[s.value for s in dms_mod.Strategy], default="l1")
    p.add_argument("--fixed-taps", action="store_true")
    p.add_argument("--out", type=Path)
    p.add_argument("--format", choices=("csv", "json"), default="json")

    p = sub.add_parser("simulate", help="run the receding-horizon co-simulation")
    p.add_argument("config", help="TOML or JSON simulation config")
    p.add_argument("--network")
    p.add_argument("--scenario", type=int, choices=sorted(SCENARIOS))
    p.add_argument("--strategy", choices=[s.value for s in dms_mod.Strategy])
    p.add_argument("--seed", type=int)
    p.add_argument("--out", type=Path)
    return ap


COMMANDS = {"validate": cmd_validate, "powerflow": cmd_powerflow, "hems": cmd_hems,
            "dms": cmd_dms, "simulate": cmd_simulate}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_IO if exc.code not in (0, None) else EXIT_OK
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(levelname)s %(name)s: %(message)s")
    if args.command == "validate":
        args.network = args.network or args.network_opt
        if not args.network:
            parser.print_usage(sys.stderr)
            return EXIT_IO
    options = {k: (str(v) if isinstance(v, Path) else v) for k, v in vars(args).items()}
    man = RunManifest(args.command, options=options)
    if getattr(args, "seed", None) is not None:
        man.seeds["cli"] = args.seed
    try:
        code = COMMANDS[args.command](args, man)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_IO
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (NetworkError, PowerFlowError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DOMAIN
    if args.command != "simulate" and getattr(args, "out", None) is not None and code == EXIT_OK:
        _write_manifest(man, args.out)
    return code


if __name__ == "__main__":
    raise SystemExit(main())
