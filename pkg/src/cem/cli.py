"""Operator command line: check, deploy, undeploy, call, run, analyze.

Exit codes: 0 on success, 1 when a check, verdict, or expectation fails,
2 for usage or I/O errors.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from . import __version__
from .analyzer import aggregate, aggregate_log, parse_log, paper_fixture, render_csv, render_table
from .encoding import trace_lines
from .manager import Accepted, Registry
from .model import CemError, Module
from .parser import ParseError, parse_expr, parse_modules, parse_system, render_value
from .runtime import RoundRobin, SeededRandom, as_value
from .scenario import run_scenario_file
from .typecheck import (
    CheckFailure,
    Diagnostic,
    EnvEntry,
    GlobalEnv,
    check_module,
    check_system,
    infer_thread_env,
)


def _is_system_text(text: str) -> bool:
    from .parser import tokenize

    return any(t.kind == "ident" and t.text == "service" for t in tokenize(text))


def _print_diagnostics(diags: list[Diagnostic], machine: bool) -> None:
    for d in diags:
        if machine:
            print(json.dumps(d.as_dict(), sort_keys=True))
        else:
            where = f" [{d.service}]" if d.service else ""
            at = f" at {d.loc[0]}:{d.loc[1]}" if d.loc else ""
            print(f"error{where}{at}: {d.code}: {d.message}", file=sys.stderr)


def _check_batch(modules: list[Module]) -> list[Diagnostic]:
    provided: dict[str, GlobalEnv] = {}
    diags: list[Diagnostic] = []
    from .model import signature_of

    for m in modules:
        try:
            env: GlobalEnv = {}
            for entry in signature_of(m).entries:
                env[entry.key] = EnvEntry(m.name, entry.name, entry.type)
            provided[m.name] = env
        except CemError as e:
            diags.append(Diagnostic(getattr(e, "code", "Error"), str(e), m.name))
    if diags:
        return diags
    for m in modules:
        c: GlobalEnv = {}
        for other, env in provided.items():
            if other != m.name:
                c.update(env)
        try:
            check_module(c, m)
        except CheckFailure as e:
            diags.extend(e.diagnostics)
        except CemError as e:
            diags.append(
                Diagnostic(getattr(e, "code", "Error"), str(e), m.name, getattr(e, "key", None))
            )
    return diags


def cmd_check(args: argparse.Namespace) -> int:
    machine = args.format == "machine"
    modules: list[Module] = []
    diags: list[Diagnostic] = []
    for name in args.files:
        try:
            text = Path(name).read_text()
        except OSError as e:
            print(f"cannot read {name}: {e}", file=sys.stderr)
            return 2
        try:
            if _is_system_text(text):
                u = parse_system(text, name)
                check_system(infer_thread_env(u), u)
            else:
                modules.extend(parse_modules(text, name))
        except CheckFailure as e:
            diags.extend(e.diagnostics)
        except CemError as e:
            diags.append(Diagnostic(getattr(e, "code", "Error"), str(e)))
    if not diags and modules:
        diags.extend(_check_batch(modules))
    _print_diagnostics(diags, machine)
    if not diags and not machine:
        print("ok")
    return 1 if diags else 0


def _load_registry(state: str | None) -> Registry:
    if state and Path(state).exists():
        return Registry.load(state)
    return Registry()


def _save_registry(reg: Registry, state: str | None) -> None:
    if state:
        reg.save(state)


def cmd_deploy(args: argparse.Namespace) -> int:
    machine = args.format == "machine"
    reg = _load_registry(args.state)
    modules: list[Module] = []
    for name in args.files:
        try:
            text = Path(name).read_text()
        except OSError as e:
            print(f"cannot read {name}: {e}", file=sys.stderr)
            return 2
        modules.extend(parse_modules(text, name))
    outcome = reg.preflight_deploy(modules)
    _save_registry(reg, args.state)
    if isinstance(outcome, Accepted):
        if machine:
            print(json.dumps({"accepted": True, "labels": outcome.labels}, sort_keys=True))
        else:
            labels = ", ".join(f"{n}@{l}" for n, l in outcome.labels.items())
            print(f"accepted: {labels}")
        return 0
    if machine:
        payload = {
            "accepted": False,
            "diagnostics": [d.as_dict() for d in outcome.diagnostics],
        }
        if outcome.verdict is not None:
            payload["violations"] = [v.as_dict() for v in outcome.verdict.violations]
        print(json.dumps(payload, sort_keys=True))
    else:
        print("rejected:", file=sys.stderr)
        _print_diagnostics(list(outcome.diagnostics), machine)
        if outcome.verdict is not None and not outcome.verdict.ok:
            print(outcome.verdict.render(), end="", file=sys.stderr)
    return 1


def cmd_undeploy(args: argparse.Namespace) -> int:
    machine = args.format == "machine"
    reg = _load_registry(args.state)
    outcome = reg.preflight_undeploy(set(args.names))
    _save_registry(reg, args.state)
    if isinstance(outcome, Accepted):
        print(json.dumps({"accepted": True}) if machine else "accepted")
        return 0
    if machine:
        print(
            json.dumps(
                {"accepted": False, "diagnostics": [d.as_dict() for d in outcome.diagnostics]},
                sort_keys=True,
            )
        )
    else:
        print("rejected:", file=sys.stderr)
        _print_diagnostics(list(outcome.diagnostics), machine)
    return 1


def cmd_call(args: argparse.Namespace) -> int:
    machine = args.format == "machine"
    reg = _load_registry(args.state)
    if "." not in args.target:
        print("call target must be Service.Function", file=sys.stderr)
        return 2
    service, _, fn = args.target.partition(".")
    try:
        expr = parse_expr(args.argument)
    except ParseError as e:
        print(str(e), file=sys.stderr)
        return 2
    arg = as_value(expr, ())
    if arg is None:
        print("argument must be a literal value", file=sys.stderr)
        return 2
    policy = SeededRandom(args.seed) if args.seed is not None else RoundRobin()
    try:
        result = reg.call_endpoint(service, fn, arg, policy, args.fuel)
    except CemError as e:
        print(str(e), file=sys.stderr)
        return 1
    _save_registry(reg, args.state)
    if args.trace:
        Path(args.trace).write_bytes(trace_lines(list(result.records)))
    if machine:
        print(json.dumps({"value": render_value(result.value), "events": len(result.events)}))
    else:
        print(render_value(result.value))
    return 0


def cmd_run(args: argparse.Namespace) -> int:
    reg = _load_registry(args.state)
    try:
        report, reg = run_scenario_file(args.scenario, reg, args.seed, args.fuel)
    except OSError as e:
        print(f"cannot read {args.scenario}: {e}", file=sys.stderr)
        return 2
    except CemError as e:
        print(str(e), file=sys.stderr)
        return 1
    _save_registry(reg, args.state)
    if args.trace:
        Path(args.trace).write_bytes(trace_lines(report.trace_records))
    if args.format == "machine":
        for s in report.steps:
            print(
                json.dumps(
                    {"line": s.line, "command": s.command, "ok": s.ok, "message": s.message},
                    sort_keys=True,
                )
            )
    else:
        print(report.render(), end="")
    return 0 if report.ok else 1


def cmd_analyze(args: argparse.Namespace) -> int:
    if args.fixtures == "paper":
        rows = aggregate(paper_fixture())
    elif args.logfile:
        try:
            text = Path(args.logfile).read_text()
        except OSError as e:
            print(f"cannot read {args.logfile}: {e}", file=sys.stderr)
            return 2
        try:
            rows = aggregate_log(parse_log(text))
        except CemError as e:
            print(str(e), file=sys.stderr)
            return 1
    else:
        print("analyze needs a log file or --fixtures paper", file=sys.stderr)
        return 2
    if args.plot:
        from .figures import render_safe_broken_figure

        render_safe_broken_figure(rows, args.plot)
    if args.format == "machine":
        print(render_csv(rows), end="")
    else:
        print(render_table(rows), end="")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="cem",
        description="Contract evolution toolkit: static compatibility preflight, "
        "proxy-handshake simulation, and change analysis for service modules.",
    )
    parser.add_argument("--version", action="version", version=f"cem {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p: argparse.ArgumentParser, state: bool = True) -> None:
        p.add_argument("--format", choices=["text", "machine"], default="text")
        if state:
            p.add_argument("--state", help="registry state file to resume and update")

    p = sub.add_parser("check", help="parse and typecheck modules or a system snapshot")
    p.add_argument("files", nargs="+")
    common(p, state=False)
    p.set_defaults(fn=cmd_check)

    p = sub.add_parser("deploy", help="preflight and deploy a batch of modules")
    p.add_argument("files", nargs="+")
    common(p)
    p.set_defaults(fn=cmd_deploy)

    p = sub.add_parser("undeploy", help="preflight and remove services")
    p.add_argument("names", nargs="+")
    common(p)
    p.set_defaults(fn=cmd_undeploy)

    p = sub.add_parser("call", help="call Service.Function with a literal argument")
    p.add_argument("target")
    p.add_argument("argument")
    p.add_argument("--seed", type=int)
    p.add_argument("--fuel", type=int, default=10_000)
    p.add_argument("--trace", help="write the call trace as newline-delimited records")
    common(p)
    p.set_defaults(fn=cmd_call)

    p = sub.add_parser("run", help="execute a scenario script")
    p.add_argument("scenario")
    p.add_argument("--seed", type=int)
    p.add_argument("--fuel", type=int, default=10_000)
    p.add_argument("--trace", help="write the scenario trace as newline-delimited records")
    common(p)
    p.set_defaults(fn=cmd_run)

    p = sub.add_parser("analyze", help="aggregate a deployment change log")
    p.add_argument("logfile", nargs="?")
    p.add_argument("--fixtures", choices=["paper"], help="use the bundled aggregate dataset")
    p.add_argument("--plot", help="also render a safe/broken figure to this image file")
    common(p, state=False)
    p.set_defaults(fn=cmd_analyze)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except ParseError as e:
        print(str(e), file=sys.stderr)
        return 1
    except CemError as e:
        print(str(e), file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
