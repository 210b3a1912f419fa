"""Scripted scenarios: an ordered list of deploy/undeploy/call commands with
inline expectations, executed against a fresh or resumed registry.

Line-oriented format (``#`` starts a comment):

    seed 42
    deploy catalog_v1.cem marketing_v1.cem backoffice_v1.cem
    expect accept
    call Backoffice.Improve(1)
    expect "OK"
    expect events Rejected = 2
    undeploy Backoffice
    expect reject

``expect <literal>`` checks the last call's result; ``expect accept`` and
``expect reject`` check the last deploy/undeploy verdict; ``expect events
<Event> = <n>`` counts events in the last call's trace. File paths are
resolved relative to the scenario file.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

from . import runtime
from .encoding import event_to_record
from .manager import Accepted, CallResult, Outcome, Registry, RejectedOp
from .model import CemError, Value
from .parser import parse_expr, parse_module, render_value
from .runtime import Deployed, RoundRobin, SchedulerPolicy, SeededRandom, Undeployed


class ScenarioError(CemError):
    code = "ScenarioError"


@dataclass(frozen=True)
class StepReport:
    line: int
    command: str
    ok: bool
    message: str = ""


@dataclass
class ScenarioReport:
    steps: list[StepReport] = field(default_factory=list)
    trace_records: list[dict] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return all(s.ok for s in self.steps)

    def render(self) -> str:
        lines = []
        for s in self.steps:
            status = "ok" if s.ok else "FAIL"
            suffix = f" -- {s.message}" if s.message else ""
            lines.append(f"[{status}] line {s.line}: {s.command}{suffix}")
        return "\n".join(lines) + ("\n" if lines else "")


def _parse_literal(text: str, line: int) -> Value:
    expr = parse_expr(text)
    value = runtime.as_value(expr, ())
    if value is None:
        raise ScenarioError(f"line {line}: {text!r} is not a literal value")
    return value


class ScenarioRunner:
    def __init__(
        self,
        registry: Registry | None = None,
        base_dir: str | Path = ".",
        seed: int | None = None,
        fuel: int = 10_000,
    ):
        self.registry = registry or Registry()
        self.base_dir = Path(base_dir)
        self.policy: SchedulerPolicy = SeededRandom(seed) if seed is not None else RoundRobin()
        self.fuel = fuel
        self.last_outcome: Outcome | None = None
        self.last_call: CallResult | None = None
        self.report = ScenarioReport()

    # -- trace bookkeeping

    def _append_records(self, records: list[dict]) -> None:
        base = len(self.report.trace_records)
        for i, r in enumerate(records):
            r = dict(r)
            r["step"] = base + i
            self.report.trace_records.append(r)

    # -- commands

    def run_text(self, text: str, origin: str = "<scenario>") -> ScenarioReport:
        for lineno, raw in enumerate(text.splitlines(), start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            try:
                self._command(line, lineno)
            except ScenarioError:
                raise
            except CemError as e:
                self.report.steps.append(StepReport(lineno, line, False, str(e)))
        return self.report

    def _command(self, line: str, lineno: int) -> None:
        op, _, rest = line.partition(" ")
        rest = rest.strip()
        if op == "seed":
            self.policy = SeededRandom(int(rest))
            self.report.steps.append(StepReport(lineno, line, True))
        elif op == "deploy":
            files = rest.split()
            if not files:
                raise ScenarioError(f"line {lineno}: deploy needs module files")
            modules = []
            for f in files:
                path = self.base_dir / f
                modules.append(parse_module(path.read_text(), str(path)))
            outcome = self.registry.preflight_deploy(modules)
            self.last_outcome = outcome
            if isinstance(outcome, Accepted):
                ev = Deployed(tuple(m.name for m in modules), tuple(outcome.labels.values()))
                self._append_records([event_to_record(ev, 0, self.registry.system)])
                self.report.steps.append(StepReport(lineno, line, True, "accepted"))
            else:
                self.report.steps.append(
                    StepReport(lineno, line, True, f"rejected: {outcome.render()}")
                )
        elif op == "undeploy":
            names = rest.split()
            if not names:
                raise ScenarioError(f"line {lineno}: undeploy needs service names")
            outcome = self.registry.preflight_undeploy(set(names))
            self.last_outcome = outcome
            if isinstance(outcome, Accepted):
                ev = Undeployed(tuple(sorted(names)))
                self._append_records([event_to_record(ev, 0, self.registry.system)])
                self.report.steps.append(StepReport(lineno, line, True, "accepted"))
            else:
                self.report.steps.append(
                    StepReport(lineno, line, True, f"rejected: {outcome.render()}")
                )
        elif op == "call":
            target, _, argtext = rest.partition("(")
            if not argtext.endswith(")") or "." not in target:
                raise ScenarioError(f"line {lineno}: call must look like Service.Fn(arg)")
            service, _, fn = target.strip().partition(".")
            arg = _parse_literal(argtext[:-1].strip(), lineno)
            result = self.registry.call_endpoint(
                service, fn.strip(), arg, self.policy, self.fuel
            )
            self.last_call = result
            self._append_records(list(result.records))
            self.report.steps.append(
                StepReport(lineno, line, True, f"returned {render_value(result.value)}")
            )
        elif op == "expect":
            self._expect(rest, line, lineno)
        else:
            raise ScenarioError(f"line {lineno}: unknown command {op!r}")

    def _expect(self, rest: str, line: str, lineno: int) -> None:
        if rest == "accept":
            ok = isinstance(self.last_outcome, Accepted)
            msg = "" if ok else "last operation was rejected or absent"
            self.report.steps.append(StepReport(lineno, line, ok, msg))
            return
        if rest == "reject":
            ok = isinstance(self.last_outcome, RejectedOp)
            msg = "" if ok else "last operation was accepted or absent"
            self.report.steps.append(StepReport(lineno, line, ok, msg))
            return
        if rest.startswith("events"):
            parts = rest.split()
            if len(parts) != 4 or parts[2] != "=":
                raise ScenarioError(f"line {lineno}: expect events <Event> = <n>")
            _, name, _, num = parts
            if self.last_call is None:
                self.report.steps.append(StepReport(lineno, line, False, "no call yet"))
                return
            count = sum(1 for e in self.last_call.events if type(e).__name__ == name)
            ok = count == int(num)
            msg = "" if ok else f"counted {count} {name} events"
            self.report.steps.append(StepReport(lineno, line, ok, msg))
            return
        expected = _parse_literal(rest, lineno)
        if self.last_call is None:
            self.report.steps.append(StepReport(lineno, line, False, "no call yet"))
            return
        ok = self.last_call.value == expected
        msg = "" if ok else f"last call returned {render_value(self.last_call.value)}"
        self.report.steps.append(StepReport(lineno, line, ok, msg))


def run_scenario_file(
    path: str | Path,
    registry: Registry | None = None,
    seed: int | None = None,
    fuel: int = 10_000,
) -> tuple[ScenarioReport, Registry]:
    p = Path(path)
    runner = ScenarioRunner(registry, p.parent, seed, fuel)
    report = runner.run_text(p.read_text(), str(p))
    return report, runner.registry
