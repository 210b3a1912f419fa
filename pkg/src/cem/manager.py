"""The global deployment manager: a registry of deployed signatures and
labels, the preflight gate in front of the raw runtime transitions, and the
programmatic client surface.

Every mutating operation is serialized through the registry object; reads
work on immutable snapshots. Rejected operations leave the running system
untouched (the request is still recorded in the append-only history).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

from . import runtime
from .compat import CompatVerdict, consumed_from, disconnected, module_compatibility_check
from .encoding import (
    event_to_record,
    system_from_json,
    system_to_json,
)
from .model import (
    Arrow,
    CemError,
    Module,
    Signature,
    System,
    Value,
    ValueDef,
    signature_of,
)
from .runtime import Event, RunResult, SchedulerPolicy, Started
from .typecheck import (
    CheckFailure,
    Diagnostic,
    EnvEntry,
    GlobalEnv,
    check_module,
    module_envs,
)


class ManagerError(CemError):
    code = "ManagerError"


class UnknownService(ManagerError):
    code = "UnknownService"


class UnknownFunction(ManagerError):
    code = "UnknownFunction"


class ArgumentTypeError(ManagerError):
    code = "ArgumentTypeError"


@dataclass(frozen=True)
class Accepted:
    labels: dict[str, str]  # module name -> fresh deployment label
    next_signature: GlobalEnv
    verdict: CompatVerdict = CompatVerdict()


@dataclass(frozen=True)
class RejectedOp:
    diagnostics: tuple[Diagnostic, ...]
    verdict: CompatVerdict | None = None

    def render(self) -> str:
        return "\n".join(f"{d.code}: {d.message}" for d in self.diagnostics)


Outcome = Accepted | RejectedOp


@dataclass(frozen=True)
class HistoryEntry:
    op: str  # "deploy" | "undeploy"
    names: tuple[str, ...]
    accepted: bool
    detail: str
    labels: tuple[str, ...] = ()


@dataclass(frozen=True)
class CallResult:
    value: Value
    events: tuple[Event, ...]
    records: tuple[dict, ...]  # export-ready trace records, step-indexed


def recompute_phi(u: System) -> GlobalEnv:
    """The system signature derived from scratch: the union of every
    deployed module's signature, stamped with its service label."""
    phi: GlobalEnv = {}
    for s in u.services:
        for entry in signature_of(s.module).entries:
            phi[entry.key] = EnvEntry(s.name, entry.name, entry.type, s.label)
    return phi


@dataclass
class Registry:
    system: System = field(default_factory=System)
    phi: GlobalEnv = field(default_factory=dict)
    history: list[HistoryEntry] = field(default_factory=list)

    # -- deployment

    def preflight_deploy(self, modules: list[Module] | tuple[Module, ...]) -> Outcome:
        """Typecheck the batch against the registry view plus the batch's own
        provided elements, run the compatibility check, and only then apply
        the raw deploy. All-or-nothing: a batch is never partially applied."""
        modules = tuple(modules)
        names = tuple(m.name for m in modules)
        outcome = self._try_deploy(modules, names)
        detail = (
            "ok"
            if isinstance(outcome, Accepted)
            else "; ".join(d.message for d in outcome.diagnostics) or "rejected"
        )
        labels = (
            tuple(outcome.labels[n] for n in names) if isinstance(outcome, Accepted) else ()
        )
        self.history.append(
            HistoryEntry("deploy", names, isinstance(outcome, Accepted), detail, labels)
        )
        return outcome

    def _try_deploy(self, modules: tuple[Module, ...], names: tuple[str, ...]) -> Outcome:
        if len(set(names)) != len(names):
            return RejectedOp(
                (Diagnostic("DuplicateName", f"batch repeats module names: {names}"),)
            )

        try:
            incoming: dict[str, GlobalEnv] = {}
            for m in modules:
                env: GlobalEnv = {}
                for entry in signature_of(m).entries:
                    env[entry.key] = EnvEntry(m.name, entry.name, entry.type)
                incoming[m.name] = env
        except CemError as e:
            return RejectedOp((Diagnostic(getattr(e, "code", "Error"), str(e)),))

        env_rest: GlobalEnv = {
            k: e for k, e in self.phi.items() if e.module not in names
        }

        provided: dict[str, GlobalEnv] = {}
        diagnostics: list[Diagnostic] = []
        for m in modules:
            c: GlobalEnv = dict(env_rest)
            for other, env in incoming.items():
                if other != m.name:
                    c.update(env)
            try:
                provided[m.name] = check_module(c, m)
            except CheckFailure as e:
                for d in e.diagnostics:
                    diagnostics.append(Diagnostic(d.code, d.message, m.name, d.key, d.loc))
            except CemError as e:
                diagnostics.append(
                    Diagnostic(
                        getattr(e, "code", "Error"),
                        str(e),
                        m.name,
                        getattr(e, "key", None),
                        getattr(e, "loc", None),
                    )
                )
        if diagnostics:
            return RejectedOp(tuple(diagnostics))

        p_union: GlobalEnv = {}
        for env in provided.values():
            p_union.update(env)
        c_full: GlobalEnv = dict(env_rest)
        c_full.update(p_union)

        verdict, next_phi = module_compatibility_check(
            self.system, self.phi, modules, c_full, p_union
        )
        if not verdict.ok:
            return RejectedOp(
                tuple(
                    Diagnostic("Incompatible", f"key {v.key} ({v.clause}): {v.reason}", key=v.key)
                    for v in verdict.violations
                ),
                verdict,
            )

        try:
            new_system = runtime.deploy(self.system, modules)
        except CemError as e:
            return RejectedOp((Diagnostic(getattr(e, "code", "Error"), str(e)),))

        labels = {m.name: new_system.service(m.name).label for m in modules}
        stamped: GlobalEnv = {}
        for k, entry in next_phi.items():
            label = labels.get(entry.module, entry.label)
            stamped[k] = EnvEntry(entry.module, entry.name, entry.type, label)
        self.system = new_system
        self.phi = stamped
        return Accepted(labels, dict(stamped), verdict)

    # -- undeployment

    def preflight_undeploy(self, names: set[str] | frozenset[str]) -> Outcome:
        names = frozenset(names)
        outcome = self._try_undeploy(names)
        detail = (
            "ok"
            if isinstance(outcome, Accepted)
            else "; ".join(d.message for d in outcome.diagnostics) or "rejected"
        )
        self.history.append(
            HistoryEntry("undeploy", tuple(sorted(names)), isinstance(outcome, Accepted), detail)
        )
        return outcome

    def _try_undeploy(self, names: frozenset[str]) -> Outcome:
        for name in sorted(names):
            if self.system.service(name) is None:
                return RejectedOp(
                    (Diagnostic("UnknownService", f"no deployed service named {name}"),)
                )
        if not disconnected(self.system, names):
            consumed = sorted(consumed_from(self.system, names))
            return RejectedOp(
                (
                    Diagnostic(
                        "NotDisconnected",
                        f"keys {consumed} are still consumed by other services",
                    ),
                )
            )
        try:
            new_system = runtime.undeploy(self.system, names)
        except CemError as e:
            return RejectedOp((Diagnostic(getattr(e, "code", "Error"), str(e)),))
        removed = {
            k for k, e in self.phi.items() if e.module in names
        }
        self.system = new_system
        self.phi = {k: e for k, e in self.phi.items() if k not in removed}
        return Accepted({}, dict(self.phi))

    # -- calls

    def call_endpoint(
        self,
        service: str,
        fn: str,
        arg: Value,
        policy: SchedulerPolicy | None = None,
        fuel: int = 10_000,
        observer=None,
    ) -> CallResult:
        """Start ``fn(arg)`` on a deployed service, run the system to
        quiescence, and return the result with the full trace. Proxy state
        and labels persist in the registry across calls. ``observer``, when
        given, sees every intermediate (system, event) pair."""
        svc = self.system.service(service)
        if svc is None:
            raise UnknownService(f"no deployed service named {service}")
        d = svc.module.def_named(fn)
        if d is None or not isinstance(d, ValueDef):
            raise UnknownFunction(f"service {service} defines no function {fn}")
        sigma, delta = module_envs(svc.module)
        declared = delta[fn]
        assert isinstance(declared, Arrow)
        from .typecheck import value_type

        try:
            actual = value_type(sigma, delta, {}, arg)
        except CemError as e:
            raise ArgumentTypeError(f"argument does not typecheck: {e}") from e
        if actual != declared.param:
            raise ArgumentTypeError(
                f"{service}.{fn} takes {declared.param!r}, argument is {actual!r}"
            )

        from .model import Apply, FunName, Lit

        started_system, tid = runtime.start(self.system, service, Apply(FunName(fn), Lit(arg)))
        events: list[Event] = [Started(service, tid)]
        records: list[dict] = [event_to_record(events[0], 0, started_system)]

        def record_step(state: System, event: Event) -> None:
            events.append(event)
            records.append(event_to_record(event, len(records), state))
            if observer is not None:
                observer(state, event)

        if observer is not None:
            observer(started_system, events[0])
        result: RunResult = runtime.run_to_quiescence(started_system, policy, fuel, record_step)
        value = result.results.get(tid)
        if value is None:
            raise runtime.FuelExhausted(
                f"thread {tid} did not finish", result.system, result.trace, result.results
            )
        from .model import Service

        final = result.system
        root_owner = final.service(service)
        final = final.replace_service(
            Service(
                root_owner.module,
                root_owner.proxies,
                root_owner.label,
                tuple(t for t in root_owner.threads if t.id != tid),
            )
        )
        self.system = final
        return CallResult(value, tuple(events), tuple(records))

    # -- queries

    def query_signature(self, name: str) -> tuple[Signature, str]:
        svc = self.system.service(name)
        if svc is None:
            raise UnknownService(f"no deployed service named {name}")
        entries = tuple(
            sorted(
                (
                    _sig_entry(k, e)
                    for k, e in self.phi.items()
                    if e.module == name
                ),
                key=lambda e: e.key,
            )
        )
        return Signature(entries), svc.label

    # -- persistence

    def save(self, path: str | Path) -> None:
        state = {
            "system": system_to_json(self.system),
            "history": [
                {
                    "op": h.op,
                    "names": list(h.names),
                    "accepted": h.accepted,
                    "detail": h.detail,
                    "labels": list(h.labels),
                }
                for h in self.history
            ],
        }
        Path(path).write_text(json.dumps(state, sort_keys=True, indent=1) + "\n")

    @classmethod
    def load(cls, path: str | Path) -> "Registry":
        state = json.loads(Path(path).read_text())
        system = system_from_json(state["system"])
        reg = cls(system=system, phi=recompute_phi(system))
        reg.history = [
            HistoryEntry(
                h["op"], tuple(h["names"]), h["accepted"], h["detail"], tuple(h["labels"])
            )
            for h in state["history"]
        ]
        return reg


def _sig_entry(key: str, e: EnvEntry):
    from .model import SigEntry

    return SigEntry(key, e.module, e.name, e.type)
