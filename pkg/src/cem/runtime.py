"""The labelled transition system: expression evaluation, the remote-call
handshake, and raw deploy/undeploy/start transitions.

Raw transitions deliberately perform no safety checks beyond structural
invariants and quiescence; the deployment manager is the component that
gates them behind the preflight check. The handshake works as follows: a
remote call through a proxy whose label matches the producer's current
label is invoked directly; a label mismatch replaces the proxy with an
outdated token carrying the producer's current signature (the call redex is
left intact, so the retry is automatic); an outdated token is materialized
into fresh value proxies in a separate step, after which the call proceeds.
A consumer holding an outdated token cannot invoke, which makes the retry
sequence deterministic.
"""

from __future__ import annotations

import random
from dataclasses import dataclass
from typing import Callable

from .adapt import convert, gen_proxies
from .model import (
    Adapt,
    Apply,
    Await,
    BinOp,
    CemError,
    Closure,
    Definition,
    Expr,
    FieldInit,
    FunName,
    IntVal,
    KnownField,
    Lambda,
    Lit,
    Module,
    NumLit,
    OutdatedProxy,
    ReadyProxy,
    RecordLit,
    RecordUpdate,
    RecordVal,
    Select,
    Service,
    StrLit,
    StrVal,
    System,
    Thread,
    Value,
    ValueDef,
    Var,
    signature_of,
    validate_module,
)
from .typecheck import module_envs


class RuntimeFault(CemError):
    code = "RuntimeError"


class StuckError(RuntimeFault):
    code = "Stuck"


class NotQuiescent(RuntimeFault):
    code = "NotQuiescent"


class UnknownService(RuntimeFault):
    code = "UnknownService"


class FuelExhausted(RuntimeFault):
    code = "FuelExhausted"

    def __init__(self, message: str, system: System, trace: tuple, results: dict):
        super().__init__(message)
        self.system = system
        self.trace = trace
        self.results = results


# ---------------------------------------------------------------------------
# Scheduling policies


@dataclass
class RoundRobin:
    """Deterministic rotation through the enabled transitions."""

    _count: int = 0

    def choose(self, n: int) -> int:
        i = self._count % n
        self._count += 1
        return i


@dataclass
class SeededRandom:
    """Uniform choice among enabled transitions, reproducible by seed."""

    seed: int

    def __post_init__(self) -> None:
        self._rng = random.Random(self.seed)

    def choose(self, n: int) -> int:
        return self._rng.randrange(n)


SchedulerPolicy = RoundRobin | SeededRandom


# ---------------------------------------------------------------------------
# Events


@dataclass(frozen=True)
class ExprStep:
    service: str
    thread: str


@dataclass(frozen=True)
class Invoked:
    consumer: str
    producer: str
    local_name: str
    remote_name: str
    thread: str
    argument: Value


@dataclass(frozen=True)
class Resolved:
    thread: str
    value: Value


@dataclass(frozen=True)
class Rejected:
    consumer: str
    producer: str
    stale_label: str
    current_label: str


@dataclass(frozen=True)
class ProxyGenerated:
    consumer: str
    producer: str
    label: str


@dataclass(frozen=True)
class Deployed:
    names: tuple[str, ...]
    labels: tuple[str, ...]


@dataclass(frozen=True)
class Undeployed:
    names: tuple[str, ...]


@dataclass(frozen=True)
class Started:
    service: str
    thread: str


Event = (
    ExprStep
    | Invoked
    | Resolved
    | Rejected
    | ProxyGenerated
    | Deployed
    | Undeployed
    | Started
)


# ---------------------------------------------------------------------------
# Expression evaluation


@dataclass(frozen=True)
class Stepped:
    expr: Expr


@dataclass(frozen=True)
class IsValue:
    value: Value


@dataclass(frozen=True)
class Remote:
    """The next redex is a call to a name the module does not define: the
    handshake takes over. ``rebuild`` reconstructs the surrounding
    expression around a replacement for the call."""

    fn: str
    arg: Value
    rebuild: Callable[[Expr], Expr]


@dataclass(frozen=True)
class Blocked:
    """Evaluation cannot proceed until the named threads yield."""

    threads: tuple[str, ...]


Reduction = Stepped | IsValue | Remote | Blocked


def as_value(e: Expr, defs: tuple[Definition, ...]) -> Value | None:
    match e:
        case Lit(v):
            return v
        case NumLit(n):
            return IntVal(n)
        case StrLit(s):
            return StrVal(s)
        case Lambda(param, ptype, body):
            return Closure(param, ptype, body, defs)
        case RecordLit(fields):
            known = []
            for f in fields:
                v = as_value(f.expr, defs)
                if v is None:
                    return None
                known.append(KnownField(f.label, f.key, v))
            return RecordVal(tuple(known))
        case _:
            return None


def substitute(e: Expr, name: str, replacement: Expr) -> Expr:
    match e:
        case Var(n):
            return replacement if n == name else e
        case Lambda(param, ptype, body):
            if param == name:
                return e
            return Lambda(param, ptype, substitute(body, name, replacement))
        case BinOp(op, left, right):
            return BinOp(op, substitute(left, name, replacement), substitute(right, name, replacement))
        case Apply(fn, arg):
            return Apply(substitute(fn, name, replacement), substitute(arg, name, replacement))
        case RecordLit(fields):
            return RecordLit(
                tuple(FieldInit(f.label, f.key, substitute(f.expr, name, replacement)) for f in fields)
            )
        case Select(target, label):
            return Select(substitute(target, name, replacement), label)
        case RecordUpdate(target, fields):
            return RecordUpdate(
                substitute(target, name, replacement),
                tuple(FieldInit(f.label, f.key, substitute(f.expr, name, replacement)) for f in fields),
            )
        case Adapt(inner, from_type, to_type):
            return Adapt(substitute(inner, name, replacement), from_type, to_type)
        case _:
            return e


def subst_await(e: Expr, thread: str, replacement: Expr) -> Expr:
    match e:
        case Await(t):
            return replacement if t == thread else e
        case Lambda(param, ptype, body):
            return Lambda(param, ptype, subst_await(body, thread, replacement))
        case BinOp(op, left, right):
            return BinOp(op, subst_await(left, thread, replacement), subst_await(right, thread, replacement))
        case Apply(fn, arg):
            return Apply(subst_await(fn, thread, replacement), subst_await(arg, thread, replacement))
        case RecordLit(fields):
            return RecordLit(
                tuple(FieldInit(f.label, f.key, subst_await(f.expr, thread, replacement)) for f in fields)
            )
        case Select(target, label):
            return Select(subst_await(target, thread, replacement), label)
        case RecordUpdate(target, fields):
            return RecordUpdate(
                subst_await(target, thread, replacement),
                tuple(FieldInit(f.label, f.key, subst_await(f.expr, thread, replacement)) for f in fields),
            )
        case Adapt(inner, from_type, to_type):
            return Adapt(subst_await(inner, thread, replacement), from_type, to_type)
        case _:
            return e


def awaited_threads(e: Expr) -> frozenset[str]:
    match e:
        case Await(t):
            return frozenset({t})
        case Lambda(_, _, body):
            return awaited_threads(body)
        case BinOp(_, left, right):
            return awaited_threads(left) | awaited_threads(right)
        case Apply(fn, arg):
            return awaited_threads(fn) | awaited_threads(arg)
        case RecordLit(fields) | RecordUpdate(_, fields):
            out = frozenset()
            if isinstance(e, RecordUpdate):
                out |= awaited_threads(e.target)
            for f in fields:
                out |= awaited_threads(f.expr)
            return out
        case Select(target, _):
            return awaited_threads(target)
        case Adapt(inner, _, _):
            return awaited_threads(inner)
        case _:
            return frozenset()


def _wrap(res: Reduction, ctx: Callable[[Expr], Expr]) -> Reduction:
    match res:
        case Stepped(e):
            return Stepped(ctx(e))
        case Remote(fn, arg, rebuild):
            return Remote(fn, arg, lambda x, _rb=rebuild, _ctx=ctx: _ctx(_rb(x)))
        case _:
            return res


def step_expr(defs: tuple[Definition, ...], e: Expr) -> Reduction:
    """One call-by-value step. Locally defined names resolve from ``defs``;
    a call to any other name surfaces as Remote for the system layer to
    handle; awaiting a thread surfaces as Blocked."""
    v = as_value(e, defs)
    if v is not None:
        return IsValue(v)
    match e:
        case Var(name):
            raise StuckError(f"unbound variable {name} at runtime")
        case FunName(name):
            for d in defs:
                if isinstance(d, ValueDef) and d.name == name:
                    return Stepped(d.body)
            raise StuckError(f"remote endpoint {name} used outside call position")
        case BinOp(op, left, right):
            lv = as_value(left, defs)
            if lv is None:
                return _wrap(step_expr(defs, left), lambda x: BinOp(op, x, right))
            rv = as_value(right, defs)
            if rv is None:
                return _wrap(step_expr(defs, right), lambda x: BinOp(op, Lit(lv), x))
            match (lv, rv):
                case (IntVal(a), IntVal(b)) if op == "+":
                    return Stepped(Lit(IntVal(a + b)))
                case (StrVal(a), StrVal(b)) if op == "+":
                    return Stepped(Lit(StrVal(a + b)))
            raise StuckError(f"operator {op} applied to {lv!r} and {rv!r}")
        case Apply(fn, arg):
            if isinstance(fn, FunName) and not any(
                isinstance(d, ValueDef) and d.name == fn.name for d in defs
            ):
                av = as_value(arg, defs)
                if av is None:
                    return _wrap(step_expr(defs, arg), lambda x: Apply(fn, x))
                return Remote(fn.name, av, lambda x: x)
            fv = as_value(fn, defs)
            if fv is None:
                return _wrap(step_expr(defs, fn), lambda x: Apply(x, arg))
            av = as_value(arg, defs)
            if av is None:
                return _wrap(step_expr(defs, arg), lambda x: Apply(Lit(fv), x))
            if not isinstance(fv, Closure):
                raise StuckError(f"applying a non-function value {fv!r}")
            return Stepped(substitute(fv.body, fv.param, Lit(av)))
        case RecordLit(fields):
            for i, f in enumerate(fields):
                if as_value(f.expr, defs) is None:
                    def ctx(x, _i=i):
                        return RecordLit(
                            tuple(
                                FieldInit(g.label, g.key, x if j == _i else g.expr)
                                for j, g in enumerate(fields)
                            )
                        )

                    return _wrap(step_expr(defs, f.expr), ctx)
            raise StuckError(f"record literal did not become a value: {e!r}")
        case Select(target, label):
            tv = as_value(target, defs)
            if tv is None:
                return _wrap(step_expr(defs, target), lambda x: Select(x, label))
            if not isinstance(tv, RecordVal):
                raise StuckError(f"selecting .{label} from {tv!r}")
            member = tv.by_label(label)
            if member is None:
                raise StuckError(f"value has no field labelled {label}")
            return Stepped(Lit(member))
        case RecordUpdate(target, fields):
            tv = as_value(target, defs)
            if tv is None:
                return _wrap(step_expr(defs, target), lambda x: RecordUpdate(x, fields))
            for i, f in enumerate(fields):
                fv = as_value(f.expr, defs)
                if fv is None:
                    def ctx(x, _i=i):
                        updated = tuple(
                            FieldInit(g.label, g.key, x if j == _i else g.expr)
                            for j, g in enumerate(fields)
                        )
                        return RecordUpdate(Lit(tv), updated)

                    return _wrap(step_expr(defs, f.expr), ctx)
            if not isinstance(tv, RecordVal):
                raise StuckError(f"updating fields of {tv!r}")
            updates = {f.key: as_value(f.expr, defs) for f in fields}
            for key in updates:
                if all(k.key != key for k in tv.known):
                    raise StuckError(f"value has no field with key {key}")
            known = tuple(
                KnownField(k.label, k.key, updates[k.key]) if k.key in updates else k
                for k in tv.known
            )
            return Stepped(Lit(RecordVal(known, tv.unknown)))
        case Await(thread):
            return Blocked((thread,))
        case Adapt(inner, from_type, to_type):
            iv = as_value(inner, defs)
            if iv is None:
                return _wrap(step_expr(defs, inner), lambda x: Adapt(x, from_type, to_type))
            return Stepped(Lit(convert(iv, from_type, to_type)))
    raise StuckError(f"no rule for {e!r}")


# ---------------------------------------------------------------------------
# System transitions


@dataclass(frozen=True)
class _Transition:
    kind: str
    apply: Callable[[], tuple[System, Event]]


def _proxy_label(proxy) -> str:
    return proxy.label


def enabled_transitions(u: System) -> list[_Transition]:
    """Enumerate every rule instance enabled in ``u``, in a deterministic
    order (services, then proxies and threads, in tuple order)."""
    out: list[_Transition] = []

    for svc in u.services:
        for proxy in svc.proxies:
            if isinstance(proxy, OutdatedProxy):
                producer = u.service(proxy.producer)
                if producer is None:
                    continue
                out.append(_genproxy_transition(u, svc, proxy, producer))

    for svc in u.services:
        for thread in svc.threads:
            red = step_expr(svc.module.defs, thread.expr)
            match red:
                case IsValue(value):
                    target = _find_awaiter(u, thread.id)
                    if target is not None:
                        out.append(_resolve_transition(u, svc, thread, value, target))
                case Stepped(expr):
                    out.append(_expr_transition(u, svc, thread, expr))
                case Remote(fn, arg, rebuild):
                    ref = svc.module.value_ref_named(fn)
                    if ref is None:
                        raise StuckError(
                            f"service {svc.name}: call to {fn}, which is neither "
                            f"defined nor referenced"
                        )
                    producer = u.service(ref.producer)
                    if producer is None:
                        continue
                    proxy = svc.proxy_for(ref.producer)
                    if proxy is None:
                        raise StuckError(
                            f"service {svc.name}: no proxy for producer {ref.producer}"
                        )
                    if isinstance(proxy, ReadyProxy) and proxy.label == producer.label:
                        out.append(
                            _invoke_transition(u, svc, thread, ref, proxy, producer, arg, rebuild)
                        )
                    elif _proxy_label(proxy) != producer.label:
                        out.append(_reject_transition(u, svc, thread, proxy, producer))
                case Blocked(_):
                    pass
    return out


def _find_awaiter(u: System, thread_id: str) -> tuple[Service, Thread] | None:
    for svc in u.services:
        for t in svc.threads:
            if thread_id in awaited_threads(t.expr):
                return svc, t
    return None


def _expr_transition(u: System, svc: Service, thread: Thread, expr: Expr) -> _Transition:
    def apply() -> tuple[System, Event]:
        new_threads = tuple(
            Thread(t.id, expr) if t.id == thread.id else t for t in svc.threads
        )
        return (
            u.replace_service(Service(svc.module, svc.proxies, svc.label, new_threads)),
            ExprStep(svc.name, thread.id),
        )

    return _Transition("expr", apply)


def _resolve_transition(
    u: System, producer_svc: Service, thread: Thread, value: Value, target: tuple[Service, Thread]
) -> _Transition:
    consumer_svc, consumer_thread = target

    def apply() -> tuple[System, Event]:
        new_expr = subst_await(consumer_thread.expr, thread.id, Lit(value))
        sys2 = u.replace_service(
            Service(
                consumer_svc.module,
                consumer_svc.proxies,
                consumer_svc.label,
                tuple(
                    Thread(t.id, new_expr) if t.id == consumer_thread.id else t
                    for t in consumer_svc.threads
                ),
            )
        )
        producer_now = sys2.service(producer_svc.name)
        sys3 = sys2.replace_service(
            Service(
                producer_now.module,
                producer_now.proxies,
                producer_now.label,
                tuple(t for t in producer_now.threads if t.id != thread.id),
            )
        )
        return sys3, Resolved(thread.id, value)

    return _Transition("resolve", apply)


def _reject_transition(
    u: System, svc: Service, thread: Thread, proxy, producer: Service
) -> _Transition:
    def apply() -> tuple[System, Event]:
        token = OutdatedProxy(
            producer.name, signature_of(producer.module), producer.label
        )
        new_proxies = tuple(
            token if p.producer == producer.name else p for p in svc.proxies
        )
        return (
            u.replace_service(Service(svc.module, new_proxies, svc.label, svc.threads)),
            Rejected(svc.name, producer.name, _proxy_label(proxy), producer.label),
        )

    return _Transition("reject", apply)


def _genproxy_transition(
    u: System, svc: Service, proxy: OutdatedProxy, producer: Service
) -> _Transition:
    def apply() -> tuple[System, Event]:
        ref = svc.module.ref_for(producer.name)
        items = ref.items if ref is not None else ()
        entries = gen_proxies(producer.name, items, signature_of(producer.module))
        ready = ReadyProxy(producer.name, entries, producer.label)
        new_proxies = tuple(
            ready if p.producer == producer.name else p for p in svc.proxies
        )
        return (
            u.replace_service(Service(svc.module, new_proxies, svc.label, svc.threads)),
            ProxyGenerated(svc.name, producer.name, producer.label),
        )

    return _Transition("genproxy", apply)


def _invoke_transition(
    u: System,
    svc: Service,
    thread: Thread,
    ref,
    proxy: ReadyProxy,
    producer: Service,
    arg: Value,
    rebuild: Callable[[Expr], Expr],
) -> _Transition:
    entry = next((e for e in proxy.entries if e.local_name == ref.name), None)

    def apply() -> tuple[System, Event]:
        if entry is None:
            raise StuckError(
                f"service {svc.name}: proxy for {producer.name} has no entry "
                f"for {ref.name}"
            )
        _, delta = module_envs(svc.module)
        declared = delta[ref.name]
        converted = convert(arg, declared.param, entry.type.param)
        new_tid = f"t{u.next_thread}"
        consumer_expr = rebuild(Adapt(Await(new_tid), entry.type.result, declared.result))
        sys2 = System(u.services, u.next_label, u.next_thread + 1)
        sys2 = sys2.replace_service(
            Service(
                svc.module,
                svc.proxies,
                svc.label,
                tuple(
                    Thread(t.id, consumer_expr) if t.id == thread.id else t
                    for t in svc.threads
                ),
            )
        )
        producer_now = sys2.service(producer.name)
        sys3 = sys2.replace_service(
            Service(
                producer_now.module,
                producer_now.proxies,
                producer_now.label,
                producer_now.threads
                + (Thread(new_tid, Apply(FunName(entry.remote_name), Lit(converted))),),
            )
        )
        return sys3, Invoked(
            svc.name, producer.name, ref.name, entry.remote_name, new_tid, converted
        )

    return _Transition("invoke", apply)


def step_system(u: System, policy: SchedulerPolicy) -> tuple[System, Event] | None:
    """Apply one enabled rule chosen by the policy, or return None when no
    rule is enabled."""
    transitions = enabled_transitions(u)
    if not transitions:
        return None
    choice = transitions[policy.choose(len(transitions))]
    return choice.apply()


# ---------------------------------------------------------------------------
# Raw deploy / undeploy / start


def deploy(u: System, modules: list[Module] | tuple[Module, ...]) -> System:
    """Install or replace services, with fresh labels and empty proxies
    stamped with the new service's own label (so the first contact with any
    producer is guaranteed to mismatch and refresh). Replaced services must
    be quiescent. No compatibility checking happens here."""
    names = [m.name for m in modules]
    if len(set(names)) != len(names):
        raise RuntimeFault(f"deploy batch repeats module names: {names}")
    for m in modules:
        validate_module(m)
        existing = u.service(m.name)
        if existing is not None and existing.threads:
            raise NotQuiescent(f"service {m.name} has running threads")

    services = list(u.services)
    next_label = u.next_label
    for m in modules:
        label = f"l{next_label}"
        next_label += 1
        svc = Service(
            m,
            tuple(ReadyProxy(r.producer, (), label) for r in m.refs),
            label,
            (),
        )
        for i, s in enumerate(services):
            if s.name == m.name:
                services[i] = svc
                break
        else:
            services.append(svc)
    return System(tuple(services), next_label, u.next_thread)


def undeploy(u: System, names: frozenset[str] | set[str]) -> System:
    for name in names:
        svc = u.service(name)
        if svc is None:
            raise UnknownService(f"no deployed service named {name}")
        if svc.threads:
            raise NotQuiescent(f"service {name} has running threads")
    return System(
        tuple(s for s in u.services if s.name not in names),
        u.next_label,
        u.next_thread,
    )


def start(u: System, service: str, e: Expr) -> tuple[System, str]:
    svc = u.service(service)
    if svc is None:
        raise UnknownService(f"no deployed service named {service}")
    tid = f"t{u.next_thread}"
    sys2 = System(u.services, u.next_label, u.next_thread + 1)
    sys2 = sys2.replace_service(
        Service(svc.module, svc.proxies, svc.label, svc.threads + (Thread(tid, e),))
    )
    return sys2, tid


# ---------------------------------------------------------------------------
# Driving


@dataclass(frozen=True)
class RunResult:
    system: System
    trace: tuple[Event, ...]
    results: dict[str, Value]


def _thread_results(u: System) -> dict[str, Value]:
    out: dict[str, Value] = {}
    for svc in u.services:
        for t in svc.threads:
            v = as_value(t.expr, svc.module.defs)
            if v is not None:
                out[t.id] = v
    return out


def run_to_quiescence(
    u: System,
    policy: SchedulerPolicy | None = None,
    fuel: int = 10_000,
    observer: Callable[[System, Event], None] | None = None,
) -> RunResult:
    """Iterate step_system until nothing is enabled. Raises FuelExhausted,
    carrying the partial trace, when the budget runs out or when threads
    stall without being values (a cyclic wait)."""
    policy = policy or RoundRobin()
    trace: list[Event] = []
    current = u
    for _ in range(fuel):
        step = step_system(current, policy)
        if step is None:
            results = _thread_results(current)
            stalled = [
                t.id
                for svc in current.services
                for t in svc.threads
                if t.id not in results
            ]
            if stalled:
                raise FuelExhausted(
                    f"threads {stalled} cannot make progress",
                    current,
                    tuple(trace),
                    results,
                )
            return RunResult(current, tuple(trace), results)
        current, event = step
        trace.append(event)
        if observer is not None:
            observer(current, event)
    raise FuelExhausted(
        f"no quiescence within {fuel} steps",
        current,
        tuple(trace),
        _thread_results(current),
    )
