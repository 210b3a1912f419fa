"""Typing judgments: expressions, modules, services, and whole systems.

Expression typing is plain simply-typed lambda calculus with records; there
is no subsumption. Cross-version flexibility lives entirely at the
deployment boundary (see compat), never inside expression typing.

``check_system`` realizes the mutual recursion between the services of a
system with two passes: pass one collects every service's provided
environment from its module signature, pass two checks each service against
the union of all the others.
"""

from __future__ import annotations

import functools
from dataclasses import dataclass, field

from .model import (
    Adapt,
    Apply,
    Arrow,
    Await,
    BinOp,
    CemError,
    Closure,
    Expr,
    FunName,
    INT,
    IntVal,
    Lambda,
    Lit,
    Module,
    NumLit,
    OutdatedProxy,
    RecordLit,
    RecordType,
    RecordUpdate,
    RecordVal,
    Select,
    Service,
    STRING,
    StrLit,
    StrVal,
    System,
    Type,
    TypeEnv,
    TypeRef,
    Value,
    ValueDef,
    ValueRef,
    Var,
    expand_type as _expand,
    signature_of,
    type_env_of,
    validate_system,
)

# Re-exported: expansion is part of this module's public surface.
expand_type = _expand


class TypeCheckError(CemError):
    code = "TypeError"


class UnboundName(TypeCheckError):
    code = "UnboundName"


class FieldNotFound(TypeCheckError):
    code = "FieldNotFound"


class ArgumentMismatch(TypeCheckError):
    code = "ArgumentMismatch"


class UpdateKeyMismatch(TypeCheckError):
    code = "UpdateKeyMismatch"


class NonRecordSelect(TypeCheckError):
    code = "NonRecordSelect"


class UnknownThread(TypeCheckError):
    code = "UnknownThread"


class NameCollision(TypeCheckError):
    code = "NameCollision"


class UnresolvedReference(TypeCheckError):
    code = "UnresolvedReference"


class RefIncompatible(TypeCheckError):
    code = "RefIncompatible"

    def __init__(self, key: str, expected: Type, actual: Type):
        super().__init__(f"reference {key}: declared {expected!r} vs provided {actual!r}")
        self.key = key
        self.expected = expected
        self.actual = actual


class BodyTypeError(TypeCheckError):
    code = "BodyTypeError"


class ProxySignatureMismatch(TypeCheckError):
    code = "ProxySignatureMismatch"


class ThreadTypeError(TypeCheckError):
    code = "ThreadTypeError"


class DuplicateKeyAcrossModules(TypeCheckError):
    code = "DuplicateKeyAcrossModules"


@dataclass(frozen=True)
class EnvEntry:
    """What the system knows about one element key: owning module, the
    element's local name there, its fully-expanded type, and the label of
    the deployment providing it."""

    module: str
    name: str
    type: Type
    label: str | None = None


GlobalEnv = dict[str, EnvEntry]
ThreadEnv = dict[str, Type]


@dataclass
class Diagnostic:
    code: str
    message: str
    service: str | None = None
    key: str | None = None
    loc: tuple[int, int] | None = None  # (line, column) in the defining source

    def as_dict(self) -> dict:
        return {
            "code": self.code,
            "message": self.message,
            "service": self.service,
            "key": self.key,
            "loc": list(self.loc) if self.loc else None,
        }


class CheckFailure(CemError):
    code = "CheckFailure"

    def __init__(self, diagnostics: list[Diagnostic]):
        super().__init__("; ".join(d.message for d in diagnostics))
        self.diagnostics = diagnostics


def _diag_of(err: CemError, service: str | None = None) -> Diagnostic:
    return Diagnostic(
        getattr(err, "code", "Error"),
        str(err),
        service,
        getattr(err, "key", None),
        getattr(err, "loc", None),
    )


# ---------------------------------------------------------------------------
# Expression typing


@dataclass
class UsageCollector:
    """Records which keys a body touches beyond what plain syntax shows:
    label selections resolved to field keys, and mentions of referenced
    functions."""

    select_keys: set[str] = field(default_factory=set)
    fun_names: set[str] = field(default_factory=set)


def type_of_expr(
    sigma: TypeEnv,
    delta: dict[str, Type],
    gamma: ThreadEnv,
    e: Expr,
    vars: dict[str, Type] | None = None,
    collector: UsageCollector | None = None,
) -> Type:
    """Compute the unique type of ``e``, fully expanded. Deterministic and
    total on well-formed input; raises a TypeCheckError subclass otherwise."""
    v = vars or {}
    match e:
        case NumLit():
            return INT
        case StrLit():
            return STRING
        case BinOp(op, left, right):
            tl = type_of_expr(sigma, delta, gamma, left, v, collector)
            tr = type_of_expr(sigma, delta, gamma, right, v, collector)
            if tl == INT and tr == INT:
                return INT
            if tl == STRING and tr == STRING:
                return STRING
            raise ArgumentMismatch(f"operator {op} applied to {tl!r} and {tr!r}")
        case Var(name):
            if name in v:
                return v[name]
            raise UnboundName(f"variable {name} is not bound")
        case FunName(name):
            if name in delta:
                if collector is not None:
                    collector.fun_names.add(name)
                return delta[name]
            raise UnboundName(f"name {name} is not defined or referenced")
        case Lambda(param, ptype, body):
            expanded = expand_type(ptype, sigma)
            inner = dict(v)
            inner[param] = expanded
            return Arrow(
                expanded, type_of_expr(sigma, delta, gamma, body, inner, collector)
            )
        case Apply(fn, arg):
            tf = type_of_expr(sigma, delta, gamma, fn, v, collector)
            if not isinstance(tf, Arrow):
                raise ArgumentMismatch(f"applying a non-function of type {tf!r}")
            ta = type_of_expr(sigma, delta, gamma, arg, v, collector)
            if ta != tf.param:
                raise ArgumentMismatch(
                    f"argument type {ta!r} does not match parameter {tf.param!r}"
                )
            return tf.result
        case RecordLit(fields):
            from .model import FieldType

            return RecordType(
                tuple(
                    FieldType(
                        f.label,
                        f.key,
                        type_of_expr(sigma, delta, gamma, f.expr, v, collector),
                    )
                    for f in fields
                )
            )
        case Select(target, label):
            tt = type_of_expr(sigma, delta, gamma, target, v, collector)
            if not isinstance(tt, RecordType):
                raise NonRecordSelect(f"selecting .{label} from {tt!r}")
            f = tt.field_by_label(label)
            if f is None:
                raise FieldNotFound(f"record {tt!r} has no field {label}")
            if collector is not None:
                collector.select_keys.add(f.key)
            return f.type
        case RecordUpdate(target, fields):
            tt = type_of_expr(sigma, delta, gamma, target, v, collector)
            if not isinstance(tt, RecordType):
                raise NonRecordSelect(f"updating fields of {tt!r}")
            for fi in fields:
                existing = tt.field_by_label(fi.label)
                if existing is None:
                    raise FieldNotFound(f"record {tt!r} has no field {fi.label}")
                if existing.key != fi.key:
                    raise UpdateKeyMismatch(
                        f"field {fi.label} has key {existing.key}, update names {fi.key}"
                    )
                te = type_of_expr(sigma, delta, gamma, fi.expr, v, collector)
                if te != existing.type:
                    raise UpdateKeyMismatch(
                        f"field {fi.label} has type {existing.type!r}, "
                        f"update supplies {te!r}"
                    )
            return tt
        case Await(thread):
            if thread in gamma:
                return gamma[thread]
            raise UnknownThread(f"no running thread {thread}")
        case Adapt(inner, from_type, to_type):
            ti = type_of_expr(sigma, delta, gamma, inner, v, collector)
            ef = expand_type(from_type, sigma)
            if ti != ef:
                raise ArgumentMismatch(
                    f"conversion source types at {ti!r}, annotation says {ef!r}"
                )
            return expand_type(to_type, sigma)
        case Lit(value):
            return value_type(sigma, delta, gamma, value)
    raise TypeCheckError(f"cannot type {e!r}")


def value_type(
    sigma: TypeEnv, delta: dict[str, Type], gamma: ThreadEnv, value: Value
) -> Type:
    """The static type of a runtime value. Unknown fields carry no static
    type and are invisible here."""
    match value:
        case IntVal():
            return INT
        case StrVal():
            return STRING
        case Closure(param, ptype, body, _defs):
            expanded = expand_type(ptype, sigma)
            return Arrow(
                expanded,
                type_of_expr(sigma, delta, gamma, body, {param: expanded}),
            )
        case RecordVal(known, _unknown):
            from .model import FieldType

            return RecordType(
                tuple(
                    FieldType(f.label, f.key, value_type(sigma, delta, gamma, f.value))
                    for f in known
                )
            )
    raise TypeCheckError(f"cannot type value {value!r}")


# ---------------------------------------------------------------------------
# Module environments


@functools.lru_cache(maxsize=4096)
def module_envs(m: Module) -> tuple[TypeEnv, dict[str, Type]]:
    """Build the type-name environment and the expanded term environment of a
    module: referenced items plus local definitions. Treat the result as
    read-only."""
    sigma_refs: TypeEnv = {}
    for r in m.refs:
        for item in r.items:
            if isinstance(item, TypeRef):
                sigma_refs[item.name] = (item.key, item.type)
    sigma = type_env_of(m)
    delta: dict[str, Type] = {}
    for r in m.refs:
        for item in r.items:
            if isinstance(item, ValueRef):
                delta[item.name] = expand_type(item.type, sigma_refs)
    for d in m.defs:
        if isinstance(d, ValueDef):
            delta[d.name] = expand_type(d.type, sigma)
    return sigma, delta


@functools.lru_cache(maxsize=4096)
def collect_usage(m: Module) -> UsageCollector:
    """Best-effort elaboration pass over every definition body, recording
    selection keys and referenced-function mentions. Type errors are ignored
    here; check_module reports them properly."""
    sigma, delta = module_envs(m)
    collector = UsageCollector()
    for d in m.defs:
        if isinstance(d, ValueDef):
            try:
                type_of_expr(sigma, delta, {}, d.body, None, collector)
            except CemError:
                pass
    return collector


# ---------------------------------------------------------------------------
# Module / service / system checking


def _env_union(*envs: GlobalEnv) -> GlobalEnv:
    out: GlobalEnv = {}
    for env in envs:
        for k, entry in env.items():
            if k in out:
                raise DuplicateKeyAcrossModules(
                    f"key {k} provided by both {out[k].module} and {entry.module}"
                )
            out[k] = entry
    return out


_module_check_cache: dict = {}


def _module_cache_key(c: GlobalEnv, m: Module):
    from .model import consumer_keys, producer_keys

    relevant = sorted(consumer_keys(m) | producer_keys(m))
    slice_ = tuple(
        (k, None)
        if (e := c.get(k)) is None
        else (k, e.module, e.name, e.type)
        for k in relevant
    )
    name_taken = any(e.module == m.name for e in c.values())
    return (m, slice_, name_taken)


def check_module(c: GlobalEnv, m: Module) -> GlobalEnv:
    """Type a module against the environment ``c`` of everything else the
    system provides. Returns the module's own provided environment.

    The verdict depends only on the module and the ``c`` entries its keys
    touch, so results are memoized on that slice.
    """
    key = _module_cache_key(c, m)
    cached = _module_check_cache.get(key)
    if cached is not None:
        ok, payload = cached
        if ok:
            return dict(payload)
        raise payload
    try:
        out = _check_module(c, m)
    except CemError as e:
        if len(_module_check_cache) > 8192:
            _module_check_cache.clear()
        _module_check_cache[key] = (False, e)
        raise
    if len(_module_check_cache) > 8192:
        _module_check_cache.clear()
    _module_check_cache[key] = (True, dict(out))
    return out


def _check_module(c: GlobalEnv, m: Module) -> GlobalEnv:
    from .model import validate_module

    validate_module(m)
    c_modules = {entry.module for entry in c.values()}
    if m.name in c_modules:
        raise NameCollision(f"a module named {m.name} is already present")
    for d in m.defs:
        if d.key in c:
            err = DuplicateKeyAcrossModules(
                f"definition key {d.key} of {m.name} already provided by "
                f"{c[d.key].module}"
            )
            err.loc = d.loc
            raise err

    sigma, delta = module_envs(m)

    # Definition bodies must realize their declared types.
    for d in m.defs:
        if isinstance(d, ValueDef):
            declared = expand_type(d.type, sigma)
            try:
                actual = type_of_expr(sigma, delta, {}, d.body)
            except TypeCheckError as e:
                err = BodyTypeError(f"definition {d.name}@{d.key}: {e}")
                err.loc = d.loc
                raise err from e
            if actual != declared:
                err = BodyTypeError(
                    f"definition {d.name}@{d.key}: body types at {actual!r}, "
                    f"declared {declared!r}"
                )
                err.loc = d.loc
                raise err

    # References must exist in c and be structurally compatible with what the
    # system currently provides, restricted to the keys this module uses.
    # Every failing reference is reported, not just the first.
    from .compat import type_compatible, used_keys

    sigma_refs: TypeEnv = {}
    for r in m.refs:
        for item in r.items:
            if isinstance(item, TypeRef):
                sigma_refs[item.name] = (item.key, item.type)
    ref_diags: list[Diagnostic] = []
    for r in m.refs:
        mu = used_keys(m, r.producer)
        for item in r.items:
            if item.key not in c:
                ref_diags.append(
                    Diagnostic(
                        "UnresolvedReference",
                        f"module {m.name} references "
                        f"{item.producer}.{item.name}@{item.key}, which no deployed "
                        f"module provides",
                        key=item.key,
                        loc=item.loc,
                    )
                )
                continue
            declared = expand_type(item.type, sigma_refs)
            current = c[item.key].type
            if not (
                type_compatible(declared, current, mu)
                and type_compatible(current, declared, mu)
            ):
                err = RefIncompatible(item.key, declared, current)
                ref_diags.append(Diagnostic(err.code, str(err), key=item.key, loc=item.loc))
    if ref_diags:
        raise CheckFailure(ref_diags)

    out: GlobalEnv = {}
    for entry in signature_of(m).entries:
        out[entry.key] = EnvEntry(m.name, entry.name, entry.type)
    return out


def _producer_label(c: GlobalEnv, producer: str) -> str | None:
    for entry in c.values():
        if entry.module == producer:
            return entry.label
    return None


def check_service(c: GlobalEnv, gamma: ThreadEnv, s: Service) -> GlobalEnv:
    """Check one service: its module, its proxies, and its running threads.
    Returns the service's provided environment stamped with its label."""
    from .model import validate_service

    validate_service(s)
    provided = check_module(c, s.module)
    provided = {
        k: EnvEntry(e.module, e.name, e.type, s.label) for k, e in provided.items()
    }

    # A ready proxy whose label matches the producer's current deployment
    # must agree with the producer's current signature; anything stale is
    # legitimate (it will be refreshed by the handshake).
    for p in s.proxies:
        if isinstance(p, OutdatedProxy):
            continue
        current_label = _producer_label(c, p.producer)
        if current_label is None or p.label != current_label:
            continue
        for entry in p.entries:
            ref = s.module.value_ref_named(entry.local_name)
            if ref is None or ref.producer != p.producer:
                raise ProxySignatureMismatch(
                    f"service {s.name}: proxy entry {entry.local_name} has no "
                    f"matching reference to {p.producer}"
                )
            known = c.get(ref.key)
            if known is None:
                raise ProxySignatureMismatch(
                    f"service {s.name}: proxy entry {entry.local_name} targets "
                    f"unknown key {ref.key}"
                )
            if known.name != entry.remote_name or known.type != entry.type:
                raise ProxySignatureMismatch(
                    f"service {s.name}: proxy entry {entry.local_name} records "
                    f"{entry.remote_name} : {entry.type!r}, producer provides "
                    f"{known.name} : {known.type!r}"
                )

    sigma, delta = module_envs(s.module)
    for t in s.threads:
        if t.id not in gamma:
            raise UnknownThread(f"service {s.name}: thread {t.id} has no assigned type")
        try:
            actual = type_of_expr(sigma, delta, gamma, t.expr)
        except TypeCheckError as e:
            raise ThreadTypeError(f"service {s.name}, thread {t.id}: {e}") from e
        if actual != gamma[t.id]:
            raise ThreadTypeError(
                f"service {s.name}, thread {t.id}: expression types at {actual!r}, "
                f"thread is assigned {gamma[t.id]!r}"
            )
    return provided


def check_system(gamma: ThreadEnv, u: System) -> GlobalEnv:
    """Two-pass check of a whole system. Pass one collects each service's
    provided environment; pass two checks every service against the union of
    all the others. The result does not depend on service order."""
    validate_system(u)
    provided: dict[str, GlobalEnv] = {}
    diagnostics: list[Diagnostic] = []
    for s in u.services:
        env: GlobalEnv = {}
        try:
            for entry in signature_of(s.module).entries:
                env[entry.key] = EnvEntry(s.name, entry.name, entry.type, s.label)
        except CemError as e:
            diagnostics.append(_diag_of(e, s.name))
        provided[s.name] = env
    if diagnostics:
        raise CheckFailure(diagnostics)

    try:
        combined = _env_union(*provided.values())
    except CemError as e:
        raise CheckFailure([_diag_of(e)]) from e

    for s in u.services:
        c = {k: e for k, e in combined.items() if e.module != s.name}
        try:
            check_service(c, gamma, s)
        except CheckFailure as e:
            diagnostics.extend(e.diagnostics)
        except CemError as e:
            diagnostics.append(_diag_of(e, s.name))
    if diagnostics:
        raise CheckFailure(diagnostics)
    return combined


def infer_thread_env(u: System) -> ThreadEnv:
    """Recover the thread typing environment of a running system. Threads
    whose expressions await other threads are typed once their peers are,
    so the assignment is computed as a fixed point."""
    gamma: ThreadEnv = {}
    pending = [(s, t) for s in u.services for t in s.threads]
    while pending:
        progressed = False
        still: list = []
        last_error: CemError | None = None
        for s, t in pending:
            sigma, delta = module_envs(s.module)
            try:
                gamma[t.id] = type_of_expr(sigma, delta, gamma, t.expr)
                progressed = True
            except CemError as e:
                last_error = e
                still.append((s, t))
        pending = still
        if pending and not progressed:
            raise CheckFailure(
                [
                    Diagnostic(
                        "ThreadTypeError",
                        f"cannot assign types to threads "
                        f"{[t.id for _, t in pending]}: {last_error}",
                    )
                ]
            )
    return gamma
