"""Core model: the data-exchange type language, expressions, values, modules,
services, systems, and signature extraction.

Identities are plain strings. Element keys (``k1``, ``k2``, ...) name program
elements and record fields; they survive renames and are unique across all
definitions in a system. Deployment labels (``l1``, ``l2``, ...) identify one
deployment of one service and are never reused.

Everything here is immutable; values are safely shareable across threads.
"""

from __future__ import annotations

import functools
from dataclasses import dataclass, field


class CemError(Exception):
    """Base class for all toolkit errors."""

    code = "Error"

    def __str__(self) -> str:
        msg = super().__str__()
        return f"{self.code}: {msg}" if msg else self.code


class ModelError(CemError):
    code = "ModelError"


class DuplicateKey(ModelError):
    code = "DuplicateKey"


class DuplicateName(ModelError):
    code = "DuplicateName"


class ArrowAtBoundary(ModelError):
    code = "ArrowAtBoundary"


class UnresolvedName(ModelError):
    code = "UnresolvedName"


class CyclicType(ModelError):
    code = "CyclicType"


# ---------------------------------------------------------------------------
# Types


@dataclass(frozen=True)
class IntType:
    def __repr__(self) -> str:
        return "int"


@dataclass(frozen=True)
class StringType:
    def __repr__(self) -> str:
        return "string"


@dataclass(frozen=True)
class FieldType:
    """One record field: a label, its immutable key, and a member type."""

    label: str
    key: str
    type: "BaseType"


@dataclass(frozen=True, eq=False)
class RecordType:
    """Record type. Field order is preserved for rendering and for reorder
    detection, but equality and hashing ignore it: fields match by key."""

    fields: tuple[FieldType, ...] = ()

    def __post_init__(self) -> None:
        keys = [f.key for f in self.fields]
        if len(set(keys)) != len(keys):
            raise DuplicateKey(f"record type repeats a field key: {keys}")
        labels = [f.label for f in self.fields]
        if len(set(labels)) != len(labels):
            raise DuplicateName(f"record type repeats a field label: {labels}")

    def _canon(self) -> tuple[FieldType, ...]:
        return tuple(sorted(self.fields, key=lambda f: f.key))

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, RecordType):
            return NotImplemented
        return self._canon() == other._canon()

    def __hash__(self) -> int:
        return hash(self._canon())

    def field_by_key(self, key: str) -> FieldType | None:
        for f in self.fields:
            if f.key == key:
                return f
        return None

    def field_by_label(self, label: str) -> FieldType | None:
        for f in self.fields:
            if f.label == label:
                return f
        return None

    def keys(self) -> frozenset[str]:
        return frozenset(f.key for f in self.fields)


@dataclass(frozen=True)
class NamedType:
    name: str
    key: str


@dataclass(frozen=True)
class Arrow:
    param: "Type"
    result: "Type"


BaseType = IntType | StringType | RecordType | NamedType
Type = BaseType | Arrow

INT = IntType()
STRING = StringType()


def is_base(t: Type) -> bool:
    return not isinstance(t, Arrow)


# ---------------------------------------------------------------------------
# Expressions


@dataclass(frozen=True)
class NumLit:
    value: int


@dataclass(frozen=True)
class StrLit:
    value: str


@dataclass(frozen=True)
class BinOp:
    op: str
    left: "Expr"
    right: "Expr"


@dataclass(frozen=True)
class FunName:
    """A module-level name: a local definition or a referenced function."""

    name: str


@dataclass(frozen=True)
class Var:
    name: str


@dataclass(frozen=True)
class Lambda:
    param: str
    param_type: Type
    body: "Expr"


@dataclass(frozen=True)
class Apply:
    fn: "Expr"
    arg: "Expr"


@dataclass(frozen=True)
class FieldInit:
    label: str
    key: str
    expr: "Expr"


@dataclass(frozen=True)
class RecordLit:
    fields: tuple[FieldInit, ...] = ()


@dataclass(frozen=True)
class Select:
    target: "Expr"
    label: str


@dataclass(frozen=True)
class RecordUpdate:
    target: "Expr"
    fields: tuple[FieldInit, ...]


@dataclass(frozen=True)
class Await:
    """``t?``: the pending result of thread ``t``. Never parsed from source;
    produced only by the remote-call transition."""

    thread: str


@dataclass(frozen=True)
class Adapt:
    """A pending value conversion between two compatible types. Runtime-only,
    left in a consumer thread by the remote-call transition."""

    expr: "Expr"
    from_type: Type
    to_type: Type


@dataclass(frozen=True)
class Lit:
    """A computed runtime value embedded back into expression position."""

    value: "Value"


Expr = (
    NumLit
    | StrLit
    | BinOp
    | FunName
    | Var
    | Lambda
    | Apply
    | RecordLit
    | Select
    | RecordUpdate
    | Await
    | Adapt
    | Lit
)


# ---------------------------------------------------------------------------
# Values


@dataclass(frozen=True)
class IntVal:
    value: int


@dataclass(frozen=True)
class StrVal:
    value: str


@dataclass(frozen=True)
class Closure:
    param: str
    param_type: Type
    body: Expr
    defs: tuple["Definition", ...] = ()


@dataclass(frozen=True)
class KnownField:
    label: str
    key: str
    value: "Value"


@dataclass(frozen=True)
class UnknownField:
    """A key-tagged member carried by a value whose holder was compiled
    without static knowledge of the field. Guarantees no data loss."""

    key: str
    value: "Value"


@dataclass(frozen=True, eq=False)
class RecordVal:
    known: tuple[KnownField, ...] = ()
    unknown: tuple[UnknownField, ...] = ()

    def __post_init__(self) -> None:
        keys = [f.key for f in self.known] + [f.key for f in self.unknown]
        if len(set(keys)) != len(keys):
            raise DuplicateKey(f"record value repeats a key: {keys}")

    def _canon(self) -> tuple:
        return (
            tuple(sorted(self.known, key=lambda f: f.key)),
            tuple(sorted(self.unknown, key=lambda f: f.key)),
        )

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, RecordVal):
            return NotImplemented
        return self._canon() == other._canon()

    def __hash__(self) -> int:
        return hash(self._canon())

    def keys(self) -> frozenset[str]:
        return frozenset(f.key for f in self.known) | frozenset(
            f.key for f in self.unknown
        )

    def member(self, key: str) -> "Value | None":
        """Access a member by key, known or unknown alike."""
        for f in self.known:
            if f.key == key:
                return f.value
        for f in self.unknown:
            if f.key == key:
                return f.value
        return None

    def by_label(self, label: str) -> "Value | None":
        for f in self.known:
            if f.label == label:
                return f.value
        return None


Value = IntVal | StrVal | Closure | RecordVal


def is_first_order(v: Value) -> bool:
    """True when no closure occurs anywhere inside the value."""
    match v:
        case Closure():
            return False
        case RecordVal(known, unknown):
            return all(is_first_order(f.value) for f in known) and all(
                is_first_order(f.value) for f in unknown
            )
        case _:
            return True


# ---------------------------------------------------------------------------
# Modules


Loc = tuple[int, int]  # (line, column); None when built programmatically


@dataclass(frozen=True)
class TypeDef:
    key: str
    name: str
    body: BaseType
    loc: Loc | None = field(default=None, compare=False, repr=False)


@dataclass(frozen=True)
class ValueDef:
    key: str
    name: str
    type: Arrow
    body: Expr
    loc: Loc | None = field(default=None, compare=False, repr=False)


Definition = TypeDef | ValueDef


@dataclass(frozen=True)
class TypeRef:
    producer: str
    name: str
    key: str
    type: BaseType
    loc: Loc | None = field(default=None, compare=False, repr=False)


@dataclass(frozen=True)
class ValueRef:
    producer: str
    name: str
    key: str
    type: Arrow
    loc: Loc | None = field(default=None, compare=False, repr=False)


RefItem = TypeRef | ValueRef


@dataclass(frozen=True)
class Reference:
    producer: str
    items: tuple[RefItem, ...]


@dataclass(frozen=True)
class Module:
    name: str
    refs: tuple[Reference, ...] = ()
    defs: tuple[Definition, ...] = ()

    def ref_for(self, producer: str) -> Reference | None:
        for r in self.refs:
            if r.producer == producer:
                return r
        return None

    def def_named(self, name: str) -> Definition | None:
        for d in self.defs:
            if d.name == name:
                return d
        return None

    def value_ref_named(self, name: str) -> ValueRef | None:
        for r in self.refs:
            for item in r.items:
                if isinstance(item, ValueRef) and item.name == name:
                    return item
        return None


def _base_only(t: Type, where: str) -> None:
    if isinstance(t, Arrow):
        raise ArrowAtBoundary(f"{where}: arrow types are not allowed here")


def validate_module(m: Module) -> None:
    """Check the structural invariants of a module; raise on violation."""
    seen_producers: set[str] = set()
    for r in m.refs:
        if r.producer in seen_producers:
            raise DuplicateName(f"module {m.name}: duplicate ref producer {r.producer}")
        if r.producer == m.name:
            raise DuplicateName(f"module {m.name}: module references itself")
        seen_producers.add(r.producer)
        for item in r.items:
            if item.producer != r.producer:
                raise ModelError(
                    f"module {m.name}: ref item producer {item.producer} "
                    f"does not match enclosing ref {r.producer}"
                )
            if isinstance(item, TypeRef):
                _base_only(item.type, f"type ref {item.name}")
            else:
                _base_only(item.type.param, f"value ref {item.name} parameter")
                _base_only(item.type.result, f"value ref {item.name} result")

    def_keys: set[str] = set()
    names: set[str] = set()
    for d in m.defs:
        if d.key in def_keys:
            raise DuplicateKey(f"module {m.name}: duplicate definition key {d.key}")
        if d.name in names:
            raise DuplicateName(f"module {m.name}: duplicate definition name {d.name}")
        def_keys.add(d.key)
        names.add(d.name)
        if isinstance(d, TypeDef):
            _base_only(d.body, f"type def {d.name}")
        else:
            _base_only(d.type.param, f"value def {d.name} parameter")
            _base_only(d.type.result, f"value def {d.name} result")

    for r in m.refs:
        for item in r.items:
            if item.name in names:
                raise DuplicateName(
                    f"module {m.name}: reference name {item.name} collides "
                    f"with a definition or another reference"
                )
            names.add(item.name)

    overlap = producer_keys(m) & consumer_keys(m)
    if overlap:
        raise DuplicateKey(
            f"module {m.name}: keys defined and referenced at once: {sorted(overlap)}"
        )


def producer_keys(m: Module) -> frozenset[str]:
    """Keys of all definitions of a module."""
    return frozenset(d.key for d in m.defs)


def consumer_keys(m: Module) -> frozenset[str]:
    """Keys of all reference items of a module."""
    return frozenset(item.key for r in m.refs for item in r.items)


# ---------------------------------------------------------------------------
# Signatures


@dataclass(frozen=True)
class SigEntry:
    key: str
    module: str
    name: str
    type: Type  # always fully expanded


@dataclass(frozen=True, eq=False)
class Signature:
    """Map from element keys to fully-expanded types, with the owning module
    and local element name kept alongside."""

    entries: tuple[SigEntry, ...] = ()

    def __post_init__(self) -> None:
        keys = [e.key for e in self.entries]
        if len(set(keys)) != len(keys):
            raise DuplicateKey(f"signature repeats a key: {keys}")

    def _canon(self) -> tuple[SigEntry, ...]:
        return tuple(sorted(self.entries, key=lambda e: e.key))

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, Signature):
            return NotImplemented
        return self._canon() == other._canon()

    def __hash__(self) -> int:
        return hash(self._canon())

    def get(self, key: str) -> SigEntry | None:
        for e in self.entries:
            if e.key == key:
                return e
        return None

    def keys(self) -> frozenset[str]:
        return frozenset(e.key for e in self.entries)

    def __contains__(self, key: str) -> bool:
        return self.get(key) is not None


TypeEnv = dict[str, tuple[str, BaseType]]  # type name -> (key, body)


def type_env_of(m: Module, context: TypeEnv | None = None) -> TypeEnv:
    """Names usable in type position inside ``m``: referenced type items plus
    local type definitions (local names shadow nothing; duplicates are
    rejected by validate_module)."""
    env: TypeEnv = dict(context) if context else {}
    for r in m.refs:
        for item in r.items:
            if isinstance(item, TypeRef):
                env[item.name] = (item.key, item.type)
    for d in m.defs:
        if isinstance(d, TypeDef):
            env[d.name] = (d.key, d.body)
    return env


def expand_base(t: BaseType, env: TypeEnv, _opening: frozenset[str] = frozenset()) -> BaseType:
    """Expand named types away. Raises UnresolvedName or CyclicType."""
    match t:
        case IntType() | StringType():
            return t
        case NamedType(name, key):
            if name not in env:
                raise UnresolvedName(f"type name {name}@{key} is not defined or referenced")
            bound_key, body = env[name]
            if bound_key != key:
                raise UnresolvedName(
                    f"type name {name} is bound to key {bound_key}, not {key}"
                )
            if key in _opening:
                raise CyclicType(f"type {name}@{key} expands to itself")
            return expand_base(body, env, _opening | {key})
        case RecordType(fields):
            return RecordType(
                tuple(
                    FieldType(f.label, f.key, expand_base(f.type, env, _opening))
                    for f in fields
                )
            )
    raise ModelError(f"not a base type: {t!r}")


def expand_type(t: Type, env: TypeEnv) -> Type:
    if isinstance(t, Arrow):
        return Arrow(expand_type(t.param, env), expand_type(t.result, env))
    return expand_base(t, env)


def signature_of(m: Module, context: TypeEnv | None = None) -> Signature:
    """One entry per definition of ``m``, with its declared type fully
    expanded against the module's own type environment."""
    if context is None:
        return _signature_of_self(m)
    return _signature_of(m, context)


@functools.lru_cache(maxsize=4096)
def _signature_of_self(m: Module) -> Signature:
    return _signature_of(m, None)


def _signature_of(m: Module, context: TypeEnv | None) -> Signature:
    env = type_env_of(m, context)
    entries = []
    for d in m.defs:
        if isinstance(d, TypeDef):
            expanded: Type = expand_base(d.body, env)
        else:
            expanded = Arrow(
                expand_base(d.type.param, env), expand_base(d.type.result, env)
            )
        entries.append(SigEntry(d.key, m.name, d.name, expanded))
    return Signature(tuple(entries))


# ---------------------------------------------------------------------------
# Services and systems


@dataclass(frozen=True)
class ValueProxy:
    local_name: str
    remote_name: str
    type: Arrow


@dataclass(frozen=True)
class ReadyProxy:
    producer: str
    entries: tuple[ValueProxy, ...]
    label: str


@dataclass(frozen=True)
class OutdatedProxy:
    """Placeholder holding the producer's signature and label, enough to
    materialize fresh value proxies."""

    producer: str
    signature: Signature
    label: str


Proxy = ReadyProxy | OutdatedProxy


@dataclass(frozen=True)
class Thread:
    id: str
    expr: Expr


@dataclass(frozen=True)
class Service:
    module: Module
    proxies: tuple[Proxy, ...]
    label: str
    threads: tuple[Thread, ...] = ()

    @property
    def name(self) -> str:
        return self.module.name

    def proxy_for(self, producer: str) -> Proxy | None:
        for p in self.proxies:
            if p.producer == producer:
                return p
        return None


@dataclass(frozen=True)
class System:
    services: tuple[Service, ...] = ()
    next_label: int = 1
    next_thread: int = 1

    def service(self, name: str) -> Service | None:
        for s in self.services:
            if s.name == name:
                return s
        return None

    def replace_service(self, svc: Service) -> "System":
        return System(
            tuple(svc if s.name == svc.name else s for s in self.services),
            self.next_label,
            self.next_thread,
        )


def validate_service(s: Service) -> None:
    validate_module(s.module)
    ref_producers = {r.producer for r in s.module.refs}
    proxy_producers = [p.producer for p in s.proxies]
    if len(set(proxy_producers)) != len(proxy_producers):
        raise DuplicateName(f"service {s.name}: duplicate proxy producer")
    if set(proxy_producers) != ref_producers:
        raise ModelError(
            f"service {s.name}: proxies cover {sorted(proxy_producers)} "
            f"but refs name {sorted(ref_producers)}"
        )


def validate_system(u: System) -> None:
    names = [s.name for s in u.services]
    if len(set(names)) != len(names):
        raise DuplicateName(f"system repeats a service name: {names}")
    tids = [t.id for s in u.services for t in s.threads]
    if len(set(tids)) != len(tids):
        raise DuplicateKey(f"system repeats a thread id: {tids}")
    for s in u.services:
        validate_service(s)
