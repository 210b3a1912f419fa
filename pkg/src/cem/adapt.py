"""Value adaptation between compatible type versions, plus proxy-entry
generation.

Conversion is driven by the target type, field by field, matching members
by key. A member the source value carries is copied (converted recursively
when its runtime shape differs from the declared field type); a member the
source lacks is filled with the default of its type; and every member of
the source the target does not declare is preserved as an unknown field, so
nothing is ever dropped. Known and unknown members are looked up uniformly
by key: a value that traveled through a service compiled without a field
still restores it when it reaches one that knows it.
"""

from __future__ import annotations

from dataclasses import dataclass

from .model import (
    Arrow,
    BaseType,
    CemError,
    Closure,
    FieldType,
    IntType,
    IntVal,
    KnownField,
    Lit,
    NamedType,
    RecordType,
    RecordVal,
    Signature,
    StringType,
    StrVal,
    Type,
    UnknownField,
    Value,
    ValueRef,
    Var,
)


class AdaptError(CemError):
    code = "AdaptError"


class HigherOrderAtBoundary(AdaptError):
    code = "HigherOrderAtBoundary"


class IrreconcilableShape(AdaptError):
    code = "IrreconcilableShape"


class MissingEndpoint(AdaptError):
    code = "MissingEndpoint"

    def __init__(self, key: str, message: str):
        super().__init__(message)
        self.key = key


def default_value(beta: BaseType) -> Value:
    """The predetermined default of a base type: 0, "", or a record of
    member defaults (never with unknown fields)."""
    match beta:
        case IntType():
            return IntVal(0)
        case StringType():
            return StrVal("")
        case RecordType(fields):
            return RecordVal(
                tuple(KnownField(f.label, f.key, default_value(f.type)) for f in fields)
            )
        case NamedType(name, key):
            raise AdaptError(f"default of unexpanded type {name}@{key}")
    raise AdaptError(f"no default for {beta!r}")


def value_shape(v: Value) -> Type:
    """The runtime shape of a value, inferred structurally: records are
    typed by their known and unknown keys alike (unknown members get a
    synthetic label, which nothing downstream relies on)."""
    match v:
        case IntVal():
            return IntType()
        case StrVal():
            return StringType()
        case Closure(_, ptype, _, _):
            return Arrow(ptype, ptype)  # parameter side only; never compared
        case RecordVal(known, unknown):
            fields = [FieldType(f.label, f.key, value_shape(f.value)) for f in known]
            fields += [FieldType(f"#{f.key}", f.key, value_shape(f.value)) for f in unknown]
            return RecordType(tuple(fields))
    raise AdaptError(f"cannot infer shape of {v!r}")


# ---------------------------------------------------------------------------
# Adapter plans


@dataclass(frozen=True)
class Keep:
    key: str


@dataclass(frozen=True)
class Recurse:
    key: str
    from_type: Type
    to_type: Type


@dataclass(frozen=True)
class Default:
    key: str
    type: BaseType


@dataclass(frozen=True)
class PreserveUnknown:
    key: str


Action = Keep | Recurse | Default | PreserveUnknown


@dataclass(frozen=True)
class AdapterPlan:
    """Static skeleton of a record conversion: one action per key of either
    side. Keep/Recurse may still defer to the runtime shape of a member when
    the value carries something other than its declared type."""

    from_type: Type
    to_type: Type
    actions: tuple[Action, ...] = ()


def plan_adapter(from_type: Type, to_type: Type) -> AdapterPlan:
    actions: list[Action] = []
    if isinstance(from_type, RecordType) and isinstance(to_type, RecordType):
        from_keys = from_type.keys()
        for f in to_type.fields:
            src = from_type.field_by_key(f.key)
            if src is None:
                actions.append(Default(f.key, f.type))
            elif src.type == f.type:
                actions.append(Keep(f.key))
            else:
                actions.append(Recurse(f.key, src.type, f.type))
        for key in sorted(from_keys - to_type.keys()):
            actions.append(PreserveUnknown(key))
    return AdapterPlan(from_type, to_type, tuple(actions))


# ---------------------------------------------------------------------------
# Conversion


def convert(v: Value, from_type: Type, to_type: Type) -> Value:
    """Adapt ``v`` from one type version to another. Identity when the types
    already agree; wrapper closure for arrows; per-field adaptation for
    records, preserving every member the target does not declare."""
    if from_type == to_type:
        return v
    if isinstance(from_type, Arrow) or isinstance(to_type, Arrow):
        if not (isinstance(from_type, Arrow) and isinstance(to_type, Arrow)):
            raise IrreconcilableShape(f"{from_type!r} versus {to_type!r}")
        if not isinstance(v, Closure):
            raise IrreconcilableShape(f"arrow conversion of non-closure {v!r}")
        return _convert_arrow(v, from_type, to_type)
    if isinstance(to_type, RecordType):
        if not isinstance(v, RecordVal):
            raise IrreconcilableShape(f"record conversion of {v!r}")
        known: list[KnownField] = []
        for f in to_type.fields:
            member = v.member(f.key)
            if member is None:
                known.append(KnownField(f.label, f.key, default_value(f.type)))
                continue
            shape = value_shape(member)
            if shape == f.type:
                known.append(KnownField(f.label, f.key, member))
            else:
                known.append(KnownField(f.label, f.key, convert(member, shape, f.type)))
        target_keys = to_type.keys()
        unknown = tuple(
            UnknownField(key, member)
            for key in sorted(v.keys() - target_keys)
            if (member := v.member(key)) is not None
        )
        return RecordVal(tuple(known), unknown)
    # Ground target that differs from the source type: nothing to adapt with.
    shape = value_shape(v)
    if shape == to_type:
        return v
    raise IrreconcilableShape(
        f"cannot adapt {shape!r} to {to_type!r}; an incompatible deployment "
        f"slipped past the preflight check"
    )


def _convert_arrow(v: Closure, from_type: Arrow, to_type: Arrow) -> Closure:
    from .model import Adapt, Apply

    param = "__adapted"
    body = Adapt(
        Apply(Lit(v), Adapt(Var(param), to_type.param, from_type.param)),
        from_type.result,
        to_type.result,
    )
    return Closure(param, to_type.param, body, v.defs)


# ---------------------------------------------------------------------------
# Proxy generation


def gen_proxies(producer: str, ref_items: tuple, phi: Signature) -> tuple:
    """Materialize value proxies for every function reference toward a
    producer, from the producer's current signature: local name, the
    producer's current name for the key, and its current type. Type
    references need no proxy."""
    from .model import ValueProxy

    entries = []
    for item in ref_items:
        if not isinstance(item, ValueRef):
            continue
        entry = phi.get(item.key)
        if entry is None:
            raise MissingEndpoint(
                item.key,
                f"producer {producer} provides no element with key {item.key} "
                f"(referenced as {item.name})",
            )
        if not isinstance(entry.type, Arrow):
            raise MissingEndpoint(
                item.key,
                f"key {item.key} of {producer} is a type, not a callable endpoint",
            )
        entries.append(ValueProxy(item.name, entry.name, entry.type))
    return tuple(entries)
