"""Bit-exact wire codec for values exchanged between services.

The wire format is JSON: integers as numbers, strings as strings, records as
objects whose member names are element-key ids. Field labels never appear on
the wire; a decoder recovers labels from its own expected type and keeps
every member it has no static knowledge of as an unknown field, so data
survives services compiled against older type versions.

Canonical bytes sort members by key id and carry no whitespace, so identical
values always serialize identically.
"""

from __future__ import annotations

import json

from .model import (
    Arrow,
    BaseType,
    CemError,
    Closure,
    IntType,
    IntVal,
    KnownField,
    NamedType,
    RecordType,
    RecordVal,
    StringType,
    StrVal,
    UnknownField,
    Value,
)

WireValue = int | str | dict


class WireError(CemError):
    code = "WireError"


class HigherOrderValue(WireError):
    code = "HigherOrderValue"


class MalformedWire(WireError):
    code = "MalformedWire"


class TypeMismatch(WireError):
    code = "TypeMismatch"


def encode_value(v: Value, declared: BaseType | None = None) -> WireValue:
    """Encode a first-order value as a key-tagged JSON tree. ``declared`` is
    the sender's static type for the value; it only guards against closures
    smuggled past the first-order boundary."""
    match v:
        case IntVal(n):
            return n
        case StrVal(s):
            return s
        case Closure():
            raise HigherOrderValue("closures cannot cross a service boundary")
        case RecordVal(known, unknown):
            out: dict[str, WireValue] = {}
            for f in known:
                out[f.key] = encode_value(f.value)
            for u in unknown:
                out[u.key] = encode_value(u.value)
            return out
    raise WireError(f"cannot encode {v!r}")


def _decode_untyped(w: WireValue) -> Value:
    """Decode with no static expectation: every object member is unknown."""
    if isinstance(w, bool):
        raise MalformedWire("booleans are not wire values")
    if isinstance(w, int):
        return IntVal(w)
    if isinstance(w, str):
        return StrVal(w)
    if isinstance(w, dict):
        return RecordVal(
            (), tuple(UnknownField(k, _decode_untyped(w[k])) for k in sorted(w))
        )
    raise MalformedWire(f"not a wire value: {w!r}")


def decode_value(w: WireValue, expected: BaseType) -> Value:
    """Decode a wire tree against the receiver's expected type.

    Members whose key matches a field of ``expected`` become known fields
    under the local label; all other members are preserved as unknown fields.
    Shape conflicts on known members raise TypeMismatch; the check is
    structural only.
    """
    if isinstance(w, bool):
        raise MalformedWire("booleans are not wire values")
    match expected:
        case IntType():
            if not isinstance(w, int):
                raise TypeMismatch(f"expected an integer, found {w!r}")
            return IntVal(w)
        case StringType():
            if not isinstance(w, str):
                raise TypeMismatch(f"expected a string, found {w!r}")
            return StrVal(w)
        case RecordType(fields):
            if not isinstance(w, dict):
                raise TypeMismatch(f"expected an object, found {w!r}")
            field_keys = {f.key for f in fields}
            known = tuple(
                KnownField(f.label, f.key, decode_value(w[f.key], f.type))
                for f in fields
                if f.key in w
            )
            unknown = tuple(
                UnknownField(k, _decode_untyped(w[k]))
                for k in sorted(w)
                if k not in field_keys
            )
            return RecordVal(known, unknown)
        case NamedType(name, key):
            raise WireError(f"expected type must be expanded, found {name}@{key}")
        case Arrow():
            raise HigherOrderValue("arrow types cannot cross a service boundary")
    raise WireError(f"not a base type: {expected!r}")


def wire_bytes(w: WireValue) -> bytes:
    """Canonical serialization: members sorted by key id, no whitespace."""
    return json.dumps(w, sort_keys=True, separators=(",", ":")).encode("utf-8")


def wire_from_bytes(raw: bytes | str) -> WireValue:
    try:
        w = json.loads(raw)
    except json.JSONDecodeError as e:
        raise MalformedWire(str(e)) from e
    _check_wire(w)
    return w


def _check_wire(w: object) -> None:
    if isinstance(w, bool):
        raise MalformedWire("booleans are not wire values")
    if isinstance(w, (int, str)):
        return
    if isinstance(w, dict):
        for k, member in w.items():
            if not isinstance(k, str):
                raise MalformedWire(f"member name must be a key id, found {k!r}")
            _check_wire(member)
        return
    raise MalformedWire(f"not a wire value: {w!r}")
