"""Canonical JSON encoding of every runtime structure.

Used for registry state files, snapshot hashing, and trace export. The
encoding is total over runtime expressions (including awaits, pending
conversions, and embedded values), deterministic (sorted keys, no
whitespace), and round-trips exactly, so equal seeds yield byte-identical
traces and state files.
"""

from __future__ import annotations

import hashlib
import json

from .model import (
    Adapt,
    Apply,
    Arrow,
    Await,
    BinOp,
    CemError,
    Closure,
    Expr,
    FieldInit,
    FieldType,
    FunName,
    INT,
    IntVal,
    KnownField,
    Lambda,
    Lit,
    Module,
    NamedType,
    NumLit,
    OutdatedProxy,
    Proxy,
    ReadyProxy,
    RecordLit,
    RecordType,
    RecordUpdate,
    RecordVal,
    Reference,
    Select,
    Service,
    SigEntry,
    Signature,
    STRING,
    StrLit,
    StrVal,
    System,
    Thread,
    Type,
    TypeDef,
    TypeRef,
    UnknownField,
    Value,
    ValueDef,
    ValueProxy,
    ValueRef,
    Var,
)
from . import runtime
from .wire import encode_value


class EncodingError(CemError):
    code = "EncodingError"


def canonical_bytes(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":")).encode("utf-8")


# ---------------------------------------------------------------------------
# Types


def type_to_json(t: Type) -> list:
    match t:
        case Arrow(param, result):
            return ["->", type_to_json(param), type_to_json(result)]
        case NamedType(name, key):
            return ["named", name, key]
        case RecordType(fields):
            return ["rec", [[f.label, f.key, type_to_json(f.type)] for f in fields]]
        case _:
            return ["string"] if t == STRING else ["int"]


def type_from_json(j) -> Type:
    match j:
        case ["int"]:
            return INT
        case ["string"]:
            return STRING
        case ["named", name, key]:
            return NamedType(name, key)
        case ["rec", fields]:
            return RecordType(
                tuple(FieldType(label, key, type_from_json(t)) for label, key, t in fields)
            )
        case ["->", param, result]:
            return Arrow(type_from_json(param), type_from_json(result))
    raise EncodingError(f"bad type encoding: {j!r}")


# ---------------------------------------------------------------------------
# Expressions and values


def expr_to_json(e: Expr) -> list:
    match e:
        case NumLit(v):
            return ["num", v]
        case StrLit(v):
            return ["str", v]
        case BinOp(op, left, right):
            return ["bin", op, expr_to_json(left), expr_to_json(right)]
        case FunName(name):
            return ["fun", name]
        case Var(name):
            return ["var", name]
        case Lambda(param, ptype, body):
            return ["lam", param, type_to_json(ptype), expr_to_json(body)]
        case Apply(fn, arg):
            return ["app", expr_to_json(fn), expr_to_json(arg)]
        case RecordLit(fields):
            return ["rec", [[f.label, f.key, expr_to_json(f.expr)] for f in fields]]
        case Select(target, label):
            return ["sel", expr_to_json(target), label]
        case RecordUpdate(target, fields):
            return [
                "upd",
                expr_to_json(target),
                [[f.label, f.key, expr_to_json(f.expr)] for f in fields],
            ]
        case Await(thread):
            return ["await", thread]
        case Adapt(inner, from_type, to_type):
            return ["adapt", expr_to_json(inner), type_to_json(from_type), type_to_json(to_type)]
        case Lit(value):
            return ["lit", value_to_json(value)]
    raise EncodingError(f"cannot encode expression {e!r}")


def expr_from_json(j) -> Expr:
    match j:
        case ["num", v]:
            return NumLit(v)
        case ["str", v]:
            return StrLit(v)
        case ["bin", op, left, right]:
            return BinOp(op, expr_from_json(left), expr_from_json(right))
        case ["fun", name]:
            return FunName(name)
        case ["var", name]:
            return Var(name)
        case ["lam", param, ptype, body]:
            return Lambda(param, type_from_json(ptype), expr_from_json(body))
        case ["app", fn, arg]:
            return Apply(expr_from_json(fn), expr_from_json(arg))
        case ["rec", fields]:
            return RecordLit(
                tuple(FieldInit(label, key, expr_from_json(x)) for label, key, x in fields)
            )
        case ["sel", target, label]:
            return Select(expr_from_json(target), label)
        case ["upd", target, fields]:
            return RecordUpdate(
                expr_from_json(target),
                tuple(FieldInit(label, key, expr_from_json(x)) for label, key, x in fields),
            )
        case ["await", thread]:
            return Await(thread)
        case ["adapt", inner, from_type, to_type]:
            return Adapt(expr_from_json(inner), type_from_json(from_type), type_from_json(to_type))
        case ["lit", value]:
            return Lit(value_from_json(value))
    raise EncodingError(f"bad expression encoding: {j!r}")


def value_to_json(v: Value) -> list:
    match v:
        case IntVal(n):
            return ["int", n]
        case StrVal(s):
            return ["str", s]
        case Closure(param, ptype, body, defs):
            return [
                "clo",
                param,
                type_to_json(ptype),
                expr_to_json(body),
                [def_to_json(d) for d in defs],
            ]
        case RecordVal(known, unknown):
            return [
                "rec",
                [[f.label, f.key, value_to_json(f.value)] for f in known],
                [[f.key, value_to_json(f.value)] for f in unknown],
            ]
    raise EncodingError(f"cannot encode value {v!r}")


def value_from_json(j) -> Value:
    match j:
        case ["int", n]:
            return IntVal(n)
        case ["str", s]:
            return StrVal(s)
        case ["clo", param, ptype, body, defs]:
            return Closure(
                param,
                type_from_json(ptype),
                expr_from_json(body),
                tuple(def_from_json(d) for d in defs),
            )
        case ["rec", known, unknown]:
            return RecordVal(
                tuple(KnownField(label, key, value_from_json(x)) for label, key, x in known),
                tuple(UnknownField(key, value_from_json(x)) for key, x in unknown),
            )
    raise EncodingError(f"bad value encoding: {j!r}")


# ---------------------------------------------------------------------------
# Modules, services, systems


def def_to_json(d) -> dict:
    if isinstance(d, TypeDef):
        return {"kind": "type", "key": d.key, "name": d.name, "body": type_to_json(d.body)}
    return {
        "kind": "fun",
        "key": d.key,
        "name": d.name,
        "type": type_to_json(d.type),
        "body": expr_to_json(d.body),
    }


def def_from_json(j):
    if j["kind"] == "type":
        return TypeDef(j["key"], j["name"], type_from_json(j["body"]))
    t = type_from_json(j["type"])
    if not isinstance(t, Arrow):
        raise EncodingError(f"value definition {j['name']} must have an arrow type")
    return ValueDef(j["key"], j["name"], t, expr_from_json(j["body"]))


def module_to_json(m: Module) -> dict:
    return {
        "name": m.name,
        "refs": [
            {
                "producer": r.producer,
                "items": [
                    {
                        "kind": "type" if isinstance(item, TypeRef) else "fun",
                        "producer": item.producer,
                        "name": item.name,
                        "key": item.key,
                        "type": type_to_json(item.type),
                    }
                    for item in r.items
                ],
            }
            for r in m.refs
        ],
        "defs": [def_to_json(d) for d in m.defs],
    }


def module_from_json(j) -> Module:
    refs = []
    for r in j["refs"]:
        items = []
        for item in r["items"]:
            t = type_from_json(item["type"])
            if item["kind"] == "type":
                items.append(TypeRef(item["producer"], item["name"], item["key"], t))
            else:
                if not isinstance(t, Arrow):
                    raise EncodingError(f"value reference {item['name']} must be an arrow")
                items.append(ValueRef(item["producer"], item["name"], item["key"], t))
        refs.append(Reference(r["producer"], tuple(items)))
    return Module(j["name"], tuple(refs), tuple(def_from_json(d) for d in j["defs"]))


def _sig_to_json(sig: Signature) -> list:
    return [
        {"key": e.key, "module": e.module, "name": e.name, "type": type_to_json(e.type)}
        for e in sig.entries
    ]


def _sig_from_json(j) -> Signature:
    return Signature(
        tuple(SigEntry(e["key"], e["module"], e["name"], type_from_json(e["type"])) for e in j)
    )


def proxy_to_json(p: Proxy) -> dict:
    if isinstance(p, ReadyProxy):
        return {
            "kind": "ready",
            "producer": p.producer,
            "label": p.label,
            "entries": [
                {"local": e.local_name, "remote": e.remote_name, "type": type_to_json(e.type)}
                for e in p.entries
            ],
        }
    return {
        "kind": "outdated",
        "producer": p.producer,
        "label": p.label,
        "signature": _sig_to_json(p.signature),
    }


def proxy_from_json(j) -> Proxy:
    if j["kind"] == "ready":
        entries = []
        for e in j["entries"]:
            t = type_from_json(e["type"])
            if not isinstance(t, Arrow):
                raise EncodingError("proxy entry must have an arrow type")
            entries.append(ValueProxy(e["local"], e["remote"], t))
        return ReadyProxy(j["producer"], tuple(entries), j["label"])
    return OutdatedProxy(j["producer"], _sig_from_json(j["signature"]), j["label"])


def system_to_json(u: System) -> dict:
    return {
        "services": [
            {
                "module": module_to_json(s.module),
                "proxies": [proxy_to_json(p) for p in s.proxies],
                "label": s.label,
                "threads": [{"id": t.id, "expr": expr_to_json(t.expr)} for t in s.threads],
            }
            for s in u.services
        ],
        "next_label": u.next_label,
        "next_thread": u.next_thread,
    }


def system_from_json(j) -> System:
    services = tuple(
        Service(
            module_from_json(s["module"]),
            tuple(proxy_from_json(p) for p in s["proxies"]),
            s["label"],
            tuple(Thread(t["id"], expr_from_json(t["expr"])) for t in s["threads"]),
        )
        for s in j["services"]
    )
    return System(services, j["next_label"], j["next_thread"])


def system_hash(u: System) -> str:
    return hashlib.sha256(canonical_bytes(system_to_json(u))).hexdigest()[:16]


# ---------------------------------------------------------------------------
# Trace export


def event_to_record(event: runtime.Event, step: int, system: System) -> dict:
    """One newline-delimited trace record: step index, the event, and a
    snapshot hash of the system after it. Inter-service payloads appear in
    the wire encoding."""
    record: dict = {"step": step, "hash": system_hash(system)}
    match event:
        case runtime.ExprStep(service, thread):
            record |= {"event": "ExprStep", "service": service, "thread": thread}
        case runtime.Invoked(consumer, producer, local, remote, thread, argument):
            record |= {
                "event": "Invoked",
                "consumer": consumer,
                "producer": producer,
                "local": local,
                "remote": remote,
                "thread": thread,
                "payload": encode_value(argument),
            }
        case runtime.Resolved(thread, value):
            record |= {"event": "Resolved", "thread": thread, "payload": encode_value(value)}
        case runtime.Rejected(consumer, producer, stale, current):
            record |= {
                "event": "Rejected",
                "consumer": consumer,
                "producer": producer,
                "stale_label": stale,
                "current_label": current,
            }
        case runtime.ProxyGenerated(consumer, producer, label):
            record |= {
                "event": "ProxyGenerated",
                "consumer": consumer,
                "producer": producer,
                "label": label,
            }
        case runtime.Deployed(names, labels):
            record |= {"event": "Deployed", "names": list(names), "labels": list(labels)}
        case runtime.Undeployed(names):
            record |= {"event": "Undeployed", "names": list(names)}
        case runtime.Started(service, thread):
            record |= {"event": "Started", "service": service, "thread": thread}
        case _:
            raise EncodingError(f"cannot encode event {event!r}")
    return record


def trace_lines(records: list[dict]) -> bytes:
    return b"\n".join(canonical_bytes(r) for r in records) + (b"\n" if records else b"")
