"""The deployment preflight relations: key-based type compatibility,
used-key computation, batch-versus-system compatibility, and the
disconnectedness test that gates undeployment.

Type compatibility ``old ~~mu~> new`` is unidirectional and reflexive:
ground types must match exactly, arrows are contravariant in the parameter
and covariant in the result, and record fields are related by key, never by
label or position. A field may disappear only if its key is outside ``mu``,
the set of keys consumers actually use; fields present only on the new side
are always fine, because adapters fill them with defaults or carry them as
unknown members.
"""

from __future__ import annotations

import functools
from dataclasses import dataclass

from .model import (
    Arrow,
    CemError,
    Expr,
    IntType,
    Module,
    NamedType,
    RecordType,
    StringType,
    System,
    Type,
    ValueDef,
    ValueRef,
    consumer_keys,
    producer_keys,
)
from .typecheck import EnvEntry, GlobalEnv, collect_usage, expand_type


class CompatError(CemError):
    code = "CompatError"


class UnknownService(CompatError):
    code = "UnknownService"


# ---------------------------------------------------------------------------
# Used keys


def _type_keys(t: Type) -> frozenset[str]:
    """Every key occurring syntactically in a type."""
    match t:
        case IntType() | StringType():
            return frozenset()
        case NamedType(_, key):
            return frozenset({key})
        case RecordType(fields):
            out = frozenset(f.key for f in fields)
            for f in fields:
                out |= _type_keys(f.type)
            return out
        case Arrow(param, result):
            return _type_keys(param) | _type_keys(result)
    return frozenset()


def _expr_keys(e: Expr) -> frozenset[str]:
    """Every key occurring syntactically in an expression: record literals
    and updates name field keys, annotations name type and field keys."""
    from .model import (
        Adapt,
        Apply,
        BinOp,
        Lambda,
        RecordLit,
        RecordUpdate,
        Select,
    )

    match e:
        case BinOp(_, left, right):
            return _expr_keys(left) | _expr_keys(right)
        case Lambda(_, ptype, body):
            return _type_keys(ptype) | _expr_keys(body)
        case Apply(fn, arg):
            return _expr_keys(fn) | _expr_keys(arg)
        case RecordLit(fields):
            out = frozenset(f.key for f in fields)
            for f in fields:
                out |= _expr_keys(f.expr)
            return out
        case Select(target, _):
            return _expr_keys(target)
        case RecordUpdate(target, fields):
            out = _expr_keys(target) | frozenset(f.key for f in fields)
            for f in fields:
                out |= _expr_keys(f.expr)
            return out
        case Adapt(inner, from_type, to_type):
            return _expr_keys(inner) | _type_keys(from_type) | _type_keys(to_type)
        case _:
            return frozenset()


def _ref_universe(items: tuple) -> frozenset[str]:
    out: frozenset[str] = frozenset()
    for item in items:
        out |= {item.key} | _type_keys(item.type)
    return out


@functools.lru_cache(maxsize=4096)
def used_keys(m: Module, producer: str) -> frozenset[str]:
    """Keys of ``producer``'s elements the module actually uses in its
    definitions: keys written in annotations, record expressions and
    updates; keys of fields reached by label selection; and, for every
    referenced function the code mentions, its key plus the keys written in
    its declared type."""
    ref = m.ref_for(producer)
    if ref is None:
        return frozenset()
    universe = _ref_universe(ref.items)

    occur: frozenset[str] = frozenset()
    for d in m.defs:
        if isinstance(d, ValueDef):
            occur |= _type_keys(d.type) | _expr_keys(d.body)
        else:
            occur |= _type_keys(d.body)

    usage = collect_usage(m)
    occur |= frozenset(usage.select_keys)
    for item in ref.items:
        if isinstance(item, ValueRef) and item.name in usage.fun_names:
            occur |= {item.key} | _type_keys(item.type)

    return occur & universe


def used_keys_of_system(u: System, excluding: frozenset[str] = frozenset()) -> frozenset[str]:
    """Union of used keys over every service not named in ``excluding``."""
    out: frozenset[str] = frozenset()
    for s in u.services:
        if s.name in excluding:
            continue
        for r in s.module.refs:
            out |= used_keys(s.module, r.producer)
    return out


# ---------------------------------------------------------------------------
# Type compatibility (the adapter-existence relation)


def type_compatible(tau: Type, sigma: Type, mu: frozenset[str] | set[str]) -> bool:
    """True when a value adapter exists from ``tau``-typed producers to
    consumers compiled against ``sigma`` (and the other way), given that
    only keys in ``mu`` are relied upon. Both types must be fully expanded.
    """
    match (tau, sigma):
        case (Arrow(p1, r1), Arrow(p2, r2)):
            return type_compatible(p2, p1, mu) and type_compatible(r1, r2, mu)
        case (RecordType(fields), RecordType()):
            for f in fields:
                if f.key not in mu:
                    continue
                other = sigma.field_by_key(f.key)
                if other is None or not type_compatible(f.type, other.type, mu):
                    return False
            return True
        case _:
            return tau == sigma


def incompatible_field_keys(tau: Type, sigma: Type, mu: frozenset[str] | set[str]) -> frozenset[str]:
    """The used field keys at which ``tau ~~mu~> sigma`` breaks down; empty
    when the failure is a ground mismatch with no key to blame."""
    match (tau, sigma):
        case (Arrow(p1, r1), Arrow(p2, r2)):
            return incompatible_field_keys(p2, p1, mu) | incompatible_field_keys(r1, r2, mu)
        case (RecordType(fields), RecordType()):
            out: set[str] = set()
            for f in fields:
                if f.key not in mu:
                    continue
                other = sigma.field_by_key(f.key)
                if other is None:
                    out.add(f.key)
                elif not type_compatible(f.type, other.type, mu):
                    deeper = incompatible_field_keys(f.type, other.type, mu)
                    out |= deeper or {f.key}
            return frozenset(out)
        case _:
            return frozenset()


@dataclass(frozen=True)
class Violation:
    key: str
    clause: str  # "provider" | "consumer"
    expected: Type | None
    found: Type | None
    reason: str
    offending: tuple[str, ...] = ()

    def as_dict(self) -> dict:
        from .parser import render_type

        return {
            "key": self.key,
            "clause": self.clause,
            "expected": None if self.expected is None else render_type(self.expected),
            "found": None if self.found is None else render_type(self.found),
            "reason": self.reason,
            "offending": list(self.offending),
        }


@dataclass(frozen=True)
class CompatVerdict:
    violations: tuple[Violation, ...] = ()

    @property
    def ok(self) -> bool:
        return not self.violations

    def render(self) -> str:
        if self.ok:
            return "compatible\n"
        lines = []
        for v in self.violations:
            exp = "-" if v.expected is None else _short_type(v.expected)
            fnd = "-" if v.found is None else _short_type(v.found)
            lines.append(f"{v.key}\t{v.clause}\t{exp}\t{fnd}\t{v.reason}")
        return "\n".join(lines) + "\n"


def _short_type(t: Type) -> str:
    from .parser import render_type

    return render_type(t)


# ---------------------------------------------------------------------------
# Module compatibility against a deployed system


def module_compatibility_check(
    deployed: System,
    phi: dict[str, EnvEntry],
    modules: tuple[Module, ...] | list[Module],
    c: GlobalEnv,
    p: GlobalEnv,
) -> tuple[CompatVerdict, dict[str, EnvEntry]]:
    """Decide whether a batch of (already well-typed) modules can replace
    and extend the deployed system without disrupting it.

    Provider clause: every key the replaced services used to provide that a
    remaining service consumes must still be provided, and the deployed type
    must evolve compatibly to the new one under the remaining consumers'
    used keys. Consumer clause: every reference recorded in the batch must
    name a key the updated system will provide, with the recorded type
    evolving compatibly to the provided one under the batch's used keys.

    Returns the verdict and, for an accepted batch, the updated signature.
    """
    names = frozenset(m.name for m in modules)
    replaced_keys: set[str] = set()
    for s in deployed.services:
        if s.name in names:
            replaced_keys |= set(producer_keys(s.module))

    remaining_theta: set[str] = set()
    for s in deployed.services:
        if s.name not in names:
            remaining_theta |= set(consumer_keys(s.module))
    mu_remaining = used_keys_of_system(deployed, excluding=names)

    next_phi = {k: e for k, e in phi.items() if k not in replaced_keys}
    for k, entry in p.items():
        next_phi[k] = entry

    violations: list[Violation] = []

    for k in sorted(replaced_keys | set(p.keys())):
        if k not in remaining_theta:
            continue
        if k not in p:
            violations.append(
                Violation(
                    k,
                    "provider",
                    phi[k].type if k in phi else None,
                    None,
                    "still consumed by a deployed service but no longer provided",
                )
            )
            continue
        if k in phi and not type_compatible(phi[k].type, p[k].type, mu_remaining):
            offending = tuple(
                sorted(incompatible_field_keys(phi[k].type, p[k].type, mu_remaining))
            )
            detail = (
                f"; used fields {', '.join(offending)} are dropped or changed"
                if offending
                else ""
            )
            violations.append(
                Violation(
                    k,
                    "provider",
                    phi[k].type,
                    p[k].type,
                    "deployed type does not evolve compatibly for remaining consumers"
                    + detail,
                    offending,
                )
            )

    mu_batch: frozenset[str] = frozenset()
    for m in modules:
        for r in m.refs:
            mu_batch |= used_keys(m, r.producer)

    from .model import TypeRef

    for m in modules:
        sigma_refs = {}
        for r in m.refs:
            for item in r.items:
                if isinstance(item, TypeRef):
                    sigma_refs[item.name] = (item.key, item.type)
        for r in m.refs:
            for item in r.items:
                k = item.key
                if k not in c:
                    violations.append(
                        Violation(
                            k,
                            "consumer",
                            expand_type(item.type, sigma_refs),
                            None,
                            f"{m.name} references a key no module provides",
                        )
                    )
                    continue
                if k not in next_phi:
                    violations.append(
                        Violation(
                            k,
                            "consumer",
                            expand_type(item.type, sigma_refs),
                            None,
                            f"{m.name} references a key the updated system drops",
                        )
                    )
                    continue
                declared = expand_type(item.type, sigma_refs)
                if not type_compatible(declared, next_phi[k].type, mu_batch):
                    offending = tuple(
                        sorted(incompatible_field_keys(declared, next_phi[k].type, mu_batch))
                    )
                    detail = (
                        f"; used fields {', '.join(offending)} are unavailable"
                        if offending
                        else ""
                    )
                    violations.append(
                        Violation(
                            k,
                            "consumer",
                            declared,
                            next_phi[k].type,
                            f"{m.name}'s recorded reference type does not evolve "
                            f"compatibly to the provided type" + detail,
                            offending,
                        )
                    )

    verdict = CompatVerdict(tuple(violations))
    return verdict, (next_phi if verdict.ok else dict(phi))


def disconnected(u: System, names: frozenset[str] | set[str]) -> bool:
    """True when no key produced by the named services is consumed by any
    remaining service; such a set can be undeployed without disruption."""
    names = frozenset(names)
    for name in names:
        if u.service(name) is None:
            raise UnknownService(f"no deployed service named {name}")
    produced: set[str] = set()
    for s in u.services:
        if s.name in names:
            produced |= set(producer_keys(s.module))
    for s in u.services:
        if s.name in names:
            continue
        if produced & set(consumer_keys(s.module)):
            return False
    return True


def consumed_from(u: System, names: frozenset[str] | set[str]) -> frozenset[str]:
    """Keys produced by ``names`` that other services still consume."""
    names = frozenset(names)
    produced: set[str] = set()
    for s in u.services:
        if s.name in names:
            produced |= set(producer_keys(s.module))
    out: set[str] = set()
    for s in u.services:
        if s.name in names:
            continue
        out |= produced & set(consumer_keys(s.module))
    return frozenset(out)
