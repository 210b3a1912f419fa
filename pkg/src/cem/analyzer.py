"""Classification of interface changes and deployment-log aggregation.

Changes between two record schemas are diffed by key: a key with a new
label is a rename, a key with a new type is a type change, a key present on
one side only is a removal or an addition, and an identical field multiset
in a different order is a reorder. Renames, reorders, optional additions,
and mandatory-to-optional flips are adaptable without touching consumers;
removals are adaptable exactly when the removed key is unused, and are
counted as breaking when usage data is absent.

Optionality is a flag of this layer only. The core calculus adapts any
added field by synthesizing defaults, while the taxonomy here counts a
mandatory addition as breaking; keep that divergence in mind when comparing
the two layers.

The aggregate report uses a worst-case estimate: every deployment that
contains a breaking-change kind is assumed to be a separate deployment, so
the broken count of a factory is the sum of its breaking-kind deployment
counts, capped at the factory total.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from decimal import Decimal, ROUND_HALF_UP

from .model import BaseType, CemError, RecordType


class AnalyzerError(CemError):
    code = "AnalyzerError"


class DuplicateKeyInSchema(AnalyzerError):
    code = "DuplicateKeyInSchema"


class NegativeCount(AnalyzerError):
    code = "NegativeCount"


class MalformedLog(AnalyzerError):
    code = "MalformedLog"


class ChangeKind(enum.Enum):
    NEW_OPTIONAL_FIELD = "NewOptionalField"
    CHANGE_FIELD_TYPE = "ChangeFieldType"
    REMOVE_FIELD = "RemoveField"
    NEW_MANDATORY_FIELD = "NewMandatoryField"
    RENAME_FIELD = "RenameField"
    REORDER_FIELDS = "ReorderFields"
    CHANGE_TO_OPTIONAL = "ChangeToOptional"
    CHANGE_TO_MANDATORY = "ChangeToMandatory"

    @classmethod
    def parse(cls, text: str) -> "ChangeKind":
        for kind in cls:
            if kind.value == text:
                return kind
        raise MalformedLog(f"unknown change kind {text!r}")


COMPATIBLE_KINDS = frozenset(
    {
        ChangeKind.NEW_OPTIONAL_FIELD,
        ChangeKind.RENAME_FIELD,
        ChangeKind.REORDER_FIELDS,
        ChangeKind.CHANGE_TO_OPTIONAL,
    }
)

KIND_ORDER = (
    ChangeKind.NEW_OPTIONAL_FIELD,
    ChangeKind.CHANGE_FIELD_TYPE,
    ChangeKind.REMOVE_FIELD,
    ChangeKind.NEW_MANDATORY_FIELD,
    ChangeKind.RENAME_FIELD,
    ChangeKind.REORDER_FIELDS,
    ChangeKind.CHANGE_TO_OPTIONAL,
    ChangeKind.CHANGE_TO_MANDATORY,
)


@dataclass(frozen=True)
class FieldSchema:
    label: str
    key: str
    type: BaseType
    optional: bool = False
    position: int = 0


def schema_of_record(t: RecordType, optional_keys: frozenset[str] = frozenset()) -> tuple[FieldSchema, ...]:
    return tuple(
        FieldSchema(f.label, f.key, f.type, f.key in optional_keys, i)
        for i, f in enumerate(t.fields)
    )


@dataclass(frozen=True)
class Change:
    kind: ChangeKind
    key: str | None  # None for whole-record reorders


def diff_signatures(
    old: tuple[FieldSchema, ...] | list[FieldSchema],
    new: tuple[FieldSchema, ...] | list[FieldSchema],
) -> list[Change]:
    """Key-based diff of one record schema. A rename accompanied by a type
    change reports both kinds for the key."""
    old = tuple(old)
    new = tuple(new)
    for side in (old, new):
        keys = [f.key for f in side]
        if len(set(keys)) != len(keys):
            raise DuplicateKeyInSchema(f"schema repeats a key: {keys}")
    old_by_key = {f.key: f for f in old}
    new_by_key = {f.key: f for f in new}

    changes: list[Change] = []
    for f in old:
        g = new_by_key.get(f.key)
        if g is None:
            changes.append(Change(ChangeKind.REMOVE_FIELD, f.key))
            continue
        if f.label != g.label:
            changes.append(Change(ChangeKind.RENAME_FIELD, f.key))
        if f.type != g.type:
            changes.append(Change(ChangeKind.CHANGE_FIELD_TYPE, f.key))
        if not f.optional and g.optional:
            changes.append(Change(ChangeKind.CHANGE_TO_OPTIONAL, f.key))
        elif f.optional and not g.optional:
            changes.append(Change(ChangeKind.CHANGE_TO_MANDATORY, f.key))
    for g in new:
        if g.key not in old_by_key:
            kind = (
                ChangeKind.NEW_OPTIONAL_FIELD if g.optional else ChangeKind.NEW_MANDATORY_FIELD
            )
            changes.append(Change(kind, g.key))

    # With no per-key changes the field multisets agree; a differing key
    # sequence is then exactly a reorder.
    if not changes and [f.key for f in old] != [g.key for g in new]:
        changes.append(Change(ChangeKind.REORDER_FIELDS, None))
    return changes


@dataclass(frozen=True)
class Classification:
    safe: bool
    reasons: tuple[str, ...] = ()


def classify_deployment(
    changes: list[Change] | tuple[Change, ...],
    used_keys: frozenset[str] | set[str] | None = None,
) -> Classification:
    """Breaking iff any change falls outside the adaptable set. Removals
    consult the used-key set when one is supplied; without usage data every
    removal is pessimistically treated as breaking."""
    reasons: list[str] = []
    for ch in changes:
        if ch.kind in COMPATIBLE_KINDS:
            continue
        if ch.kind is ChangeKind.REMOVE_FIELD and used_keys is not None:
            if ch.key not in used_keys:
                continue
            reasons.append(f"{ch.kind.value} {ch.key}: key is used")
            continue
        reasons.append(f"{ch.kind.value}{f' {ch.key}' if ch.key else ''}")
    return Classification(not reasons, tuple(reasons))


# ---------------------------------------------------------------------------
# Log aggregation


@dataclass(frozen=True)
class DeploymentRecord:
    deployment_id: str
    factory: str
    counts: tuple[tuple[ChangeKind, int], ...]

    def __post_init__(self) -> None:
        for kind, n in self.counts:
            if n < 0:
                raise NegativeCount(f"{self.deployment_id}: {kind.value}={n}")


def parse_log(text: str) -> list[DeploymentRecord]:
    """One deployment per line: ``id,factory,Kind=count;Kind=count;...``.
    Blank lines and ``#`` comments are skipped."""
    records: list[DeploymentRecord] = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        parts = [p.strip() for p in line.split(",")]
        if len(parts) != 3:
            raise MalformedLog(f"line {lineno}: expected 'id,factory,kind=count;...'")
        dep_id, factory, pairs = parts
        counts: list[tuple[ChangeKind, int]] = []
        if pairs:
            for pair in pairs.split(";"):
                pair = pair.strip()
                if not pair:
                    continue
                if "=" not in pair:
                    raise MalformedLog(f"line {lineno}: bad pair {pair!r}")
                kind_text, _, num = pair.partition("=")
                try:
                    n = int(num)
                except ValueError as e:
                    raise MalformedLog(f"line {lineno}: bad count {num!r}") from e
                kind = ChangeKind.parse(kind_text.strip())
                if n < 0:
                    raise MalformedLog(f"line {lineno}: negative count {n}")
                counts.append((kind, n))
        records.append(DeploymentRecord(dep_id, factory, tuple(counts)))
    return records


@dataclass
class FactoryStats:
    """Per-factory aggregate: total deployments, total change occurrences,
    and, per change kind, the number of deployments where it appeared."""

    factory: str
    total_deployments: int
    total_changes: int
    deployments_by_kind: dict[ChangeKind, int] = field(default_factory=dict)
    published_broken: int | None = None  # externally reported broken count
    note: str | None = None

    def worst_case_broken(self) -> int:
        s = sum(
            n for kind, n in self.deployments_by_kind.items() if kind not in COMPATIBLE_KINDS
        )
        return min(s, self.total_deployments)


@dataclass(frozen=True)
class TableRow:
    factory: str
    changes: int
    deployments: int
    broken: int
    safe: int
    safe_pct: Decimal
    note: str | None = None


def _pct(safe: int, total: int) -> Decimal:
    if total == 0:
        return Decimal("100.00")
    return (Decimal(safe) * 100 / Decimal(total)).quantize(
        Decimal("0.01"), rounding=ROUND_HALF_UP
    )


def stats_from_records(records: list[DeploymentRecord]) -> list[FactoryStats]:
    by_factory: dict[str, FactoryStats] = {}
    for r in sorted(records, key=lambda r: r.factory):
        st = by_factory.setdefault(r.factory, FactoryStats(r.factory, 0, 0))
        st.total_deployments += 1
        for kind, n in r.counts:
            if n < 0:
                raise NegativeCount(f"{r.deployment_id}: {kind.value}={n}")
            st.total_changes += n
            if n > 0:
                st.deployments_by_kind[kind] = st.deployments_by_kind.get(kind, 0) + 1
    return list(by_factory.values())


def aggregate(stats: list[FactoryStats]) -> list[TableRow]:
    """Worst-case table: one row per factory plus a total row. When a
    factory carries an externally published broken count that disagrees
    with the computed one, the published number feeds the totals and the
    discrepancy is spelled out in the row note."""
    rows: list[TableRow] = []
    tot_changes = tot_deploy = tot_broken = 0
    for st in stats:
        computed = st.worst_case_broken()
        broken = computed
        note = st.note
        if st.published_broken is not None and st.published_broken != computed:
            broken = st.published_broken
            note = (
                f"computed worst-case broken is {computed}; the published count "
                f"{st.published_broken} is reported instead"
                + (f" ({st.note})" if st.note else "")
            )
        safe = st.total_deployments - broken
        rows.append(
            TableRow(
                st.factory,
                st.total_changes,
                st.total_deployments,
                broken,
                safe,
                _pct(safe, st.total_deployments),
                note,
            )
        )
        tot_changes += st.total_changes
        tot_deploy += st.total_deployments
        tot_broken += broken
    rows.append(
        TableRow(
            "total",
            tot_changes,
            tot_deploy,
            tot_broken,
            tot_deploy - tot_broken,
            _pct(tot_deploy - tot_broken, tot_deploy),
        )
    )
    return rows


def aggregate_log(records: list[DeploymentRecord]) -> list[TableRow]:
    return aggregate(stats_from_records(records))


def render_table(rows: list[TableRow]) -> str:
    header = f"{'factory':<12} {'changes':>8} {'deploys':>8} {'broken':>8} {'safe':>8} {'safe%':>8}"
    lines = [header, "-" * len(header)]
    notes: list[str] = []
    for r in rows:
        flag = " *" if r.note else ""
        lines.append(
            f"{r.factory:<12} {r.changes:>8} {r.deployments:>8} {r.broken:>8} "
            f"{r.safe:>8} {str(r.safe_pct):>8}{flag}"
        )
        if r.note:
            notes.append(f"* {r.factory}: {r.note}")
    return "\n".join(lines + notes) + "\n"


def render_csv(rows: list[TableRow]) -> str:
    lines = ["factory,changes,deployments,broken,safe,safe_pct,note"]
    for r in rows:
        note = (r.note or "").replace(",", ";")
        lines.append(
            f"{r.factory},{r.changes},{r.deployments},{r.broken},{r.safe},{r.safe_pct},{note}"
        )
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# Bundled aggregate dataset (three production factories, five years,
# 8889 deployments with 23986 signature changes)


def paper_fixture() -> list[FactoryStats]:
    k = ChangeKind
    f1 = FactoryStats(
        "factory1",
        total_deployments=3759,
        total_changes=14507,
        deployments_by_kind={
            k.NEW_OPTIONAL_FIELD: 2192,
            k.CHANGE_FIELD_TYPE: 723,
            k.REMOVE_FIELD: 877,
            k.NEW_MANDATORY_FIELD: 798,
            k.RENAME_FIELD: 546,
            k.REORDER_FIELDS: 182,
            k.CHANGE_TO_OPTIONAL: 80,
            k.CHANGE_TO_MANDATORY: 28,
        },
    )
    f2 = FactoryStats(
        "factory2",
        total_deployments=4659,
        total_changes=8846,
        deployments_by_kind={
            k.NEW_OPTIONAL_FIELD: 1132,
            k.CHANGE_FIELD_TYPE: 449,
            k.REMOVE_FIELD: 493,
            k.NEW_MANDATORY_FIELD: 357,
            k.RENAME_FIELD: 353,
            k.REORDER_FIELDS: 54,
            k.CHANGE_TO_OPTIONAL: 43,
            k.CHANGE_TO_MANDATORY: 6,
        },
    )
    f3 = FactoryStats(
        "factory3",
        total_deployments=471,
        total_changes=633,
        deployments_by_kind={
            k.NEW_OPTIONAL_FIELD: 115,
            k.CHANGE_FIELD_TYPE: 22,
            k.REMOVE_FIELD: 45,
            k.NEW_MANDATORY_FIELD: 38,
            k.RENAME_FIELD: 36,
            k.REORDER_FIELDS: 16,
            k.CHANGE_TO_OPTIONAL: 4,
            k.CHANGE_TO_MANDATORY: 22,
        },
        published_broken=105,
        note="source dataset reports overlapping deployments for this factory",
    )
    return [f1, f2, f3]
