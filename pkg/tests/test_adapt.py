import random

import pytest

from cem.adapt import (
    Default,
    IrreconcilableShape,
    MissingEndpoint,
    convert,
    default_value,
    gen_proxies,
    plan_adapter,
)
from cem.model import (
    Arrow,
    FieldType,
    INT,
    IntVal,
    KnownField,
    RecordType,
    RecordVal,
    STRING,
    StrVal,
    UnknownField,
    signature_of,
)




def rec(*fields):
    return RecordType(tuple(FieldType(l, k, t) for l, k, t in fields))


def rv(known, unknown=()):
    return RecordVal(
        tuple(KnownField(l, k, v) for l, k, v in known),
        tuple(UnknownField(k, v) for k, v in unknown),
    )


PRODUCT_V2 = rec(
    ("Id", "k2", INT),
    ("Name", "k3", STRING),
    ("Price", "k4", INT),
    ("Discount", "k5", INT),
    ("Desc", "k10", STRING),
)
VIEW_V1 = rec(
    ("Id", "k2", INT), ("Name", "k3", STRING), ("Amount", "k4", INT), ("Discount", "k5", INT)
)
PRODUCT_V3 = rec(
    ("Id", "k2", INT), ("Name", "k3", STRING), ("Price", "k4", INT), ("Desc", "k10", STRING)
)

V2_VALUE = rv(
    [
        ("Id", "k2", IntVal(1)),
        ("Name", "k3", StrVal("HDD")),
        ("Price", "k4", IntVal(99)),
        ("Discount", "k5", IntVal(0)),
        ("Desc", "k10", StrVal("2TB")),
    ]
)


def test_defaults():
    assert default_value(INT) == IntVal(0)
    assert default_value(STRING) == StrVal("")
    assert default_value(rec(("x", "k1", INT), ("y", "k2", STRING))) == rv(
        [("x", "k1", IntVal(0)), ("y", "k2", StrVal(""))]
    )


def test_convert_to_older_view_keeps_new_data_as_unknown():
    got = convert(V2_VALUE, PRODUCT_V2, VIEW_V1)
    assert got == rv(
        [
            ("Id", "k2", IntVal(1)),
            ("Name", "k3", StrVal("HDD")),
            ("Amount", "k4", IntVal(99)),
            ("Discount", "k5", IntVal(0)),
        ],
        [("k10", StrVal("2TB"))],
    )


def test_convert_back_restores_the_new_field():
    down = convert(V2_VALUE, PRODUCT_V2, VIEW_V1)
    up = convert(down, VIEW_V1, PRODUCT_V2)
    assert up == V2_VALUE


def test_missing_field_filled_with_default():
    v3_value = rv(
        [
            ("Id", "k2", IntVal(1)),
            ("Name", "k3", StrVal("HDD")),
            ("Price", "k4", IntVal(99)),
            ("Desc", "k10", StrVal("2TB")),
        ]
    )
    got = convert(v3_value, PRODUCT_V3, VIEW_V1)
    assert got.member("k5") == IntVal(0)
    assert got.member("k10") == StrVal("2TB")  # preserved as unknown
    assert got.by_label("Discount") == IntVal(0)


def test_identity_conversion_preserves_unknowns():
    v = rv([("Id", "k2", IntVal(1))], [("k99", StrVal("ghost"))])
    t = rec(("Id", "k2", INT))
    assert convert(v, t, t) is v


def test_value_only_unknowns_survive_conversion():
    # A member known to neither side still flows through.
    v = rv([("Id", "k2", IntVal(1))], [("k42", IntVal(7))])
    src = rec(("Id", "k2", INT))
    dst = rec(("Id", "k2", INT), ("Name", "k3", STRING))
    got = convert(v, src, dst)
    assert got.member("k42") == IntVal(7)
    assert got.member("k3") == StrVal("")


def test_unknown_record_member_relabels_when_it_becomes_known():
    inner = RecordVal((), (UnknownField("k8", IntVal(3)),))
    v = rv([("Id", "k2", IntVal(1))], [("k5", inner)])
    dst = rec(("Id", "k2", INT), ("Meta", "k5", rec(("Depth", "k8", INT))))
    got = convert(v, rec(("Id", "k2", INT)), dst)
    assert got.by_label("Meta") == rv([("Depth", "k8", IntVal(3))])


def test_ground_mismatch_raises():
    with pytest.raises(IrreconcilableShape):
        convert(StrVal("x"), STRING, INT)


def test_nested_unknown_preservation():
    nested_src = rec(("In", "k6", rec(("A", "k7", INT), ("B", "k8", STRING))))
    nested_dst = rec(("In", "k6", rec(("A", "k7", INT))))
    v = rv([("In", "k6", rv([("A", "k7", IntVal(1)), ("B", "k8", StrVal("keep"))]))])
    down = convert(v, nested_src, nested_dst)
    inner = down.by_label("In")
    assert inner.member("k8") == StrVal("keep")
    up = convert(down, nested_dst, nested_src)
    assert up == v


def test_arrow_conversion_wraps_in_memory():
    from cem.model import Closure, Lit, Var
    from cem.runtime import IsValue, step_expr
    from cem.model import Apply

    inc = Closure("x", INT, Var("x"))
    wrapped = convert(inc, Arrow(INT, INT), Arrow(INT, INT))
    assert wrapped == inc  # identity case

    src_rec = rec(("x", "k1", INT))
    dst_rec = rec(("x", "k1", INT), ("y", "k2", STRING))
    f = Closure("r", src_rec, Var("r"))
    wrapped = convert(f, Arrow(src_rec, src_rec), Arrow(dst_rec, dst_rec))
    e = Apply(Lit(wrapped), Lit(rv([("x", "k1", IntVal(5)), ("y", "k2", StrVal("s"))])))
    for _ in range(50):
        red = step_expr((), e)
        if isinstance(red, IsValue):
            out = red.value
            break
        e = red.expr
    assert out.member("k1") == IntVal(5)
    assert out.member("k2") == StrVal("s")  # restored from the unknown member


def test_plan_actions_cover_both_key_sets():
    plan = plan_adapter(PRODUCT_V2, VIEW_V1)
    by_kind = {type(a).__name__: [] for a in plan.actions}
    for a in plan.actions:
        by_kind[type(a).__name__].append(a.key)
    assert set(by_kind.get("Keep", [])) == {"k2", "k3", "k4", "k5"}
    assert set(by_kind.get("PreserveUnknown", [])) == {"k10"}
    plan2 = plan_adapter(PRODUCT_V3, VIEW_V1)
    assert any(isinstance(a, Default) and a.key == "k5" for a in plan2.actions)
    # exactly one action per key of either side
    for p, src, dst in ((plan, PRODUCT_V2, VIEW_V1), (plan2, PRODUCT_V3, VIEW_V1)):
        assert sorted(a.key for a in p.actions) == sorted(src.keys() | dst.keys())


# ---------------------------------------------------------------------------
# the no-loss round trip, property-tested


@pytest.mark.parametrize("seed", range(60))
def test_round_trip_no_loss(seed):
    from generators import assert_no_loss_round_trip

    rng = random.Random(seed)
    assert_no_loss_round_trip(rng, depth=rng.randint(1, 3))


# ---------------------------------------------------------------------------
# proxy generation


def test_gen_proxies_for_backoffice(modules):
    bo = modules["backoffice_v1"]
    marketing_sig = signature_of(modules["marketing_v2"])
    entries = gen_proxies("Marketing", bo.ref_for("Marketing").items, marketing_sig)
    assert len(entries) == 1
    assert entries[0].local_name == "Facelift"
    assert entries[0].remote_name == "Enhance"
    assert entries[0].type == marketing_sig.get("k8").type

    catalog_sig = signature_of(modules["catalog_v2"])
    entries = gen_proxies("Catalog", bo.ref_for("Catalog").items, catalog_sig)
    assert [e.local_name for e in entries] == ["Get", "Save"]
    assert [e.remote_name for e in entries] == ["Get", "Save"]
    assert entries[0].type.result.field_by_key("k4").label == "Price"


def test_gen_proxies_type_refs_produce_nothing(modules):
    mk = modules["marketing_v2"]
    entries = gen_proxies("Catalog", mk.ref_for("Catalog").items, signature_of(modules["catalog_v2"]))
    assert entries == ()


def test_gen_proxies_missing_endpoint(modules):
    bo = modules["backoffice_v1"]
    with pytest.raises(MissingEndpoint):
        gen_proxies("Marketing", bo.ref_for("Marketing").items, signature_of(modules["catalog_v2"]))
