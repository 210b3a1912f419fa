import random

import pytest

from cem.model import (
    Arrow,
    Await,
    CyclicType,
    FieldType,
    INT,
    NamedType,
    RecordType,
    Service,
    STRING,
    System,
    Thread,
    TypeDef,
    Module,
    type_env_of,
    signature_of,
)
from cem.parser import parse_expr, parse_module
from cem.typecheck import (
    ArgumentMismatch,
    CheckFailure,
    EnvEntry,
    FieldNotFound,
    NonRecordSelect,
    UnboundName,
    UnknownThread,
    UpdateKeyMismatch,
    check_module,
    check_system,
    expand_type,
    infer_thread_env,
    module_envs,
    type_of_expr,
)

from generators import KeyGen, gen_ground_type, gen_typed_expr


def env_of(module, label="l1"):
    return {
        e.key: EnvEntry(e.module, e.name, e.type, label) for e in signature_of(module).entries
    }


# ---------------------------------------------------------------------------
# expansion


def test_expand_product_against_catalog(modules):
    env = type_env_of(modules["catalog_v2"])
    t = expand_type(NamedType("Product", "k1"), env)
    assert isinstance(t, RecordType)
    assert t.keys() == {"k2", "k3", "k4", "k5", "k10"}


def test_expand_ground_identity():
    assert expand_type(INT, {}) == INT


def test_expand_cycle_detected():
    env = {"A": ("k1", RecordType((FieldType("x", "k2", NamedType("A", "k1")),)))}
    with pytest.raises(CyclicType):
        expand_type(NamedType("A", "k1"), env)


# ---------------------------------------------------------------------------
# expression typing


def test_get_body_types_at_declared_arrow(modules):
    sigma, delta = module_envs(modules["catalog_v2"])
    body = parse_expr(
        '\\p : int . { Id@k2 = 1, Name@k3 = "HDD", Price@k4 = 99, Discount@k5 = 0, Desc@k10 = "2TB" }'
    )
    t = type_of_expr(sigma, delta, {}, body)
    assert t == delta["Get"]


def test_identity_lambda():
    t = type_of_expr({}, {}, {}, parse_expr("\\x : int . x"))
    assert t == Arrow(INT, INT)


def test_improve_body_types_int_to_string(modules):
    sigma, delta = module_envs(modules["backoffice_v1"])
    body = parse_expr("\\id : int . Save(Facelift(Get(id)))")
    assert type_of_expr(sigma, delta, {}, body) == Arrow(INT, STRING)


def test_plus_on_strings_and_ints():
    assert type_of_expr({}, {}, {}, parse_expr('"a" + "b"')) == STRING
    assert type_of_expr({}, {}, {}, parse_expr("1 + 2")) == INT
    with pytest.raises(ArgumentMismatch):
        type_of_expr({}, {}, {}, parse_expr('1 + "b"'))


def test_typing_errors():
    with pytest.raises(UnboundName):
        type_of_expr({}, {}, {}, parse_expr("nope"))
    with pytest.raises(FieldNotFound):
        type_of_expr({}, {}, {}, parse_expr("{ x@k1 = 1 }.y"))
    with pytest.raises(NonRecordSelect):
        type_of_expr({}, {}, {}, parse_expr("(1).x"))
    with pytest.raises(UpdateKeyMismatch):
        type_of_expr({}, {}, {}, parse_expr("{ x@k1 = 1 } { x@k9 = 2 }"))
    with pytest.raises(UpdateKeyMismatch):
        type_of_expr({}, {}, {}, parse_expr('{ x@k1 = 1 } { x@k1 = "s" }'))
    with pytest.raises(FieldNotFound):
        type_of_expr({}, {}, {}, parse_expr("{ x@k1 = 1 } { y@k2 = 2 }"))
    with pytest.raises(UnknownThread):
        type_of_expr({}, {}, {}, Await("t9"))


def test_higher_order_parameters_type_internally():
    e = parse_expr("(\\g : int -> int . g(1))(\\x : int . x)")
    assert type_of_expr({}, {}, {}, e) == INT


def test_no_subsumption_between_record_widths():
    wide = parse_expr("{ x@k1 = 1, y@k2 = 2 }")
    f = parse_expr("\\r : { x@k1 : int } . r.x")
    from cem.model import Apply

    with pytest.raises(ArgumentMismatch):
        type_of_expr({}, {}, {}, Apply(f, wide))


# ---------------------------------------------------------------------------
# module checking


def test_check_catalog_against_empty(modules):
    p = check_module({}, modules["catalog_v2"])
    assert set(p) == {"k1", "k6", "k7"}
    assert p["k6"].name == "Get"


def test_check_marketing_against_catalog(modules):
    p = check_module(env_of(modules["catalog_v2"]), modules["marketing_v2"])
    assert set(p) == {"k8"}


def test_removed_unused_field_is_tolerated(modules):
    # A catalog whose Product lost k4: Marketing never uses k4, so its
    # references still validate; losing k3 (used) is flagged.
    def drop_field(module, key):
        text = parse_module_text = None
        from cem.model import RecordLit, ValueDef

        defs = []
        for d in module.defs:
            if isinstance(d, TypeDef):
                defs.append(
                    TypeDef(d.key, d.name, RecordType(tuple(f for f in d.body.fields if f.key != key)))
                )
            else:
                body = d.body
                if hasattr(body, "body") and isinstance(body.body, RecordLit):
                    inner = RecordLit(tuple(f for f in body.body.fields if f.key != key))
                    from cem.model import Lambda

                    body = Lambda(body.param, body.param_type, inner)
                defs.append(ValueDef(d.key, d.name, d.type, body))
        return Module(module.name, module.refs, tuple(defs))

    no_k4 = drop_field(modules["catalog_v2"], "k4")
    check_module(env_of(no_k4), modules["marketing_v2"])

    no_k3 = drop_field(modules["catalog_v2"], "k3")
    with pytest.raises(CheckFailure) as exc:
        check_module(env_of(no_k3), modules["marketing_v2"])
    assert any(d.code == "RefIncompatible" for d in exc.value.diagnostics)


def test_unresolved_references_all_reported(modules):
    with pytest.raises(CheckFailure) as exc:
        check_module({}, modules["backoffice_v1"])
    assert {d.key for d in exc.value.diagnostics} == {"k1", "k6", "k7", "k8"}


def test_body_type_error(modules):
    bad = parse_module(
        "module Bad { refs {} defs { fun f@k1 : int -> int = \\x : int . \"s\" ; } }"
    )
    from cem.typecheck import BodyTypeError

    with pytest.raises(BodyTypeError):
        check_module({}, bad)


# ---------------------------------------------------------------------------
# service and system checking


def test_snapshot_system_checks(modules):
    from cem.fixtures import load_snapshot_system

    u = load_snapshot_system()
    p = check_system(infer_thread_env(u), u)
    assert set(p) == {"k1", "k6", "k7", "k8", "k9"}
    assert p["k1"].label == "l5"
    assert p["k8"].label == "l4"


def test_tampered_proxy_entry_rejected(modules):
    from cem.fixtures import load_snapshot_system
    from cem.model import ValueProxy, ReadyProxy

    u = load_snapshot_system()
    bo = u.service("Backoffice")
    catalog_proxy = bo.proxy_for("Catalog")
    bad_entries = tuple(
        ValueProxy(e.local_name, e.remote_name, Arrow(INT, INT))
        if e.local_name == "Get"
        else e
        for e in catalog_proxy.entries
    )
    bad_proxy = ReadyProxy("Catalog", bad_entries, catalog_proxy.label)
    bad_bo = Service(
        bo.module,
        tuple(bad_proxy if p.producer == "Catalog" else p for p in bo.proxies),
        bo.label,
        bo.threads,
    )
    bad = u.replace_service(bad_bo)
    with pytest.raises(CheckFailure) as exc:
        check_system({}, bad)
    assert any(d.code == "ProxySignatureMismatch" for d in exc.value.diagnostics)


def test_stale_proxies_accepted_as_is(modules):
    # A freshly deployed service holds empty proxies stamped with its own
    # label; they never match a producer's label and are fine.
    from cem import runtime

    u = runtime.deploy(System(), [modules["catalog_v2"], modules["marketing_v2"]])
    u = runtime.deploy(u, [modules["backoffice_v1"]])
    check_system({}, u)


def test_empty_system_checks_to_empty_env():
    assert check_system({}, System()) == {}


def test_missing_provider_reported(modules):
    from cem import runtime

    u = runtime.deploy(System(), [modules["catalog_v2"], modules["backoffice_v1"]])
    with pytest.raises(CheckFailure) as exc:
        check_system({}, u)
    assert any(d.code == "UnresolvedReference" and d.key == "k8" for d in exc.value.diagnostics)


def test_check_system_order_independent(modules):
    from cem.fixtures import load_snapshot_system

    u = load_snapshot_system()
    shuffled = System(tuple(reversed(u.services)), u.next_label, u.next_thread)
    assert check_system({}, u) == check_system({}, shuffled)


def test_thread_typing_against_gamma(modules):
    from cem.fixtures import load_snapshot_system

    u = load_snapshot_system()
    bo = u.service("Backoffice")
    with_thread = u.replace_service(
        Service(bo.module, bo.proxies, bo.label, (Thread("t1", parse_expr("Improve(1)")),))
    )
    gamma = infer_thread_env(with_thread)
    assert gamma == {"t1": STRING}
    check_system(gamma, with_thread)
    with pytest.raises(CheckFailure):
        check_system({"t1": INT}, with_thread)
    with pytest.raises(CheckFailure):
        check_system({}, with_thread)


# ---------------------------------------------------------------------------
# subject reduction


def test_subject_reduction_on_random_terms():
    from cem.runtime import IsValue, Stepped, step_expr

    rng = random.Random(7)
    for i in range(200):
        keys = KeyGen()
        target = gen_ground_type(rng, keys, depth=rng.randint(0, 2))
        e = gen_typed_expr(rng, target, {}, keys, depth=rng.randint(1, 4))
        t0 = type_of_expr({}, {}, {}, e)
        assert t0 == target
        for _ in range(1000):
            red = step_expr((), e)
            if isinstance(red, IsValue):
                break
            assert isinstance(red, Stepped), red
            e = red.expr
            assert type_of_expr({}, {}, {}, e) == target
        else:
            pytest.fail(f"term {i} did not normalize")
