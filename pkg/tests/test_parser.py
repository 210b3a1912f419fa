import random

import pytest

from cem.model import Apply, BinOp, FunName, Lambda, Module, Select, StrLit, Var
from cem.parser import (
    ParseError,
    parse_expr,
    parse_module,
    parse_system,
    render_expr,
    render_module,
)

from generators import gen_module


def test_parse_empty_module():
    m = parse_module("module M { refs {} defs {} }")
    assert m == Module("M")


def test_parse_listing_system(modules):
    from cem.fixtures import load_snapshot_system

    u = load_snapshot_system()
    assert [s.label for s in u.services] == ["l5", "l4", "l3"]
    assert [s.name for s in u.services] == ["Catalog", "Marketing", "Backoffice"]
    assert u.service("Catalog").module == modules["catalog_v2"]
    assert u.service("Marketing").module == modules["marketing_v2"]
    assert u.service("Backoffice").module == modules["backoffice_v1"]
    bo = u.service("Backoffice")
    assert {p.producer for p in bo.proxies} == {"Catalog", "Marketing"}
    facelift = bo.proxy_for("Marketing").entries[0]
    assert (facelift.local_name, facelift.remote_name) == ("Facelift", "Enhance")


def test_duplicate_definition_key_is_a_parse_error():
    text = """
    module M { refs {} defs {
      type A@k1 = int ;
      type B@k1 = string ;
    } }
    """
    with pytest.raises(ParseError) as exc:
        parse_module(text)
    assert "k1" in str(exc.value)


def test_duplicate_definition_name_is_a_parse_error():
    text = "module M { refs {} defs { type A@k1 = int ; type A@k2 = int ; } }"
    with pytest.raises(ParseError):
        parse_module(text)


def test_arrow_at_boundary_rejected():
    text = "module M { refs {} defs { fun f@k1 : int -> int -> int = \\x : int . x ; } }"
    with pytest.raises(ParseError):
        parse_module(text)


def test_parse_error_carries_location():
    with pytest.raises(ParseError) as exc:
        parse_module("module M {\n  refs { oops } defs {} }")
    assert exc.value.line == 2


def test_expression_precedence():
    e = parse_expr('\\x : int . Save(x) + "y"')
    assert isinstance(e, Lambda)
    assert isinstance(e.body, BinOp)
    assert e.body.left == Apply(FunName("Save"), Var("x"))
    assert e.body.right == StrLit("y")


def test_update_binds_postfix():
    e = parse_expr("p { Name@k3 = p.Name + \"Pro\" }")
    from cem.model import RecordUpdate

    assert isinstance(e, RecordUpdate)
    assert e.target == FunName("p")
    assert e.fields[0].expr == BinOp("+", Select(FunName("p"), "Name"), StrLit("Pro"))


def test_lambda_binds_vars_not_funnames():
    e = parse_expr("\\id : int . Save(id)")
    assert e.body == Apply(FunName("Save"), Var("id"))


def test_await_has_no_surface_syntax():
    with pytest.raises(ParseError):
        parse_expr("t1?")


def test_arrow_types_allowed_under_lambdas():
    from cem.model import Arrow, INT, STRING
    from cem.parser import parse_type

    assert parse_type("int -> int -> string") == Arrow(INT, Arrow(INT, STRING))
    assert parse_type("(int -> int) -> string") == Arrow(Arrow(INT, INT), STRING)
    e = parse_expr("\\g : int -> int . g(1)")
    assert isinstance(e, Lambda)
    assert e.param_type == Arrow(INT, INT)


def test_fixture_modules_round_trip(modules):
    for m in modules.values():
        text = render_module(m)
        again = parse_module(text)
        assert again == m
        assert render_module(again) == text


def test_random_modules_round_trip():
    rng = random.Random(2024)
    for _ in range(300):
        m = gen_module(rng)
        text = render_module(m)
        again = parse_module(text)
        assert again == m, text
        assert render_module(again) == text


def test_string_escapes_round_trip():
    e = StrLit('a"b\\c\nd\te')
    assert parse_expr(render_expr(e)) == e


def test_system_render_round_trip():
    from cem.fixtures import load_snapshot_system
    from cem.parser import render_system

    u = load_snapshot_system()
    again = parse_system(render_system(u))
    assert again == u
