"""Concrete textual syntax for modules, services, and systems.

Module files use the ``.cem`` extension, system/scenario files ``.ces``.
The grammar, in sketch (``#`` starts a comment, ``;`` terminates items):

    module NAME { refs { ref NAME { ITEM* } * } defs { DEF* } }
    ITEM  :=  type Name@key : BTYPE ;   |  fun name@key : BTYPE -> BTYPE ;
    DEF   :=  type Name@key = BTYPE ;   |  fun name@key : BTYPE -> BTYPE = EXPR ;
    BTYPE :=  int | string | Name@key | { label@key : BTYPE , ... }
    EXPR  :=  123 | "text" | name | \\x : TYPE . EXPR | EXPR ( EXPR )
           |  EXPR . label | EXPR { label@key = EXPR , ... } | EXPR + EXPR
           |  { label@key = EXPR , ... } | ( EXPR )

    service NAME { label l1 proxies { PROXY* } threads { THREAD* } }
    PROXY :=  proxy NAME @ l1 { fun local -> remote : BTYPE -> BTYPE ; * }
           |  outdated NAME @ l1 { fun name@key : BTYPE -> BTYPE ;
                                   type Name@key = BTYPE ; * }
    THREAD := thread t1 = EXPR ;

Awaiting-thread expressions have no surface form: they exist only at runtime.
"""

from __future__ import annotations

from dataclasses import dataclass

from .model import (
    Apply,
    Arrow,
    BaseType,
    BinOp,
    CemError,
    Expr,
    FieldInit,
    FieldType,
    FunName,
    INT,
    Lambda,
    Module,
    NamedType,
    NumLit,
    OutdatedProxy,
    Proxy,
    ReadyProxy,
    RecordLit,
    RecordType,
    RecordUpdate,
    Reference,
    Select,
    Service,
    SigEntry,
    Signature,
    STRING,
    StringType,
    StrLit,
    System,
    Thread,
    Type,
    TypeDef,
    TypeRef,
    Var,
    ValueDef,
    ValueProxy,
    ValueRef,
    validate_module,
    validate_system,
)


class ParseError(CemError):
    code = "SyntaxError"

    def __init__(self, message: str, line: int, col: int, origin: str = "<input>"):
        super().__init__(f"{origin}:{line}:{col}: {message}")
        self.line = line
        self.col = col
        self.origin = origin


KEYWORDS = {
    "module",
    "refs",
    "ref",
    "defs",
    "type",
    "fun",
    "int",
    "string",
    "service",
    "label",
    "proxies",
    "proxy",
    "outdated",
    "threads",
    "thread",
}

_PUNCT = ("->", "{", "}", "(", ")", ":", ";", ",", ".", "@", "=", "+", "\\")


@dataclass(frozen=True)
class Token:
    kind: str  # 'ident' | 'number' | 'string' | punctuation literal | 'eof'
    text: str
    line: int
    col: int


def tokenize(text: str, origin: str = "<input>") -> list[Token]:
    toks: list[Token] = []
    i, line, col = 0, 1, 1
    n = len(text)
    while i < n:
        c = text[i]
        if c == "\n":
            i, line, col = i + 1, line + 1, 1
            continue
        if c in " \t\r":
            i, col = i + 1, col + 1
            continue
        if c == "#":
            while i < n and text[i] != "\n":
                i += 1
            continue
        if c.isdigit():
            start, startcol = i, col
            while i < n and text[i].isdigit():
                i, col = i + 1, col + 1
            toks.append(Token("number", text[start:i], line, startcol))
            continue
        if c.isalpha() or c == "_":
            start, startcol = i, col
            while i < n and (text[i].isalnum() or text[i] == "_"):
                i, col = i + 1, col + 1
            toks.append(Token("ident", text[start:i], line, startcol))
            continue
        if c == '"':
            startline, startcol = line, col
            i, col = i + 1, col + 1
            out = []
            while True:
                if i >= n or text[i] == "\n":
                    raise ParseError("unterminated string", startline, startcol, origin)
                ch = text[i]
                if ch == '"':
                    i, col = i + 1, col + 1
                    break
                if ch == "\\":
                    if i + 1 >= n:
                        raise ParseError("unterminated escape", line, col, origin)
                    esc = text[i + 1]
                    mapped = {"n": "\n", "t": "\t", '"': '"', "\\": "\\"}.get(esc)
                    if mapped is None:
                        raise ParseError(f"unknown escape \\{esc}", line, col, origin)
                    out.append(mapped)
                    i, col = i + 2, col + 2
                    continue
                out.append(ch)
                i, col = i + 1, col + 1
            toks.append(Token("string", "".join(out), startline, startcol))
            continue
        for p in _PUNCT:
            if text.startswith(p, i):
                toks.append(Token(p, p, line, col))
                i, col = i + len(p), col + len(p)
                break
        else:
            raise ParseError(f"unexpected character {c!r}", line, col, origin)
    toks.append(Token("eof", "", line, col))
    return toks


class _Parser:
    def __init__(self, text: str, origin: str = "<input>"):
        self.toks = tokenize(text, origin)
        self.pos = 0
        self.origin = origin

    # -- token plumbing

    def peek(self, ahead: int = 0) -> Token:
        return self.toks[min(self.pos + ahead, len(self.toks) - 1)]

    def next(self) -> Token:
        t = self.toks[self.pos]
        if t.kind != "eof":
            self.pos += 1
        return t

    def fail(self, message: str, tok: Token | None = None) -> ParseError:
        tok = tok or self.peek()
        return ParseError(message, tok.line, tok.col, self.origin)

    def expect(self, kind: str) -> Token:
        t = self.peek()
        if t.kind != kind:
            raise self.fail(f"expected {kind!r}, found {t.text or t.kind!r}")
        return self.next()

    def keyword(self, word: str) -> Token:
        t = self.peek()
        if t.kind != "ident" or t.text != word:
            raise self.fail(f"expected {word!r}, found {t.text or t.kind!r}")
        return self.next()

    def at_keyword(self, word: str) -> bool:
        t = self.peek()
        return t.kind == "ident" and t.text == word

    def ident(self, what: str = "name") -> str:
        t = self.peek()
        if t.kind != "ident":
            raise self.fail(f"expected {what}, found {t.text or t.kind!r}")
        if t.text in KEYWORDS:
            raise self.fail(f"keyword {t.text!r} cannot be used as a {what}")
        return self.next().text

    def keyed_name(self, what: str = "name") -> tuple[str, str]:
        name = self.ident(what)
        self.expect("@")
        key = self.ident("key")
        return name, key

    # -- types

    def base_type(self) -> BaseType:
        t = self.peek()
        if t.kind == "ident" and t.text == "int":
            self.next()
            return INT
        if t.kind == "ident" and t.text == "string":
            self.next()
            return STRING
        if t.kind == "{":
            self.next()
            fields: list[FieldType] = []
            if self.peek().kind != "}":
                while True:
                    label, key = self.keyed_name("field label")
                    self.expect(":")
                    fields.append(FieldType(label, key, self.base_type()))
                    if self.peek().kind != ",":
                        break
                    self.next()
            self.expect("}")
            try:
                return RecordType(tuple(fields))
            except CemError as e:
                raise self.fail(str(e), t) from e
        if t.kind == "ident":
            name, key = self.keyed_name("type name")
            return NamedType(name, key)
        raise self.fail(f"expected a type, found {t.text or t.kind!r}")

    def type_expr(self) -> Type:
        left: Type
        if self.peek().kind == "(":
            self.next()
            left = self.type_expr()
            self.expect(")")
        else:
            left = self.base_type()
        if self.peek().kind == "->":
            self.next()
            return Arrow(left, self.type_expr())
        return left

    def arrow_of_bases(self) -> Arrow:
        tok = self.peek()
        param = self.base_type()
        self.expect("->")
        result = self.base_type()
        if self.peek().kind == "->":
            raise self.fail("definition and reference types are one base arrow", tok)
        return Arrow(param, result)

    # -- expressions

    def expr(self, bound: frozenset[str]) -> Expr:
        if self.peek().kind == "\\":
            self.next()
            param = self.ident("parameter")
            self.expect(":")
            ptype = self.type_expr()
            self.expect(".")
            body = self.expr(bound | {param})
            return Lambda(param, ptype, body)
        return self.add_expr(bound)

    def add_expr(self, bound: frozenset[str]) -> Expr:
        left = self.postfix_expr(bound)
        while self.peek().kind == "+":
            self.next()
            right = self.postfix_expr(bound)
            left = BinOp("+", left, right)
        return left

    def postfix_expr(self, bound: frozenset[str]) -> Expr:
        e = self.primary_expr(bound)
        while True:
            t = self.peek()
            if t.kind == "(":
                self.next()
                arg = self.expr(bound)
                self.expect(")")
                e = Apply(e, arg)
            elif t.kind == ".":
                self.next()
                e = Select(e, self.ident("field label"))
            elif t.kind == "{":
                e = RecordUpdate(e, self.field_inits(bound))
            else:
                return e

    def field_inits(self, bound: frozenset[str]) -> tuple[FieldInit, ...]:
        open_tok = self.expect("{")
        fields: list[FieldInit] = []
        if self.peek().kind != "}":
            while True:
                label, key = self.keyed_name("field label")
                self.expect("=")
                fields.append(FieldInit(label, key, self.expr(bound)))
                if self.peek().kind != ",":
                    break
                self.next()
        self.expect("}")
        keys = [f.key for f in fields]
        if len(set(keys)) != len(keys):
            raise self.fail("record expression repeats a field key", open_tok)
        labels = [f.label for f in fields]
        if len(set(labels)) != len(labels):
            raise self.fail("record expression repeats a field label", open_tok)
        return tuple(fields)

    def primary_expr(self, bound: frozenset[str]) -> Expr:
        t = self.peek()
        if t.kind == "number":
            self.next()
            return NumLit(int(t.text))
        if t.kind == "string":
            self.next()
            return StrLit(t.text)
        if t.kind == "{":
            return RecordLit(self.field_inits(bound))
        if t.kind == "(":
            self.next()
            e = self.expr(bound)
            self.expect(")")
            return e
        if t.kind == "ident":
            name = self.ident()
            return Var(name) if name in bound else FunName(name)
        raise self.fail(f"expected an expression, found {t.text or t.kind!r}")

    # -- modules

    def module(self) -> Module:
        tok = self.keyword("module")
        name = self.ident("module name")
        self.expect("{")
        self.keyword("refs")
        self.expect("{")
        refs: list[Reference] = []
        while self.at_keyword("ref"):
            refs.append(self.reference())
        self.expect("}")
        self.keyword("defs")
        self.expect("{")
        defs: list[TypeDef | ValueDef] = []
        while self.at_keyword("type") or self.at_keyword("fun"):
            defs.append(self.definition())
        self.expect("}")
        self.expect("}")
        m = Module(name, tuple(refs), tuple(defs))
        try:
            validate_module(m)
        except CemError as e:
            raise self.fail(str(e), tok) from e
        return m

    def reference(self) -> Reference:
        self.keyword("ref")
        producer = self.ident("producer name")
        self.expect("{")
        items: list[TypeRef | ValueRef] = []
        while True:
            tok = self.peek()
            if self.at_keyword("type"):
                self.next()
                name, key = self.keyed_name("type name")
                self.expect(":")
                body = self.base_type()
                self.expect(";")
                items.append(TypeRef(producer, name, key, body, (tok.line, tok.col)))
            elif self.at_keyword("fun"):
                self.next()
                name, key = self.keyed_name("function name")
                self.expect(":")
                arrow = self.arrow_of_bases()
                self.expect(";")
                items.append(ValueRef(producer, name, key, arrow, (tok.line, tok.col)))
            else:
                break
        self.expect("}")
        return Reference(producer, tuple(items))

    def definition(self) -> TypeDef | ValueDef:
        tok = self.peek()
        if self.at_keyword("type"):
            self.next()
            name, key = self.keyed_name("type name")
            self.expect("=")
            body = self.base_type()
            self.expect(";")
            return TypeDef(key, name, body, (tok.line, tok.col))
        self.keyword("fun")
        name, key = self.keyed_name("function name")
        self.expect(":")
        arrow = self.arrow_of_bases()
        self.expect("=")
        body = self.expr(frozenset())
        self.expect(";")
        return ValueDef(key, name, arrow, body, (tok.line, tok.col))

    # -- services and systems

    def service(self) -> tuple[str, str, tuple[Proxy, ...], tuple[Thread, ...]]:
        self.keyword("service")
        name = self.ident("service name")
        self.expect("{")
        self.keyword("label")
        label = self.ident("label")
        self.keyword("proxies")
        self.expect("{")
        proxies: list[Proxy] = []
        while self.at_keyword("proxy") or self.at_keyword("outdated"):
            proxies.append(self.proxy())
        self.expect("}")
        self.keyword("threads")
        self.expect("{")
        threads: list[Thread] = []
        while self.at_keyword("thread"):
            self.next()
            tid = self.ident("thread id")
            self.expect("=")
            expr = self.expr(frozenset())
            self.expect(";")
            threads.append(Thread(tid, expr))
        self.expect("}")
        self.expect("}")
        return name, label, tuple(proxies), tuple(threads)

    def proxy(self) -> Proxy:
        if self.at_keyword("proxy"):
            self.next()
            producer = self.ident("producer name")
            self.expect("@")
            label = self.ident("label")
            self.expect("{")
            entries: list[ValueProxy] = []
            while self.at_keyword("fun"):
                self.next()
                local = self.ident("local name")
                self.expect("->")
                remote = self.ident("remote name")
                self.expect(":")
                arrow = self.arrow_of_bases()
                self.expect(";")
                entries.append(ValueProxy(local, remote, arrow))
            self.expect("}")
            return ReadyProxy(producer, tuple(entries), label)
        self.keyword("outdated")
        producer = self.ident("producer name")
        self.expect("@")
        label = self.ident("label")
        self.expect("{")
        entries: list[SigEntry] = []
        while self.at_keyword("fun") or self.at_keyword("type"):
            if self.at_keyword("fun"):
                self.next()
                name, key = self.keyed_name("function name")
                self.expect(":")
                t: Type = self.arrow_of_bases()
            else:
                self.next()
                name, key = self.keyed_name("type name")
                self.expect("=")
                t = self.base_type()
            self.expect(";")
            entries.append(SigEntry(key, producer, name, t))
        self.expect("}")
        return OutdatedProxy(producer, Signature(tuple(entries)), label)

    def system(self) -> System:
        modules: dict[str, Module] = {}
        services: list[Service] = []
        while self.peek().kind != "eof":
            if self.at_keyword("module"):
                tok = self.peek()
                m = self.module()
                if m.name in modules:
                    raise self.fail(f"module {m.name} defined twice", tok)
                modules[m.name] = m
            elif self.at_keyword("service"):
                tok = self.peek()
                name, label, proxies, threads = self.service()
                if name not in modules:
                    raise self.fail(f"service {name} names an undefined module", tok)
                services.append(Service(modules[name], proxies, label, threads))
            else:
                raise self.fail("expected 'module' or 'service'")
        u = System(tuple(services), _next_index([s.label for s in services]),
                   _next_index([t.id for s in services for t in s.threads]))
        try:
            validate_system(u)
        except CemError as e:
            raise self.fail(str(e), self.toks[0]) from e
        return u


def _next_index(names: list[str]) -> int:
    best = 0
    for name in names:
        digits = "".join(ch for ch in name if ch.isdigit())
        if digits:
            best = max(best, int(digits))
    return best + 1


# ---------------------------------------------------------------------------
# Entry points


def parse_module(text: str, origin: str = "<input>") -> Module:
    """Parse a single module. Raises ParseError on any syntax or structural
    invariant violation, with a source location."""
    p = _Parser(text, origin)
    m = p.module()
    if p.peek().kind != "eof":
        raise p.fail("trailing input after module")
    return m


def parse_modules(text: str, origin: str = "<input>") -> tuple[Module, ...]:
    p = _Parser(text, origin)
    out = []
    while p.peek().kind != "eof":
        out.append(p.module())
    return tuple(out)


def parse_system(text: str, origin: str = "<input>") -> System:
    """Parse a system snapshot: module definitions followed by services."""
    return _Parser(text, origin).system()


def parse_expr(text: str, origin: str = "<input>") -> Expr:
    p = _Parser(text, origin)
    e = p.expr(frozenset())
    if p.peek().kind != "eof":
        raise p.fail("trailing input after expression")
    return e


def parse_type(text: str, origin: str = "<input>") -> Type:
    p = _Parser(text, origin)
    t = p.type_expr()
    if p.peek().kind != "eof":
        raise p.fail("trailing input after type")
    return t


# ---------------------------------------------------------------------------
# Rendering


def _escape(s: str) -> str:
    return s.replace("\\", "\\\\").replace('"', '\\"').replace("\n", "\\n").replace("\t", "\\t")


def render_type(t: Type) -> str:
    match t:
        case Arrow(param, result):
            left = render_type(param)
            if isinstance(param, Arrow):
                left = f"({left})"
            return f"{left} -> {render_type(result)}"
        case NamedType(name, key):
            return f"{name}@{key}"
        case RecordType(fields):
            inner = ", ".join(
                f"{f.label}@{f.key} : {render_type(f.type)}" for f in fields
            )
            return "{" + (f" {inner} " if inner else "") + "}"
        case StringType():
            return "string"
        case _:
            return "int"


_ATOMIC = (NumLit, StrLit, Var, FunName, RecordLit, Select, Apply, RecordUpdate)


def render_expr(e: Expr) -> str:
    from .model import Adapt, Await, Lit  # runtime-only nodes, rendered for diagnostics

    match e:
        case NumLit(v):
            return str(v)
        case StrLit(v):
            return f'"{_escape(v)}"'
        case Var(name) | FunName(name):
            return name
        case BinOp(op, left, right):
            ls = render_expr(left)
            if isinstance(left, Lambda):
                ls = f"({ls})"
            rs = render_expr(right)
            if isinstance(right, (Lambda, BinOp)):
                rs = f"({rs})"
            return f"{ls} {op} {rs}"
        case Lambda(param, ptype, body):
            return f"\\{param} : {render_type(ptype)} . {render_expr(body)}"
        case Apply(fn, arg):
            fs = render_expr(fn)
            if not isinstance(fn, _ATOMIC):
                fs = f"({fs})"
            return f"{fs}({render_expr(arg)})"
        case RecordLit(fields):
            inner = ", ".join(
                f"{f.label}@{f.key} = {render_expr(f.expr)}" for f in fields
            )
            return "{" + (f" {inner} " if inner else "") + "}"
        case Select(target, label):
            ts = render_expr(target)
            if not isinstance(target, _ATOMIC):
                ts = f"({ts})"
            return f"{ts}.{label}"
        case RecordUpdate(target, fields):
            ts = render_expr(target)
            if not isinstance(target, _ATOMIC):
                ts = f"({ts})"
            inner = ", ".join(
                f"{f.label}@{f.key} = {render_expr(f.expr)}" for f in fields
            )
            return ts + " {" + (f" {inner} " if inner else "") + "}"
        case Await(thread):
            return f"{thread}?"
        case Adapt(expr, from_type, to_type):
            return (
                f"convert[{render_type(from_type)} => {render_type(to_type)}]"
                f"({render_expr(expr)})"
            )
        case Lit(value):
            return render_value(value)
    raise CemError(f"cannot render {e!r}")


def render_value(v) -> str:
    from .model import Closure, IntVal, RecordVal, StrVal

    match v:
        case IntVal(n):
            return str(n)
        case StrVal(s):
            return f'"{_escape(s)}"'
        case Closure(param, ptype, body, _):
            return f"\\{param} : {render_type(ptype)} . {render_expr(body)}"
        case RecordVal(known, unknown):
            parts = [f"{f.label}@{f.key} = {render_value(f.value)}" for f in known]
            parts += [f"#{f.key} = {render_value(f.value)}" for f in unknown]
            inner = ", ".join(parts)
            return "{" + (f" {inner} " if inner else "") + "}"
    raise CemError(f"cannot render value {v!r}")


def render_module(m: Module) -> str:
    """Deterministic source text whose parse equals ``m``."""
    out = [f"module {m.name} {{"]
    out.append("  refs {")
    for r in m.refs:
        out.append(f"    ref {r.producer} {{")
        for item in r.items:
            if isinstance(item, TypeRef):
                out.append(
                    f"      type {item.name}@{item.key} : {render_type(item.type)} ;"
                )
            else:
                out.append(
                    f"      fun {item.name}@{item.key} : "
                    f"{render_type(item.type.param)} -> {render_type(item.type.result)} ;"
                )
        out.append("    }")
    out.append("  }")
    out.append("  defs {")
    for d in m.defs:
        if isinstance(d, TypeDef):
            out.append(f"    type {d.name}@{d.key} = {render_type(d.body)} ;")
        else:
            out.append(
                f"    fun {d.name}@{d.key} : "
                f"{render_type(d.type.param)} -> {render_type(d.type.result)} = "
                f"{render_expr(d.body)} ;"
            )
    out.append("  }")
    out.append("}")
    return "\n".join(out) + "\n"


def render_system(u: System) -> str:
    parts = [render_module(s.module) for s in u.services]
    for s in u.services:
        out = [f"service {s.name} {{"]
        out.append(f"  label {s.label}")
        out.append("  proxies {")
        for p in s.proxies:
            if isinstance(p, ReadyProxy):
                out.append(f"    proxy {p.producer} @ {p.label} {{")
                for e in p.entries:
                    out.append(
                        f"      fun {e.local_name} -> {e.remote_name} : "
                        f"{render_type(e.type.param)} -> {render_type(e.type.result)} ;"
                    )
                out.append("    }")
            else:
                out.append(f"    outdated {p.producer} @ {p.label} {{")
                for entry in p.signature.entries:
                    if isinstance(entry.type, Arrow):
                        out.append(
                            f"      fun {entry.name}@{entry.key} : "
                            f"{render_type(entry.type.param)} -> "
                            f"{render_type(entry.type.result)} ;"
                        )
                    else:
                        out.append(
                            f"      type {entry.name}@{entry.key} = "
                            f"{render_type(entry.type)} ;"
                        )
                out.append("    }")
        out.append("  }")
        out.append("  threads {")
        for t in s.threads:
            out.append(f"    thread {t.id} = {render_expr(t.expr)} ;")
        out.append("  }")
        out.append("}")
        parts.append("\n".join(out) + "\n")
    return "\n".join(parts)
