"""A small textual language for pipelines.

Programs are one binding per line::

    # top-10 lexical retrieval
    first = retrieve(index, BM25)
    top10 = first % 10
    main = rewrite() >> first >> (retrieve(index, TFIDF) ** retrieve(index, QL))

Operators bind like their Python counterparts, tightest first::

    **  (right)   *  %  (left)   +   >>   &   ^   |

``*`` takes one numeric operand; ``%`` takes an integer on the right.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from typing import Mapping

from .errors import BadArity, DslSyntaxError, UnboundName
from .index import Index
from .operators import (
    Concat,
    Cutoff,
    FeatUnion,
    Leaf,
    Node,
    Plus,
    Scalar,
    SetIntersect,
    SetUnion,
    Then,
)
from .retrieval import parse_model
from .transformers import Expand, Extract, RerankLinear, Retrieve, Rewrite

# env entry holding the directory that relative file paths resolve against
BASE_DIR_KEY = "__dir__"

# ---------------------------------------------------------------------------
# tokens


@dataclass(frozen=True)
class Token:
    kind: str  # NUM, STR, NAME, OP, END
    text: str
    line: int
    col: int


_TOKEN_SPEC = [
    ("WS", r"[ \t\r]+"),
    ("COMMENT", r"#[^\n]*"),
    ("NUM", r"(?:\d+\.\d*|\.\d+|\d+)(?:[eE][+-]?\d+)?"),
    ("STR", r'"[^"\n]*"|\'[^\'\n]*\''),
    ("NAME", r"[A-Za-z_][A-Za-z0-9_]*"),
    ("OP", r">>|\*\*|[-+*%|&^()\[\],=]"),
]
_TOKEN_RE = re.compile("|".join(f"(?P<{name}>{pat})" for name, pat in _TOKEN_SPEC))


def tokenize_line(text: str, line: int = 1) -> list[Token]:
    tokens = []
    pos = 0
    while pos < len(text):
        m = _TOKEN_RE.match(text, pos)
        if m is None:
            raise DslSyntaxError(f"unexpected character {text[pos]!r}", line, pos + 1)
        kind = m.lastgroup
        if kind not in ("WS", "COMMENT"):
            tokens.append(Token(kind, m.group(), line, pos + 1))
        pos = m.end()
    tokens.append(Token("END", "", line, len(text) + 1))
    return tokens


# ---------------------------------------------------------------------------
# parsing

# binding power of each infix operator; ** is right-associative
_INFIX = {"|": 10, "^": 20, "&": 30, ">>": 40, "+": 50, "*": 60, "%": 60, "**": 70}
_RIGHT_ASSOC = {"**"}


@dataclass(frozen=True)
class _Num:
    value: float
    is_int: bool


@dataclass(frozen=True)
class _Str:
    value: str


@dataclass(frozen=True)
class _Name:
    value: str
    token: Token


@dataclass(frozen=True)
class _List:
    items: tuple


class _Parser:
    def __init__(self, tokens: list[Token], env: Mapping[str, object]) -> None:
        self.tokens = tokens
        self.pos = 0
        self.env = env

    @property
    def tok(self) -> Token:
        return self.tokens[self.pos]

    def advance(self) -> Token:
        t = self.tokens[self.pos]
        self.pos += 1
        return t

    def expect(self, text: str) -> Token:
        if self.tok.text != text or self.tok.kind not in ("OP",):
            self.fail(f"expected {text!r}, found {self.tok.text or 'end of line'!r}")
        return self.advance()

    def fail(self, message: str, token: Token | None = None):
        t = token or self.tok
        raise DslSyntaxError(message, t.line, t.col)

    # expression := prefix (infix prefix)*
    def expression(self, min_bp: int = 0):
        left_tok = self.tok
        left = self.prefix()
        while self.tok.kind == "OP" and self.tok.text in _INFIX:
            op = self.tok.text
            bp = _INFIX[op]
            if bp < min_bp:
                break
            op_tok = self.advance()
            next_bp = bp if op in _RIGHT_ASSOC else bp + 1
            right_tok = self.tok
            right = self.expression(next_bp)
            left = self.combine(op, left, right, op_tok, left_tok, right_tok)
        return left

    def prefix(self):
        t = self.tok
        if t.kind == "NUM":
            self.advance()
            return _number(t.text)
        if t.kind == "OP" and t.text == "-":
            self.advance()
            if self.tok.kind != "NUM":
                self.fail("'-' must precede a number")
            n = _number(self.advance().text)
            return _Num(-n.value, n.is_int)
        if t.kind == "STR":
            self.advance()
            return _Str(t.text[1:-1])
        if t.kind == "OP" and t.text == "(":
            self.advance()
            inner = self.expression()
            self.expect(")")
            return inner
        if t.kind == "OP" and t.text == "[":
            self.advance()
            items = []
            while not (self.tok.kind == "OP" and self.tok.text == "]"):
                items.append(self.expression())
                if self.tok.kind == "OP" and self.tok.text == ",":
                    self.advance()
                elif not (self.tok.kind == "OP" and self.tok.text == "]"):
                    self.fail("expected ',' or ']' in list")
            self.advance()
            return _List(tuple(items))
        if t.kind == "NAME":
            self.advance()
            if self.tok.kind == "OP" and self.tok.text == "(":
                return self.call(t)
            return _Name(t.text, t)
        self.fail(f"unexpected {t.text or 'end of line'!r}")

    def call(self, name_tok: Token):
        self.expect("(")
        args, kwargs = [], {}
        while not (self.tok.kind == "OP" and self.tok.text == ")"):
            if self.tok.kind == "NAME" and self.tokens[self.pos + 1].text == "=":
                key = self.advance().text
                self.advance()
                if key in kwargs:
                    self.fail(f"repeated keyword {key!r}")
                kwargs[key] = self.expression()
            else:
                if kwargs:
                    self.fail("positional argument after keyword argument")
                args.append(self.expression())
            if self.tok.kind == "OP" and self.tok.text == ",":
                self.advance()
            elif not (self.tok.kind == "OP" and self.tok.text == ")"):
                self.fail("expected ',' or ')' in call")
        self.advance()
        return _construct(name_tok, args, kwargs, self.env)

    def pipeline(self, value, token: Token) -> Node:
        if isinstance(value, _Name):
            value = _resolve(value, self.env)
        if isinstance(value, Node):
            return value
        self.fail("expected a pipeline", token)

    def combine(self, op, left, right, op_tok, left_tok, right_tok):
        if op == "*":
            lnum, rnum = isinstance(left, _Num), isinstance(right, _Num)
            if lnum and not rnum:
                return Scalar(left.value, self.pipeline(right, right_tok))
            if rnum and not lnum:
                return Scalar(right.value, self.pipeline(left, left_tok))
            self.fail("'*' needs exactly one numeric operand", op_tok)
        if op == "%":
            if not (isinstance(right, _Num) and right.is_int and right.value >= 1):
                self.fail("'%' needs a positive integer on the right", right_tok)
            return Cutoff(self.pipeline(left, left_tok), int(right.value))
        a, b = self.pipeline(left, left_tok), self.pipeline(right, right_tok)
        if op == ">>":
            return Then((a, b))
        if op == "+":
            return Plus((a, b))
        if op == "**":
            return FeatUnion((a, b))
        if op == "|":
            return SetUnion((a, b))
        if op == "&":
            return SetIntersect((a, b))
        if op == "^":
            return Concat(a, b)
        self.fail(f"unknown operator {op!r}", op_tok)


def _number(text: str) -> _Num:
    if re.fullmatch(r"\d+", text):
        return _Num(float(int(text)), True)
    return _Num(float(text), False)


def _resolve(name: _Name, env: Mapping[str, object]):
    if name.value not in env:
        raise UnboundName(f"name {name.value!r} is not bound (line {name.token.line}, column {name.token.col})")
    return env[name.value]


def _index_arg(value, env, what: str) -> Index:
    if isinstance(value, _Name):
        value = _resolve(value, env)
    if not isinstance(value, Index):
        raise BadArity(f"{what}: first argument must be an index")
    return value


def _model_arg(value, env):
    if isinstance(value, _Name):
        if value.value in env and not isinstance(env[value.value], str):
            raise BadArity(f"expected a weighting model name, got binding {value.value!r}")
        return parse_model(env.get(value.value, value.value))
    if isinstance(value, _Str):
        return parse_model(value.value)
    raise BadArity(f"expected a weighting model name, got {value!r}")


def _int_arg(value, what: str) -> int:
    if not (isinstance(value, _Num) and value.is_int):
        raise BadArity(f"{what} must be an integer")
    return int(value.value)


def _float_arg(value, what: str) -> float:
    if not isinstance(value, _Num):
        raise BadArity(f"{what} must be a number")
    return value.value


def _check_arity(fn: str, args, kwargs, min_pos: int, max_pos: int, keywords: set[str]) -> None:
    if not min_pos <= len(args) <= max_pos:
        expected = str(min_pos) if min_pos == max_pos else f"{min_pos} to {max_pos}"
        raise BadArity(f"{fn}() takes {expected} positional arguments, got {len(args)}")
    unknown = set(kwargs) - keywords
    if unknown:
        raise BadArity(f"{fn}() got unexpected keyword(s): {', '.join(sorted(unknown))}")


def _sole_index(env) -> Index | None:
    indexes = {id(v): v for v in env.values() if isinstance(v, Index)}
    return next(iter(indexes.values())) if len(indexes) == 1 else None


def _construct(tok: Token, args, kwargs, env) -> Node:
    fn = tok.text
    if fn == "retrieve":
        _check_arity(fn, args, kwargs, 2, 3, {"k"})
        if len(args) == 3 and "k" in kwargs:
            raise BadArity("retrieve() got k twice")
        k = _int_arg(args[2] if len(args) == 3 else kwargs.get("k", _Num(1000.0, True)), "k")
        return Leaf(Retrieve(_index_arg(args[0], env, fn), _model_arg(args[1], env), k))
    if fn == "rewrite":
        _check_arity(fn, args, kwargs, 0, 1, set())
        if args:
            return Leaf(Rewrite(_index_arg(args[0], env, fn).options))
        sole = _sole_index(env)
        return Leaf(Rewrite(sole.options if sole is not None else None))
    if fn == "expand":
        _check_arity(fn, args, kwargs, 1, 1, {"fb_docs", "fb_terms", "lambda"})
        fb_docs = _int_arg(kwargs.get("fb_docs", _Num(3.0, True)), "fb_docs")
        fb_terms = _int_arg(kwargs.get("fb_terms", _Num(10.0, True)), "fb_terms")
        lam = _float_arg(kwargs.get("lambda", _Num(0.6, False)), "lambda")
        return Leaf(Expand(_index_arg(args[0], env, fn), fb_docs, fb_terms, lam))
    if fn == "extract":
        _check_arity(fn, args, kwargs, 2, 2, set())
        if not isinstance(args[1], _List):
            raise BadArity("extract() needs a list of models as second argument")
        return Leaf(Extract(_index_arg(args[0], env, fn), [_model_arg(m, env) for m in args[1].items]))
    if fn == "rerank_linear":
        _check_arity(fn, args, kwargs, 0, 1, set())
        if args:
            if not isinstance(args[0], _Str):
                raise BadArity("rerank_linear() takes a weights file path string")
            return Leaf(RerankLinear(source=args[0].value, base_dir=env.get(BASE_DIR_KEY)))
        return Leaf(RerankLinear())
    raise UnboundName(f"unknown constructor {fn!r} (line {tok.line}, column {tok.col})")


def parse_expression(src: str, env: Mapping[str, object] | None = None, line: int = 1):
    """Parse one expression; returns a pipeline node (or a literal value)."""
    env = env or {}
    p = _Parser(tokenize_line(src, line), env)
    value = p.expression()
    if p.tok.kind != "END":
        p.fail(f"unexpected {p.tok.text!r} after expression")
    if isinstance(value, _Name):
        value = _resolve(value, env)
    if isinstance(value, _Num):
        return value.value
    if isinstance(value, _Str):
        return value.value
    if isinstance(value, _List):
        p.fail("a list is only allowed as an argument")
    return value


# ---------------------------------------------------------------------------
# programs


@dataclass
class DslProgram:
    bindings: list[tuple[str, object]] = field(default_factory=list)
    target: str | None = None

    def get(self, name: str):
        for n, v in self.bindings:
            if n == name:
                return v
        raise UnboundName(f"name {name!r} is not bound")

    @property
    def main(self) -> Node:
        if self.target is None:
            raise UnboundName("program defines no pipeline")
        return self.get(self.target)

    def pipelines(self) -> list[tuple[str, Node]]:
        """Pipeline bindings in file order, skipping names that start with an underscore."""
        return [(n, v) for n, v in self.bindings if isinstance(v, Node) and not n.startswith("_")]


_BINDING_RE = re.compile(r"^\s*([A-Za-z_][A-Za-z0-9_]*)\s*=(?!=)")


def parse_program(src: str, env: Mapping[str, object] | None = None) -> DslProgram:
    """Parse a program; the target is ``main`` if bound, else the last binding.

    A trailing line holding a bare expression is bound to ``main``.
    """
    scope = dict(env or {})
    program = DslProgram()
    lines = src.splitlines()
    last_line = max((i for i, l in enumerate(lines, 1) if l.split("#", 1)[0].strip()), default=0)
    for lineno, raw in enumerate(lines, 1):
        tokens = tokenize_line(raw, lineno)
        if tokens[0].kind == "END":
            continue
        m = _BINDING_RE.match(raw)
        if m and tokens[1].text == "=":
            name = m.group(1)
            if name in scope and any(n == name for n, _ in program.bindings):
                raise DslSyntaxError(f"name {name!r} bound twice", lineno, tokens[0].col)
            expr_src = raw[m.end():]
            offset = m.end()
        else:
            if lineno != last_line:
                raise DslSyntaxError("only the last line may be a bare expression", lineno, tokens[0].col)
            name, expr_src, offset = "main", raw, 0
        parser = _Parser(_shift(tokenize_line(expr_src, lineno), offset), scope)
        value = parser.expression()
        if parser.tok.kind != "END":
            parser.fail(f"unexpected {parser.tok.text!r} after expression")
        if isinstance(value, _Name):
            value = _resolve(value, scope)
        elif isinstance(value, (_Num, _Str)):
            value = value.value
        elif isinstance(value, _List):
            parser.fail("a list is only allowed as an argument")
        scope[name] = value
        program.bindings.append((name, value))
    pipes = [n for n, v in program.bindings if isinstance(v, Node)]
    if "main" in scope and isinstance(scope["main"], Node) and any(n == "main" for n, _ in program.bindings):
        program.target = "main"
    elif pipes:
        program.target = pipes[-1]
    return program


def _shift(tokens: list[Token], offset: int) -> list[Token]:
    return [Token(t.kind, t.text, t.line, t.col + offset) for t in tokens]


def parse_pipeline(src: str, env: Mapping[str, object] | None = None) -> Node:
    """Parse an expression or a whole program and return its target pipeline."""
    return parse_program(src, env).main


# ---------------------------------------------------------------------------
# printing

_LEVEL = {SetUnion: 10, Concat: 20, SetIntersect: 30, Then: 40, Plus: 50, Scalar: 60, Cutoff: 60, FeatUnion: 70}
_ATOM = 100
_GLYPH = {SetUnion: " | ", SetIntersect: " & ", Then: " >> ", Plus: " + ", FeatUnion: " ** "}


def _level(node: Node) -> int:
    return _LEVEL.get(type(node), _ATOM)


def _wrap(node: Node, parens: bool) -> str:
    text = to_dsl(node)
    return f"({text})" if parens else text


def _num(x: float) -> str:
    return repr(float(x))


def to_dsl(node: Node) -> str:
    """Render a pipeline as DSL text that parses back to an equal tree."""
    if isinstance(node, Leaf):
        return node.transformer.describe()
    if isinstance(node, Plus) and node.lenient:
        raise ValueError("the lenient linear combination has no DSL spelling")
    level = _level(node)
    if type(node) in _GLYPH:
        glyph = _GLYPH[type(node)]
        return glyph.join(_wrap(c, _level(c) <= level) for c in node.children)
    if isinstance(node, Scalar):
        return f"{_num(node.alpha)} * {_wrap(node.child, _level(node.child) <= level)}"
    if isinstance(node, Cutoff):
        return f"{_wrap(node.child, _level(node.child) < level)} % {node.k}"
    if isinstance(node, Concat):
        return f"{_wrap(node.first, _level(node.first) < level)} ^ {_wrap(node.second, _level(node.second) <= level)}"
    raise ValueError(f"{node.kind} has no DSL spelling (compiled plans are not source)")
