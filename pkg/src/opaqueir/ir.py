"""Mini IR core: types, parser, canonical printer, macros, validation.

The IR is a three-address SSA language with regions, basic blocks and
block arguments (continuation-passing style: loops carry their state
through branch arguments, there are no phi nodes). A region is introduced
by a function, a macro or an `opaque { ... }` expression; single-assignment
variables are scoped to their region and captured in dominated blocks.

Concrete syntax is line oriented: an instruction ends at end of line or at
`;` (several instructions may share a line; a trailing semicolon is an
empty statement and is ignored). `//` starts a comment running to end of
line. See docs/ir-reference.md for the grammar.

Opaque regions are the central construct. An instruction defining values
from an `opaque { ... }` expression executes its whole region atomically
and in isolation; optimization passes may only query a region through the
`OpaqueSummary` barrier (uses, read/write effects, performs-I/O, identity
up to variable renaming). The `sealed_opaque_regions` context manager
enforces the barrier at runtime: while sealed, touching `OpaqueExpr.region`
raises `OpacityBreach`.
"""

from __future__ import annotations

import contextlib
import contextvars
import re
from dataclasses import dataclass, field, replace as dc_replace
from enum import Enum
from typing import Callable, Iterator, Optional, Union


class IRError(Exception):
    """Base class for IR-level failures carrying a source location."""

    def __init__(self, message: str, loc: tuple[int, int] = (0, 0)):
        super().__init__(f"{loc[0]}:{loc[1]}: {message}" if loc != (0, 0) else message)
        self.message = message
        self.loc = loc


class ParseError(IRError):
    pass


class MacroError(IRError):
    pass


class OpacityBreach(RuntimeError):
    """An optimization pass touched the inside of an opaque region."""


# --------------------------------------------------------------------------
# Types and constants
# --------------------------------------------------------------------------


class Type(Enum):
    BOOL = "bool"
    U8 = "u8"
    U32 = "u32"
    I32 = "i32"
    UNIT = "unit"
    DESC = "desc"  # internal: I/O descriptor values; not a surface annotation

    def __repr__(self):
        return f"Type.{self.name}"


TYPE_NAMES = {
    "bool": Type.BOOL,
    "u8": Type.U8,
    "u32": Type.U32,
    "i32": Type.I32,
    "unit": Type.UNIT,
    "addr": Type.U32,  # addresses are plain unsigned 32-bit values
}

INT_TYPES = (Type.U8, Type.U32, Type.I32)

TYPE_BITS = {Type.U8: 8, Type.U32: 32, Type.I32: 32}

# Domain size per type, for opaque value set enumeration.
DOMAIN_SIZE = {Type.BOOL: 2, Type.U8: 256, Type.U32: 2**32, Type.I32: 2**32, Type.UNIT: 1}


class Unit:
    """The single value of the unit (token) type."""

    _instance = None

    def __new__(cls):
        if cls._instance is None:
            cls._instance = super().__new__(cls)
        return cls._instance

    def __repr__(self):
        return "unit_value"


UNIT_VALUE = Unit()

# Reserved descriptor constants and their channel names.
DESCRIPTOR_CONSTANTS = {
    "tagged_unit_unordered_set_descriptor": "tailio",
    "ordered_set_descriptor": "cc",
}
TAILIO_CHANNEL = "tailio"
CC_CHANNEL = "cc"

KEYWORDS = frozenset(
    [
        "function",
        "macro",
        "opaque",
        "snapshot",
        "io",
        "mem",
        "use",
        "br",
        "return",
        "yield",
        "true",
        "false",
        "unit_value",
    ]
    + list(DESCRIPTOR_CONSTANTS)
)


@dataclass(frozen=True)
class DescValue:
    """Runtime value of a descriptor constant."""

    channel: str


# --------------------------------------------------------------------------
# Atoms
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class Var:
    name: str


@dataclass(frozen=True)
class Const:
    value: object  # int | bool | Unit
    type: Type


@dataclass(frozen=True)
class VarGroup:
    """A `v1, ..., vk` splice marker; only legal inside macro regions."""

    first: str
    last: str


Atom = Union[Var, Const, VarGroup]


@dataclass(frozen=True)
class Desc:
    """An I/O descriptor operand.

    `is_var` is resolved after parsing a region: a name bound by an SSA
    definition denotes a variable holding a descriptor constant, any other
    name denotes itself as a literal channel.
    """

    name: str
    is_var: bool = False


@dataclass(frozen=True)
class ObsTag:
    """Observation metadata: the pattern-invocation site and the printed
    source names of the snapshot arguments, frozen at expansion time."""

    source_id: tuple[int, int]
    names: tuple[str, ...]


# --------------------------------------------------------------------------
# Expressions
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class AtomExpr:
    atom: Atom


@dataclass(frozen=True)
class UnaryExpr:
    op: str  # - ! ~
    a: Atom


@dataclass(frozen=True)
class BinaryExpr:
    op: str
    a: Atom
    b: Atom


@dataclass(frozen=True)
class LoadMem:
    addr: Atom


@dataclass(frozen=True)
class LoadRef:
    ref: str


@dataclass(frozen=True)
class IoRead:
    desc: Desc


@dataclass(frozen=True)
class SnapshotExpr:
    args: tuple[Atom, ...]
    tags: tuple[ObsTag, ...] = ()


@dataclass(frozen=True)
class CallExpr:
    callee: str
    args: tuple[Atom, ...]


@dataclass(frozen=True)
class DescriptorExpr:
    """One of the reserved descriptor constants."""

    name: str

    @property
    def channel(self) -> str:
        return DESCRIPTOR_CONSTANTS[self.name]


class OpaqueExpr:
    """An `opaque { ... }` region.

    The enclosed region is off limits to optimization passes; they must go
    through `summary`. Structural equality compares regions (used by the
    round-trip tests); identity-up-to-renaming uses `summary.identity`.
    """

    __slots__ = ("_body", "_summary")

    def __init__(self, body: "Region"):
        object.__setattr__(self, "_body", body)
        object.__setattr__(self, "_summary", None)

    @property
    def region(self) -> "Region":
        if _BARRIER_SEALED.get():
            raise OpacityBreach(
                "optimization passes may not inspect opaque regions; "
                "use OpaqueExpr.summary"
            )
        return self._body

    @property
    def summary(self) -> "OpaqueSummary":
        if self._summary is None:
            object.__setattr__(self, "_summary", _summarize_region(self._body))
        return self._summary

    def __eq__(self, other):
        return isinstance(other, OpaqueExpr) and self._body == other._body

    def __repr__(self):
        return f"OpaqueExpr(<{len(self._body.blocks)} blocks>)"


Expr = Union[
    AtomExpr,
    UnaryExpr,
    BinaryExpr,
    LoadMem,
    LoadRef,
    IoRead,
    SnapshotExpr,
    CallExpr,
    DescriptorExpr,
    OpaqueExpr,
]


# --------------------------------------------------------------------------
# Instructions
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class Define:
    """`r1, ..., rn = rhs` (n may be zero: expression statement)."""

    results: tuple[object, ...]  # str | VarGroup
    rhs: Expr
    ann: tuple[Optional[Type], ...] = ()
    loc: tuple[int, int] = field(default=(0, 0), compare=False)


@dataclass(frozen=True)
class RefAssign:
    ref: str
    value: Atom
    loc: tuple[int, int] = field(default=(0, 0), compare=False)


@dataclass(frozen=True)
class MemStore:
    addr: Atom
    value: Atom
    loc: tuple[int, int] = field(default=(0, 0), compare=False)


@dataclass(frozen=True)
class IoWrite:
    desc: Desc
    values: tuple[Atom, ...]
    loc: tuple[int, int] = field(default=(0, 0), compare=False)


@dataclass(frozen=True)
class Use:
    """`use(v1, ..., vk)`: uses all arguments, defines nothing.

    Only meaningful inside opaque regions, where it pins free variables as
    uses of the enclosing opaque instruction.
    """

    args: tuple[Atom, ...]
    loc: tuple[int, int] = field(default=(0, 0), compare=False)


@dataclass(frozen=True)
class BlockCall:
    label: str
    args: tuple[Atom, ...] = ()


@dataclass(frozen=True)
class Branch:
    """Conditional (`cond` set, two targets) or unconditional (no cond)."""

    cond: Optional[Atom]
    then: BlockCall
    els: Optional[BlockCall] = None
    loc: tuple[int, int] = field(default=(0, 0), compare=False)


@dataclass(frozen=True)
class Return:
    values: tuple[Atom, ...]
    loc: tuple[int, int] = field(default=(0, 0), compare=False)


@dataclass(frozen=True)
class Yield:
    values: tuple[Atom, ...]
    loc: tuple[int, int] = field(default=(0, 0), compare=False)


Instr = Union[Define, RefAssign, MemStore, IoWrite, Use, Branch, Return, Yield]
TERMINATORS = (Branch, Return, Yield)


@dataclass(frozen=True)
class Param:
    name: str
    type: Optional[Type] = None


@dataclass(frozen=True)
class Block:
    label: str
    params: tuple[Param, ...]
    instrs: tuple[Instr, ...]
    implicit: bool = field(default=False, compare=False)


@dataclass(frozen=True)
class Region:
    blocks: tuple[Block, ...]

    @property
    def entry(self) -> Block:
        return self.blocks[0]

    def block(self, label: str) -> Block:
        for b in self.blocks:
            if b.label == label:
                return b
        raise KeyError(label)


@dataclass(frozen=True)
class Function:
    name: str
    params: tuple[Param, ...]
    region: Region
    ret_types: Optional[tuple[Type, ...]] = None
    loc: tuple[int, int] = field(default=(0, 0), compare=False)


@dataclass(frozen=True)
class MacroFormals:
    fixed: tuple[str, ...]
    variadic: Optional[tuple[str, str]] = None


@dataclass(frozen=True)
class Macro:
    name: str
    formals: MacroFormals
    region: Region
    loc: tuple[int, int] = field(default=(0, 0), compare=False)


@dataclass(frozen=True)
class Program:
    functions: tuple[Function, ...]
    macros: tuple[Macro, ...] = ()

    def function(self, name: str) -> Function:
        for f in self.functions:
            if f.name == name:
                return f
        raise KeyError(f"no function named {name!r}")

    def macro_map(self) -> dict[str, Macro]:
        return {m.name: m for m in self.macros}

    @property
    def entry(self) -> Function:
        return self.function("main")


# An instruction's identity is its coordinates in the program.
InstrId = tuple[str, int, int]  # (function name, block index, position)


def instr_at(program: Program, iid: InstrId) -> Instr:
    fn, bi, pos = iid
    return program.function(fn).region.blocks[bi].instrs[pos]


# --------------------------------------------------------------------------
# Opacity barrier
# --------------------------------------------------------------------------

_BARRIER_SEALED: contextvars.ContextVar[bool] = contextvars.ContextVar(
    "opaqueir_barrier_sealed", default=False
)


@contextlib.contextmanager
def sealed_opaque_regions():
    """Seal all opaque regions for the duration of the context.

    The pass pipeline runs every pass under this seal, so a pass that tries
    to pattern-match an opaque body fails loudly instead of miscompiling.
    """
    token = _BARRIER_SEALED.set(True)
    try:
        yield
    finally:
        _BARRIER_SEALED.reset(token)


@contextlib.contextmanager
def _unsealed():
    token = _BARRIER_SEALED.set(False)
    try:
        yield
    finally:
        _BARRIER_SEALED.reset(token)


@dataclass(frozen=True)
class OpaqueSummary:
    """Everything a pass is allowed to know about an opaque region."""

    uses: tuple[str, ...]  # free variables, in first-use order
    has_read: bool  # loads from memory or references
    has_write: bool  # stores to memory or references
    performs_io: bool
    yield_arity: int
    snapshot_slots: int
    identity: str  # canonical form, equal iff identical up to renaming

    @property
    def is_pure(self) -> bool:
        return not (self.has_read or self.has_write or self.performs_io)


def _atom_vars(atom: Atom) -> Iterator[str]:
    if isinstance(atom, Var):
        yield atom.name


def _expr_atoms(expr: Expr) -> Iterator[Atom]:
    if isinstance(expr, AtomExpr):
        yield expr.atom
    elif isinstance(expr, UnaryExpr):
        yield expr.a
    elif isinstance(expr, BinaryExpr):
        yield expr.a
        yield expr.b
    elif isinstance(expr, LoadMem):
        yield expr.addr
    elif isinstance(expr, IoRead):
        if expr.desc.is_var:
            yield Var(expr.desc.name)
    elif isinstance(expr, SnapshotExpr):
        yield from expr.args
    elif isinstance(expr, CallExpr):
        yield from expr.args


def instr_operand_atoms(instr: Instr) -> Iterator[Atom]:
    """Atoms read by an instruction (not recursing into opaque regions)."""
    if isinstance(instr, Define):
        if isinstance(instr.rhs, OpaqueExpr):
            return
        yield from _expr_atoms(instr.rhs)
    elif isinstance(instr, RefAssign):
        yield instr.value
    elif isinstance(instr, MemStore):
        yield instr.addr
        yield instr.value
    elif isinstance(instr, IoWrite):
        if instr.desc.is_var:
            yield Var(instr.desc.name)
        yield from instr.values
    elif isinstance(instr, Use):
        yield from instr.args
    elif isinstance(instr, Branch):
        if instr.cond is not None:
            yield instr.cond
        yield from instr.then.args
        if instr.els is not None:
            yield from instr.els.args
    elif isinstance(instr, (Return, Yield)):
        yield from instr.values


def region_defined_names(region: Region) -> set[str]:
    """All names defined anywhere in a region, including nested regions."""
    names: set[str] = set()
    for block in region.blocks:
        for p in block.params:
            names.add(p.name)
        for instr in block.instrs:
            if isinstance(instr, Define):
                for r in instr.results:
                    if isinstance(r, str):
                        names.add(r)
                if isinstance(instr.rhs, OpaqueExpr):
                    with _unsealed():
                        names |= region_defined_names(instr.rhs.region)
    return names


def region_ref_names(region: Region) -> set[str]:
    refs: set[str] = set()
    for block in region.blocks:
        for instr in block.instrs:
            if isinstance(instr, RefAssign):
                refs.add(instr.ref)
            elif isinstance(instr, Define) and isinstance(instr.rhs, LoadRef):
                refs.add(instr.rhs.ref)
            elif isinstance(instr, Define) and isinstance(instr.rhs, OpaqueExpr):
                with _unsealed():
                    refs |= region_ref_names(instr.rhs.region)
    return refs


def _summarize_region(body: Region) -> OpaqueSummary:
    bound = region_defined_names(body)
    uses: list[str] = []
    seen: set[str] = set()
    has_read = has_write = performs_io = False
    snapshots = 0
    yield_arity = 0

    def visit(region: Region):
        nonlocal has_read, has_write, performs_io, snapshots, yield_arity
        for block in region.blocks:
            for instr in block.instrs:
                for atom in instr_operand_atoms(instr):
                    for name in _atom_vars(atom):
                        if name not in bound and name not in seen:
                            seen.add(name)
                            uses.append(name)
                if isinstance(instr, MemStore):
                    has_write = True
                elif isinstance(instr, RefAssign):
                    has_write = True
                elif isinstance(instr, IoWrite):
                    performs_io = True
                elif isinstance(instr, Yield) and region is body:
                    yield_arity = len(instr.values)
                elif isinstance(instr, Define):
                    rhs = instr.rhs
                    if isinstance(rhs, (LoadMem, LoadRef)):
                        has_read = True
                    elif isinstance(rhs, IoRead):
                        performs_io = True
                    elif isinstance(rhs, SnapshotExpr):
                        snapshots += 1
                    elif isinstance(rhs, OpaqueExpr):
                        for name in rhs.summary.uses:
                            if name not in bound and name not in seen:
                                seen.add(name)
                                uses.append(name)
                        visit(rhs._body)

    visit(body)
    return OpaqueSummary(
        uses=tuple(uses),
        has_read=has_read,
        has_write=has_write,
        performs_io=performs_io,
        yield_arity=yield_arity,
        snapshot_slots=snapshots,
        identity=region_signature(body),
    )


# --------------------------------------------------------------------------
# Canonical signatures (identity up to variable renaming)
# --------------------------------------------------------------------------


class _Canon:
    """Positional renaming of variables/references/labels for signatures."""

    def __init__(self):
        self.vars: dict[str, str] = {}
        self.refs: dict[str, str] = {}
        self.labels: dict[str, str] = {}

    def var(self, name: str) -> str:
        if name not in self.vars:
            self.vars[name] = f"%{len(self.vars)}"
        return self.vars[name]

    def ref(self, name: str) -> str:
        if name not in self.refs:
            self.refs[name] = f"&{len(self.refs)}"
        return self.refs[name]

    def label(self, name: str) -> str:
        if name not in self.labels:
            self.labels[name] = f"^{len(self.labels)}"
        return self.labels[name]

    def atom(self, atom: Atom) -> str:
        if isinstance(atom, Var):
            return self.var(atom.name)
        if isinstance(atom, Const):
            return _const_text(atom)
        return f"{atom.first}...{atom.last}"

    def desc(self, desc: Desc) -> str:
        return self.var(desc.name) if desc.is_var else f"@{desc.name}"


def _sig_expr(expr: Expr, c: _Canon) -> str:
    if isinstance(expr, AtomExpr):
        return c.atom(expr.atom)
    if isinstance(expr, UnaryExpr):
        return f"{expr.op}{c.atom(expr.a)}"
    if isinstance(expr, BinaryExpr):
        return f"{c.atom(expr.a)} {expr.op} {c.atom(expr.b)}"
    if isinstance(expr, LoadMem):
        return f"mem[{c.atom(expr.addr)}]"
    if isinstance(expr, LoadRef):
        return c.ref(expr.ref)
    if isinstance(expr, IoRead):
        return f"io({c.desc(expr.desc)})"
    if isinstance(expr, SnapshotExpr):
        return f"snapshot({', '.join(c.atom(a) for a in expr.args)})"
    if isinstance(expr, CallExpr):
        return f"{expr.callee}({', '.join(c.atom(a) for a in expr.args)})"
    if isinstance(expr, DescriptorExpr):
        return expr.name
    if isinstance(expr, OpaqueExpr):
        with _unsealed():
            return "opaque{" + _sig_region(expr.region, c) + "}"
    raise TypeError(expr)


def _sig_instr(instr: Instr, c: _Canon) -> str:
    if isinstance(instr, Define):
        lhs = ", ".join(
            c.var(r) if isinstance(r, str) else f"{r.first}...{r.last}"
            for r in instr.results
        )
        rhs = _sig_expr(instr.rhs, c)
        return f"{lhs} = {rhs}" if lhs else rhs
    if isinstance(instr, RefAssign):
        return f"{c.ref(instr.ref)} <- {c.atom(instr.value)}"
    if isinstance(instr, MemStore):
        return f"mem[{c.atom(instr.addr)}] <- {c.atom(instr.value)}"
    if isinstance(instr, IoWrite):
        parts = [c.desc(instr.desc)] + [c.atom(v) for v in instr.values]
        return f"io({', '.join(parts)})"
    if isinstance(instr, Use):
        return f"use({', '.join(c.atom(a) for a in instr.args)})"
    if isinstance(instr, Branch):
        def tgt(bc: BlockCall) -> str:
            args = ", ".join(c.atom(a) for a in bc.args)
            return f"{c.label(bc.label)}({args})" if args else c.label(bc.label)

        if instr.cond is None:
            return f"br {tgt(instr.then)}"
        return f"br {c.atom(instr.cond)}, {tgt(instr.then)}, {tgt(instr.els)}"
    if isinstance(instr, Return):
        return f"return({', '.join(c.atom(v) for v in instr.values)})"
    if isinstance(instr, Yield):
        return f"yield({', '.join(c.atom(v) for v in instr.values)})"
    raise TypeError(instr)


def _sig_region(region: Region, c: _Canon) -> str:
    parts = []
    for block in region.blocks:
        c.label(block.label)
    for block in region.blocks:
        params = ", ".join(c.var(p.name) for p in block.params)
        parts.append(f"{c.label(block.label)}({params}):")
        for instr in block.instrs:
            parts.append(_sig_instr(instr, c))
    return " ".join(parts)


def region_signature(region: Region) -> str:
    return _sig_region(region, _Canon())


def instr_signature(instr: Instr) -> str:
    """Canonical form of one instruction, abstracting variable names.

    Two instructions with the same signature are identical expressions up
    to variable renaming (constants, operators, descriptors and opaque
    region structure all compared concretely).
    """
    return _sig_instr(instr, _Canon())


# --------------------------------------------------------------------------
# Lexer
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class _Token:
    kind: str  # ident | int | punct | newline | eof
    text: str
    line: int
    col: int
    value: Optional[Const] = None


_PUNCT = [
    "<-", "->", "...", "<<", ">>", "==", "!=", "<=", ">=",
    "(", ")", "{", "}", "[", "]", ",", ":", "=", "<", ">",
    "+", "-", "*", "/", "%", "&", "|", "^", "!", "~", "@",
]

_INT_RE = re.compile(r"\d+")
_IDENT_RE = re.compile(r"[A-Za-z_][A-Za-z0-9_]*")
_SUFFIXES = {"u8": Type.U8, "u32": Type.U32, "i32": Type.I32}


def tokenize(text: str) -> list[_Token]:
    tokens: list[_Token] = []
    for lineno, line in enumerate(text.splitlines(), start=1):
        comment = line.find("//")
        if comment >= 0:
            line = line[:comment]
        pos = 0
        produced = False
        while pos < len(line):
            ch = line[pos]
            if ch in " \t":
                pos += 1
                continue
            col = pos + 1
            if ch == ";":
                # Instruction separator: acts exactly like a line break.
                tokens.append(_Token("newline", ";", lineno, col))
                pos += 1
                continue
            m = _INT_RE.match(line, pos)
            if m:
                raw = m.group()
                pos = m.end()
                suffix_m = _IDENT_RE.match(line, pos)
                ty = Type.U32
                if suffix_m and suffix_m.group() in _SUFFIXES:
                    ty = _SUFFIXES[suffix_m.group()]
                    pos = suffix_m.end()
                elif suffix_m:
                    raise ParseError(f"bad integer suffix {suffix_m.group()!r}", (lineno, col))
                value = int(raw)
                _check_literal_range(value, ty, (lineno, col))
                tokens.append(_Token("int", raw, lineno, col, Const(value, ty)))
                produced = True
                continue
            m = _IDENT_RE.match(line, pos)
            if m:
                tokens.append(_Token("ident", m.group(), lineno, col))
                pos = m.end()
                produced = True
                continue
            for p in _PUNCT:
                if line.startswith(p, pos):
                    tokens.append(_Token("punct", p, lineno, col))
                    pos += len(p)
                    produced = True
                    break
            else:
                raise ParseError(f"unexpected character {ch!r}", (lineno, col))
        if produced:
            tokens.append(_Token("newline", "\\n", lineno, len(line) + 1))
    tokens.append(_Token("eof", "", len(text.splitlines()) + 1, 1))
    return tokens


def _check_literal_range(value: int, ty: Type, loc):
    # i32 allows magnitude 2^31 here so `-2147483648i32` lexes; the parser
    # rejects it when no minus sign follows through.
    limits = {Type.U8: 255, Type.U32: 2**32 - 1, Type.I32: 2**31}
    if value > limits[ty]:
        raise ParseError(f"literal {value} out of range for {ty.value}", loc)


def _negate_literal(const: Const, loc) -> Const:
    if const.type is not Type.I32:
        raise ParseError("negative literal requires the i32 suffix", loc)
    value = -const.value
    if value < -(2**31):
        raise ParseError(f"literal {value} out of range for i32", loc)
    return Const(value, Type.I32)


# --------------------------------------------------------------------------
# Parser
# --------------------------------------------------------------------------


class _Parser:
    def __init__(self, tokens: list[_Token]):
        self.tokens = tokens
        self.pos = 0
        self.in_macro = False
        self.fresh = 0

    # -- token plumbing

    def peek(self, k: int = 0) -> _Token:
        return self.tokens[min(self.pos + k, len(self.tokens) - 1)]

    def advance(self) -> _Token:
        tok = self.tokens[self.pos]
        if tok.kind != "eof":
            self.pos += 1
        return tok

    def expect(self, text: str) -> _Token:
        tok = self.peek()
        if tok.text != text:
            raise ParseError(f"expected {text!r}, found {tok.text!r}", (tok.line, tok.col))
        return self.advance()

    def expect_ident(self) -> _Token:
        tok = self.peek()
        if tok.kind != "ident":
            raise ParseError(f"expected identifier, found {tok.text!r}", (tok.line, tok.col))
        return self.advance()

    def expect_newline(self):
        tok = self.peek()
        if tok.kind == "eof" or tok.text == "}":
            return  # a closing brace also ends the last instruction
        if tok.kind != "newline":
            raise ParseError(f"expected end of line, found {tok.text!r}", (tok.line, tok.col))
        self.advance()

    def skip_newlines(self):
        while self.peek().kind == "newline":
            self.advance()

    # -- program / declarations

    def parse_program(self) -> Program:
        functions: list[Function] = []
        macros: list[Macro] = []
        self.skip_newlines()
        while self.peek().kind != "eof":
            tok = self.peek()
            if tok.text == "function":
                functions.append(self.parse_function())
            elif tok.text == "macro":
                macros.append(self.parse_macro())
            else:
                raise ParseError(
                    f"expected 'function' or 'macro', found {tok.text!r}",
                    (tok.line, tok.col),
                )
            self.skip_newlines()
        program = Program(tuple(functions), tuple(macros))
        return _resolve_names(program)

    def parse_function(self) -> Function:
        kw = self.expect("function")
        name = self.expect_ident().text
        self.expect("(")
        params = self.parse_params(types_required=True)
        self.expect(")")
        ret_types = None
        if self.peek().text == "->":
            self.advance()
            self.expect("(")
            types = []
            while self.peek().text != ")":
                types.append(self.parse_type())
                if self.peek().text == ",":
                    self.advance()
            self.expect(")")
            ret_types = tuple(types)
        self.expect("{")
        region = self.parse_region(kind="function")
        self.expect_newline()
        return Function(name, params, region, ret_types, loc=(kw.line, kw.col))

    def parse_macro(self) -> Macro:
        kw = self.expect("macro")
        name = self.expect_ident().text
        self.expect("(")
        formals = self.parse_formals()
        self.expect(")")
        self.expect("{")
        was = self.in_macro
        self.in_macro = True
        try:
            region = self.parse_region(kind="function")
        finally:
            self.in_macro = was
        self.expect_newline()
        return Macro(name, formals, region, loc=(kw.line, kw.col))

    def parse_params(self, types_required: bool) -> tuple[Param, ...]:
        params: list[Param] = []
        while self.peek().text != ")":
            tok = self.expect_ident()
            ty = None
            if self.peek().text == ":":
                self.advance()
                ty = self.parse_type()
            elif types_required:
                raise ParseError(
                    f"parameter {tok.text!r} needs a type annotation", (tok.line, tok.col)
                )
            params.append(Param(tok.text, ty))
            if self.peek().text == ",":
                self.advance()
        return tuple(params)

    def parse_formals(self) -> MacroFormals:
        names: list[str] = []
        while self.peek().text != ")":
            tok = self.peek()
            if tok.text == "...":
                self.advance()
                names.append("...")
            else:
                names.append(self.expect_ident().text)
            if self.peek().text == ",":
                self.advance()
        if "..." not in names:
            return MacroFormals(tuple(names))
        i = names.index("...")
        if i == 0 or i != len(names) - 2 or names.count("...") != 1:
            tok = self.peek()
            raise ParseError(
                "variadic formals must end `first, ..., last`", (tok.line, tok.col)
            )
        return MacroFormals(tuple(names[: i - 1]), (names[i - 1], names[i + 1]))

    def parse_type(self) -> Type:
        tok = self.expect_ident()
        if tok.text not in TYPE_NAMES:
            raise ParseError(f"unknown type {tok.text!r}", (tok.line, tok.col))
        return TYPE_NAMES[tok.text]

    # -- regions and blocks

    def parse_region(self, kind: str) -> Region:
        """Parse blocks until the closing brace. `kind` is 'function' or
        'opaque'; it decides which terminator gets synthesized on
        fall-through at the end of the region."""
        blocks: list[tuple[str, tuple[Param, ...], list[Instr], bool]] = []

        def ensure_block():
            if not blocks:
                blocks.append(("entry", (), [], True))

        self.skip_newlines()
        while True:
            tok = self.peek()
            if tok.text == "}":
                self.advance()
                break
            if tok.kind == "eof":
                raise ParseError("unexpected end of file in region", (tok.line, tok.col))
            if self.at_label():
                name_tok = self.expect_ident()
                params: tuple[Param, ...] = ()
                if self.peek().text == "(":
                    self.advance()
                    params = self.parse_params(types_required=False)
                    self.expect(")")
                self.expect(":")
                blocks.append((name_tok.text, params, [], False))
            else:
                ensure_block()
                instr = self.parse_instruction()
                blocks[-1][2].append(instr)
            self.skip_newlines()
        if not blocks:
            blocks.append(("entry", (), [], True))
        return _finish_region(
            Region(tuple(Block(n, p, tuple(i), implicit=im) for n, p, i, im in blocks)),
            kind,
        )

    def at_label(self) -> bool:
        if self.peek().kind != "ident":
            return False
        if self.peek(1).text == ":":
            # `x: u8 = ...` is a typed define, not a label.
            return self.peek(2).text not in TYPE_NAMES
        if self.peek(1).text == "(":
            # Could be a call statement or a labeled block with parameters;
            # a label has `:` right after the closing parenthesis.
            k = 2
            depth = 1
            while depth > 0:
                tok = self.peek(k)
                if tok.kind in ("newline", "eof"):
                    return False
                if tok.text == "(":
                    depth += 1
                elif tok.text == ")":
                    depth -= 1
                k += 1
            return self.peek(k).text == ":"
        return False

    # -- instructions

    def parse_instruction(self) -> Instr:
        tok = self.peek()
        loc = (tok.line, tok.col)
        text = tok.text
        if text == "br":
            return self.parse_branch(loc)
        if text == "return":
            self.advance()
            values = self.parse_paren_atoms()
            self.expect_newline()
            return Return(values, loc=loc)
        if text == "yield":
            self.advance()
            values = self.parse_paren_atoms()
            self.expect_newline()
            return Yield(values, loc=loc)
        if text == "io":
            self.advance()
            self.expect("(")
            desc = Desc(self.expect_ident().text)
            values: list[Atom] = []
            while self.peek().text == ",":
                self.advance()
                values.append(self.parse_atom())
            self.expect(")")
            self.expect_newline()
            return IoWrite(desc, tuple(values), loc=loc)
        if text == "use":
            self.advance()
            args = self.parse_paren_atoms()
            self.expect_newline()
            return Use(args, loc=loc)
        if text == "snapshot":
            rhs = self.parse_rhs()
            self.expect_newline()
            return Define((), rhs, loc=loc)
        if text == "opaque":
            rhs = self.parse_opaque()
            self.expect_newline()
            return Define((), rhs, loc=loc)
        if text == "mem":
            self.advance()
            self.expect("[")
            addr = self.parse_atom()
            self.expect("]")
            self.expect("<-")
            value = self.parse_atom()
            self.expect_newline()
            return MemStore(addr, value, loc=loc)
        if tok.kind == "ident":
            return self.parse_define_or_call(loc)
        raise ParseError(f"unexpected token {text!r}", loc)

    def parse_branch(self, loc) -> Branch:
        self.expect("br")
        first = self.parse_atom()
        if self.peek().text != ",":
            # Unconditional: `br target(...)`.
            if not isinstance(first, Var):
                raise ParseError("branch target must be a label", loc)
            target = self.parse_target_rest(first.name)
            self.expect_newline()
            return Branch(None, target, loc=loc)
        self.advance()
        then = self.parse_target()
        els = None
        if self.peek().text == ",":
            self.advance()
            els = self.parse_target()
        self.expect_newline()
        if isinstance(first, Const):
            if first.type is Type.BOOL and first.value is True:
                if els is not None:
                    raise ParseError("constant-true branch takes one target", loc)
                return Branch(None, then, loc=loc)
            raise ParseError("branch condition must be a variable or `true`", loc)
        return Branch(first, then, els, loc=loc)

    def parse_target(self) -> BlockCall:
        name = self.expect_ident().text
        return self.parse_target_rest(name)

    def parse_target_rest(self, name: str) -> BlockCall:
        args: tuple[Atom, ...] = ()
        if self.peek().text == "(":
            self.advance()
            args = self.parse_atom_list(")")
            self.expect(")")
        return BlockCall(name, args)

    def parse_define_or_call(self, loc) -> Instr:
        # Result list, `name <- atom`, or a bare call statement.
        start = self.pos
        name = self.expect_ident().text
        nxt = self.peek().text
        if nxt == "<-":
            self.advance()
            value = self.parse_atom()
            self.expect_newline()
            return RefAssign(name, value, loc=loc)
        if nxt == "(" :
            # Bare call statement.
            self.advance()
            args = self.parse_atom_list(")")
            self.expect(")")
            self.expect_newline()
            return Define((), CallExpr(name, args), loc=loc)
        self.pos = start
        results: list[object] = []
        anns: list[Optional[Type]] = []
        while True:
            tok = self.peek()
            if tok.text == "...":
                self.advance()
                results.append("...")
                anns.append(None)
            else:
                results.append(self.expect_ident().text)
                if self.peek().text == ":":
                    self.advance()
                    anns.append(self.parse_type())
                else:
                    anns.append(None)
            if self.peek().text == ",":
                self.advance()
                continue
            break
        self.expect("=")
        rhs = self.parse_rhs()
        self.expect_newline()
        res = self.collapse_groups(results, loc)
        return Define(tuple(res), rhs, ann=tuple(anns[: len(res)]), loc=loc)

    def collapse_groups(self, items: list[object], loc) -> list[object]:
        out: list[object] = []
        i = 0
        while i < len(items):
            if items[i] == "...":
                raise ParseError("misplaced '...'", loc)
            if i + 2 < len(items) and items[i + 1] == "...":
                if not self.in_macro:
                    raise ParseError("'...' is only allowed in macro bodies", loc)
                first, last = items[i], items[i + 2]
                if not isinstance(first, str) or not isinstance(last, str):
                    raise ParseError("bad '...' group", loc)
                out.append(VarGroup(first, last))
                i += 3
            else:
                out.append(items[i])
                i += 1
        return out

    def parse_rhs(self) -> Expr:
        tok = self.peek()
        text = tok.text
        if text == "opaque":
            return self.parse_opaque()
        if text == "snapshot":
            self.advance()
            args = self.parse_paren_atoms()
            tags = self.parse_obs_tags()
            return SnapshotExpr(args, tags)
        if text == "io":
            self.advance()
            self.expect("(")
            desc = Desc(self.expect_ident().text)
            if self.peek().text == ",":
                raise ParseError("io used as an expression reads a single value", (tok.line, tok.col))
            self.expect(")")
            return IoRead(desc)
        if text == "mem":
            self.advance()
            self.expect("[")
            addr = self.parse_atom()
            self.expect("]")
            return LoadMem(addr)
        if text in DESCRIPTOR_CONSTANTS:
            self.advance()
            return DescriptorExpr(text)
        if tok.kind == "ident" and self.peek(1).text == "(":
            callee = self.advance().text
            self.advance()
            args = self.parse_atom_list(")")
            self.expect(")")
            return CallExpr(callee, args)
        if text in ("!", "~"):
            self.advance()
            return UnaryExpr(text, self.parse_atom())
        if text == "-" and self.peek(1).kind != "int":
            self.advance()
            return UnaryExpr("-", self.parse_atom())
        a = self.parse_atom()
        op = self.peek().text
        if op in BINARY_OPS:
            self.advance()
            b = self.parse_atom()
            return BinaryExpr(op, a, b)
        return AtomExpr(a)

    def parse_opaque(self) -> OpaqueExpr:
        self.expect("opaque")
        self.expect("{")
        region = self.parse_region(kind="opaque")
        return OpaqueExpr(region)

    def parse_obs_tags(self) -> tuple[ObsTag, ...]:
        if self.peek().text != "[":
            return ()
        self.advance()
        self.expect("obs")
        tags: list[ObsTag] = []
        while True:
            line = self.advance()
            if line.kind != "int":
                raise ParseError("expected tag line number", (line.line, line.col))
            self.expect(":")
            col = self.advance()
            if col.kind != "int":
                raise ParseError("expected tag column number", (col.line, col.col))
            self.expect("(")
            names: list[str] = []
            depth = 0
            buf = ""
            while True:
                tok = self.peek()
                if tok.kind in ("newline", "eof"):
                    raise ParseError("unterminated tag", (tok.line, tok.col))
                if tok.text == "(" :
                    depth += 1
                elif tok.text == ")":
                    if depth == 0:
                        self.advance()
                        break
                    depth -= 1
                elif tok.text == "," and depth == 0:
                    self.advance()
                    names.append(buf)
                    buf = ""
                    continue
                buf += self.advance().text
            if buf:
                names.append(buf)
            tags.append(ObsTag((line.value.value, col.value.value), tuple(names)))
            if self.peek().text == ",":
                self.advance()
                continue
            break
        self.expect("]")
        return tuple(tags)

    # -- atoms

    def parse_atom(self) -> Atom:
        tok = self.peek()
        if tok.text == "-" and self.peek(1).kind == "int":
            self.advance()
            lit = self.advance()
            return _negate_literal(lit.value, (lit.line, lit.col))
        if tok.kind == "int":
            self.advance()
            if tok.value.type is Type.I32 and tok.value.value > 2**31 - 1:
                raise ParseError(
                    f"literal {tok.value.value} out of range for i32", (tok.line, tok.col)
                )
            return tok.value
        if tok.text == "true":
            self.advance()
            return Const(True, Type.BOOL)
        if tok.text == "false":
            self.advance()
            return Const(False, Type.BOOL)
        if tok.text == "unit_value":
            self.advance()
            return Const(UNIT_VALUE, Type.UNIT)
        if tok.kind == "ident":
            self.advance()
            return Var(tok.text)
        raise ParseError(f"expected a value, found {tok.text!r}", (tok.line, tok.col))

    def parse_atom_list(self, closer: str) -> tuple[Atom, ...]:
        items: list[object] = []
        while self.peek().text != closer:
            if self.peek().text == "...":
                self.advance()
                items.append("...")
            else:
                items.append(self.parse_atom())
            if self.peek().text == ",":
                self.advance()
        # Collapse `v1, ..., vk` groups.
        out: list[Atom] = []
        i = 0
        while i < len(items):
            if items[i] == "...":
                tok = self.peek()
                if (
                    not self.in_macro
                    or i == 0
                    or i == len(items) - 1
                    or not isinstance(items[i - 1], Var)
                    or not isinstance(items[i + 1], Var)
                ):
                    raise ParseError("misplaced '...'", (tok.line, tok.col))
                out[-1] = VarGroup(items[i - 1].name, items[i + 1].name)
                i += 2
            else:
                out.append(items[i])
                i += 1
        return tuple(out)

    def parse_paren_atoms(self) -> tuple[Atom, ...]:
        self.expect("(")
        atoms = self.parse_atom_list(")")
        self.expect(")")
        return atoms


BINARY_OPS = frozenset(
    ["+", "-", "*", "/", "%", "&", "|", "^", "<<", ">>", "==", "!=", "<", "<=", ">", ">="]
)


def _finish_region(region: Region, kind: str) -> Region:
    """Synthesize fall-through terminators so every block ends in exactly
    one terminator, as the rest of the toolkit assumes."""
    blocks = list(region.blocks)
    out: list[Block] = []
    for i, block in enumerate(blocks):
        instrs = list(block.instrs)
        for j, instr in enumerate(instrs[:-1]):
            if isinstance(instr, TERMINATORS):
                raise ParseError(
                    "terminator in the middle of a block", _instr_loc(instr)
                )
        last = instrs[-1] if instrs else None
        next_label = blocks[i + 1].label if i + 1 < len(blocks) else None
        if last is None or not isinstance(last, TERMINATORS):
            loc = _instr_loc(last) if last is not None else (0, 0)
            if next_label is not None:
                instrs.append(Branch(None, BlockCall(next_label), loc=loc))
            elif kind == "opaque":
                instrs.append(Yield((), loc=loc))
            else:
                instrs.append(Return((), loc=loc))
        elif isinstance(last, Branch) and last.cond is not None and last.els is None:
            if next_label is None:
                raise ParseError(
                    "conditional branch falls through at end of region",
                    _instr_loc(last),
                )
            instrs[-1] = dc_replace(last, els=BlockCall(next_label))
        out.append(dc_replace(block, instrs=tuple(instrs)))
    return Region(tuple(out))


def _instr_loc(instr: Instr) -> tuple[int, int]:
    return getattr(instr, "loc", (0, 0))


# --------------------------------------------------------------------------
# Name resolution: descriptor operands and reference loads
# --------------------------------------------------------------------------


def map_region_instrs(region: Region, fn: Callable[[Instr], Instr]) -> Region:
    """Rebuild a region, applying `fn` to each instruction. Recurses into
    opaque regions (the callback sees inner instructions too)."""
    new_blocks = []
    for block in region.blocks:
        new_instrs = []
        for instr in block.instrs:
            if isinstance(instr, Define) and isinstance(instr.rhs, OpaqueExpr):
                with _unsealed():
                    inner = map_region_instrs(instr.rhs.region, fn)
                if inner != instr.rhs._body:
                    instr = dc_replace(instr, rhs=OpaqueExpr(inner))
            new_instrs.append(fn(instr))
        new_blocks.append(dc_replace(block, instrs=tuple(new_instrs)))
    return Region(tuple(new_blocks))


def _resolve_names(program: Program) -> Program:
    """Decide, per function/macro, which io descriptor operands are SSA
    variables and which bare names are reference loads."""

    def resolve_region(region: Region, formals: tuple[str, ...] = ()) -> Region:
        ssa = region_defined_names(region) | set(formals)
        refs = region_ref_names(region)

        def fix(instr: Instr) -> Instr:
            if isinstance(instr, Define):
                rhs = instr.rhs
                if isinstance(rhs, IoRead) and rhs.desc.name in ssa:
                    return dc_replace(instr, rhs=IoRead(Desc(rhs.desc.name, is_var=True)))
                if (
                    isinstance(rhs, AtomExpr)
                    and isinstance(rhs.atom, Var)
                    and rhs.atom.name in refs
                    and rhs.atom.name not in ssa
                ):
                    return dc_replace(instr, rhs=LoadRef(rhs.atom.name))
                return instr
            if isinstance(instr, IoWrite) and instr.desc.name in ssa:
                return dc_replace(instr, desc=Desc(instr.desc.name, is_var=True))
            return instr

        return map_region_instrs(region, fix)

    functions = tuple(
        dc_replace(f, region=resolve_region(f.region, tuple(p.name for p in f.params)))
        for f in program.functions
    )
    macros = tuple(
        dc_replace(
            m,
            region=resolve_region(
                m.region,
                m.formals.fixed + (m.formals.variadic or ()),
            ),
        )
        for m in program.macros
    )
    return Program(functions, macros)


def parse_program(text: str) -> Program:
    """Parse Mini IR source text into a Program."""
    return _Parser(tokenize(text)).parse_program()


# --------------------------------------------------------------------------
# Canonical printer
# --------------------------------------------------------------------------


def _const_text(c: Const) -> str:
    if c.type is Type.BOOL:
        return "true" if c.value else "false"
    if c.type is Type.UNIT:
        return "unit_value"
    if c.type is Type.U8:
        return f"{c.value}u8"
    if c.type is Type.I32:
        return f"{c.value}i32"
    return str(c.value)


def _atom_text(atom: Atom) -> str:
    if isinstance(atom, Var):
        return atom.name
    if isinstance(atom, Const):
        return _const_text(atom)
    return f"{atom.first}, ..., {atom.last}"


def _atom_list_text(atoms: Iterator[Atom]) -> str:
    return ", ".join(_atom_text(a) for a in atoms)


def _expr_text(expr: Expr, indent: int, lines: list[str]) -> str:
    """Render an expression; opaque regions append their body lines."""
    if isinstance(expr, AtomExpr):
        return _atom_text(expr.atom)
    if isinstance(expr, UnaryExpr):
        return f"{expr.op}{_atom_text(expr.a)}"
    if isinstance(expr, BinaryExpr):
        return f"{_atom_text(expr.a)} {expr.op} {_atom_text(expr.b)}"
    if isinstance(expr, LoadMem):
        return f"mem[{_atom_text(expr.addr)}]"
    if isinstance(expr, LoadRef):
        return expr.ref
    if isinstance(expr, IoRead):
        return f"io({expr.desc.name})"
    if isinstance(expr, SnapshotExpr):
        text = f"snapshot({_atom_list_text(iter(expr.args))})"
        if expr.tags:
            tag_text = ", ".join(
                f"{t.source_id[0]}:{t.source_id[1]}({','.join(t.names)})" for t in expr.tags
            )
            text += f" [obs {tag_text}]"
        return text
    if isinstance(expr, CallExpr):
        return f"{expr.callee}({_atom_list_text(iter(expr.args))})"
    if isinstance(expr, DescriptorExpr):
        return expr.name
    if isinstance(expr, OpaqueExpr):
        with _unsealed():
            body = expr.region
        head = "opaque {"
        _region_lines(body, indent, lines)
        return head  # caller appends the closing brace line
    raise TypeError(expr)


def _instr_lines(instr: Instr, indent: int, lines: list[str]):
    pad = " " * indent

    def emit(text: str):
        lines.append(pad + text)

    if isinstance(instr, Define):
        lhs_parts = []
        for r, a in zip(instr.results, instr.ann or (None,) * len(instr.results)):
            if isinstance(r, VarGroup):
                lhs_parts.append(f"{r.first}, ..., {r.last}")
            elif a is not None:
                lhs_parts.append(f"{r}: {a.value}")
            else:
                lhs_parts.append(r)
        prefix = ", ".join(lhs_parts) + " = " if lhs_parts else ""
        if isinstance(instr.rhs, OpaqueExpr):
            sub: list[str] = []
            _expr_text(instr.rhs, indent + 2, sub)
            emit(prefix + "opaque {")
            lines.extend(sub)
            emit("}")
        else:
            emit(prefix + _expr_text(instr.rhs, indent, lines))
    elif isinstance(instr, RefAssign):
        emit(f"{instr.ref} <- {_atom_text(instr.value)}")
    elif isinstance(instr, MemStore):
        emit(f"mem[{_atom_text(instr.addr)}] <- {_atom_text(instr.value)}")
    elif isinstance(instr, IoWrite):
        parts = [instr.desc.name] + [_atom_text(v) for v in instr.values]
        emit(f"io({', '.join(parts)})")
    elif isinstance(instr, Use):
        emit(f"use({_atom_list_text(iter(instr.args))})")
    elif isinstance(instr, Branch):
        def tgt(bc: BlockCall) -> str:
            if bc.args:
                return f"{bc.label}({_atom_list_text(iter(bc.args))})"
            return bc.label

        if instr.cond is None:
            emit(f"br {tgt(instr.then)}")
        else:
            emit(f"br {_atom_text(instr.cond)}, {tgt(instr.then)}, {tgt(instr.els)}")
    elif isinstance(instr, Return):
        emit(f"return({_atom_list_text(iter(instr.values))})")
    elif isinstance(instr, Yield):
        emit(f"yield({_atom_list_text(iter(instr.values))})")
    else:
        raise TypeError(instr)


def _region_lines(region: Region, indent: int, lines: list[str]):
    targeted = set()
    for block in region.blocks:
        for instr in block.instrs:
            if isinstance(instr, Branch):
                targeted.add(instr.then.label)
                if instr.els is not None:
                    targeted.add(instr.els.label)
    label_pad = " " * max(indent - 2, 0)
    for i, block in enumerate(region.blocks):
        show_label = not (i == 0 and block.implicit and block.label not in targeted and not block.params)
        if show_label:
            if block.params:
                params = ", ".join(
                    f"{p.name}: {p.type.value}" if p.type else p.name for p in block.params
                )
                lines.append(f"{label_pad}{block.label}({params}):")
            else:
                lines.append(f"{label_pad}{block.label}:")
        for instr in block.instrs:
            _instr_lines(instr, indent, lines)


def print_program(program: Program) -> str:
    """Canonical text form; parsing it back yields a structurally
    identical program (source locations aside)."""
    lines: list[str] = []
    for m in program.macros:
        formals = list(m.formals.fixed)
        if m.formals.variadic:
            formals.append(f"{m.formals.variadic[0]}, ..., {m.formals.variadic[1]}")
        lines.append(f"macro {m.name}({', '.join(formals)}) {{")
        _region_lines(m.region, 2, lines)
        lines.append("}")
        lines.append("")
    for f in program.functions:
        params = ", ".join(f"{p.name}: {p.type.value}" for p in f.params)
        head = f"function {f.name}({params})"
        if f.ret_types is not None:
            head += " -> (" + ", ".join(t.value for t in f.ret_types) + ")"
        lines.append(head + " {")
        _region_lines(f.region, 2, lines)
        lines.append("}")
        lines.append("")
    return "\n".join(lines).rstrip("\n") + "\n"


# --------------------------------------------------------------------------
# Macro expansion
# --------------------------------------------------------------------------

_FRESH_SUFFIX_RE = re.compile(r"__\d+$")


class _Expander:
    _MAX_EXPANSIONS = 10_000

    def __init__(self, program: Program):
        self.macros = program.macro_map()
        self.counter = 0
        self.expansions = 0

    def fresh(self, base: str) -> str:
        base = _FRESH_SUFFIX_RE.sub("", base)
        self.counter += 1
        return f"{base}__{self.counter}"

    def expand_region(self, region: Region) -> Region:
        # Spliced instructions are queued for re-processing, so macros that
        # call macros (including inside opaque regions) settle in one pass.
        blocks: list[Block] = []
        pending = list(region.blocks)
        while pending:
            block = pending.pop(0)
            instrs: list[Instr] = []
            block_label = block.label
            block_params = block.params
            implicit = block.implicit
            remaining = list(block.instrs)
            while remaining:
                instr = remaining.pop(0)
                if isinstance(instr, Define) and isinstance(instr.rhs, OpaqueExpr):
                    with _unsealed():
                        inner = self.expand_region(instr.rhs.region)
                    instrs.append(dc_replace(instr, rhs=OpaqueExpr(inner)))
                    continue
                if not (
                    isinstance(instr, Define)
                    and isinstance(instr.rhs, CallExpr)
                    and instr.rhs.callee in self.macros
                ):
                    instrs.append(instr)
                    continue
                macro = self.macros[instr.rhs.callee]
                self.expansions += 1
                if self.expansions > self._MAX_EXPANSIONS:
                    raise MacroError(
                        f"macro expansion did not terminate at {macro.name} "
                        "(recursive macro?)",
                        instr.loc,
                    )
                body = self.instantiate(macro, instr)
                if len(body.blocks) == 1 and isinstance(body.blocks[0].instrs[-1], Return):
                    # Single-block macro: splice inline, returns become copies.
                    spliced = list(body.blocks[0].instrs)
                    ret = spliced.pop()
                    assert isinstance(ret, Return)
                    if len(instr.results) not in (0, len(ret.values)):
                        raise MacroError(
                            f"macro {macro.name} returns {len(ret.values)} values, "
                            f"{len(instr.results)} expected",
                            instr.loc,
                        )
                    for res, val in zip(instr.results, ret.values):
                        spliced.append(Define((res,), AtomExpr(val), loc=instr.loc))
                    remaining[0:0] = spliced
                    continue
                # Multi-block macro: split the current block around the call.
                cont_label = self.fresh("bb_cont")
                cont_params = tuple(Param(r) for r in instr.results if isinstance(r, str))
                entry_label = body.blocks[0].label
                instrs.append(Branch(None, BlockCall(entry_label), loc=instr.loc))
                blocks.append(Block(block_label, block_params, tuple(instrs), implicit))
                rewritten = []
                for mb in body.blocks:
                    fixed: list[Instr] = []
                    for mi in mb.instrs:
                        if isinstance(mi, Return):
                            if len(instr.results) not in (0, len(mi.values)):
                                raise MacroError(
                                    f"macro {macro.name} returns {len(mi.values)} values, "
                                    f"{len(instr.results)} expected",
                                    instr.loc,
                                )
                            args = mi.values[: len(cont_params)]
                            fixed.append(Branch(None, BlockCall(cont_label, args), loc=instr.loc))
                        else:
                            fixed.append(mi)
                    rewritten.append(dc_replace(mb, instrs=tuple(fixed)))
                # Process the macro's blocks next, then resume this block
                # as the continuation taking the call results as params.
                pending[0:0] = rewritten + [
                    Block(cont_label, cont_params, tuple(remaining), False)
                ]
                remaining = []
                block_label = None
            if block_label is not None:
                blocks.append(Block(block_label, block_params, tuple(instrs), implicit))
        return Region(tuple(blocks))

    def instantiate(self, macro: Macro, call: Define) -> Region:
        """Rename macro locals, substitute formals, splice variadic groups.
        Every instruction gets the call site's source location."""
        args = call.rhs.args
        fixed = macro.formals.fixed
        if macro.formals.variadic is None:
            if len(args) != len(fixed):
                raise MacroError(
                    f"macro {macro.name} takes {len(fixed)} arguments, got {len(args)}",
                    call.loc,
                )
            var_actuals: tuple[Atom, ...] = ()
        else:
            if len(args) < len(fixed):
                raise MacroError(
                    f"macro {macro.name} takes at least {len(fixed)} arguments",
                    call.loc,
                )
            var_actuals = args[len(fixed):]
        subst: dict[str, Atom] = dict(zip(fixed, args))
        locals_ = region_defined_names(macro.region) | region_ref_names(macro.region)
        rename = {name: self.fresh(name) for name in sorted(locals_)}
        label_map = {b.label: self.fresh(b.label) for b in macro.region.blocks}
        groups: dict[tuple[str, str], tuple[Atom, ...]] = {}
        if macro.formals.variadic is not None:
            groups[macro.formals.variadic] = var_actuals
            if var_actuals:
                subst.setdefault(macro.formals.variadic[0], var_actuals[0])
                subst.setdefault(macro.formals.variadic[1], var_actuals[-1])

        def group_atoms(g: VarGroup) -> tuple[Atom, ...]:
            key = (g.first, g.last)
            if key not in groups:
                if macro.formals.variadic is None:
                    raise MacroError(
                        f"'{g.first}, ..., {g.last}' in non-variadic macro {macro.name}",
                        call.loc,
                    )
                fresh_names = tuple(
                    Var(self.fresh(g.first)) for _ in range(len(var_actuals))
                )
                groups[key] = fresh_names
                # The group's first and last names also stand alone: after
                # `w1, ..., wk = snapshot(...)`, `yield(w1)` means the
                # first fresh result.
                if fresh_names:
                    subst[g.first] = fresh_names[0]
                    subst[g.last] = fresh_names[-1]
            return groups[key]

        def sub_atom(atom: Atom) -> tuple[Atom, ...]:
            if isinstance(atom, VarGroup):
                return group_atoms(atom)
            if isinstance(atom, Var):
                if atom.name in subst:
                    return (subst[atom.name],)
                if atom.name in rename:
                    return (Var(rename[atom.name]),)
            return (atom,)

        def sub_atoms(atoms: tuple[Atom, ...]) -> tuple[Atom, ...]:
            out: list[Atom] = []
            for a in atoms:
                out.extend(sub_atom(a))
            return tuple(out)

        def sub_one(atom: Atom, loc) -> Atom:
            subbed = sub_atom(atom)
            if len(subbed) != 1:
                raise MacroError("a variadic group cannot be used as a single value", loc)
            return subbed[0]

        def sub_desc(desc: Desc) -> Desc:
            if desc.is_var and desc.name in rename:
                return Desc(rename[desc.name], is_var=True)
            return desc

        def sub_results(results: tuple[object, ...]) -> tuple[str, ...]:
            out: list[str] = []
            for r in results:
                if isinstance(r, VarGroup):
                    out.extend(v.name for v in group_atoms(r))
                elif r in rename:
                    out.append(rename[r])
                else:
                    out.append(r)
            return tuple(out)

        def sub_expr(expr: Expr, loc) -> Expr:
            if isinstance(expr, AtomExpr):
                return AtomExpr(sub_one(expr.atom, loc))
            if isinstance(expr, UnaryExpr):
                return UnaryExpr(expr.op, sub_one(expr.a, loc))
            if isinstance(expr, BinaryExpr):
                return BinaryExpr(expr.op, sub_one(expr.a, loc), sub_one(expr.b, loc))
            if isinstance(expr, LoadMem):
                return LoadMem(sub_one(expr.addr, loc))
            if isinstance(expr, LoadRef):
                return LoadRef(rename.get(expr.ref, expr.ref))
            if isinstance(expr, IoRead):
                return IoRead(sub_desc(expr.desc))
            if isinstance(expr, SnapshotExpr):
                return SnapshotExpr(sub_atoms(expr.args), expr.tags)
            if isinstance(expr, CallExpr):
                return CallExpr(expr.callee, sub_atoms(expr.args))
            if isinstance(expr, DescriptorExpr):
                return expr
            if isinstance(expr, OpaqueExpr):
                with _unsealed():
                    inner = sub_region(expr.region)
                return OpaqueExpr(inner)
            raise TypeError(expr)

        def sub_instr(instr: Instr, loc) -> Instr:
            if isinstance(instr, Define):
                results = sub_results(instr.results)
                ann = instr.ann
                if len(ann) != len(results):
                    ann = tuple(list(ann) + [None] * (len(results) - len(ann)))[: len(results)]
                return Define(results, sub_expr(instr.rhs, loc), ann=ann, loc=loc)
            if isinstance(instr, RefAssign):
                return RefAssign(rename.get(instr.ref, instr.ref), sub_one(instr.value, loc), loc=loc)
            if isinstance(instr, MemStore):
                return MemStore(sub_one(instr.addr, loc), sub_one(instr.value, loc), loc=loc)
            if isinstance(instr, IoWrite):
                return IoWrite(sub_desc(instr.desc), sub_atoms(instr.values), loc=loc)
            if isinstance(instr, Use):
                return Use(sub_atoms(instr.args), loc=loc)
            if isinstance(instr, Branch):
                def sub_target(bc: Optional[BlockCall]) -> Optional[BlockCall]:
                    if bc is None:
                        return None
                    return BlockCall(label_map.get(bc.label, bc.label), sub_atoms(bc.args))

                cond = sub_one(instr.cond, loc) if instr.cond is not None else None
                return Branch(cond, sub_target(instr.then), sub_target(instr.els), loc=loc)
            if isinstance(instr, Return):
                return Return(sub_atoms(instr.values), loc=loc)
            if isinstance(instr, Yield):
                return Yield(sub_atoms(instr.values), loc=loc)
            raise TypeError(instr)

        def sub_region(region: Region) -> Region:
            new_blocks = []
            for b in region.blocks:
                params = tuple(Param(rename.get(p.name, p.name), p.type) for p in b.params)
                new_blocks.append(
                    Block(
                        label_map.get(b.label, b.label),
                        params,
                        tuple(sub_instr(i, call.loc) for i in b.instrs),
                        b.implicit,
                    )
                )
            return Region(tuple(new_blocks))

        return sub_region(macro.region)


def expand_macros(program: Program) -> Program:
    """Expand all macro calls; the result contains no macros. Expanded
    instructions carry the invocation site's source location, and default
    observation tags are assigned afterwards."""
    expander = _Expander(program)
    functions = []
    for f in program.functions:
        region = expander.expand_region(f.region)
        functions.append(dc_replace(f, region=region))
    return finalize_observations(Program(tuple(functions), ()))


def finalize_observations(program: Program) -> Program:
    """Give every untagged snapshot a default observation tag: the source
    id is the instruction's (line, col) — after macro expansion, that is
    the pattern-invocation site — and the names are the printed argument
    atoms, with loads rewritten to `mem[addr]` / reference names."""

    def region_def_exprs(region: Region) -> dict[str, Expr]:
        defs: dict[str, Expr] = {}
        for block in region.blocks:
            for instr in block.instrs:
                if isinstance(instr, Define):
                    for r in instr.results:
                        if isinstance(r, str):
                            defs[r] = instr.rhs
        return defs

    def arg_name(atom: Atom, defs: dict[str, Expr]) -> str:
        if isinstance(atom, Const):
            return _const_text(atom)
        if isinstance(atom, VarGroup):
            return f"{atom.first}...{atom.last}"
        rhs = defs.get(atom.name)
        if isinstance(rhs, LoadMem):
            return f"mem[{_atom_text(rhs.addr)}]"
        if isinstance(rhs, LoadRef):
            return rhs.ref
        return atom.name

    def fix_function(f: Function) -> Function:
        def fix_region(region: Region) -> Region:
            defs = region_def_exprs(region)
            new_blocks = []
            for block in region.blocks:
                new_instrs = []
                for instr in block.instrs:
                    if isinstance(instr, Define):
                        rhs = instr.rhs
                        if isinstance(rhs, OpaqueExpr):
                            with _unsealed():
                                inner = fix_region(rhs.region)
                            if inner != rhs._body:
                                instr = dc_replace(instr, rhs=OpaqueExpr(inner))
                        elif isinstance(rhs, SnapshotExpr) and not rhs.tags:
                            tag = ObsTag(
                                instr.loc,
                                tuple(arg_name(a, defs) for a in rhs.args),
                            )
                            instr = dc_replace(instr, rhs=dc_replace(rhs, tags=(tag,)))
                    new_instrs.append(instr)
                new_blocks.append(dc_replace(block, instrs=tuple(new_instrs)))
            return Region(tuple(new_blocks))

        return dc_replace(f, region=fix_region(f.region))

    return Program(tuple(fix_function(f) for f in program.functions), program.macros)


def merge_obs_metadata(dst: Define, src: Define) -> Define:
    """Barrier-sanctioned metadata merge: when combining two identical
    snapshot-bearing opaque instructions, the surviving one carries the
    observation tags of both (positionally, per snapshot)."""
    if not isinstance(dst.rhs, OpaqueExpr) or not isinstance(src.rhs, OpaqueExpr):
        raise ValueError("metadata merge applies to opaque instructions")

    with _unsealed():
        src_tags = [
            i.rhs.tags
            for b in src.rhs.region.blocks
            for i in b.instrs
            if isinstance(i, Define) and isinstance(i.rhs, SnapshotExpr)
        ]
        src_nested = [
            i
            for b in src.rhs.region.blocks
            for i in b.instrs
            if isinstance(i, Define) and isinstance(i.rhs, OpaqueExpr)
        ]
        if src_nested:
            for inner in src_nested:
                src_tags.extend(
                    j.rhs.tags
                    for b in inner.rhs.region.blocks
                    for j in b.instrs
                    if isinstance(j, Define) and isinstance(j.rhs, SnapshotExpr)
                )
        slot = 0

        def fix(instr: Instr) -> Instr:
            nonlocal slot
            if isinstance(instr, Define) and isinstance(instr.rhs, SnapshotExpr):
                merged = instr.rhs.tags + (src_tags[slot] if slot < len(src_tags) else ())
                slot += 1
                return dc_replace(instr, rhs=dc_replace(instr.rhs, tags=merged))
            return instr

        new_region = map_region_instrs(dst.rhs.region, fix)
    return dc_replace(dst, rhs=OpaqueExpr(new_region))


def substitute_free_uses(expr: OpaqueExpr, mapping: dict[str, Atom]) -> OpaqueExpr:
    """Barrier-sanctioned rewrite of an opaque region's free variable uses
    (copy propagation and constant propagation use this; bound names are
    untouched, so the region's behavior is preserved value-for-value)."""
    with _unsealed():
        bound = region_defined_names(expr.region)
        live = {k: v for k, v in mapping.items() if k not in bound}
        if not live:
            return expr

        def sub(atom: Atom) -> Atom:
            if isinstance(atom, Var) and atom.name in live:
                return live[atom.name]
            return atom

        def fix(instr: Instr) -> Instr:
            return substitute_atoms(instr, sub)

        return OpaqueExpr(map_region_instrs(expr.region, fix))


def substitute_atoms(instr: Instr, sub: Callable[[Atom], Atom]) -> Instr:
    """Rebuild one instruction with operand atoms rewritten. Does not
    descend into opaque regions (use substitute_free_uses for that)."""
    if isinstance(instr, Define):
        rhs = instr.rhs
        if isinstance(rhs, AtomExpr):
            rhs = AtomExpr(sub(rhs.atom))
        elif isinstance(rhs, UnaryExpr):
            rhs = UnaryExpr(rhs.op, sub(rhs.a))
        elif isinstance(rhs, BinaryExpr):
            rhs = BinaryExpr(rhs.op, sub(rhs.a), sub(rhs.b))
        elif isinstance(rhs, LoadMem):
            rhs = LoadMem(sub(rhs.addr))
        elif isinstance(rhs, SnapshotExpr):
            rhs = dc_replace(rhs, args=tuple(sub(a) for a in rhs.args))
        elif isinstance(rhs, CallExpr):
            rhs = CallExpr(rhs.callee, tuple(sub(a) for a in rhs.args))
        elif isinstance(rhs, OpaqueExpr):
            mapping = {}
            for name in rhs.summary.uses:
                new = sub(Var(name))
                if not (isinstance(new, Var) and new.name == name):
                    mapping[name] = new
            rhs = substitute_free_uses(rhs, mapping) if mapping else rhs
        return dc_replace(instr, rhs=rhs)
    if isinstance(instr, RefAssign):
        return dc_replace(instr, value=sub(instr.value))
    if isinstance(instr, MemStore):
        return dc_replace(instr, addr=sub(instr.addr), value=sub(instr.value))
    if isinstance(instr, IoWrite):
        return dc_replace(instr, values=tuple(sub(v) for v in instr.values))
    if isinstance(instr, Use):
        return dc_replace(instr, args=tuple(sub(a) for a in instr.args))
    if isinstance(instr, Branch):
        def sub_target(bc: Optional[BlockCall]) -> Optional[BlockCall]:
            if bc is None:
                return None
            return BlockCall(bc.label, tuple(sub(a) for a in bc.args))

        cond = sub(instr.cond) if instr.cond is not None else None
        return dc_replace(instr, cond=cond, then=sub_target(instr.then), els=sub_target(instr.els))
    if isinstance(instr, Return):
        return dc_replace(instr, values=tuple(sub(v) for v in instr.values))
    if isinstance(instr, Yield):
        return dc_replace(instr, values=tuple(sub(v) for v in instr.values))
    return instr


def alpha_rename_opaque(expr: OpaqueExpr, fresh: Callable[[str], str]) -> OpaqueExpr:
    """Barrier-sanctioned alpha renaming of an opaque region's bound names
    (definitions, block parameters, labels). Free uses, reference names,
    and observation metadata stay as they are, so behavior and identity
    are preserved. Passes that duplicate instructions run copies through
    this to keep the whole function in single-assignment form."""
    with _unsealed():
        region = expr.region
        renames = {n: fresh(n) for n in region_defined_names(region)}
        label_map = {b.label: fresh(b.label) for b in region.blocks}

    def sub(atom: Atom) -> Atom:
        if isinstance(atom, Var) and atom.name in renames:
            return Var(renames[atom.name])
        return atom

    free_map = {k: Var(v) for k, v in renames.items()}
    new_blocks = []
    for block in region.blocks:
        params = tuple(
            dc_replace(p, name=renames.get(p.name, p.name)) for p in block.params
        )
        instrs: list[Instr] = []
        for instr in block.instrs:
            if isinstance(instr, Define):
                results = tuple(
                    renames.get(r, r) if isinstance(r, str) else r for r in instr.results
                )
                if isinstance(instr.rhs, OpaqueExpr):
                    # Uses of outer bound names are rewritten as free uses,
                    # then the nested region gets fresh names of its own.
                    inner = substitute_free_uses(instr.rhs, free_map)
                    inner = alpha_rename_opaque(inner, fresh)
                    instr = dc_replace(instr, results=results, rhs=inner)
                else:
                    instr = dc_replace(substitute_atoms(instr, sub), results=results)
            elif isinstance(instr, Branch):
                instr = substitute_atoms(instr, sub)
                then = dc_replace(instr.then, label=label_map[instr.then.label])
                els = (
                    dc_replace(instr.els, label=label_map[instr.els.label])
                    if instr.els is not None
                    else None
                )
                instr = dc_replace(instr, then=then, els=els)
            else:
                instr = substitute_atoms(instr, sub)
            instrs.append(instr)
        new_blocks.append(
            Block(label_map[block.label], params, tuple(instrs), implicit=block.implicit)
        )
    return OpaqueExpr(Region(tuple(new_blocks)))


# --------------------------------------------------------------------------
# CFG helpers
# --------------------------------------------------------------------------


def block_successors(region: Region) -> dict[str, list[str]]:
    succ: dict[str, list[str]] = {}
    for block in region.blocks:
        targets: list[str] = []
        last = block.instrs[-1] if block.instrs else None
        if isinstance(last, Branch):
            targets.append(last.then.label)
            if last.els is not None and last.els.label != last.then.label:
                targets.append(last.els.label)
        succ[block.label] = targets
    return succ


def _dominators_from(succ: dict[str, list[str]], entry: str) -> dict[str, set[str]]:
    """Classic iterative dominator sets (small CFGs, set intersection)."""
    labels = list(succ)
    preds: dict[str, list[str]] = {l: [] for l in labels}
    for l, ts in succ.items():
        for t in ts:
            if t in preds:
                preds[t].append(l)
    dom: dict[str, set[str]] = {l: set(labels) for l in labels}
    dom[entry] = {entry}
    changed = True
    while changed:
        changed = False
        for l in labels:
            if l == entry:
                continue
            ps = preds[l]
            if not ps:
                new = {l}
            else:
                new = set(labels)
                for p in ps:
                    new &= dom[p]
                new.add(l)
            if new != dom[l]:
                dom[l] = new
                changed = True
    return dom


def compute_dominators(region: Region) -> dict[str, set[str]]:
    """Map each block label to the set of labels dominating it."""
    return _dominators_from(block_successors(region), region.entry.label)


def compute_postdominators(region: Region) -> dict[str, set[str]]:
    """Map each block label to the set of labels post-dominating it,
    against a virtual exit joining all return/yield blocks."""
    succ = block_successors(region)
    exits = [b.label for b in region.blocks if isinstance(b.instrs[-1], (Return, Yield))]
    # Post-dominators are dominators of the reversed CFG rooted at the exit.
    rsucc: dict[str, list[str]] = {l: [] for l in list(succ) + ["__exit__"]}
    for l, ts in succ.items():
        for t in ts:
            rsucc[t].append(l)
    for e in exits:
        rsucc["__exit__"].append(e)
    pdom = _dominators_from(rsucc, "__exit__")
    for l in pdom:
        pdom[l].discard("__exit__")
    pdom.pop("__exit__", None)
    return pdom


# --------------------------------------------------------------------------
# Validation and type inference
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class Diagnostic:
    loc: tuple[int, int]
    message: str
    severity: str = "error"  # error | lint

    def __str__(self):
        return f"{self.loc[0]}:{self.loc[1]}: {self.severity}: {self.message}"


@dataclass
class TypeInfo:
    """Types inferred by validate(): per-function variable and reference
    types plus function return types."""

    var_types: dict[tuple[str, str], Type]
    ref_types: dict[tuple[str, str], Type]
    ret_types: dict[str, tuple[Type, ...]]

    def var(self, func: str, name: str) -> Optional[Type]:
        return self.var_types.get((func, name))


_ARITH_OPS = frozenset(["+", "-", "*", "/", "%"])
_BIT_OPS = frozenset(["&", "|", "^"])
_SHIFT_OPS = frozenset(["<<", ">>"])
_CMP_OPS = frozenset(["==", "!="])
_ORD_OPS = frozenset(["<", "<=", ">", ">="])


class _Validator:
    def __init__(self, program: Program):
        self.program = program
        self.diags: list[Diagnostic] = []
        self.info = TypeInfo({}, {}, {})
        self.fn_map = {f.name: f for f in program.functions}
        self.macro_names = {m.name for m in program.macros}
        self._inferring: set[str] = set()

    def error(self, loc, message):
        self.diags.append(Diagnostic(loc, message))

    def lint(self, loc, message):
        self.diags.append(Diagnostic(loc, message, "lint"))

    # -- function return types (call graph order, recursion detected)

    def fn_ret_types(self, name: str, loc) -> Optional[tuple[Type, ...]]:
        fn = self.fn_map.get(name)
        if fn is None:
            self.error(loc, f"call to unknown function {name!r}")
            return None
        if fn.ret_types is not None:
            return fn.ret_types
        if name in self.info.ret_types:
            return self.info.ret_types[name]
        if name in self._inferring:
            self.error(loc, f"recursive function {name!r} needs a return type annotation")
            return None
        self._inferring.add(name)
        try:
            self.check_function(fn)
        finally:
            self._inferring.discard(name)
        return self.info.ret_types.get(name)

    def validate(self) -> tuple[list[Diagnostic], TypeInfo]:
        names = [f.name for f in self.program.functions]
        for name in set(names):
            if names.count(name) > 1:
                self.error((0, 0), f"duplicate function {name!r}")
        if self.program.macros:
            for m in self.program.macros:
                self.lint(m.loc, f"unexpanded macro {m.name!r} (run expand_macros first)")
        if "main" not in self.fn_map:
            self.error((0, 0), "program has no function 'main'")
        else:
            main = self.fn_map["main"]
            if main.params:
                self.error(main.loc, "'main' takes no parameters")
        checked: set[str] = set()
        for f in self.program.functions:
            if f.name not in self.info.ret_types and f.name not in checked:
                checked.add(f.name)
                self.check_function(f)
        return self.diags, self.info

    # -- per-function checks

    def check_function(self, fn: Function):
        if fn.name in self.info.ret_types:
            return
        region = fn.region

        # Unique names and reference/SSA separation.
        defined: dict[str, tuple[int, int]] = {}
        ssa_names = region_defined_names(region)
        ref_names = region_ref_names(region)
        for p in fn.params:
            self._register(defined, p.name, fn.loc)
            ssa_names.add(p.name)
        for name in sorted(ssa_names & ref_names):
            self.error(fn.loc, f"{name!r} is used both as a variable and a reference in {fn.name}")

        var_ty: dict[str, Optional[Type]] = {}
        for p in fn.params:
            var_ty[p.name] = p.type
        ref_ty: dict[str, Optional[Type]] = {}
        returns: list[tuple[tuple[Type, ...], tuple[int, int]]] = []

        labels = [b.label for b in region.blocks]
        for label in set(labels):
            if labels.count(label) > 1:
                self.error(fn.loc, f"duplicate block label {label!r} in {fn.name}")
        block_map = {b.label: b for b in region.blocks}

        # Collect definitions (uniqueness) over the whole region tree.
        def collect_defs(r: Region, loc_of=lambda i: _instr_loc(i)):
            for b in r.blocks:
                for p in b.params:
                    self._register(defined, p.name, (0, 0))
                for instr in b.instrs:
                    if isinstance(instr, Define):
                        for res in instr.results:
                            if isinstance(res, str):
                                self._register(defined, res, instr.loc)
                            else:
                                self.error(instr.loc, "unexpanded '...' group")
                        if isinstance(instr.rhs, OpaqueExpr):
                            with _unsealed():
                                collect_defs(instr.rhs.region)

        collect_defs(region)

        # Dominance-aware use checking + type inference, iterated because
        # block parameter types flow around loops.
        dom = compute_dominators(region)
        order = list(region.blocks)

        # def site of every name: (block label, position) or 'param'
        def_site: dict[str, tuple[str, int]] = {}
        for p in fn.params:
            def_site[p.name] = ("", -1)
        for b in region.blocks:
            for p in b.params:
                def_site[p.name] = (b.label, -1)
            for pos, instr in enumerate(b.instrs):
                if isinstance(instr, Define):
                    for res in instr.results:
                        if isinstance(res, str):
                            def_site.setdefault(res, (b.label, pos))

        def dominates(site: tuple[str, int], label: str, pos: int) -> bool:
            dblock, dpos = site
            if dblock == "":
                return True
            if dblock == label:
                return dpos < pos
            return dblock in dom.get(label, set()) and dblock != label

        def check_use(name: str, label: str, pos: int, loc, ambient: bool):
            if name in ref_names:
                self.error(loc, f"reference {name!r} used as an operand")
                return
            if ambient:
                # Use inside a nested region: membership in the function's
                # definition tree is enough (dominance is checked where the
                # name is region-local).
                if name not in defined:
                    self.error(loc, f"use of undefined variable {name!r}")
                return
            if name not in def_site:
                self.error(loc, f"use of undefined variable {name!r}")
                return
            if not dominates(def_site[name], label, pos):
                self.error(loc, f"use of {name!r} is not dominated by its definition")

        # Types: fixpoint over the function (branch args feed block params).
        for _ in range(len(region.blocks) + 2):
            changed = False

            def note_var(name: str, ty: Optional[Type], loc) -> None:
                nonlocal changed
                if ty is None:
                    return
                old = var_ty.get(name)
                if old is None:
                    var_ty[name] = ty
                    changed = True
                elif old is not ty:
                    self.error(loc, f"{name!r} has conflicting types {old.value} and {ty.value}")

            def atom_type(atom: Atom, loc) -> Optional[Type]:
                if isinstance(atom, Const):
                    return atom.type
                if isinstance(atom, VarGroup):
                    self.error(loc, "unexpanded '...' group")
                    return None
                return var_ty.get(atom.name)

            def expr_types(expr: Expr, instr: Define, fn_name: str) -> Optional[list[Optional[Type]]]:
                loc = instr.loc
                if isinstance(expr, AtomExpr):
                    return [atom_type(expr.atom, loc)]
                if isinstance(expr, UnaryExpr):
                    ty = atom_type(expr.a, loc)
                    if ty is None:
                        return [None]
                    if expr.op == "!":
                        if ty is not Type.BOOL:
                            self.error(loc, "'!' applies to bool values")
                        return [Type.BOOL]
                    if ty not in INT_TYPES:
                        self.error(loc, f"'{expr.op}' applies to integer values")
                        return [None]
                    return [ty]
                if isinstance(expr, BinaryExpr):
                    ta = atom_type(expr.a, loc)
                    tb = atom_type(expr.b, loc)
                    op = expr.op
                    if ta is None or tb is None:
                        if op in _CMP_OPS or op in _ORD_OPS:
                            return [Type.BOOL]
                        return [ta or tb] if op in _SHIFT_OPS else [ta if ta is not None else tb]
                    if op in _SHIFT_OPS:
                        if ta not in INT_TYPES or tb not in INT_TYPES:
                            self.error(loc, "shift operands must be integers")
                        return [ta]
                    if ta is not tb:
                        self.error(loc, f"operand types {ta.value} and {tb.value} do not agree")
                        return [None]
                    if op in _ARITH_OPS:
                        if ta not in INT_TYPES:
                            self.error(loc, f"'{op}' applies to integer values")
                        return [ta]
                    if op in _BIT_OPS:
                        if ta not in INT_TYPES and ta is not Type.BOOL:
                            self.error(loc, f"'{op}' applies to integer or bool values")
                        return [ta]
                    if op in _CMP_OPS:
                        return [Type.BOOL]
                    if op in _ORD_OPS:
                        if ta not in INT_TYPES:
                            self.error(loc, "ordered comparison applies to integer values")
                        return [Type.BOOL]
                    raise AssertionError(op)
                if isinstance(expr, LoadMem):
                    ty = atom_type(expr.addr, loc)
                    if ty is not None and ty is not Type.U32:
                        self.error(loc, "memory addresses are u32 values")
                    return [Type.U32]
                if isinstance(expr, LoadRef):
                    return [ref_ty.get(expr.ref)]
                if isinstance(expr, IoRead):
                    ann = instr.ann[0] if instr.ann else None
                    return [ann or Type.U32]
                if isinstance(expr, SnapshotExpr):
                    return [atom_type(a, loc) for a in expr.args]
                if isinstance(expr, CallExpr):
                    callee = self.fn_map.get(expr.callee)
                    if callee is None:
                        if expr.callee not in self.macro_names:
                            self.error(loc, f"call to unknown function {expr.callee!r}")
                        return None
                    if len(expr.args) != len(callee.params):
                        self.error(
                            loc,
                            f"{expr.callee} takes {len(callee.params)} arguments, "
                            f"got {len(expr.args)}",
                        )
                    for a, p in zip(expr.args, callee.params):
                        ta = atom_type(a, loc)
                        if ta is not None and p.type is not None and ta is not p.type:
                            self.error(
                                loc,
                                f"argument {p.name!r} of {expr.callee} expects "
                                f"{p.type.value}, got {ta.value}",
                            )
                    rts = self.fn_ret_types(expr.callee, loc)
                    return list(rts) if rts is not None else None
                if isinstance(expr, DescriptorExpr):
                    return [Type.DESC]
                if isinstance(expr, OpaqueExpr):
                    with _unsealed():
                        ytypes: Optional[list[Optional[Type]]] = None
                        for b in expr.region.blocks:
                            last = b.instrs[-1]
                            if isinstance(last, Yield):
                                tys = [atom_type(v, loc) for v in last.values]
                                if ytypes is None:
                                    ytypes = tys
                                elif len(tys) != len(ytypes):
                                    self.error(loc, "yields with different arities in one region")
                    return ytypes if ytypes is not None else []
                raise TypeError(expr)

            def visit_region(r: Region, opaque: bool, ambient: bool):
                nonlocal changed
                if r.blocks[0].params:
                    self.error(
                        _instr_loc(r.blocks[0].instrs[0]) if r.blocks[0].instrs else (0, 0),
                        "entry block must not take parameters",
                    )
                local_dom = dom if r is region else compute_dominators(r)
                local_sites: dict[str, tuple[str, int]] = {}
                if r is not region:
                    for b in r.blocks:
                        for p in b.params:
                            local_sites[p.name] = (b.label, -1)
                        for pos, instr in enumerate(b.instrs):
                            if isinstance(instr, Define):
                                for res in instr.results:
                                    if isinstance(res, str):
                                        local_sites.setdefault(res, (b.label, pos))
                local_map = {b.label: b for b in r.blocks}

                def check_use_local(name, label, pos, loc):
                    if name in local_sites:
                        dblock, dpos = local_sites[name]
                        ok = (
                            dblock == label and dpos < pos
                            or dblock != label
                            and dblock in local_dom.get(label, set())
                        )
                        if not ok:
                            self.error(loc, f"use of {name!r} is not dominated by its definition")
                    else:
                        check_use(name, label, pos, loc, ambient=r is not region)

                for b in r.blocks:
                    for pos, instr in enumerate(b.instrs):
                        loc = _instr_loc(instr)
                        for atom in instr_operand_atoms(instr):
                            for name in _atom_vars(atom):
                                if r is region:
                                    check_use(name, b.label, pos, loc, ambient=False)
                                else:
                                    check_use_local(name, b.label, pos, loc)
                        if isinstance(instr, Define):
                            if isinstance(instr.rhs, SnapshotExpr) and not opaque:
                                self.lint(loc, "snapshot outside an opaque region")
                            if (
                                isinstance(instr.rhs, CallExpr)
                                and opaque
                                and instr.rhs.callee in self.fn_map
                            ):
                                self.error(loc, "function call inside an opaque region")
                            if isinstance(instr.rhs, OpaqueExpr):
                                with _unsealed():
                                    visit_region(instr.rhs.region, True, True)
                            tys = expr_types(instr.rhs, instr, fn.name)
                            if tys is not None:
                                n = len(instr.results)
                                if isinstance(instr.rhs, (SnapshotExpr, CallExpr, OpaqueExpr)):
                                    if n not in (0, len(tys)):
                                        self.error(
                                            loc,
                                            f"expected 0 or {len(tys)} results, got {n}",
                                        )
                                elif n != len(tys):
                                    self.error(loc, f"expected {len(tys)} results, got {n}")
                                for res, ty, ann in zip(
                                    instr.results, tys, instr.ann or (None,) * n
                                ):
                                    if isinstance(res, str):
                                        if ann is not None and ty is not None and ann is not ty:
                                            self.error(
                                                loc,
                                                f"{res!r} annotated {ann.value} but has type {ty.value}",
                                            )
                                        note_var(res, ann or ty, loc)
                        elif isinstance(instr, Use):
                            if not opaque:
                                self.lint(loc, "use() outside an opaque region")
                        elif isinstance(instr, RefAssign):
                            ty = atom_type(instr.value, loc)
                            if ty is not None:
                                old = ref_ty.get(instr.ref)
                                if old is None:
                                    ref_ty[instr.ref] = ty
                                    changed = True
                                elif old is not ty:
                                    self.error(
                                        loc,
                                        f"reference {instr.ref!r} assigned both "
                                        f"{old.value} and {ty.value}",
                                    )
                        elif isinstance(instr, MemStore):
                            at = atom_type(instr.addr, loc)
                            vt = atom_type(instr.value, loc)
                            if at is not None and at is not Type.U32:
                                self.error(loc, "memory addresses are u32 values")
                            if vt is not None and vt is not Type.U32:
                                self.error(loc, "memory cells hold u32 values")
                        elif isinstance(instr, Branch):
                            if instr.cond is not None:
                                ct = atom_type(instr.cond, loc)
                                if ct is not None and ct is not Type.BOOL and ct not in INT_TYPES:
                                    self.error(loc, "branch condition must be bool or integer")
                            for bc in (instr.then, instr.els):
                                if bc is None:
                                    continue
                                target = local_map.get(bc.label)
                                if target is None:
                                    self.error(loc, f"branch to unknown block {bc.label!r}")
                                    continue
                                if len(bc.args) != len(target.params):
                                    self.error(
                                        loc,
                                        f"block {bc.label!r} takes {len(target.params)} "
                                        f"arguments, got {len(bc.args)}",
                                    )
                                for a, p in zip(bc.args, target.params):
                                    note_var(p.name, p.type or atom_type(a, loc), loc)
                        elif isinstance(instr, Return):
                            if opaque:
                                self.error(loc, "return inside an opaque region")
                            elif r is region:
                                tys = tuple(atom_type(v, loc) for v in instr.values)
                                if all(t is not None for t in tys):
                                    returns.append((tys, loc))
                        elif isinstance(instr, Yield):
                            if not opaque:
                                self.error(loc, "yield outside an opaque region")

            visit_region(region, False, False)
            if not changed:
                break

        # Settle return types.
        rts: Optional[tuple[Type, ...]] = fn.ret_types
        for tys, loc in returns:
            if rts is None:
                rts = tys
            elif tuple(rts) != tys:
                self.error(
                    loc,
                    f"return types {[t.value for t in tys]} disagree with "
                    f"{[t.value for t in rts]}",
                )
        self.info.ret_types[fn.name] = rts if rts is not None else ()
        if fn.name == "main" and rts:
            self.error(fn.loc, "'main' must not return values")
        for name, ty in var_ty.items():
            if ty is not None:
                self.info.var_types[(fn.name, name)] = ty
        for name, ty in ref_ty.items():
            if ty is not None:
                self.info.ref_types[(fn.name, name)] = ty

    def _register(self, defined: dict, name: str, loc):
        if name in defined:
            self.error(loc, f"{name!r} defined more than once (single assignment)")
        defined[name] = loc


def validate_ssa(program: Program) -> list[Diagnostic]:
    """Full structural + SSA + type validation. Returns diagnostics
    (errors and lints); an empty list means the program is well formed."""
    diags, _ = _Validator(program).validate()
    return diags


def typecheck(program: Program) -> TypeInfo:
    """Run validation and return inferred types, raising on errors."""
    v = _Validator(program)
    diags, info = v.validate()
    errors = [d for d in diags if d.severity == "error"]
    if errors:
        raise IRError("; ".join(str(d) for d in errors[:5]))
    return info
