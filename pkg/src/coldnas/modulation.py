"""Modulation functions: operation chains, the 4-op canonical form, and the supernet mix."""

from __future__ import annotations

import re
from collections.abc import Mapping, Sequence
from dataclasses import dataclass

import numpy as np

from .numerics import BinaryOpKind, Tensor, elementwise, mix

__all__ = [
    "BinaryOpKind",
    "CANONICAL_ORDER",
    "ModulationExpr",
    "CanonicalForm",
    "ModulationAssignment",
    "SupernetAlphas",
    "ExprSyntaxError",
    "eval_expr",
    "eval_canonical",
    "supernet_layer",
    "space_size",
    "select_topk",
    "parse_expr",
]

# application order of the canonical form: min(max(h, p1), p2) * p3 + p4
CANONICAL_ORDER = (BinaryOpKind.MAX, BinaryOpKind.MIN, BinaryOpKind.MUL, BinaryOpKind.ADD)
MULTIPLICATIVE = frozenset({BinaryOpKind.MUL, BinaryOpKind.DIV})
_COMMUTATIVE = frozenset({BinaryOpKind.MAX, BinaryOpKind.MIN, BinaryOpKind.MUL, BinaryOpKind.ADD})


@dataclass(frozen=True)
class ModulationExpr:
    """``h op1 p1 op2 p2 ...`` folded left to right; ``terms`` holds (op, slot) pairs."""

    terms: tuple[tuple[BinaryOpKind, int], ...] = ()

    def __post_init__(self):
        slots = sorted(s for _, s in self.terms)
        if slots != list(range(1, len(self.terms) + 1)):
            raise ValueError(f"slots must be distinct and contiguous from 1, got {slots}")

    @classmethod
    def of(cls, *ops: BinaryOpKind) -> "ModulationExpr":
        return cls(tuple((op, k + 1) for k, op in enumerate(ops)))

    @property
    def ops(self) -> tuple[BinaryOpKind, ...]:
        return tuple(op for op, _ in self.terms)

    def __len__(self) -> int:
        return len(self.terms)

    def nonnegative_slots(self) -> frozenset[int]:
        return frozenset(s for op, s in self.terms if op in MULTIPLICATIVE)

    def to_string(self, var: str = "h", slot_name=lambda k: f"p{k}") -> str:
        text, prec = var, 3
        for op, slot in self.terms:
            name = slot_name(slot)
            if op in (BinaryOpKind.MAX, BinaryOpKind.MIN):
                text, prec = f"{op.value}({text}, {name})", 3
            elif op in (BinaryOpKind.MUL, BinaryOpKind.DIV):
                if prec < 2:
                    text = f"({text})"
                text, prec = f"{text} {op.symbol} {name}", 2
            else:
                text, prec = f"{text} {op.symbol} {name}", 1
        return text

    def __str__(self) -> str:
        return self.to_string()


@dataclass(frozen=True)
class CanonicalForm:
    """Presence flags for ``min(max(h, p1), p2) * p3 + p4``; slot k binds canonical position k."""

    use_max: bool = False
    use_min: bool = False
    use_mul: bool = False
    use_add: bool = False

    @classmethod
    def from_ops(cls, ops) -> "CanonicalForm":
        ops = set(ops)
        unknown = ops - set(CANONICAL_ORDER)
        if unknown:
            raise ValueError(f"canonical form only holds max/min/mul/add, got {unknown}")
        return cls(*(op in ops for op in CANONICAL_ORDER))

    @classmethod
    def full(cls) -> "CanonicalForm":
        return cls(True, True, True, True)

    @classmethod
    def film(cls) -> "CanonicalForm":
        return cls(use_mul=True, use_add=True)

    @property
    def flags(self) -> tuple[bool, bool, bool, bool]:
        return (self.use_max, self.use_min, self.use_mul, self.use_add)

    @property
    def ops(self) -> tuple[BinaryOpKind, ...]:
        return tuple(op for op, on in zip(CANONICAL_ORDER, self.flags) if on)

    @property
    def positions(self) -> tuple[int, ...]:
        return tuple(k + 1 for k, on in enumerate(self.flags) if on)

    def __len__(self) -> int:
        return sum(self.flags)

    def as_expr(self) -> ModulationExpr:
        """The same chain, renumbered 1..n in application order."""
        return ModulationExpr.of(*self.ops)

    def notation(self, layer: int) -> str:
        """Render as in the searched-structure tables, e.g. ``min(max(h^0, phi^{0,1}), phi^{0,2}) + phi^{0,3}``."""
        names = iter(f"phi^{{{layer},{k}}}" for k in range(1, 5))
        return self.as_expr().to_string(var=f"h^{layer}", slot_name=lambda _k: next(names))


@dataclass(frozen=True)
class ModulationAssignment:
    layers: tuple[CanonicalForm, ...]

    def __post_init__(self):
        if sum(len(cf) for cf in self.layers) > 4 * len(self.layers):
            raise ValueError("more than 4 operations per layer")

    @classmethod
    def empty(cls, n_layers: int) -> "ModulationAssignment":
        return cls(tuple(CanonicalForm() for _ in range(n_layers)))

    @classmethod
    def film(cls, n_layers: int) -> "ModulationAssignment":
        return cls(tuple(CanonicalForm.film() for _ in range(n_layers)))

    @classmethod
    def full(cls, n_layers: int) -> "ModulationAssignment":
        return cls(tuple(CanonicalForm.full() for _ in range(n_layers)))

    @classmethod
    def from_mask(cls, mask) -> "ModulationAssignment":
        mask = np.asarray(mask, dtype=bool)
        return cls(tuple(CanonicalForm(*map(bool, row)) for row in mask))

    def mask(self) -> np.ndarray:
        return np.array([cf.flags for cf in self.layers], dtype=bool).reshape(len(self.layers), 4)

    @property
    def n_ops(self) -> int:
        return sum(len(cf) for cf in self.layers)

    def __len__(self) -> int:
        return len(self.layers)

    def notation(self) -> list[str]:
        return [cf.notation(l) for l, cf in enumerate(self.layers)]

    def __str__(self) -> str:
        return " | ".join(self.notation())

    def to_dict(self) -> dict:
        return {"layers": [[op.value for op in cf.ops] for cf in self.layers], "notation": self.notation()}

    @classmethod
    def from_dict(cls, d: Mapping) -> "ModulationAssignment":
        return cls(tuple(CanonicalForm.from_ops(BinaryOpKind(v) for v in ops) for ops in d["layers"]))


@dataclass(frozen=True)
class SupernetAlphas:
    """Architecture weights, one row per predictor layer, columns in canonical op order."""

    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        if v.ndim != 2 or v.shape[1] != 4:
            raise ValueError(f"alphas must be (L, 4), got {v.shape}")
        object.__setattr__(self, "values", v)

    @classmethod
    def constant(cls, n_layers: int, value: float = 0.5) -> "SupernetAlphas":
        return cls(np.full((n_layers, 4), value))

    @property
    def n_layers(self) -> int:
        return self.values.shape[0]

    def __eq__(self, other):
        return isinstance(other, SupernetAlphas) and np.array_equal(self.values, other.values)

    def __hash__(self):
        return hash(self.values.tobytes())

    def to_list(self) -> list[list[float]]:
        return self.values.tolist()


# --- evaluation -------------------------------------------------------------


def eval_expr(expr: ModulationExpr, h: Tensor, phis: Mapping[int, Tensor]) -> Tensor:
    out = h
    for op, slot in expr.terms:
        if slot not in phis:
            raise KeyError(f"missing adaptive parameter for slot {slot}")
        out = elementwise(op, out, phis[slot])
    return out


def eval_canonical(cf: CanonicalForm, h: Tensor, phis: Mapping[int, Tensor]) -> Tensor:
    out = h
    for op, pos in zip(cf.ops, cf.positions):
        if pos not in phis:
            raise KeyError(f"missing adaptive parameter for canonical position {pos}")
        out = elementwise(op, out, phis[pos])
    return out


def supernet_layer(h: Tensor, phis: Sequence[Tensor], alphas: Sequence) -> Tensor:
    """Four chained mixes ``a_k (x op_k p_k) + (1 - a_k) x`` over max, min, mul, add."""
    if len(phis) != 4 or len(alphas) != 4:
        raise ValueError("supernet layer takes exactly four parameters and four weights")
    out = h
    for op, phi, alpha in zip(CANONICAL_ORDER, phis, alphas):
        if not isinstance(alpha, Tensor):
            alpha = Tensor([float(alpha)])
        out = mix(alpha, elementwise(op, out, phi), out)
    return out


def space_size(C: int, L: int) -> tuple[int, int, float]:
    """Sizes of the chain space (6^(C L)) and the canonical space (2^(4 L)), and their ratio."""
    if C < 0 or L < 1:
        raise ValueError("need C >= 0 and L >= 1")
    original = 6 ** (C * L)
    transformed = 2 ** (4 * L)
    return original, transformed, original / transformed


def select_topk(alphas: SupernetAlphas, K: int) -> ModulationAssignment:
    L = alphas.n_layers
    if not 1 <= K <= 4 * L:
        raise ValueError(f"K must lie in [1, {4 * L}]")
    flat = [(-alphas.values[l, k], l, k) for l in range(L) for k in range(4)]
    flat.sort()
    mask = np.zeros((L, 4), dtype=bool)
    for _, l, k in flat[:K]:
        mask[l, k] = True
    return ModulationAssignment.from_mask(mask)


# --- infix parser -----------------------------------------------------------


class ExprSyntaxError(ValueError):
    def __init__(self, message: str, text: str, pos: int):
        self.message, self.text, self.pos = message, text, pos
        super().__init__(f"{message} at position {pos}\n  {text}\n  {' ' * pos}^")


_TOKEN = re.compile(
    r"\s*(?:(?P<num>(?:phi|p|φ)(?:\^?\{?(?:\d+,)?\d+\}?)?)|(?P<h>h(?:\^\{?\d+\}?)?)"
    r"|(?P<fn>max|min)|(?P<op>[-+*/⊙·−])|(?P<lp>\()|(?P<rp>\))|(?P<comma>,))"
)
_OPS = {"+": BinaryOpKind.ADD, "-": BinaryOpKind.SUB, "−": BinaryOpKind.SUB,
        "*": BinaryOpKind.MUL, "⊙": BinaryOpKind.MUL, "·": BinaryOpKind.MUL, "/": BinaryOpKind.DIV}


class _Parser:
    def __init__(self, text: str):
        self.text = text
        self.tokens: list[tuple[str, str, int]] = []
        pos = 0
        while pos < len(text):
            if text[pos:].strip() == "":
                break
            m = _TOKEN.match(text, pos)
            if not m or m.end() == pos:
                start = pos + (len(text[pos:]) - len(text[pos:].lstrip()))
                raise ExprSyntaxError("unexpected character", text, start)
            kind = m.lastgroup
            start = m.start(kind)
            self.tokens.append((kind, m.group(kind), start))
            pos = m.end()
        self.i = 0

    def peek(self):
        return self.tokens[self.i] if self.i < len(self.tokens) else ("end", "", len(self.text))

    def take(self, kind: str):
        tok = self.peek()
        if tok[0] != kind:
            raise ExprSyntaxError(f"expected {kind}, found {tok[1] or 'end of input'!r}", self.text, tok[2])
        self.i += 1
        return tok

    def expr(self):
        node = self.term()
        while self.peek()[0] == "op" and _OPS[self.peek()[1]] in (BinaryOpKind.ADD, BinaryOpKind.SUB):
            tok = self.take("op")
            node = ("bin", _OPS[tok[1]], node, self.term(), tok[2])
        return node

    def term(self):
        node = self.atom()
        while self.peek()[0] == "op" and _OPS[self.peek()[1]] in MULTIPLICATIVE:
            tok = self.take("op")
            node = ("bin", _OPS[tok[1]], node, self.atom(), tok[2])
        return node

    def atom(self):
        kind, value, pos = self.peek()
        if kind == "h":
            self.i += 1
            return ("h", pos)
        if kind == "num":
            self.i += 1
            digits = re.findall(r"\d+", value)
            return ("phi", int(digits[-1]) if digits else None, pos)
        if kind == "fn":
            self.i += 1
            self.take("lp")
            left = self.expr()
            self.take("comma")
            right = self.expr()
            self.take("rp")
            op = BinaryOpKind.MAX if value == "max" else BinaryOpKind.MIN
            return ("bin", op, left, right, pos)
        if kind == "lp":
            self.i += 1
            node = self.expr()
            self.take("rp")
            return node
        raise ExprSyntaxError(f"unexpected {value or 'end of input'!r}", self.text, pos)


def _has_h(node) -> bool:
    if node[0] == "h":
        return True
    if node[0] == "phi":
        return False
    return _has_h(node[2]) or _has_h(node[3])


def _linearize(node, text: str) -> list:
    if node[0] == "h":
        return []
    if node[0] == "phi":
        raise ExprSyntaxError("expression does not involve h", text, node[2])
    _, op, left, right, pos = node
    lh, rh = _has_h(left), _has_h(right)
    if lh and rh:
        raise ExprSyntaxError("h appears on both sides of an operation", text, pos)
    if rh:
        if op not in _COMMUTATIVE:
            raise ExprSyntaxError(f"h must be the left operand of {op.symbol}", text, pos)
        left, right = right, left
    if not lh and not rh:
        raise ExprSyntaxError("expression does not involve h", text, pos)
    if right[0] != "phi":
        raise ExprSyntaxError("the right operand must be a single parameter", text, pos)
    return _linearize(left, text) + [(op, right[1], right[2])]


def parse_expr(text: str) -> ModulationExpr:
    """Parse infix notation such as ``min(max(h,p1)+p2-p3,p4)*p5`` or ``h⊙φ+φ``."""
    parser = _Parser(text)
    if not parser.tokens:
        raise ExprSyntaxError("empty expression", text, 0)
    tree = parser.expr()
    if parser.i != len(parser.tokens):
        tok = parser.peek()
        raise ExprSyntaxError(f"unexpected {tok[1]!r}", text, tok[2])
    chain = _linearize(tree, text)
    numbered = [c for c in chain if c[1] is not None]
    if numbered and len(numbered) != len(chain):
        raise ExprSyntaxError("mix of numbered and unnumbered parameters", text, chain[0][2])
    if not numbered:
        return ModulationExpr.of(*(op for op, _, _ in chain))
    slots = [s for _, s, _ in chain]
    if sorted(slots) != list(range(1, len(chain) + 1)):
        raise ExprSyntaxError(f"parameters must be numbered 1..{len(chain)} without repeats", text, chain[0][2])
    return ModulationExpr(tuple((op, s) for op, s, _ in chain))
