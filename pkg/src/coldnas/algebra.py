"""Rewriting operation chains into the canonical ``min(max(h, a), b) * c + d`` form.

The six operations fall into four groups, {max}, {min}, {+, -} and {*, /}.
Adjacent operations from one group fold into the group representative
(max, min, +, *), and adjacent operations from different groups can trade
places once their parameters are rewritten.  Sorting a chain with such swaps
and folding the runs yields at most one operation per group.  Each rewrite
keeps track of how the new parameters are computed from the old ones, so the
result is an exact closed-form recipe for every canonical parameter.

Swaps through a multiplication divide by the multiplicative parameter, which
is sound because those parameters are non-negative and bounded away from
zero by ``DIV_EPSILON`` wherever the chain is well defined.
"""

from __future__ import annotations

import enum
from collections.abc import Mapping, Sequence
from dataclasses import dataclass
from typing import Callable, Union

import numpy as np

from .modulation import (
    CANONICAL_ORDER,
    BinaryOpKind,
    CanonicalForm,
    ModulationExpr,
    eval_canonical,
    eval_expr,
)
from .numerics import DIV_EPSILON, NumericalError, Tensor

MAX, MIN, MUL, DIV, ADD, SUB = (BinaryOpKind.MAX, BinaryOpKind.MIN, BinaryOpKind.MUL,
                                BinaryOpKind.DIV, BinaryOpKind.ADD, BinaryOpKind.SUB)


class OpGroup(enum.Enum):
    G1 = "max"
    G2 = "min"
    G3 = "add"
    G4 = "mul"

    @property
    def representative(self) -> BinaryOpKind:
        return _REPRESENTATIVE[self]

    @property
    def members(self) -> frozenset[BinaryOpKind]:
        return frozenset(op for op, g in _GROUP.items() if g is self)


_GROUP = {MAX: OpGroup.G1, MIN: OpGroup.G2, ADD: OpGroup.G3, SUB: OpGroup.G3, MUL: OpGroup.G4, DIV: OpGroup.G4}
_REPRESENTATIVE = {OpGroup.G1: MAX, OpGroup.G2: MIN, OpGroup.G3: ADD, OpGroup.G4: MUL}


def group_of(op: BinaryOpKind) -> OpGroup:
    return _GROUP[op]


# --- parameter recipes ------------------------------------------------------


@dataclass(frozen=True)
class Slot:
    index: int


@dataclass(frozen=True)
class Const:
    value: float


@dataclass(frozen=True)
class Apply:
    op: BinaryOpKind
    left: "Recipe"
    right: "Recipe"


Recipe = Union[Slot, Const, Apply]

ZERO, ONE = Const(0.0), Const(1.0)


def add(a: Recipe, b: Recipe) -> Recipe:
    if a == ZERO:
        return b
    if b == ZERO:
        return a
    return Apply(ADD, a, b)


def sub(a: Recipe, b: Recipe) -> Recipe:
    if b == ZERO:
        return a
    return Apply(SUB, a, b)


def neg(a: Recipe) -> Recipe:
    if isinstance(a, Apply) and a.op is SUB and a.left == ZERO:
        return a.right
    return Apply(SUB, ZERO, a)


def mul(a: Recipe, b: Recipe) -> Recipe:
    if a == ONE:
        return b
    if b == ONE:
        return a
    if isinstance(b, Apply) and b.op is DIV and b.left == ONE:
        return Apply(DIV, a, b.right)
    return Apply(MUL, a, b)


def div(a: Recipe, b: Recipe) -> Recipe:
    if b == ONE:
        return a
    return Apply(DIV, a, b)


def recip(a: Recipe) -> Recipe:
    if isinstance(a, Apply) and a.op is DIV and a.left == ONE:
        return a.right
    return Apply(DIV, ONE, a)


def vmax(a: Recipe, b: Recipe) -> Recipe:
    return a if a == b else Apply(MAX, a, b)


def vmin(a: Recipe, b: Recipe) -> Recipe:
    return a if a == b else Apply(MIN, a, b)


_NUMPY = {MAX: np.maximum, MIN: np.minimum, MUL: np.multiply, DIV: np.divide, ADD: np.add, SUB: np.subtract}


def evaluate(recipe: Recipe, slots: Mapping[int, np.ndarray]) -> np.ndarray:
    if isinstance(recipe, Slot):
        return np.asarray(slots[recipe.index], dtype=np.float64)
    if isinstance(recipe, Const):
        return np.float64(recipe.value)
    return _NUMPY[recipe.op](evaluate(recipe.left, slots), evaluate(recipe.right, slots))


def slots_used(recipe: Recipe) -> frozenset[int]:
    if isinstance(recipe, Slot):
        return frozenset({recipe.index})
    if isinstance(recipe, Const):
        return frozenset()
    return slots_used(recipe.left) | slots_used(recipe.right)


def _signed_terms(r: Recipe, sign: int = 1) -> list[tuple[int, Recipe]]:
    if isinstance(r, Apply) and r.op is ADD:
        return _signed_terms(r.left, sign) + _signed_terms(r.right, sign)
    if isinstance(r, Apply) and r.op is SUB:
        return _signed_terms(r.left, sign) + _signed_terms(r.right, -sign)
    if r == ZERO:
        return []
    return [(sign, r)]


def format_recipe(r: Recipe, name=lambda k: f"p{k}") -> str:
    """Infix rendering; additive chains are flattened so ``p4 - (p2 - p3)`` prints as ``p4 - p2 + p3``."""
    text, _ = _fmt(r, name)
    return text


def _fmt(r: Recipe, name) -> tuple[str, int]:
    # precedence: 1 additive, 2 multiplicative, 3 atom/call
    if isinstance(r, Slot):
        return name(r.index), 3
    if isinstance(r, Const):
        v = r.value
        return (str(int(v)) if float(v).is_integer() else repr(v)), 3
    if r.op in (ADD, SUB):
        terms = _signed_terms(r)
        if not terms:
            return "0", 3
        parts = []
        for i, (sign, t) in enumerate(terms):
            s, _ = _fmt(t, name)
            if i == 0:
                parts.append(s if sign > 0 else f"-{_wrap(t, name, 2)}")
            else:
                parts.append(f"{'+' if sign > 0 else '-'} {s}")
        return " ".join(parts), 1
    if r.op in (MUL, DIV):
        left = _wrap(r.left, name, 2)
        right = _wrap(r.right, name, 3 if r.op is DIV else 2)
        return f"{left} {r.op.symbol} {right}", 2
    return f"{r.op.value}({_fmt(r.left, name)[0]}, {_fmt(r.right, name)[0]})", 3


def _wrap(r: Recipe, name, min_prec: int) -> str:
    s, p = _fmt(r, name)
    return s if p >= min_prec else f"({s})"


# --- rewrite rules ----------------------------------------------------------

Step = tuple[BinaryOpKind, Recipe]


def _to_representative(op: BinaryOpKind, phi: Recipe) -> Step:
    if op is SUB:
        return ADD, neg(phi)
    if op is DIV:
        return MUL, recip(phi)
    return op, phi


@dataclass(frozen=True)
class RewriteRule:
    """``x op_a a op_b b  ==  x op_b b' op_a a'`` for two operations from different groups."""

    first: BinaryOpKind
    second: BinaryOpKind
    identity: str
    _fn: Callable[[Recipe, Recipe], tuple[Recipe, Recipe]]

    def apply(self, a: Recipe, b: Recipe) -> tuple[Step, Step]:
        op_a, a = _to_representative(self.first, a)
        op_b, b = _to_representative(self.second, b)
        new_b, new_a = self._fn(a, b)
        return (op_b, new_b), (op_a, new_a)


# Each entry maps (a, b) of ``x op_a a op_b b`` to (b', a') of ``x op_b b' op_a a'``.
# Multiplicative parameters are assumed non-negative; those divided by, positive.
_RULES: dict[tuple[BinaryOpKind, BinaryOpKind], tuple[str, Callable]] = {
    (MAX, MIN): ("min(max(x,a),b) = max(min(x,b), min(a,b))", lambda a, b: (b, vmin(a, b))),
    (MIN, MAX): ("max(min(x,a),b) = min(max(x,b), max(a,b))", lambda a, b: (b, vmax(a, b))),
    (MAX, MUL): ("max(x,a)*b = max(x*b, a*b)", lambda a, b: (b, mul(a, b))),
    (MUL, MAX): ("max(x*a,b) = max(x, b/a)*a", lambda a, b: (div(b, a), a)),
    (MIN, MUL): ("min(x,a)*b = min(x*b, a*b)", lambda a, b: (b, mul(a, b))),
    (MUL, MIN): ("min(x*a,b) = min(x, b/a)*a", lambda a, b: (div(b, a), a)),
    (MAX, ADD): ("max(x,a)+b = max(x+b, a+b)", lambda a, b: (b, add(a, b))),
    (ADD, MAX): ("max(x+a,b) = max(x, b-a)+a", lambda a, b: (sub(b, a), a)),
    (MIN, ADD): ("min(x,a)+b = min(x+b, a+b)", lambda a, b: (b, add(a, b))),
    (ADD, MIN): ("min(x+a,b) = min(x, b-a)+a", lambda a, b: (sub(b, a), a)),
    (MUL, ADD): ("x*a+b = (x + b/a)*a", lambda a, b: (div(b, a), a)),
    (ADD, MUL): ("(x+a)*b = x*b + a*b", lambda a, b: (b, mul(a, b))),
}


def rewrite_commute(op_a: BinaryOpKind, op_b: BinaryOpKind) -> RewriteRule:
    ga, gb = group_of(op_a), group_of(op_b)
    if ga is gb:
        raise ValueError(f"{op_a.value} and {op_b.value} share a group; use associate_group")
    identity, fn = _RULES[(ga.representative, gb.representative)]
    return RewriteRule(op_a, op_b, identity, fn)


def associate_group(steps: Sequence[Step]) -> Step:
    """Fold a run of same-group operations into one representative operation."""
    if not steps:
        raise ValueError("empty run")
    groups = {group_of(op) for op, _ in steps}
    if len(groups) != 1:
        raise ValueError("associate_group needs operations from a single group")
    group = groups.pop()
    rep = group.representative
    combine = {MAX: vmax, MIN: vmin, ADD: add, MUL: mul}[rep]
    _, acc = _to_representative(*steps[0])
    for op, phi in steps[1:]:
        _, phi = _to_representative(op, phi)
        acc = combine(acc, phi)
    return rep, acc


# --- canonicalization -------------------------------------------------------


@dataclass(frozen=True)
class PhiHatRecipe:
    """Canonical position (1..4) -> recipe over the original slots, present positions only."""

    recipes: Mapping[int, Recipe]

    def evaluate(self, slots: Mapping[int, np.ndarray]) -> dict[int, np.ndarray]:
        return {pos: evaluate(r, slots) for pos, r in self.recipes.items()}

    def describe(self, name=lambda k: f"p{k}") -> dict[int, str]:
        return {pos: format_recipe(r, name) for pos, r in sorted(self.recipes.items())}


def reorder(steps: Sequence[Step], order: Sequence[BinaryOpKind]) -> list[Step]:
    """Bubble adjacent cross-group pairs into ``order`` (by group), folding same-group neighbours.

    The result holds one operation per group present in ``steps``, in
    representative form, arranged as in ``order``.
    """
    rank = {group_of(op): i for i, op in enumerate(order)}
    chain = [_to_representative(op, phi) for op, phi in steps]
    while True:
        merged = _merge_adjacent(chain)
        if merged is not None:
            chain = merged
            continue
        for i in range(len(chain) - 1):
            (op_a, a), (op_b, b) = chain[i], chain[i + 1]
            if rank[group_of(op_a)] > rank[group_of(op_b)]:
                chain[i], chain[i + 1] = rewrite_commute(op_a, op_b).apply(a, b)
                break
        else:
            return chain


def _merge_adjacent(chain: list[Step]):
    for i in range(len(chain) - 1):
        if group_of(chain[i][0]) is group_of(chain[i + 1][0]):
            return chain[:i] + [associate_group(chain[i:i + 2])] + chain[i + 2:]
    return None


def canonicalize(expr: ModulationExpr) -> tuple[CanonicalForm, PhiHatRecipe]:
    steps = [(op, Slot(slot)) for op, slot in expr.terms]
    chain = reorder(steps, CANONICAL_ORDER)
    cf = CanonicalForm.from_ops(op for op, _ in chain)
    position = {op: k + 1 for k, op in enumerate(CANONICAL_ORDER)}
    return cf, PhiHatRecipe({position[op]: r for op, r in chain})


def eval_steps(steps: Sequence[Step], h: np.ndarray, slots: Mapping[int, np.ndarray]) -> np.ndarray:
    out = np.asarray(h, dtype=np.float64)
    for op, r in steps:
        out = _NUMPY[op](out, evaluate(r, slots))
    return out


# --- numerical oracle -------------------------------------------------------


def sample_inputs(expr: ModulationExpr, rng: np.random.Generator, rows: int, width: int,
                  bound: float = 10.0) -> tuple[np.ndarray, dict[int, np.ndarray]]:
    """Signed hidden states; parameters of * and / drawn from [DIV_EPSILON, bound], the rest signed."""
    h = rng.uniform(-bound, bound, size=(rows, width))
    nonneg = expr.nonnegative_slots()
    slots = {}
    for _, s in expr.terms:
        if s in nonneg:
            slots[s] = rng.uniform(DIV_EPSILON, bound, size=(rows, width))
        else:
            slots[s] = rng.uniform(-bound, bound, size=(rows, width))
    return h, slots


def verify_equivalence(expr: ModulationExpr, cf: CanonicalForm, recipe: PhiHatRecipe,
                       trials: int = 100, rng_seed: int = 0, width: int = 4) -> float:
    """Worst elementwise |original - canonical| over ``trials`` random inputs."""
    if trials < 1:
        raise ValueError("trials must be >= 1")
    rng = np.random.default_rng(rng_seed)
    h, slots = sample_inputs(expr, rng, trials, width)
    with np.errstate(all="ignore"):
        original = eval_expr(expr, Tensor(h), {k: Tensor(v) for k, v in slots.items()}).values
        hats = recipe.evaluate(slots)
        hats = {k: Tensor(np.broadcast_to(v, h.shape)) for k, v in hats.items()}
        canonical = eval_canonical(cf, Tensor(h), hats).values
    if not (np.all(np.isfinite(original)) and np.all(np.isfinite(canonical))):
        bad = np.argwhere(~(np.isfinite(original) & np.isfinite(canonical)))[0]
        raise NumericalError(
            f"non-finite value for {expr} at row {bad[0]}: h={h[bad[0]]}, "
            + ", ".join(f"p{k}={v[bad[0]]}" for k, v in sorted(slots.items()))
        )
    return float(np.max(np.abs(original - canonical))) if original.size else 0.0


def random_expr(rng: np.random.Generator, max_len: int = 6, min_len: int = 0) -> ModulationExpr:
    ops = list(BinaryOpKind)
    n = int(rng.integers(min_len, max_len + 1))
    return ModulationExpr.of(*(ops[i] for i in rng.integers(0, len(ops), size=n)))
