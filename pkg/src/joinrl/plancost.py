"""Join trees, the main-memory cost model and the cost-to-reward mapping.

Cost of a plan ``Q``::

    scan R                    tau * |R|
    Q_l hj Q_r                |Q| + C(Q_l) + C(Q_r)
    Q_l ij R (R a base table) C(Q_l) + lambda * |Q_l| * max(|Q_l join R| / |Q_l|, 1)

Plans print as parenthesised infix with algorithm tags, e.g. ``((p hj oi) ij o)``.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass, field
from enum import Enum
from functools import cached_property

from .catalog import Catalog, CardinalityProvider, applicable_predicates, estimate_cardinality


class PlanError(ValueError):
    pass


class JoinAlgorithm(str, Enum):
    HASH = "hj"
    INDEX_NL = "ij"


@dataclass(frozen=True)
class Leaf:
    table: str

    @cached_property
    def relations(self) -> frozenset[str]:
        return frozenset((self.table,))

    @property
    def leaves(self) -> tuple[str, ...]:
        return (self.table,)

    def __str__(self) -> str:
        return self.table


@dataclass(frozen=True)
class Join:
    left: PlanNode
    right: PlanNode
    algorithm: JoinAlgorithm = JoinAlgorithm.HASH
    _relations: frozenset = field(default=frozenset(), repr=False, compare=False)
    _hash: int = field(default=0, repr=False, compare=False)

    def __post_init__(self):
        if self.left.relations & self.right.relations:
            dup = sorted(self.left.relations & self.right.relations)
            raise PlanError(f"table(s) {', '.join(dup)} appear more than once in the plan")
        if self.algorithm == JoinAlgorithm.INDEX_NL and not isinstance(self.right, Leaf):
            raise PlanError("index nested loop join needs a base table as its right input")
        object.__setattr__(self, "_relations", self.left.relations | self.right.relations)
        object.__setattr__(self, "_hash", hash((self.left, self.right, self.algorithm)))

    def __hash__(self) -> int:
        return self._hash

    @property
    def relations(self) -> frozenset[str]:
        return self._relations

    @property
    def leaves(self) -> tuple[str, ...]:
        return self.left.leaves + self.right.leaves

    def __str__(self) -> str:
        return plan_to_text(self)


PlanNode = Leaf | Join


def is_left_deep(plan: PlanNode) -> bool:
    while isinstance(plan, Join):
        if not isinstance(plan.right, Leaf):
            return False
        plan = plan.left
    return True


def plan_depth_first(plan: PlanNode):
    """Yield nodes children-first."""
    if isinstance(plan, Join):
        yield from plan_depth_first(plan.left)
        yield from plan_depth_first(plan.right)
    yield plan


@dataclass(frozen=True)
class CostParams:
    tau: float = 0.2
    lam: float = 2.0
    upper_bound: float = 1e13
    min_reward: float = -10.0

    def __post_init__(self):
        if not self.tau <= 1:
            raise ValueError("tau must be <= 1")
        if not self.lam >= 1:
            raise ValueError("lambda must be >= 1")
        if not self.upper_bound > 0:
            raise ValueError("upper_bound must be positive")
        if not self.min_reward < 0:
            raise ValueError("min_reward must be negative")


class PlanCoster:
    """Costs plans of one query, caching cardinalities by relation set.

    Cardinalities only depend on which relations a sub-plan covers, so the
    cache is shared across every plan built for the query.
    """

    def __init__(self, predicates, provider: CardinalityProvider, catalog: Catalog, params: CostParams | None = None):
        self.predicates = tuple(predicates)
        self.provider = provider
        self.catalog = catalog
        self.params = params or CostParams()
        self._cards: dict[frozenset, float] = {}
        self._costs: dict[PlanNode, float] = {}

    def cardinality(self, relations) -> float:
        key = frozenset(relations)
        card = self._cards.get(key)
        if card is None:
            card = estimate_cardinality(key, applicable_predicates(key, self.predicates), self.provider, self.catalog)
            self._cards[key] = card
        return card

    def index_join_legal(self, left: PlanNode, right: PlanNode) -> bool:
        if not isinstance(right, Leaf):
            return False
        table = self.catalog.table(right.table)
        for p in self.predicates:
            a, b = p.tables
            if a == right.table and b in left.relations or b == right.table and a in left.relations:
                if table.column(p.column_of(right.table)).indexed:
                    return True
        return False

    def join_cost(self, left: PlanNode, right: PlanNode, algorithm: JoinAlgorithm, left_cost: float, right_cost: float) -> float:
        if algorithm == JoinAlgorithm.HASH:
            return self.cardinality(left.relations | right.relations) + left_cost + right_cost
        if not self.index_join_legal(left, right):
            raise PlanError(f"index nested loop join of {plan_to_text(left)} with {plan_to_text(right)} has no indexed join column")
        outer = self.cardinality(left.relations)
        if outer == 0:
            return left_cost
        joined = self.cardinality(left.relations | right.relations)
        return left_cost + self.params.lam * outer * max(joined / outer, 1.0)

    def cost(self, plan: PlanNode) -> float:
        cached = self._costs.get(plan)
        if cached is not None:
            return cached
        if isinstance(plan, Leaf):
            value = self.params.tau * self.cardinality(plan.relations)
        else:
            value = self.join_cost(plan.left, plan.right, plan.algorithm, self.cost(plan.left), self.cost(plan.right))
        self._costs[plan] = value
        return value

    def best_join(self, left: PlanNode, right: PlanNode) -> tuple[JoinAlgorithm, float]:
        lc, rc = self.cost(left), self.cost(right)
        best = (JoinAlgorithm.HASH, self.join_cost(left, right, JoinAlgorithm.HASH, lc, rc))
        if self.index_join_legal(left, right):
            ij = self.join_cost(left, right, JoinAlgorithm.INDEX_NL, lc, rc)
            if ij < best[1]:
                best = (JoinAlgorithm.INDEX_NL, ij)
        return best

    def join(self, left: PlanNode, right: PlanNode) -> Join:
        """Join two sub-plans with the cheaper legal algorithm and cache the result's cost."""
        algorithm, value = self.best_join(left, right)
        node = Join(left, right, algorithm)
        self._costs[node] = value
        return node


def cost(plan: PlanNode, provider: CardinalityProvider, catalog: Catalog, params: CostParams | None = None, predicates=()) -> float:
    return PlanCoster(predicates, provider, catalog, params).cost(plan)


def cost_naive(plan: PlanNode, provider, catalog, params: CostParams | None = None, predicates=()) -> float:
    """Uncached recursive evaluation; used to check the memoized path."""
    params = params or CostParams()

    def card(rels):
        return estimate_cardinality(rels, applicable_predicates(rels, predicates), provider, catalog)

    def go(node):
        if isinstance(node, Leaf):
            return params.tau * card(node.relations)
        if node.algorithm == JoinAlgorithm.HASH:
            return card(node.relations) + go(node.left) + go(node.right)
        if not PlanCoster(predicates, provider, catalog, params).index_join_legal(node.left, node.right):
            raise PlanError("illegal index nested loop join")
        outer = card(node.left.relations)
        if outer == 0:
            return go(node.left)
        return go(node.left) + params.lam * outer * max(card(node.relations) / outer, 1.0)

    return go(plan)


def best_algorithm_cost(left: PlanNode, right: PlanNode, provider, catalog, params: CostParams | None = None, predicates=()):
    """(algorithm, cost) of the cheapest legal join of two sub-plans; ties go to hash join."""
    if left.relations & right.relations:
        raise PlanError("join inputs overlap")
    return PlanCoster(predicates, provider, catalog, params).best_join(left, right)


def reward_from_cost(c: float, params: CostParams | None = None) -> float:
    params = params or CostParams()
    if c < 0 or math.isnan(c):
        raise ValueError(f"cost must be non-negative, got {c}")
    if c > params.upper_bound:
        return params.min_reward
    return params.min_reward * math.sqrt(c / params.upper_bound)


# --- text form ---------------------------------------------------------------

_TOKEN = re.compile(r"\s*(?:(\()|(\))|([A-Za-z_][A-Za-z0-9_$#]*))")


def plan_to_text(plan: PlanNode) -> str:
    if isinstance(plan, Leaf):
        return plan.table
    return f"({plan_to_text(plan.left)} {plan.algorithm.value} {plan_to_text(plan.right)})"


def text_to_plan(text: str, catalog: Catalog | None = None) -> PlanNode:
    tokens = []
    pos = 0
    text = text.strip()
    while pos < len(text):
        m = _TOKEN.match(text, pos)
        if not m or m.end() == pos:
            raise PlanError(f"unexpected character at offset {pos}: {text[pos:pos + 10]!r}")
        tokens.append(m.group(1) or m.group(2) or m.group(3))
        pos = m.end()
    if not tokens:
        raise PlanError("empty plan text")

    def parse(i):
        tok = tokens[i] if i < len(tokens) else None
        if tok == "(":
            left, i = parse(i + 1)
            if i >= len(tokens) or tokens[i] not in ("hj", "ij"):
                raise PlanError(f"expected 'hj' or 'ij' at token {i}")
            algorithm = JoinAlgorithm(tokens[i])
            right, i = parse(i + 1)
            if i >= len(tokens) or tokens[i] != ")":
                raise PlanError(f"expected ')' at token {i}")
            return Join(left, right, algorithm), i + 1
        if tok is None or tok in ("(", ")", "hj", "ij"):
            raise PlanError(f"expected a table name at token {i}, got {tok!r}")
        if catalog is not None and tok not in catalog:
            raise PlanError(f"unknown table {tok!r}")
        return Leaf(tok), i + 1

    plan, end = parse(0)
    if end != len(tokens):
        raise PlanError(f"trailing tokens after plan: {tokens[end:]}")
    return plan
