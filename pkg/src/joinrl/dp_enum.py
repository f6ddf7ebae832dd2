"""Classical join-order baselines: left-deep dynamic programming and exhaustive oracles."""

from __future__ import annotations

import itertools
import math
import time
from dataclasses import dataclass
from functools import lru_cache

from .plancost import CostParams, Join, JoinAlgorithm, Leaf, PlanCoster, PlanError, plan_to_text

DEFAULT_DP_LIMIT = 16
EXHAUSTIVE_LEFT_DEEP_LIMIT = 8
EXHAUSTIVE_BUSHY_LIMIT = 7


class PlannerLimitError(ValueError):
    pass


@dataclass(frozen=True)
class DpResult:
    plan: Leaf | Join
    cost: float
    expanded_states: int
    elapsed: float  # seconds

    def as_record(self, query_id: str) -> dict:
        return {
            "query_id": query_id,
            "plan": plan_to_text(self.plan),
            "cost": repr(self.cost),
            "expanded_states": self.expanded_states,
            "elapsed_us": round(self.elapsed * 1e6),
        }


def count_tree_shapes(j: int) -> int:
    """Number of binary tree shapes with ``j`` joins, (2j)! / (j! (j+1)!)."""
    if j < 1:
        raise ValueError("j must be >= 1")
    if j > 30:
        raise OverflowError("tree shape counts are only supported up to j = 30")
    return math.factorial(2 * j) // (math.factorial(j) * math.factorial(j + 1))


def enumerate_tree_shapes(leaves: int):
    """Yield every binary tree shape with the given leaf count as nested tuples (None = leaf)."""
    if leaves == 1:
        yield None
        return
    for left in range(1, leaves):
        for lshape in enumerate_tree_shapes(left):
            for rshape in enumerate_tree_shapes(leaves - left):
                yield (lshape, rshape)


class _Graph:
    def __init__(self, query):
        self.relations = tuple(sorted(query.relations))
        self.adjacent = {r: set() for r in self.relations}
        for p in query.predicates:
            a, b = p.tables
            self.adjacent[a].add(b)
            self.adjacent[b].add(a)

    def connected_to(self, subset: frozenset, rel: str) -> bool:
        return bool(self.adjacent[rel] & subset)

    def extensions(self, subset: frozenset, allow_cross: bool) -> list[str]:
        """Relations that may extend a left-deep prefix, sorted by name.

        Without ``allow_cross`` only connected extensions are admitted, unless
        none exists (the prefix's component is exhausted) in which case any
        remaining relation may follow as a cross product.
        """
        rest = [r for r in self.relations if r not in subset]
        if allow_cross or not subset:
            return rest
        connected = [r for r in rest if self.connected_to(subset, r)]
        return connected or rest


def _check_limit(query, limit: int, what: str) -> None:
    if query.k > limit:
        raise PlannerLimitError(f"{what} is limited to {limit} relations; query {query.id} has {query.k}")


def dp_left_deep(query, provider, catalog, params: CostParams | None = None, allow_cross: bool = False, *, limit: int = DEFAULT_DP_LIMIT) -> DpResult:
    """Bottom-up System-R dynamic programming over left-deep trees.

    The memo maps a relation subset to its cheapest left-deep plan. Each
    subset is extended by one base relation at a time with the cheaper legal
    join algorithm. Equal costs keep the first candidate in name order.
    """
    _check_limit(query, limit, "dp_left_deep")
    start = time.perf_counter()
    coster = PlanCoster(query.predicates, provider, catalog, params)
    graph = _Graph(query)
    best: dict[frozenset, tuple[float, object]] = {}
    for rel in graph.relations:
        leaf = Leaf(rel)
        best[frozenset((rel,))] = (coster.cost(leaf), leaf)
    expanded = 0
    frontier = sorted(best, key=lambda s: sorted(s))
    for _ in range(len(graph.relations) - 1):
        nxt: dict[frozenset, tuple[float, object]] = {}
        for subset in frontier:
            prefix_cost, prefix = best[subset]
            for rel in graph.extensions(subset, allow_cross):
                expanded += 1
                node = coster.join(prefix, Leaf(rel))
                value = coster.cost(node)
                key = subset | {rel}
                current = nxt.get(key)
                if current is None or value < current[0] or (
                    value == current[0] and _tiebreak(prefix, rel) < _tiebreak(current[1].left, current[1].right.table)
                ):
                    nxt[key] = (value, node)
        best.update(nxt)
        frontier = sorted(nxt, key=lambda s: sorted(s))
    full = frozenset(graph.relations)
    value, plan = best[full]
    return DpResult(plan, value, expanded, time.perf_counter() - start)


def _tiebreak(prefix, rel: str):
    return (rel, prefix.leaves)


def _left_deep_from_order(order, coster: PlanCoster):
    plan = Leaf(order[0])
    for rel in order[1:]:
        plan = coster.join(plan, Leaf(rel))
    return plan


def _admissible_order(order, graph: _Graph, allow_cross: bool) -> bool:
    prefix = frozenset((order[0],))
    for rel in order[1:]:
        if rel not in graph.extensions(prefix, allow_cross):
            return False
        prefix = prefix | {rel}
    return True


def exhaustive_left_deep(query, provider, catalog, params: CostParams | None = None, allow_cross: bool = False) -> DpResult:
    """Enumerate all k! leaf orders as left-deep trees and keep the cheapest.

    Orders that the DP would never build (an avoidable cross product) are
    enumerated and counted but not costed, so both planners search one space.
    """
    _check_limit(query, EXHAUSTIVE_LEFT_DEEP_LIMIT, "exhaustive_left_deep")
    start = time.perf_counter()
    coster = PlanCoster(query.predicates, provider, catalog, params)
    graph = _Graph(query)
    best = None
    enumerated = 0
    for order in itertools.permutations(graph.relations):
        enumerated += 1
        if not _admissible_order(order, graph, allow_cross):
            continue
        plan = _left_deep_from_order(order, coster)
        value = coster.cost(plan)
        if best is None or value < best[0]:
            best = (value, plan)
    return DpResult(best[1], best[0], enumerated, time.perf_counter() - start)


def exhaustive_bushy(query, provider, catalog, params: CostParams | None = None) -> DpResult:
    """Cheapest plan over the full space of bushy trees, cross products included.

    Every ordered split of every relation subset is visited, which covers all
    tree shapes times all leaf assignments; the best plan of a subset only
    depends on the best plans of its two halves because the cost is monotone
    in its inputs.
    """
    _check_limit(query, EXHAUSTIVE_BUSHY_LIMIT, "exhaustive_bushy")
    start = time.perf_counter()
    coster = PlanCoster(query.predicates, provider, catalog, params)
    rels = tuple(sorted(query.relations))
    expanded = 0

    @lru_cache(maxsize=None)
    def best(mask: int):
        nonlocal expanded
        members = [rels[i] for i in range(len(rels)) if mask >> i & 1]
        if len(members) == 1:
            leaf = Leaf(members[0])
            return coster.cost(leaf), leaf
        champion = None
        sub = (mask - 1) & mask
        while sub:
            expanded += 1
            lcost, lplan = best(sub)
            rcost, rplan = best(mask ^ sub)
            node = coster.join(lplan, rplan)
            value = coster.cost(node)
            if champion is None or value < champion[0]:
                champion = (value, node)
            sub = (sub - 1) & mask
        return champion

    value, plan = best((1 << len(rels)) - 1)
    return DpResult(plan, value, expanded, time.perf_counter() - start)


def brute_force_bushy(query, provider, catalog, params: CostParams | None = None, *, limit: int = 5) -> tuple[float, int]:
    """Literal shape-by-permutation enumeration; returns (min cost, shapes visited).

    Exponentially slow; kept as an independent check of :func:`exhaustive_bushy`.
    """
    _check_limit(query, limit, "brute_force_bushy")
    coster = PlanCoster(query.predicates, provider, catalog, params)
    rels = tuple(sorted(query.relations))
    shapes = list(enumerate_tree_shapes(len(rels)))
    best = math.inf

    def build(shape, leaves):
        if shape is None:
            return Leaf(next(leaves))
        left = build(shape[0], leaves)
        right = build(shape[1], leaves)
        return coster.join(left, right)

    for shape in shapes:
        for order in itertools.permutations(rels):
            try:
                plan = build(shape, iter(order))
            except PlanError:
                continue
            best = min(best, coster.cost(plan))
    return best, len(shapes)


__all__ = [
    "DpResult",
    "JoinAlgorithm",
    "PlannerLimitError",
    "brute_force_bushy",
    "count_tree_shapes",
    "dp_left_deep",
    "enumerate_tree_shapes",
    "exhaustive_bushy",
    "exhaustive_left_deep",
]
