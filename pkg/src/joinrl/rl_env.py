"""Join ordering as a fully observed MDP.

The observation is one query vector followed by one row per catalog table,
each a binary vector over every column of the database. Row ``r`` starts out
holding catalog table ``r`` if the query uses it. Action ``(i, j)`` joins row
``i`` (left input) with row ``j`` (right input); the result stays in row ``i``
and row ``j`` is cleared. The episode ends when one row remains, and only
that last step is rewarded.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from enum import Enum

import numpy as np

from .catalog import Catalog, CardinalityProvider
from .plancost import CostParams, Leaf, PlanCoster, plan_to_text, reward_from_cost


class EnvError(ValueError):
    pass


class InvalidAction(EnvError):
    pass


class Masking(str, Enum):
    CONNECTED = "connected"  # rows must share a predicate, cross products only when forced
    LITERAL = "literal"  # only empty rows are masked


class ActionSpace:
    """Ordered row pairs ``(i, j)``, ``i != j``, indexed ``i * (n - 1) + (j if j < i else j - 1)``."""

    def __init__(self, n_tables: int):
        if n_tables < 2:
            raise EnvError("an action space needs at least two tables")
        self.n_tables = n_tables
        self.size = n_tables * (n_tables - 1)

    def encode(self, i: int, j: int) -> int:
        n = self.n_tables
        if i == j or not (0 <= i < n and 0 <= j < n):
            raise InvalidAction(f"({i}, {j}) is not an action for {n} tables")
        return i * (n - 1) + (j if j < i else j - 1)

    def decode(self, index: int) -> tuple[int, int]:
        if not 0 <= index < self.size:
            raise InvalidAction(f"action index {index} outside [0, {self.size})")
        i, r = divmod(int(index), self.n_tables - 1)
        return i, (r if r < i else r + 1)

    def pairs(self) -> list[tuple[int, int]]:
        return [self.decode(a) for a in range(self.size)]


@dataclass(frozen=True)
class Observation:
    query_vector: np.ndarray
    state_matrix: np.ndarray

    @property
    def flattened(self) -> np.ndarray:
        return np.concatenate((self.query_vector, self.state_matrix.ravel()))


@dataclass(frozen=True)
class EnvState:
    query: object
    query_vector: np.ndarray
    state_matrix: np.ndarray
    row_plans: tuple
    steps_taken: int = 0
    mask: np.ndarray | None = field(default=None, repr=False, compare=False)

    @property
    def live_rows(self) -> list[int]:
        return [r for r, plan in enumerate(self.row_plans) if plan is not None]

    @property
    def done(self) -> bool:
        return len(self.live_rows) == 1


@dataclass(frozen=True)
class StepOutcome:
    observation: Observation
    reward: float
    done: bool
    mask: np.ndarray
    cost: float | None = None


@dataclass
class TraceRecord:
    query_id: str
    step: int
    action: tuple[int, int]
    reward: float
    plan: str = ""


@dataclass
class JoinOrderEnv:
    """Environment over one catalog; ``reset`` selects the query to plan."""

    catalog: Catalog
    provider: CardinalityProvider = field(default_factory=CardinalityProvider.estimated)
    params: CostParams = field(default_factory=CostParams)
    masking: Masking = Masking.CONNECTED
    record_trace: bool = False

    def __post_init__(self):
        self.masking = Masking(self.masking)
        self.actions = ActionSpace(self.catalog.n_tables)
        self.n_columns = self.catalog.total_column_count
        self.observation_size = self.n_columns * (self.catalog.n_tables + 1)
        self._table_columns = []
        for t in self.catalog.tables:
            vec = np.zeros(self.n_columns)
            vec[t.global_column_offset : t.global_column_offset + len(t.columns)] = 1.0
            self._table_columns.append(vec)
        n = self.catalog.n_tables
        self._action_index = [[self.actions.encode(i, j) if i != j else -1 for j in range(n)] for i in range(n)]
        self._costers: dict[str, PlanCoster] = {}
        self.state: EnvState | None = None
        self._neighbours: dict[str, dict[str, int]] = {}
        self.trace: list[TraceRecord] = []

    # --- helpers -------------------------------------------------------------

    def coster(self, query) -> PlanCoster:
        coster = self._costers.get(query.id)
        if coster is None or coster.predicates != tuple(query.predicates):
            coster = PlanCoster(query.predicates, self.provider, self.catalog, self.params)
            self._costers[query.id] = coster
        return coster

    def _observation(self, state: EnvState) -> Observation:
        return Observation(state.query_vector, state.state_matrix)

    def _bits(self, plan) -> int:
        bits = 0
        for r in plan.relations:
            bits |= 1 << self.catalog.position(r)
        return bits

    def _neighbour_bits(self, query, plan) -> int:
        table = self._neighbours.get(query.id)
        if table is None:
            table = {r: 0 for r in query.relations}
            for p in query.predicates:
                a, b = p.tables
                table[a] |= 1 << self.catalog.position(b)
                table[b] |= 1 << self.catalog.position(a)
            self._neighbours[query.id] = table
        bits = 0
        for r in plan.relations:
            bits |= table[r]
        return bits

    # --- MDP interface -------------------------------------------------------

    def reset(self, query) -> StepOutcome:
        if query.k < 2:
            raise EnvError(f"query {query.id} has fewer than two relations")
        if query.k > self.catalog.n_tables:
            raise EnvError(f"query {query.id} has more relations than the catalog has tables")
        matrix = np.zeros((self.catalog.n_tables, self.n_columns))
        plans = [None] * self.catalog.n_tables
        qvec = np.zeros(self.n_columns)
        for name in query.relations:
            pos = self.catalog.position(name)
            matrix[pos] = self._table_columns[pos]
            qvec += self._table_columns[pos]
            plans[pos] = Leaf(name)
        self._neighbours.pop(query.id, None)
        self.coster(query)
        state = EnvState(query, qvec, matrix, tuple(plans), 0)
        self.state = replace(state, mask=self.valid_action_mask(state))
        return StepOutcome(self._observation(self.state), 0.0, False, self.state.mask)

    def valid_action_mask(self, state: EnvState | None = None) -> np.ndarray:
        state = state or self.state
        if state is None or state.done:
            raise EnvError("no live state to mask")
        if state.mask is not None:
            return state.mask
        plans = state.row_plans
        live = state.live_rows
        index = self._action_index
        mask = np.zeros(self.actions.size, dtype=bool)
        every = [index[i][j] for i in live for j in live if i != j]
        if self.masking == Masking.LITERAL:
            mask[every] = True
            return mask
        bits = {r: self._bits(plans[r]) for r in live}
        reach = {r: self._neighbour_bits(state.query, plans[r]) for r in live}
        connected = [index[i][j] for i in live for j in live if i != j and reach[i] & bits[j]]
        # no row shares a predicate with another: every live pair spans components
        mask[connected or every] = True
        return mask

    def transition(self, state: EnvState, action: int) -> tuple[EnvState, StepOutcome]:
        """Pure successor function; raises :class:`InvalidAction` without touching ``state``."""
        if state.done:
            raise InvalidAction("episode already finished")
        mask = self.valid_action_mask(state)
        i, j = self.actions.decode(action)
        if not mask[action]:
            raise InvalidAction(f"action {action} = rows ({i}, {j}) is masked in this state")
        coster = self.coster(state.query)
        merged = coster.join(state.row_plans[i], state.row_plans[j])
        plans = list(state.row_plans)
        plans[i], plans[j] = merged, None
        matrix = state.state_matrix.copy()
        matrix[i] = np.maximum(matrix[i], matrix[j])
        matrix[j] = 0.0
        nxt = EnvState(state.query, state.query_vector, matrix, tuple(plans), state.steps_taken + 1)
        if not nxt.done:
            nxt = replace(nxt, mask=self.valid_action_mask(nxt))
        if nxt.done:
            total = coster.cost(merged)
            outcome = StepOutcome(self._observation(nxt), reward_from_cost(total, self.params), True,
                                  np.zeros(self.actions.size, dtype=bool), total)
        else:
            outcome = StepOutcome(self._observation(nxt), 0.0, False, nxt.mask)
        return nxt, outcome

    def step(self, action: int) -> StepOutcome:
        if self.state is None:
            raise EnvError("call reset() first")
        nxt, outcome = self.transition(self.state, int(action))
        self.state = nxt
        if self.record_trace:
            self.trace.append(
                TraceRecord(nxt.query.id, nxt.steps_taken, self.actions.decode(int(action)), outcome.reward,
                            plan_to_text(self.final_plan()) if outcome.done else "")
            )
        return outcome

    def final_plan(self, state: EnvState | None = None):
        state = state or self.state
        if state is None or not state.done:
            raise EnvError("final_plan() needs a terminal state")
        return state.row_plans[state.live_rows[0]]


def random_episode(env: JoinOrderEnv, query, rng: np.random.Generator) -> StepOutcome:
    """Play uniformly random valid actions to the end; returns the terminal outcome."""
    outcome = env.reset(query)
    while not outcome.done:
        valid = np.flatnonzero(outcome.mask)
        outcome = env.step(int(valid[rng.integers(len(valid))]))
    return outcome


def calibrate_upper_bound(env: JoinOrderEnv, queries, *, samples_per_query: int = 20, percentile: float = 90.0, seed: int = 0) -> float:
    """Percentile of costs of random valid plans, used as the reward clipping bound."""
    rng = np.random.default_rng(seed)
    costs = [random_episode(env, q, rng).cost for q in queries for _ in range(samples_per_query)]
    if not costs:
        raise EnvError("no queries to calibrate on")
    return float(np.percentile(costs, percentile))
