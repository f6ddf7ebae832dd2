"""Join queries, workloads, synthetic generators and cross-validation splits.

Workload files are JSON documents::

    {"name": "job-like",
     "queries": [{"id": "q1", "relations": ["p", "oi", "o", "c"],
                  "predicates": ["p.id = oi.p_id", "oi.o_id = o.id", "o.c_id = c.id"],
                  "cross_product": false}]}

Split files map a fold index to its train and test query ids::

    {"folds": [{"train": ["q1", ...], "test": ["q7", ...]}, ...]}
"""

from __future__ import annotations

import json
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .catalog import Catalog, CatalogError, ColumnStats, TableStats, build_catalog


class WorkloadError(ValueError):
    pass


class InfeasibleSplit(WorkloadError):
    pass


@dataclass(frozen=True, order=True)
class ColumnRef:
    table: str
    column: str

    def __str__(self) -> str:
        return f"{self.table}.{self.column}"

    @classmethod
    def parse(cls, text: str) -> ColumnRef:
        table, dot, column = text.strip().partition(".")
        if not dot or not table or not column:
            raise WorkloadError(f"expected table.column, got {text!r}")
        return cls(table, column)


@dataclass(frozen=True)
class JoinPredicate:
    left: ColumnRef
    right: ColumnRef

    def __post_init__(self):
        if self.left.table == self.right.table:
            raise WorkloadError(f"predicate {self.left} = {self.right} joins a table with itself")
        if self.right < self.left:
            # canonical endpoint order keeps ids and equality stable
            left, right = self.right, self.left
            object.__setattr__(self, "left", left)
            object.__setattr__(self, "right", right)

    @property
    def id(self) -> str:
        return f"{self.left}={self.right}"

    @property
    def tables(self) -> tuple[str, str]:
        return self.left.table, self.right.table

    def column_of(self, table: str) -> str:
        if self.left.table == table:
            return self.left.column
        if self.right.table == table:
            return self.right.column
        raise KeyError(table)

    @classmethod
    def parse(cls, text: str) -> JoinPredicate:
        lhs, eq, rhs = text.partition("=")
        if not eq:
            raise WorkloadError(f"expected 'a.x = b.y', got {text!r}")
        return cls(ColumnRef.parse(lhs), ColumnRef.parse(rhs))

    def __str__(self) -> str:
        return f"{self.left} = {self.right}"


def is_connected(relations, predicates) -> bool:
    rels = list(relations)
    if not rels:
        return True
    adjacency = {r: set() for r in rels}
    for p in predicates:
        a, b = p.tables
        if a in adjacency and b in adjacency:
            adjacency[a].add(b)
            adjacency[b].add(a)
    seen = {rels[0]}
    stack = [rels[0]]
    while stack:
        for nxt in adjacency[stack.pop()]:
            if nxt not in seen:
                seen.add(nxt)
                stack.append(nxt)
    return len(seen) == len(rels)


@dataclass(frozen=True)
class JoinQuery:
    id: str
    relations: tuple[str, ...]
    predicates: tuple[JoinPredicate, ...] = ()
    cross_product: bool = False

    def __post_init__(self):
        if len(self.relations) < 2:
            raise WorkloadError(f"query {self.id}: needs at least two relations")
        if len(set(self.relations)) != len(self.relations):
            raise WorkloadError(f"query {self.id}: duplicate relation")
        rels = set(self.relations)
        for p in self.predicates:
            for t in p.tables:
                if t not in rels:
                    raise WorkloadError(f"query {self.id}: predicate {p} references {t!r} not in its relation list")
        if not self.cross_product and not is_connected(self.relations, self.predicates):
            raise WorkloadError(f"query {self.id}: join graph is disconnected and cross_product is not set")

    @property
    def k(self) -> int:
        return len(self.relations)

    @property
    def predicate_ids(self) -> frozenset[str]:
        return frozenset(p.id for p in self.predicates)

    def validate_against(self, catalog: Catalog) -> None:
        for r in self.relations:
            if r not in catalog:
                raise WorkloadError(f"query {self.id}: unknown table {r!r}")
        for p in self.predicates:
            for ref in (p.left, p.right):
                try:
                    catalog.table(ref.table).column(ref.column)
                except CatalogError as exc:
                    raise WorkloadError(f"query {self.id}: {exc}") from None


@dataclass(frozen=True)
class Workload:
    queries: tuple[JoinQuery, ...]
    name: str = "workload"
    _by_id: dict = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self):
        by_id = {}
        for q in self.queries:
            if q.id in by_id:
                raise WorkloadError(f"duplicate query id {q.id!r}")
            by_id[q.id] = q
        object.__setattr__(self, "_by_id", by_id)

    def __len__(self) -> int:
        return len(self.queries)

    def __iter__(self):
        return iter(self.queries)

    def get(self, qid: str) -> JoinQuery:
        try:
            return self._by_id[qid]
        except KeyError:
            raise WorkloadError(f"unknown query id {qid!r}") from None

    def subset(self, ids) -> list[JoinQuery]:
        return [self.get(i) for i in ids]

    @property
    def ids(self) -> list[str]:
        return [q.id for q in self.queries]


def query_to_dict(q: JoinQuery) -> dict:
    doc = {"id": q.id, "relations": list(q.relations), "predicates": [str(p) for p in q.predicates]}
    if q.cross_product:
        doc["cross_product"] = True
    return doc


def workload_to_dict(workload: Workload) -> dict:
    return {"name": workload.name, "queries": [query_to_dict(q) for q in workload.queries]}


def workload_from_dict(doc: dict, catalog: Catalog) -> Workload:
    if not isinstance(doc, dict) or not isinstance(doc.get("queries"), list):
        raise WorkloadError("workload: missing 'queries' list")
    queries = []
    for i, qdoc in enumerate(doc["queries"]):
        try:
            q = JoinQuery(
                str(qdoc["id"]),
                tuple(qdoc["relations"]),
                tuple(JoinPredicate.parse(s) for s in qdoc.get("predicates", [])),
                bool(qdoc.get("cross_product", False)),
            )
        except (KeyError, TypeError) as exc:
            raise WorkloadError(f"queries[{i}]: malformed entry ({exc})") from None
        q.validate_against(catalog)
        queries.append(q)
    return Workload(tuple(queries), str(doc.get("name", "workload")))


def load_workload(path, catalog: Catalog) -> Workload:
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise WorkloadError(f"{path}: parse error at line {exc.lineno}, column {exc.colno}: {exc.msg}") from exc
    return workload_from_dict(doc, catalog)


def save_workload(workload: Workload, path) -> None:
    Path(path).write_text(json.dumps(workload_to_dict(workload), indent=2) + "\n")


# --- synthetic generation --------------------------------------------------


def generate_synthetic_catalog(n_tables: int, seed: int, *, extra_edge_fraction: float = 0.3) -> Catalog:
    """Random snowflake-ish schema: a random spanning tree of foreign keys plus extra edges.

    Every table has an indexed primary key ``id`` and an ``attr`` column;
    each foreign key adds a ``<parent>_id`` column to the child.
    """
    if n_tables < 2:
        raise WorkloadError("a synthetic catalog needs at least two tables (queries join k >= 2 relations)")
    rng = np.random.default_rng(seed)
    names = [f"t{i:02d}" for i in range(n_tables)]
    rows = [int(round(10 ** rng.uniform(2.0, 6.5))) for _ in names]
    parents: list[list[int]] = [[] for _ in names]
    for child in range(1, n_tables):
        parents[child].append(int(rng.integers(0, child)))
    n_extra = int(round(extra_edge_fraction * n_tables))
    for _ in range(n_extra):
        child, parent = (int(x) for x in rng.choice(n_tables, size=2, replace=False))
        if parent not in parents[child] and child not in parents[parent]:
            parents[child].append(parent)

    tables = []
    edges = []
    for i, name in enumerate(names):
        cols = [ColumnStats("id", max(rows[i], 1), True)]
        for parent in sorted(parents[i]):
            pname = names[parent]
            ndv = max(1, int(min(rows[i], rows[parent]) * rng.uniform(0.3, 1.0)))
            cols.append(ColumnStats(f"{pname}_id", ndv, bool(rng.random() < 0.5)))
            edges.append((f"{name}.{pname}_id", f"{pname}.id"))
        cols.append(ColumnStats("attr", max(1, int(rows[i] * rng.uniform(0.01, 0.5))), bool(rng.random() < 0.3)))
        tables.append(TableStats(name, rows[i], tuple(cols)))
    return build_catalog(tables, edges)


def _schema_predicates(catalog: Catalog) -> list[JoinPredicate]:
    return [JoinPredicate(ColumnRef.parse(a), ColumnRef.parse(b)) for a, b in catalog.join_edges]


def generate_synthetic_workload(
    catalog: Catalog,
    count: int,
    min_relations: int = 4,
    max_relations: int = 9,
    seed: int = 0,
    name: str = "synthetic",
) -> Workload:
    """Random connected join queries over the catalog's joinable column pairs.

    Each query grows a connected relation set from a random start table and
    keeps every schema predicate induced on the chosen relations.
    """
    if count < 0:
        raise WorkloadError("count must be non-negative")
    if not 2 <= min_relations <= max_relations <= catalog.n_tables:
        raise WorkloadError(
            f"need 2 <= min_relations ({min_relations}) <= max_relations ({max_relations}) "
            f"<= table count ({catalog.n_tables})"
        )
    schema = _schema_predicates(catalog)
    if count and not is_connected(catalog.table_names, schema):
        raise WorkloadError("catalog join graph is disconnected; cannot guarantee connected queries")
    neighbours = {t: set() for t in catalog.table_names}
    for p in schema:
        a, b = p.tables
        neighbours[a].add(b)
        neighbours[b].add(a)

    rng = np.random.default_rng(seed)
    width = max(3, len(str(count)))
    queries = []
    for qi in range(count):
        k = int(rng.integers(min_relations, max_relations + 1))
        chosen = [catalog.table_names[int(rng.integers(catalog.n_tables))]]
        frontier = set(neighbours[chosen[0]])
        while len(chosen) < k:
            options = sorted(frontier - set(chosen))
            nxt = options[int(rng.integers(len(options)))]
            chosen.append(nxt)
            frontier |= neighbours[nxt]
        members = set(chosen)
        preds = tuple(p for p in schema if p.left.table in members and p.right.table in members)
        queries.append(JoinQuery(f"q{qi:0{width}d}", tuple(chosen), preds))
    return Workload(tuple(queries), name)


# --- splits ------------------------------------------------------------------


@dataclass(frozen=True)
class Split:
    folds: tuple[tuple[tuple[str, ...], tuple[str, ...]], ...]

    def __len__(self) -> int:
        return len(self.folds)

    def train(self, fold: int) -> tuple[str, ...]:
        return self.folds[fold][0]

    def test(self, fold: int) -> tuple[str, ...]:
        return self.folds[fold][1]

    def check(self, workload: Workload, *, require_full_test_coverage: bool = True) -> None:
        ids = set(workload.ids)
        tested = set()
        for i, (train, test) in enumerate(self.folds):
            if set(train) & set(test):
                raise WorkloadError(f"fold {i}: train and test overlap")
            unknown = (set(train) | set(test)) - ids
            if unknown:
                raise WorkloadError(f"fold {i}: unknown query ids {sorted(unknown)}")
            tested |= set(test)
        if require_full_test_coverage and tested != ids:
            raise WorkloadError(f"queries never tested: {sorted(ids - tested)}")

    def to_dict(self) -> dict:
        return {"folds": [{"train": list(tr), "test": list(te)} for tr, te in self.folds]}

    @classmethod
    def from_dict(cls, doc: dict) -> Split:
        return cls(tuple((tuple(f["train"]), tuple(f["test"])) for f in doc["folds"]))


def save_split(split: Split, path) -> None:
    Path(path).write_text(json.dumps(split.to_dict(), indent=2) + "\n")


def load_split(path) -> Split:
    return Split.from_dict(json.loads(Path(path).read_text()))


def _partition_sizes(n: int, k: int) -> list[int]:
    base, extra = divmod(n, k)
    return [base + (1 if i < extra else 0) for i in range(k)]


def make_random_folds(workload: Workload, k: int = 4, seed: int = 0, *, test_size: int | None = None) -> Split:
    """k-fold split whose test sets partition the workload.

    ``test_size`` pads every test set to that size with queries drawn from the
    other folds, reproducing uneven conventions such as 80 train / 33 test on
    113 queries; padded queries are then tested more than once.
    """
    n = len(workload)
    if k < 2:
        raise WorkloadError("k must be >= 2")
    if k > n:
        raise WorkloadError(f"k={k} exceeds workload size {n}")
    rng = np.random.default_rng(seed)
    order = [workload.ids[i] for i in rng.permutation(n)]
    tests = []
    start = 0
    for size in _partition_sizes(n, k):
        tests.append(order[start : start + size])
        start += size
    if test_size is not None:
        if not max(len(t) for t in tests) <= test_size < n:
            raise WorkloadError(f"test_size {test_size} must be in [{max(len(t) for t in tests)}, {n})")
        for fi, test in enumerate(tests):
            others = [q for q in order if q not in set(test)]
            picks = rng.choice(len(others), size=test_size - len(test), replace=False)
            tests[fi] = test + [others[int(i)] for i in sorted(picks)]
    folds = []
    for test in tests:
        test_set = set(test)
        folds.append((tuple(q for q in order if q not in test_set), tuple(test)))
    return Split(tuple(folds))


def coverage_gaps(train_queries, workload: Workload) -> tuple[set[str], set[str]]:
    """Tables and predicate ids present in the workload but missing from ``train_queries``."""
    all_tables = {r for q in workload for r in q.relations}
    all_preds = {pid for q in workload for pid in q.predicate_ids}
    train_tables = {r for q in train_queries for r in q.relations}
    train_preds = {pid for q in train_queries for pid in q.predicate_ids}
    return all_tables - train_tables, all_preds - train_preds


def _carriers(workload: Workload) -> tuple[Counter, Counter]:
    tables = Counter(r for q in workload for r in q.relations)
    preds = Counter(pid for q in workload for pid in q.predicate_ids)
    return tables, preds


def make_curated_split(workload: Workload, catalog: Catalog, k: int = 4, seed: int = 0, *, retries: int = 20) -> Split:
    """k folds whose training sets cover every table and predicate of the workload.

    A query that is the sole carrier of some table or predicate can never be
    tested, so it sits in every training set. The remaining queries are dealt
    round-robin into test sets, each fold greedily taking the admissible query
    that adds the most new relation counts to its test set (ties by query id).
    The first attempt uses id order; retries reshuffle with ``seed``.
    """
    for q in workload:
        q.validate_against(catalog)
    if k < 2:
        raise WorkloadError("k must be >= 2")
    table_count, pred_count = _carriers(workload)

    def carried(q: JoinQuery):
        return [("table", r) for r in q.relations] + [("predicate", p) for p in sorted(q.predicate_ids)]

    pinned = [q.id for q in workload if any((table_count if kind == "table" else pred_count)[x] == 1 for kind, x in carried(q))]
    testable = [q.id for q in workload if q.id not in set(pinned)]
    if len(testable) < k:
        blockers = sorted({f"{kind} {x}" for q in workload for kind, x in carried(q)
                           if (table_count if kind == "table" else pred_count)[x] == 1})
        raise InfeasibleSplit(
            f"only {len(testable)} testable queries for {k} folds; sole carriers of: {', '.join(blockers)}"
        )

    rng = np.random.default_rng(seed)
    sizes = _partition_sizes(len(testable), k)
    last_failure = ""
    for attempt in range(retries + 1):
        order = sorted(testable) if attempt == 0 else [testable[i] for i in rng.permutation(len(testable))]
        rank = {qid: i for i, qid in enumerate(order)}
        tests: list[list[str]] = [[] for _ in range(k)]
        # remaining carrier counts outside each fold's test set
        remaining = [(table_count.copy(), pred_count.copy()) for _ in range(k)]
        unplaced = list(order)
        progress = True
        while unplaced and progress:
            progress = False
            for f in range(k):
                if len(tests[f]) >= sizes[f] or not unplaced:
                    continue
                tcount, pcount = remaining[f]
                sizes_seen = {workload.get(q).k for q in tests[f]}
                best = None
                for qid in unplaced:
                    q = workload.get(qid)
                    if any(tcount[r] <= 1 for r in q.relations) or any(pcount[p] <= 1 for p in q.predicate_ids):
                        continue
                    score = (len(sizes_seen | {q.k}), -rank[qid])
                    if best is None or score > best[0]:
                        best = (score, qid)
                if best is None:
                    continue
                qid = best[1]
                q = workload.get(qid)
                tcount.subtract(q.relations)
                pcount.subtract(q.predicate_ids)
                tests[f].append(qid)
                unplaced.remove(qid)
                progress = True
        # second pass: place leftovers in any fold that can still spare their carriers
        for qid in list(unplaced):
            q = workload.get(qid)
            for f in range(k):
                tcount, pcount = remaining[f]
                if any(tcount[r] <= 1 for r in q.relations) or any(pcount[p] <= 1 for p in q.predicate_ids):
                    continue
                tcount.subtract(q.relations)
                pcount.subtract(q.predicate_ids)
                tests[f].append(qid)
                unplaced.remove(qid)
                break
        if not unplaced and all(tests):
            folds = []
            for test in tests:
                test_set = set(test)
                train = tuple(q for q in workload.ids if q not in test_set)
                missing_t, missing_p = coverage_gaps(workload.subset(train), workload)
                assert not missing_t and not missing_p
                folds.append((train, tuple(sorted(test, key=lambda q: rank[q]))))
            return Split(tuple(folds))
        q = workload.get(unplaced[0]) if unplaced else None
        last_failure = (
            f"query {q.id} cannot be tested in any fold without uncovering one of "
            f"{', '.join(f'{kind} {x}' for kind, x in carried(q))}"
            if q
            else "a fold received no test queries"
        )
    raise InfeasibleSplit(f"curated split infeasible after {retries} retries: {last_failure}")


def relation_count_histogram(queries) -> dict[int, int]:
    return dict(sorted(Counter(q.k for q in queries).items()))


def expected_test_sizes(n: int, k: int) -> list[int]:
    return _partition_sizes(n, k)

