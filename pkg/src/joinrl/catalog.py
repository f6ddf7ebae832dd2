"""Schema statistics and cardinality estimation.

Catalog files are JSON documents::

    {
      "tables": [
        {"name": "orders", "row_count": 150000,
         "columns": [{"name": "id", "distinct_count": 150000, "indexed": true}, ...]},
        ...
      ],
      "joins": [["orders.cust_id", "customer.id"], ...]
    }

``joins`` is optional and lists the joinable column pairs used by the
synthetic workload generator.

Cardinality lookup files are JSON documents::

    {"entries": [{"relations": ["a", "b"], "predicates": ["a.x=b.y"], "cardinality": 4321.0}]}

Both lists in an entry are sorted ascending.
"""

from __future__ import annotations

import hashlib
import itertools
import json
import math
from collections.abc import Iterable, Mapping
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path

import numpy as np


class CatalogError(ValueError):
    """Raised for malformed catalogs and failed cardinality requests."""


class LookupMiss(CatalogError):
    pass


@dataclass(frozen=True)
class ColumnStats:
    name: str
    distinct_count: int
    indexed: bool = False


@dataclass(frozen=True)
class TableStats:
    name: str
    row_count: int
    columns: tuple[ColumnStats, ...]
    global_column_offset: int = 0

    def column(self, name: str) -> ColumnStats:
        for col in self.columns:
            if col.name == name:
                return col
        raise CatalogError(f"unknown column {self.name}.{name}")

    @property
    def column_span(self) -> range:
        return range(self.global_column_offset, self.global_column_offset + len(self.columns))


@dataclass(frozen=True)
class Catalog:
    tables: tuple[TableStats, ...]
    join_edges: tuple[tuple[str, str], ...] = ()
    _index: Mapping[str, int] = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self):
        index: dict[str, int] = {}
        for pos, table in enumerate(self.tables):
            if table.name in index:
                raise CatalogError(f"duplicate table name {table.name!r}")
            index[table.name] = pos
        object.__setattr__(self, "_index", index)

    @property
    def total_column_count(self) -> int:
        return sum(len(t.columns) for t in self.tables)

    @property
    def n_tables(self) -> int:
        return len(self.tables)

    @property
    def table_names(self) -> list[str]:
        return [t.name for t in self.tables]

    def position(self, name: str) -> int:
        try:
            return self._index[name]
        except KeyError:
            raise CatalogError(f"unknown table {name!r}") from None

    def table(self, name: str) -> TableStats:
        return self.tables[self.position(name)]

    def __contains__(self, name: object) -> bool:
        return name in self._index

    def digest(self) -> str:
        """Stable content hash; policies record it to refuse foreign catalogs."""
        cached = self.__dict__.get("_digest")
        if cached is None:
            blob = json.dumps(catalog_to_dict(self), sort_keys=True).encode()
            cached = hashlib.sha256(blob).hexdigest()[:16]
            object.__setattr__(self, "_digest", cached)
        return cached


def build_catalog(tables: Iterable[TableStats], join_edges: Iterable[tuple[str, str]] = ()) -> Catalog:
    """Validate tables and assign consecutive global column offsets."""
    placed = []
    offset = 0
    for table in tables:
        seen = set()
        for col in table.columns:
            if col.name in seen:
                raise CatalogError(f"duplicate column name {table.name}.{col.name}")
            seen.add(col.name)
            if col.distinct_count < 1:
                raise CatalogError(f"{table.name}.{col.name}: distinct_count must be >= 1")
        if table.row_count < 0:
            raise CatalogError(f"{table.name}: row_count must be >= 0")
        placed.append(TableStats(table.name, table.row_count, tuple(table.columns), offset))
        offset += len(table.columns)
    catalog = Catalog(tuple(placed), tuple((a, b) for a, b in join_edges))
    for a, b in catalog.join_edges:
        for ref in (a, b):
            tname, _, cname = ref.partition(".")
            catalog.table(tname).column(cname)
    return catalog


def _require(obj, key, where, kind):
    if not isinstance(obj, dict) or key not in obj:
        raise CatalogError(f"{where}: missing field {key!r}")
    value = obj[key]
    if kind is int and (isinstance(value, bool) or not isinstance(value, int)):
        raise CatalogError(f"{where}.{key}: expected integer, got {value!r}")
    if kind is not int and not isinstance(value, kind):
        raise CatalogError(f"{where}.{key}: expected {kind.__name__}, got {value!r}")
    return value


def catalog_from_dict(doc: dict) -> Catalog:
    tables = []
    for ti, tdoc in enumerate(_require(doc, "tables", "catalog", list)):
        where = f"tables[{ti}]"
        columns = []
        for ci, cdoc in enumerate(_require(tdoc, "columns", where, list)):
            cwhere = f"{where}.columns[{ci}]"
            columns.append(
                ColumnStats(
                    _require(cdoc, "name", cwhere, str),
                    _require(cdoc, "distinct_count", cwhere, int),
                    bool(cdoc.get("indexed", False)),
                )
            )
        tables.append(
            TableStats(_require(tdoc, "name", where, str), _require(tdoc, "row_count", where, int), tuple(columns))
        )
    joins = [tuple(pair) for pair in doc.get("joins", [])]
    for pair in joins:
        if len(pair) != 2:
            raise CatalogError(f"joins: expected column pairs, got {list(pair)!r}")
    return build_catalog(tables, joins)


def catalog_to_dict(catalog: Catalog) -> dict:
    doc = {
        "tables": [
            {
                "name": t.name,
                "row_count": t.row_count,
                "columns": [
                    {"name": c.name, "distinct_count": c.distinct_count, "indexed": c.indexed} for c in t.columns
                ],
            }
            for t in catalog.tables
        ]
    }
    if catalog.join_edges:
        doc["joins"] = [list(e) for e in catalog.join_edges]
    return doc


def load_catalog(path) -> Catalog:
    text = Path(path).read_text()
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise CatalogError(f"{path}: parse error at line {exc.lineno}, column {exc.colno}: {exc.msg}") from exc
    try:
        return catalog_from_dict(doc)
    except CatalogError as exc:
        raise CatalogError(f"{path}: {exc}") from exc


def save_catalog(catalog: Catalog, path) -> None:
    Path(path).write_text(json.dumps(catalog_to_dict(catalog), indent=2) + "\n")


# --- cardinalities ---------------------------------------------------------


class CardinalityMode(str, Enum):
    ESTIMATED = "estimated"
    LOOKUP = "lookup"


def lookup_key(relations: Iterable[str], predicate_ids: Iterable[str]) -> tuple[tuple[str, ...], tuple[str, ...]]:
    return tuple(sorted(relations)), tuple(sorted(predicate_ids))


@dataclass(frozen=True)
class CardinalityProvider:
    mode: CardinalityMode = CardinalityMode.ESTIMATED
    lookup_table: Mapping[tuple[tuple[str, ...], tuple[str, ...]], float] | None = None

    @classmethod
    def estimated(cls) -> CardinalityProvider:
        return cls(CardinalityMode.ESTIMATED)

    @classmethod
    def lookup(cls, table: Mapping) -> CardinalityProvider:
        return cls(CardinalityMode.LOOKUP, dict(table))


def _endpoints(pred):
    return (pred.left.table, pred.left.column), (pred.right.table, pred.right.column)


def independence_estimate(relations, predicates, catalog: Catalog) -> float:
    # canonical order: float products must not depend on set iteration order
    card = 1.0
    for name in sorted(relations):
        card *= float(catalog.table(name).row_count)
    for pred in sorted(predicates, key=lambda p: p.id):
        (lt, lc), (rt, rc) = _endpoints(pred)
        ndv = max(catalog.table(lt).column(lc).distinct_count, catalog.table(rt).column(rc).distinct_count)
        card /= ndv
    return card


def estimate_cardinality(relations, predicates, provider: CardinalityProvider, catalog: Catalog) -> float:
    """Row count of joining ``relations`` under the equi-join ``predicates``."""
    relations = set(relations)
    for name in relations:
        catalog.position(name)
    for pred in predicates:
        for table, _ in _endpoints(pred):
            if table not in relations:
                raise CatalogError(f"predicate {pred.id} references {table!r} outside {sorted(relations)}")
    if provider.mode == CardinalityMode.LOOKUP:
        key = lookup_key(relations, (p.id for p in predicates))
        try:
            value = provider.lookup_table[key]
        except KeyError:
            raise LookupMiss(f"no cardinality for relations={list(key[0])} predicates={list(key[1])}") from None
        return float(value)
    return independence_estimate(relations, predicates, catalog)


def applicable_predicates(relations, predicates) -> list:
    rels = set(relations)
    return [p for p in predicates if p.left.table in rels and p.right.table in rels]


def cardinality_of_plan(plan, provider: CardinalityProvider, catalog: Catalog, predicates=()) -> float:
    """Cardinality of a plan's output; depends only on its relation set."""
    rels = plan.relations
    return estimate_cardinality(rels, applicable_predicates(rels, predicates), provider, catalog)


def build_lookup_table(
    queries, catalog: Catalog, *, noise_sigma: float = 0.0, seed: int = 0
) -> dict[tuple[tuple[str, ...], tuple[str, ...]], float]:
    """Enumerate every relation subset of every query and record a cardinality.

    With ``noise_sigma > 0`` each entry is the independence estimate scaled by
    a log-normal factor, emulating an estimator that is not independence-based.
    The factor is keyed on the entry so it does not depend on query order.
    """
    table = {}
    for query in queries:
        rels = sorted(query.relations)
        for size in range(1, len(rels) + 1):
            for subset in itertools.combinations(rels, size):
                preds = applicable_predicates(subset, query.predicates)
                key = lookup_key(subset, (p.id for p in preds))
                if key in table:
                    continue
                card = independence_estimate(subset, preds, catalog)
                if noise_sigma > 0 and size > 1:
                    digest = hashlib.sha256(f"{seed}|{key}".encode()).digest()
                    gauss = np.random.default_rng(int.from_bytes(digest[:8], "little")).standard_normal()
                    card *= math.exp(noise_sigma * gauss)
                table[key] = card
    return table


def save_lookup(table: Mapping, path) -> None:
    entries = [
        {"relations": list(rels), "predicates": list(preds), "cardinality": float(card)}
        for (rels, preds), card in sorted(table.items())
    ]
    Path(path).write_text(json.dumps({"entries": entries}, indent=1) + "\n")


def load_lookup(path) -> dict:
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise CatalogError(f"{path}: parse error at line {exc.lineno}: {exc.msg}") from exc
    table = {}
    for i, entry in enumerate(_require(doc, "entries", "lookup", list)):
        where = f"entries[{i}]"
        card = entry.get("cardinality") if isinstance(entry, dict) else None
        if not isinstance(card, (int, float)) or card < 0:
            raise CatalogError(f"{where}.cardinality: expected non-negative number")
        key = lookup_key(_require(entry, "relations", where, list), _require(entry, "predicates", where, list))
        table[key] = float(card)
    return table
