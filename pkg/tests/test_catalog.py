import json
import math

import pytest
from hypothesis import given
from hypothesis import strategies as st

from joinrl.catalog import (
    CardinalityProvider,
    CatalogError,
    ColumnStats,
    LookupMiss,
    TableStats,
    build_catalog,
    build_lookup_table,
    cardinality_of_plan,
    catalog_to_dict,
    estimate_cardinality,
    load_catalog,
    load_lookup,
    lookup_key,
    save_catalog,
    save_lookup,
)
from joinrl.plancost import Join, JoinAlgorithm, Leaf
from joinrl.workload import JoinPredicate, JoinQuery, generate_synthetic_catalog, generate_synthetic_workload

from conftest import pred


def _write(tmp_path, doc):
    path = tmp_path / "catalog.json"
    path.write_text(json.dumps(doc))
    return path


def _table(name, rows, ncols):
    return {"name": name, "row_count": rows,
            "columns": [{"name": f"c{i}", "distinct_count": 10, "indexed": i == 0} for i in range(ncols)]}


def test_load_offsets_follow_declaration_order(tmp_path):
    path = _write(tmp_path, {"tables": [_table(n, 100, c) for n, c in zip("ABCD", [3, 3, 3, 2])]})
    cat = load_catalog(path)
    assert cat.total_column_count == 11
    assert [t.global_column_offset for t in cat.tables] == [0, 3, 6, 9]


def test_duplicate_table_name_rejected(tmp_path):
    path = _write(tmp_path, {"tables": [_table("t", 1, 1), _table("t", 2, 1)]})
    with pytest.raises(CatalogError, match="duplicate table"):
        load_catalog(path)


def test_empty_catalog_is_valid(tmp_path):
    cat = load_catalog(_write(tmp_path, {"tables": []}))
    assert cat.total_column_count == 0
    assert cat.n_tables == 0


def test_duplicate_column_and_bad_ndv_rejected(tmp_path):
    doc = {"tables": [{"name": "a", "row_count": 1, "columns": [{"name": "x", "distinct_count": 1},
                                                                  {"name": "x", "distinct_count": 1}]}]}
    with pytest.raises(CatalogError, match="duplicate column"):
        load_catalog(_write(tmp_path, doc))
    doc = {"tables": [{"name": "a", "row_count": 1, "columns": [{"name": "x", "distinct_count": 0}]}]}
    with pytest.raises(CatalogError, match="distinct_count"):
        load_catalog(_write(tmp_path, doc))


def test_parse_error_carries_position(tmp_path):
    path = tmp_path / "bad.json"
    path.write_text('{"tables": [\n  {"name": "a",,}\n]}')
    with pytest.raises(CatalogError, match="line 2"):
        load_catalog(path)


def test_missing_field_names_its_location(tmp_path):
    doc = {"tables": [{"name": "a", "row_count": 5, "columns": [{"name": "x"}]}]}
    with pytest.raises(CatalogError, match=r"tables\[0\]\.columns\[0\].*distinct_count"):
        load_catalog(_write(tmp_path, doc))


def test_save_load_round_trip(tmp_path):
    cat = generate_synthetic_catalog(6, seed=3)
    save_catalog(cat, tmp_path / "c.json")
    again = load_catalog(tmp_path / "c.json")
    assert catalog_to_dict(again) == catalog_to_dict(cat)
    assert again.digest() == cat.digest()


@pytest.fixture
def ab():
    return build_catalog([
        TableStats("A", 1000, (ColumnStats("x", 100, True),)),
        TableStats("B", 500, (ColumnStats("y", 50, False),)),
    ])


def test_base_relation_cardinality(ab):
    assert estimate_cardinality({"A"}, (), CardinalityProvider.estimated(), ab) == 1000


def test_independence_estimate_single_predicate(ab):
    p = pred("A.x=B.y")
    assert estimate_cardinality({"A", "B"}, (p,), CardinalityProvider.estimated(), ab) == 1000 * 500 / 100


def test_lookup_returns_stored_value(ab):
    provider = CardinalityProvider.lookup({lookup_key(["B", "A"], ["A.x=B.y"]): 4321})
    assert estimate_cardinality({"A", "B"}, (pred("A.x=B.y"),), provider, ab) == 4321


def test_lookup_miss_is_an_error(ab):
    provider = CardinalityProvider.lookup({})
    with pytest.raises(LookupMiss):
        estimate_cardinality({"A"}, (), provider, ab)


def test_unknown_relation_and_foreign_predicate(ab):
    with pytest.raises(CatalogError):
        estimate_cardinality({"Z"}, (), CardinalityProvider.estimated(), ab)
    with pytest.raises(CatalogError, match="outside"):
        estimate_cardinality({"A"}, (pred("A.x=B.y"),), CardinalityProvider.estimated(), ab)


def test_plan_cardinality_is_shape_invariant(shop_catalog, shop_query):
    est = CardinalityProvider.estimated()
    preds = shop_query.predicates
    ab = Join(Leaf("P"), Leaf("OI"), JoinAlgorithm.HASH)
    ba = Join(Leaf("OI"), Leaf("P"), JoinAlgorithm.HASH)
    assert cardinality_of_plan(ab, est, shop_catalog, preds) == cardinality_of_plan(ba, est, shop_catalog, preds)
    left = Join(Join(Leaf("P"), Leaf("OI"), JoinAlgorithm.HASH), Leaf("O"), JoinAlgorithm.HASH)
    right = Join(Leaf("P"), Join(Leaf("OI"), Leaf("O"), JoinAlgorithm.HASH), JoinAlgorithm.HASH)
    assert cardinality_of_plan(left, est, shop_catalog, preds) == cardinality_of_plan(right, est, shop_catalog, preds)
    assert cardinality_of_plan(Leaf("C"), est, shop_catalog, preds) == 1000


def test_lookup_built_from_estimates_matches_estimated_mode():
    cat = generate_synthetic_catalog(7, seed=11)
    wl = generate_synthetic_workload(cat, 15, 2, 6, seed=12)
    lookup = CardinalityProvider.lookup(build_lookup_table(list(wl), cat))
    est = CardinalityProvider.estimated()
    for (rels, pids), value in build_lookup_table(list(wl), cat).items():
        preds = [JoinPredicate.parse(p) for p in pids]
        assert estimate_cardinality(rels, preds, lookup, cat) == estimate_cardinality(rels, preds, est, cat) == value


def test_noisy_lookup_is_order_independent_and_deterministic():
    cat = generate_synthetic_catalog(6, seed=1)
    queries = list(generate_synthetic_workload(cat, 10, 3, 6, seed=2))
    a = build_lookup_table(queries, cat, noise_sigma=1.0, seed=9)
    b = build_lookup_table(queries[::-1], cat, noise_sigma=1.0, seed=9)
    assert a == b
    plain = build_lookup_table(queries, cat)
    # base relations are never perturbed
    assert all(a[k] == plain[k] for k in a if len(k[0]) == 1)
    assert any(a[k] != plain[k] for k in a if len(k[0]) > 1)


def test_lookup_file_round_trip(tmp_path):
    cat = generate_synthetic_catalog(5, seed=4)
    table = build_lookup_table(list(generate_synthetic_workload(cat, 5, 2, 4, seed=5)), cat, noise_sigma=0.5)
    save_lookup(table, tmp_path / "l.json")
    assert load_lookup(tmp_path / "l.json") == table


def test_lookup_file_rejects_negative(tmp_path):
    path = tmp_path / "l.json"
    path.write_text(json.dumps({"entries": [{"relations": ["a"], "predicates": [], "cardinality": -1}]}))
    with pytest.raises(CatalogError):
        load_lookup(path)


@given(rows=st.lists(st.integers(0, 10**6), min_size=2, max_size=2),
       ndv=st.lists(st.integers(1, 10**6), min_size=2, max_size=2))
def test_estimate_is_non_negative_and_symmetric(rows, ndv):
    cat = build_catalog([
        TableStats("a", rows[0], (ColumnStats("x", ndv[0], False),)),
        TableStats("b", rows[1], (ColumnStats("y", ndv[1], False),)),
    ])
    est = CardinalityProvider.estimated()
    value = estimate_cardinality({"a", "b"}, (pred("a.x=b.y"),), est, cat)
    assert value >= 0
    assert value == estimate_cardinality({"b", "a"}, (pred("b.y=a.x"),), est, cat)
    assert math.isclose(value, rows[0] * rows[1] / max(ndv), rel_tol=1e-12)
