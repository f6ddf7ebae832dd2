"""Cross-validated training and evaluation, summary statistics, latency and occurrence reports.

Every report is a CSV file preceded by ``#``-prefixed ``key: value`` header
lines carrying the master seed and the settings needed to reproduce it.
"""

from __future__ import annotations

import csv
import io
import json
import os
import time
from collections import Counter
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from .agents import Policy, PolicyKind, TrainingError, plan_query, train
from .catalog import Catalog, CardinalityProvider
from .dp_enum import dp_left_deep
from .plancost import CostParams, is_left_deep, plan_to_text, reward_from_cost
from .rl_env import JoinOrderEnv
from .workload import Split, Workload, WorkloadError

DP_PLANNER = "DP"
REL_TOL = 1e-9


class ExperimentError(ValueError):
    pass


# --- cost reports -------------------------------------------------------------


@dataclass(frozen=True)
class CostRecord:
    query_id: str
    relation_count: int
    planner: str
    plan: str
    cost: float
    reward: float
    latency: float  # seconds
    fold: int
    left_deep: bool


@dataclass(frozen=True)
class Summary:
    minimum: float
    q25: float
    median: float
    q75: float
    maximum: float
    outliers: tuple[str, ...]

    @property
    def iqr(self) -> float:
        return self.q75 - self.q25


COST_COLUMNS = ["query_id", "relation_count", "planner", "plan", "cost", "reward", "latency_s", "fold", "left_deep"]


@dataclass
class CostReport:
    records: list[CostRecord] = field(default_factory=list)
    header: dict = field(default_factory=dict)

    @property
    def planners(self) -> list[str]:
        return sorted({r.planner for r in self.records})

    def for_planner(self, planner: str) -> list[CostRecord]:
        rows = [r for r in self.records if r.planner == planner]
        if not rows:
            raise ExperimentError(f"planner {planner!r} not in report")
        return rows

    def costs(self, planner: str) -> dict[str, float]:
        return {r.query_id: r.cost for r in self.for_planner(planner)}

    def summary(self, planner: str) -> Summary:
        rows = self.for_planner(planner)
        costs = np.array([r.cost for r in rows])
        lo, q25, med, q75, hi = np.percentile(costs, [0, 25, 50, 75, 100])
        fence = q75 + 1.5 * (q75 - q25)
        return Summary(float(lo), float(q25), float(med), float(q75), float(hi),
                       tuple(r.query_id for r in rows if r.cost > fence))

    def summaries(self) -> dict[str, Summary]:
        return {p: self.summary(p) for p in self.planners}

    def merged(self, other: CostReport) -> CostReport:
        return CostReport(self.records + other.records, {**self.header, **other.header})

    def write_csv(self, path, *, timings: bool = False) -> None:
        """Per-query rows.

        Latencies are wall-clock, so they are left out unless ``timings`` is
        set; without them the file is byte-identical across reruns.
        """
        columns = COST_COLUMNS if timings else [c for c in COST_COLUMNS if c != "latency_s"]
        rows = []
        for r in self.records:
            row = [r.query_id, r.relation_count, r.planner, r.plan, repr(r.cost), repr(r.reward), repr(r.latency), r.fold,
                   int(r.left_deep)]
            if not timings:
                del row[6]
            rows.append(row)
        _write_csv(path, self.header, columns, rows)

    def write_summary_csv(self, path) -> None:
        rows = []
        for planner, s in self.summaries().items():
            rows.append([planner, repr(s.minimum), repr(s.q25), repr(s.median), repr(s.q75), repr(s.maximum),
                         " ".join(s.outliers)])
        _write_csv(path, self.header, ["planner", "min", "q25", "median", "q75", "max", "outliers"], rows)


def detect_outliers(report: CostReport, planner: str) -> list[str]:
    """Queries whose cost is strictly above ``q75 + 1.5 * IQR`` for ``planner``."""
    return list(report.summary(planner).outliers)


def read_cost_report(path) -> CostReport:
    header, rows = _read_csv(path)
    records = [
        CostRecord(row["query_id"], int(row["relation_count"]), row["planner"], row["plan"], float(row["cost"]),
                   float(row["reward"]), float(row.get("latency_s", "nan")), int(row["fold"]), row["left_deep"] == "1")
        for row in rows
    ]
    return CostReport(records, header)


# --- csv with a header block ---------------------------------------------------


def _write_csv(path, header: dict, columns, rows) -> None:
    buf = io.StringIO()
    for key in sorted(header):
        buf.write(f"# {key}: {json.dumps(header[key], sort_keys=True)}\n")
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(columns)
    writer.writerows(rows)
    Path(path).write_text(buf.getvalue())


def _read_csv(path) -> tuple[dict, list[dict]]:
    header = {}
    body = []
    for line in Path(path).read_text().splitlines(keepends=True):
        if line.startswith("# ") and not body:
            key, _, value = line[2:].partition(": ")
            header[key] = json.loads(value)
        else:
            body.append(line)
    return header, list(csv.DictReader(body))


# --- planners ------------------------------------------------------------------


@dataclass(frozen=True)
class Planner:
    """Something that turns a query into ``(plan, cost)``; ``learned`` selects the latency fit."""

    name: str
    plan: Callable
    learned: bool


def dp_planner(catalog: Catalog, provider: CardinalityProvider, params: CostParams) -> Planner:
    def run(query):
        res = dp_left_deep(query, provider, catalog, params)
        return res.plan, res.cost

    return Planner(DP_PLANNER, run, learned=False)


def policy_planner(name: str, policy: Policy, env: JoinOrderEnv) -> Planner:
    def run(query):
        planned = plan_query(policy, query, env)
        return planned.plan, planned.cost

    return Planner(name, run, learned=True)


# --- experiments ---------------------------------------------------------------


@dataclass(frozen=True)
class AgentSpec:
    kind: PolicyKind
    config: object  # DqnConfig or PpoConfig

    @property
    def label(self) -> str:
        return PolicyKind(self.kind).value


def member_id(kind, seed: int) -> str:
    return f"{PolicyKind(kind).value}-s{seed}"


def ensemble_id(kind) -> str:
    return f"{PolicyKind(kind).value}-ensemble"


def derive_seed(master_seed: int, fold: int, member_seed: int) -> int:
    """Training seed for one run; identical across agent kinds so runs are paired."""
    return int(np.random.SeedSequence([master_seed, fold, member_seed]).generate_state(1)[0])


@dataclass
class ExperimentResult:
    policies: dict[int, dict[str, Policy]]  # fold -> member id -> policy
    fold_reports: dict[int, CostReport]
    report: CostReport  # cross-fold, each query once per planner


def _train_job(args):
    env, train_queries, spec, seed, fold, member = args
    try:
        return train(spec.label, env, train_queries, spec.config, seed)
    except TrainingError as exc:
        raise TrainingError(f"fold {fold}, {spec.label} seed {member}: {exc}") from exc


def _record(query, planner: str, plan, cost: float, latency: float, fold: int, params: CostParams) -> CostRecord:
    return CostRecord(query.id, query.k, planner, plan_to_text(plan), float(cost), reward_from_cost(cost, params),
                      latency, fold, is_left_deep(plan))


def run_experiment(
    catalog: Catalog,
    workload: Workload,
    split: Split,
    agents,
    seeds,
    ensemble_size: int = 5,
    *,
    provider: CardinalityProvider | None = None,
    params: CostParams | None = None,
    master_seed: int = 0,
    folds=None,
    jobs: int = 1,
    require_full_coverage: bool = True,
) -> ExperimentResult:
    """Train every agent with every seed on each fold, then evaluate members, ensembles and DP on its test set.

    The first ``ensemble_size`` seeds of each agent form its ensemble. Runs
    with the same member seed share a derived training seed across agent
    kinds. ``jobs > 1`` trains in worker processes; results do not depend on it.
    """
    provider = provider or CardinalityProvider.estimated()
    params = params or CostParams()
    agents = [a if isinstance(a, AgentSpec) else AgentSpec(PolicyKind(a[0].upper()), a[1]) for a in agents]
    seeds = [int(s) for s in seeds]
    if len(set(seeds)) != len(seeds):
        raise ExperimentError("member seeds must be distinct")
    if agents and not 1 <= ensemble_size <= len(seeds):
        raise ExperimentError(f"ensemble size {ensemble_size} needs between 1 and {len(seeds)} seeds")
    try:
        split.check(workload, require_full_test_coverage=require_full_coverage)
    except WorkloadError as exc:
        raise ExperimentError(f"split does not fit the workload: {exc}") from exc
    folds = list(range(len(split))) if folds is None else [int(f) for f in folds]
    env = JoinOrderEnv(catalog, provider, params)
    header = {
        "master_seed": master_seed,
        "catalog_digest": catalog.digest(),
        "workload": workload.name,
        "folds": folds,
        "seeds": seeds,
        "ensemble_size": ensemble_size,
        "agents": [{"kind": a.label, "config": a.config.to_dict()} for a in agents],
        "cost_params": {"tau": params.tau, "lam": params.lam, "upper_bound": params.upper_bound,
                        "min_reward": params.min_reward},
        "cardinality": provider.mode.value,
    }

    jobs_list, keys = [], []
    for fold in folds:
        train_queries = workload.subset(split.train(fold))
        for spec in agents:
            for member in seeds:
                jobs_list.append((env, train_queries, spec, derive_seed(master_seed, fold, member), fold, member))
                keys.append((fold, member_id(spec.kind, member)))
    if jobs > 1 and len(jobs_list) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            trained = list(pool.map(_train_job, jobs_list))
    else:
        trained = [_train_job(job) for job in jobs_list]
    policies: dict[int, dict[str, Policy]] = {fold: {} for fold in folds}
    for (fold, mid), policy in zip(keys, trained):
        policies[fold][mid] = policy

    dp = dp_planner(catalog, provider, params)
    fold_reports = {}
    for fold in folds:
        records = []
        for query in workload.subset(split.test(fold)):
            start = time.perf_counter()
            plan, cost = dp.plan(query)
            records.append(_record(query, DP_PLANNER, plan, cost, time.perf_counter() - start, fold, params))
            for spec in agents:
                members = []
                for member in seeds:
                    mid = member_id(spec.kind, member)
                    planned = plan_query(policies[fold][mid], query, env)
                    records.append(_record(query, mid, planned.plan, planned.cost, planned.latency, fold, params))
                    members.append(records[-1])
                pool = members[:ensemble_size]
                # ties go to the lowest member index, like ensemble_plan
                best = min(range(len(pool)), key=lambda i: (pool[i].cost, i))
                latency = sum(r.latency for r in pool)
                records.append(CostRecord(query.id, query.k, ensemble_id(spec.kind), pool[best].plan, pool[best].cost,
                                          pool[best].reward, latency, fold, pool[best].left_deep))
        fold_reports[fold] = CostReport(records, {**header, "fold": fold})

    seen: set[tuple[str, str]] = set()
    combined = []
    for fold in folds:
        for r in fold_reports[fold].records:
            if (r.planner, r.query_id) not in seen:
                seen.add((r.planner, r.query_id))
                combined.append(r)
    report = CostReport(combined, header)
    audit_report(report)
    return ExperimentResult(policies, fold_reports, report)


def audit_report(report: CostReport) -> None:
    """Check the cross-planner invariants of a report; raises :class:`ExperimentError`.

    Every query has exactly one record per planner, DP is never beaten by a
    left-deep plan, and each ensemble cost is the minimum over its members
    (the first ``ensemble_size`` seeds in the header).
    """
    by_query: dict[str, dict[str, CostRecord]] = {}
    for r in report.records:
        slot = by_query.setdefault(r.query_id, {})
        if r.planner in slot:
            raise ExperimentError(f"query {r.query_id} appears twice for planner {r.planner}")
        slot[r.planner] = r
    planners = set(report.planners)
    members = report.header.get("seeds", [])[: report.header.get("ensemble_size", 0)]
    for qid, rows in by_query.items():
        if set(rows) != planners:
            raise ExperimentError(f"query {qid} lacks planners {sorted(planners - set(rows))}")
        dp = rows.get(DP_PLANNER)
        for name, r in rows.items():
            if dp is not None and r.left_deep and dp.cost > r.cost * (1 + REL_TOL):
                raise ExperimentError(f"left-deep plan of {name} beats DP on {qid}: {r.cost} < {dp.cost}")
            if name.endswith("-ensemble"):
                kind = name[: -len("-ensemble")]
                best = min(rows[member_id(kind, m)].cost for m in members)
                if r.cost != best:
                    raise ExperimentError(f"ensemble cost on {qid} is not the minimum of its members")


# --- latency ---------------------------------------------------------------------


@dataclass(frozen=True)
class BucketStat:
    mean: float
    median: float
    samples: int


@dataclass
class LatencyReport:
    buckets: dict[int, dict[str, BucketStat]]  # relation count -> planner -> stat
    fits: dict[str, tuple[float, float]]  # learned planner -> (slope, intercept) of median seconds vs k
    dp_ratios: dict[str, dict[int, float]]  # non-learned planner -> k -> median(k) / median(previous k)
    header: dict = field(default_factory=dict)

    def median(self, planner: str, k: int) -> float:
        try:
            return self.buckets[k][planner].median
        except KeyError:
            raise ExperimentError(f"no latency for {planner} at k={k}") from None

    def ratio(self, planner: str, k_small: int, k_large: int) -> float:
        return self.median(planner, k_large) / self.median(planner, k_small)

    def write_csv(self, path) -> None:
        rows = []
        for k in sorted(self.buckets):
            for planner, stat in sorted(self.buckets[k].items()):
                fit = self.fits.get(planner)
                ratio = self.dp_ratios.get(planner, {}).get(k)
                rows.append([k, planner, f"{stat.mean:.9f}", f"{stat.median:.9f}", stat.samples,
                             "" if fit is None else repr(fit[0]), "" if fit is None else repr(fit[1]),
                             "" if ratio is None else repr(ratio)])
        _write_csv(path, self.header, ["relation_count", "planner", "mean_s", "median_s", "samples", "fit_slope",
                                       "fit_intercept", "ratio_to_previous"], rows)


MIN_LATENCY_BUCKETS = 4


def latency_benchmark(planners, workload, repetitions: int = 3, *, master_seed: int = 0) -> LatencyReport:
    """Time each planner on each query ``repetitions`` times and aggregate per relation count."""
    if repetitions < 1:
        raise ExperimentError("repetitions must be at least 1")
    queries = list(workload)
    counts = sorted({q.k for q in queries})
    if len(counts) < MIN_LATENCY_BUCKETS:
        raise ExperimentError(f"latency needs at least {MIN_LATENCY_BUCKETS} distinct relation counts, got {counts}")
    planners = list(planners)
    samples: dict[tuple[int, str], list[float]] = {}
    for planner in planners:
        for q in queries:
            for _ in range(repetitions):
                start = time.perf_counter()
                planner.plan(q)
                samples.setdefault((q.k, planner.name), []).append(time.perf_counter() - start)
    buckets = {
        k: {p.name: BucketStat(float(np.mean(s)), float(np.median(s)), len(s))
            for p in planners if (s := samples.get((k, p.name)))}
        for k in counts
    }
    fits, ratios = {}, {}
    for p in planners:
        ks = [k for k in counts if p.name in buckets[k]]
        meds = [buckets[k][p.name].median for k in ks]
        if p.learned:
            slope, intercept = np.polyfit(ks, meds, 1)
            fits[p.name] = (float(slope), float(intercept))
        else:
            ratios[p.name] = {k: meds[i] / meds[i - 1] for i, k in enumerate(ks) if i}
    header = {"master_seed": master_seed, "repetitions": repetitions, "planners": [p.name for p in planners],
              "relation_counts": counts}
    return LatencyReport(buckets, fits, ratios, header)


# --- table occurrence ------------------------------------------------------------


@dataclass
class OccurrenceReport:
    counts: dict[str, tuple[int, int, int]]  # table -> (train, test, outliers)
    header: dict = field(default_factory=dict)

    def write_csv(self, path) -> None:
        _write_csv(path, self.header, ["table", "train", "test", "outliers"],
                   ([t, *c] for t, c in sorted(self.counts.items())))


def occurrence_report(workload: Workload, split: Split, outlier_ids=(), *, fold: int = 0, tables=None) -> OccurrenceReport:
    """How many queries of the train set, test set and outlier subset reference each table."""
    if not 0 <= fold < len(split):
        raise ExperimentError(f"fold {fold} outside [0, {len(split)})")
    try:
        parts = [workload.subset(split.train(fold)), workload.subset(split.test(fold)), workload.subset(outlier_ids)]
    except WorkloadError as exc:
        raise ExperimentError(str(exc)) from None
    tallies = [Counter(r for q in part for r in set(q.relations)) for part in parts]
    names = tables if tables is not None else sorted({r for q in workload for r in q.relations})
    counts = {t: tuple(tally[t] for tally in tallies) for t in names}
    return OccurrenceReport(counts, {"fold": fold, "outliers": sorted(outlier_ids)})


def default_jobs() -> int:
    env = os.environ.get("JOINRL_JOBS")
    if env:
        return max(1, int(env))
    return os.cpu_count() or 1
