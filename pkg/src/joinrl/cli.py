"""Command-line entry point: ``joinrl <subcommand> [flags]``.

Settings come from built-in defaults, then an optional JSON ``--config`` file
(flat keys, or one object per subcommand), then flags; flags win. The output
directory and worker count may also come from ``JOINRL_OUT`` and
``JOINRL_JOBS``. Exit codes: 0 success, 1 runtime failure, 2 usage or
configuration error.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path
from time import perf_counter

from . import __version__
from .agents import (
    DQN_PRESETS,
    PPO_PRESETS,
    PolicyError,
    PolicyKind,
    TrainingError,
    load_policy,
    preset,
    save_policy,
    train,
)
from .catalog import CardinalityProvider, CatalogError, build_lookup_table, load_catalog, load_lookup, save_catalog, save_lookup
from .dp_enum import PlannerLimitError, dp_left_deep
from .experiment import (
    DP_PLANNER,
    AgentSpec,
    CostRecord,
    CostReport,
    ExperimentError,
    _write_csv,
    audit_report,
    default_jobs,
    dp_planner,
    ensemble_id,
    latency_benchmark,
    occurrence_report,
    policy_planner,
    read_cost_report,
    run_experiment,
)
from .neuralnet import NetworkError
from .plancost import CostParams, is_left_deep, plan_to_text, reward_from_cost
from .rl_env import JoinOrderEnv, calibrate_upper_bound
from .workload import (
    WorkloadError,
    generate_synthetic_catalog,
    generate_synthetic_workload,
    load_split,
    load_workload,
    make_curated_split,
    make_random_folds,
    save_split,
    save_workload,
)

log = logging.getLogger("joinrl")


class UsageError(Exception):
    pass


# defaults for every config key; flags use None so "not given" can be told apart
DEFAULTS = {
    "out": ".",
    "seed": 0,
    "verbose": 0,
    "jobs": None,
    # gen
    "tables": 10,
    "queries": 60,
    "min_relations": 3,
    "max_relations": 8,
    "extra_edges": 0.3,
    "folds": 4,
    "split": "curated",
    "lookup_noise": None,
    # shared inputs
    "catalog": "catalog.json",
    "workload": "workload.json",
    "split_file": "split.json",
    "lookup": None,
    "upper_bound": 1e13,
    "calibrate": False,
    "fold": 0,
    # train
    "agent": None,
    "preset": None,
    "set": [],
    # eval / compare / latency
    "policy": [],
    "all_queries": False,
    "repetitions": 3,
    "timings": False,
    # run
    "agents": [],
    "seeds": [0, 1, 2, 3, 4],
    "ensemble": 5,
    # report
    "costs": "costs.csv",
    "planner": None,
}


def _parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON file of settings; flags override it")
    common.add_argument("--out", help="output directory (env JOINRL_OUT; default .)")
    common.add_argument("--seed", type=int, help="master seed (default 0)")
    common.add_argument("-v", "--verbose", action="count", help="more logging; repeat for debug")

    inputs = argparse.ArgumentParser(add_help=False)
    inputs.add_argument("--catalog", help="catalog JSON (default catalog.json)")
    inputs.add_argument("--workload", help="workload JSON (default workload.json)")
    inputs.add_argument("--split-file", dest="split_file", help="split JSON (default split.json)")
    inputs.add_argument("--lookup", help="cardinality lookup JSON; default is the independence estimate")
    inputs.add_argument("--upper-bound", dest="upper_bound", type=float, help="reward clipping bound (default 1e13)")
    inputs.add_argument("--calibrate", action="store_true", default=None,
                        help="set the bound to the 90th percentile of random-plan costs on the train set")
    inputs.add_argument("--fold", type=int, help="fold index (default 0)")

    top = argparse.ArgumentParser(prog="joinrl", description="Join ordering with reinforcement learning.")
    top.add_argument("--version", action="version", version=f"joinrl {__version__}")
    sub = top.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", parents=[common], help="generate a synthetic catalog, workload and split")
    p.add_argument("--tables", type=int, help="table count (default 10)")
    p.add_argument("--queries", type=int, help="query count (default 60)")
    p.add_argument("--min-relations", dest="min_relations", type=int, help="default 3")
    p.add_argument("--max-relations", dest="max_relations", type=int, help="default 8")
    p.add_argument("--extra-edges", dest="extra_edges", type=float,
                   help="extra join edges per table beyond the spanning tree (default 0.3)")
    p.add_argument("--folds", type=int, help="fold count (default 4)")
    p.add_argument("--split", choices=["curated", "random"], help="split mode (default curated)")
    p.add_argument("--lookup-noise", dest="lookup_noise", type=float,
                   help="also write lookup.json with log-normal noise of this sigma")

    p = sub.add_parser("train", parents=[common, inputs], help="train one policy on a fold's train set")
    p.add_argument("--agent", choices=["dqn", "ddqn", "ppo"], help="agent kind")
    p.add_argument("--preset", help=f"one of {', '.join([*DQN_PRESETS, *PPO_PRESETS])}")
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one preset field (repeatable)")

    for name, text in (("eval", "cost of each policy on a fold's test set"),
                       ("compare", "DP against each policy and their ensemble")):
        p = sub.add_parser(name, parents=[common, inputs], help=text)
        p.add_argument("--policy", action="append", help="policy file (repeatable)")
        p.add_argument("--all-queries", dest="all_queries", action="store_true", default=None,
                       help="evaluate on the whole workload instead of the fold's test set")
        p.add_argument("--timings", action="store_true", default=None, help="include wall-clock latencies")

    p = sub.add_parser("latency", parents=[common, inputs], help="planning latency per relation count")
    p.add_argument("--policy", action="append", help="policy file (repeatable)")
    p.add_argument("--repetitions", type=int, help="timings per query and planner (default 3)")

    sub.add_parser("dp", parents=[common, inputs], help="left-deep DP plans for every workload query")

    p = sub.add_parser("run", parents=[common, inputs], help="full cross-validated experiment")
    p.add_argument("--agents", nargs="+", metavar="KIND:PRESET", help="e.g. ppo:ppo-desk ddqn:ddqn-desk")
    p.add_argument("--seeds", nargs="+", type=int, help="member seeds (default 0 1 2 3 4)")
    p.add_argument("--ensemble", type=int, help="ensemble size (default 5)")
    p.add_argument("--jobs", type=int, help="worker processes (env JOINRL_JOBS; default all cores)")
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one field of every agent preset")

    p = sub.add_parser("report", parents=[common], help="summary, outliers and table occurrence from a cost CSV")
    p.add_argument("--costs", help="cost CSV written by eval, compare or run")
    p.add_argument("--planner", help="planner whose outliers feed the occurrence report")
    p.add_argument("--workload", help="workload JSON, enables the occurrence report")
    p.add_argument("--catalog", help="catalog JSON for the workload")
    p.add_argument("--split-file", dest="split_file", help="split JSON for the occurrence report")
    p.add_argument("--fold", type=int, help="fold index (default 0)")
    return top


def resolve(args: argparse.Namespace) -> dict:
    """Merge defaults, config file and flags into one settings dict."""
    settings = dict(DEFAULTS)
    if args.config:
        try:
            doc = json.loads(Path(args.config).read_text())
        except (OSError, ValueError) as exc:
            raise UsageError(f"cannot read config {args.config}: {exc}") from None
        if not isinstance(doc, dict):
            raise UsageError("config file must hold a JSON object")
        flat = {k: v for k, v in doc.items() if not isinstance(v, dict)}
        section = doc.get(args.command, {})
        for key, value in {**flat, **section}.items():
            key = key.replace("-", "_")
            if key not in DEFAULTS:
                raise UsageError(f"unknown config key {key!r}")
            settings[key] = value
    if os.environ.get("JOINRL_OUT") and not (args.config and "out" in doc):
        settings["out"] = os.environ["JOINRL_OUT"]
    for key, value in vars(args).items():
        if key in DEFAULTS and value is not None:
            settings[key] = value
    settings["command"] = args.command
    return settings


def _exists(path, what: str) -> Path:
    p = Path(path)
    if not p.is_file():
        raise UsageError(f"{what} file not found: {path}")
    return p


def _out_dir(settings) -> Path:
    out = Path(settings["out"])
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise UsageError(f"cannot create output directory {out}: {exc}") from None
    return out


def _inputs(settings, *, need_split: bool = True):
    catalog = load_catalog(_exists(settings["catalog"], "catalog"))
    workload = load_workload(_exists(settings["workload"], "workload"), catalog)
    split = load_split(_exists(settings["split_file"], "split")) if need_split else None
    if split is not None and not 0 <= settings["fold"] < len(split):
        raise UsageError(f"fold {settings['fold']} outside [0, {len(split)})")
    if settings["lookup"]:
        provider = CardinalityProvider.lookup(load_lookup(_exists(settings["lookup"], "lookup")))
    else:
        provider = CardinalityProvider.estimated()
    return catalog, workload, split, provider


def _params(settings, catalog, provider, calibration_queries) -> CostParams:
    bound = float(settings["upper_bound"])
    if settings["calibrate"]:
        env = JoinOrderEnv(catalog, provider)
        bound = calibrate_upper_bound(env, calibration_queries, seed=settings["seed"])
    return CostParams(upper_bound=bound)


def _header(settings, **extra) -> dict:
    keep = {k: v for k, v in settings.items() if k not in ("verbose", "jobs", "config")}
    return {"config": keep, "master_seed": settings["seed"], **extra}


def _parse_overrides(pairs) -> dict:
    overrides = {}
    for pair in pairs or []:
        key, sep, value = pair.partition("=")
        if not sep:
            raise UsageError(f"override {pair!r} is not KEY=VALUE")
        try:
            overrides[key] = json.loads(value)
        except ValueError:
            overrides[key] = value
    return overrides


def _config_for(kind: str, preset_name: str, overrides: dict):
    if preset_name is None:
        raise UsageError("--preset is required")
    known = PPO_PRESETS if kind == "ppo" else DQN_PRESETS
    if preset_name not in known:
        raise UsageError(f"preset {preset_name!r} does not exist for agent {kind}; known: {', '.join(known)}")
    try:
        return preset(preset_name, **overrides)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"bad preset override: {exc}") from None


# --- subcommands --------------------------------------------------------------


def cmd_gen(settings) -> int:
    out = _out_dir(settings)
    seed = settings["seed"]
    try:
        catalog = generate_synthetic_catalog(settings["tables"], seed, extra_edge_fraction=settings["extra_edges"])
        max_rel = min(settings["max_relations"], catalog.n_tables)
        workload = generate_synthetic_workload(catalog, settings["queries"], settings["min_relations"], max_rel, seed + 1)
        if settings["split"] == "curated":
            split = make_curated_split(workload, catalog, settings["folds"], seed + 2)
        else:
            split = make_random_folds(workload, settings["folds"], seed + 2)
    except (WorkloadError, CatalogError) as exc:
        raise UsageError(str(exc)) from None
    save_catalog(catalog, out / "catalog.json")
    save_workload(workload, out / "workload.json")
    save_split(split, out / "split.json")
    written = ["catalog.json", "workload.json", "split.json"]
    if settings["lookup_noise"] is not None:
        save_lookup(build_lookup_table(list(workload), catalog, noise_sigma=settings["lookup_noise"], seed=seed + 3),
                    out / "lookup.json")
        written.append("lookup.json")
    print(f"wrote {', '.join(written)} to {out} ({catalog.n_tables} tables, {len(workload)} queries, "
          f"{len(split)} folds)")
    return 0


def cmd_train(settings) -> int:
    kind = settings["agent"]
    if kind is None:
        raise UsageError("--agent is required")
    config = _config_for(kind, settings["preset"], _parse_overrides(settings["set"]))
    catalog, workload, split, provider = _inputs(settings)
    fold = settings["fold"]
    train_queries = workload.subset(split.train(fold))
    params = _params(settings, catalog, provider, train_queries)
    env = JoinOrderEnv(catalog, provider, params)
    out = _out_dir(settings)
    log.info("training %s (%s) on fold %d: %d queries, upper bound %g", kind, settings["preset"], fold,
             len(train_queries), params.upper_bound)
    policy = train(kind, env, train_queries, config, settings["seed"])
    stem = f"{kind}-f{fold}-s{settings['seed']}"
    save_policy(policy, out / f"{stem}.mlp")
    policy.metrics.write_csv(out / f"{stem}-metrics.csv")
    print(f"wrote {out / (stem + '.mlp')} (config {policy.config_digest}, {policy.steps} steps)")
    return 0


def _load_policies(settings, catalog):
    paths = settings["policy"]
    if not paths:
        raise UsageError("at least one --policy is required")
    policies = []
    for path in paths:
        try:
            policies.append(load_policy(_exists(path, "policy"), catalog=catalog))
        except (PolicyError, NetworkError) as exc:
            raise UsageError(str(exc)) from None
    return policies


def _policy_names(policies, paths) -> list[str]:
    names = [f"{p.kind.value}-{Path(path).stem}" for p, path in zip(policies, paths)]
    if len(set(names)) != len(names):
        names = [f"{n}#{i}" for i, n in enumerate(names)]
    return names


def _evaluate(settings, *, with_dp: bool) -> int:
    catalog, workload, split, provider = _inputs(settings)
    policies = _load_policies(settings, catalog)
    fold = settings["fold"]
    queries = list(workload) if settings["all_queries"] else workload.subset(split.test(fold))
    params = _params(settings, catalog, provider, workload.subset(split.train(fold)))
    env = JoinOrderEnv(catalog, provider, params)
    names = _policy_names(policies, settings["policy"])
    planners = [policy_planner(n, p, env) for n, p in zip(names, policies)]
    if with_dp:
        planners.insert(0, dp_planner(catalog, provider, params))
    records = []
    for q in queries:
        members = []
        for planner in planners:
            start = perf_counter()
            plan, cost = planner.plan(q)
            rec = CostRecord(q.id, q.k, planner.name, plan_to_text(plan), float(cost), reward_from_cost(cost, params),
                             perf_counter() - start, fold, is_left_deep(plan))
            records.append(rec)
            if planner.learned:
                members.append(rec)
        if with_dp and len(members) > 1:
            best = min(range(len(members)), key=lambda i: (members[i].cost, i))
            b = members[best]
            records.append(CostRecord(q.id, q.k, "ensemble", b.plan, b.cost, b.reward,
                                      sum(m.latency for m in members), fold, b.left_deep))
    report = CostReport(records, _header(settings, catalog_digest=catalog.digest(),
                                         policies=[p.config_digest for p in policies]))
    audit_report(report)
    out = _out_dir(settings)
    name = "compare" if with_dp else "eval"
    report.write_csv(out / f"{name}-costs.csv", timings=bool(settings["timings"]))
    report.write_summary_csv(out / f"{name}-summary.csv")
    _echo_summary(report)
    return 0


def _echo_summary(report: CostReport) -> None:
    print(f"{'planner':<24}{'min':>12}{'q25':>12}{'median':>12}{'q75':>12}{'max':>12}  outliers")
    for planner, s in report.summaries().items():
        print(f"{planner:<24}{s.minimum:>12.4g}{s.q25:>12.4g}{s.median:>12.4g}{s.q75:>12.4g}{s.maximum:>12.4g}  "
              f"{len(s.outliers)}")


def cmd_eval(settings) -> int:
    return _evaluate(settings, with_dp=False)


def cmd_compare(settings) -> int:
    return _evaluate(settings, with_dp=True)


def cmd_latency(settings) -> int:
    catalog, workload, _, provider = _inputs(settings, need_split=False)
    params = CostParams(upper_bound=float(settings["upper_bound"]))
    env = JoinOrderEnv(catalog, provider, params)
    planners = [dp_planner(catalog, provider, params)]
    if settings["policy"]:
        policies = _load_policies(settings, catalog)
        planners += [policy_planner(n, p, env) for n, p in zip(_policy_names(policies, settings["policy"]), policies)]
    report = latency_benchmark(planners, workload, settings["repetitions"], master_seed=settings["seed"])
    report.header.update(_header(settings))
    out = _out_dir(settings)
    report.write_csv(out / "latency.csv")
    print(f"{'k':>3}  " + "".join(f"{p.name:>22}" for p in planners) + "   (median ms)")
    for k in sorted(report.buckets):
        cells = "".join(f"{report.buckets[k][p.name].median * 1e3:>22.3f}" if p.name in report.buckets[k] else f"{'':>22}"
                        for p in planners)
        print(f"{k:>3}  {cells}")
    return 0


def cmd_dp(settings) -> int:
    catalog, workload, _, provider = _inputs(settings, need_split=False)
    params = CostParams(upper_bound=float(settings["upper_bound"]))
    rows = []
    for q in workload:
        res = dp_left_deep(q, provider, catalog, params)
        rec = res.as_record(q.id)
        rows.append([rec["query_id"], q.k, rec["plan"], rec["cost"], rec["expanded_states"]])
    out = _out_dir(settings)
    _write_csv(out / "dp.csv", _header(settings, catalog_digest=catalog.digest()),
               ["query_id", "relation_count", "plan", "cost", "expanded_states"], rows)
    print(f"wrote {out / 'dp.csv'} ({len(rows)} queries)")
    return 0


def cmd_run(settings) -> int:
    specs = []
    for item in settings["agents"]:
        kind, sep, name = item.partition(":")
        if not sep or kind not in ("dqn", "ddqn", "ppo"):
            raise UsageError(f"agent {item!r} is not KIND:PRESET with KIND in dqn, ddqn, ppo")
        specs.append(AgentSpec(PolicyKind(kind.upper()), _config_for(kind, name, _parse_overrides(settings["set"]))))
    catalog, workload, split, provider = _inputs(settings)
    params = _params(settings, catalog, provider, workload.subset(split.train(0)))
    jobs = settings["jobs"] or default_jobs()
    try:
        result = run_experiment(catalog, workload, split, specs, settings["seeds"], settings["ensemble"],
                                provider=provider, params=params, master_seed=settings["seed"], jobs=jobs,
                                require_full_coverage=False)
    except ExperimentError as exc:
        raise UsageError(str(exc)) from None
    out = _out_dir(settings)
    result.report.header.update(_header(settings))
    result.report.write_csv(out / "run-costs.csv")
    result.report.write_summary_csv(out / "run-summary.csv")
    for fold, members in result.policies.items():
        for mid, policy in members.items():
            save_policy(policy, out / f"{mid.lower()}-f{fold}.mlp")
    _echo_summary(result.report)
    return 0


def cmd_report(settings) -> int:
    report = read_cost_report(_exists(settings["costs"], "cost report"))
    if not report.records:
        raise UsageError(f"{settings['costs']} holds no records")
    out = _out_dir(settings)
    report.write_summary_csv(out / "summary.csv")
    _echo_summary(report)
    planner = settings["planner"] or (ensemble_id(PolicyKind.PPO) if ensemble_id(PolicyKind.PPO) in report.planners
                                      else report.planners[0])
    try:
        outliers = report.summary(planner).outliers
    except ExperimentError as exc:
        raise UsageError(str(exc)) from None
    print(f"outliers for {planner}: {' '.join(outliers) or '(none)'}")
    if Path(settings["workload"]).is_file() and Path(settings["split_file"]).is_file():
        catalog = load_catalog(_exists(settings["catalog"], "catalog"))
        workload = load_workload(settings["workload"], catalog)
        occ = occurrence_report(workload, load_split(settings["split_file"]), outliers, fold=settings["fold"],
                                tables=catalog.table_names)
        occ.header.update(_header(settings, planner=planner))
        occ.write_csv(out / "occurrence.csv")
        print(f"wrote {out / 'occurrence.csv'}")
    return 0


COMMANDS = {
    "gen": cmd_gen,
    "train": cmd_train,
    "eval": cmd_eval,
    "compare": cmd_compare,
    "latency": cmd_latency,
    "dp": cmd_dp,
    "run": cmd_run,
    "report": cmd_report,
}


def main(argv=None) -> int:
    parser = _parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        settings = resolve(args)
        logging.basicConfig(level=[logging.WARNING, logging.INFO, logging.DEBUG][min(settings["verbose"] or 0, 2)],
                            format="%(levelname)s %(name)s: %(message)s")
        return COMMANDS[args.command](settings)
    except UsageError as exc:
        print(f"joinrl {args.command}: {exc}", file=sys.stderr)
        return 2
    except (CatalogError, WorkloadError, PolicyError, PlannerLimitError) as exc:
        # malformed or inconsistent inputs
        print(f"joinrl {args.command}: {exc}", file=sys.stderr)
        return 2
    except (TrainingError, ExperimentError, NetworkError, OSError) as exc:
        print(f"joinrl {args.command}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
