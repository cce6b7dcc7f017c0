"""Command line interface.

Subcommands cover the individual stages (train-levels, build-gp,
synthesize, ingest, fit-drivers, best-response, report) and a pipeline
command that chains them inside one output directory.  Stage failures
surface as StageError naming the stage.  Given a fixed master config,
the pipeline is deterministic: rerunning it produces byte-identical
report files.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import data as data_mod
from . import fitting, game
from .config import MasterConfig
from .errors import InputError, LevelkgpError, StageError
from .gp import ModelCache, fit_state_gp
from .levelk import PolicySet, train_hierarchy

logger = logging.getLogger(__name__)

LEVEL_INTERVAL_EDGES = (
    0.0, 0.3, 0.5, 0.7, 0.9, 1.1, 1.3, 1.5, 1.7, 1.9, 2.1, 2.3, 2.5, 2.7, 3.0,
)
SUCCESS_GRID_BIN_WIDTH = 5.0
STATE_SELECTION_TAG = 1001


# -- reporting ----------------------------------------------------------------


def level_interval_index(level: float) -> int:
    """Bin index for a fitted level; the last interval includes its top edge."""
    edges = LEVEL_INTERVAL_EDGES
    if not edges[0] <= level <= edges[-1]:
        raise InputError(f"level {level} outside [{edges[0]}, {edges[-1]}]")
    for i in range(len(edges) - 1):
        if level < edges[i + 1]:
            return i
    return len(edges) - 2


def _grid_bin(percent: float) -> int:
    return min(int(percent // SUCCESS_GRID_BIN_WIDTH), 19)


def build_report(
    continuous: Sequence[fitting.DriverReport],
    discrete: Sequence[fitting.DriverReport],
) -> dict:
    """Aggregate per-driver reports into the summary document."""
    cont_by_id = {r.driver_id: r for r in continuous}
    disc_by_id = {r.driver_id: r for r in discrete}
    driver_ids = sorted(set(cont_by_id) | set(disc_by_id))

    def method_block(by_id):
        per_driver = {}
        defined = []
        for driver_id in driver_ids:
            report = by_id.get(driver_id)
            pct = report.percent_explained if report is not None else None
            per_driver[driver_id] = pct
            if pct is not None:
                defined.append(pct)
        mean = sum(defined) / len(defined) if defined else None
        return {"mean_percent": mean, "per_driver": per_driver}

    interval_counts = [0] * (len(LEVEL_INTERVAL_EDGES) - 1)
    fitted_levels = []
    for driver_id in driver_ids:
        report = cont_by_id.get(driver_id)
        if report is None:
            continue
        for result in report.results:
            if not result.success:
                continue
            interval_counts[level_interval_index(result.level)] += 1
            fitted_levels.append(
                {
                    "driver_id": driver_id,
                    "state_id": result.state_id,
                    "level": result.level,
                    "crit": result.crit,
                }
            )

    cells: dict[tuple[int, int], int] = {}
    for driver_id in driver_ids:
        cont = cont_by_id.get(driver_id)
        disc = disc_by_id.get(driver_id)
        if cont is None or disc is None:
            continue
        cp, dp = cont.percent_explained, disc.percent_explained
        if cp is None or dp is None:
            continue
        key = (_grid_bin(dp), _grid_bin(cp))
        cells[key] = cells.get(key, 0) + 1

    return {
        "n_drivers": len(driver_ids),
        "continuous": method_block(cont_by_id),
        "discrete": method_block(disc_by_id),
        "level_histogram": {
            "edges": list(LEVEL_INTERVAL_EDGES),
            "counts": interval_counts,
        },
        "success_grid": {
            "bin_width": SUCCESS_GRID_BIN_WIDTH,
            "cells": [
                {"discrete_bin": d, "continuous_bin": c, "count": n}
                for (d, c), n in sorted(cells.items())
            ],
        },
        "fitted_levels": fitted_levels,
    }


def write_report(doc: dict, out_dir: Path) -> list[Path]:
    """Write summary.json and the figure CSVs; returns the paths."""
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = []

    summary_path = out_dir / "summary.json"
    with open(summary_path, "w") as fh:
        json.dump(doc, fh, sort_keys=True, indent=2)
        fh.write("\n")
    paths.append(summary_path)

    fig2 = out_dir / "fig2_success.csv"
    with open(fig2, "w") as fh:
        fh.write("driver_id,continuous_percent,discrete_percent\n")
        cont = doc["continuous"]["per_driver"]
        disc = doc["discrete"]["per_driver"]
        for driver_id in sorted(cont):
            cp = cont[driver_id]
            dp = disc.get(driver_id)
            fh.write(
                f"{driver_id},{'' if cp is None else cp},{'' if dp is None else dp}\n"
            )
    paths.append(fig2)

    fig3 = out_dir / "fig3_grid.csv"
    width = doc["success_grid"]["bin_width"]
    with open(fig3, "w") as fh:
        fh.write(
            "discrete_bin_low,discrete_bin_high,continuous_bin_low,continuous_bin_high,count\n"
        )
        for cell in doc["success_grid"]["cells"]:
            d, c = cell["discrete_bin"], cell["continuous_bin"]
            fh.write(
                f"{d * width},{(d + 1) * width},{c * width},{(c + 1) * width},{cell['count']}\n"
            )
    paths.append(fig3)

    fig4 = out_dir / "fig4_scatter.csv"
    with open(fig4, "w") as fh:
        fh.write("driver_id,state_id,level,crit\n")
        for row in doc["fitted_levels"]:
            fh.write(f"{row['driver_id']},{row['state_id']},{row['level']},{row['crit']}\n")
    paths.append(fig4)

    fig5 = out_dir / "fig5_intervals.csv"
    edges = doc["level_histogram"]["edges"]
    counts = doc["level_histogram"]["counts"]
    total = sum(counts)
    with open(fig5, "w") as fh:
        fh.write("interval_low,interval_high,count,share\n")
        for i, count in enumerate(counts):
            share = count / total if total else 0.0
            fh.write(f"{edges[i]},{edges[i + 1]},{count},{share}\n")
    paths.append(fig5)
    return paths


# -- stage helpers --------------------------------------------------------------


def _select_states(policy_set: PolicySet, cfg: MasterConfig) -> list[int]:
    candidates = policy_set.common_states(cfg.synthesis.min_state_visits)
    if not candidates:
        raise InputError("no state was visited at every level; train longer")
    wanted = cfg.synthesis.n_states
    if len(candidates) <= wanted:
        if len(candidates) < wanted:
            logger.warning(
                "only %d states available, wanted %d", len(candidates), wanted
            )
        return candidates
    rng = np.random.default_rng(
        np.random.SeedSequence([cfg.seed, STATE_SELECTION_TAG])
    )
    picked = rng.choice(len(candidates), size=wanted, replace=False)
    return sorted(candidates[i] for i in picked)


def _fit_models(
    cfg: MasterConfig, policy_set: PolicySet, state_ids: Sequence[int], jobs: int
) -> ModelCache:
    cache = ModelCache()

    def fit_one(sid: int):
        model = fit_state_gp(
            cfg.gp.levels,
            policy_set.discrete_policies(sid),
            bank_entries=cfg.bank,
            optimizer=cfg.optimizer,
            gp_config=cfg.gp,
            state_id=sid,
        )
        cache.put(model)

    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            list(pool.map(fit_one, state_ids))
    else:
        for sid in state_ids:
            fit_one(sid)
    return cache


def _make_fitter(
    cfg: MasterConfig, policy_set: PolicySet, cache: ModelCache
) -> fitting.LevelFitter:
    return fitting.LevelFitter(
        observation_set_builder=policy_set.discrete_policies,
        discrete_levels=cfg.gp.levels,
        bank_entries=cfg.bank,
        optimizer=cfg.optimizer,
        gp_config=cfg.gp,
        fit_cfg=cfg.fit,
        sa_cfg=cfg.sa,
        master_seed=cfg.seed,
        cache=cache,
    )


def _synthesize(cfg: MasterConfig, cache: ModelCache, out_dir: Path) -> dict:
    state_ids = cache.state_ids()
    traj_dir = out_dir / "trajectories"
    traj_dir.mkdir(parents=True, exist_ok=True)
    manifest = {"version": 1, "state_ids": state_ids, "drivers": []}
    for spec in cfg.synthesis.drivers:
        def policy_for(sid: int, level=spec.level):
            return cache.get(sid).policy_at(level)

        actions = data_mod.sample_driver_actions(spec, policy_for, state_ids, cfg.seed)
        csv_path = traj_dir / f"{spec.driver_id}.csv"
        data_mod.export_trajectories(actions, csv_path, cfg.env, cfg.data, ego_id=1)
        manifest["drivers"].append(
            {
                "driver_id": spec.driver_id,
                "level": spec.level,
                "samples_per_state": spec.samples_per_state,
                "vehicle_id": 1,
                "csv": str(csv_path.relative_to(out_dir)),
            }
        )
    with open(out_dir / "synthesis_manifest.json", "w") as fh:
        json.dump(manifest, fh, sort_keys=True)
    return manifest


def _ingest_manifest(
    cfg: MasterConfig, manifest: dict, out_dir: Path
) -> dict[str, fitting.DriverRecord]:
    records: dict[str, fitting.DriverRecord] = {}
    combined = data_mod.IngestSummary()
    for entry in manifest["drivers"]:
        path = out_dir / entry["csv"]
        got, summary = data_mod.ingest_trajectories(path, cfg.env, cfg.data)
        key = str(entry["vehicle_id"])
        if key not in got:
            raise InputError(
                f"no transitions for vehicle {key} in {path}"
            )
        rec = got[key]
        records[entry["driver_id"]] = fitting.DriverRecord(
            driver_id=entry["driver_id"],
            action_count=rec.action_count,
            counts=rec.counts,
        )
        combined.rows_total += summary.rows_total
        combined.rows_accepted += summary.rows_accepted
        combined.rows_rejected += summary.rows_rejected
        combined.n_vehicles += summary.n_vehicles
        combined.n_transitions += summary.n_transitions
        combined.n_states = max(combined.n_states, summary.n_states)
        for reason, count in summary.reject_reasons.items():
            combined.reject_reasons[reason] = (
                combined.reject_reasons.get(reason, 0) + count
            )
    with open(out_dir / "ingest_summary.json", "w") as fh:
        json.dump(combined.to_dict(), fh, sort_keys=True)
    return records


def _fit_all_drivers(
    cfg: MasterConfig,
    records: dict[str, fitting.DriverRecord],
    fitter: fitting.LevelFitter,
    jobs: int,
) -> tuple[list[fitting.DriverReport], list[fitting.DriverReport]]:
    continuous = []
    discrete = []
    for driver_id in sorted(records):
        record = records[driver_id]
        continuous.append(fitter.compare_driver(record, jobs=jobs))
        discrete.append(fitter.compare_driver_discrete(record))
    return continuous, discrete


# -- subcommand implementations ----------------------------------------------


def _load_master(args) -> MasterConfig:
    if getattr(args, "config", None):
        cfg = MasterConfig.from_json(args.config)
    else:
        cfg = MasterConfig()
    overrides = {}
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.jobs is not None:
        overrides["jobs"] = args.jobs
    if args.out_dir is not None:
        overrides["out_dir"] = args.out_dir
    if overrides:
        cfg = MasterConfig.from_dict({**cfg_to_shallow_dict(cfg), **overrides})
    return cfg


def cfg_to_shallow_dict(cfg: MasterConfig) -> dict:
    return {
        "seed": cfg.seed,
        "jobs": cfg.jobs,
        "out_dir": cfg.out_dir,
        "env": cfg.env,
        "rl": cfg.rl,
        "bank": cfg.bank,
        "optimizer": cfg.optimizer,
        "gp": cfg.gp,
        "sa": cfg.sa,
        "fit": cfg.fit,
        "data": cfg.data,
        "synthesis": cfg.synthesis,
    }


def _out_dir(cfg: MasterConfig) -> Path:
    path = Path(cfg.out_dir)
    path.mkdir(parents=True, exist_ok=True)
    return path


def cmd_train_levels(args) -> int:
    cfg = _load_master(args)
    out_dir = _out_dir(cfg)
    policy_set = train_hierarchy(cfg.env, cfg.rl, cfg.seed)
    path = Path(args.out) if args.out else out_dir / "qtables.json"
    policy_set.save(path)
    per_level = {k: len(t.q) for k, t in sorted(policy_set.tables.items())}
    print(json.dumps({"qtables": str(path), "states_per_level": per_level}))
    return 0


def cmd_build_gp(args) -> int:
    cfg = _load_master(args)
    out_dir = _out_dir(cfg)
    qtables = Path(args.qtables) if args.qtables else out_dir / "qtables.json"
    policy_set = PolicySet.load(qtables, cfg.env)
    if args.states:
        state_ids = [int(s) for s in args.states.split(",")]
    else:
        if args.n_states is not None:
            synth = {
                **cfg_to_shallow_dict(cfg),
                "synthesis": {
                    "n_states": args.n_states,
                    "min_state_visits": cfg.synthesis.min_state_visits,
                    "drivers": cfg.synthesis.drivers,
                },
            }
            cfg = MasterConfig.from_dict(synth)
        state_ids = _select_states(policy_set, cfg)
    cache = _fit_models(cfg, policy_set, state_ids, cfg.jobs)
    model_dir = Path(args.model_dir) if args.model_dir else out_dir / "models"
    cache.save_dir(model_dir)
    print(json.dumps({"model_dir": str(model_dir), "n_models": len(cache)}))
    return 0


def cmd_synthesize(args) -> int:
    cfg = _load_master(args)
    out_dir = _out_dir(cfg)
    model_dir = Path(args.model_dir) if args.model_dir else out_dir / "models"
    cache = ModelCache.load_dir(model_dir)
    manifest = _synthesize(cfg, cache, out_dir)
    print(json.dumps({"manifest": str(out_dir / "synthesis_manifest.json"),
                      "n_drivers": len(manifest["drivers"])}))
    return 0


def cmd_ingest(args) -> int:
    cfg = _load_master(args)
    out_dir = _out_dir(cfg)
    records, summary = data_mod.ingest_trajectories(args.input, cfg.env, cfg.data)
    path = Path(args.out) if args.out else out_dir / "records.json"
    data_mod.save_records(records, path)
    print(json.dumps({"records": str(path), **summary.to_dict()}, sort_keys=True))
    return 0


def cmd_fit_drivers(args) -> int:
    cfg = _load_master(args)
    out_dir = _out_dir(cfg)
    qtables = Path(args.qtables) if args.qtables else out_dir / "qtables.json"
    policy_set = PolicySet.load(qtables, cfg.env)
    model_dir = Path(args.model_dir) if args.model_dir else out_dir / "models"
    cache = ModelCache.load_dir(model_dir)
    records = data_mod.load_records(
        args.records if args.records else out_dir / "records.json"
    )
    fitter = _make_fitter(cfg, policy_set, cache)
    continuous, discrete = _fit_all_drivers(cfg, records, fitter, cfg.jobs)
    cont_path = out_dir / "reports_continuous.json"
    disc_path = out_dir / "reports_discrete.json"
    fitting.save_reports(continuous, cont_path)
    fitting.save_reports(discrete, disc_path)
    print(json.dumps({"continuous": str(cont_path), "discrete": str(disc_path)}))
    return 0


def cmd_best_response(args) -> int:
    try:
        weights = [float(tok) for tok in args.coeffs.split(",")]
    except ValueError as exc:
        raise InputError(f"could not parse --coeffs: {exc}") from exc
    # the responder universe extends one level above the opponent's
    opponent = game.MixedStrategy(weights + [0.0])
    result = game.best_response_set(opponent)
    doc = {
        "opponent": weights,
        "best_response_levels": list(result.levels),
        "strategy": result.strategy.coeffs.tolist(),
        "value": result.value,
    }
    if args.check:
        brute_value, argmax = game.brute_force_best_response(
            opponent, grid_step=args.grid_step
        )
        supports_ok = all(
            set(s.support()) <= set(result.levels) for s in argmax
        )
        doc["brute_force"] = {
            "value": brute_value,
            "n_argmax": len(argmax),
            "value_matches": bool(abs(brute_value - result.value) <= 1e-12),
            "supports_within_set": bool(supports_ok),
        }
    print(json.dumps(doc, sort_keys=True))
    return 0


def cmd_report(args) -> int:
    cfg = _load_master(args)
    out_dir = _out_dir(cfg)
    continuous = fitting.load_reports(
        args.continuous if args.continuous else out_dir / "reports_continuous.json"
    )
    discrete = fitting.load_reports(
        args.discrete if args.discrete else out_dir / "reports_discrete.json"
    )
    doc = build_report(continuous, discrete)
    paths = write_report(doc, out_dir)
    print(json.dumps({"files": [str(p) for p in paths]}))
    return 0


def cmd_pipeline(args) -> int:
    cfg = _load_master(args)
    out_dir = _out_dir(cfg)
    qtables_path = out_dir / "qtables.json"
    model_dir = out_dir / "models"

    def stage_train() -> PolicySet:
        if args.no_train:
            if not qtables_path.exists():
                raise InputError(f"--no-train but {qtables_path} is missing")
            return PolicySet.load(qtables_path, cfg.env)
        policy_set = train_hierarchy(cfg.env, cfg.rl, cfg.seed)
        policy_set.save(qtables_path)
        return policy_set

    def stage_build_gp(policy_set: PolicySet) -> ModelCache:
        if args.no_train:
            return ModelCache.load_dir(model_dir)
        state_ids = _select_states(policy_set, cfg)
        cache = _fit_models(cfg, policy_set, state_ids, cfg.jobs)
        cache.save_dir(model_dir)
        return cache

    stages = []

    def run(name: str, fn, *fn_args):
        logger.info("pipeline stage %s", name)
        try:
            result = fn(*fn_args)
        except StageError:
            raise
        except LevelkgpError as exc:
            raise StageError(name, str(exc)) from exc
        stages.append(name)
        return result

    policy_set = run("train-levels", stage_train)
    cache = run("build-gp", stage_build_gp, policy_set)
    manifest = run("synthesize", _synthesize, cfg, cache, out_dir)
    records = run("ingest", _ingest_manifest, cfg, manifest, out_dir)

    def stage_fit():
        fitter = _make_fitter(cfg, policy_set, cache)
        continuous, discrete = _fit_all_drivers(cfg, records, fitter, cfg.jobs)
        fitting.save_reports(continuous, out_dir / "reports_continuous.json")
        fitting.save_reports(discrete, out_dir / "reports_discrete.json")
        data_mod.save_records(records, out_dir / "records.json")
        return continuous, discrete

    continuous, discrete = run("fit-drivers", stage_fit)

    def stage_report():
        doc = build_report(continuous, discrete)
        return write_report(doc, out_dir)

    paths = run("report", stage_report)
    print(
        json.dumps(
            {
                "stages": stages,
                "summary": str(out_dir / "summary.json"),
                "files": [str(p) for p in paths],
            }
        )
    )
    return 0


# -- argument parsing -----------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=None, help="override config seed")
    common.add_argument("--jobs", type=int, default=None, help="worker threads")
    common.add_argument("--out-dir", default=None, help="override output directory")
    common.add_argument("--config", default=None, help="master config JSON")
    common.add_argument(
        "-v", "--verbose", action="store_true", help="log stage progress"
    )

    parser = argparse.ArgumentParser(
        prog="levelkgp",
        description="Continuous level-k driver models over per-state GPs",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train-levels", parents=[common],
                       help="train the discrete level hierarchy")
    p.add_argument("--out", default=None, help="q-tables output path")
    p.set_defaults(fn=cmd_train_levels)

    p = sub.add_parser("build-gp", parents=[common],
                       help="fit per-state models from trained policies")
    p.add_argument("--qtables", default=None)
    p.add_argument("--model-dir", default=None)
    p.add_argument("--states", default=None, help="comma-separated state ids")
    p.add_argument("--n-states", type=int, default=None)
    p.set_defaults(fn=cmd_build_gp)

    p = sub.add_parser("synthesize", parents=[common],
                       help="emit synthetic driver trajectory files")
    p.add_argument("--model-dir", default=None)
    p.set_defaults(fn=cmd_synthesize)

    p = sub.add_parser("ingest", parents=[common],
                       help="read a trajectory CSV into driver records")
    p.add_argument("--input", required=True)
    p.add_argument("--out", default=None)
    p.set_defaults(fn=cmd_ingest)

    p = sub.add_parser("fit-drivers", parents=[common],
                       help="fit reasoning levels for recorded drivers")
    p.add_argument("--records", default=None)
    p.add_argument("--qtables", default=None)
    p.add_argument("--model-dir", default=None)
    p.set_defaults(fn=cmd_fit_drivers)

    p = sub.add_parser("best-response", parents=[common],
                       help="closed-form best response to an opponent mixture")
    p.add_argument("--coeffs", required=True,
                   help="opponent weights over levels 0..n-1, e.g. 0.2,0.5,0.3")
    p.add_argument("--check", action="store_true",
                   help="verify against a simplex grid search")
    p.add_argument("--grid-step", type=float, default=0.05)
    p.set_defaults(fn=cmd_best_response)

    p = sub.add_parser("report", parents=[common],
                       help="aggregate fit reports into summary files")
    p.add_argument("--continuous", default=None)
    p.add_argument("--discrete", default=None)
    p.set_defaults(fn=cmd_report)

    p = sub.add_parser("pipeline", parents=[common],
                       help="run every stage into one output directory")
    p.add_argument("--no-train", action="store_true",
                   help="reuse existing q-tables and models")
    p.set_defaults(fn=cmd_pipeline)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )
    try:
        return args.fn(args)
    except LevelkgpError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
