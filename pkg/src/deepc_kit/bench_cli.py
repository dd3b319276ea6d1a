"""Scenario runner: data collection, closed-loop runs, metrics, plot data.

Usage:
    deepc-kit collect --config scenario.toml --out results/
    deepc-kit run     --config scenario.toml --out results/ [--seed S] [--mode both]
    deepc-kit sweep   --config payload_sweep.toml --out results/
    deepc-kit compare --config scenario.toml --out results/

Configs are TOML (JSON accepted) with sections [scenario], [plant], [data],
[controller], [run], and one or more [[reference]] tables; see the README
for the schema.  Every run writes the fully resolved configuration, per-run
``trace_*.csv`` files, a ``metrics.json``, and gnuplot-ready ``boxplot.dat``
into the output directory.  ``DEEPC_KIT_THREADS`` caps the worker pool.
"""

from __future__ import annotations

import argparse
import concurrent.futures
import json
import os
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from .controller import ClosedLoopTrace, DeePCController, run_closed_loop
from .deepc import DeePCParams
from .hankel import (
    build_mosaic,
    build_partition,
    diff_trajectory,
    reduce_svd,
    save_trajectory_csv,
)
from .plants import (
    ExcitationConfig,
    LtiPlant,
    ReferenceSchedule,
    SoftArmPlant,
    collect_dataset,
    random_lti,
)

__all__ = ["Scenario", "MetricsReport", "compute_rmse", "run_scenario", "main"]

_MODES = ("deepc", "vdeepc")


class ConfigError(ValueError):
    """Bad or missing scenario configuration key."""


# ---------------------------------------------------------------------------
# configuration


_DEFAULTS = {
    "scenario": {"name": "unnamed", "kind": "setpoint"},
    "plant": {
        "type": "softarm",
        "sample_period": 0.1,
        "noise_std": 0.0,
        "seed": 1,
    },
    "data": {
        "kappa": 2,
        "duration": 301,
        "hold": 5,
        "low": 0.0,
        "high": 80.0,
        "seed": 100,
        "svd_rank": "auto",
    },
    "controller": {
        "modes": ["deepc", "vdeepc"],
        "t_ini": 10,
        "horizon": 15,
        "q_weight": 1e2,
        "r_weight": 1e-2,
        "lambda_g": 1e4,
        "lambda_y": 1e4,
        "u_min": 0.0,
        "u_max": 80.0,
        "y_min": None,
        "y_max": None,
    },
    "run": {
        "t_end": 150,
        "repetitions": 1,
        "seed": 42,
        "payloads_g": [0.0],
    },
}


@dataclass
class Scenario:
    """Resolved scenario: defaults merged with the config file."""

    name: str
    kind: str
    plant: dict
    data: dict
    controller: dict
    run: dict
    references: list
    resolved: dict = field(repr=False, default_factory=dict)

    @classmethod
    def from_file(cls, path) -> "Scenario":
        path = Path(path)
        try:
            if path.suffix.lower() == ".json":
                raw = json.loads(path.read_text())
            else:
                with path.open("rb") as fh:
                    raw = tomllib.load(fh)
        except Exception as exc:
            raise ConfigError(f"cannot parse config {path}: {exc}") from exc
        return cls.from_dict(raw)

    @classmethod
    def from_dict(cls, raw: dict) -> "Scenario":
        resolved = {}
        for section, defaults in _DEFAULTS.items():
            block = dict(defaults)
            user = raw.get(section, {})
            if not isinstance(user, dict):
                raise ConfigError(f"section [{section}] must be a table")
            for key, val in user.items():
                if key not in defaults:
                    raise ConfigError(f"unknown key '{key}' in section [{section}]")
                block[key] = val
            resolved[section] = block
        known = set(_DEFAULTS) | {"reference"}
        for key in raw:
            if key not in known:
                raise ConfigError(f"unknown section [{key}]")

        refs = raw.get("reference", [])
        if not refs:
            raise ConfigError("at least one [[reference]] entry is required")
        entries = []
        for i, item in enumerate(refs):
            try:
                entries.append((int(item["start"]), [float(v) for v in item["setpoint"]]))
            except (KeyError, TypeError, ValueError) as exc:
                raise ConfigError(
                    f"reference entry {i} needs integer 'start' and numeric 'setpoint': {exc}"
                ) from exc
        resolved["reference"] = [
            {"start": s, "setpoint": sp} for s, sp in entries
        ]

        ctrl = resolved["controller"]
        for mode in ctrl["modes"]:
            if mode not in _MODES:
                raise ConfigError(f"unknown controller mode '{mode}'")
        y_lo, y_hi = ctrl["y_min"], ctrl["y_max"]
        if y_lo is not None and y_hi is not None:
            lo = np.asarray(y_lo, dtype=float)
            hi = np.asarray(y_hi, dtype=float)
            for s, sp in entries:
                sp = np.asarray(sp)
                if np.any(sp < lo) or np.any(sp > hi):
                    raise ConfigError(
                        f"reference setpoint {sp.tolist()} lies outside y bounds"
                    )
        if resolved["run"]["repetitions"] < 1:
            raise ConfigError("run.repetitions must be >= 1")
        return cls(
            name=resolved["scenario"]["name"],
            kind=resolved["scenario"]["kind"],
            plant=resolved["plant"],
            data=resolved["data"],
            controller=resolved["controller"],
            run=resolved["run"],
            references=entries,
            resolved=resolved,
        )


def _make_plant(cfg: dict, payload_g: float, noise_seed):
    kind = cfg.get("type", "softarm")
    if kind == "softarm":
        plant = SoftArmPlant(
            sample_period=cfg["sample_period"],
            noise_std=cfg["noise_std"],
            seed=cfg["seed"],
            payload_g=payload_g,
        )
    elif kind == "lti":
        plant = random_lti(
            seed=cfg["seed"], sample_period=cfg["sample_period"]
        )
    else:
        raise ConfigError(f"unknown plant type '{kind}'")
    plant.reset(noise_seed=noise_seed)
    return plant


# ---------------------------------------------------------------------------
# metrics


def compute_rmse(trace: ClosedLoopTrace, window: tuple[int, int]) -> float:
    """Root-mean-square Euclidean tracking error over trace rows [start, end).

    Args:
        trace: A closed-loop trace.
        window: Half-open index range into the trace records.
    """
    start, end = int(window[0]), int(window[1])
    if not (0 <= start < end <= len(trace)):
        raise ValueError(f"window {window} empty or outside trace of length {len(trace)}")
    err = trace.outputs[start:end] - trace.references[start:end]
    return float(np.sqrt(np.mean(np.sum(err**2, axis=1))))


def steady_state_windows(
    trace: ClosedLoopTrace, schedule: ReferenceSchedule, t_start: int, t_end: int
) -> list[tuple[int, int]]:
    """Per-reference-segment index windows covering each segment's last half."""
    windows = []
    for seg_a, seg_b in schedule.segments(t_start, t_end):
        a_idx = seg_a - t_start
        b_idx = seg_b - t_start + 1
        length = b_idx - a_idx
        windows.append((a_idx + length // 2, b_idx))
    return windows


@dataclass
class MetricsReport:
    """Per-run RMSEs plus per-(mode, payload) aggregates and mode deltas."""

    scenario: str
    runs: list
    aggregates: list
    comparisons: list

    def to_dict(self) -> dict:
        return {
            "scenario": self.scenario,
            "runs": self.runs,
            "aggregates": self.aggregates,
            "comparisons": self.comparisons,
        }

    def write_json(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), sort_keys=True, indent=1))


# ---------------------------------------------------------------------------
# scenario execution


def _build_matrices(scenario: Scenario, datasets, modes):
    t_ini = scenario.controller["t_ini"]
    horizon = scenario.controller["horizon"]
    mats = {}
    if "deepc" in modes:
        mats["deepc"] = build_partition(datasets, t_ini, horizon)
    if "vdeepc" in modes:
        dpart = build_mosaic([diff_trajectory(t) for t in datasets], t_ini, horizon)
        rank_cfg = scenario.data["svd_rank"]
        if rank_cfg in (0, None, "none"):
            mats["vdeepc"] = dpart
        else:
            if rank_cfg == "auto":
                sv = np.linalg.svd(dpart.stacked(), compute_uv=False)
                r = int(np.sum(sv > 1e-9 * sv[0]))
            else:
                r = int(rank_cfg)
            mats["vdeepc"] = reduce_svd(dpart, r)
    return mats


def _controller_params(scenario: Scenario) -> DeePCParams:
    c = scenario.controller
    y_bounds = None
    if c["y_min"] is not None or c["y_max"] is not None:
        y_bounds = (c["y_min"], c["y_max"])
    return DeePCParams(
        T_ini=c["t_ini"],
        N=c["horizon"],
        Q=c["q_weight"],
        R=c["r_weight"],
        lambda_g=c["lambda_g"],
        lambda_y=c["lambda_y"],
        u_bounds=(c["u_min"], c["u_max"]),
        y_bounds=y_bounds,
    )


def _one_job(scenario, mats, params, schedule, mode, payload, rep, out_dir):
    seed_tuple = (scenario.run["seed"], _MODES.index(mode), int(payload * 1000), rep)
    plant = _make_plant(scenario.plant, payload, noise_seed=seed_tuple)
    controller = DeePCController(
        mats[mode], params, sample_period=scenario.plant["sample_period"]
    )
    trace = run_closed_loop(controller, plant, schedule, scenario.run["t_end"])
    t_start = controller.params.T_ini
    windows = steady_state_windows(trace, schedule, t_start, scenario.run["t_end"])
    seg_rmse = [compute_rmse(trace, w) for w in windows]
    merged = np.concatenate(
        [np.arange(a, b) for a, b in windows]
    )
    err = trace.outputs[merged] - trace.references[merged]
    rmse = float(np.sqrt(np.mean(np.sum(err**2, axis=1))))
    trace_name = f"trace_{mode}_p{payload:g}_r{rep}.csv"
    trace.to_csv(out_dir / trace_name)
    return {
        "mode": mode,
        "payload_g": payload,
        "rep": rep,
        "rmse": rmse,
        "segment_rmse": seg_rmse,
        "iterations_mean": float(trace.iterations.mean()),
        "solve_ms_median": float(np.median(trace.solve_times_s) * 1e3),
        "max_iter_steps": int(sum(s == "max_iterations" for s in trace.statuses)),
        "trace_file": trace_name,
    }


def _worker_count() -> int:
    env = os.environ.get("DEEPC_KIT_THREADS")
    if env:
        return max(1, int(env))
    return min(4, os.cpu_count() or 1)


def run_scenario(
    scenario: Scenario,
    out_dir,
    seed: int | None = None,
    mode: str | None = None,
) -> MetricsReport:
    """Execute a scenario: collect data, run every (mode, payload, rep) job.

    Writes ``resolved_config.json``, trajectory CSVs, per-run trace CSVs,
    ``metrics.json``, ``boxplot.dat``, and a gnuplot stub into ``out_dir``.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    if seed is not None:
        scenario.run["seed"] = int(seed)
        scenario.resolved["run"]["seed"] = int(seed)
    modes = scenario.controller["modes"] if mode in (None, "both") else [mode]
    for md in modes:
        if md not in _MODES:
            raise ConfigError(f"unknown controller mode '{md}'")

    (out_dir / "resolved_config.json").write_text(
        json.dumps(scenario.resolved, sort_keys=True, indent=1)
    )

    datasets = collect_data(scenario, out_dir)
    mats = _build_matrices(scenario, datasets, modes)
    params = _controller_params(scenario)
    schedule = ReferenceSchedule(scenario.references)

    payloads = [float(p) for p in scenario.run["payloads_g"]]
    reps = int(scenario.run["repetitions"])
    jobs = sorted(
        (md, pl, rp) for md in modes for pl in payloads for rp in range(reps)
    )
    results = {}
    with concurrent.futures.ThreadPoolExecutor(max_workers=_worker_count()) as pool:
        futures = {
            pool.submit(
                _one_job, scenario, mats, params, schedule, md, pl, rp, out_dir
            ): (md, pl, rp)
            for (md, pl, rp) in jobs
        }
        for fut in concurrent.futures.as_completed(futures):
            results[futures[fut]] = fut.result()
    runs = [results[key] for key in jobs]

    aggregates = []
    for md in modes:
        for pl in payloads:
            vals = sorted(r["rmse"] for r in runs if r["mode"] == md and r["payload_g"] == pl)
            arr = np.array(vals)
            aggregates.append(
                {
                    "mode": md,
                    "payload_g": pl,
                    "rmse_median": float(np.median(arr)),
                    "rmse_q1": float(np.quantile(arr, 0.25)),
                    "rmse_q3": float(np.quantile(arr, 0.75)),
                    "count": len(vals),
                }
            )

    comparisons = []
    if set(modes) >= {"deepc", "vdeepc"}:
        for pl in payloads:
            med = {
                md: next(
                    a["rmse_median"]
                    for a in aggregates
                    if a["mode"] == md and a["payload_g"] == pl
                )
                for md in ("deepc", "vdeepc")
            }
            comparisons.append(
                {
                    "payload_g": pl,
                    "deepc_rmse_median": med["deepc"],
                    "vdeepc_rmse_median": med["vdeepc"],
                    "improvement": med["deepc"] - med["vdeepc"],
                }
            )

    report = MetricsReport(
        scenario=scenario.name, runs=runs, aggregates=aggregates, comparisons=comparisons
    )
    report.write_json(out_dir / "metrics.json")
    _write_boxplot_data(runs, out_dir)
    return report


def collect_data(scenario: Scenario, out_dir) -> list:
    """Collect (or re-collect) the excitation datasets and export them."""
    d = scenario.data
    plant = _make_plant(scenario.plant, payload_g=0.0, noise_seed=(scenario.plant["seed"],))
    cfg = ExcitationConfig(
        duration=int(d["duration"]),
        hold=int(d["hold"]),
        low=float(d["low"]),
        high=float(d["high"]),
        seed=int(d["seed"]),
        channels=plant.m,
    )
    datasets = collect_dataset(plant, cfg, kappa=int(d["kappa"]))
    data_dir = Path(out_dir) / "datasets"
    data_dir.mkdir(parents=True, exist_ok=True)
    for i, traj in enumerate(datasets):
        save_trajectory_csv(traj, data_dir / f"dataset_{i}.csv")
    return datasets


def _write_boxplot_data(runs: list, out_dir: Path) -> None:
    lines = ["# payload_g mode rep rmse_mm"]
    for r in sorted(runs, key=lambda r: (r["payload_g"], r["mode"], r["rep"])):
        lines.append(f"{r['payload_g']:g} {r['mode']} {r['rep']} {r['rmse']!r}")
    (out_dir / "boxplot.dat").write_text("\n".join(lines) + "\n")
    stub = """# gnuplot stub: tracking-error spread per payload and mode
# usage: gnuplot -p plot_boxplot.gp
set datafile separator whitespace
set xlabel 'payload [g]'
set ylabel 'RMSE [mm]'
plot 'boxplot.dat' using 1:($2 eq 'deepc' ? $4 : 1/0) title 'deepc', \\
     'boxplot.dat' using 1:($2 eq 'vdeepc' ? $4 : 1/0) title 'vdeepc'
"""
    (out_dir / "plot_boxplot.gp").write_text(stub)


# ---------------------------------------------------------------------------
# CLI


def _add_common(sub):
    sub.add_argument("--config", required=True, help="scenario TOML/JSON file")
    sub.add_argument("--out", required=True, help="output directory")
    sub.add_argument("--seed", type=int, default=None, help="override run seed")
    sub.add_argument(
        "--mode",
        choices=["deepc", "vdeepc", "both"],
        default=None,
        help="restrict controller modes",
    )


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="deepc-kit", description="data-driven predictive control scenario runner"
    )
    subs = parser.add_subparsers(dest="command", required=True)
    for name, help_text in (
        ("collect", "collect excitation datasets only"),
        ("run", "run the scenario end to end"),
        ("sweep", "run a payload sweep scenario"),
        ("compare", "run both modes and print a comparison table"),
    ):
        _add_common(subs.add_parser(name, help=help_text))
    args = parser.parse_args(argv)

    try:
        scenario = Scenario.from_file(args.config)
        out_dir = Path(args.out)
        if args.command == "collect":
            out_dir.mkdir(parents=True, exist_ok=True)
            (out_dir / "resolved_config.json").write_text(
                json.dumps(scenario.resolved, sort_keys=True, indent=1)
            )
            datasets = collect_data(scenario, out_dir)
            print(f"collected {len(datasets)} datasets into {out_dir / 'datasets'}")
            return 0
        if args.command == "sweep" and len(scenario.run["payloads_g"]) < 2:
            raise ConfigError("sweep expects run.payloads_g with several entries")
        mode = "both" if args.command == "compare" else args.mode
        report = run_scenario(scenario, out_dir, seed=args.seed, mode=mode)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # runtime failure: surface and flag
        print(f"run failed: {exc}", file=sys.stderr)
        return 1

    for agg in report.aggregates:
        print(
            f"{report.scenario}: mode={agg['mode']} payload={agg['payload_g']:g}g "
            f"rmse median={agg['rmse_median']:.4g} mm (n={agg['count']})"
        )
    if args.command == "compare":
        for row in report.comparisons:
            print(
                f"payload {row['payload_g']:g}g: deepc {row['deepc_rmse_median']:.4g} mm "
                f"vs vdeepc {row['vdeepc_rmse_median']:.4g} mm "
                f"(improvement {row['improvement']:.4g} mm)"
            )
    return 0


if __name__ == "__main__":
    sys.exit(main())
