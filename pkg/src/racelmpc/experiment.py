"""Multi-iteration experiments: seeding, metrics, sweeps, persistence.

A run seeds the lap store with a low-speed pure-pursuit controller on the
true plant, then alternates LMPC laps with dataset appends for a fixed
iteration count or until the first failure. Every run leaves a complete audit
trail (spec echo, per-lap CSVs, per-step telemetry, learner traces, report)
from which each reported number can be re-derived.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
import yaml

from . import learning
from .controller import LmpcConfig, run_iteration
from .dataset import Dataset, save_dataset
from .errors import SeedFailure
from .learning import LearnerConfig, LocalModelLearner, model_error_frobenius
from .simulator import LapRecord, SimConfig, run_lap
from .track import FrenetPose, TrackModel, build_track, wrap_angle
from .vehicle import (
    DYNAMIC,
    IX_EPSI,
    IX_EY,
    IX_S,
    IX_VX,
    KINEMATIC,
    NominalModel,
    VehicleParams,
    params_from_dict,
    params_to_dict,
)

NO_FAILURE = "none"


@dataclass(frozen=True)
class ExperimentSpec:
    track: dict = field(default_factory=lambda: {"preset": "l_shape"})
    plant: VehicleParams = field(default_factory=lambda: VehicleParams(mu=0.9))
    nominal: VehicleParams = field(default_factory=lambda: VehicleParams(mu=0.9))
    nominal_kind: str = KINEMATIC
    lmpc: LmpcConfig = field(default_factory=LmpcConfig)
    iterations: int = 20
    seed_laps: int = 3
    seed_speed: float | None = None      # None: 30% of friction-limited speed
    seed_speed_stagger: tuple = (0.85, 1.0, 1.15)   # per-lap speed factors
    dt_sim: float = 0.001
    trials: int = 1
    rng_seed: int = 0
    sweep_h: tuple = ()
    sweep_crc: tuple = ()
    sweep_modes: tuple = (learning.ERROR_REGRESSION, learning.FULL_REGRESSION)

    def __post_init__(self):
        if self.iterations < 1 or self.seed_laps < 1:
            raise ValueError("iterations and seed_laps must be >= 1")

    def resolved_seed_speed(self, track: TrackModel) -> float:
        if self.seed_speed is not None:
            return self.seed_speed
        kmax = float(np.max(np.abs(track.kappa_grid)))
        return 0.3 * self.plant.friction_limited_speed(kmax)

    def sim_config(self) -> SimConfig:
        return SimConfig(params=self.plant, dt_sim=self.dt_sim,
                         dt_ctrl=self.lmpc.dt_ctrl,
                         u_lower=np.asarray(self.lmpc.u_lower, float),
                         u_upper=np.asarray(self.lmpc.u_upper, float))


@dataclass
class MetricsReport:
    lap_times: list[float]                  # completed LMPC iterations, s
    seed_lap_times: list[float]
    failure_iteration: int | None           # 1-based; None when no failure
    failure_cause: str
    ilt: float | None                       # final-iteration lap time, or None
    itf: str                                # failure iteration or "<n>+"
    frobenius_by_iteration: list[float]
    iterations_requested: int
    config: dict

    def to_dict(self) -> dict:
        return {
            "lap_times_s": self.lap_times,
            "seed_lap_times_s": self.seed_lap_times,
            "failure_iteration": self.failure_iteration,
            "failure_cause": self.failure_cause,
            "ilt": self.ilt,
            "itf": self.itf,
            "frobenius_by_iteration": self.frobenius_by_iteration,
            "iterations_requested": self.iterations_requested,
            "config": self.config,
        }


# -- seeding -------------------------------------------------------------------


def pure_pursuit_controller(track: TrackModel, params: VehicleParams,
                            target_speed: float, lookahead_time: float = 0.6,
                            min_lookahead: float = 0.4,
                            speed_gain: float = 2.0):
    """Center-line pure pursuit with proportional speed control."""

    def controller(x, step):
        s = x[IX_S] % track.length
        p, heading = track.frenet_to_global(
            FrenetPose(s=s, e_y=x[IX_EY], e_psi=x[IX_EPSI]))
        d_la = max(min_lookahead, lookahead_time * max(x[IX_VX], 0.1))
        target = track.position(s + d_la)
        vec = target - p
        alpha = wrap_angle(math.atan2(vec[1], vec[0]) - heading)
        chord = max(float(np.linalg.norm(vec)), 1e-6)
        delta = math.atan2(2.0 * params.wheelbase * math.sin(alpha), chord)
        a = speed_gain * (target_speed - x[IX_VX])
        return np.array([a, delta])

    return controller


def seed_dataset(spec: ExperimentSpec, track: TrackModel | None = None
                 ) -> tuple[Dataset, TrackModel]:
    """Fill the lap store with low-speed tracking laps on the true plant."""
    if track is None:
        track = build_track(spec.track)
    sim_cfg = spec.sim_config()
    speed = spec.resolved_seed_speed(track)
    # deterministic per-lap speed stagger: identical seed laps would leave the
    # terminal hull with no volume (all laps carry the same speed manifold)
    stagger = spec.seed_speed_stagger or (1.0,)
    ds = Dataset(wrap_length=track.length, ext_len=2 * spec.lmpc.horizon)
    x0 = np.zeros(6)
    x0[IX_VX] = speed * stagger[0]
    for j in range(spec.seed_laps):
        lap_speed = speed * stagger[j % len(stagger)]
        ctrl = pure_pursuit_controller(track, spec.plant, lap_speed)
        lap = run_lap(sim_cfg, ctrl, x0, track, lap_index=j)
        if not lap.completed:
            raise SeedFailure(
                f"seed lap {j} failed ({lap.failure}); check track and plant "
                "parameters")
        ds.append_lap(lap)
        x0 = lap.states[-1].copy()
        x0[IX_S] -= track.length
    return ds, track


# -- single experiment ---------------------------------------------------------


def run_experiment(spec: ExperimentSpec, out_dir=None,
                   progress=None) -> MetricsReport:
    """Seed, then run LMPC iterations until the count or the first failure."""
    track = build_track(spec.track)
    ds, _ = seed_dataset(spec, track)
    sim_cfg = spec.sim_config()
    nominal = NominalModel(spec.nominal, spec.nominal_kind, track,
                           spec.lmpc.dt_ctrl)
    learner = LocalModelLearner(ds, nominal, spec.lmpc.learner, track)
    rng = np.random.default_rng(spec.rng_seed)

    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        (out / "telemetry").mkdir(parents=True, exist_ok=True)
        (out / "learner").mkdir(parents=True, exist_ok=True)
        track.dump_centerline(out / "track.csv")
        with open(out / "spec.yaml", "w") as fh:
            yaml.safe_dump(spec_to_dict(spec), fh, sort_keys=False)

    x0 = ds.laps[-1].states[-1].copy()
    x0[IX_S] -= track.length
    u_init = ds.laps[-1].inputs[-1].copy()

    lap_times: list[float] = []
    fro_series: list[float] = []
    failure_iteration = None
    failure_cause = NO_FAILURE
    for j in range(1, spec.iterations + 1):
        trace_rows = []

        def trace_hook(step, result, x_k):
            model0 = result.learner_info.get("model0")
            fro = (model_error_frobenius(model0, spec.plant, track,
                                         spec.lmpc.dt_ctrl)
                   if model0 is not None else np.nan)
            info = result.learner_info
            gnorm = info.get("gamma_norms", np.full(3, np.nan))
            trace_rows.append([
                step, *(model0.zbar[0] if model0 is not None else np.full(6, np.nan)),
                *(model0.zbar[1] if model0 is not None else np.full(2, np.nan)),
                info.get("n_neighbors", 0), info.get("n_in_bandwidth", 0),
                info.get("weight_sum", 0.0), *gnorm, fro,
            ])

        lap, telemetry = run_iteration(
            ds, spec.lmpc, sim_cfg, track, x0,
            lap_index=len(ds.laps), learner=learner, u_init=u_init, rng=rng,
            trace_hook=trace_hook)
        fro_vals = np.asarray([row[-1] for row in trace_rows], dtype=float)
        fro_mean = float(np.nanmean(fro_vals)) if len(fro_vals) else np.nan
        fro_series.append(fro_mean)
        if out is not None:
            _write_telemetry(out / "telemetry" / f"iter_{j:03d}.csv", telemetry)
            _write_learner_trace(out / "learner" / f"iter_{j:03d}.csv",
                                 trace_rows)
        if lap.completed:
            lap_times.append(lap.lap_time(spec.lmpc.dt_ctrl))
            ds.append_lap(lap)
            learner.refresh()
            x0 = lap.states[-1].copy()
            x0[IX_S] -= track.length
            u_init = lap.inputs[-1].copy() if len(lap.inputs) else u_init
            if progress is not None:
                progress(j, lap.lap_time(spec.lmpc.dt_ctrl), None)
        else:
            ds.append_lap(lap)
            failure_iteration = j
            failure_cause = lap.failure
            if progress is not None:
                progress(j, None, lap.failure)
            break

    report = compute_metrics(spec, lap_times, fro_series, failure_iteration,
                             failure_cause,
                             seed_lap_times=[l.lap_time(spec.lmpc.dt_ctrl)
                                             for l in ds.laps[:spec.seed_laps]])
    if out is not None:
        save_dataset(ds, out / "laps", spec.lmpc.dt_ctrl)
        with open(out / "report.json", "w") as fh:
            json.dump(report.to_dict(), fh, indent=2)
    return report


def compute_metrics(spec: ExperimentSpec, lap_times, fro_series,
                    failure_iteration, failure_cause,
                    seed_lap_times=()) -> MetricsReport:
    """Metric conventions: the final-iteration lap time exists only when every
    requested iteration completed; the failure iteration uses an "<n>+"
    sentinel when no failure occurred."""
    completed_all = failure_iteration is None and \
        len(lap_times) == spec.iterations
    return MetricsReport(
        lap_times=[float(t) for t in lap_times],
        seed_lap_times=[float(t) for t in seed_lap_times],
        failure_iteration=failure_iteration,
        failure_cause=failure_cause,
        ilt=float(lap_times[-1]) if completed_all else None,
        itf=str(failure_iteration) if failure_iteration is not None
        else f"{spec.iterations}+",
        frobenius_by_iteration=[float(v) for v in fro_series],
        iterations_requested=spec.iterations,
        config=spec_to_dict(spec),
    )


def _write_telemetry(path, telemetry):
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=[
            "t", "solve_status", "solve_ms", "terminal_cost",
            "lambda_entropy", "slack_max", "a", "delta"])
        writer.writeheader()
        writer.writerows(telemetry)


_LEARNER_HEADER = ("step,vx,vy,wz,epsi,s,ey,a,delta,n_neighbors,"
                   "n_in_bandwidth,weight_sum,gamma_vx,gamma_vy,gamma_wz,"
                   "frobenius_error")


def _write_learner_trace(path, rows):
    arr = np.asarray(rows, dtype=float) if rows else np.empty((0, 16))
    np.savetxt(path, arr, delimiter=",", header=_LEARNER_HEADER, comments="",
               fmt="%.10g")


# -- sweeps ---------------------------------------------------------------------


def sweep_cells(spec: ExperimentSpec) -> list[dict]:
    """Cartesian cells over modes and whichever axis (h / CRC) is non-empty."""
    hs = list(spec.sweep_h) if spec.sweep_h else [spec.lmpc.learner.bandwidth]
    crcs = list(spec.sweep_crc) if spec.sweep_crc else [spec.lmpc.rate_cost]
    cells = []
    for mode in spec.sweep_modes:
        for h in hs:
            for crc in crcs:
                cells.append({"mode": mode, "h": float(h), "crc": float(crc)})
    return cells


def spec_for_cell(spec: ExperimentSpec, cell: dict) -> ExperimentSpec:
    learner = replace(spec.lmpc.learner, bandwidth=cell["h"], mode=cell["mode"])
    lmpc = replace(spec.lmpc, rate_cost=cell["crc"], learner=learner)
    return replace(spec, lmpc=lmpc, sweep_h=(), sweep_crc=())


def run_sweep(spec: ExperimentSpec, out_dir=None, progress=None
              ) -> tuple[list[dict], str]:
    """One experiment per (cell x trial); returns summary rows and a table."""
    cells = sweep_cells(spec)
    out = Path(out_dir) if out_dir is not None else None
    rows = []
    for idx, cell in enumerate(cells):
        ilts, itfs = [], []
        for trial in range(spec.trials):
            cell_spec = replace(spec_for_cell(spec, cell),
                                rng_seed=spec.rng_seed + trial)
            cell_dir = None
            if out is not None:
                name = f"{cell['mode']}_h{cell['h']:g}_crc{cell['crc']:g}" \
                    + (f"_t{trial}" if spec.trials > 1 else "")
                cell_dir = out / name
                cell_dir.mkdir(parents=True, exist_ok=True)
            if progress is not None:
                progress(f"cell {idx + 1}/{len(cells)}: {cell}")
            report = run_experiment(cell_spec, out_dir=cell_dir)
            ilts.append(report.ilt)
            itfs.append(report.failure_iteration if report.failure_iteration
                        is not None else None)
        completed = [v for v in ilts if v is not None]
        mean_ilt = float(np.mean(completed)) if len(completed) == len(ilts) \
            else None
        fails = [v for v in itfs if v is not None]
        mean_itf = (f"{spec.iterations}+" if not fails
                    else f"{np.mean(fails):g}")
        rows.append({"mode": cell["mode"], "h": cell["h"], "crc": cell["crc"],
                     "ilt": "-" if mean_ilt is None else f"{mean_ilt:.2f}",
                     "itf": mean_itf})
    table = format_summary_table(rows)
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        with open(out / "summary.csv", "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=["mode", "h", "crc",
                                                    "ilt", "itf"])
            writer.writeheader()
            writer.writerows(rows)
        (out / "summary.txt").write_text(table)
    return rows, table


def format_summary_table(rows: list[dict]) -> str:
    header = f"{'mode':<18}{'h':>6}{'crc':>8}{'ilt':>8}{'itf':>6}"
    lines = [header, "-" * len(header)]
    for r in rows:
        lines.append(f"{r['mode']:<18}{r['h']:>6g}{r['crc']:>8g}"
                     f"{r['ilt']:>8}{r['itf']:>6}")
    return "\n".join(lines) + "\n"


# -- spec (de)serialization ------------------------------------------------------


def spec_to_dict(spec: ExperimentSpec) -> dict:
    lm = spec.lmpc
    le = lm.learner
    return {
        "track": dict(spec.track),
        "plant": params_to_dict(spec.plant),
        "nominal": params_to_dict(spec.nominal),
        "nominal_kind": spec.nominal_kind,
        "iterations": spec.iterations,
        "seed_laps": spec.seed_laps,
        "seed_speed": spec.seed_speed,
        "dt_sim": spec.dt_sim,
        "trials": spec.trials,
        "rng_seed": spec.rng_seed,
        "sweep_h": list(spec.sweep_h),
        "sweep_crc": list(spec.sweep_crc),
        "sweep_modes": list(spec.sweep_modes),
        "lmpc": {
            "horizon": lm.horizon, "knn_per_lap": lm.knn_per_lap,
            "laps_back": lm.laps_back, "input_cost": lm.input_cost,
            "rate_cost": lm.rate_cost, "slack_weight": lm.slack_weight,
            "safe_set_weights": np.asarray(lm.safe_set_weights).tolist(),
            "u_lower": np.asarray(lm.u_lower).tolist(),
            "u_upper": np.asarray(lm.u_upper).tolist(),
            "dt_ctrl": lm.dt_ctrl,
            "solver_tol": lm.solver_tol,
            "solver_max_iter": lm.solver_max_iter,
        },
        "learner": {
            "bandwidth": le.bandwidth, "neighbors": le.neighbors,
            "epsilon": le.epsilon, "mode": le.mode,
            "metric_weights": np.asarray(le.metric_weights).tolist(),
            "use_curvature_feature": le.use_curvature_feature,
        },
    }


def spec_from_dict(d: dict) -> ExperimentSpec:
    le = d.get("learner", {})
    learner = LearnerConfig(
        bandwidth=le.get("bandwidth", 5.0),
        neighbors=le.get("neighbors", 40),
        epsilon=le.get("epsilon", 1e-2),
        mode=le.get("mode", learning.ERROR_REGRESSION),
        metric_weights=np.asarray(
            le.get("metric_weights", learning.DEFAULT_METRIC_WEIGHTS), float),
        use_curvature_feature=le.get("use_curvature_feature", True),
    )
    lm = d.get("lmpc", {})
    lmpc = LmpcConfig(
        horizon=lm.get("horizon", 12),
        knn_per_lap=lm.get("knn_per_lap", 8),
        laps_back=lm.get("laps_back", 3),
        input_cost=lm.get("input_cost", 1e-2),
        rate_cost=lm.get("rate_cost", 0.1),
        slack_weight=lm.get("slack_weight", 1e4),
        safe_set_weights=np.asarray(lm.get("safe_set_weights",
                                           [0.05, 0, 0, 0, 1.0, 0.1]), float),
        u_lower=np.asarray(lm.get("u_lower", [-1.0, -0.6]), float),
        u_upper=np.asarray(lm.get("u_upper", [1.0, 0.6]), float),
        dt_ctrl=lm.get("dt_ctrl", 0.1),
        solver_tol=lm.get("solver_tol", 1e-7),
        solver_max_iter=lm.get("solver_max_iter", 8000),
        learner=learner,
    )
    return ExperimentSpec(
        track=d.get("track", {"preset": "l_shape"}),
        plant=params_from_dict(d["plant"]) if "plant" in d
        else VehicleParams(mu=0.9),
        nominal=params_from_dict(d["nominal"]) if "nominal" in d
        else VehicleParams(mu=0.9),
        nominal_kind=d.get("nominal_kind", KINEMATIC),
        lmpc=lmpc,
        iterations=d.get("iterations", 20),
        seed_laps=d.get("seed_laps", 3),
        seed_speed=d.get("seed_speed"),
        dt_sim=d.get("dt_sim", 0.001),
        trials=d.get("trials", 1),
        rng_seed=d.get("rng_seed", 0),
        sweep_h=tuple(d.get("sweep_h", ())),
        sweep_crc=tuple(d.get("sweep_crc", ())),
        sweep_modes=tuple(d.get("sweep_modes",
                                (learning.ERROR_REGRESSION,
                                 learning.FULL_REGRESSION))),
    )


def load_spec(path) -> ExperimentSpec:
    with open(path) as fh:
        return spec_from_dict(yaml.safe_load(fh) or {})
