"""The true system: fine-step dynamic-bicycle plant with lap bookkeeping.

The plant integrates the Pacejka dynamic bicycle at dt_sim under zero-order-hold
inputs, clamps commands to the input box, detects finish-line crossings on the
unwrapped arclength, and records closed-loop laps.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import fastplant, vehicle
from .errors import ControllerFault, FrenetSingularity, NonFiniteState, TrackDeparture
from .track import TrackModel
from .vehicle import DYNAMIC, IX_EY, IX_S, NU, NX, VehicleParams

DEPARTURE_MARGIN = 0.05  # fraction of W added to the half-width before failing

FAIL_TRACK = "track_departure"
FAIL_BUDGET = "step_budget"
FAIL_CONTROLLER = "controller_fault"
FAIL_NONFINITE = "nonfinite_state"


@dataclass(frozen=True)
class SimConfig:
    params: VehicleParams            # truth plant (mu = 0.9 preset)
    dt_sim: float = 0.001            # internal integration step, s
    dt_ctrl: float = 0.1             # control period, s
    input_delay_steps: int = 0       # optional hold delay, control steps
    noise_std: np.ndarray | None = None   # optional additive state noise
    max_steps: int = 3000            # per-lap control-step budget
    u_lower: np.ndarray = field(default_factory=lambda: np.array([-1.0, -0.6]))
    u_upper: np.ndarray = field(default_factory=lambda: np.array([1.0, 0.6]))

    def __post_init__(self):
        n = self.dt_ctrl / self.dt_sim
        if abs(n - round(n)) > 1e-9:
            raise ValueError("dt_sim must divide dt_ctrl")
        if self.max_steps <= 0:
            raise ValueError("max_steps must be positive")

    @property
    def substeps(self) -> int:
        return int(round(self.dt_ctrl / self.dt_sim))


@dataclass(frozen=True)
class StepOutcome:
    state: np.ndarray        # s unwrapped (>= L on the crossing step)
    lap_completed: bool
    steps_elapsed: int


def clamp_input(cfg: SimConfig, u) -> np.ndarray:
    return np.minimum(np.maximum(np.asarray(u, dtype=float), cfg.u_lower),
                      cfg.u_upper)


def simulate_step(cfg: SimConfig, x, u, track: TrackModel,
                  steps_elapsed: int = 0,
                  rng: np.random.Generator | None = None) -> StepOutcome:
    """Advance the plant one control period under a zero-order-hold input.

    The input is clamped to the box before application. Raises TrackDeparture
    once |e_y| exceeds W/2 plus the failure margin, NonFiniteState on blow-up.
    """
    u = clamp_input(cfg, u)
    x = np.asarray(x, dtype=float).copy()
    half = track.width / 2.0 + DEPARTURE_MARGIN * track.width
    if fastplant.HAVE_NUMBA:
        p = cfg.params
        x, status = fastplant.integrate_dynamic(
            x, u[0], u[1], cfg.substeps, cfg.dt_sim,
            float(track.s_grid[1] - track.s_grid[0]), track.kappa_grid,
            track.length, p.mass, p.iz, p.lf, p.lr, p.pacejka_b, p.pacejka_c,
            p.pacejka_d, p.mu, p.drag_coeff, p.roll_coeff, p.vx_min, half)
        if status == 1:
            raise TrackDeparture(
                f"|e_y| = {abs(x[IX_EY]):.3f} m beyond the corridor at s = "
                f"{x[IX_S]:.2f}")
        if status == 2:
            raise NonFiniteState("plant state diverged")
    else:
        rhs = vehicle._RHS[DYNAMIC]
        for _ in range(cfg.substeps):
            x = vehicle._rk4(rhs, x, u, track, cfg.dt_sim, cfg.params)
            if not np.all(np.isfinite(x)):
                raise NonFiniteState("plant state diverged")
            if abs(x[IX_EY]) > half:
                raise TrackDeparture(
                    f"|e_y| = {abs(x[IX_EY]):.3f} m beyond the corridor at s = "
                    f"{x[IX_S]:.2f}"
                )
    if cfg.noise_std is not None:
        if rng is None:
            raise ValueError("noise requires a seeded Generator")
        x = x + rng.normal(0.0, cfg.noise_std, size=NX)
    return StepOutcome(state=x, lap_completed=bool(x[IX_S] >= track.length),
                       steps_elapsed=steps_elapsed + 1)


@dataclass
class LapRecord:
    """One closed-loop lap: states include the crossing state; inputs[k] was
    applied at states[k]. cost_to_go[k] = T - k for completed laps."""
    lap_index: int
    states: np.ndarray            # (n+1, 6), s unwrapped within the lap
    inputs: np.ndarray            # (n, 2)
    completed: bool
    failure: str | None = None    # FAIL_* cause for failed laps
    T: int | None = None          # first step index with s >= L

    def __post_init__(self):
        self.states = np.asarray(self.states, dtype=float)
        self.inputs = np.asarray(self.inputs, dtype=float)
        if self.completed and self.T is None:
            raise ValueError("completed laps must carry T")
        self.cost_to_go = (
            float(self.T) - np.arange(len(self.states), dtype=float)
            if self.completed else None
        )

    @property
    def lap_steps(self) -> int | None:
        return self.T

    def lap_time(self, dt_ctrl: float) -> float | None:
        return None if self.T is None else self.T * dt_ctrl

    def to_csv(self, path, dt_ctrl: float):
        n = len(self.states)
        t = np.arange(n) * dt_ctrl
        inputs = np.vstack([self.inputs, np.full((n - len(self.inputs), NU), np.nan)])
        done = np.zeros(n)
        if self.completed:
            done[self.T:] = 1.0
        rows = np.column_stack([t, self.states, inputs, done,
                                np.full(n, 0.0 if self.failure is None else 1.0)])
        np.savetxt(
            path, rows, delimiter=",", comments="", fmt="%.17g",
            header="t,v_x,v_y,omega_z,e_psi,s,e_y,a,delta,lap_completed,failure",
        )


def lap_record_from_csv(path, lap_index: int, failure: str | None = None) -> LapRecord:
    rows = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    states = rows[:, 1:7]
    inputs = rows[:-1, 7:9]
    completed = bool(rows[-1, 9] > 0) and failure is None
    T = int(np.argmax(rows[:, 9] > 0)) if completed else None
    return LapRecord(lap_index=lap_index, states=states, inputs=inputs,
                     completed=completed, failure=failure, T=T)


def run_lap(cfg: SimConfig, controller, x0, track: TrackModel,
            lap_index: int = 0,
            rng: np.random.Generator | None = None) -> LapRecord:
    """Close the loop until the finish line or failure.

    `controller(x, step)` returns the input for the current state; its errors
    are recorded as a controller-fault failure rather than raised. Failures
    produce a failure LapRecord, never an exception.
    """
    x = np.asarray(x0, dtype=float).copy()
    if abs(x[IX_EY]) > track.width / 2.0:
        raise ValueError("initial state is outside the corridor")
    states = [x.copy()]
    inputs = []
    delay_buf = []
    failure = None
    T = None
    for k in range(cfg.max_steps):
        try:
            u = clamp_input(cfg, controller(x, k))
        except Exception as exc:  # noqa: BLE001 - isolate controller faults
            if isinstance(exc, KeyboardInterrupt):
                raise
            failure = FAIL_CONTROLLER
            break
        if cfg.input_delay_steps > 0:
            delay_buf.append(u)
            u = delay_buf.pop(0) if len(delay_buf) > cfg.input_delay_steps \
                else np.zeros(NU)
        try:
            out = simulate_step(cfg, x, u, track, k, rng)
        except TrackDeparture:
            inputs.append(u)
            failure = FAIL_TRACK
            break
        except (NonFiniteState, FrenetSingularity):
            inputs.append(u)
            failure = FAIL_NONFINITE
            break
        inputs.append(u)
        x = out.state
        states.append(x.copy())
        if out.lap_completed:
            T = k + 1
            break
    else:
        failure = FAIL_BUDGET
    completed = failure is None and T is not None
    return LapRecord(lap_index=lap_index, states=np.array(states),
                     inputs=np.array(inputs).reshape(-1, NU),
                     completed=completed, failure=failure, T=T)
