"""Receding-horizon lap-time LMPC over learned affine models.

Each control step linearizes the learned dynamics along the previous
solution, queries the trajectory store for a local terminal set (convex hull
of KP stored neighbor states) and its cost-to-go vector, and solves one QP:

    min  sum_t c_u ||u_t||^2 + c_du ||u_t - u_{t-1}||^2 + J' lam + w_s sum sigma_t^2
    s.t. x_0 = x_k, u_{-1} = applied input of the previous step,
         x_{t+1} = A_t x_t + B_t u_t + C_t,
         u_l <= u_t <= u_u,  |e_y,t| <= W/2 + sigma_t,  sigma_t >= 0,
         X lam = x_N,  0 <= lam <= 1,  1'lam = 1.

The per-stage finish-line indicator of the lap-time objective is constant
over horizons that do not cross the line and is dropped; progress pressure
comes from the terminal cost-to-go, whose wrap extension keeps decreasing
across the finish line. Arclength is kept unwrapped within a lap.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .dataset import DEFAULT_D, Dataset, SafeSetQuery
from .errors import DegenerateModel, InsufficientData
from .learning import LearnerConfig, LocalModelLearner
from .qp import QpProblem, QpSolution, STATUS_OPTIMAL, solve as qp_solve
from .simulator import SimConfig, simulate_step
from .track import TrackModel
from .vehicle import IX_EY, IX_S, NU, NX, AtvModel
from . import simulator
from .errors import FrenetSingularity, NonFiniteState, TrackDeparture

FAIL_SOLVER = "solver_stall"


@dataclass(frozen=True)
class LmpcConfig:
    horizon: int = 12                 # N, stages
    knn_per_lap: int = 8              # K states from each stored lap
    laps_back: int = 3                # P most recent completed laps
    input_cost: float = 1e-2          # c_u
    # per-channel input-cost diag: steering weighted far above acceleration so
    # the kinematic model's no-saturation optimism at large delta has a price
    input_cost_weights: np.ndarray = field(
        default_factory=lambda: np.array([1.0, 50.0]))
    rate_cost: float = 0.1            # c_du, the control-rate cost
    slack_weight: float = 1e4         # quadratic penalty on e_y slack
    # per-state penalties on the terminal-match slack r in X lam = x_N + r:
    # stiff where the stored-continuation argument lives (s, e_y, v_x), soft
    # on the fast tire states (v_y, omega_z) whose physical relaxation is well
    # below the control period; deterministic data leaves the hull pencil-thin
    # in those directions and a hard match there paralyzes progress
    terminal_slack_weights: np.ndarray = field(
        default_factory=lambda: np.array([3e2, 10.0, 10.0, 3e2, 1e7, 1e5]))
    # safe-set centering bias, in fractions of the K-neighbor window: querying
    # ahead of the predicted terminal keeps the hull's cost gradient pulling
    # forward (a self-centered hull admits a parked equilibrium)
    forward_bias: float = 0.25
    safe_set_weights: np.ndarray = field(default_factory=lambda: DEFAULT_D.copy())
    u_lower: np.ndarray = field(default_factory=lambda: np.array([-1.0, -0.6]))
    u_upper: np.ndarray = field(default_factory=lambda: np.array([1.0, 0.6]))
    dt_ctrl: float = 0.1
    learner: LearnerConfig = field(default_factory=LearnerConfig)
    solver_tol: float = 1e-6
    solver_max_iter: int = 20000

    def __post_init__(self):
        if self.horizon < 2:
            raise ValueError("horizon must be at least 2")
        if self.input_cost < 0 or self.rate_cost < 0:
            raise ValueError("costs must be nonnegative")
        if not np.all(np.asarray(self.u_lower) < np.asarray(self.u_upper)):
            raise ValueError("u_lower must be elementwise below u_upper")

    @property
    def n_lambda(self) -> int:
        return self.knn_per_lap * self.laps_back


@dataclass
class ReferenceSequence:
    """N+1 (state, input) pairs used for linearization and safe-set centering."""
    states: np.ndarray        # (N+1, 6), s unwrapped and nondecreasing
    inputs: np.ndarray        # (N+1, 2)

    def __post_init__(self):
        self.states = np.asarray(self.states, dtype=float)
        self.inputs = np.asarray(self.inputs, dtype=float)
        if not (np.all(np.isfinite(self.states)) and np.all(np.isfinite(self.inputs))):
            raise ValueError("reference must be finite")
        self.states[:, IX_S] = np.maximum.accumulate(self.states[:, IX_S])

    def shifted_by_lap(self, wrap_length: float) -> "ReferenceSequence":
        states = self.states.copy()
        states[:, IX_S] -= wrap_length
        return ReferenceSequence(states=states, inputs=self.inputs.copy())


@dataclass
class LmpcStepResult:
    applied_input: np.ndarray
    status: str
    degraded: bool
    predicted_states: np.ndarray | None
    predicted_inputs: np.ndarray | None
    lam: np.ndarray | None
    terminal_cost: float
    solve_ms: float
    slack_max: float
    lambda_entropy: float
    learner_info: dict
    solution: QpSolution | None


def extended_lap_arrays(lap, next_lap, wrap_length: float, ext_len: int):
    """Lap states/inputs continued past the finish line by the following lap
    (or the lap itself), s shifted by +L; inputs padded by repetition."""
    donor = next_lap if (next_lap is not None and len(next_lap.states) > 1) else lap
    m = min(ext_len, len(donor.states) - 1)
    ext_states = donor.states[1:m + 1].copy()
    ext_states[:, IX_S] += wrap_length
    states = np.vstack([lap.states, ext_states])
    inputs = np.vstack([lap.inputs, donor.inputs[:m]])
    if len(inputs) < len(states):
        inputs = np.vstack([inputs,
                            np.repeat(inputs[-1:], len(states) - len(inputs), 0)])
    return states, inputs[:len(states)]


def initialize_reference(ds: Dataset, x0, cfg: LmpcConfig) -> ReferenceSequence:
    """Seed the linearization reference from the fastest stored lap, starting
    at its state nearest to x0 under the safe-set metric."""
    laps = ds.completed_laps
    if not laps:
        raise InsufficientData("cannot initialize a reference without laps")
    best = min(laps, key=lambda lap: lap.T)
    idx_best = ds.laps.index(best)
    next_lap = ds.laps[idx_best + 1] if idx_best + 1 < len(ds.laps) else None
    states, inputs = extended_lap_arrays(best, next_lap, ds.wrap_length,
                                         ds.ext_len)
    x0 = np.asarray(x0, dtype=float)
    D = np.asarray(cfg.safe_set_weights, dtype=float)
    diff = best.states - x0
    dist = (diff * diff) @ D if D.ndim == 1 else np.einsum(
        "ni,ij,nj->n", diff, D, diff)
    k0 = int(np.argmin(dist))
    n = cfg.horizon + 1
    if k0 + n > len(states):
        k0 = len(states) - n
    ref = ReferenceSequence(states=states[k0:k0 + n].copy(),
                            inputs=inputs[k0:k0 + n].copy())
    # pin the reference start to the measured state so stage-0 linearization
    # happens where the vehicle actually is
    ref.states[0] = x0
    ref.states[:, IX_S] = np.maximum.accumulate(ref.states[:, IX_S])
    return ref


class _ProblemLayout:
    """Variable offsets:
    [x_0..x_N | u_0..u_{N-1} | lambda | sigma_0..sigma_N | r_terminal(6)]."""

    def __init__(self, N: int, n_lambda: int):
        self.N = N
        self.n_lambda = n_lambda
        self.ox = lambda t: NX * t
        self.ou = lambda t: NX * (N + 1) + NU * t
        self.olam = NX * (N + 1) + NU * N
        self.osig = lambda t: self.olam + n_lambda + t
        self.oterm = self.olam + n_lambda + (N + 1)
        self.n_var = NX * (N + 1) + NU * N + n_lambda + (N + 1) + NX


class StepProblemBuilder:
    """Assembles the per-step QP with a sparsity pattern that is identical
    across steps, so the solver session can update values in place."""

    def __init__(self, cfg: LmpcConfig, track: TrackModel):
        self.cfg = cfg
        self.track = track
        self.layout = _ProblemLayout(cfg.horizon, cfg.n_lambda)
        self._H = self._build_cost_matrix()

    def _build_cost_matrix(self) -> sp.csc_matrix:
        cfg, lo = self.cfg, self.layout
        N = cfg.horizon
        rows, cols, vals = [], [], []

        def add(r, c, v):
            rows.append(r)
            cols.append(c)
            vals.append(v)

        for t in range(N):
            for j in range(NU):
                add(lo.ou(t) + j, lo.ou(t) + j,
                    2.0 * cfg.input_cost * cfg.input_cost_weights[j])
        # rate terms; u_{-1} enters the linear cost only
        for t in range(N):
            for j in range(NU):
                add(lo.ou(t) + j, lo.ou(t) + j, 2.0 * cfg.rate_cost)
                if t + 1 < N:
                    add(lo.ou(t) + j, lo.ou(t) + j, 2.0 * cfg.rate_cost)
                    add(lo.ou(t) + j, lo.ou(t + 1) + j, -2.0 * cfg.rate_cost)
                    add(lo.ou(t + 1) + j, lo.ou(t) + j, -2.0 * cfg.rate_cost)
        for i in range(lo.n_lambda):
            add(lo.olam + i, lo.olam + i, 2.0e-6)   # uniqueness ridge
        for t in range(N + 1):
            add(lo.osig(t), lo.osig(t), 2.0 * cfg.slack_weight)
        for i in range(NX):
            add(lo.oterm + i, lo.oterm + i,
                2.0 * cfg.terminal_slack_weights[i])
        H = sp.coo_matrix((vals, (rows, cols)),
                          shape=(lo.n_var, lo.n_var)).tocsc()
        return H

    def build(self, x_k, u_prev, models: list[AtvModel],
              query: SafeSetQuery) -> QpProblem:
        cfg, lo = self.cfg, self.layout
        N = cfg.horizon
        half_w = self.track.width / 2.0

        q = np.zeros(lo.n_var)
        q[lo.ou(0):lo.ou(0) + NU] = -2.0 * cfg.rate_cost * np.asarray(u_prev)
        q[lo.olam:lo.olam + lo.n_lambda] = query.J

        er, ec, ev, eb = [], [], [], []
        row = 0

        def block(r0, c0, M):
            nonlocal er, ec, ev
            rr, cc = np.nonzero(np.ones_like(M))
            er.extend((r0 + rr).tolist())
            ec.extend((c0 + cc).tolist())
            ev.extend(M[rr, cc].tolist())

        # x_0 pin
        for i in range(NX):
            er.append(row + i)
            ec.append(lo.ox(0) + i)
            ev.append(1.0)
        eb.extend(np.asarray(x_k, float).tolist())
        row += NX
        # dynamics
        for t in range(N):
            m = models[t]
            for i in range(NX):
                er.append(row + i)
                ec.append(lo.ox(t + 1) + i)
                ev.append(1.0)
            block(row, lo.ox(t), -m.A)
            block(row, lo.ou(t), -m.B)
            eb.extend(m.C.tolist())
            row += NX
        # terminal hull membership: x_N - X lam - r = 0; the stiff penalty on
        # r keeps it microscopic whenever the hull is genuinely reachable
        for i in range(NX):
            er.append(row + i)
            ec.append(lo.ox(N) + i)
            ev.append(1.0)
            er.append(row + i)
            ec.append(lo.oterm + i)
            ev.append(-1.0)
        block(row, lo.olam, -query.X)
        eb.extend([0.0] * NX)
        row += NX
        # simplex mass
        for i in range(lo.n_lambda):
            er.append(row)
            ec.append(lo.olam + i)
            ev.append(1.0)
        eb.append(1.0)
        row += 1
        A_eq = sp.coo_matrix((ev, (er, ec)), shape=(row, lo.n_var)).tocsc()
        b_eq = np.asarray(eb)

        ir, ic, iv, il, iu = [], [], [], [], []
        rw = 0
        for t in range(N):
            for j in range(NU):
                ir.append(rw)
                ic.append(lo.ou(t) + j)
                iv.append(1.0)
                il.append(cfg.u_lower[j])
                iu.append(cfg.u_upper[j])
                rw += 1
        for i in range(lo.n_lambda):
            ir.append(rw)
            ic.append(lo.olam + i)
            iv.append(1.0)
            il.append(0.0)
            iu.append(1.0)
            rw += 1
        for t in range(N + 1):
            ir.append(rw)
            ic.append(lo.osig(t))
            iv.append(1.0)
            il.append(0.0)
            iu.append(np.inf)
            rw += 1
        for t in range(N + 1):
            for sign in (1.0, -1.0):
                ir.extend([rw, rw])
                ic.extend([lo.ox(t) + IX_EY, lo.osig(t)])
                iv.extend([sign, -1.0])
                il.append(-np.inf)
                iu.append(half_w)
                rw += 1
        # keep planned speeds away from the model's singular standstill regime
        # (x_0 is pinned to the measurement and stays exempt)
        for t in range(1, N + 1):
            ir.append(rw)
            ic.append(lo.ox(t) + 0)
            iv.append(1.0)
            il.append(0.05)
            iu.append(np.inf)
            rw += 1
        A_in = sp.coo_matrix((iv, (ir, ic)), shape=(rw, lo.n_var)).tocsc()
        return QpProblem(H=self._H, q=q, A_eq=A_eq, b_eq=b_eq, A_in=A_in,
                         l_in=np.asarray(il), u_in=np.asarray(iu))


class LmpcController:
    """One controller instance per lap sequence; strictly sequential."""

    def __init__(self, ds: Dataset, cfg: LmpcConfig, track: TrackModel,
                 learner: LocalModelLearner):
        self.ds = ds
        self.cfg = cfg
        self.track = track
        self.learner = learner
        self.builder = StepProblemBuilder(cfg, track)
        self._warm: tuple[np.ndarray, np.ndarray] | None = None
        self.reference: ReferenceSequence | None = None
        self.u_prev = np.zeros(NU)
        self.consecutive_failures = 0

    def start_lap(self, x0, u_prev=None):
        self.reference = initialize_reference(self.ds, x0, self.cfg)
        self.u_prev = np.zeros(NU) if u_prev is None else np.asarray(u_prev, float)
        self.consecutive_failures = 0

    def build_step_problem(self, x_k) -> tuple[QpProblem, SafeSetQuery, dict]:
        cfg = self.cfg
        ref = self.reference
        nominal_lins = self.learner.nominal.linearize_batch(
            ref.states[:cfg.horizon], ref.inputs[:cfg.horizon])
        models = []
        infos = []
        for t in range(cfg.horizon):
            model, info = self.learner.model_at(ref.states[t], ref.inputs[t],
                                                nominal_lin=nominal_lins[t])
            models.append(model)
            infos.append(info)
        center = ref.states[cfg.horizon].copy()
        spacing = max(center[0], 0.3) * cfg.dt_ctrl
        center[IX_S] += cfg.forward_bias * cfg.knn_per_lap * spacing
        query = self.ds.query_safe_set(center, cfg.knn_per_lap,
                                       cfg.laps_back, cfg.safe_set_weights)
        problem = self.builder.build(x_k, self.u_prev, models, query)
        meta = {"models": models, "stage_infos": infos, "query": query}
        return problem, query, meta

    def control_step(self, x_k) -> LmpcStepResult:
        cfg = self.cfg
        lo = self.builder.layout
        t0 = time.perf_counter()
        try:
            problem, query, meta = self.build_step_problem(x_k)
        except (DegenerateModel, InsufficientData, FrenetSingularity,
                NonFiniteState):
            return self._fallback_result(t0, {})
        sol = qp_solve(problem, tol_primal=cfg.solver_tol,
                       tol_dual=cfg.solver_tol, max_iter=cfg.solver_max_iter,
                       validate=False)
        solve_ms = (time.perf_counter() - t0) * 1e3
        info0 = meta["stage_infos"][0] if meta["stage_infos"] else {}
        info0 = dict(info0)
        info0["model0"] = meta["models"][0] if meta["models"] else None
        status = sol.status
        if status != STATUS_OPTIMAL:
            # a plateaued but nearly feasible iterate still steers the car;
            # only genuine breakdowns take the hold-input fallback
            usable = (status == "max_iter"
                      and np.all(np.isfinite(sol.x))
                      and sol.prim_res <= 1e-3 * sol.scale_prim
                      and sol.dual_res <= 1e-2 * sol.scale_dual)
            if not usable:
                res = self._fallback_result(t0, info0)
                res.solve_ms = solve_ms
                res.status = sol.status
                res.solution = sol
                return res
            status = "inexact"

        N = cfg.horizon
        xs = sol.x[:NX * (N + 1)].reshape(N + 1, NX)
        us = sol.x[lo.ou(0):lo.ou(0) + NU * N].reshape(N, NU)
        lam = sol.x[lo.olam:lo.olam + lo.n_lambda]
        sig = sol.x[lo.osig(0):lo.osig(0) + N + 1]
        u0 = np.clip(us[0], cfg.u_lower, cfg.u_upper)
        lam_pos = lam[lam > 1e-12]
        entropy = float(-np.sum(lam_pos * np.log(lam_pos))) if len(lam_pos) else 0.0

        # shift the solution into the next reference; last stage held. Clip
        # to the corridor and away from standstill so linearization points
        # stay inside the model's domain even after inexact solves
        next_states = np.vstack([xs[1:], xs[-1:]])
        next_inputs = np.vstack([us[1:], us[-1:], us[-1:]])
        half = 0.52 * self.track.width
        next_states[:, IX_EY] = np.clip(next_states[:, IX_EY], -half, half)
        next_states[:, 0] = np.clip(next_states[:, 0], 0.05, 20.0)
        next_states[:, 3] = np.clip(next_states[:, 3], -1.3, 1.3)
        self.reference = ReferenceSequence(states=next_states,
                                           inputs=next_inputs)
        self.u_prev = u0
        self.consecutive_failures = 0
        return LmpcStepResult(
            applied_input=u0, status=status, degraded=False,
            predicted_states=xs, predicted_inputs=us, lam=lam,
            terminal_cost=float(query.J @ lam), solve_ms=solve_ms,
            slack_max=float(np.max(sig)) if len(sig) else 0.0,
            lambda_entropy=entropy, learner_info=info0, solution=sol)

    def _fallback_result(self, t0, info) -> LmpcStepResult:
        cfg = self.cfg
        self.consecutive_failures += 1
        u0 = np.clip(self.u_prev, cfg.u_lower, cfg.u_upper)
        self.u_prev = u0
        if self.reference is not None:
            ref = self.reference
            self.reference = ReferenceSequence(
                states=np.vstack([ref.states[1:], ref.states[-1:]]),
                inputs=np.vstack([ref.inputs[1:], ref.inputs[-1:]]))
        return LmpcStepResult(
            applied_input=u0, status="degraded", degraded=True,
            predicted_states=None, predicted_inputs=None, lam=None,
            terminal_cost=np.nan, solve_ms=(time.perf_counter() - t0) * 1e3,
            slack_max=np.nan, lambda_entropy=np.nan, learner_info=info,
            solution=None)


def run_iteration(ds: Dataset, cfg: LmpcConfig, sim_cfg: SimConfig,
                  track: TrackModel, x0, lap_index: int,
                  learner: LocalModelLearner, u_init=None,
                  rng: np.random.Generator | None = None,
                  trace_hook=None):
    """Close the loop for one lap; returns (LapRecord, telemetry rows).

    trace_hook(step, result, x_k) may record learner traces; controller
    breakdowns terminate the lap as failures, never as exceptions.
    """
    controller = LmpcController(ds, cfg, track, learner)
    controller.start_lap(x0, u_prev=u_init)
    x = np.asarray(x0, dtype=float).copy()
    states = [x.copy()]
    inputs = []
    telemetry = []
    failure = None
    T = None
    for k in range(sim_cfg.max_steps):
        result = controller.control_step(x)
        if trace_hook is not None:
            trace_hook(k, result, x)
        telemetry.append({
            "t": k * cfg.dt_ctrl, "solve_status": result.status,
            "solve_ms": result.solve_ms, "terminal_cost": result.terminal_cost,
            "lambda_entropy": result.lambda_entropy,
            "slack_max": result.slack_max,
            "a": float(result.applied_input[0]),
            "delta": float(result.applied_input[1]),
        })
        if result.degraded and controller.consecutive_failures >= 2:
            failure = FAIL_SOLVER
            break
        try:
            out = simulate_step(sim_cfg, x, result.applied_input, track,
                                steps_elapsed=k, rng=rng)
        except TrackDeparture:
            inputs.append(result.applied_input)
            failure = simulator.FAIL_TRACK
            break
        except (NonFiniteState, FrenetSingularity):
            inputs.append(result.applied_input)
            failure = simulator.FAIL_NONFINITE
            break
        inputs.append(result.applied_input)
        x = out.state
        states.append(x.copy())
        if out.lap_completed:
            T = k + 1
            break
    else:
        failure = simulator.FAIL_BUDGET
    completed = failure is None and T is not None
    lap = simulator.LapRecord(lap_index=lap_index, states=np.array(states),
                              inputs=np.array(inputs).reshape(-1, NU),
                              completed=completed, failure=failure, T=T)
    return lap, telemetry
