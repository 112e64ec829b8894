"""Nominal vehicle models in the Frenet frame and their exact linearizations.

State order is fixed as [v_x, v_y, omega_z, e_psi, s, e_y]; input order [a, delta].
The first three states are the velocity (dynamics) states, the last three the
kinematic states. Two model kinds are provided: a dynamic bicycle with
simplified Pacejka tires, and a kinematic bicycle embedded in the same 6-state
frame. The discrete step integrates the continuous model with RK4 substeps
short enough to resolve the tire relaxation modes.

All right-hand sides broadcast over a leading batch axis, so Jacobians and
dataset-wide nominal predictions evaluate as single batched calls.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from .errors import FrenetSingularity, NonFiniteState
from .track import TrackModel

G = 9.81

NX = 6
NU = 2
IX_VX, IX_VY, IX_WZ, IX_EPSI, IX_S, IX_EY = range(NX)
IU_A, IU_DELTA = range(NU)

STATE_NAMES = ("v_x", "v_y", "omega_z", "e_psi", "s", "e_y")
INPUT_NAMES = ("a", "delta")

KINEMATIC = "kinematic"
DYNAMIC = "dynamic"

# RK4 substep ceiling; the stiffest tire mode is ~(Cf+Cr)/(m vx_min) ~ 300/s,
# and RK4 needs lambda*h inside its stability interval with margin
MAX_SUBSTEP = 0.005


@dataclass(frozen=True)
class VehicleParams:
    """1/10th-scale bicycle-model parameters (defaults are desk-scale plausible)."""
    mass: float = 2.5            # kg
    iz: float = 0.03             # kg m^2
    lf: float = 0.15             # m, CG to front axle
    lr: float = 0.15             # m, CG to rear axle
    pacejka_b: float = 6.0       # stiffness factor, both axles
    pacejka_c: float = 1.6       # shape factor
    pacejka_d: float = 1.0       # peak factor (scaled by mu * normal load)
    mu: float = 0.9              # tire-road friction
    drag_coeff: float = 0.0      # N s^2 / m^2, aero
    roll_coeff: float = 0.0      # N, rolling resistance
    vx_min: float = 0.3          # m/s, slip-angle regularization floor
    kin_relax: float = 0.02      # s, kinematic-manifold relaxation time

    def __post_init__(self):
        for name in ("mass", "iz", "lf", "lr", "mu", "vx_min"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")

    @property
    def wheelbase(self) -> float:
        return self.lf + self.lr

    def friction_limited_speed(self, kappa_max: float) -> float:
        """Speed at which lateral acceleration saturates at curvature kappa_max."""
        return math.sqrt(self.mu * G / max(abs(kappa_max), 1e-9))


def barc_truth() -> VehicleParams:
    """Simulation-plant parameter set (mu = 0.9)."""
    return VehicleParams(mu=0.9)


def barc_nominal_overconfident() -> VehicleParams:
    """Nominal parameter set with slick-tire friction (mu = 1.2)."""
    return VehicleParams(mu=1.2)


_YAML_KEYS = {  # attribute -> unit-explicit file key
    "mass": "mass_kg", "iz": "iz_kgm2", "lf": "lf_m", "lr": "lr_m",
    "pacejka_b": "pacejka_b", "pacejka_c": "pacejka_c", "pacejka_d": "pacejka_d",
    "mu": "mu", "drag_coeff": "drag_ns2_per_m2", "roll_coeff": "roll_n",
    "vx_min": "vx_min_mps", "kin_relax": "kin_relax_s",
}

_PRESETS = {
    "barc_truth": barc_truth,
    "barc_nominal_overconfident": barc_nominal_overconfident,
}


def params_to_dict(p: VehicleParams) -> dict:
    return {key: float(getattr(p, attr)) for attr, key in _YAML_KEYS.items()}


def params_from_dict(d: dict) -> VehicleParams:
    if "preset" in d:
        base = _PRESETS[d["preset"]]()
        over = {attr: float(d[key]) for attr, key in _YAML_KEYS.items() if key in d}
        return replace(base, **over)
    kwargs = {attr: float(d[key]) for attr, key in _YAML_KEYS.items() if key in d}
    return VehicleParams(**kwargs)


def tire_force_pacejka(b: float, c: float, d: float, mu: float,
                       slip_angle, normal_load):
    """Simplified magic-formula lateral force: D sin(C atan(B alpha)) mu F_z."""
    return d * np.sin(c * np.arctan(b * slip_angle)) * mu * normal_load


# -- continuous-time right-hand sides (batch-broadcasting) --------------------


def _frenet_rows(vx, vy, wz, epsi, kappa, ey):
    denom = 1.0 - kappa * ey
    if np.any(denom <= 1e-3):
        raise FrenetSingularity("1 - kappa*e_y reached zero")
    cos_e, sin_e = np.cos(epsi), np.sin(epsi)
    sdot = (vx * cos_e - vy * sin_e) / denom
    depsi = wz - kappa * sdot
    dey = vx * sin_e + vy * cos_e
    return depsi, sdot, dey


def _rhs_dynamic(x, u, kappa, p: VehicleParams):
    vx, vy, wz = x[..., 0], x[..., 1], x[..., 2]
    epsi, ey = x[..., 3], x[..., 5]
    a_cmd, delta = u[..., 0], u[..., 1]
    vx_eff = np.maximum(vx, p.vx_min)
    alpha_f = delta - np.arctan2(vy + p.lf * wz, vx_eff)
    alpha_r = -np.arctan2(vy - p.lr * wz, vx_eff)
    fzf = p.mass * G * p.lr / p.wheelbase
    fzr = p.mass * G * p.lf / p.wheelbase
    fyf = tire_force_pacejka(p.pacejka_b, p.pacejka_c, p.pacejka_d, p.mu, alpha_f, fzf)
    fyr = tire_force_pacejka(p.pacejka_b, p.pacejka_c, p.pacejka_d, p.mu, alpha_r, fzr)
    drag = (p.drag_coeff * vx * np.abs(vx) + p.roll_coeff) / p.mass
    cos_d, sin_d = np.cos(delta), np.sin(delta)
    dvx = a_cmd + vy * wz - fyf * sin_d / p.mass - drag
    dvy = (fyf * cos_d + fyr) / p.mass - vx * wz
    dwz = (p.lf * fyf * cos_d - p.lr * fyr) / p.iz
    depsi, sdot, dey = _frenet_rows(vx, vy, wz, epsi, kappa, ey)
    return np.stack([dvx, dvy, dwz, depsi, sdot, dey], axis=-1)


def _rhs_kinematic(x, u, kappa, p: VehicleParams):
    # No-slip bicycle embedded in the 6-state frame: v_y and omega_z track
    # their manifold values (l_r/L) v_x tan(delta) and v_x tan(delta)/L via a
    # chain-rule feedforward plus a short relaxation.
    vx, vy, wz = x[..., 0], x[..., 1], x[..., 2]
    epsi, ey = x[..., 3], x[..., 5]
    a_cmd, delta = u[..., 0], u[..., 1]
    wb = p.wheelbase
    t = np.tan(delta)
    drag = (p.drag_coeff * vx * np.abs(vx) + p.roll_coeff) / p.mass
    dvx = a_cmd - drag
    dvy = dvx * t * p.lr / wb + (vx * t * p.lr / wb - vy) / p.kin_relax
    dwz = dvx * t / wb + (vx * t / wb - wz) / p.kin_relax
    depsi, sdot, dey = _frenet_rows(vx, vy, wz, epsi, kappa, ey)
    return np.stack([dvx, dvy, dwz, depsi, sdot, dey], axis=-1)


_RHS = {DYNAMIC: _rhs_dynamic, KINEMATIC: _rhs_kinematic}


def _rk4(rhs, x, u, track: TrackModel, h: float, p: VehicleParams):
    k1 = rhs(x, u, track.curvature_at(x[..., IX_S]), p)
    x2 = x + 0.5 * h * k1
    k2 = rhs(x2, u, track.curvature_at(x2[..., IX_S]), p)
    x3 = x + 0.5 * h * k2
    k3 = rhs(x3, u, track.curvature_at(x3[..., IX_S]), p)
    x4 = x + h * k3
    k4 = rhs(x4, u, track.curvature_at(x4[..., IX_S]), p)
    return x + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


def step_nominal(params: VehicleParams, model_kind: str, x, u,
                 track: TrackModel, dt: float) -> np.ndarray:
    """Discrete nominal map x_{k+1} = f(x_k, u_k) for the chosen model kind.

    RK4 over the control period, substepped at <= MAX_SUBSTEP so the tire
    relaxation modes stay inside the integrator's stability region. Broadcasts
    over a leading batch axis.
    """
    if dt <= 0:
        raise ValueError("dt must be positive")
    rhs = _RHS[model_kind]
    x = np.asarray(x, dtype=float)
    u = np.asarray(u, dtype=float)
    n = max(1, int(math.ceil(dt / MAX_SUBSTEP - 1e-12)))
    h = dt / n
    for _ in range(n):
        x = _rk4(rhs, x, u, track, h, params)
    if not np.all(np.isfinite(x)):
        raise NonFiniteState("nominal step diverged")
    return x


@dataclass(frozen=True)
class AtvModel:
    """Affine model x+ = A x + B u + C, exact at its linearization point zbar."""
    A: np.ndarray                      # (6, 6)
    B: np.ndarray                      # (6, 2)
    C: np.ndarray                      # (6,)
    zbar: tuple[np.ndarray, np.ndarray]
    dt: float

    def predict(self, x, u) -> np.ndarray:
        return self.A @ np.asarray(x, float) + self.B @ np.asarray(u, float) + self.C


def linearize_nominal_batch(params: VehicleParams, model_kind: str,
                            xbar: np.ndarray, ubar: np.ndarray,
                            track: TrackModel, dt: float,
                            rel_step: float = 1e-5) -> list[AtvModel]:
    """Central-difference ATV models at a batch of linearization points.

    One batched step evaluation covers all 2(NX+NU)+1 perturbations of all
    points, which is what keeps per-control-step linearization cheap.
    """
    xbar = np.atleast_2d(np.asarray(xbar, dtype=float))
    ubar = np.atleast_2d(np.asarray(ubar, dtype=float))
    m = xbar.shape[0]
    n_eval = 2 * (NX + NU) + 1
    xs = np.repeat(xbar[:, None, :], n_eval, axis=1)   # (m, n_eval, 6)
    us = np.repeat(ubar[:, None, :], n_eval, axis=1)
    hx = rel_step * (1.0 + np.abs(xbar))               # (m, 6)
    hu = rel_step * (1.0 + np.abs(ubar))
    for i in range(NX):
        xs[:, 2 * i, i] += hx[:, i]
        xs[:, 2 * i + 1, i] -= hx[:, i]
    for i in range(NU):
        us[:, 2 * NX + 2 * i, i] += hu[:, i]
        us[:, 2 * NX + 2 * i + 1, i] -= hu[:, i]
    out = step_nominal(params, model_kind, xs.reshape(-1, NX),
                       us.reshape(-1, NU), track, dt).reshape(m, n_eval, NX)
    models = []
    for k in range(m):
        A = np.empty((NX, NX))
        B = np.empty((NX, NU))
        for i in range(NX):
            A[:, i] = (out[k, 2 * i] - out[k, 2 * i + 1]) / (2.0 * hx[k, i])
        for i in range(NU):
            B[:, i] = (out[k, 2 * NX + 2 * i] - out[k, 2 * NX + 2 * i + 1]) \
                / (2.0 * hu[k, i])
        fz = out[k, -1]
        C = fz - A @ xbar[k] - B @ ubar[k]
        models.append(AtvModel(A=A, B=B, C=C, zbar=(xbar[k].copy(), ubar[k].copy()),
                               dt=dt))
    return models


def linearize_nominal(params: VehicleParams, model_kind: str, zbar,
                      track: TrackModel, dt: float,
                      rel_step: float = 1e-5) -> AtvModel:
    """Exact-at-zbar affine model of the discrete nominal step."""
    return linearize_nominal_batch(params, model_kind, zbar[0], zbar[1],
                                   track, dt, rel_step)[0]


class NominalModel:
    """Bound (params, kind, track, dt) handle used by the learner and controller."""

    def __init__(self, params: VehicleParams, model_kind: str,
                 track: TrackModel, dt: float):
        if model_kind not in _RHS:
            raise ValueError(f"unknown model kind {model_kind!r}")
        self.params = params
        self.model_kind = model_kind
        self.track = track
        self.dt = dt

    def step(self, x, u) -> np.ndarray:
        return step_nominal(self.params, self.model_kind, x, u, self.track, self.dt)

    def linearize(self, x, u) -> AtvModel:
        return linearize_nominal(self.params, self.model_kind, (x, u),
                                 self.track, self.dt)

    def linearize_batch(self, xs, us) -> list[AtvModel]:
        return linearize_nominal_batch(self.params, self.model_kind, xs, us,
                                       self.track, self.dt)


class ZeroModel:
    """f == 0 handle; direct regression equals error regression against it."""

    def __init__(self, dt: float):
        self.dt = dt

    def step(self, x, u) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        return np.zeros_like(x)

    def linearize(self, x, u) -> AtvModel:
        return AtvModel(A=np.zeros((NX, NX)), B=np.zeros((NX, NU)), C=np.zeros(NX),
                        zbar=(np.asarray(x, float), np.asarray(u, float)), dt=self.dt)

    def linearize_batch(self, xs, us) -> list[AtvModel]:
        xs = np.atleast_2d(xs)
        us = np.atleast_2d(us)
        return [self.linearize(x, u) for x, u in zip(xs, us)]
