"""Local affine model learning from lap data.

Error-regression mode fits, per velocity channel, an affine correction to the
nominal model's one-step prediction from kernel-weighted neighbors:

    residual_l(m) = Gamma_l . [v_x, v_y, omega_z, input_l, 1](m),  l in {v_x, v_y, omega_z}

where input_l is the acceleration command for the v_x channel and the steering
angle for the v_y and omega_z channels. The three fitted vectors populate a
sparse (A_e, B_e, C_e) correction whose kinematic rows are identically zero,
added to the nominal linearization. Direct (full) regression uses the same
machinery on raw successors and replaces the velocity rows entirely; with no
in-bandwidth data it degenerates toward zero velocity dynamics, which is the
failure mode error regression avoids by falling back to the nominal model.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .dataset import Dataset, RegressionMetric
from .errors import DegenerateModel, EmptyDataset
from .track import TrackModel
from .vehicle import (
    DYNAMIC,
    AtvModel,
    IU_A,
    IU_DELTA,
    NU,
    NX,
    VehicleParams,
    linearize_nominal,
)

ERROR_REGRESSION = "error_regression"
FULL_REGRESSION = "full_regression"
NOMINAL_ONLY = "nominal_only"

# feature layout per channel: [v_x, v_y, omega_z, input_component, 1]
N_FEAT = 5
_CHANNEL_INPUT = (IU_A, IU_DELTA, IU_DELTA)

DEFAULT_METRIC_WEIGHTS = np.array([4.0, 1.0, 0.25, 0.25, 0.1, 4.0])


@dataclass(frozen=True)
class LearnerConfig:
    bandwidth: float = 5.0        # h; the kernel takes the *squared* distance
    neighbors: int = 40           # M
    epsilon: float = 1e-2         # ridge regularization
    mode: str = ERROR_REGRESSION
    metric_weights: np.ndarray = field(
        default_factory=lambda: DEFAULT_METRIC_WEIGHTS.copy())
    use_curvature_feature: bool = True   # kappa(s) replaces raw s in the metric

    def __post_init__(self):
        if self.bandwidth <= 0 or self.epsilon <= 0 or self.neighbors < 1:
            raise ValueError("bandwidth, epsilon must be > 0 and neighbors >= 1")
        if self.mode not in (ERROR_REGRESSION, FULL_REGRESSION, NOMINAL_ONLY):
            raise ValueError(f"unknown learner mode {self.mode!r}")

    def metric(self, track: TrackModel) -> RegressionMetric:
        return RegressionMetric(weights=np.asarray(self.metric_weights, float),
                                use_curvature=self.use_curvature_feature,
                                track=track)


def epanechnikov(u, h: float):
    """K(u) = 3/4 (1 - u^2/h^2) for |u| < h, else 0."""
    if h <= 0:
        raise ValueError("bandwidth must be positive")
    u = np.asarray(u, dtype=float)
    out = np.where(np.abs(u) < h, 0.75 * (1.0 - (u * u) / (h * h)), 0.0)
    return float(out) if out.ndim == 0 else out


def compute_error_residual_targets(nominal, z_states, z_inputs,
                                   x_next) -> np.ndarray:
    """Per-channel targets x+ - f(x, u) for the three velocity states, one
    batched nominal prediction over all neighbor pairs."""
    z_states = np.atleast_2d(np.asarray(z_states, float))
    z_inputs = np.atleast_2d(np.asarray(z_inputs, float))
    x_next = np.atleast_2d(np.asarray(x_next, float))
    if len(z_states) == 0:
        raise EmptyDataset("no neighbor pairs to build targets from")
    pred = np.atleast_2d(nominal.step(z_states, z_inputs))
    return x_next[:, :3] - pred[:, :3]


def fit_channel(features, targets, weights, epsilon: float) -> np.ndarray:
    """Closed-form weighted ridge: (Phi^T W Phi + eps I) Gamma = Phi^T W y.

    epsilon > 0 guarantees a unique minimizer even with all-zero weights, in
    which case Gamma = 0 exactly (no data-based correction).
    """
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")
    features = np.atleast_2d(np.asarray(features, float))
    targets = np.asarray(targets, float)
    weights = np.asarray(weights, float)
    wphi = features * weights[:, None]
    G = features.T @ wphi + epsilon * np.eye(features.shape[1])
    b = wphi.T @ targets
    return np.linalg.solve(G, b)


def _channel_features(z_states: np.ndarray, z_inputs: np.ndarray,
                      channel: int) -> np.ndarray:
    return np.column_stack([z_states[:, 0], z_states[:, 1], z_states[:, 2],
                            z_inputs[:, _CHANNEL_INPUT[channel]],
                            np.ones(len(z_states))])


def fit_channel_standardized(features, targets, weights,
                             epsilon: float) -> np.ndarray:
    """Weighted ridge on weighted-standardized features, mapped back to the
    raw parameterization of fit_channel.

    Equivalent to a per-component ridge that scales with each feature's local
    spread: a column with no variation in the neighbor set (steady steering,
    constant speed) contributes no coefficient instead of an arbitrary one.
    The all-weights-zero fallback still returns the exact zero vector.
    """
    features = np.atleast_2d(np.asarray(features, float))
    targets = np.asarray(targets, float)
    weights = np.asarray(weights, float)
    wsum = float(np.sum(weights))
    if wsum <= 0.0:
        return np.zeros(features.shape[1])
    wn = weights / wsum
    mu = wn @ features
    var = wn @ (features - mu) ** 2
    sig = np.sqrt(var)
    mu[-1] = 0.0          # leave the intercept column untouched
    sig[-1] = 1.0
    active = sig > 1e-10
    scaled = np.where(active, (features - mu) / np.where(active, sig, 1.0), 0.0)
    gamma_std = fit_channel(scaled, targets, weights, epsilon)
    gamma = np.where(active, gamma_std / np.where(active, sig, 1.0), 0.0)
    gamma[-1] = gamma_std[-1] - float(np.sum(
        (gamma_std[:-1] * mu[:-1] / np.where(active[:-1], sig[:-1], 1.0))
        [active[:-1]]))
    return gamma


def _assemble_correction(gammas: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Place the three fitted vectors into the sparse correction pattern."""
    A_e = np.zeros((NX, NX))
    B_e = np.zeros((NX, NU))
    C_e = np.zeros(NX)
    A_e[0:3, 0:3] = gammas[:, 0:3]
    B_e[0, IU_A] = gammas[0, 3]
    B_e[1, IU_DELTA] = gammas[1, 3]
    B_e[2, IU_DELTA] = gammas[2, 3]
    C_e[0:3] = gammas[:, 4]
    return A_e, B_e, C_e


class LocalModelLearner:
    """Caches dataset-wide features and nominal predictions so that per-stage
    model fits inside a control step cost microseconds, not milliseconds.

    Selection and weighting both use the config metric; refresh() must be
    called after dataset appends (the controller does this between laps).
    """

    def __init__(self, ds: Dataset, nominal, cfg: LearnerConfig,
                 track: TrackModel):
        self.ds = ds
        self.nominal = nominal
        self.cfg = cfg
        self.track = track
        self.metric = cfg.metric(track)
        self._feats = None
        self._err_targets = None
        self._raw_targets = None
        self._z_states = None
        self._z_inputs = None
        self.refresh()

    def refresh(self):
        arrs = self.ds.regression_arrays()
        self._z_states = arrs["z_states"]
        self._z_inputs = arrs["z_inputs"]
        n = len(self._z_states)
        if n == 0:
            self._feats = np.empty((0, 6))
            self._err_targets = np.empty((0, 3))
            self._raw_targets = np.empty((0, 3))
            return
        self._feats = self.metric.feature_matrix(self._z_states, self._z_inputs)
        self._raw_targets = arrs["x_next"][:, :3].copy()
        if self.cfg.mode == ERROR_REGRESSION:
            self._err_targets = compute_error_residual_targets(
                self.nominal, self._z_states, self._z_inputs, arrs["x_next"])
        else:
            self._err_targets = np.empty((0, 3))

    @property
    def n_pairs(self) -> int:
        return len(self._z_states) if self._z_states is not None else 0

    def model_at(self, zbar_state, zbar_input,
                 nominal_lin: AtvModel | None = None
                 ) -> tuple[AtvModel, dict]:
        """Learned ATV model at one linearization point, plus fit diagnostics."""
        cfg = self.cfg
        zbar_state = np.asarray(zbar_state, float)
        zbar_input = np.asarray(zbar_input, float)
        if nominal_lin is None:
            nominal_lin = self.nominal.linearize(zbar_state, zbar_input)
        info = {"n_neighbors": 0, "n_in_bandwidth": 0, "weight_sum": 0.0,
                "gamma_norms": np.zeros(3)}
        if cfg.mode == NOMINAL_ONLY:
            return nominal_lin, info
        if self.n_pairs == 0:
            if cfg.mode == FULL_REGRESSION:
                raise DegenerateModel(
                    "direct regression with an empty dataset would zero out "
                    "the velocity dynamics")
            return nominal_lin, info

        zq = self.metric.feature_matrix(zbar_state[None, :], zbar_input[None, :])[0]
        dist = self.metric.distances_sq(self._feats, zq, self.ds.wrap_length)
        m = min(cfg.neighbors, len(dist))
        if len(dist) > m:
            sel = np.argpartition(dist, m - 1)[:m]
        else:
            sel = np.arange(len(dist))
        w = epanechnikov(dist[sel], cfg.bandwidth)
        info["n_neighbors"] = int(m)
        info["n_in_bandwidth"] = int(np.count_nonzero(w))
        info["weight_sum"] = float(np.sum(w))

        z_states = self._z_states[sel]
        z_inputs = self._z_inputs[sel]
        targets = (self._err_targets if cfg.mode == ERROR_REGRESSION
                   else self._raw_targets)[sel]
        gammas = np.empty((3, N_FEAT))
        for ch in range(3):
            phi = _channel_features(z_states, z_inputs, ch)
            # ridge scaled by the in-bandwidth weight mass so sparse data
            # shrinks toward no correction; standardized fit keeps locally
            # unidentifiable feature directions out of the coefficients
            eps_eff = cfg.epsilon * max(1.0, float(np.sum(w)))
            gammas[ch] = fit_channel_standardized(phi, targets[:, ch], w,
                                                  eps_eff)
        info["gamma_norms"] = np.linalg.norm(gammas, axis=1)
        A_e, B_e, C_e = _assemble_correction(gammas)

        if cfg.mode == ERROR_REGRESSION:
            model = AtvModel(A=nominal_lin.A + A_e, B=nominal_lin.B + B_e,
                             C=nominal_lin.C + C_e, zbar=nominal_lin.zbar,
                             dt=nominal_lin.dt)
        else:
            A = nominal_lin.A.copy()
            B = nominal_lin.B.copy()
            C = nominal_lin.C.copy()
            A[0:3, :] = A_e[0:3, :]
            B[0:3, :] = B_e[0:3, :]
            C[0:3] = C_e[0:3]
            model = AtvModel(A=A, B=B, C=C, zbar=nominal_lin.zbar,
                             dt=nominal_lin.dt)
        return model, info


def learn_local_model(ds: Dataset, nominal, zbar_state, zbar_input,
                      cfg: LearnerConfig, track: TrackModel) -> AtvModel:
    """One-shot learned model at zbar (builds a fresh cache; the controller
    uses a persistent LocalModelLearner instead)."""
    learner = LocalModelLearner(ds, nominal, cfg, track)
    model, _ = learner.model_at(zbar_state, zbar_input)
    return model


def model_error_frobenius(learned: AtvModel, plant_params: VehicleParams,
                          track: TrackModel, dt: float) -> float:
    """|| A_learned - A_plant ||_F with the plant linearized at the learned
    model's own reference point."""
    plant_lin = linearize_nominal(plant_params, DYNAMIC, learned.zbar, track, dt)
    return float(np.linalg.norm(learned.A - plant_lin.A, ord="fro"))
