"""Growing multi-lap dataset with weighted nearest-neighbor queries.

Stores closed-loop laps, computes per-state cost-to-go (steps remaining to the
finish line), and answers two query kinds: safe-set neighbors for terminal-set
construction and (state, input) -> successor neighbors for model regression.

Circuit wrap handling: every completed lap carries a wrap-extension view - the
first steps of the following lap (or, until that lap exists, the lap's own
first steps) shifted by +L with cost-to-go continuing negatively. Distances
treat the arclength difference as min over shifts {0, +L, -L}; a shifted match
is returned in the query's frame with its cost-to-go adjusted by the lap
period, so the "time remaining" semantics stay consistent across the line.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
import yaml

from .errors import DuplicateLap, EmptyDataset, InsufficientData
from .simulator import LapRecord, lap_record_from_csv
from .track import TrackModel
from .vehicle import IX_S, NX

# safe-set metric: progress-dominated matching (weights on [vx,vy,wz,epsi,s,ey])
DEFAULT_D = np.array([0.05, 0.0, 0.0, 0.0, 1.0, 0.1])


@dataclass(frozen=True)
class SafeSetQuery:
    """KP neighbor states (columns of X) with column-aligned cost-to-go J."""
    X: np.ndarray                 # (6, K*P)
    J: np.ndarray                 # (K*P,)
    sources: list[tuple[int, int, bool]]   # (lap_index, step, is_extension)

    def cost_to_go_vector(self) -> np.ndarray:
        return self.J


def cost_to_go_vector(query: SafeSetQuery) -> np.ndarray:
    """Column-aligned cost-to-go of a safe-set query (pure accessor)."""
    return query.cost_to_go_vector()


@dataclass(frozen=True)
class RegressionMetric:
    """Weighted metric over (state, input) pairs for regression neighbors.

    Features are [v_x, v_y, omega_z, kappa(s), a, delta] when use_curvature is
    set (dynamically similar corners match regardless of position), else
    [v_x, v_y, omega_z, s, a, delta] with wrap-aware s differences.
    """
    weights: np.ndarray
    use_curvature: bool = True
    track: TrackModel | None = None

    def __post_init__(self):
        object.__setattr__(self, "weights", np.asarray(self.weights, dtype=float))
        if self.weights.shape != (6,):
            raise ValueError("metric weights must have 6 entries")
        if self.use_curvature and self.track is None:
            raise ValueError("curvature features need a track")

    def feature_matrix(self, states: np.ndarray, inputs: np.ndarray) -> np.ndarray:
        pos = (np.asarray(self.track.curvature_at(states[:, IX_S]), dtype=float)
               if self.use_curvature else states[:, IX_S])
        return np.column_stack([states[:, 0], states[:, 1], states[:, 2],
                                pos, inputs[:, 0], inputs[:, 1]])

    def distances_sq(self, feats: np.ndarray, zq: np.ndarray,
                     wrap_length: float | None) -> np.ndarray:
        d = feats - zq
        if not self.use_curvature and wrap_length is not None:
            ds = d[:, 3]
            d[:, 3] = np.minimum(np.abs(ds),
                                 np.minimum(np.abs(ds + wrap_length),
                                            np.abs(ds - wrap_length)))
        return (d * d) @ self.weights


def default_metric(track: TrackModel) -> RegressionMetric:
    # calibrated so the paper's bandwidth grid {3,4,5,10} spans sparse-to-rich
    # regimes at desk scale; see LearnerConfig
    return RegressionMetric(weights=np.array([4.0, 1.0, 0.25, 0.25, 0.1, 4.0]),
                            use_curvature=True, track=track)


class Dataset:
    """Append-only lap store; reads are concurrent-safe between appends.

    wrap_length is the circuit length L: extensions shift by +L, and
    wrap-aware distances consider s viewed at {0, +L, -L}.
    """

    def __init__(self, wrap_length: float, ext_len: int = 24):
        self.wrap_length = float(wrap_length)
        self.ext_len = int(ext_len)
        self.laps: list[LapRecord] = []
        self._pools: dict[int, dict] = {}     # lap_index -> safe-set pool
        self._reg_cache: dict | None = None

    # -- bookkeeping -----------------------------------------------------------

    def __len__(self) -> int:
        return len(self.laps)

    @property
    def completed_laps(self) -> list[LapRecord]:
        return [lap for lap in self.laps if lap.completed]

    def append_lap(self, lap: LapRecord) -> "Dataset":
        if any(l.lap_index == lap.lap_index for l in self.laps):
            raise DuplicateLap(f"lap {lap.lap_index} already stored")
        if self.laps and lap.lap_index != self.laps[-1].lap_index + 1:
            raise ValueError("lap indices must be consecutive")
        prev = self.laps[-1] if self.laps else None
        self.laps.append(lap)
        if lap.completed:
            self._pools[lap.lap_index] = self._build_pool(lap, next_lap=None)
        if prev is not None and prev.completed:
            self._pools[prev.lap_index] = self._build_pool(prev, next_lap=lap)
        self._reg_cache = None
        return self

    def _build_pool(self, lap: LapRecord, next_lap: LapRecord | None) -> dict:
        states = lap.states
        ctg = lap.cost_to_go
        donor = next_lap if (next_lap is not None and len(next_lap.states) > 1) \
            else lap
        m = min(self.ext_len, len(donor.states) - 1)
        ext_states = donor.states[1:m + 1].copy()
        # the extension lives one circuit ahead of this lap's frame
        ext_states[:, IX_S] += self.wrap_length
        ext_ctg = -np.arange(1, m + 1, dtype=float)
        return {
            "states": np.vstack([states, ext_states]),
            "ctg": np.concatenate([ctg, ext_ctg]),
            "step": np.concatenate([np.arange(len(states)),
                                    np.arange(1, m + 1)]),
            "is_ext": np.concatenate([np.zeros(len(states), dtype=bool),
                                      np.ones(m, dtype=bool)]),
            "T": float(lap.T),
        }

    # -- safe-set query ---------------------------------------------------------

    def query_safe_set(self, x, K: int, P: int, D=DEFAULT_D) -> SafeSetQuery:
        """K nearest stored states from each of the P most recent completed
        laps under the weighted distance (x_i - x)^T D (x_i - x), wrap-aware
        in s. Ties break toward earlier step index."""
        laps = self.completed_laps
        if len(laps) < P:
            raise InsufficientData(f"need {P} completed laps, have {len(laps)}")
        x = np.asarray(x, dtype=float)
        D = np.asarray(D, dtype=float)
        cols, ctgs, sources = [], [], []
        for lap in laps[-P:][::-1]:
            pool = self._pools[lap.lap_index]
            if len(pool["states"]) < K:
                raise InsufficientData(
                    f"lap {lap.lap_index} holds {len(pool['states'])} < K states")
            states, dist, shift = _wrap_aware_distances(
                pool["states"], x, D, self.wrap_length)
            order = np.lexsort((pool["is_ext"], pool["step"], dist))[:K]
            cols.append(states[order].T)
            ctgs.append(pool["ctg"][order] - shift[order] * pool["T"])
            sources.extend(
                (lap.lap_index, int(pool["step"][i]), bool(pool["is_ext"][i]))
                for i in order)
        return SafeSetQuery(X=np.hstack(cols), J=np.concatenate(ctgs),
                            sources=sources)

    # -- regression query -------------------------------------------------------

    def regression_arrays(self) -> dict:
        if self._reg_cache is None:
            laps = self.completed_laps
            if laps:
                z_states = np.vstack([lap.states[:-1] for lap in laps])
                z_inputs = np.vstack([lap.inputs for lap in laps])
                x_next = np.vstack([lap.states[1:] for lap in laps])
                src = np.vstack([
                    np.column_stack([np.full(len(lap.inputs), lap.lap_index),
                                     np.arange(len(lap.inputs))])
                    for lap in laps])
            else:
                z_states = np.empty((0, NX))
                z_inputs = np.empty((0, 2))
                x_next = np.empty((0, NX))
                src = np.empty((0, 2), dtype=int)
            self._reg_cache = {"z_states": z_states, "z_inputs": z_inputs,
                               "x_next": x_next, "src": src}
        return self._reg_cache

    def query_regression_neighbors(self, zbar_state, zbar_input, M: int,
                                   metric: RegressionMetric):
        """M nearest stored (state, input) pairs and their recorded successors
        under the metric; returns all pairs when fewer than M exist."""
        arrs = self.regression_arrays()
        n = len(arrs["z_states"])
        if n == 0:
            raise EmptyDataset("no completed laps to regress on")
        feats = metric.feature_matrix(arrs["z_states"], arrs["z_inputs"])
        zq = metric.feature_matrix(np.asarray(zbar_state, float)[None, :],
                                   np.asarray(zbar_input, float)[None, :])[0]
        dist = metric.distances_sq(feats, zq, self.wrap_length)
        if n <= M:
            order = np.argsort(dist, kind="stable")
        else:
            part = np.argpartition(dist, M - 1)[:M]
            order = part[np.argsort(dist[part], kind="stable")]
        return (arrs["z_states"][order], arrs["z_inputs"][order],
                arrs["x_next"][order], dist[order], arrs["src"][order])


def _wrap_aware_distances(states: np.ndarray, x: np.ndarray, D: np.ndarray,
                          wrap_length: float | None):
    """Distances under D with the entry's s viewed at shifts {0, +L, -L};
    returns (possibly shifted states, distances, applied shift in laps)."""
    diff = states - x
    if wrap_length is None:
        if D.ndim == 1:
            dist = (diff * diff) @ D
        else:
            dist = np.einsum("ni,ij,nj->n", diff, D, diff)
        return states, dist, np.zeros(len(states))
    shifts = np.array([0.0, wrap_length, -wrap_length])
    dists = np.empty((len(states), 3))
    for k, sh in enumerate(shifts):
        d = diff.copy()
        d[:, IX_S] += sh
        if D.ndim == 1:
            dists[:, k] = (d * d) @ D
        else:
            dists[:, k] = np.einsum("ni,ij,nj->n", d, D, d)
    best = np.argmin(dists, axis=1)
    shifted = states.copy()
    shifted[:, IX_S] += shifts[best]
    return shifted, dists[np.arange(len(states)), best], \
        np.array([0.0, 1.0, -1.0])[best]


# -- persistence ---------------------------------------------------------------


def save_dataset(ds: Dataset, directory, dt_ctrl: float):
    """One CSV per lap plus a manifest with lap order, T, and failure flags."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    manifest = {"ext_len": ds.ext_len, "wrap_length": ds.wrap_length,
                "dt_ctrl": dt_ctrl, "laps": []}
    for lap in ds.laps:
        name = f"lap_{lap.lap_index:03d}.csv"
        lap.to_csv(directory / name, dt_ctrl)
        manifest["laps"].append({
            "file": name, "lap_index": lap.lap_index,
            "T": lap.T, "completed": lap.completed, "failure": lap.failure,
        })
    with open(directory / "manifest.yaml", "w") as fh:
        yaml.safe_dump(manifest, fh, sort_keys=False)


def load_dataset(directory) -> tuple[Dataset, float]:
    directory = Path(directory)
    with open(directory / "manifest.yaml") as fh:
        manifest = yaml.safe_load(fh)
    ds = Dataset(wrap_length=manifest["wrap_length"], ext_len=manifest["ext_len"])
    for entry in manifest["laps"]:
        lap = lap_record_from_csv(directory / entry["file"], entry["lap_index"],
                                  failure=entry["failure"])
        ds.append_lap(lap)
    return ds, float(manifest["dt_ctrl"])
