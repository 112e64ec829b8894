"""Closed-circuit track geometry in arclength parameterization.

A track is a closed planar centerline tau : [0, L] -> R^2 with tau(0) = tau(L),
stored as a periodic cubic spline reparameterized to arclength, plus a uniform
curvature table and a constant corridor width. All arclength queries are
L-periodic.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.interpolate import CubicSpline

from .errors import (
    CurvatureTooHigh,
    NonClosedCurve,
    ProjectionAmbiguous,
    ProjectionOutOfTube,
    SelfIntersecting,
)

# grid resolutions (meters); resample below wheelbase scale
RESAMPLE_DS = 0.025
CURVATURE_DS = 0.05
PROJECTION_SEED_DS = 0.1


@dataclass(frozen=True)
class FrenetPose:
    """Track-relative pose: arclength s in [0, L), signed lateral offset e_y
    (left of the tangent is positive), heading error e_psi in (-pi, pi]."""
    s: float
    e_y: float
    e_psi: float


def wrap_angle(a: float) -> float:
    """Wrap an angle to (-pi, pi]."""
    return float(-((-a + np.pi) % (2.0 * np.pi) - np.pi))


class TrackModel:
    """Immutable closed-circuit geometry; safe for shared concurrent reads."""

    def __init__(self, spline: CubicSpline, length: float, width: float):
        self._spline = spline
        self._d1 = spline.derivative(1)
        self._d2 = spline.derivative(2)
        self.length = float(length)
        self.width = float(width)
        n = int(round(self.length / CURVATURE_DS))
        self.s_grid = np.linspace(0.0, self.length, n + 1)
        self.kappa_grid = self._curvature_exact(self.s_grid)
        self._validate()

    # -- construction helpers ------------------------------------------------

    def _curvature_exact(self, s) -> np.ndarray:
        d1 = self._d1(np.asarray(s) % self.length)
        d2 = self._d2(np.asarray(s) % self.length)
        num = d1[..., 0] * d2[..., 1] - d1[..., 1] * d2[..., 0]
        speed = np.hypot(d1[..., 0], d1[..., 1])
        return num / speed**3

    def _validate(self):
        p0, pL = self._spline(0.0), self._spline(self.length)
        t0, tL = self._d1(0.0), self._d1(self.length)
        if np.linalg.norm(p0 - pL) > 1e-6 or np.linalg.norm(t0 - tL) > 1e-6:
            raise NonClosedCurve("centerline seam is not C1-continuous")
        if np.max(np.abs(self.kappa_grid)) * self.width / 2.0 >= 1.0:
            raise CurvatureTooHigh(
                "corridor reaches the Frenet singularity: max |kappa| * W/2 = "
                f"{np.max(np.abs(self.kappa_grid)) * self.width / 2.0:.3f} >= 1"
            )
        _check_simple(self.position(np.arange(0.0, self.length, PROJECTION_SEED_DS)))

    # -- queries --------------------------------------------------------------

    def position(self, s) -> np.ndarray:
        """Centerline point(s) tau(s); periodic in s."""
        return self._spline(np.asarray(s) % self.length)

    def tangent_angle(self, s) -> np.ndarray | float:
        d1 = self._d1(np.asarray(s) % self.length)
        return np.arctan2(d1[..., 1], d1[..., 0])

    def curvature_at(self, s) -> np.ndarray | float:
        """Linear interpolation on the curvature table; L-periodic."""
        return np.interp(np.asarray(s) % self.length, self.s_grid, self.kappa_grid)

    def frenet_to_global(self, pose: FrenetPose) -> tuple[np.ndarray, float]:
        """Map a Frenet pose to (global xy point, global heading)."""
        s = pose.s % self.length
        p = self._spline(s)
        theta = float(self.tangent_angle(s))
        normal = np.array([-np.sin(theta), np.cos(theta)])
        return p + pose.e_y * normal, wrap_angle(theta + pose.e_psi)

    def global_to_frenet(self, position, heading: float) -> FrenetPose:
        """Project a global pose onto the centerline.

        Solves s(p) = argmin_s ||tau(s) - p||_2 with a coarse grid seed and
        Newton refinement to 1e-6 m in arclength. Raises ProjectionAmbiguous
        when two separated local minima tie, ProjectionOutOfTube outside the
        |e_y| < 5 W guard.
        """
        p = np.asarray(position, dtype=float)
        seeds = np.arange(0.0, self.length, PROJECTION_SEED_DS)
        pts = self.position(seeds)
        d2 = np.sum((pts - p) ** 2, axis=1)
        order = _local_minima(d2)
        best = self._refine_projection(seeds[order[0]], p)
        if len(order) > 1:
            runner = self._refine_projection(seeds[order[1]], p)
            ds = abs(best[0] - runner[0])
            ds = min(ds, self.length - ds)
            if abs(best[1] - runner[1]) < 1e-6 and ds > 2 * PROJECTION_SEED_DS:
                raise ProjectionAmbiguous(
                    f"projection ties at s={best[0]:.3f} and s={runner[0]:.3f}"
                )
            if runner[1] < best[1]:
                best = runner
        s_star = best[0] % self.length
        theta = float(self.tangent_angle(s_star))
        normal = np.array([-np.sin(theta), np.cos(theta)])
        e_y = float(np.dot(p - self.position(s_star), normal))
        if abs(e_y) >= 5.0 * self.width:
            raise ProjectionOutOfTube(f"|e_y| = {abs(e_y):.2f} m beyond the 5W tube")
        return FrenetPose(s=s_star, e_y=e_y, e_psi=wrap_angle(heading - theta))

    def _refine_projection(self, s0: float, p: np.ndarray) -> tuple[float, float]:
        # Newton on g(s) = (tau(s) - p) . tau'(s) = 0
        s = s0
        for _ in range(30):
            r = self.position(s) - p
            d1 = self._d1(s % self.length)
            d2 = self._d2(s % self.length)
            g = float(np.dot(r, d1))
            gp = float(np.dot(d1, d1) + np.dot(r, d2))
            if gp <= 0:  # fell into a concave spot; bail to the seed
                break
            step = g / gp
            s -= step
            if abs(step) < 1e-9:
                break
        dist = float(np.linalg.norm(self.position(s) - p))
        return s % self.length, dist

    def dump_centerline(self, path):
        """Write the centerline as CSV with columns s, x, y, kappa, width."""
        pts = self.position(self.s_grid)
        rows = np.column_stack(
            [self.s_grid, pts[:, 0], pts[:, 1], self.kappa_grid,
             np.full_like(self.s_grid, self.width)]
        )
        np.savetxt(path, rows, delimiter=",", header="s,x,y,kappa,width", comments="")


# -- construction -------------------------------------------------------------


def build_track(spec: dict) -> TrackModel:
    """Build a TrackModel from a track-spec record.

    The record either names a preset ("oval", "l_shape") with optional
    dimension overrides, or carries an explicit closed waypoint list:

        {"preset": "oval", "straight_length": 10.0, "radius": 2.0, "width": 1.0}
        {"waypoints": [[x0, y0], [x1, y1], ...], "width": 1.0}
    """
    spec = dict(spec)
    width = float(spec.get("width", 1.0))
    preset = spec.get("preset")
    if preset == "oval":
        wp = _oval_waypoints(
            straight=float(spec.get("straight_length", 10.0)),
            radius=float(spec.get("radius", 2.0)),
        )
    elif preset == "l_shape":
        wp = _l_shape_waypoints()
    elif preset is None and "waypoints" in spec:
        wp = np.asarray(spec["waypoints"], dtype=float)
        if wp.ndim != 2 or wp.shape[1] != 2 or len(wp) < 4:
            raise ValueError("waypoints must be an (n, 2) array with n >= 4")
        if np.linalg.norm(wp[0] - wp[-1]) > 1e-3:
            raise NonClosedCurve("first and last waypoints do not coincide")
        if np.linalg.norm(wp[0] - wp[-1]) > 0:
            wp = np.vstack([wp[:-1], wp[0]])
    else:
        raise ValueError(f"unknown track spec: {spec!r}")
    spline, length = _arclength_spline(wp)
    return TrackModel(spline, length, width)


def _oval_waypoints(straight: float, radius: float, ds: float = 0.05) -> np.ndarray:
    """Two straights of the given length joined by semicircles of the given
    radius; starts at the beginning of the lower straight heading +x."""
    segs = []
    # lower straight: (0,0) -> (straight, 0)
    n = max(2, int(straight / ds))
    t = np.linspace(0.0, straight, n, endpoint=False)
    segs.append(np.column_stack([t, np.zeros_like(t)]))
    # right semicircle about (straight, radius)
    n = max(2, int(np.pi * radius / ds))
    a = np.linspace(-np.pi / 2, np.pi / 2, n, endpoint=False)
    segs.append(np.column_stack([straight + radius * np.cos(a),
                                 radius + radius * np.sin(a)]))
    # upper straight
    t = np.linspace(straight, 0.0, max(2, int(straight / ds)), endpoint=False)
    segs.append(np.column_stack([t, np.full_like(t, 2 * radius)]))
    # left semicircle about (0, radius)
    a = np.linspace(np.pi / 2, 3 * np.pi / 2, max(2, int(np.pi * radius / ds)),
                    endpoint=False)
    segs.append(np.column_stack([radius * np.cos(a), radius + radius * np.sin(a)]))
    wp = np.vstack(segs)
    return np.vstack([wp, wp[0]])


def _l_shape_waypoints(ds: float = 0.05) -> np.ndarray:
    """Rounded-L circuit, ~17 m long: one 6 m straight, a hairpin-like double
    left at the far end, and an inner right-hand corner. BARC scale."""
    corners = [  # (outline vertex, turn direction, radius)
        (np.array([0.0, 0.0]), +1, 0.9),
        (np.array([5.6, 0.0]), +1, 0.9),
        (np.array([5.6, 2.2]), +1, 0.9),   # hairpin region: two lefts,
        (np.array([2.8, 2.2]), -1, 0.7),   # short gap, then inner right
        (np.array([2.8, 4.0]), +1, 0.9),
        (np.array([0.0, 4.0]), +1, 0.9),
    ]
    return _rounded_polygon_waypoints(corners, ds)


def _rounded_polygon_waypoints(corners, ds: float) -> np.ndarray:
    """Centerline through a closed polygon with per-corner arc rounding."""
    n = len(corners)
    pieces = []
    arc_exits = []
    for i in range(n):
        v_prev = corners[i - 1][0]
        v, turn, r = corners[i]
        v_next = corners[(i + 1) % n][0]
        d_in = (v - v_prev) / np.linalg.norm(v - v_prev)
        d_out = (v_next - v) / np.linalg.norm(v_next - v)
        # tangent points of the rounding arc on each leg
        p_in = v - r * d_in
        p_out = v + r * d_out
        # arc center sits off the incoming leg on the turning side
        normal_in = turn * np.array([-d_in[1], d_in[0]])
        center = p_in + r * normal_in
        a0 = np.arctan2(*(p_in - center)[::-1])
        a1 = np.arctan2(*(p_out - center)[::-1])
        sweep = wrap_angle(a1 - a0)
        if turn > 0 and sweep < 0:
            sweep += 2 * np.pi
        if turn < 0 and sweep > 0:
            sweep -= 2 * np.pi
        m = max(2, int(abs(sweep) * r / ds))
        a = a0 + np.linspace(0.0, sweep, m, endpoint=False)
        arc = center + r * np.column_stack([np.cos(a), np.sin(a)])
        pieces.append((p_in, arc, p_out))
        arc_exits.append(p_out)
    segs = []
    for i in range(n):
        start = arc_exits[i - 1]
        end = pieces[i][0]
        gap = float(np.linalg.norm(end - start))
        if gap > 1e-9:
            m = max(2, int(gap / ds))
            t = np.linspace(0.0, 1.0, m, endpoint=False)
            segs.append(start + t[:, None] * (end - start))
        segs.append(pieces[i][1])
    wp = np.vstack(segs)
    return np.vstack([wp, wp[0]])


def _arclength_spline(waypoints: np.ndarray, tol: float = 5e-5,
                      max_iter: int = 4) -> tuple[CubicSpline, float]:
    """Fit a periodic cubic spline and reparameterize it to unit speed.

    Iterates spline fit -> numeric arclength -> uniform-s resample until the
    parametric speed is 1 within tol everywhere.
    """
    pts = np.asarray(waypoints, dtype=float)
    if np.linalg.norm(pts[0] - pts[-1]) > 1e-9:
        raise NonClosedCurve("waypoint loop must end where it starts")
    chords = np.linalg.norm(np.diff(pts, axis=0), axis=1)
    if np.any(chords <= 0):
        keep = np.concatenate([[True], chords > 0])
        pts = pts[keep]
        chords = np.linalg.norm(np.diff(pts, axis=0), axis=1)
    t = np.concatenate([[0.0], np.cumsum(chords)])
    spline = CubicSpline(t, pts, bc_type="periodic", extrapolate="periodic")
    total = t[-1]
    for _ in range(max_iter):
        # dense speed profile and numeric arclength
        td = np.linspace(0.0, total, 20 * len(pts))
        speed = np.linalg.norm(spline.derivative(1)(td), axis=1)
        if np.max(np.abs(speed - 1.0)) < tol:
            break
        s_cum = np.concatenate([[0.0], np.cumsum(
            0.5 * (speed[1:] + speed[:-1]) * np.diff(td))])
        length = s_cum[-1]
        n = int(round(length / RESAMPLE_DS))
        s_uniform = np.linspace(0.0, length, n, endpoint=False)
        t_of_s = np.interp(s_uniform, s_cum, td)
        new_pts = spline(t_of_s)
        pts = np.vstack([new_pts, new_pts[0]])
        t = np.linspace(0.0, length, n + 1)
        spline = CubicSpline(t, pts, bc_type="periodic", extrapolate="periodic")
        total = length
    return spline, float(total)


# -- geometry checks -----------------------------------------------------------


def _local_minima(d2: np.ndarray) -> np.ndarray:
    """Indices of cyclic local minima of a sampled profile, best first."""
    left = np.roll(d2, 1)
    right = np.roll(d2, -1)
    idx = np.nonzero((d2 <= left) & (d2 <= right))[0]
    return idx[np.argsort(d2[idx])]


def _check_simple(polyline: np.ndarray):
    """Raise SelfIntersecting if any two non-adjacent closed-polyline segments
    cross. O(n^2) vectorized; fine at table scale."""
    p = polyline
    q = np.roll(polyline, -1, axis=0)
    n = len(p)
    i, j = np.triu_indices(n, k=2)
    # adjacent through the wrap
    mask = ~((i == 0) & (j == n - 1))
    i, j = i[mask], j[mask]
    d1 = q[i] - p[i]
    d2 = q[j] - p[j]
    r = p[j] - p[i]
    denom = d1[:, 0] * d2[:, 1] - d1[:, 1] * d2[:, 0]
    with np.errstate(divide="ignore", invalid="ignore"):
        t = (r[:, 0] * d2[:, 1] - r[:, 1] * d2[:, 0]) / denom
        u = (r[:, 0] * d1[:, 1] - r[:, 1] * d1[:, 0]) / denom
    hit = (np.abs(denom) > 1e-12) & (t > 0) & (t < 1) & (u > 0) & (u < 1)
    if np.any(hit):
        k = np.nonzero(hit)[0][0]
        raise SelfIntersecting(
            f"centerline segments {i[k]} and {j[k]} cross"
        )
