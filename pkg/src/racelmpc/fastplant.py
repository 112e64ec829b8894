"""Optional numba fast path for the fine-step plant integration.

Mirrors the dynamic-bicycle RHS and RK4 substepping of the numpy
implementation; simulate_step falls back to numpy when numba is unavailable.
Status codes: 0 ok, 1 corridor departure, 2 non-finite / Frenet singularity.
"""

from __future__ import annotations

import numpy as np

try:
    import numba as nb
    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - exercised only without numba
    HAVE_NUMBA = False

if HAVE_NUMBA:

    @nb.njit(cache=True)
    def _kappa_at(s, ds, kappa_grid, length):
        sm = s % length
        idx = int(sm / ds)
        if idx >= len(kappa_grid) - 1:
            idx = len(kappa_grid) - 2
        frac = (sm - idx * ds) / ds
        return kappa_grid[idx] * (1.0 - frac) + kappa_grid[idx + 1] * frac

    @nb.njit(cache=True)
    def _rhs(x, a_cmd, delta, kappa, mass, iz, lf, lr, pb, pc, pd, mu,
             drag_c, roll_c, vx_min, out):
        vx, vy, wz, epsi, ey = x[0], x[1], x[2], x[3], x[5]
        vx_eff = vx if vx > vx_min else vx_min
        alpha_f = delta - np.arctan2(vy + lf * wz, vx_eff)
        alpha_r = -np.arctan2(vy - lr * wz, vx_eff)
        wb = lf + lr
        fzf = mass * 9.81 * lr / wb
        fzr = mass * 9.81 * lf / wb
        fyf = pd * np.sin(pc * np.arctan(pb * alpha_f)) * mu * fzf
        fyr = pd * np.sin(pc * np.arctan(pb * alpha_r)) * mu * fzr
        drag = (drag_c * vx * abs(vx) + roll_c) / mass
        cos_d = np.cos(delta)
        sin_d = np.sin(delta)
        out[0] = a_cmd + vy * wz - fyf * sin_d / mass - drag
        out[1] = (fyf * cos_d + fyr) / mass - vx * wz
        out[2] = (lf * fyf * cos_d - lr * fyr) / iz
        denom = 1.0 - kappa * ey
        if denom <= 1e-3:
            return 2
        cos_e = np.cos(epsi)
        sin_e = np.sin(epsi)
        sdot = (vx * cos_e - vy * sin_e) / denom
        out[3] = wz - kappa * sdot
        out[4] = sdot
        out[5] = vx * sin_e + vy * cos_e
        return 0

    @nb.njit(cache=True)
    def integrate_dynamic(x0, a_cmd, delta, n_sub, h, ds, kappa_grid, length,
                          mass, iz, lf, lr, pb, pc, pd, mu, drag_c, roll_c,
                          vx_min, ey_max):
        x = x0.copy()
        k1 = np.empty(6)
        k2 = np.empty(6)
        k3 = np.empty(6)
        k4 = np.empty(6)
        xt = np.empty(6)
        for _ in range(n_sub):
            st = _rhs(x, a_cmd, delta, _kappa_at(x[4], ds, kappa_grid, length),
                      mass, iz, lf, lr, pb, pc, pd, mu, drag_c, roll_c,
                      vx_min, k1)
            if st != 0:
                return x, st
            for i in range(6):
                xt[i] = x[i] + 0.5 * h * k1[i]
            st = _rhs(xt, a_cmd, delta, _kappa_at(xt[4], ds, kappa_grid, length),
                      mass, iz, lf, lr, pb, pc, pd, mu, drag_c, roll_c,
                      vx_min, k2)
            if st != 0:
                return x, st
            for i in range(6):
                xt[i] = x[i] + 0.5 * h * k2[i]
            st = _rhs(xt, a_cmd, delta, _kappa_at(xt[4], ds, kappa_grid, length),
                      mass, iz, lf, lr, pb, pc, pd, mu, drag_c, roll_c,
                      vx_min, k3)
            if st != 0:
                return x, st
            for i in range(6):
                xt[i] = x[i] + h * k3[i]
            st = _rhs(xt, a_cmd, delta, _kappa_at(xt[4], ds, kappa_grid, length),
                      mass, iz, lf, lr, pb, pc, pd, mu, drag_c, roll_c,
                      vx_min, k4)
            if st != 0:
                return x, st
            for i in range(6):
                x[i] = x[i] + (h / 6.0) * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i]
                                           + k4[i])
            finite = True
            for i in range(6):
                if not np.isfinite(x[i]):
                    finite = False
            if not finite:
                return x, 2
            if abs(x[5]) > ey_max:
                return x, 1
        return x, 0
