"""Convex QP interface with verifiable KKT residuals.

Problems are stated with explicit equality and two-sided inequality blocks and
solved by an operator-splitting backend (OSQP) with Ruiz equilibration, warm
starting, and polishing. Every solution reports primal/dual/complementarity
residuals recomputed here, independently of the backend's internal scaled
quantities; a solution is only labeled optimal when those residuals pass.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple

import numpy as np
import osqp
import scipy.sparse as sp

STATUS_OPTIMAL = "optimal"
STATUS_PRIMAL_INFEASIBLE = "primal_infeasible"
STATUS_MAX_ITER = "max_iter"


@dataclass
class QpProblem:
    """min 1/2 v'Hv + q'v  s.t.  A_eq v = b_eq,  l_in <= A_in v <= u_in."""
    H: sp.csc_matrix
    q: np.ndarray
    A_eq: sp.csc_matrix | None = None
    b_eq: np.ndarray | None = None
    A_in: sp.csc_matrix | None = None
    l_in: np.ndarray | None = None
    u_in: np.ndarray | None = None

    def __post_init__(self):
        self.H = sp.csc_matrix(self.H)
        self.q = np.asarray(self.q, dtype=float)
        if self.A_eq is not None:
            self.A_eq = sp.csc_matrix(self.A_eq)
            self.b_eq = np.asarray(self.b_eq, dtype=float)
        if self.A_in is not None:
            self.A_in = sp.csc_matrix(self.A_in)
            self.l_in = np.asarray(self.l_in, dtype=float)
            self.u_in = np.asarray(self.u_in, dtype=float)

    @property
    def n_var(self) -> int:
        return self.H.shape[0]

    def validate(self):
        n = self.n_var
        if self.H.shape != (n, n) or self.q.shape != (n,):
            raise ValueError("H/q dimensions are inconsistent")
        asym = abs(self.H - self.H.T).max()
        if asym > 1e-9:
            raise ValueError(f"H is not symmetric (|H - H'| = {asym:.2e})")
        # Cholesky-with-shift PSD check (dense is fine at control-scale sizes)
        Hd = self.H.toarray()
        shift = 1e-10 * (1.0 + np.trace(Hd) / max(n, 1))
        try:
            np.linalg.cholesky(Hd + shift * np.eye(n))
        except np.linalg.LinAlgError as exc:
            raise ValueError("H is not positive semidefinite") from exc
        if self.A_eq is not None and (self.A_eq.shape[1] != n
                                      or len(self.b_eq) != self.A_eq.shape[0]):
            raise ValueError("equality block dimensions are inconsistent")
        if self.A_in is not None:
            if (self.A_in.shape[1] != n or len(self.l_in) != self.A_in.shape[0]
                    or len(self.u_in) != self.A_in.shape[0]):
                raise ValueError("inequality block dimensions are inconsistent")
            if np.any(self.l_in > self.u_in):
                raise ValueError("l_in exceeds u_in")

    def stacked(self) -> tuple[sp.csc_matrix, np.ndarray, np.ndarray]:
        """Single l <= Av <= u constraint stack (equalities get l = u)."""
        blocks, ls, us = [], [], []
        if self.A_eq is not None and self.A_eq.shape[0] > 0:
            blocks.append(self.A_eq)
            ls.append(self.b_eq)
            us.append(self.b_eq)
        if self.A_in is not None and self.A_in.shape[0] > 0:
            blocks.append(self.A_in)
            ls.append(self.l_in)
            us.append(self.u_in)
        if not blocks:
            A = sp.csc_matrix((0, self.n_var))
            return A, np.empty(0), np.empty(0)
        return (sp.vstack(blocks, format="csc"), np.concatenate(ls),
                np.concatenate(us))


@dataclass
class QpSolution:
    x: np.ndarray
    y: np.ndarray                    # duals for the stacked [eq; in] rows
    status: str
    prim_res: float
    dual_res: float
    comp_res: float
    iterations: int
    obj_val: float
    infeasibility_certificate: np.ndarray | None = None
    scale_prim: float = 1.0          # residual scales used for termination
    scale_dual: float = 1.0


def kkt_residuals(p: QpProblem, x: np.ndarray, y: np.ndarray
                  ) -> tuple[float, float, float]:
    """Stationarity, primal feasibility, and complementary slackness residuals
    (infinity norms), recomputed from the problem data."""
    A, l, u = p.stacked()
    ax = A @ x if A.shape[0] else np.empty(0)
    prim = 0.0
    if A.shape[0]:
        prim = float(max(np.maximum(ax - u, 0.0).max(initial=0.0),
                         np.maximum(l - ax, 0.0).max(initial=0.0)))
    dual_vec = p.H @ x + p.q + (A.T @ y if A.shape[0] else 0.0)
    dual = float(np.abs(dual_vec).max(initial=0.0))
    comp = 0.0
    if A.shape[0]:
        y_pos = np.maximum(y, 0.0)
        y_neg = np.maximum(-y, 0.0)
        gap_u = np.where(np.isfinite(u), u - ax, np.inf)
        gap_l = np.where(np.isfinite(l), ax - l, np.inf)
        comp = float(max(np.abs(y_pos * np.where(y_pos > 0, gap_u, 0.0)).max(initial=0.0),
                         np.abs(y_neg * np.where(y_neg > 0, gap_l, 0.0)).max(initial=0.0)))
    return prim, dual, comp


_STATUS_MAP = {
    "solved": STATUS_OPTIMAL,
    "primal infeasible": STATUS_PRIMAL_INFEASIBLE,
    "primal infeasible inaccurate": STATUS_PRIMAL_INFEASIBLE,
}


def solve(p: QpProblem, tol_primal: float = 1e-6, tol_dual: float = 1e-6,
          max_iter: int = 4000, warm_start=None, validate: bool = True
          ) -> QpSolution:
    """Solve a QP to the requested scaled tolerances.

    Two-stage strategy: a loose operator-splitting pass whose polish step
    normally lands at machine precision, escalated to a tight pass only when
    the independently recomputed KKT residuals miss the tolerances. Optimal
    status is claimed only when those residuals pass; warm_start takes
    (primal, dual) from a previous related solve.
    """
    if validate:
        p.validate()
    A, l, u = p.stacked()
    eps = min(tol_primal, tol_dual)
    sol = _solve_once(p, A, l, u, max(1e-5, eps), max_iter, warm_start,
                      tol_primal, tol_dual)
    if sol.status == STATUS_OPTIMAL or sol.status == STATUS_PRIMAL_INFEASIBLE \
            or eps >= 1e-5:
        return sol
    tight = _solve_once(p, A, l, u, eps * 0.1, max_iter,
                        (sol.x, sol.y) if np.all(np.isfinite(sol.x)) else warm_start,
                        tol_primal, tol_dual)
    return tight if tight.status == STATUS_OPTIMAL else \
        min((sol, tight), key=lambda s: max(s.prim_res, s.dual_res))


def _solve_once(p: QpProblem, A, l, u, eps: float, max_iter: int, warm_start,
                tol_primal, tol_dual) -> QpSolution:
    solver = osqp.OSQP()
    solver.setup(P=p.H, q=p.q, A=A, l=l, u=u, verbose=False,
                 eps_abs=eps, eps_rel=eps, max_iter=max_iter,
                 polish=True, eps_prim_inf=1e-8, eps_dual_inf=1e-8)
    if warm_start is not None:
        wx, wy = warm_start
        solver.warm_start(x=np.asarray(wx, float), y=np.asarray(wy, float))
    res = solver.solve()
    return _postprocess(p, A, res, tol_primal, tol_dual)


def _postprocess(p: QpProblem, A, res, tol_primal, tol_dual) -> QpSolution:
    status = _STATUS_MAP.get(res.info.status, STATUS_MAX_ITER)
    cert = None
    if status == STATUS_PRIMAL_INFEASIBLE:
        cert = np.asarray(res.prim_inf_cert, dtype=float)
        x = np.zeros(p.n_var)
        y = np.zeros(A.shape[0])
        return QpSolution(x=x, y=y, status=status, prim_res=np.inf,
                          dual_res=np.inf, comp_res=np.inf,
                          iterations=int(res.info.iter), obj_val=np.inf,
                          infeasibility_certificate=cert)
    x = np.asarray(res.x, dtype=float)
    y = np.asarray(res.y, dtype=float) if A.shape[0] else np.empty(0)
    prim, dual, comp = kkt_residuals(p, x, y)
    scale_p = 1.0 + (np.abs(A @ x).max(initial=0.0) if A.shape[0] else 0.0)
    scale_d = 1.0 + max(np.abs(p.H @ x).max(initial=0.0),
                        np.abs(p.q).max(initial=0.0))
    # the independent residual check is the arbiter, whatever the backend says
    ok = prim <= tol_primal * scale_p and dual <= tol_dual * scale_d
    status = STATUS_OPTIMAL if ok else STATUS_MAX_ITER
    obj = float(0.5 * x @ (p.H @ x) + p.q @ x)
    return QpSolution(x=x, y=y, status=status, prim_res=prim, dual_res=dual,
                      comp_res=comp, iterations=int(res.info.iter), obj_val=obj,
                      scale_prim=scale_p, scale_dual=scale_d)


class LpResult(NamedTuple):
    value: float
    lam: np.ndarray | None
    status: str


def solve_lp_over_simplex(J, X, xbar, tol: float = 1e-9,
                          max_iter: int = 20000) -> LpResult:
    """min J'lam  s.t.  X lam = xbar, 0 <= lam <= 1, sum(lam) = 1.

    Solved as a QP with a tiny ridge (1e-10) for uniqueness. An infeasible
    status signals that xbar lies outside the convex hull of X's columns.
    """
    J = np.asarray(J, dtype=float)
    X = np.asarray(X, dtype=float)
    xbar = np.asarray(xbar, dtype=float)
    n = len(J)
    A_eq = sp.vstack([sp.csc_matrix(X), sp.csc_matrix(np.ones((1, n)))],
                     format="csc")
    b_eq = np.concatenate([xbar, [1.0]])
    p = QpProblem(
        H=sp.identity(n, format="csc") * 1e-10, q=J,
        A_eq=A_eq, b_eq=b_eq,
        A_in=sp.identity(n, format="csc"), l_in=np.zeros(n), u_in=np.ones(n),
    )
    sol = solve(p, tol_primal=tol, tol_dual=tol, max_iter=max_iter)
    if sol.status == STATUS_PRIMAL_INFEASIBLE:
        return LpResult(value=np.inf, lam=None, status=sol.status)
    return LpResult(value=float(J @ sol.x), lam=sol.x, status=sol.status)


# -- persistent session for receding-horizon reuse ----------------------------


class OsqpSession:
    """Fixed-sparsity problem reused across control steps: values updated in
    place, factorization reuse and warm starting handled by the backend."""

    def __init__(self, p: QpProblem, tol_primal: float = 1e-6,
                 tol_dual: float = 1e-6, max_iter: int = 4000):
        p.validate()
        self.tol_primal = tol_primal
        self.tol_dual = tol_dual
        self._A, l, u = p.stacked()
        self._p = p
        eps = min(tol_primal, tol_dual)
        self._solver = osqp.OSQP()
        self._solver.setup(P=p.H, q=p.q, A=self._A, l=l, u=u, verbose=False,
                           eps_abs=eps * 0.1, eps_rel=eps * 0.1,
                           max_iter=max_iter, polish=True,
                           eps_prim_inf=1e-8, eps_dual_inf=1e-8)
        self._pattern = (self._A.indices.copy(), self._A.indptr.copy())

    def update(self, p: QpProblem):
        """Refresh constraint values and linear cost; sparsity must match."""
        A, l, u = p.stacked()
        if (len(A.data) != len(self._A.data)
                or not np.array_equal(A.indices, self._pattern[0])
                or not np.array_equal(A.indptr, self._pattern[1])):
            raise ValueError("constraint sparsity changed between steps")
        self._solver.update(q=p.q, l=l, u=u, Ax=A.data)
        self._A = A
        self._p = p

    def warm_start(self, x, y):
        self._solver.warm_start(x=np.asarray(x, float), y=np.asarray(y, float))

    def solve(self) -> QpSolution:
        res = self._solver.solve()
        return _postprocess(self._p, self._A, res, self.tol_primal,
                            self.tol_dual)


def dump_problem(p: QpProblem, directory):
    """Matrix-market-style text dump for offline reproduction of one solve."""
    from scipy.io import mmwrite

    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    mmwrite(directory / "H.mtx", p.H)
    np.savetxt(directory / "q.txt", p.q)
    if p.A_eq is not None:
        mmwrite(directory / "A_eq.mtx", p.A_eq)
        np.savetxt(directory / "b_eq.txt", p.b_eq)
    if p.A_in is not None:
        mmwrite(directory / "A_in.mtx", p.A_in)
        np.savetxt(directory / "bounds_in.txt",
                   np.column_stack([p.l_in, p.u_in]))
