"""Closed-form solver for linear stochastic Fredholm equations of the second kind.

The discrete problem on a grid with step dt is, per path,

    lam * v[k] = f[k] - dt * sum_{r<k} K[k,r] v[r]
                       - dt * sum_{r>k} L[r,k] E_{t_k}[v[r]],

with K, L strictly lower triangular.  Conditioning the equation at t_k on
the time-k sigma-algebra closes it over the unknowns m_k[j] = E_{t_k}[v[j]],
j >= k, through the operator

    D_k = lam * id + dt * (K + L^T) restricted to indices >= k.

Eliminating the conditional rows yields the forward recursion
v = (id - B)^{-1} a whose coefficients are assembled below.  The closed form
and the discretized equation are the same linear system, so the residual of
a solved problem is at linear-algebra precision, not quadrature precision.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
import scipy.linalg as sla

from .errors import InadmissibleKernel, ShapeError, SingularOperator
from .grid_ops import GridKernel, SolveHandle, TimeGrid, invert_id_minus
from .signals import SignalPath

SELFADJOINT_TOL = 1e-10


@dataclass(frozen=True)
class FredholmProblem:
    """Forward kernel K, backward kernel L, and the identity coefficient lam_eff."""

    K: GridKernel
    L: GridKernel
    lam_eff: float
    strict_selfadjoint: bool = True

    def __post_init__(self):
        if self.K.grid != self.L.grid:
            raise ShapeError("K and L live on different grids")
        if not (self.lam_eff > 0.0):
            raise InadmissibleKernel(f"lam_eff must be positive, got {self.lam_eff}")
        if not (self.K.volterra and self.L.volterra):
            raise InadmissibleKernel("K and L must be Volterra kernels")
        sym = self.K.values + self.L.values.T
        gap = float(np.max(np.abs(sym - sym.T))) if sym.size else 0.0
        if gap > SELFADJOINT_TOL:
            msg = f"K + L* deviates from self-adjoint by {gap:.3e}"
            if self.strict_selfadjoint:
                raise InadmissibleKernel(msg)
            warnings.warn(msg + "; proceeding on D_t invertibility alone")

    @property
    def grid(self) -> TimeGrid:
        return self.K.grid


@dataclass(frozen=True)
class FredholmSolution:
    """Per-path solution with the path-independent recursion kernel B."""

    v: np.ndarray
    a: np.ndarray
    B: GridKernel
    surface: np.ndarray
    residual: float


class DtFamily:
    """LU factorizations of D_k = lam*id + dt*(K + L^T)[k:, k:], one per grid index.

    Handles act block-diagonally on full grid functions: entries below k are
    divided by lam_eff, entries from k on are solved through the factorization.
    """

    def __init__(self, K: GridKernel, L: GridKernel, lam_eff: float):
        grid = K.grid
        n = grid.n
        core = grid.dt * (K.values + L.values.T)
        core[np.diag_indices(n)] += float(lam_eff)
        self.grid = grid
        self.lam = float(lam_eff)
        self._core = core
        self._lu = []
        scale = max(1.0, float(np.max(np.abs(core))))
        for k in range(n):
            with warnings.catch_warnings():
                warnings.simplefilter("ignore")   # singularity is raised below
                lu = sla.lu_factor(core[k:, k:])
            pivots = np.abs(np.diagonal(lu[0]))
            if pivots.size and (not np.all(np.isfinite(lu[0])) or
                                pivots.min() <= 1e-10 * scale):
                raise SingularOperator(f"conditional operator D_{k} is numerically singular")
            self._lu.append(lu)
        # w_k = D_k^{-T} ell_k with ell_k[r] = L[r, k] for r >= k; these turn the
        # backward inner products of a and B into plain dot products.
        self.w = np.zeros((n, n))
        for k in range(n):
            self.w[k, k:] = sla.lu_solve(self._lu[k], L.values[k:, k], trans=1)

    def solve_from(self, k: int, rhs_tail: np.ndarray) -> np.ndarray:
        """Solve D_k x = rhs on indices >= k; rhs_tail has shape (n-k,) or (n-k, m)."""
        return sla.lu_solve(self._lu[k], rhs_tail)

    def handle(self, k: int):
        lam = self.lam

        def solve(y: np.ndarray) -> np.ndarray:
            y = np.asarray(y, dtype=float)
            if y.shape[0] != self.grid.n:
                raise ShapeError(f"rhs has length {y.shape[0]}, expected {self.grid.n}")
            out = y / lam
            out[k:] = self.solve_from(k, y[k:])
            return out

        return solve

    def condition_number(self, k: int) -> float:
        sv = np.linalg.svd(self._core[k:, k:], compute_uv=False)
        return float(sv[0] / sv[-1])


def build_Dt(K: GridKernel, L: GridKernel, lam_eff: float) -> DtFamily:
    """Factor the masked conditional operators once; reused across all paths."""
    return DtFamily(K, L, lam_eff)


class FredholmSolver:
    """Path-independent assembly (D_t family, recursion kernel B) plus per-path solves."""

    def __init__(self, problem: FredholmProblem):
        self.problem = problem
        self.grid = problem.grid
        self.dt_family = build_Dt(problem.K, problem.L, problem.lam_eff)
        self.B = self._assemble_B()
        self._forward: SolveHandle = invert_id_minus(self.B)

    def _assemble_B(self) -> GridKernel:
        n = self.grid.n
        dt = self.grid.dt
        K = self.problem.K.values
        lam = self.problem.lam_eff
        W = self.dt_family.w
        B = np.zeros((n, n))
        for k in range(1, n):
            B[k, :k] = (dt * (W[k, k:] @ K[k:, :k]) - K[k, :k]) / lam
        return GridKernel(self.grid, B)

    def assemble_a(self, path: SignalPath) -> np.ndarray:
        """a[k] = (f[k] - dt * <w_k, E_{t_k} f restricted to [k:]>) / lam."""
        self._check_path(path)
        W = self.dt_family.w
        a = path.values - self.grid.dt * np.einsum("kj,kj->k", W, path.surface)
        return a / self.problem.lam_eff

    def assemble_a_batch(self, values: np.ndarray, surfaces: np.ndarray) -> np.ndarray:
        W = self.dt_family.w
        a = values - self.grid.dt * np.einsum("kj,pkj->pk", W, surfaces)
        return a / self.problem.lam_eff

    def solve_v(self, a: np.ndarray) -> np.ndarray:
        """Forward recursion v = a + dt * B v (accepts stacked columns)."""
        return self._forward(a)

    def conditional_surface(self, v: np.ndarray, path: SignalPath) -> np.ndarray:
        """Exact surface E_{t_k}[v[j]]: closed rows from D_k, adapted rows from v."""
        self._check_path(path)
        n = self.grid.n
        dt = self.grid.dt
        K = self.problem.K.values
        S = np.empty((n, n))
        for k in range(n):
            rhs = path.surface[k, k:] - dt * (K[k:, :k] @ v[:k])
            S[k, k:] = self.dt_family.solve_from(k, rhs)
            S[k, :k + 1] = v[:k + 1]
        return S

    def conditional_surfaces_batch(self, v: np.ndarray, surfaces: np.ndarray) -> np.ndarray:
        n = self.grid.n
        dt = self.grid.dt
        K = self.problem.K.values
        P = v.shape[0]
        S = np.empty((P, n, n))
        for k in range(n):
            rhs = surfaces[:, k, k:].T - dt * (K[k:, :k] @ v[:, :k].T)
            S[:, k, k:] = self.dt_family.solve_from(k, rhs).T
            S[:, k, :k + 1] = v[:, :k + 1]
        return S

    def residual(self, v: np.ndarray, surface: np.ndarray, path: SignalPath) -> float:
        dt = self.grid.dt
        forward = dt * (self.problem.K.values @ v)
        backward = dt * np.einsum("rk,kr->k", self.problem.L.values, surface)
        res = self.problem.lam_eff * v - path.values + forward + backward
        return float(np.max(np.abs(res)))

    def solve_path(self, path: SignalPath) -> FredholmSolution:
        a = self.assemble_a(path)
        v = self.solve_v(a)
        S = self.conditional_surface(v, path)
        res = self.residual(v, S, path)
        return FredholmSolution(v=v, a=a, B=self.B, surface=S, residual=res)

    def _check_path(self, path: SignalPath) -> None:
        if path.grid != self.grid:
            raise ShapeError("path lives on a different grid")


# --- thin functional facade ------------------------------------------------

def assemble_B(problem: FredholmProblem) -> GridKernel:
    return FredholmSolver(problem).B


def assemble_a(problem: FredholmProblem, path: SignalPath) -> np.ndarray:
    return FredholmSolver(problem).assemble_a(path)


def solve(problem: FredholmProblem, path: SignalPath,
          solver: FredholmSolver | None = None) -> FredholmSolution:
    return (solver or FredholmSolver(problem)).solve_path(path)


def conditional_solution(problem: FredholmProblem, solution: FredholmSolution,
                         path: SignalPath) -> np.ndarray:
    return FredholmSolver(problem).conditional_surface(solution.v, path)


def residual(problem: FredholmProblem, solution: FredholmSolution, path: SignalPath) -> float:
    return FredholmSolver(problem).residual(solution.v, solution.surface, path)


def stability_gap(problem_n: FredholmProblem, problem_limit: FredholmProblem,
                  paths_n, paths_limit=None) -> float:
    """Monte Carlo estimate of sup_k E[(v^N_k - v_k)^2] on a shared path ensemble."""
    paths_n = list(paths_n)
    paths_limit = list(paths_limit) if paths_limit is not None else paths_n
    if len(paths_n) != len(paths_limit):
        raise ShapeError("path ensembles have different sizes")
    solver_n = FredholmSolver(problem_n)
    solver_l = FredholmSolver(problem_limit)
    sq = np.zeros(problem_n.grid.n)
    for p_n, p_l in zip(paths_n, paths_limit):
        v_n = solver_n.solve_v(solver_n.assemble_a(p_n))
        v_l = solver_l.solve_v(solver_l.assemble_a(p_l))
        sq += (v_n - v_l) ** 2
    return float(np.max(sq / len(paths_n)))
