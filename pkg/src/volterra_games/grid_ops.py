"""Time grids, discretized Volterra kernels, and the operator calculus on them.

Kernels G(t, s) vanish for s >= t (Volterra convention).  A kernel is stored
as an n x n matrix of cell averages K[i, j] ~ (1/dt) * int_{t_j}^{t_j+dt}
G(t_i, s) ds, strictly lower triangular, so that the induced integral
operator acts on grid functions as (K f)[i] = sum_j K[i, j] f[j] dt.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.linalg as sla

from .errors import InadmissibleKernel, InvalidGrid, ShapeError, SingularOperator

SINGULAR_SV_TOL = 1e-10


@dataclass(frozen=True)
class TimeGrid:
    """Uniform left-endpoint partition of [0, T] with n points t_k = k*T/n."""

    horizon: float
    n: int

    def __post_init__(self):
        if not (self.horizon > 0.0) or self.n < 2:
            raise InvalidGrid(f"need T > 0 and n >= 2, got T={self.horizon}, n={self.n}")

    @property
    def dt(self) -> float:
        return self.horizon / self.n

    @property
    def times(self) -> np.ndarray:
        return np.arange(self.n) * self.dt


def build_grid(T: float, n: int) -> TimeGrid:
    """Build the uniform grid; raises InvalidGrid on bad parameters."""
    return TimeGrid(float(T), int(n))


def _readonly(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a, dtype=float)
    a.flags.writeable = False
    return a


@dataclass(frozen=True)
class GridKernel:
    """A discretized kernel: n x n matrix acting with quadrature weight dt.

    diag_half optionally stores the kernel's exact averages over the lower
    half of the diagonal cells, (2/dt^2) * int int_{t_j < s < t < t_j + dt}
    G(t, s); the strict lower triangle drops this mass, and definiteness
    checks need it back (see check_nonneg_definite).
    """

    grid: TimeGrid
    values: np.ndarray
    volterra: bool = True
    diag_half: np.ndarray | None = None

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float)
        if v.shape != (self.grid.n, self.grid.n):
            raise ShapeError(f"kernel values must be {self.grid.n} x {self.grid.n}, got {v.shape}")
        if not np.all(np.isfinite(v)):
            raise InadmissibleKernel("kernel has non-finite entries")
        if self.volterra and np.any(np.triu(v) != 0.0):
            raise InadmissibleKernel("volterra kernel must be strictly lower triangular")
        object.__setattr__(self, "values", _readonly(v))
        if self.diag_half is not None:
            d = np.asarray(self.diag_half, dtype=float)
            if d.shape != (self.grid.n,):
                raise ShapeError("diag_half must have one entry per grid point")
            object.__setattr__(self, "diag_half", _readonly(d))

    def diagonal_estimate(self) -> np.ndarray:
        """Exact diagonal half-cell averages when known, else the nearest subdiagonal."""
        if self.diag_half is not None:
            return self.diag_half
        n = self.grid.n
        sub = np.diagonal(self.values, -1)
        return np.concatenate([sub, sub[-1:]])


def zero_kernel(grid: TimeGrid) -> GridKernel:
    return GridKernel(grid, np.zeros((grid.n, grid.n)), diag_half=np.zeros(grid.n))


# ---------------------------------------------------------------------------
# kernel families
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class KernelSpec:
    """Base class for analytic kernel families; `scale` multiplies the kernel."""

    scale: float = 1.0

    def row_averages(self, t: float, grid: TimeGrid) -> np.ndarray:
        """Cell averages (1/dt) int_{t_j}^{t_j+dt} G(t, s) ds over all n columns.

        Columns whose cell is not strictly below t must be zeroed by the caller;
        this returns the raw averages for cells entirely inside [0, t].
        """
        raise NotImplementedError

    def half_cell_average(self, grid: TimeGrid) -> float:
        """(2/dt^2) int int_{0 < s < t < dt} G(t, s): the dropped diagonal mass."""
        raise NotImplementedError

    def validate(self) -> None:
        pass


@dataclass(frozen=True)
class ZeroK(KernelSpec):
    def row_averages(self, t, grid):
        return np.zeros(grid.n)

    def half_cell_average(self, grid):
        return 0.0


@dataclass(frozen=True)
class ConstantLower(KernelSpec):
    c: float = 1.0

    def row_averages(self, t, grid):
        return np.full(grid.n, self.c)

    def half_cell_average(self, grid):
        return self.c


@dataclass(frozen=True)
class ExponentialDecay(KernelSpec):
    """G(t, s) = c * exp(-rho (t - s)) for s < t."""

    c: float = 1.0
    rho: float = 1.0

    def row_averages(self, t, grid):
        dt = grid.dt
        x = self.rho * dt
        # (1/dt) int_cell e^{-rho(t-s)} ds = e^{-rho(t - t_j)} * (e^{rho dt}-1)/(rho dt)
        fac = np.expm1(x) / x if x != 0.0 else 1.0
        return self.c * np.exp(-self.rho * (t - grid.times)) * fac

    def half_cell_average(self, grid):
        x = self.rho * grid.dt
        if x == 0.0:
            return self.c
        return self.c * (2.0 / x) * (1.0 - (1.0 - np.exp(-x)) / x)


@dataclass(frozen=True)
class PowerLaw(KernelSpec):
    """G(t, s) = c * (t - s)^(-alpha) for s < t, alpha in (0, 1/2)."""

    c: float = 1.0
    alpha: float = 0.3

    def validate(self):
        if not (0.0 < self.alpha < 0.5):
            raise InadmissibleKernel(f"power-law exponent must lie in (0, 1/2), got {self.alpha}")

    def row_averages(self, t, grid):
        dt = grid.dt
        a = self.alpha
        upper = np.maximum(t - grid.times, 0.0)
        lower = np.maximum(upper - dt, 0.0)
        # exact antiderivative of (t-s)^(-a); never evaluates the singularity
        return self.c * (upper ** (1.0 - a) - lower ** (1.0 - a)) / ((1.0 - a) * dt)

    def half_cell_average(self, grid):
        a = self.alpha
        return 2.0 * self.c * grid.dt ** (-a) / ((1.0 - a) * (2.0 - a))


@dataclass(frozen=True)
class DelayIndicator(KernelSpec):
    """G(t, s) = 1_{0 <= t-s} - 1_{t-s >= tau} for s < t (unit pulse of width tau)."""

    tau: float = 0.5

    def row_averages(self, t, grid):
        cut = np.clip((t - self.tau - grid.times) / grid.dt, 0.0, 1.0)
        return 1.0 - cut

    def half_cell_average(self, grid):
        if self.tau >= grid.dt:
            return 1.0
        return 1.0 - (1.0 - self.tau / grid.dt) ** 2


@dataclass(frozen=True)
class Tabulated(KernelSpec):
    """Pre-discretized values, taken as already cell-averaged."""

    table: tuple = ()

    def row_averages(self, t, grid):
        raise NotImplementedError("tabulated kernels bypass row_averages")


def discretize_kernel(spec: KernelSpec, grid: TimeGrid) -> GridKernel:
    """Nystrom discretization: strictly lower triangular cell-averaged matrix."""
    spec.validate()
    n = grid.n
    if isinstance(spec, Tabulated):
        vals = np.asarray(spec.table, dtype=float)
        if vals.shape != (n, n):
            raise ShapeError(f"tabulated kernel must be {n} x {n}, got {vals.shape}")
        out = np.tril(vals, k=-1) * spec.scale
        return GridKernel(grid, out)
    out = np.zeros((n, n))
    for i in range(1, n):
        out[i, :i] = spec.row_averages(grid.times[i], grid)[:i]
    diag = np.full(n, spec.half_cell_average(grid) * spec.scale)
    return GridKernel(grid, out * spec.scale, diag_half=diag)


def discretize_kernel_rows(spec: KernelSpec, grid: TimeGrid, row_times: np.ndarray) -> np.ndarray:
    """Cell-averaged rows at arbitrary row times (used for terminal-time rows).

    Entry [r, j] covers the column cell [t_j, t_j + dt); it is zero unless the
    cell lies inside [0, row_times[r]].
    """
    spec.validate()
    if isinstance(spec, Tabulated):
        raise InadmissibleKernel("tabulated kernels have no off-grid rows")
    out = np.zeros((len(row_times), grid.n))
    cell_end = grid.times + grid.dt
    for r, t in enumerate(row_times):
        live = cell_end <= t + 1e-12 * max(grid.horizon, 1.0)
        row = spec.row_averages(t, grid) * spec.scale
        out[r, live] = row[live]
    return out


# ---------------------------------------------------------------------------
# operator calculus
# ---------------------------------------------------------------------------

def _same_grid(a: GridKernel, b: GridKernel) -> TimeGrid:
    if a.grid != b.grid:
        raise ShapeError("kernels live on different grids")
    return a.grid


def apply(K: GridKernel, f: np.ndarray) -> np.ndarray:
    """(K f)[i] = sum_j K[i, j] f[j] dt."""
    f = np.asarray(f, dtype=float)
    if f.shape[0] != K.grid.n:
        raise ShapeError(f"grid function has length {f.shape[0]}, expected {K.grid.n}")
    return K.values @ f * K.grid.dt


def adjoint(K: GridKernel) -> GridKernel:
    """Transposed kernel; the result is upper triangular, so volterra is cleared."""
    return GridKernel(K.grid, K.values.T, volterra=False)


def star_product(G: GridKernel, H: GridKernel) -> GridKernel:
    """(G * H)[i, j] = sum_k G[i, k] H[k, j] dt; Volterra is closed under it."""
    grid = _same_grid(G, H)
    return GridKernel(grid, G.values @ H.values * grid.dt, volterra=G.volterra and H.volterra)


def resolvent(K: GridKernel) -> GridKernel:
    """R with R = K + K * R (equivalently (id - K)^{-1} = id + R)."""
    n = K.grid.n
    A = np.eye(n) - K.grid.dt * K.values
    if K.volterra:
        R = sla.solve_triangular(A, K.values, lower=True, unit_diagonal=True)
    else:
        if np.linalg.svd(A, compute_uv=False)[-1] <= SINGULAR_SV_TOL:
            raise SingularOperator("id - K is numerically singular")
        R = np.linalg.solve(A, K.values)
    return GridKernel(K.grid, R, volterra=K.volterra)


def mask_from(K: GridKernel, t_index: int) -> GridKernel:
    """Zero columns j < t_index, realizing G_t(s, r) = G(s, r) 1_{r >= t}."""
    if not (0 <= t_index < K.grid.n):
        raise ShapeError(f"mask index {t_index} outside [0, {K.grid.n})")
    vals = K.values.copy()
    vals[:, :t_index] = 0.0
    diag = None
    if K.diag_half is not None:
        diag = K.diag_half.copy()
        diag[:t_index] = 0.0
    return GridKernel(K.grid, vals, volterra=K.volterra, diag_half=diag)


def symmetrized_form(K: GridKernel) -> np.ndarray:
    """(dt/2)(Kc + Kc^T) where Kc closes the lower triangle with its diagonal cell.

    The strictly lower storage drops the diagonal-cell mass, which makes the
    raw symmetrized matrix indefinite by O(dt * G(0+)) for any nonzero kernel;
    restoring the exact half-cell averages (or their subdiagonal estimate)
    gives a test whose minimum eigenvalue tracks the continuum answer: zero
    margin kernels (constants) land at exactly zero, genuinely indefinite ones
    (delay pulses with tau < T) stay negative under refinement.
    """
    Kc = K.values.copy()
    Kc[np.diag_indices(K.grid.n)] = K.diagonal_estimate()
    return 0.5 * K.grid.dt * (Kc + Kc.T)


def check_nonneg_definite(K: GridKernel, tol: float = 1e-8) -> bool:
    """True iff the minimum eigenvalue of the symmetrized weighted form is >= -tol."""
    return float(np.linalg.eigvalsh(symmetrized_form(K))[0]) >= -tol


class SolveHandle:
    """Cached factorization of (id - dt * B); read-only after construction."""

    def __init__(self, B: GridKernel):
        self.grid = B.grid
        self._A = np.eye(B.grid.n) - B.grid.dt * B.values
        self._volterra = B.volterra
        if not B.volterra:
            if np.linalg.svd(self._A, compute_uv=False)[-1] <= SINGULAR_SV_TOL:
                raise SingularOperator("id - dt*B is numerically singular")
            self._lu = sla.lu_factor(self._A)

    def __call__(self, a: np.ndarray) -> np.ndarray:
        """Solve h = a + dt * B h; accepts (n,) or (n, m) stacked columns."""
        a = np.asarray(a, dtype=float)
        if a.shape[0] != self.grid.n:
            raise ShapeError(f"rhs has length {a.shape[0]}, expected {self.grid.n}")
        if self._volterra:
            return sla.solve_triangular(self._A, a, lower=True, unit_diagonal=True)
        return sla.lu_solve(self._lu, a)


def invert_id_minus(B: GridKernel) -> SolveHandle:
    """Handle for (id - B)^{-1} under the grid quadrature action."""
    return SolveHandle(B)


def scale_kernel(K: GridKernel, gamma: float) -> GridKernel:
    diag = None if K.diag_half is None else gamma * K.diag_half
    return GridKernel(K.grid, K.values * gamma, volterra=K.volterra, diag_half=diag)


def add_kernels(*terms: tuple[float, GridKernel]) -> GridKernel:
    """Entrywise linear combination sum_i coef_i * K_i; exact diagonals combine too."""
    coef0, K0 = terms[0]
    grid = K0.grid
    acc = coef0 * K0.values
    volt = K0.volterra
    diag = coef0 * K0.diag_half if K0.diag_half is not None else None
    for coef, K in terms[1:]:
        _same_grid(K0, K)
        acc = acc + coef * K.values
        volt = volt and K.volterra
        diag = diag + coef * K.diag_half if (diag is not None and K.diag_half is not None) else None
    return GridKernel(grid, acc, volterra=volt, diag_half=diag)


def grid_inner(grid: TimeGrid, f: np.ndarray, g: np.ndarray) -> float:
    """<f, g> = sum_k f[k] g[k] dt."""
    return float(np.dot(f, g) * grid.dt)
