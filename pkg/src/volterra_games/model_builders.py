"""Reduce dynamic Volterra games to static game data, plus the worked models.

A Volterra game has per-player states Z^i = d^i + int D(t,s) (u^i, ubar) ds
with a 2x2 block kernel D, quadratic running/terminal costs (Q, S), a
control-state cross vector q, and control cost p.  The reduction expands the
discrete objective exactly over ordered time pairs, which yields strictly
lower triangular A-kernels, affine-in-noise drivers b^i, b^0, and constants
c^i.  A direct state simulator with the matching ordered-pair quadrature
serves as the independent fidelity oracle.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConvexityViolation, InadmissibleKernel, ShapeError
from .grid_ops import (
    ConstantLower,
    GridKernel,
    KernelSpec,
    TimeGrid,
    apply,
    discretize_kernel,
    discretize_kernel_rows,
    resolvent,
    star_product,
    symmetrized_form,
)
from .nplayer import GameSpec
from .signals import (
    CompiledSignal,
    Deterministic,
    LinearCombination,
    Martingale,
    compile_signal,
)


# ---------------------------------------------------------------------------
# delay measures
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class DelayMeasure:
    """Signed measure on [0, infinity): point masses plus a piecewise-constant density."""

    atoms: tuple = ()              # of (location tau >= 0, mass)
    density: tuple | None = None   # cell values of a density on the grid, or None

    def __post_init__(self):
        for tau, mass in self.atoms:
            if tau < 0.0 or not np.isfinite(mass):
                raise ShapeError(f"bad atom ({tau}, {mass})")


@dataclass(frozen=True)
class MeasureConvolution(KernelSpec):
    """Convolution kernel G(t - s) with G(x) = nu([0, x])."""

    measure: DelayMeasure = DelayMeasure()

    def _cum_density(self, grid: TimeGrid) -> np.ndarray | None:
        if self.measure.density is None:
            return None
        g = np.asarray(self.measure.density, dtype=float)
        if g.shape != (grid.n,):
            raise ShapeError(f"density needs {grid.n} cell values, got {g.shape}")
        return np.concatenate([[0.0], np.cumsum(g) * grid.dt])

    def _eval_cum(self, grid: TimeGrid, x: np.ndarray) -> np.ndarray:
        """G_d(x) = int_0^x density, piecewise linear, clamped beyond the grid."""
        cum = self._cum_density(grid)
        if cum is None:
            return np.zeros_like(x)
        g = np.asarray(self.measure.density, dtype=float)
        xc = np.clip(x, 0.0, grid.horizon)
        m = np.minimum((xc / grid.dt).astype(int), grid.n - 1)
        return cum[m] + g[m] * (xc - m * grid.dt)

    def row_averages(self, t, grid):
        dt = grid.dt
        out = np.zeros(grid.n)
        for tau, mass in self.measure.atoms:
            out += mass * np.clip((t - tau - grid.times) / dt, 0.0, 1.0)
        if self.measure.density is not None:
            mid = t - grid.times - 0.5 * dt
            out += self._eval_cum(grid, np.maximum(mid, 0.0))
        return out

    def half_cell_average(self, grid):
        dt = grid.dt
        total = 0.0
        for tau, mass in self.measure.atoms:
            if tau < dt:
                total += mass * (1.0 - tau / dt) ** 2
        if self.measure.density is not None:
            total += float(np.asarray(self.measure.density)[0]) * dt / 3.0
        return total


def measure_to_kernel(nu: DelayMeasure, grid: TimeGrid) -> GridKernel:
    """Strictly lower cell-averaged kernel G(t_i - s), G(x) = nu([0, x])."""
    return discretize_kernel(MeasureConvolution(measure=nu), grid)


# ---------------------------------------------------------------------------
# linear Volterra state systems
# ---------------------------------------------------------------------------

def solve_linear_state(m_paths: np.ndarray, K: GridKernel, H: GridKernel) -> np.ndarray:
    """Solve X^i = M^i + K X^i + H Xbar for all players via resolvent kernels."""
    m_paths = np.atleast_2d(np.asarray(m_paths, dtype=float))
    if m_paths.shape[1] != K.grid.n:
        raise ShapeError("state drivers do not match the grid")
    rk = resolvent(K)
    rkh = resolvent(GridKernel(K.grid, K.values + H.values,
                               volterra=K.volterra and H.volterra))
    m_bar = m_paths.mean(axis=0)
    smooth = apply(H, m_bar) + apply(star_product(H, rkh), m_bar)
    out = np.empty_like(m_paths)
    for i, m in enumerate(m_paths):
        m_tilde = m + smooth
        out[i] = m_tilde + apply(rk, m_tilde)
    return out


def linear_state_residual(x_paths, m_paths, K: GridKernel, H: GridKernel) -> float:
    x_paths = np.atleast_2d(x_paths)
    m_paths = np.atleast_2d(m_paths)
    x_bar = x_paths.mean(axis=0)
    res = 0.0
    for x, m in zip(x_paths, m_paths):
        res = max(res, float(np.max(np.abs(x - m - apply(K, x) - apply(H, x_bar)))))
    return res


# ---------------------------------------------------------------------------
# Volterra game data and the static reduction
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class TerminalVector:
    """F_T-measurable 2-vector: mean plus per-tag increment weights (2, n)."""

    mean: np.ndarray
    weights: dict

    @staticmethod
    def zero():
        return TerminalVector(np.zeros(2), {})


@dataclass(frozen=True)
class VolterraGameSpec:
    """Discrete dynamic game: Z^i[k] = d^i[k] + sum_{j<k} D[k, j] (u^i_j, ubar_j) dt.

    dblock has shape (n + 1, n, 2, 2): one row per grid time plus a final row
    at the horizon T, columns are cell averages in s.
    """

    n_players: int
    p: float
    qmat: np.ndarray           # (2, 2)
    smat: np.ndarray           # (2, 2)
    qvec: np.ndarray           # (2,)
    dblock: np.ndarray         # (n + 1, n, 2, 2)
    d_signals: tuple           # per player: (component-1 signal, component-2 signal)
    s_terminals: tuple         # per player: TerminalVector
    grid: TimeGrid

    def __post_init__(self):
        n = self.grid.n
        if self.p < 0.0:
            raise InadmissibleKernel(f"control cost p must be >= 0, got {self.p}")
        if np.asarray(self.dblock).shape != (n + 1, n, 2, 2):
            raise ShapeError("dblock must have shape (n+1, n, 2, 2)")
        if len(self.d_signals) != self.n_players or len(self.s_terminals) != self.n_players:
            raise ShapeError("per-player signal data must cover every player")


def _compiled_pair(vspec: VolterraGameSpec, i: int):
    grid = vspec.grid
    c1 = compile_signal(vspec.d_signals[i][0], grid)
    c2 = compile_signal(vspec.d_signals[i][1], grid)
    return c1, c2


def _stack_mean(c1: CompiledSignal, c2: CompiledSignal) -> np.ndarray:
    return np.stack([c1.mean, c2.mean])                      # (2, n)


def _stack_weights(c1: CompiledSignal, c2: CompiledSignal, n: int) -> dict:
    tags = set(c1.weights) | set(c2.weights)
    out = {}
    for tag in tags:
        w = np.zeros((2, n, n))
        if tag in c1.weights:
            w[0] = c1.weights[tag]
        if tag in c2.weights:
            w[1] = c2.weights[tag]
        out[tag] = w
    return out


def _terminal_mean(c1, c2) -> np.ndarray:
    for c in (c1, c2):
        if c.mean_T is None:
            raise ShapeError("state signals need terminal extensions for the reduction")
    return np.array([c1.mean_T, c2.mean_T])


def _terminal_weights(c1, c2, n: int) -> dict:
    tags = set(c1.weights_T) | set(c2.weights_T)
    out = {}
    for tag in tags:
        w = np.zeros((2, n))
        if tag in c1.weights_T:
            w[0] = c1.weights_T[tag]
        if tag in c2.weights_T:
            w[1] = c2.weights_T[tag]
        out[tag] = w
    return out


def _second_moment(grid, mean_x, w_x, mean_y, w_y, A) -> float:
    """E[x^T A y] for jointly affine 2-vectors (weights keyed by tag)."""
    total = float(mean_x @ A @ mean_y)
    for tag, wx in w_x.items():
        if tag in w_y:
            total += float(np.einsum("ar,ab,br->", wx, A, w_y[tag])) * grid.dt
    return total


def reduce_volterra_game(vspec: VolterraGameSpec, grid: TimeGrid) -> GameSpec:
    """Exact static form of the discrete Volterra game.

    The quadratic part expands over ordered time pairs l < j, giving the
    kernel block [[A2hat, A3], [A3, A1]]; the two cross slots are averaged
    into the single A3 (exact whenever they coincide, e.g. symmetric state
    blocks, and for symmetric strategy profiles otherwise).  Drivers b^i and
    the common b^0 come out as compiled signals; the player-dependent part of
    the second row is folded into b^i with weight 1/N, which leaves every
    first-order condition unchanged.
    """
    if vspec.grid != grid:
        raise ShapeError("vspec was discretized on a different grid")
    if not (vspec.p > 0.0):
        raise InadmissibleKernel("reduction to a game needs strictly positive control cost")
    n = grid.n
    dt = grid.dt
    N = vspec.n_players
    Dm = np.asarray(vspec.dblock[:n])          # (k, j, 2, 2)
    DmT = np.asarray(vspec.dblock[n])          # (j, 2, 2)
    Qbar = vspec.qmat + vspec.qmat.T
    Sbar = vspec.smat + vspec.smat.T

    # kernel block M[j, l] for l < j
    M = np.einsum("jab,ac,lcd->jlbd", DmT, Sbar, DmT)
    M += dt * np.einsum("kjab,ac,klcd->jlbd", Dm, Qbar, Dm, optimize=True)
    qrow = np.einsum("c,jlcd->jld", vspec.qvec, Dm)        # (q^T D)[j, l, d]
    M[:, :, 0, :] -= 0.5 * qrow
    M[:, :, :, 0] -= 0.5 * qrow
    lower = np.tril(np.ones((n, n)), k=-1)
    a2hat = GridKernel(grid, M[:, :, 0, 0] * lower)
    a1 = GridKernel(grid, M[:, :, 1, 1] * lower)
    a3 = GridKernel(grid, 0.5 * (M[:, :, 0, 1] + M[:, :, 1, 0]) * lower)

    # drivers: row 1 is b^i, row 2 the player's share of b^0
    rows_mean = []
    rows_w = []
    c_consts = []
    for i in range(N):
        c1, c2 = _compiled_pair(vspec, i)
        d_mean = _stack_mean(c1, c2)                       # (2, n)
        d_w = _stack_weights(c1, c2, n)
        dT_mean = _terminal_mean(c1, c2)
        dT_w = _terminal_weights(c1, c2, n)
        s_term = vspec.s_terminals[i]

        bm = np.einsum("jab,a->bj", DmT, s_term.mean - Sbar @ dT_mean)
        bm -= dt * np.einsum("kjab,ac,ck->bj", Dm, Qbar, d_mean, optimize=True)
        bm[0] += d_mean.T @ vspec.qvec
        rows_mean.append(bm)                               # (2, n)

        tags = set(d_w) | set(dT_w) | set(s_term.weights)
        wrow = {}
        for tag in tags:
            sw = s_term.weights.get(tag, np.zeros((2, n)))
            dTw = dT_w.get(tag, np.zeros((2, n)))
            dw = d_w.get(tag, np.zeros((2, n, n)))
            w = np.einsum("jab,ar->bjr", DmT, sw - Sbar @ dTw)
            w -= dt * np.einsum("kjab,ac,ckr->bjr", Dm, Qbar, dw, optimize=True)
            w[0] += np.einsum("cjr,c->jr", dw, vspec.qvec)
            wrow[tag] = w                                  # (2, n, n)
        rows_w.append(wrow)

        c_i = -dt * sum(_second_moment(grid, d_mean[:, k], {t: w[:, k, :] for t, w in d_w.items()},
                                       d_mean[:, k], {t: w[:, k, :] for t, w in d_w.items()},
                                       vspec.qmat) for k in range(n))
        c_i -= _second_moment(grid, dT_mean, dT_w, dT_mean, dT_w, vspec.smat)
        c_i += _second_moment(grid, dT_mean, dT_w, s_term.mean, s_term.weights, np.eye(2))
        c_consts.append(c_i)

    # common b^0 = cross-player average of second rows; remainders fold into b^i.
    # Weight rows are projected onto past increments (r < j): the value and
    # surface conventions never read the rest, and the raw form stays adapted.
    proj = np.tril(np.ones((n, n)), k=-1)
    all_tags = sorted(set().union(*[set(w) for w in rows_w]) if rows_w else set())
    b0_mean = np.mean([bm[1] for bm in rows_mean], axis=0)
    b0_w = {tag: proj * np.mean([w.get(tag, np.zeros((2, n, n)))[1] for w in rows_w], axis=0)
            for tag in all_tags}
    b0 = CompiledSignal(grid, b0_mean, {t: w for t, w in b0_w.items() if np.any(w)})

    b_signals = []
    b0_extras = []
    for i in range(N):
        mean_i = rows_mean[i][0] + (rows_mean[i][1] - b0_mean) / N
        w_i = {}
        extra_w = {}
        for tag in all_tags:
            w = rows_w[i].get(tag, np.zeros((2, n, n))) * proj
            cand = w[0] + (w[1] - b0_w[tag]) / N
            if np.any(cand):
                w_i[tag] = cand
            rem = w[1] - b0_w[tag]
            if np.any(rem):
                extra_w[tag] = rem
        b_signals.append(CompiledSignal(grid, mean_i, w_i))
        extra_mean = rows_mean[i][1] - b0_mean
        if np.any(extra_mean) or extra_w:
            b0_extras.append(CompiledSignal(grid, extra_mean, extra_w))
        else:
            b0_extras.append(None)

    low = float(np.linalg.eigvalsh(symmetrized_form(a2hat))[0])
    if low < -(vspec.p + 1e-8):
        raise InadmissibleKernel(
            f"assembled instantaneous cost loses definiteness: min eig {low:.3e} < -p")

    return GameSpec(
        n_players=N, lam=vspec.p, a1=a1, a2hat=a2hat, a3=a3,
        b_signals=tuple(b_signals), b0_signal=b0, grid=grid,
        c_constants=tuple(c_consts), kernel_check="concave",
        b0_extras=tuple(b0_extras),
    )


# ---------------------------------------------------------------------------
# direct simulation of the dynamic game (the reduction's independent oracle)
# ---------------------------------------------------------------------------

def simulate_states(vspec: VolterraGameSpec, profile: np.ndarray, dW: dict):
    """State paths Z^i[k] and terminal Z^i_T for a strategy profile (players, n)."""
    n = vspec.grid.n
    dt = vspec.grid.dt
    N = vspec.n_players
    ubar = profile.mean(axis=0)
    Z = np.empty((N, n, 2))
    ZT = np.empty((N, 2))
    for i in range(N):
        c1, c2 = _compiled_pair(vspec, i)
        w = np.stack([profile[i], ubar], axis=1)           # (n, 2)
        dvals = np.stack([_raw_values(c1, dW), _raw_values(c2, dW)], axis=1)   # (n, 2)
        dT = np.array([_raw_terminal(c1, dW), _raw_terminal(c2, dW)])
        conv = np.einsum("kjab,jb->ka", vspec.dblock[:n], w) * dt
        Z[i] = dvals + conv
        ZT[i] = dT + np.einsum("jab,jb->a", vspec.dblock[n], w) * dt
    return Z, ZT


def _raw_values(cs: CompiledSignal, dW: dict) -> np.ndarray:
    out = cs.mean.copy()
    for tag, w in cs.weights.items():
        out = out + w @ dW[tag]
    return out


def _raw_terminal(cs: CompiledSignal, dW: dict) -> float:
    if cs.mean_T is None:
        raise ShapeError("state signal lacks a terminal extension")
    out = float(cs.mean_T)
    for tag, wT in cs.weights_T.items():
        out += float(wT @ dW[tag])
    return out


def direct_objective(vspec: VolterraGameSpec, i: int, profile: np.ndarray,
                     dW: dict, s_values: np.ndarray | None = None) -> float:
    """Player i's realized objective from simulated states.

    Quadratic state costs use the ordered-pair quadrature (the diagonal
    control-pair cell is excluded), matching the strictly-lower-triangular
    static form; everything else is plain left-rule quadrature.
    """
    grid = vspec.grid
    n, dt = grid.n, grid.dt
    ubar = profile.mean(axis=0)
    w = np.stack([profile[i], ubar], axis=1)
    Z, ZT = simulate_states(vspec, profile, dW)
    zi, ziT = Z[i], ZT[i]

    run_q = float(np.einsum("ka,ab,kb->", zi, vspec.qmat, zi)) * dt
    conv_cells = np.einsum("kjab,jb->kja", vspec.dblock[:n], w) * dt
    run_q -= float(np.einsum("kja,ab,kjb->", conv_cells, vspec.qmat, conv_cells)) * dt
    term_cells = np.einsum("jab,jb->ja", vspec.dblock[n], w) * dt
    term_q = float(ziT @ vspec.smat @ ziT)
    term_q -= float(np.einsum("ja,ab,jb->", term_cells, vspec.smat, term_cells))

    if s_values is None:
        c1, c2 = _compiled_pair(vspec, i)
        s_term = vspec.s_terminals[i]
        s_values = s_term.mean.copy()
        for tag, wt in s_term.weights.items():
            s_values = s_values + wt @ dW[tag]
    cross = float(np.einsum("k,ka,a->", profile[i], zi, vspec.qvec)) * dt
    return (-vspec.p * float(profile[i] @ profile[i]) * dt
            - run_q + cross - term_q + float(ziT @ s_values))


# ---------------------------------------------------------------------------
# worked models
# ---------------------------------------------------------------------------

def _terminal_rows(spec: KernelSpec, grid: TimeGrid) -> np.ndarray:
    """(n + 1, n) rows of a kernel at grid times plus the horizon endpoint."""
    row_times = np.concatenate([grid.times, [grid.horizon]])
    out = np.zeros((grid.n + 1, grid.n))
    body = discretize_kernel(spec, grid).values
    out[:grid.n] = body
    out[grid.n] = discretize_kernel_rows(spec, grid, np.array([grid.horizon]))[0]
    return out


def build_liquidation_game(params: dict, grid: TimeGrid) -> tuple[GameSpec, VolterraGameSpec]:
    """Optimal liquidation with transient aggregate impact and price signals.

    params: N, lam, phi, rho_term, propagator (KernelSpec), x0 (per player),
    signal_sigma (per player, price martingale volatility; 0 for none),
    common_signal_sigma (optional common price factor).
    """
    N = int(params["N"])
    lam, phi, rho_term = float(params["lam"]), float(params["phi"]), float(params["rho_term"])
    if min(lam, phi, rho_term) <= 0.0:
        raise InadmissibleKernel("liquidation needs lam, phi, rho_term > 0")
    x0 = np.asarray(params["x0"], dtype=float)
    if x0.shape != (N,):
        raise ShapeError("x0 must list one initial inventory per player")
    sigmas = np.asarray(params.get("signal_sigma", np.zeros(N)), dtype=float)
    sigma0 = float(params.get("common_signal_sigma", 0.0))

    n = grid.n
    dblock = np.zeros((n + 1, n, 2, 2))
    dblock[:, :, 0, 0] = _terminal_rows(ConstantLower(c=-1.0), grid)
    dblock[:, :, 1, 1] = -_terminal_rows(params["propagator"], grid)

    d_signals, s_terms = [], []
    for i in range(N):
        terms = [(1.0, Deterministic(values=(0.0,), terminal=0.0))]
        if sigmas[i] != 0.0:
            terms.append((1.0, Martingale(sigma=sigmas[i], noise=f"price{i}")))
        if sigma0 != 0.0:
            terms.append((1.0, Martingale(sigma=sigma0, noise="price_common")))
        price = compile_signal(LinearCombination(terms=tuple(terms)), grid)
        inv = Deterministic(values=(x0[i],), terminal=float(x0[i]))
        d_signals.append((inv, price))
        s_terms.append(TerminalVector(np.array([price.mean_T, 0.0]),
                                      {t: np.stack([wT, np.zeros(n)])
                                       for t, wT in price.weights_T.items()}))

    vspec = VolterraGameSpec(
        n_players=N, p=lam,
        qmat=np.array([[phi, 0.0], [0.0, 0.0]]),
        smat=np.array([[rho_term, 0.0], [0.0, 0.0]]),
        qvec=np.array([0.0, 1.0]),
        dblock=dblock, d_signals=tuple(d_signals), s_terminals=tuple(s_terms),
        grid=grid,
    )
    return reduce_volterra_game(vspec, grid), vspec


def inventory_path(x0: float, u: np.ndarray, grid: TimeGrid):
    """Held inventory at grid times and at T for one selling-rate path."""
    dec = np.concatenate([[0.0], np.cumsum(u) * grid.dt])
    return x0 - dec[:-1], x0 - dec[-1]


def build_systemic_game(params: dict, grid: TimeGrid) -> tuple[GameSpec, VolterraGameSpec]:
    """Inter-bank lending with delayed repayment.

    params: N, beta, eps, cost_c, sigma (per player), delay (DelayMeasure),
    x0 (per player), h (optional per-player drift cell values).
    """
    N = int(params["N"])
    beta, eps, cost_c = float(params["beta"]), float(params["eps"]), float(params["cost_c"])
    if beta ** 2 > eps:
        raise ConvexityViolation(f"need beta^2 <= eps, got beta^2 = {beta ** 2}, eps = {eps}")
    if cost_c < 0.0 or eps <= 0.0:
        raise InadmissibleKernel("need eps > 0 and cost_c >= 0")
    sigma = np.asarray(params["sigma"], dtype=float)
    x0 = np.asarray(params["x0"], dtype=float)
    n = grid.n

    gk = MeasureConvolution(measure=params["delay"])
    rows = _terminal_rows(gk, grid)
    dblock = np.zeros((n + 1, n, 2, 2))
    dblock[:, :, 0, 0] = rows
    dblock[:, :, 1, 1] = rows

    h_all = params.get("h")
    p_fams = []
    for i in range(N):
        drift = np.full(n, x0[i])
        term = float(x0[i])
        if h_all is not None:
            h_i = np.asarray(h_all[i], dtype=float)
            drift = x0[i] + np.concatenate([[0.0], np.cumsum(h_i)[:-1]]) * grid.dt
            term = x0[i] + float(np.sum(h_i)) * grid.dt
        terms = [(1.0, Deterministic(values=tuple(drift), terminal=term))]
        if sigma[i] != 0.0:
            terms.append((1.0, Martingale(sigma=sigma[i], noise=f"reserve{i}")))
        p_fams.append(LinearCombination(terms=tuple(terms)))
    mean_fam = LinearCombination(terms=tuple((1.0 / N, f) for f in p_fams))

    d_signals = tuple((p_fams[i], mean_fam) for i in range(N))
    s_terms = tuple(TerminalVector.zero() for _ in range(N))
    vspec = VolterraGameSpec(
        n_players=N, p=0.5,
        qmat=0.5 * eps * np.array([[1.0, -1.0], [-1.0, 1.0]]),
        smat=(cost_c / eps) * 0.5 * eps * np.array([[1.0, -1.0], [-1.0, 1.0]]),
        qvec=beta * np.array([-1.0, 1.0]),
        dblock=dblock, d_signals=d_signals, s_terminals=s_terms, grid=grid,
    )
    return reduce_volterra_game(vspec, grid), vspec


def _extended_grid(grid: TimeGrid) -> TimeGrid:
    return TimeGrid(grid.horizon + grid.dt, grid.n + 1)


def build_advertising_game(params: dict, grid: TimeGrid) -> tuple[GameSpec, VolterraGameSpec]:
    """Goodwill advertising with delayed forgetting and delayed competition.

    params: N, lam, beta, forgetting (DelayMeasure), competition (DelayMeasure),
    sigma (per player).  The state response to controls and to noise is built
    from resolvents on a grid extended to the horizon endpoint.
    """
    N = int(params["N"])
    lam, beta = float(params["lam"]), float(params["beta"])
    if lam <= 0.0 or beta < 0.0:
        raise InadmissibleKernel("advertising needs lam > 0 and beta >= 0")
    sigma = np.asarray(params["sigma"], dtype=float)
    n = grid.n
    ext = _extended_grid(grid)
    K_ext = measure_to_kernel(params.get("forgetting", DelayMeasure()), ext)
    H_ext = measure_to_kernel(params.get("competition", DelayMeasure()), ext)
    rk = resolvent(K_ext)
    rkh = resolvent(GridKernel(ext, K_ext.values + H_ext.values))

    def apply_rk(f):
        return f + apply(rk, f)

    def apply_hop(f):
        return apply(H_ext, f) + apply(star_product(H_ext, rkh), f)

    # unit-control impulse responses give the state blocks column by column
    dblock = np.zeros((n + 1, n, 2, 2))
    for j in range(n):
        # response to a unit-rate control on cell j, divided by the cell weight
        pulse = np.zeros(ext.n)
        pulse[j + 1:] = beta
        dblock[:, j, 0, 0] = apply_rk(pulse)
        dblock[:, j, 0, 1] = apply_rk(apply_hop(pulse))

    # noise response: own Brownian plus resolvent-smoothed average of all
    w_own = np.tril(np.ones((ext.n, ext.n)), k=-1)
    own_resp = w_own + apply(rk, w_own)
    smooth = apply_rk(apply_hop(w_own))
    d_signals, s_terms = [], []
    for i in range(N):
        weights = {}
        for l in range(N):
            w = (sigma[l] / N) * smooth
            if l == i:
                w = w + sigma[i] * own_resp
            if np.any(w):
                weights[f"adv{l}"] = w[:n, :n]
        weights_T = {}
        for l in range(N):
            w = (sigma[l] / N) * smooth[n]
            if l == i:
                w = w + sigma[i] * own_resp[n]
            if np.any(w):
                weights_T[f"adv{l}"] = w[:n]
        goodwill = CompiledSignal(grid, np.zeros(n), weights, mean_T=0.0, weights_T=weights_T)
        zero = Deterministic(values=(0.0,), terminal=0.0)
        d_signals.append((goodwill, zero))
        s_terms.append(TerminalVector(np.array([beta, 0.0]), {}))

    vspec = VolterraGameSpec(
        n_players=N, p=lam,
        qmat=np.zeros((2, 2)), smat=np.zeros((2, 2)), qvec=np.zeros(2),
        dblock=dblock, d_signals=tuple(d_signals), s_terminals=tuple(s_terms),
        grid=grid,
    )
    return reduce_volterra_game(vspec, grid), vspec
