"""Progressively measurable inputs as sampled paths with exact conditional surfaces.

Every supported family is affine in Brownian increments,

    f_j = mean[j] + sum_tag sum_r w[tag][j, r] dW^tag_r,

which makes conditional expectations exact linear functionals of past
increments: the stored path value is the adapted projection
values[j] = E_{t_j}[f_j] and the surface is m[i, j] = E_{t_i}[f_j]
= mean[j] + sum_{r < min(i, j)} w[j, r] dW_r.  Anticipative weight rows
(w[j, r] with r >= j) are allowed; they only enter through projections.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ShapeError, UnsupportedSignal
from .grid_ops import TimeGrid

COMMON = "common"


@dataclass(frozen=True)
class CompiledSignal:
    """Affine-in-increments representation of a signal on a grid.

    mean_T / weights_T extend the signal to the horizon endpoint T; they are
    optional and only required by model reductions with terminal data.
    """

    grid: TimeGrid
    mean: np.ndarray
    weights: dict          # tag -> (n, n) array
    mean_T: float | None = None
    weights_T: dict = field(default_factory=dict)   # tag -> (n,) array

    def noise_tags(self) -> frozenset:
        return frozenset(self.weights)

    def values_and_surface(self, dW: dict) -> tuple[np.ndarray, np.ndarray]:
        """Adapted path values and the full surface m[i, j] for one increment draw."""
        n = self.grid.n
        C = np.zeros((n, n))         # C[j, i] = sum_{r < i} w[j, r] dW_r
        for tag, w in self.weights.items():
            wd = w * np.asarray(dW[tag])[None, :]
            C[:, 1:] += np.cumsum(wd, axis=1)[:, :-1]
        jj = np.broadcast_to(np.arange(n)[None, :], (n, n))
        mm = np.minimum(np.arange(n)[:, None], jj)
        surface = self.mean[None, :] + C[jj, mm]
        values = surface.diagonal().copy()
        return values, surface

    def terminal_value_and_projection(self, dW: dict) -> tuple[float, np.ndarray]:
        """Raw terminal value f_T and the curve E_{t_i}[f_T]."""
        if self.mean_T is None:
            raise UnsupportedSignal("signal has no terminal extension")
        n = self.grid.n
        proj = np.full(n, float(self.mean_T))
        value = float(self.mean_T)
        for tag, wT in self.weights_T.items():
            wd = np.asarray(wT) * np.asarray(dW[tag])
            value += float(wd.sum())
            proj[1:] += np.cumsum(wd)[:-1]
        return value, proj


class SignalFamily:
    """Base class; subclasses provide compile(grid) -> CompiledSignal."""

    def compile(self, grid: TimeGrid) -> CompiledSignal:
        raise NotImplementedError


@dataclass(frozen=True)
class Deterministic(SignalFamily):
    values: tuple
    terminal: float | None = None

    def compile(self, grid):
        g = np.asarray(self.values, dtype=float)
        if g.ndim == 0 or g.size == 1:
            g = np.full(grid.n, float(g.reshape(-1)[0]))
        if g.shape != (grid.n,):
            raise ShapeError(f"deterministic signal has length {g.shape}, expected {grid.n}")
        term = self.terminal if self.terminal is not None else float(g[-1])
        return CompiledSignal(grid, g, {}, mean_T=term)


def constant_signal(level: float) -> Deterministic:
    return Deterministic(values=(float(level),), terminal=float(level))


@dataclass(frozen=True)
class Martingale(SignalFamily):
    """Scaled Brownian motion started at 0: f = sigma * W."""

    sigma: float = 1.0
    noise: str = COMMON

    def compile(self, grid):
        n = grid.n
        w = self.sigma * np.tril(np.ones((n, n)), k=-1)
        return CompiledSignal(grid, np.zeros(n), {self.noise: w},
                              mean_T=0.0, weights_T={self.noise: np.full(n, self.sigma)})


@dataclass(frozen=True)
class OU(SignalFamily):
    """Mean-reverting recursion f_{j+1} = e^{-kappa dt} f_j + sigma dW_j, f_0 = x0."""

    kappa: float = 1.0
    sigma: float = 1.0
    x0: float = 0.0
    noise: str = COMMON

    def compile(self, grid):
        n, dt, t = grid.n, grid.dt, grid.times
        mean = self.x0 * np.exp(-self.kappa * t)
        w = self.sigma * np.exp(-self.kappa * (t[:, None] - (t[None, :] + dt)))
        w = np.tril(w, k=-1)
        wT = self.sigma * np.exp(-self.kappa * (grid.horizon - (t + dt)))
        return CompiledSignal(grid, mean, {self.noise: w},
                              mean_T=self.x0 * np.exp(-self.kappa * grid.horizon),
                              weights_T={self.noise: wT})


@dataclass(frozen=True)
class BrownianWeighted(SignalFamily):
    """f_j = g[j] + sum_r w[j, r] dW_r with arbitrary (possibly anticipative) weights."""

    g: tuple
    w: tuple
    noise: str = COMMON
    g_T: float | None = None
    w_T: tuple | None = None

    def compile(self, grid):
        g = np.asarray(self.g, dtype=float)
        w = np.asarray(self.w, dtype=float)
        if g.shape != (grid.n,) or w.shape != (grid.n, grid.n):
            raise ShapeError("BrownianWeighted needs g of shape (n,) and w of shape (n, n)")
        wT = {self.noise: np.asarray(self.w_T, dtype=float)} if self.w_T is not None else {}
        return CompiledSignal(grid, g, {self.noise: w}, mean_T=self.g_T, weights_T=wT)


@dataclass(frozen=True)
class LinearCombination(SignalFamily):
    """sum_i coef_i * family_i, sharing noise sources by tag."""

    terms: tuple   # of (coef, SignalFamily)

    def compile(self, grid):
        compiled = [(float(c), compile_signal(fam, grid)) for c, fam in self.terms]
        mean = sum(c * cs.mean for c, cs in compiled)
        weights: dict = {}
        weights_T: dict = {}
        for c, cs in compiled:
            for tag, w in cs.weights.items():
                weights[tag] = weights.get(tag, 0.0) + c * w
            for tag, wT in cs.weights_T.items():
                weights_T[tag] = weights_T.get(tag, 0.0) + c * wT
        if all(cs.mean_T is not None for _, cs in compiled):
            mean_T = sum(c * cs.mean_T for c, cs in compiled)
        else:
            mean_T = None
        return CompiledSignal(grid, np.asarray(mean, dtype=float), weights,
                              mean_T=mean_T, weights_T=weights_T)


def compile_signal(family, grid: TimeGrid) -> CompiledSignal:
    if isinstance(family, CompiledSignal):
        if family.grid != grid:
            raise ShapeError("compiled signal lives on a different grid")
        return family
    if not isinstance(family, SignalFamily):
        raise UnsupportedSignal(f"unknown signal family {type(family).__name__}")
    return family.compile(grid)


def signal_mean(family, grid: TimeGrid) -> np.ndarray:
    """Analytic E[f] on the grid (increments are centered)."""
    return compile_signal(family, grid).mean.copy()


# ---------------------------------------------------------------------------
# noise and simulation
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class NoiseBundle:
    """Pre-drawn N(0, dt) increments per tag, reproducible from the seed.

    Each array has shape (n_paths, n); increments are generated by
    numpy.random.default_rng (PCG64) in sorted-tag order, one tag at a time,
    so results do not depend on thread count or evaluation order.
    """

    grid: TimeGrid
    n_paths: int
    seed: int
    increments: dict

    def path(self, k: int) -> dict:
        if not (0 <= k < self.n_paths):
            raise ShapeError(f"path index {k} outside [0, {self.n_paths})")
        return {tag: arr[k] for tag, arr in self.increments.items()}

    def restrict(self, tags) -> dict:
        return {tag: self.increments[tag] for tag in tags}


GENERATOR_NAME = "numpy.default_rng(PCG64)"


def draw_noise(grid: TimeGrid, tags, n_paths: int, seed: int) -> NoiseBundle:
    rng = np.random.default_rng(seed)
    std = np.sqrt(grid.dt)
    incs = {}
    for tag in sorted(set(tags)):
        arr = std * rng.standard_normal((n_paths, grid.n))
        arr.flags.writeable = False        # bundles are shared read-only
        incs[tag] = arr
    return NoiseBundle(grid, n_paths, seed, incs)


@dataclass(frozen=True)
class SignalPath:
    """One realized scenario: adapted values plus the surface m[i, j] = E_{t_i}[f_j]."""

    grid: TimeGrid
    values: np.ndarray
    surface: np.ndarray
    noise_tags: frozenset = frozenset()


def simulate(family, grid: TimeGrid, bundle: NoiseBundle, path_index: int) -> SignalPath:
    """Realize one path of the family with its exact conditional surface."""
    cs = compile_signal(family, grid)
    dW = bundle.path(path_index)
    missing = cs.noise_tags() - set(dW)
    if missing:
        raise UnsupportedSignal(f"noise bundle lacks tags {sorted(missing)}")
    values, surface = cs.values_and_surface(dW)
    return SignalPath(grid, values, surface, cs.noise_tags())


def combine(paths) -> SignalPath:
    """Exact linear combination sum_i coef_i * path_i of values and surfaces."""
    terms = list(paths)
    if not terms:
        raise ShapeError("combine needs at least one path")
    grid = terms[0][1].grid
    values = np.zeros(grid.n)
    surface = np.zeros((grid.n, grid.n))
    tags = frozenset()
    for coef, p in terms:
        if p.grid != grid:
            raise ShapeError("combined paths live on different grids")
        values = values + coef * p.values
        surface = surface + coef * p.surface
        tags = tags | p.noise_tags
    return SignalPath(grid, values, surface, tags)
