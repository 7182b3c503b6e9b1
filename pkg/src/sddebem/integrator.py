"""Drift-implicit backward Euler and explicit Euler-Maruyama for SDDEs.

The scheme advances

    Z_n = Z_{n-1} + drift(Z_n, Z_{n-M}) dt + diffusion(Z_{n-1}, Z_{n-1-M}) dW_{n-1}

on a grid with dt = T/N = tau/M, after filling Z_n = phi(n dt) for
n = -M..0.  The drift is evaluated at the unknown new state, so every step
solves g(z) = z - dt * drift(z, y_delay) - r = 0.  Under the one-sided
monotonicity bound with K dt < 1 the map z -> z - dt * drift(z, y) is
strongly monotone, so the root exists and is unique; we find it by damped
Newton (user-supplied or forward-difference Jacobian) with a guaranteed
bracketing-bisection fallback in the scalar case.

All integrators come in a single-path and a batch flavour.  The batch
flavour advances many independent paths at once with the same per-path
arithmetic (converged paths are frozen by masking), so path p of a batch
run is bit-identical to a single-path run driven by the same increments.
"""

from __future__ import annotations

import csv
import math
import warnings
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .brownian import BrownianPath
from .errors import (GridError, NumericalError, ParameterError, SolverError,
                     StepSizeGuardWarning)
from .models import SddeModel, eval_diffusion, eval_drift

Array = np.ndarray

_EPS = np.finfo(float).eps
_MAX_HALVINGS = 30
_BLOWUP = 1e300


@dataclass(frozen=True)
class TimeGrid:
    """Uniform grid with horizon T = N dt and delay tau = M dt."""

    T: float
    tau: float
    N: int
    M: int
    dt: float

    def times(self) -> Array:
        """Node times t_n for n = -M..N."""
        return np.arange(-self.M, self.N + 1) * self.dt


def _int_ratio(num: float, den: float, what: str) -> int:
    ratio = num / den
    n = round(ratio)
    if n < 1 or abs(ratio - n) > math.ulp(max(abs(ratio), 1.0)):
        raise GridError(
            f"{what} = {num} is not an integer multiple of dt = {den} "
            f"(ratio {ratio!r})")
    return n


def make_grid(T: float, tau: float, dt: float) -> TimeGrid:
    """Build the grid, requiring T/dt and tau/dt to be integers up to one
    unit in the last place."""
    if not (T > 0 and tau > 0 and dt > 0):
        raise ParameterError("T, tau and dt must all be > 0")
    N = _int_ratio(T, dt, "horizon T")
    M = _int_ratio(tau, dt, "delay tau")
    return TimeGrid(T=T, tau=tau, N=N, M=M, dt=dt)


@dataclass(frozen=True)
class SolverConfig:
    """Controls for the implicit step solver.

    ``jacobian``, when given, must map (x, y) to the drift Jacobian
    d drift / dx of shape (d, d) (batched like the drift when the model is
    vectorized); otherwise forward differences with per-component step
    fd_step_scale * (1 + |z_i|) are used.
    """

    tol_residual: float = 1e-12
    max_iter: int = 50
    jacobian: Callable[[Array, Array], Array] | None = None
    fd_step_scale: float = math.sqrt(_EPS)

    def __post_init__(self):
        if not self.tol_residual > 0:
            raise ParameterError("tol_residual must be > 0")
        if self.max_iter < 1:
            raise ParameterError("max_iter must be >= 1")
        if not self.fd_step_scale > 0:
            raise ParameterError("fd_step_scale must be > 0")


@dataclass
class Trajectory:
    """Solution values on a grid, indexed n = -M..N (history included)."""

    grid: TimeGrid
    values: Array                     # (M + N + 1, d)
    solver_iters: Array | None = None  # (N,) Newton iterations, BEM only
    blowup_index: int | None = None    # first n with |Z_n| >= 1e300, EM only

    def value(self, n: int) -> Array:
        """State at node n, where n may be negative (history)."""
        if not -self.grid.M <= n <= self.grid.N:
            raise IndexError(f"node {n} outside [{-self.grid.M}, {self.grid.N}]")
        return self.values[n + self.grid.M]

    def times(self) -> Array:
        return self.grid.times()


@dataclass
class TrajectoryBatch:
    """Trajectories of many paths advanced together; row p is bit-identical
    to the single-path integration of path p."""

    grid: TimeGrid
    values: Array                      # (P, M + N + 1, d)
    solver_iters: Array | None = None  # (P, N)
    blowup_index: Array | None = None  # (P,), -1 where no blow-up

    @property
    def n_paths(self) -> int:
        return self.values.shape[0]

    def path(self, p: int) -> Trajectory:
        return Trajectory(
            grid=self.grid,
            values=self.values[p],
            solver_iters=None if self.solver_iters is None else self.solver_iters[p],
            blowup_index=None if self.blowup_index is None or self.blowup_index[p] < 0
            else int(self.blowup_index[p]),
        )


def _row_norm(v: Array) -> Array:
    return np.sqrt(np.einsum("...d,...d->...", v, v))


def _jacobian_g(model: SddeModel, cfg: SolverConfig, z: Array, y: Array,
                drift_at_z: Array, dt: float) -> Array:
    """Jacobian of g(z) = z - dt * drift(z, y) - r, shape (P, d, d)."""
    P, d = z.shape
    if cfg.jacobian is not None:
        if model.vectorized:
            ja = np.asarray(cfg.jacobian(z, y), dtype=float)
        else:
            ja = np.stack([np.asarray(cfg.jacobian(z[i], y[i]), dtype=float)
                           for i in range(P)])
    else:
        ja = np.empty((P, d, d))
        for j in range(d):
            h = cfg.fd_step_scale * (1.0 + np.abs(z[:, j]))
            zp = z.copy()
            zp[:, j] += h
            ja[:, :, j] = (eval_drift(model, zp, y) - drift_at_z) / h[:, None]
    return np.eye(d) - dt * ja


def _bisect_scalar(model: SddeModel, y: Array, r: Array, dt: float,
                   cfg: SolverConfig) -> tuple[float, int]:
    """Guaranteed scalar fallback: expand a bracket around r, then bisect.
    Relies on g being increasing, which holds whenever K dt < 1."""

    def g(zz: float) -> float:
        zv = np.array([zz])
        return float(zv[0] - dt * eval_drift(model, zv, y)[0] - r[0])

    r0 = float(r[0])
    iters = 0
    w = 1.0 + abs(r0)
    a, b = r0 - w, r0 + w
    ga, gb = g(a), g(b)
    if math.isnan(ga) or math.isnan(gb):
        raise NumericalError("drift evaluation returned NaN while bracketing")
    for _ in range(200):
        if ga <= 0.0:
            break
        w *= 2.0
        a -= w
        ga = g(a)
        iters += 1
    for _ in range(200):
        if gb >= 0.0:
            break
        w *= 2.0
        b += w
        gb = g(b)
        iters += 1
    if ga > 0.0 or gb < 0.0:
        raise SolverError("failed to bracket the implicit-step root",
                          best=np.array([a]), residual=abs(ga))
    best, best_res = a, abs(ga)
    for _ in range(400):
        mid = 0.5 * (a + b)
        gm = g(mid)
        iters += 1
        if math.isnan(gm):
            raise NumericalError("drift evaluation returned NaN in bisection")
        if abs(gm) < best_res:
            best, best_res = mid, abs(gm)
        if best_res <= cfg.tol_residual:
            return best, iters
        if gm < 0.0:
            a = mid
        else:
            b = mid
        if b - a <= 4.0 * _EPS * max(1.0, abs(a), abs(b)):
            break
    if best_res <= cfg.tol_residual:
        return best, iters
    raise SolverError(
        f"bisection stalled at residual {best_res:.3e} > tol {cfg.tol_residual:.3e}",
        best=np.array([best]), residual=best_res)


def _solve_implicit_batch(model: SddeModel, y_delay: Array, r: Array,
                          dt: float, cfg: SolverConfig,
                          z0: Array | None = None) -> tuple[Array, Array]:
    """Solve g(z) = z - dt * drift(z, y_delay) - r = 0 for each row.

    Damped Newton with per-row freezing: a row stops updating the moment
    its residual norm reaches tolerance, so results do not depend on which
    other rows share the batch.  Rows that exhaust max_iter fall back to
    bisection when d == 1 and raise otherwise.
    """
    P, d = r.shape
    z = np.array(r if z0 is None else z0, dtype=float, copy=True)
    drift_z = eval_drift(model, z, y_delay)
    g = z - dt * drift_z - r
    if not np.all(np.isfinite(g)):
        raise NumericalError("drift evaluation non-finite at the initial guess")
    gnorm = _row_norm(g)
    iters = np.zeros(P, dtype=np.int64)
    stalled = np.zeros(P, dtype=bool)
    active = gnorm > cfg.tol_residual
    while active.any():
        exhausted = active & (stalled | (iters >= cfg.max_iter))
        if exhausted.any():
            if d != 1:
                i = int(np.flatnonzero(exhausted)[0])
                raise SolverError(
                    f"Newton did not reach tol {cfg.tol_residual:.3e} in "
                    f"{cfg.max_iter} iterations (row {i})",
                    path_index=i, best=z[i].copy(), residual=float(gnorm[i]))
            for i in np.flatnonzero(exhausted):
                zi, extra = _bisect_scalar(model, y_delay[i], r[i], dt, cfg)
                z[i, 0] = zi
                iters[i] += extra
                gnorm[i] = abs(zi - dt * eval_drift(model, z[i], y_delay[i])[0]
                               - r[i, 0])
            active &= ~exhausted
            if not active.any():
                break
        jac = _jacobian_g(model, cfg, z, y_delay, drift_z, dt)
        if d == 1:
            denom = jac[:, 0, 0]
            safe = np.where(denom == 0.0, 1.0, denom)
            step = np.where(denom == 0.0, np.inf, g[:, 0] / safe)[:, None]
        else:
            step = np.linalg.solve(jac, g[..., None])[..., 0]
        bad = active & ~np.all(np.isfinite(step), axis=1)
        if bad.any():
            stalled |= bad
            step = np.where(bad[:, None], 0.0, step)
        lam = np.ones(P)
        cand = np.where(active[:, None], z - step, z)
        drift_c = eval_drift(model, cand, y_delay)
        gc = cand - dt * drift_c - r
        gcnorm = _row_norm(gc)
        halvings = 0
        need = active & ~stalled & ~(gcnorm < gnorm)
        while need.any() and halvings < _MAX_HALVINGS:
            lam = np.where(need, 0.5 * lam, lam)
            cand = np.where(active[:, None], z - lam[:, None] * step, z)
            drift_c = eval_drift(model, cand, y_delay)
            gc = cand - dt * drift_c - r
            gcnorm = _row_norm(gc)
            halvings += 1
            need = active & ~stalled & ~(gcnorm < gnorm)
        move = active & ~stalled
        z = np.where(move[:, None], cand, z)
        g = np.where(move[:, None], gc, g)
        drift_z = np.where(move[:, None], drift_c, drift_z)
        gnorm = np.where(move, gcnorm, gnorm)
        iters = iters + move
        active = active & (gnorm > cfg.tol_residual)
    return z, iters


def solve_drift_implicit(model: SddeModel, y_delay: Array, r: Array,
                         dt: float, cfg: SolverConfig | None = None,
                         z0: Array | None = None) -> tuple[Array, int]:
    """Solve z = dt * drift(z, y_delay) + r; returns (z, iterations).

    On success |z - dt*drift(z, y_delay) - r| <= cfg.tol_residual in the
    Euclidean norm.  The initial guess defaults to r (override with z0).
    """
    cfg = cfg or SolverConfig()
    y = np.atleast_1d(np.asarray(y_delay, dtype=float))
    rv = np.atleast_1d(np.asarray(r, dtype=float))
    if y.shape != (model.dim_state,) or rv.shape != (model.dim_state,):
        raise ParameterError(
            f"y_delay and r must have shape ({model.dim_state},)")
    if not np.all(np.isfinite(rv)):
        raise ParameterError("r must be finite")
    _check_monotone_guard(model, dt, warn_undeclared=False)
    z0v = None if z0 is None else np.atleast_1d(np.asarray(z0, dtype=float))[None, :]
    z, iters = _solve_implicit_batch(model, y[None, :], rv[None, :], dt, cfg,
                                     z0=z0v)
    return z[0], int(iters[0])


def _check_monotone_guard(model: SddeModel, dt: float,
                          warn_undeclared: bool) -> None:
    K = model.constants.K if model.constants else None
    if K is not None:
        if K * dt >= 1.0:
            raise ParameterError(
                f"implicit step not guaranteed solvable: K*dt = {K * dt} >= 1")
    elif warn_undeclared:
        warnings.warn(
            "model declares no monotonicity constant K; cannot verify the "
            "implicit-step solvability bound K*dt < 1", StepSizeGuardWarning,
            stacklevel=3)


def _apply_diffusion(model: SddeModel, x: Array, y: Array, dw: Array) -> Array:
    """diffusion(x, y) @ dw for stacked states, (..., d)."""
    b = eval_diffusion(model, x, y)
    return np.einsum("...dm,...m->...d", b, dw)


def bem_step(model: SddeModel, z_prev: Array, z_delay_n: Array,
             z_delay_prev: Array, dW: Array, dt: float,
             cfg: SolverConfig | None = None) -> Array:
    """One backward Euler step: the diffusion uses the previous states
    (z_prev, z_delay_prev), the implicit drift the current delay value
    z_delay_n."""
    cfg = cfg or SolverConfig()
    zp = np.atleast_1d(np.asarray(z_prev, dtype=float))
    dw = np.atleast_1d(np.asarray(dW, dtype=float))
    zdp = np.atleast_1d(np.asarray(z_delay_prev, dtype=float))
    r = zp + _apply_diffusion(model, zp, zdp, dw)
    z, _ = solve_drift_implicit(model, z_delay_n, r, dt, cfg)
    return z


def _as_increment_array(path, grid: TimeGrid, model: SddeModel,
                        batch: bool) -> Array:
    """Normalize a driving path (BrownianPath, array, or a sequence of
    either) to shape (P, N, m), checking it matches the grid."""
    if isinstance(path, BrownianPath):
        if not math.isclose(path.dt, grid.dt, rel_tol=1e-12):
            raise GridError(
                f"path step {path.dt!r} does not match grid step {grid.dt!r}")
        arr = path.increments[None, ...]
    elif isinstance(path, np.ndarray):
        arr = path if (batch and path.ndim == 3) else path[None, ...]
    else:  # sequence of paths
        mats = []
        for p in path:
            if isinstance(p, BrownianPath):
                if not math.isclose(p.dt, grid.dt, rel_tol=1e-12):
                    raise GridError(
                        f"path step {p.dt!r} does not match grid step {grid.dt!r}")
                mats.append(p.increments)
            else:
                mats.append(np.asarray(p, dtype=float))
        arr = np.stack(mats)
    if arr.ndim != 3 or arr.shape[1] != grid.N or arr.shape[2] != model.dim_noise:
        raise GridError(
            f"increments must have shape (P, {grid.N}, {model.dim_noise}), "
            f"got {arr.shape}")
    return arr


def _history_values(model: SddeModel, grid: TimeGrid) -> Array:
    hist = np.empty((grid.M + 1, model.dim_state))
    for n in range(-grid.M, 1):
        hist[n + grid.M] = np.asarray(model.initial_path(n * grid.dt),
                                      dtype=float)
    return hist


def bem_integrate_batch(model: SddeModel, grid: TimeGrid, paths,
                        cfg: SolverConfig | None = None) -> TrajectoryBatch:
    """Backward Euler over the full grid for a batch of driving paths."""
    cfg = cfg or SolverConfig()
    _check_monotone_guard(model, grid.dt, warn_undeclared=True)
    dw = _as_increment_array(paths, grid, model, batch=True)
    P = dw.shape[0]
    M, N, d = grid.M, grid.N, model.dim_state
    values = np.empty((P, M + N + 1, d))
    values[:, :M + 1] = _history_values(model, grid)[None, ...]
    iters = np.zeros((P, N), dtype=np.int64)
    # node n lives at values[:, n + M]; the delayed node n - M at values[:, n]
    for n in range(1, N + 1):
        z_prev = values[:, n - 1 + M]
        r = z_prev + _apply_diffusion(model, z_prev, values[:, n - 1],
                                      dw[:, n - 1])
        try:
            z, its = _solve_implicit_batch(model, values[:, n], r, grid.dt, cfg)
        except SolverError as exc:
            exc.step = n
            exc.partial = TrajectoryBatch(grid=grid,
                                          values=values[:, :n + M],
                                          solver_iters=iters[:, :n - 1])
            raise
        if not np.all(np.isfinite(z)):
            raise NumericalError(
                f"non-finite state at step {n}", step=n,
                partial=TrajectoryBatch(grid=grid, values=values[:, :n + M],
                                        solver_iters=iters[:, :n - 1]))
        values[:, n + M] = z
        iters[:, n - 1] = its
    return TrajectoryBatch(grid=grid, values=values, solver_iters=iters)


def bem_integrate(model: SddeModel, grid: TimeGrid, path,
                  cfg: SolverConfig | None = None) -> Trajectory:
    """Backward Euler over the full grid for one driving path."""
    batch = bem_integrate_batch(model, grid, path, cfg)
    return batch.path(0)


def em_integrate_batch(model: SddeModel, grid: TimeGrid, paths) -> TrajectoryBatch:
    """Explicit Euler-Maruyama baseline.

    Never raises on blow-up: the first index where a state norm reaches
    1e300 (or goes non-finite) is recorded per path and integration
    continues, so divergence remains observable in the output.
    """
    dw = _as_increment_array(paths, grid, model, batch=True)
    P = dw.shape[0]
    M, N, d = grid.M, grid.N, model.dim_state
    values = np.empty((P, M + N + 1, d))
    values[:, :M + 1] = _history_values(model, grid)[None, ...]
    blowup = np.full(P, -1, dtype=np.int64)
    with np.errstate(over="ignore", invalid="ignore"):
        for n in range(1, N + 1):
            z_prev = values[:, n - 1 + M]
            z = z_prev + grid.dt * eval_drift(model, z_prev, values[:, n - 1]) \
                + _apply_diffusion(model, z_prev, values[:, n - 1], dw[:, n - 1])
            values[:, n + M] = z
            over = (blowup < 0) & ((np.abs(z).max(axis=1) >= _BLOWUP)
                                   | ~np.all(np.isfinite(z), axis=1))
            blowup[over] = n
    return TrajectoryBatch(grid=grid, values=values, blowup_index=blowup)


def em_integrate(model: SddeModel, grid: TimeGrid, path) -> Trajectory:
    batch = em_integrate_batch(model, grid, path)
    return batch.path(0)


def trajectory_to_csv(traj: Trajectory, fileobj,
                      manifest_hash: str | None = None) -> None:
    """Dump one trajectory; history rows carry solver_iters = 0."""
    if manifest_hash:
        fileobj.write(f"# manifest={manifest_hash}\n")
    d = traj.values.shape[1]
    writer = csv.writer(fileobj, lineterminator="\n")
    writer.writerow(["n", "t"] + [f"z_{j + 1}" for j in range(d)]
                    + ["solver_iters"])
    M = traj.grid.M
    for n in range(-M, traj.grid.N + 1):
        row = [n, repr(n * traj.grid.dt)]
        row += [repr(float(v)) for v in traj.values[n + M]]
        if traj.solver_iters is not None and n >= 1:
            row.append(int(traj.solver_iters[n - 1]))
        else:
            row.append(0)
        writer.writerow(row)
