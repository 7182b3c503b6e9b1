"""Monte Carlo analysis harness: strong-error estimation with coupled
paths, one-step residual scaling, path regularity, and mean-square
stability diagnostics with their step-size certificates.

Every experiment couples all step sizes through one finest grid: each path
index p deterministically yields the fine increments, the fine-grid
backward Euler solution serves as the reference, and coarser runs are
driven by exact block sums of the same increments.  Per-path statistics
are accumulated in ascending path order through fixed-size chunks, so
results never depend on the worker thread count.
"""

from __future__ import annotations

import csv
import math
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .brownian import coarsen, sample_increments
from .errors import GridError, ParameterError
from .integrator import SolverConfig, TimeGrid, bem_integrate_batch, make_grid
from .models import SddeModel, eval_diffusion, eval_drift

Array = np.ndarray

CHUNK = 128  # paths per batch; fixed so chunk boundaries never depend on threads


def _map_chunks(worker, n_paths: int, threads: int) -> list:
    """Run worker(lo, hi) over fixed path ranges; results in range order."""
    bounds = [(lo, min(lo + CHUNK, n_paths)) for lo in range(0, n_paths, CHUNK)]
    if threads > 1 and len(bounds) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            return list(pool.map(lambda b: worker(*b), bounds))
    return [worker(lo, hi) for lo, hi in bounds]


def _coarse_factor(dt: float, ref_dt: float) -> int:
    ratio = dt / ref_dt
    f = round(ratio)
    if f < 1 or abs(ratio - f) > math.ulp(max(abs(ratio), 1.0)):
        raise GridError(
            f"stepsize {dt} is not an integer multiple of ref_dt {ref_dt}")
    return f


def _coupled_grids(model: SddeModel, T: float, tau: float,
                   stepsizes, ref_dt: float):
    if len(stepsizes) < 2:
        raise ParameterError("need at least two stepsizes")
    grid_ref = make_grid(T, tau, ref_dt)
    factors, grids = [], []
    for s in stepsizes:
        if not s > ref_dt:
            raise ParameterError(
                f"ref_dt {ref_dt} must be strictly smaller than stepsize {s}")
        factors.append(_coarse_factor(s, ref_dt))
        grids.append(make_grid(T, tau, s))
    return grid_ref, factors, grids


def _sample_fine(model: SddeModel, grid_ref: TimeGrid, base_seed: int,
                 lo: int, hi: int):
    paths = [sample_increments(base_seed, p, grid_ref.N, model.dim_noise,
                               grid_ref.dt) for p in range(lo, hi)]
    return paths, np.stack([q.increments for q in paths])


# ---------------------------------------------------------------------------
# strong error and order fitting


@dataclass
class ConvergenceReport:
    """Root-mean-square errors at the horizon against the fine reference,
    one entry per stepsize, with the fitted log-log order."""

    stepsizes: list
    rms_errors: list
    n_paths: int
    ref_dt: float
    fitted_order: float
    fit_residual: float
    order_defined: bool = True


def fit_convergence_order(stepsizes, errors) -> tuple[float, float]:
    """Least-squares slope of log2(error) against log2(dt).

    Nonpositive or non-finite errors are excluded with a warning; fewer
    than two surviving points is an error.  Returns (slope, max absolute
    fit residual in log2 space).
    """
    s = np.asarray(stepsizes, dtype=float)
    e = np.asarray(errors, dtype=float)
    if s.shape != e.shape or s.ndim != 1 or len(s) < 2:
        raise ParameterError("need matching 1-d stepsizes/errors of length >= 2")
    valid = (e > 0) & np.isfinite(e)
    if not valid.all():
        warnings.warn(f"excluding {int((~valid).sum())} nonpositive error "
                      "points from the order fit")
    if valid.sum() < 2:
        raise ParameterError("fewer than 2 valid points for the order fit")
    x = np.log2(s[valid])
    y = np.log2(e[valid])
    slope, intercept = np.polyfit(x, y, 1)
    residual = float(np.max(np.abs(y - (slope * x + intercept))))
    return float(slope), residual


def strong_error_at_T(model: SddeModel, T: float, tau: float, stepsizes,
                      ref_dt: float, n_paths: int, base_seed: int,
                      cfg: SolverConfig | None = None,
                      threads: int = 1) -> ConvergenceReport:
    """Estimate (E|x(T) - Z_N|^2)^(1/2) per stepsize with coupled paths.

    For each path the backward Euler solution at ref_dt acts as the exact
    solution; every coarse run is driven by block sums of the same fine
    increments.  Accumulation over paths is in ascending path order.
    """
    cfg = cfg or SolverConfig()
    stepsizes = [float(s) for s in stepsizes]
    grid_ref, factors, grids = _coupled_grids(model, T, tau, stepsizes, ref_dt)

    def worker(lo, hi):
        fine_paths, dwf = _sample_fine(model, grid_ref, base_seed, lo, hi)
        ref = bem_integrate_batch(model, grid_ref, dwf, cfg)
        x_T = ref.values[:, grid_ref.M + grid_ref.N]
        sq = np.empty((hi - lo, len(stepsizes)))
        for j, (factor, grid_s) in enumerate(zip(factors, grids)):
            coarse = [coarsen(q, factor) for q in fine_paths]
            for q, c in zip(fine_paths, coarse):
                # coupling invariant: the coarse driver is a view of the
                # reference driver, never a fresh sample
                assert c.fine_increments is q.fine_increments
            z = bem_integrate_batch(model, grid_s,
                                    np.stack([c.increments for c in coarse]),
                                    cfg)
            diff = x_T - z.values[:, grid_s.M + grid_s.N]
            sq[:, j] = np.einsum("pd,pd->p", diff, diff)
        return sq

    sq = np.concatenate(_map_chunks(worker, n_paths, threads))
    rms = np.sqrt(sq.mean(axis=0))
    try:
        order, resid = fit_convergence_order(stepsizes, rms)
        defined = True
    except ParameterError:
        order, resid, defined = float("nan"), float("nan"), False
    return ConvergenceReport(stepsizes=list(stepsizes),
                             rms_errors=[float(v) for v in rms],
                             n_paths=n_paths, ref_dt=ref_dt,
                             fitted_order=order, fit_residual=resid,
                             order_defined=defined)


# ---------------------------------------------------------------------------
# one-step residual scaling


@dataclass
class ResidualReport:
    """Mean-square one-step defects of the reference solution against the
    scheme, averaged over steps and paths, per stepsize.

    The defect of a step to t_n integrates the drift mismatch against the
    value at t_n and the diffusion mismatch against the value at t_{n-1};
    the drift-only part bounds the conditional-mean defect because the
    stochastic integral has zero conditional expectation.  Expected
    scalings: dt^2 for the total, dt^3 for the drift part.
    """

    stepsizes: list
    mean_sq_residual: list
    mean_sq_drift_residual: list
    slope_residual: float
    slope_drift_residual: float
    n_paths: int
    ref_dt: float


def estimate_residual_scaling(model: SddeModel, T: float, tau: float,
                              stepsizes, ref_dt: float, n_paths: int,
                              base_seed: int, cfg: SolverConfig | None = None,
                              threads: int = 1) -> ResidualReport:
    """Approximate the one-step residuals by substituting the fine
    reference trajectory for the exact solution, with the integrals over
    each coarse step evaluated as left-point fine-grid sums."""
    cfg = cfg or SolverConfig()
    stepsizes = [float(s) for s in stepsizes]
    grid_ref, factors, grids = _coupled_grids(model, T, tau, stepsizes, ref_dt)
    Mf, Nf = grid_ref.M, grid_ref.N
    d = model.dim_state

    def worker(lo, hi):
        _, dwf = _sample_fine(model, grid_ref, base_seed, lo, hi)
        ref = bem_integrate_batch(model, grid_ref, dwf, cfg)
        V = ref.values
        c = hi - lo
        # drift/diffusion along the fine path at left endpoints t_k
        A = eval_drift(model, V[:, Mf:Mf + Nf], V[:, 0:Nf])
        B = eval_diffusion(model, V[:, Mf:Mf + Nf], V[:, 0:Nf])
        b_dw = np.einsum("pkdm,pkm->pkd", B, dwf)
        out = np.empty((c, 2 * len(stepsizes)))
        for j, (F, grid_s) in enumerate(zip(factors, grids)):
            Nc = grid_s.N
            dt = grid_s.dt
            drift_int = ref_dt * A.reshape(c, Nc, F, d).sum(axis=2)
            a_end = eval_drift(model, V[:, Mf + F::F], V[:, F:Nf + 1:F])
            drift_part = drift_int - dt * a_end
            noise_int = b_dw.reshape(c, Nc, F, d).sum(axis=2)
            b_start = eval_diffusion(model, V[:, Mf:Mf + Nf:F], V[:, 0:Nf:F])
            w_block = dwf.reshape(c, Nc, F, model.dim_noise).sum(axis=2)
            noise_part = noise_int - np.einsum("pndm,pnm->pnd", b_start, w_block)
            resid = drift_part + noise_part
            out[:, j] = np.einsum("pnd,pnd->p", resid, resid) / Nc
            out[:, len(stepsizes) + j] = \
                np.einsum("pnd,pnd->p", drift_part, drift_part) / Nc
        return out

    per_path = np.concatenate(_map_chunks(worker, n_paths, threads))
    means = per_path.mean(axis=0)
    k = len(stepsizes)
    msq_r = means[:k]
    msq_d = means[k:]
    slope_r, _ = fit_convergence_order(stepsizes, msq_r)
    slope_d, _ = fit_convergence_order(stepsizes, msq_d)
    return ResidualReport(stepsizes=list(stepsizes),
                          mean_sq_residual=[float(v) for v in msq_r],
                          mean_sq_drift_residual=[float(v) for v in msq_d],
                          slope_residual=slope_r,
                          slope_drift_residual=slope_d,
                          n_paths=n_paths, ref_dt=ref_dt)


# ---------------------------------------------------------------------------
# path regularity


def _ref_index(t: float, ref_dt: float, what: str) -> int:
    i = round(t / ref_dt)
    if abs(t / ref_dt - i) > math.ulp(max(abs(t / ref_dt), 1.0)):
        raise ParameterError(f"{what} = {t} is not on the ref_dt grid")
    return i


def holder_curve(model: SddeModel, gamma: float, time_pairs, ref_dt: float,
                 n_paths: int, base_seed: int, T: float | None = None,
                 cfg: SolverConfig | None = None,
                 threads: int = 1) -> tuple[Array, Array, float]:
    """Moment curve behind the regularity estimate: for each pair
    (t1, t2) returns the gap, (E|x(t2) - x(t1)|^gamma)^(1/gamma) from the
    fine reference, and the fitted gap exponent (NaN when degenerate)."""
    cfg = cfg or SolverConfig()
    if not gamma >= 2:
        raise ParameterError(f"gamma must be >= 2, got {gamma}")
    cc = model.constants
    if cc is not None and cc.p_bar is not None and cc.rho is not None \
            and gamma > cc.p_bar / cc.rho:
        raise ParameterError(
            f"gamma must be <= p_bar/rho = {cc.p_bar / cc.rho}, got {gamma}")
    pairs = [(float(t1), float(t2)) for t1, t2 in time_pairs]
    if not pairs:
        raise ParameterError("need at least one time pair")
    for t1, t2 in pairs:
        if not (0.0 <= t1 < t2):
            raise ParameterError(f"need 0 <= t1 < t2, got ({t1}, {t2})")
    gaps = np.array([t2 - t1 for t1, t2 in pairs])
    if len(np.unique(gaps)) < 2:
        raise ParameterError("degenerate pair spacing: need >= 2 distinct gaps")
    idx = [( _ref_index(t1, ref_dt, "t1"), _ref_index(t2, ref_dt, "t2"))
           for t1, t2 in pairs]
    n_end = max(i2 for _, i2 in idx)
    horizon = T if T is not None else n_end * ref_dt
    grid_ref = make_grid(horizon, model.delay, ref_dt)
    if n_end > grid_ref.N:
        raise ParameterError("time pairs extend beyond the horizon")
    Mf = grid_ref.M

    def worker(lo, hi):
        _, dwf = _sample_fine(model, grid_ref, base_seed, lo, hi)
        ref = bem_integrate_batch(model, grid_ref, dwf, cfg)
        out = np.empty((hi - lo, len(pairs)))
        for j, (i1, i2) in enumerate(idx):
            diff = ref.values[:, Mf + i2] - ref.values[:, Mf + i1]
            out[:, j] = np.einsum("pd,pd->p", diff, diff) ** (0.5 * gamma)
        return out

    per_path = np.concatenate(_map_chunks(worker, n_paths, threads))
    moments = per_path.mean(axis=0) ** (1.0 / gamma)
    try:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            exponent, _ = fit_convergence_order(gaps, moments)
    except ParameterError:
        exponent = float("nan")
    return gaps, moments, exponent


def estimate_holder_exponent(model: SddeModel, gamma: float, time_pairs,
                             ref_dt: float, n_paths: int, base_seed: int,
                             T: float | None = None,
                             cfg: SolverConfig | None = None,
                             threads: int = 1) -> float:
    """Fitted exponent e with (E|x(t2) - x(t1)|^gamma)^(1/gamma) ~ gap^e;
    NaN when all moments vanish (e.g. a deterministic constant model)."""
    return holder_curve(model, gamma, time_pairs, ref_dt, n_paths, base_seed,
                        T=T, cfg=cfg, threads=threads)[2]


# ---------------------------------------------------------------------------
# mean-square stability


@dataclass
class StabilityReport:
    """Second-moment trajectory E|Z_n|^2 with its fitted exponential decay
    rate and, when the model declares dissipativity constants, the
    certificate quantities: the supremal admissible decay rate, the rate
    actually used for the step-size root, and the three step-size caps."""

    times: Array
    mean_square: Array
    n_paths: int
    dt: float
    fitted_decay_rate: float | None = None
    fit_window: tuple | None = None
    epsilon_admissible: float | None = None
    epsilon_cap: float | None = None
    epsilon_used: float | None = None
    delta_star: float | None = None
    delta_caps: dict | None = None


def fit_decay_rate(report: StabilityReport, window: tuple | None = None) -> float:
    """Least-squares slope of log E|Z_n|^2 against t over the window
    (default: the last 80% of the horizon).  Nonpositive values are
    excluded; fewer than two remaining points is an error."""
    times = np.asarray(report.times, dtype=float)
    ms = np.asarray(report.mean_square, dtype=float)
    t_end = times[-1]
    lo, hi = window if window is not None else (0.2 * t_end, t_end)
    if not (0.0 <= lo < hi <= t_end):
        raise ParameterError(f"window ({lo}, {hi}) not inside [0, {t_end}]")
    sel = (times >= lo) & (times <= hi) & (ms > 0) & np.isfinite(ms)
    if sel.sum() < 2:
        raise ParameterError("fewer than 2 positive points in the fit window")
    slope = np.polyfit(times[sel], np.log(ms[sel]), 1)[0]
    return float(slope)


def mean_square_trajectory(model: SddeModel, T: float, tau: float, dt: float,
                           n_paths: int, base_seed: int,
                           cfg: SolverConfig | None = None,
                           threads: int = 1) -> StabilityReport:
    """Run n_paths backward Euler trajectories and average |Z_n|^2 per
    node, n = 0..N, in ascending path order."""
    cfg = cfg or SolverConfig()
    grid = make_grid(T, tau, dt)

    def worker(lo, hi):
        _, dw = _sample_fine(model, grid, base_seed, lo, hi)
        traj = bem_integrate_batch(model, grid, dw, cfg)
        z = traj.values[:, grid.M:]
        return np.einsum("pnd,pnd->pn", z, z)

    per_path = np.concatenate(_map_chunks(worker, n_paths, threads))
    report = StabilityReport(times=np.arange(grid.N + 1) * dt,
                             mean_square=per_path.mean(axis=0),
                             n_paths=n_paths, dt=dt)
    _attach_certificates(report, model, tau, dt)
    window = (0.2 * T, T)
    try:
        report.fitted_decay_rate = fit_decay_rate(report, window)
        report.fit_window = window
    except ParameterError:
        report.fitted_decay_rate = None
    return report


def _attach_certificates(report: StabilityReport, model: SddeModel,
                         tau: float, dt: float) -> None:
    cc = model.constants
    needed = ("c1", "c2", "c3", "c4", "l")
    if cc is None or any(getattr(cc, f) is None for f in needed):
        warnings.warn(
            "model declares no dissipativity constants; step-size caps for "
            "mean-square stability cannot be verified", UserWarning,
            stacklevel=3)
        return
    eps_star, cap = admissible_epsilon(cc.c1, cc.c2, cc.c3, cc.c4, tau)
    eps_used = 0.5 * (eps_star if cap is None else min(eps_star, cap))
    dstar = delta_star(cc.c1, cc.c2, eps_used, tau)
    caps = {"dissipativity": (cc.l - 1.0) / (2.0 * cc.c1), "delta_star": dstar}
    if cc.K is not None:
        caps["monotonicity"] = 1.0 / cc.K
    report.epsilon_admissible = eps_star
    report.epsilon_cap = cap
    report.epsilon_used = eps_used
    report.delta_star = dstar
    report.delta_caps = caps
    if dt >= min(caps.values()):
        warnings.warn(
            f"step size {dt} is not below the certified caps {caps}; the "
            "decay guarantee does not apply", UserWarning, stacklevel=3)


def admissible_epsilon(c1: float, c2: float, c3: float, c4: float,
                       tau: float) -> tuple[float, float | None]:
    """Supremal decay rate eps_star solving eps + 2 c2 exp(eps tau) = 2 c1,
    plus the delay-term cap log(c3/c4)/tau (None when c4 == 0, where the
    cap is vacuous).  Any rate strictly below both is admissible."""
    if not tau > 0:
        raise ParameterError(f"tau must be > 0, got {tau}")
    if not (c3 > c4 >= 0):
        raise ParameterError(f"need c3 > c4 >= 0, got c3={c3}, c4={c4}")
    if not c2 >= 0:
        raise ParameterError(f"c2 must be >= 0, got {c2}")
    if not c1 > c2:
        raise ParameterError(
            f"no admissible decay rate: need c1 > c2, got c1={c1}, c2={c2}")

    def h(e):
        return e + 2.0 * c2 * math.exp(e * tau) - 2.0 * c1

    lo, hi = 0.0, 2.0 * c1
    while hi - lo > 1e-12:
        mid = 0.5 * (lo + hi)
        if h(mid) < 0.0:
            lo = mid
        else:
            hi = mid
    eps_star = 0.5 * (lo + hi)
    cap = math.log(c3 / c4) / tau if c4 > 0 else None
    return eps_star, cap


def delta_star(c1: float, c2: float, epsilon: float, tau: float) -> float:
    """Unique positive root of
    f(D) = 1 + 2 c1 D - exp(epsilon D) - 2 c2 D exp(epsilon tau).

    f(0) = 0, f is concave and increasing at 0 precisely when
    epsilon + 2 c2 exp(epsilon tau) < 2 c1, so one positive root exists;
    found by doubling a bracket from the 1/epsilon scale, then bisection
    to 1e-10 relative width.
    """
    if not tau > 0:
        raise ParameterError(f"tau must be > 0, got {tau}")
    if not epsilon > 0:
        raise ParameterError(f"epsilon must be > 0, got {epsilon}")
    if not epsilon + 2.0 * c2 * math.exp(epsilon * tau) < 2.0 * c1:
        raise ParameterError(
            "no positive root: f'(0) <= 0 because "
            f"epsilon + 2 c2 exp(epsilon tau) = "
            f"{epsilon + 2.0 * c2 * math.exp(epsilon * tau)} >= 2 c1 = {2.0 * c1}")

    def f(delta):
        try:
            e = math.exp(epsilon * delta)
        except OverflowError:
            return -math.inf
        return 1.0 + 2.0 * c1 * delta - e - 2.0 * c2 * delta * math.exp(epsilon * tau)

    b = 1.0 / epsilon
    if f(b) > 0.0:
        a = b
        for _ in range(400):
            b *= 2.0
            if f(b) <= 0.0:
                break
            a = b
        else:
            raise ParameterError("failed to bracket the step-size root")
    else:
        for _ in range(2000):
            nxt = 0.5 * b
            if f(nxt) > 0.0:
                a = nxt
                break
            b = nxt
        else:
            raise ParameterError("failed to bracket the step-size root")
    while b - a > 1e-10 * max(1.0, b):
        mid = 0.5 * (a + b)
        if f(mid) > 0.0:
            a = mid
        else:
            b = mid
    return 0.5 * (a + b)


# ---------------------------------------------------------------------------
# CSV serialization


def _write_rows(fileobj, header, rows, manifest_hash=None):
    if manifest_hash:
        fileobj.write(f"# manifest={manifest_hash}\n")
    writer = csv.writer(fileobj, lineterminator="\n")
    writer.writerow(header)
    for row in rows:
        writer.writerow(row)


def convergence_to_csv(report: ConvergenceReport, fileobj,
                       manifest_hash: str | None = None) -> None:
    _write_rows(fileobj, ["dt", "rms_error"],
                [[repr(s), repr(e)] for s, e in
                 zip(report.stepsizes, report.rms_errors)], manifest_hash)


def residual_to_csv(report: ResidualReport, fileobj,
                    manifest_hash: str | None = None) -> None:
    _write_rows(fileobj, ["dt", "mean_sq_R", "mean_sq_R_drift"],
                [[repr(s), repr(r), repr(d)] for s, r, d in
                 zip(report.stepsizes, report.mean_sq_residual,
                     report.mean_sq_drift_residual)], manifest_hash)


def stability_to_csv(report: StabilityReport, fileobj,
                     manifest_hash: str | None = None) -> None:
    _write_rows(fileobj, ["t", "mean_square"],
                [[repr(float(t)), repr(float(v))] for t, v in
                 zip(report.times, report.mean_square)], manifest_hash)


def holder_to_csv(gaps: Array, moments: Array, fileobj,
                  manifest_hash: str | None = None) -> None:
    _write_rows(fileobj, ["gap", "moment"],
                [[repr(float(g)), repr(float(v))] for g, v in
                 zip(gaps, moments)], manifest_hash)
