"""SDDE problem definitions and sampling-based structural checks.

A model is the Ito equation

    dx(t) = drift(x(t), x(t - tau)) dt + diffusion(x(t), x(t - tau)) dW(t)

with an initial segment ``initial_path`` on [-tau, 0].  The drift and
diffusion may grow polynomially; the structural conditions that make the
drift-implicit scheme well posed (a one-sided monotonicity bound) or
exponentially mean-square stable (a dissipativity bound) are recorded as
``AssumptionConstants`` and can be audited on random samples by the
``check_*`` functions below.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .errors import NumericalError, ParameterError

Array = np.ndarray

_EPS = np.finfo(float).eps


@dataclass(frozen=True)
class AssumptionConstants:
    """Optional structural constants a model claims.

    Only the groups a model declares are validated; every field defaults
    to None.  Groups and their ordering constraints:

    * monotonicity: ``K > 0``, ``q > 2`` — bounds
      ``<x - xb, drift(x,y) - drift(xb,yb)> + (q-1)/2 * ||diffusion diff||^2``
      by ``K (|x - xb|^2 + |y - yb|^2)``.
    * polynomial growth: ``K1 > 0``, ``rho >= 1``, ``p_bar >= 4 rho - 2``.
    * initial-path regularity: ``K2 > 0`` — 1/2-Hoelder constant of the
      initial segment.
    * delay-contractive monotonicity: ``K3, K4 > 0``.
    * dissipativity: ``l > 1``, ``Gamma > 2``, ``c1 > c2 >= 0``,
      ``c3 > c4 >= 0`` — bounds
      ``<x, drift(x,y)> + l/2 * ||diffusion(x,y)||^2`` by
      ``-c1 |x|^2 + c2 |y|^2 - c3 |x|^Gamma + c4 |y|^Gamma``.
    """

    K: float | None = None
    q: float | None = None
    K1: float | None = None
    rho: float | None = None
    p_bar: float | None = None
    K2: float | None = None
    K3: float | None = None
    K4: float | None = None
    l: float | None = None
    Gamma: float | None = None
    c1: float | None = None
    c2: float | None = None
    c3: float | None = None
    c4: float | None = None

    def __post_init__(self):
        def positive(name):
            v = getattr(self, name)
            if v is not None and not v > 0:
                raise ParameterError(f"{name} must be > 0, got {v}")

        for name in ("K", "K1", "K2", "K3", "K4"):
            positive(name)
        if self.q is not None and not self.q > 2:
            raise ParameterError(f"q must be > 2, got {self.q}")
        if self.rho is not None and not self.rho >= 1:
            raise ParameterError(f"rho must be >= 1, got {self.rho}")
        if self.p_bar is not None and self.rho is not None \
                and not self.p_bar >= 4 * self.rho - 2:
            raise ParameterError(
                f"p_bar must be >= 4*rho - 2 = {4 * self.rho - 2}, got {self.p_bar}")
        if self.l is not None and not self.l > 1:
            raise ParameterError(f"l must be > 1, got {self.l}")
        if self.Gamma is not None and not self.Gamma > 2:
            raise ParameterError(f"Gamma must be > 2, got {self.Gamma}")
        for lo, hi in (("c2", "c1"), ("c4", "c3")):
            vlo, vhi = getattr(self, lo), getattr(self, hi)
            if vlo is not None and vlo < 0:
                raise ParameterError(f"{lo} must be >= 0, got {vlo}")
            if vlo is not None and vhi is not None and not vhi > vlo:
                raise ParameterError(f"need {hi} > {lo}, got {vhi} <= {vlo}")


@dataclass(frozen=True)
class SddeModel:
    """A stochastic delay differential equation.

    ``drift(x, y) -> (d,)`` and ``diffusion(x, y) -> (d, m)`` take the
    current state ``x`` and the delayed state ``y``; ``initial_path(theta)
    -> (d,)`` is defined for theta in [-delay, 0].  If ``vectorized`` is
    true the evaluators must also accept stacked inputs of shape
    ``(..., d)`` and return shapes ``(..., d)`` / ``(..., d, m)``.
    """

    dim_state: int
    dim_noise: int
    delay: float
    drift: Callable[[Array, Array], Array]
    diffusion: Callable[[Array, Array], Array]
    initial_path: Callable[[float], Array]
    constants: AssumptionConstants | None = None
    vectorized: bool = False
    name: str = ""

    def __post_init__(self):
        if self.dim_state < 1 or self.dim_noise < 1:
            raise ParameterError("dim_state and dim_noise must be >= 1")
        if not self.delay > 0:
            raise ParameterError(f"delay must be > 0, got {self.delay}")
        # cheap construction-time sanity pass; the full sampled audit is
        # validate_evaluations()
        x = np.zeros(self.dim_state)
        for theta in (-self.delay, -0.5 * self.delay, 0.0):
            v = np.asarray(self.initial_path(theta), dtype=float)
            if v.shape != (self.dim_state,) or not np.all(np.isfinite(v)):
                raise ParameterError(
                    f"initial_path({theta}) must be a finite vector of "
                    f"length {self.dim_state}, got {v!r}")
        a = np.asarray(self.drift(x, x), dtype=float)
        b = np.asarray(self.diffusion(x, x), dtype=float)
        if a.shape != (self.dim_state,):
            raise ParameterError(f"drift must return shape ({self.dim_state},)")
        if b.shape != (self.dim_state, self.dim_noise):
            raise ParameterError(
                f"diffusion must return shape ({self.dim_state}, {self.dim_noise})")


def eval_drift(model: SddeModel, x: Array, y: Array) -> Array:
    """Evaluate the drift on inputs of shape (..., d), looping over leading
    axes when the model is not vectorized."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if model.vectorized or x.ndim == 1:
        return np.asarray(model.drift(x, y), dtype=float)
    lead = x.shape[:-1]
    out = np.empty(lead + (model.dim_state,))
    for idx in np.ndindex(lead):
        out[idx] = model.drift(x[idx], y[idx])
    return out


def eval_diffusion(model: SddeModel, x: Array, y: Array) -> Array:
    """Evaluate the diffusion on inputs of shape (..., d) -> (..., d, m)."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if model.vectorized or x.ndim == 1:
        return np.asarray(model.diffusion(x, y), dtype=float)
    lead = x.shape[:-1]
    out = np.empty(lead + (model.dim_state, model.dim_noise))
    for idx in np.ndindex(lead):
        out[idx] = model.diffusion(x[idx], y[idx])
    return out


def validate_evaluations(model: SddeModel, n_samples: int = 64,
                         radius: float = 2.0, seed: int = 0) -> None:
    """Audit finiteness of the evaluators on random states and of the
    initial path on a sweep of [-tau, 0]; raises NumericalError on failure."""
    rng = np.random.default_rng(seed)
    d = model.dim_state
    xs = rng.uniform(-radius, radius, size=(n_samples, d))
    ys = rng.uniform(-radius, radius, size=(n_samples, d))
    a = eval_drift(model, xs, ys)
    b = eval_diffusion(model, xs, ys)
    if not np.all(np.isfinite(a)):
        raise NumericalError("drift returned non-finite values on finite samples")
    if not np.all(np.isfinite(b)):
        raise NumericalError("diffusion returned non-finite values on finite samples")
    for theta in np.linspace(-model.delay, 0.0, 65):
        v = np.asarray(model.initial_path(float(theta)), dtype=float)
        if not np.all(np.isfinite(v)):
            raise NumericalError(f"initial_path({theta}) is non-finite")


# ---------------------------------------------------------------------------
# built-in models


def _ex1_drift(x, y):
    return x - 4.0 * x ** 3 + y


def _ex1_diffusion(x, y):
    return (x ** 2 - y + 2.0)[..., np.newaxis]


def _ex1_initial(theta):
    return np.atleast_1d(np.sqrt(np.abs(theta)) + 1.0)


def _ex2_drift(x, y):
    return -2.0 * x - 4.0 * x ** 3 + y


def _ex2_diffusion(x, y):
    return (x ** 2 + 0.5 * y)[..., np.newaxis]


def _ex2_initial(theta):
    return np.atleast_1d(np.sqrt(np.abs(theta)) + 3.0)


def make_example1() -> SddeModel:
    """Scalar cubic-drift model with additive-plus-quadratic noise.

    drift(x, y) = x - 4 x^3 + y, diffusion(x, y) = x^2 - y + 2,
    initial path |theta|^(1/2) + 1, delay 1.  Satisfies the monotonicity
    bound with K = 5/2, q = 3.
    """
    return SddeModel(
        dim_state=1, dim_noise=1, delay=1.0,
        drift=_ex1_drift, diffusion=_ex1_diffusion, initial_path=_ex1_initial,
        constants=AssumptionConstants(K=2.5, q=3.0),
        vectorized=True, name="example1")


def make_example2() -> SddeModel:
    """Scalar dissipative model whose second moment decays exponentially.

    drift(x, y) = -2x - 4 x^3 + y, diffusion(x, y) = x^2 + y/2, initial
    path |theta|^(1/2) + 3, delay 1.  Satisfies the dissipativity bound
    with l = 2, Gamma = 4 and (c1, c2, c3, c4) = (3/2, 1, 2, 0), obtained
    by adding <x, drift> <= -(3/2)|x|^2 - 4|x|^4 + (1/2)|y|^2 to
    (l/2)|diffusion|^2 <= 2|x|^4 + (1/2)|y|^2 and matching terms.  The
    same expansion with differences gives the monotonicity bound with
    K = 1, q = 3.
    """
    return SddeModel(
        dim_state=1, dim_noise=1, delay=1.0,
        drift=_ex2_drift, diffusion=_ex2_diffusion, initial_path=_ex2_initial,
        constants=AssumptionConstants(K=1.0, q=3.0, l=2.0, Gamma=4.0,
                                      c1=1.5, c2=1.0, c3=2.0, c4=0.0),
        vectorized=True, name="example2")


BUILTIN_MODELS = {"example1": make_example1, "example2": make_example2}


def get_model(name: str) -> SddeModel:
    try:
        return BUILTIN_MODELS[name]()
    except KeyError:
        raise ParameterError(
            f"unknown model {name!r}; available: {sorted(BUILTIN_MODELS)}") from None


# ---------------------------------------------------------------------------
# sampled structural checks


@dataclass(frozen=True)
class SampleSpec:
    """How a checker samples states: ``count`` uniform draws from the
    hypercube [-radius, radius]^d, seeded for reproducibility.  Tuples in
    ``include`` are evaluated first, before any random draw."""

    count: int = 100_000
    radius: float = 2.0
    seed: int = 0
    include: tuple = ()


@dataclass(frozen=True)
class ViolationReport:
    """Outcome of a sampled inequality check.

    ``max_excess`` is the largest value of LHS - RHS over all samples (a
    negative value is the observed margin); ``worst_point`` is the sample
    attaining it, flattened to a tuple of floats.
    """

    check: str
    samples: int
    violations: int
    max_excess: float
    worst_point: tuple

    @property
    def passed(self) -> bool:
        return self.violations == 0

    def csv_row(self) -> list:
        return [self.check, self.samples, self.violations,
                repr(self.max_excess),
                ";".join(repr(float(v)) for v in self.worst_point)]


CSV_HEADER = ["check", "samples", "violations", "max_excess", "worst_point"]


def reports_to_csv(reports: Sequence[ViolationReport], fileobj,
                   manifest_hash: str | None = None) -> None:
    if manifest_hash:
        fileobj.write(f"# manifest={manifest_hash}\n")
    writer = csv.writer(fileobj, lineterminator="\n")
    writer.writerow(CSV_HEADER)
    for rep in reports:
        writer.writerow(rep.csv_row())


def _stack_samples(model: SddeModel, sampler: SampleSpec, n_blocks: int):
    """Draw (count, n_blocks, d) uniform samples, with ``include`` tuples
    (each a tuple of n_blocks points) prepended in order."""
    d = model.dim_state
    rng = np.random.default_rng(sampler.seed)
    blocks = rng.uniform(-sampler.radius, sampler.radius,
                         size=(sampler.count, n_blocks, d))
    if sampler.include:
        extra = np.empty((len(sampler.include), n_blocks, d))
        for i, point in enumerate(sampler.include):
            if len(point) != n_blocks:
                raise ParameterError(
                    f"include point {i} must have {n_blocks} components")
            for j, comp in enumerate(point):
                extra[i, j] = np.atleast_1d(np.asarray(comp, dtype=float))
        blocks = np.concatenate([extra, blocks], axis=0)
    return blocks


def _report(check: str, excess: Array, points: Array) -> ViolationReport:
    worst = int(np.argmax(excess))
    return ViolationReport(
        check=check,
        samples=len(excess),
        violations=int(np.count_nonzero(excess > 0.0)),
        max_excess=float(excess[worst]),
        worst_point=tuple(points[worst].ravel().tolist()),
    )


def check_monotone_condition(model: SddeModel, K: float, q: float,
                             sampler: SampleSpec = SampleSpec()) -> ViolationReport:
    """Sample the one-sided monotonicity bound that makes the implicit
    drift step uniquely solvable.

    At tuples (x, y, xb, yb) drawn from the sampler, evaluates

        <x - xb, drift(x, y) - drift(xb, yb)>
          + (q - 1)/2 * ||diffusion(x, y) - diffusion(xb, yb)||_F^2
          - K (|x - xb|^2 + |y - yb|^2)

    and reports how often the result is positive.  Degenerate tuples with
    x = xb, y = yb evaluate to exactly zero and never count as violations.
    """
    if not q > 2:
        raise ParameterError(f"q must be > 2, got {q}")
    if not K > 0:
        raise ParameterError(f"K must be > 0, got {K}")
    pts = _stack_samples(model, sampler, 4)  # (n, 4, d): x, y, xb, yb
    x, y, xb, yb = pts[:, 0], pts[:, 1], pts[:, 2], pts[:, 3]
    da = eval_drift(model, x, y) - eval_drift(model, xb, yb)
    db = eval_diffusion(model, x, y) - eval_diffusion(model, xb, yb)
    lhs = np.einsum("nd,nd->n", x - xb, da) \
        + 0.5 * (q - 1.0) * np.einsum("ndm,ndm->n", db, db)
    rhs = K * (np.einsum("nd,nd->n", x - xb, x - xb)
               + np.einsum("nd,nd->n", y - yb, y - yb))
    return _report("monotone_condition", lhs - rhs, pts)


def check_dissipativity_condition(model: SddeModel, l: float, Gamma: float,
                                  c1: float, c2: float, c3: float, c4: float,
                                  sampler: SampleSpec = SampleSpec()) -> ViolationReport:
    """Sample the dissipativity bound behind exponential mean-square decay.

    At pairs (x, y) drawn from the sampler, evaluates

        <x, drift(x, y)> + l/2 * ||diffusion(x, y)||_F^2
          - (-c1 |x|^2 + c2 |y|^2 - c3 |x|^Gamma + c4 |y|^Gamma)

    and reports how often the result is positive.
    """
    if not l > 1:
        raise ParameterError(f"l must be > 1, got {l}")
    if not Gamma > 2:
        raise ParameterError(f"Gamma must be > 2, got {Gamma}")
    if not (c1 > c2 >= 0):
        raise ParameterError(f"need c1 > c2 >= 0, got c1={c1}, c2={c2}")
    if not (c3 > c4 >= 0):
        raise ParameterError(f"need c3 > c4 >= 0, got c3={c3}, c4={c4}")
    pts = _stack_samples(model, sampler, 2)  # (n, 2, d): x, y
    x, y = pts[:, 0], pts[:, 1]
    a = eval_drift(model, x, y)
    b = eval_diffusion(model, x, y)
    nx2 = np.einsum("nd,nd->n", x, x)
    ny2 = np.einsum("nd,nd->n", y, y)
    lhs = np.einsum("nd,nd->n", x, a) + 0.5 * l * np.einsum("ndm,ndm->n", b, b)
    rhs = -c1 * nx2 + c2 * ny2 \
        - c3 * nx2 ** (0.5 * Gamma) + c4 * ny2 ** (0.5 * Gamma)
    return _report("dissipativity_condition", lhs - rhs, pts)


def check_initial_holder(model: SddeModel, K2: float,
                         n_pairs: int = 100_000, seed: int = 0) -> ViolationReport:
    """Sample the 1/2-Hoelder bound |phi(t2) - phi(t1)| <= K2 |t2 - t1|^(1/2)
    on the initial path over -tau <= t1 < t2 <= 0.

    Three endpoint-adjacent pairs (the full interval and slivers hugging
    each endpoint) are always evaluated in addition to the random draws.
    A roundoff slack of 32 eps (1 + |phi(t1)| + |phi(t2)|) keeps pairs
    where the bound is exactly tight from registering as violations.
    """
    if not K2 > 0:
        raise ParameterError(f"K2 must be > 0, got {K2}")
    if n_pairs < 1:
        raise ParameterError("n_pairs must be >= 1")
    tau = model.delay
    rng = np.random.default_rng(seed)
    draws = rng.uniform(-tau, 0.0, size=(n_pairs, 2))
    lo = draws.min(axis=1)
    hi = draws.max(axis=1)
    sliver = tau * 2.0 ** -20
    t1 = np.concatenate([[-tau, -tau, -sliver], lo])
    t2 = np.concatenate([[0.0, -tau + sliver, 0.0], hi])
    keep = t2 > t1
    t1, t2 = t1[keep], t2[keep]
    phi1 = np.stack([np.asarray(model.initial_path(float(t)), dtype=float)
                     for t in t1])
    phi2 = np.stack([np.asarray(model.initial_path(float(t)), dtype=float)
                     for t in t2])
    diff = np.sqrt(np.einsum("nd,nd->n", phi2 - phi1, phi2 - phi1))
    bound = K2 * np.sqrt(t2 - t1)
    slack = 32.0 * _EPS * (1.0 + np.abs(phi1).sum(axis=1) + np.abs(phi2).sum(axis=1))
    excess = diff - bound
    pts = np.stack([t1, t2], axis=1)
    worst = int(np.argmax(excess))
    return ViolationReport(
        check="initial_holder",
        samples=len(excess),
        violations=int(np.count_nonzero(excess > slack)),
        max_excess=float(excess[worst]),
        worst_point=(float(t1[worst]), float(t2[worst])),
    )
