"""Seedable Brownian increments on a fine grid with exact coarsening.

Every driving path lives on one finest grid; coarse-step integrations are
driven by block sums of the same fine increments, so runs at different
step sizes see the same Brownian motion realization.  A coarsened path
keeps a reference to the finest-level increments and rematerializes its
block sums from them, which makes coarsening by ``a`` then ``b`` yield
bit-identical entries to coarsening once by ``a * b``.

Reproducibility contract: stream (base_seed, path_index) keys a Philox
counter-based generator directly (``key = [base_seed mod 2^64,
path_index]``); normals come from numpy's ziggurat via
``Generator.standard_normal`` and are scaled by sqrt(dt_fine).  Streams
with distinct keys are independent by construction and results are
deterministic for a fixed numpy version.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .errors import GridError, ParameterError

Array = np.ndarray


@dataclass(frozen=True)
class BrownianPath:
    """Increments of one Brownian path at some dyadic view of the finest grid.

    ``increments`` has shape (n_fine // factor, m) with entries summed from
    ``fine_increments`` in ascending index order; ``factor == 1`` for a
    freshly sampled path, where ``increments is fine_increments``.
    """

    base_seed: int
    path_index: int
    n_fine: int
    dt_fine: float
    m: int
    increments: Array
    factor: int = 1
    fine_increments: Array = None

    def __post_init__(self):
        if self.fine_increments is None:
            object.__setattr__(self, "fine_increments", self.increments)

    @property
    def n_steps(self) -> int:
        return self.n_fine // self.factor

    @property
    def dt(self) -> float:
        return self.dt_fine * self.factor


def sample_increments(base_seed: int, path_index: int, n_fine: int, m: int,
                      dt_fine: float) -> BrownianPath:
    """Draw the (n_fine, m) matrix of Normal(0, dt_fine) increments for
    stream (base_seed, path_index)."""
    if n_fine < 1:
        raise ParameterError(f"n_fine must be >= 1, got {n_fine}")
    if m < 1:
        raise ParameterError(f"m must be >= 1, got {m}")
    if not dt_fine > 0:
        raise ParameterError(f"dt_fine must be > 0, got {dt_fine}")
    if path_index < 0:
        raise ParameterError(f"path_index must be >= 0, got {path_index}")
    key = np.array([np.uint64(base_seed % 2 ** 64), np.uint64(path_index)])
    rng = np.random.Generator(np.random.Philox(key=key))
    increments = rng.standard_normal((n_fine, m)) * np.sqrt(dt_fine)
    return BrownianPath(base_seed=base_seed, path_index=path_index,
                        n_fine=n_fine, dt_fine=dt_fine, m=m,
                        increments=increments)


def block_sums(values: Array, factor: int) -> Array:
    """Sum consecutive groups of ``factor`` rows, each group accumulated in
    ascending index order (row j of the output is
    ``(((v[j*f] + v[j*f+1]) + v[j*f+2]) + ...)``)."""
    n = values.shape[0]
    if factor < 1:
        raise GridError(f"coarsening factor must be >= 1, got {factor}")
    if n % factor:
        raise GridError(f"factor {factor} does not divide {n} steps")
    if factor == 1:
        return values
    out = values[0::factor].copy()
    for i in range(1, factor):
        out += values[i::factor]
    return out


def coarsen(path: BrownianPath, factor: int) -> BrownianPath:
    """View ``path`` on a grid ``factor`` times coarser.

    The result rematerializes its increments from the finest-level matrix
    with the combined factor, so repeated coarsening composes exactly:
    ``coarsen(coarsen(p, a), b).increments == coarsen(p, a*b).increments``
    entry for entry.
    """
    if factor < 1:
        raise GridError(f"coarsening factor must be >= 1, got {factor}")
    if path.n_steps % factor:
        raise GridError(
            f"factor {factor} does not divide {path.n_steps} steps")
    if factor == 1:
        return path
    combined = path.factor * factor
    mat = block_sums(path.fine_increments, combined)
    return BrownianPath(base_seed=path.base_seed, path_index=path.path_index,
                        n_fine=path.n_fine, dt_fine=path.dt_fine, m=path.m,
                        increments=mat, factor=combined,
                        fine_increments=path.fine_increments)


def increments_to_csv(path: BrownianPath, fileobj,
                      manifest_hash: str | None = None) -> None:
    """Debug dump, one row per (step, component, value)."""
    if manifest_hash:
        fileobj.write(f"# manifest={manifest_hash}\n")
    writer = csv.writer(fileobj, lineterminator="\n")
    writer.writerow(["step", "component", "value"])
    for i in range(path.increments.shape[0]):
        for j in range(path.m):
            writer.writerow([i, j, repr(float(path.increments[i, j]))])
