"""Reproducible Brownian increment grids with exact block coarsening.

Increments are produced by a counter-addressable generator: the uniform
variate behind (seed, path_index, step, component) is a fixed function of
those four integers, independent of how much of the stream is generated or
in what order. Coarse grids are exact block sums of the fine increments, so
a coarse simulation and its fine reference are driven by the same Brownian
path.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from numpy.random import Philox
from scipy.special import ndtri

_RAW_PER_COUNTER = 4  # Philox4x64 emits four 64-bit words per counter tick
_U64_MASK = (1 << 64) - 1


class MeshError(ValueError):
    """Invalid mesh geometry (delay/step/horizon mismatch)."""


class CoarsenError(ValueError):
    """Coarsening factor incompatible with the grid."""


@dataclass(frozen=True)
class MeshSpec:
    """Uniform time mesh with the delay an exact whole number of steps.

    The step is computed once as delay/steps_per_delay and stored; all other
    quantities derive from it. The horizon must be a whole number of steps.
    """

    delay: float
    steps_per_delay: int
    horizon: float
    dt: float = field(init=False)
    total_steps: int = field(init=False)

    def __post_init__(self) -> None:
        if self.delay <= 0:
            raise MeshError(f"delay must be positive, got {self.delay}")
        if self.steps_per_delay < 1 or int(self.steps_per_delay) != self.steps_per_delay:
            raise MeshError(f"steps_per_delay must be a positive integer, got {self.steps_per_delay}")
        if self.horizon <= 0:
            raise MeshError(f"horizon must be positive, got {self.horizon}")
        dt = self.delay / self.steps_per_delay
        n = round(self.horizon / dt)
        if n < 1 or abs(n * dt - self.horizon) > 1e-12 * max(1.0, self.horizon):
            raise MeshError(
                f"horizon {self.horizon} is not a whole number of steps of size {dt}"
            )
        object.__setattr__(self, "dt", dt)
        object.__setattr__(self, "total_steps", int(n))

    def coarsened(self, factor: int) -> "MeshSpec":
        """Mesh with `factor` fewer steps; factor must divide both step counts."""
        if factor < 1 or self.steps_per_delay % factor or self.total_steps % factor:
            raise MeshError(
                f"factor {factor} does not divide steps_per_delay={self.steps_per_delay} "
                f"and total_steps={self.total_steps}"
            )
        return MeshSpec(self.delay, self.steps_per_delay // factor, self.horizon)


def _philox_key(seed: int, path_index: int) -> int:
    if not 0 <= seed <= _U64_MASK:
        raise ValueError(f"seed must fit in 64 unsigned bits, got {seed}")
    if not 0 <= path_index <= _U64_MASK:
        raise ValueError(f"path_index must fit in 64 unsigned bits, got {path_index}")
    return (seed << 64) | path_index


def _raw_block(key: int, start: int, count: int) -> np.ndarray:
    """Words [start, start+count) of the raw 64-bit stream for this key."""
    counter, offset = divmod(start, _RAW_PER_COUNTER)
    bitgen = Philox(key=key, counter=counter)
    return bitgen.random_raw(offset + count)[offset:]


def _normals_from_raw(raw: np.ndarray) -> np.ndarray:
    # bin-centre uniforms in (0,1), then inverse CDF; no rejection state, so
    # the normal at stream position i depends on position i alone
    u = ((raw >> np.uint64(11)).astype(np.float64) + 0.5) * 2.0**-53
    return ndtri(u)


@dataclass
class BrownianGrid:
    """Brownian increments of one path on a mesh; immutable after construction.

    `root_increments`/`factor_from_root` tie a coarsened grid back to the fine
    grid it came from, so repeated coarsening always block-sums the original
    fine increments in one fixed ascending pass (nested coarsening is then
    bit-for-bit associative).
    """

    seed: int
    path_index: int
    mesh: MeshSpec
    dim_w: int
    increments: np.ndarray
    root_increments: np.ndarray | None = None
    factor_from_root: int = 1
    _values: np.ndarray | None = field(default=None, repr=False, compare=False)

    def values(self) -> np.ndarray:
        """Brownian values B at all mesh nodes, shape (total_steps+1, dim_w); B(0)=0."""
        if self._values is None:
            out = np.zeros((self.mesh.total_steps + 1, self.dim_w))
            np.cumsum(self.increments, axis=0, out=out[1:])
            self._values = out
        return self._values

    def value_at(self, index: int) -> np.ndarray:
        """B at node `index` (0 <= index <= total_steps)."""
        if not 0 <= index <= self.mesh.total_steps:
            raise IndexError(f"node index {index} outside [0, {self.mesh.total_steps}]")
        return self.values()[index]


def generate(seed: int, path_index: int, mesh: MeshSpec, dim_w: int) -> BrownianGrid:
    """Fill a grid with Normal(0, dt) increments from the counter stream.

    Stream word (step*dim_w + component) backs the increment of that step and
    component, so regeneration is bit-identical and distinct (seed, path)
    pairs use disjoint keys.
    """
    if dim_w < 1:
        raise ValueError(f"dim_w must be >= 1, got {dim_w}")
    inc = generate_block(seed, path_index, mesh, dim_w, 0, mesh.total_steps)
    return BrownianGrid(seed, path_index, mesh, dim_w, inc)


def generate_block(
    seed: int,
    path_index: int,
    mesh: MeshSpec,
    dim_w: int,
    start_step: int,
    n_steps: int,
) -> np.ndarray:
    """Increments for steps [start_step, start_step+n_steps), shape (n_steps, dim_w).

    Identical to the corresponding slice of `generate(...).increments`; usable
    for block-parallel or memory-constrained generation.
    """
    if not 0 <= start_step <= start_step + n_steps <= mesh.total_steps:
        raise ValueError(
            f"block [{start_step}, {start_step + n_steps}) outside mesh with "
            f"{mesh.total_steps} steps"
        )
    key = _philox_key(seed, path_index)
    raw = _raw_block(key, start_step * dim_w, n_steps * dim_w)
    z = _normals_from_raw(raw).reshape(n_steps, dim_w)
    return z * math.sqrt(mesh.dt)


def coarsen(grid: BrownianGrid, factor: int) -> BrownianGrid:
    """Grid whose increment j is the sum of `factor` consecutive increments.

    Blocks are summed in ascending index order over the *root* fine
    increments, so coarsen(coarsen(g, a), b) == coarsen(g, a*b) bit-for-bit.
    """
    if factor < 1 or int(factor) != factor:
        raise CoarsenError(f"factor must be a positive integer, got {factor}")
    if factor == 1:
        return grid
    root = grid.root_increments if grid.root_increments is not None else grid.increments
    total = grid.factor_from_root * factor
    n_root = root.shape[0]
    root_spd = grid.mesh.steps_per_delay * grid.factor_from_root
    if n_root % total or root_spd % total:
        raise CoarsenError(
            f"cumulative factor {total} does not divide the root grid "
            f"(steps={n_root}, steps_per_delay={root_spd})"
        )
    out = root[0::total].copy()
    for i in range(1, total):
        out += root[i::total]
    mesh = MeshSpec(grid.mesh.delay, root_spd // total, grid.mesh.horizon)
    return BrownianGrid(
        grid.seed,
        grid.path_index,
        mesh,
        grid.dim_w,
        out,
        root_increments=root,
        factor_from_root=total,
    )


def brownian_value_at(grid: BrownianGrid, fine_index: int) -> np.ndarray:
    """B at mesh node `fine_index`; prefix sums are computed once and cached."""
    return grid.value_at(fine_index)
