"""Forward rendering of empty, light, and shadow transients.

A transient cube holds one expected (or sampled) photon count per
(detector u, detector v, time bin).  The linear memory contract used by
the file format and the measurement operator is detector-major within a
time slice: flat index ``u + n_u*v + n_u*n_v*t`` (Fortran ravel of the
(n_u, n_v, n_t) array).
"""

from __future__ import annotations

import struct
import warnings
from dataclasses import dataclass, replace

import numpy as np

from .scene import RayTable, SceneConfig, TimeAxis, VoxelGrid, ray_voxels, trace_rays

CUBE_MAGIC = b"2BTR"
CUBE_KINDS = ("empty", "light", "shadow")

__all__ = [
    "TransientCube",
    "MultiplexPattern",
    "OccupancyVolume",
    "empty_transient",
    "visibility",
    "light_transient",
    "shadow_transient",
    "multiplex",
    "poisson_sample",
    "intensity_projection",
    "clamp_nonnegative",
    "temporal_blur",
    "identity_pattern",
    "block_pattern",
    "strided_pattern",
    "random_pattern",
    "empty_occupancy",
    "write_cube",
    "read_cube",
]


@dataclass
class TransientCube:
    """Space-time measurement block of shape (n_u, n_v, n_t)."""

    values: np.ndarray
    kind: str

    def __post_init__(self):
        self.values = np.asarray(self.values)
        if self.values.ndim != 3:
            raise ValueError("transient cube must be 3-dimensional (n_u, n_v, n_t)")
        if self.kind not in CUBE_KINDS:
            raise ValueError(f"unknown cube kind {self.kind!r}")

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.values.shape

    def flat(self) -> np.ndarray:
        """Values in the documented linear layout (u fastest, then v, then t)."""
        return self.values.reshape(-1, order="F")

    def total(self) -> float:
        return float(self.values.sum())


@dataclass(frozen=True)
class MultiplexPattern:
    """Binary M x K matrix assigning the K virtual sources to M captures."""

    matrix: np.ndarray

    def __post_init__(self):
        m = np.asarray(self.matrix)
        if m.ndim != 2:
            raise ValueError("pattern matrix must be 2-dimensional")
        if not np.isin(m, (0, 1)).all():
            raise ValueError("pattern matrix must be binary")
        m = m.astype(np.uint8)
        m.flags.writeable = False
        object.__setattr__(self, "matrix", m)
        if m.shape[0] > m.shape[1]:
            raise ValueError("more captures than sources (M must be <= K)")
        if not m.any(axis=0).all():
            raise ValueError("every source must appear in at least one capture")

    @property
    def n_captures(self) -> int:
        return self.matrix.shape[0]

    @property
    def n_sources(self) -> int:
        return self.matrix.shape[1]


def identity_pattern(k: int) -> MultiplexPattern:
    """One capture per source (no multiplexing)."""
    return MultiplexPattern(np.eye(k, dtype=np.uint8))


def block_pattern(k: int, m: int) -> MultiplexPattern:
    """Contiguous groups of sources per capture; group sizes differ by at most one."""
    edges = np.linspace(0, k, m + 1).round().astype(int)
    mat = np.zeros((m, k), dtype=np.uint8)
    for row in range(m):
        mat[row, edges[row]:edges[row + 1]] = 1
    return MultiplexPattern(mat)


def strided_pattern(k: int, m: int) -> MultiplexPattern:
    """Capture row holds every m-th source starting at its row index."""
    mat = np.zeros((m, k), dtype=np.uint8)
    mat[np.arange(k) % m, np.arange(k)] = 1
    return MultiplexPattern(mat)


def random_pattern(k: int, m: int, seed: int) -> MultiplexPattern:
    """Seeded random partition of the sources into M captures (all sources covered)."""
    rng = np.random.default_rng(seed)
    order = rng.permutation(k)
    mat = np.zeros((m, k), dtype=np.uint8)
    for row, chunk in enumerate(np.array_split(order, m)):
        mat[row, chunk] = 1
    return MultiplexPattern(mat)


@dataclass
class OccupancyVolume:
    """Per-voxel field over a grid: binary ground truth or real reconstruction values."""

    grid: VoxelGrid
    values: np.ndarray
    binary: bool = False

    def __post_init__(self):
        self.values = np.asarray(self.values)
        if self.values.shape != self.grid.dims:
            raise ValueError(
                f"values shape {self.values.shape} does not match grid dims {self.grid.dims}"
            )
        if self.binary and not np.isin(self.values, (0, 1)).all():
            raise ValueError("binary occupancy must contain only 0/1 values")

    def flat(self) -> np.ndarray:
        """Values in linear-index order (x fastest, then y, then z)."""
        return self.values.reshape(-1, order="F")

    @classmethod
    def from_flat(cls, grid: VoxelGrid, flat: np.ndarray, binary: bool = False):
        return cls(grid=grid, values=np.reshape(flat, grid.dims, order="F"), binary=binary)


def empty_occupancy(grid: VoxelGrid, binary: bool = True) -> OccupancyVolume:
    dtype = np.uint8 if binary else np.float64
    return OccupancyVolume(grid=grid, values=np.zeros(grid.dims, dtype=dtype), binary=binary)


def _cube_from_det_major(arr: np.ndarray, scene: SceneConfig, kind: str) -> TransientCube:
    n_u, n_v = scene.detector_shape
    return TransientCube(values=arr.reshape((n_u, n_v, -1), order="F"), kind=kind)


def _pattern_row_mask(pattern_row, k: int) -> np.ndarray:
    row = np.asarray(pattern_row)
    if row.shape != (k,):
        raise ValueError(f"pattern row must have length {k}")
    if not np.isin(row, (0, 1)).all():
        raise ValueError("pattern row must be binary")
    return row.astype(bool)


def _accumulate(scene: SceneConfig, rays: RayTable, sel: np.ndarray, kind: str) -> TransientCube:
    n_det = rays.n_detectors
    n_t = scene.time.n_bins
    weights = np.full(rays.n_rays, scene.laser_intensity)
    if scene.include_falloff:
        weights *= rays.falloff_weights()
    rows = rays.det_of_ray[sel] + n_det * rays.bins[sel]
    flat = np.bincount(rows, weights=weights[sel], minlength=n_det * n_t)
    return _cube_from_det_major(flat.reshape((n_det, n_t), order="F"), scene, kind)


def empty_transient(
    scene: SceneConfig, pattern_row, rays: RayTable | None = None
) -> TransientCube:
    """Expected transient with nothing hidden: one impulse per active (source, detector) pair.

    Each in-axis pair contributes laser_intensity (divided by the squared
    source-detector distance when falloff is on) to its arrival bin;
    arrivals outside the time axis are dropped.
    """
    if rays is None:
        rays = trace_rays(scene, trace_voxels=False)
    active = _pattern_row_mask(pattern_row, rays.n_sources)
    sel = active[rays.src_of_ray]
    in_axis = rays.bins >= 0
    if sel.any() and not (sel & in_axis).any():
        warnings.warn("time axis holds no two-bounce events for this capture", stacklevel=2)
    return _accumulate(scene, rays, sel & in_axis, "empty")


def visibility(occ: OccupancyVolume, l, s) -> int:
    """Exact indicator: 0 iff any occupied voxel lies on the open segment l-s."""
    if not occ.binary:
        raise ValueError("visibility requires a binary occupancy volume")
    vox = ray_voxels(occ.grid, l, s)
    if vox.size and occ.flat()[vox].any():
        return 0
    return 1


def light_transient(
    scene: SceneConfig, occ: OccupancyVolume, pattern_row, rays: RayTable | None = None
) -> TransientCube:
    """Expected transient with the hidden occupancy present (exact visibility)."""
    if not occ.binary:
        raise ValueError("light_transient requires a binary occupancy volume")
    if occ.grid != scene.grid:
        raise ValueError("occupancy grid does not match the scene grid")
    if rays is None:
        rays = trace_rays(scene)
    active = _pattern_row_mask(pattern_row, rays.n_sources)
    sel = active[rays.src_of_ray]
    in_axis = rays.bins >= 0
    if sel.any() and not (sel & in_axis).any():
        warnings.warn("time axis holds no two-bounce events for this capture", stacklevel=2)
    visible = ~rays.blocked_mask(occ.flat())
    return _accumulate(scene, rays, sel & in_axis & visible, "light")


def shadow_transient(empty: TransientCube, light: TransientCube) -> TransientCube:
    """Photon deficit empty - light; negative bins are possible for noisy inputs."""
    if empty.dims != light.dims:
        raise ValueError("empty and light cube dimensions differ")
    values = empty.values.astype(np.float64) - light.values.astype(np.float64)
    return TransientCube(values=values, kind="shadow")


def multiplex(per_source_cubes: list[TransientCube], pattern: MultiplexPattern) -> list[TransientCube]:
    """Sum per-source cubes into one cube per capture according to the pattern."""
    if len(per_source_cubes) != pattern.n_sources:
        raise ValueError(
            f"expected {pattern.n_sources} per-source cubes, got {len(per_source_cubes)}"
        )
    dims = per_source_cubes[0].dims
    kind = per_source_cubes[0].kind
    for cube in per_source_cubes:
        if cube.dims != dims:
            raise ValueError("per-source cube dimensions differ")
    out = []
    for row in pattern.matrix:
        acc = np.zeros(dims, dtype=np.float64)
        for k in np.flatnonzero(row):
            acc += per_source_cubes[k].values
        out.append(TransientCube(values=acc, kind=kind))
    return out


def poisson_sample(cube: TransientCube, seed: int) -> TransientCube:
    """Independent Poisson draw per bin with the cube's values as rates.

    Uses a counter-based (Philox) generator over the canonical linear
    layout, so the result depends only on (values, seed), never on
    evaluation order.
    """
    rates = cube.flat()
    if (rates < 0).any():
        raise ValueError("negative rates: clamp shadow cubes before sampling")
    rng = np.random.Generator(np.random.Philox(key=int(seed)))
    counts = rng.poisson(rates).astype(np.uint32)
    return TransientCube(
        values=counts.reshape(cube.dims, order="F"), kind=cube.kind
    )


def intensity_projection(cube: TransientCube) -> np.ndarray:
    """Time-integrated (steady-state) image, shape (n_u, n_v)."""
    return cube.values.sum(axis=2)


def clamp_nonnegative(cube: TransientCube) -> TransientCube:
    """Zero out negative bins (noisy shadow cubes before reconstruction)."""
    return replace(cube, values=np.maximum(cube.values, 0.0))


def temporal_blur(cube: TransientCube, fwhm_s: float, time: TimeAxis) -> TransientCube:
    """Optional Gaussian blur of expected rates along the time axis.

    Stands in for detector timing jitter; off by default everywhere.  Mass
    within ~4 sigma of the axis edges leaks out (constant-zero padding).
    """
    if fwhm_s <= 0:
        return cube
    from scipy.ndimage import gaussian_filter1d

    sigma_bins = fwhm_s / (2.0 * np.sqrt(2.0 * np.log(2.0))) / time.bin_width
    blurred = gaussian_filter1d(cube.values.astype(np.float64), sigma_bins, axis=2, mode="constant")
    return replace(cube, values=blurred)


# -- cube file format ---------------------------------------------------------
#
# magic "2BTR" | u32le n_u, n_v, n_t | u8 kind (0 empty, 1 light, 2 shadow)
# | u8 value type (0 float32, 1 uint32) | payload in linear layout.

def write_cube(path, cube: TransientCube) -> None:
    n_u, n_v, n_t = cube.dims
    integer = np.issubdtype(cube.values.dtype, np.integer)
    payload = cube.flat().astype(np.uint32 if integer else np.float32)
    with open(path, "wb") as fh:
        fh.write(CUBE_MAGIC)
        fh.write(struct.pack("<III", n_u, n_v, n_t))
        fh.write(struct.pack("<BB", CUBE_KINDS.index(cube.kind), 1 if integer else 0))
        fh.write(payload.astype("<u4" if integer else "<f4").tobytes())


def read_cube(path) -> TransientCube:
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != CUBE_MAGIC:
            raise ValueError(f"not a transient cube file (magic {magic!r})")
        n_u, n_v, n_t = struct.unpack("<III", fh.read(12))
        kind_tag, value_tag = struct.unpack("<BB", fh.read(2))
        if kind_tag >= len(CUBE_KINDS):
            raise ValueError(f"unknown cube kind tag {kind_tag}")
        if value_tag not in (0, 1):
            raise ValueError(f"unknown value type tag {value_tag}")
        dtype = "<f4" if value_tag == 0 else "<u4"
        flat = np.frombuffer(fh.read(), dtype=dtype)
    if flat.size != n_u * n_v * n_t:
        raise ValueError("cube payload size does not match header dimensions")
    values = flat.astype(np.float64 if value_tag == 0 else np.uint32)
    return TransientCube(
        values=values.reshape((n_u, n_v, n_t), order="F"), kind=CUBE_KINDS[kind_tag]
    )
