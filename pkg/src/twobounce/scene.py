"""Scene geometry: relay walls, the hidden voxel grid, the time axis, and ray primitives.

Coordinate conventions used by the built-in scene builder: the imaging
apparatus (laser + camera) sits near the origin, z runs down the corridor,
y is up, and the two relay walls flank the hidden volume in x.  Planar
(top-down) analysis scenes are ordinary 3D scenes whose grid and walls are
one voxel thick in y, so there is a single code path for 2D and 3D.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

SPEED_OF_LIGHT = 299_792_458.0  # m/s

__all__ = [
    "SPEED_OF_LIGHT",
    "RelayWall",
    "VoxelGrid",
    "TimeAxis",
    "SceneConfig",
    "RayTable",
    "wall_sample_points",
    "ray_voxels",
    "ray_wall_intersection",
    "path_bin",
    "trace_rays",
    "fit_time_axis",
    "two_wall_scene",
]


def _vec3(x) -> np.ndarray:
    v = np.asarray(x, dtype=np.float64)
    if v.shape != (3,):
        raise ValueError(f"expected a 3-vector, got shape {v.shape}")
    v = v.copy()
    v.flags.writeable = False
    return v


def _array_equal(a, b) -> bool:
    return np.array_equal(np.asarray(a), np.asarray(b))


@dataclass(frozen=True, eq=False)
class RelayWall:
    """Planar parallelogram patch sampled on a regular grid of cell centers.

    ``origin + a*edge_u + b*edge_v`` for a, b in [0, 1] spans the patch.
    ``grid_u`` x ``grid_v`` sample points act as virtual sources (on the
    illumination wall) or virtual detectors (on the observation wall).
    """

    origin: np.ndarray
    edge_u: np.ndarray
    edge_v: np.ndarray
    grid_u: int
    grid_v: int

    def __post_init__(self):
        object.__setattr__(self, "origin", _vec3(self.origin))
        object.__setattr__(self, "edge_u", _vec3(self.edge_u))
        object.__setattr__(self, "edge_v", _vec3(self.edge_v))
        if int(self.grid_u) < 1 or int(self.grid_v) < 1:
            raise ValueError("wall grid must be at least 1x1")
        object.__setattr__(self, "grid_u", int(self.grid_u))
        object.__setattr__(self, "grid_v", int(self.grid_v))
        if np.linalg.norm(np.cross(self.edge_u, self.edge_v)) == 0.0:
            raise ValueError("wall edges are linearly dependent")

    @property
    def n_samples(self) -> int:
        return self.grid_u * self.grid_v

    @property
    def normal(self) -> np.ndarray:
        n = np.cross(self.edge_u, self.edge_v)
        return n / np.linalg.norm(n)

    def __eq__(self, other):
        if not isinstance(other, RelayWall):
            return NotImplemented
        return (
            _array_equal(self.origin, other.origin)
            and _array_equal(self.edge_u, other.edge_u)
            and _array_equal(self.edge_v, other.edge_v)
            and self.grid_u == other.grid_u
            and self.grid_v == other.grid_v
        )


@dataclass(frozen=True, eq=False)
class VoxelGrid:
    """Axis-aligned cubic-voxel grid over the hidden region.

    Voxel (i, j, k) occupies the half-open box
    ``origin + voxel_size*[i, i+1) x [j, j+1) x [k, k+1)`` and maps to the
    linear index ``i + n_x*j + n_x*n_y*k``.
    """

    origin: np.ndarray
    voxel_size: float
    dims: tuple[int, int, int]

    def __post_init__(self):
        object.__setattr__(self, "origin", _vec3(self.origin))
        object.__setattr__(self, "voxel_size", float(self.voxel_size))
        if self.voxel_size <= 0.0:
            raise ValueError("voxel_size must be positive")
        dims = tuple(int(d) for d in self.dims)
        if len(dims) != 3 or any(d < 1 for d in dims):
            raise ValueError("dims must be three positive integers")
        object.__setattr__(self, "dims", dims)

    @property
    def n_voxels(self) -> int:
        nx, ny, nz = self.dims
        return nx * ny * nz

    @property
    def bbox_max(self) -> np.ndarray:
        return self.origin + self.voxel_size * np.asarray(self.dims, dtype=np.float64)

    def linear_index(self, i: int, j: int, k: int) -> int:
        nx, ny, _ = self.dims
        return i + nx * j + nx * ny * k

    def index_3d(self, linear) -> tuple:
        nx, ny, _ = self.dims
        linear = np.asarray(linear)
        return linear % nx, (linear // nx) % ny, linear // (nx * ny)

    def voxel_center(self, linear) -> np.ndarray:
        i, j, k = self.index_3d(linear)
        ijk = np.stack(np.broadcast_arrays(i, j, k), axis=-1).astype(np.float64)
        return self.origin + self.voxel_size * (ijk + 0.5)

    @property
    def center(self) -> np.ndarray:
        return 0.5 * (self.origin + self.bbox_max)

    def __eq__(self, other):
        if not isinstance(other, VoxelGrid):
            return NotImplemented
        return (
            _array_equal(self.origin, other.origin)
            and self.voxel_size == other.voxel_size
            and self.dims == other.dims
        )


@dataclass(frozen=True)
class TimeAxis:
    """Uniform time binning: path length d lands in bin floor((d/c - t_offset)/bin_width)."""

    bin_width: float
    n_bins: int
    t_offset: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "bin_width", float(self.bin_width))
        object.__setattr__(self, "n_bins", int(self.n_bins))
        object.__setattr__(self, "t_offset", float(self.t_offset))
        if self.bin_width <= 0.0:
            raise ValueError("bin_width must be positive")
        if self.n_bins < 1:
            raise ValueError("n_bins must be positive")


@dataclass(frozen=True, eq=False)
class SceneConfig:
    """Full geometric description of a two-wall capture setup.

    ``laser_origin`` is where the collimated laser sits; ``camera_origin``
    is where the camera observing the observation wall sits.  Falloff and
    the detector-to-camera path leg are both off by default: reconstruction
    treats the operator as binary, and the last leg is assumed calibrated
    away.  Photon-budget analyses turn falloff on.
    """

    laser_origin: np.ndarray
    camera_origin: np.ndarray
    illum_wall: RelayWall
    obs_wall: RelayWall
    grid: VoxelGrid
    time: TimeAxis
    laser_intensity: float = 1.0
    include_falloff: bool = False
    include_camera_leg: bool = False

    def __post_init__(self):
        object.__setattr__(self, "laser_origin", _vec3(self.laser_origin))
        object.__setattr__(self, "camera_origin", _vec3(self.camera_origin))
        object.__setattr__(self, "laser_intensity", float(self.laser_intensity))
        object.__setattr__(self, "include_falloff", bool(self.include_falloff))
        object.__setattr__(self, "include_camera_leg", bool(self.include_camera_leg))
        if self.laser_intensity <= 0.0:
            raise ValueError("laser_intensity must be positive")
        for name, wall in (("illum_wall", self.illum_wall), ("obs_wall", self.obs_wall)):
            if _parallelogram_intersects_box(wall, self.grid):
                raise ValueError(f"{name} intersects the voxel grid")

    @property
    def n_sources(self) -> int:
        return self.illum_wall.n_samples

    @property
    def n_detectors(self) -> int:
        return self.obs_wall.n_samples

    @property
    def detector_shape(self) -> tuple[int, int]:
        return self.obs_wall.grid_u, self.obs_wall.grid_v

    def __eq__(self, other):
        if not isinstance(other, SceneConfig):
            return NotImplemented
        return (
            _array_equal(self.laser_origin, other.laser_origin)
            and _array_equal(self.camera_origin, other.camera_origin)
            and self.illum_wall == other.illum_wall
            and self.obs_wall == other.obs_wall
            and self.grid == other.grid
            and self.time == other.time
            and self.laser_intensity == other.laser_intensity
            and self.include_falloff == other.include_falloff
            and self.include_camera_leg == other.include_camera_leg
        )


def _parallelogram_intersects_box(wall: RelayWall, grid: VoxelGrid) -> bool:
    """Separating-axis test between a wall patch and the grid bounding box.

    Touching contact (shared boundary, zero overlap volume) counts as not
    intersecting.
    """
    half = 0.5 * grid.voxel_size * np.asarray(grid.dims, dtype=np.float64)
    box_c = grid.center
    para_c = wall.origin + 0.5 * (wall.edge_u + wall.edge_v)
    d = para_c - box_c
    eu, ev = 0.5 * wall.edge_u, 0.5 * wall.edge_v

    axes = [np.eye(3)[i] for i in range(3)]
    axes.append(np.cross(wall.edge_u, wall.edge_v))
    for e in (wall.edge_u, wall.edge_v):
        for i in range(3):
            axes.append(np.cross(np.eye(3)[i], e))
    for axis in axes:
        norm = np.linalg.norm(axis)
        if norm == 0.0:
            continue
        axis = axis / norm
        r_box = np.abs(axis * half).sum()
        r_para = abs(axis @ eu) + abs(axis @ ev)
        if abs(axis @ d) >= r_box + r_para - 1e-12:
            return False
    return True


def wall_sample_points(wall: RelayWall) -> np.ndarray:
    """Cell-center sample points of a wall, shape (grid_u*grid_v, 3).

    Ordering is row-major in (u, v) with u fastest: sample index
    ``iu + grid_u*iv``.
    """
    u = (np.arange(wall.grid_u) + 0.5) / wall.grid_u
    v = (np.arange(wall.grid_v) + 0.5) / wall.grid_v
    uu, vv = np.meshgrid(u, v, indexing="xy")
    return (
        wall.origin[None, :]
        + uu.ravel()[:, None] * wall.edge_u[None, :]
        + vv.ravel()[:, None] * wall.edge_v[None, :]
    )


def ray_voxels(grid: VoxelGrid, p0, p1) -> np.ndarray:
    """Linear indices of the voxels the open segment (p0, p1) crosses.

    Exactly the voxels whose boxes the segment intersects with positive
    length, ordered from p0 to p1; grazing contact (touching a face, edge,
    or corner with zero interior length) does not count.  Points exactly on
    a shared face belong to the upper voxel (half-open box convention).
    """
    p0 = np.asarray(p0, dtype=np.float64)
    p1 = np.asarray(p1, dtype=np.float64)
    d = p1 - p0
    if not np.any(d):
        raise ValueError("degenerate ray: p0 == p1")

    lo = grid.origin
    hi = grid.bbox_max
    t0, t1 = 0.0, 1.0
    for a in range(3):
        if d[a] == 0.0:
            if not (lo[a] <= p0[a] < hi[a]):
                return np.empty(0, dtype=np.int64)
        else:
            ta = (lo[a] - p0[a]) / d[a]
            tb = (hi[a] - p0[a]) / d[a]
            if ta > tb:
                ta, tb = tb, ta
            t0 = max(t0, ta)
            t1 = min(t1, tb)
    if t1 <= t0:
        return np.empty(0, dtype=np.int64)

    # Breakpoints at every grid-plane crossing inside (t0, t1); each
    # surviving interval corresponds to one crossed voxel, identified by
    # its midpoint.
    h = grid.voxel_size
    breaks = [np.array([t0, t1])]
    for a in range(3):
        if d[a] == 0.0:
            continue
        ca, cb = p0[a] + t0 * d[a], p0[a] + t1 * d[a]
        if ca > cb:
            ca, cb = cb, ca
        k_lo = int(math.ceil((ca - lo[a]) / h))
        k_hi = int(math.floor((cb - lo[a]) / h))
        if k_hi >= k_lo:
            planes = lo[a] + h * np.arange(k_lo, k_hi + 1)
            breaks.append((planes - p0[a]) / d[a])
    ts = np.sort(np.concatenate(breaks))
    ts = ts[(ts >= t0) & (ts <= t1)]
    keep = np.empty(ts.size, dtype=bool)
    keep[0] = True
    np.greater(np.diff(ts), 1e-12, out=keep[1:])
    ts = ts[keep]
    if ts.size < 2:
        return np.empty(0, dtype=np.int64)

    mids = 0.5 * (ts[:-1] + ts[1:])
    pts = p0[None, :] + mids[:, None] * d[None, :]
    cells = np.floor((pts - lo[None, :]) / h).astype(np.int64)
    dims = np.asarray(grid.dims, dtype=np.int64)
    inside = np.all((cells >= 0) & (cells < dims[None, :]), axis=1)
    cells = cells[inside]
    nx, ny, _ = grid.dims
    return cells[:, 0] + nx * cells[:, 1] + nx * ny * cells[:, 2]


def ray_wall_intersection(wall: RelayWall, x, s) -> Optional[np.ndarray]:
    """Point where the ray from s through x, extended beyond x, meets the wall.

    Returns None when the ray is parallel to the wall plane, hits the plane
    before passing x, or lands outside the wall patch.
    """
    x = np.asarray(x, dtype=np.float64)
    s = np.asarray(s, dtype=np.float64)
    d = x - s
    if not np.any(d):
        raise ValueError("degenerate ray: x == s")
    n = np.cross(wall.edge_u, wall.edge_v)
    den = n @ d
    if den == 0.0:
        return None
    t = (n @ (wall.origin - s)) / den
    if t <= 1.0:
        return None
    p = s + t * d
    rel = p - wall.origin
    guu = wall.edge_u @ wall.edge_u
    gvv = wall.edge_v @ wall.edge_v
    guv = wall.edge_u @ wall.edge_v
    det = guu * gvv - guv * guv
    a = (gvv * (rel @ wall.edge_u) - guv * (rel @ wall.edge_v)) / det
    b = (guu * (rel @ wall.edge_v) - guv * (rel @ wall.edge_u)) / det
    if 0.0 <= a <= 1.0 and 0.0 <= b <= 1.0:
        return p
    return None


def _path_length(g, l, s, scene: SceneConfig) -> float:
    d = float(np.linalg.norm(l - g) + np.linalg.norm(l - s))
    if scene.include_camera_leg:
        d += float(np.linalg.norm(s - scene.camera_origin))
    return d


def path_bin(g, l, s, scene: SceneConfig) -> Optional[int]:
    """Time-bin index for the laser -> l -> s (optionally -> camera) path.

    None when the arrival time falls outside the scene's time axis.
    """
    g = np.asarray(g, dtype=np.float64)
    l = np.asarray(l, dtype=np.float64)
    s = np.asarray(s, dtype=np.float64)
    d = _path_length(g, l, s, scene)
    t = scene.time
    idx = math.floor((d / SPEED_OF_LIGHT - t.t_offset) / t.bin_width)
    if 0 <= idx < t.n_bins:
        return idx
    return None


@dataclass(frozen=True)
class RayTable:
    """Precomputed geometry for every (detector, source) ray of a scene.

    Ray r pairs detector ``r // K`` with source ``r % K`` (detector-major).
    ``bins[r]`` is the time bin of the ray's two-bounce arrival, or -1 when
    it falls outside the time axis.  ``vox_ptr``/``vox_idx`` store, CSR
    style, the linear indices of the voxels each ray crosses.
    """

    sources: np.ndarray        # (K, 3)
    detectors: np.ndarray      # (n_det, 3)
    dist_ls: np.ndarray        # (R,) source-to-detector distance
    path_len: np.ndarray       # (R,) full binned path length
    bins: np.ndarray           # (R,) int64, -1 = outside time axis
    vox_ptr: np.ndarray        # (R+1,) int64
    vox_idx: np.ndarray        # (nnz,) int64

    @property
    def n_rays(self) -> int:
        return self.bins.size

    @property
    def n_sources(self) -> int:
        return self.sources.shape[0]

    @property
    def n_detectors(self) -> int:
        return self.detectors.shape[0]

    @property
    def det_of_ray(self) -> np.ndarray:
        return np.arange(self.n_rays, dtype=np.int64) // self.n_sources

    @property
    def src_of_ray(self) -> np.ndarray:
        return np.arange(self.n_rays, dtype=np.int64) % self.n_sources

    def ray_lengths(self) -> np.ndarray:
        return np.diff(self.vox_ptr)

    def falloff_weights(self) -> np.ndarray:
        return 1.0 / np.square(self.dist_ls)

    def blocked_mask(self, occ_flat: np.ndarray) -> np.ndarray:
        """Boolean (R,): ray crosses at least one occupied voxel."""
        hits = occ_flat[self.vox_idx] > 0
        cs = np.concatenate(([0], np.cumsum(hits)))
        return (cs[self.vox_ptr[1:]] - cs[self.vox_ptr[:-1]]) > 0


def trace_rays(scene: SceneConfig, *, trace_voxels: bool = True) -> RayTable:
    """Enumerate every (detector, source) ray: distances, time bins, crossed voxels.

    With ``trace_voxels=False`` the voxel lists are left empty, which is
    enough for rendering empty transients.
    """
    sources = wall_sample_points(scene.illum_wall)
    detectors = wall_sample_points(scene.obs_wall)
    k = sources.shape[0]
    n_det = detectors.shape[0]

    d_gl = np.linalg.norm(sources - scene.laser_origin[None, :], axis=1)  # (K,)
    diff = detectors[:, None, :] - sources[None, :, :]                     # (n_det, K, 3)
    d_ls = np.linalg.norm(diff, axis=2)                                    # (n_det, K)
    path = d_gl[None, :] + d_ls
    if scene.include_camera_leg:
        d_sc = np.linalg.norm(detectors - scene.camera_origin[None, :], axis=1)
        path = path + d_sc[:, None]

    t = scene.time
    bins = np.floor((path / SPEED_OF_LIGHT - t.t_offset) / t.bin_width).astype(np.int64)
    bins[(bins < 0) | (bins >= t.n_bins)] = -1

    if trace_voxels:
        ptr = np.zeros(n_det * k + 1, dtype=np.int64)
        chunks = []
        r = 0
        for i in range(n_det):
            s = detectors[i]
            for j in range(k):
                vox = ray_voxels(scene.grid, sources[j], s)
                ptr[r + 1] = ptr[r] + vox.size
                if vox.size:
                    chunks.append(vox)
                r += 1
        vox_idx = np.concatenate(chunks) if chunks else np.empty(0, dtype=np.int64)
    else:
        ptr = np.zeros(n_det * k + 1, dtype=np.int64)
        vox_idx = np.empty(0, dtype=np.int64)

    return RayTable(
        sources=sources,
        detectors=detectors,
        dist_ls=d_ls.ravel(),
        path_len=path.ravel(),
        bins=bins.ravel(),
        vox_ptr=ptr,
        vox_idx=vox_idx,
    )


def rebin_rays(rays: RayTable, time: TimeAxis) -> RayTable:
    """Recompute ray time bins for a new time axis; traversal data is reused."""
    bins = np.floor((rays.path_len / SPEED_OF_LIGHT - time.t_offset) / time.bin_width).astype(
        np.int64
    )
    bins[(bins < 0) | (bins >= time.n_bins)] = -1
    return replace(rays, bins=bins)


def fit_time_axis(scene: SceneConfig, bin_width: float, *, pad_bins: int = 0) -> SceneConfig:
    """Replace the scene's time axis with one that spans every two-bounce arrival.

    The offset is set to the earliest arrival so the first bin is always
    populated; the bin count covers the latest arrival plus ``pad_bins``.
    """
    sources = wall_sample_points(scene.illum_wall)
    detectors = wall_sample_points(scene.obs_wall)
    d_gl = np.linalg.norm(sources - scene.laser_origin[None, :], axis=1)
    d_ls = np.linalg.norm(detectors[:, None, :] - sources[None, :, :], axis=2)
    path = d_gl[None, :] + d_ls
    if scene.include_camera_leg:
        d_sc = np.linalg.norm(detectors - scene.camera_origin[None, :], axis=1)
        path = path + d_sc[:, None]
    d_min = float(path.min())
    d_max = float(path.max())
    t_offset = d_min / SPEED_OF_LIGHT
    span = d_max / SPEED_OF_LIGHT - t_offset
    n_bins = int(math.floor(span / bin_width)) + 1 + int(pad_bins)
    return replace(scene, time=TimeAxis(bin_width=bin_width, n_bins=n_bins, t_offset=t_offset))


def two_wall_scene(
    *,
    wall_length: float = 3.0,
    separation: float = 2.0,
    standoff: float = 2.0,
    wall_height: Optional[float] = None,
    n_illum: tuple[int, int] = (20, 1),
    n_obs: tuple[int, int] = (20, 1),
    voxel_size: float = 0.02,
    region: Optional[tuple] = None,
    bin_width: float = 10e-12,
    n_bins: Optional[int] = None,
    laser: Optional[np.ndarray] = None,
    camera: Optional[np.ndarray] = None,
    laser_intensity: float = 1.0,
    include_falloff: bool = False,
    include_camera_leg: bool = False,
    tilt_deg: float = 0.0,
    obs_segment: Optional[tuple[float, float]] = None,
) -> SceneConfig:
    """Two parallel relay walls flanking a hidden box of voxels.

    The illumination wall sits at x=+separation/2 and the observation wall
    at x=-separation/2, both running from z=standoff to z=standoff+
    wall_length.  ``wall_height=None`` builds a planar (top-down) scene one
    voxel thick in y.  ``region`` is (x0, x1, z0, z1) for planar scenes or
    (x0, x1, y0, y1, z0, z1) for 3D ones; the default is a centered box
    spanning the middle half of the corridor.  ``tilt_deg`` rotates each
    wall about its near (z=standoff) edge, positive angles tilting the far
    ends toward each other.  ``obs_segment=(a, b)`` keeps only that
    fractional span of the observation wall (a narrow camera field of
    view).  When ``n_bins`` is omitted the time axis is auto-fitted so
    every two-bounce arrival lands on it.
    """
    planar = wall_height is None
    height = voxel_size if planar else wall_height
    y_mid = height / 2.0

    theta = math.radians(tilt_deg)
    u_illum = np.array([-math.sin(theta), 0.0, math.cos(theta)]) * wall_length
    u_obs = np.array([math.sin(theta), 0.0, math.cos(theta)]) * wall_length
    illum_wall = RelayWall(
        origin=np.array([separation / 2.0, 0.0, standoff]),
        edge_u=u_illum,
        edge_v=np.array([0.0, height, 0.0]),
        grid_u=n_illum[0],
        grid_v=n_illum[1],
    )
    obs_origin = np.array([-separation / 2.0, 0.0, standoff])
    obs_u = u_obs
    if obs_segment is not None:
        a, b = obs_segment
        if not (0.0 <= a < b <= 1.0):
            raise ValueError("obs_segment must satisfy 0 <= a < b <= 1")
        obs_origin = obs_origin + a * obs_u
        obs_u = (b - a) * obs_u
    obs_wall = RelayWall(
        origin=obs_origin,
        edge_u=obs_u,
        edge_v=np.array([0.0, height, 0.0]),
        grid_u=n_obs[0],
        grid_v=n_obs[1],
    )

    if region is None:
        x0, x1 = -separation / 4.0, separation / 4.0
        z0 = standoff + wall_length / 4.0
        z1 = standoff + 3.0 * wall_length / 4.0
        y0, y1 = (0.0, height) if planar else (height / 4.0, 3.0 * height / 4.0)
    elif len(region) == 4:
        x0, x1, z0, z1 = region
        y0, y1 = 0.0, height
    else:
        x0, x1, y0, y1, z0, z1 = region
    dims = (
        max(1, round((x1 - x0) / voxel_size)),
        max(1, round((y1 - y0) / voxel_size)),
        max(1, round((z1 - z0) / voxel_size)),
    )
    grid = VoxelGrid(origin=np.array([x0, y0, z0]), voxel_size=voxel_size, dims=dims)

    apparatus = np.array([0.0, y_mid, 0.0])
    scene = SceneConfig(
        laser_origin=apparatus if laser is None else laser,
        camera_origin=apparatus if camera is None else camera,
        illum_wall=illum_wall,
        obs_wall=obs_wall,
        grid=grid,
        time=TimeAxis(bin_width=bin_width, n_bins=1),
        laser_intensity=laser_intensity,
        include_falloff=include_falloff,
        include_camera_leg=include_camera_leg,
    )
    if n_bins is None:
        return fit_time_axis(scene, bin_width)
    return replace(scene, time=TimeAxis(bin_width=bin_width, n_bins=n_bins))
