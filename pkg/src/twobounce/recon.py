"""Reconstruction: backprojection, Laplacian filtering, thresholding, voxel carving.

Backprojection smears every measured shadow event back along the segment
that produced it; the Laplacian filter sharpens the resulting low-frequency
volume.  The intensity-only carving baseline intersects the silhouette
cones of per-source shadow masks and needs unmultiplexed captures.
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass, replace
from typing import Optional

import numpy as np

from .operators import MeasurementOperator
from .scene import RayTable, SceneConfig, VoxelGrid, trace_rays
from .transient import MultiplexPattern, OccupancyVolume, TransientCube, intensity_projection

VOLUME_MAGIC = b"2BVL"

__all__ = [
    "Reconstruction",
    "backproject",
    "laplacian_filter",
    "threshold",
    "voxel_carve",
    "shadow_masks",
    "iou",
    "scene_digest",
    "pattern_digest",
    "write_volume",
    "read_volume",
]


def scene_digest(scene: SceneConfig) -> str:
    """Stable hash of the scene geometry, for provenance records."""
    h = hashlib.sha256()
    for arr in (
        scene.laser_origin,
        scene.camera_origin,
        scene.illum_wall.origin,
        scene.illum_wall.edge_u,
        scene.illum_wall.edge_v,
        scene.obs_wall.origin,
        scene.obs_wall.edge_u,
        scene.obs_wall.edge_v,
        scene.grid.origin,
    ):
        h.update(np.ascontiguousarray(arr, dtype=np.float64).tobytes())
    meta = (
        scene.illum_wall.grid_u,
        scene.illum_wall.grid_v,
        scene.obs_wall.grid_u,
        scene.obs_wall.grid_v,
        *scene.grid.dims,
        scene.grid.voxel_size,
        scene.time.bin_width,
        scene.time.n_bins,
        scene.time.t_offset,
        scene.laser_intensity,
        scene.include_falloff,
        scene.include_camera_leg,
    )
    h.update(repr(meta).encode())
    return h.hexdigest()


def pattern_digest(pattern: MultiplexPattern) -> str:
    return hashlib.sha256(pattern.matrix.tobytes() + repr(pattern.matrix.shape).encode()).hexdigest()


@dataclass
class Reconstruction:
    """Real-valued reconstruction volume plus the provenance needed to reproduce it."""

    volume: OccupancyVolume
    method: str  # 'bp' | 'fbp' | 'carve'
    scene_hash: str = ""
    pattern_hash: str = ""
    noise_seed: Optional[int] = None


def backproject(
    op: MeasurementOperator,
    shadow_cubes: list[TransientCube],
    *,
    noise_seed: Optional[int] = None,
) -> Reconstruction:
    """Adjoint of the measurement operator applied to (clamped) shadow cubes."""
    volume = op.apply_adjoint(shadow_cubes)
    return Reconstruction(
        volume=volume,
        method="bp",
        scene_hash=scene_digest(op.scene),
        pattern_hash=pattern_digest(op.pattern),
        noise_seed=noise_seed,
    )


def laplacian_filter(rec: Reconstruction) -> Reconstruction:
    """Negated 6-neighbor Laplacian of the volume (replicate padding).

    Axes of extent 1 are skipped and the center weight drops to
    -2 * (number of filtered axes), so planar volumes use the 2D stencil.
    The sign flip makes blob interiors score positive, keeping a single
    nonnegative thresholding path.
    """
    vol = rec.volume
    values = vol.values.astype(np.float64)
    active = [a for a in range(3) if values.shape[a] > 1]
    if any(values.shape[a] == 2 for a in active):
        raise ValueError("laplacian_filter needs extent >= 3 along each filtered axis")
    h2 = vol.grid.voxel_size ** 2
    padded = np.pad(values, [(1, 1) if a in active else (0, 0) for a in range(3)], mode="edge")
    core = [slice(1, -1) if a in active else slice(None) for a in range(3)]
    acc = -2.0 * len(active) * values
    for a in active:
        lo = list(core)
        hi = list(core)
        lo[a] = slice(0, -2)
        hi[a] = slice(2, None)
        acc = acc + padded[tuple(lo)] + padded[tuple(hi)]
    filtered = -acc / h2
    return replace(
        rec, volume=OccupancyVolume(grid=vol.grid, values=filtered, binary=False), method="fbp"
    )


def threshold(rec: Reconstruction, method: str = "fraction_of_max", param: float = 0.5) -> OccupancyVolume:
    """Binarize a reconstruction.

    ``fraction_of_max`` keeps voxels >= param * max(volume); an all-zero
    (or nonpositive) volume yields an empty occupancy.  ``otsu`` picks the
    split maximizing between-class variance over a 256-bin histogram and
    keeps voxels strictly above it.
    """
    values = rec.volume.values.astype(np.float64)
    if method == "fraction_of_max":
        peak = values.max() if values.size else 0.0
        if peak <= 0.0:
            mask = np.zeros_like(values, dtype=np.uint8)
        else:
            mask = (values >= param * peak).astype(np.uint8)
    elif method == "otsu":
        lo, hi = float(values.min()), float(values.max())
        if hi <= lo:
            mask = np.zeros_like(values, dtype=np.uint8)
        else:
            counts, edges = np.histogram(values, bins=256, range=(lo, hi))
            p = counts / counts.sum()
            centers = 0.5 * (edges[:-1] + edges[1:])
            w0 = np.cumsum(p)[:-1]
            w1 = 1.0 - w0
            cum_mean = np.cumsum(p * centers)[:-1]
            total_mean = float((p * centers).sum())
            with np.errstate(divide="ignore", invalid="ignore"):
                mu0 = np.where(w0 > 0, cum_mean / w0, 0.0)
                mu1 = np.where(w1 > 0, (total_mean - cum_mean) / w1, 0.0)
            sigma_b = w0 * w1 * (mu0 - mu1) ** 2
            split = int(np.argmax(sigma_b))
            mask = (values > edges[split + 1]).astype(np.uint8)
    else:
        raise ValueError(f"unknown threshold method {method!r}")
    return OccupancyVolume(grid=rec.volume.grid, values=mask, binary=True)


def voxel_carve(
    scene: SceneConfig,
    per_source_shadow_masks: list[np.ndarray],
    rays: RayTable | None = None,
) -> OccupancyVolume:
    """Visual hull from per-source shadow masks (True/1 = detector in shadow).

    A voxel survives when at least one segment covers it and no covering
    segment was seen lit.  Voxels no segment covers carry no evidence and
    are left empty.  Masks must come from unmultiplexed (single-source)
    captures, one (n_u, n_v) mask per source.
    """
    k = scene.n_sources
    if len(per_source_shadow_masks) != k:
        raise ValueError(f"expected {k} masks, got {len(per_source_shadow_masks)}")
    n_u, n_v = scene.detector_shape
    masks = np.empty((k, n_u * n_v), dtype=bool)
    for idx, mask in enumerate(per_source_shadow_masks):
        mask = np.asarray(mask)
        if mask.shape != (n_u, n_v):
            raise ValueError(f"mask {idx} has shape {mask.shape}, expected {(n_u, n_v)}")
        masks[idx] = mask.astype(bool).reshape(-1, order="F")

    if rays is None:
        rays = trace_rays(scene)
    lengths = rays.ray_lengths()
    lit_ray = ~masks[rays.src_of_ray, rays.det_of_ray]

    n_vox = scene.grid.n_voxels
    covered = np.bincount(rays.vox_idx, minlength=n_vox) > 0
    lit_hits = np.bincount(
        rays.vox_idx[np.repeat(lit_ray, lengths)], minlength=n_vox
    )
    hull = covered & (lit_hits == 0)
    return OccupancyVolume.from_flat(scene.grid, hull.astype(np.uint8), binary=True)


def shadow_masks(
    per_source_light: list[TransientCube],
    per_source_empty: list[TransientCube],
) -> list[np.ndarray]:
    """Per-source shadow masks from time-integrated intensities.

    A detector is marked shadowed when its measured intensity drops below
    half the predicted empty intensity; detectors with zero predicted
    intensity carry no evidence and are marked shadowed so they never carve.
    """
    if len(per_source_light) != len(per_source_empty):
        raise ValueError("per-source light/empty cube counts differ")
    out = []
    for light, empty in zip(per_source_light, per_source_empty):
        li = intensity_projection(light)
        ei = intensity_projection(empty)
        out.append(~((ei > 0) & (li >= 0.5 * ei)))
    return out


def iou(a: OccupancyVolume, b: OccupancyVolume) -> float:
    """Intersection over union of two binary volumes; 1.0 when both are empty."""
    if a.grid != b.grid:
        raise ValueError("volumes live on different grids")
    if not (a.binary and b.binary):
        raise ValueError("iou requires binary volumes")
    av = a.values.astype(bool)
    bv = b.values.astype(bool)
    union = int(np.logical_or(av, bv).sum())
    if union == 0:
        return 1.0
    return float(np.logical_and(av, bv).sum() / union)


# -- volume file format -------------------------------------------------------
#
# magic "2BVL" | u32le nx, ny, nz | f32 voxel_size | 3 x f32 origin | payload
# in linear layout: float32 for real volumes, u8 for binary ones (the reader
# tells them apart by payload size).

def write_volume(path, vol: OccupancyVolume) -> None:
    nx, ny, nz = vol.grid.dims
    with open(path, "wb") as fh:
        fh.write(VOLUME_MAGIC)
        fh.write(struct.pack("<III", nx, ny, nz))
        fh.write(struct.pack("<f", vol.grid.voxel_size))
        fh.write(struct.pack("<fff", *vol.grid.origin))
        if vol.binary:
            fh.write(vol.flat().astype(np.uint8).tobytes())
        else:
            fh.write(vol.flat().astype("<f4").tobytes())


def read_volume(path) -> OccupancyVolume:
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != VOLUME_MAGIC:
            raise ValueError(f"not a volume file (magic {magic!r})")
        nx, ny, nz = struct.unpack("<III", fh.read(12))
        (voxel_size,) = struct.unpack("<f", fh.read(4))
        origin = struct.unpack("<fff", fh.read(12))
        payload = fh.read()
    n = nx * ny * nz
    grid = VoxelGrid(origin=np.asarray(origin, dtype=np.float64), voxel_size=voxel_size, dims=(nx, ny, nz))
    if len(payload) == n:
        flat = np.frombuffer(payload, dtype=np.uint8)
        return OccupancyVolume.from_flat(grid, flat, binary=True)
    if len(payload) == 4 * n:
        flat = np.frombuffer(payload, dtype="<f4").astype(np.float64)
        return OccupancyVolume.from_flat(grid, flat, binary=False)
    raise ValueError("volume payload size does not match header dimensions")
