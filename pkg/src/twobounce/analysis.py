"""Design analysis: per-voxel SNR maps, PSF widths, and resolution sweeps.

The per-voxel SNR scores how detectable a voxel is from photon statistics
alone: occupying voxel x removes an expected number of photons from the
measurement (its shadow), and a Poisson count with rate lambda has SNR
sqrt(lambda), so S(x) = sqrt(expected shadow photons of x) with squared-
distance falloff switched on.  Voxels no segment covers cast no shadow and
score zero.
"""

from __future__ import annotations

import csv
import math
import time as _time
import warnings
from dataclasses import dataclass, replace

import numpy as np

from .operators import build_operator, gram_column, mutual_coherence
from .scene import RayTable, RelayWall, SceneConfig, VoxelGrid, fit_time_axis, trace_rays
from .transient import OccupancyVolume, block_pattern

__all__ = [
    "SnrMap",
    "SweepRecord",
    "snr_map",
    "psf_fwhm",
    "coherence_sweep",
    "sparse_recovery_bound",
    "write_sweep_csv",
    "SWEEP_CSV_HEADER",
]


@dataclass
class SnrMap:
    """Per-voxel photon-statistics SNR over the hidden grid."""

    grid: VoxelGrid
    values: np.ndarray

    def argmax_index(self) -> tuple[int, int, int]:
        flat = int(np.argmax(self.values.reshape(-1, order="F")))
        i, j, k = self.grid.index_3d(flat)
        return int(i), int(j), int(k)


def snr_map(scene: SceneConfig, rays: RayTable | None = None) -> SnrMap:
    """SNR of each voxel's shadow: sqrt of the photons its occupancy removes.

    Falloff is always applied here (it is a physical photon count), and the
    exact single-voxel shadow is used, so no segment is counted twice.
    Segments whose arrival misses the time axis contribute nothing.
    """
    if rays is None:
        rays = trace_rays(scene)
    w = scene.laser_intensity * rays.falloff_weights()
    w = w * (rays.bins >= 0)
    blocked = np.bincount(
        rays.vox_idx,
        weights=np.repeat(w, rays.ray_lengths()),
        minlength=scene.grid.n_voxels,
    )
    values = np.sqrt(blocked).reshape(scene.grid.dims, order="F")
    return SnrMap(grid=scene.grid, values=values)


def _axis_profile_width(profile: np.ndarray, center: int) -> tuple[float, bool]:
    """Width (in samples) of the above-half interval around ``center``.

    Linear interpolation between samples; when the above-half region runs
    into the array boundary it is extended by half a sample.  Returns
    (width, off_peak) where off_peak flags a center that is not the
    profile maximum.
    """
    vc = float(profile[center])
    if vc <= 0:
        return 0.0, False
    off_peak = bool(profile.max() > vc)
    half = 0.5 * vc

    def edge(direction: int) -> float:
        pos = center
        while True:
            nxt = pos + direction
            if nxt < 0 or nxt >= profile.size:
                return pos + 0.5 * direction
            if profile[nxt] < half:
                frac = (profile[pos] - half) / (profile[pos] - profile[nxt])
                return pos + direction * frac
            pos = nxt

    return edge(+1) - edge(-1), off_peak


def psf_fwhm(psf: OccupancyVolume, center: int) -> np.ndarray:
    """Full width at half maximum of a PSF along each axis, in meters.

    ``center`` is the linear index of the voxel that generated the PSF.
    Profiles run along each grid axis through the center voxel.  If the
    center is not the maximum of a profile, the width of the above-half
    region containing the center is reported and an "off-peak" warning is
    emitted.
    """
    grid = psf.grid
    if not 0 <= center < grid.n_voxels:
        raise IndexError(f"center voxel {center} out of range")
    ci, cj, ck = (int(v) for v in grid.index_3d(center))
    values = psf.values
    widths = np.zeros(3)
    for axis, (sel, c) in enumerate(
        (
            ((slice(None), cj, ck), ci),
            ((ci, slice(None), ck), cj),
            ((ci, cj, slice(None)), ck),
        )
    ):
        profile = np.asarray(values[sel], dtype=np.float64)
        width, off_peak = _axis_profile_width(profile, c)
        if off_peak:
            warnings.warn(f"off-peak PSF center along axis {axis}", stacklevel=2)
        widths[axis] = width * grid.voxel_size
    return widths


@dataclass
class SweepRecord:
    """One (spatial, temporal, captures) combination of a resolution sweep."""

    spatial_resolution: int
    temporal_resolution: float
    captures: int
    coherence: float
    psf_fwhm: np.ndarray
    valid: bool
    runtime: float


def _with_detector_resolution(scene: SceneConfig, n: int) -> SceneConfig:
    wall = scene.obs_wall
    grid_v = wall.grid_v if wall.grid_v == 1 else n
    new_wall = RelayWall(
        origin=wall.origin, edge_u=wall.edge_u, edge_v=wall.edge_v, grid_u=n, grid_v=grid_v
    )
    return replace(scene, obs_wall=new_wall)


def coherence_sweep(
    base_scene: SceneConfig,
    spatial_list: list[int],
    temporal_list: list[float],
    captures_list: list[int],
    *,
    sample_pairs: int | None = None,
    seed: int = 0,
) -> list[SweepRecord]:
    """Coherence and center-voxel PSF FWHM over a grid of system parameters.

    ``spatial_list`` holds detectors per observation-wall edge,
    ``temporal_list`` bin widths in seconds, ``captures_list`` capture
    counts (sources are grouped into contiguous blocks).  Combinations are
    evaluated in input order; a combination whose operator has fewer than
    two nonzero columns is recorded as invalid and the sweep continues.
    """
    if not (spatial_list and temporal_list and captures_list):
        raise ValueError("sweep lists must be nonempty")
    grid = base_scene.grid
    center = grid.linear_index(grid.dims[0] // 2, grid.dims[1] // 2, grid.dims[2] // 2)
    records = []
    for spatial in spatial_list:
        for temporal in temporal_list:
            for captures in captures_list:
                start = _time.perf_counter()
                try:
                    scene = _with_detector_resolution(base_scene, int(spatial))
                    scene = fit_time_axis(scene, float(temporal))
                    pattern = block_pattern(scene.n_sources, int(captures))
                    op = build_operator(scene, pattern)
                    coh = mutual_coherence(op, sample_pairs=sample_pairs, seed=seed)
                    fwhm = psf_fwhm(gram_column(op, center), center)
                    record = SweepRecord(
                        spatial_resolution=int(spatial),
                        temporal_resolution=float(temporal),
                        captures=int(captures),
                        coherence=coh.value,
                        psf_fwhm=fwhm,
                        valid=True,
                        runtime=_time.perf_counter() - start,
                    )
                except ValueError:
                    record = SweepRecord(
                        spatial_resolution=int(spatial),
                        temporal_resolution=float(temporal),
                        captures=int(captures),
                        coherence=float("nan"),
                        psf_fwhm=np.full(3, float("nan")),
                        valid=False,
                        runtime=_time.perf_counter() - start,
                    )
                records.append(record)
    return records


def sparse_recovery_bound(mu: float) -> int:
    """Largest guaranteed-recoverable sparsity for coherence mu: floor((1 + 1/mu)/2)."""
    if not 0.0 < mu <= 1.0:
        raise ValueError(f"coherence must be in (0, 1], got {mu}")
    return int(math.floor(0.5 * (1.0 + 1.0 / mu)))


SWEEP_CSV_HEADER = [
    "spatial",
    "temporal_ps",
    "captures",
    "coherence",
    "fwhm_x",
    "fwhm_y",
    "fwhm_z",
    "valid",
    "runtime_s",
]


def write_sweep_csv(records: list[SweepRecord], path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(SWEEP_CSV_HEADER)
        for r in records:
            writer.writerow(
                [
                    r.spatial_resolution,
                    repr(r.temporal_resolution * 1e12),
                    r.captures,
                    repr(r.coherence),
                    repr(float(r.psf_fwhm[0])),
                    repr(float(r.psf_fwhm[1])),
                    repr(float(r.psf_fwhm[2])),
                    int(r.valid),
                    repr(r.runtime),
                ]
            )
