"""Factored sparse measurement operator mapping voxel occupancy to space-time bins.

The operator keeps the natural factorization of the physics instead of a
monolithic matrix: a ray-membership factor (which voxels lie on each
(detector, source) segment) and a time-placement factor (which bin each
segment's two-bounce arrival lands in).  A column of the implied matrix is
the space-time response of a single voxel; applying the operator to an
occupancy field realizes the linear occlusion relaxation, so two occupied
voxels on one segment contribute twice.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import scipy.sparse as sp

from .scene import (
    RayTable,
    SceneConfig,
    path_bin,
    ray_voxels,
    trace_rays,
    wall_sample_points,
)
from .transient import MultiplexPattern, OccupancyVolume, TransientCube

__all__ = [
    "MeasurementOperator",
    "CoherenceResult",
    "build_operator",
    "gram_column",
    "mutual_coherence",
    "dense_materialize",
    "export_coo_text",
]


@dataclass(eq=False)
class MeasurementOperator:
    """Linear map from voxel occupancy to M stacked transient cubes.

    Row layout: capture-major, then the cube's linear layout
    (``u + n_u*v + n_u*n_v*t``).  Entries are 1 per (capture, detector,
    source, voxel-on-segment) incidence, or the squared-distance falloff
    weight when ``falloff_in_operator`` is set; incidences whose arrival
    falls outside the time axis are dropped.
    """

    scene: SceneConfig
    pattern: MultiplexPattern
    rays: RayTable
    falloff_in_operator: bool = False
    _csr: Optional[sp.csr_matrix] = field(default=None, repr=False)

    @property
    def n_detectors(self) -> int:
        return self.rays.n_detectors

    @property
    def n_bins(self) -> int:
        return self.scene.time.n_bins

    @property
    def n_captures(self) -> int:
        return self.pattern.n_captures

    @property
    def n_voxels(self) -> int:
        return self.scene.grid.n_voxels

    @property
    def shape(self) -> tuple[int, int]:
        return (self.n_captures * self.n_detectors * self.n_bins, self.n_voxels)

    def ray_weights(self) -> np.ndarray:
        if self.falloff_in_operator:
            return self.rays.falloff_weights()
        return np.ones(self.rays.n_rays)

    def _capture_ray_mask(self, m: int) -> np.ndarray:
        active = self.pattern.matrix[m].astype(bool)
        return active[self.rays.src_of_ray] & (self.rays.bins >= 0)

    def apply(self, occ: OccupancyVolume) -> list[TransientCube]:
        """Forward product: expected shadow cubes for the (relaxed) occupancy."""
        if occ.grid != self.scene.grid:
            raise ValueError("occupancy grid does not match the operator's scene grid")
        f = occ.flat().astype(np.float64)
        rays = self.rays
        csum = np.concatenate(([0.0], np.cumsum(f[rays.vox_idx])))
        ray_sums = csum[rays.vox_ptr[1:]] - csum[rays.vox_ptr[:-1]]
        ray_sums *= self.ray_weights()

        n_det, n_t = self.n_detectors, self.n_bins
        n_u, n_v = self.scene.detector_shape
        rows_base = rays.det_of_ray + n_det * rays.bins
        out = []
        for m in range(self.n_captures):
            sel = self._capture_ray_mask(m)
            flat = np.bincount(rows_base[sel], weights=ray_sums[sel], minlength=n_det * n_t)
            out.append(
                TransientCube(values=flat.reshape((n_u, n_v, n_t), order="F"), kind="shadow")
            )
        return out

    def apply_adjoint(self, cubes: list[TransientCube]) -> OccupancyVolume:
        """Transpose product: smear measurements back along their segments."""
        if len(cubes) != self.n_captures:
            raise ValueError(f"expected {self.n_captures} cubes, got {len(cubes)}")
        n_det, n_t = self.n_detectors, self.n_bins
        rays = self.rays
        rows_base = rays.det_of_ray + n_det * rays.bins
        acc = np.zeros(rays.n_rays)
        for m, cube in enumerate(cubes):
            if cube.dims != (*self.scene.detector_shape, n_t):
                raise ValueError("cube dimensions do not match the operator")
            flat = cube.flat().astype(np.float64)
            sel = self._capture_ray_mask(m)
            acc[sel] += flat[rows_base[sel]]
        acc *= self.ray_weights()
        weights = np.repeat(acc, rays.ray_lengths())
        vol = np.bincount(rays.vox_idx, weights=weights, minlength=self.n_voxels)
        return OccupancyVolume.from_flat(self.scene.grid, vol, binary=False)

    def to_csr(self) -> sp.csr_matrix:
        """Materialize the sparse matrix (cached); used for Gram/coherence work."""
        if self._csr is None:
            rays = self.rays
            n_det, n_t = self.n_detectors, self.n_bins
            lengths = rays.ray_lengths()
            w = self.ray_weights()
            rows_base = rays.det_of_ray + n_det * rays.bins
            parts_r, parts_c, parts_d = [], [], []
            for m in range(self.n_captures):
                sel = self._capture_ray_mask(m)
                per_entry = np.repeat(sel, lengths)
                cols = rays.vox_idx[per_entry]
                rows = np.repeat(m * n_det * n_t + rows_base[sel], lengths[sel])
                data = np.repeat(w[sel], lengths[sel])
                parts_r.append(rows)
                parts_c.append(cols)
                parts_d.append(data)
            rows = np.concatenate(parts_r) if parts_r else np.empty(0, dtype=np.int64)
            cols = np.concatenate(parts_c) if parts_c else np.empty(0, dtype=np.int64)
            data = np.concatenate(parts_d) if parts_d else np.empty(0)
            mat = sp.coo_matrix((data, (rows, cols)), shape=self.shape).tocsr()
            mat.sum_duplicates()
            self._csr = mat
        return self._csr


def build_operator(
    scene: SceneConfig,
    pattern: MultiplexPattern,
    *,
    falloff_in_operator: bool = False,
    rays: RayTable | None = None,
) -> MeasurementOperator:
    """Trace every (detector, source) segment once and assemble the operator."""
    if pattern.n_sources != scene.n_sources:
        raise ValueError(
            f"pattern has {pattern.n_sources} sources, scene has {scene.n_sources}"
        )
    if not pattern.matrix.any(axis=1).all():
        raise ValueError("a capture with zero active sources is not allowed")
    if rays is None:
        rays = trace_rays(scene)
    return MeasurementOperator(
        scene=scene, pattern=pattern, rays=rays, falloff_in_operator=falloff_in_operator
    )


def gram_column(op: MeasurementOperator, voxel: int) -> OccupancyVolume:
    """One column of the Gram matrix, reshaped to the grid: the voxel's PSF."""
    if not 0 <= voxel < op.n_voxels:
        raise IndexError(f"voxel index {voxel} out of range [0, {op.n_voxels})")
    delta = np.zeros(op.n_voxels)
    delta[voxel] = 1.0
    return op.apply_adjoint(op.apply(OccupancyVolume.from_flat(op.scene.grid, delta)))


@dataclass(frozen=True)
class CoherenceResult:
    """Mutual coherence with the attaining column pairs and bookkeeping.

    ``pairs`` holds up to 16 (i, j) voxel pairs within 1e-12 of the
    maximum.  ``n_zero_columns`` counts voxels excluded for having an
    all-zero response.  Sampled results are lower bounds (``exact=False``).
    """

    value: float
    pairs: tuple[tuple[int, int], ...]
    n_zero_columns: int
    exact: bool = True
    min_separation: int = 0

    def __float__(self) -> float:
        return self.value


_TIE_TOL = 1e-12
_MAX_TIE_PAIRS = 16


def mutual_coherence(
    op: MeasurementOperator,
    *,
    min_separation: int = 0,
    sample_pairs: Optional[int] = None,
    seed: int = 0,
    block_size: int = 2048,
) -> CoherenceResult:
    """Largest normalized correlation between distinct voxel responses.

    Exact mode intersects all column pairs blockwise through the sparse
    Gram product; ``sample_pairs`` switches to a seeded random subset of
    pairs and reports a lower bound.  ``min_separation`` (Chebyshev
    distance in voxel indices) excludes near-neighbor pairs, useful for
    separating aliasing from unavoidable adjacent-voxel overlap.
    """
    csr = op.to_csr()
    colsq = np.asarray(csr.multiply(csr).sum(axis=0)).ravel()
    nonzero = colsq > 0
    n_zero = int((~nonzero).sum())
    if int(nonzero.sum()) < 2:
        raise ValueError("coherence undefined: fewer than two nonzero columns")

    nx, ny, _ = op.scene.grid.dims

    def separated(i: np.ndarray, j: np.ndarray) -> np.ndarray:
        di = np.abs(i % nx - j % nx)
        dj = np.abs((i // nx) % ny - (j // nx) % ny)
        dk = np.abs(i // (nx * ny) - j // (nx * ny))
        return np.maximum(np.maximum(di, dj), dk) >= min_separation

    if sample_pairs is not None:
        rng = np.random.default_rng(seed)
        idx = np.flatnonzero(nonzero)
        csc = csr.tocsc()
        best, pairs = 0.0, []
        for _ in range(int(sample_pairs)):
            i, j = rng.choice(idx, size=2, replace=False)
            if min_separation and not separated(np.array([i]), np.array([j]))[0]:
                continue
            dot = abs((csc[:, int(i)].T @ csc[:, int(j)]).toarray()[0, 0])
            r = dot / np.sqrt(colsq[i] * colsq[j])
            if r > best + _TIE_TOL:
                best, pairs = float(r), [(int(min(i, j)), int(max(i, j)))]
            elif r >= best - _TIE_TOL and len(pairs) < _MAX_TIE_PAIRS:
                pairs.append((int(min(i, j)), int(max(i, j))))
        return CoherenceResult(
            value=min(best, 1.0),
            pairs=tuple(pairs[:_MAX_TIE_PAIRS]),
            n_zero_columns=n_zero,
            exact=False,
            min_separation=min_separation,
        )

    csc = csr.tocsc()
    at = csr.T.tocsr()
    best = 0.0
    candidates: list[tuple[float, int, int]] = []
    n_cols = csr.shape[1]
    for start in range(0, n_cols, block_size):
        stop = min(start + block_size, n_cols)
        g = (at @ csc[:, start:stop]).tocoo()
        i, j, v = g.row, start + g.col, g.data
        keep = (i < j) & (v != 0)
        if min_separation:
            keep &= separated(i, j)
        if not keep.any():
            continue
        i, j, v = i[keep], j[keep], v[keep]
        r = np.abs(v) / np.sqrt(colsq[i] * colsq[j])
        block_best = float(r.max())
        if block_best > best:
            best = block_best
            candidates = [c for c in candidates if c[0] >= best - _TIE_TOL]
        near = r >= best - _TIE_TOL
        for rr, ii, jj in zip(r[near], i[near], j[near]):
            candidates.append((float(rr), int(ii), int(jj)))

    candidates = [(r, i, j) for r, i, j in candidates if r >= best - _TIE_TOL]
    candidates.sort(key=lambda c: (-c[0], c[1], c[2]))
    pairs = tuple((i, j) for _, i, j in candidates[:_MAX_TIE_PAIRS])
    return CoherenceResult(
        value=min(best, 1.0),
        pairs=pairs,
        n_zero_columns=n_zero,
        exact=True,
        min_separation=min_separation,
    )


def dense_materialize(op: MeasurementOperator, max_entries: int = 10_000_000) -> np.ndarray:
    """Full dense matrix, for tests and tiny analyses only.

    Assembled by direct loops over (capture, detector, source) with fresh
    segment traversals, deliberately independent of the streamed/sparse
    code paths it is used to cross-check.
    """
    rows, cols = op.shape
    if rows * cols > max_entries:
        raise ValueError(
            f"dense operator would hold {rows * cols} entries (limit {max_entries})"
        )
    scene = op.scene
    sources = wall_sample_points(scene.illum_wall)
    detectors = wall_sample_points(scene.obs_wall)
    n_det = detectors.shape[0]
    n_t = scene.time.n_bins
    dense = np.zeros(op.shape)
    for m in range(op.n_captures):
        for i in range(n_det):
            s = detectors[i]
            for k in np.flatnonzero(op.pattern.matrix[m]):
                l = sources[k]
                b = path_bin(scene.laser_origin, l, s, scene)
                if b is None:
                    continue
                vox = ray_voxels(scene.grid, l, s)
                if not vox.size:
                    continue
                w = 1.0
                if op.falloff_in_operator:
                    w = 1.0 / float(np.sum((l - s) ** 2))
                dense[m * n_det * n_t + i + n_det * b, vox] += w
    return dense


def export_coo_text(op: MeasurementOperator, path) -> None:
    """Coordinate-list text dump: header "rows cols nnz", then "row col value" lines."""
    csr = op.to_csr().tocoo()
    with open(path, "w") as fh:
        fh.write(f"{op.shape[0]} {op.shape[1]} {csr.nnz}\n")
        for r, c, v in zip(csr.row, csr.col, csr.data):
            fh.write(f"{r} {c} {float(v)!r}\n")
