"""Config-driven experiment runner and file output.

Experiments are described by a TOML config (``schema = 1``) naming a scene,
a hidden occupancy, an illumination pattern, optional photon noise, and a
pipeline (simulate, reconstruct, sweep, snr, carve_baseline).  Every run
writes its artifacts plus a JSON manifest carrying the echoed config,
seeds, file hashes, and metrics, so a run is reproducible byte for byte
from its manifest.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Optional

import numpy as np

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from . import analysis, recon, transient
from .operators import build_operator
from .scene import RelayWall, SceneConfig, TimeAxis, VoxelGrid, fit_time_axis, trace_rays
from .transient import (
    MultiplexPattern,
    OccupancyVolume,
    block_pattern,
    clamp_nonnegative,
    empty_transient,
    identity_pattern,
    intensity_projection,
    light_transient,
    multiplex,
    poisson_sample,
    random_pattern,
    shadow_transient,
    strided_pattern,
)

__all__ = [
    "ConfigError",
    "PipelineError",
    "ExperimentConfig",
    "FONT_5X7",
    "letter_cells",
    "make_letter_occupancy",
    "make_box_occupancy",
    "make_stick_figure_occupancy",
    "parse_config",
    "serialize_config",
    "run_experiment",
    "write_slice_images",
    "default_apparatus_position",
    "main",
]


class ConfigError(ValueError):
    """Invalid or ill-formed experiment configuration."""


class PipelineError(RuntimeError):
    """A pipeline stage failed; carries the stage name."""

    def __init__(self, stage: str, cause: Exception):
        super().__init__(f"stage '{stage}' failed: {cause}")
        self.stage = stage
        self.cause = cause


# -- letter bitmaps -----------------------------------------------------------
#
# Minimalist 5x7 font (5 wide, 7 tall), '#' marks an occupied cell, row 0 is
# the top of the glyph.  'I' is a bare 5-cell vertical stroke.

FONT_5X7: dict[str, tuple[str, ...]] = {
    "A": (".###.", "#...#", "#...#", "#####", "#...#", "#...#", "#...#"),
    "B": ("####.", "#...#", "#...#", "####.", "#...#", "#...#", "####."),
    "C": (".####", "#....", "#....", "#....", "#....", "#....", ".####"),
    "D": ("####.", "#...#", "#...#", "#...#", "#...#", "#...#", "####."),
    "E": ("#####", "#....", "#....", "####.", "#....", "#....", "#####"),
    "F": ("#####", "#....", "#....", "####.", "#....", "#....", "#...."),
    "G": (".####", "#....", "#....", "#.###", "#...#", "#...#", ".###."),
    "H": ("#...#", "#...#", "#...#", "#####", "#...#", "#...#", "#...#"),
    "I": (".....", "..#..", "..#..", "..#..", "..#..", "..#..", "....."),
    "J": ("....#", "....#", "....#", "....#", "#...#", "#...#", ".###."),
    "K": ("#...#", "#..#.", "#.#..", "##...", "#.#..", "#..#.", "#...#"),
    "L": ("#....", "#....", "#....", "#....", "#....", "#....", "#####"),
    "M": ("#...#", "##.##", "#.#.#", "#.#.#", "#...#", "#...#", "#...#"),
    "N": ("#...#", "##..#", "##..#", "#.#.#", "#..##", "#..##", "#...#"),
    "O": (".###.", "#...#", "#...#", "#...#", "#...#", "#...#", ".###."),
    "P": ("####.", "#...#", "#...#", "####.", "#....", "#....", "#...."),
    "Q": (".###.", "#...#", "#...#", "#...#", "#.#.#", "#..#.", ".##.#"),
    "R": ("####.", "#...#", "#...#", "####.", "#.#..", "#..#.", "#...#"),
    "S": (".####", "#....", "#....", ".###.", "....#", "....#", "####."),
    "T": ("#####", "..#..", "..#..", "..#..", "..#..", "..#..", "..#.."),
    "U": ("#...#", "#...#", "#...#", "#...#", "#...#", "#...#", ".###."),
    "V": ("#...#", "#...#", "#...#", "#...#", "#...#", ".#.#.", "..#.."),
    "W": ("#...#", "#...#", "#...#", "#.#.#", "#.#.#", "##.##", "#...#"),
    "X": ("#...#", "#...#", ".#.#.", "..#..", ".#.#.", "#...#", "#...#"),
    "Y": ("#...#", "#...#", ".#.#.", "..#..", "..#..", "..#..", "..#.."),
    "Z": ("#####", "....#", "...#.", "..#..", ".#...", "#....", "#####"),
}

GLYPH_W, GLYPH_H = 5, 7

_AXES = {"x": 0, "y": 1, "z": 2}


def _letter_plane_axes(plane_axis: str) -> tuple[int, int]:
    """(horizontal, vertical) grid axes for glyphs on the given plane.

    Upright letters use y as the vertical when it is free; letters on a
    y-plane stand up along z.
    """
    if plane_axis == "x":
        return 2, 1
    if plane_axis == "y":
        return 0, 2
    if plane_axis == "z":
        return 0, 1
    raise ValueError(f"unknown plane axis {plane_axis!r}")


def letter_cells(
    grid: VoxelGrid, letters: str, plane_axis: str = "x", plane_offset: int = 0, spacing: int = 1
) -> list[list[tuple[int, int, int]]]:
    """Per-letter voxel (i, j, k) lists for glyphs extruded on a grid plane.

    Letters are placed left to right along the plane's horizontal axis with
    ``spacing`` empty columns between them, the whole block centered in the
    plane.  Raises when a character is outside A-Z or the block does not fit.
    """
    if not letters:
        return []
    for ch in letters:
        if ch not in FONT_5X7:
            raise ValueError(f"no glyph for character {ch!r} (A-Z only)")
    axis = _AXES[plane_axis]
    if not 0 <= plane_offset < grid.dims[axis]:
        raise ValueError(f"plane offset {plane_offset} outside grid axis {plane_axis}")
    h_axis, v_axis = _letter_plane_axes(plane_axis)
    width = len(letters) * GLYPH_W + (len(letters) - 1) * spacing
    h_extent, v_extent = grid.dims[h_axis], grid.dims[v_axis]
    if width > h_extent or GLYPH_H > v_extent:
        raise ValueError(
            f"letters {letters!r} need {width}x{GLYPH_H} cells, plane has {h_extent}x{v_extent}"
        )
    h0 = (h_extent - width) // 2
    v0 = (v_extent - GLYPH_H) // 2
    out = []
    for idx, ch in enumerate(letters):
        cells = []
        glyph = FONT_5X7[ch]
        base_h = h0 + idx * (GLYPH_W + spacing)
        for row, line in enumerate(glyph):
            for col, mark in enumerate(line):
                if mark == "#":
                    pos = [0, 0, 0]
                    pos[axis] = plane_offset
                    pos[h_axis] = base_h + col
                    pos[v_axis] = v0 + (GLYPH_H - 1 - row)
                    cells.append(tuple(pos))
        out.append(cells)
    return out


def make_letter_occupancy(
    grid: VoxelGrid, letters: str, plane_axis: str = "x", plane_offset: int = 0, spacing: int = 1
) -> OccupancyVolume:
    """Binary occupancy of bitmap letters extruded one voxel thick on a plane."""
    values = np.zeros(grid.dims, dtype=np.uint8)
    for cells in letter_cells(grid, letters, plane_axis, plane_offset, spacing):
        for i, j, k in cells:
            values[i, j, k] = 1
    return OccupancyVolume(grid=grid, values=values, binary=True)


def make_box_occupancy(grid: VoxelGrid, lo: tuple, hi: tuple) -> OccupancyVolume:
    """Axis-aligned box of occupied voxels, lo inclusive, hi exclusive."""
    lo = tuple(int(v) for v in lo)
    hi = tuple(int(v) for v in hi)
    for a in range(3):
        if not (0 <= lo[a] < hi[a] <= grid.dims[a]):
            raise ValueError(f"box range [{lo[a]}, {hi[a]}) invalid on axis {a}")
    values = np.zeros(grid.dims, dtype=np.uint8)
    values[lo[0]:hi[0], lo[1]:hi[1], lo[2]:hi[2]] = 1
    return OccupancyVolume(grid=grid, values=values, binary=True)


def _frac_span(extent: int, lo: float, hi: float) -> tuple[int, int]:
    a = int(round(lo * extent))
    b = max(a + 1, int(round(hi * extent)))
    return min(a, extent - 1), min(b, extent)


def make_stick_figure_occupancy(grid: VoxelGrid) -> OccupancyVolume:
    """Articulated stick-figure proxy: torso, head, two arms, two legs.

    Boxes are placed by fixed fractions of the grid extents (x depth,
    y vertical, z horizontal), standing upright and centered in z.  Stands
    in for an articulated test object when no mesh assets are available.
    """
    nx, ny, nz = grid.dims
    d0, d1 = _frac_span(nx, 0.5 - 1.0 / 6, 0.5 + 1.0 / 6) if nx > 1 else (0, 1)
    parts = [
        ((0.35, 0.72), (0.40, 0.60)),  # torso
        ((0.76, 0.92), (0.44, 0.56)),  # head
        ((0.55, 0.68), (0.12, 0.40)),  # left arm
        ((0.55, 0.68), (0.60, 0.88)),  # right arm
        ((0.05, 0.35), (0.40, 0.47)),  # left leg
        ((0.05, 0.35), (0.53, 0.60)),  # right leg
    ]
    values = np.zeros(grid.dims, dtype=np.uint8)
    for (ylo, yhi), (zlo, zhi) in parts:
        j0, j1 = _frac_span(ny, ylo, yhi)
        k0, k1 = _frac_span(nz, zlo, zhi)
        values[d0:d1, j0:j1, k0:k1] = 1
    return OccupancyVolume(grid=grid, values=values, binary=True)


# -- experiment config --------------------------------------------------------

PIPELINES = ("simulate", "reconstruct", "sweep", "snr", "carve_baseline")
OCCUPANCY_SOURCES = ("letters", "box", "mannequin_proxy", "file", "empty")
PATTERN_KINDS = ("identity", "blocks", "strided", "random")
THRESHOLD_METHODS = ("fraction_of_max", "otsu")


@dataclass
class ExperimentConfig:
    """Fully validated experiment description with all defaults applied."""

    scene: SceneConfig
    pipeline: str
    occupancy_source: str
    occupancy_params: dict
    pattern_kind: str
    captures: int
    pattern_seed: int
    noise_enabled: bool
    photon_scale: float
    noise_seed: int
    threshold_method: str
    threshold_param: float
    use_transients: bool
    sweep_spatial: list[int]
    sweep_temporal_ps: list[float]
    sweep_captures: list[int]
    output_dir: str
    slice_axis: str
    time_auto: bool = field(compare=False, default=False)

    def pattern(self) -> MultiplexPattern:
        k = self.scene.n_sources
        if self.pattern_kind == "identity":
            return identity_pattern(k)
        if self.pattern_kind == "blocks":
            return block_pattern(k, self.captures)
        if self.pattern_kind == "strided":
            return strided_pattern(k, self.captures)
        return random_pattern(k, self.captures, self.pattern_seed)

    def occupancy(self) -> OccupancyVolume:
        grid = self.scene.grid
        p = self.occupancy_params
        if self.occupancy_source == "letters":
            return make_letter_occupancy(
                grid, p["letters"], p["plane_axis"], p["plane_offset"], p["spacing"]
            )
        if self.occupancy_source == "box":
            return make_box_occupancy(grid, p["box_min"], p["box_max"])
        if self.occupancy_source == "mannequin_proxy":
            return make_stick_figure_occupancy(grid)
        if self.occupancy_source == "file":
            vol = recon.read_volume(p["path"])
            if not vol.binary:
                raise ConfigError("occupancy file must hold a binary volume")
            if vol.grid.dims != grid.dims:
                raise ConfigError(
                    f"occupancy file dims {vol.grid.dims} do not match scene grid {grid.dims}"
                )
            return OccupancyVolume(grid=grid, values=vol.values, binary=True)
        return transient.empty_occupancy(grid)


def default_apparatus_position(
    illum_wall: RelayWall, obs_wall: RelayWall, grid: VoxelGrid
) -> np.ndarray:
    """Default laser/camera spot: between the walls, 1 m behind the hidden volume.

    Lateral position is the midpoint of the two wall centers; the axial
    position sits 1 m before the grid's nearest extent along the walls'
    mean length direction.
    """
    c_illum = illum_wall.origin + 0.5 * (illum_wall.edge_u + illum_wall.edge_v)
    c_obs = obs_wall.origin + 0.5 * (obs_wall.edge_u + obs_wall.edge_v)
    mid = 0.5 * (c_illum + c_obs)
    u = illum_wall.edge_u / np.linalg.norm(illum_wall.edge_u) + obs_wall.edge_u / np.linalg.norm(
        obs_wall.edge_u
    )
    u = u / np.linalg.norm(u)
    corners = grid.origin[None, :] + (
        np.array(np.meshgrid([0, 1], [0, 1], [0, 1])).T.reshape(-1, 3)
        * (grid.voxel_size * np.asarray(grid.dims))[None, :]
    )
    near = (corners @ u).min()
    return mid + u * (near - mid @ u - 1.0)


def _require(table: dict, key: str, where: str):
    if key not in table:
        raise ConfigError(f"missing key '{where}.{key}'")
    return table[key]


def _check_keys(table: dict, allowed: set, where: str):
    for key in table:
        if key not in allowed:
            raise ConfigError(f"unknown key '{where}.{key}'")


def _vec3(value, where: str) -> np.ndarray:
    arr = np.asarray(value, dtype=np.float64)
    if arr.shape != (3,):
        raise ConfigError(f"'{where}' must be a 3-vector")
    return arr


def _parse_wall(table: dict, where: str) -> RelayWall:
    _check_keys(table, {"origin", "edge_u", "edge_v", "grid"}, where)
    gridspec = _require(table, "grid", where)
    if not (isinstance(gridspec, list) and len(gridspec) == 2):
        raise ConfigError(f"'{where}.grid' must be [grid_u, grid_v]")
    try:
        return RelayWall(
            origin=_vec3(_require(table, "origin", where), f"{where}.origin"),
            edge_u=_vec3(_require(table, "edge_u", where), f"{where}.edge_u"),
            edge_v=_vec3(_require(table, "edge_v", where), f"{where}.edge_v"),
            grid_u=int(gridspec[0]),
            grid_v=int(gridspec[1]),
        )
    except ValueError as exc:
        raise ConfigError(f"invalid wall '{where}': {exc}") from exc


def parse_config(text: str) -> ExperimentConfig:
    """Parse and validate a TOML experiment config; all defaults materialized."""
    try:
        doc = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"config is not valid TOML: {exc}") from exc

    _check_keys(
        doc,
        {"schema", "pipeline", "scene", "occupancy", "pattern", "noise", "threshold",
         "reconstruct", "sweep", "output"},
        "config",
    )
    schema = doc.get("schema")
    if schema != 1:
        raise ConfigError(f"unsupported schema {schema!r} (expected 1)")
    pipeline = doc.get("pipeline", "reconstruct")
    if pipeline not in PIPELINES:
        raise ConfigError(f"unknown pipeline {pipeline!r}")

    scene_tab = _require(doc, "scene", "config")
    _check_keys(
        scene_tab,
        {"laser", "camera", "laser_intensity", "include_falloff", "include_camera_leg",
         "illum_wall", "obs_wall", "grid", "time"},
        "scene",
    )
    illum = _parse_wall(_require(scene_tab, "illum_wall", "scene"), "scene.illum_wall")
    obs = _parse_wall(_require(scene_tab, "obs_wall", "scene"), "scene.obs_wall")

    grid_tab = _require(scene_tab, "grid", "scene")
    _check_keys(grid_tab, {"origin", "voxel_size", "dims"}, "scene.grid")
    dims = _require(grid_tab, "dims", "scene.grid")
    if not (isinstance(dims, list) and len(dims) == 3):
        raise ConfigError("'scene.grid.dims' must be [nx, ny, nz]")
    try:
        grid = VoxelGrid(
            origin=_vec3(_require(grid_tab, "origin", "scene.grid"), "scene.grid.origin"),
            voxel_size=float(_require(grid_tab, "voxel_size", "scene.grid")),
            dims=tuple(int(d) for d in dims),
        )
    except ValueError as exc:
        raise ConfigError(f"invalid grid: {exc}") from exc

    time_tab = _require(scene_tab, "time", "scene")
    _check_keys(time_tab, {"bin_width", "n_bins", "t_offset"}, "scene.time")
    bin_width = float(_require(time_tab, "bin_width", "scene.time"))
    if bin_width <= 0:
        raise ConfigError("'scene.time.bin_width' must be positive")
    n_bins = int(time_tab.get("n_bins", 0))
    time_auto = n_bins == 0
    t_offset = float(time_tab.get("t_offset", 0.0))

    apparatus = None
    if "laser" not in scene_tab or "camera" not in scene_tab:
        apparatus = default_apparatus_position(illum, obs, grid)
    laser = (
        _vec3(scene_tab["laser"], "scene.laser") if "laser" in scene_tab else apparatus
    )
    camera = (
        _vec3(scene_tab["camera"], "scene.camera") if "camera" in scene_tab else apparatus
    )

    try:
        scene = SceneConfig(
            laser_origin=laser,
            camera_origin=camera,
            illum_wall=illum,
            obs_wall=obs,
            grid=grid,
            time=TimeAxis(bin_width=bin_width, n_bins=max(n_bins, 1), t_offset=t_offset),
            laser_intensity=float(scene_tab.get("laser_intensity", 1.0)),
            include_falloff=bool(scene_tab.get("include_falloff", False)),
            include_camera_leg=bool(scene_tab.get("include_camera_leg", False)),
        )
    except ValueError as exc:
        raise ConfigError(f"invalid scene: {exc}") from exc
    if time_auto:
        scene = fit_time_axis(scene, bin_width)

    occ_tab = doc.get("occupancy", {"source": "empty"})
    _check_keys(
        occ_tab,
        {"source", "letters", "plane_axis", "plane_offset", "spacing", "box_min", "box_max", "path"},
        "occupancy",
    )
    source = occ_tab.get("source", "empty")
    if source not in OCCUPANCY_SOURCES:
        raise ConfigError(f"unknown occupancy.source {source!r}")
    occ_params: dict[str, Any] = {}
    if source == "letters":
        occ_params["letters"] = str(_require(occ_tab, "letters", "occupancy"))
        occ_params["plane_axis"] = occ_tab.get("plane_axis", "x")
        if occ_params["plane_axis"] not in _AXES:
            raise ConfigError(f"unknown occupancy.plane_axis {occ_params['plane_axis']!r}")
        occ_params["plane_offset"] = int(occ_tab.get("plane_offset", 0))
        occ_params["spacing"] = int(occ_tab.get("spacing", 1))
    elif source == "box":
        occ_params["box_min"] = [int(v) for v in _require(occ_tab, "box_min", "occupancy")]
        occ_params["box_max"] = [int(v) for v in _require(occ_tab, "box_max", "occupancy")]
    elif source == "file":
        occ_params["path"] = str(_require(occ_tab, "path", "occupancy"))
        if not os.path.exists(occ_params["path"]):
            raise ConfigError(f"occupancy file not found: {occ_params['path']}")

    pattern_tab = doc.get("pattern", {})
    _check_keys(pattern_tab, {"kind", "captures", "seed"}, "pattern")
    kind = pattern_tab.get("kind", "identity")
    if kind not in PATTERN_KINDS:
        raise ConfigError(f"unknown pattern.kind {kind!r}")
    captures = int(pattern_tab.get("captures", scene.n_sources if kind == "identity" else 1))
    pattern_seed = int(pattern_tab.get("seed", 0))
    if captures > scene.n_sources:
        raise ConfigError("pattern.captures exceeds source count")
    if captures < 1:
        raise ConfigError("pattern.captures must be positive")
    if kind == "identity" and captures != scene.n_sources:
        raise ConfigError("identity pattern requires captures == source count")

    noise_tab = doc.get("noise", {})
    _check_keys(noise_tab, {"enabled", "photon_scale", "seed"}, "noise")
    noise_enabled = bool(noise_tab.get("enabled", False))
    photon_scale = float(noise_tab.get("photon_scale", 1.0))
    if photon_scale <= 0:
        raise ConfigError("noise.photon_scale must be positive")
    noise_seed = int(noise_tab.get("seed", 0))

    threshold_tab = doc.get("threshold", {})
    _check_keys(threshold_tab, {"method", "param"}, "threshold")
    threshold_method = threshold_tab.get("method", "fraction_of_max")
    if threshold_method not in THRESHOLD_METHODS:
        raise ConfigError(f"unknown threshold.method {threshold_method!r}")
    threshold_param = float(threshold_tab.get("param", 0.5))

    recon_tab = doc.get("reconstruct", {})
    _check_keys(recon_tab, {"use_transients"}, "reconstruct")
    use_transients = bool(recon_tab.get("use_transients", True))

    sweep_tab = doc.get("sweep", {})
    _check_keys(sweep_tab, {"spatial", "temporal_ps", "captures"}, "sweep")
    sweep_spatial = [int(v) for v in sweep_tab.get("spatial", [])]
    sweep_temporal = [float(v) for v in sweep_tab.get("temporal_ps", [])]
    sweep_captures = [int(v) for v in sweep_tab.get("captures", [])]
    if pipeline == "sweep" and not (sweep_spatial and sweep_temporal and sweep_captures):
        raise ConfigError("sweep pipeline requires sweep.spatial, sweep.temporal_ps, sweep.captures")

    output_tab = doc.get("output", {})
    _check_keys(output_tab, {"dir", "slice_axis"}, "output")
    output_dir = str(output_tab.get("dir", "out"))
    slice_axis = output_tab.get("slice_axis", "z")
    if slice_axis not in _AXES:
        raise ConfigError(f"unknown output.slice_axis {slice_axis!r}")

    return ExperimentConfig(
        scene=scene,
        pipeline=pipeline,
        occupancy_source=source,
        occupancy_params=occ_params,
        pattern_kind=kind,
        captures=captures,
        pattern_seed=pattern_seed,
        noise_enabled=noise_enabled,
        photon_scale=photon_scale,
        noise_seed=noise_seed,
        threshold_method=threshold_method,
        threshold_param=threshold_param,
        use_transients=use_transients,
        sweep_spatial=sweep_spatial,
        sweep_temporal_ps=sweep_temporal,
        sweep_captures=sweep_captures,
        output_dir=output_dir,
        slice_axis=slice_axis,
        time_auto=time_auto,
    )


def _toml_scalar(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    if isinstance(value, (float, np.floating)):
        return repr(float(value))
    if isinstance(value, str):
        return json.dumps(value)
    if isinstance(value, (list, tuple, np.ndarray)):
        return "[" + ", ".join(_toml_scalar(v) for v in value) + "]"
    raise TypeError(f"cannot serialize {type(value)}")


def serialize_config(cfg: ExperimentConfig) -> str:
    """Canonical TOML text for a config; parse(serialize(cfg)) == cfg."""
    scene = cfg.scene
    lines = [f"schema = 1", f"pipeline = {_toml_scalar(cfg.pipeline)}", ""]
    lines += ["[scene]"]
    lines += [f"laser = {_toml_scalar(scene.laser_origin)}"]
    lines += [f"camera = {_toml_scalar(scene.camera_origin)}"]
    lines += [f"laser_intensity = {_toml_scalar(scene.laser_intensity)}"]
    lines += [f"include_falloff = {_toml_scalar(scene.include_falloff)}"]
    lines += [f"include_camera_leg = {_toml_scalar(scene.include_camera_leg)}", ""]
    for name, wall in (("illum_wall", scene.illum_wall), ("obs_wall", scene.obs_wall)):
        lines += [f"[scene.{name}]"]
        lines += [f"origin = {_toml_scalar(wall.origin)}"]
        lines += [f"edge_u = {_toml_scalar(wall.edge_u)}"]
        lines += [f"edge_v = {_toml_scalar(wall.edge_v)}"]
        lines += [f"grid = [{wall.grid_u}, {wall.grid_v}]", ""]
    lines += ["[scene.grid]"]
    lines += [f"origin = {_toml_scalar(scene.grid.origin)}"]
    lines += [f"voxel_size = {_toml_scalar(scene.grid.voxel_size)}"]
    lines += [f"dims = {_toml_scalar(list(scene.grid.dims))}", ""]
    lines += ["[scene.time]"]
    lines += [f"bin_width = {_toml_scalar(scene.time.bin_width)}"]
    lines += [f"n_bins = {scene.time.n_bins}"]
    lines += [f"t_offset = {_toml_scalar(scene.time.t_offset)}", ""]
    lines += ["[occupancy]", f"source = {_toml_scalar(cfg.occupancy_source)}"]
    for key in ("letters", "plane_axis", "plane_offset", "spacing", "box_min", "box_max", "path"):
        if key in cfg.occupancy_params:
            lines += [f"{key} = {_toml_scalar(cfg.occupancy_params[key])}"]
    lines += ["", "[pattern]"]
    lines += [f"kind = {_toml_scalar(cfg.pattern_kind)}"]
    lines += [f"captures = {cfg.captures}"]
    lines += [f"seed = {cfg.pattern_seed}", ""]
    lines += ["[noise]"]
    lines += [f"enabled = {_toml_scalar(cfg.noise_enabled)}"]
    lines += [f"photon_scale = {_toml_scalar(cfg.photon_scale)}"]
    lines += [f"seed = {cfg.noise_seed}", ""]
    lines += ["[threshold]"]
    lines += [f"method = {_toml_scalar(cfg.threshold_method)}"]
    lines += [f"param = {_toml_scalar(cfg.threshold_param)}", ""]
    lines += ["[reconstruct]", f"use_transients = {_toml_scalar(cfg.use_transients)}", ""]
    if cfg.sweep_spatial or cfg.sweep_temporal_ps or cfg.sweep_captures:
        lines += ["[sweep]"]
        lines += [f"spatial = {_toml_scalar(cfg.sweep_spatial)}"]
        lines += [f"temporal_ps = {_toml_scalar(cfg.sweep_temporal_ps)}"]
        lines += [f"captures = {_toml_scalar(cfg.sweep_captures)}", ""]
    lines += ["[output]"]
    lines += [f"dir = {_toml_scalar(cfg.output_dir)}"]
    lines += [f"slice_axis = {_toml_scalar(cfg.slice_axis)}"]
    return "\n".join(lines) + "\n"


# -- artifact output ----------------------------------------------------------

def write_slice_images(volume: OccupancyVolume, axis: str, out_dir, prefix: str = "slice") -> list:
    """One 8-bit PGM per slice along the axis, min-max normalized over the volume.

    A constant volume (max == min) maps every pixel to 0.  Pixel values are
    round(255 * (v - min) / (max - min)), rounding half to even.
    """
    axis_idx = _AXES[axis]
    values = volume.values.astype(np.float64)
    vmin, vmax = float(values.min()), float(values.max())
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    if vmax > vmin:
        norm = np.rint(255.0 * (values - vmin) / (vmax - vmin)).astype(np.uint8)
    else:
        norm = np.zeros_like(values, dtype=np.uint8)
    paths = []
    n = volume.grid.dims[axis_idx]
    for idx in range(n):
        sl = np.take(norm, idx, axis=axis_idx)
        img = sl.T[::-1, :]  # rows run top-down along the second remaining axis
        path = out_dir / f"{prefix}_{axis}_{idx:03d}.pgm"
        with open(path, "wb") as fh:
            fh.write(b"P5\n")
            fh.write(f"{img.shape[1]} {img.shape[0]}\n255\n".encode())
            fh.write(np.ascontiguousarray(img).tobytes())
        paths.append(path)
    return paths


class _ArtifactLog:
    """Tracks written files for the manifest and for cleanup on failure."""

    def __init__(self, root: Path):
        self.root = root
        self.records: list[dict] = []

    def add(self, path: Path):
        data = Path(path).read_bytes()
        self.records.append(
            {
                "path": str(Path(path).relative_to(self.root)),
                "sha256": hashlib.sha256(data).hexdigest(),
                "bytes": len(data),
            }
        )

    def cleanup(self):
        for rec in self.records:
            try:
                (self.root / rec["path"]).unlink()
            except OSError:
                pass


def run_experiment(cfg: ExperimentConfig) -> dict:
    """Execute the configured pipeline end to end and write all artifacts.

    Returns the manifest (also written to ``<output_dir>/manifest.json``).
    Any stage failure removes files written so far and raises
    PipelineError naming the stage.
    """
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    log = _ArtifactLog(out)
    manifest: dict[str, Any] = {
        "schema": 1,
        "pipeline": cfg.pipeline,
        "config": serialize_config(cfg),
        "seeds": {"pattern": cfg.pattern_seed, "noise": cfg.noise_seed if cfg.noise_enabled else None},
        "metrics": {},
        "artifacts": [],
    }
    stage = "setup"
    try:
        if cfg.pipeline == "sweep":
            stage = "sweep"
            records = analysis.coherence_sweep(
                cfg.scene,
                cfg.sweep_spatial,
                [t * 1e-12 for t in cfg.sweep_temporal_ps],
                cfg.sweep_captures,
            )
            path = out / "sweep.csv"
            analysis.write_sweep_csv(records, path)
            log.add(path)
            valid = [r for r in records if r.valid]
            manifest["metrics"]["combinations"] = len(records)
            manifest["metrics"]["valid_combinations"] = len(valid)
            if valid:
                manifest["metrics"]["min_coherence"] = min(r.coherence for r in valid)
        elif cfg.pipeline == "snr":
            stage = "snr"
            snr = analysis.snr_map(replace(cfg.scene, include_falloff=True))
            vol = OccupancyVolume(grid=cfg.scene.grid, values=snr.values, binary=False)
            path = out / "snr.vol"
            recon.write_volume(path, vol)
            log.add(path)
            for p in write_slice_images(vol, cfg.slice_axis, out, prefix="snr"):
                log.add(p)
            manifest["metrics"]["snr_max"] = float(snr.values.max())
            manifest["metrics"]["snr_argmax"] = list(snr.argmax_index())
        elif cfg.pipeline == "carve_baseline":
            stage = "render"
            occ = cfg.occupancy()
            rays = trace_rays(cfg.scene)
            k = cfg.scene.n_sources
            masks = []
            for src in range(k):
                row = np.zeros(k, dtype=np.uint8)
                row[src] = 1
                empty = empty_transient(cfg.scene, row, rays)
                light = light_transient(cfg.scene, occ, row, rays)
                if cfg.noise_enabled:
                    light = poisson_sample(
                        transient.TransientCube(
                            values=light.values * cfg.photon_scale, kind="light"
                        ),
                        seed=cfg.noise_seed + src,
                    )
                    empty = transient.TransientCube(
                        values=empty.values * cfg.photon_scale, kind="empty"
                    )
                masks.append(recon.shadow_masks([light], [empty])[0])
            stage = "carve"
            hull = recon.voxel_carve(cfg.scene, masks, rays)
            path = out / "carve.vol"
            recon.write_volume(path, hull)
            log.add(path)
            for p in write_slice_images(hull, cfg.slice_axis, out, prefix="carve"):
                log.add(p)
            if occ.values.any():
                manifest["metrics"]["iou_carve"] = recon.iou(hull, occ)
                manifest["metrics"]["false_negatives"] = int(
                    np.logical_and(occ.values > 0, hull.values == 0).sum()
                )
        else:
            # simulate / reconstruct share the capture stages
            stage = "occupancy"
            occ = cfg.occupancy()
            stage = "render"
            rays = trace_rays(cfg.scene)
            pattern = cfg.pattern()
            empties, lights = [], []
            for row in pattern.matrix:
                empties.append(empty_transient(cfg.scene, row, rays))
                lights.append(light_transient(cfg.scene, occ, row, rays))
            stage = "noise"
            if cfg.noise_enabled:
                scaled_e, scaled_l = [], []
                for m, (e, l) in enumerate(zip(empties, lights)):
                    scaled_e.append(
                        transient.TransientCube(values=e.values * cfg.photon_scale, kind="empty")
                    )
                    scaled_l.append(
                        poisson_sample(
                            transient.TransientCube(
                                values=l.values * cfg.photon_scale, kind="light"
                            ),
                            seed=cfg.noise_seed + m,
                        )
                    )
                empties, lights = scaled_e, scaled_l
            stage = "shadow"
            shadows = [
                clamp_nonnegative(shadow_transient(e, l)) for e, l in zip(empties, lights)
            ]
            for m, (e, l, s) in enumerate(zip(empties, lights, shadows)):
                for tag, cube in (("empty", e), ("light", l), ("shadow", s)):
                    path = out / f"{tag}_{m:03d}.cube"
                    transient.write_cube(path, cube)
                    log.add(path)
            manifest["metrics"]["total_shadow_photons"] = float(
                sum(s.total() for s in shadows)
            )
            if cfg.pipeline == "reconstruct":
                stage = "operator"
                if cfg.use_transients:
                    op = build_operator(cfg.scene, pattern, rays=rays)
                    meas = shadows
                else:
                    span = cfg.scene.time.n_bins * cfg.scene.time.bin_width
                    flat_scene = replace(
                        cfg.scene,
                        time=TimeAxis(
                            bin_width=span, n_bins=1, t_offset=cfg.scene.time.t_offset
                        ),
                    )
                    op = build_operator(flat_scene, pattern, rays=trace_rays(flat_scene))
                    meas = [
                        transient.TransientCube(
                            values=intensity_projection(s)[:, :, None], kind="shadow"
                        )
                        for s in shadows
                    ]
                stage = "reconstruct"
                bp = recon.backproject(
                    op, meas, noise_seed=cfg.noise_seed if cfg.noise_enabled else None
                )
                fbp = recon.laplacian_filter(bp)
                stage = "threshold"
                bp_bin = recon.threshold(bp, cfg.threshold_method, cfg.threshold_param)
                fbp_bin = recon.threshold(fbp, cfg.threshold_method, cfg.threshold_param)
                stage = "metrics"
                if occ.values.any():
                    manifest["metrics"]["iou_bp"] = recon.iou(bp_bin, occ)
                    manifest["metrics"]["iou_fbp"] = recon.iou(fbp_bin, occ)
                stage = "write"
                for name, vol in (
                    ("bp", bp.volume),
                    ("fbp", fbp.volume),
                    ("bp_binary", bp_bin),
                    ("fbp_binary", fbp_bin),
                ):
                    path = out / f"{name}.vol"
                    recon.write_volume(path, vol)
                    log.add(path)
                for p in write_slice_images(fbp.volume, cfg.slice_axis, out, prefix="fbp"):
                    log.add(p)
    except Exception as exc:
        log.cleanup()
        raise PipelineError(stage, exc) from exc

    manifest["artifacts"] = sorted(log.records, key=lambda r: r["path"])
    manifest_text = json.dumps(manifest, sort_keys=True, indent=2) + "\n"
    (out / "manifest.json").write_text(manifest_text)
    return manifest


def main(argv: Optional[list[str]] = None) -> int:
    parser = argparse.ArgumentParser(
        prog="twobounce",
        description="Two-bounce transient shadow imaging: simulate, reconstruct, analyze.",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    commands = {
        "simulate": "simulate",
        "reconstruct": "reconstruct",
        "sweep": "sweep",
        "snr": "snr",
        "carve": "carve_baseline",
    }
    for name in commands:
        p = sub.add_parser(name)
        p.add_argument("--config", required=True, help="path to a TOML experiment config")
        p.add_argument("--out", default=None, help="override the output directory")
        p.add_argument("--seed", type=int, default=None, help="override the noise seed")
        p.add_argument("--threads", type=int, default=1,
                       help="worker threads (reserved; current pipelines are serial)")
    args = parser.parse_args(argv)
    try:
        if args.threads < 1:
            raise ConfigError("--threads must be >= 1")
        cfg = parse_config(Path(args.config).read_text())
        cfg.pipeline = commands[args.command]
        if args.out is not None:
            cfg.output_dir = args.out
        if args.seed is not None:
            cfg.noise_seed = args.seed
    except (ConfigError, OSError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    try:
        manifest = run_experiment(cfg)
    except PipelineError as exc:
        print(f"runtime error: {exc}", file=sys.stderr)
        return 2
    print(json.dumps({"output_dir": cfg.output_dir, "metrics": manifest["metrics"]}, indent=2))
    return 0


if __name__ == "__main__":
    sys.exit(main())
