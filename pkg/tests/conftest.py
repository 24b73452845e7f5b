import numpy as np
import pytest

from twobounce.scene import RelayWall, SceneConfig, TimeAxis, VoxelGrid, fit_time_axis


def make_desk_scene(
    *,
    illum_grid=(4, 4),
    obs_grid=(8, 8),
    grid_dims=(5, 5, 5),
    voxel_size=0.1,
    n_bins=64,
    include_falloff=False,
    laser_intensity=1.0,
):
    """Small two-wall scene with exactly n_bins covering every arrival."""
    illum = RelayWall(
        origin=np.array([1.0, 0.0, 2.0]),
        edge_u=np.array([0.0, 0.0, 2.0]),
        edge_v=np.array([0.0, 2.0, 0.0]),
        grid_u=illum_grid[0],
        grid_v=illum_grid[1],
    )
    obs = RelayWall(
        origin=np.array([-1.0, 0.0, 2.0]),
        edge_u=np.array([0.0, 0.0, 2.0]),
        edge_v=np.array([0.0, 2.0, 0.0]),
        grid_u=obs_grid[0],
        grid_v=obs_grid[1],
    )
    half = 0.5 * voxel_size * np.asarray(grid_dims)
    center = np.array([0.0, 1.0, 3.0])
    grid = VoxelGrid(origin=center - half, voxel_size=voxel_size, dims=grid_dims)
    scene = SceneConfig(
        laser_origin=np.array([0.0, 1.0, 0.0]),
        camera_origin=np.array([0.0, 1.0, 0.0]),
        illum_wall=illum,
        obs_wall=obs,
        grid=grid,
        time=TimeAxis(bin_width=1e-9, n_bins=1),
        laser_intensity=laser_intensity,
        include_falloff=include_falloff,
    )
    probe = fit_time_axis(scene, 1e-12)
    span = probe.time.n_bins * 1e-12
    width = span / max(1, n_bins - 1)
    fitted = fit_time_axis(scene, width)
    assert fitted.time.n_bins <= n_bins
    from dataclasses import replace

    return replace(
        fitted, time=TimeAxis(bin_width=width, n_bins=n_bins, t_offset=fitted.time.t_offset)
    )


@pytest.fixture
def desk_scene():
    return make_desk_scene()
