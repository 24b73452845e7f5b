import numpy as np
import pytest

from twobounce.operators import build_operator
from twobounce.recon import (
    Reconstruction,
    backproject,
    iou,
    laplacian_filter,
    read_volume,
    shadow_masks,
    threshold,
    voxel_carve,
    write_volume,
)
from twobounce.scene import VoxelGrid, trace_rays, two_wall_scene
from twobounce.transient import (
    OccupancyVolume,
    TransientCube,
    empty_occupancy,
    empty_transient,
    identity_pattern,
    light_transient,
    shadow_transient,
)

from conftest import make_desk_scene


def volume_from(values, voxel_size=1.0):
    values = np.asarray(values, dtype=np.float64)
    grid = VoxelGrid(origin=(0, 0, 0), voxel_size=voxel_size, dims=values.shape)
    return OccupancyVolume(grid=grid, values=values)


def rec_of(values, voxel_size=1.0):
    return Reconstruction(volume=volume_from(values, voxel_size), method="bp")


class TestBackproject:
    def test_zero_measurement(self, desk_scene):
        op = build_operator(desk_scene, identity_pattern(desk_scene.n_sources))
        cubes = [
            TransientCube(values=np.zeros((*desk_scene.detector_shape, desk_scene.time.n_bins)),
                          kind="shadow")
            for _ in range(op.n_captures)
        ]
        rec = backproject(op, cubes)
        assert rec.method == "bp"
        assert not rec.volume.values.any()
        assert rec.scene_hash and rec.pattern_hash

    def test_single_voxel_argmax(self, desk_scene):
        op = build_operator(desk_scene, identity_pattern(desk_scene.n_sources))
        occ = empty_occupancy(desk_scene.grid)
        occ.values[2, 2, 2] = 1
        pattern = identity_pattern(desk_scene.n_sources)
        shadows = []
        for row in pattern.matrix:
            e = empty_transient(desk_scene, row)
            l = light_transient(desk_scene, occ, row)
            shadows.append(shadow_transient(e, l))
        rec = backproject(op, shadows)
        assert int(np.argmax(rec.volume.flat())) == desk_scene.grid.linear_index(2, 2, 2)

    def test_linear_in_measurement(self, desk_scene):
        op = build_operator(desk_scene, identity_pattern(desk_scene.n_sources))
        rng = np.random.default_rng(0)
        dims = (*desk_scene.detector_shape, desk_scene.time.n_bins)
        a = [TransientCube(values=rng.random(dims), kind="shadow") for _ in range(op.n_captures)]
        b = [TransientCube(values=rng.random(dims), kind="shadow") for _ in range(op.n_captures)]
        combo = [
            TransientCube(values=2.0 * x.values + 3.0 * y.values, kind="shadow")
            for x, y in zip(a, b)
        ]
        np.testing.assert_allclose(
            backproject(op, combo).volume.values,
            2.0 * backproject(op, a).volume.values + 3.0 * backproject(op, b).volume.values,
            rtol=1e-12,
            atol=1e-12,
        )


class TestLaplacianFilter:
    def test_constant_volume_maps_to_zero(self):
        rec = rec_of(np.full((5, 5, 5), 3.7))
        out = laplacian_filter(rec)
        np.testing.assert_allclose(out.volume.values, 0.0, atol=1e-12)
        assert out.method == "fbp"

    def test_impulse_stencil(self):
        values = np.zeros((5, 5, 5))
        values[2, 2, 2] = 1.0
        out = laplacian_filter(rec_of(values, voxel_size=0.5)).volume.values
        h2 = 0.25
        assert out[2, 2, 2] == pytest.approx(6.0 / h2)
        assert out[1, 2, 2] == pytest.approx(-1.0 / h2)
        assert out[2, 3, 2] == pytest.approx(-1.0 / h2)

    def test_planar_volume_uses_2d_stencil(self):
        values = np.zeros((5, 1, 5))
        values[2, 0, 2] = 1.0
        out = laplacian_filter(rec_of(values)).volume.values
        assert out[2, 0, 2] == pytest.approx(4.0)

    def test_quadratic_field(self):
        h = 0.1
        grid = np.arange(9) * h
        x, y, z = np.meshgrid(grid, grid, grid, indexing="ij")
        a = 2.5
        values = a * (x**2 + y**2 + z**2)
        out = laplacian_filter(rec_of(values, voxel_size=h)).volume.values
        interior = out[2:-2, 2:-2, 2:-2]
        np.testing.assert_allclose(interior, -6.0 * a, rtol=1e-2)

    def test_affine_annihilated_in_interior(self):
        h = 0.2
        grid = np.arange(7) * h
        x, y, z = np.meshgrid(grid, grid, grid, indexing="ij")
        values = 1.0 + 2.0 * x - 3.0 * y + 0.5 * z
        out = laplacian_filter(rec_of(values, voxel_size=h)).volume.values
        interior = out[1:-1, 1:-1, 1:-1]
        assert np.abs(interior).max() <= 1e-9 * np.abs(values).max() / h**2

    def test_thin_axis_rejected(self):
        with pytest.raises(ValueError, match="extent"):
            laplacian_filter(rec_of(np.zeros((2, 5, 5))))


class TestThreshold:
    def test_fraction_of_max_keeps_argmax_only(self):
        values = np.zeros((3, 3, 1))
        values[0, 0, 0] = 2.0
        values[1, 1, 0] = 2.0
        values[2, 2, 0] = 1.0
        out = threshold(rec_of(values), "fraction_of_max", 1.0)
        assert out.binary
        assert out.values.sum() == 2
        assert out.values[0, 0, 0] == 1 and out.values[1, 1, 0] == 1

    def test_param_zero_keeps_nonnegative(self):
        values = np.array([[[-1.0, 0.0, 0.5, 2.0]]])
        out = threshold(rec_of(values), "fraction_of_max", 0.0)
        np.testing.assert_array_equal(out.values[0, 0], [0, 1, 1, 1])

    def test_all_zero_gives_empty(self):
        out = threshold(rec_of(np.zeros((2, 2, 2))), "fraction_of_max", 0.5)
        assert not out.values.any()
        out = threshold(rec_of(np.zeros((2, 2, 2))), "otsu")
        assert not out.values.any()

    def test_otsu_separates_bimodal(self):
        rng = np.random.default_rng(0)
        values = np.where(rng.random((6, 6, 6)) < 0.4, 0.1, 0.9)
        out = threshold(rec_of(values), "otsu")
        np.testing.assert_array_equal(out.values, (values > 0.5).astype(np.uint8))

    def test_unknown_method(self):
        with pytest.raises(ValueError, match="method"):
            threshold(rec_of(np.zeros((2, 2, 2))), "nope")


def carve_scene():
    return two_wall_scene(
        wall_length=3.0, separation=2.0, standoff=2.0, wall_height=3.0,
        n_illum=(4, 4), n_obs=(8, 8), voxel_size=0.1,
        region=(-0.2, 0.2, 1.3, 1.7, 3.3, 3.7), bin_width=100e-12,
    )


class TestVoxelCarve:
    def test_all_shadowed_keeps_covered_voxels(self):
        scene = carve_scene()
        rays = trace_rays(scene)
        n_u, n_v = scene.detector_shape
        masks = [np.ones((n_u, n_v), dtype=bool)] * scene.n_sources
        hull = voxel_carve(scene, masks, rays)
        covered = np.bincount(rays.vox_idx, minlength=scene.grid.n_voxels) > 0
        np.testing.assert_array_equal(hull.flat().astype(bool), covered)

    def test_all_lit_gives_empty(self):
        scene = carve_scene()
        n_u, n_v = scene.detector_shape
        masks = [np.zeros((n_u, n_v), dtype=bool)] * scene.n_sources
        hull = voxel_carve(scene, masks)
        assert not hull.values.any()

    def test_mask_count_mismatch(self):
        scene = carve_scene()
        with pytest.raises(ValueError, match="masks"):
            voxel_carve(scene, [np.ones(scene.detector_shape, dtype=bool)])

    def test_monotone_in_shadowed_pixels(self):
        scene = carve_scene()
        rays = trace_rays(scene)
        rng = np.random.default_rng(3)
        n_u, n_v = scene.detector_shape
        masks = [rng.random((n_u, n_v)) < 0.5 for _ in range(scene.n_sources)]
        hull_a = voxel_carve(scene, masks, rays)
        grown = [m.copy() for m in masks]
        grown[0][~grown[0]] = rng.random((~grown[0]).sum()) < 0.5
        hull_b = voxel_carve(scene, grown, rays)
        assert (hull_b.values >= hull_a.values).all()

    def test_hull_contains_object_noiseless(self):
        scene = carve_scene()
        rays = trace_rays(scene)
        rng = np.random.default_rng(11)
        k = scene.n_sources
        occ = empty_occupancy(scene.grid)
        occ.values[1:3, 1:3, 1:3] = 1
        lights, empties = [], []
        for src in range(k):
            row = np.zeros(k)
            row[src] = 1
            empties.append(empty_transient(scene, row, rays))
            lights.append(light_transient(scene, occ, row, rays))
        masks = shadow_masks(lights, empties)
        hull = voxel_carve(scene, masks, rays)
        false_negatives = np.logical_and(occ.values > 0, hull.values == 0)
        assert not false_negatives.any()


class TestShadowMasks:
    def test_blocked_detectors_marked(self):
        scene = carve_scene()
        occ = empty_occupancy(scene.grid)
        occ.values[:] = 1
        row = np.zeros(scene.n_sources)
        row[0] = 1
        e = empty_transient(scene, row)
        l = light_transient(scene, occ, row)
        (mask,) = shadow_masks([l], [e])
        from twobounce.transient import intensity_projection

        blocked = (intensity_projection(e) > 0) & (intensity_projection(l) == 0)
        assert (mask[blocked]).all()

    def test_zero_evidence_pixels_do_not_carve(self):
        scene = carve_scene()
        dims = scene.detector_shape
        zero = TransientCube(values=np.zeros((*dims, 2)), kind="empty")
        (mask,) = shadow_masks([zero], [zero])
        assert mask.all()  # no evidence -> shadowed -> never carves


class TestIoU:
    def grid(self):
        return VoxelGrid(origin=(0, 0, 0), voxel_size=1.0, dims=(3, 1, 1))

    def binary(self, bits):
        return OccupancyVolume(
            grid=self.grid(), values=np.asarray(bits, dtype=np.uint8).reshape(3, 1, 1),
            binary=True,
        )

    def test_identical(self):
        v = self.binary([1, 0, 1])
        assert iou(v, v) == 1.0

    def test_disjoint(self):
        assert iou(self.binary([1, 0, 0]), self.binary([0, 1, 1])) == 0.0

    def test_half_overlapping_slabs(self):
        grid = VoxelGrid(origin=(0, 0, 0), voxel_size=1.0, dims=(4, 1, 1))
        a = OccupancyVolume(grid=grid, values=np.array([1, 1, 0, 0], dtype=np.uint8).reshape(4, 1, 1), binary=True)
        b = OccupancyVolume(grid=grid, values=np.array([0, 1, 1, 0], dtype=np.uint8).reshape(4, 1, 1), binary=True)
        assert iou(a, b) == pytest.approx(1.0 / 3.0)

    def test_both_empty(self):
        assert iou(self.binary([0, 0, 0]), self.binary([0, 0, 0])) == 1.0

    def test_grid_mismatch(self):
        other = OccupancyVolume(
            grid=VoxelGrid(origin=(0, 0, 0), voxel_size=0.5, dims=(3, 1, 1)),
            values=np.zeros((3, 1, 1), dtype=np.uint8),
            binary=True,
        )
        with pytest.raises(ValueError, match="grids"):
            iou(self.binary([0, 0, 0]), other)


class TestVolumeFile:
    def test_real_round_trip(self, tmp_path):
        grid = VoxelGrid(origin=(0.5, -1.0, 2.0), voxel_size=0.05, dims=(4, 3, 2))
        vol = OccupancyVolume(grid=grid, values=np.random.default_rng(0).random((4, 3, 2)))
        path = tmp_path / "v.vol"
        write_volume(path, vol)
        back = read_volume(path)
        assert not back.binary
        assert back.grid.dims == grid.dims
        np.testing.assert_allclose(back.values, vol.values.astype(np.float32))
        np.testing.assert_allclose(back.grid.origin, grid.origin, atol=1e-6)

    def test_binary_round_trip(self, tmp_path):
        grid = VoxelGrid(origin=(0, 0, 0), voxel_size=1.0, dims=(2, 2, 2))
        vol = OccupancyVolume(
            grid=grid, values=np.eye(2, dtype=np.uint8)[:, :, None].repeat(2, axis=2),
            binary=True,
        )
        path = tmp_path / "b.vol"
        write_volume(path, vol)
        back = read_volume(path)
        assert back.binary
        np.testing.assert_array_equal(back.values, vol.values)

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "x.vol"
        path.write_bytes(b"XXXX" + b"\0" * 30)
        with pytest.raises(ValueError, match="magic"):
            read_volume(path)
