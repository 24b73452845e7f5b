"""Two-bounce transient shadow imaging: simulation, reconstruction, analysis."""

from .scene import (
    SPEED_OF_LIGHT,
    RelayWall,
    SceneConfig,
    TimeAxis,
    VoxelGrid,
    fit_time_axis,
    path_bin,
    ray_voxels,
    ray_wall_intersection,
    trace_rays,
    two_wall_scene,
    wall_sample_points,
)
from .transient import (
    MultiplexPattern,
    OccupancyVolume,
    TransientCube,
    block_pattern,
    clamp_nonnegative,
    empty_occupancy,
    empty_transient,
    identity_pattern,
    intensity_projection,
    light_transient,
    multiplex,
    poisson_sample,
    random_pattern,
    read_cube,
    shadow_transient,
    strided_pattern,
    temporal_blur,
    visibility,
    write_cube,
)
from .operators import (
    CoherenceResult,
    MeasurementOperator,
    build_operator,
    dense_materialize,
    export_coo_text,
    gram_column,
    mutual_coherence,
)
from .recon import (
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
from .analysis import (
    SnrMap,
    SweepRecord,
    coherence_sweep,
    psf_fwhm,
    snr_map,
    sparse_recovery_bound,
    write_sweep_csv,
)

__version__ = "0.1.0"
