"""Terrain point-cloud hole filling.

Decomposes a cloud into a smooth B-spline base surface plus a signed
relative-height image, inpaints the holes of that image, and synthesizes
new points back on the surface.
"""

from .bspline import (
    BSplineSurface,
    FitConfig,
    FitObjective,
    FitResult,
    Partials,
    ProjectionBatch,
    ProjectionResult,
    basis,
    fit_step,
    fit_surface,
    initialize_surface,
    parameterize_uniform,
    project_point,
    project_points,
    read_surface,
    uniform_clamped_knots,
    write_surface,
)
from .cli import PipelineConfig, RunReport, run_pipeline, run_stage
from .cloudio import read_cloud, write_cloud
from .errors import (
    DegenerateFootprint,
    DegenerateTangent,
    EmptyCloud,
    EmptyProjection,
    HoleCoverageFailure,
    InvalidParameter,
    NoValidSourcePatch,
    ParseError,
    SingularSystem,
    SolverDivergence,
    StageFailure,
    TerrafillError,
    UncoveredHoleCell,
)
from .heightfield import (
    HeightField,
    ProjectionSet,
    SignedProjection,
    choose_resolution,
    estimate_density,
    project_cloud,
    rasterize,
    read_heightfield,
    write_heightfield,
    write_pgm_preview,
)
from .inpaint2d import (
    GradientField,
    InpaintConfig,
    NearestNeighborField,
    aggregate_gradients,
    compute_gradients,
    dump_nnf,
    inpaint,
    patch_match,
    solve_poisson,
    write_gradient_fields,
)
from .metrics import (
    SATURATED,
    MetricReport,
    Saturated,
    compute_report,
    error_map,
    gpsnr,
    nrmse_fit,
    nshd,
    rmse_maps,
    write_error_map,
    write_report,
    write_report_csv,
)
from .pointcloud import (
    KdIndex,
    OrientedBoundingBox,
    PointCloud,
    compute_obb,
    concat_clouds,
    estimate_normals,
    footprint_box,
    orient_normals,
    voxel_downsample,
)
from .reconstruct import (
    ReconstructionSample,
    fill_holes,
    halton_sequence,
    sample_intensity,
    surface_normal,
    synthesize_samples,
)

__version__ = "0.1.0"
