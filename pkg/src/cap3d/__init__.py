"""Class-specific anchor sizing, BEV rasterization and 3D proposal metrics.

The pipeline mirrors a clustering-based anchoring strategy for 3D object
detection on KITTI-format data: per-class K-means or GMM clustering of
object (L, H, W) dimensions yields anchor sizes; dense anchors over the
birds-eye-view crop are scored against ground truth by exact rotated-box
overlaps; and externally produced proposals/detections are evaluated with
recall-versus-N curves and difficulty-bucketed 3D average precision.
"""

from .anchors import (
    Anchor,
    AnchorConfig,
    AnchorSet,
    best_overlap_fraction,
    filter_empty_anchors,
    generate_anchors,
)
from .bev import BevConfig, BevMap, crop_points, density_encode, rasterize_bev, render_bev
from .clustering import (
    ClusterConfig,
    DimensionSample,
    GmmModel,
    InitScheme,
    KMeansModel,
    anchor_sizes_from_model,
    collect_dimensions,
    gmm_fit,
    gmm_m_step,
    gmm_responsibilities,
    kmeans_assign,
    kmeans_fit,
)
from .config import RunConfig, load_config
from .errors import (
    CalibrationError,
    Cap3dError,
    DatasetError,
    DegenerateComponentError,
    EvaluationError,
    FormatError,
    LabelFormatError,
    NumericalError,
    PointCloudFormatError,
)
from .evaluation import (
    ApResult,
    CoverageHistogram,
    DetectionSet,
    Difficulty,
    DifficultyFilter,
    EvalBox,
    ProposalSet,
    RecallCurve,
    assign_difficulty,
    average_precision,
    box3d_from_label,
    coverage_histogram,
    footprint_from_label,
    ingest_detections,
    ingest_proposals,
    recall_at_n,
)
from .fixture import FixtureSpec, generate_fixture
from .geometry import (
    Box3D,
    OrientedBox2D,
    box_corners,
    iou_3d,
    iou_bev,
    overlap_fraction,
    polygon_intersection_area,
)
from .kitti_io import (
    CalibrationSet,
    Frame,
    FrameDataset,
    ObjectLabel,
    PointCloud,
    parse_calib_file,
    parse_label_file,
    read_point_cloud,
    transform_to_rect_camera,
)

__version__ = "0.1.0"
