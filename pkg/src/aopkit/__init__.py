"""Angle of Progression measurement and reliability-guided adaptation.

The package measures the Angle of Progression (AoP) from intrapartum
ultrasound segmentation outputs, scores each measurement with a
confidence derived from the boundary pixels that define it, and can
adapt a small logit head at test time by descending on entropy, total
variation and the negative log of that confidence.
"""

from .errors import (
    AnisotropicSpacing,
    AopKitError,
    DegenerateAxis,
    DegenerateFit,
    EmptyStructure,
    FormatError,
    InsufficientPoints,
    InvalidInput,
    InvalidSpec,
    InvalidTriangle,
    MissingStructure,
    PointNotExterior,
)
from .estimators import AopMeasurer, ReliabilityGuidedAdapter
from .geometry import (
    AopResult,
    Ellipse,
    PsAxis,
    aop_confidence,
    aop_from_sides,
    compute_aop,
    fit_ellipse_weighted,
    ps_axis,
    select_tangent,
    tangent_points,
)
from .metrics import (
    MetricsReport,
    aggregate,
    aop_abs_error,
    asd,
    dice,
    evaluate_pair,
    hd_percentile,
    surface_distances,
)
from .morphology import (
    Component,
    WeightedPoints,
    boundary_points,
    largest_component,
    weighted_boundary,
)
from .phantom import (
    ConfField,
    Corruption,
    PhantomCase,
    PhantomSpec,
    PsSegment,
    corrupt,
    generate,
    load_case,
    save_case,
    suite,
)
from .raster import (
    CLASS_BACKGROUND,
    CLASS_FH,
    CLASS_PS,
    ConfMap,
    LabelMask,
    LogitMap,
    PixelSpacing,
    ProbMap,
    argmax_labels,
    read_f32r,
    read_mask_pgm,
    softmax,
    write_f32r,
    write_mask_pgm,
)
from .tta import (
    AdaptParams,
    TrainableMask,
    TtaConfig,
    TtaTrace,
    adapt,
    aop_conf_loss,
    apply_head,
    entropy_loss,
    grad_aop_fd,
    grad_ent_tv,
    total_loss,
    tv_loss,
)
from .viz import render_svg

__version__ = "0.1.0"

__all__ = [
    "AdaptParams",
    "AnisotropicSpacing",
    "AopKitError",
    "AopMeasurer",
    "AopResult",
    "CLASS_BACKGROUND",
    "CLASS_FH",
    "CLASS_PS",
    "Component",
    "ConfField",
    "ConfMap",
    "Corruption",
    "DegenerateAxis",
    "DegenerateFit",
    "Ellipse",
    "EmptyStructure",
    "FormatError",
    "InsufficientPoints",
    "InvalidInput",
    "InvalidSpec",
    "InvalidTriangle",
    "LabelMask",
    "LogitMap",
    "MetricsReport",
    "MissingStructure",
    "PhantomCase",
    "PhantomSpec",
    "PixelSpacing",
    "PointNotExterior",
    "ProbMap",
    "PsAxis",
    "PsSegment",
    "ReliabilityGuidedAdapter",
    "TrainableMask",
    "TtaConfig",
    "TtaTrace",
    "WeightedPoints",
    "adapt",
    "aggregate",
    "aop_abs_error",
    "aop_conf_loss",
    "aop_confidence",
    "aop_from_sides",
    "apply_head",
    "argmax_labels",
    "asd",
    "boundary_points",
    "compute_aop",
    "corrupt",
    "dice",
    "entropy_loss",
    "evaluate_pair",
    "fit_ellipse_weighted",
    "generate",
    "grad_aop_fd",
    "grad_ent_tv",
    "hd_percentile",
    "largest_component",
    "load_case",
    "ps_axis",
    "read_f32r",
    "read_mask_pgm",
    "render_svg",
    "save_case",
    "select_tangent",
    "softmax",
    "suite",
    "surface_distances",
    "tangent_points",
    "total_loss",
    "tv_loss",
    "weighted_boundary",
    "write_f32r",
    "write_mask_pgm",
]
