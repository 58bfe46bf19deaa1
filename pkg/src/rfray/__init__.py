"""Deterministic site-specific radio ray tracing.

Trace multipath through triangle-mesh scenes, synthesize channel
statistics, calibrate endpoint positions against measured power delay
profiles, and validate simulated statistics against measurements.
"""

from .scene import (
    BUILTIN_MATERIALS,
    DiffractionEdge,
    Material,
    Scene,
    SceneError,
    load_scene,
)
from .em import (
    ComplexPermittivity,
    PolarimetricCoefficient,
    WedgeCoefficient,
    fresnel,
    is_smooth,
    penetration,
    permittivity,
    utd_coefficient,
)
from .tracer import (
    AntennaPattern,
    Mechanisms,
    PropagationPath,
    TraceConfig,
    TraceError,
    trace,
)
from .channel import (
    Cir,
    OutageError,
    PathLossFit,
    PointDataRecord,
    PowerDelayProfile,
    angular_spread_3gpp,
    angular_spread_fleury,
    assemble_point_record,
    fit_ci,
    fspl_db,
    omni_path_loss,
    pdp,
    rms_delay_spread,
    spatial_average_stats,
    synthesize_cir,
)
from .calib import (
    CalibConfig,
    CalibrationInfeasibleError,
    CalibrationResult,
    GeoOrigin,
    calibrate,
    gps_to_local,
)
from .validate import (
    FilterReport,
    KsResult,
    PairedSample,
    combined_filter,
    ks_statistic,
    ks_test,
)

__version__ = "0.1.0"

__all__ = [
    "AntennaPattern",
    "BUILTIN_MATERIALS",
    "CalibConfig",
    "CalibrationInfeasibleError",
    "CalibrationResult",
    "Cir",
    "ComplexPermittivity",
    "DiffractionEdge",
    "FilterReport",
    "GeoOrigin",
    "KsResult",
    "Material",
    "Mechanisms",
    "OutageError",
    "PairedSample",
    "PathLossFit",
    "PointDataRecord",
    "PolarimetricCoefficient",
    "PowerDelayProfile",
    "PropagationPath",
    "Scene",
    "SceneError",
    "TraceConfig",
    "TraceError",
    "WedgeCoefficient",
    "angular_spread_3gpp",
    "angular_spread_fleury",
    "assemble_point_record",
    "calibrate",
    "combined_filter",
    "fit_ci",
    "fresnel",
    "fspl_db",
    "gps_to_local",
    "is_smooth",
    "ks_statistic",
    "ks_test",
    "load_scene",
    "omni_path_loss",
    "pdp",
    "penetration",
    "permittivity",
    "rms_delay_spread",
    "spatial_average_stats",
    "synthesize_cir",
    "trace",
    "utd_coefficient",
]
