"""Contextual HIV exposure from longitudinal surveillance and GPS data."""

__version__ = "0.1.0"

from .activity import (  # noqa: E402
    ActivityDistribution,
    ActivitySpace,
    CPTActivityEstimator,
    FixSequence,
    activity_space,
    cpt_estimate,
    pool,
    segment,
)
from .analysis import DeviationKMeans, RiskStratifier, paired_t_test  # noqa: E402
from .exposure import ExposureEstimator, exposure_profile  # noqa: E402
from .grid import Grid, PlanarPoint, Projection, RegionIndex, load_regions  # noqa: E402
from .imputation import RateTable, StatusImputer, SurveillanceRecord, impute_cohort  # noqa: E402
from .pipeline import PipelineConfig, run_pipeline, validate_inputs  # noqa: E402
from .prevalence import KernelPrevalenceEstimator, kernel_weight, prevalence_field  # noqa: E402

__all__ = [
    "ActivityDistribution", "ActivitySpace", "CPTActivityEstimator", "DeviationKMeans",
    "ExposureEstimator", "FixSequence", "Grid", "KernelPrevalenceEstimator", "PipelineConfig",
    "PlanarPoint", "Projection", "RateTable", "RegionIndex", "RiskStratifier", "StatusImputer",
    "SurveillanceRecord", "activity_space", "cpt_estimate", "exposure_profile", "impute_cohort",
    "kernel_weight", "load_regions", "paired_t_test", "pool", "prevalence_field", "run_pipeline",
    "segment", "validate_inputs",
]
