"""Correct-by-construction predictors for input-output constraints with convex output sets."""

from .constraints import (
    ConstraintSpec,
    ConvexOutputSet,
    InputRegion,
    OverlapKey,
    OverlapPartition,
    enumerate_overlaps,
    intersect_output_sets,
    overlap_key_of,
    project_output,
    region_contains,
    region_distance,
)
from .netcore import DenseNetSpec, ParamStore, StandardNetwork, domain_normalisation, deserialize_model, serialize_model
from .proximity import ProximityParams, proximity_eval, proximity_grad
from .safepredictor import SafePredictorModel, build_safe_predictor, safe_forward, weight_eval

__version__ = "0.1.0"
