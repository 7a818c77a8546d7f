# Import all services here for easy access
from .estimator_service import estimator_service
from .geo_service import geo_service
from .lifecycle_service import lifecycle_service
from .panel_service import panel_service
from .pipeline_service import pipeline_service
from .raster_service import raster_service
from .screening_service import screening_service
from .stacking_service import stacking_service
from .synth_service import synth_service

__all__ = [
    "estimator_service",
    "geo_service",
    "lifecycle_service",
    "panel_service",
    "pipeline_service",
    "raster_service",
    "screening_service",
    "stacking_service",
    "synth_service",
]
