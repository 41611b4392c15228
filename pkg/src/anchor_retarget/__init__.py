"""Skinned motion retargeting with adaptive surface anchors."""
from .anchors import AnchorSet, extract_anchors
from .character import Character, Mesh, Motion, Skeleton, SkinWeights
from .errors import (ConfigurationError, ExtractionError, NumericalError, RetargetError, StructuralError,
                     ValidationError)
from .objectives import LossWeights
from .optimizer import OptimConfig, RetargetResult, run

__version__ = "0.1.0"
