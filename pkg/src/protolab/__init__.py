"""Prototypical self-distillation lab: clustering heads, MLCD regularizers,
KoLeo terms and a partial prototype collapse detector."""

from .collapse import CollapseReport, detect_partial_collapse, unique_count, unique_count_curve
from .config import ExperimentConfig, load_config, parse_config
from .geometry import cosine_distance, l2_normalize, min_pairwise_euclidean
from .head import HeadMode, PrototypeBank, mlcd, posterior

__all__ = [
    "CollapseReport",
    "ExperimentConfig",
    "HeadMode",
    "PrototypeBank",
    "cosine_distance",
    "detect_partial_collapse",
    "l2_normalize",
    "load_config",
    "min_pairwise_euclidean",
    "mlcd",
    "parse_config",
    "posterior",
    "unique_count",
    "unique_count_curve",
]
