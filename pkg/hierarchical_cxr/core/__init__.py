"""
层次化胸片多标签系统核心模块
"""

from hierarchical_cxr.core.taxonomy import Taxonomy, parse_taxonomy
from hierarchical_cxr.core.model import HierarchicalClassifier, build_model
from hierarchical_cxr.core.trainer import PredictionMatrix, Trainer

__all__ = ["Taxonomy", "parse_taxonomy", "HierarchicalClassifier", "build_model", "PredictionMatrix", "Trainer"]
