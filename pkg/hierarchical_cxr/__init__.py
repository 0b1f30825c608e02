"""
层次化胸片多标签系统
"""

__version__ = "0.1.0"

from hierarchical_cxr.core.taxonomy import Taxonomy, parse_taxonomy
from hierarchical_cxr.core.labels import evaluation_positive, propagate

__all__ = ["Taxonomy", "parse_taxonomy", "propagate", "evaluation_positive"]
