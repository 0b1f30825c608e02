"""
层次化胸片多标签系统 - 工具模块
"""

from hierarchical_cxr.utils.visualization import (
    plot_roc_curves,
    plot_training_history,
    save_heatmap,
    visualize_taxonomy,
)

__all__ = [
    'visualize_taxonomy',
    'plot_roc_curves',
    'plot_training_history',
    'save_heatmap',
]
