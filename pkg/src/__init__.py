"""
Kernel Warehouse Package

Dynamic convolution whose kernels are assembled per input from a warehouse
of cells shared across neighbouring layers, under an exact parameter budget.
"""

__version__ = "1.0.0"

# Package-level imports for convenience
from .config_manager import ConfigManager
from .kw_model import ModelManifest, build_model, model_forward
from .partition_planner import plan_partition
from .storage_manager import StorageManager

__all__ = [
    'ConfigManager',
    'ModelManifest',
    'StorageManager',
    'build_model',
    'model_forward',
    'plan_partition',
]
