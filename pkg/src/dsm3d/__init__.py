"""dsm3d: single-image elevation estimation and LOD1 building reconstruction.

The public surface is the scikit-learn style :class:`ElevationRegressor`
plus the pipeline building blocks (grid ops, network forward pass, gradient
checks, metrics, raster tiling, mask contours, 3-D reconstruction) and the
``dsm3d`` command-line tool.
"""

from .estimator import ElevationRegressor
from .gridops import Conv2dKernel, Shape2D
from .metrics import MetricsReport, evaluate
from .network import (
    BerHuConfig,
    FlowField,
    ModelConfig,
    ModelParams,
    berhu_loss,
    init_params,
    load_weights,
    predict_elevation,
    save_weights,
)
from .raster import Geotransform, Raster, fuse_patches, gaussian_filter, plan_tiles

__version__ = "0.1.0"

__all__ = [
    "BerHuConfig",
    "Conv2dKernel",
    "ElevationRegressor",
    "FlowField",
    "Geotransform",
    "MetricsReport",
    "ModelConfig",
    "ModelParams",
    "Raster",
    "Shape2D",
    "berhu_loss",
    "evaluate",
    "fuse_patches",
    "gaussian_filter",
    "init_params",
    "load_weights",
    "plan_tiles",
    "predict_elevation",
    "save_weights",
    "__version__",
]
