"""Low-dose CT reconstruction with a union of learned sparsifying transforms.

Modules:
    geometry: image grids, scan geometries and the ray-driven projector.
    simulation: phantoms and Poisson+Gaussian transmission data.
    patches: patch extraction, accumulation and the regularizer majorizer.
    learning: union-of-transforms training and the model file format.
    reconstruction: FBP, PWLS-EP and PWLS-ULTRA solvers.
    metrics: RMSE/SSIM and sweep tables.
"""
from .geometry import ImageGrid, Projector, ScanGeometry, Sinogram
from .learning import TransformUnion, learn_union, load_model, save_model
from .reconstruction import EpParams, UltraParams, fbp, pwls_ep, pwls_ultra
from .simulation import NoiseModel, Phantom, desk_phantom

__version__ = "0.1.0"

__all__ = [
    "EpParams", "ImageGrid", "NoiseModel", "Phantom", "Projector", "ScanGeometry", "Sinogram",
    "TransformUnion", "UltraParams", "desk_phantom", "fbp", "learn_union", "load_model",
    "pwls_ep", "pwls_ultra", "save_model",
]
