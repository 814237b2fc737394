"""Patch extraction operators ``P_j``, their adjoints, and patch weights.

Patches are gathered through a precomputed ``(l, n_patches)`` table of flat
pixel indices, so extraction is a single fancy-index and the adjoint is a
single ``np.bincount`` (a fixed-order reduction, hence deterministic).
"""
from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property

import numpy as np


@dataclass(frozen=True)
class PatchConfig:
    patch_shape: tuple[int, ...] = (8, 8)
    stride: tuple[int, ...] = (1, 1)
    boundary: str = "clamp"  # "clamp" keeps patches inside; "wrap" is periodic

    def __post_init__(self):
        ps = tuple(int(p) for p in self.patch_shape)
        st = tuple(int(s) for s in self.stride)
        if len(ps) != len(st):
            raise ValueError("patch_shape and stride need the same number of axes")
        if any(not 1 <= s <= p for p, s in zip(ps, st)):
            raise ValueError(f"need 1 <= stride <= patch size per axis, got {st} for {ps}")
        if self.boundary not in ("clamp", "wrap"):
            raise ValueError(f"boundary must be 'clamp' or 'wrap', got {self.boundary!r}")
        object.__setattr__(self, "patch_shape", ps)
        object.__setattr__(self, "stride", st)

    @property
    def l(self) -> int:
        return int(np.prod(self.patch_shape))

    def index(self, image_shape) -> "PatchIndex":
        return PatchIndex(self, tuple(int(n) for n in image_shape))


def _starts(n: int, p: int, stride: int, boundary: str) -> np.ndarray:
    if boundary == "wrap":
        return np.arange(0, n, stride)
    starts = list(range(0, n - p + 1, stride))
    if starts[-1] != n - p:
        starts.append(n - p)  # clamp the last patch inside the image
    return np.asarray(starts)


class PatchIndex:
    """Patch offsets (top-left corners) for one image shape."""

    def __init__(self, cfg: PatchConfig, image_shape: tuple[int, ...]):
        if len(image_shape) != len(cfg.patch_shape):
            raise ValueError(f"image has {len(image_shape)} axes, patches have {len(cfg.patch_shape)}")
        if any(n < p for n, p in zip(image_shape, cfg.patch_shape)):
            raise ValueError(f"image {image_shape} is smaller than patch {cfg.patch_shape}")
        self.cfg = cfg
        self.image_shape = image_shape
        axes = [_starts(n, p, s, cfg.boundary)
                for n, p, s in zip(image_shape, cfg.patch_shape, cfg.stride)]
        grids = np.meshgrid(*axes, indexing="ij")
        self.offsets = np.stack([g.ravel() for g in grids], axis=1)

    @property
    def count(self) -> int:
        return self.offsets.shape[0]

    @property
    def l(self) -> int:
        return self.cfg.l

    @cached_property
    def table(self) -> np.ndarray:
        """``(l, n_patches)`` flat pixel indices; row order is raster order within a patch."""
        within = np.stack([g.ravel() for g in np.meshgrid(
            *[np.arange(p) for p in self.cfg.patch_shape], indexing="ij")], axis=1)
        coords = self.offsets[None, :, :] + within[:, None, :]
        coords %= np.asarray(self.image_shape)  # only wraps in "wrap" mode
        flat = np.ravel_multi_index(tuple(np.moveaxis(coords, -1, 0)), self.image_shape)
        return flat.astype(np.int64)

    @cached_property
    def coverage(self) -> np.ndarray:
        """Number of patches covering each pixel."""
        return np.bincount(self.table.ravel(), minlength=int(np.prod(self.image_shape))
                           ).reshape(self.image_shape)


def extract_patches(image, index: PatchIndex) -> np.ndarray:
    """Return the ``(l, n_patches)`` matrix whose column ``j`` is ``P_j x``."""
    x = np.asarray(image, dtype=np.float64)
    if x.shape != index.image_shape:
        if x.size != np.prod(index.image_shape) or x.ndim != 1:
            raise ValueError(f"image shape {x.shape} does not match index {index.image_shape}")
    return x.ravel()[index.table]


def accumulate_patches(patches, index: PatchIndex, scalars=None) -> np.ndarray:
    """``sum_j s_j P_j^T Y_j``: the (scaled) adjoint of :func:`extract_patches`."""
    Y = np.asarray(patches, dtype=np.float64)
    if Y.shape != index.table.shape:
        raise ValueError(f"patch matrix shape {Y.shape} does not match {index.table.shape}")
    if scalars is not None:
        s = np.asarray(scalars, dtype=np.float64)
        if s.shape != (index.count,):
            raise ValueError(f"need {index.count} per-patch scalars, got {s.shape}")
        Y = Y * s[None, :]
    n = int(np.prod(index.image_shape))
    return np.bincount(index.table.ravel(), weights=Y.ravel(), minlength=n).reshape(index.image_shape)


def tau_weights(kappa, index: PatchIndex) -> np.ndarray:
    """Per-patch weights ``||P_j kappa||_1 / l``."""
    k = np.asarray(kappa, dtype=np.float64)
    if np.any(k < 0):
        raise ValueError("kappa must be nonnegative")
    return np.abs(extract_patches(k, index)).mean(axis=0)


def max_gram_eigenvalue(transforms) -> float:
    """``max_k lambda_max(Omega_k^T Omega_k)``."""
    lam = 0.0
    for omega in transforms:
        omega = np.asarray(omega, dtype=np.float64)
        if omega.ndim != 2 or omega.shape[0] != omega.shape[1]:
            raise ValueError("transforms must be square")
        if not np.all(np.isfinite(omega)):
            raise ValueError("transforms must be finite")
        lam = max(lam, float(np.linalg.eigvalsh(omega.T @ omega)[-1]))
    return lam


def build_DR(index: PatchIndex, tau, transforms, beta: float) -> np.ndarray:
    """Diagonal majorizer of the regularizer Hessian, valid for every clustering."""
    tau = np.ones(index.count) if tau is None else tau
    return 2.0 * beta * max_gram_eigenvalue(transforms) * accumulate_patches(
        np.ones(index.table.shape), index, tau)
