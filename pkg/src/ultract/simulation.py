"""Synthetic phantoms and low-dose measurement simulation.

Measurements follow the Poisson + Gaussian model

    counts_i = k_gain * Poisson(I0 * exp(-l_i)) + Normal(0, sigma2)

and are converted to post-log data with delta-method inverse-variance
weights.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .geometry import ImageGrid, Projector, ScanGeometry, Sinogram, siddon_apply


@dataclass(frozen=True)
class NoiseModel:
    I0: float = 1e4
    k_gain: float = 1000.0
    sigma2: float = 330.0**2
    rng_seed: int = 0
    c_min: float = 1.0
    deterministic: bool = False

    def __post_init__(self):
        if not self.I0 > 0:
            raise ValueError("I0 must be positive")
        if not self.k_gain > 0:
            raise ValueError("k_gain must be positive")
        if self.sigma2 < 0:
            raise ValueError("sigma2 must be nonnegative")
        if not self.c_min > 0:
            raise ValueError("c_min must be positive")


@dataclass(frozen=True)
class Ellipse:
    cx: float
    cy: float
    a: float
    b: float
    value: float
    angle: float = 0.0  # degrees, counter-clockwise

    def contains(self, X, Y):
        t = np.deg2rad(self.angle)
        u = (X - self.cx) * np.cos(t) + (Y - self.cy) * np.sin(t)
        v = -(X - self.cx) * np.sin(t) + (Y - self.cy) * np.cos(t)
        return (u / self.a) ** 2 + (v / self.b) ** 2 <= 1.0


@dataclass(frozen=True)
class Rectangle:
    cx: float
    cy: float
    width: float
    height: float
    value: float
    angle: float = 0.0

    def contains(self, X, Y):
        t = np.deg2rad(self.angle)
        u = (X - self.cx) * np.cos(t) + (Y - self.cy) * np.sin(t)
        v = -(X - self.cx) * np.sin(t) + (Y - self.cy) * np.cos(t)
        return (np.abs(u) <= self.width / 2) & (np.abs(v) <= self.height / 2)


@dataclass(frozen=True)
class Phantom:
    """Piecewise-constant phantom; later primitives paint over earlier ones.

    Values are HU (water = 1000, air = 0); geometry in millimetres.
    """

    primitives: tuple = ()
    background: float = 0.0

    def hu_at(self, X, Y) -> np.ndarray:
        out = np.full(np.broadcast(X, Y).shape, float(self.background))
        for prim in self.primitives:
            out[prim.contains(X, Y)] = prim.value
        return out


_PRIMITIVES = {"ellipse": Ellipse, "rect": Rectangle}


def parse_primitives(text: str) -> tuple:
    """Parse ``"ellipse cx cy a b hu [angle]; rect cx cy w h hu [angle]; ..."``.

    Entries are separated by ``;`` or newlines and painted in order.
    """
    prims = []
    for item in text.replace("\n", ";").split(";"):
        words = item.split()
        if not words:
            continue
        cls = _PRIMITIVES.get(words[0].lower())
        if cls is None:
            raise ValueError(f"unknown primitive {words[0]!r}; use ellipse or rect")
        try:
            nums = [float(w) for w in words[1:]]
        except ValueError as exc:
            raise ValueError(f"bad number in primitive {item.strip()!r}") from exc
        if len(nums) not in (5, 6) or nums[2] <= 0 or nums[3] <= 0:
            raise ValueError(f"primitive {item.strip()!r} needs cx cy size1>0 size2>0 hu [angle]")
        prims.append(cls(*nums))
    return tuple(prims)


def rasterize_phantom(phantom: Phantom, shape, spacing=(1.0, 1.0), oversample: int = 1,
                      template: ImageGrid | None = None) -> ImageGrid:
    """Sample ``phantom`` on an ``(ny, nx)`` grid with ``(dy, dx)`` spacing.

    With ``oversample=1`` each pixel takes the phantom value at its centre;
    larger values average an ``oversample x oversample`` lattice of
    sub-pixel centres.
    """
    ny, nx = shape
    dy, dx = spacing
    base = template if template is not None else ImageGrid(nx, ny, dx, dy)
    grid = ImageGrid(nx, ny, dx, dy, base.offset_x, base.offset_y, None, base.hu_slope,
                     base.hu_intercept)
    s = int(oversample)
    if s < 1:
        raise ValueError("oversample must be >= 1")
    fine = ImageGrid(nx * s, ny * s, dx / s, dy / s, grid.offset_x, grid.offset_y)
    X, Y = fine.pixel_centers()
    hu = phantom.hu_at(X, Y).reshape(ny, s, nx, s).mean(axis=(1, 3))
    return grid.with_values(grid.att(hu))


def simulate_counts(true_image: ImageGrid, geom: ScanGeometry, noise: NoiseModel,
                    line_integrals=None) -> np.ndarray:
    """Raw detector counts for ``true_image`` (or precomputed line integrals).

    Deterministic mode returns the noise-free mean ``k_gain * I0 * exp(-l)``.
    """
    if line_integrals is None:
        line_integrals = siddon_apply(true_image, geom, true_image.values)
    ell = np.asarray(line_integrals, dtype=np.float64).reshape(geom.n_views, geom.n_det)
    mean_photons = noise.I0 * np.exp(-ell)
    if noise.deterministic:
        return noise.k_gain * mean_photons
    rng = np.random.Generator(np.random.Philox(noise.rng_seed))
    counts = noise.k_gain * rng.poisson(mean_photons).astype(np.float64)
    if noise.sigma2 > 0:
        counts += rng.normal(0.0, np.sqrt(noise.sigma2), size=counts.shape)
    return counts


def counts_to_sinogram(counts, noise: NoiseModel, geom: ScanGeometry) -> Sinogram:
    """Post-log data ``y = ln(k I0 / c)`` and weights ``w = c^2 / (k c + sigma2)``.

    ``c`` is the count clamped below at ``noise.c_min``.
    """
    c = np.maximum(np.asarray(counts, dtype=np.float64), noise.c_min)
    y = np.log(noise.k_gain * noise.I0 / c)
    w = c * c / (noise.k_gain * c + noise.sigma2)
    return Sinogram(geom, y, w)


def kappa_map(projector: Projector, weights) -> np.ndarray:
    """Per-pixel ``sqrt(sum_i a_ij w_i / sum_i a_ij)``.

    Pixels no ray touches get the smallest positive value on the grid.
    """
    w = np.asarray(weights, dtype=np.float64)
    if np.any(w < 0):
        raise ValueError("weights must be nonnegative")
    colsum = projector.column_sums()
    covered = colsum > 0
    if not np.any(covered):
        raise ValueError("all system-matrix column sums are zero")
    num = projector.back(w.reshape(projector.sino_shape))
    kappa = np.zeros(projector.image_shape)
    kappa[covered] = np.sqrt(num[covered] / colsum[covered])
    positive = kappa[covered & (kappa > 0)]
    if positive.size:
        kappa[~covered] = positive.min()
    return kappa


# --------------------------------------------------------------------------
# Desk-scale phantoms
# --------------------------------------------------------------------------

def desk_phantom(fov: float = 256.0) -> Phantom:
    """Torso-like piecewise-constant test phantom inside a ``fov`` mm square."""
    s = fov / 256.0
    E = lambda cx, cy, a, b, v, ang=0.0: Ellipse(cx * s, cy * s, a * s, b * s, v, ang)
    R = lambda cx, cy, w, h, v, ang=0.0: Rectangle(cx * s, cy * s, w * s, h * s, v, ang)
    prims = [
        E(0, 0, 115, 88, 900),            # subcutaneous fat
        E(0, 0, 108, 81, 1040),           # soft tissue
        E(-50, 10, 36, 50, 250, 10),      # lungs
        E(52, 12, 34, 48, 250, -12),
        E(-4, 28, 22, 18, 1060),          # heart
        E(-6, 30, 7, 6, 1100),            # vessel
        E(30, -38, 40, 26, 1055, 20),     # liver
        E(-38, -44, 16, 11, 1030, -30),   # kidney
        E(0, -64, 13, 12, 1800),          # spine
        E(0, -64, 7, 6, 1120),            # canal
        R(0, -44, 8, 14, 1600),           # vertebral body
        E(-88, -22, 6, 9, 1700, 30),      # ribs
        E(88, -22, 6, 9, 1700, -30),
        E(-80, 40, 5, 8, 1700, -40),
        E(80, 40, 5, 8, 1700, 40),
        E(20, -42, 6, 6, 1080),           # low-contrast lesions
        E(42, -30, 4, 4, 1020),
        E(-50, 8, 6, 6, 1000),            # lung nodule
        R(60, -60, 18, 6, 1100, 35),      # oriented structures
        R(-60, -62, 16, 5, 980, -25),
    ]
    return Phantom(tuple(prims), background=0.0)


def training_phantoms(n: int = 5, seed: int = 1, fov: float = 256.0) -> list[Phantom]:
    """Randomly perturbed variants of the desk anatomy, distinct from :func:`desk_phantom`."""
    rng = np.random.default_rng(seed)
    base = desk_phantom(fov).primitives
    s = fov / 256.0
    out = []
    for _ in range(n):
        prims = []
        for p in base:
            jitter = dict(cx=p.cx + rng.normal(0, 4 * s), cy=p.cy + rng.normal(0, 4 * s),
                          angle=p.angle + rng.normal(0, 15))
            if isinstance(p, Ellipse):
                scale = rng.uniform(0.85, 1.15)
                jitter.update(a=p.a * scale, b=p.b * rng.uniform(0.85, 1.15))
            else:
                jitter.update(width=p.width * rng.uniform(0.8, 1.2),
                              height=p.height * rng.uniform(0.8, 1.2))
            if p.value not in (900.0, 1040.0, 250.0):
                jitter.update(value=p.value + rng.normal(0, 15))
            if isinstance(p, Ellipse) and p.a > 100 * s:
                jitter.update(cx=p.cx, cy=p.cy, angle=p.angle)
            prims.append(type(p)(**{**p.__dict__, **jitter}))
        for _ in range(6):  # extra small structures inside soft tissue
            ang = rng.uniform(0, 2 * np.pi)
            rad = rng.uniform(0, 60 * s)
            prims.append(Ellipse(rad * np.cos(ang), rad * np.sin(ang) - 20 * s,
                                 rng.uniform(3, 10) * s, rng.uniform(3, 10) * s,
                                 float(rng.choice([980.0, 1020.0, 1080.0, 1150.0, 1500.0])),
                                 rng.uniform(0, 180)))
        out.append(Phantom(tuple(prims), background=0.0))
    return out
