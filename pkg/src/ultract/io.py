"""Binary array files with JSON sidecars, plus 8-bit image export.

Arrays are stored as raw little-endian float32 (``<f4``) in C order; the
sidecar ``<file>.json`` records at least ``shape``, ``spacing`` and ``kind``.
Sinograms are stored as a ``[2, n_views, n_det]`` stack of values and weights.
"""
from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .geometry import ImageGrid, ScanGeometry, Sinogram


class FormatError(ValueError):
    """A file exists but its contents do not match the expected layout."""


def sidecar_path(path) -> Path:
    return Path(str(path) + ".json")


def save_array(path, array, meta: dict) -> None:
    arr = np.ascontiguousarray(array, dtype="<f4")
    header = {**meta, "shape": list(arr.shape), "dtype": "<f4"}
    for key in ("spacing", "kind"):
        if key not in header:
            raise ValueError(f"sidecar needs a {key!r} entry")
    Path(path).write_bytes(arr.tobytes())
    sidecar_path(path).write_text(json.dumps(header, indent=2))


def load_array(path) -> tuple[np.ndarray, dict]:
    try:
        meta = json.loads(sidecar_path(path).read_text())
    except json.JSONDecodeError as exc:
        raise FormatError(f"{sidecar_path(path)}: invalid JSON ({exc})") from exc
    for key in ("shape", "spacing", "kind"):
        if key not in meta:
            raise FormatError(f"{sidecar_path(path)}: missing {key!r}")
    raw = Path(path).read_bytes()
    shape = tuple(int(n) for n in meta["shape"])
    if len(raw) != 4 * int(np.prod(shape)):
        raise FormatError(f"{path}: {len(raw)} bytes does not match shape {shape}")
    return np.frombuffer(raw, dtype="<f4").reshape(shape).astype(np.float64), meta


def save_image(path, grid: ImageGrid, kind: str = "image", extra: dict | None = None) -> None:
    meta = {"kind": kind, "spacing": [grid.dy, grid.dx], "offset": [grid.offset_y, grid.offset_x],
            "hu_slope": grid.hu_slope, "hu_intercept": grid.hu_intercept, **(extra or {})}
    save_array(path, grid.values, meta)


def load_image(path) -> ImageGrid:
    values, meta = load_array(path)
    if values.ndim != 2:
        raise FormatError(f"{path}: expected a 2D image, got shape {values.shape}")
    ny, nx = values.shape
    dy, dx = meta["spacing"]
    oy, ox = meta.get("offset", [0.0, 0.0])
    kw = {k: meta[k] for k in ("hu_slope", "hu_intercept") if k in meta}
    return ImageGrid(nx, ny, dx, dy, ox, oy, values, **kw)


def geometry_to_dict(geom: ScanGeometry) -> dict:
    return {"kind": geom.kind, "angles": [float(a) for a in geom.angles], "n_det": geom.n_det,
            "det_spacing": geom.det_spacing, "source_to_iso": geom.source_to_iso,
            "source_to_det": geom.source_to_det}


def geometry_from_dict(d: dict) -> ScanGeometry:
    return ScanGeometry(d["kind"], np.asarray(d["angles"], dtype=np.float64), int(d["n_det"]),
                        float(d["det_spacing"]), d.get("source_to_iso"), d.get("source_to_det"))


def save_sinogram(path, sino: Sinogram, extra: dict | None = None) -> None:
    g = sino.geometry
    meta = {"kind": "sinogram", "spacing": [1.0, g.det_spacing],
            "geometry": geometry_to_dict(g), **(extra or {})}
    save_array(path, np.stack([sino.values, sino.weights]), meta)


def load_sinogram(path) -> Sinogram:
    stack, meta = load_array(path)
    if stack.ndim != 3 or stack.shape[0] != 2 or "geometry" not in meta:
        raise FormatError(f"{path}: not a sinogram file")
    geom = geometry_from_dict(meta["geometry"])
    return Sinogram(geom, stack[0], stack[1])


def to_gray(hu, window=(800.0, 1200.0)) -> np.ndarray:
    """Map HU linearly so ``window[0]`` becomes 0 and ``window[1]`` becomes 255."""
    lo, hi = window
    if not hi > lo:
        raise ValueError("display window must have hi > lo")
    scaled = (np.asarray(hu, dtype=np.float64) - lo) / (hi - lo) * 255.0
    return np.clip(np.rint(scaled), 0, 255).astype(np.uint8)


def write_pgm(path, gray) -> None:
    """Binary (P5) PGM; row 0 of ``gray`` is the top row of the picture."""
    g = np.asarray(gray, dtype=np.uint8)
    if g.ndim != 2:
        raise ValueError("PGM export needs a 2D array")
    ny, nx = g.shape
    Path(path).write_bytes(f"P5\n{nx} {ny}\n255\n".encode() + g.tobytes())


def read_pgm(path) -> np.ndarray:
    data = Path(path).read_bytes()
    parts = data.split(maxsplit=4)
    if len(parts) < 5 or parts[0] != b"P5":
        raise FormatError(f"{path}: not a binary PGM")
    nx, ny, maxval = int(parts[1]), int(parts[2]), int(parts[3])
    if maxval != 255:
        raise FormatError(f"{path}: only 8-bit PGM is supported")
    body = parts[4]
    if len(body) != nx * ny:
        raise FormatError(f"{path}: truncated pixel data")
    return np.frombuffer(body, dtype=np.uint8).reshape(ny, nx)


def write_image(path, gray) -> None:
    """Write ``gray`` as PGM or, for a ``.png`` suffix, PNG via Pillow."""
    if str(path).lower().endswith(".png"):
        from PIL import Image
        Image.fromarray(np.asarray(gray, dtype=np.uint8)).save(path)
    else:
        write_pgm(path, gray)


def display_rows(image) -> np.ndarray:
    """Flip rows so +y points up on screen (row 0 of the grid is the lowest y)."""
    return np.asarray(image)[::-1]
