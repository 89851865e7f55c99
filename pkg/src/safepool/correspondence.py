"""Semantic point matching over upsampled dense feature maps.

A source pixel's feature is compared against every pixel of the target by
cosine similarity; the argmax (row-major first maximum on ties) is the
predicted target point, and the full similarity grid is returned as a
heatmap that can be exported as PGM + CSV.

Upsampling is per-channel bilinear with align-corners semantics: output
row i samples source coordinate i * (H - 1) / (outH - 1).
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .attnpool import DenseFeatureMap
from .errors import DegenerateFeatureError, DimensionError


@dataclass(frozen=True)
class PixelPoint:
    x: int  # column
    y: int  # row


def _axis_lerp(length_in: int, length_out: int):
    """Source coordinates, floor indices, and fractions for one axis."""
    if length_out == 1 or length_in == 1:
        coords = np.zeros(length_out)
    else:
        coords = np.arange(length_out) * (length_in - 1) / (length_out - 1)
    lo = np.minimum(coords.astype(np.int64), length_in - 1)
    hi = np.minimum(lo + 1, length_in - 1)
    frac = coords - lo
    return lo, hi, frac


def upsample(fmap: DenseFeatureMap, out_h: int, out_w: int) -> DenseFeatureMap:
    """Bilinear align-corners upsampling; identity when sizes match."""
    if out_h < fmap.height or out_w < fmap.width:
        raise ValueError(
            f"output size ({out_h}, {out_w}) smaller than input "
            f"({fmap.height}, {fmap.width})")
    grid = fmap.to_grid().astype(np.float64)
    ylo, yhi, yfrac = _axis_lerp(fmap.height, out_h)
    xlo, xhi, xfrac = _axis_lerp(fmap.width, out_w)
    rows = (grid[ylo] * (1.0 - yfrac)[:, None, None]
            + grid[yhi] * yfrac[:, None, None])         # (outH, W, C)
    out = (rows[:, xlo] * (1.0 - xfrac)[None, :, None]
           + rows[:, xhi] * xfrac[None, :, None])       # (outH, outW, C)
    return DenseFeatureMap.from_grid(out)


def match_point(source: DenseFeatureMap, target: DenseFeatureMap,
                point: PixelPoint, eps: float = 1e-12):
    """Most cosine-similar target pixel for a source pixel.

    Returns (PixelPoint, heat (outH, outW)). Ties break in row-major
    order; degenerate target cells score 0 rather than NaN.
    """
    if source.channels != target.channels:
        raise DimensionError(
            f"channel mismatch: {source.channels} vs {target.channels}")
    if not (0 <= point.y < source.height and 0 <= point.x < source.width):
        raise ValueError(f"source point {point} out of bounds")
    query = source.values[point.y * source.width + point.x].astype(np.float64)
    qnorm = np.linalg.norm(query)
    if qnorm < eps:
        raise DegenerateFeatureError("source feature at the query point is zero")
    tvals = target.values.astype(np.float64)
    tnorms = np.linalg.norm(tvals, axis=1)
    sims = np.zeros(len(tvals))
    ok = tnorms >= eps
    sims[ok] = np.clip((tvals[ok] @ query) / (tnorms[ok] * qnorm), -1.0, 1.0)
    flat = int(np.argmax(sims))  # first maximum = row-major tie-break
    heat = sims.reshape(target.height, target.width)
    return PixelPoint(x=flat % target.width, y=flat // target.width), heat


def export_heatmap(heat: np.ndarray, path_prefix) -> None:
    """Write <prefix>.pgm (8-bit binary P5, min-max normalized; constant
    input renders mid-gray 128) and <prefix>.csv with raw values."""
    heat = np.asarray(heat, dtype=np.float64)
    if not np.all(np.isfinite(heat)):
        raise ValueError("heatmap contains non-finite values")
    lo, hi = float(heat.min()), float(heat.max())
    if hi > lo:
        pixels = np.round((heat - lo) / (hi - lo) * 255.0).astype(np.uint8)
    else:
        pixels = np.full(heat.shape, 128, dtype=np.uint8)
    h, w = heat.shape
    with open(f"{path_prefix}.pgm", "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(pixels.tobytes())
    with open(f"{path_prefix}.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        for row in heat:
            writer.writerow([f"{v:.9g}" for v in row])
