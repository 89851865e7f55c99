"""Semantic point matching between two dense feature maps.

We build two small feature grids that share a vocabulary of orthogonal
"part" vectors, move one part to a different location in the second grid,
and ask the matcher to find it. The cosine heatmap is exported as a PGM
image plus a CSV of raw similarities.
"""

import pathlib
import tempfile

import numpy as np

from safepool import (DenseFeatureMap, PixelPoint, export_heatmap,
                      match_point, upsample)

rng = np.random.default_rng(0)

# A vocabulary of orthonormal part vectors in a 16-channel feature space.
parts = np.linalg.qr(rng.standard_normal((16, 16)))[0]

# Source grid: background parts everywhere, a distinctive part at (1, 2).
h, w = 4, 5
src = parts[rng.integers(4, 16, size=(h, w))]
src[2, 1] = parts[0]

# Target grid: same background statistics, the part moved to (4, 0).
tgt = parts[rng.integers(4, 16, size=(h, w))]
tgt[0, 4] = parts[0]

# A touch of noise so nothing is exactly equal.
src = src + 0.05 * rng.standard_normal(src.shape)
tgt = tgt + 0.05 * rng.standard_normal(tgt.shape)

source = DenseFeatureMap.from_grid(src)
target = DenseFeatureMap.from_grid(tgt)

match, heat = match_point(source, target, PixelPoint(x=1, y=2))
print(f"query (1, 2) in the source matched ({match.x}, {match.y}) "
      f"in the target; similarity {heat[match.y, match.x]:.3f}")

# The same match at a finer resolution, via bilinear upsampling.
fine_src = upsample(source, 16, 20)
fine_tgt = upsample(target, 16, 20)
fine_match, fine_heat = match_point(fine_src, fine_tgt, PixelPoint(x=4, y=8))
print(f"upsampled query (4, 8) matched ({fine_match.x}, {fine_match.y}) "
      f"on the {fine_heat.shape[1]}x{fine_heat.shape[0]} grid")

out = pathlib.Path(tempfile.mkdtemp(prefix="correspondence_"))
export_heatmap(fine_heat, out / "heatmap")
print(f"wrote {out / 'heatmap.pgm'} and {out / 'heatmap.csv'}")
