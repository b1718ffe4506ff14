"""Heading estimation from intensity moments.

Independent of the glyph rasterizer: orientation is recovered from the
principal axis of the second central moments, with the 180-degree
ambiguity resolved by the sign of the third moment along that axis (glyph
mass is concentrated behind the center, tapering toward the tip).
"""

from __future__ import annotations

import math

import numpy as np

from .. import geometry as geo
from ..errors import PredictionError


def pixel_moment_heading(
    image: np.ndarray,
    box: geo.Box2D | None = None,
    threshold: float = 0.35,
) -> float:
    """Estimate the world heading of a bright glyph on a dark background.

    image: (H, W) float array in [0, 1]. box: optional pixel crop. Returns
    an angle in [0, 2pi) under the faces-right-at-zero convention.
    """
    img = np.asarray(image, dtype=np.float64)
    if img.ndim != 2:
        raise PredictionError(f"expected a single-channel image, got {img.shape}")
    x_off = y_off = 0.0
    if box is not None:
        x0 = max(0, int(math.floor(box.x0)))
        y0 = max(0, int(math.floor(box.y0)))
        x1 = min(img.shape[1], int(math.ceil(box.x1)))
        y1 = min(img.shape[0], int(math.ceil(box.y1)))
        if x1 <= x0 or y1 <= y0:
            raise PredictionError(f"crop box {box.to_json()} empty for image")
        img = img[y0:y1, x0:x1]
        x_off, y_off = float(x0), float(y0)

    w = np.clip(img - threshold, 0.0, None)
    total = w.sum()
    if total <= 1e-9:
        raise PredictionError("no glyph mass above threshold")
    ys, xs = np.mgrid[0 : img.shape[0], 0 : img.shape[1]]
    xs = xs + 0.5 + x_off
    ys = ys + 0.5 + y_off
    mx = (w * xs).sum() / total
    my = (w * ys).sum() / total
    dx = xs - mx
    dy = ys - my
    mu20 = (w * dx * dx).sum() / total
    mu02 = (w * dy * dy).sum() / total
    mu11 = (w * dx * dy).sum() / total

    anisotropy = math.hypot(mu20 - mu02, 2 * mu11) / max(mu20 + mu02, 1e-12)
    if anisotropy > 0.02:
        phi = 0.5 * math.atan2(2 * mu11, mu20 - mu02)
        ux, uy = math.cos(phi), math.sin(phi)
        s = dx * ux + dy * uy
        if (w * s**3).sum() < 0:
            ux, uy = -ux, -uy
    else:
        # nearly isotropic blob: fall back to the radial third-moment vector
        r2 = dx * dx + dy * dy
        tx = (w * dx * r2).sum()
        ty = (w * dy * r2).sum()
        if tx == 0.0 and ty == 0.0:
            raise PredictionError("glyph mass is perfectly symmetric")
        norm = math.hypot(tx, ty)
        ux, uy = tx / norm, ty / norm
    # image y grows downward; world angles turn counter-clockwise on screen
    return geo.wrap_angle(math.atan2(-uy, ux))
