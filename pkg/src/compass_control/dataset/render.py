"""Renderer adapters and the built-in flat-shaded glyph renderer.

Adapter protocol: a renderer consumes a SceneSpec (as JSON for external
processes) and returns the image plus per-object tight boxes. The stub
draws oriented 2D glyphs inscribed in the projected boxes, which is
enough to train and probe the toy backbone.
"""

from __future__ import annotations

import json
import math
import os
import subprocess

import numpy as np
from PIL import Image

from .. import geometry as geo
from ..errors import RenderError
from .catalog import AssetCatalog
from .scenes import SceneRecord, SceneObject, SceneSpec, spec_prompt, tight_boxes

# glyph outlines in a canonical frame: +x forward (theta = 0), +y left,
# all vertices inside the unit disk; convex pieces only
# Every glyph's mass tapers toward its tip (+x), so the axis-skew rule of
# the moment oracle resolves the 180-degree ambiguity for all of them.
GLYPH_POLYGONS: dict[str, list[list[tuple[float, float]]]] = {
    # solid isoceles wedge, wide base behind center, tip ahead
    "triangle": [[(1.0, 0.0), (-1.0, 0.75), (-1.0, -0.75)]],
    # kite/dart arrowhead: short back taper, long front taper
    "arrow": [[(1.0, 0.0), (-0.35, 0.72), (-0.80, 0.0), (-0.35, -0.72)]],
    # T lying on its side: heavy bar at the back, thin stem to the tip
    "tee": [
        [(-0.95, 0.80), (-0.45, 0.80), (-0.45, -0.80), (-0.95, -0.80)],
        [(-0.45, 0.20), (1.0, 0.20), (1.0, -0.20), (-0.45, -0.20)],
    ],
}


def glyph_points(kind: str, theta: float, center: tuple[float, float],
                 radius: float) -> list[np.ndarray]:
    """Glyph polygons rotated to heading theta, in image coordinates.

    Image heading of theta is (cos t, -sin t): y grows downward, so a
    positive theta turns counter-clockwise on screen.
    """
    ct, st = math.cos(theta), math.sin(theta)
    fwd = np.array([ct, -st])
    left = np.array([-st, -ct])
    cx, cy = center
    out = []
    for poly in GLYPH_POLYGONS[kind]:
        pts = np.array(
            [[cx, cy] + radius * (px * fwd + py * left) for px, py in poly]
        )
        out.append(pts)
    return out


def _coverage(polys: list[np.ndarray], w: int, h: int, supersample: int = 4
              ) -> np.ndarray:
    """Anti-aliased coverage of a union of convex polygons on a w x h grid."""
    s = supersample
    xs = (np.arange(w * s) + 0.5) / s
    ys = (np.arange(h * s) + 0.5) / s
    gx, gy = np.meshgrid(xs, ys)
    inside_any = np.zeros(gx.shape, dtype=bool)
    for pts in polys:
        inside = np.ones(gx.shape, dtype=bool)
        n = len(pts)
        # orient consistently, then test half-planes
        area2 = 0.0
        for i in range(n):
            x0, y0 = pts[i]
            x1, y1 = pts[(i + 1) % n]
            area2 += x0 * y1 - x1 * y0
        sign = 1.0 if area2 >= 0 else -1.0
        for i in range(n):
            x0, y0 = pts[i]
            x1, y1 = pts[(i + 1) % n]
            cross = (x1 - x0) * (gy - y0) - (y1 - y0) * (gx - x0)
            inside &= sign * cross >= 0
        inside_any |= inside
    cov = inside_any.reshape(h, s, w, s).mean(axis=(1, 3))
    return cov.astype(np.float32)


def _light_brightness(spec: SceneSpec) -> float:
    mean_intensity = float(np.mean([l.intensity for l in spec.lights]))
    return float(np.clip(0.78 + 0.12 * (mean_intensity - 1.0), 0.62, 0.95))


def render_scene_image(spec: SceneSpec, catalog: AssetCatalog) -> np.ndarray:
    """Flat-shaded glyph render: dark floor, bright oriented glyphs."""
    size = spec.image_size
    # plain floor with a faint vertical gradient
    img = np.tile(
        np.linspace(0.05, 0.11, size, dtype=np.float32)[:, None], (1, size)
    )
    brightness = _light_brightness(spec)
    boxes = tight_boxes(spec, catalog)
    for placement, box in zip(spec.placements, boxes):
        asset = catalog.get(placement.asset)
        if asset.glyph is None:
            raise RenderError(
                f"asset {asset.name!r} has no glyph; use an external renderer",
                job_id=spec.scene_id,
            )
        radius = 0.46 * min(box.width, box.height)
        polys = glyph_points(
            asset.glyph, placement.orientation.theta, box.center, radius
        )
        cov = _coverage(polys, size, size)
        img = img * (1.0 - cov) + brightness * cov
    return np.clip(img, 0.0, 1.0)


def save_image(img: np.ndarray, path: str) -> None:
    os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
    Image.fromarray((np.clip(img, 0.0, 1.0) * 255).round().astype(np.uint8),
                    mode="L").save(path)


def load_image(path: str) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("L"), dtype=np.float32) / 255.0


class StubRenderer:
    """In-process renderer backed by the glyph rasterizer."""

    def __init__(self, catalog: AssetCatalog):
        self.catalog = catalog

    def render(self, spec: SceneSpec, image_path: str) -> dict:
        img = render_scene_image(spec, self.catalog)
        save_image(img, image_path)
        boxes = tight_boxes(spec, self.catalog)
        return {
            "image": image_path,
            "image_size": spec.image_size,
            "boxes": [b.to_json() for b in boxes],
        }


class ProcessRendererAdapter:
    """External renderer: spec JSON on stdin, response JSON on stdout.

    The response must carry {"image": path, "image_size": n, "boxes":
    [[x0,y0,x1,y1], ...]} with one box per placement.
    """

    def __init__(self, command: list[str], timeout: float = 300.0):
        self.command = command
        self.timeout = timeout

    def render(self, spec: SceneSpec, image_path: str) -> dict:
        request = dict(spec.to_json(), image_path=image_path)
        try:
            proc = subprocess.run(
                self.command,
                input=json.dumps(request).encode(),
                capture_output=True,
                timeout=self.timeout,
            )
        except (OSError, subprocess.TimeoutExpired) as e:
            raise RenderError(f"renderer process failed: {e}",
                              job_id=spec.scene_id) from e
        if proc.returncode != 0:
            raise RenderError(
                f"renderer exited {proc.returncode}: "
                f"{proc.stderr.decode(errors='replace')[:500]}",
                job_id=spec.scene_id,
            )
        try:
            return json.loads(proc.stdout.decode())
        except json.JSONDecodeError as e:
            raise RenderError(f"renderer emitted bad JSON: {e}",
                              job_id=spec.scene_id) from e


def render(spec: SceneSpec, renderer, image_path: str) -> SceneRecord:
    """Run a renderer adapter and wrap its response into a SceneRecord."""
    response = renderer.render(spec, image_path)
    try:
        boxes = [geo.Box2D.from_json(b) for b in response["boxes"]]
        size = int(response["image_size"])
        path = response["image"]
    except (KeyError, TypeError, ValueError) as e:
        raise RenderError(f"bad renderer response: {e}", job_id=spec.scene_id) from e
    if len(boxes) != len(spec.placements):
        raise RenderError(
            f"renderer returned {len(boxes)} boxes for "
            f"{len(spec.placements)} placements",
            job_id=spec.scene_id,
        )
    objects = [
        SceneObject(name=p.asset, theta=p.orientation.theta, box=b)
        for p, b in zip(spec.placements, boxes)
    ]
    return SceneRecord(
        record_id=spec.scene_id,
        image_path=path,
        image_size=size,
        objects=objects,
        prompt=spec_prompt(spec),
        provenance="rendered",
        filter_flag="keep",
    )
