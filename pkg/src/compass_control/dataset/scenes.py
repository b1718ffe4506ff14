"""Scene specs, scene records and procedural scene sampling."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .. import geometry as geo
from ..errors import ConfigError, DataError, PlacementError
from .catalog import AssetCatalog


@dataclass(frozen=True)
class Light:
    position: tuple[float, float, float]
    intensity: float

    def to_json(self):
        return {"position": list(self.position), "intensity": self.intensity}

    @classmethod
    def from_json(cls, d):
        return cls(position=tuple(d["position"]), intensity=float(d["intensity"]))


@dataclass(frozen=True)
class ScenePlacement:
    asset: str
    location: tuple[float, float, float]  # on the floor, z = 0
    orientation: geo.Orientation

    def to_json(self):
        return {
            "asset": self.asset,
            "location": list(self.location),
            "theta": self.orientation.to_json(),
        }

    @classmethod
    def from_json(cls, d):
        return cls(
            asset=d["asset"],
            location=tuple(d["location"]),
            orientation=geo.Orientation.from_json(d["theta"]),
        )


@dataclass(frozen=True)
class SceneSpec:
    scene_id: str
    placements: tuple[ScenePlacement, ...]
    camera: geo.CameraModel
    lights: tuple[Light, ...]
    image_size: int
    prompt: str | None = None  # slotted template chosen at sampling time

    def __post_init__(self):
        if len(self.placements) not in (1, 2):
            raise DataError(
                f"scene must contain 1 or 2 assets, got {len(self.placements)}"
            )
        if len(self.lights) != 3:
            raise DataError(f"scene must have exactly 3 lights, got {len(self.lights)}")

    def to_json(self) -> dict:
        cam = self.camera
        return {
            "scene_id": self.scene_id,
            "placements": [p.to_json() for p in self.placements],
            "camera": {
                "focal_px": cam.focal_px,
                "cx": cam.cx,
                "cy": cam.cy,
                "position": list(cam.position),
                "tilt": cam.tilt,
            },
            "lights": [l.to_json() for l in self.lights],
            "image_size": self.image_size,
            "prompt": self.prompt,
        }

    @classmethod
    def from_json(cls, d: dict) -> "SceneSpec":
        cam = d["camera"]
        return cls(
            scene_id=d["scene_id"],
            placements=tuple(ScenePlacement.from_json(p) for p in d["placements"]),
            camera=geo.CameraModel(
                focal_px=cam["focal_px"], cx=cam["cx"], cy=cam["cy"],
                position=tuple(cam["position"]), tilt=cam["tilt"],
            ),
            lights=tuple(Light.from_json(l) for l in d["lights"]),
            image_size=int(d["image_size"]),
            prompt=d.get("prompt"),
        )


@dataclass(frozen=True)
class SceneObject:
    name: str
    theta: float
    box: geo.Box2D

    def __post_init__(self):
        object.__setattr__(self, "theta", geo.wrap_angle(self.theta))

    def to_json(self):
        return {"name": self.name, "theta": self.theta, "box": self.box.to_json()}

    @classmethod
    def from_json(cls, d):
        return cls(name=d["name"], theta=float(d["theta"]),
                   box=geo.Box2D.from_json(d["box"]))


@dataclass
class SceneRecord:
    record_id: str
    image_path: str
    image_size: int
    objects: list[SceneObject]
    prompt: str  # slotted template, e.g. "a photo of a {arrow} on the floor"
    provenance: str = "rendered"  # rendered | augmented
    filter_flag: str = "keep"  # keep | reject | unreviewed
    source_id: str | None = None  # originating record for augmented ones

    def __post_init__(self):
        if self.provenance not in ("rendered", "augmented"):
            raise DataError(f"bad provenance {self.provenance!r}")
        if self.filter_flag not in ("keep", "reject", "unreviewed"):
            raise DataError(f"bad filter flag {self.filter_flag!r}")
        if self.provenance == "augmented" and not self.source_id:
            raise DataError("augmented record must reference its source record")

    @property
    def n_objects(self) -> int:
        return len(self.objects)

    def to_json(self) -> dict:
        return {
            "record_id": self.record_id,
            "image": self.image_path,
            "image_size": self.image_size,
            "objects": [o.to_json() for o in self.objects],
            "prompt": self.prompt,
            "provenance": self.provenance,
            "filter": self.filter_flag,
            "source_id": self.source_id,
        }

    @classmethod
    def from_json(cls, d: dict) -> "SceneRecord":
        return cls(
            record_id=d["record_id"],
            image_path=d["image"],
            image_size=int(d["image_size"]),
            objects=[SceneObject.from_json(o) for o in d["objects"]],
            prompt=d["prompt"],
            provenance=d["provenance"],
            filter_flag=d["filter"],
            source_id=d.get("source_id"),
        )


def default_camera(image_size: int) -> geo.CameraModel:
    """Fixed camera slightly above the floor plane, pitched 15 deg down.

    Constants are chosen so the default placement region projects inside
    the frame with objects spanning roughly a third of the image.
    """
    return geo.CameraModel(
        focal_px=2.1 * image_size,
        cx=image_size / 2.0,
        cy=image_size / 2.0,
        position=(0.0, -6.0, 3.2),
        tilt=math.radians(15.0),
    )


@dataclass
class SceneSamplerConfig:
    image_size: int = 32
    # objects are dropped on the floor inside this x/y region
    region_x: tuple[float, float] = (-1.6, 1.6)
    region_y: tuple[float, float] = (2.6, 6.2)
    # None -> continuous theta; an integer n snaps to the n-point grid
    orientation_grid: int | None = None
    light_intensity: tuple[float, float] = (0.6, 1.4)
    light_region: tuple[float, float] = (-4.0, 4.0)
    light_height: tuple[float, float] = (2.0, 6.0)
    templates_single: tuple[str, ...] = ("a photo of a {A} on the floor",)
    templates_pair: tuple[str, ...] = (
        "a photo of a {A} and a {B} on the floor",
    )
    placement_attempts: int = 200
    margin_px: float = 1.0

    def camera(self) -> geo.CameraModel:
        return default_camera(self.image_size)


def _asset_aabb(asset, location):
    ex, ey, ez = asset.extent
    x, y, _ = location
    return ((x - ex / 2, y - ey / 2, 0.0), (x + ex / 2, y + ey / 2, ez))


def sample_scene_spec(
    n_objects: int,
    catalog: AssetCatalog,
    seed: int,
    config: SceneSamplerConfig | None = None,
) -> SceneSpec:
    """Sample one scene: distinct assets, uniform orientations, rejection-
    sampled locations with in-frame and disjoint-box constraints."""
    if n_objects not in (1, 2):
        raise DataError(f"training scenes hold 1 or 2 objects, got {n_objects}")
    cfg = config or SceneSamplerConfig()
    if len(catalog) < n_objects:
        raise ConfigError("catalog smaller than requested object count")
    rng = np.random.Generator(np.random.PCG64(seed))
    cam = cfg.camera()
    names = sorted(catalog.names())
    chosen = list(rng.choice(names, size=n_objects, replace=False))

    frame = geo.Box2D(
        cfg.margin_px, cfg.margin_px,
        cfg.image_size - cfg.margin_px, cfg.image_size - cfg.margin_px,
    )
    thetas = []
    for _ in chosen:
        if cfg.orientation_grid:
            k = int(rng.integers(0, cfg.orientation_grid))
            thetas.append(2.0 * math.pi * k / cfg.orientation_grid)
        else:
            thetas.append(float(rng.uniform(0.0, 2.0 * math.pi)))

    # whole-scene retries: a bad first placement can make the second
    # object unplaceable, so restart rather than hammer the second draw
    placements: list[ScenePlacement] = []
    for _ in range(cfg.placement_attempts):
        placements = []
        boxes: list[geo.Box2D] = []
        for name, theta in zip(chosen, thetas):
            asset = catalog.get(name)
            for _ in range(50):
                x = float(rng.uniform(*cfg.region_x))
                y = float(rng.uniform(*cfg.region_y))
                try:
                    box = geo.project_bounds(_asset_aabb(asset, (x, y, 0.0)), cam)
                except geo.DomainError:
                    continue  # projected outside the non-negative pixel quadrant
                if not frame.contains_box(box):
                    continue
                if any(geo.iou(box, b) > 0.0 for b in boxes):
                    continue
                placements.append(
                    ScenePlacement(asset=name, location=(x, y, 0.0),
                                   orientation=geo.Orientation.yaw(theta))
                )
                boxes.append(box)
                break
        if len(placements) == len(chosen):
            break
    if len(placements) != len(chosen):
        raise PlacementError(
            f"no in-frame disjoint placement for {chosen} after "
            f"{cfg.placement_attempts} scene attempts"
        )

    lights = tuple(
        Light(
            position=(
                float(rng.uniform(*cfg.light_region)),
                float(rng.uniform(*cfg.light_region)),
                float(rng.uniform(*cfg.light_height)),
            ),
            intensity=float(rng.uniform(*cfg.light_intensity)),
        )
        for _ in range(3)
    )
    templates = cfg.templates_single if n_objects == 1 else cfg.templates_pair
    template = templates[int(rng.integers(0, len(templates)))]
    prompt = template.replace("{A}", "{" + chosen[0] + "}")
    if n_objects == 2:
        prompt = prompt.replace("{B}", "{" + chosen[1] + "}")

    return SceneSpec(
        scene_id=f"scene-{seed:08d}-{n_objects}",
        placements=tuple(placements),
        camera=cam,
        lights=lights,
        image_size=cfg.image_size,
        prompt=prompt,
    )


def spec_prompt(spec: SceneSpec) -> str:
    """Slotted prompt template attached at sampling time (or a default)."""
    if spec.prompt is not None:
        return spec.prompt
    names = [p.asset for p in spec.placements]
    if len(names) == 1:
        return "a photo of a {" + names[0] + "} on the floor"
    return "a photo of a {" + names[0] + "} and a {" + names[1] + "} on the floor"


def tight_boxes(spec: SceneSpec, catalog: AssetCatalog) -> list[geo.Box2D]:
    """Projected tight boxes of the spec's placements."""
    return [
        geo.project_bounds(
            _asset_aabb(catalog.get(p.asset), p.location), spec.camera
        )
        for p in spec.placements
    ]
