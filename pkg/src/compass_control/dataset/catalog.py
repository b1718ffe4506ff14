"""Asset catalog: descriptors for renderable objects.

Every asset is aligned so that it faces screen-right at theta = 0. The
built-in glyph assets carry a 2D polygon for the stub renderer; external
assets (real 3D meshes rendered out of process) carry only metadata.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field

from ..errors import ConfigError


@dataclass(frozen=True)
class AssetDescriptor:
    name: str
    # world-space extents of the asset's bounding volume (x, y, z)
    extent: tuple[float, float, float]
    glyph: str | None = None  # stub-renderable glyph kind, None for external
    rigid: bool = True
    category: str = "other"  # road | water | indoor | other
    faces_right_at_zero: bool = True

    def to_json(self) -> dict:
        return {
            "name": self.name,
            "extent": list(self.extent),
            "glyph": self.glyph,
            "rigid": self.rigid,
            "category": self.category,
            "faces_right_at_zero": self.faces_right_at_zero,
        }

    @classmethod
    def from_json(cls, data: dict) -> "AssetDescriptor":
        return cls(
            name=data["name"],
            extent=tuple(data["extent"]),
            glyph=data.get("glyph"),
            rigid=bool(data.get("rigid", True)),
            category=data.get("category", "other"),
            faces_right_at_zero=bool(data.get("faces_right_at_zero", True)),
        )


class AssetCatalog:
    def __init__(self, assets: list[AssetDescriptor]):
        if not assets:
            raise ConfigError("asset catalog is empty")
        self.assets = {a.name: a for a in assets}
        if len(self.assets) != len(assets):
            raise ConfigError("duplicate asset names in catalog")

    def __len__(self) -> int:
        return len(self.assets)

    def __contains__(self, name: str) -> bool:
        return name in self.assets

    def get(self, name: str) -> AssetDescriptor:
        if name not in self.assets:
            raise ConfigError(f"unknown asset {name!r}")
        return self.assets[name]

    def names(self) -> list[str]:
        return sorted(self.assets)

    @classmethod
    def from_dir(cls, path: str) -> "AssetCatalog":
        """Load every *.json descriptor in a directory."""
        assets = []
        for fn in sorted(os.listdir(path)):
            if fn.endswith(".json"):
                with open(os.path.join(path, fn)) as f:
                    assets.append(AssetDescriptor.from_json(json.load(f)))
        return cls(assets)

    @classmethod
    def from_file(cls, path: str) -> "AssetCatalog":
        with open(path) as f:
            data = json.load(f)
        return cls([AssetDescriptor.from_json(a) for a in data["assets"]])


def toy_catalog() -> AssetCatalog:
    """Built-in glyph assets used by the desk-scale pipeline and tests."""
    return AssetCatalog(
        [
            AssetDescriptor(name="arrow", extent=(1.5, 1.5, 1.2), glyph="arrow"),
            AssetDescriptor(name="triangle", extent=(1.5, 1.5, 1.2), glyph="triangle"),
            AssetDescriptor(name="tee", extent=(1.5, 1.5, 1.2), glyph="tee",
                            rigid=False),
        ]
    )
