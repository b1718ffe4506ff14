from .catalog import AssetCatalog, AssetDescriptor, toy_catalog
from .scenes import (
    Light,
    SceneRecord,
    SceneObject,
    SceneSamplerConfig,
    SceneSpec,
    default_camera,
    sample_scene_spec,
)
from .render import ProcessRendererAdapter, StubRenderer, render
from .augment import (
    AugmentationJob,
    CannyEdgeExtractor,
    StubImageGenerator,
    build_augmentation_jobs,
    execute_augmentation,
)
from .manifest import (
    compile_manifest,
    read_manifest,
    set_all_flags,
    set_filter_flag,
    validate_records,
    write_manifest,
)

__all__ = [
    "AssetCatalog",
    "AssetDescriptor",
    "toy_catalog",
    "Light",
    "SceneRecord",
    "SceneObject",
    "SceneSamplerConfig",
    "SceneSpec",
    "default_camera",
    "sample_scene_spec",
    "ProcessRendererAdapter",
    "StubRenderer",
    "render",
    "AugmentationJob",
    "CannyEdgeExtractor",
    "StubImageGenerator",
    "build_augmentation_jobs",
    "execute_augmentation",
    "compile_manifest",
    "read_manifest",
    "set_all_flags",
    "set_filter_flag",
    "validate_records",
    "write_manifest",
]
