import math

import pytest
import torch

from compass_control import geometry as geo
from compass_control.backbone import BackboneConfig, ToyBackbone
from compass_control.conditioning import ObjectSpec
from compass_control.tokenizer import Tokenizer

TOY_CORPUS = [
    "a photo of a arrow and a triangle on the floor",
    "a picture of a arrow near a triangle",
    "a plain scene with a arrow",
    "a plain scene with a triangle",
    "a photo of a tee glyph",
]


@pytest.fixture(scope="session")
def tokenizer():
    return Tokenizer.from_corpus(TOY_CORPUS, context_length=32)


@pytest.fixture(scope="session")
def backbone_config():
    return BackboneConfig()


@pytest.fixture()
def backbone(backbone_config, tokenizer):
    torch.manual_seed(0)
    return ToyBackbone(backbone_config, tokenizer)


def make_object(name, theta, box):
    return ObjectSpec(
        name=name, orientation=geo.Orientation.yaw(theta), box=geo.Box2D(*box)
    )


@pytest.fixture()
def two_objects():
    return [
        make_object("arrow", 0.0, (40, 40, 200, 220)),
        make_object("triangle", math.pi / 2, (300, 280, 470, 430)),
    ]
