import math

import numpy as np
import pytest
import torch

from compass_control import geometry as geo
from compass_control.conditioning import (
    CompassEncoder,
    PersonalizationConfig,
    assemble_prompt,
    condition_sequence,
    encode_compass,
    featurize,
    substitute_compass_embeddings,
)
from compass_control.errors import BindingError, ConfigError, InputError, PromptError
from compass_control.tokenizer import COMPASS_PLACEHOLDERS

from conftest import make_object


class TestFeaturize:
    def test_theta_zero(self):
        np.testing.assert_allclose(featurize(geo.Orientation.yaw(0.0)), [0.0, 1.0])

    def test_theta_quarter(self):
        np.testing.assert_allclose(
            featurize(geo.Orientation.yaw(math.pi / 2)), [1.0, 0.0], atol=1e-7
        )

    def test_periodicity(self):
        rng = np.random.Generator(np.random.PCG64(0))
        for theta in rng.uniform(0, 2 * math.pi, size=100):
            a = featurize(geo.Orientation.yaw(theta))
            b = featurize(geo.Orientation.yaw(theta + 2 * math.pi))
            np.testing.assert_allclose(a, b, atol=1e-9)

    def test_three_angles(self):
        f = featurize(geo.Orientation((0.0, math.pi / 2, math.pi)))
        assert f.shape == (6,)
        np.testing.assert_allclose(f, [0, 1, 1, 0, 0, -1], atol=1e-6)


class TestCompassEncoder:
    def test_deterministic(self):
        torch.manual_seed(0)
        enc = CompassEncoder(embed_dim=48)
        o = geo.Orientation.yaw(0.0)
        a = encode_compass(enc, o).embedding
        b = encode_compass(enc, o).embedding
        assert torch.equal(a, b)

    def test_periodic(self):
        torch.manual_seed(1)
        enc = CompassEncoder(embed_dim=48)
        rng = np.random.Generator(np.random.PCG64(1))
        for theta in rng.uniform(0, 2 * math.pi, size=50):
            a = encode_compass(enc, geo.Orientation.yaw(theta)).embedding
            b = encode_compass(enc, geo.Orientation.yaw(theta + 2 * math.pi)).embedding
            assert (a - b).abs().max().item() < 1e-6

    def test_zero_weights_give_bias(self):
        enc = CompassEncoder(embed_dim=8, hidden=16)
        with torch.no_grad():
            for layer in enc.layers:
                if isinstance(layer, torch.nn.Linear):
                    layer.weight.zero_()
            enc.layers[-1].bias.fill_(0.25)
        emb = encode_compass(enc, geo.Orientation.yaw(1.0)).embedding
        assert torch.equal(emb, torch.full((8,), 0.25))

    def test_angle_count_mismatch(self):
        enc = CompassEncoder(embed_dim=8, n_angles=1)
        with pytest.raises(ConfigError):
            encode_compass(enc, geo.Orientation((0.1, 0.2, 0.3)))

    def test_three_layer_structure(self):
        enc = CompassEncoder(embed_dim=48)
        linears = [m for m in enc.layers if isinstance(m, torch.nn.Linear)]
        relus = [m for m in enc.layers if isinstance(m, torch.nn.ReLU)]
        assert len(linears) == 3 and len(relus) == 2
        assert linears[0].in_features == 2
        assert linears[-1].out_features == 48


class TestAssemblePrompt:
    def test_single_object_structure(self, tokenizer):
        obj = make_object("arrow", 0.0, (100, 100, 200, 200))
        binding = assemble_prompt("a photo of a {arrow}", [obj], tokenizer)
        plain = tokenizer.encode("a photo of a arrow")
        # compass insertion grows the unpadded token count by exactly one
        pad = tokenizer.pad_id
        assert sum(1 for i in binding.token_ids if i != pad) == sum(
            1 for i in plain if i != pad
        ) + 1
        (entry,) = binding.entries
        assert entry.compass_token_index == entry.object_token_span[0] - 1
        assert binding.token_ids[entry.compass_token_index] == tokenizer.compass_id(0)
        start, end = entry.object_token_span
        assert tokenizer.decode(list(binding.token_ids[start:end])) == ["arrow"]

    def test_two_objects_disjoint_increasing(self, tokenizer, two_objects):
        binding = assemble_prompt(
            "a photo of a {arrow} and a {triangle} on the floor",
            two_objects,
            tokenizer,
        )
        assert binding.n_objects == 2
        first, second = binding.entries
        assert first.object_token_span[1] <= second.compass_token_index
        assert binding.token_ids[second.compass_token_index] == tokenizer.compass_id(1)

    def test_substring_search_oracle(self, tokenizer):
        # re-tokenize the assembled sequence and locate the name words
        templates = [
            "a photo of a {arrow}",
            "a photo of a {triangle} on the floor",
            "a photo of a {arrow} and a {triangle}",
            "a picture of a {triangle} near a {arrow}",
            "a plain scene with a {arrow}",
        ]
        names = {"arrow": ["arrow"], "triangle": ["triangle"]}
        rng = np.random.Generator(np.random.PCG64(2))
        count = 0
        for template in templates:
            for _ in range(10):
                slots = [s for s in ("arrow", "triangle") if "{" + s + "}" in template]
                objs = [
                    make_object(s, float(rng.uniform(0, 2 * math.pi)),
                                (10 + 60 * i, 10, 60 + 60 * i, 60))
                    for i, s in enumerate(slots)
                ]
                binding = assemble_prompt(template, objs, tokenizer)
                words = tokenizer.decode(list(binding.token_ids))
                for entry in binding.entries:
                    target = names[entry.object_name]
                    start, end = entry.object_token_span
                    assert words[start:end] == target
                    assert words[start - 1] in COMPASS_PLACEHOLDERS
                count += 1
        assert count == 50

    def test_order_sensitivity(self, tokenizer, two_objects):
        a = assemble_prompt(
            "a photo of a {arrow} and a {triangle}", two_objects, tokenizer
        )
        b = assemble_prompt(
            "a photo of a {triangle} and a {arrow}", two_objects[::-1], tokenizer
        )
        assert a.token_ids != b.token_ids
        assert [e.object_name for e in a.entries] == ["arrow", "triangle"]
        assert [e.object_name for e in b.entries] == ["triangle", "arrow"]

    def test_missing_slot_rejected(self, tokenizer, two_objects):
        with pytest.raises(BindingError):
            assemble_prompt("a photo of a {arrow}", two_objects, tokenizer)

    def test_unmatched_slot_rejected(self, tokenizer, two_objects):
        with pytest.raises(BindingError):
            assemble_prompt(
                "a photo of a {arrow} and a {lion}", two_objects[:1], tokenizer
            )

    def test_context_overflow(self, tokenizer):
        obj = make_object("arrow", 0.0, (10, 10, 60, 60))
        words = " ".join(["floor"] * 40)
        with pytest.raises(PromptError):
            assemble_prompt(f"a {{arrow}} {words}", [obj], tokenizer)

    def test_loose_boxes_use_padding(self, tokenizer):
        obj = make_object("arrow", 0.0, (100, 100, 160, 200))
        binding = assemble_prompt(
            "a photo of a {arrow}", [obj], tokenizer, padding=1.2,
            image_w=512, image_h=512,
        )
        assert binding.entries[0].loose_box.box == geo.Box2D(70, 90, 190, 210)


class TestConditionSequence:
    def test_no_objects_identity(self, backbone, tokenizer):
        binding = assemble_prompt("a photo of the floor", [], tokenizer)
        ids = torch.tensor(binding.token_ids, dtype=torch.long)
        plain = backbone.encode_prompt_ids(ids)
        with torch.no_grad():
            cond = condition_sequence(binding, [], backbone)
        assert torch.equal(plain, cond)

    def test_only_compass_rows_touched(self, backbone, tokenizer, two_objects):
        enc = CompassEncoder(embed_dim=backbone.cfg.text_dim)
        binding = assemble_prompt(
            "a photo of a {arrow} and a {triangle}", two_objects, tokenizer
        )
        tokens = [encode_compass(enc, o.orientation) for o in two_objects]
        ids = torch.tensor(binding.token_ids, dtype=torch.long)
        emb = backbone.embed_tokens(ids)
        out = substitute_compass_embeddings(emb, binding, tokens)
        touched = {e.compass_token_index for e in binding.entries}
        for i in range(emb.shape[0]):
            if i in touched:
                assert torch.equal(out[i], tokens[
                    [e.compass_token_index for e in binding.entries].index(i)
                ].embedding)
            else:
                assert torch.equal(out[i], emb[i])

    def test_permuting_compass_tokens_changes_two_rows(
        self, backbone, tokenizer, two_objects
    ):
        enc = CompassEncoder(embed_dim=backbone.cfg.text_dim)
        binding = assemble_prompt(
            "a photo of a {arrow} and a {triangle}", two_objects, tokenizer
        )
        tokens = [encode_compass(enc, o.orientation) for o in two_objects]
        ids = torch.tensor(binding.token_ids, dtype=torch.long)
        emb = backbone.embed_tokens(ids)
        a = substitute_compass_embeddings(emb, binding, tokens)
        b = substitute_compass_embeddings(emb, binding, tokens[::-1])
        diff_rows = [
            i for i in range(a.shape[0]) if not torch.equal(a[i], b[i])
        ]
        assert diff_rows == sorted(e.compass_token_index for e in binding.entries)

    def test_token_count_mismatch(self, backbone, tokenizer, two_objects):
        enc = CompassEncoder(embed_dim=backbone.cfg.text_dim)
        binding = assemble_prompt(
            "a photo of a {arrow} and a {triangle}", two_objects, tokenizer
        )
        tokens = [encode_compass(enc, two_objects[0].orientation)]
        with pytest.raises(BindingError):
            condition_sequence(binding, tokens, backbone)

    def test_dim_mismatch(self, backbone, tokenizer):
        enc = CompassEncoder(embed_dim=7)
        obj = make_object("arrow", 0.0, (10, 10, 60, 60))
        binding = assemble_prompt("a photo of a {arrow}", [obj], tokenizer)
        tokens = [encode_compass(enc, obj.orientation)]
        with pytest.raises(ConfigError):
            condition_sequence(binding, tokens, backbone)


class TestPersonalizationConfig:
    def test_reserved_token_rejected(self):
        with pytest.raises(ConfigError):
            PersonalizationConfig(subject_token="<pad>", images=[np.zeros((8, 8))])

    def test_needs_images(self):
        with pytest.raises(InputError):
            PersonalizationConfig(subject_token="<u0>", images=[])
