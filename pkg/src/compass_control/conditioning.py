"""Compass encoder and prompt assembly.

The compass encoder maps a featurized orientation to a token embedding in
the text encoder's input space. Prompt assembly interleaves one compass
placeholder before each object's name tokens and records, per object, the
compass index, the object token span and the loose attention box.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass, field

import numpy as np
import torch
from torch import nn

from . import geometry as geo
from .errors import BindingError, ConfigError, InputError
from .tokenizer import MAX_OBJECTS, Tokenizer, split_words

SLOT_RE = re.compile(r"\{([^{}]+)\}")


def featurize(orientation: geo.Orientation) -> np.ndarray:
    """(sin, cos) pair per angle; removes the 0/2pi discontinuity."""
    out = np.empty(2 * len(orientation.angles), dtype=np.float32)
    for i, a in enumerate(orientation.angles):
        out[2 * i] = math.sin(a)
        out[2 * i + 1] = math.cos(a)
    return out


class CompassEncoder(nn.Module):
    """Three affine layers with ReLU between, featurized angles -> token
    embedding. Hidden width 256 keeps the encoder tiny next to any backbone."""

    def __init__(self, embed_dim: int, n_angles: int = 1, hidden: int = 256):
        super().__init__()
        if n_angles not in (1, 3):
            raise ConfigError(f"encoder supports 1 or 3 angles, got {n_angles}")
        self.embed_dim = embed_dim
        self.n_angles = n_angles
        self.hidden = hidden
        self.layers = nn.Sequential(
            nn.Linear(2 * n_angles, hidden),
            nn.ReLU(),
            nn.Linear(hidden, hidden),
            nn.ReLU(),
            nn.Linear(hidden, embed_dim),
        )

    def forward(self, features: torch.Tensor) -> torch.Tensor:
        return self.layers(features)

    def config(self) -> dict:
        return {"embed_dim": self.embed_dim, "n_angles": self.n_angles,
                "hidden": self.hidden}


@dataclass(frozen=True)
class CompassToken:
    embedding: torch.Tensor = field(repr=False)
    source_orientation: geo.Orientation


def encode_compass(encoder: CompassEncoder, orientation: geo.Orientation) -> CompassToken:
    if len(orientation.angles) != encoder.n_angles:
        raise ConfigError(
            f"encoder expects {encoder.n_angles} angle(s), "
            f"got {len(orientation.angles)}"
        )
    feats = torch.from_numpy(featurize(orientation)).to(
        dtype=next(encoder.parameters()).dtype
    )
    emb = encoder(feats)
    return CompassToken(embedding=emb, source_orientation=orientation)


@dataclass(frozen=True)
class ObjectSpec:
    """One controlled object in a prompt: name, target orientation, tight box."""

    name: str
    orientation: geo.Orientation
    box: geo.Box2D


@dataclass(frozen=True)
class ObjectBinding:
    object_name: str
    compass_token_index: int
    object_token_span: tuple[int, int]  # [start, end) into token_ids
    loose_box: geo.LooseBox
    orientation: geo.Orientation


@dataclass(frozen=True)
class PromptBinding:
    token_ids: tuple[int, ...]
    entries: tuple[ObjectBinding, ...]
    text: str  # resolved prompt with slots replaced by object names

    def __post_init__(self):
        prev_end = -1
        for e in self.entries:
            start, end = e.object_token_span
            if not (0 <= e.compass_token_index < len(self.token_ids)):
                raise BindingError(f"compass index {e.compass_token_index} out of range")
            if e.compass_token_index != start - 1:
                raise BindingError(
                    "compass token must immediately precede its object span"
                )
            if start >= end or end > len(self.token_ids):
                raise BindingError(f"bad object span {e.object_token_span}")
            if e.compass_token_index <= prev_end:
                raise BindingError("object spans must be disjoint and increasing")
            prev_end = end

    @property
    def n_objects(self) -> int:
        return len(self.entries)

    def bound_indices(self) -> dict[int, geo.LooseBox]:
        """Every masked token index (compass + object span) -> its loose box."""
        out: dict[int, geo.LooseBox] = {}
        for e in self.entries:
            out[e.compass_token_index] = e.loose_box
            for i in range(*e.object_token_span):
                out[i] = e.loose_box
        return out


def assemble_prompt(
    template: str,
    objects: list[ObjectSpec],
    tokenizer: Tokenizer,
    padding: float = geo.DEFAULT_BOX_PADDING,
    image_w: float = 512.0,
    image_h: float = 512.0,
) -> PromptBinding:
    """Fill ``{name}`` slots, insert compass placeholders and record bindings.

    Slots are matched to objects by name, in template order; each object
    must have exactly one slot. The compass placeholder for slot k is the
    reserved id <ck>, inserted immediately before the object's first token.
    """
    if len(objects) > MAX_OBJECTS:
        raise BindingError(f"at most {MAX_OBJECTS} objects supported, got {len(objects)}")
    slots = [m.group(1).strip().lower() for m in SLOT_RE.finditer(template)]
    remaining = list(range(len(objects)))
    order: list[int] = []  # object index per slot, in slot order
    for s in slots:
        match = next((i for i in remaining if objects[i].name.lower() == s), None)
        if match is None:
            raise BindingError(f"template slot {{{s}}} has no matching object")
        remaining.remove(match)
        order.append(match)
    if remaining:
        missing = ", ".join(objects[i].name for i in remaining)
        raise BindingError(f"object name missing from template: {missing}")

    words: list[str] = []
    spans_by_object: dict[int, tuple[int, int]] = {}
    compass_by_object: dict[int, int] = {}
    pos = 0
    slot_iter = iter(order)
    for piece in SLOT_RE.split(template):
        if pos % 2 == 0:  # literal text between slots
            words.extend(split_words(piece))
        else:
            obj_idx = next(slot_iter)
            name_words = split_words(objects[obj_idx].name)
            if not name_words:
                raise BindingError(f"object name {objects[obj_idx].name!r} is empty")
            if not tokenizer.words_known(name_words):
                raise BindingError(
                    f"object name {objects[obj_idx].name!r} not in vocabulary"
                )
            slot_k = len(compass_by_object)
            compass_word = f"<c{slot_k}>"
            start = len(words) + 1  # +1 for the compass word itself
            words.append(compass_word)
            words.extend(name_words)
            # +1 for BOS added by the tokenizer
            spans_by_object[obj_idx] = (start + 1, start + 1 + len(name_words))
            compass_by_object[obj_idx] = start + 1 - 1
        pos += 1

    token_ids = tokenizer.encode_words(words)
    entries = []
    for obj_idx in sorted(spans_by_object, key=lambda i: spans_by_object[i][0]):
        obj = objects[obj_idx]
        entries.append(
            ObjectBinding(
                object_name=obj.name,
                compass_token_index=compass_by_object[obj_idx],
                object_token_span=spans_by_object[obj_idx],
                loose_box=geo.loose_box(obj.box, padding, image_w, image_h),
                orientation=obj.orientation,
            )
        )
    text = SLOT_RE.sub(lambda m: m.group(1).strip(), template)
    return PromptBinding(token_ids=tuple(token_ids), entries=tuple(entries), text=text)


def substitute_compass_embeddings(
    embeddings: torch.Tensor, binding: PromptBinding, tokens: list[CompassToken]
) -> torch.Tensor:
    """Replace compass placeholder rows of a (L, D) embedding matrix.

    Only the compass rows change; every other row is carried over bit-equal.
    """
    if len(tokens) != binding.n_objects:
        raise BindingError(
            f"need one compass token per object: {len(tokens)} != {binding.n_objects}"
        )
    out = embeddings.clone()
    for entry, tok in zip(binding.entries, tokens):
        idx = entry.compass_token_index
        if idx >= out.shape[0]:
            raise BindingError(f"compass index {idx} out of range for {out.shape}")
        if tok.embedding.shape[-1] != out.shape[-1]:
            raise ConfigError(
                f"compass embedding dim {tok.embedding.shape[-1]} != "
                f"text embedding dim {out.shape[-1]}"
            )
        out[idx] = tok.embedding
    return out


def condition_sequence(binding: PromptBinding, tokens: list[CompassToken], backbone):
    """Produce the cross-attention context for a bound prompt.

    Compass embeddings are substituted into the input-embedding matrix
    before the text encoder runs, so they live in the encoder's input
    space and pick up positional information like any other token.
    """
    ids = torch.tensor(binding.token_ids, dtype=torch.long)
    emb = backbone.embed_tokens(ids)
    emb = substitute_compass_embeddings(emb, binding, tokens)
    return backbone.encode_text(emb)


@dataclass
class PersonalizationConfig:
    """Settings for attaching one new subject via a placeholder token."""

    subject_token: str
    images: list  # image arrays or paths, >= 1
    class_word: str | None = None
    adapter_rank: int = 4
    learning_rate: float = 1e-4
    steps: int = 1000
    batch_size: int = 4

    def __post_init__(self):
        from .tokenizer import RESERVED

        if self.subject_token.lower() in {w.lower() for w in RESERVED}:
            raise ConfigError(
                f"subject token {self.subject_token!r} collides with a reserved word"
            )
        if not self.images:
            raise InputError("personalization needs at least one image")
        if self.adapter_rank < 1:
            raise ConfigError("adapter rank must be >= 1")
