"""Coupled attention localization (CALL).

Builds per-resolution additive masks bound to compass/object token indices
and applies them inside cross-attention softmaxes. The -inf of a mask is
realized as the most negative finite value of the active dtype right
before softmax; exp underflows to exactly 0, so bound tokens get exactly
zero weight outside their boxes without risking NaN rows.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field

import numpy as np
import torch

from . import geometry as geo
from .conditioning import PromptBinding
from .errors import CapabilityError, MaskError, NumericError


@dataclass(frozen=True)
class AttentionMaskSet:
    """Per-resolution, per-bound-token spatial masks for one prompt."""

    masks: dict  # {(grid_w, grid_h): {token_index: SpatialMask}}
    n_tokens: int
    _additive_cache: dict = field(default_factory=dict, repr=False, compare=False)

    @property
    def resolutions(self) -> tuple:
        return tuple(sorted(self.masks.keys()))

    @property
    def bound_indices(self) -> tuple:
        idx = set()
        for per_token in self.masks.values():
            idx.update(per_token.keys())
        return tuple(sorted(idx))

    def is_empty(self) -> bool:
        return all(len(v) == 0 for v in self.masks.values())

    def additive(self, resolution: tuple, dtype: torch.dtype,
                 device=None) -> torch.Tensor | None:
        """Dense (cells, n_tokens) additive logit matrix for one resolution.

        Returns None when no token is bound (attention runs unmasked).
        Raises MaskError if tokens are bound but this resolution is absent.
        """
        if self.is_empty():
            return None
        if resolution not in self.masks:
            raise MaskError(f"no masks built for resolution {resolution}")
        per_token = self.masks[resolution]
        if not per_token:
            return None
        key = (resolution, dtype, str(device))
        cached = self._additive_cache.get(key)
        if cached is not None:
            return cached
        gw, gh = resolution
        lowest = torch.finfo(dtype).min
        out = torch.zeros(gw * gh, self.n_tokens, dtype=dtype, device=device)
        for token_idx, mask in per_token.items():
            col = torch.from_numpy(
                np.where(mask.values.reshape(-1) == 0.0, 0.0, lowest)
            ).to(dtype=dtype, device=device)
            out[:, token_idx] = col
        self._additive_cache[key] = out
        return out


def build_mask_set(
    binding: PromptBinding,
    resolutions: list[tuple],
    image_w: float,
    image_h: float,
) -> AttentionMaskSet:
    """Rasterize every bound loose box onto every attention resolution.

    Each object's compass index and all indices of its object span share
    the same rasterized mask.
    """
    if not resolutions:
        raise MaskError("at least one attention resolution is required")
    masks: dict = {}
    bound = binding.bound_indices()
    for gw, gh in resolutions:
        per_token = {}
        for token_idx, lbox in bound.items():
            per_token[token_idx] = geo.rasterize_mask(lbox, gw, gh, image_w, image_h)
        masks[(gw, gh)] = per_token
    return AttentionMaskSet(masks=masks, n_tokens=len(binding.token_ids))


class BatchedMasks:
    """Stack of per-sample mask sets for batched training forwards."""

    def __init__(self, mask_sets: list[AttentionMaskSet]):
        self.mask_sets = mask_sets

    def is_empty(self) -> bool:
        return all(m.is_empty() for m in self.mask_sets)

    def additive(self, resolution, dtype, device=None):
        if self.is_empty():
            return None
        rows = [m.additive(resolution, dtype, device) for m in self.mask_sets]
        cells = None
        n_tokens = max(m.n_tokens for m in self.mask_sets)
        out = []
        for m, r in zip(self.mask_sets, rows):
            if r is None:
                gw, gh = resolution
                r = torch.zeros(gw * gh, m.n_tokens, dtype=dtype, device=device)
            if r.shape[1] < n_tokens:
                pad = torch.zeros(r.shape[0], n_tokens - r.shape[1], dtype=dtype,
                                  device=device)
                r = torch.cat([r, pad], dim=1)
            cells = r.shape[0]
            out.append(r)
        return torch.stack(out, dim=0).reshape(len(out), cells, n_tokens)


def masked_cross_attention(
    q: torch.Tensor,
    k: torch.Tensor,
    v: torch.Tensor,
    mask_set=None,
    resolution: tuple | None = None,
    scale: float | None = None,
) -> torch.Tensor:
    """Scaled dot-product attention with additive CALL masks.

    q: (..., cells, d); k, v: (..., tokens, d). For every bound token the
    mask value at each cell is added to the logits before softmax; rows
    stay stochastic because unbound tokens are never masked.
    """
    if scale is None:
        scale = 1.0 / (q.shape[-1] ** 0.5)
    logits = torch.matmul(q, k.transpose(-2, -1)) * scale
    if not torch.isfinite(logits).all():
        raise NumericError("non-finite attention logits")
    if mask_set is not None and not mask_set.is_empty():
        if resolution is None:
            raise MaskError("resolution required when masks are bound")
        add = mask_set.additive(resolution, dtype=logits.dtype, device=logits.device)
        if add is not None:
            if add.shape[-2] != logits.shape[-2] or add.shape[-1] != logits.shape[-1]:
                raise MaskError(
                    f"mask {tuple(add.shape)} incompatible with logits "
                    f"{tuple(logits.shape)} at resolution {resolution}"
                )
            logits = logits + add
    weights = torch.softmax(logits, dim=-1)
    return torch.matmul(weights, v), weights


@dataclass
class HookState:
    """Mutable per-site hook: mask provider plus probe toggles."""

    mask_provider: object | None = None
    enabled: bool = True
    capture: bool = False

    def active(self) -> bool:
        return (
            self.enabled
            and self.mask_provider is not None
            and not self.mask_provider.is_empty()
        )


class HookRegistry:
    """Owns the hook states attached to a backbone's cross-attention sites.

    One registry per generation/training job; hooks are removable and a
    detached backbone is bit-identical to one never hooked.
    """

    def __init__(self, sites: list):
        self.sites = sites
        self.records: list = []  # (layer_id, timestep, token_idx -> grid array)
        self._timestep = None

    def note_timestep(self, t) -> None:
        self._timestep = int(t)

    def record(self, layer_id: str, resolution: tuple, weights: torch.Tensor,
               bound: tuple) -> None:
        gw, gh = resolution
        maps = {}
        w = weights.detach()
        if w.dim() == 4:  # (batch, heads, cells, tokens) -> average heads
            w = w.mean(dim=1)
        for idx in bound:
            grid = w[..., idx].reshape(-1, gh, gw).mean(dim=0)
            maps[int(idx)] = grid.cpu().numpy()
        self.records.append((layer_id, self._timestep, resolution, maps))

    def set_enabled(self, enabled: bool) -> None:
        for site in self.sites:
            if site.hook is not None:
                site.hook.enabled = enabled

    def set_capture(self, capture: bool) -> None:
        for site in self.sites:
            if site.hook is not None:
                site.hook.capture = capture

    def detach(self) -> None:
        for site in self.sites:
            site.hook = None
            site.hook_registry = None
        self.sites = []

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.detach()
        return False


def attach_hooks(backbone, mask_provider, enabled: bool = True,
                 capture: bool = False) -> HookRegistry:
    """Route every cross-attention site of the backbone through CALL masks."""
    sites_fn = getattr(backbone, "cross_attention_sites", None)
    if sites_fn is None:
        raise CapabilityError(
            "backbone does not expose enumerable cross-attention sites"
        )
    sites = list(sites_fn())
    if not sites:
        raise CapabilityError("backbone reports zero cross-attention sites")
    if mask_provider is not None and isinstance(mask_provider, AttentionMaskSet):
        if not mask_provider.is_empty():
            for site in sites:
                # fail fast if a site resolution was not rasterized
                mask_provider.additive(site.resolution, dtype=torch.float32)
    registry = HookRegistry(sites)
    for site in sites:
        site.hook = HookState(mask_provider=mask_provider, enabled=enabled,
                              capture=capture)
        site.hook_registry = registry
    return registry


def dump_records(registry: HookRegistry) -> dict:
    """Debug dump: per-layer, per-timestep averaged maps for bound tokens."""
    layers: dict = {}
    for layer_id, t, resolution, maps in registry.records:
        layer = layers.setdefault(
            layer_id, {"resolution": list(resolution), "timesteps": {}}
        )
        slot = layer["timesteps"].setdefault(str(t), {})
        for idx, grid in maps.items():
            slot[str(idx)] = [[float(x) for x in row] for row in grid]
    return {"layers": layers}


def write_attention_dump(dump: dict, out_dir: str, render_png: bool = True) -> list[str]:
    """Write the JSON dump and, optionally, one grayscale PNG per map."""
    os.makedirs(out_dir, exist_ok=True)
    paths = []
    json_path = os.path.join(out_dir, "attention_maps.json")
    with open(json_path, "w") as f:
        json.dump(dump, f)
    paths.append(json_path)
    if render_png:
        import matplotlib

        matplotlib.use("Agg")
        import matplotlib.pyplot as plt

        for layer_id, layer in dump["layers"].items():
            for t, tokens in layer["timesteps"].items():
                for idx, grid in tokens.items():
                    arr = np.asarray(grid)
                    fig, ax = plt.subplots(figsize=(2.4, 2.4))
                    ax.imshow(arr, cmap="gray", vmin=0.0)
                    ax.set_title(f"{layer_id} t={t} tok={idx}", fontsize=7)
                    ax.axis("off")
                    safe = layer_id.replace("/", "_").replace(".", "_")
                    p = os.path.join(out_dir, f"attn_{safe}_t{t}_tok{idx}.png")
                    fig.savefig(p, dpi=100, bbox_inches="tight")
                    plt.close(fig)
                    paths.append(p)
    return paths
