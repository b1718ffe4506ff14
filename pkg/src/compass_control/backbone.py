"""Built-in tiny latent-diffusion backbone.

A small text-conditional denoising U-Net over single-channel images with
cross-attention at two spatial resolutions (three sites). It exists to
make conditioning, CALL and the training contracts testable at desk scale
without external model weights. No dropout anywhere: forwards are pure
functions of (inputs, parameters), which the bit-identity tests rely on.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, asdict

import torch
from torch import nn

from .call_attention import masked_cross_attention
from .errors import ConfigError
from .tokenizer import Tokenizer


@dataclass
class BackboneConfig:
    image_size: int = 32
    channels: int = 1
    base_width: int = 16
    text_dim: int = 48
    text_layers: int = 2
    text_heads: int = 2
    context_length: int = 32
    n_timesteps: int = 200
    beta_start: float = 1e-4
    beta_end: float = 0.02
    init_seed: int = 0

    def __post_init__(self):
        if self.image_size % 4 != 0:
            raise ConfigError("image_size must be divisible by 4")

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json(cls, data: dict) -> "BackboneConfig":
        return cls(**data)


def timestep_embedding(t: torch.Tensor, dim: int) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(
        -math.log(10000.0) * torch.arange(half, dtype=torch.float64) / (half - 1)
    ).to(t.device)
    args = t.double()[:, None] * freqs[None, :]
    emb = torch.cat([torch.sin(args), torch.cos(args)], dim=-1)
    return emb.to(torch.get_default_dtype() if t.dtype == torch.long else t.dtype)


def sinusoidal_positions(length: int, dim: int) -> torch.Tensor:
    pos = torch.arange(length, dtype=torch.float64)
    emb = timestep_embedding(pos, dim)
    return emb.float()


class SelfAttentionBlock(nn.Module):
    def __init__(self, dim: int, heads: int):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.attn = nn.MultiheadAttention(dim, heads, batch_first=True)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = nn.Sequential(
            nn.Linear(dim, 4 * dim), nn.GELU(), nn.Linear(4 * dim, dim)
        )

    def forward(self, x):
        h = self.norm1(x)
        a, _ = self.attn(h, h, h, need_weights=False)
        x = x + a
        return x + self.mlp(self.norm2(x))


class TextEncoder(nn.Module):
    """Token embedding + learned positions + a short transformer stack.

    embed_tokens and encode_text are split so compass embeddings can be
    substituted into the raw input-embedding matrix before positions are
    added and the stack runs.
    """

    def __init__(self, capacity: int, dim: int, layers: int, heads: int,
                 context_length: int):
        super().__init__()
        self.embedding = nn.Embedding(capacity, dim)
        self.register_buffer(
            "positions", sinusoidal_positions(context_length, dim), persistent=False
        )
        self.blocks = nn.ModuleList(
            SelfAttentionBlock(dim, heads) for _ in range(layers)
        )
        self.final_norm = nn.LayerNorm(dim)

    def embed_tokens(self, ids: torch.Tensor) -> torch.Tensor:
        return self.embedding(ids)

    def encode(self, emb: torch.Tensor) -> torch.Tensor:
        squeeze = emb.dim() == 2
        if squeeze:
            emb = emb[None]
        h = emb + self.positions[: emb.shape[1]].to(emb.dtype)[None]
        for block in self.blocks:
            h = block(h)
        h = self.final_norm(h)
        return h[0] if squeeze else h


class LoRAAdapter(nn.Module):
    def __init__(self, in_features: int, out_features: int, rank: int,
                 init_gen: torch.Generator | None = None):
        super().__init__()
        self.down = nn.Parameter(torch.empty(rank, in_features))
        self.up = nn.Parameter(torch.zeros(out_features, rank))
        std = 1.0 / math.sqrt(in_features)
        with torch.no_grad():
            self.down.normal_(0.0, std, generator=init_gen)
        self.rank = rank

    def forward(self, x):
        return (x @ self.down.t()) @ self.up.t()


class LoRALinear(nn.Module):
    """Frozen base linear plus any number of named low-rank adapters.

    With no adapters (or all inactive) the forward is exactly the base
    linear, so the un-adapted model is bit-identical to plain nn.Linear.
    """

    def __init__(self, base: nn.Linear):
        super().__init__()
        self.base = base
        self.adapters = nn.ModuleDict()
        self.active: list[str] = []

    def forward(self, x):
        y = self.base(x)
        for name in self.active:
            y = y + self.adapters[name](x)
        return y

    def add_adapter(self, name: str, rank: int, init_gen=None) -> LoRAAdapter:
        if name in self.adapters:
            raise ConfigError(f"adapter {name!r} already exists")
        a = LoRAAdapter(self.base.in_features, self.base.out_features, rank, init_gen)
        a.to(self.base.weight.dtype)
        self.adapters[name] = a
        self.active.append(name)
        return a

    def remove_adapter(self, name: str) -> None:
        if name in self.adapters:
            del self.adapters[name]
            self.active = [n for n in self.active if n != name]


class CrossAttentionSite(nn.Module):
    """One hookable cross-attention layer: queries from spatial features,
    keys/values from the text context. Single head; LoRA on all four
    projections."""

    def __init__(self, channels: int, ctx_dim: int, layer_id: str,
                 resolution: tuple[int, int]):
        super().__init__()
        self.layer_id = layer_id
        self.resolution = resolution  # (grid_w, grid_h)
        self.norm = nn.GroupNorm(8, channels)
        self.to_q = LoRALinear(nn.Linear(channels, channels))
        self.to_k = LoRALinear(nn.Linear(ctx_dim, channels))
        self.to_v = LoRALinear(nn.Linear(ctx_dim, channels))
        self.to_out = LoRALinear(nn.Linear(channels, channels))
        self.hook = None  # HookState set by call_attention.attach_hooks
        self.hook_registry = None

    def forward(self, x: torch.Tensor, ctx: torch.Tensor) -> torch.Tensor:
        b, c, h, w = x.shape
        if (w, h) != self.resolution:
            raise ConfigError(
                f"site {self.layer_id} expects {self.resolution}, got {(w, h)}"
            )
        q_in = self.norm(x).reshape(b, c, h * w).transpose(1, 2)
        q = self.to_q(q_in)
        k = self.to_k(ctx)
        v = self.to_v(ctx)
        hook = self.hook
        if hook is not None and hook.active():
            out, weights = masked_cross_attention(
                q, k, v, hook.mask_provider, self.resolution
            )
            if hook.capture and self.hook_registry is not None:
                bound = ()
                provider = hook.mask_provider
                if hasattr(provider, "bound_indices"):
                    bound = provider.bound_indices
                self.hook_registry.record(self.layer_id, self.resolution,
                                          weights, bound)
        else:
            out, weights = masked_cross_attention(q, k, v, None, self.resolution)
            if hook is not None and hook.capture and self.hook_registry is not None:
                provider = hook.mask_provider
                bound = provider.bound_indices if hasattr(provider, "bound_indices") else ()
                self.hook_registry.record(self.layer_id, self.resolution,
                                          weights, bound)
        out = self.to_out(out)
        return x + out.transpose(1, 2).reshape(b, c, h, w)

    def lora_linears(self) -> dict[str, LoRALinear]:
        return {"to_q": self.to_q, "to_k": self.to_k, "to_v": self.to_v,
                "to_out": self.to_out}


class ResBlock(nn.Module):
    def __init__(self, channels: int, temb_dim: int):
        super().__init__()
        self.norm1 = nn.GroupNorm(8, channels)
        self.conv1 = nn.Conv2d(channels, channels, 3, padding=1)
        self.temb_proj = nn.Linear(temb_dim, channels)
        self.norm2 = nn.GroupNorm(8, channels)
        self.conv2 = nn.Conv2d(channels, channels, 3, padding=1)

    def forward(self, x, temb):
        h = self.conv1(torch.nn.functional.silu(self.norm1(x)))
        h = h + self.temb_proj(torch.nn.functional.silu(temb))[:, :, None, None]
        h = self.conv2(torch.nn.functional.silu(self.norm2(h)))
        return x + h


class TinyUNet(nn.Module):
    """32x32 -> 16x16 -> 8x8 encoder/decoder with cross-attention at 16^2
    (down and up) and 8^2."""

    def __init__(self, cfg: BackboneConfig):
        super().__init__()
        w = cfg.base_width
        s = cfg.image_size
        temb_dim = 4 * w
        self.temb_dim = temb_dim
        self.temb_mlp = nn.Sequential(
            nn.Linear(temb_dim, temb_dim), nn.SiLU(), nn.Linear(temb_dim, temb_dim)
        )
        self.stem = nn.Conv2d(cfg.channels, w, 3, padding=1)
        self.enc1 = ResBlock(w, temb_dim)
        self.down1 = nn.Conv2d(w, 2 * w, 3, stride=2, padding=1)
        self.enc2 = ResBlock(2 * w, temb_dim)
        self.attn_down16 = CrossAttentionSite(
            2 * w, cfg.text_dim, "down.16", (s // 2, s // 2)
        )
        self.down2 = nn.Conv2d(2 * w, 2 * w, 3, stride=2, padding=1)
        self.enc3 = ResBlock(2 * w, temb_dim)
        self.attn_mid8 = CrossAttentionSite(
            2 * w, cfg.text_dim, "mid.8", (s // 4, s // 4)
        )
        self.mid = ResBlock(2 * w, temb_dim)
        self.up1 = nn.ConvTranspose2d(2 * w, 2 * w, 4, stride=2, padding=1)
        self.fuse1 = nn.Conv2d(4 * w, 2 * w, 3, padding=1)
        self.dec1 = ResBlock(2 * w, temb_dim)
        self.attn_up16 = CrossAttentionSite(
            2 * w, cfg.text_dim, "up.16", (s // 2, s // 2)
        )
        self.up2 = nn.ConvTranspose2d(2 * w, w, 4, stride=2, padding=1)
        self.fuse2 = nn.Conv2d(2 * w, w, 3, padding=1)
        self.dec2 = ResBlock(w, temb_dim)
        self.out_norm = nn.GroupNorm(8, w)
        self.out_conv = nn.Conv2d(w, cfg.channels, 3, padding=1)

    def forward(self, x, t, ctx):
        temb = self.temb_mlp(timestep_embedding(t, self.temb_dim).to(x.dtype))
        h1 = self.enc1(self.stem(x), temb)
        h2 = self.enc2(self.down1(h1), temb)
        h2 = self.attn_down16(h2, ctx)
        h3 = self.enc3(self.down2(h2), temb)
        h3 = self.attn_mid8(h3, ctx)
        h3 = self.mid(h3, temb)
        u1 = self.fuse1(torch.cat([self.up1(h3), h2], dim=1))
        u1 = self.dec1(u1, temb)
        u1 = self.attn_up16(u1, ctx)
        u2 = self.fuse2(torch.cat([self.up2(u1), h1], dim=1))
        u2 = self.dec2(u2, temb)
        return self.out_conv(torch.nn.functional.silu(self.out_norm(u2)))

    def attention_sites(self) -> list[CrossAttentionSite]:
        return [self.attn_down16, self.attn_mid8, self.attn_up16]


class ToyBackbone(nn.Module):
    """Tokenizer + text encoder + denoising U-Net + DDPM schedule."""

    def __init__(self, cfg: BackboneConfig, tokenizer: Tokenizer):
        super().__init__()
        if tokenizer.context_length != cfg.context_length:
            raise ConfigError("tokenizer and backbone context lengths differ")
        self.cfg = cfg
        self.tokenizer = tokenizer
        with _deterministic_init(cfg.init_seed):
            self.text_encoder = TextEncoder(
                tokenizer.capacity, cfg.text_dim, cfg.text_layers, cfg.text_heads,
                cfg.context_length,
            )
            self.unet = TinyUNet(cfg)
        betas = torch.linspace(cfg.beta_start, cfg.beta_end, cfg.n_timesteps,
                               dtype=torch.float64)
        alphas_cumprod = torch.cumprod(1.0 - betas, dim=0)
        self.register_buffer("betas", betas.float(), persistent=False)
        self.register_buffer("alphas_cumprod", alphas_cumprod.float(),
                             persistent=False)

    # -- text side -----------------------------------------------------
    def embed_tokens(self, ids: torch.Tensor) -> torch.Tensor:
        return self.text_encoder.embed_tokens(ids)

    def encode_text(self, emb: torch.Tensor) -> torch.Tensor:
        return self.text_encoder.encode(emb)

    def encode_prompt_ids(self, ids: torch.Tensor) -> torch.Tensor:
        return self.encode_text(self.embed_tokens(ids))

    def empty_context(self, batch: int = 1) -> torch.Tensor:
        ids = torch.tensor(self.tokenizer.encode_words([]), dtype=torch.long)
        ctx = self.encode_prompt_ids(ids)
        return ctx[None].expand(batch, -1, -1) if ctx.dim() == 2 else ctx

    # -- denoiser ------------------------------------------------------
    def predict_noise(self, x_t, t, ctx) -> torch.Tensor:
        if ctx.dim() == 2:
            ctx = ctx[None].expand(x_t.shape[0], -1, -1)
        return self.unet(x_t, t, ctx)

    def cross_attention_sites(self) -> list[CrossAttentionSite]:
        return self.unet.attention_sites()

    @property
    def attention_resolutions(self) -> list[tuple[int, int]]:
        seen = []
        for site in self.cross_attention_sites():
            if site.resolution not in seen:
                seen.append(site.resolution)
        return seen

    # -- schedule ------------------------------------------------------
    def q_sample(self, x0, t, noise):
        ac = self.alphas_cumprod.to(x0.dtype)[t][:, None, None, None]
        return torch.sqrt(ac) * x0 + torch.sqrt(1.0 - ac) * noise

    def lora_linears(self) -> dict[str, LoRALinear]:
        out = {}
        for site in self.cross_attention_sites():
            for proj, lin in site.lora_linears().items():
                out[f"{site.layer_id}.{proj}"] = lin
        return out

    def add_adapters(self, name: str, rank: int, seed: int = 0) -> list[nn.Parameter]:
        gen = torch.Generator().manual_seed(seed)
        params: list[nn.Parameter] = []
        for lin in self.lora_linears().values():
            a = lin.add_adapter(name, rank, init_gen=gen)
            params.extend([a.down, a.up])
        return params

    def remove_adapters(self, name: str) -> None:
        for lin in self.lora_linears().values():
            lin.remove_adapter(name)

    def adapter_state_dict(self, name: str) -> dict:
        out = {}
        for key, lin in self.lora_linears().items():
            if name in lin.adapters:
                a = lin.adapters[name]
                out[f"{key}.down"] = a.down.detach().clone()
                out[f"{key}.up"] = a.up.detach().clone()
        return out

    def load_adapter_state_dict(self, name: str, state: dict, rank: int) -> None:
        for key, lin in self.lora_linears().items():
            if name not in lin.adapters:
                lin.add_adapter(name, rank)
            a = lin.adapters[name]
            with torch.no_grad():
                a.down.copy_(state[f"{key}.down"])
                a.up.copy_(state[f"{key}.up"])

    def base_state_dict(self) -> dict:
        """All parameters except LoRA adapters (the frozen base)."""
        return {
            k: v for k, v in self.state_dict().items() if ".adapters." not in k
        }


class _deterministic_init:
    """Pin torch's global init RNG to a seed, restoring it afterwards, so
    module construction is reproducible regardless of ambient RNG use."""

    def __init__(self, seed: int):
        self.seed = seed

    def __enter__(self):
        self.state = torch.random.get_rng_state()
        torch.manual_seed(self.seed)
        return self

    def __exit__(self, *exc):
        torch.random.set_rng_state(self.state)
        return False


def ddim_timesteps(n_train: int, n_steps: int) -> list[int]:
    if n_steps >= n_train:
        return list(range(n_train - 1, -1, -1))
    stride = n_train / n_steps
    ts = [min(n_train - 1, int(round(i * stride))) for i in range(n_steps)]
    ts = sorted(set(ts), reverse=True)
    return ts


@torch.no_grad()
def ddim_sample(
    backbone: ToyBackbone,
    ctx: torch.Tensor,
    batch: int,
    steps: int,
    seed: int,
    guidance_scale: float = 1.0,
    uncond_ctx: torch.Tensor | None = None,
    on_timestep=None,
) -> torch.Tensor:
    """Deterministic DDIM (eta=0) sampler; pure function of (inputs, seed)."""
    cfg = backbone.cfg
    gen = torch.Generator().manual_seed(seed)
    device = next(backbone.parameters()).device
    dtype = next(backbone.parameters()).dtype
    x = torch.randn(batch, cfg.channels, cfg.image_size, cfg.image_size,
                    generator=gen).to(device=device, dtype=dtype)
    ts = ddim_timesteps(cfg.n_timesteps, steps)
    ac = backbone.alphas_cumprod.to(dtype)
    for i, t in enumerate(ts):
        if on_timestep is not None:
            on_timestep(t)
        tt = torch.full((batch,), t, dtype=torch.long, device=device)
        eps = backbone.predict_noise(x, tt, ctx)
        if guidance_scale != 1.0:
            if uncond_ctx is None:
                uncond_ctx = backbone.empty_context(batch)
            eps_u = backbone.predict_noise(x, tt, uncond_ctx)
            eps = eps_u + guidance_scale * (eps - eps_u)
        a_t = ac[t]
        a_prev = ac[ts[i + 1]] if i + 1 < len(ts) else torch.tensor(1.0, dtype=dtype)
        x0 = (x - torch.sqrt(1.0 - a_t) * eps) / torch.sqrt(a_t)
        x0 = x0.clamp(-1.5, 1.5)
        x = torch.sqrt(a_prev) * x0 + torch.sqrt(1.0 - a_prev) * eps
    return x
