"""Staged training of the compass encoder and backbone adapters.

The base backbone is frozen during compass training: only the encoder and
the low-rank adapters receive gradients, and the noise-prediction MSE of
the latent-diffusion framework is the objective. All per-step randomness
(batch indices, timesteps, noise) derives from (seed, global_step), so
runs replay exactly and resume mid-stage without drift.
"""

from __future__ import annotations

import csv
import json
import math
import os
import shutil
from dataclasses import dataclass, field, asdict

import numpy as np
import torch

from . import geometry as geo
from .backbone import BackboneConfig, ToyBackbone
from .call_attention import BatchedMasks, attach_hooks, build_mask_set
from .conditioning import (
    CompassEncoder,
    ObjectSpec,
    assemble_prompt,
    encode_compass,
    substitute_compass_embeddings,
)
from .dataset.render import load_image
from .dataset.scenes import SceneRecord
from .errors import ConfigError, DataError, InputError, NumericError
from .tokenizer import Tokenizer

COMPASS_ADAPTER = "compass"


@dataclass
class StagePlan:
    stage_id: str
    iterations: int
    manifest_filter: str  # "single-only" | "mixed"

    def __post_init__(self):
        if self.manifest_filter not in ("single-only", "mixed"):
            raise ConfigError(f"bad manifest filter {self.manifest_filter!r}")
        if self.iterations < 1:
            raise ConfigError("stage iterations must be >= 1")


@dataclass
class TrainConfig:
    stages: list[StagePlan] = field(
        default_factory=lambda: [
            StagePlan("stage1", 30000, "single-only"),
            StagePlan("stage2", 70000, "mixed"),
        ]
    )
    batch_size: int = 4
    learning_rate: float = 1e-4
    weight_decay: float = 0.01
    adapter_rank: int = 4
    box_padding: float = geo.DEFAULT_BOX_PADDING
    seed: int = 0
    encoder_hidden: int = 256
    call_enabled: bool = True
    rendered_only: bool = False  # drop augmented records (ablation)
    pretrain_iterations: int = 0  # base-backbone prep before compass stages
    pretrain_learning_rate: float = 2e-3
    cond_dropout: float = 0.1  # pretraining only, for classifier-free guidance
    checkpoint_every: int = 0  # 0 -> checkpoints only at stage boundaries

    def __post_init__(self):
        if not self.stages:
            raise ConfigError("at least one training stage is required")
        # a lone mixed stage is the declared single-stage ablation; any
        # multi-stage plan must start with the single-object stage
        if len(self.stages) > 1 and self.stages[0].manifest_filter != "single-only":
            raise ConfigError("stage 1 of a staged plan must be single-only")
        if self.learning_rate < 0 or self.pretrain_learning_rate <= 0:
            raise ConfigError("learning rates must be positive")
        if self.adapter_rank < 1:
            raise ConfigError("adapter rank must be >= 1")
        if self.batch_size < 1:
            raise ConfigError("batch size must be >= 1")

    def to_json(self) -> dict:
        data = asdict(self)
        data["stages"] = [asdict(s) for s in self.stages]
        return data

    @classmethod
    def from_json(cls, data: dict) -> "TrainConfig":
        data = dict(data)
        data["stages"] = [StagePlan(**s) for s in data.get("stages", [])]
        return cls(**data)


def ablation_switches(config: TrainConfig) -> dict[str, TrainConfig]:
    """Base plus the three ablations: no CALL, single stage, no augmentation."""
    variants = {"base": TrainConfig.from_json(config.to_json())}
    no_call = TrainConfig.from_json(config.to_json())
    no_call.call_enabled = False
    variants["no_call"] = no_call
    single = TrainConfig.from_json(config.to_json())
    total = sum(s.iterations for s in config.stages)
    single.stages = [StagePlan("single_stage", total, "mixed")]
    variants["single_stage"] = single
    no_aug = TrainConfig.from_json(config.to_json())
    no_aug.rendered_only = True
    variants["no_augmentation"] = no_aug
    return variants


# ---------------------------------------------------------------------------
# data plumbing


class RecordDataset:
    """Manifest records with a small in-memory image cache."""

    def __init__(self, records: list[SceneRecord], base_dir: str = "."):
        if not records:
            raise DataError("empty record list")
        self.records = records
        self.base_dir = base_dir
        self._cache: dict[str, np.ndarray] = {}

    def __len__(self):
        return len(self.records)

    def image(self, record: SceneRecord) -> np.ndarray:
        path = record.image_path
        if not os.path.isabs(path):
            path = os.path.join(self.base_dir, path)
        if path not in self._cache:
            self._cache[path] = load_image(path)
        return self._cache[path]


def step_seed(seed: int, step: int, stream: int) -> int:
    ss = np.random.SeedSequence([seed, step, stream])
    return int(ss.generate_state(1, dtype=np.uint64)[0] % (2**63 - 1))


def batch_indices(n_records: int, batch_size: int, seed: int, step: int) -> list[int]:
    rng = np.random.Generator(np.random.PCG64(step_seed(seed, step, 0)))
    return [int(i) for i in rng.integers(0, n_records, size=batch_size)]


def record_objects(record: SceneRecord) -> list[ObjectSpec]:
    return [
        ObjectSpec(name=o.name, orientation=geo.Orientation.yaw(o.theta), box=o.box)
        for o in record.objects
    ]


def prepare_batch(
    dataset: RecordDataset,
    records: list[SceneRecord],
    backbone: ToyBackbone,
    padding: float,
):
    """Images to [-1, 1] tensors plus prompt bindings for a record batch."""
    if not records:
        raise InputError("empty batch")
    size = backbone.cfg.image_size
    imgs, bindings = [], []
    for r in records:
        img = dataset.image(r)
        if img.shape != (size, size):
            raise DataError(
                f"record {r.record_id}: image {img.shape} != backbone {size}"
            )
        imgs.append(torch.from_numpy(img * 2.0 - 1.0)[None])
        bindings.append(
            assemble_prompt(
                r.prompt, record_objects(r), backbone.tokenizer,
                padding=padding, image_w=size, image_h=size,
            )
        )
    dtype = next(backbone.parameters()).dtype
    x0 = torch.stack(imgs).to(dtype)
    return x0, bindings


def batch_loss(
    backbone: ToyBackbone,
    encoder: CompassEncoder | None,
    x0: torch.Tensor,
    bindings: list,
    t: torch.Tensor,
    noise: torch.Tensor,
    call_enabled: bool,
) -> torch.Tensor:
    """Noise-prediction MSE for one batch; pure in (params, inputs)."""
    ids = torch.tensor([b.token_ids for b in bindings], dtype=torch.long)
    emb = backbone.embed_tokens(ids)
    if encoder is not None:
        rows = []
        for i, binding in enumerate(bindings):
            tokens = [
                encode_compass(encoder, e.orientation) for e in binding.entries
            ]
            rows.append(substitute_compass_embeddings(emb[i], binding, tokens))
        emb = torch.stack(rows)
    ctx = backbone.encode_text(emb)
    x_t = backbone.q_sample(x0, t, noise)
    registry = None
    if call_enabled:
        size = backbone.cfg.image_size
        masks = BatchedMasks(
            [
                build_mask_set(b, backbone.attention_resolutions, size, size)
                for b in bindings
            ]
        )
        registry = attach_hooks(backbone, masks)
    try:
        pred = backbone.predict_noise(x_t, t, ctx)
    finally:
        if registry is not None:
            registry.detach()
    loss = torch.mean((pred - noise) ** 2)
    if not torch.isfinite(loss):
        raise NumericError(
            f"non-finite training loss at t={t.tolist()}"
        )
    return loss


# ---------------------------------------------------------------------------
# trainer state


@dataclass
class TrainState:
    backbone: ToyBackbone
    encoder: CompassEncoder
    optimizer: torch.optim.Optimizer
    config: TrainConfig
    dataset: RecordDataset
    iteration: int = 0
    stage_id: str = ""
    loss_log: list = field(default_factory=list)  # (iteration, stage, loss)
    audit: dict = field(default_factory=dict)  # stage_id -> {"max_objects", "batches"}

    def trainable_parameters(self) -> list[torch.nn.Parameter]:
        return [p for group in self.optimizer.param_groups for p in group["params"]]


def build_train_state(
    backbone: ToyBackbone,
    records: list[SceneRecord],
    config: TrainConfig,
    base_dir: str = ".",
) -> TrainState:
    """Freeze the base, add compass adapters, wire the optimizer."""
    if config.rendered_only:
        records = [r for r in records if r.provenance == "rendered"]
    for p in backbone.parameters():
        p.requires_grad_(False)
    adapter_params = backbone.add_adapters(
        COMPASS_ADAPTER, config.adapter_rank, seed=config.seed
    )
    for p in adapter_params:
        p.requires_grad_(True)
    dtype = next(backbone.parameters()).dtype
    with torch.random.fork_rng():
        torch.manual_seed(config.seed + 1)
        encoder = CompassEncoder(
            embed_dim=backbone.cfg.text_dim, hidden=config.encoder_hidden
        ).to(dtype)
    optimizer = torch.optim.AdamW(
        list(encoder.parameters()) + adapter_params,
        lr=config.learning_rate,
        weight_decay=config.weight_decay,
    )
    return TrainState(
        backbone=backbone,
        encoder=encoder,
        optimizer=optimizer,
        config=config,
        dataset=RecordDataset(records, base_dir),
    )


def training_step(state: TrainState, records: list[SceneRecord]) -> float:
    """One optimizer step over encoder + adapters; returns the scalar loss."""
    if not records:
        raise InputError("empty batch")
    cfg = state.config
    backbone = state.backbone
    x0, bindings = prepare_batch(state.dataset, records, backbone, cfg.box_padding)
    gen = torch.Generator().manual_seed(step_seed(cfg.seed, state.iteration, 1))
    t = torch.randint(
        0, backbone.cfg.n_timesteps, (x0.shape[0],), generator=gen
    )
    noise = torch.randn(x0.shape, generator=gen).to(x0.dtype)
    loss = batch_loss(
        backbone, state.encoder, x0, bindings, t, noise, cfg.call_enabled
    )
    state.optimizer.zero_grad()
    loss.backward()
    state.optimizer.step()
    audit = state.audit.setdefault(
        state.stage_id or "default", {"max_objects": 0, "batches": 0}
    )
    audit["max_objects"] = max(audit["max_objects"], max(r.n_objects for r in records))
    audit["batches"] += 1
    state.iteration += 1
    return float(loss.detach())


def stage_records(records: list[SceneRecord], stage: StagePlan,
                  rendered_only: bool) -> list[SceneRecord]:
    out = [r for r in records if not (rendered_only and r.provenance != "rendered")]
    if stage.manifest_filter == "single-only":
        out = [r for r in out if r.n_objects == 1]
    return out


def verify_stage_manifest(records: list[SceneRecord], stage: StagePlan) -> None:
    if not records:
        raise ConfigError(f"stage {stage.stage_id}: empty manifest")
    if stage.manifest_filter == "single-only":
        bad = [r.record_id for r in records if r.n_objects != 1]
        if bad:
            raise ConfigError(
                f"stage {stage.stage_id} is single-only but manifest has "
                f"{len(bad)} multi-object records (e.g. {bad[0]})"
            )


def run_stage_plan(
    state: TrainState,
    manifests: dict[str, list[SceneRecord]] | None = None,
    out_dir: str | None = None,
    log_every: int = 1,
    progress=None,
) -> list[str]:
    """Run every stage in order; emit checkpoints at the configured cadence
    and at stage boundaries. Returns the checkpoint paths."""
    cfg = state.config
    checkpoints: list[str] = []
    for stage in cfg.stages:
        if manifests is not None and stage.stage_id in manifests:
            records = manifests[stage.stage_id]
            if cfg.rendered_only:
                records = [r for r in records if r.provenance == "rendered"]
        else:
            records = stage_records(state.dataset.records, stage, cfg.rendered_only)
        verify_stage_manifest(records, stage)
        state.stage_id = stage.stage_id
        for _ in range(stage.iterations):
            idx = batch_indices(
                len(records), cfg.batch_size, cfg.seed, state.iteration
            )
            batch = [records[i] for i in idx]
            loss = training_step(state, batch)
            if state.iteration % log_every == 0:
                state.loss_log.append((state.iteration, stage.stage_id, loss))
            if progress is not None:
                progress(state.iteration, stage.stage_id, loss)
            if (
                out_dir
                and cfg.checkpoint_every
                and state.iteration % cfg.checkpoint_every == 0
            ):
                path = os.path.join(out_dir, f"ckpt-{state.iteration:07d}")
                save_checkpoint(path, state)
                checkpoints.append(path)
        if out_dir:
            path = os.path.join(out_dir, f"ckpt-{stage.stage_id}")
            save_checkpoint(path, state)
            checkpoints.append(path)
    return checkpoints


# ---------------------------------------------------------------------------
# backbone pretraining (the desk-scale analogue of the public T2I weights)


def pretrain_backbone(
    backbone: ToyBackbone,
    records: list[SceneRecord],
    config: TrainConfig,
    base_dir: str = ".",
    progress=None,
) -> list[float]:
    """Plain text-conditional denoising pretrain of the full base model.

    No compass tokens and no CALL: this stands in for the pretrained
    public checkpoint that compass training adapts. Conditioning is
    dropped at cond_dropout rate so classifier-free guidance works at
    inference.
    """
    if config.pretrain_iterations < 1:
        return []
    dataset = RecordDataset(records, base_dir)
    for p in backbone.parameters():
        p.requires_grad_(True)
    opt = torch.optim.AdamW(
        backbone.parameters(), lr=config.pretrain_learning_rate,
        weight_decay=config.weight_decay,
    )
    tok = backbone.tokenizer
    empty_ids = tok.encode_words([])
    losses = []
    size = backbone.cfg.image_size
    for it in range(config.pretrain_iterations):
        idx = batch_indices(len(records), config.batch_size, config.seed + 77, it)
        batch = [records[i] for i in idx]
        gen = torch.Generator().manual_seed(step_seed(config.seed + 77, it, 2))
        imgs, ids = [], []
        for r in batch:
            img = dataset.image(r)
            imgs.append(torch.from_numpy(img * 2.0 - 1.0)[None])
            if float(torch.rand((), generator=gen)) < config.cond_dropout:
                ids.append(empty_ids)
            else:
                plain = r.prompt.replace("{", "").replace("}", "")
                ids.append(tok.encode(plain))
        x0 = torch.stack(imgs).to(next(backbone.parameters()).dtype)
        t = torch.randint(0, backbone.cfg.n_timesteps, (x0.shape[0],), generator=gen)
        noise = torch.randn(x0.shape, generator=gen).to(x0.dtype)
        ctx = backbone.encode_prompt_ids(torch.tensor(ids, dtype=torch.long))
        x_t = backbone.q_sample(x0, t, noise)
        pred = backbone.predict_noise(x_t, t, ctx)
        loss = torch.mean((pred - noise) ** 2)
        if not torch.isfinite(loss):
            raise NumericError(f"non-finite pretrain loss at iteration {it}")
        opt.zero_grad()
        loss.backward()
        opt.step()
        losses.append(float(loss.detach()))
        if progress is not None:
            progress(it, "pretrain", losses[-1])
    for p in backbone.parameters():
        p.requires_grad_(False)
    return losses


# ---------------------------------------------------------------------------
# checkpoints


def checkpoint_id(config_blob: dict) -> str:
    import hashlib

    return hashlib.sha256(
        json.dumps(config_blob, sort_keys=True).encode()
    ).hexdigest()[:16]


def save_checkpoint(path: str, state: TrainState) -> None:
    """Atomic write: stage into a temp dir, then rename into place."""
    tmp = path + ".tmp"
    if os.path.exists(tmp):
        shutil.rmtree(tmp)
    os.makedirs(tmp, exist_ok=True)
    backbone = state.backbone
    torch.save(backbone.base_state_dict(), os.path.join(tmp, "backbone.weights"))
    torch.save(state.encoder.state_dict(), os.path.join(tmp, "encoder.weights"))
    adapters = {
        name: backbone.adapter_state_dict(name)
        for name in _adapter_names(backbone)
    }
    torch.save(adapters, os.path.join(tmp, "adapters.weights"))
    config_blob = {
        "train": state.config.to_json(),
        "backbone": backbone.cfg.to_json(),
        "tokenizer": backbone.tokenizer.to_json(),
        "encoder": state.encoder.config(),
        "iteration": state.iteration,
        "stage_id": state.stage_id,
        "adapter_ranks": {
            name: state.config.adapter_rank for name in _adapter_names(backbone)
        },
    }
    config_blob["checkpoint_id"] = checkpoint_id(config_blob)
    with open(os.path.join(tmp, "config.json"), "w") as f:
        json.dump(config_blob, f, indent=2, sort_keys=True)
    torch.save(
        {
            "iteration": state.iteration,
            "seed": state.config.seed,
            "torch_rng": torch.random.get_rng_state(),
        },
        os.path.join(tmp, "rng.state"),
    )
    torch.save(state.optimizer.state_dict(), os.path.join(tmp, "optimizer.state"))
    with open(os.path.join(tmp, "loss_log.csv"), "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["iteration", "stage", "loss"])
        writer.writerows(state.loss_log)
    if os.path.exists(path):
        shutil.rmtree(path)
    os.replace(tmp, path)


def _adapter_names(backbone: ToyBackbone) -> list[str]:
    names = []
    for lin in backbone.lora_linears().values():
        for name in lin.adapters:
            if name not in names:
                names.append(name)
    return names


@dataclass
class Checkpoint:
    """A loaded checkpoint: backbone with adapters installed, encoder and
    the config snapshot."""

    backbone: ToyBackbone
    encoder: CompassEncoder
    config_blob: dict
    path: str

    @property
    def checkpoint_id(self) -> str:
        return self.config_blob.get("checkpoint_id", "unknown")

    @property
    def iteration(self) -> int:
        return int(self.config_blob.get("iteration", 0))


def load_checkpoint(path: str, dtype: torch.dtype = torch.float32) -> Checkpoint:
    with open(os.path.join(path, "config.json")) as f:
        blob = json.load(f)
    tokenizer = Tokenizer.from_json(blob["tokenizer"])
    backbone = ToyBackbone(BackboneConfig.from_json(blob["backbone"]), tokenizer)
    backbone = backbone.to(dtype)
    base = torch.load(os.path.join(path, "backbone.weights"), weights_only=True)
    backbone.load_state_dict(base, strict=False)
    adapters = torch.load(os.path.join(path, "adapters.weights"), weights_only=True)
    ranks = blob.get("adapter_ranks", {})
    for name, sd in adapters.items():
        rank = int(ranks.get(name, blob["train"]["adapter_rank"]))
        backbone.load_adapter_state_dict(name, sd, rank)
    enc_cfg = blob["encoder"]
    encoder = CompassEncoder(**enc_cfg).to(dtype)
    encoder.load_state_dict(
        torch.load(os.path.join(path, "encoder.weights"), weights_only=True)
    )
    for p in backbone.parameters():
        p.requires_grad_(False)
    for p in encoder.parameters():
        p.requires_grad_(False)
    return Checkpoint(backbone=backbone, encoder=encoder, config_blob=blob, path=path)


def resume_train_state(
    path: str, records: list[SceneRecord], base_dir: str = "."
) -> TrainState:
    """Rebuild a TrainState from a checkpoint for exact continuation."""
    ckpt = load_checkpoint(path)
    config = TrainConfig.from_json(ckpt.config_blob["train"])
    backbone = ckpt.backbone
    encoder = ckpt.encoder
    adapter_params = []
    for lin in backbone.lora_linears().values():
        if COMPASS_ADAPTER in lin.adapters:
            a = lin.adapters[COMPASS_ADAPTER]
            adapter_params.extend([a.down, a.up])
    for p in adapter_params:
        p.requires_grad_(True)
    for p in encoder.parameters():
        p.requires_grad_(True)
    optimizer = torch.optim.AdamW(
        list(encoder.parameters()) + adapter_params,
        lr=config.learning_rate,
        weight_decay=config.weight_decay,
    )
    optimizer.load_state_dict(
        torch.load(os.path.join(path, "optimizer.state"), weights_only=True)
    )
    if config.rendered_only:
        records = [r for r in records if r.provenance == "rendered"]
    state = TrainState(
        backbone=backbone,
        encoder=encoder,
        optimizer=optimizer,
        config=config,
        dataset=RecordDataset(records, base_dir),
        iteration=ckpt.iteration,
        stage_id=ckpt.config_blob.get("stage_id", ""),
    )
    return state


def write_loss_log(loss_log: list, path: str) -> None:
    os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["iteration", "stage", "loss"])
        writer.writerows(loss_log)
