"""Training loops for every variant in the comparison.

UNet and Dropout are single networks; Multipath and SharedRep are trained
jointly with modality dropout on their fusion layer; the pretrained variants
train one UNet per modality, then freeze them and train only the fusion
head. Dedicated models are plain UNets fed one fixed modality subset.
"""

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from enum import Enum
from pathlib import Path
from typing import Literal, Sequence

import numpy as np
import pandas as pd
import torch
import torch.nn as nn
import torch.nn.functional as F
from pydantic import BaseModel, ConfigDict, Field, model_validator

from .data import FoldSplit, PatchSampler, Subject
from .errors import CheckpointError, DataError, MaskError, ShapeError, TrainingError
from .missingness import DropoutSchedule, ModalityMask, sample_mask, schedule_p, subset_name
from .nets import MultipathNet, NetworkConfig, NetworkKind, SegmentationNet, UNet3D, build_model
from .services import get_device
from .storage import CheckpointMeta, save_checkpoint

logger = logging.getLogger(__name__)


# --- Models ---
class Variant(str, Enum):
    UNET = "UNet"
    DROPOUT = "Dropout"
    MULTIPATH = "Multipath"
    SHAREDREP = "SharedRep"
    MULTIPATH_PRETRAINED = "Multipath + Pretraining"
    SHAREDREP_PRETRAINED = "SharedRep + Pretraining"
    DEDICATED = "Dedicated"

    @property
    def slug(self) -> str:
        return self.value.lower().replace(" + pretraining", "_pretrained")

    @property
    def kind(self) -> NetworkKind:
        if self in (Variant.MULTIPATH, Variant.MULTIPATH_PRETRAINED):
            return NetworkKind.MULTIPATH_CONCAT
        if self in (Variant.SHAREDREP, Variant.SHAREDREP_PRETRAINED):
            return NetworkKind.MULTIPATH_SHAREDREP
        return NetworkKind.SINGLE

    @property
    def pretrained(self) -> bool:
        return self in (Variant.MULTIPATH_PRETRAINED, Variant.SHAREDREP_PRETRAINED)

    @classmethod
    def from_arch(cls, arch: str, pretrain: bool = False, dedicated: bool = False) -> "Variant":
        if dedicated:
            return cls.DEDICATED
        table = {
            ("unet", False): cls.UNET,
            ("dropout", False): cls.DROPOUT,
            ("multipath", False): cls.MULTIPATH,
            ("sharedrep", False): cls.SHAREDREP,
            ("multipath", True): cls.MULTIPATH_PRETRAINED,
            ("sharedrep", True): cls.SHAREDREP_PRETRAINED,
        }
        if (arch, pretrain) not in table:
            raise TrainingError(f"--pretrain only applies to multipath and sharedrep, not '{arch}'")
        return table[(arch, pretrain)]


class TrainConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    epochs: int = Field(150, ge=1)
    batches_per_epoch: int = Field(100, ge=1)
    batch_size: int = Field(4, ge=1)
    patch_side: int = 108
    learning_rate: float = Field(1e-4, ge=0.0)
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    dropout_schedule: DropoutSchedule | None = None
    constant_dropout_p: float | None = Field(None, ge=0.0, lt=1.0)
    mask_granularity: Literal["batch", "sample"] = "batch"
    checkpoint_every: int = Field(25, ge=1)
    seed: int = 0

    @model_validator(mode="after")
    def _one_dropout_source(self):
        if self.dropout_schedule is not None and self.constant_dropout_p is not None:
            raise ValueError("set either dropout_schedule or constant_dropout_p, not both")
        return self

    @property
    def epoch_patches(self) -> int:
        return self.batches_per_epoch * self.batch_size

    def dropout_p(self, epoch: int) -> float:
        if self.dropout_schedule is not None:
            return schedule_p(epoch, self.dropout_schedule)
        return self.constant_dropout_p or 0.0


class PretrainPlan(BaseModel):
    model_config = ConfigDict(extra="forbid")

    path_epochs: int = Field(100, ge=1)
    fusion_epochs: int = Field(100, ge=1)
    fusion_dropout_p: float = Field(0.5, ge=0.0, lt=1.0)
    freeze_paths: bool = True
    replace_pathway_heads: bool | None = None

    def replaces_heads(self, kind: NetworkKind) -> bool:
        if self.replace_pathway_heads is not None:
            return self.replace_pathway_heads
        return kind == NetworkKind.MULTIPATH_SHAREDREP


class ExperimentConfig(BaseModel):
    """The JSON file passed to `--config`."""

    model_config = ConfigDict(extra="forbid")

    network: NetworkConfig = NetworkConfig()
    train: TrainConfig = TrainConfig()
    pretrain: PretrainPlan = PretrainPlan()
    dropout_schedule: DropoutSchedule = DropoutSchedule()
    num_folds: int = Field(5, ge=2)
    fold_seed: int = 0

    @classmethod
    def reference(cls) -> "ExperimentConfig":
        return cls()

    @classmethod
    def toy(cls, seed: int = 0) -> "ExperimentConfig":
        return cls(
            network=NetworkConfig(base_width=4, pathway_width=4, depth=3),
            train=TrainConfig(
                epochs=15, batches_per_epoch=20, batch_size=4, patch_side=60, learning_rate=1e-3, checkpoint_every=5, seed=seed
            ),
            pretrain=PretrainPlan(path_epochs=10, fusion_epochs=10),
            dropout_schedule=DropoutSchedule(doubling_period=5),
            fold_seed=seed,
        )


class EpochRecord(BaseModel):
    epoch: int
    mean_loss: float
    p: float
    patches_seen: int


class Checkpoint(BaseModel):
    """A trained network together with where it was written and how training went."""

    model_config = ConfigDict(arbitrary_types_allowed=True)

    model: nn.Module = Field(exclude=True)
    meta: CheckpointMeta
    path: Path | None = None
    loss_history: list[EpochRecord] = []
    patches_seen: int = 0


# --- Helpers ---
def draw_masks(
    rng: np.random.Generator, p: float, m: int, batch_size: int, granularity: str
) -> ModalityMask | list[ModalityMask]:
    if granularity == "sample":
        return [sample_mask(rng, p, m) for _ in range(batch_size)]
    return sample_mask(rng, p, m)


def network_for(kind: NetworkKind, network: NetworkConfig) -> NetworkConfig:
    """Same widths and depth, another kind (head factor re-derived for the kind)."""
    fields = network.model_dump(exclude={"kind", "pathway_head_width_factor"})
    return NetworkConfig(kind=kind, **fields)


def write_loss_history(path: Path, history: Sequence[EpochRecord]) -> None:
    frame = pd.DataFrame([{"epoch": r.epoch, "mean_loss": r.mean_loss, "p": r.p} for r in history])
    frame.to_csv(path, index=False)


# --- Training ---
def train(
    model: SegmentationNet,
    subjects: Sequence[Subject],
    cfg: TrainConfig,
    *,
    variant: str = Variant.UNET.value,
    input_channels: Sequence[int] | None = None,
    out_dir: Path | None = None,
    folds: FoldSplit | None = None,
    fold_id: int | None = None,
) -> Checkpoint:
    """Adam on voxelwise cross-entropy over randomly sampled patches.

    When the config carries a dropout schedule (or a constant p) a mask is
    drawn per batch and handed to the model, which applies it at its input
    (single UNet) or at its fusion layer (multipath kinds).
    """
    if not subjects:
        raise DataError("training set is empty")
    network: NetworkConfig = model.config
    num_modalities = subjects[0][0].num_modalities
    channels = list(input_channels) if input_channels is not None else list(range(num_modalities))
    if len(channels) != model.num_inputs or max(channels) >= num_modalities:
        raise ShapeError(
            f"model takes {model.num_inputs} inputs but training feeds channels {channels} of {num_modalities} modalities"
        )

    sampler = PatchSampler(subjects, cfg.patch_side, network.depth)
    rng = np.random.default_rng(cfg.seed)
    device = get_device()
    model.to(device)
    trainable = [p for p in model.parameters() if p.requires_grad]
    if not trainable:
        raise TrainingError("model has no trainable parameters")
    optimizer = torch.optim.Adam(
        trainable, lr=cfg.learning_rate, betas=(cfg.beta1, cfg.beta2), eps=cfg.epsilon
    )
    modality_names = subjects[0][0].modality_names
    meta = CheckpointMeta(
        network=network,
        variant=variant,
        seed=cfg.seed,
        epoch=0,
        input_channels=channels,
        modality_names=modality_names,
        train_subjects=sorted(v.subject_id for v, _ in subjects),
        fold_id=fold_id,
        folds=folds.folds if folds is not None else None,
        heads_replaced=isinstance(model, MultipathNet) and model.heads_replaced,
    )
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)

    logger.info(
        "🧠 training %s (%s) on %d subjects: %d epochs x %d batches x %d patches",
        variant, network.kind.value, len(subjects), cfg.epochs, cfg.batches_per_epoch, cfg.batch_size,
    )
    history: list[EpochRecord] = []
    patches_seen = 0
    for epoch in range(cfg.epochs):
        p = cfg.dropout_p(epoch)
        model.train()
        losses = []
        epoch_patches = 0
        for batch in range(cfg.batches_per_epoch):
            x, y = sampler.draw_batch(rng, cfg.batch_size)
            x = x[:, channels].to(device)
            mask = draw_masks(rng, p, len(channels), cfg.batch_size, cfg.mask_granularity) if p > 0 else None
            logits = model(x, mask=mask)
            loss = F.cross_entropy(logits, y.to(device))
            value = loss.item()
            if not math.isfinite(value):
                raise TrainingError(f"non-finite loss {value} at epoch {epoch}, batch {batch} ({variant})")
            optimizer.zero_grad(set_to_none=True)
            loss.backward()
            optimizer.step()
            losses.append(value)
            epoch_patches += logits.shape[0]

        if epoch_patches != cfg.epoch_patches:
            raise TrainingError(f"epoch {epoch} consumed {epoch_patches} patches, expected {cfg.epoch_patches}")
        patches_seen += epoch_patches
        record = EpochRecord(epoch=epoch, mean_loss=float(np.mean(losses)), p=p, patches_seen=patches_seen)
        history.append(record)
        logger.info("📊 %s epoch %d: loss=%.4f p=%.3f patches=%d", variant, epoch, record.mean_loss, p, patches_seen)

        if out_dir is not None and (epoch + 1) % cfg.checkpoint_every == 0 and epoch + 1 < cfg.epochs:
            save_checkpoint(out_dir / f"epoch_{epoch + 1:03d}", model, meta.model_copy(update={"epoch": epoch + 1}))

    meta = meta.model_copy(update={"epoch": cfg.epochs})
    final_path = None
    if out_dir is not None:
        final_path = save_checkpoint(out_dir / "final", model, meta)
        write_loss_history(out_dir / "loss_history.csv", history)
    logger.info("✅ %s finished: loss %.4f -> %.4f", variant, history[0].mean_loss, history[-1].mean_loss)
    return Checkpoint(model=model, meta=meta, path=final_path, loss_history=history, patches_seen=patches_seen)


def pretrain_paths(
    subjects: Sequence[Subject],
    cfg: TrainConfig,
    plan: PretrainPlan,
    kind: NetworkKind,
    network: NetworkConfig,
    *,
    out_dir: Path | None = None,
    workers: int = 1,
    folds: FoldSplit | None = None,
    fold_id: int | None = None,
) -> list[Checkpoint]:
    """One single-modality UNet per modality, each on its own channel with full supervision."""
    m = network.num_modalities
    if m < 2:
        raise TrainingError(f"pathway pretraining needs at least 2 modalities, got {m}")
    path_network = NetworkConfig(
        kind=NetworkKind.SINGLE,
        base_width=network.pathway_width,
        depth=network.depth,
        num_modalities=1,
        num_labels=network.num_labels,
        leaky_slope=network.leaky_slope,
    )
    names = subjects[0][0].modality_names if subjects else [str(i) for i in range(m)]
    # built here, not in the workers, so initialization does not race on the global RNG
    models = [build_model(path_network, seed=cfg.seed + i) for i in range(m)]

    def run(i: int) -> Checkpoint:
        path_cfg = cfg.model_copy(
            update={"epochs": plan.path_epochs, "dropout_schedule": None, "constant_dropout_p": None, "seed": cfg.seed + i}
        )
        return train(
            models[i],
            subjects,
            path_cfg,
            variant=f"path {names[i]}",
            input_channels=[i],
            out_dir=Path(out_dir) / f"path_{names[i]}" if out_dir is not None else None,
            folds=folds,
            fold_id=fold_id,
        )

    logger.info("🧠 pretraining %d %s pathways with %d worker(s)", m, kind.value, workers)
    if workers <= 1:
        return [run(i) for i in range(m)]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(run, range(m)))


def assemble_and_finetune(
    paths: Sequence[Checkpoint],
    subjects: Sequence[Subject],
    plan: PretrainPlan,
    kind: NetworkKind,
    network: NetworkConfig,
    cfg: TrainConfig,
    *,
    variant: str | None = None,
    out_dir: Path | None = None,
    folds: FoldSplit | None = None,
    fold_id: int | None = None,
) -> Checkpoint:
    """Load pretrained pathways into a multipath network, freeze them and train the fusion head
    at constant dropout p."""
    if kind == NetworkKind.SINGLE:
        raise CheckpointError("pretrained pathways can only be assembled into a multipath network")
    config = network_for(kind, network)
    if len(paths) != config.num_modalities:
        raise CheckpointError(f"got {len(paths)} pathway checkpoints for {config.num_modalities} modalities")

    model = build_model(config, seed=cfg.seed)
    replace = plan.replaces_heads(kind)
    for i, checkpoint in enumerate(paths):
        unet = checkpoint.model
        if not isinstance(unet, UNet3D) or unet.num_inputs != 1 or unet.classifier is None:
            raise CheckpointError(f"pathway checkpoint {i} is not a single-modality UNet")
        try:
            model.load_pathway(i, unet, include_head=not replace)
        except RuntimeError as e:
            raise CheckpointError(f"pathway checkpoint {i} does not fit a {kind.value} pathway: {e}") from e

    if plan.freeze_paths:
        model.freeze_pathways(replace_heads=replace, seed=cfg.seed)
    elif replace:
        raise CheckpointError("replacing pathway heads requires frozen pathways")
    before = model.frozen_state() if plan.freeze_paths else {}

    fusion_cfg = cfg.model_copy(
        update={"epochs": plan.fusion_epochs, "dropout_schedule": None, "constant_dropout_p": plan.fusion_dropout_p}
    )
    variant = variant or (
        Variant.SHAREDREP_PRETRAINED.value if kind == NetworkKind.MULTIPATH_SHAREDREP else Variant.MULTIPATH_PRETRAINED.value
    )
    checkpoint = train(model, subjects, fusion_cfg, variant=variant, out_dir=out_dir, folds=folds, fold_id=fold_id)

    after = model.frozen_state()
    drift = {name: (after[name] - value).abs().max().item() for name, value in before.items() if not torch.equal(after[name], value)}
    if drift:
        raise TrainingError(f"frozen pathway tensors changed during fine-tuning: {drift}")
    return checkpoint


def train_dedicated(
    subjects: Sequence[Subject],
    subset: ModalityMask,
    cfg: TrainConfig,
    network: NetworkConfig,
    *,
    out_dir: Path | None = None,
    folds: FoldSplit | None = None,
    fold_id: int | None = None,
) -> Checkpoint:
    """A UNet trained from scratch, without modality dropout, on exactly the subset's channels."""
    if subset.n_present == 0:
        raise MaskError("dedicated models need a non-empty modality subset")
    config = network_for(NetworkKind.SINGLE, network).model_copy(update={"num_modalities": subset.n_present})
    model = build_model(config, seed=cfg.seed)
    dedicated_cfg = cfg.model_copy(update={"dropout_schedule": None, "constant_dropout_p": None})
    names = subjects[0][0].modality_names if subjects else None
    return train(
        model,
        subjects,
        dedicated_cfg,
        variant=f"{Variant.DEDICATED.value} {subset_name(subset, names)}",
        input_channels=subset.indices,
        out_dir=out_dir,
        folds=folds,
        fold_id=fold_id,
    )


def train_variant(
    variant: Variant,
    subjects: Sequence[Subject],
    experiment: ExperimentConfig,
    *,
    out_dir: Path | None = None,
    subsets: Sequence[ModalityMask] | None = None,
    workers: int = 1,
    folds: FoldSplit | None = None,
    fold_id: int | None = None,
) -> list[Checkpoint]:
    """Train one variant end to end. Dedicated returns one checkpoint per subset."""
    out_dir = Path(out_dir) if out_dir is not None else None
    cfg = experiment.train
    network = experiment.network
    split = {"folds": folds, "fold_id": fold_id}

    if variant == Variant.DEDICATED:
        if not subsets:
            raise MaskError("dedicated training needs at least one modality subset")
        names = subjects[0][0].modality_names if subjects else None
        return [
            train_dedicated(
                subjects,
                subset,
                cfg,
                network,
                out_dir=out_dir / subset_name(subset, names) if out_dir is not None else None,
                **split,
            )
            for subset in subsets
        ]

    if variant.pretrained:
        paths = pretrain_paths(
            subjects, cfg, experiment.pretrain, variant.kind, network,
            out_dir=out_dir / "paths" if out_dir is not None else None, workers=workers, **split,
        )
        return [
            assemble_and_finetune(
                paths, subjects, experiment.pretrain, variant.kind, network, cfg,
                variant=variant.value, out_dir=out_dir / "fusion" if out_dir is not None else None, **split,
            )
        ]

    schedule = None if variant == Variant.UNET else experiment.dropout_schedule
    run_cfg = cfg.model_copy(update={"dropout_schedule": schedule, "constant_dropout_p": None})
    model = build_model(network_for(variant.kind, network), seed=cfg.seed)
    return [train(model, subjects, run_cfg, variant=variant.value, out_dir=out_dir, **split)]
