"""3D UNet, multipath concat-fusion and shared-representation networks.

All convolutions are unpadded, so every spatial side shrinks as it moves
through the network; `output_size` is the arithmetic form of that shrinkage
and the modules check it on every forward pass.
"""

import logging
from enum import Enum
from typing import Sequence

import torch
import torch.nn as nn
import torch.nn.functional as F
from pydantic import BaseModel, Field, model_validator

from .errors import MaskError, ShapeError
from .missingness import ModalityMask, apply_mask, presence_matrix

logger = logging.getLogger(__name__)


# --- Models ---
class NetworkKind(str, Enum):
    SINGLE = "single"
    MULTIPATH_CONCAT = "multipath_concat"
    MULTIPATH_SHAREDREP = "multipath_sharedrep"


class FusionMode(str, Enum):
    CONCAT = "concat"
    MEANVAR = "meanvar"


class FusionSpec(BaseModel):
    mode: FusionMode
    num_inputs: int
    per_input_channels: int

    @property
    def output_channels(self) -> int:
        if self.mode == FusionMode.CONCAT:
            return self.num_inputs * self.per_input_channels
        return 2 * self.per_input_channels


class NetworkConfig(BaseModel):
    kind: NetworkKind = NetworkKind.SINGLE
    base_width: int = Field(32, ge=1)
    depth: int = Field(4, ge=2)
    num_modalities: int = Field(4, ge=1)
    num_labels: int = Field(4, ge=2)
    pathway_width: int = Field(16, ge=1)
    leaky_slope: float = 0.01
    pathway_head_width_factor: int | None = None

    @model_validator(mode="after")
    def _default_head_factor(self):
        if self.pathway_head_width_factor is None:
            factor = 4 if self.kind == NetworkKind.MULTIPATH_SHAREDREP else 2
            self.pathway_head_width_factor = factor
        return self

    @property
    def is_multipath(self) -> bool:
        return self.kind != NetworkKind.SINGLE

    @property
    def fusion(self) -> FusionSpec | None:
        if not self.is_multipath:
            return None
        mode = FusionMode.MEANVAR if self.kind == NetworkKind.MULTIPATH_SHAREDREP else FusionMode.CONCAT
        return FusionSpec(
            mode=mode,
            num_inputs=self.num_modalities,
            per_input_channels=self.pathway_head_width_factor * self.pathway_width,
        )

    @property
    def hidden_width(self) -> int:
        """Width of the final hidden 1x1x1 layer, the one whose activations are embedded."""
        if self.is_multipath:
            return 4 * self.pathway_width
        return 2 * self.base_width


# --- Shape arithmetic ---
def output_size(input_side: int, depth: int) -> int:
    """Spatial side of the logits for a cubic input of `input_side`."""
    if depth < 2:
        raise ShapeError(f"depth must be >= 2, got {depth}")

    def check(side: int, stage: str) -> int:
        if side <= 0:
            raise ShapeError(f"invalid input size {input_side} for depth {depth}: side {side} after {stage}")
        return side

    side = input_side
    for level in range(depth - 1):
        side = check(side - 4, f"encoder level {level} convolutions")
        if side % 2:
            raise ShapeError(
                f"invalid input size {input_side} for depth {depth}: odd side {side} before encoder level {level} pooling"
            )
        side //= 2
    side = check(side - 4, "bottom convolutions")
    for level in reversed(range(depth - 1)):
        side = check(2 * side - 4, f"decoder level {level} convolutions")
    return side


def input_size(output_side: int, depth: int) -> int:
    """Input side whose valid forward pass yields exactly `output_side`."""
    if output_side < 1:
        raise ShapeError(f"output side must be positive, got {output_side}")
    side = output_side
    for level in range(depth - 1):
        side += 4
        if side % 2:
            raise ShapeError(f"no input size yields output side {output_side} at depth {depth}")
        side //= 2
    side += 4
    for level in range(depth - 1):
        side = 2 * side + 4
    return side


def center_crop(x: torch.Tensor, shape: Sequence[int]) -> torch.Tensor:
    slices = []
    for have, want in zip(x.shape[-3:], shape):
        start = (have - want) // 2
        slices.append(slice(start, start + want))
    return x[(..., *slices)]


# --- Layers ---
class ConvBlock(nn.Sequential):
    """Batch norm, unpadded convolution, leaky ReLU (in that order)."""

    def __init__(self, in_channels: int, out_channels: int, kernel_size: int = 3, leaky_slope: float = 0.01):
        super().__init__(
            nn.BatchNorm3d(in_channels),
            nn.Conv3d(in_channels, out_channels, kernel_size=kernel_size),
            nn.LeakyReLU(leaky_slope),
        )
        self.in_channels = in_channels
        self.out_channels = out_channels


class UNet3D(nn.Module):
    masking_point = "input"

    def __init__(
        self,
        in_channels: int,
        width: int,
        depth: int,
        head_width: int,
        num_labels: int | None,
        leaky_slope: float = 0.01,
    ):
        super().__init__()
        self.in_channels = in_channels
        self.depth = depth
        self.head_width = head_width
        self.leaky_slope = leaky_slope

        widths = [width * 2**level for level in range(depth - 1)]
        self.encoders = nn.ModuleList()
        channels = in_channels
        for w in widths:
            self.encoders.append(nn.Sequential(ConvBlock(channels, w, 3, leaky_slope), ConvBlock(w, w, 3, leaky_slope)))
            channels = w
        self.bottom = nn.Sequential(
            ConvBlock(channels, 2 * channels, 3, leaky_slope), ConvBlock(2 * channels, 2 * channels, 3, leaky_slope)
        )
        channels *= 2
        self.decoders = nn.ModuleList()
        for w in reversed(widths):
            self.decoders.append(
                nn.Sequential(ConvBlock(channels + w, w, 3, leaky_slope), ConvBlock(w, w, 3, leaky_slope))
            )
            channels = w
        self.head = ConvBlock(channels, head_width, 1, leaky_slope)
        self.classifier = nn.Conv3d(head_width, num_labels, kernel_size=1) if num_labels else None

    @property
    def num_inputs(self) -> int:
        return self.in_channels

    @property
    def hidden_width(self) -> int:
        return self.head_width

    def new_head(self) -> ConvBlock:
        return ConvBlock(self.head.in_channels, self.head_width, 1, self.leaky_slope)

    def check_input(self, x: torch.Tensor) -> list[int]:
        if x.ndim != 5:
            raise ShapeError(f"expected input [batch, channels, d, h, w], got shape {tuple(x.shape)}")
        if x.shape[1] != self.in_channels:
            raise ShapeError(f"network expects {self.in_channels} input channels, got {x.shape[1]}")
        return [output_size(side, self.depth) for side in x.shape[-3:]]

    def forward_features(self, x: torch.Tensor) -> torch.Tensor:
        self.check_input(x)
        skips = []
        for encoder in self.encoders:
            x = encoder(x)
            skips.append(x)
            x = F.max_pool3d(x, kernel_size=2, stride=2)
        x = self.bottom(x)
        for decoder, skip in zip(self.decoders, reversed(skips)):
            x = F.interpolate(x, scale_factor=2, mode="trilinear", align_corners=False)
            x = torch.cat([center_crop(skip, x.shape[-3:]), x], dim=1)
            x = decoder(x)
        return self.head(x)

    def forward(self, x: torch.Tensor, mask: ModalityMask | Sequence[ModalityMask] | None = None) -> torch.Tensor:
        if self.classifier is None:
            raise ShapeError("pathway networks have no classifier; use forward_features")
        if mask is not None:
            x = mask_input(x, mask)
        return self.classifier(self.forward_features(x))


def mask_input(x: torch.Tensor, mask: ModalityMask | Sequence[ModalityMask]) -> torch.Tensor:
    """Modality dropout on the channel axis of a batch, one mask or one per sample."""
    if isinstance(mask, ModalityMask):
        return apply_mask(x, mask, axis=1)
    presence = torch.as_tensor(presence_matrix(mask, x.shape[0]), dtype=x.dtype, device=x.device)
    if presence.shape[1] != x.shape[1]:
        raise MaskError(f"masks cover {presence.shape[1]} modalities but input has {x.shape[1]} channels")
    scale = presence.shape[1] / presence.sum(dim=1, keepdim=True)
    return x * (presence * scale)[:, :, None, None, None]


# --- Fusion ---
def _presence(mask: ModalityMask | torch.Tensor, m: int, like: torch.Tensor) -> torch.Tensor:
    if isinstance(mask, ModalityMask):
        presence = torch.tensor(mask.present, dtype=like.dtype, device=like.device)
    else:
        presence = mask.to(dtype=like.dtype, device=like.device)
    if presence.shape[-1] != m:
        raise MaskError(f"mask covers {presence.shape[-1]} modalities but {m} pathways were given")
    if (presence.sum(dim=-1) == 0).any():
        raise MaskError("modality mask is empty: at least one pathway must be present")
    return presence


def _stack(features: Sequence[torch.Tensor]) -> torch.Tensor:
    if not features:
        raise MaskError("no pathway features to fuse")
    shapes = {tuple(f.shape) for f in features}
    if len(shapes) != 1:
        raise ShapeError(f"pathway features differ in shape: {sorted(shapes)}")
    # [..., M, F, d, h, w]
    return torch.stack(list(features), dim=-5)


def fuse_concat(features: Sequence[torch.Tensor], mask: ModalityMask | torch.Tensor) -> torch.Tensor:
    """Concatenate pathway features in fixed order; absent pathways are zero blocks
    and present ones are scaled by M / m_present."""
    stacked = _stack(features)
    m = stacked.shape[-5]
    presence = _presence(mask, m, stacked)
    weights = presence * (m / presence.sum(dim=-1, keepdim=True))
    stacked = stacked * weights[..., None, None, None, None]
    return stacked.flatten(start_dim=stacked.ndim - 5, end_dim=stacked.ndim - 4)


def fuse_meanvar(features: Sequence[torch.Tensor], mask: ModalityMask | torch.Tensor) -> torch.Tensor:
    """Mean block followed by population-variance block over present pathways."""
    stacked = _stack(features)
    m = stacked.shape[-5]
    presence = _presence(mask, m, stacked)[..., None, None, None, None]
    count = presence.sum(dim=-5)
    mean = (stacked * presence).sum(dim=-5) / count
    variance = (presence * (stacked - mean.unsqueeze(-5)) ** 2).sum(dim=-5) / count
    return torch.cat([mean, variance], dim=-4)


class MultipathNet(nn.Module):
    """One single-modality UNet pathway per modality, fused before a 1x1x1 prediction head."""

    masking_point = "fusion"

    def __init__(self, config: NetworkConfig):
        super().__init__()
        fusion = config.fusion
        if fusion is None:
            raise ShapeError(f"{config.kind.value} is not a multipath network kind")
        self.config = config
        self.fusion = fusion
        self.pathways = nn.ModuleList(
            UNet3D(
                in_channels=1,
                width=config.pathway_width,
                depth=config.depth,
                head_width=fusion.per_input_channels,
                num_labels=None,
                leaky_slope=config.leaky_slope,
            )
            for _ in range(config.num_modalities)
        )
        self.head = ConvBlock(fusion.output_channels, config.hidden_width, 1, config.leaky_slope)
        self.classifier = nn.Conv3d(config.hidden_width, config.num_labels, kernel_size=1)
        self.frozen = False
        self.heads_replaced = False

    @property
    def num_inputs(self) -> int:
        return self.config.num_modalities

    @property
    def hidden_width(self) -> int:
        return self.config.hidden_width

    def forward_features(
        self, x: torch.Tensor, mask: ModalityMask | Sequence[ModalityMask] | None = None
    ) -> torch.Tensor:
        if x.ndim != 5 or x.shape[1] != self.num_inputs:
            raise ShapeError(f"network expects input [batch, {self.num_inputs}, d, h, w], got {tuple(x.shape)}")
        if mask is None:
            mask = ModalityMask.full(self.num_inputs)
        presence = torch.as_tensor(presence_matrix(mask, x.shape[0]), device=x.device)
        if presence.shape[1] != self.num_inputs:
            raise MaskError(f"mask covers {presence.shape[1]} modalities but network has {self.num_inputs} pathways")
        active = presence.any(dim=0).tolist()

        features: list[torch.Tensor | None] = [
            path.forward_features(x[:, i : i + 1]) if active[i] else None for i, path in enumerate(self.pathways)
        ]
        reference = next(f for f in features if f is not None)
        features = [f if f is not None else torch.zeros_like(reference) for f in features]

        if self.fusion.mode == FusionMode.CONCAT:
            fused = fuse_concat(features, presence)
        else:
            fused = fuse_meanvar(features, presence)
        return self.head(fused)

    def forward(self, x: torch.Tensor, mask: ModalityMask | Sequence[ModalityMask] | None = None) -> torch.Tensor:
        return self.classifier(self.forward_features(x, mask))

    def load_pathway(self, index: int, unet: UNet3D, include_head: bool) -> None:
        path = self.pathways[index]
        path.encoders.load_state_dict(unet.encoders.state_dict())
        path.bottom.load_state_dict(unet.bottom.state_dict())
        path.decoders.load_state_dict(unet.decoders.state_dict())
        if include_head:
            path.head.load_state_dict(unet.head.state_dict())

    def freeze_pathways(self, replace_heads: bool, seed: int = 0) -> None:
        """Stop gradients (and batch-norm statistics) in every pathway.

        With `replace_heads` each pathway's final 1x1x1 layer is re-initialized
        and left trainable.
        """
        for path in self.pathways:
            path.requires_grad_(False)
        if replace_heads:
            with torch.random.fork_rng(devices=[]):
                torch.manual_seed(seed)
                for path in self.pathways:
                    device = next(path.parameters()).device
                    path.head = path.new_head().to(device)
        self.frozen = True
        self.heads_replaced = replace_heads
        self.train(self.training)

    def frozen_modules(self) -> list[nn.Module]:
        modules = []
        for path in self.pathways:
            modules.extend([path.encoders, path.bottom, path.decoders])
            if not self.heads_replaced:
                modules.append(path.head)
        return modules

    def frozen_state(self) -> dict[str, torch.Tensor]:
        """Copies of every parameter and buffer that freezing keeps fixed."""
        if not self.frozen:
            return {}
        state = {}
        for i, path in enumerate(self.pathways):
            parts = ["encoders", "bottom", "decoders"] + ([] if self.heads_replaced else ["head"])
            for part in parts:
                for name, tensor in getattr(path, part).state_dict().items():
                    state[f"pathways.{i}.{part}.{name}"] = tensor.detach().clone()
        return state

    def train(self, mode: bool = True):
        super().train(mode)
        if self.frozen:
            for module in self.frozen_modules():
                module.eval()
        return self


SegmentationNet = UNet3D | MultipathNet


def forward_with_features(
    model: SegmentationNet, x: torch.Tensor, mask: ModalityMask | Sequence[ModalityMask] | None = None
) -> tuple[torch.Tensor, torch.Tensor]:
    """Final hidden activations and logits of one forward pass, mask applied at the model's masking point."""
    if isinstance(model, MultipathNet):
        features = model.forward_features(x, mask)
    else:
        features = model.forward_features(mask_input(x, mask) if mask is not None else x)
    return features, model.classifier(features)


# --- Builders ---
def build_unet(config: NetworkConfig) -> UNet3D:
    if config.kind != NetworkKind.SINGLE:
        raise ShapeError(f"build_unet needs kind 'single', got '{config.kind.value}'")
    model = UNet3D(
        in_channels=config.num_modalities,
        width=config.base_width,
        depth=config.depth,
        head_width=config.hidden_width,
        num_labels=config.num_labels,
        leaky_slope=config.leaky_slope,
    )
    model.config = config
    return model


def build_multipath(config: NetworkConfig) -> MultipathNet:
    if not config.is_multipath:
        raise ShapeError(f"build_multipath needs a multipath kind, got '{config.kind.value}'")
    return MultipathNet(config)


def build_model(config: NetworkConfig, seed: int | None = None) -> SegmentationNet:
    """Build any kind; with a seed, initialization is reproducible and leaves the global RNG untouched."""
    builder = build_unet if config.kind == NetworkKind.SINGLE else build_multipath
    if seed is None:
        return builder(config)
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        model = builder(config)
    logger.debug("🧠 built %s with %d parameters", config.kind.value, param_count(model))
    return model


def param_count(model: nn.Module, trainable_only: bool = True) -> int:
    return sum(p.numel() for p in model.parameters() if p.requires_grad or not trainable_only)
