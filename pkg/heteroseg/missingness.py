"""Modality masks, modality dropout and the evaluation subsets.

A mask marks which MR sequences are available. Dropped channels are set to
zero and the remaining ones are scaled by m_o / m_present, where m_o is the
original number of modalities and m_present the number still available.
"""

import logging
from itertools import combinations
from typing import Sequence

import numpy as np
import torch
from pydantic import BaseModel, ConfigDict, Field, model_validator

from .errors import MaskError

logger = logging.getLogger(__name__)

MODALITY_NAMES = ("T1W", "T1WC", "T2W", "FLAIR")
ALL_NAME = "All"


# --- Models ---
class ModalityMask(BaseModel):
    model_config = ConfigDict(frozen=True)

    present: tuple[bool, ...]

    @property
    def m_o(self) -> int:
        return len(self.present)

    @property
    def n_present(self) -> int:
        return sum(self.present)

    @property
    def indices(self) -> list[int]:
        return [i for i, keep in enumerate(self.present) if keep]

    @property
    def is_full(self) -> bool:
        return all(self.present)

    @property
    def scale_factor(self) -> float:
        if self.n_present == 0:
            raise MaskError("modality mask is empty: at least one modality must be present")
        return self.m_o / self.n_present

    @classmethod
    def full(cls, m: int) -> "ModalityMask":
        return cls(present=(True,) * m)

    def weights(self) -> np.ndarray:
        """Per-channel multipliers: 0 for dropped, m_o / m_present for kept."""
        return np.asarray(self.present, dtype=np.float64) * self.scale_factor


class DropoutSchedule(BaseModel):
    p_initial: float = Field(0.125, ge=0.0, lt=1.0)
    doubling_period: int = Field(50, ge=1)
    p_max: float = Field(0.5, ge=0.0, lt=1.0)

    @model_validator(mode="after")
    def _check_cap(self):
        if self.p_initial > self.p_max:
            raise ValueError("p_initial must not exceed p_max")
        return self


# --- Schedule and sampling ---
def schedule_p(epoch: int, schedule: DropoutSchedule) -> float:
    if epoch < 0:
        raise ValueError(f"epoch must be >= 0, got {epoch}")
    doublings = epoch // schedule.doubling_period
    # cap the exponent; 2**large overflows long before the min() would matter
    if doublings > 64:
        return schedule.p_max
    return min(schedule.p_initial * 2.0**doublings, schedule.p_max)


def sample_mask(rng: np.random.Generator, p: float, m: int) -> ModalityMask:
    """Drop each modality independently with probability p, never all of them."""
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout probability must be in [0, 1), got {p}")
    if m < 1:
        raise ValueError(f"number of modalities must be >= 1, got {m}")
    while True:
        keep = rng.random(m) >= p
        if keep.any():
            return ModalityMask(present=tuple(bool(k) for k in keep))


def apply_mask(inputs, mask: ModalityMask, axis: int = 0):
    """Zero dropped channels along `axis` and rescale the kept ones.

    Works on numpy arrays and torch tensors; the result has the input's type.
    """
    if mask.n_present == 0:
        raise MaskError("cannot apply an empty modality mask")
    if inputs.shape[axis] != mask.m_o:
        raise MaskError(
            f"mask covers {mask.m_o} modalities but input has {inputs.shape[axis]} channels"
        )
    if mask.is_full:
        return inputs
    shape = [1] * inputs.ndim
    shape[axis] = mask.m_o
    weights = mask.weights().reshape(shape)
    if isinstance(inputs, torch.Tensor):
        return inputs * torch.as_tensor(weights, dtype=inputs.dtype, device=inputs.device)
    return (inputs * weights).astype(inputs.dtype, copy=False)


def presence_matrix(masks: ModalityMask | Sequence[ModalityMask], batch: int) -> np.ndarray:
    """Stack one mask (shared by the batch) or one mask per sample into [batch, M] booleans."""
    if isinstance(masks, ModalityMask):
        masks = [masks] * batch
    if len(masks) != batch:
        raise MaskError(f"got {len(masks)} masks for a batch of {batch}")
    matrix = np.array([m.present for m in masks], dtype=bool)
    if not matrix.any(axis=1).all():
        raise MaskError("modality mask is empty: at least one modality must be present")
    return matrix


# --- Subsets ---
def enumerate_subsets(m: int) -> list[ModalityMask]:
    """All non-empty masks, largest first; within a size, the modality kept
    last varies slowest (All, All but T1W, All but T1WC, ..., T1W)."""
    if m < 1:
        raise ValueError(f"number of modalities must be >= 1, got {m}")
    subsets = []
    for size in range(m, 0, -1):
        for kept in reversed(list(combinations(range(m), size))):
            subsets.append(ModalityMask(present=tuple(i in kept for i in range(m))))
    return subsets


def default_modality_names(m: int) -> tuple[str, ...]:
    if m == len(MODALITY_NAMES):
        return MODALITY_NAMES
    return tuple(f"M{i}" for i in range(m))


def _names_for(m: int, modality_names: Sequence[str] | None) -> Sequence[str]:
    if modality_names is None:
        modality_names = default_modality_names(m)
    if len(modality_names) != m:
        raise MaskError(f"{len(modality_names)} modality names given for a mask over {m}")
    return modality_names


def subset_name(mask: ModalityMask, modality_names: Sequence[str] | None = None) -> str:
    names = _names_for(mask.m_o, modality_names)
    if mask.is_full:
        return ALL_NAME
    return "+".join(names[i] for i in mask.indices)


def table_label(mask: ModalityMask, modality_names: Sequence[str] | None = None) -> str:
    """Column header in the style of the results table ("All but T1W", "T2W, FLAIR")."""
    names = _names_for(mask.m_o, modality_names)
    if mask.is_full:
        return ALL_NAME
    if mask.n_present == mask.m_o - 1 and mask.m_o > 2:
        missing = next(i for i, keep in enumerate(mask.present) if not keep)
        return f"All but {names[missing]}"
    return ", ".join(names[i] for i in mask.indices)


def parse_subset(name: str, modality_names: Sequence[str]) -> ModalityMask:
    name = name.strip()
    m = len(modality_names)
    if name == ALL_NAME:
        return ModalityMask.full(m)
    lookup = {n.upper(): i for i, n in enumerate(modality_names)}
    kept = set()
    for part in name.split("+"):
        key = part.strip().upper()
        if key not in lookup:
            raise MaskError(f"unknown modality '{part}' in subset '{name}'; known: {list(modality_names)}")
        kept.add(lookup[key])
    return ModalityMask(present=tuple(i in kept for i in range(m)))


def parse_subsets(text: str, modality_names: Sequence[str]) -> list[ModalityMask]:
    """Lowercase 'all' gives every subset; otherwise a comma list such as "All,T2W+FLAIR"."""
    if text.strip() == "all":
        return enumerate_subsets(len(modality_names))
    return [parse_subset(part, modality_names) for part in text.split(",") if part.strip()]
