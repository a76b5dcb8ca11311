"""Subjects, phantoms, normalization, evaluation regions, patch sampling and folds."""

import logging
from enum import Enum
from pathlib import Path
from typing import Sequence

import nibabel as nib
import numpy as np
import torch
from pydantic import BaseModel, ConfigDict, Field, model_validator

from .errors import DataError
from .missingness import default_modality_names
from .nets import output_size
from .storage import read_subject, write_subject

logger = logging.getLogger(__name__)

LABEL_SET = (0, 1, 2, 4)
# label value -> class index used by the networks
_LABEL_TO_CLASS = np.array([0, 1, 2, -1, 3], dtype=np.int64)
CLASS_LABELS = np.array(LABEL_SET, dtype=np.uint8)

BRATS_SUFFIXES = {"T1W": "t1", "T1WC": "t1ce", "T2W": "t2", "FLAIR": "flair"}
BRATS_LABEL_SUFFIX = "seg"

# Mean phantom intensity per modality profile (rows: T1W, T1WC, T2W, FLAIR)
# and tissue (columns: brain, edema=2, core=1, enhancing=4). T2W and FLAIR
# show the whole tumor, only FLAIR separates edema from core and only T1WC
# separates enhancing from core; no single modality gives all three regions.
PHANTOM_CONTRAST = np.array(
    [
        [1.0, 0.8, 0.6, 0.6],
        [1.0, 1.0, 1.2, 2.2],
        [1.0, 1.8, 1.8, 1.5],
        [1.0, 2.0, 1.4, 1.4],
    ]
)
PHANTOM_WT_MODALITIES = ("T2W", "FLAIR")
MIN_PHANTOM_SIDE = 32


# --- Models ---
class Region(str, Enum):
    WHOLE_TUMOR = "WholeTumor"
    TUMOR_CORE = "TumorCore"
    ENHANCING_CORE = "EnhancingCore"


REGION_LABELS = {
    Region.WHOLE_TUMOR: (1, 2, 4),
    Region.TUMOR_CORE: (1, 4),
    Region.ENHANCING_CORE: (4,),
}


class MultiModalVolume(BaseModel):
    model_config = ConfigDict(arbitrary_types_allowed=True)

    subject_id: str
    voxels: np.ndarray
    modality_names: list[str] = Field(default_factory=lambda: list(default_modality_names(4)))
    background_value: float = 0.0

    @model_validator(mode="after")
    def _check_shape(self):
        if self.voxels.ndim != 4:
            raise ValueError(f"voxels must be [modality, d, h, w], got shape {self.voxels.shape}")
        if len(self.modality_names) != self.voxels.shape[0]:
            raise ValueError(f"{len(self.modality_names)} modality names for {self.voxels.shape[0]} modalities")
        return self

    @property
    def num_modalities(self) -> int:
        return self.voxels.shape[0]

    @property
    def spatial_shape(self) -> tuple[int, int, int]:
        return tuple(self.voxels.shape[1:])

    def brain_mask(self) -> np.ndarray:
        """A voxel is background iff it equals background_value in every modality."""
        return ~np.all(self.voxels == self.background_value, axis=0)


class LabelVolume(BaseModel):
    model_config = ConfigDict(arbitrary_types_allowed=True)

    labels: np.ndarray

    @model_validator(mode="after")
    def _check_labels(self):
        if self.labels.ndim != 3:
            raise ValueError(f"labels must be rank 3, got shape {self.labels.shape}")
        unexpected = set(np.unique(self.labels).tolist()) - set(LABEL_SET)
        if unexpected:
            raise ValueError(f"labels outside {LABEL_SET}: {sorted(unexpected)}")
        return self


class RegionMask(BaseModel):
    model_config = ConfigDict(arbitrary_types_allowed=True)

    region: Region
    mask: np.ndarray


class PatchSample(BaseModel):
    model_config = ConfigDict(arbitrary_types_allowed=True)

    input_patch: np.ndarray
    target_patch: np.ndarray
    center_in_tumor: bool
    center: tuple[int, int, int]
    subject_id: str


class FoldSplit(BaseModel):
    folds: list[list[str]]
    seed: int

    def test_ids(self, fold: int) -> list[str]:
        if not 0 <= fold < len(self.folds):
            raise DataError(f"fold {fold} out of range for {len(self.folds)} folds")
        return list(self.folds[fold])

    def train_ids(self, fold: int) -> list[str]:
        test = set(self.test_ids(fold))
        return [sid for f in self.folds for sid in f if sid not in test]


Subject = tuple[MultiModalVolume, LabelVolume]


def labels_to_classes(labels: np.ndarray) -> np.ndarray:
    return _LABEL_TO_CLASS[labels.astype(np.int64)]


def classes_to_labels(classes: np.ndarray) -> np.ndarray:
    return CLASS_LABELS[classes]


# --- Ingestion ---
def ingest_brats(
    root_dir: Path, modality_suffix_map: dict[str, str] | None = None, label_suffix: str = BRATS_LABEL_SUFFIX
) -> list[Subject]:
    """Read `<root>/<subject>/<subject>_<suffix>.nii.gz` for every modality plus the label map."""
    modality_suffix_map = modality_suffix_map or BRATS_SUFFIXES
    root_dir = Path(root_dir)
    if not root_dir.is_dir():
        raise DataError(f"data directory {root_dir} does not exist")
    subject_dirs = sorted(d for d in root_dir.iterdir() if d.is_dir())
    if not subject_dirs:
        logger.warning("⚠️ no subjects found in %s", root_dir)
        return []

    subjects, problems = [], []
    for subject_dir in subject_dirs:
        sid = subject_dir.name
        paths = {name: subject_dir / f"{sid}_{suffix}.nii.gz" for name, suffix in modality_suffix_map.items()}
        label_path = subject_dir / f"{sid}_{label_suffix}.nii.gz"
        missing = [name for name, path in paths.items() if not path.exists()]
        if not label_path.exists():
            missing.append(label_suffix)
        if missing:
            problems.append(f"subject {sid}: missing {', '.join(missing)}")
            continue

        arrays = [np.asarray(nib.load(path).get_fdata(dtype=np.float32)) for path in paths.values()]
        labels = np.asarray(nib.load(label_path).dataobj).astype(np.int16)
        shapes = {name: a.shape for name, a in zip(paths, arrays)}
        shapes[label_suffix] = labels.shape
        if len(set(shapes.values())) != 1:
            problems.append(f"subject {sid}: shape mismatch {shapes}")
            continue
        labels[labels == 3] = 4
        try:
            label_volume = LabelVolume(labels=labels.astype(np.uint8))
        except ValueError as e:
            problems.append(f"subject {sid}: {e}")
            continue
        volume = MultiModalVolume(
            subject_id=sid, voxels=np.stack(arrays), modality_names=list(modality_suffix_map)
        )
        subjects.append((volume, label_volume))
        logger.debug("📂 ingested %s %s", sid, volume.spatial_shape)

    if problems:
        raise DataError("; ".join(problems))
    logger.info("✅ ingested %d BraTS subjects from %s", len(subjects), root_dir)
    return subjects


def save_dataset(subjects: Sequence[Subject], root: Path) -> None:
    root = Path(root)
    for volume, labels in subjects:
        write_subject(root / volume.subject_id, volume.voxels, labels.labels, volume.modality_names, volume.background_value)
    logger.info("📂 wrote %d subjects to %s", len(subjects), root)


def load_dataset(root: Path) -> list[Subject]:
    """Phantom container if the subject folders hold meta.json, BraTS layout otherwise."""
    root = Path(root)
    if not root.is_dir():
        raise DataError(f"data directory {root} does not exist")
    subject_dirs = sorted(d for d in root.iterdir() if d.is_dir())
    if not any((d / "meta.json").exists() for d in subject_dirs):
        return ingest_brats(root)
    subjects = []
    for subject_dir in subject_dirs:
        voxels, labels, meta = read_subject(subject_dir)
        volume = MultiModalVolume(
            subject_id=subject_dir.name,
            voxels=voxels,
            modality_names=meta["modality_names"],
            background_value=meta.get("background_value", 0.0),
        )
        subjects.append((volume, LabelVolume(labels=labels)))
    logger.info("📂 loaded %d subjects from %s", len(subjects), root)
    return subjects


# --- Phantoms ---
def generate_phantoms(seed: int, n_subjects: int, side: int, m: int = 4, noise: float = 0.15) -> list[Subject]:
    """Ellipsoidal brains with nested edema / core / enhancing ellipsoids on a zero background."""
    if side < MIN_PHANTOM_SIDE:
        raise DataError(f"phantom side {side} is too small to hold nested tumor regions (minimum {MIN_PHANTOM_SIDE})")
    if m < 1:
        raise DataError(f"number of modalities must be >= 1, got {m}")
    names = list(default_modality_names(m))
    grid = np.indices((side, side, side), dtype=np.float32)

    def ellipsoid(center: np.ndarray, radii: np.ndarray) -> np.ndarray:
        offsets = (grid - center[:, None, None, None]) / radii[:, None, None, None]
        return (offsets**2).sum(axis=0) <= 1.0

    subjects = []
    for i in range(n_subjects):
        rng = np.random.default_rng([seed, i])
        brain_radii = side * rng.uniform(0.36, 0.44, 3)
        brain_center = side / 2 + rng.uniform(-1, 1, 3) * side * 0.02
        edema_radii = side * rng.uniform(0.13, 0.18, 3)
        room = brain_radii - edema_radii - 2
        tumor_center = brain_center + rng.uniform(-1, 1, 3) * room * 0.6
        core_radii = edema_radii * rng.uniform(0.55, 0.7, 3)
        enhancing_radii = core_radii * rng.uniform(0.45, 0.6, 3)

        brain = ellipsoid(brain_center, brain_radii)
        labels = np.zeros((side,) * 3, dtype=np.uint8)
        labels[ellipsoid(tumor_center, edema_radii)] = 2
        labels[ellipsoid(tumor_center, core_radii)] = 1
        labels[ellipsoid(tumor_center, enhancing_radii)] = 4
        labels[tuple(np.round(tumor_center).astype(int))] = 4
        labels[~brain] = 0

        tissue = np.select([labels == 2, labels == 1, labels == 4], [1, 2, 3], 0)
        phase = rng.uniform(0, 2 * np.pi, 3)
        texture = 1.0 + 0.08 * np.sin(grid[0] / 5 + phase[0]) * np.cos(grid[1] / 7 + phase[1]) * np.sin(
            grid[2] / 6 + phase[2]
        )
        voxels = np.zeros((m, side, side, side), dtype=np.float32)
        for j in range(m):
            scale = rng.uniform(50.0, 150.0)
            mean = PHANTOM_CONTRAST[j % len(PHANTOM_CONTRAST)][tissue]
            channel = scale * (mean * texture + noise * rng.standard_normal(labels.shape))
            voxels[j] = np.where(brain, channel, 0.0)

        volume = MultiModalVolume(subject_id=f"phantom_{i:03d}", voxels=voxels, modality_names=names)
        subjects.append((volume, LabelVolume(labels=labels)))
    logger.info("✅ generated %d phantoms (seed=%d, side=%d, m=%d)", n_subjects, seed, side, m)
    return subjects


# --- Preprocessing ---
def normalize(volume: MultiModalVolume) -> MultiModalVolume:
    """Zero mean, unit standard deviation per modality over non-background voxels."""
    brain = volume.brain_mask()
    voxels = volume.voxels.astype(np.float64, copy=True)
    for j, name in enumerate(volume.modality_names):
        values = voxels[j][brain]
        if values.size < 2 or values.std() == 0.0:
            raise DataError(f"subject {volume.subject_id}: modality {name} is constant over the brain, cannot normalize")
        voxels[j][brain] = (values - values.mean()) / values.std()
        voxels[j][~brain] = volume.background_value
    return volume.model_copy(update={"voxels": voxels.astype(np.float32)})


def derive_regions(labels: LabelVolume) -> dict[Region, RegionMask]:
    return {
        region: RegionMask(region=region, mask=np.isin(labels.labels, members))
        for region, members in REGION_LABELS.items()
    }


# --- Patch sampling ---
def extract_block(array: np.ndarray, start: Sequence[int], size: Sequence[int], fill: float) -> np.ndarray:
    """Crop the last three axes, filling whatever falls outside the array."""
    out = np.full(array.shape[:-3] + tuple(size), fill, dtype=array.dtype)
    src, dst = [], []
    for lo, extent, dim in zip(start, size, array.shape[-3:]):
        a, b = max(lo, 0), min(lo + extent, dim)
        if b <= a:
            return out
        src.append(slice(a, b))
        dst.append(slice(a - lo, b - lo))
    out[(..., *dst)] = array[(..., *src)]
    return out


class PatchSampler:
    """Half of all patches are centered on tumor, the other half on brain outside the tumor."""

    def __init__(self, subjects: Sequence[Subject], input_side: int, depth: int, tumor_fraction: float = 0.5):
        if not subjects:
            raise DataError("cannot sample patches from an empty dataset")
        self.subjects = list(subjects)
        self.input_side = input_side
        self.output_side = output_size(input_side, depth)
        self.margin = (input_side - self.output_side) // 2
        self.tumor_fraction = tumor_fraction
        self._tumor, self._brain = [], []
        for volume, labels in self.subjects:
            if volume.spatial_shape != labels.labels.shape:
                raise DataError(f"subject {volume.subject_id}: labels {labels.labels.shape} vs volume {volume.spatial_shape}")
            tumor = np.flatnonzero(labels.labels > 0)
            brain = np.flatnonzero(volume.brain_mask() & (labels.labels == 0))
            if tumor.size == 0:
                raise DataError(f"subject {volume.subject_id} has no tumor voxels")
            if brain.size == 0:
                raise DataError(f"subject {volume.subject_id} has no brain voxels outside the tumor")
            self._tumor.append(tumor)
            self._brain.append(brain)

    def sample(self, rng: np.random.Generator, index: int | None = None) -> PatchSample:
        if index is None:
            index = int(rng.integers(len(self.subjects)))
        volume, labels = self.subjects[index]
        in_tumor = bool(rng.random() < self.tumor_fraction)
        candidates = self._tumor[index] if in_tumor else self._brain[index]
        flat = candidates[rng.integers(candidates.size)]
        center = tuple(int(c) for c in np.unravel_index(flat, volume.spatial_shape))
        return self.patch_at(index, center, in_tumor)

    def patch_at(self, index: int, center: Sequence[int], in_tumor: bool = False) -> PatchSample:
        volume, labels = self.subjects[index]
        t, s = self.output_side, self.input_side
        target_start = [c - t // 2 for c in center]
        input_start = [c - self.margin for c in target_start]
        return PatchSample(
            input_patch=extract_block(volume.voxels, input_start, (s, s, s), volume.background_value),
            target_patch=extract_block(labels.labels, target_start, (t, t, t), 0),
            center_in_tumor=in_tumor,
            center=tuple(center),
            subject_id=volume.subject_id,
        )

    def draw_batch(self, rng: np.random.Generator, batch_size: int) -> tuple[torch.Tensor, torch.Tensor]:
        """Inputs [B, M, s, s, s] float32 and class targets [B, t, t, t] int64."""
        patches = [self.sample(rng) for _ in range(batch_size)]
        x = torch.from_numpy(np.stack([p.input_patch for p in patches]).astype(np.float32))
        y = torch.from_numpy(np.stack([labels_to_classes(p.target_patch) for p in patches]))
        return x, y


def sample_patch(subject: Subject, rng: np.random.Generator, input_side: int, depth: int) -> PatchSample:
    return PatchSampler([subject], input_side, depth).sample(rng, 0)


# --- Cross-validation ---
def make_folds(subject_ids: Sequence[str], k: int, seed: int) -> FoldSplit:
    if k < 2:
        raise DataError(f"need at least 2 folds, got {k}")
    if len(subject_ids) < k:
        raise DataError(f"cannot split {len(subject_ids)} subjects into {k} folds")
    ids = np.array(sorted(subject_ids))
    order = np.random.default_rng(seed).permutation(len(ids))
    folds = [sorted(ids[part].tolist()) for part in np.array_split(order, k)]
    return FoldSplit(folds=folds, seed=seed)
