"""t-SNE maps of the final hidden layer under different modality masks."""

import inspect
import json
import logging
from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np
import pandas as pd
import torch
from pydantic import BaseModel, ConfigDict
from sklearn.manifold import TSNE
from sklearn.metrics import silhouette_score
from sklearn.neighbors import NearestNeighbors

from .data import LABEL_SET, PatchSampler, Subject, classes_to_labels
from .errors import EmbeddingError
from .missingness import ModalityMask, subset_name
from .nets import SegmentationNet, forward_with_features
from .services import get_device

logger = logging.getLogger(__name__)

HIGHLIGHT_KEYS = ("predicted_label", "true_label", "mask_name")


# --- Models ---
class FeatureSample(BaseModel):
    model_config = ConfigDict(arbitrary_types_allowed=True)

    feature: np.ndarray
    predicted_label: int
    true_label: int
    mask_name: str
    voxel_id: tuple[str, int, int, int]


class EmbeddingMeta(BaseModel):
    perplexity: float
    seed: int
    iterations: int
    method: str = "barnes_hut"
    hidden_width: int
    n_samples: int
    masks: list[str]
    mask_separability: float | None = None
    silhouette: float | None = None


def default_masks(m: int) -> list[ModalityMask]:
    """All modalities plus each modality on its own."""
    singles = [ModalityMask(present=tuple(i == j for i in range(m))) for j in range(m)]
    return [ModalityMask.full(m)] + (singles if m > 1 else [])


# --- Extraction ---
def extract_features(
    model: SegmentationNet,
    subjects: Sequence[Subject],
    rng: np.random.Generator,
    n_patches: int,
    n_voxels: int,
    masks: Sequence[ModalityMask],
    input_side: int,
    depth: int,
    batch_size: int = 4,
) -> list[FeatureSample]:
    """Hidden activations at the same random target voxels under every mask.

    `n_voxels` counts samples over all masks, so each mask sees
    n_voxels / len(masks) voxels.
    """
    if not masks:
        raise EmbeddingError("need at least one mask")
    if n_voxels % len(masks):
        raise EmbeddingError(f"{n_voxels} voxels cannot be split evenly over {len(masks)} masks")
    names = subjects[0][0].modality_names
    if model.num_inputs != len(names):
        raise EmbeddingError(f"network takes {model.num_inputs} inputs, data has {len(names)} modalities")
    sampler = PatchSampler(subjects, input_side, depth)
    t = sampler.output_side
    per_mask = n_voxels // len(masks)
    available = n_patches * t**3
    if per_mask > available:
        raise EmbeddingError(f"{per_mask} voxels per mask requested but {n_patches} patches hold only {available}")

    patches = [sampler.sample(rng) for _ in range(n_patches)]
    chosen = np.sort(rng.choice(available, size=per_mask, replace=False))
    patch_index, flat = np.divmod(chosen, t**3)
    z, y, x = np.unravel_index(flat, (t, t, t))
    voxel_ids = []
    for p, dz, dy, dx in zip(patch_index, z, y, x):
        patch = patches[p]
        origin = [c - t // 2 for c in patch.center]
        voxel_ids.append((patch.subject_id, int(origin[0] + dz), int(origin[1] + dy), int(origin[2] + dx)))
    true_labels = np.stack([p.target_patch for p in patches])[patch_index, z, y, x]

    device = get_device()
    model.to(device)
    model.eval()
    inputs = torch.from_numpy(np.stack([p.input_patch for p in patches]).astype(np.float32))
    samples = []
    for mask in masks:
        features, classes = [], []
        with torch.no_grad():
            for start in range(0, n_patches, batch_size):
                hidden, logits = forward_with_features(model, inputs[start : start + batch_size].to(device), mask)
                features.append(hidden.cpu().numpy())
                classes.append(logits.argmax(dim=1).cpu().numpy())
        features = np.concatenate(features)[patch_index, :, z, y, x]
        predicted = classes_to_labels(np.concatenate(classes)[patch_index, z, y, x])
        name = subset_name(mask, names)
        samples.extend(
            FeatureSample(
                feature=features[i],
                predicted_label=int(predicted[i]),
                true_label=int(true_labels[i]),
                mask_name=name,
                voxel_id=voxel_ids[i],
            )
            for i in range(per_mask)
        )
    logger.info("🧠 extracted %d feature vectors of width %d", len(samples), model.hidden_width)
    return samples


def feature_matrix(samples: Sequence[FeatureSample]) -> np.ndarray:
    return np.stack([s.feature for s in samples]).astype(np.float64)


# --- Embedding ---
def compute_tsne(
    samples: Sequence[FeatureSample] | np.ndarray, perplexity: float = 30.0, seed: int = 0, iterations: int = 1000
) -> np.ndarray:
    features = samples if isinstance(samples, np.ndarray) else feature_matrix(samples)
    if len(features) < 3 * perplexity:
        raise EmbeddingError(f"t-SNE with perplexity {perplexity} needs at least {3 * perplexity:.0f} samples, got {len(features)}")
    if np.allclose(features, features[0]):
        raise EmbeddingError("all feature vectors are identical; the embedding would collapse to a point")
    # `n_iter` was renamed `max_iter` in scikit-learn 1.5
    iter_key = "max_iter" if "max_iter" in inspect.signature(TSNE).parameters else "n_iter"
    tsne = TSNE(
        n_components=2,
        perplexity=perplexity,
        random_state=seed,
        init="pca",
        learning_rate="auto",
        method="barnes_hut",
        n_jobs=1,
        **{iter_key: iterations},
    )
    points = tsne.fit_transform(features)
    if not np.all(np.isfinite(points)):
        raise EmbeddingError("t-SNE produced non-finite coordinates")
    return points


def mask_separability(points: np.ndarray, samples: Sequence[FeatureSample]) -> float:
    """Leave-one-out 1-nearest-neighbour accuracy at predicting the mask from 2D position."""
    labels = np.array([s.mask_name for s in samples])
    _, neighbours = NearestNeighbors(n_neighbors=2).fit(points).kneighbors(points)
    return float(np.mean(labels[neighbours[:, 1]] == labels))


def render_scatter(points: np.ndarray, samples: Sequence[FeatureSample], highlight: str, path: Path) -> Path:
    """One panel per value of `highlight`, that value in red and everything else in gray."""
    if highlight not in HIGHLIGHT_KEYS:
        raise EmbeddingError(f"unknown highlight '{highlight}', expected one of {HIGHLIGHT_KEYS}")
    if len(points) != len(samples):
        raise EmbeddingError(f"{len(points)} points for {len(samples)} samples")
    values = np.array([getattr(s, highlight) for s in samples])
    if highlight == "mask_name":
        categories = list(dict.fromkeys(values.tolist()))
    else:
        categories = list(LABEL_SET)

    fig, axes = plt.subplots(1, len(categories), figsize=(4 * len(categories), 4), squeeze=False)
    for ax, category in zip(axes[0], categories):
        selected = values == category
        if not selected.any():
            logger.warning("⚠️ no samples with %s = %s; panel is all gray", highlight, category)
        ax.scatter(points[~selected, 0], points[~selected, 1], s=1, c="lightgray")
        ax.scatter(points[selected, 0], points[selected, 1], s=1, c="red")
        ax.set_title(f"{highlight} = {category}")
        ax.set_xticks([])
        ax.set_yticks([])
    fig.tight_layout()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=100)
    plt.close(fig)
    return path


def write_embedding(out_dir: Path, points: np.ndarray, samples: Sequence[FeatureSample], meta: EmbeddingMeta) -> None:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    frame = pd.DataFrame(
        {
            "voxel_id": [":".join(str(v) for v in s.voxel_id) for s in samples],
            "mask": [s.mask_name for s in samples],
            "x": points[:, 0],
            "y": points[:, 1],
            "pred": [s.predicted_label for s in samples],
            "true": [s.true_label for s in samples],
        }
    )
    frame.to_csv(out_dir / "embedding.csv", index=False)
    (out_dir / "meta.json").write_text(json.dumps(meta.model_dump(), indent=2))


def visualize(
    model: SegmentationNet,
    subjects: Sequence[Subject],
    out_dir: Path,
    *,
    masks: Sequence[ModalityMask],
    n_patches: int,
    n_voxels: int,
    input_side: int,
    depth: int,
    perplexity: float = 30.0,
    seed: int = 0,
    iterations: int = 1000,
) -> EmbeddingMeta:
    """Extract, embed, score and draw one panel set per highlight key."""
    rng = np.random.default_rng(seed)
    samples = extract_features(model, subjects, rng, n_patches, n_voxels, masks, input_side, depth)
    points = compute_tsne(samples, perplexity=perplexity, seed=seed, iterations=iterations)
    mask_names = list(dict.fromkeys(s.mask_name for s in samples))
    meta = EmbeddingMeta(
        perplexity=perplexity,
        seed=seed,
        iterations=iterations,
        hidden_width=model.hidden_width,
        n_samples=len(samples),
        masks=mask_names,
    )
    if len(mask_names) > 1:
        labels = [s.mask_name for s in samples]
        meta.mask_separability = mask_separability(points, samples)
        meta.silhouette = float(silhouette_score(points, labels))
        logger.info(
            "📊 mask separability %.3f (chance %.3f), silhouette %.3f",
            meta.mask_separability, 1 / len(mask_names), meta.silhouette,
        )
    write_embedding(out_dir, points, samples, meta)
    for key in HIGHLIGHT_KEYS:
        render_scatter(points, samples, key, Path(out_dir) / f"tsne_{key}.png")
    logger.info("✅ embedding written to %s", out_dir)
    return meta
