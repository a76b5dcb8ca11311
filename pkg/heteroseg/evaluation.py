"""Whole-volume inference, Dice per region and the missing-modality sweep."""

import logging
from collections import defaultdict
from itertools import product
from pathlib import Path
from typing import Collection, Sequence

import numpy as np
import pandas as pd
import torch
from pydantic import BaseModel, Field

from .data import LabelVolume, MultiModalVolume, Region, RegionMask, Subject, classes_to_labels, derive_regions, extract_block
from .errors import LeakageError, MaskError, ReportError, ShapeError
from .missingness import MODALITY_NAMES, ModalityMask, enumerate_subsets, subset_name, table_label
from .nets import SegmentationNet, output_size
from .services import get_device

logger = logging.getLogger(__name__)

REPORT_COLUMNS = ["model", "region", "subset", "mean_dice", "n_subjects", "fold", "seed"]
POOLED = "pooled"


# --- Models ---
class DiceRow(BaseModel):
    model: str
    region: Region
    subset: str
    mean_dice: float = Field(ge=0.0, le=1.0)
    n_subjects: int


class DiceReport(BaseModel):
    rows: list[DiceRow]
    fold_id: int | str | None = None
    seed: int | None = None


# --- Inference ---
def tile_origins(shape: Sequence[int], tile: int) -> list[tuple[int, int, int]]:
    return list(product(*(range(0, dim, tile) for dim in shape)))


def _select_inputs(model: SegmentationNet, volume: MultiModalVolume, mask: ModalityMask):
    m = volume.num_modalities
    if mask.m_o != m:
        raise MaskError(f"mask covers {mask.m_o} modalities, volume {volume.subject_id} has {m}")
    if mask.n_present == 0:
        raise MaskError("cannot predict with an empty modality mask")
    if model.num_inputs == m:
        return volume.voxels, mask
    # dedicated networks take exactly the subset's channels, unmasked
    if model.num_inputs == mask.n_present:
        return volume.voxels[mask.indices], None
    raise MaskError(f"network takes {model.num_inputs} inputs; mask keeps {mask.n_present} of {m}")


def sliding_window_predict(
    model: SegmentationNet,
    volume: MultiModalVolume,
    mask: ModalityMask,
    input_side: int,
    depth: int,
    batch_size: int = 4,
) -> LabelVolume:
    """Cover the volume with non-overlapping target tiles; each tile is predicted from the
    input patch centered on it, padded with background at the borders."""
    voxels, model_mask = _select_inputs(model, volume, mask)
    t = output_size(input_side, depth)
    margin = (input_side - t) // 2
    shape = volume.spatial_shape
    origins = tile_origins(shape, t)
    device = get_device()
    model.to(device)
    model.eval()

    prediction = np.zeros(shape, dtype=np.uint8)
    covered = np.zeros(shape, dtype=np.int32)
    for start in range(0, len(origins), batch_size):
        chunk = origins[start : start + batch_size]
        patches = np.stack(
            [extract_block(voxels, [o - margin for o in origin], (input_side,) * 3, volume.background_value) for origin in chunk]
        )
        with torch.no_grad():
            logits = model(torch.from_numpy(patches.astype(np.float32)).to(device), mask=model_mask)
        classes = logits.argmax(dim=1).cpu().numpy()
        for origin, tile in zip(chunk, classes):
            extent = [min(t, dim - o) for o, dim in zip(origin, shape)]
            target = tuple(slice(o, o + e) for o, e in zip(origin, extent))
            prediction[target] = classes_to_labels(tile[: extent[0], : extent[1], : extent[2]])
            covered[target] += 1

    if not np.all(covered == 1):
        raise ShapeError(f"tiling of {volume.subject_id} left voxels predicted {covered.min()}..{covered.max()} times")
    return LabelVolume(labels=prediction)


# --- Metrics ---
def dice(pred: RegionMask | np.ndarray, truth: RegionMask | np.ndarray) -> float:
    """2|P∩T| / (|P|+|T|); two empty masks agree perfectly."""
    p = pred.mask if isinstance(pred, RegionMask) else np.asarray(pred, dtype=bool)
    t = truth.mask if isinstance(truth, RegionMask) else np.asarray(truth, dtype=bool)
    if p.shape != t.shape:
        raise ShapeError(f"cannot compare masks of shape {p.shape} and {t.shape}")
    total = int(p.sum()) + int(t.sum())
    if total == 0:
        return 1.0
    return 2.0 * int(np.logical_and(p, t).sum()) / total


def evaluate_subsets(
    model: SegmentationNet,
    test_subjects: Sequence[Subject],
    subsets: Sequence[ModalityMask],
    *,
    model_name: str,
    input_side: int,
    depth: int,
    train_ids: Collection[str] = (),
    fold_id: int | None = None,
    seed: int | None = None,
) -> DiceReport:
    leaked = sorted({v.subject_id for v, _ in test_subjects} & set(train_ids))
    if leaked:
        raise LeakageError(f"test subjects were used for training: {leaked}")
    if not test_subjects:
        raise ReportError("no test subjects to evaluate")

    names = test_subjects[0][0].modality_names
    scores: dict[tuple[Region, str], list[float]] = defaultdict(list)
    for subset in subsets:
        name = subset_name(subset, names)
        for volume, labels in test_subjects:
            predicted = derive_regions(sliding_window_predict(model, volume, subset, input_side, depth))
            truth = derive_regions(labels)
            for region in Region:
                score = dice(predicted[region], truth[region])
                scores[(region, name)].append(score)
            logger.debug("📊 %s %s %s done", model_name, volume.subject_id, name)
        logger.info(
            "📊 %s [%s] WT=%.3f", model_name, name, float(np.mean(scores[(Region.WHOLE_TUMOR, name)]))
        )

    rows = [
        DiceRow(
            model=model_name,
            region=region,
            subset=subset_name(subset, names),
            mean_dice=float(np.mean(scores[(region, subset_name(subset, names))])),
            n_subjects=len(test_subjects),
        )
        for region in Region
        for subset in subsets
    ]
    return DiceReport(rows=rows, fold_id=fold_id, seed=seed)


def dedicated_subsets(input_channels: Sequence[int], m: int) -> list[ModalityMask]:
    """The single subset a dedicated network can be evaluated on."""
    return [ModalityMask(present=tuple(i in input_channels for i in range(m)))]


# --- Reports ---
def pool_reports(reports: Sequence[DiceReport]) -> DiceReport:
    """Mean over all test subjects of all folds (fold means weighted by fold size)."""
    totals: dict[tuple[str, Region, str], list[float]] = {}
    for report in reports:
        for row in report.rows:
            entry = totals.setdefault((row.model, row.region, row.subset), [0.0, 0])
            entry[0] += row.mean_dice * row.n_subjects
            entry[1] += row.n_subjects
    rows = [
        DiceRow(model=model, region=region, subset=subset, mean_dice=min(1.0, total / n), n_subjects=n)
        for (model, region, subset), (total, n) in totals.items()
    ]
    seeds = {r.seed for r in reports}
    return DiceReport(rows=rows, fold_id=POOLED, seed=seeds.pop() if len(seeds) == 1 else None)


def reports_frame(reports: Sequence[DiceReport]) -> pd.DataFrame:
    records = [
        {
            "model": row.model,
            "region": row.region.value,
            "subset": row.subset,
            "mean_dice": row.mean_dice,
            "n_subjects": row.n_subjects,
            "fold": report.fold_id,
            "seed": report.seed,
        }
        for report in reports
        for row in report.rows
    ]
    return pd.DataFrame(records, columns=REPORT_COLUMNS)


def _markdown(report: DiceReport, modality_names: Sequence[str]) -> str:
    canonical = enumerate_subsets(len(modality_names))
    labels = {subset_name(s, modality_names): table_label(s, modality_names) for s in canonical}
    frame = reports_frame([report])
    sections = []
    for region in Region:
        rows = frame[frame["region"] == region.value]
        if rows.empty:
            continue
        table = rows.pivot_table(index="model", columns="subset", values="mean_dice", aggfunc="mean", sort=False)
        ordered = [name for name in labels if name in table.columns]
        ordered += [name for name in table.columns if name not in labels]
        table = (table[ordered] * 100).round(1)
        table.columns = [labels.get(name, name) for name in ordered]
        table.index.name = None
        sections.append(f"## {region.value}\n\n{table.to_markdown(missingval='–')}\n")
    return "\n".join(sections)


def emit_report(
    reports: Sequence[DiceReport], path: Path, fmt: str = "csv", modality_names: Sequence[str] = MODALITY_NAMES
) -> Path:
    """CSV keeps Dice fractions; markdown renders one percentage table per region."""
    if not reports:
        raise ReportError("no reports to emit")
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        if fmt == "csv":
            reports_frame(reports).to_csv(path, index=False)
        elif fmt == "markdown":
            if len({r.fold_id for r in reports}) > 1:
                merged = pool_reports(reports)
            else:
                merged = DiceReport(rows=[row for r in reports for row in r.rows], fold_id=reports[0].fold_id, seed=reports[0].seed)
            path.write_text(_markdown(merged, modality_names))
        else:
            raise ReportError(f"unknown report format '{fmt}' (csv or markdown)")
    except OSError as e:
        raise ReportError(f"cannot write report to {path}: {e}") from e
    logger.info("📂 %s report written to %s", fmt, path)
    return path


def read_report(path: Path) -> list[DiceReport]:
    """Inverse of the CSV emission: one DiceReport per (fold, seed)."""
    try:
        frame = pd.read_csv(path, float_precision="round_trip", dtype={"fold": str})
    except (OSError, pd.errors.ParserError) as e:
        raise ReportError(f"cannot read report {path}: {e}") from e
    missing = set(REPORT_COLUMNS) - set(frame.columns)
    if missing:
        raise ReportError(f"report {path} lacks columns {sorted(missing)}")
    reports = []
    for (fold, seed), group in frame.groupby(["fold", "seed"], dropna=False, sort=False):
        rows = [
            DiceRow(model=r.model, region=Region(r.region), subset=r.subset, mean_dice=r.mean_dice, n_subjects=int(r.n_subjects))
            for r in group.itertuples(index=False)
        ]
        fold_id = None if pd.isna(fold) else (int(fold) if str(fold).isdigit() else fold)
        reports.append(DiceReport(rows=rows, fold_id=fold_id, seed=None if pd.isna(seed) else int(seed)))
    return reports
