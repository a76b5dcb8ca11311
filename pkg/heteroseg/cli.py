"""Command-line entrypoint: synth, ingest, train, eval, visualize, report, repro-toy, rerun."""

import argparse
import contextlib
import json
import logging
import os
import platform
import sys
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Callable, Sequence

import numpy as np
import psutil
import torch
from pydantic import BaseModel, ValidationError

from . import __version__
from .data import Subject, generate_phantoms, ingest_brats, load_dataset, make_folds, normalize, save_dataset
from .embedding_viz import default_masks, visualize
from .errors import CheckpointError, ConfigError, DataError, HeterosegError, ReproducibilityError
from .evaluation import DiceReport, dedicated_subsets, emit_report, evaluate_subsets, pool_reports, read_report
from .missingness import MODALITY_NAMES, parse_subsets
from .nets import input_size
from .services import configure_logging, configure_runtime
from .storage import CHECKPOINT_CONFIG, file_hashes, load_checkpoint, sha256_tree
from .training import ExperimentConfig, Variant, train_variant

if not hasattr(contextlib, "chdir"):  # Python < 3.11 compatibility

    @contextlib.contextmanager
    def _chdir(path):
        previous = os.getcwd()
        os.chdir(path)
        try:
            yield
        finally:
            os.chdir(previous)

    contextlib.chdir = _chdir

logger = logging.getLogger(__name__)

MANIFEST_NAME = "manifest.json"
MANIFEST_SUFFIX = ".manifest.json"
TOY_SUBJECTS = 25
TOY_SIDE = 64
TARGET_TILE = 20


# --- Models ---
class RunManifest(BaseModel):
    """Everything needed to re-execute a run and check that it reproduced."""

    version: str = __version__
    command: str
    argv: list[str]
    cwd: str
    config: dict[str, Any] = {}
    seeds: dict[str, int] = {}
    data_checksum: str | None = None
    checkpoints: list[str] = []
    started_at: datetime
    finished_at: datetime
    artifacts: dict[str, str] = {}
    host: dict[str, Any] = {}


class RunRecord(BaseModel):
    """What a subcommand hands back for its manifest."""

    output: Path
    config: dict[str, Any] = {}
    seeds: dict[str, int] = {}
    data_checksum: str | None = None
    checkpoints: list[str] = []


def host_info() -> dict[str, Any]:
    return {
        "platform": platform.platform(),
        "python": platform.python_version(),
        "torch": torch.__version__,
        "numpy": np.__version__,
        "physical_cores": psutil.cpu_count(logical=False),
        "logical_cores": psutil.cpu_count(logical=True),
        "memory_gb": round(psutil.virtual_memory().total / 1024**3, 1),
        "torch_threads": torch.get_num_threads(),
    }


def _is_manifest(path: Path) -> bool:
    return path.name == MANIFEST_NAME or path.name.endswith(MANIFEST_SUFFIX)


def manifest_path(output: Path) -> Path:
    output = Path(output)
    if output.is_dir():
        return output / MANIFEST_NAME
    return output.with_name(output.name + MANIFEST_SUFFIX)


def artifact_hashes(output: Path) -> dict[str, str]:
    return file_hashes(output, exclude=_is_manifest)


# --- Shared helpers ---
def load_subjects(data_dir: Path) -> tuple[list[Subject], str]:
    """Normalized subjects plus a checksum of the directory they came from."""
    subjects = [(normalize(volume), labels) for volume, labels in load_dataset(data_dir)]
    if not subjects:
        raise DataError(f"no subjects in {data_dir}")
    return subjects, sha256_tree(data_dir, exclude=_is_manifest)


def load_experiment(path: Path | None, preset: str, seed: int | None) -> ExperimentConfig:
    if path is not None:
        try:
            experiment = ExperimentConfig.model_validate_json(Path(path).read_text())
        except OSError as e:
            raise ConfigError(f"cannot read config {path}: {e}") from e
        except ValidationError as e:
            raise ConfigError(f"invalid config {path}: {e}") from e
    elif preset == "toy":
        experiment = ExperimentConfig.toy(seed or 0)
    else:
        experiment = ExperimentConfig.reference()
    if seed is not None:
        experiment = experiment.model_copy(update={"train": experiment.train.model_copy(update={"seed": seed})})
    return experiment


def resolve_checkpoints(model_dir: Path) -> list[Path]:
    """A checkpoint directory, a training output directory, or a directory of dedicated runs."""
    model_dir = Path(model_dir)
    for candidate in (model_dir, model_dir / "final", model_dir / "fusion" / "final"):
        if (candidate / CHECKPOINT_CONFIG).exists():
            return [candidate]
    dedicated = sorted(p.parent for p in model_dir.glob(f"*/final/{CHECKPOINT_CONFIG}"))
    if not dedicated:
        raise CheckpointError(f"no checkpoint found under {model_dir}")
    return dedicated


def report_name(variant: str) -> str:
    if variant.startswith(Variant.DEDICATED.value):
        return Variant.DEDICATED.value
    return variant


def split_subjects(subjects: Sequence[Subject], folds: list[list[str]] | None, fold: int, train_ids: Sequence[str]):
    """Test subjects of `fold`, or everything not trained on when the checkpoint carries no folds."""
    if folds is not None:
        if not 0 <= fold < len(folds):
            raise DataError(f"fold {fold} out of range for {len(folds)} folds")
        wanted = set(folds[fold])
    else:
        wanted = {v.subject_id for v, _ in subjects} - set(train_ids)
    selected = [s for s in subjects if s[0].subject_id in wanted]
    missing = wanted - {v.subject_id for v, _ in selected}
    if missing:
        raise DataError(f"test subjects missing from the data directory: {sorted(missing)}")
    return selected


def _jsonable(args: argparse.Namespace) -> dict[str, Any]:
    return {k: str(v) if isinstance(v, Path) else v for k, v in vars(args).items() if k != "handler"}


# --- Subcommands ---
def cmd_synth(args: argparse.Namespace) -> RunRecord:
    subjects = generate_phantoms(args.seed, args.subjects, args.side, args.modalities, args.noise)
    save_dataset(subjects, args.out)
    return RunRecord(output=args.out, config=_jsonable(args), seeds={"phantoms": args.seed})


def cmd_ingest(args: argparse.Namespace) -> RunRecord:
    subjects = ingest_brats(args.src)
    if not subjects:
        raise DataError(f"no BraTS subjects under {args.src}")
    save_dataset(subjects, args.out)
    return RunRecord(output=args.out, config=_jsonable(args), data_checksum=sha256_tree(args.src))


def cmd_train(args: argparse.Namespace) -> RunRecord:
    experiment = load_experiment(args.config, args.preset, args.seed)
    variant = Variant.from_arch(args.arch, args.pretrain, args.dedicated is not None)
    subjects, checksum = load_subjects(args.data)
    names = subjects[0][0].modality_names
    experiment = experiment.model_copy(
        update={"network": experiment.network.model_copy(update={"num_modalities": len(names)})}
    )

    folds = make_folds([v.subject_id for v, _ in subjects], experiment.num_folds, experiment.fold_seed)
    train_ids = set(folds.train_ids(args.fold))
    train_subjects = [s for s in subjects if s[0].subject_id in train_ids]
    args.out.mkdir(parents=True, exist_ok=True)
    (args.out / "folds.json").write_text(folds.model_dump_json(indent=2))
    (args.out / "experiment.json").write_text(experiment.model_dump_json(indent=2))

    subsets = parse_subsets(args.dedicated, names) if args.dedicated is not None else None
    checkpoints = train_variant(
        variant,
        train_subjects,
        experiment,
        out_dir=args.out,
        subsets=subsets,
        workers=args.workers,
        folds=folds,
        fold_id=args.fold,
    )
    logger.info("✅ trained %s: %d checkpoint(s) in %s", variant.value, len(checkpoints), args.out)
    return RunRecord(
        output=args.out,
        config={"variant": variant.value, "fold": args.fold, "experiment": experiment.model_dump(mode="json")},
        seeds={"train": experiment.train.seed, "folds": experiment.fold_seed},
        data_checksum=checksum,
        checkpoints=[str(c.path) for c in checkpoints if c.path is not None],
    )


def cmd_eval(args: argparse.Namespace) -> RunRecord:
    subjects, checksum = load_subjects(args.data)
    names = subjects[0][0].modality_names
    reports: list[DiceReport] = []
    paths = resolve_checkpoints(args.model_dir)
    seeds = {}
    for path in paths:
        model, meta = load_checkpoint(path)
        fold = args.fold if args.fold is not None else (meta.fold_id or 0)
        test_subjects = split_subjects(subjects, meta.folds, fold, meta.train_subjects)
        if report_name(meta.variant) == Variant.DEDICATED.value:
            subsets = dedicated_subsets(meta.input_channels, len(names))
        else:
            subsets = parse_subsets(args.subsets, names)
        reports.append(
            evaluate_subsets(
                model,
                test_subjects,
                subsets,
                model_name=report_name(meta.variant),
                input_side=input_size(args.tile, meta.network.depth),
                depth=meta.network.depth,
                train_ids=meta.train_subjects,
                fold_id=fold,
                seed=meta.seed,
            )
        )
        seeds[str(path)] = meta.seed
    emit_report(reports, args.out, args.format, names)
    return RunRecord(
        output=args.out, config=_jsonable(args), seeds=seeds, data_checksum=checksum, checkpoints=[str(p) for p in paths]
    )


def cmd_visualize(args: argparse.Namespace) -> RunRecord:
    subjects, checksum = load_subjects(args.data)
    names = subjects[0][0].modality_names
    paths = resolve_checkpoints(args.model_dir)
    if len(paths) != 1:
        raise CheckpointError(f"visualize needs a single network, {args.model_dir} holds {len(paths)}")
    model, meta = load_checkpoint(paths[0])
    fold = args.fold if args.fold is not None else (meta.fold_id or 0)
    test_subjects = split_subjects(subjects, meta.folds, fold, meta.train_subjects)
    masks = parse_subsets(args.masks, names) if args.masks else default_masks(len(names))
    visualize(
        model,
        test_subjects,
        args.out,
        masks=masks,
        n_patches=args.n_patches,
        n_voxels=args.n_voxels,
        input_side=input_size(args.tile, meta.network.depth),
        depth=meta.network.depth,
        perplexity=args.perplexity,
        seed=args.seed,
        iterations=args.iterations,
    )
    return RunRecord(
        output=args.out, config=_jsonable(args), seeds={"embedding": args.seed}, data_checksum=checksum,
        checkpoints=[str(paths[0])],
    )


def cmd_report(args: argparse.Namespace) -> RunRecord:
    reports = [report for path in args.inputs for report in read_report(path)]
    if args.pool:
        reports = [pool_reports(reports)]
    emit_report(reports, args.out, args.format, args.modality_names.split(","))
    return RunRecord(output=args.out, config=_jsonable(args))


def cmd_repro_toy(args: argparse.Namespace) -> RunRecord:
    """Phantoms, the seven variants on fold 0, the full subset sweep, both report formats and one embedding."""
    out = args.out
    seed = str(args.seed)
    data = out / "data"
    run(["synth", "--seed", seed, "--subjects", str(TOY_SUBJECTS), "--side", str(TOY_SIDE), "--out", str(data)])

    runs = []
    for variant in Variant:
        run_dir = out / "runs" / variant.slug
        argv = ["train", "--preset", "toy", "--seed", seed, "--data", str(data), "--fold", "0", "--out", str(run_dir)]
        if variant == Variant.DEDICATED:
            argv += ["--dedicated", "all"]
        else:
            arch = variant.slug.removesuffix("_pretrained")
            argv += ["--arch", arch] + (["--pretrain"] if variant.pretrained else [])
        run(argv)
        runs.append(run_dir)

    csvs = []
    for run_dir in runs:
        report = out / "reports" / f"{run_dir.name}.csv"
        run(["eval", "--model-dir", str(run_dir), "--data", str(data), "--subsets", "all", "--out", str(report)])
        csvs.append(report)
    inputs = [str(p) for p in csvs]
    run(["report", "--inputs", *inputs, "--format", "csv", "--out", str(out / "report.csv")])
    run(["report", "--inputs", *inputs, "--format", "markdown", "--out", str(out / "report.md")])
    run([
        "visualize", "--model-dir", str(out / "runs" / Variant.MULTIPATH_PRETRAINED.slug), "--data", str(data),
        "--n-voxels", "1000", "--n-patches", "4", "--seed", seed, "--out", str(out / "embedding"),
    ])
    return RunRecord(output=out, config=_jsonable(args), seeds={"toy": args.seed})


def cmd_rerun(args: argparse.Namespace) -> None:
    try:
        recorded = RunManifest.model_validate_json(Path(args.manifest).read_text())
    except (OSError, ValidationError) as e:
        raise ConfigError(f"cannot read manifest {args.manifest}: {e}") from e
    logger.info("🔁 re-running `%s` from %s", " ".join(recorded.argv), args.manifest)
    with contextlib.chdir(recorded.cwd):
        fresh = run(recorded.argv)
    if fresh is None:
        raise ReproducibilityError("the recorded command did not produce a manifest")
    changed = sorted(
        name for name in recorded.artifacts.keys() | fresh.artifacts.keys()
        if recorded.artifacts.get(name) != fresh.artifacts.get(name)
    )
    if changed:
        raise ReproducibilityError(f"{len(changed)} artifact(s) differ from the manifest: {changed[:10]}")
    logger.info("✅ all %d artifacts reproduced", len(fresh.artifacts))


# --- Parser ---
def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="heteroseg", description="Brain tumor segmentation networks that tolerate missing MR modalities."
    )
    parser.add_argument("--log-level", default=None, help="overrides HETEROSEG_LOG_LEVEL")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic phantom dataset")
    p.add_argument("--seed", type=int, default=0, help="phantom seed")
    p.add_argument("--subjects", type=int, default=TOY_SUBJECTS, help="number of subjects")
    p.add_argument("--side", type=int, default=TOY_SIDE, help="cube side in voxels")
    p.add_argument("--modalities", type=int, default=len(MODALITY_NAMES), help="number of modalities")
    p.add_argument("--noise", type=float, default=0.15, help="gaussian noise level relative to tissue contrast")
    p.add_argument("--out", type=Path, required=True, help="dataset directory to write")
    p.set_defaults(handler=cmd_synth)

    p = sub.add_parser("ingest", help="convert a BraTS-layout NIfTI directory into the dataset container")
    p.add_argument("--src", type=Path, required=True, help="directory of <subject>/<subject>_<suffix>.nii.gz")
    p.add_argument("--out", type=Path, required=True, help="dataset directory to write")
    p.set_defaults(handler=cmd_ingest)

    p = sub.add_parser("train", help="train one variant on the training folds")
    p.add_argument("--arch", choices=["unet", "dropout", "multipath", "sharedrep"], default="unet")
    p.add_argument("--pretrain", action="store_true", help="pretrain one pathway per modality, then train the fusion head")
    p.add_argument("--dedicated", metavar="SUBSETS", default=None,
                   help="train one dedicated UNet per subset ('all' or e.g. 'T2W+FLAIR,FLAIR')")
    p.add_argument("--data", type=Path, required=True, help="dataset directory")
    p.add_argument("--fold", type=int, default=0, help="held-out fold")
    p.add_argument("--config", type=Path, default=None, help="JSON experiment config (overrides --preset)")
    p.add_argument("--preset", choices=["reference", "toy"], default="reference")
    p.add_argument("--seed", type=int, default=None, help="training seed (overrides the config)")
    p.add_argument("--workers", type=int, default=1, help="concurrent pathway pretrainings")
    p.add_argument("--out", type=Path, required=True, help="run directory")
    p.set_defaults(handler=cmd_train)

    p = sub.add_parser("eval", help="Dice per region for every modality subset")
    p.add_argument("--model-dir", type=Path, required=True, help="checkpoint or run directory")
    p.add_argument("--data", type=Path, required=True, help="dataset directory")
    p.add_argument("--fold", type=int, default=None, help="test fold (default: the fold the model held out)")
    p.add_argument("--subsets", default="all", help="'all' or a comma list such as 'All,T2W+FLAIR'")
    p.add_argument("--tile", type=int, default=TARGET_TILE, help="output tile side for sliding-window inference")
    p.add_argument("--format", choices=["csv", "markdown"], default="csv")
    p.add_argument("--out", type=Path, required=True, help="report file")
    p.set_defaults(handler=cmd_eval)

    p = sub.add_parser("visualize", help="t-SNE of the final hidden layer under several masks")
    p.add_argument("--model-dir", type=Path, required=True, help="checkpoint or run directory")
    p.add_argument("--data", type=Path, required=True, help="dataset directory")
    p.add_argument("--fold", type=int, default=None, help="test fold (default: the fold the model held out)")
    p.add_argument("--n-voxels", type=int, default=1000, help="samples over all masks")
    p.add_argument("--n-patches", type=int, default=4, help="patches to draw voxels from")
    p.add_argument("--masks", default=None, help="comma list of subsets (default: All plus each single modality)")
    p.add_argument("--perplexity", type=float, default=30.0)
    p.add_argument("--iterations", type=int, default=1000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--tile", type=int, default=TARGET_TILE, help="output tile side of the patches")
    p.add_argument("--out", type=Path, required=True, help="output directory")
    p.set_defaults(handler=cmd_visualize)

    p = sub.add_parser("report", help="merge CSV reports and render them as CSV or markdown")
    p.add_argument("--inputs", type=Path, nargs="+", required=True, help="CSV reports")
    p.add_argument("--format", choices=["csv", "markdown"], default="markdown")
    p.add_argument("--pool", action="store_true", help="pool all folds into one report")
    p.add_argument("--modality-names", default=",".join(MODALITY_NAMES))
    p.add_argument("--out", type=Path, required=True, help="report file")
    p.set_defaults(handler=cmd_report)

    p = sub.add_parser("repro-toy", help="run the whole toy pipeline on phantoms")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", type=Path, required=True, help="output directory")
    p.set_defaults(handler=cmd_repro_toy)

    p = sub.add_parser("rerun", help="re-execute a run from its manifest and compare artifact hashes")
    p.add_argument("manifest", type=Path)
    p.set_defaults(handler=cmd_rerun)
    return parser


def run(argv: Sequence[str]) -> RunManifest | None:
    """Dispatch one subcommand and write its manifest. Errors propagate."""
    args = build_parser().parse_args(list(argv))
    started = datetime.now(timezone.utc)
    handler: Callable[[argparse.Namespace], RunRecord | None] = args.handler
    record = handler(args)
    if record is None:
        return None
    manifest = RunManifest(
        command=args.command,
        argv=list(argv),
        cwd=os.getcwd(),
        config=record.config,
        seeds=record.seeds,
        data_checksum=record.data_checksum,
        checkpoints=record.checkpoints,
        started_at=started,
        finished_at=datetime.now(timezone.utc),
        artifacts=artifact_hashes(record.output),
        host=host_info(),
    )
    path = manifest_path(record.output)
    path.write_text(manifest.model_dump_json(indent=2))
    logger.info("📂 manifest written to %s", path)
    return manifest


def main(argv: Sequence[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    configure_logging(args.log_level)
    configure_runtime()
    try:
        run(argv)
    except HeterosegError as e:
        logger.error("🔥 %s", e.detail)
        print(f"🔥 {type(e).__name__}: {e.detail}", file=sys.stderr)
        return 1
    return 0
