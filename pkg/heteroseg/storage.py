"""On-disk containers: raw tensors with a shape header, phantom subjects, checkpoints."""

import hashlib
import json
import logging
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch
from pydantic import BaseModel

from .errors import CheckpointError, DataError
from .nets import NetworkConfig, SegmentationNet, build_model

logger = logging.getLogger(__name__)

TENSOR_DIR = "tensors"
CHECKPOINT_CONFIG = "config.json"


# --- Models ---
class CheckpointMeta(BaseModel):
    network: NetworkConfig
    variant: str
    seed: int
    epoch: int
    input_channels: list[int]
    modality_names: list[str]
    train_subjects: list[str] = []
    fold_id: int | None = None
    folds: list[list[str]] | None = None
    heads_replaced: bool = False


# --- Raw tensors ---
def write_tensor(path: Path, array: np.ndarray) -> None:
    """Little-endian float32 payload preceded by uint32 ndim and uint32 dims."""
    array = np.asarray(array, dtype="<f4")
    header = np.array([array.ndim, *array.shape], dtype="<u4")
    with open(path, "wb") as f:
        f.write(header.tobytes())
        f.write(array.tobytes(order="C"))


def read_tensor(path: Path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if len(raw) < 4:
        raise CheckpointError(f"tensor file {path} is truncated")
    ndim = int(np.frombuffer(raw[:4], dtype="<u4")[0])
    shape = tuple(int(s) for s in np.frombuffer(raw[4 : 4 + 4 * ndim], dtype="<u4"))
    data = np.frombuffer(raw[4 + 4 * ndim :], dtype="<f4")
    if data.size != int(np.prod(shape)):
        raise CheckpointError(f"tensor file {path} holds {data.size} values, header says {shape}")
    return data.reshape(shape).copy()


# --- Phantom subjects ---
def write_subject(
    directory: Path, voxels: np.ndarray, labels: np.ndarray, modality_names: Sequence[str], background_value: float
) -> None:
    directory.mkdir(parents=True, exist_ok=True)
    meta = {
        "shape": list(voxels.shape),
        "dtype": "float32",
        "byteorder": "little",
        "modality_names": list(modality_names),
        "background_value": background_value,
        "labels_dtype": "uint8",
    }
    (directory / "meta.json").write_text(json.dumps(meta, indent=2))
    (directory / "volume.bin").write_bytes(np.ascontiguousarray(voxels, dtype="<f4").tobytes())
    (directory / "labels.bin").write_bytes(np.ascontiguousarray(labels, dtype=np.uint8).tobytes())


def read_subject(directory: Path) -> tuple[np.ndarray, np.ndarray, dict]:
    try:
        meta = json.loads((directory / "meta.json").read_text())
        shape = tuple(meta["shape"])
        voxels = np.frombuffer((directory / "volume.bin").read_bytes(), dtype="<f4")
        labels = np.frombuffer((directory / "labels.bin").read_bytes(), dtype=np.uint8)
    except (OSError, KeyError, json.JSONDecodeError) as e:
        raise DataError(f"subject {directory.name}: unreadable phantom container ({e})") from e
    if voxels.size != int(np.prod(shape)) or labels.size != int(np.prod(shape[1:])):
        raise DataError(f"subject {directory.name}: payload does not match shape {shape}")
    return voxels.reshape(shape).astype(np.float32), labels.reshape(shape[1:]).copy(), meta


# --- Checkpoints ---
def save_checkpoint(directory: Path, model: SegmentationNet, meta: CheckpointMeta) -> Path:
    directory = Path(directory)
    tensor_dir = directory / TENSOR_DIR
    tensor_dir.mkdir(parents=True, exist_ok=True)
    for name, tensor in model.state_dict().items():
        write_tensor(tensor_dir / f"{name}.bin", tensor.detach().cpu().numpy())
    (directory / CHECKPOINT_CONFIG).write_text(meta.model_dump_json(indent=2))
    logger.info("📂 checkpoint written to %s (epoch %d)", directory, meta.epoch)
    return directory


def load_meta(directory: Path) -> CheckpointMeta:
    path = Path(directory) / CHECKPOINT_CONFIG
    if not path.exists():
        raise CheckpointError(f"{directory} is not a checkpoint: {CHECKPOINT_CONFIG} missing")
    return CheckpointMeta.model_validate_json(path.read_text())


def load_checkpoint(directory: Path) -> tuple[SegmentationNet, CheckpointMeta]:
    directory = Path(directory)
    meta = load_meta(directory)
    model = build_model(meta.network, seed=meta.seed)
    state = model.state_dict()
    loaded = {}
    for name, reference in state.items():
        path = directory / TENSOR_DIR / f"{name}.bin"
        if not path.exists():
            raise CheckpointError(f"checkpoint {directory} has no tensor '{name}'")
        array = read_tensor(path)
        if tuple(array.shape) != tuple(reference.shape):
            raise CheckpointError(
                f"tensor '{name}' has shape {array.shape}, network expects {tuple(reference.shape)}"
            )
        loaded[name] = torch.from_numpy(array).to(reference.dtype)
    model.load_state_dict(loaded)
    model.eval()
    return model, meta


# --- Hashing ---
def sha256_file(path: Path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()


def file_hashes(root: Path, exclude: Callable[[Path], bool] = lambda p: False) -> dict[str, str]:
    """sha256 of every file under root (or of root itself), keyed by relative path."""
    root = Path(root)
    if root.is_file():
        return {root.name: sha256_file(root)}
    return {
        path.relative_to(root).as_posix(): sha256_file(path)
        for path in sorted(p for p in root.rglob("*") if p.is_file() and not exclude(p))
    }


def sha256_tree(root: Path, exclude: Callable[[Path], bool] = lambda p: False) -> str:
    digest = hashlib.sha256()
    for name, value in file_hashes(root, exclude).items():
        digest.update(name.encode())
        digest.update(value.encode())
    return digest.hexdigest()
