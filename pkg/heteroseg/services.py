import logging
import os
import warnings

import torch
from dotenv import load_dotenv

# sklearn's t-SNE and matplotlib both warn about defaults we pin explicitly
warnings.filterwarnings("ignore", category=FutureWarning, module="sklearn")
warnings.filterwarnings("ignore", message=".*tight_layout.*")

load_dotenv()

LOG_LEVEL = os.getenv("HETEROSEG_LOG_LEVEL", "INFO")
DEVICE = os.getenv("HETEROSEG_DEVICE", "cpu")
NUM_THREADS = int(os.getenv("HETEROSEG_NUM_THREADS", "1"))
DETERMINISTIC = os.getenv("HETEROSEG_DETERMINISTIC", "1") not in ("0", "false", "False")

logger = logging.getLogger(__name__)


def configure_logging(level: str | None = None) -> None:
    logging.basicConfig(
        level=(level or LOG_LEVEL).upper(),
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )


def get_device() -> torch.device:
    if DEVICE.startswith("cuda") and not torch.cuda.is_available():
        logger.warning("⚠️ %s requested but CUDA is not available, using cpu", DEVICE)
        return torch.device("cpu")
    return torch.device(DEVICE)


def configure_runtime(num_threads: int | None = None) -> None:
    """Pin torch threading and determinism from the environment.

    One thread plus deterministic algorithms is the mode in which repeated
    runs produce bitwise-identical checkpoints.
    """
    torch.set_num_threads(num_threads or NUM_THREADS)
    if DETERMINISTIC:
        torch.use_deterministic_algorithms(True, warn_only=True)
