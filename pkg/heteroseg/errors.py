class HeterosegError(Exception):
    """Base error. `detail` is the message shown to the user."""

    def __init__(self, detail: str):
        super().__init__(detail)
        self.detail = detail


class DataError(HeterosegError):
    pass


class ShapeError(HeterosegError):
    pass


class MaskError(HeterosegError):
    pass


class TrainingError(HeterosegError):
    pass


class CheckpointError(HeterosegError):
    pass


class LeakageError(HeterosegError):
    pass


class EmbeddingError(HeterosegError):
    pass


class ReportError(HeterosegError):
    pass


class ConfigError(HeterosegError):
    pass


class ReproducibilityError(HeterosegError):
    pass
