"""Exception hierarchy shared across the package."""


class RepformerError(Exception):
    """Base class for every error raised by this package."""


class ShapeError(RepformerError, ValueError):
    pass


class NumericError(RepformerError, ArithmeticError):
    pass


class ConfigError(RepformerError, ValueError):
    pass


class MissingFeatureError(RepformerError, KeyError):
    def __init__(self, episode_id: str, source_id: str, phase: str | None = None):
        self.episode_id = episode_id
        self.source_id = source_id
        self.phase = phase
        where = f" phase={phase!r}" if phase else ""
        super().__init__(f"missing feature: episode={episode_id!r}{where} source={source_id!r}")

    def __str__(self) -> str:
        return self.args[0]


class MissingCaptionError(MissingFeatureError):
    """No caption for an (episode, phase); the narrative group cannot be built."""

    def __init__(self, episode_id: str, phase: str):
        RepformerError.__init__(self, f"missing caption: episode={episode_id!r} phase={phase!r}")
        self.episode_id = episode_id
        self.source_id = None
        self.phase = phase


class EmptyKeysError(ShapeError):
    pass


class EmptyRepresentationError(ShapeError):
    pass


class ManifestError(RepformerError, ValueError):
    def __init__(self, message: str, line: int | None = None):
        self.line = line
        super().__init__(f"line {line}: {message}" if line is not None else message)


class FormatError(RepformerError, ValueError):
    """Malformed LREP / LRCK file."""


class DigestMismatchError(FormatError):
    pass


class TrainingDivergedError(NumericError):
    def __init__(self, epoch: int, batch: int, param_norms: dict[str, float]):
        self.epoch = epoch
        self.batch = batch
        self.param_norms = param_norms
        worst = max(param_norms.items(), key=lambda kv: kv[1]) if param_norms else ("-", 0.0)
        super().__init__(
            f"non-finite loss at epoch {epoch}, batch {batch}; "
            f"largest param norm {worst[0]}={worst[1]:.4g}"
        )


class RemoteEmbeddingError(RepformerError):
    """The embedding service failed after all retries."""
