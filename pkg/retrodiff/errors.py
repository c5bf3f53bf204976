"""Custom exceptions for retrodiff."""


class WorldError(ValueError):
    """Invalid concept-world parameters or an unknown concept id."""


class MaskTokenError(ValueError):
    """A MASK token was found in a grid that must contain data tokens only."""

    def __init__(self, count: int) -> None:
        super().__init__(f"Grid contains {count} MASK token(s); data grids must not")


class DuplicateIdError(ValueError):
    """Raised when an id is inserted into an index twice."""

    def __init__(self, id_: int) -> None:
        super().__init__(f"Duplicate index id: {id_!r}")


class InsufficientDataError(ValueError):
    """Not enough training vectors for the requested index layout."""


class FormatError(Exception):
    """Error reading a binary artifact (bad magic, version or truncated payload)."""


class IndexFormatError(FormatError):
    """Error reading a flat or IVF-PQ index file."""


class CheckpointError(FormatError):
    """Error reading a denoiser checkpoint."""


class ScheduleError(ValueError):
    """Infeasible or unknown diffusion schedule parameters."""


class ImpossibleStateError(ValueError):
    """A (x_n, x_0, n) combination with zero joint probability."""

    def __init__(self, xn: int, x0: int, n: int) -> None:
        super().__init__(f"Impossible state: x_n={xn} cannot follow x_0={x0} at n={n}")


class ConfigError(ValueError):
    """Malformed run configuration or an unknown configuration key."""


class DivergenceError(Exception):
    """Training produced a non-finite loss."""

    def __init__(self, step: int, loss: float) -> None:
        super().__init__(f"Non-finite loss {loss!r} at step {step}")
        self.step = step


class FilterError(ValueError):
    """A neighbor score filter removed every candidate."""

    def __init__(self, description: str, pool_size: int) -> None:
        super().__init__(
            f"Score filter {description} removed all {pool_size} candidates"
        )
