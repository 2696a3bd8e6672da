class MpgError(Exception):
    """Base class for all errors raised by mpgpmd."""


class GameConstructionError(MpgError, ValueError):
    """Invalid game sizes, distributions or game-file contents."""


class DimensionMismatchError(MpgError, ValueError):
    """Array shapes do not match the game they are used with."""


class ConfigError(MpgError, ValueError):
    """An experiment config could not be parsed or validated."""


class MissingPotentialError(MpgError):
    """An operation needs a potential table but none is attached."""


class DegenerateGameError(MpgError):
    """The potential is identically zero, so theorem step sizes are undefined."""


class SolverError(MpgError):
    """A linear solve or best-response computation produced an inconsistent result."""


class EnumerationCapExceeded(MpgError):
    """Refusal to enumerate more deterministic policies than the configured cap."""

    def __init__(self, what: str, count: int, cap: int, hint: str = ""):
        self.what = what
        self.count = count
        self.cap = cap
        self.hint = hint
        message = f"Enumerating {what} needs {count} evaluations, above the cap of {cap}."
        if hint:
            message = f"{message} {hint}"
        super().__init__(message)


class NotAPotentialGameError(MpgError):
    """verify_mpg found the deviation identity violated and the run was not trusted."""
