"""Exception types shared across the package."""


class InvalidInputError(ValueError):
    """Raised when an argument violates a shape, range or index precondition."""


class ConfigError(ValueError):
    """Raised when an experiment configuration fails validation.

    ``path`` names the offending field, e.g. ``"daloss.C"``.
    """

    def __init__(self, path: str, message: str):
        self.path = path
        super().__init__(f"{path}: {message}" if path else message)


class NumericalError(RuntimeError):
    """Raised when training produces non-finite parameters."""

    def __init__(self, round_index: int, client_id: int | None, message: str = "non-finite parameters"):
        self.round_index = round_index
        self.client_id = client_id
        where = f"round {round_index}" + (f", client {client_id}" if client_id is not None else "")
        super().__init__(f"{message} ({where})")
