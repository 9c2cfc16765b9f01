"""Exception types shared across modules."""


class InvalidInputError(ValueError):
    """Malformed data, out-of-range arguments or unreadable files."""


class TrainingDiverged(RuntimeError):
    """A training loss became non-finite."""


class RegistrationFailed(RuntimeError):
    """No usable homography could be estimated."""
