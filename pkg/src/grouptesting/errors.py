"""Exception types shared across the package."""


class DesignError(ValueError):
    """Pooling parameters that cannot describe a regular design."""


class ConstructionError(RuntimeError):
    """Random design construction ran out of repair attempts."""


class DegenerateError(FloatingPointError):
    """A normalizer vanished during message passing.

    ``where`` names the offending object, e.g. ``"edge (test 3, patient 17)"``.
    """

    def __init__(self, message, where=None):
        super().__init__(message if where is None else f"{message} at {where}")
        self.where = where


class CostGuardError(ValueError):
    """Refused because the requested computation is exponentially large."""
