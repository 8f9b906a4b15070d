"""Exception types shared across the package."""


class ParameterError(ValueError):
    """An argument is outside its admissible range."""


class ConstructionError(ValueError):
    """Arrays handed to a constructor have inconsistent shapes."""


class ModelError(ValueError):
    """A game or reward model violates one of its structural invariants."""


class EstimationError(RuntimeError):
    """An estimator was given data it cannot work with."""
