"""Exception types shared across the package."""


class ShapeError(ValueError):
    """Operand dimensions do not line up."""


class GraphError(RuntimeError):
    """Backward was requested on a tensor with no recorded forward pass."""


class ConfigError(ValueError):
    """An experiment, bandit or action-space configuration is unusable."""
