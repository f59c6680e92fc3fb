"""Exception types shared across modules.

Validation-style failures subclass ValueError so callers can catch broadly;
the CLI maps ConfigError/validation to exit code 2 and DivergenceError to 3.
"""


class BlockgenError(Exception):
    pass


class ConfigError(BlockgenError, ValueError):
    """Bad or unknown configuration keys/values."""


class PlacementError(BlockgenError, RuntimeError):
    """Rejection sampling could not place entity boxes."""


class ParseError(BlockgenError, ValueError):
    """Caption does not parse; carries the offending token position."""

    def __init__(self, message, position=None):
        super().__init__(message if position is None else f"{message} (token {position})")
        self.position = position


class ExhaustionError(BlockgenError, RuntimeError):
    """No valid perturbation/permutation of the requested kind exists."""


class VocabularyError(BlockgenError, ValueError):
    """Token outside the grammar vocabulary."""


class ShapeError(BlockgenError, ValueError):
    """Array dimension mismatch."""


class DegenerateInputError(BlockgenError, ValueError):
    """Zero-norm embedding or similar degenerate numeric input."""


class LabelError(BlockgenError, ValueError):
    """Pair-label matrix entries outside {+1, -1}."""


class SetStructureError(BlockgenError, ValueError):
    """Counterfactual set missing its real pair or malformed."""


class InsufficientSetsError(BlockgenError, ValueError):
    """Inter-set loss requested with fewer than two sets."""


class DisjointnessError(BlockgenError, ValueError):
    """Benchmark seeds collide with training seeds."""


class StateError(BlockgenError, RuntimeError):
    """Operation requires a trained/loaded model that is absent."""


class DivergenceError(BlockgenError, RuntimeError):
    """Training produced NaN; carries the offending step index."""

    def __init__(self, message, step=None):
        super().__init__(message if step is None else f"{message} (step {step})")
        self.step = step
