"""mfirl exceptions"""
from typing import Optional, Dict, Any, Sequence


class MfirlError(Exception):
    """Base exception for mfirl errors"""
    def __init__(self, message: str, details: Optional[Dict[str, Any]] = None):
        super().__init__(message)
        self.details = details or {}


class ContractViolationError(MfirlError):
    """Raised when inputs break a dimension, range or simplex contract"""
    pass


class EnumerationCapError(MfirlError):
    """
    Raised when exhaustive trajectory enumeration would exceed the cap.

    Example:
        try:
            trajectories = enumerate_trajectories(env, horizon=8)
        except EnumerationCapError as e:
            print(f"need {e.required} trajectories, cap is {e.cap}")
    """
    def __init__(self, cap: int, required: int):
        super().__init__(
            f"Enumeration refused: {required} trajectories exceed the cap of {cap}",
            details={"cap": cap, "required": required},
        )
        self.cap = cap
        self.required = required


class NonConvergenceError(MfirlError):
    """
    Raised when the ERMFNE fixed-point iteration hits max_iter.

    Carries the last residual so the caller can decide to retry with damping:

        try:
            eq = solve_ermfne(env, m)
        except NonConvergenceError as e:
            eq = solve_ermfne(env, m, damping=0.5)
    """
    def __init__(self, message: str, last_residual: float, iterations: int, damping: float = 0.0):
        super().__init__(
            message,
            details={"last_residual": last_residual, "iterations": iterations, "damping": damping},
        )
        self.last_residual = last_residual
        self.iterations = iterations
        self.damping = damping


class UnknownEnvironmentError(MfirlError):
    """Raised when an environment name is not recognised"""
    def __init__(self, name: str, valid: Sequence[str]):
        super().__init__(
            f"Unknown environment '{name}'. Valid environments: {', '.join(valid)}",
            details={"name": name, "valid": list(valid)},
        )
        self.name = name
        self.valid = list(valid)


class StaleCacheError(MfirlError):
    """Raised when backward() is called without a matching forward() pass"""
    pass


class NonFiniteGradientError(MfirlError):
    """Raised when an optimizer step receives NaN or infinite gradients"""
    pass


class DegenerateContextError(MfirlError):
    """Raised when a context receives (almost) no responsibility mass"""
    def __init__(self, context: int, mass: float):
        super().__init__(
            f"Context {context} is degenerate: total responsibility {mass:.3e} < 1e-12",
            details={"context": context, "mass": mass},
        )
        self.context = context
        self.mass = mass


class ConfigurationError(MfirlError):
    """Raised when configuration values are invalid"""
    pass


class CheckpointIntegrityError(MfirlError):
    """Raised when a checkpoint is malformed or its signature does not verify"""
    pass


class DataError(MfirlError):
    """Raised when trip data cannot produce a usable model"""
    pass
