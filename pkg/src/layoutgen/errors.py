"""Exception types shared across the package."""


class ContractError(ValueError):
    """A precondition on an argument was violated (bad shape, range, size)."""


class UnsupportedOperationError(RuntimeError):
    """Backward reached an operation that has no registered derivative."""


class TrainingDivergedError(RuntimeError):
    def __init__(self, step: int, component: str, value: float):
        super().__init__(f"non-finite {component} loss ({value}) at step {step}")
        self.step = step
        self.component = component
        self.value = value


class CapacityError(ValueError):
    """More objects than conditioning slots."""


class LayoutParseError(ValueError):
    def __init__(self, slot: int, message: str):
        super().__init__(f"slot {slot}: {message}")
        self.slot = slot


class AnnotationError(ValueError):
    def __init__(self, message: str, byte_offset: int | None = None):
        if byte_offset is not None:
            message = f"{message} (byte offset {byte_offset})"
        super().__init__(message)
        self.byte_offset = byte_offset


class ConfigError(ValueError):
    """Raised for unsatisfiable or inconsistent configurations."""

    def __init__(self, invariant: str, detail: str = ""):
        super().__init__(f"{invariant}: {detail}" if detail else invariant)
        self.invariant = invariant


class CheckpointError(RuntimeError):
    """Unreadable, truncated, corrupted or version-mismatched checkpoint."""


class SamplingError(RuntimeError):
    pass
