"""Exception types shared across the toolkit."""


class VlmAdvError(Exception):
    """Base class for all toolkit errors."""


class ContractViolationError(VlmAdvError, ValueError):
    """An operation was called with arguments violating its preconditions."""


class BackendUnavailableError(VlmAdvError, RuntimeError):
    """A required model backend is not registered or cannot be loaded."""


class TargetNotFoundError(VlmAdvError, RuntimeError):
    """Segmentation produced an empty target region for the given object text."""


class PipelineStageError(VlmAdvError, RuntimeError):
    """A stage of the replace pipeline failed; carries the stage label."""

    def __init__(self, stage: str, cause: BaseException):
        super().__init__(f"{stage} stage failed: {cause}")
        self.stage = stage
        self.cause = cause


class DeadGradientError(VlmAdvError, RuntimeError):
    """The objective gradient vanished for several consecutive steps."""

    def __init__(self, step: int, loss_trace):
        super().__init__(
            f"objective gradient was identically zero for 5 consecutive steps "
            f"(aborted at step {step}); the attack is stalled"
        )
        self.step = step
        self.loss_trace = list(loss_trace)


class AttackRuntimeError(VlmAdvError, RuntimeError):
    """The objective or backend failed mid-run; carries the partial loss trace."""

    def __init__(self, step: int, loss_trace, cause: BaseException):
        super().__init__(f"attack failed at step {step}: {cause}")
        self.step = step
        self.loss_trace = list(loss_trace)
        self.cause = cause


class IncompatibleMethodError(VlmAdvError, ValueError):
    """The requested (method, objective) pair is not supported."""


class ManifestValidationError(VlmAdvError, ValueError):
    """A dataset manifest violated its schema; carries every violation found."""

    def __init__(self, violations):
        self.violations = list(violations)
        lines = "\n  - ".join(self.violations)
        super().__init__(f"manifest validation failed:\n  - {lines}")


class MissingCellsError(VlmAdvError, RuntimeError):
    """Score aggregation found absent cells; carries the exhaustive list."""

    def __init__(self, missing):
        self.missing = sorted(missing)
        shown = ", ".join(map(str, self.missing[:8]))
        more = "" if len(self.missing) <= 8 else f" (+{len(self.missing) - 8} more)"
        super().__init__(f"{len(self.missing)} missing cells: {shown}{more}")
