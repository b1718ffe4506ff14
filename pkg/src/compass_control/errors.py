"""Exception taxonomy shared across the package.

Every error raised by library code derives from CompassError so callers
(CLI, HTTP service) can map failures to machine-readable responses.
"""


class CompassError(Exception):
    """Base class for all package errors."""

    kind = "error"

    def payload(self) -> dict:
        return {"error": self.kind, "message": str(self)}


class DomainError(CompassError):
    """Input outside the mathematical domain of an operation."""

    kind = "domain_error"


class ConfigError(CompassError):
    """Invalid or inconsistent configuration value."""

    kind = "config_error"


class PlacementError(CompassError):
    """Box/asset placement could not be satisfied within the retry budget."""

    kind = "placement_error"


class ProjectionError(CompassError):
    """A point to be projected lies behind the camera."""

    kind = "projection_error"


class PromptError(CompassError):
    """Prompt cannot be tokenized within the backbone context length."""

    kind = "prompt_error"


class BindingError(CompassError):
    """Token/object binding is inconsistent with the prompt."""

    kind = "binding_error"


class MaskError(CompassError):
    """Attention mask missing or incompatible with the requested resolution."""

    kind = "mask_error"


class NumericError(CompassError):
    """Non-finite values encountered where finiteness is guaranteed."""

    kind = "numeric_error"


class CapabilityError(CompassError):
    """Backbone does not expose a capability required by the caller."""

    kind = "capability_error"


class RenderError(CompassError):
    """Renderer adapter failed; carries the job id for retry."""

    kind = "render_error"

    def __init__(self, message: str, job_id: str | None = None):
        super().__init__(message)
        self.job_id = job_id

    def payload(self) -> dict:
        data = super().payload()
        if self.job_id is not None:
            data["job_id"] = self.job_id
        return data


class AugmentationError(CompassError):
    """Augmentation adapter failed."""

    kind = "augmentation_error"


class ValidationError(CompassError):
    """Record set failed manifest validation; lists offending records."""

    kind = "validation_error"

    def __init__(self, message: str, offenders: list | None = None):
        super().__init__(message)
        self.offenders = offenders or []

    def payload(self) -> dict:
        data = super().payload()
        data["offenders"] = self.offenders
        return data


class InputError(CompassError):
    """Empty or malformed user input."""

    kind = "input_error"


class DataError(CompassError):
    """Training/eval data violates its declared invariants."""

    kind = "data_error"


class PredictionError(CompassError):
    """Regressor head output is degenerate and cannot be decoded."""

    kind = "prediction_error"
