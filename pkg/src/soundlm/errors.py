"""Exception types shared across the package."""


class ConfigError(ValueError):
    """A configuration value or combination is invalid."""


class InputError(ValueError):
    """An operation received data violating its preconditions."""


class FormatError(ValueError):
    """A serialized structure (file, step matrix, plan text) is malformed."""


class PlanParseError(FormatError):
    """A generated plan could not be parsed; keeps the raw text around."""

    def __init__(self, message, raw_text=""):
        super().__init__(message)
        self.raw_text = raw_text


class TrainingDiverged(RuntimeError):
    """Training hit a non-finite loss; carries step and batch diagnostics."""

    def __init__(self, message, step, sample_ids):
        super().__init__(message)
        self.step = step
        self.sample_ids = list(sample_ids)


class GenerationOverflow(RuntimeError):
    """Decoding ran out of context; partial output is attached."""

    def __init__(self, message, partial):
        super().__init__(message)
        self.partial = partial


class StageError(RuntimeError):
    """A step of a multi-stage pipeline failed; tagged with the stage name."""

    def __init__(self, stage, message):
        super().__init__(f"stage {stage}: {message}")
        self.stage = stage


class DialogueTimeout(RuntimeError):
    """The dialogue loop hit its turn limit without producing a plan."""
