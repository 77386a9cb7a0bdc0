class DDPMError(Exception):
    """Base class for every error raised by this package."""


class ConfigError(DDPMError, ValueError):
    pass


class InvalidScheduleError(DDPMError, ValueError):
    def __init__(self, message, t=None):
        super().__init__(message if t is None else f"{message} (level t={t})")
        self.t = t


class LevelOutOfRangeError(DDPMError, IndexError):
    def __init__(self, t, low, high):
        super().__init__(f"Level t={t} outside [{low}, {high}]")
        self.t = t


class ShapeMismatchError(DDPMError, ValueError):
    pass


class ModeMismatchError(DDPMError, ValueError):
    pass


class UnsupportedSpecError(DDPMError, ValueError):
    pass


class NonFiniteError(DDPMError, FloatingPointError):
    def __init__(self, message, level=None):
        super().__init__(message if level is None else f"{message} at level {level}")
        self.level = level


class TrainingDivergenceError(DDPMError):
    def __init__(self, step, value):
        super().__init__(f"Non-finite loss {value} at step {step}")
        self.step = step
        self.value = value


class MissingArtifactError(DDPMError, FileNotFoundError):
    pass
