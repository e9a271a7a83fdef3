"""Exception types shared across the package."""


class MgpRnnError(Exception):
    pass


class ParseError(MgpRnnError, ValueError):
    def __init__(self, line: int, message: str):
        self.line = line
        super().__init__(f"line {line}: {message}")


class ValidationError(MgpRnnError, ValueError):
    def __init__(self, encounter_id: str, field: str, message: str):
        self.encounter_id = encounter_id
        self.field = field
        super().__init__(f"encounter {encounter_id!r}, field {field!r}: {message}")


class ConfigError(MgpRnnError, ValueError):
    pass


class InsufficientControlsError(MgpRnnError, ValueError):
    def __init__(self, required: int, available: int):
        self.required = required
        self.available = available
        super().__init__(f"matching needs {required} controls but only {available} available")


class DimensionError(MgpRnnError, ValueError):
    pass


class NumericalError(MgpRnnError, ArithmeticError):
    pass


class CheckpointError(MgpRnnError, ValueError):
    pass


class UndefinedMetricError(MgpRnnError, ValueError):
    pass
