class VMDNNError(Exception):
    """Base class for all package errors."""


class ConfigError(VMDNNError):
    pass


class InputError(VMDNNError, ValueError):
    pass


class StateError(VMDNNError):
    pass


class NumericalDivergence(VMDNNError, FloatingPointError):
    def __init__(self, level: str, step: int, detail: str = ""):
        self.level = level
        self.step = step
        msg = f"non-finite potential in level {level} at step {step}"
        super().__init__(msg + (f": {detail}" if detail else ""))


class CheckpointError(VMDNNError):
    pass
