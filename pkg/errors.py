# errors.py
from typing import Optional


class MimError(Exception):
    """Base error. `category` is the machine-readable tag printed by the CLI."""

    category = "internal"
    exit_code = 1

    def one_line(self) -> str:
        msg = " ".join(str(self).split())
        return f"error category={self.category} message={msg}"


class ShapeError(MimError, ValueError):
    category = "shape"
    exit_code = 6

    def __init__(self, op: str, detail: str):
        self.op = op
        super().__init__(f"{op}: {detail}")


class DomainError(MimError, ValueError):
    category = "domain"
    exit_code = 7


class SamplingError(MimError, ValueError):
    category = "sampling"
    exit_code = 7


class VariantError(MimError, ValueError):
    category = "variant"
    exit_code = 7


class ConfigError(MimError, ValueError):
    category = "config"
    exit_code = 2


class DatasetFormatError(MimError, ValueError):
    category = "dataset-format"
    exit_code = 3

    def __init__(self, message: str, offset: Optional[int] = None):
        self.offset = offset
        if offset is not None:
            message = f"{message} (byte offset {offset})"
        super().__init__(message)


class CheckpointError(MimError):
    category = "checkpoint"
    exit_code = 4


class NonFiniteLossError(MimError):
    category = "non-finite"
    exit_code = 5

    def __init__(self, tensor_name: str, where: str = ""):
        self.tensor_name = tensor_name
        suffix = f" at {where}" if where else ""
        super().__init__(f"first non-finite tensor is '{tensor_name}'{suffix}")


class CheckFailedError(MimError):
    """A verification command (gradient check, MI oracle) found a mismatch."""

    category = "check-failed"
    exit_code = 8
