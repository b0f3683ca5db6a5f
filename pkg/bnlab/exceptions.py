"""
Error types raised across the laboratory. All derive from LabError so the CLI
can map them to exit codes in one place.
"""
from typing import List, Optional


class LabError(Exception):
    """Base class for every error raised by bnlab."""


class StructuralError(LabError, ValueError):
    """Shapes, parameter trees or caches do not line up."""


class DegenerateBatchError(LabError, ValueError):
    """Training-mode batch statistics need at least two samples."""


class ConfigError(LabError, ValueError):
    def __init__(self, message: str, field: Optional[str] = None, line: Optional[int] = None):
        self.field = field
        self.line = line
        where = []
        if field:
            where.append(f"field '{field}'")
        if line is not None:
            where.append(f"line {line}")
        super().__init__(f"{message} ({', '.join(where)})" if where else message)


class DivergenceError(LabError, ArithmeticError):
    def __init__(self, message: str, step: int, client_id: Optional[int] = None,
                 global_step: Optional[int] = None):
        self.step = step
        self.client_id = client_id
        self.global_step = global_step
        super().__init__(message)

    def with_context(self, client_id: int, global_step: int) -> "DivergenceError":
        return DivergenceError(
            f"client {client_id} diverged at global step {global_step}, local step {self.step}",
            step=self.step,
            client_id=client_id,
            global_step=global_step,
        )


class FormatError(LabError, ValueError):
    def __init__(self, message: str, offset: int):
        self.offset = offset
        super().__init__(f"{message} (byte offset {offset})")


class GateFailure(LabError):
    def __init__(self, failed: List[str]):
        self.failed = list(failed)
        super().__init__("oracle gates failed: " + ", ".join(self.failed))
