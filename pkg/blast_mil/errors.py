from __future__ import annotations

from typing import Optional


class Fatal(Exception):
    def __init__(
        self, message: str, returncode: int = 1, extended: Optional[str] = None
    ):
        super().__init__(message)
        self.returncode = returncode
        self.extended = extended


class ManifestError(Fatal):
    def __init__(
        self,
        message: str,
        record_index: Optional[int] = None,
        extended: Optional[str] = None,
    ):
        if record_index is not None:
            message = f'record {record_index}: {message}'
        super().__init__(message, extended=extended)
        self.record_index = record_index


class CheckpointError(Fatal):
    pass


class DivergenceError(Fatal):
    def __init__(self, message: str, epoch: int, step: Optional[int] = None):
        where = f'epoch {epoch}' if step is None else f'epoch {epoch}, step {step}'
        super().__init__(f'{message} ({where})')
        self.epoch = epoch
        self.step = step


class PoolExhausted(Fatal):
    pass


class InfeasibleConfig(Fatal):
    pass


class DimensionMismatch(Fatal):
    pass
