"""Run-wide configuration shared by the CLI and the library entry
points."""

from __future__ import annotations

from dataclasses import dataclass

from .store import BACKEND_EXTERNAL, BACKENDS, SCOPE_GLOBAL, SCOPES
from .tables import DEFAULT_PAGE_SIZE, BufferBudget


@dataclass
class RunConfig:
    table_buffer: int = 128 * 2**20
    store_buffer: int = 128 * 2**20
    page_size: int = DEFAULT_PAGE_SIZE
    scope: str = SCOPE_GLOBAL
    backend: str = BACKEND_EXTERNAL
    early_stop: bool = True
    theta: float = 0.5
    scratch_dir: str | None = None
    stats_path: str | None = None

    def __post_init__(self) -> None:
        if self.scope not in SCOPES:
            raise ValueError(f"unknown scope: {self.scope}")
        if self.backend not in BACKENDS:
            raise ValueError(f"unknown backend: {self.backend}")
        if not (0.0 < self.theta <= 1.0):
            raise ValueError("theta must be in (0, 1]")

    def table_budget(self) -> BufferBudget:
        return BufferBudget(
            table_bytes=self.table_buffer,
            page_size=self.page_size,
            scratch_dir=self.scratch_dir,
        )
