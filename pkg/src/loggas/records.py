"""Time-stamped diagnostic records shared by the estimate checks and the experiment runner."""
from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Optional


@dataclass
class DiagnosticsRecord:
    time: float
    values: dict = field(default_factory=dict)      # functional name -> value
    errors: dict = field(default_factory=dict)      # functional name -> error bar
    n_particles: Optional[int] = None
    config_hash: str = ""
    seed: Optional[int] = None
    code_version: str = ""

    def to_dict(self) -> dict:
        return asdict(self)
