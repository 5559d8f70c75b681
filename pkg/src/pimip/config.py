"""Runtime configuration shared by the server and CLI."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path


@dataclass
class PimipConfig:
    data_dir: Path = field(default_factory=lambda: Path("pimip-data"))
    port: int = 8000
    tile_size: int = 254
    overlap: int = 1
    tile_format: str = "png"
    gap_tau_ms: float = 500.0
    gap_delta_px: float = 40.0
    workers: int = 2
    db_url: str | None = None  # None: sqlite file inside data_dir

    def __post_init__(self):
        self.data_dir = Path(self.data_dir)
        if self.tile_size < 1:
            raise ValueError(f"tile_size {self.tile_size}")
        if self.overlap not in (0, 1):
            raise ValueError(f"overlap {self.overlap}")
        if self.gap_tau_ms < 0 or self.gap_delta_px < 0:
            raise ValueError("gap thresholds must be >= 0")
        if self.workers < 1:
            raise ValueError(f"workers {self.workers}")

    @property
    def slides_dir(self) -> Path:
        return self.data_dir / "slides"

    @property
    def database_url(self) -> str:
        if self.db_url:
            return self.db_url
        return f"sqlite:///{self.data_dir / 'pimip.sqlite3'}"
