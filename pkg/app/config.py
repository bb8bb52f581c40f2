import os
from functools import lru_cache
from pathlib import Path
from typing import Optional

from pydantic_settings import BaseSettings, SettingsConfigDict


class Settings(BaseSettings):
    """Engine settings loaded from environment variables (prefix MDRO_)."""

    model_config = SettingsConfigDict(
        env_file=".env",
        env_file_encoding="utf-8",
        env_prefix="MDRO_",
        case_sensitive=False,
    )

    # Application
    app_name: str = "MDRO Water Engine"
    debug: bool = False
    api_v1_prefix: str = "/api/v1"

    # Output
    output_dir: Path = Path("results")

    # Solver defaults
    tol: float = 1e-3
    secondary_tol: Optional[float] = None
    epsilon: float = 1e-3
    lambda_min: float = 1e-5
    max_iter: int = 500
    stall_iterations: int = 200
    threads: int = 0  # 0 = available cores
    seed: int = 20180101
    lp_backend: str = "bundled"

    # Cut handling
    max_cuts_per_node: int = 100_000
    cut_slope_cap: float = 1e3

    # Size caps
    max_tree_nodes: int = 1_000_000
    extensive_node_cap: int = 10_000

    # LP tolerances
    lp_feasibility_tol: float = 1e-9
    lp_pivot_tol: float = 1e-10

    @property
    def resolved_threads(self) -> int:
        if self.threads > 0:
            return self.threads
        return os.cpu_count() or 1


@lru_cache
def get_settings() -> Settings:
    """Get cached settings instance."""
    return Settings()
