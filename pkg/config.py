"""
Configuration module for the local-dependence Berry-Esseen toolkit.
Loads runtime settings from environment variables with sensible defaults.
"""

import os
from dotenv import load_dotenv
from dataclasses import dataclass

load_dotenv()


@dataclass
class Config:
    """Runtime configuration shared by every module."""

    # Identity
    project_name: str = "stein-local-bounds"
    version: str = "1.0.0"
    schema_version: int = 1

    # ==========================================================================
    # MONTE CARLO ENGINE
    # ==========================================================================
    threads: int = 1                   # Worker threads for replicate blocks
    chunk_size: int = 512              # Replicates per seeded block
    exact_max_outcomes: int = 2 ** 20  # Switch to exact enumeration at or below this
    use_w_fast_path: bool = True       # Draw W directly when its law is closed-form

    # ==========================================================================
    # ESTIMATION
    # ==========================================================================
    delta: float = 1e-3                # DKW confidence parameter
    pilot_samples: int = 10 ** 6       # Pilot run for models without covariance oracle
    sigma_mc_samples: int = 10 ** 6    # MC fallback for sigma_i when no oracle
    r1_phase1_fraction: float = 0.25   # Share of the budget estimating E X_i Y_i

    # ==========================================================================
    # OUTPUT
    # ==========================================================================
    out_dir: str = "out"
    logs_dir: str = "logs"
    db_path: str = "data/runs.db"
    log_level: str = "INFO"

    def __post_init__(self):
        """Parse environment variables."""
        self.threads = int(os.getenv("BE_THREADS", str(self.threads)))
        self.chunk_size = int(os.getenv("BE_CHUNK_SIZE", str(self.chunk_size)))
        self.exact_max_outcomes = int(os.getenv("BE_EXACT_MAX_OUTCOMES", str(self.exact_max_outcomes)))
        self.use_w_fast_path = os.getenv("BE_W_FAST_PATH", "true").lower() == "true"
        self.delta = float(os.getenv("BE_DELTA", str(self.delta)))
        self.pilot_samples = int(os.getenv("BE_PILOT_SAMPLES", str(self.pilot_samples)))
        self.sigma_mc_samples = int(os.getenv("BE_SIGMA_MC_SAMPLES", str(self.sigma_mc_samples)))
        self.r1_phase1_fraction = float(os.getenv("BE_R1_PHASE1_FRACTION", str(self.r1_phase1_fraction)))
        self.out_dir = os.getenv("BE_OUT_DIR", self.out_dir)
        self.logs_dir = os.getenv("BE_LOGS_DIR", self.logs_dir)
        self.db_path = os.getenv("BE_DB_PATH", self.db_path)
        self.log_level = os.getenv("BE_LOG_LEVEL", self.log_level).upper()

        if self.threads < 1:
            self.threads = 1
        if self.chunk_size < 1:
            self.chunk_size = 1

    @property
    def software_version(self) -> str:
        """Version string embedded in reports."""
        return f"{self.project_name} {self.version}"


# Global config instance
config = Config()
