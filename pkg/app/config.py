"""
Configuration settings for the quantization tree pricer.
"""
import os
from pathlib import Path

from dotenv import load_dotenv

load_dotenv()

# Base directory of the project
BASE_DIR = Path(__file__).resolve().parent.parent


def _env_bool(name: str, default: str) -> bool:
    return os.getenv(name, default).lower() in ("true", "1", "t")


class Config:
    """Configuration class for the application."""

    # Application settings
    APP_NAME: str = os.getenv("APP_NAME", "Quantization Tree Pricer")
    DEBUG: bool = _env_bool("DEBUG", "False")

    # Logging settings
    LOG_LEVEL: str = os.getenv("LOG_LEVEL", "INFO")
    LOG_FORMAT: str = os.getenv("LOG_FORMAT", "%(asctime)s - %(name)s - %(levelname)s - %(message)s")
    LOG_DIR: Path = Path(os.getenv("QTREE_LOG_DIR", str(BASE_DIR / "logs")))
    SHOW_PROGRESS: bool = _env_bool("QTREE_SHOW_PROGRESS", "False")

    # Data directory settings
    DATA_DIR: Path = Path(os.getenv("QTREE_DATA_DIR", str(BASE_DIR / "data")))
    GRID_CACHE_DIR: Path = Path(os.getenv("QTREE_GRID_CACHE_DIR", str(DATA_DIR / "grids")))

    # Quadrature orders for the transition integrals
    QUAD_LEGENDRE: int = int(os.getenv("QTREE_QUAD_LEGENDRE", "64"))
    QUAD_LAGUERRE: int = int(os.getenv("QTREE_QUAD_LAGUERRE", "32"))

    # Quantizer optimization
    LLOYD_TOL: float = float(os.getenv("QTREE_LLOYD_TOL", "1e-10"))
    LLOYD_MAX_ITER: int = int(os.getenv("QTREE_LLOYD_MAX_ITER", "500"))
    ANDERSON_MEMORY: int = int(os.getenv("QTREE_ANDERSON_MEMORY", "20"))
    GREEDY_MAX_ITER: int = int(os.getenv("QTREE_GREEDY_MAX_ITER", "100"))
    KMEANS_MAX_ITER: int = int(os.getenv("QTREE_KMEANS_MAX_ITER", "500"))
    NORMAL_SAMPLE_SIZE: int = int(os.getenv("QTREE_NORMAL_SAMPLE_SIZE", "1000000"))

    # Monte Carlo companion parameters
    MC_PATHS: int = int(os.getenv("QTREE_MC_PATHS", "100000"))
    MC_NOISE_PATHS: int = int(os.getenv("QTREE_MC_NOISE_PATHS", "1000000"))
    MC_CHUNK_SIZE: int = int(os.getenv("QTREE_MC_CHUNK_SIZE", "200000"))
    DEFAULT_SEED: int = int(os.getenv("QTREE_SEED", "0"))

    # Parallelism over independent harness cells
    THREADS: int = int(os.getenv("QTREE_THREADS", "1"))

    @classmethod
    def create_directories(cls) -> None:
        """Create necessary directories if they don't exist."""
        cls.LOG_DIR.mkdir(parents=True, exist_ok=True)
        cls.GRID_CACHE_DIR.mkdir(parents=True, exist_ok=True)


# Create an instance of the config
config = Config()
