from pydantic_settings import BaseSettings, SettingsConfigDict
from typing import Literal

class Settings(BaseSettings):
    # Service surface settings
    app_host: str = "0.0.0.0"
    app_port: int = 8000
    debug: bool = False

    # Numerics
    precision: Literal["float32", "float64"] = "float32"
    noise_eps: float = 1e-3  # lower bound on every predicted noise variance

    # Run output and workers
    out_dir: str = "runs"
    threads: int = 4

    # Optimizer defaults
    learning_rate: float = 1e-4
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8

    # Batching: steps x batch is held constant relative to this chunk length
    batch_size: int = 32
    reference_seq_len: int = 10

    model_config = SettingsConfigDict(
        env_file=".env",
        env_prefix="DFKIT_",
        case_sensitive=False,
        extra="ignore",
    )

settings = Settings()
