from pydantic_settings import BaseSettings
import torch

class Settings(BaseSettings):
    # Logging
    LOG_LEVEL: str = "INFO"
    SHOW_PROGRESS: bool = False

    # Output
    OUTPUT_DIR: str = "runs"
    CHECKPOINT_FORMAT_VERSION: int = 1

    # Numerics
    NUM_THREADS: int = 0  # 0 keeps the torch default
    DETERMINISTIC: bool = True

    class Config:
        env_file = ".env"

settings = Settings()

# Every tolerance in the toolkit assumes double precision
torch.set_default_dtype(torch.float64)

if settings.NUM_THREADS > 0:
    torch.set_num_threads(settings.NUM_THREADS)

if settings.DETERMINISTIC:
    torch.use_deterministic_algorithms(True)
