from pathlib import Path
from typing import Literal

from pydantic_settings import BaseSettings, SettingsConfigDict

BASE_DIR = Path(__file__).resolve().parent
REFERENCE_TABLE = BASE_DIR / "data" / "table_reference.csv"

# Все пути, кроме обучения, считаются в 64 битах
VERIFICATION_DTYPE = "float64"


class Settings(BaseSettings):
    train_precision: Literal["float32", "float64"] = "float32"
    log_level: str = "INFO"
    reference_table: Path = REFERENCE_TABLE
    seed: int = 0
    gradcheck_eps: float = 1e-3
    gradcheck_coords: int = 64
    model_config = SettingsConfigDict(
        env_prefix="BA_",
        env_file=".env",
        env_file_encoding="utf-8",
        extra="ignore"
    )

config = Settings()
