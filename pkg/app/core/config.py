from typing import Optional
from pydantic import field_validator
from pydantic_settings import BaseSettings


class Settings(BaseSettings):
    PROJECT_NAME: str = "OrePanel"

    # Worker pool size for per-tile / per-specification parallelism
    OREPANEL_THREADS: int = 1

    LOG_LEVEL: str = "INFO"
    LOGGING_CONFIG: Optional[str] = "logging.ini"

    # Float rendering for every CSV artifact; fixed so reruns stay byte-identical
    FLOAT_FORMAT: str = "%.12g"
    MISSING_MARKER: str = "NA"

    @field_validator("OREPANEL_THREADS", mode="before")
    @classmethod
    def clamp_threads(cls, v) -> int:
        if v in (None, ""):
            return 1
        v = int(v)
        if v < 1:
            raise ValueError("OREPANEL_THREADS must be >= 1")
        return v

    @field_validator("LOG_LEVEL")
    @classmethod
    def upper_level(cls, v: str) -> str:
        return v.upper()

    class Config:
        case_sensitive = True
        env_file = ".env"
        extra = "ignore"


settings = Settings()
