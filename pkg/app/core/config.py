from pathlib import Path
from typing import Optional

from pydantic import Field
from pydantic_settings import SettingsConfigDict, BaseSettings


class Setting(BaseSettings):
    OUTPUT_ROOT: Path = Field(Path("runs"), alias="nwm_output_root")
    LOG_LEVEL: str = Field("INFO", alias="nwm_log_level")
    LOG_DIR: Path = Field(Path("logs"), alias="nwm_log_dir")
    LOG_TO_FILE: bool = Field(True, alias="nwm_log_to_file")
    TORCH_THREADS: int = Field(1, alias="nwm_torch_threads", ge=1)
    DEFAULT_CHECKPOINT: Optional[Path] = Field(None, alias="nwm_checkpoint")

    model_config = SettingsConfigDict(
        env_file=".env",
        env_file_encoding="utf-8",
        case_sensitive=False,
        extra="ignore",
        populate_by_name=True,
    )


settings = Setting()
