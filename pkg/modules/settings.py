# settings.py
import os
import logging
from functools import lru_cache
from pathlib import Path

from dotenv import load_dotenv, find_dotenv
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator

from modules.errors import ConfigurationError


def _load_project_env() -> str:
    """
    Carga variables desde CAPSULE_ENV_PATH si está definido; si no, usa el .env
    del proyecto. Esto evita depender del directorio desde donde se invoca
    la CLI.
    """
    env_path = os.getenv("CAPSULE_ENV_PATH")
    if env_path and Path(env_path).exists():
        load_dotenv(env_path, override=True)
        return env_path

    local_env = Path(__file__).resolve().parents[1] / ".env"
    if local_env.exists():
        load_dotenv(local_env, override=True)
        return str(local_env)

    found_env = find_dotenv(usecwd=True)
    if found_env:
        load_dotenv(found_env, override=True)
        return found_env

    load_dotenv()
    return ""


class Settings(BaseModel):
    """Parámetros de entorno (rutas, workers, dispositivo, logging)."""

    env_file: str = ""
    data_root: Path = Path("data/synthetic")
    runs_root: Path = Path("runs")
    log_level: str = "INFO"
    num_workers: int = Field(default=0, ge=0)
    device: str = "cpu"
    pixel_spacing_mm: float = Field(default=1.0, gt=0)

    @field_validator("log_level")
    @classmethod
    def _upper_level(cls, v: str) -> str:
        v = v.strip().upper()
        if not isinstance(logging.getLevelName(v), int):
            raise ValueError(f"Nivel de log desconocido: {v}")
        return v


@lru_cache(maxsize=1)
def get_settings() -> Settings:
    dotenv_path = _load_project_env()
    return Settings(
        env_file=dotenv_path,
        data_root=Path(os.getenv("CAPSULE_DATA_ROOT", "data/synthetic")),
        runs_root=Path(os.getenv("CAPSULE_RUNS_ROOT", "runs")),
        log_level=os.getenv("CAPSULE_LOG_LEVEL", "INFO"),
        num_workers=int(os.getenv("CAPSULE_NUM_WORKERS", "0")),
        device=os.getenv("CAPSULE_DEVICE", "cpu"),
        pixel_spacing_mm=float(os.getenv("CAPSULE_PIXEL_SPACING_MM", "1.0")),
    )


def configure_logging(level: str | None = None) -> None:
    """Configuración base de logging (mismo formato en todo el proyecto)."""
    logging.basicConfig(
        level=level or get_settings().log_level,
        format="%(asctime)s - %(levelname)s - %(message)s",
    )
    logging.getLogger("capsule").debug(
        "Usando archivo dotenv en: %s", get_settings().env_file or "variables de entorno del sistema"
    )


class ConfigModel(BaseModel):
    """
    Base de las configuraciones del dominio (pérdidas, modelo, datos,
    entrenamiento). Inmutables; los errores de validación se reportan como
    ConfigurationError.
    """

    model_config = ConfigDict(frozen=True, extra="forbid")

    def __init__(self, **data):
        try:
            super().__init__(**data)
        except ValidationError as exc:
            raise ConfigurationError(f"{type(self).__name__} inválida: {exc}") from exc

    def echo(self, prefix: str = "") -> dict:
        """Pares clave=valor planos para el eco de configuración."""
        out = {}
        for key, value in self.model_dump(mode="json").items():
            out[f"{prefix}{key}"] = value
        return out
