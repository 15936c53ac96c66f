# errors.py
"""
Jerarquía de excepciones del laboratorio.

Todas heredan de CapsuleError para que la CLI pueda distinguir fallas
propias (mensaje limpio + código de salida) de errores inesperados.
"""
from __future__ import annotations

from typing import Any, Dict, Optional


class CapsuleError(Exception):
    """Base de todos los errores del proyecto."""


class InvalidInputError(CapsuleError, ValueError):
    """Tensores, máscaras o archivos de entrada inválidos."""


class ConfigurationError(CapsuleError, ValueError):
    """Configuración inconsistente (tamaños, escalas, pesos, nombres)."""


class UndefinedMetricError(CapsuleError, ValueError):
    """HD / HD95 sobre una máscara vacía: se informa como faltante, no como cero."""


class TrainingDivergedError(CapsuleError, RuntimeError):
    """Pérdida o gradientes no finitos durante el entrenamiento."""

    def __init__(
        self,
        message: str,
        epoch: Optional[int] = None,
        batch: Optional[int] = None,
        breakdown: Optional[Dict[str, Any]] = None,
    ):
        super().__init__(message)
        self.epoch = epoch
        self.batch = batch
        self.breakdown = breakdown or {}

    def __str__(self) -> str:
        base = super().__str__()
        extra = []
        if self.epoch is not None:
            extra.append(f"epoch={self.epoch}")
        if self.batch is not None:
            extra.append(f"batch={self.batch}")
        if self.breakdown:
            extra.append("breakdown=" + ", ".join(f"{k}={v}" for k, v in self.breakdown.items()))
        return f"{base} ({'; '.join(extra)})" if extra else base
