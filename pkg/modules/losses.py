# losses.py
# -*- coding: utf-8 -*-
"""
Funciones de pérdida para la segmentación binaria de la cápsula prostática.

- focal_loss_map / standard_focal_loss: focal loss con β, γ_f y ε fijos.
- adaptive_focal_loss: focal adaptativa. Las regiones difíciles (XOR entre
  la máscara experta y la no experta, dilatado) pesan γ_a y el resto 1/γ_a,
  con γ_a = dificultad de la muestra + variabilidad de anotación.
- ag_bce_loss: BCE guiada por anotaciones, con pesos fijos por región.
- dice_loss: término Dice opcional para el modo combinado.

Todas las funciones son puras: no guardan estado y se pueden invocar desde
varios workers en paralelo.
"""
from __future__ import annotations

from dataclasses import dataclass
from enum import Enum
from typing import Optional, Tuple

import torch
import torch.nn.functional as F
from pydantic import Field, model_validator

from modules.errors import ConfigurationError, InvalidInputError
from modules.settings import ConfigModel


class VariabilityMode(str, Enum):
    LITERAL = "literal"            # mean(máscara no experta)
    DISAGREEMENT = "disagreement"  # mean(experta XOR no experta)


class LossKind(str, Enum):
    ADAPTIVE_FOCAL = "adaptive_focal"
    STANDARD_FOCAL = "standard_focal"
    AG_BCE = "ag_bce"


class LossConfig(ConfigModel):
    """Hiperparámetros de todas las pérdidas."""

    beta: float = Field(default=1.0, gt=0)
    gamma_f: float = Field(default=2.0, ge=0)
    epsilon: float = Field(default=1e-7, gt=0, lt=1e-3)
    kernel_size: int = Field(default=5, ge=1)
    gamma_min: float = Field(default=0.05, gt=0)
    gamma_max: float = Field(default=2.0, gt=0)
    variability_mode: VariabilityMode = VariabilityMode.LITERAL
    hard_weight: float = Field(default=4.0, gt=0)
    easy_weight: float = Field(default=1.0, gt=0)
    dice_smooth: float = Field(default=1.0, ge=0)

    @model_validator(mode="after")
    def _check_bounds(self) -> "LossConfig":
        if self.kernel_size % 2 == 0:
            raise ValueError(f"kernel_size debe ser impar (recibido {self.kernel_size})")
        if self.gamma_min > self.gamma_max:
            raise ValueError(f"gamma_min ({self.gamma_min}) > gamma_max ({self.gamma_max})")
        return self


@dataclass(frozen=True)
class AdaptiveLossBreakdown:
    """Cantidades intermedias de la focal adaptativa para una muestra."""

    hard_map: torch.Tensor
    easy_map: torch.Tensor
    hard_loss: float
    easy_loss: float
    sample_difficulty: float
    annotation_variability: float
    gamma_a: float
    n_pixels: int
    total: float

    def recompute_total(self) -> float:
        return (self.gamma_a * self.hard_loss + (1.0 / self.gamma_a) * self.easy_loss) / self.n_pixels

    def as_dict(self) -> dict:
        return {
            "hard_loss": self.hard_loss,
            "easy_loss": self.easy_loss,
            "sample_difficulty": self.sample_difficulty,
            "annotation_variability": self.annotation_variability,
            "gamma_a": self.gamma_a,
            "n_pixels": self.n_pixels,
            "total": self.total,
        }


# ==============================
# Validaciones de entrada
# ==============================

def _check_finite(t: torch.Tensor, name: str) -> None:
    if not torch.isfinite(t).all():
        raise InvalidInputError(f"{name} contiene valores no finitos")


def _check_same_shape(a: torch.Tensor, b: torch.Tensor, names: str) -> None:
    if a.shape != b.shape:
        raise InvalidInputError(f"Formas distintas en {names}: {tuple(a.shape)} vs {tuple(b.shape)}")


def _check_binary(t: torch.Tensor, name: str) -> None:
    if not ((t == 0) | (t == 1)).all():
        raise InvalidInputError(f"{name} debe ser binaria (valores 0/1)")


def _check_nonempty(t: torch.Tensor, name: str) -> None:
    if t.numel() == 0:
        raise InvalidInputError(f"{name} está vacío")


def _validate_annotated(logits: torch.Tensor, expert_mask: torch.Tensor, nonexpert_mask: torch.Tensor) -> None:
    _check_nonempty(logits, "logits")
    _check_finite(logits, "logits")
    _check_same_shape(logits, expert_mask, "logits/expert_mask")
    _check_same_shape(expert_mask, nonexpert_mask, "expert_mask/nonexpert_mask")
    _check_binary(expert_mask, "expert_mask")
    _check_binary(nonexpert_mask, "nonexpert_mask")


# ==============================
# Bloques elementales
# ==============================

def logistic_probabilities(logits: torch.Tensor) -> torch.Tensor:
    """Sigmoide elemento a elemento. En punto flotante satura cerca de 0 y 1."""
    _check_finite(logits, "logits")
    return torch.sigmoid(logits)


def focal_loss_map(probs: torch.Tensor, targets: torch.Tensor, cfg: LossConfig) -> torch.Tensor:
    """
    Mapa por píxel de la focal loss, sin reducir:
        p_t = p·y + (1 − p)·(1 − y)
        FL  = −β·(1 − p_t)^γ_f·log(p_t + ε)
    """
    _check_same_shape(probs, targets, "probs/targets")
    targets = targets.to(probs.dtype)
    p_t = probs * targets + (1.0 - probs) * (1.0 - targets)
    return -cfg.beta * (1.0 - p_t).pow(cfg.gamma_f) * torch.log(p_t + cfg.epsilon)


def hard_region_map(expert_mask: torch.Tensor, nonexpert_mask: torch.Tensor, kernel_size: int) -> torch.Tensor:
    """
    Regiones difíciles: dilatación de (experta XOR no experta) con un elemento
    estructurante cuadrado de lado kernel_size y relleno cero en los bordes.

    Acepta (H, W), (C, H, W) o (B, C, H, W); devuelve la misma forma.
    """
    _check_same_shape(expert_mask, nonexpert_mask, "expert_mask/nonexpert_mask")
    _check_binary(expert_mask, "expert_mask")
    _check_binary(nonexpert_mask, "nonexpert_mask")
    if kernel_size < 1 or kernel_size % 2 == 0:
        raise ConfigurationError(f"kernel_size debe ser impar y >= 1 (recibido {kernel_size})")
    if expert_mask.ndim < 2:
        raise InvalidInputError("Las máscaras deben tener al menos 2 dimensiones (H, W)")

    dtype = expert_mask.dtype if expert_mask.is_floating_point() else torch.get_default_dtype()
    shape = expert_mask.shape
    hard = (expert_mask != nonexpert_mask).to(dtype)
    if kernel_size == 1:
        return hard
    # max_pool rellena con -inf, que para mapas binarios equivale a relleno cero
    flat = hard.reshape(-1, 1, shape[-2], shape[-1])
    dilated = F.max_pool2d(flat, kernel_size=kernel_size, stride=1, padding=kernel_size // 2)
    return dilated.reshape(shape)


def sample_difficulty(probs: torch.Tensor) -> float:
    """1 − mean(probabilidades). Se calcula sobre la salida de la sigmoide."""
    _check_nonempty(probs, "probs")
    return float(1.0 - probs.detach().mean())


def annotation_variability(
    nonexpert_mask: torch.Tensor,
    expert_mask: torch.Tensor,
    mode: VariabilityMode = VariabilityMode.LITERAL,
) -> float:
    _check_nonempty(nonexpert_mask, "nonexpert_mask")
    _check_same_shape(nonexpert_mask, expert_mask, "nonexpert_mask/expert_mask")
    mode = VariabilityMode(mode)
    if mode is VariabilityMode.LITERAL:
        return float(nonexpert_mask.double().mean())
    return float((nonexpert_mask != expert_mask).double().mean())


def adaptive_gamma(difficulty: float, variability: float, cfg: LossConfig) -> float:
    """γ_a = clamp(dificultad + variabilidad, gamma_min, gamma_max); 1/γ_a siempre finito."""
    for name, value in (("difficulty", difficulty), ("variability", variability)):
        if not 0.0 <= value <= 1.0:
            raise InvalidInputError(f"{name} fuera de [0, 1]: {value}")
    return min(max(difficulty + variability, cfg.gamma_min), cfg.gamma_max)


# ==============================
# Focal adaptativa
# ==============================

def adaptive_focal_loss(
    logits: torch.Tensor,
    expert_mask: torch.Tensor,
    nonexpert_mask: torch.Tensor,
    cfg: LossConfig,
    fixed_gamma: Optional[float] = None,
) -> Tuple[torch.Tensor, AdaptiveLossBreakdown]:
    """
    Focal adaptativa de una muestra (H, W) o (C, H, W).

    γ_a se trata como constante en el backward: la dificultad se calcula sobre
    probabilidades desacopladas del grafo. `fixed_gamma` fuerza γ_a.
    """
    _validate_annotated(logits, expert_mask, nonexpert_mask)

    n_pixels = logits.numel()
    hard = hard_region_map(expert_mask, nonexpert_mask, cfg.kernel_size).to(logits.dtype)
    easy = 1.0 - hard

    probs = logistic_probabilities(logits)
    focal = focal_loss_map(probs, expert_mask, cfg)
    hard_loss = (focal * hard).sum()
    easy_loss = (focal * easy).sum()

    difficulty = sample_difficulty(probs)
    variability = annotation_variability(nonexpert_mask, expert_mask, cfg.variability_mode)
    if fixed_gamma is None:
        gamma_a = adaptive_gamma(difficulty, variability, cfg)
    else:
        if fixed_gamma <= 0:
            raise ConfigurationError(f"fixed_gamma debe ser > 0 (recibido {fixed_gamma})")
        gamma_a = float(fixed_gamma)

    total = (gamma_a * hard_loss + (1.0 / gamma_a) * easy_loss) / n_pixels

    breakdown = AdaptiveLossBreakdown(
        hard_map=hard.detach(),
        easy_map=easy.detach(),
        hard_loss=float(hard_loss.detach()),
        easy_loss=float(easy_loss.detach()),
        sample_difficulty=difficulty,
        annotation_variability=variability,
        gamma_a=gamma_a,
        n_pixels=n_pixels,
        total=float(total.detach()),
    )
    return total, breakdown


def adaptive_focal_loss_batch(
    logits: torch.Tensor,
    expert_mask: torch.Tensor,
    nonexpert_mask: torch.Tensor,
    cfg: LossConfig,
    fixed_gamma: Optional[float] = None,
) -> torch.Tensor:
    """
    Versión vectorizada sobre (B, C, H, W): γ_a por muestra y promedio de los
    totales por muestra. Coincide con promediar adaptive_focal_loss muestra a
    muestra.
    """
    if logits.ndim != 4:
        raise InvalidInputError(f"Se esperaba (B, C, H, W); recibido {tuple(logits.shape)}")
    _validate_annotated(logits, expert_mask, nonexpert_mask)

    dims = (1, 2, 3)
    n_pixels = logits[0].numel()
    hard = hard_region_map(expert_mask, nonexpert_mask, cfg.kernel_size).to(logits.dtype)
    easy = 1.0 - hard

    probs = logistic_probabilities(logits)
    focal = focal_loss_map(probs, expert_mask, cfg)
    hard_loss = (focal * hard).sum(dim=dims)
    easy_loss = (focal * easy).sum(dim=dims)

    if fixed_gamma is None:
        difficulty = 1.0 - probs.detach().mean(dim=dims)
        if VariabilityMode(cfg.variability_mode) is VariabilityMode.LITERAL:
            variability = nonexpert_mask.to(logits.dtype).mean(dim=dims)
        else:
            variability = (nonexpert_mask != expert_mask).to(logits.dtype).mean(dim=dims)
        gamma_a = (difficulty + variability).clamp(cfg.gamma_min, cfg.gamma_max)
    else:
        if fixed_gamma <= 0:
            raise ConfigurationError(f"fixed_gamma debe ser > 0 (recibido {fixed_gamma})")
        gamma_a = torch.full_like(hard_loss, float(fixed_gamma))

    totals = (gamma_a * hard_loss + (1.0 / gamma_a) * easy_loss) / n_pixels
    return totals.mean()


# ==============================
# Baselines y término Dice
# ==============================

def standard_focal_loss(logits: torch.Tensor, targets: torch.Tensor, cfg: LossConfig) -> torch.Tensor:
    """Focal loss de γ fijo promediada sobre todos los píxeles."""
    _check_nonempty(logits, "logits")
    return focal_loss_map(logistic_probabilities(logits), targets, cfg).mean()


def ag_bce_loss(
    logits: torch.Tensor,
    expert_mask: torch.Tensor,
    nonexpert_mask: torch.Tensor,
    cfg: LossConfig,
) -> torch.Tensor:
    """
    BCE contra la máscara experta con pesos fijos por región:
        (hard_weight·Σ_hard BCE + easy_weight·Σ_easy BCE) / N_pixels
    """
    _validate_annotated(logits, expert_mask, nonexpert_mask)
    hard = hard_region_map(expert_mask, nonexpert_mask, cfg.kernel_size).to(logits.dtype)
    bce = F.binary_cross_entropy_with_logits(logits, expert_mask.to(logits.dtype), reduction="none")
    weighted = cfg.hard_weight * (bce * hard).sum() + cfg.easy_weight * (bce * (1.0 - hard)).sum()
    return weighted / logits.numel()


def dice_loss(probs: torch.Tensor, targets: torch.Tensor, smooth: float = 1.0) -> torch.Tensor:
    _check_same_shape(probs, targets, "probs/targets")
    targets = targets.to(probs.dtype)
    inter = (probs * targets).sum()
    return 1.0 - (2.0 * inter + smooth) / (probs.sum() + targets.sum() + smooth)


def compute_loss(
    kind: LossKind,
    logits: torch.Tensor,
    expert_mask: torch.Tensor,
    nonexpert_mask: torch.Tensor,
    cfg: LossConfig,
) -> torch.Tensor:
    """Selector de pérdida usado por la supervisión multiescala."""
    kind = LossKind(kind)
    if kind is LossKind.ADAPTIVE_FOCAL:
        if logits.ndim == 4:
            return adaptive_focal_loss_batch(logits, expert_mask, nonexpert_mask, cfg)
        return adaptive_focal_loss(logits, expert_mask, nonexpert_mask, cfg)[0]
    if kind is LossKind.STANDARD_FOCAL:
        _check_finite(logits, "logits")
        return standard_focal_loss(logits, expert_mask, cfg)
    return ag_bce_loss(logits, expert_mask, nonexpert_mask, cfg)
