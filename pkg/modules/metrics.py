# metrics.py
# -*- coding: utf-8 -*-
"""
Métricas de evaluación por corte 2D: DSC, distancia de Hausdorff y HD95 en
milímetros, y la agregación por caso (una fila por paciente).

Convenciones:
- Ambas máscaras vacías -> DSC 1.0; una sola vacía -> DSC 0.0 y HD indefinida.
- Borde con conectividad 4; coordenadas en mm según el espaciado (dy, dx).
- HD95: percentil 95 con interpolación lineal sobre las distancias dirigidas
  de ambos sentidos, concatenadas.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, asdict
from typing import List, Sequence, Tuple

import numpy as np
from scipy import ndimage
from scipy.spatial import cKDTree

from modules.errors import InvalidInputError, UndefinedMetricError

Spacing = Tuple[float, float]

# Vecindad 4 para erosionar y obtener el borde
_CROSS = ndimage.generate_binary_structure(2, 1)


@dataclass(frozen=True)
class CaseMetrics:
    case_id: str
    mean_dice: float
    mean_hd95: float          # NaN si ningún corte tiene HD95 definida
    slice_count: int
    hd95_undefined: int = 0   # cortes excluidos del promedio de HD95

    def as_row(self) -> dict:
        return asdict(self)


def _as_binary(mask, name: str) -> np.ndarray:
    arr = np.asarray(mask)
    if arr.ndim != 2:
        raise InvalidInputError(f"{name} debe ser una grilla 2D; forma {arr.shape}")
    if not np.isin(arr, (0, 1)).all():
        raise InvalidInputError(f"{name} debe ser binaria")
    return arr.astype(bool)


def _check_pair(g, p) -> Tuple[np.ndarray, np.ndarray]:
    g = _as_binary(g, "g")
    p = _as_binary(p, "p")
    if g.shape != p.shape:
        raise InvalidInputError(f"Formas distintas: {g.shape} vs {p.shape}")
    return g, p


def dice_coefficient(g, p) -> float:
    g, p = _check_pair(g, p)
    total = int(g.sum()) + int(p.sum())
    if total == 0:
        return 1.0
    inter = int(np.logical_and(g, p).sum())
    return 2.0 * inter / total


def boundary_points(mask, spacing: Spacing = (1.0, 1.0)) -> np.ndarray:
    """
    Centros (en mm) de los píxeles de primer plano con al menos un vecino 4
    de fondo o fuera de la imagen. Devuelve un arreglo (K, 2) en orden (y, x).
    """
    m = _as_binary(mask, "mask")
    eroded = ndimage.binary_erosion(m, structure=_CROSS, border_value=0)
    border = m & ~eroded
    coords = np.argwhere(border).astype(np.float64)
    return coords * np.asarray(spacing, dtype=np.float64)


def _directed_distances(g, p, spacing: Spacing) -> Tuple[np.ndarray, np.ndarray]:
    g, p = _check_pair(g, p)
    if not g.any() or not p.any():
        raise UndefinedMetricError("Distancia de Hausdorff indefinida: máscara vacía")
    bg = boundary_points(g, spacing)
    bp = boundary_points(p, spacing)
    d_gp, _ = cKDTree(bp).query(bg)
    d_pg, _ = cKDTree(bg).query(bp)
    return np.asarray(d_gp, dtype=np.float64), np.asarray(d_pg, dtype=np.float64)


def hausdorff_distance(g, p, spacing: Spacing = (1.0, 1.0)) -> float:
    d_gp, d_pg = _directed_distances(g, p, spacing)
    return float(max(d_gp.max(), d_pg.max()))


def hd95(g, p, spacing: Spacing = (1.0, 1.0)) -> float:
    d_gp, d_pg = _directed_distances(g, p, spacing)
    return float(np.percentile(np.concatenate([d_gp, d_pg]), 95, method="linear"))


def evaluate_case(
    predictions: Sequence,
    ground_truths: Sequence,
    spacing: Spacing,
    case_id: str,
) -> CaseMetrics:
    """Promedio aritmético por corte de DSC y HD95 para un caso."""
    if len(predictions) == 0 or len(predictions) != len(ground_truths):
        raise InvalidInputError(
            f"Listas vacías o de distinto largo ({len(predictions)} vs {len(ground_truths)}) en caso {case_id}"
        )
    dices: List[float] = []
    hds: List[float] = []
    undefined = 0
    for pred, gt in zip(predictions, ground_truths):
        dices.append(dice_coefficient(gt, pred))
        try:
            hds.append(hd95(gt, pred, spacing))
        except UndefinedMetricError:
            undefined += 1
    return CaseMetrics(
        case_id=str(case_id),
        mean_dice=float(np.mean(dices)),
        mean_hd95=float(np.mean(hds)) if hds else math.nan,
        slice_count=len(dices),
        hd95_undefined=undefined,
    )
