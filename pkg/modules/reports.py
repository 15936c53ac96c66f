# reports.py
# -*- coding: utf-8 -*-
"""
Salidas de cada corrida: CSV de pérdidas y métricas, eco de configuración,
manifiesto, curvas de pérdida y superposiciones de contornos.
"""
from __future__ import annotations

import logging
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Dict, List, Mapping, Optional, Sequence

import numpy as np
import pandas as pd
import plotly.express as px
from PIL import Image
from pydantic import BaseModel, Field
from scipy import ndimage

from modules import __version__
from modules.metrics import CaseMetrics

logger = logging.getLogger("capsule.reports")

LOSS_LOG_COLUMNS = ["epoch", "mean_loss", "wall_seconds"]
METRICS_COLUMNS = ["case_id", "mean_dice", "mean_hd95", "slice_count", "hd95_undefined"]

GT_COLOR = (0, 220, 0)
PRED_COLOR = (230, 30, 30)


class RunManifest(BaseModel):
    command: str
    resolved_config: Dict[str, Any]
    dataset_fingerprint: str
    code_version: str = __version__
    started_at: str = Field(default_factory=lambda: datetime.now(timezone.utc).isoformat())
    finished_at: Optional[str] = None


def _now() -> str:
    return datetime.now(timezone.utc).isoformat()


# ==============================
# Tablas
# ==============================

def loss_log_frame(logs: Sequence) -> pd.DataFrame:
    rows = [{"epoch": l.epoch, "mean_loss": l.mean_loss, "wall_seconds": l.wall_seconds} for l in logs]
    df = pd.DataFrame(rows, columns=LOSS_LOG_COLUMNS)
    if not df.empty:
        df["epoch"] = pd.to_numeric(df["epoch"], errors="coerce").astype("Int64")
    return df


def metrics_frame(cases: Sequence[CaseMetrics], overall: Optional[CaseMetrics] = None) -> pd.DataFrame:
    """Una fila por caso y, si se pasa, la fila "Mean" al final."""
    rows = [c.as_row() for c in cases]
    if overall is not None:
        rows.append(overall.as_row())
    df = pd.DataFrame(rows, columns=METRICS_COLUMNS)
    if not df.empty:
        df["case_id"] = df["case_id"].astype(str)
        df["slice_count"] = pd.to_numeric(df["slice_count"], errors="coerce").astype("Int64")
        df["hd95_undefined"] = pd.to_numeric(df["hd95_undefined"], errors="coerce").astype("Int64")
    return df


def loss_comparison_frame(logs_by_loss: Mapping[str, Sequence]) -> pd.DataFrame:
    """Filas = épocas, columnas = pérdida media de cada función."""
    frames = []
    for name, logs in logs_by_loss.items():
        frames.append(loss_log_frame(logs).set_index("epoch")["mean_loss"].rename(name))
    if not frames:
        return pd.DataFrame(columns=["epoch"])
    return pd.concat(frames, axis=1).reset_index()


def metrics_comparison_frame(reports_by_loss: Mapping[str, Any]) -> pd.DataFrame:
    """Filas = casos + Mean; por cada pérdida, columnas <pérdida>_dice y <pérdida>_hd95."""
    frames = []
    for name, report in reports_by_loss.items():
        df = metrics_frame(report.cases, report.overall).set_index("case_id")[["mean_dice", "mean_hd95"]]
        frames.append(df.rename(columns={"mean_dice": f"{name}_dice", "mean_hd95": f"{name}_hd95"}))
    if not frames:
        return pd.DataFrame(columns=["case_id"])
    return pd.concat(frames, axis=1).reset_index()


def write_csv(df: pd.DataFrame, path: Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    df.to_csv(path, index=False)
    return path


# ==============================
# Eco de configuración y manifiesto
# ==============================

def write_config_echo(resolved: Mapping[str, Any], path: Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = [f"{key}={resolved[key]}" for key in sorted(resolved)]
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return path


def write_manifest(manifest: RunManifest, path: Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if manifest.finished_at is None:
        manifest = manifest.model_copy(update={"finished_at": _now()})
    path.write_text(manifest.model_dump_json(indent=2), encoding="utf-8")
    return path


# ==============================
# Figuras
# ==============================

def plot_loss_curves(comparison: pd.DataFrame, out_dir: Path, stem: str = "loss_curves") -> List[Path]:
    """HTML interactivo siempre; PNG si el exportador estático está disponible."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    long = comparison.melt(id_vars="epoch", var_name="loss", value_name="mean_loss")
    fig = px.line(long, x="epoch", y="mean_loss", color="loss", markers=True,
                  title="Pérdida media por época")
    fig.update_layout(xaxis_title="Época", yaxis_title="Pérdida media", legend_title="Función")

    written = []
    html_path = out_dir / f"{stem}.html"
    fig.write_html(html_path, include_plotlyjs="cdn")
    written.append(html_path)
    png_path = out_dir / f"{stem}.png"
    try:
        fig.write_image(png_path, width=900, height=500)
        written.append(png_path)
    except Exception as e:
        logger.warning("No fue posible exportar %s (kaleido): %s", png_path, e)
    return written


def _contour(mask: np.ndarray) -> np.ndarray:
    m = np.asarray(mask, dtype=bool)
    return m & ~ndimage.binary_erosion(m, structure=ndimage.generate_binary_structure(2, 1), border_value=0)


def overlay_image(image: np.ndarray, ground_truth: np.ndarray, prediction: np.ndarray) -> np.ndarray:
    """RGB 8 bits: imagen en grises, contorno de referencia en verde y predicción en rojo."""
    gray = np.clip(np.round(np.asarray(image, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)
    rgb = np.stack([gray, gray, gray], axis=-1)
    rgb[_contour(ground_truth)] = GT_COLOR
    rgb[_contour(prediction)] = PRED_COLOR
    return rgb


def write_overlay(image: np.ndarray, ground_truth: np.ndarray, prediction: np.ndarray, path: Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(overlay_image(image, ground_truth, prediction), mode="RGB").save(path)
    return path
