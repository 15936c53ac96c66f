# modules/__init__.py
"""
Fachada de alto nivel del laboratorio de segmentación de cápsula prostática.

Se organiza en cinco ejes:
- losses:   pérdida focal adaptativa y pérdidas de referencia (focal, AG-BCE, Dice).
- metrics:  DSC, Hausdorff y HD95 en mm, agregación por caso.
- model:    TransUNet reducido con supervisión profunda multiescala.
- data:     carga del dataset, aumentación y generador sintético.
- trainer:  entrenamiento, checkpoints, inferencia y evaluación.

La CLI (modules.cli) y los tests importan directamente de cada submódulo;
este __init__ se mantiene como capa de conveniencia.
"""

__version__ = "0.1.0"

# ==============================
# Configuración y errores
# ==============================
from .errors import (  # type: ignore[F401]
    CapsuleError,
    InvalidInputError,
    ConfigurationError,
    UndefinedMetricError,
    TrainingDivergedError,
)
from .settings import Settings, get_settings, configure_logging  # type: ignore[F401]

# ==============================
# Pérdidas
# ==============================
from .losses import (  # type: ignore[F401]
    LossConfig,
    LossKind,
    VariabilityMode,
    AdaptiveLossBreakdown,
    hard_region_map,
    adaptive_focal_loss,
    adaptive_focal_loss_batch,
    standard_focal_loss,
    ag_bce_loss,
    dice_loss,
    compute_loss,
)

# ==============================
# Métricas
# ==============================
from .metrics import (  # type: ignore[F401]
    CaseMetrics,
    dice_coefficient,
    hausdorff_distance,
    hd95,
    evaluate_case,
)

# ==============================
# Modelo
# ==============================
from .model import (  # type: ignore[F401]
    ModelConfig,
    MultiScalePrediction,
    CapsuleTransUNet,
    build_model,
    multiscale_loss,
)

# ==============================
# Datos
# ==============================
from .data import (  # type: ignore[F401]
    SegSample,
    AugmentConfig,
    SynthParams,
    CapsuleDataset,
    load_dataset,
    augment,
    synth_generate,
)

# ==============================
# Entrenamiento y evaluación
# ==============================
from .trainer import (  # type: ignore[F401]
    TrainConfig,
    PostprocessConfig,
    EpochLog,
    EvaluationReport,
    train,
    evaluate,
    predict_mask,
)

__all__ = [
    "__version__",
    # Configuración y errores
    "CapsuleError",
    "InvalidInputError",
    "ConfigurationError",
    "UndefinedMetricError",
    "TrainingDivergedError",
    "Settings",
    "get_settings",
    "configure_logging",
    # Pérdidas
    "LossConfig",
    "LossKind",
    "VariabilityMode",
    "AdaptiveLossBreakdown",
    "hard_region_map",
    "adaptive_focal_loss",
    "adaptive_focal_loss_batch",
    "standard_focal_loss",
    "ag_bce_loss",
    "dice_loss",
    "compute_loss",
    # Métricas
    "CaseMetrics",
    "dice_coefficient",
    "hausdorff_distance",
    "hd95",
    "evaluate_case",
    # Modelo
    "ModelConfig",
    "MultiScalePrediction",
    "CapsuleTransUNet",
    "build_model",
    "multiscale_loss",
    # Datos
    "SegSample",
    "AugmentConfig",
    "SynthParams",
    "CapsuleDataset",
    "load_dataset",
    "augment",
    "synth_generate",
    # Entrenamiento
    "TrainConfig",
    "PostprocessConfig",
    "EpochLog",
    "EvaluationReport",
    "train",
    "evaluate",
    "predict_mask",
]
