# trainer.py
# -*- coding: utf-8 -*-
"""
Entrenamiento, checkpoints, inferencia y evaluación por caso.

- train(): mini-batches barajados con semilla por época, pérdida multiescala
  (más Dice opcional), un paso de optimizador por batch, un EpochLog por época.
- El orden de batches depende solo de (seed, época) y la aumentación de
  (seed, época, índice): reanudar desde un checkpoint reproduce exactamente
  el entrenamiento de corrido.
- evaluate(): agrupa cortes por caso y arma las filas por caso + fila media.
"""
from __future__ import annotations

import hashlib
import logging
import math
import random
import time
from collections import OrderedDict
from dataclasses import asdict, dataclass, field
from enum import Enum
from pathlib import Path
from typing import Any, Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np
import torch
from pydantic import Field
from scipy import ndimage
from torch.utils.data import BatchSampler, DataLoader
from tqdm import tqdm

from modules.data import AugmentConfig, CapsuleDataset, SegSample, resize
from modules.errors import InvalidInputError, TrainingDivergedError
from modules.losses import LossConfig, LossKind, adaptive_focal_loss, dice_loss
from modules.metrics import CaseMetrics, evaluate_case
from modules.model import CapsuleTransUNet, ModelConfig, multiscale_loss
from modules.settings import ConfigModel

logger = logging.getLogger("capsule.trainer")

CHECKPOINT_FORMAT = "capsule-checkpoint/1"


class OptimizerKind(str, Enum):
    SGD_MOMENTUM = "sgd_momentum"
    ADAM = "adam"


class LRSchedule(str, Enum):
    NONE = "none"
    POLY = "poly"


class TrainConfig(ConfigModel):
    loss_kind: LossKind = LossKind.ADAPTIVE_FOCAL
    combine_dice: bool = False
    dice_weight: float = Field(default=1.0, ge=0)
    epochs: int = Field(default=10, ge=1)
    batch_size: int = Field(default=8, ge=1)
    learning_rate: float = Field(default=0.01, gt=0)
    momentum: float = Field(default=0.9, ge=0, lt=1)
    weight_decay: float = Field(default=1e-4, ge=0)
    optimizer: OptimizerKind = OptimizerKind.SGD_MOMENTUM
    adam_betas: Tuple[float, float] = (0.9, 0.999)
    adam_eps: float = Field(default=1e-8, gt=0)
    lr_schedule: LRSchedule = LRSchedule.NONE
    poly_power: float = Field(default=0.9, gt=0)
    # horizonte del decaimiento poly en épocas; None = epochs
    schedule_epochs: Optional[int] = Field(default=None, ge=1)
    seed: int = Field(default=0, ge=0)
    num_workers: int = Field(default=0, ge=0)


class PostprocessConfig(ConfigModel):
    opening: bool = False
    largest_component: bool = False


@dataclass(frozen=True)
class EpochLog:
    epoch: int
    mean_loss: float
    wall_seconds: float
    batch_digest: str = ""


@dataclass
class EvaluationReport:
    cases: List[CaseMetrics]
    overall: CaseMetrics
    predictions: Dict[str, np.ndarray] = field(default_factory=dict)


# ==============================
# Optimizador
# ==============================

def build_optimizer(params: Iterable[torch.nn.Parameter], cfg: TrainConfig) -> torch.optim.Optimizer:
    """
    sgd_momentum: v <- m·v + (g + λ·w); w <- w − lr·v (decaimiento acoplado).
    adam: momentos con corrección de sesgo; λ·w también se suma al gradiente.
    """
    if cfg.optimizer is OptimizerKind.ADAM:
        return torch.optim.Adam(
            params, lr=cfg.learning_rate, betas=cfg.adam_betas, eps=cfg.adam_eps, weight_decay=cfg.weight_decay
        )
    return torch.optim.SGD(params, lr=cfg.learning_rate, momentum=cfg.momentum, weight_decay=cfg.weight_decay)


def build_scheduler(optimizer: torch.optim.Optimizer, cfg: TrainConfig, total_steps: int, start_step: int = 0):
    """
    Decaimiento polinomial sobre el paso global t: lr = lr_0·max(0, 1 − t/T)^p,
    con lr_0 = cfg.learning_rate. `start_step` ubica el scheduler en el paso
    global de una corrida reanudada.
    """
    if cfg.lr_schedule is not LRSchedule.POLY:
        return None
    total = max(total_steps, 1)
    for group in optimizer.param_groups:
        group["initial_lr"] = cfg.learning_rate

    def factor(step: int) -> float:
        return max(0.0, 1.0 - (start_step + step) / total) ** cfg.poly_power

    return torch.optim.lr_scheduler.LambdaLR(optimizer, factor)


def optimizer_step(optimizer: torch.optim.Optimizer, epoch: Optional[int] = None, batch: Optional[int] = None) -> None:
    """Un paso del optimizador; aborta si algún gradiente no es finito."""
    for group in optimizer.param_groups:
        for p in group["params"]:
            if p.grad is not None and not torch.isfinite(p.grad).all():
                raise TrainingDivergedError("Gradientes no finitos", epoch=epoch, batch=batch)
    optimizer.step()


# ==============================
# Checkpoints
# ==============================

def save_checkpoint(
    path: Path,
    *,
    model: CapsuleTransUNet,
    optimizer: torch.optim.Optimizer,
    scheduler,
    epoch: int,
    logs: Sequence[EpochLog],
    train_cfg: TrainConfig,
    loss_cfg: LossConfig,
    model_cfg: ModelConfig,
    augment_cfg: Optional[AugmentConfig],
) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {
        "format": CHECKPOINT_FORMAT,
        "epoch": epoch,
        "configs": {
            "train": train_cfg.model_dump(mode="json"),
            "loss": loss_cfg.model_dump(mode="json"),
            "model": model_cfg.model_dump(mode="json"),
            "augment": augment_cfg.model_dump(mode="json") if augment_cfg else None,
        },
        "model_state": model.state_dict(),
        "optimizer_state": optimizer.state_dict(),
        "scheduler_state": scheduler.state_dict() if scheduler is not None else None,
        "logs": [asdict(log) for log in logs],
        "rng": {
            "torch": torch.get_rng_state(),
            "numpy": np.random.get_state(),
            "python": random.getstate(),
        },
    }
    torch.save(payload, path)
    return path


def load_checkpoint(path: Path | str) -> Dict[str, Any]:
    path = Path(path)
    if not path.is_file():
        raise InvalidInputError(f"No existe el checkpoint: {path}")
    ckpt = torch.load(path, map_location="cpu", weights_only=False)
    if not isinstance(ckpt, dict) or ckpt.get("format") != CHECKPOINT_FORMAT:
        raise InvalidInputError(f"Formato de checkpoint desconocido: {path}")
    return ckpt


def model_from_checkpoint(ckpt: Dict[str, Any]) -> CapsuleTransUNet:
    model = CapsuleTransUNet(ModelConfig(**ckpt["configs"]["model"]))
    model.load_state_dict(ckpt["model_state"])
    model.eval()
    return model


# ==============================
# Entrenamiento
# ==============================

def _epoch_order(n: int, seed: int, epoch: int) -> List[int]:
    return np.random.default_rng([seed, epoch]).permutation(n).tolist()


def _diagnostics(
    pred_logits: torch.Tensor, expert: torch.Tensor, nonexpert: torch.Tensor, loss_cfg: LossConfig, loss: torch.Tensor
) -> Dict[str, Any]:
    info: Dict[str, Any] = {"loss": float(loss.detach())}
    try:
        _, bd = adaptive_focal_loss(pred_logits[0].detach(), expert[0], nonexpert[0], loss_cfg)
        info.update(bd.as_dict())
    except Exception as exc:  # los logits pueden ser justamente el problema
        info["breakdown_error"] = str(exc)
    return info


def train(
    model: CapsuleTransUNet,
    dataset: Sequence[SegSample],
    train_cfg: TrainConfig,
    loss_cfg: LossConfig,
    model_cfg: ModelConfig,
    augment_cfg: Optional[AugmentConfig] = None,
    run_dir: Optional[Path] = None,
    resume_from: Optional[Path] = None,
    device: str = "cpu",
    progress: bool = False,
) -> Tuple[CapsuleTransUNet, List[EpochLog]]:
    samples = list(dataset)
    if not samples:
        raise InvalidInputError("Dataset de entrenamiento vacío")

    ds = CapsuleDataset(samples, input_size=model_cfg.input_size, augment_cfg=augment_cfg)
    model.to(device)
    optimizer = build_optimizer(model.parameters(), train_cfg)
    steps_per_epoch = math.ceil(len(ds) / train_cfg.batch_size)
    head_weights = model_cfg.head_weights()

    logs: List[EpochLog] = []
    start_epoch = 1
    if resume_from is not None:
        ckpt = load_checkpoint(resume_from)
        model.load_state_dict(ckpt["model_state"])
        optimizer.load_state_dict(ckpt["optimizer_state"])
        # la tasa la fija la configuración actual, no la guardada
        for group in optimizer.param_groups:
            group["lr"] = train_cfg.learning_rate
        torch.set_rng_state(ckpt["rng"]["torch"])
        np.random.set_state(ckpt["rng"]["numpy"])
        random.setstate(ckpt["rng"]["python"])
        logs = [EpochLog(**row) for row in ckpt["logs"]]
        start_epoch = int(ckpt["epoch"]) + 1
        logger.info("Reanudando desde %s (época %d)", resume_from, start_epoch - 1)

    horizon = (train_cfg.schedule_epochs or train_cfg.epochs) * steps_per_epoch
    scheduler = build_scheduler(optimizer, train_cfg, horizon, start_step=(start_epoch - 1) * steps_per_epoch)

    for epoch in range(start_epoch, train_cfg.epochs + 1):
        ds.set_epoch(epoch)
        sampler = BatchSampler(_epoch_order(len(ds), train_cfg.seed, epoch), train_cfg.batch_size, drop_last=False)
        loader = DataLoader(ds, batch_sampler=sampler, num_workers=train_cfg.num_workers)

        model.train()
        digest = hashlib.sha1()
        batch_losses: List[float] = []
        t0 = time.perf_counter()
        batches = tqdm(loader, desc=f"época {epoch}", leave=False, disable=not progress)
        for b, batch in enumerate(batches, start=1):
            digest.update(batch["index"].numpy().astype(np.int64).tobytes())
            image = batch["image"].to(device)
            expert = batch["expert"].to(device)
            nonexpert = batch["nonexpert"].to(device)

            pred = model(image)
            outputs = [pred.full_logits, *pred.side_logits.values()]
            if not all(torch.isfinite(o).all() for o in outputs):
                raise TrainingDivergedError(
                    "Logits no finitos",
                    epoch=epoch,
                    batch=b,
                    breakdown=_diagnostics(pred.full_logits, expert, nonexpert, loss_cfg, torch.tensor(float("nan"))),
                )
            loss = multiscale_loss(pred, expert, nonexpert, train_cfg.loss_kind, loss_cfg, head_weights)
            if train_cfg.combine_dice:
                loss = loss + train_cfg.dice_weight * dice_loss(
                    torch.sigmoid(pred.full_logits), expert, loss_cfg.dice_smooth
                )
            if not torch.isfinite(loss):
                raise TrainingDivergedError(
                    "Pérdida no finita",
                    epoch=epoch,
                    batch=b,
                    breakdown=_diagnostics(pred.full_logits, expert, nonexpert, loss_cfg, loss),
                )

            optimizer.zero_grad(set_to_none=True)
            loss.backward()
            optimizer_step(optimizer, epoch=epoch, batch=b)
            if scheduler is not None:
                scheduler.step()
            batch_losses.append(float(loss.detach()))

        log = EpochLog(
            epoch=epoch,
            mean_loss=float(np.mean(batch_losses)),
            wall_seconds=time.perf_counter() - t0,
            batch_digest=digest.hexdigest(),
        )
        logs.append(log)
        logger.info("Época %d/%d - pérdida media %.6f (%.1f s)", epoch, train_cfg.epochs, log.mean_loss, log.wall_seconds)
        logger.debug("Época %d - digest de batches %s", epoch, log.batch_digest)

        if run_dir is not None:
            ckpt_dir = Path(run_dir) / "checkpoints"
            kwargs = dict(
                model=model, optimizer=optimizer, scheduler=scheduler, epoch=epoch, logs=logs,
                train_cfg=train_cfg, loss_cfg=loss_cfg, model_cfg=model_cfg, augment_cfg=augment_cfg,
            )
            save_checkpoint(ckpt_dir / f"epoch_{epoch:03d}.pt", **kwargs)
            save_checkpoint(ckpt_dir / "last.pt", **kwargs)

    return model, logs


# ==============================
# Inferencia y evaluación
# ==============================

def postprocess_mask(mask: np.ndarray, cfg: Optional[PostprocessConfig] = None) -> np.ndarray:
    """Apertura 3x3 y/o retención de la componente conexa más grande (conectividad 4)."""
    cfg = cfg or PostprocessConfig()
    out = np.asarray(mask, dtype=bool)
    if cfg.opening:
        out = ndimage.binary_opening(out, structure=np.ones((3, 3), dtype=bool))
    if cfg.largest_component and out.any():
        labels, n = ndimage.label(out)
        if n > 1:
            sizes = np.bincount(labels.ravel())
            sizes[0] = 0
            out = labels == int(sizes.argmax())
    return out.astype(np.uint8)


def predict_mask(
    model: CapsuleTransUNet,
    image: np.ndarray,
    threshold: float = 0.5,
    postprocess_cfg: Optional[PostprocessConfig] = None,
) -> np.ndarray:
    param = next(model.parameters())
    x = torch.as_tensor(np.asarray(image), dtype=param.dtype, device=param.device)[None, None]
    model.eval()
    with torch.no_grad():
        probs = torch.sigmoid(model(x).full_logits)[0, 0].cpu().numpy()
    return postprocess_mask(probs > threshold, postprocess_cfg)


def evaluate(
    model: CapsuleTransUNet,
    test_samples: Sequence[SegSample],
    threshold: float = 0.5,
    spacing: Optional[Tuple[float, float]] = None,
    postprocess_cfg: Optional[PostprocessConfig] = None,
) -> EvaluationReport:
    """
    Una fila por caso y una fila "Mean" con el promedio aritmético sobre casos
    (no sobre cortes). Las máscaras se evalúan a la resolución del modelo.
    """
    if not test_samples:
        raise InvalidInputError("Conjunto de prueba vacío")

    size = model.cfg.input_size
    groups: "OrderedDict[str, List[SegSample]]" = OrderedDict()
    for s in sorted(test_samples, key=lambda s: (s.case_id, s.slice_index)):
        groups.setdefault(s.case_id, []).append(s)

    cases: List[CaseMetrics] = []
    predictions: Dict[str, np.ndarray] = {}
    for case_id, slices in groups.items():
        preds, gts = [], []
        for s in slices:
            s = resize(s, size)
            pred = predict_mask(model, s.image, threshold, postprocess_cfg)
            predictions[s.stem] = pred
            preds.append(pred)
            gts.append(s.expert_mask)
        case_spacing = spacing or resize(slices[0], size).spacing
        cases.append(evaluate_case(preds, gts, case_spacing, case_id))

    hd_values = [c.mean_hd95 for c in cases if not math.isnan(c.mean_hd95)]
    overall = CaseMetrics(
        case_id="Mean",
        mean_dice=float(np.mean([c.mean_dice for c in cases])),
        mean_hd95=float(np.mean(hd_values)) if hd_values else math.nan,
        slice_count=sum(c.slice_count for c in cases),
        hd95_undefined=sum(c.hd95_undefined for c in cases),
    )
    logger.info("Evaluación: %d casos, DSC medio %.4f, HD95 medio %.4f mm", len(cases), overall.mean_dice, overall.mean_hd95)
    return EvaluationReport(cases=cases, overall=overall, predictions=predictions)
