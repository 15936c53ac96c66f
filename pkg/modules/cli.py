# cli.py
# -*- coding: utf-8 -*-
"""
Línea de comandos: synth, train, eval y compare.

Códigos de salida: 0 éxito, 2 error de uso o de configuración, 1 falla en
tiempo de ejecución. Las opciones pisan al .env y el .env a los defaults.
"""
import logging
from contextlib import contextmanager
from pathlib import Path
from typing import Annotated, Dict, List, Optional, Tuple

import typer
from pydantic import ValidationError

from modules import __version__
from modules.data import (
    AugmentConfig,
    SynthParams,
    dataset_fingerprint,
    disagreement_fraction,
    load_dataset,
    resize,
    synth_generate,
    write_split,
)
from modules.errors import CapsuleError, ConfigurationError
from modules.losses import LossConfig, LossKind, VariabilityMode
from modules.model import ModelConfig, build_model
from modules.reports import (
    RunManifest,
    loss_comparison_frame,
    loss_log_frame,
    metrics_comparison_frame,
    metrics_frame,
    plot_loss_curves,
    write_config_echo,
    write_csv,
    write_manifest,
    write_overlay,
)
from modules.settings import configure_logging, get_settings
from modules.trainer import (
    EpochLog,
    EvaluationReport,
    LRSchedule,
    OptimizerKind,
    PostprocessConfig,
    TrainConfig,
    evaluate,
    load_checkpoint,
    model_from_checkpoint,
    train,
)
from modules.ui import console, render_header, render_kv, render_table

logger = logging.getLogger("capsule.cli")

app = typer.Typer(add_completion=False, help="Segmentación de cápsula prostática con pérdida focal adaptativa.")

# Nombres aceptados por --loss; "focal" es alias de standard_focal
LOSS_NAMES: Dict[str, LossKind] = {
    "adaptive_focal": LossKind.ADAPTIVE_FOCAL,
    "focal": LossKind.STANDARD_FOCAL,
    "standard_focal": LossKind.STANDARD_FOCAL,
    "ag_bce": LossKind.AG_BCE,
}
COMPARE_KINDS = (LossKind.ADAPTIVE_FOCAL, LossKind.STANDARD_FOCAL, LossKind.AG_BCE)

# Desplazamiento de semilla para que el split de prueba no repita imágenes del de entrenamiento
TEST_SEED_OFFSET = 1_000_003


class UsageError(CapsuleError):
    """Argumentos inválidos detectados por la CLI (salida 2)."""


@contextmanager
def _exit_codes():
    try:
        yield
    except (ConfigurationError, UsageError, ValidationError) as e:
        console.print(f"[red]Error de configuración:[/red] {e}")
        raise typer.Exit(code=2)
    except CapsuleError as e:
        logger.error("%s", e)
        console.print(f"[red]Error:[/red] {e}")
        raise typer.Exit(code=1)


def _command_line(ctx: typer.Context) -> str:
    flags = [f"--{k.replace('_', '-')}={getattr(v, 'value', v)}" for k, v in ctx.params.items() if v is not None]
    return " ".join([ctx.command_path, *flags])


def _require_dir(path: Path, what: str) -> Path:
    if not Path(path).is_dir():
        raise UsageError(f"No existe el directorio de {what}: {path}")
    return Path(path)


def _writable_dir(path: Path) -> Path:
    try:
        path.mkdir(parents=True, exist_ok=True)
        marker = path / ".write_test"
        marker.write_bytes(b"")
        marker.unlink()
    except OSError as e:
        raise UsageError(f"No se puede escribir en {path}: {e}") from e
    return path


def _resolve_spacing(spacing: Optional[float]) -> float:
    value = get_settings().pixel_spacing_mm if spacing is None else spacing
    if value <= 0:
        raise UsageError(f"--spacing debe ser > 0 mm (recibido {value})")
    return value


def _parse_loss(name: str) -> LossKind:
    kind = LOSS_NAMES.get(name.strip().lower())
    if kind is None:
        raise UsageError(f"Pérdida desconocida '{name}'. Opciones válidas: {', '.join(LOSS_NAMES)}")
    return kind


@app.callback()
def main(
    log_level: Annotated[Optional[str], typer.Option("--log-level", help="Pisa CAPSULE_LOG_LEVEL.")] = None,
):
    with _exit_codes():
        configure_logging(log_level.upper() if log_level else None)


# ==============================
# Opciones compartidas por train y compare
# ==============================

DataOpt = Annotated[Optional[Path], typer.Option("--data", help="Raíz del dataset (default CAPSULE_DATA_ROOT).")]
EpochsOpt = Annotated[int, typer.Option("--epochs")]
LrOpt = Annotated[float, typer.Option("--lr")]
MomentumOpt = Annotated[float, typer.Option("--momentum")]
WeightDecayOpt = Annotated[float, typer.Option("--weight-decay")]
BatchOpt = Annotated[int, typer.Option("--batch")]
KsOpt = Annotated[int, typer.Option("--ks", help="Lado del elemento estructurante de dilatación.")]
BetaOpt = Annotated[float, typer.Option("--beta")]
GammaFOpt = Annotated[float, typer.Option("--gamma-f")]
EpsilonOpt = Annotated[float, typer.Option("--epsilon")]
VariabilityOpt = Annotated[VariabilityMode, typer.Option("--variability-mode")]
GammaMinOpt = Annotated[float, typer.Option("--gamma-min")]
GammaMaxOpt = Annotated[float, typer.Option("--gamma-max")]
HardWeightOpt = Annotated[float, typer.Option("--hard-weight", help="Peso de la región difícil en ag_bce.")]
EasyWeightOpt = Annotated[float, typer.Option("--easy-weight", help="Peso de la región fácil en ag_bce.")]
CombineDiceOpt = Annotated[bool, typer.Option("--combine-dice/--no-combine-dice")]
DiceWeightOpt = Annotated[float, typer.Option("--dice-weight")]
OptimizerOpt = Annotated[OptimizerKind, typer.Option("--optimizer")]
ScheduleOpt = Annotated[LRSchedule, typer.Option("--lr-schedule")]
ScheduleEpochsOpt = Annotated[
    Optional[int], typer.Option("--schedule-epochs", help="Horizonte (épocas) del decaimiento poly; default --epochs.")
]
SeedOpt = Annotated[int, typer.Option("--seed")]
PresetOpt = Annotated[str, typer.Option("--preset", help="desk | full")]
InputSizeOpt = Annotated[Optional[int], typer.Option("--input-size")]
AugmentOpt = Annotated[bool, typer.Option("--augment/--no-augment")]
WorkersOpt = Annotated[Optional[int], typer.Option("--workers", help="Default CAPSULE_NUM_WORKERS.")]
SpacingOpt = Annotated[Optional[float], typer.Option("--spacing", help="mm por píxel (default CAPSULE_PIXEL_SPACING_MM).")]
DeviceOpt = Annotated[Optional[str], typer.Option("--device", help="Default CAPSULE_DEVICE.")]


def _build_configs(
    *,
    loss_kind: LossKind,
    epochs: int,
    lr: float,
    momentum: float,
    weight_decay: float,
    batch: int,
    ks: int,
    beta: float,
    gamma_f: float,
    epsilon: float,
    variability_mode: VariabilityMode,
    gamma_min: float,
    gamma_max: float,
    hard_weight: float,
    easy_weight: float,
    combine_dice: bool,
    dice_weight: float,
    optimizer: OptimizerKind,
    lr_schedule: LRSchedule,
    schedule_epochs: Optional[int],
    seed: int,
    preset: str,
    input_size: Optional[int],
    augment: bool,
    workers: int,
) -> Tuple[TrainConfig, LossConfig, ModelConfig, AugmentConfig]:
    loss_cfg = LossConfig(
        beta=beta,
        gamma_f=gamma_f,
        epsilon=epsilon,
        kernel_size=ks,
        gamma_min=gamma_min,
        gamma_max=gamma_max,
        variability_mode=variability_mode,
        hard_weight=hard_weight,
        easy_weight=easy_weight,
    )
    overrides = {"input_size": input_size} if input_size else {}
    model_cfg = ModelConfig.preset(preset, **overrides)
    train_cfg = TrainConfig(
        loss_kind=loss_kind,
        combine_dice=combine_dice,
        dice_weight=dice_weight,
        epochs=epochs,
        batch_size=batch,
        learning_rate=lr,
        momentum=momentum,
        weight_decay=weight_decay,
        optimizer=optimizer,
        lr_schedule=lr_schedule,
        schedule_epochs=schedule_epochs,
        seed=seed,
        num_workers=workers,
    )
    augment_cfg = AugmentConfig(seed=seed) if augment else AugmentConfig.identity(seed=seed)
    return train_cfg, loss_cfg, model_cfg, augment_cfg


def _run_training(
    *,
    command: str,
    data: Path,
    out: Path,
    configs: Tuple[TrainConfig, LossConfig, ModelConfig, AugmentConfig],
    spacing: float,
    device: str,
    resume: Optional[Path] = None,
) -> List[EpochLog]:
    """Entrena y deja en `out`: loss_log.csv, config.txt, manifest.json y checkpoints/."""
    train_cfg, loss_cfg, model_cfg, augment_cfg = configs
    split = load_dataset(data, "train", spacing=(spacing, spacing), workers=train_cfg.num_workers)
    if len(split) == 0:
        raise UsageError(f"El split de entrenamiento en {data} está vacío")

    resolved = {
        "data": str(data),
        "spacing_mm": spacing,
        "device": device,
        **train_cfg.echo("train."),
        **loss_cfg.echo("loss."),
        **model_cfg.echo("model."),
        **augment_cfg.echo("augment."),
    }
    if resume is not None:
        resolved["resume"] = str(resume)
    manifest = RunManifest(command=command, resolved_config=resolved, dataset_fingerprint=dataset_fingerprint(data))
    write_config_echo(resolved, out / "config.txt")

    model = build_model(model_cfg, seed=train_cfg.seed)
    _, logs = train(
        model,
        split.samples,
        train_cfg,
        loss_cfg,
        model_cfg,
        augment_cfg=augment_cfg,
        run_dir=out,
        resume_from=resume,
        device=device,
        progress=True,
    )
    write_csv(loss_log_frame(logs), out / "loss_log.csv")
    write_manifest(manifest, out / "manifest.json")
    return logs


def _run_evaluation(
    *,
    checkpoint: Path,
    data: Path,
    split_name: str,
    out: Path,
    threshold: float,
    postprocess_cfg: PostprocessConfig,
    spacing: float,
    overlays: bool,
) -> EvaluationReport:
    ckpt = load_checkpoint(checkpoint)
    model = model_from_checkpoint(ckpt)
    split = load_dataset(data, split_name, spacing=(spacing, spacing))
    if len(split) == 0:
        raise UsageError(f"El split '{split_name}' en {data} está vacío")

    report = evaluate(model, split.samples, threshold=threshold, postprocess_cfg=postprocess_cfg)
    write_csv(metrics_frame(report.cases, report.overall), out / "metrics.csv")

    if overlays:
        size = model.cfg.input_size
        for s in split.samples:
            r = resize(s, size)
            write_overlay(r.image, r.expert_mask, report.predictions[r.stem], out / "overlays" / f"{r.stem}.png")
        logger.info("Superposiciones escritas en %s", out / "overlays")
    return report


# ==============================
# Comandos
# ==============================

@app.command()
def synth(
    ctx: typer.Context,
    out: Annotated[Optional[Path], typer.Option("--out", help="Default CAPSULE_DATA_ROOT.")] = None,
    count: Annotated[int, typer.Option("--count")] = 128,
    size: Annotated[int, typer.Option("--size")] = 64,
    seed: Annotated[int, typer.Option("--seed")] = 0,
    perturb: Annotated[float, typer.Option("--perturb", help="Amplitud (px) del desacuerdo no experto.")] = 2.0,
    train_cases: Annotated[Optional[int], typer.Option("--train-cases")] = None,
    test_count: Annotated[int, typer.Option("--test-count")] = 40,
    test_cases: Annotated[int, typer.Option("--test-cases")] = 20,
):
    """Genera un dataset sintético (splits train y test) con la estructura estándar."""
    with _exit_codes():
        if count < 1:
            raise UsageError(f"--count debe ser >= 1 (recibido {count})")
        if size < 16:
            raise UsageError(f"--size debe ser >= 16 (recibido {size})")
        if test_count < 0:
            raise UsageError(f"--test-count debe ser >= 0 (recibido {test_count})")
        root = _writable_dir(out or get_settings().data_root)
        params = SynthParams(perturb=perturb)
        render_header(f"Dataset sintético en {root}")

        train_samples = synth_generate(count, size, params, seed=seed, cases=train_cases)
        n_train = write_split(train_samples, root, "train")
        stats = {
            "train.muestras": n_train,
            "train.casos": len({s.case_id for s in train_samples}),
            "train.desacuerdo_medio": disagreement_fraction(train_samples),
        }
        if test_count > 0:
            first_case = len({s.case_id for s in train_samples})
            test_samples = synth_generate(
                test_count, size, params, seed=seed + TEST_SEED_OFFSET, cases=test_cases, case_offset=first_case
            )
            stats["test.muestras"] = write_split(test_samples, root, "test")
            stats["test.casos"] = len({s.case_id for s in test_samples})
            stats["test.desacuerdo_medio"] = disagreement_fraction(test_samples)
        stats["huella"] = dataset_fingerprint(root)
        render_kv(stats)
        logger.info("%s: %d muestras de entrenamiento escritas en %s", _command_line(ctx), n_train, root)


@app.command("train")
def train_cmd(
    ctx: typer.Context,
    data: DataOpt = None,
    out: Annotated[Optional[Path], typer.Option("--out", help="Directorio de la corrida.")] = None,
    loss: Annotated[str, typer.Option("--loss", help="adaptive_focal | focal | ag_bce")] = "adaptive_focal",
    epochs: EpochsOpt = 10,
    lr: LrOpt = 0.01,
    momentum: MomentumOpt = 0.9,
    weight_decay: WeightDecayOpt = 1e-4,
    batch: BatchOpt = 8,
    ks: KsOpt = 5,
    beta: BetaOpt = 1.0,
    gamma_f: GammaFOpt = 2.0,
    epsilon: EpsilonOpt = 1e-7,
    variability_mode: VariabilityOpt = VariabilityMode.LITERAL,
    gamma_min: GammaMinOpt = 0.05,
    gamma_max: GammaMaxOpt = 2.0,
    hard_weight: HardWeightOpt = 4.0,
    easy_weight: EasyWeightOpt = 1.0,
    combine_dice: CombineDiceOpt = False,
    dice_weight: DiceWeightOpt = 1.0,
    optimizer: OptimizerOpt = OptimizerKind.SGD_MOMENTUM,
    lr_schedule: ScheduleOpt = LRSchedule.NONE,
    schedule_epochs: ScheduleEpochsOpt = None,
    seed: SeedOpt = 0,
    preset: PresetOpt = "desk",
    input_size: InputSizeOpt = None,
    augment: AugmentOpt = True,
    workers: WorkersOpt = None,
    spacing: SpacingOpt = None,
    device: DeviceOpt = None,
    resume: Annotated[Optional[Path], typer.Option("--resume", help="Checkpoint desde el cual reanudar.")] = None,
):
    """Entrena un modelo con la pérdida elegida."""
    with _exit_codes():
        settings = get_settings()
        kind = _parse_loss(loss)
        spacing_mm = _resolve_spacing(spacing)
        data = _require_dir(data or settings.data_root, "datos")
        if resume is not None and not resume.is_file():
            raise UsageError(f"No existe el checkpoint para reanudar: {resume}")
        configs = _build_configs(
            loss_kind=kind, epochs=epochs, lr=lr, momentum=momentum, weight_decay=weight_decay, batch=batch,
            ks=ks, beta=beta, gamma_f=gamma_f, epsilon=epsilon, variability_mode=variability_mode,
            gamma_min=gamma_min, gamma_max=gamma_max, hard_weight=hard_weight, easy_weight=easy_weight,
            combine_dice=combine_dice, dice_weight=dice_weight, optimizer=optimizer, lr_schedule=lr_schedule,
            schedule_epochs=schedule_epochs, seed=seed, preset=preset, input_size=input_size, augment=augment,
            workers=settings.num_workers if workers is None else workers,
        )
        run_dir = _writable_dir(out or settings.runs_root / f"{kind.value}_seed{seed}")
        render_header(f"Entrenamiento {kind.value} -> {run_dir}")
        logs = _run_training(
            command=_command_line(ctx),
            data=data,
            out=run_dir,
            configs=configs,
            spacing=spacing_mm,
            device=device or settings.device,
            resume=resume,
        )
        render_table(loss_log_frame(logs), title="Pérdida media por época")


@app.command("eval")
def eval_cmd(
    run: Annotated[Optional[Path], typer.Option("--run", help="Directorio de corrida (usa checkpoints/last.pt).")] = None,
    checkpoint: Annotated[Optional[Path], typer.Option("--checkpoint")] = None,
    data: DataOpt = None,
    split: Annotated[str, typer.Option("--split")] = "test",
    out: Annotated[Optional[Path], typer.Option("--out", help="Default: el directorio de la corrida.")] = None,
    threshold: Annotated[float, typer.Option("--threshold")] = 0.5,
    opening: Annotated[bool, typer.Option("--opening/--no-opening")] = False,
    largest_component: Annotated[bool, typer.Option("--largest-component/--no-largest-component")] = False,
    overlays: Annotated[bool, typer.Option("--overlays/--no-overlays")] = True,
    spacing: SpacingOpt = None,
):
    """Evalúa un checkpoint: metrics.csv (una fila por caso + Mean) y superposiciones."""
    with _exit_codes():
        settings = get_settings()
        if checkpoint is None and run is None:
            raise UsageError("Indicar --run o --checkpoint")
        ckpt_path = checkpoint or run / "checkpoints" / "last.pt"
        if not ckpt_path.is_file():
            raise UsageError(f"No existe el checkpoint: {ckpt_path}")
        if not 0.0 < threshold < 1.0:
            raise UsageError(f"--threshold debe estar en (0, 1) (recibido {threshold})")
        spacing_mm = _resolve_spacing(spacing)
        data = _require_dir(data or settings.data_root, "datos")
        target = _writable_dir(out or run or ckpt_path.parent)

        render_header(f"Evaluación de {ckpt_path}")
        report = _run_evaluation(
            checkpoint=ckpt_path,
            data=data,
            split_name=split,
            out=target,
            threshold=threshold,
            postprocess_cfg=PostprocessConfig(opening=opening, largest_component=largest_component),
            spacing=spacing_mm,
            overlays=overlays,
        )
        render_table(metrics_frame(report.cases, report.overall), title="Métricas por caso")


@app.command()
def compare(
    ctx: typer.Context,
    data: DataOpt = None,
    out: Annotated[Optional[Path], typer.Option("--out", help="Directorio del reporte comparativo.")] = None,
    epochs: EpochsOpt = 10,
    lr: LrOpt = 0.01,
    momentum: MomentumOpt = 0.9,
    weight_decay: WeightDecayOpt = 1e-4,
    batch: BatchOpt = 8,
    ks: KsOpt = 5,
    beta: BetaOpt = 1.0,
    gamma_f: GammaFOpt = 2.0,
    epsilon: EpsilonOpt = 1e-7,
    variability_mode: VariabilityOpt = VariabilityMode.LITERAL,
    gamma_min: GammaMinOpt = 0.05,
    gamma_max: GammaMaxOpt = 2.0,
    hard_weight: HardWeightOpt = 4.0,
    easy_weight: EasyWeightOpt = 1.0,
    combine_dice: CombineDiceOpt = False,
    dice_weight: DiceWeightOpt = 1.0,
    optimizer: OptimizerOpt = OptimizerKind.SGD_MOMENTUM,
    lr_schedule: ScheduleOpt = LRSchedule.NONE,
    schedule_epochs: ScheduleEpochsOpt = None,
    seed: SeedOpt = 0,
    preset: PresetOpt = "desk",
    input_size: InputSizeOpt = None,
    augment: AugmentOpt = True,
    workers: WorkersOpt = None,
    spacing: SpacingOpt = None,
    device: DeviceOpt = None,
    threshold: Annotated[float, typer.Option("--threshold")] = 0.5,
    overlays: Annotated[bool, typer.Option("--overlays/--no-overlays")] = False,
):
    """Entrena las tres pérdidas con la misma semilla y compara pérdidas y métricas."""
    with _exit_codes():
        settings = get_settings()
        spacing_mm = _resolve_spacing(spacing)
        data = _require_dir(data or settings.data_root, "datos")
        root = _writable_dir(out or settings.runs_root / f"compare_seed{seed}")
        has_test = (data / "test").is_dir()
        if not has_test:
            logger.warning("No hay split 'test' en %s; se omiten las métricas", data)

        logs_by_loss: Dict[str, List[EpochLog]] = {}
        reports: Dict[str, EvaluationReport] = {}
        for kind in COMPARE_KINDS:
            render_header(f"Comparación: {kind.value}")
            configs = _build_configs(
                loss_kind=kind, epochs=epochs, lr=lr, momentum=momentum, weight_decay=weight_decay, batch=batch,
                ks=ks, beta=beta, gamma_f=gamma_f, epsilon=epsilon, variability_mode=variability_mode,
                gamma_min=gamma_min, gamma_max=gamma_max, hard_weight=hard_weight, easy_weight=easy_weight,
                combine_dice=combine_dice, dice_weight=dice_weight, optimizer=optimizer, lr_schedule=lr_schedule,
                schedule_epochs=schedule_epochs, seed=seed, preset=preset, input_size=input_size, augment=augment,
                workers=settings.num_workers if workers is None else workers,
            )
            run_dir = _writable_dir(root / kind.value)
            logs_by_loss[kind.value] = _run_training(
                command=f"{_command_line(ctx)} [{kind.value}]",
                data=data,
                out=run_dir,
                configs=configs,
                spacing=spacing_mm,
                device=device or settings.device,
            )
            if has_test:
                reports[kind.value] = _run_evaluation(
                    checkpoint=run_dir / "checkpoints" / "last.pt",
                    data=data,
                    split_name="test",
                    out=run_dir,
                    threshold=threshold,
                    postprocess_cfg=PostprocessConfig(),
                    spacing=spacing_mm,
                    overlays=overlays,
                )

        losses_df = loss_comparison_frame(logs_by_loss)
        write_csv(losses_df, root / "comparison_losses.csv")
        plot_loss_curves(losses_df, root)
        render_table(losses_df, title="Pérdida media por época")
        if reports:
            metrics_df = metrics_comparison_frame(reports)
            write_csv(metrics_df, root / "comparison_metrics.csv")
            render_table(metrics_df, title="DSC y HD95 (mm) por caso")
        logger.info("Reporte comparativo en %s (versión %s)", root, __version__)
