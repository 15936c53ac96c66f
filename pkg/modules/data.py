# data.py
# -*- coding: utf-8 -*-
"""
Ingesta y preparación de datos.

Estructura en disco (la misma para el dataset real y el sintético):

    root/<split>/images/<caso>_<corte>.png
    root/<split>/masks_expert/<caso>_<corte>.png
    root/<split>/masks_nonexpert/<caso>_<corte>.png

Imágenes PNG 8 bits en escala de grises; las máscaras se binarizan con
umbral 128 al leerlas. Las imágenes se normalizan min-max por imagen.
"""
from __future__ import annotations

import hashlib
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Dict, Iterable, Iterator, List, Optional, Sequence, Tuple

import numpy as np
import torch
from PIL import Image, UnidentifiedImageError
from pydantic import Field, model_validator
from scipy import ndimage
from torch.utils.data import Dataset

from modules.errors import InvalidInputError
from modules.settings import ConfigModel

logger = logging.getLogger("capsule.data")

IMAGES_DIR = "images"
EXPERT_DIR = "masks_expert"
NONEXPERT_DIR = "masks_nonexpert"
MASK_THRESHOLD = 128


@dataclass(frozen=True, eq=False)
class SegSample:
    case_id: str
    slice_index: int
    image: np.ndarray            # float en [0, 1]
    expert_mask: np.ndarray      # uint8 {0, 1}
    nonexpert_mask: np.ndarray   # uint8 {0, 1}
    spacing: Tuple[float, float] = (1.0, 1.0)

    def __post_init__(self):
        if self.image.ndim != 2:
            raise InvalidInputError(f"{self.stem}: la imagen debe ser 2D; forma {self.image.shape}")
        if self.expert_mask.shape != self.image.shape or self.nonexpert_mask.shape != self.image.shape:
            raise InvalidInputError(f"{self.stem}: imagen y máscaras con formas distintas")
        if self.image.size and (self.image.min() < 0.0 or self.image.max() > 1.0):
            raise InvalidInputError(f"{self.stem}: la imagen debe estar en [0, 1]")
        for name, m in (("expert_mask", self.expert_mask), ("nonexpert_mask", self.nonexpert_mask)):
            if not np.isin(m, (0, 1)).all():
                raise InvalidInputError(f"{self.stem}: {name} no es binaria")

    @property
    def stem(self) -> str:
        return f"{self.case_id}_{self.slice_index:03d}"


class AugmentConfig(ConfigModel):
    max_rotation_degrees: float = Field(default=15.0, ge=0)
    horizontal_flip: bool = True
    intensity_scale_range: Tuple[float, float] = (0.9, 1.1)
    intensity_shift_range: Tuple[float, float] = (-0.1, 0.1)
    scale_range: Tuple[float, float] = (1.0, 1.0)
    seed: int = 0

    @model_validator(mode="after")
    def _check_ranges(self) -> "AugmentConfig":
        for name in ("intensity_scale_range", "intensity_shift_range", "scale_range"):
            lo, hi = getattr(self, name)
            if lo > hi:
                raise ValueError(f"{name} desordenado: ({lo}, {hi})")
        if self.scale_range[0] <= 0:
            raise ValueError("scale_range debe ser positivo")
        return self

    @classmethod
    def identity(cls, seed: int = 0) -> "AugmentConfig":
        return cls(
            max_rotation_degrees=0.0,
            horizontal_flip=False,
            intensity_scale_range=(1.0, 1.0),
            intensity_shift_range=(0.0, 0.0),
            seed=seed,
        )


@dataclass
class LoadedSplit:
    samples: List[SegSample] = field(default_factory=list)
    missing_nonexpert: int = 0

    def __len__(self) -> int:
        return len(self.samples)

    def __iter__(self) -> Iterator[SegSample]:
        return iter(self.samples)

    def __getitem__(self, i: int) -> SegSample:
        return self.samples[i]


# ==============================
# Preprocesamiento
# ==============================

def normalize(image) -> np.ndarray:
    """Min-max por imagen a [0, 1]; una imagen constante queda en ceros."""
    arr = np.asarray(image, dtype=np.float64)
    if not np.isfinite(arr).all():
        raise InvalidInputError("La imagen contiene valores no finitos")
    lo, hi = arr.min(), arr.max()
    if hi == lo:
        return np.zeros_like(arr)
    return (arr - lo) / (hi - lo)


def resize(sample: SegSample, target: int) -> SegSample:
    """Bilineal para la imagen, vecino más cercano para máscaras; ajusta el espaciado."""
    if target <= 0:
        raise InvalidInputError(f"target debe ser > 0 (recibido {target})")
    h, w = sample.image.shape
    if (h, w) == (target, target):
        return sample
    img = Image.fromarray(sample.image.astype(np.float32))
    img = np.asarray(img.resize((target, target), Image.Resampling.BILINEAR), dtype=np.float64)

    def _nearest(mask: np.ndarray) -> np.ndarray:
        m = Image.fromarray(mask.astype(np.uint8))
        return np.asarray(m.resize((target, target), Image.Resampling.NEAREST), dtype=np.uint8)

    dy, dx = sample.spacing
    return replace(
        sample,
        image=np.clip(img, 0.0, 1.0),
        expert_mask=_nearest(sample.expert_mask),
        nonexpert_mask=_nearest(sample.nonexpert_mask),
        spacing=(dy * h / target, dx * w / target),
    )


# ==============================
# Aumentación
# ==============================

def flip_horizontal(sample: SegSample) -> SegSample:
    return replace(
        sample,
        image=np.flip(sample.image, axis=1).copy(),
        expert_mask=np.flip(sample.expert_mask, axis=1).copy(),
        nonexpert_mask=np.flip(sample.nonexpert_mask, axis=1).copy(),
    )


def _affine(arr: np.ndarray, angle_deg: float, zoom: float, order: int) -> np.ndarray:
    """Rotación + escala alrededor del centro; fuera de la imagen se rellena con 0."""
    theta = math.radians(angle_deg)
    c, s = math.cos(theta), math.sin(theta)
    matrix = np.array([[c, -s], [s, c]]) / zoom
    center = (np.asarray(arr.shape, dtype=np.float64) - 1.0) / 2.0
    offset = center - matrix @ center
    return ndimage.affine_transform(arr, matrix, offset=offset, order=order, mode="constant", cval=0.0)


def augment(sample: SegSample, cfg: AugmentConfig, draw: np.random.Generator) -> SegSample:
    """
    Misma transformación geométrica para imagen y ambas máscaras (orden 0 en
    máscaras); la variación de intensidad solo afecta la imagen y se recorta a
    [0, 1]. Siempre se consumen los mismos sorteos, en el mismo orden.
    """
    angle = draw.uniform(-cfg.max_rotation_degrees, cfg.max_rotation_degrees)
    zoom = draw.uniform(*cfg.scale_range)
    flip = draw.random() < 0.5
    gain = draw.uniform(*cfg.intensity_scale_range)
    shift = draw.uniform(*cfg.intensity_shift_range)

    out = sample
    if angle != 0.0 or zoom != 1.0:
        out = replace(
            out,
            image=np.clip(_affine(out.image, angle, zoom, order=1), 0.0, 1.0),
            expert_mask=_affine(out.expert_mask, angle, zoom, order=0).astype(np.uint8),
            nonexpert_mask=_affine(out.nonexpert_mask, angle, zoom, order=0).astype(np.uint8),
        )
    if cfg.horizontal_flip and flip:
        out = flip_horizontal(out)
    if gain != 1.0 or shift != 0.0:
        out = replace(out, image=np.clip(gain * out.image + shift, 0.0, 1.0))
    return out


# ==============================
# Lectura / escritura en disco
# ==============================

def _parse_stem(path: Path) -> Tuple[str, int]:
    case_id, sep, idx = path.stem.rpartition("_")
    if not sep or not case_id or not idx.isdigit():
        raise InvalidInputError(f"Nombre de archivo sin formato <caso>_<corte>: {path}")
    return case_id, int(idx)


def _read_gray(path: Path) -> np.ndarray:
    try:
        with Image.open(path) as im:
            return np.asarray(im.convert("L"), dtype=np.uint8)
    except (OSError, UnidentifiedImageError) as exc:
        raise InvalidInputError(f"No se pudo leer el archivo {path}: {exc}") from exc


def _read_mask(path: Path) -> np.ndarray:
    return (_read_gray(path) >= MASK_THRESHOLD).astype(np.uint8)


def load_dataset(
    root: Path | str,
    split: str,
    spacing: Tuple[float, float] = (1.0, 1.0),
    workers: int = 0,
) -> LoadedSplit:
    """
    Arma las ternas (imagen, experta, no experta) emparejando por nombre.
    Sin máscara no experta se duplica la experta (el mapa difícil queda en
    cero) y se cuenta en `missing_nonexpert`.
    """
    split_dir = Path(root) / split
    if not split_dir.is_dir():
        raise InvalidInputError(f"No existe el directorio del split: {split_dir}")

    image_paths = sorted((split_dir / IMAGES_DIR).glob("*.png"))
    expert_paths = {p.stem: p for p in (split_dir / EXPERT_DIR).glob("*.png")}
    nonexpert_paths = {p.stem: p for p in (split_dir / NONEXPERT_DIR).glob("*.png")}

    image_stems = {p.stem for p in image_paths}
    orphans = sorted(set(expert_paths) - image_stems)
    if orphans:
        raise InvalidInputError(f"Máscara experta sin imagen: {expert_paths[orphans[0]]}")
    for p in image_paths:
        if p.stem not in expert_paths:
            raise InvalidInputError(f"Imagen sin máscara experta: {p}")

    if not image_paths:
        logger.warning("Split '%s' en %s sin muestras", split, split_dir)
        return LoadedSplit()

    def _load_one(img_path: Path) -> Tuple[SegSample, bool]:
        case_id, idx = _parse_stem(img_path)
        image = normalize(_read_gray(img_path))
        expert = _read_mask(expert_paths[img_path.stem])
        ne_path = nonexpert_paths.get(img_path.stem)
        missing = ne_path is None
        nonexpert = expert.copy() if missing else _read_mask(ne_path)
        if expert.shape != image.shape or nonexpert.shape != image.shape:
            raise InvalidInputError(f"Dimensiones inconsistentes para {img_path}")
        return SegSample(case_id, idx, image, expert, nonexpert, tuple(spacing)), missing

    if workers > 0:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_load_one, image_paths))
    else:
        results = [_load_one(p) for p in image_paths]

    out = LoadedSplit()
    for sample, missing in results:
        if missing:
            out.missing_nonexpert += 1
            logger.warning("Sin máscara no experta para %s; se usa la experta", sample.stem)
        out.samples.append(sample)
    logger.info("Split '%s': %d muestras (%d sin máscara no experta)", split, len(out), out.missing_nonexpert)
    return out


def write_split(samples: Iterable[SegSample], root: Path | str, split: str) -> int:
    """Escribe las ternas en la estructura estándar. Devuelve la cantidad escrita."""
    split_dir = Path(root) / split
    dirs = {name: split_dir / name for name in (IMAGES_DIR, EXPERT_DIR, NONEXPERT_DIR)}
    for d in dirs.values():
        d.mkdir(parents=True, exist_ok=True)
    n = 0
    for s in samples:
        name = f"{s.stem}.png"
        Image.fromarray(np.round(s.image * 255.0).astype(np.uint8)).save(dirs[IMAGES_DIR] / name)
        Image.fromarray((s.expert_mask * 255).astype(np.uint8)).save(dirs[EXPERT_DIR] / name)
        Image.fromarray((s.nonexpert_mask * 255).astype(np.uint8)).save(dirs[NONEXPERT_DIR] / name)
        n += 1
    return n


def dataset_fingerprint(root: Path | str) -> str:
    """sha256 sobre rutas relativas y contenido de todos los PNG bajo root."""
    root = Path(root)
    h = hashlib.sha256()
    for path in sorted(root.rglob("*.png")):
        h.update(path.relative_to(root).as_posix().encode("utf-8"))
        h.update(path.read_bytes())
    return h.hexdigest()


# ==============================
# Generador sintético
# ==============================

class SynthParams(ConfigModel):
    """
    Blob elíptico suave con bordes difusos y speckle multiplicativo. La máscara
    no experta desplaza el borde `perturb` píxeles como máximo.
    """

    perturb: float = Field(default=2.0, ge=0)
    speckle_looks: float = Field(default=4.0, gt=0)
    blur_sigma: float = Field(default=1.5, ge=0)
    inside_intensity: float = Field(default=0.7, ge=0, le=1)
    outside_intensity: float = Field(default=0.3, ge=0, le=1)
    harmonics: int = Field(default=3, ge=0)
    radius_range: Tuple[float, float] = (0.2, 0.32)
    spacing_mm: float = Field(default=1.0, gt=0)


def _synth_one(index: int, size: int, params: SynthParams, seed: int) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    rng = np.random.default_rng([seed, index])
    rng_ne = np.random.default_rng([seed, index, 1])

    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    cy = size / 2.0 + rng.uniform(-0.08, 0.08) * size
    cx = size / 2.0 + rng.uniform(-0.08, 0.08) * size
    a = rng.uniform(*params.radius_range) * size
    b = rng.uniform(*params.radius_range) * size
    phi = rng.uniform(0.0, math.pi)

    dy, dx = yy - cy, xx - cx
    u = dx * math.cos(phi) + dy * math.sin(phi)
    v = -dx * math.sin(phi) + dy * math.cos(phi)
    theta = np.arctan2(v / b, u / a)
    rho = np.sqrt((u / a) ** 2 + (v / b) ** 2)

    contour = np.ones_like(theta)
    for k in range(2, params.harmonics + 2):
        contour += rng.uniform(-0.06, 0.06) * np.cos(k * theta + rng.uniform(0.0, 2 * math.pi))
    expert = (rho <= contour).astype(np.uint8)

    # ruido de borde suave, |noise| <= 1; se sortea siempre para que la
    # máscara no experta dependa solo de la amplitud
    coeffs = rng_ne.uniform(-1.0, 1.0, size=4)
    phases = rng_ne.uniform(0.0, 2 * math.pi, size=4)
    noise = sum(c * np.cos((k + 1) * theta + p) for k, (c, p) in enumerate(zip(coeffs, phases)))
    noise = noise / max(float(np.abs(coeffs).sum()), 1e-12)
    if params.perturb == 0:
        nonexpert = expert.copy()
    else:
        mean_radius = (a + b) / 2.0
        nonexpert = (rho <= contour + params.perturb * noise / mean_radius).astype(np.uint8)

    base = np.where(expert == 1, params.inside_intensity, params.outside_intensity)
    if params.blur_sigma > 0:
        base = ndimage.gaussian_filter(base, sigma=params.blur_sigma)
    speckle = rng.gamma(shape=params.speckle_looks, scale=1.0 / params.speckle_looks, size=base.shape)
    image = normalize(base * speckle)
    return image, expert, nonexpert


def synth_generate(
    count: int,
    size: int,
    params: Optional[SynthParams] = None,
    seed: int = 0,
    cases: Optional[int] = None,
    case_offset: int = 0,
) -> List[SegSample]:
    """
    Genera `count` muestras determinísticas repartidas en `cases` casos
    contiguos (por defecto, de a 8 cortes por caso).
    """
    if count < 1:
        raise InvalidInputError(f"count debe ser >= 1 (recibido {count})")
    if size < 16:
        raise InvalidInputError(f"size debe ser >= 16 (recibido {size})")
    params = params or SynthParams()
    cases = cases or max(1, math.ceil(count / 8))
    cases = min(cases, count)

    samples: List[SegSample] = []
    first_index: Dict[int, int] = {}
    for i in range(count):
        case = i * cases // count
        first_index.setdefault(case, i)
        image, expert, nonexpert = _synth_one(i, size, params, seed)
        samples.append(
            SegSample(
                case_id=f"case{case + case_offset:03d}",
                slice_index=i - first_index[case],
                image=image,
                expert_mask=expert,
                nonexpert_mask=nonexpert,
                spacing=(params.spacing_mm, params.spacing_mm),
            )
        )
    return samples


def disagreement_fraction(samples: Sequence[SegSample]) -> float:
    """Fracción media de píxeles donde experta y no experta difieren."""
    if not samples:
        return 0.0
    return float(np.mean([np.mean(s.expert_mask != s.nonexpert_mask) for s in samples]))


# ==============================
# Dataset de torch
# ==============================

class CapsuleDataset(Dataset):
    """
    Redimensiona una vez a `input_size` y aumenta por ítem con un generador
    derivado de (semilla, época, índice): el resultado no depende del orden
    ni del worker que lo procese.
    """

    def __init__(
        self,
        samples: Sequence[SegSample],
        input_size: Optional[int] = None,
        augment_cfg: Optional[AugmentConfig] = None,
    ):
        self.samples = [resize(s, input_size) if input_size else s for s in samples]
        self.augment_cfg = augment_cfg
        self.epoch = 0

    def set_epoch(self, epoch: int) -> None:
        self.epoch = int(epoch)

    def __len__(self) -> int:
        return len(self.samples)

    def __getitem__(self, index: int) -> Dict[str, torch.Tensor]:
        sample = self.samples[index]
        if self.augment_cfg is not None:
            draw = np.random.default_rng([self.augment_cfg.seed, self.epoch, index])
            sample = augment(sample, self.augment_cfg, draw)
        return {
            "image": torch.from_numpy(sample.image.astype(np.float32))[None],
            "expert": torch.from_numpy(sample.expert_mask.astype(np.float32))[None],
            "nonexpert": torch.from_numpy(sample.nonexpert_mask.astype(np.float32))[None],
            "index": torch.tensor(index),
        }
