# model.py
# -*- coding: utf-8 -*-
"""
Codificador-decodificador híbrido CNN + transformer con supervisión profunda.

    imagen -> stem convolucional (etapas stride 2, guarda skips)
           -> embedding de parches + posicional -> L capas transformer
           -> decodificador con skips -> cabeza a resolución completa
                                       + cabezas 1x1 a 1/2, 1/4, 1/8

Las cabezas laterales devuelven logits (sin sigmoide) para que todas las
pérdidas consuman logits de la misma forma.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Dict, List, Mapping, Tuple

import torch
import torch.nn as nn
from pydantic import Field, model_validator

from modules.errors import ConfigurationError, InvalidInputError
from modules.losses import LossConfig, LossKind, compute_loss
from modules.settings import ConfigModel


def _is_power_of_two(n: int) -> bool:
    return n >= 1 and (n & (n - 1)) == 0


class ModelConfig(ConfigModel):
    """
    `patch_size` se mide en píxeles de entrada; sobre el mapa del stem el
    parche efectivo es patch_size / 2^etapas. `supervision_scales` guarda los
    denominadores de escala (2 -> 1/2). `scale_weights` incluye primero la
    cabeza a resolución completa y luego una por escala.
    """

    input_size: int = Field(default=64, ge=8)
    in_channels: int = Field(default=1, ge=1)
    patch_size: int = Field(default=16, ge=1)
    embed_dim: int = Field(default=64, ge=1)
    depth: int = Field(default=2, ge=1)
    heads: int = Field(default=2, ge=1)
    mlp_ratio: int = Field(default=4, ge=1)
    stem_channels: Tuple[int, ...] = (16, 32, 64)
    stem_dilation: int = Field(default=1, ge=1)
    supervision_scales: Tuple[int, ...] = (2, 4, 8)
    scale_weights: Tuple[float, ...] = (1.0, 1.0, 1.0, 1.0)

    @model_validator(mode="after")
    def _check_shapes(self) -> "ModelConfig":
        if not self.stem_channels or any(c < 1 for c in self.stem_channels):
            raise ValueError("stem_channels debe tener al menos una etapa con canales positivos")
        factor = self.stem_factor
        if self.patch_size % factor != 0:
            raise ValueError(f"patch_size ({self.patch_size}) debe ser múltiplo del factor del stem ({factor})")
        if self.input_size % self.patch_size != 0:
            raise ValueError(f"input_size ({self.input_size}) no es divisible por patch_size ({self.patch_size})")
        if self.embed_dim % self.heads != 0:
            raise ValueError(f"embed_dim ({self.embed_dim}) no es divisible por heads ({self.heads})")
        for s in self.supervision_scales:
            if not _is_power_of_two(s) or s < 2 or s > factor:
                raise ValueError(f"Escala 1/{s} no disponible (potencias de 2 entre 2 y {factor})")
            if self.input_size % s != 0:
                raise ValueError(f"input_size ({self.input_size}) no es divisible por la escala 1/{s}")
        if len(set(self.supervision_scales)) != len(self.supervision_scales):
            raise ValueError("supervision_scales repetidas")
        if len(self.scale_weights) != 1 + len(self.supervision_scales):
            raise ValueError("scale_weights debe tener 1 + len(supervision_scales) elementos")
        if any(w < 0 for w in self.scale_weights) or not any(w > 0 for w in self.scale_weights):
            raise ValueError("scale_weights deben ser >= 0 y al menos uno > 0")
        return self

    @property
    def stem_factor(self) -> int:
        return 2 ** len(self.stem_channels)

    @property
    def feature_patch(self) -> int:
        return self.patch_size // self.stem_factor

    @property
    def num_tokens(self) -> int:
        return (self.input_size // self.patch_size) ** 2

    def head_weights(self) -> Dict[int, float]:
        heads = (1,) + tuple(self.supervision_scales)
        return dict(zip(heads, self.scale_weights))

    @classmethod
    def preset(cls, name: str, **overrides) -> "ModelConfig":
        presets = {
            # desk: pesos decrecientes, la cabeza completa domina la pérdida
            "desk": dict(
                input_size=64,
                stem_channels=(32, 64, 128),
                embed_dim=128,
                depth=2,
                heads=4,
                scale_weights=(1.0, 0.5, 0.25, 0.125),
            ),
            "full": dict(input_size=224, stem_channels=(64, 128, 256), embed_dim=768, depth=12, heads=12),
        }
        if name not in presets:
            raise ConfigurationError(f"Preset desconocido '{name}'. Opciones: {sorted(presets)}")
        return cls(**{**presets[name], **overrides})


@dataclass
class MultiScalePrediction:
    full_logits: torch.Tensor
    side_logits: Dict[int, torch.Tensor] = field(default_factory=dict)


# ==============================
# Bloques
# ==============================

class ConvBlock(nn.Module):
    def __init__(self, in_channels: int, out_channels: int, stride: int = 1, dilation: int = 1):
        super().__init__()
        self.conv = nn.Sequential(
            nn.Conv2d(in_channels, out_channels, kernel_size=3, stride=stride,
                      padding=dilation, dilation=dilation, bias=False),
            nn.BatchNorm2d(out_channels),
            nn.ReLU(inplace=True),
        )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.conv(x)


class StemStage(nn.Module):
    """Reduce la resolución a la mitad; la segunda convolución admite dilatación."""

    def __init__(self, in_channels: int, out_channels: int, dilation: int = 1):
        super().__init__()
        self.down = ConvBlock(in_channels, out_channels, stride=2)
        self.context = ConvBlock(out_channels, out_channels, dilation=dilation)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.context(self.down(x))


class PatchEmbedding(nn.Module):
    """
    z0 = [x_1 E; ...; x_N E] + E_pos, con N = H·W / P² parches en orden raster.
    La proyección lineal E se implementa como convolución de paso P sin sesgo.
    """

    def __init__(self, in_channels: int, patch_size: int, embed_dim: int, num_patches: int):
        super().__init__()
        self.patch_size = patch_size
        self.proj = nn.Conv2d(in_channels, embed_dim, kernel_size=patch_size, stride=patch_size, bias=False)
        self.pos_embed = nn.Parameter(torch.zeros(1, num_patches, embed_dim))
        nn.init.trunc_normal_(self.pos_embed, std=0.02)

    def forward(self, features: torch.Tensor) -> torch.Tensor:
        h, w = features.shape[-2:]
        if h % self.patch_size or w % self.patch_size:
            raise ConfigurationError(f"Mapa {h}x{w} no divisible por el parche {self.patch_size}")
        tokens = self.proj(features).flatten(2).transpose(1, 2)
        if tokens.shape[1] != self.pos_embed.shape[1]:
            raise ConfigurationError(
                f"Cantidad de tokens {tokens.shape[1]} distinta de la esperada {self.pos_embed.shape[1]}"
            )
        return tokens + self.pos_embed


class TransformerLayer(nn.Module):
    """z' = MHSA(LN(z)) + z ;  z_out = FFN(LN(z')) + z'"""

    def __init__(self, embed_dim: int, heads: int, mlp_ratio: int = 4):
        super().__init__()
        if embed_dim % heads != 0:
            raise ConfigurationError(f"embed_dim ({embed_dim}) no es divisible por heads ({heads})")
        self.norm1 = nn.LayerNorm(embed_dim)
        self.attn = nn.MultiheadAttention(embed_dim, heads, batch_first=True)
        self.norm2 = nn.LayerNorm(embed_dim)
        self.ffn = nn.Sequential(
            nn.Linear(embed_dim, embed_dim * mlp_ratio),
            nn.GELU(),
            nn.Linear(embed_dim * mlp_ratio, embed_dim),
        )

    def forward(self, z: torch.Tensor) -> torch.Tensor:
        h = self.norm1(z)
        attended, _ = self.attn(h, h, h, need_weights=False)
        z = z + attended
        return z + self.ffn(self.norm2(z))

    def attention_weights(self, z: torch.Tensor) -> torch.Tensor:
        """Pesos de atención (B, heads, N, N); cada fila suma 1 sobre las claves."""
        h = self.norm1(z)
        _, weights = self.attn(h, h, h, need_weights=True, average_attn_weights=False)
        return weights


class DecoderStage(nn.Module):
    def __init__(self, in_channels: int, skip_channels: int, out_channels: int):
        super().__init__()
        self.up = nn.ConvTranspose2d(in_channels, out_channels, kernel_size=2, stride=2)
        self.block = nn.Sequential(
            ConvBlock(out_channels + skip_channels, out_channels),
            ConvBlock(out_channels, out_channels),
        )

    def forward(self, x: torch.Tensor, skip: torch.Tensor | None = None) -> torch.Tensor:
        x = self.up(x)
        if skip is not None:
            x = torch.cat([x, skip], dim=1)
        return self.block(x)


# ==============================
# Red completa
# ==============================

class CapsuleTransUNet(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        chans = list(cfg.stem_channels)

        self.stem = nn.ModuleList()
        prev = cfg.in_channels
        for c in chans:
            self.stem.append(StemStage(prev, c, dilation=cfg.stem_dilation))
            prev = c

        self.embed = PatchEmbedding(chans[-1], cfg.feature_patch, cfg.embed_dim, cfg.num_tokens)
        self.encoder = nn.Sequential(
            *[TransformerLayer(cfg.embed_dim, cfg.heads, cfg.mlp_ratio) for _ in range(cfg.depth)]
        )
        self.encoder_norm = nn.LayerNorm(cfg.embed_dim)

        # tokens -> mapa a la resolución del stem (1/2^etapas)
        fp = cfg.feature_patch
        if fp > 1:
            self.unpatch = nn.ConvTranspose2d(cfg.embed_dim, chans[-1], kernel_size=fp, stride=fp)
        else:
            self.unpatch = nn.Conv2d(cfg.embed_dim, chans[-1], kernel_size=1)
        self.fuse = nn.Sequential(ConvBlock(2 * chans[-1], chans[-1]), ConvBlock(chans[-1], chans[-1]))

        # canales del decodificador por denominador de escala
        self.level_channels: Dict[int, int] = {cfg.stem_factor: chans[-1]}
        self.decoder = nn.ModuleList()
        for k in range(len(chans) - 2, -1, -1):
            self.decoder.append(DecoderStage(chans[k + 1], chans[k], chans[k]))
            self.level_channels[2 ** (k + 1)] = chans[k]
        full_channels = max(chans[0] // 2, 8)
        self.final_up = DecoderStage(chans[0], 0, full_channels)
        self.level_channels[1] = full_channels

        self.full_head = nn.Conv2d(full_channels, 1, kernel_size=1)
        self.side_heads = nn.ModuleDict(
            {str(s): nn.Conv2d(self.level_channels[s], 1, kernel_size=1) for s in cfg.supervision_scales}
        )

    def forward(self, image: torch.Tensor) -> MultiScalePrediction:
        cfg = self.cfg
        expected = (cfg.in_channels, cfg.input_size, cfg.input_size)
        if image.ndim != 4 or tuple(image.shape[1:]) != expected:
            raise InvalidInputError(f"Se esperaba (B, {expected[0]}, {expected[1]}, {expected[2]}); recibido {tuple(image.shape)}")

        skips: List[torch.Tensor] = []
        x = image
        for stage in self.stem:
            x = stage(x)
            skips.append(x)

        tokens = self.encoder_norm(self.encoder(self.embed(x)))
        b, n, d = tokens.shape
        grid = int(math.isqrt(n))
        x = tokens.transpose(1, 2).reshape(b, d, grid, grid)
        x = self.fuse(torch.cat([self.unpatch(x), skips[-1]], dim=1))

        levels: Dict[int, torch.Tensor] = {cfg.stem_factor: x}
        for i, stage in enumerate(self.decoder):
            k = len(skips) - 2 - i
            x = stage(x, skips[k])
            levels[2 ** (k + 1)] = x
        x = self.final_up(x)

        side = {s: self.side_heads[str(s)](levels[s]) for s in cfg.supervision_scales}
        return MultiScalePrediction(full_logits=self.full_head(x), side_logits=side)


def build_model(cfg: ModelConfig, seed: int = 0) -> CapsuleTransUNet:
    """Inicialización determinística a partir de la semilla."""
    torch.manual_seed(seed)
    return CapsuleTransUNet(cfg)


# ==============================
# Supervisión multiescala
# ==============================

def downsample_mask(mask, factor: int):
    """Submuestreo por vecino más cercano (esquina superior izquierda de cada bloque)."""
    if not _is_power_of_two(factor):
        raise InvalidInputError(f"factor debe ser potencia de 2 (recibido {factor})")
    h, w = mask.shape[-2:]
    if h % factor or w % factor:
        raise InvalidInputError(f"Máscara {h}x{w} no divisible por {factor}")
    if factor == 1:
        return mask
    return mask[..., ::factor, ::factor]


def combine_scale_losses(losses: Mapping[int, torch.Tensor], weights: Mapping[int, float]) -> torch.Tensor:
    """Promedio ponderado Σ w_s·L_s / Σ w_s."""
    total_weight = sum(float(weights[s]) for s in losses)
    if total_weight <= 0:
        raise ConfigurationError("La suma de pesos de escala debe ser positiva")
    return sum(float(weights[s]) * loss for s, loss in losses.items()) / total_weight


def multiscale_loss(
    pred: MultiScalePrediction,
    expert_mask: torch.Tensor,
    nonexpert_mask: torch.Tensor,
    base_loss: LossKind,
    cfg: LossConfig,
    head_weights: Mapping[int, float],
) -> torch.Tensor:
    """
    Pérdida seleccionada en cada cabeza contra las máscaras submuestreadas a
    su escala. El mapa de regiones difíciles se recalcula en cada escala a
    partir de las máscaras submuestreadas.
    """
    losses: Dict[int, torch.Tensor] = {}
    for scale, weight in head_weights.items():
        if scale == 1:
            logits = pred.full_logits
        elif scale in pred.side_logits:
            logits = pred.side_logits[scale]
        else:
            raise ConfigurationError(f"Falta la salida lateral para la escala 1/{scale}")
        if weight == 0:
            continue
        losses[scale] = compute_loss(
            base_loss,
            logits,
            downsample_mask(expert_mask, scale),
            downsample_mask(nonexpert_mask, scale),
            cfg,
        )
    return combine_scale_losses(losses, head_weights)
