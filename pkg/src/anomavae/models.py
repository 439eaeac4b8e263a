"""Convolutional autoencoder architectures.

Both model kinds share the same 64x64x3 encoder/decoder pair; only the
bottleneck differs.  The variational models split into parallel mean and
log-variance heads, the plain autoencoder uses a single bottleneck
convolution.  Public entry points take and return channels-last tensors
(N, 64, 64, 3); layout is converted to channels-first internally.
"""

from __future__ import annotations

from collections import OrderedDict
from dataclasses import dataclass
from typing import NamedTuple

import torch
from torch import nn

from .data import IMAGE_SIZE
from .errors import ConfigError, ShapeError

KIND_BETA_VAE = "beta_vae"
KIND_VAE = "vae"
KIND_CAE = "cae"
MODEL_KINDS = (KIND_BETA_VAE, KIND_VAE, KIND_CAE)

_KERNEL = 3
_PADDING = 1
_GRID = 8  # spatial size of the bottleneck feature map


@dataclass(frozen=True)
class ModelSpec:
    """Architecture description, fully determining the network shape."""

    kind: str = KIND_BETA_VAE
    latent_dim: int = 640
    encoder_filters: tuple[int, ...] = (16, 32, 64, 128, 256)
    leaky_slope: float = 0.01
    pool_after: tuple[int, ...] = (2, 3, 4)
    upsample_after: tuple[int, ...] = (2, 3, 4)

    @property
    def bottleneck_channels(self) -> int:
        return self.latent_dim // (_GRID * _GRID)

    @property
    def decoder_filters(self) -> tuple[int, ...]:
        # Mirror the encoder ladder back down, then project to RGB.
        return tuple(reversed(self.encoder_filters)) + (3,)


def validate_model_spec(spec: ModelSpec) -> None:
    if spec.kind not in MODEL_KINDS:
        raise ConfigError(f"unknown model kind {spec.kind!r}; choose from {MODEL_KINDS}")
    if spec.latent_dim <= 0 or spec.latent_dim % (_GRID * _GRID) != 0:
        raise ConfigError(
            f"latent_dim must be a positive multiple of {_GRID * _GRID} "
            f"(reshapes to Cx{_GRID}x{_GRID}), got {spec.latent_dim}"
        )
    filters = spec.encoder_filters
    if len(filters) != 5:
        raise ConfigError(f"encoder needs exactly 5 stages, got {len(filters)}")
    if any(f <= 0 for f in filters):
        raise ConfigError(f"encoder filter counts must be positive, got {filters}")
    if any(a > b for a, b in zip(filters, filters[1:])):
        raise ConfigError(f"encoder filters must be non-decreasing, got {filters}")
    if filters[-1] != 256:
        raise ConfigError(f"encoder filter ladder must end at 256, got {filters}")
    if not (0 < spec.leaky_slope < 1):
        raise ConfigError(f"leaky_slope must lie in (0, 1), got {spec.leaky_slope}")
    for name, placement, n_stages in (
        ("pool_after", spec.pool_after, 5),
        ("upsample_after", spec.upsample_after, 6),
    ):
        if len(placement) != 3 or list(placement) != sorted(set(placement)):
            raise ConfigError(f"{name} must be 3 distinct ascending stages, got {placement}")
        if any(not 1 <= p <= n_stages for p in placement):
            raise ConfigError(f"{name} entries must lie in 1..{n_stages}, got {placement}")


class EncoderOutput(NamedTuple):
    mu: torch.Tensor
    log_var: torch.Tensor


def _check_image_batch(x: torch.Tensor) -> torch.Tensor:
    expected = (IMAGE_SIZE, IMAGE_SIZE, 3)
    if x.dim() != 4 or tuple(x.shape[1:]) != expected:
        raise ShapeError(
            f"expected image batch of shape (N, {expected[0]}, {expected[1]}, "
            f"{expected[2]}), got {tuple(x.shape)}"
        )
    return x.permute(0, 3, 1, 2).contiguous()


def _encoder_trunk(spec: ModelSpec) -> nn.Sequential:
    layers: OrderedDict[str, nn.Module] = OrderedDict()
    in_ch = 3
    for i, out_ch in enumerate(spec.encoder_filters, start=1):
        layers[f"conv{i}"] = nn.Conv2d(in_ch, out_ch, _KERNEL, stride=1, padding=_PADDING)
        layers[f"bn{i}"] = nn.BatchNorm2d(out_ch)
        layers[f"act{i}"] = nn.LeakyReLU(spec.leaky_slope)
        if i in spec.pool_after:
            layers[f"pool{i}"] = nn.MaxPool2d(2, 2)
        in_ch = out_ch
    return nn.Sequential(layers)


def _decoder(spec: ModelSpec) -> nn.Sequential:
    layers: OrderedDict[str, nn.Module] = OrderedDict()
    ladder = spec.decoder_filters
    in_ch = spec.bottleneck_channels
    last = len(ladder)
    for i, out_ch in enumerate(ladder, start=1):
        layers[f"tconv{i}"] = nn.ConvTranspose2d(
            in_ch, out_ch, _KERNEL, stride=1, padding=_PADDING
        )
        if i < last:
            layers[f"bn{i}"] = nn.BatchNorm2d(out_ch)
            layers[f"act{i}"] = nn.LeakyReLU(spec.leaky_slope)
        else:
            # Output stage: tanh keeps reconstructions inside (-1, 1),
            # no normalisation after it.
            layers["tanh"] = nn.Tanh()
        if i in spec.upsample_after:
            layers[f"up{i}"] = nn.Upsample(scale_factor=2, mode="bicubic", align_corners=False)
        in_ch = out_ch
    return nn.Sequential(layers)


class VaeModel(nn.Module):
    """Variational autoencoder with parallel mean / log-variance heads."""

    def __init__(self, spec: ModelSpec):
        super().__init__()
        validate_model_spec(spec)
        if spec.kind == KIND_CAE:
            raise ConfigError("use CaeModel for kind=cae")
        self.spec = spec
        self.encoder = _encoder_trunk(spec)
        ch = spec.bottleneck_channels
        self.mu_head = nn.Conv2d(spec.encoder_filters[-1], ch, _KERNEL, padding=_PADDING)
        self.log_var_head = nn.Conv2d(spec.encoder_filters[-1], ch, _KERNEL, padding=_PADDING)
        self.decoder = _decoder(spec)

    def encode(self, x: torch.Tensor) -> EncoderOutput:
        h = self.encoder(_check_image_batch(x))
        mu = self.mu_head(h).flatten(start_dim=1)
        log_var = self.log_var_head(h).flatten(start_dim=1)
        return EncoderOutput(mu=mu, log_var=log_var)

    def decode(self, z: torch.Tensor) -> torch.Tensor:
        if z.dim() != 2 or z.shape[1] != self.spec.latent_dim:
            raise ShapeError(
                f"expected latent batch of shape (N, {self.spec.latent_dim}), "
                f"got {tuple(z.shape)}"
            )
        grid = z.reshape(z.shape[0], self.spec.bottleneck_channels, _GRID, _GRID)
        return self.decoder(grid).permute(0, 2, 3, 1)

    def forward(
        self, x: torch.Tensor, generator: torch.Generator | None = None
    ) -> tuple[torch.Tensor, EncoderOutput, torch.Tensor]:
        """Encode, sample, decode.

        With ``generator`` the latent is sampled via the reparameterization
        trick; without one the noise is fixed at zero, which makes
        validation and scoring deterministic.
        """
        enc = self.encode(x)
        if generator is None:
            eps = torch.zeros_like(enc.mu)
        else:
            eps = torch.empty_like(enc.mu).normal_(generator=generator)
        z = reparameterize(enc, eps)
        return self.decode(z), enc, z


class CaeModel(nn.Module):
    """Plain convolutional autoencoder; single bottleneck convolution."""

    def __init__(self, spec: ModelSpec):
        super().__init__()
        validate_model_spec(spec)
        if spec.kind != KIND_CAE:
            raise ConfigError(f"CaeModel requires kind={KIND_CAE!r}, got {spec.kind!r}")
        self.spec = spec
        self.encoder = _encoder_trunk(spec)
        self.bottleneck_conv = nn.Conv2d(
            spec.encoder_filters[-1], spec.bottleneck_channels, _KERNEL, padding=_PADDING
        )
        self.decoder = _decoder(spec)

    def bottleneck(self, x: torch.Tensor) -> torch.Tensor:
        return self.bottleneck_conv(self.encoder(_check_image_batch(x))).flatten(start_dim=1)

    def decode(self, z: torch.Tensor) -> torch.Tensor:
        if z.dim() != 2 or z.shape[1] != self.spec.latent_dim:
            raise ShapeError(
                f"expected latent batch of shape (N, {self.spec.latent_dim}), "
                f"got {tuple(z.shape)}"
            )
        grid = z.reshape(z.shape[0], self.spec.bottleneck_channels, _GRID, _GRID)
        return self.decoder(grid).permute(0, 2, 3, 1)

    def forward(self, x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        z = self.bottleneck(x)
        return self.decode(z), z


def reparameterize(enc: EncoderOutput, eps: torch.Tensor) -> torch.Tensor:
    """z = mu + sigma * eps with sigma = exp(log_var / 2)."""
    if eps.shape != enc.mu.shape:
        raise ShapeError(
            f"eps shape {tuple(eps.shape)} must match mu shape {tuple(enc.mu.shape)}"
        )
    return enc.mu + torch.exp(enc.log_var / 2.0) * eps


def build_model(spec: ModelSpec) -> nn.Module:
    validate_model_spec(spec)
    return CaeModel(spec) if spec.kind == KIND_CAE else VaeModel(spec)


def decoder_layers(model: nn.Module) -> "OrderedDict[str, list[nn.Parameter]]":
    """Parameterized decoder layers in forward order.

    Transposed convolutions and their batch norms each count as one layer;
    activation, upsampling and tanh stages carry no parameters and are
    skipped.
    """
    layers: OrderedDict[str, list[nn.Parameter]] = OrderedDict()
    for name, module in model.decoder.named_children():
        params = [p for p in module.parameters(recurse=False)]
        if params:
            layers[name] = params
    return layers
