"""Cross-encoder over volumetric visit pairs.

The encoder maps a volume to a latent code split into a small dynamic block
d and a large static block s. Decoding a code whose static block came from
the other visit of the same subject forces d to carry the within-subject
change and s the identity. A small MLP head classifies on top of a chosen
latent block.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field

import torch
import torch.nn.functional as F
from torch import nn

from .errors import ModelError


def _valid_extent(n: int) -> bool:
    # Four halvings need either clean /16 divisibility or a power of two
    # that ceil-mode pooling can clamp at 1.
    return n % 16 == 0 or (n >= 8 and n & (n - 1) == 0)


def _halved(extent: int) -> int:
    return max(math.ceil(extent / 2), 1)


@dataclass(frozen=True)
class ModelSpec:
    input_shape: tuple[int, int, int] = (64, 64, 64)
    latent_dim: int = 1024
    dynamic_dim: int = 256
    encoder_channels: tuple[int, int, int, int] = (16, 32, 64, 128)
    decoder_channels: tuple[int, int, int, int] = (128, 64, 32, 16)
    leaky_slope: float = 0.01

    def __post_init__(self):
        if len(self.input_shape) != 3:
            raise ModelError(f"input_shape must have 3 extents, got {self.input_shape}")
        for n in self.input_shape:
            if not _valid_extent(n):
                raise ModelError(
                    f"input extent {n} not supported: extents must be divisible "
                    f"by 16 or a power of two >= 8 (got shape {self.input_shape})"
                )
        if self.latent_dim <= 0:
            raise ModelError(f"latent_dim must be > 0, got {self.latent_dim}")
        if not 0 < self.dynamic_dim < self.latent_dim:
            raise ModelError(
                f"dynamic_dim must satisfy 0 < dynamic_dim < latent_dim, "
                f"got {self.dynamic_dim} vs latent_dim {self.latent_dim}"
            )
        if len(self.encoder_channels) != 4 or len(self.decoder_channels) != 4:
            raise ModelError("encoder_channels and decoder_channels must have 4 entries")
        if any(c <= 0 for c in (*self.encoder_channels, *self.decoder_channels)):
            raise ModelError("channel counts must be positive")
        if self.leaky_slope <= 0:
            raise ModelError(f"leaky_slope must be > 0, got {self.leaky_slope}")

    @property
    def static_dim(self) -> int:
        return self.latent_dim - self.dynamic_dim

    @property
    def block_shapes(self) -> tuple[tuple[int, int, int], ...]:
        """Spatial shape before pooling and after each of the 4 poolings."""
        shapes = [tuple(self.input_shape)]
        for _ in range(4):
            shapes.append(tuple(_halved(n) for n in shapes[-1]))
        return tuple(shapes)

    @property
    def coarse_shape(self) -> tuple[int, int, int]:
        return self.block_shapes[-1]

    @property
    def flat_dim(self) -> int:
        return self.encoder_channels[-1] * math.prod(self.coarse_shape)


@dataclass(frozen=True)
class LatentCode:
    d: torch.Tensor
    s: torch.Tensor

    def __post_init__(self):
        if self.d.ndim != 2 or self.s.ndim != 2:
            raise ModelError(
                f"latent blocks must be (batch, dim), got d {tuple(self.d.shape)} "
                f"and s {tuple(self.s.shape)}"
            )
        if self.d.shape[0] != self.s.shape[0]:
            raise ModelError(
                f"latent blocks disagree on batch size: {self.d.shape[0]} vs "
                f"{self.s.shape[0]}"
            )

    @property
    def full(self) -> torch.Tensor:
        return torch.cat([self.d, self.s], dim=1)


def swap_static(code_a: LatentCode, code_b: LatentCode) -> tuple[LatentCode, LatentCode]:
    """([d_a, s_b], [d_b, s_a]); applying twice restores the originals."""
    if code_a.d.shape != code_b.d.shape or code_a.s.shape != code_b.s.shape:
        raise ModelError(
            f"cannot swap static blocks of mismatched codes: "
            f"d {tuple(code_a.d.shape)} vs {tuple(code_b.d.shape)}, "
            f"s {tuple(code_a.s.shape)} vs {tuple(code_b.s.shape)}"
        )
    return LatentCode(code_a.d, code_b.s), LatentCode(code_b.d, code_a.s)


def _init_module(module: nn.Module, slope: float) -> None:
    if isinstance(module, (nn.Conv3d, nn.Linear)):
        nn.init.kaiming_normal_(module.weight, a=slope, mode="fan_in", nonlinearity="leaky_relu")
        if module.bias is not None:
            nn.init.zeros_(module.bias)


class CrossEncoder(nn.Module):
    """Four conv/pool encoder blocks, a latent bottleneck split at
    dynamic_dim, and a mirrored decoder with explicit per-block upsample
    targets so output shape always equals input shape."""

    def __init__(self, spec: ModelSpec):
        super().__init__()
        self.spec = spec
        in_ch = 1
        enc = []
        for ch in spec.encoder_channels:
            enc.append(
                nn.Sequential(
                    nn.Conv3d(in_ch, ch, kernel_size=3, padding=1),
                    nn.BatchNorm3d(ch),
                    nn.LeakyReLU(spec.leaky_slope),
                )
            )
            in_ch = ch
        self.encoder_blocks = nn.ModuleList(enc)
        self.pool = nn.MaxPool3d(kernel_size=2, ceil_mode=True)
        self.to_latent = nn.Linear(spec.flat_dim, spec.latent_dim)
        self.from_latent = nn.Linear(spec.latent_dim, spec.flat_dim)

        dec = []
        in_ch = spec.encoder_channels[-1]
        for ch in spec.decoder_channels:
            dec.append(
                nn.Sequential(
                    nn.Conv3d(in_ch, ch, kernel_size=3, padding=1),
                    nn.BatchNorm3d(ch),
                    nn.LeakyReLU(spec.leaky_slope),
                )
            )
            in_ch = ch
        self.decoder_blocks = nn.ModuleList(dec)
        self.output_conv = nn.Conv3d(in_ch, 1, kernel_size=3, padding=1)

        self.apply(lambda m: _init_module(m, spec.leaky_slope))
        # Learnable logistic bias for the contrastive objective; lives with
        # the model so the optimizer and checkpoints carry it.
        self.contrastive_bias = nn.Parameter(torch.tensor(-10.0))

    def _check_input(self, x: torch.Tensor) -> torch.Tensor:
        if x.ndim == 4:
            x = x.unsqueeze(1)
        if x.ndim != 5 or x.shape[1] != 1:
            raise ModelError(
                f"expected input of shape (batch, 1, D, H, W), got {tuple(x.shape)}"
            )
        if tuple(x.shape[2:]) != tuple(self.spec.input_shape):
            raise ModelError(
                f"input spatial shape {tuple(x.shape[2:])} does not match "
                f"model spec {tuple(self.spec.input_shape)}"
            )
        return x

    def encode_with_activations(self, x: torch.Tensor) -> tuple[LatentCode, torch.Tensor]:
        """LatentCode plus the last block's pre-pool activations (the
        attribution target)."""
        x = self._check_input(x)
        h = x
        pre_pool = None
        for block in self.encoder_blocks:
            h = block(h)
            pre_pool = h
            h = self.pool(h)
        z = self.to_latent(h.flatten(1))
        code = LatentCode(z[:, : self.spec.dynamic_dim], z[:, self.spec.dynamic_dim :])
        return code, pre_pool

    def encode(self, x: torch.Tensor) -> LatentCode:
        return self.encode_with_activations(x)[0]

    def decode(self, code: LatentCode) -> torch.Tensor:
        z = code.full
        if z.shape[1] != self.spec.latent_dim:
            raise ModelError(
                f"code length {z.shape[1]} does not match latent_dim "
                f"{self.spec.latent_dim}"
            )
        shapes = self.spec.block_shapes
        h = self.from_latent(z)
        h = h.reshape(-1, self.spec.encoder_channels[-1], *self.spec.coarse_shape)
        for i, block in enumerate(self.decoder_blocks):
            h = block(h)
            h = F.interpolate(h, size=shapes[3 - i], mode="nearest")
        return self.output_conv(h)

    def cross_reconstruct(
        self, x1: torch.Tensor, x2: torch.Tensor
    ) -> tuple[torch.Tensor, torch.Tensor, LatentCode, LatentCode]:
        """Decode each visit's dynamic block with the other visit's static
        block: (D(d1, s2), D(d2, s1), code1, code2)."""
        code1 = self.encode(x1)
        code2 = self.encode(x2)
        mixed1, mixed2 = swap_static(code1, code2)
        return self.decode(mixed1), self.decode(mixed2), code1, code2

    def encoder_modules(self) -> list[nn.Module]:
        return [*self.encoder_blocks, self.to_latent]

    def encoder_parameters(self):
        for module in self.encoder_modules():
            yield from module.parameters()

    def encoder_fingerprint(self) -> str:
        """Hash of every encoder parameter and buffer (batch-norm running
        statistics included), for freeze verification."""
        digest = hashlib.sha256()
        for module in self.encoder_modules():
            for name, tensor in sorted(module.state_dict().items()):
                digest.update(name.encode())
                digest.update(tensor.detach().cpu().numpy().tobytes())
        return digest.hexdigest()


@dataclass(frozen=True)
class ClassifierSpec:
    input: str = "dynamic"
    hidden_size: int = 64
    n_classes: int = 2

    def __post_init__(self):
        if self.input not in ("dynamic", "static", "full"):
            raise ModelError(
                f'classifier input must be "dynamic", "static", or "full", '
                f"got {self.input!r}"
            )
        if self.hidden_size <= 0:
            raise ModelError(f"hidden_size must be > 0, got {self.hidden_size}")
        if self.n_classes != 2:
            raise ModelError(f"only binary heads are supported, got {self.n_classes}")


def classifier_input_dim(mspec: ModelSpec, cspec: ClassifierSpec) -> int:
    return {
        "dynamic": mspec.dynamic_dim,
        "static": mspec.static_dim,
        "full": mspec.latent_dim,
    }[cspec.input]


def select_block(code: LatentCode, which: str) -> torch.Tensor:
    if which == "dynamic":
        return code.d
    if which == "static":
        return code.s
    if which == "full":
        return code.full
    raise ModelError(f"unknown latent block {which!r}")


class ClassifierHead(nn.Module):
    """One hidden layer, two logits; index 1 is the positive class."""

    def __init__(self, in_dim: int, cspec: ClassifierSpec):
        super().__init__()
        self.cspec = cspec
        self.in_dim = in_dim
        self.hidden = nn.Linear(in_dim, cspec.hidden_size)
        self.act = nn.ReLU()
        self.out = nn.Linear(cspec.hidden_size, cspec.n_classes)

    def forward(self, features: torch.Tensor) -> torch.Tensor:
        if features.ndim != 2 or features.shape[1] != self.in_dim:
            raise ModelError(
                f"classifier expected (batch, {self.in_dim}) features, "
                f"got {tuple(features.shape)}"
            )
        return self.out(self.act(self.hidden(features)))
