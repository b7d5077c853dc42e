"""Generators, discriminator and losses for SAR-to-RGB translation.

Two generator lineages are provided behind one config type:

* SPADE: the conditioning input (the normalized VV/VH pair, standing in
  for a semantic layout) modulates every normalization layer with
  spatially-varying scale and shift maps. The content path starts from
  the SAR map downsampled to a small seed and upsamples back with SPADE
  residual blocks.
* pix2pixHD: a front 7x7 convolution, two stride-2 downsamplings, a
  residual trunk and two transposed-convolution upsamplings.

The discriminator is a multi-scale patch network over the channel
concatenation of SAR input and RGB output; hinge and least-squares GAN
objectives are both available. There is no noise input anywhere: the
translation task is deterministic and evaluated pixelwise.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

INIT_STD = 0.02


class Variant(enum.Enum):
    SPADE = "spade"
    PIX2PIXHD = "pix2pixhd"


class GanKind(enum.Enum):
    HINGE = "hinge"
    LSGAN = "lsgan"


class GanRole(enum.Enum):
    D_REAL = "d_real"
    D_FAKE = "d_fake"
    G = "g"


@dataclass(frozen=True)
class GeneratorConfig:
    variant: Variant = Variant.SPADE
    in_channels: int = 2
    out_channels: int = 3
    image_size: int = 256
    base_width: int = 64
    n_up_blocks: int = 5  # SPADE only
    n_res_blocks: int = 9  # pix2pixHD only
    seed_size: int = 8  # SPADE only
    mod_hidden: int = 128  # SPADE modulation hidden width

    def __post_init__(self):
        if min(self.in_channels, self.out_channels, self.image_size, self.base_width) < 1:
            raise ValueError("channel counts, image_size and base_width must be >= 1")
        if self.variant is Variant.SPADE:
            if self.n_up_blocks < 1 or self.seed_size < 1 or self.mod_hidden < 1:
                raise ValueError("n_up_blocks, seed_size and mod_hidden must be >= 1")
            if self.seed_size * 2**self.n_up_blocks != self.image_size:
                raise ValueError(
                    f"SPADE variant needs image_size == seed_size * 2^n_up_blocks, got "
                    f"{self.image_size} != {self.seed_size} * 2^{self.n_up_blocks}"
                )
        else:
            if self.n_res_blocks < 0:
                raise ValueError("n_res_blocks must be >= 0")
            if self.image_size % 4 != 0:
                raise ValueError(
                    f"pix2pixHD variant needs image_size divisible by 4, got {self.image_size}"
                )


@dataclass(frozen=True)
class DiscriminatorConfig:
    n_scales: int = 2
    n_layers: int = 4
    base_width: int = 64
    in_channels: int = 5  # SAR (2) + RGB (3)
    max_width_mult: int = 8  # channel growth cap, in multiples of base_width

    def __post_init__(self):
        if self.n_scales < 1 or self.n_layers < 1:
            raise ValueError("n_scales and n_layers must be >= 1")
        if self.base_width < 1 or self.in_channels < 1 or self.max_width_mult < 1:
            raise ValueError("widths and channel counts must be >= 1")


@dataclass(frozen=True)
class LossConfig:
    """Weighting of the generator objective: gan_weight * GAN + l1_weight * L1."""

    gan_weight: float = 0.0
    l1_weight: float = 1.0
    gan_kind: GanKind | None = None  # None = lineage default (hinge/SPADE, lsgan/pix2pixHD)

    def __post_init__(self):
        if self.gan_weight not in (0.0, 1.0):
            raise ValueError(f"gan_weight must be 0 or 1, got {self.gan_weight}")
        if self.l1_weight < 0:
            raise ValueError(f"l1_weight must be >= 0, got {self.l1_weight}")
        if self.gan_weight == 0 and self.l1_weight == 0:
            raise ValueError("at least one loss weight must be nonzero")

    def resolved_gan_kind(self, variant: Variant) -> GanKind:
        if self.gan_kind is not None:
            return self.gan_kind
        return GanKind.HINGE if variant is Variant.SPADE else GanKind.LSGAN


class SpadeNorm(nn.Module):
    """Spatially-adaptive normalization.

    Activations are normalized per channel over batch and spatial
    positions (no running averages; single-image inference uses its own
    statistics), then modulated by scale and shift maps predicted from
    the conditioning input, resized to the activation's resolution by
    nearest neighbor:

        out = normalized * (1 + gamma(h)) + beta(h),  h = relu(shared(m))

    The (1 + gamma) form makes a zero-initialized head an identity on the
    normalized activations.
    """

    def __init__(self, feature_channels: int, mod_channels: int, hidden: int = 128,
                 epsilon: float = 1e-5):
        super().__init__()
        self.epsilon = epsilon
        self.shared = nn.Conv2d(mod_channels, hidden, kernel_size=3, padding=1)
        self.gamma = nn.Conv2d(hidden, feature_channels, kernel_size=3, padding=1)
        self.beta = nn.Conv2d(hidden, feature_channels, kernel_size=3, padding=1)

    def forward(self, x: torch.Tensor, mod: torch.Tensor) -> torch.Tensor:
        if x.ndim != 4 or mod.ndim != 4:
            raise ValueError("SpadeNorm expects batched [N, C, H, W] inputs")
        if x.shape[1] != self.gamma.out_channels or mod.shape[1] != self.shared.in_channels:
            raise ValueError(
                f"SpadeNorm weights are shaped for ({self.shared.in_channels} -> "
                f"{self.gamma.out_channels}) channels, got x {x.shape[1]}, mod {mod.shape[1]}"
            )
        mean = x.mean(dim=(0, 2, 3), keepdim=True)
        var = x.var(dim=(0, 2, 3), unbiased=False, keepdim=True)
        normalized = (x - mean) / torch.sqrt(var + self.epsilon)
        if mod.shape[2:] != x.shape[2:]:
            mod = F.interpolate(mod, size=x.shape[2:], mode="nearest")
        h = F.relu(self.shared(mod))
        return normalized * (1 + self.gamma(h)) + self.beta(h)


def spade_normalize(x: torch.Tensor, mod: torch.Tensor, weights: SpadeNorm) -> torch.Tensor:
    """Functional form of :class:`SpadeNorm`; accepts [C, H, W] or batched."""
    squeeze = x.ndim == 3
    if squeeze:
        x = x.unsqueeze(0)
    if mod.ndim == 3:
        mod = mod.unsqueeze(0)
    out = weights(x, mod)
    return out.squeeze(0) if squeeze else out


class SpadeResBlock(nn.Module):
    """Two SPADE-normalize -> relu -> 3x3-conv stages with a learned skip
    projection (SPADE-normalize -> 1x1 conv, no bias) when channel counts
    differ. The middle width is min(in, out)."""

    def __init__(self, in_ch: int, out_ch: int, mod_channels: int, hidden: int):
        super().__init__()
        mid = min(in_ch, out_ch)
        self.norm1 = SpadeNorm(in_ch, mod_channels, hidden)
        self.conv1 = nn.Conv2d(in_ch, mid, kernel_size=3, padding=1)
        self.norm2 = SpadeNorm(mid, mod_channels, hidden)
        self.conv2 = nn.Conv2d(mid, out_ch, kernel_size=3, padding=1)
        self.learned_skip = in_ch != out_ch
        if self.learned_skip:
            self.norm_skip = SpadeNorm(in_ch, mod_channels, hidden)
            self.conv_skip = nn.Conv2d(in_ch, out_ch, kernel_size=1, bias=False)

    def forward(self, x: torch.Tensor, mod: torch.Tensor) -> torch.Tensor:
        dx = self.conv1(F.relu(self.norm1(x, mod)))
        dx = self.conv2(F.relu(self.norm2(dx, mod)))
        skip = self.conv_skip(self.norm_skip(x, mod)) if self.learned_skip else x
        return skip + dx


class SpadeGenerator(nn.Module):
    """SAR-conditioned SPADE generator.

    The SAR map downsampled to seed_size feeds a 3x3 convolution to
    base_width * 2^n_up_blocks channels; each of n_up_blocks stages
    applies a SPADE residual block (conditioned on the full-resolution
    SAR map) that halves the channels, then a 2x nearest upsample; a
    final 3x3 convolution and tanh produce the output.
    """

    def __init__(self, cfg: GeneratorConfig):
        super().__init__()
        if cfg.variant is not Variant.SPADE:
            raise ValueError("SpadeGenerator needs a SPADE-variant config")
        self.cfg = cfg
        width = cfg.base_width * 2**cfg.n_up_blocks
        self.head = nn.Conv2d(cfg.in_channels, width, kernel_size=3, padding=1)
        blocks = []
        for _ in range(cfg.n_up_blocks):
            blocks.append(SpadeResBlock(width, width // 2, cfg.in_channels, cfg.mod_hidden))
            width //= 2
        self.blocks = nn.ModuleList(blocks)
        self.out_conv = nn.Conv2d(cfg.base_width, cfg.out_channels, kernel_size=3, padding=1)

    def forward(self, sar: torch.Tensor) -> torch.Tensor:
        _check_input(sar, self.cfg)
        x = self.head(F.interpolate(sar, size=(self.cfg.seed_size,) * 2, mode="nearest"))
        for block in self.blocks:
            x = block(x, sar)
            x = F.interpolate(x, scale_factor=2, mode="nearest")
        return torch.tanh(self.out_conv(x))


class ResBlock(nn.Module):
    """pix2pixHD residual block: two reflection-padded 3x3 convolutions
    with parameter-free instance normalization."""

    def __init__(self, width: int):
        super().__init__()
        self.body = nn.Sequential(
            nn.ReflectionPad2d(1),
            nn.Conv2d(width, width, kernel_size=3),
            nn.InstanceNorm2d(width, affine=False),
            nn.ReLU(),
            nn.ReflectionPad2d(1),
            nn.Conv2d(width, width, kernel_size=3),
            nn.InstanceNorm2d(width, affine=False),
        )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return x + self.body(x)


class Pix2PixHDGenerator(nn.Module):
    """Coarse-to-fine translation trunk: 7x7 front convolution, two
    stride-2 downsamplings, n_res_blocks residual blocks, two stride-2
    transposed-convolution upsamplings, 7x7 output convolution + tanh."""

    def __init__(self, cfg: GeneratorConfig):
        super().__init__()
        if cfg.variant is not Variant.PIX2PIXHD:
            raise ValueError("Pix2PixHDGenerator needs a PIX2PIXHD-variant config")
        self.cfg = cfg
        w = cfg.base_width
        layers: list[nn.Module] = [
            nn.ReflectionPad2d(3),
            nn.Conv2d(cfg.in_channels, w, kernel_size=7),
            nn.InstanceNorm2d(w, affine=False),
            nn.ReLU(),
        ]
        for _ in range(2):
            layers += [
                nn.Conv2d(w, w * 2, kernel_size=3, stride=2, padding=1),
                nn.InstanceNorm2d(w * 2, affine=False),
                nn.ReLU(),
            ]
            w *= 2
        layers += [ResBlock(w) for _ in range(cfg.n_res_blocks)]
        for _ in range(2):
            layers += [
                nn.ConvTranspose2d(w, w // 2, kernel_size=3, stride=2, padding=1,
                                   output_padding=1),
                nn.InstanceNorm2d(w // 2, affine=False),
                nn.ReLU(),
            ]
            w //= 2
        layers += [nn.ReflectionPad2d(3), nn.Conv2d(w, cfg.out_channels, kernel_size=7),
                   nn.Tanh()]
        self.body = nn.Sequential(*layers)

    def forward(self, sar: torch.Tensor) -> torch.Tensor:
        _check_input(sar, self.cfg)
        return self.body(sar)


class PatchNet(nn.Module):
    """Single-scale patch discriminator: n_layers stride-2 4x4
    convolutions (channels doubling, capped) followed by a stride-1 4x4
    convolution to a 2-D logit map. No sigmoid."""

    def __init__(self, cfg: DiscriminatorConfig):
        super().__init__()
        cap = cfg.base_width * cfg.max_width_mult
        layers: list[nn.Module] = [
            nn.Conv2d(cfg.in_channels, cfg.base_width, kernel_size=4, stride=2, padding=2),
            nn.LeakyReLU(0.2),
        ]
        w = cfg.base_width
        for _ in range(1, cfg.n_layers):
            nxt = min(w * 2, cap)
            layers += [
                nn.Conv2d(w, nxt, kernel_size=4, stride=2, padding=2),
                nn.InstanceNorm2d(nxt, affine=False),
                nn.LeakyReLU(0.2),
            ]
            w = nxt
        layers.append(nn.Conv2d(w, 1, kernel_size=4, stride=1, padding=2))
        self.body = nn.Sequential(*layers)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.body(x)


class MultiScaleDiscriminator(nn.Module):
    """Independent patch networks over 2^k average-pooled inputs."""

    def __init__(self, cfg: DiscriminatorConfig):
        super().__init__()
        self.cfg = cfg
        self.scales = nn.ModuleList(PatchNet(cfg) for _ in range(cfg.n_scales))

    def forward(self, sar: torch.Tensor, rgb: torch.Tensor) -> list[torch.Tensor]:
        squeeze = sar.ndim == 3
        if squeeze:
            sar, rgb = sar.unsqueeze(0), rgb.unsqueeze(0)
        if sar.shape[2:] != rgb.shape[2:] or sar.shape[0] != rgb.shape[0]:
            raise ValueError(
                f"SAR {tuple(sar.shape)} and RGB {tuple(rgb.shape)} inputs are misaligned"
            )
        x = torch.cat([sar, rgb], dim=1)
        if x.shape[1] != self.cfg.in_channels:
            raise ValueError(
                f"discriminator expects {self.cfg.in_channels} concatenated channels, "
                f"got {x.shape[1]}"
            )
        outputs = []
        for k, net in enumerate(self.scales):
            pooled = F.avg_pool2d(x, kernel_size=2**k) if k > 0 else x
            out = net(pooled)
            outputs.append(out.squeeze(0) if squeeze else out)
        return outputs


def _check_input(sar: torch.Tensor, cfg: GeneratorConfig) -> None:
    if sar.ndim != 4:
        raise ValueError(f"generator expects batched [N, C, H, W] input, got {tuple(sar.shape)}")
    n, c, h, w = sar.shape
    if c != cfg.in_channels:
        raise ValueError(f"generator expects {cfg.in_channels} input channels, got {c}")
    if (h, w) != (cfg.image_size, cfg.image_size):
        raise ValueError(
            f"generator is configured for {cfg.image_size}x{cfg.image_size} tiles, got {h}x{w}"
        )


def init_weights(module: nn.Module, seed: int) -> None:
    """Deterministic initialization: every weight tensor is drawn from a
    Gaussian with standard deviation 0.02 (one seeded stream, parameters
    in registration order); biases start at zero."""
    gen = torch.Generator().manual_seed(seed & 0x7FFFFFFFFFFFFFFF)
    with torch.no_grad():
        for name, param in module.named_parameters():
            if name.endswith("bias"):
                param.zero_()
            else:
                param.normal_(0.0, INIT_STD, generator=gen)


def build_generator(cfg: GeneratorConfig, seed: int) -> nn.Module:
    gen = SpadeGenerator(cfg) if cfg.variant is Variant.SPADE else Pix2PixHDGenerator(cfg)
    init_weights(gen, seed)
    return gen


def build_discriminator(cfg: DiscriminatorConfig, seed: int) -> MultiScaleDiscriminator:
    disc = MultiScaleDiscriminator(cfg)
    init_weights(disc, seed)
    return disc


def generate(generator: nn.Module, sar: np.ndarray) -> np.ndarray:
    """Translate one model-space SAR array [2, H, W] to RGB model space
    [3, H, W]. Deterministic: no noise input, and normalization uses the
    single image's own statistics."""
    arr = np.asarray(sar, dtype=np.float32)
    if arr.ndim != 3:
        raise ValueError(f"expected [C, H, W] SAR array, got shape {arr.shape}")
    with torch.no_grad():
        out = generator(torch.from_numpy(arr).unsqueeze(0))
    return out.squeeze(0).numpy()


def discriminate(
    discriminator: MultiScaleDiscriminator, sar: np.ndarray, rgb: np.ndarray
) -> list[np.ndarray]:
    """Patch logit maps (one 2-D array per scale) for a SAR/RGB pair."""
    s = torch.from_numpy(np.asarray(sar, dtype=np.float32))
    r = torch.from_numpy(np.asarray(rgb, dtype=np.float32))
    with torch.no_grad():
        maps = discriminator(s, r)
    return [m.squeeze(0).numpy() for m in maps]


def gan_loss(
    logit_maps: list[torch.Tensor], role: GanRole, kind: GanKind = GanKind.HINGE
) -> torch.Tensor:
    """Adversarial objective over multi-scale patch logits.

    Hinge: D_REAL mean(relu(1 - l)), D_FAKE mean(relu(1 + l)), G -mean(l).
    LSGAN: D_REAL mean((l - 1)^2), D_FAKE mean(l^2), G mean((l - 1)^2).
    Scales contribute equally: the result is the average of per-scale means.
    """
    if not logit_maps:
        raise ValueError("gan_loss needs at least one logit map")
    terms = []
    for logits in logit_maps:
        if kind is GanKind.HINGE:
            if role is GanRole.D_REAL:
                terms.append(F.relu(1 - logits).mean())
            elif role is GanRole.D_FAKE:
                terms.append(F.relu(1 + logits).mean())
            else:
                terms.append(-logits.mean())
        else:
            if role is GanRole.D_REAL or role is GanRole.G:
                terms.append(((logits - 1) ** 2).mean())
            else:
                terms.append((logits**2).mean())
    return torch.stack(terms).mean()


def l1_loss(pred: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """Mean absolute difference over all elements."""
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch {tuple(pred.shape)} vs {tuple(target.shape)}")
    return (pred - target).abs().mean()


def total_generator_loss(cfg: LossConfig, gan_term, l1_term):
    """gan_weight * gan_term + l1_weight * l1_term."""
    return cfg.gan_weight * gan_term + cfg.l1_weight * l1_term


def parameter_count(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())
