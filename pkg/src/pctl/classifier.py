"""Densely-connected 3D-CNN classifier over abundance patches.

Each labeled pixel is classified from the P x P neighborhood of abundance
vectors around it, stacked as a single-channel volume [1, c, P, P]. Five
conv blocks (conv + batchnorm + relu) are densely connected: block i sees
the channel-concatenation of the input volume and every earlier block's
output. The classifier never touches raw spectra; everything it consumes
has passed through the shared encoder.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .encoder import Encoder, SimplexBatch
from .errors import ConfigError, ContractError, DimensionError
from .layers import BatchNorm3d, DenseLayer, Dropout, glorot_uniform, softmax_cross_entropy


@dataclass
class ClassifierConfig:
    abundance_dim: int
    num_classes: int
    patch_size: int = 11
    block_channels: list[int] = field(default_factory=lambda: [12, 32, 12, 12, 30])
    dropout_rate: float = 0.5

    def __post_init__(self):
        if self.patch_size < 1 or self.patch_size % 2 == 0:
            raise ConfigError("patch_size must be odd so the labeled pixel is centered")
        if len(self.block_channels) != 5:
            raise ConfigError("exactly five conv blocks are expected")
        if self.num_classes < 2:
            raise ConfigError("need at least two classes")

    @property
    def kernel(self) -> tuple[int, int, int]:
        # depth along the abundance axis capped by c, spatial extent by P
        k_sp = min(7, self.patch_size)
        return (min(3, self.abundance_dim), k_sp, k_sp)


def _same_padding(kernel: Sequence[int]):
    return tuple(((k - 1) // 2, k - 1 - (k - 1) // 2) for k in kernel)


class ConvBlock:
    """conv3d (same padding, no bias) -> batchnorm -> relu."""

    def __init__(self, in_channels: int, out_channels: int, kernel,
                 rng: np.random.Generator):
        kd, kh, kw = kernel
        fan_in = in_channels * kd * kh * kw
        fan_out = out_channels * kd * kh * kw
        self.kernels = Tensor(
            glorot_uniform(rng, (out_channels, in_channels, kd, kh, kw),
                           fan_in, fan_out),
            requires_grad=True)
        self.bn = BatchNorm3d(out_channels)
        self.padding = _same_padding(kernel)

    def __call__(self, x: Tensor, train: bool) -> Tensor:
        return ad.relu(self.bn(ad.conv3d(x, self.kernels, padding=self.padding), train))

    def parameters(self):
        return [("kernels", self.kernels)] + \
            [(f"bn.{n}", t) for n, t in self.bn.parameters()]


class AbundancePatch:
    """Batch of abundance volumes [batch, 1, c, P, P] with simplex columns."""

    __slots__ = ("values",)

    def __init__(self, values: Tensor, validate: bool = True):
        if values.data.ndim != 5 or values.shape[1] != 1:
            raise ContractError(
                f"abundance patches must be [batch, 1, c, P, P], got {values.shape}")
        if validate:
            sums = values.data.sum(axis=2)
            if np.any(values.data < 0.0) or np.any(np.abs(sums - 1.0) > 1e-6):
                raise ContractError(
                    "every spatial position must hold a simplex abundance vector")
        self.values = values

    @property
    def shape(self):
        return self.values.shape


class Classifier3d:
    """Five densely-connected conv blocks, then dropout and a k-way head."""

    def __init__(self, cfg: ClassifierConfig,
                 rng: Optional[np.random.Generator] = None,
                 dropout_rng: Optional[np.random.Generator] = None):
        rng = rng or np.random.default_rng(0)
        self.cfg = cfg
        self.blocks = []
        in_ch = 1
        for out_ch in cfg.block_channels:
            self.blocks.append(ConvBlock(in_ch, out_ch, cfg.kernel, rng))
            in_ch += out_ch  # dense connectivity: next block also sees this output
        flat = cfg.block_channels[-1] * cfg.abundance_dim * cfg.patch_size ** 2
        self.dropout = Dropout(cfg.dropout_rate, rng=dropout_rng)
        self.head = DenseLayer(flat, cfg.num_classes, activation="none", rng=rng)

    def input_channels(self, block_index: int) -> int:
        return 1 + sum(self.cfg.block_channels[:block_index])

    def logits(self, patch: AbundancePatch, train: bool) -> Tensor:
        x = patch.values
        c, p = self.cfg.abundance_dim, self.cfg.patch_size
        if x.shape[2:] != (c, p, p):
            raise DimensionError(
                f"patch dims {x.shape} do not match config (c={c}, P={p})")
        feats = [x]
        for block in self.blocks:
            inp = feats[0] if len(feats) == 1 else ad.concat(feats, axis=1)
            feats.append(block(inp, train))
        flat = ad.reshape(feats[-1], (x.shape[0], -1))
        return self.head(self.dropout(flat, train))

    def parameters(self):
        out = []
        for i, block in enumerate(self.blocks):
            out += [(f"block{i}.{n}", t) for n, t in block.parameters()]
        out += [(f"head.{n}", t) for n, t in self.head.parameters()]
        return out

    def buffers(self):
        out = []
        for i, block in enumerate(self.blocks):
            out += [(f"block{i}.bn.{n}", b) for n, b in block.bn.buffers()]
        return out


def classification_loss(logits: Tensor, labels: Tensor) -> Tensor:
    """Softmax cross entropy against one-hot labels."""
    return softmax_cross_entropy(logits, labels)


def mirror_pad_map(values: np.ndarray, margin: int) -> np.ndarray:
    """Reflect an [H, W, C] map outward so patch windows never leave the data."""
    if margin == 0:
        return values
    return np.pad(values, ((margin, margin), (margin, margin), (0, 0)),
                  mode="symmetric")


def extract_patches(values: np.ndarray, centers, patch_size: int) -> np.ndarray:
    """Gather [n, P, P, C] windows around (row, col) centers of an [H, W, C] map.

    Borders are handled by mirror padding, so any in-image center is valid.
    """
    centers = np.asarray(centers, dtype=int)
    if centers.size == 0:
        raise ContractError("no patch centers given")
    if centers.ndim != 2 or centers.shape[1] != 2:
        raise ContractError("centers must be (row, col) pairs")
    h, w, _ = values.shape
    if np.any(centers < 0) or np.any(centers[:, 0] >= h) or np.any(centers[:, 1] >= w):
        raise ContractError("patch centers must lie inside the image")
    margin = patch_size // 2
    padded = mirror_pad_map(values, margin)
    rows = centers[:, 0][:, None] + np.arange(patch_size)[None, :]
    cols = centers[:, 1][:, None] + np.arange(patch_size)[None, :]
    return padded[rows[:, :, None], cols[:, None, :], :]


def encode_patches(encoder: Encoder, pixel_patches: np.ndarray,
                   validate: bool = True) -> AbundancePatch:
    """Push raw pixel patches through the shared encoder, pixel by pixel.

    ``pixel_patches`` is [n, P, P, L]; the result stacks the abundances as
    [n, 1, c, P, P] so the conv depth axis runs along the abundance index.
    Gradients flow back into the encoder through every pixel of every patch.
    """
    n, p, _, bands = pixel_patches.shape
    flat = Tensor(pixel_patches.reshape(n * p * p, bands))
    abund = encoder.encode(flat).values
    c = abund.shape[1]
    grid = ad.reshape(abund, (n, p, p, c))
    volume = ad.reshape(ad.transpose(grid, (0, 3, 1, 2)), (n, 1, c, p, p))
    return AbundancePatch(volume, validate=validate)


def abundance_patches_from_map(abundance_map: np.ndarray, centers,
                               patch_size: int) -> AbundancePatch:
    """Assemble patches from a precomputed [H, W, c] abundance map.

    Inference-only shortcut: encoding is pixel-wise, so encoding the cube once
    and slicing windows matches encoding each patch's pixels individually.
    """
    windows = extract_patches(abundance_map, centers, patch_size)  # [n,P,P,c]
    volume = np.ascontiguousarray(windows.transpose(0, 3, 1, 2))[:, None]
    return AbundancePatch(Tensor(volume), validate=False)
