"""Affine-transfer decoder.

Both domains reconstruct through one shared basis stack; each domain then
applies its own per-band scale and offset. The shared basis carries the
material spectra while the affine pairs absorb cross-domain illumination and
sensor shifts, so the latent abundances can stay domain-invariant.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import DimensionError
from .encoder import SimplexBatch
from .layers import DenseLayer

# keeps the l2-norm gradient finite at exactly-zero residuals
NORM_EPS = 1e-24


@dataclass
class DecoderConfig:
    bands: int
    abundance_dim: int
    basis_hidden: int = 11
    per_band_affine: bool = True


class AffineDecoder:
    """Shared basis stack plus one (scale, offset) pair per domain.

    Scales start at 1 and offsets at 0, so an untrained decoder treats both
    domains identically.
    """

    def __init__(self, cfg: DecoderConfig, rng: Optional[np.random.Generator] = None):
        rng = rng or np.random.default_rng(0)
        self.cfg = cfg
        self.basis_in = DenseLayer(cfg.abundance_dim, cfg.basis_hidden,
                                   activation="relu", rng=rng)
        self.basis_out = DenseLayer(cfg.basis_hidden, cfg.bands,
                                    activation="none", rng=rng)
        n = cfg.bands if cfg.per_band_affine else 1
        self.src_scale = Tensor(np.ones(n), requires_grad=True)
        self.src_offset = Tensor(np.zeros(n), requires_grad=True)
        self.tgt_scale = Tensor(np.ones(n), requires_grad=True)
        self.tgt_offset = Tensor(np.zeros(n), requires_grad=True)

    def basis(self, a: SimplexBatch) -> Tensor:
        """Shared reconstruction before any domain-specific transfer."""
        return self.basis_out(self.basis_in(a.values))

    def decode_source(self, a: SimplexBatch) -> Tensor:
        return self.basis(a) * self.src_scale + self.src_offset

    def decode_target(self, a: SimplexBatch) -> Tensor:
        return self.basis(a) * self.tgt_scale + self.tgt_offset

    def decode_both(self, a_source: SimplexBatch, a_target: SimplexBatch):
        """Decode each domain's batch through the shared basis once."""
        return self.decode_source(a_source), self.decode_target(a_target)

    def parameters(self):
        out = [(f"basis_in.{n}", t) for n, t in self.basis_in.parameters()]
        out += [(f"basis_out.{n}", t) for n, t in self.basis_out.parameters()]
        out += [("src_scale", self.src_scale), ("src_offset", self.src_offset),
                ("tgt_scale", self.tgt_scale), ("tgt_offset", self.tgt_offset)]
        return out

    def affine_pairs(self) -> dict:
        """Learned per-band transfer parameters as plain arrays."""
        return {
            "src_scale": self.src_scale.data.copy(),
            "src_offset": self.src_offset.data.copy(),
            "tgt_scale": self.tgt_scale.data.copy(),
            "tgt_offset": self.tgt_offset.data.copy(),
        }


class PlainDecoder:
    """Ablation decoder: one shared stack, no per-domain transfer parameters."""

    def __init__(self, cfg: DecoderConfig, rng: Optional[np.random.Generator] = None):
        rng = rng or np.random.default_rng(0)
        self.cfg = cfg
        self.basis_in = DenseLayer(cfg.abundance_dim, cfg.basis_hidden,
                                   activation="relu", rng=rng)
        self.basis_out = DenseLayer(cfg.basis_hidden, cfg.bands,
                                    activation="none", rng=rng)

    def basis(self, a: SimplexBatch) -> Tensor:
        return self.basis_out(self.basis_in(a.values))

    decode_source = basis
    decode_target = basis

    def decode_both(self, a_source: SimplexBatch, a_target: SimplexBatch):
        return self.basis(a_source), self.basis(a_target)

    def parameters(self):
        out = [(f"basis_in.{n}", t) for n, t in self.basis_in.parameters()]
        out += [(f"basis_out.{n}", t) for n, t in self.basis_out.parameters()]
        return out


def _pixel_l2(residual: Tensor) -> Tensor:
    """Mean over the batch of the per-pixel Euclidean norm."""
    return ad.reduce_mean(
        ad.power(ad.reduce_sum(residual * residual, axis=1) + NORM_EPS, 0.5))


def reconstruction_loss(xhat_source: Tensor, x_source: Tensor,
                        xhat_target: Tensor, x_target: Tensor) -> Tensor:
    """Sum of per-domain batch-mean l2 reconstruction errors."""
    for name, (a, b) in (("source", (xhat_source, x_source)),
                         ("target", (xhat_target, x_target))):
        if a.shape != b.shape:
            raise DimensionError(
                f"{name} reconstruction {a.shape} does not match input {b.shape}")
    return _pixel_l2(xhat_source - x_source) + _pixel_l2(xhat_target - x_target)
