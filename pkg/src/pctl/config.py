"""Plain ``section.key = value`` configuration files with flag overrides.

Unknown keys are hard errors so silent typos cannot skew an experiment, and
every run writes back the fully resolved configuration it actually used.
"""

from __future__ import annotations

from pathlib import Path
from typing import Optional

import numpy as np

from .data import SynthSpec
from .errors import ConfigError
from .trainer import ModelConfig, TrainConfig


def _parse_bool(text: str) -> bool:
    lowered = text.strip().lower()
    if lowered in ("1", "true", "yes", "on"):
        return True
    if lowered in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"expected a boolean, got {text!r}")


def _parse_int_list(text: str) -> list[int]:
    return [int(part) for part in text.replace(",", " ").split()]


def _parse_float_or_list(text: str):
    parts = text.replace(",", " ").split()
    if len(parts) == 1:
        return float(parts[0])
    return np.asarray([float(p) for p in parts])


TRAIN_KEYS = {
    "alpha": float,
    "mi_weight": float,
    "learning_rate": float,
    "batch_recon": int,
    "batch_class": int,
    "epochs": int,
    "steps_per_epoch": int,
    "seed": int,
    "label_fraction": float,
    "eval_every": int,
    "eval_samples": int,
    "classifier_only": _parse_bool,
    "shared_decoder_only": _parse_bool,
    "no_sparse": _parse_bool,
    "no_mi": _parse_bool,
}

MODEL_KEYS = {
    "abundance_dim": int,
    "encoder_hidden": _parse_int_list,
    "stick_transform": str,
    "beta_mode": str,
    "beta_shared": _parse_bool,
    "basis_hidden": int,
    "per_band_affine": _parse_bool,
    "mi_hidden": int,
    "patch_size": int,
    "block_channels": _parse_int_list,
    "dropout_rate": float,
}

SYNTH_KEYS = {
    "classes": int,
    "abundance_dim": int,
    "bands": int,
    "scale": _parse_float_or_list,
    "offset": _parse_float_or_list,
    "noise_sigma": float,
    "pixels_per_class": int,
    "seed": int,
    "concentration_peak": float,
    "concentration_base": float,
    "envelope_weight": float,
}

SECTIONS = {"train": TRAIN_KEYS, "model": MODEL_KEYS, "synth": SYNTH_KEYS}


def parse_pairs(lines, origin: str) -> dict[str, str]:
    """Parse ``section.key = value`` lines; comments start with ``#``."""
    out: dict[str, str] = {}
    for lineno, raw in enumerate(lines, start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{origin}:{lineno}: expected key = value, got {raw!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if key in out:
            raise ConfigError(f"{origin}:{lineno}: duplicate key {key!r}")
        out[key] = value
    return out


def validate_keys(pairs: dict[str, str], origin: str,
                  sections=("train", "model", "synth")) -> None:
    for key in pairs:
        if "." not in key:
            raise ConfigError(f"{origin}: key {key!r} must be section.key")
        section, name = key.split(".", 1)
        if section not in sections or section not in SECTIONS:
            raise ConfigError(f"{origin}: unknown section {section!r} in {key!r}")
        if name not in SECTIONS[section]:
            raise ConfigError(f"{origin}: unknown key {key!r}")


class RunConfig:
    """Resolved configuration: file pairs overlaid with --set flags."""

    def __init__(self, path=None, overrides=None,
                 sections=("train", "model", "synth")):
        pairs: dict[str, str] = {}
        if path is not None:
            path = Path(path)
            if not path.exists():
                raise ConfigError(f"config file not found: {path}")
            pairs.update(parse_pairs(path.read_text().splitlines(), str(path)))
        for item in overrides or []:
            if "=" not in item:
                raise ConfigError(f"--set expects key=value, got {item!r}")
            key, value = (part.strip() for part in item.split("=", 1))
            pairs[key] = value
        validate_keys(pairs, str(path) if path else "--set", sections)
        self.pairs = pairs

    def section(self, name: str) -> dict:
        casters = SECTIONS[name]
        out = {}
        for key, raw in self.pairs.items():
            sec, field_name = key.split(".", 1)
            if sec != name:
                continue
            try:
                out[field_name] = casters[field_name](raw)
            except (ValueError, TypeError) as exc:
                raise ConfigError(f"{key}: cannot parse {raw!r}") from exc
        return out

    def train_config(self) -> TrainConfig:
        return TrainConfig(**self.section("train"))

    def model_config(self, bands: int, num_classes: int) -> ModelConfig:
        fields = self.section("model")
        fields.setdefault("abundance_dim", num_classes + 2)
        return ModelConfig(bands=bands, num_classes=num_classes, **fields)

    def synth_spec(self) -> SynthSpec:
        return SynthSpec(**self.section("synth"))


def resolved_text(model_cfg: Optional[ModelConfig] = None,
                  train_cfg: Optional[TrainConfig] = None,
                  synth: Optional[SynthSpec] = None) -> str:
    """Canonical dump of everything a run actually used."""
    lines = []
    if synth is not None:
        lines += [f"synth.classes = {synth.classes}",
                  f"synth.abundance_dim = {synth.abundance_dim}",
                  f"synth.bands = {synth.bands}",
                  f"synth.scale = {' '.join(repr(v) for v in synth.scale)}",
                  f"synth.offset = {' '.join(repr(v) for v in synth.offset)}",
                  f"synth.noise_sigma = {synth.noise_sigma!r}",
                  f"synth.pixels_per_class = {synth.pixels_per_class}",
                  f"synth.seed = {synth.seed}",
                  f"synth.concentration_peak = {synth.concentration_peak!r}",
                  f"synth.concentration_base = {synth.concentration_base!r}",
                  f"synth.envelope_weight = {synth.envelope_weight!r}"]
    if model_cfg is not None:
        mc = model_cfg
        lines += [f"model.bands = {mc.bands}",
                  f"model.num_classes = {mc.num_classes}",
                  f"model.abundance_dim = {mc.abundance_dim}",
                  f"model.encoder_hidden = "
                  f"{' '.join(str(w) for w in mc.encoder_hidden) if mc.encoder_hidden else 'auto'}",
                  f"model.stick_transform = {mc.stick_transform}",
                  f"model.beta_mode = {mc.beta_mode}",
                  f"model.beta_shared = {mc.beta_shared}",
                  f"model.basis_hidden = {mc.basis_hidden}",
                  f"model.per_band_affine = {mc.per_band_affine}",
                  f"model.mi_hidden = {mc.mi_hidden}",
                  f"model.patch_size = {mc.patch_size}",
                  f"model.block_channels = {' '.join(str(c) for c in mc.block_channels)}",
                  f"model.dropout_rate = {mc.dropout_rate!r}"]
    if train_cfg is not None:
        tc = train_cfg
        lines += [f"train.alpha = {tc.alpha!r}",
                  f"train.mi_weight = {tc.mi_weight!r}",
                  f"train.learning_rate = {tc.learning_rate!r}",
                  f"train.batch_recon = {tc.batch_recon}",
                  f"train.batch_class = {tc.batch_class}",
                  f"train.epochs = {tc.epochs}",
                  f"train.steps_per_epoch = {tc.steps_per_epoch}",
                  f"train.seed = {tc.seed}",
                  f"train.label_fraction = {tc.label_fraction!r}",
                  f"train.eval_every = {tc.eval_every}",
                  f"train.eval_samples = {tc.eval_samples}",
                  f"train.classifier_only = {tc.classifier_only}",
                  f"train.shared_decoder_only = {tc.shared_decoder_only}",
                  f"train.no_sparse = {tc.no_sparse}",
                  f"train.no_mi = {tc.no_mi}"]
    return "\n".join(lines) + "\n"
