"""Run configuration: flat `key: value` text files with a strict schema.

Lines hold one `key: value` pair; `#` starts a comment; unknown keys are
rejected so typos fail loudly.  `--set key=value` overrides win over the
file.  Every command writes back a fully resolved snapshot that reproduces
the run when passed as `--config`.
"""
from __future__ import annotations

from dataclasses import dataclass, fields, replace
from pathlib import Path

from .encoder import EncoderConfig
from .refinement import RefineConfig
from .tasks import SyntheticTaskSpec
from .training import TrainConfig


class ConfigError(ValueError):
    """Unknown key, malformed line, or unparseable value."""


_MODALITY_CHOICES = {
    "both": ("vision", "text"),
    "vision": ("vision",),
    "text": ("text",),
}


@dataclass(frozen=True)
class Config:
    # encoder towers
    depth: int = 12
    d_vision: int = 48
    d_text: int = 32
    d_embed: int = 16
    heads: int = 4
    t_img: int = 17
    t_txt: int = 8
    vision_vocab: int = 65
    text_vocab: int = 33
    logit_scale: float = 10.0
    mlp_ratio: int = 4
    # pretraining
    pretrain_steps: int = 2400
    pretrain_batch: int = 8
    pretrain_lr: float = 1e-3
    pretrain_classes: int = 128
    # synthetic task
    classes: int = 16
    proto_dim: int = 8
    noise_scale: float = 0.25
    shots: int = 16
    queries_per_class: int = 8
    proto_jitter: float = 0.0
    noise_inflation: float = 1.0
    codebook_seed: int = 1234
    split_fraction: float = 0.5
    # refinement
    depths: str = "7"
    k_steps: int = 4
    rank: int = 1
    sharing: str = "shared"
    modalities: str = "both"
    # adaptation
    lr: float = 1e-4
    batch_size: int = 4
    epochs: int = 1
    anchor_weight: float = 1.0
    weight_decay: float = 0.01
    # protocols
    protocol: str = "base-to-novel"
    eval_seeds: int = 3
    cross_targets: int = 2
    cross_jitter: float = 0.3
    cross_noise_inflation: float = 1.5
    map_examples: int = 8
    # sweep grid (semicolon-separated alternatives; depth lists use commas)
    sweep_depths: str = "7"
    sweep_k: str = "4"
    sweep_sharing: str = "shared"
    sweep_modalities: str = "both"
    counts_only: bool = False
    # run plumbing
    seed: int = 0
    backbone_file: str = "backbone.wts"
    task_file: str = "task.bin"
    projector_file: str = "projectors.wts"

    # -- derived views ------------------------------------------------------

    def injection_depths(self) -> tuple:
        try:
            return tuple(int(d) for d in self.depths.split(","))
        except ValueError as e:
            raise ConfigError(f"bad depths list {self.depths!r}: {e}") from None

    def modality_tuple(self) -> tuple:
        if self.modalities not in _MODALITY_CHOICES:
            raise ConfigError(f"modalities must be both/vision/text, got {self.modalities!r}")
        return _MODALITY_CHOICES[self.modalities]

    def encoder_config(self) -> EncoderConfig:
        return EncoderConfig(
            depth=self.depth, d_vision=self.d_vision, d_text=self.d_text,
            d_embed=self.d_embed, heads=self.heads, t_img=self.t_img,
            t_txt=self.t_txt, vision_vocab=self.vision_vocab,
            text_vocab=self.text_vocab, logit_scale=self.logit_scale,
            mlp_ratio=self.mlp_ratio,
        )

    def refine_config(self) -> RefineConfig:
        return RefineConfig(
            injection_depths=self.injection_depths(), k_steps=self.k_steps,
            rank=self.rank, sharing=self.sharing, modalities=self.modality_tuple(),
        )

    def task_spec(self, seed: int | None = None) -> SyntheticTaskSpec:
        return SyntheticTaskSpec(
            n_classes=self.classes, proto_dim=self.proto_dim,
            noise_scale=self.noise_scale, shots=self.shots,
            queries_per_class=self.queries_per_class,
            proto_jitter=self.proto_jitter, noise_inflation=self.noise_inflation,
            codebook_seed=self.codebook_seed,
            seed=self.seed if seed is None else seed,
        )

    def train_config(self, seed: int | None = None) -> TrainConfig:
        return TrainConfig(
            lr=self.lr, batch_size=self.batch_size, epochs=self.epochs,
            anchor_weight=self.anchor_weight, weight_decay=self.weight_decay,
            seed=self.seed if seed is None else seed,
        )

    def sweep_grid(self) -> list:
        """All (depths, k, sharing, modalities) combinations of the sweep keys."""
        depth_lists = [tuple(int(d) for d in alt.split(","))
                       for alt in self.sweep_depths.split(";")]
        ks = [int(k) for k in self.sweep_k.split(";")]
        sharings = [s.strip() for s in self.sweep_sharing.split(";")]
        mods = [m.strip() for m in self.sweep_modalities.split(";")]
        grid = []
        for dl in depth_lists:
            for k in ks:
                for sh in sharings:
                    for mo in mods:
                        if mo not in _MODALITY_CHOICES:
                            raise ConfigError(f"bad sweep modalities {mo!r}")
                        grid.append((dl, k, sh, _MODALITY_CHOICES[mo]))
        return grid


_FIELDS = {f.name: f.type for f in fields(Config)}


def _parse_value(key: str, raw: str):
    kind = _FIELDS[key]
    raw = raw.strip()
    try:
        if kind == "int":
            return int(raw)
        if kind == "float":
            return float(raw)
        if kind == "bool":
            if raw.lower() in ("true", "1", "yes"):
                return True
            if raw.lower() in ("false", "0", "no"):
                return False
            raise ValueError(f"not a bool: {raw!r}")
        return raw
    except ValueError as e:
        raise ConfigError(f"bad value for {key!r}: {e}") from None


def parse_config_text(text: str, source: str = "<string>") -> Config:
    values = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if ":" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key: value', got {raw!r}")
        key, value = line.split(":", 1)
        key = key.strip()
        if key not in _FIELDS:
            raise ConfigError(f"{source}:{lineno}: unknown key {key!r}")
        if key in values:
            raise ConfigError(f"{source}:{lineno}: duplicate key {key!r}")
        values[key] = _parse_value(key, value)
    return Config(**values)


def load_config(path) -> Config:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    return parse_config_text(path.read_text(encoding="utf-8"), source=str(path))


def apply_overrides(cfg: Config, overrides) -> Config:
    updates = {}
    for item in overrides or []:
        if "=" not in item:
            raise ConfigError(f"override must look like key=value, got {item!r}")
        key, value = item.split("=", 1)
        key = key.strip()
        if key not in _FIELDS:
            raise ConfigError(f"unknown override key {key!r}")
        updates[key] = _parse_value(key, value)
    return replace(cfg, **updates) if updates else cfg


def serialize_config(cfg: Config) -> str:
    lines = []
    for name in sorted(_FIELDS):
        value = getattr(cfg, name)
        if isinstance(value, bool):
            text = "true" if value else "false"
        elif isinstance(value, float):
            text = repr(value)
        else:
            text = str(value)
        lines.append(f"{name}: {text}")
    return "\n".join(lines) + "\n"
