"""Flat key-value run configuration files.

Format: one ``key = value`` per line; blank lines and ``#`` comments are
ignored. Unknown keys are rejected. See README for the key reference.
"""

from dataclasses import dataclass, fields

from .network import ModelConfig
from .sampling import AugmentConfig
from .training import TrainConfig


@dataclass
class RunConfig:
    n_prime: int = 512
    m: int = 784
    patch_k: int = 7
    hidden_dim: int = 768
    layers: int = 4
    heads: int = 12
    lr: float = 1e-4
    epochs: int = 300
    lambda_box: float = 5.0
    mask_ratio_max: float = 0.95
    overlap_mode: str = "binary"
    seed: int = 0
    max_steps: int = 0
    detection_mode: int = 0
    min_points: int = 5
    val_every: int = 0
    ckpt_every: int = 0
    aug_auto_contrast: int = 0
    aug_sharpness: float = 0.0
    aug_color_jitter: float = 0.0
    aug_translation: float = 0.0
    aug_scale: float = 0.0
    aug_mirror_prob: float = 0.0

    def model_config(self):
        return ModelConfig(d=self.hidden_dim, layers=self.layers, heads=self.heads,
                           n_prime=self.n_prime, m=self.m, patch_k=self.patch_k,
                           detection_mode=bool(self.detection_mode))

    def augment_config(self):
        cfg = AugmentConfig(auto_contrast=bool(self.aug_auto_contrast),
                            sharpness_range=self.aug_sharpness,
                            color_jitter=self.aug_color_jitter,
                            translation_range=self.aug_translation,
                            scale_range=self.aug_scale,
                            mirror_prob=self.aug_mirror_prob,
                            seed=self.seed)
        return None if cfg.is_identity else cfg

    def train_config(self, seed=None, **overrides):
        return TrainConfig(lr=self.lr, epochs=self.epochs, max_steps=self.max_steps,
                           seed=self.seed if seed is None else seed,
                           lambda_box=self.lambda_box,
                           mask_ratio_max=self.mask_ratio_max,
                           detection_mode=bool(self.detection_mode),
                           augment_cfg=self.augment_config(), **overrides)


def parse_run_config(path):
    kinds = {f.name: f.type for f in fields(RunConfig)}
    casts = {"int": int, "float": float, "str": str}
    values = {}
    with open(path) as fh:
        for ln, line in enumerate(fh, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" in line:
                key, _, raw = line.partition("=")
            else:
                key, _, raw = line.partition(" ")
            key, raw = key.strip(), raw.strip()
            if key not in kinds:
                raise ValueError(f"{path}:{ln}: unknown configuration key {key!r}")
            caster = kinds[key]
            if isinstance(caster, str):
                caster = casts[caster]
            try:
                values[key] = caster(raw)
            except ValueError as exc:
                raise ValueError(f"{path}:{ln}: bad value for {key!r}: {raw!r}") from exc
    return RunConfig(**values)
