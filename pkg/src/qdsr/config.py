"""Run configuration: one JSON document with sections for every stage.

Example (all keys optional; missing keys take the preset's value)::

    {
      "seed": 7,
      "scene": {"n_emitters_range": [1, 6], "fwhm_range": [8, 24]},
      "net":   {"depth": 8, "filters": 12, "upsample_after": [6, 7]},
      "train": {"learning_rate": 0.001, "batch_size": 4},
      "loss":  {"epsilon": 1e-5, "filter_sigma": 1.5},
      "eval":  {"peak_threshold": 0.1, "min_separation_px": 4.0},
      "io":    {"pgm_preview": true}
    }

Unknown sections or keys raise :class:`ConfigError`. The training seed is the
top-level ``seed``; it is not accepted inside ``train``.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field, fields, replace

from .net import PRESETS as NET_PRESETS
from .net import NetConfig
from .optics import SceneConfig
from .train import LossConfig, TrainConfig


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class EvalConfig:
    peak_threshold: float = 0.1       # fraction of the brightest reconstructed pixel
    min_separation_px: float = 4.0    # hi-res pixels between accepted peaks
    max_distance: float | None = None  # matching cutoff, hi-res pixels
    nm_per_hires_pixel: float | None = None

    def __post_init__(self):
        if not 0 < self.peak_threshold < 1:
            raise ValueError("peak_threshold must lie in (0, 1)")
        if self.min_separation_px < 0:
            raise ValueError("min_separation_px must be non-negative")


@dataclass(frozen=True)
class IOConfig:
    pgm_preview: bool = True


@dataclass(frozen=True)
class RunConfig:
    scene: SceneConfig = field(default_factory=SceneConfig)
    net: NetConfig = field(default_factory=NetConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    io: IOConfig = field(default_factory=IOConfig)
    seed: int | None = None

    def to_dict(self) -> dict:
        out = {"seed": self.seed, "scene": self.scene.to_dict(), "net": self.net.to_dict()}
        for name in ("train", "loss", "eval", "io"):
            out[name] = dataclasses.asdict(getattr(self, name))
        del out["train"]["seed"]
        return out

    def require_seed(self) -> int:
        if self.seed is None:
            raise ConfigError("a seed is required (set \"seed\" in the config or pass --seed)")
        return self.seed

    def train_config(self) -> TrainConfig:
        return replace(self.train, seed=self.require_seed())


# Desk-scale variant: small network, short schedule, narrower scene ranges so
# the reduced model sees a learnable distribution in a few minutes of CPU.
# Dense scenes put many sub-Rayleigh neighbours into each frame; with sparse
# ones the small net only learns to localize isolated emitters.
TOY_SCENE = SceneConfig(n_emitters_range=(20, 60), fwhm_range=(12.0, 20.0),
                        intensity_range=(1e3, 1e4), background_range=(1.0, 20.0))
TOY_TRAIN = TrainConfig(learning_rate=1e-3, batch_size=4, epochs_per_iteration=5,
                        iterations=4, samples_per_iteration=256)

PRESETS = {
    "paper": RunConfig(),
    "toy": RunConfig(scene=TOY_SCENE, net=NET_PRESETS["toy"], train=TOY_TRAIN),
}

_SECTIONS = {"scene": SceneConfig, "net": NetConfig, "train": TrainConfig,
             "loss": LossConfig, "eval": EvalConfig, "io": IOConfig}


def _merge_section(name: str, base, values) -> object:
    if not isinstance(values, dict):
        raise ConfigError(f"section '{name}' must be a JSON object")
    allowed = {f.name for f in fields(_SECTIONS[name])}
    if name == "train":
        allowed.discard("seed")
    unknown = sorted(set(values) - allowed)
    if unknown:
        raise ConfigError(f"unknown key(s) in section '{name}': {', '.join(unknown)}")
    try:
        return replace(base, **values)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid section '{name}': {exc}") from None


def from_dict(doc: dict, preset: str = "paper") -> RunConfig:
    """Overlay ``doc`` on a named preset."""
    if preset not in PRESETS:
        raise ConfigError(f"unknown preset '{preset}' (choose from {', '.join(PRESETS)})")
    if not isinstance(doc, dict):
        raise ConfigError("config must be a JSON object")
    unknown = sorted(set(doc) - set(_SECTIONS) - {"seed"})
    if unknown:
        raise ConfigError(f"unknown top-level key(s): {', '.join(unknown)}")
    cfg = PRESETS[preset]
    updates = {name: _merge_section(name, getattr(cfg, name), doc[name])
               for name in _SECTIONS if name in doc}
    if "seed" in doc:
        updates["seed"] = parse_seed(doc["seed"])
    return replace(cfg, **updates)


def parse_seed(value) -> int | None:
    if value is None:
        return None
    if isinstance(value, bool) or not isinstance(value, int) or not 0 <= value < 2**64:
        raise ConfigError(f"seed must be an unsigned 64-bit integer, got {value!r}")
    return value


def load_config(path=None, preset: str = "paper") -> RunConfig:
    if path is None:
        return from_dict({}, preset)
    try:
        with open(path) as fh:
            doc = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from None
    return from_dict(doc, preset)
