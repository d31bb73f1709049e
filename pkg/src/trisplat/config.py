"""Training configuration: dataclasses, indoor/outdoor presets and the
key=value config file format used by the CLI."""
from __future__ import annotations

from dataclasses import dataclass, field, replace

from .geometry import WindowMode
from .losses import LossWeights


@dataclass
class DensifyConfig:
    """Parameters of the periodic prune / grow step."""

    tau_prune: float = 0.022        # min blend weight seen in any view
    min_views: int = 2              # min views covering >= min_pixels pixels
    min_pixels: int = 2             # pixel-count threshold per view
    opacity_dead: float = 0.014     # hard opacity floor
    growth_rate: float = 0.30       # additions per step, fraction of survivors
    tau_small: float = 24.0         # screen area (px^2) below which we clone
    max_noise_factor: float = 1.5   # clone offset cap, times mean edge length
    interval: int = 500
    start_iter: int = 500
    stop_iter: int = 25000

    def __post_init__(self):
        if not 0.0 <= self.growth_rate:
            raise ValueError("growth_rate must be >= 0")
        if self.interval <= 0:
            raise ValueError("interval must be positive")


@dataclass
class InitConfig:
    """Point-cloud seeded triangle initialization."""

    init_opacity: float = 0.28
    init_sigma: float = 1.16
    k: float = 2.2                  # triangle size, times mean kNN distance
    knn: int = 3
    min_angle_deg: float = 10.0     # min triangle angle accepted at init
    fallback_points: int = 10000    # random seeds when the cloud is empty

    def __post_init__(self):
        if self.k <= 0:
            raise ValueError("k must be positive")
        if self.knn < 1:
            raise ValueError("knn must be >= 1")


@dataclass
class TrainConfig:
    iterations: int = 30000
    feature_lr: float = 0.0025      # SH coefficients
    opacity_lr: float = 0.014
    vertex_lr_init: float = 0.0018
    vertex_lr_final_factor: float = 0.01  # exponential decay target fraction
    sigma_lr: float = 0.0008
    weights: LossWeights = field(default_factory=LossWeights)
    densify: DensifyConfig = field(default_factory=DensifyConfig)
    init: InitConfig = field(default_factory=InitConfig)
    window: WindowMode = WindowMode.NORMALIZED
    background: tuple = (0.0, 0.0, 0.0)
    sh_warmup_interval: int = 1000  # iterations per SH degree unlock
    distortion_start_iter: int = 3000
    anneal_start: int = 5000        # annealing run length before export
    sigma_solid: float = 0.05
    anneal_weight: float = 0.1      # final weight of the solidity penalties
    seed: int = 0

    def vertex_lr(self, iteration: int) -> float:
        """Exponential decay from vertex_lr_init to its final fraction."""
        t = min(max(iteration / max(self.iterations, 1), 0.0), 1.0)
        return self.vertex_lr_init * self.vertex_lr_final_factor ** t


def outdoor_config() -> TrainConfig:
    return TrainConfig()


def indoor_config() -> TrainConfig:
    cfg = TrainConfig(vertex_lr_init=0.0015)
    cfg.weights = replace(cfg.weights, beta_normal=0.00004, beta_size=5e-8)
    cfg.densify = replace(cfg.densify, tau_prune=0.0256)
    return cfg


def preset(name: str) -> TrainConfig:
    presets = {"outdoor": outdoor_config, "indoor": indoor_config}
    if name not in presets:
        raise ValueError(f"unknown preset '{name}' (choose from {sorted(presets)})")
    return presets[name]()


# config file key -> (target object selector, attribute)
_KEY_MAP = {
    "iterations": ("train", "iterations"),
    "feature_lr": ("train", "feature_lr"),
    "opacity_lr": ("train", "opacity_lr"),
    "lr_convex_points_init": ("train", "vertex_lr_init"),
    "lr_convex_points_final_factor": ("train", "vertex_lr_final_factor"),
    "lr_sigma": ("train", "sigma_lr"),
    "lambda_dssim": ("weights", "lambda_dssim"),
    "lambda_opacity": ("weights", "beta_opacity"),
    "lambda_distortion": ("weights", "beta_distortion"),
    "lambda_normals": ("weights", "beta_normal"),
    "lambda_size": ("weights", "beta_size"),
    "importance_threshold": ("densify", "tau_prune"),
    "opacity_dead": ("densify", "opacity_dead"),
    "split_size": ("densify", "tau_small"),
    "max_noise_factor": ("densify", "max_noise_factor"),
    "densify_interval": ("densify", "interval"),
    "densify_start": ("densify", "start_iter"),
    "densify_stop": ("densify", "stop_iter"),
    "growth_rate": ("densify", "growth_rate"),
    "init_opacity": ("init", "init_opacity"),
    "init_sigma": ("init", "init_sigma"),
    "init_k": ("init", "k"),
    "init_fallback_points": ("init", "fallback_points"),
    "sh_warmup_interval": ("train", "sh_warmup_interval"),
    "distortion_start": ("train", "distortion_start_iter"),
    "anneal_start": ("train", "anneal_start"),
    "sigma_solid": ("train", "sigma_solid"),
    "anneal_weight": ("train", "anneal_weight"),
    "seed": ("train", "seed"),
    "window": ("train", "window"),
}

_INT_FIELDS = {"iterations", "densify_interval", "densify_start", "densify_stop",
               "sh_warmup_interval", "distortion_start", "anneal_start", "seed",
               "init_fallback_points"}


def apply_option(cfg: TrainConfig, key: str, raw: str):
    """Set one key=value option on a config, with type checking."""
    if key not in _KEY_MAP:
        raise ValueError(f"unknown config key '{key}'")
    target_name, attr = _KEY_MAP[key]
    target = {"train": cfg, "weights": cfg.weights,
              "densify": cfg.densify, "init": cfg.init}[target_name]
    if key == "window":
        try:
            value = WindowMode(raw.strip().lower())
        except ValueError:
            raise ValueError(f"window must be 'normalized' or 'sigmoid', got '{raw}'")
    elif key in _INT_FIELDS:
        try:
            value = int(raw)
        except ValueError:
            raise ValueError(f"config key '{key}' expects an integer, got '{raw}'")
    else:
        try:
            value = float(raw)
        except ValueError:
            raise ValueError(f"config key '{key}' expects a number, got '{raw}'")
    setattr(target, attr, value)


def load_config(path, base: TrainConfig | None = None) -> TrainConfig:
    """Parse a key=value config file ('#' comments, blank lines ignored)."""
    cfg = base if base is not None else TrainConfig()
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            text = line.split("#", 1)[0].strip()
            if not text:
                continue
            if "=" not in text:
                raise ValueError(f"{path}:{lineno}: expected key=value, got '{text}'")
            key, _, raw = text.partition("=")
            try:
                apply_option(cfg, key.strip(), raw.strip())
            except ValueError as exc:
                raise ValueError(f"{path}:{lineno}: {exc}") from None
    return cfg
