"""Run configuration: dataclasses, presets, and the dotted-key file format.

Config files are plain text, one `section.field = value` per line, values
in Python literal syntax, `#` comments allowed. `toy_config()` is the
desk-scale preset used by the acceptance suite; the defaults mirror the
full-scale training recipe.
"""

from __future__ import annotations

import ast
import dataclasses
from dataclasses import dataclass, field, fields, is_dataclass
from pathlib import Path

from .errors import ConfigError


@dataclass
class ModelConfig:
    d: int = 256  # embedding width; also the flow channel count
    n_heads: int = 4
    n_flow_steps: int = 16
    factor_out: bool = True
    factor_out_every: int = 4
    factor_out_channels: int = 64
    d_h: int = 256  # decoder hidden width
    t_obs: int = 8
    t_pred: int = 12
    # ablation switches
    use_temporal_graphormer: bool = True  # False swaps in the GRU encoder
    use_spatial: bool = True
    use_pattern_norm: bool = True
    bidirectional: bool = True
    use_centrality: bool = True
    use_positional: bool = True
    use_temporal_mask: bool = True
    use_rel_pos: bool = True
    use_steering: bool = True
    use_spatial_mask: bool = True


@dataclass
class TrainConfig:
    batch: int = 128
    lr: float = 1e-3
    betas: tuple[float, float] = (0.9, 0.999)
    weight_decay: float = 1e-6
    epochs: int = 400
    k_train: int = 20
    loss_weights: tuple[float, float, float, float] = (1.0, 0.25, 0.25, 0.5)
    val_fraction: float = 0.1
    out_dir: str = "runs/default"
    checkpoint_every: int = 1  # epochs between periodic checkpoints
    grad_clip: float = 0.0  # global-norm clip; 0 disables
    lr_schedule: str = "constant"  # "constant" or "cosine"
    lr_min_factor: float = 0.05  # cosine floor as a fraction of lr
    keep_epoch_checkpoints: bool = False  # also write epoch_NNN.ckpt files


@dataclass
class EvalConfig:
    k: int = 20
    sigma: float = 1.0


@dataclass
class DataConfig:
    format: str = "synth"  # "synth" or "eth_ucy"
    paths: tuple[str, ...] = ()
    holdout: str = ""  # leave-one-out scene name; empty trains on everything
    window_stride: int = 1
    synth_kinds: tuple[str, ...] = ("straight", "turn")
    synth_count: int = 64
    synth_seed: int = 0
    synth_noise: float = 0.01


@dataclass
class Config:
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    data: DataConfig = field(default_factory=DataConfig)
    seed: int = 0


def toy_config(seed: int = 0) -> Config:
    """Desk-scale preset: small widths, short training, synthetic data."""
    cfg = Config(seed=seed)
    cfg.model.d = 32
    cfg.model.n_flow_steps = 4
    cfg.model.factor_out = False
    cfg.model.d_h = 32
    cfg.train.batch = 2
    cfg.train.epochs = 50
    cfg.train.lr = 4e-3
    cfg.train.grad_clip = 5.0
    cfg.train.lr_schedule = "cosine"
    cfg.train.val_fraction = 0.0
    cfg.train.out_dir = "runs/toy"
    return cfg


def validate(cfg: Config) -> Config:
    m = cfg.model
    if m.d % m.n_heads != 0:
        raise ConfigError(f"n_heads {m.n_heads} must divide d {m.d}")
    if m.d % 2 != 0:
        raise ConfigError(f"flow channel count d={m.d} must be even")
    if m.factor_out:
        width = m.d
        for step in range(1, m.n_flow_steps):
            if step % m.factor_out_every == 0:
                width -= m.factor_out_channels
                if width < 2 or width % 2 != 0:
                    raise ConfigError("factor-out schedule leaves an invalid channel count")
    if cfg.train.batch < 2:
        raise ConfigError("training batch must be >= 2 (normalization init needs it)")
    if not 0.0 <= cfg.train.val_fraction < 1.0:
        raise ConfigError("val_fraction must be in [0, 1)")
    if len(cfg.train.loss_weights) != 4:
        raise ConfigError("loss_weights needs 4 entries (goal, fwd, bwd, both)")
    if cfg.train.lr_schedule not in ("constant", "cosine"):
        raise ConfigError(f"unknown lr schedule {cfg.train.lr_schedule!r}")
    if cfg.data.format not in ("synth", "eth_ucy"):
        raise ConfigError(f"unknown data format {cfg.data.format!r}")
    return cfg


def flatten(cfg: Config) -> dict[str, object]:
    """Dataclass tree -> {'model.d': 256, ...} with sorted keys."""
    out: dict[str, object] = {}

    def walk(obj, prefix):
        for f in fields(obj):
            val = getattr(obj, f.name)
            key = f"{prefix}{f.name}"
            if is_dataclass(val):
                walk(val, key + ".")
            else:
                out[key] = val

    walk(cfg, "")
    return dict(sorted(out.items()))


def from_flat(flat: dict[str, object], base: Config | None = None) -> Config:
    """Apply dotted-key values onto a (copy of a) base config."""
    cfg = dataclasses.replace(base) if base is not None else Config()
    # replace() is shallow; deep-copy the sections so the base stays intact
    cfg = Config(
        model=dataclasses.replace(cfg.model),
        train=dataclasses.replace(cfg.train),
        eval=dataclasses.replace(cfg.eval),
        data=dataclasses.replace(cfg.data),
        seed=cfg.seed,
    )
    for key, val in flat.items():
        parts = key.split(".")
        obj = cfg
        for part in parts[:-1]:
            if not hasattr(obj, part):
                raise ConfigError(f"unknown config section {key!r}")
            obj = getattr(obj, part)
        leaf = parts[-1]
        if not is_dataclass(obj) or leaf not in {f.name for f in fields(obj)}:
            raise ConfigError(f"unknown config field {key!r}")
        if isinstance(val, list):
            val = tuple(val)
        setattr(obj, leaf, val)
    return cfg


def save_config(cfg: Config, path: str | Path) -> None:
    lines = [f"{k} = {v!r}" for k, v in flatten(cfg).items()]
    Path(path).write_text("\n".join(lines) + "\n")


def load_config(path: str | Path) -> Config:
    flat: dict[str, object] = {}
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected `key = value`, got {raw!r}")
        key, val = line.split("=", 1)
        try:
            parsed = ast.literal_eval(val.strip())
        except (ValueError, SyntaxError):
            parsed = val.strip()
        flat[key.strip()] = parsed
    return validate(from_flat(flat))
