"""Experiment configuration: typed sections, TOML round-trip, presets.

One :class:`ExperimentConfig` drives every CLI command. The ``desk`` preset
is sized for a laptop CPU; the ``paper`` preset carries the reference
constants (256-square triplanes, 48+48 ray samples, 1000 denoising steps,
19 sampler steps, guidance 4.5, 28 transformer blocks) even where desk
hardware cannot run them — :func:`preset_diff` reports every field where the
two presets disagree.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import math
from dataclasses import dataclass, field, fields
from pathlib import Path

import tomli

from .errors import ConfigError


@dataclass
class GeometryConfig:
    mesh_lat: int = 15
    mesh_lon: int = 31
    expression_dim: int = 8
    base_radius: float = 0.5
    identity_scale: float = 0.08
    expression_scale: float = 0.12
    camera_radius: float = 2.7
    fov: float = 0.45
    look_at: list[float] = field(default_factory=lambda: [0.0, 0.0, 0.0])
    pitch_range: list[float] = field(default_factory=lambda: [-0.25, 0.65])
    yaw_range: list[float] = field(default_factory=lambda: [-0.78, 0.78])
    roll_range: list[float] = field(default_factory=lambda: [-0.25, 0.25])


@dataclass
class TriplaneConfig:
    plane_groups: int = 4
    resolution: int = 64
    channels: int = 16


@dataclass
class RendererConfig:
    n_coarse: int = 48
    n_fine: int = 48
    stratified: bool = True
    resolution: int = 64
    feature_dim: int = 8
    hidden_dim: int = 64
    background: float = 0.0
    box_pad: float = 0.1


@dataclass
class DataConfig:
    domains: int = 4
    pairs_per_domain: int = 200
    dynamic_identities: int = 64
    static_identities: int = 64
    views_per_expression: int = 2
    expressions_per_identity: int = 2
    texture_noise_res: int = 8
    plane_noise_res: int = 16
    noise_scale: float = 0.3
    domain_spacing: float = 0.2
    val_every: int = 20  # every n-th identity goes to the validation split


@dataclass
class VaeConfig:
    latent_channels: int = 4
    downsample: int = 4
    base_channels: int = 32
    lr: float = 1e-4
    steps: int = 1500
    batch_size: int = 4
    kl_weight: float = 1e-5
    render_resolution: int = 16
    render_coarse: int = 8
    render_fine: int = 8
    train_samples: int = 0  # 0 = use the full train split
    early_stop_l1: float = 0.0  # 0 = disabled


@dataclass
class DiffusionConfig:
    steps: int = 1000
    beta_start: float = 1e-4  # at the 1000-step reference scale
    beta_end: float = 0.02
    lambda_vlb: float = 0.001


@dataclass
class DitConfig:
    width: int = 128
    blocks: int = 4
    heads: int = 4
    patch: int = 2
    semantic_tokens: int = 4
    patch_grid: int = 8
    condition_resolution: int = 64
    cond_drop_prob: float = 0.1
    lr: float = 1e-4
    steps: int = 1500
    batch_size: int = 8
    sample_steps: int = 19
    guidance: float = 4.5
    encoder: str = "toy"  # toy | external


@dataclass
class MotionRendererConfig:
    width: int = 128
    blocks: int = 2
    heads: int = 4
    motion_dim: int = 32
    lr: float = 1e-4
    steps: int = 1200
    batch_size: int = 2
    train_coarse: int = 16
    train_fine: int = 16
    res_start: int = 32
    res_end: int = 64
    res_switch_frac: float = 0.75
    adv_start_step: int = 1000000000
    triplane_source: str = "vae"  # vae | ground_truth


@dataclass
class RunConfig:
    out: str = "runs"
    log_every: int = 50
    checkpoint_every: int = 0  # 0 = final checkpoint only
    mesh_identity_seed: int = 0  # proxy-mesh identity used at inference


_SECTIONS = {
    "geometry": GeometryConfig,
    "triplane": TriplaneConfig,
    "renderer": RendererConfig,
    "data": DataConfig,
    "vae": VaeConfig,
    "diffusion": DiffusionConfig,
    "dit": DitConfig,
    "motion_renderer": MotionRendererConfig,
    "run": RunConfig,
}


@dataclass
class ExperimentConfig:
    seed: int = 0
    preset: str = "desk"
    geometry: GeometryConfig = field(default_factory=GeometryConfig)
    triplane: TriplaneConfig = field(default_factory=TriplaneConfig)
    renderer: RendererConfig = field(default_factory=RendererConfig)
    data: DataConfig = field(default_factory=DataConfig)
    vae: VaeConfig = field(default_factory=VaeConfig)
    diffusion: DiffusionConfig = field(default_factory=DiffusionConfig)
    dit: DitConfig = field(default_factory=DitConfig)
    motion_renderer: MotionRendererConfig = field(default_factory=MotionRendererConfig)
    run: RunConfig = field(default_factory=RunConfig)

    def validate(self) -> None:
        g = self.geometry
        if g.camera_radius <= 0:
            raise ConfigError("geometry.camera_radius must be positive")
        if not 0 < g.fov < math.pi:
            raise ConfigError("geometry.fov must lie in (0, pi)")
        if self.triplane.resolution % self.vae.downsample:
            raise ConfigError("vae.downsample must divide triplane.resolution")
        lat = self.latent_shape()
        if lat[1] % self.dit.patch or lat[2] % self.dit.patch:
            raise ConfigError("dit.patch must divide the latent spatial resolution")
        if self.renderer.n_coarse < 1 or self.renderer.n_fine < 1:
            raise ConfigError("sampling counts must be >= 1")
        if self.dit.encoder not in ("toy", "external"):
            raise ConfigError(f"unknown dit.encoder {self.dit.encoder!r}")
        if self.motion_renderer.triplane_source not in ("vae", "ground_truth"):
            raise ConfigError(
                f"unknown motion_renderer.triplane_source {self.motion_renderer.triplane_source!r}"
            )

    def latent_shape(self) -> tuple[int, int, int, int]:
        """Latent tensor shape (p, h, w, c)."""
        res = self.triplane.resolution // self.vae.downsample
        return (self.triplane.plane_groups, res, res, self.vae.latent_channels)

    def image_resolution(self) -> int:
        """Final image side: the volume resolution after the 2x upsampler."""
        return self.renderer.resolution * 2

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def config_hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode("utf-8")).hexdigest()[:16]


def desk_config(seed: int = 0) -> ExperimentConfig:
    return ExperimentConfig(seed=seed, preset="desk")


def paper_config(seed: int = 0) -> ExperimentConfig:
    """Reference constants; not runnable on desk hardware, kept expressible."""
    cfg = ExperimentConfig(seed=seed, preset="paper")
    cfg.triplane.resolution = 256
    cfg.triplane.channels = 32
    cfg.vae.latent_channels = 8
    cfg.vae.base_channels = 128
    cfg.vae.steps = 100000
    cfg.vae.batch_size = 32
    cfg.vae.render_resolution = 64
    cfg.vae.render_coarse = 48
    cfg.vae.render_fine = 48
    cfg.data.domains = 28
    cfg.data.pairs_per_domain = 20000
    cfg.dit.width = 1152
    cfg.dit.blocks = 28
    cfg.dit.heads = 16
    cfg.dit.steps = 800000
    cfg.dit.batch_size = 1536
    cfg.dit.condition_resolution = 128
    cfg.motion_renderer.width = 512
    cfg.motion_renderer.blocks = 8
    cfg.motion_renderer.batch_size = 96
    cfg.motion_renderer.train_coarse = 48
    cfg.motion_renderer.train_fine = 48
    cfg.motion_renderer.res_start = 64
    cfg.motion_renderer.res_end = 128
    cfg.motion_renderer.adv_start_step = 1000000 // 96
    return cfg


def preset_config(name: str, seed: int = 0) -> ExperimentConfig:
    if name == "desk":
        return desk_config(seed)
    if name == "paper":
        return paper_config(seed)
    raise ConfigError(f"unknown preset {name!r}")


def _format_value(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, int):
        return str(value)
    if isinstance(value, float):
        text = repr(value)
        return text if ("." in text or "e" in text or "E" in text) else text + ".0"
    if isinstance(value, str):
        return json.dumps(value)
    if isinstance(value, list):
        return "[" + ", ".join(_format_value(v) for v in value) + "]"
    raise TypeError(f"cannot serialize {value!r} to TOML")


def to_toml(cfg: ExperimentConfig) -> str:
    lines = [f"seed = {cfg.seed}", f'preset = "{cfg.preset}"', ""]
    for section, cls in _SECTIONS.items():
        lines.append(f"[{section}]")
        obj = getattr(cfg, section)
        for f in fields(cls):
            lines.append(f"{f.name} = {_format_value(getattr(obj, f.name))}")
        lines.append("")
    return "\n".join(lines)


def from_toml(text: str) -> ExperimentConfig:
    try:
        raw = tomli.loads(text)
    except tomli.TOMLDecodeError as exc:
        raise ConfigError(f"invalid TOML: {exc}") from exc
    return _from_dict(raw)


def _coerce(f: dataclasses.Field, value, where: str):
    if f.type in ("int", int) and isinstance(value, bool):
        raise ConfigError(f"{where}: expected int, got bool")
    if f.type in ("float", float) and isinstance(value, int) and not isinstance(value, bool):
        return float(value)
    return value


def _from_dict(raw: dict) -> ExperimentConfig:
    cfg = ExperimentConfig()
    known = {"seed", "preset", *_SECTIONS}
    for key in raw:
        if key not in known:
            raise ConfigError(f"unknown config section or key {key!r}")
    if "preset" in raw:
        cfg = preset_config(raw["preset"])
    if "seed" in raw:
        if isinstance(raw["seed"], bool) or not isinstance(raw["seed"], int):
            raise ConfigError("seed must be an integer")
        cfg.seed = raw["seed"]
    for section, cls in _SECTIONS.items():
        if section not in raw:
            continue
        table = raw[section]
        if not isinstance(table, dict):
            raise ConfigError(f"[{section}] must be a table")
        valid = {f.name: f for f in fields(cls)}
        obj = getattr(cfg, section)
        for key, value in table.items():
            if key not in valid:
                raise ConfigError(f"unknown key {key!r} in [{section}]")
            setattr(obj, key, _coerce(valid[key], value, f"{section}.{key}"))
    cfg.validate()
    return cfg


def load_config(path: str | Path) -> ExperimentConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    return from_toml(path.read_text(encoding="utf-8"))


def save_config(cfg: ExperimentConfig, path: str | Path) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(to_toml(cfg), encoding="utf-8")


def preset_diff(desk: ExperimentConfig | None = None, paper: ExperimentConfig | None = None) -> list[dict]:
    """Field-by-field report of where the desk preset deviates from paper."""
    desk = desk or desk_config()
    paper = paper or paper_config()
    rows = []
    for section, cls in _SECTIONS.items():
        d_obj, p_obj = getattr(desk, section), getattr(paper, section)
        for f in fields(cls):
            d_val, p_val = getattr(d_obj, f.name), getattr(p_obj, f.name)
            if d_val != p_val:
                rows.append(
                    {"field": f"{section}.{f.name}", "desk": d_val, "paper": p_val}
                )
    return rows
