"""Procedural synthetic-identity dataset.

Each identity is a pair of band-limited noise fields: a UV-space neural
texture for the dynamic face region and three static feature planes. The
``domain_tag`` shifts the texture's global mean by a fixed spacing, so
domains are linearly separable by construction. Ground-truth supervision
(images, depth, opacity, feature maps) comes from rendering the fused
triplane with a frozen, randomly initialized "oracle" feature decoder that
is persisted next to the manifest.

Two dataset shapes are generated:

* ``pairs``  — one (image, parametric triplane) pair per identity, random
  expression and camera pose;
* ``dynamic``/``static`` — multi-view reenactment supervision: dynamic
  identities carry several expressions with several views each, static
  identities a single expression under several views.
"""

from __future__ import annotations

import json
import shutil
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from torch.nn import functional as F

from . import io
from .config import ExperimentConfig
from .geometry import CameraPose, HeadMesh, mesh_from_params, sample_camera_pose
from .rng import derive_seed, make_rng, seed_sequence
from .triplane import (
    NeuralTexture,
    ParametricTriplane,
    RenderableTriplane,
    default_static_mask,
    fuse,
    load_triplane,
    save_triplane,
)
from .volume import FeatureDecoder, SamplingConfig, render

SCHEMA_VERSION = 1
ORACLE_DECODER_FILE = "oracle_decoder.ckpt"


@dataclass
class SyntheticIdentity:
    identity_seed: int
    domain_tag: int
    base_texture: NeuralTexture
    static_planes: torch.Tensor  # (3, H, W, C)


def _band_limited_field(
    rng: np.random.Generator, low_res: int, out_res: int, channels: int, scale: float
) -> torch.Tensor:
    """Smooth random field: low-res Gaussian noise, bilinearly upsampled."""
    noise = rng.standard_normal((channels, low_res, low_res)) * scale
    x = torch.as_tensor(noise, dtype=torch.float32)[None]
    up = F.interpolate(x, size=(out_res, out_res), mode="bilinear", align_corners=False)
    return up[0].permute(1, 2, 0).contiguous()


# Channel 0 is the "matter" channel: near +1 inside the dynamic (face)
# texture, near -1 on the static planes. A 3D point averages the three plane
# lookups, so channel 0 exceeds the oracle decoder's density threshold only
# inside the visual hull of the rasterized mesh, giving the scene an actual
# head-shaped surface instead of uniform fog.
MATTER_CHANNEL = 0
MATTER_LEVEL = 1.0
MATTER_NOISE = 0.05


def make_identity(identity_seed: int, domain_tag: int, cfg: ExperimentConfig) -> SyntheticIdentity:
    """Deterministic identity fields; the domain shifts the texture mean."""
    if not 0 <= domain_tag < cfg.data.domains:
        raise ValueError(f"domain_tag {domain_tag} outside [0, {cfg.data.domains})")
    rng = np.random.Generator(
        np.random.Philox(seed_sequence(identity_seed, "identity", domain_tag))
    )
    res, C = cfg.triplane.resolution, cfg.triplane.channels
    noise_ratio = MATTER_NOISE / cfg.data.noise_scale
    raw = _band_limited_field(rng, cfg.data.texture_noise_res, res, C, cfg.data.noise_scale)
    shift = cfg.data.domain_spacing * (domain_tag - (cfg.data.domains - 1) / 2.0)
    texture = raw + shift
    texture[..., MATTER_CHANNEL] = MATTER_LEVEL + noise_ratio * raw[..., MATTER_CHANNEL]
    static = torch.stack(
        [
            _band_limited_field(rng, cfg.data.plane_noise_res, res, C, cfg.data.noise_scale)
            for _ in range(3)
        ]
    )
    static[..., MATTER_CHANNEL] = (
        -MATTER_LEVEL + noise_ratio * static[..., MATTER_CHANNEL]
    )
    return SyntheticIdentity(
        identity_seed=int(identity_seed),
        domain_tag=int(domain_tag),
        base_texture=NeuralTexture(texels=texture.contiguous()),
        static_planes=static.contiguous(),
    )


def identity_triplane(identity: SyntheticIdentity, config_hash: str = "") -> ParametricTriplane:
    planes = torch.cat([identity.static_planes, identity.base_texture.texels[None]], dim=0)
    return ParametricTriplane(
        planes=planes.contiguous(),
        static_mask=default_static_mask(planes.shape[0]),
        meta={
            "identity_seed": identity.identity_seed,
            "domain_tag": identity.domain_tag,
            "config_hash": config_hash,
        },
    )


# Oracle density pathway constants: hidden unit 0 of each layer carries a
# thresholded copy of the matter channel so density turns on only inside the
# visual hull (matter score above MATTER_GATE) and empty space stays clear.
MATTER_GATE = 0.6
_GAIN_1, _GAIN_2, _GAIN_OUT = 10.0, 1.0, 12.0
_BIAS_2, _BIAS_OUT = -1.0, -9.0


def oracle_decoder(cfg: ExperimentConfig, master_seed: int) -> FeatureDecoder:
    """Frozen decoder shared by every oracle render.

    Appearance weights are random; the density path is structured (see the
    module constants) so the synthetic scene has a head-shaped surface
    rather than uniform fog.
    """
    gen = torch.Generator().manual_seed(derive_seed(master_seed, "oracle-decoder"))
    decoder = FeatureDecoder(
        cfg.triplane.channels, cfg.renderer.feature_dim, cfg.renderer.hidden_dim
    )
    lin1, lin2, lin3 = decoder.net[0], decoder.net[2], decoder.net[4]
    with torch.no_grad():
        for p in decoder.parameters():
            p.copy_(torch.empty_like(p).normal_(0.0, 0.35, generator=gen))
        lin1.weight[0].zero_()
        lin1.weight[0, MATTER_CHANNEL] = _GAIN_1
        lin1.bias[0] = -_GAIN_1 * MATTER_GATE
        lin2.weight[0].zero_()
        lin2.weight[0, 0] = _GAIN_2
        lin2.bias[0] = _BIAS_2
        lin3.weight[0].normal_(0.0, 0.02, generator=gen)
        lin3.weight[0, 0] = _GAIN_OUT
        lin3.bias[0] = _BIAS_OUT
    decoder.eval()
    for p in decoder.parameters():
        p.requires_grad_(False)
    return decoder


def save_oracle_decoder(path: Path, decoder: FeatureDecoder, cfg: ExperimentConfig, master_seed: int) -> None:
    tensors = {k: v.detach().numpy() for k, v in decoder.state_dict().items()}
    io.write_checkpoint(
        path,
        {
            "module": "oracle_decoder",
            "config_hash": cfg.config_hash(),
            "seed": master_seed,
            "step": 0,
            "channels": cfg.triplane.channels,
            "feature_dim": cfg.renderer.feature_dim,
            "hidden_dim": cfg.renderer.hidden_dim,
        },
        tensors,
    )


def load_oracle_decoder(path: str | Path) -> tuple[FeatureDecoder, dict]:
    header, tensors = io.read_checkpoint(path)
    decoder = FeatureDecoder(header["channels"], header["feature_dim"], header["hidden_dim"])
    decoder.load_state_dict({k: torch.from_numpy(v) for k, v in tensors.items()})
    decoder.eval()
    for p in decoder.parameters():
        p.requires_grad_(False)
    return decoder, header


# ---------------------------------------------------------------------------
# Manifests
# ---------------------------------------------------------------------------


@dataclass
class DatasetRecord:
    kind: str  # pairs | dynamic | static
    identity_seed: int
    domain_tag: int
    expression: list[float]
    pose: dict
    files: dict  # role -> path relative to the dataset root
    split: str  # train | val
    expr_index: int = 0
    view_index: int = 0

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "identity_seed": self.identity_seed,
            "domain_tag": self.domain_tag,
            "expression": self.expression,
            "pose": self.pose,
            "files": self.files,
            "split": self.split,
            "expr_index": self.expr_index,
            "view_index": self.view_index,
        }

    @staticmethod
    def from_dict(d: dict) -> "DatasetRecord":
        return DatasetRecord(**d)

    def camera(self) -> CameraPose:
        return CameraPose.from_dict(self.pose)


@dataclass
class DatasetManifest:
    root: str
    split: str  # pairs | reenact
    config_hash: str
    master_seed: int
    records: list[DatasetRecord] = field(default_factory=list)
    extra: dict = field(default_factory=dict)

    def to_json(self) -> str:
        payload = {
            "schema_version": SCHEMA_VERSION,
            "split": self.split,
            "config_hash": self.config_hash,
            "master_seed": self.master_seed,
            "extra": self.extra,
            "records": [r.to_dict() for r in self.records],
        }
        return json.dumps(payload, sort_keys=True, indent=1)

    def save(self, path: str | Path) -> None:
        io.atomic_write_bytes(path, self.to_json().encode("utf-8"))

    @staticmethod
    def load(path: str | Path) -> "DatasetManifest":
        payload = json.loads(Path(path).read_text(encoding="utf-8"))
        if payload.get("schema_version") != SCHEMA_VERSION:
            raise ValueError(f"{path}: unsupported manifest schema")
        manifest = DatasetManifest(
            root=str(Path(path).parent),
            split=payload["split"],
            config_hash=payload["config_hash"],
            master_seed=payload["master_seed"],
            extra=payload.get("extra", {}),
        )
        manifest.records = [DatasetRecord.from_dict(r) for r in payload["records"]]
        return manifest

    def subset(self, split: str | None = None, kind: str | None = None) -> list[DatasetRecord]:
        out = self.records
        if split is not None:
            out = [r for r in out if r.split == split]
        if kind is not None:
            out = [r for r in out if r.kind == kind]
        return out

    def identity_seeds(self, split: str) -> set[int]:
        return {r.identity_seed for r in self.records if r.split == split}


def _render_views(tri: RenderableTriplane, decoder, pose, cfg: ExperimentConfig, rng):
    sampling = SamplingConfig(
        n_coarse=cfg.renderer.n_coarse,
        n_fine=cfg.renderer.n_fine,
        stratified=cfg.renderer.stratified,
        render_resolution=cfg.renderer.resolution,
    )
    with torch.no_grad():
        return render(
            tri,
            decoder,
            pose,
            sampling,
            rng,
            background=cfg.renderer.background,
            box_pad=cfg.renderer.box_pad,
        )


class _OutputTracker:
    """Deletes everything it registered if generation aborts."""

    def __init__(self):
        self.paths: list[Path] = []

    def track(self, path: Path) -> Path:
        self.paths.append(Path(path))
        return Path(path)

    def cleanup(self) -> None:
        for p in reversed(self.paths):
            try:
                if p.is_dir():
                    shutil.rmtree(p, ignore_errors=True)
                elif p.exists():
                    p.unlink()
            except OSError:
                pass


def _split_for(index: int, val_every: int) -> str:
    return "val" if val_every > 0 and index % val_every == val_every - 1 else "train"


def _sample_expression(rng: np.random.Generator, dim: int) -> np.ndarray:
    return rng.uniform(-1.0, 1.0, dim)


def generate_pairs_split(
    n_per_domain: int,
    domains: int,
    out: str | Path,
    cfg: ExperimentConfig,
    master_seed: int | None = None,
) -> DatasetManifest:
    """Image/triplane pairs: one random expression and pose per identity."""
    if n_per_domain < 1 or domains < 1:
        raise ValueError("need at least one identity and one domain")
    if domains > cfg.data.domains:
        raise ValueError(f"domains {domains} exceeds configured {cfg.data.domains}")
    master_seed = cfg.seed if master_seed is None else master_seed
    root = Path(out)
    tracker = _OutputTracker()
    chash = cfg.config_hash()
    manifest = DatasetManifest(
        root=str(root), split="pairs", config_hash=chash, master_seed=master_seed
    )
    try:
        decoder = oracle_decoder(cfg, master_seed)
        oracle_path = root / ORACLE_DECODER_FILE
        if not oracle_path.exists():
            tracker.track(oracle_path)
            save_oracle_decoder(oracle_path, decoder, cfg, master_seed)
        manifest.extra["oracle_decoder"] = ORACLE_DECODER_FILE

        for domain in range(domains):
            for index in range(n_per_domain):
                identity_seed = derive_seed(master_seed, "pairs", domain, index)
                identity = make_identity(identity_seed, domain, cfg)
                tri = identity_triplane(identity, chash)
                rec_rng = make_rng(master_seed, "pairs-record", domain, index)
                expression = _sample_expression(rec_rng, cfg.geometry.expression_dim)
                pose = sample_camera_pose(rec_rng, cfg.geometry)
                mesh = mesh_from_params(identity_seed, expression, cfg.geometry)
                fused = fuse(tri, mesh)
                out_view = _render_views(
                    fused, decoder, pose, cfg, make_rng(master_seed, "pairs-render", domain, index)
                )

                rec_dir = tracker.track(root / "pairs" / f"{domain:02d}_{index:05d}")
                save_triplane(rec_dir / "triplane.trip", tri)
                io.write_png(
                    rec_dir / "image.png",
                    out_view.rgb.numpy(),
                    text={"config_hash": chash, "identity_seed": str(identity_seed)},
                )
                rel = rec_dir.relative_to(root)
                manifest.records.append(
                    DatasetRecord(
                        kind="pairs",
                        identity_seed=identity_seed,
                        domain_tag=domain,
                        expression=[float(e) for e in expression],
                        pose=pose.to_dict(),
                        files={
                            "triplane": str(rel / "triplane.trip"),
                            "image": str(rel / "image.png"),
                        },
                        split=_split_for(index, cfg.data.val_every),
                    )
                )
        manifest.save(root / "manifest.pairs.json")
    except BaseException:
        tracker.cleanup()
        raise
    return manifest


def generate_dynamic_static_split(
    n_dyn: int,
    n_static: int,
    views_per_expr: int,
    exprs_per_id: int,
    out: str | Path,
    cfg: ExperimentConfig,
    master_seed: int | None = None,
) -> DatasetManifest:
    """Multi-view reenactment supervision in dynamic and static flavours."""
    if exprs_per_id < 2:
        raise ValueError("dynamic identities need exprs_per_id >= 2")
    if views_per_expr < 1 or n_dyn < 1 or n_static < 0:
        raise ValueError("invalid dynamic/static counts")
    master_seed = cfg.seed if master_seed is None else master_seed
    root = Path(out)
    tracker = _OutputTracker()
    chash = cfg.config_hash()
    manifest = DatasetManifest(
        root=str(root), split="reenact", config_hash=chash, master_seed=master_seed
    )
    try:
        decoder = oracle_decoder(cfg, master_seed)
        oracle_path = root / ORACLE_DECODER_FILE
        if not oracle_path.exists():
            tracker.track(oracle_path)
            save_oracle_decoder(oracle_path, decoder, cfg, master_seed)
        manifest.extra["oracle_decoder"] = ORACLE_DECODER_FILE

        def emit(kind: str, count: int, n_expr: int):
            for index in range(count):
                identity_seed = derive_seed(master_seed, kind, index)
                domain = int(
                    make_rng(master_seed, kind + "-domain", index).integers(0, cfg.data.domains)
                )
                identity = make_identity(identity_seed, domain, cfg)
                tri = identity_triplane(identity, chash)
                id_dir = tracker.track(root / kind / f"{index:05d}")
                save_triplane(id_dir / "triplane.trip", tri)
                split = _split_for(index, cfg.data.val_every)
                for e_idx in range(n_expr):
                    rec_rng = make_rng(master_seed, kind + "-expr", index, e_idx)
                    expression = _sample_expression(rec_rng, cfg.geometry.expression_dim)
                    mesh = mesh_from_params(identity_seed, expression, cfg.geometry)
                    fused = fuse(tri, mesh)
                    e_dir = id_dir / f"expr{e_idx}"
                    io.write_triplane(
                        e_dir / "fused.trip",
                        fused.planes.numpy(),
                        meta={
                            "identity_seed": identity_seed,
                            "config_hash": chash,
                            "expression": [float(e) for e in expression],
                        },
                    )
                    for v_idx in range(views_per_expr):
                        view_rng = make_rng(master_seed, kind + "-view", index, e_idx, v_idx)
                        pose = sample_camera_pose(view_rng, cfg.geometry)
                        out_view = _render_views(
                            fused,
                            decoder,
                            pose,
                            cfg,
                            make_rng(master_seed, kind + "-render", index, e_idx, v_idx),
                        )
                        v_dir = e_dir / f"view{v_idx}"
                        io.write_png(
                            v_dir / "image.png",
                            out_view.rgb.numpy(),
                            text={"config_hash": chash, "identity_seed": str(identity_seed)},
                        )
                        io.write_imgf(v_dir / "depth.imgf", out_view.depth.numpy())
                        io.write_imgf(v_dir / "opacity.imgf", out_view.opacity.numpy())
                        io.write_imgf(v_dir / "feature.imgf", out_view.feature_raw.numpy())
                        rel = v_dir.relative_to(root)
                        manifest.records.append(
                            DatasetRecord(
                                kind=kind,
                                identity_seed=identity_seed,
                                domain_tag=domain,
                                expression=[float(e) for e in expression],
                                pose=pose.to_dict(),
                                files={
                                    "image": str(rel / "image.png"),
                                    "depth": str(rel / "depth.imgf"),
                                    "opacity": str(rel / "opacity.imgf"),
                                    "feature": str(rel / "feature.imgf"),
                                    "fused_triplane": str(
                                        (id_dir / f"expr{e_idx}" / "fused.trip").relative_to(root)
                                    ),
                                    "identity_triplane": str(
                                        (id_dir / "triplane.trip").relative_to(root)
                                    ),
                                },
                                split=split,
                                expr_index=e_idx,
                                view_index=v_idx,
                            )
                        )

        emit("dynamic", n_dyn, exprs_per_id)
        if n_static:
            emit("static", n_static, 1)
        manifest.save(root / "manifest.reenact.json")
    except BaseException:
        tracker.cleanup()
        raise
    return manifest


def load_record_triplane(root: str | Path, record: DatasetRecord, role: str = "triplane") -> ParametricTriplane:
    return load_triplane(Path(root) / record.files[role])


def load_record_fused(root: str | Path, record: DatasetRecord) -> RenderableTriplane:
    planes, meta = io.read_triplane(Path(root) / record.files["fused_triplane"])
    return RenderableTriplane(planes=torch.from_numpy(planes), provenance=meta)


def load_record_image(root: str | Path, record: DatasetRecord) -> torch.Tensor:
    arr, _ = io.read_png(Path(root) / record.files["image"])
    return torch.as_tensor(arr, dtype=torch.float32)
