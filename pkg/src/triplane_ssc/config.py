"""Pipeline configuration and its presets."""
from __future__ import annotations

import json
from dataclasses import dataclass, field, fields, replace

from .attention import DeformableAttnConfig
from .geometry import CameraIntrinsics, CameraPose, GridSpec
from .triplane import TriplaneConfig

DESK_STAGE2_GRID = GridSpec((32, 32, 8), (0.0, -25.6, -2.0), (51.2, 25.6, 4.4))


@dataclass(frozen=True)
class PipelineConfig:
    stage2_grid: GridSpec = DESK_STAGE2_GRID
    intrinsics: CameraIntrinsics = CameraIntrinsics(40.0, 40.0, 32.0, 32.0, 64, 64)
    pose: CameraPose = CameraPose((0.0, 0.0, 1.2))
    num_classes: int = 6
    dim: int = 24
    heads: int = 2
    offsets: int = 4
    ref_grid: tuple = (4, 4, 2)
    esda_stride: int = 4
    esda_layers: int = 2
    ecda_layers: int = 2
    ffn_hidden: int = 48
    head_hidden: int = 64
    encoder_width: int = 16
    latent: str = "gaussian"  # "gaussian" (CVAE) or "none" (deterministic ablation)
    beta: float = 0.01
    beta_warmup: float = 0.1
    lr: float = 1e-3
    min_lr: float = 1e-5
    warmup: int = 50
    steps_stage1: int = 2000
    steps_stage2: int = 4000
    teacher_forcing: float = 0.5  # fraction of stage-2 steps fed ground-truth occupancy
    depth_noise: float = 0.0  # multiplicative Gaussian sigma on input depth
    class_weights: str = "inverse_log"  # or "uniform"
    optimizer: str = "adam"  # or "sgd" (heavy-ball, momentum 0.9)
    momentum: float = 0.9
    seed: int = 0
    extra: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        for name in ("num_classes", "dim", "heads", "offsets", "esda_stride", "ffn_hidden", "head_hidden"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.dim % self.heads or self.dim % 6:
            raise ValueError(f"dim {self.dim} must be divisible by heads {self.heads} and by 6")
        if self.num_classes < 2:
            raise ValueError("need at least 2 classes")
        if self.optimizer not in ("adam", "sgd"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        if self.latent not in ("gaussian", "none"):
            raise ValueError(f"unknown latent mode {self.latent!r}")
        if any(e % 2 for e in self.stage2_grid.extents):
            raise ValueError("stage-2 grid extents must be even")
        if any(s % r for s, r in zip(self.stage1_grid.extents, self.ref_grid)):
            raise ValueError(f"reference grid {self.ref_grid} must divide {self.stage1_grid.extents}")

    @property
    def stage1_grid(self):
        """Half the stage-2 resolution per axis; also the triplane lattice of both stages."""
        return self.stage2_grid.coarsened(2)

    @property
    def triplane(self):
        return TriplaneConfig(
            dim=self.dim,
            heads=self.heads,
            offsets=self.offsets,
            esda_stride=self.esda_stride,
            esda_layers=self.esda_layers,
            ecda_layers=self.ecda_layers,
            ref_grid=tuple(self.ref_grid),
            ffn_hidden=self.ffn_hidden,
            head_hidden=self.head_hidden,
        )

    @property
    def deformable(self):
        return DeformableAttnConfig(self.heads, self.offsets, self.dim)

    @property
    def feature_extent(self):
        return self.intrinsics.height // 4, self.intrinsics.width // 4

    def to_dict(self):
        d = {}
        for f in fields(self):
            v = getattr(self, f.name)
            if hasattr(v, "to_dict"):
                v = v.to_dict()
            elif isinstance(v, tuple):
                v = list(v)
            d[f.name] = v
        return d

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        kw = dict(d)
        if "stage2_grid" in kw:
            kw["stage2_grid"] = GridSpec.from_dict(kw["stage2_grid"])
        if "intrinsics" in kw:
            kw["intrinsics"] = CameraIntrinsics.from_dict(kw["intrinsics"])
        if "pose" in kw:
            kw["pose"] = CameraPose.from_dict(kw["pose"])
        if "ref_grid" in kw:
            kw["ref_grid"] = tuple(kw["ref_grid"])
        return cls(**kw)

    def to_json(self):
        # json writes floats with repr, which round-trips exactly
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text):
        return cls.from_dict(json.loads(text))

    def updated(self, **overrides):
        return replace(self, **{k: v for k, v in overrides.items() if v is not None})


def desk_preset():
    return PipelineConfig()


def paper_shape_preset():
    """Full-size outdoor grids, 20 classes and a KITTI-like camera, for shape and memory checks only."""
    return PipelineConfig(
        stage2_grid=GridSpec((256, 256, 32), (0.0, -25.6, -2.0), (51.2, 25.6, 4.4)),
        intrinsics=CameraIntrinsics(707.0912, 707.0912, 601.8873, 183.1104, 1216, 368),
        pose=CameraPose((0.0, 0.0, 1.73)),
        num_classes=20,
        dim=48,
        heads=8,
        offsets=8,
        ref_grid=(16, 16, 4),
    )


PRESETS = {"desk": desk_preset, "paper-shape": paper_shape_preset}


def preset(name):
    try:
        return PRESETS[name]()
    except KeyError:
        raise ValueError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}") from None


__all__ = ["PipelineConfig", "PRESETS", "desk_preset", "paper_shape_preset", "preset"]
