"""Run configuration and dataset manifests."""
from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from .errors import ValidationError
from .sarcam import AspectPose
from .shade import NoiseConfig, ShaderParams

CONFIG_ENV = "DIFFSAR_CONFIG"


@dataclass(frozen=True)
class RunConfig:
    height: int = 128
    width: int = 128
    spacing: float = 0.075
    n_elevations: int = 6
    elevation_range: tuple[float, float] = (10.0, 60.0)
    n_azimuths: int = 36
    azimuth_range: tuple[float, float] = (0.0, 350.0)
    views: int | None = None
    seed: int = 0
    label_sigma: float = 0.0
    noise: bool = True
    additive_std: float = 0.05
    multiplicative_halfwidth: float = 0.3
    pedf_factor: float = 3.0
    dynamic_range_db: float = 30.0
    shader: str = "analytic"
    shader_weights: str | None = None
    diffuse: float = 0.7
    specular: float = 0.3
    exponent: float = 8.0
    background: float = 0.0
    iterations_l1: int = 1080
    iterations_l2: int = 540
    batch_l1: int = 2
    batch_l2: int = 4
    sigma_l1: float = 1e-3
    sigma_l2: float = 2.5e-4
    lr: float = 1.0
    momentum: float = 0.9
    dampening: float = 0.9
    dome_radius: float = 2.0
    regularizer_reduction: str = "mean"
    regularizer_scale: float | None = None
    voxel_resolution: int = 64
    window: int = 3
    out_dir: str = "out"

    def __post_init__(self):
        if min(self.height, self.width, self.n_elevations, self.n_azimuths) <= 0:
            raise ValidationError("image size and grid counts must be positive")
        if self.spacing <= 0:
            raise ValidationError("pixel spacing must be positive")
        if self.views is not None and not 0 < self.views <= self.n_elevations * self.n_azimuths:
            raise ValidationError(f"views must lie in 1..{self.n_elevations * self.n_azimuths}")
        if self.shader not in ("analytic", "learned"):
            raise ValidationError(f"unknown shader {self.shader!r}")
        if self.shader == "learned" and not self.shader_weights:
            raise ValidationError("learned shader needs shader_weights")
        for name in ("elevation_range", "azimuth_range"):
            object.__setattr__(self, name, tuple(float(v) for v in getattr(self, name)))

    def replace(self, **kw) -> "RunConfig":
        return replace(self, **kw)

    @property
    def noise_config(self) -> NoiseConfig:
        return NoiseConfig(self.additive_std, self.multiplicative_halfwidth)

    @property
    def shader_params(self) -> ShaderParams:
        return ShaderParams(self.diffuse, self.specular, self.exponent, self.background)

    def pose_grid(self) -> list[AspectPose]:
        """Elevation-major grid of poses, optionally thinned to ``views`` evenly spaced entries."""
        elevs = np.linspace(*self.elevation_range, self.n_elevations)
        azs = np.linspace(*self.azimuth_range, self.n_azimuths)
        poses = [AspectPose(float(a), float(e)) for e in elevs for a in azs]
        if self.views is not None:
            pick = np.round(np.linspace(0, len(poses) - 1, self.views)).astype(int)
            poses = [poses[i] for i in pick]
        return poses

    def to_dict(self) -> dict:
        return asdict(self)


FIELD_NAMES = {f.name for f in fields(RunConfig)}


def load_config_file(path) -> dict:
    with open(path) as fh:
        data = json.load(fh)
    if not isinstance(data, dict):
        raise ValidationError(f"{path}: config must be a JSON object")
    unknown = set(data) - FIELD_NAMES
    if unknown:
        raise ValidationError(f"{path}: unknown config keys {sorted(unknown)}")
    return data


def resolve_config(cli: dict | None = None, path=None, env: dict | None = None) -> RunConfig:
    """Defaults, overlaid by the config file (explicit path or ``$DIFFSAR_CONFIG``), then CLI values.

    CLI entries that are None count as unset.
    """
    env = os.environ if env is None else env
    path = path or env.get(CONFIG_ENV)
    values = load_config_file(path) if path else {}
    values.update({k: v for k, v in (cli or {}).items() if v is not None and k in FIELD_NAMES})
    return RunConfig(**values)


# ---------------------------------------------------------------------------
# Manifests

@dataclass
class ManifestRecord:
    image: str
    azimuth: float
    elevation: float
    sigma: float
    noise_branch: str
    seed: int
    object_id: str
    pedf_threshold: float
    spacing: float
    png: str | None = None

    @property
    def pose(self) -> AspectPose:
        return AspectPose(self.azimuth, self.elevation)


@dataclass
class DatasetManifest:
    records: list[ManifestRecord] = field(default_factory=list)
    root: str = "."

    def to_json(self) -> str:
        return json.dumps({"records": [asdict(r) for r in self.records]}, indent=1, sort_keys=True)

    def write(self, path) -> None:
        Path(path).write_text(self.to_json() + "\n")

    @classmethod
    def load(cls, path, check_files: bool = True) -> "DatasetManifest":
        path = Path(path)
        data = json.loads(path.read_text())
        records = []
        for i, row in enumerate(data.get("records", [])):
            try:
                rec = ManifestRecord(**row)
                rec.pose
            except (TypeError, ValidationError) as exc:
                raise ValidationError(f"manifest row {i}: {exc}") from None
            records.append(rec)
        man = cls(records, str(path.parent))
        if check_files:
            for i, rec in enumerate(records):
                if not man.path_of(rec).exists():
                    raise FileNotFoundError(f"manifest row {i}: missing image file {rec.image}")
        return man

    def path_of(self, record: ManifestRecord) -> Path:
        return Path(self.root) / record.image
