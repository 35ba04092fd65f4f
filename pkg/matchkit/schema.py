#!/usr/bin/env python3

import hashlib
import json
import logging
import os.path
from typing import Any, List

from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator
from typing_extensions import Self

from . import config

logger = logging.getLogger(__name__)


class ConfigError(ValueError):
    pass


class ManifestError(ValueError):
    pass


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid", validate_assignment=True)


class NetsConfig(_Section):
    kernel_size: int = Field(3, ge=1)
    branch_widths: List[int] = Field(default_factory=lambda: [16, 32])
    trunk_widths: List[int] = Field(default_factory=lambda: [64, 64])
    residual_blocks: int = Field(1, ge=0)
    mlp_hidden: List[int] = Field(default_factory=lambda: [16, 16, 16])

    @field_validator("kernel_size")
    def kernel_size_validator(cls, v):
        if v % 2 == 0:
            msg = "kernel_size must be odd so stride-1 convolutions keep their input size"
            raise ValueError(msg)
        return v

    @field_validator("branch_widths", "trunk_widths", "mlp_hidden")
    def widths_validator(cls, v):
        if not v or any(w < 1 for w in v):
            msg = "widths must be a non-empty list of positive integers"
            raise ValueError(msg)
        return v


class ColorspaceConfig(_Section):
    eps_log: float = Field(1 / 255, gt=0)
    eps_sigma: float = Field(1e-5, gt=0)
    wavelengths: List[float] = Field(
        default_factory=lambda: list(config.DEFAULT_WAVELENGTHS_NM)
    )

    @field_validator("wavelengths")
    def wavelengths_validator(cls, v):
        if len(v) != 3 or any(w <= 0 for w in v):
            msg = "wavelengths must be three positive values (R, G, B) in nm"
            raise ValueError(msg)
        return v


class MatcherConfig(_Section):
    tau_det: float = Field(25.0, ge=0)
    r_nms: int = Field(5, ge=1)
    descriptor_offsets: List[int] = Field(default_factory=lambda: [-6, -2, 2, 6])
    search_radius: float = Field(100.0, gt=0)
    ransac_iters: int = Field(2000, ge=1)
    tau_epi: float = Field(1.0, gt=0)


class SynthConfig(_Section):
    scenes: int = Field(20, ge=1)
    frames_per_scene: int = Field(3, ge=1)
    temperatures: List[float] = Field(default_factory=lambda: [2800.0, 6500.0])
    window: int = Field(1, ge=0)
    test_fraction: float = Field(0.3, ge=0, le=1)
    height: int = Field(config.DEFAULT_RESIZE_HEIGHT, ge=16)
    width: int = Field(256, ge=16)
    noise_sigma: float = Field(0.5 / 255, ge=0)
    frame_step_px: float = Field(6.0, ge=0)
    max_rotation_deg: float = Field(2.0, ge=0)
    max_perspective: float = Field(1e-4, ge=0)
    shadows: bool = True
    shadow_min: float = Field(0.3, ge=0, le=1)
    intensity_range: List[float] = Field(default_factory=lambda: [0.7, 0.95])
    min_overlap: float = Field(0.6, ge=0, le=1)

    @field_validator("temperatures")
    def temperatures_validator(cls, v):
        if not v or any(not 2000 <= t <= 10000 for t in v):
            msg = "temperatures must be a non-empty list within [2000, 10000] K"
            raise ValueError(msg)
        return v

    @field_validator("intensity_range")
    def intensity_range_validator(cls, v):
        if len(v) != 2 or not 0 < v[0] <= v[1]:
            msg = "intensity_range must be [low, high] with 0 < low <= high"
            raise ValueError(msg)
        return v

    @model_validator(mode="after")
    def frames_keep_overlap(self) -> Self:
        # overlap of the farthest unrotated frame, jitter included
        reach = (self.frames_per_scene - 1) * self.frame_step_px + config.VIEW_JITTER_PX
        overlap = max(0.0, 1.0 - reach / self.width) * (1.0 - config.VIEW_JITTER_PX / self.height)
        if overlap < self.min_overlap:
            msg = (
                f"synth.frames_per_scene={self.frames_per_scene} at synth.frame_step_px={self.frame_step_px} "
                f"leaves {overlap:.2f} overlap on a {self.width} px wide image, "
                f"below synth.min_overlap={self.min_overlap}"
            )
            raise ValueError(msg)
        return self


class TrainConfig(_Section):
    epochs: int = Field(config.DEFAULT_EPOCHS, ge=1)
    batch_size: int = Field(config.DEFAULT_BATCH_SIZE, ge=1)
    learning_rate: float = Field(config.DEFAULT_LEARNING_RATE, gt=0)
    # global SumLog weights only; network parameters use learning_rate
    theta_learning_rate: float = Field(config.DEFAULT_THETA_LEARNING_RATE, gt=0)
    resize_height: int = Field(config.DEFAULT_RESIZE_HEIGHT, ge=16)
    proxy_steps_per_transform_step: int = Field(1, ge=0)
    seed: int = 0
    kind: str = config.DEFAULT_TRANSFORM_KIND
    target_scale: float = Field(config.DEFAULT_TARGET_SCALE, gt=0)
    label_hash_decimals: int = Field(4, ge=0)
    validation_pairs: int = Field(64, ge=0)
    symmetric_pairs: bool = False

    @field_validator("kind")
    def kind_validator(cls, v):
        return config.get_transform_kind(v).primary_alias


class EvalConfig(_Section):
    thresholds: List[int] = Field(default_factory=lambda: [10, 20, 30])
    route_spacing_m: float = Field(1.0, gt=0)
    example_pairs: int = Field(4, ge=0)


class RunConfig(_Section):
    nets: NetsConfig = Field(default_factory=NetsConfig)
    colorspace: ColorspaceConfig = Field(default_factory=ColorspaceConfig)
    matcher: MatcherConfig = Field(default_factory=MatcherConfig)
    synth: SynthConfig = Field(default_factory=SynthConfig)
    train: TrainConfig = Field(default_factory=TrainConfig)
    eval: EvalConfig = Field(default_factory=EvalConfig)

    @model_validator(mode="after")
    def height_covers_footprint(self) -> Self:
        footprint = 2 * (max(abs(o) for o in self.matcher.descriptor_offsets) + 3) + 1
        if self.train.resize_height < footprint:
            msg = f"train.resize_height must be at least the matcher footprint ({footprint} px)"
            raise ValueError(msg)
        return self

    def to_key_values(self) -> dict[str, str]:
        return section_key_values(self)


def format_value(value: Any) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, (list, tuple)):
        return json.dumps(list(value))
    return str(value)


def section_key_values(model: BaseModel, prefix: str = "") -> dict[str, str]:
    out: dict[str, str] = {}
    for name in type(model).model_fields:
        value = getattr(model, name)
        key = f"{prefix}{name}"
        if isinstance(value, BaseModel):
            out.update(section_key_values(value, prefix=f"{key}."))
        else:
            out[key] = format_value(value)
    return out


def parse_key_value_lines(text: str, source: str = "<config>") -> List[str]:
    dotlist = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            msg = f"{source}:{lineno}: expected 'section.key = value', got {raw!r}"
            raise ConfigError(msg)
        key, value = (part.strip() for part in line.split("=", 1))
        if "." not in key:
            msg = f"{source}:{lineno}: key '{key}' must be prefixed with its section"
            raise ConfigError(msg)
        dotlist.append(f"{key}={value}")
    return dotlist


def dotlist_to_dict(dotlist: List[str], source: str = "<config>") -> dict:
    from omegaconf import OmegaConf
    from omegaconf.errors import OmegaConfBaseException

    try:
        conf = OmegaConf.from_dotlist(dotlist)
        return OmegaConf.to_container(conf, resolve=True)  # type: ignore[return-value]
    except OmegaConfBaseException as e:
        msg = f"{source}: could not parse config values: {e}"
        raise ConfigError(msg) from e


def validation_error_to_config_error(e: ValidationError, source: str) -> ConfigError:
    err = e.errors()[0]
    key = ".".join(str(p) for p in err["loc"])
    msg = f"{source}: invalid config key '{key}': {err['msg']}"
    return ConfigError(msg)


def parse_config_text(text: str, source: str = "<config>") -> RunConfig:
    data = dotlist_to_dict(parse_key_value_lines(text, source), source)
    try:
        return RunConfig.model_validate(data)
    except ValidationError as e:
        raise validation_error_to_config_error(e, source) from None


def load_run_config(path: str | None) -> RunConfig:
    if path is None:
        return RunConfig()
    with open(path, encoding="utf-8") as f:
        text = f.read()
    run_config = parse_config_text(text, source=path)
    logger.debug(f"Loaded config from {path}")
    return run_config


def run_config_to_text(run_config: RunConfig) -> str:
    lines = [f"{k} = {v}" for k, v in run_config.to_key_values().items()]
    return "\n".join(lines) + "\n"


def format_temperature(t: float) -> str:
    # whole kelvins print without a fraction; anything else keeps every digit
    t = float(t)
    return str(int(t)) if t.is_integer() else repr(t)


class ManifestPair(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    img1: str
    img2: str
    scene_id: int = Field(ge=0)
    t1: float
    t2: float
    frame_offset: int

    @field_validator("img1", "img2")
    def path_validator(cls, v):
        if not v or any(c.isspace() for c in v):
            msg = f"manifest paths must be non-empty and contain no whitespace: {v!r}"
            raise ValueError(msg)
        return v

    @property
    def is_self_pair(self) -> bool:
        return self.img1 == self.img2

    def to_line(self) -> str:
        return (
            f"pair {self.img1} {self.img2} {self.scene_id} "
            f"{format_temperature(self.t1)} {format_temperature(self.t2)} {self.frame_offset}"
        )

    @classmethod
    def from_line(cls, line: str) -> "ManifestPair":
        parts = line.split()
        if len(parts) != 7 or parts[0] != "pair":
            msg = f"malformed manifest line: {line!r}"
            raise ManifestError(msg)
        try:
            return cls(
                img1=parts[1],
                img2=parts[2],
                scene_id=int(parts[3]),
                t1=float(parts[4]),
                t2=float(parts[5]),
                frame_offset=int(parts[6]),
            )
        except (ValueError, ValidationError) as e:
            msg = f"malformed manifest line: {line!r} ({e})"
            raise ManifestError(msg) from None


class DatasetManifest(BaseModel):
    model_config = ConfigDict(extra="forbid")

    root: str = "."
    pairs: List[ManifestPair] = Field(default_factory=list)

    def __len__(self):
        return len(self.pairs)

    def resolve(self, path: str) -> str:
        if os.path.isabs(path):
            return path
        return os.path.join(self.root, path)

    def to_text(self) -> str:
        lines = [config.MANIFEST_HEADER] + [p.to_line() for p in self.pairs]
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str, root: str = ".") -> "DatasetManifest":
        lines = [ln for ln in text.splitlines() if ln.strip()]
        if not lines or lines[0].strip() != config.MANIFEST_HEADER:
            msg = f"manifest must start with '{config.MANIFEST_HEADER}'"
            raise ManifestError(msg)
        pairs = [ManifestPair.from_line(ln) for ln in lines[1:]]
        return cls(root=root, pairs=pairs)

    @classmethod
    def read(cls, path: str) -> "DatasetManifest":
        with open(path, encoding="utf-8") as f:
            text = f.read()
        return cls.from_text(text, root=os.path.dirname(os.path.abspath(path)))

    def write(self, path: str) -> None:
        with open(path, "w", encoding="utf-8", newline="\n") as f:
            f.write(self.to_text())

    def subset(self, pairs: List[ManifestPair]) -> "DatasetManifest":
        return DatasetManifest(root=self.root, pairs=list(pairs))

    def content_hash(self) -> str:
        return hashlib.sha256(self.to_text().encode("utf-8")).hexdigest()

    def scene_ids(self) -> set[int]:
        return {p.scene_id for p in self.pairs}
