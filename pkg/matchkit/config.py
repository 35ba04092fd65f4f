#!/usr/bin/env python3

from dataclasses import dataclass
from typing import List

DEFAULT_TRANSFORM_KIND = "gray"
DEFAULT_RESIZE_HEIGHT = 192
DEFAULT_TARGET_SCALE = 1 / 100
DEFAULT_LEARNING_RATE = 1e-4
DEFAULT_THETA_LEARNING_RATE = 1e-2
DEFAULT_BATCH_SIZE = 8
DEFAULT_EPOCHS = 10

# ITU-R 601-2 luma
LUMA_WEIGHTS = (0.299, 0.587, 0.114)

# representative camera primaries for (R, G, B); index order follows channel naming
DEFAULT_WAVELENGTHS_NM = (620.0, 540.0, 460.0)

# synthetic viewpoints jitter by up to this much on each axis
VIEW_JITTER_PX = 1.0

MANIFEST_HEADER = "matchkit-manifest v1"
BUNDLE_MAGIC = b"MKT1"
BUNDLE_VERSION = 1


@dataclass
class TransformKindConfig:
    name: str
    aliases: List[str]
    uses_encoder: bool
    uses_mlp: bool
    uses_theta: bool
    rescaled: bool
    trainable: bool

    @property
    def primary_alias(self):
        if self.aliases:
            return self.aliases[0]


TRANSFORM_KINDS = [
    TransformKindConfig(
        name="Gray",
        aliases=["gray", "grey", "luma"],
        uses_encoder=False,
        uses_mlp=False,
        uses_theta=False,
        rescaled=False,
        trainable=False,
    ),
    TransformKindConfig(
        name="SumLog",
        aliases=["sumlog", "sumlog-fit", "sumlogfit"],
        uses_encoder=False,
        uses_mlp=False,
        uses_theta=True,
        rescaled=True,
        trainable=True,
    ),
    TransformKindConfig(
        name="SumLog-E",
        aliases=["sumlog-e", "sumloge", "sumlog_e"],
        uses_encoder=True,
        uses_mlp=False,
        uses_theta=False,
        rescaled=True,
        trainable=True,
    ),
    TransformKindConfig(
        name="MLP",
        aliases=["mlp"],
        uses_encoder=False,
        uses_mlp=True,
        uses_theta=False,
        rescaled=True,
        trainable=True,
    ),
    TransformKindConfig(
        name="MLP-E",
        aliases=["mlp-e", "mlpe", "mlp_e"],
        uses_encoder=True,
        uses_mlp=True,
        uses_theta=False,
        rescaled=True,
        trainable=True,
    ),
]

TRANSFORM_KIND_LOOKUP: dict[str, TransformKindConfig] = {}
for k in TRANSFORM_KINDS:
    for a in k.aliases:
        TRANSFORM_KIND_LOOKUP[a] = k

TRANSFORM_KIND_NAMES = [k.primary_alias for k in TRANSFORM_KINDS]
TRAINABLE_KIND_NAMES = [k.primary_alias for k in TRANSFORM_KINDS if k.trainable]


class UnknownTransformKindError(ValueError):
    pass


def get_transform_kind(kind: "str | TransformKindConfig") -> TransformKindConfig:
    if isinstance(kind, TransformKindConfig):
        return kind
    try:
        return TRANSFORM_KIND_LOOKUP[kind.lower()]
    except KeyError:
        valid = ", ".join(TRANSFORM_KIND_NAMES)
        msg = f"Invalid transform kind: '{kind}'. Valid kinds are: {valid}"
        raise UnknownTransformKindError(msg) from None
