#!/usr/bin/env python3

"""
The MKT1 model bundle: a self-describing binary container of float32 tensors.

Layout (little-endian):

    b"MKT1" | version u32 | tensor count u32
    kv length u32 | UTF-8 "key = value" lines, sorted by key
    per tensor, sorted by name:
        name length u16 | UTF-8 name | rank u8 | dims u32[rank] | f32 payload

The key-value block carries the network architecture (`nets.*`), the
colorspace constants (`colorspace.*`) and training metadata (`meta.*`).
"""

import logging
import struct
from dataclasses import dataclass, field
from typing import Dict

import numpy as np
import torch

from matchkit import config
from matchkit.nets import ProxyModel, TransformModels, build_proxy, build_transform_models
from matchkit.schema import (
    ColorspaceConfig,
    NetsConfig,
    RunConfig,
    dotlist_to_dict,
    section_key_values,
)

logger = logging.getLogger(__name__)

PROXY_PREFIX = "proxy."
TRANSFORM_PREFIXES = ("encoder.", "mlp.", "theta")


class BundleFormatError(ValueError):
    pass


@dataclass
class ModelBundle:
    tensors: Dict[str, np.ndarray] = field(default_factory=dict)
    values: Dict[str, str] = field(default_factory=dict)
    version: int = config.BUNDLE_VERSION

    @property
    def kind(self) -> str:
        return self.values.get("meta.kind", config.DEFAULT_TRANSFORM_KIND)

    @property
    def stage(self) -> str:
        return self.values.get("meta.stage", "proxy")

    def has_proxy(self) -> bool:
        return any(name.startswith(PROXY_PREFIX) for name in self.tensors)

    def has_transform(self) -> bool:
        return any(name.startswith(TRANSFORM_PREFIXES) for name in self.tensors)

    def section(self, prefix: str) -> dict:
        lines = [f"{k[len(prefix) + 1:]}={v}" for k, v in sorted(self.values.items()) if k.startswith(prefix + ".")]
        return dotlist_to_dict(lines, source=f"bundle [{prefix}]")


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            msg = f"bundle truncated at byte {self.pos} (needed {n} more)"
            raise BundleFormatError(msg)
        chunk = self.data[self.pos : self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def _kv_text(values: Dict[str, str]) -> bytes:
    for key, value in values.items():
        if "=" in key or "\n" in key or "\n" in value:
            msg = f"bundle key/value not representable: {key!r} = {value!r}"
            raise BundleFormatError(msg)
    return "".join(f"{k} = {values[k]}\n" for k in sorted(values)).encode("utf-8")


def bundle_to_bytes(bundle: ModelBundle) -> bytes:
    kv = _kv_text(bundle.values)
    out = [config.BUNDLE_MAGIC, struct.pack("<II", bundle.version, len(bundle.tensors))]
    out.append(struct.pack("<I", len(kv)))
    out.append(kv)
    for name in sorted(bundle.tensors):
        arr = np.ascontiguousarray(bundle.tensors[name], dtype="<f4")
        encoded = name.encode("utf-8")
        if len(encoded) > 0xFFFF or arr.ndim > 0xFF:
            msg = f"tensor {name!r} cannot be stored (name or rank too large)"
            raise BundleFormatError(msg)
        out.append(struct.pack("<H", len(encoded)))
        out.append(encoded)
        out.append(struct.pack("<B", arr.ndim))
        out.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        out.append(arr.tobytes(order="C"))
    return b"".join(out)


def bundle_from_bytes(data: bytes) -> ModelBundle:
    reader = _Reader(data)
    if reader.take(4) != config.BUNDLE_MAGIC:
        msg = "not a model bundle (bad magic)"
        raise BundleFormatError(msg)
    version, count = reader.unpack("<II")
    if version != config.BUNDLE_VERSION:
        msg = f"unsupported bundle version {version} (expected {config.BUNDLE_VERSION})"
        raise BundleFormatError(msg)
    (kv_len,) = reader.unpack("<I")
    values: Dict[str, str] = {}
    try:
        kv_text = reader.take(kv_len).decode("utf-8")
    except UnicodeDecodeError as e:
        msg = f"bundle key-value block is not UTF-8: {e}"
        raise BundleFormatError(msg) from None
    for line in kv_text.splitlines():
        if " = " not in line:
            msg = f"malformed bundle key-value line: {line!r}"
            raise BundleFormatError(msg)
        key, value = line.split(" = ", 1)
        values[key] = value

    tensors: Dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = reader.unpack("<H")
        name = reader.take(name_len).decode("utf-8")
        (rank,) = reader.unpack("<B")
        dims = reader.unpack(f"<{rank}I")
        size = int(np.prod(dims, dtype=np.int64))
        payload = reader.take(4 * size)
        tensors[name] = np.frombuffer(payload, dtype="<f4").reshape(dims).copy()
    if reader.pos != len(data):
        msg = f"{len(data) - reader.pos} trailing bytes after the tensor table"
        raise BundleFormatError(msg)
    return ModelBundle(tensors=tensors, values=values, version=version)


def save_bundle(bundle: ModelBundle, path: str) -> None:
    with open(path, "wb") as f:
        f.write(bundle_to_bytes(bundle))
    logger.info(f"Saved bundle with {len(bundle.tensors)} tensors to {path}")


def load_bundle(path: str) -> ModelBundle:
    with open(path, "rb") as f:
        data = f.read()
    bundle = bundle_from_bytes(data)
    logger.debug(f"Loaded {bundle.stage} bundle ({bundle.kind}) from {path}")
    return bundle


def _state_to_numpy(prefix: str, state: Dict[str, torch.Tensor]) -> Dict[str, np.ndarray]:
    return {f"{prefix}{k}": v.detach().cpu().to(torch.float32).numpy() for k, v in state.items()}


def make_bundle(
    run_config: RunConfig,
    proxy: ProxyModel | None = None,
    models: TransformModels | None = None,
    metadata: Dict[str, str] | None = None,
) -> ModelBundle:
    tensors: Dict[str, np.ndarray] = {}
    if proxy is not None:
        tensors.update(_state_to_numpy(PROXY_PREFIX, proxy.state_dict()))
    if models is not None:
        tensors.update(_state_to_numpy("", models.named_tensors()))

    values = section_key_values(run_config.nets, prefix="nets.")
    values.update(section_key_values(run_config.colorspace, prefix="colorspace."))
    values["meta.kind"] = models.kind if models is not None else config.DEFAULT_TRANSFORM_KIND
    values["meta.stage"] = "transform" if models is not None else "proxy"
    values["meta.target_scale"] = repr(run_config.train.target_scale)
    for key, value in (metadata or {}).items():
        values[f"meta.{key}"] = str(value)
    return ModelBundle(tensors=tensors, values=values)


def _load_state(module: torch.nn.Module, prefix: str, tensors: Dict[str, np.ndarray], what: str) -> None:
    state = {k[len(prefix) :]: torch.from_numpy(v.copy()) for k, v in tensors.items() if k.startswith(prefix)}
    try:
        module.load_state_dict(state, strict=True)
    except RuntimeError as e:
        msg = f"{what} tensors do not fit the architecture in the bundle: {e}"
        raise BundleFormatError(msg) from None


def bundle_nets_config(bundle: ModelBundle) -> NetsConfig:
    try:
        return NetsConfig.model_validate(bundle.section("nets"))
    except ValueError as e:
        msg = f"bundle architecture config is invalid: {e}"
        raise BundleFormatError(msg) from None


def bundle_colorspace_config(bundle: ModelBundle) -> ColorspaceConfig:
    try:
        return ColorspaceConfig.model_validate(bundle.section("colorspace"))
    except ValueError as e:
        msg = f"bundle colorspace config is invalid: {e}"
        raise BundleFormatError(msg) from None


def bundle_models(bundle: ModelBundle) -> tuple[TransformModels | None, ProxyModel | None]:
    """Rebuild the networks stored in a bundle, in eval mode."""
    nets_cfg = bundle_nets_config(bundle)
    proxy = None
    if bundle.has_proxy():
        proxy = build_proxy(nets_cfg)
        _load_state(proxy, PROXY_PREFIX, bundle.tensors, "proxy")
        proxy.eval()

    models = None
    if bundle.has_transform():
        models = build_transform_models(bundle.kind, nets_cfg)
        if models.encoder is not None:
            _load_state(models.encoder, "encoder.", bundle.tensors, "encoder")
        if models.mlp is not None:
            _load_state(models.mlp, "mlp.", bundle.tensors, "MLP")
        if models.theta is not None:
            if "theta" not in bundle.tensors:
                msg = f"{bundle.kind} bundle has no 'theta' tensor"
                raise BundleFormatError(msg)
            with torch.no_grad():
                models.theta.copy_(torch.from_numpy(bundle.tensors["theta"].copy()))
        models.eval()
    return models, proxy
