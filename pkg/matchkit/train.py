#!/usr/bin/env python3

"""
Two-stage training: pre-train the match-count proxy on grayscale pairs, then
train a transform (and encoder) to maximize the proxy's predicted inlier count
while the proxy is refreshed on the transform's own outputs.
"""

import hashlib
import logging
import math
import time
from dataclasses import dataclass, field
from typing import Iterator, List, Sequence

import numpy as np
import torch
from torch import Tensor
from tqdm import tqdm

from matchkit import config
from matchkit.colorspace import apply_transform, gray
from matchkit.matcher import count_inliers
from matchkit.nets import (
    ProxyModel,
    TransformModels,
    build_proxy,
    build_transform_models,
    freeze,
    proxy_forward,
)
from matchkit.schema import DatasetManifest, RunConfig, TrainConfig
from matchkit.tensor import AdamState, adam_step, backward, mean, mse_loss, zero_grads
from matchkit.utils import chunked, derive_seed, parallel_map, seed_everything
from matchkit.utils.img_utils import load_rgb, resize_to_height, torch_to_numpy

logger = logging.getLogger(__name__)

GRAY_HASH = "gray"
CSV_HEADER = "epoch,proxy_loss,transform_loss,val_inliers,val_predicted"


class EmptyManifestError(ValueError):
    pass


class KindMismatchError(ValueError):
    pass


@dataclass
class EpochRecord:
    epoch: int
    proxy_loss: float
    transform_loss: float = math.nan
    val_inliers: float = math.nan
    val_predicted: float = math.nan
    seconds: float = 0.0

    def to_csv_row(self) -> str:
        values = [self.proxy_loss, self.transform_loss, self.val_inliers, self.val_predicted]
        return ",".join([str(self.epoch)] + [f"{v:.6f}" for v in values])


@dataclass
class TrainLog:
    stage: str
    records: List[EpochRecord] = field(default_factory=list)
    step_losses: List[float] = field(default_factory=list)

    def append(self, record: EpochRecord) -> None:
        self.records.append(record)

    @property
    def wall_clock(self) -> float:
        return sum(r.seconds for r in self.records)

    def to_csv_text(self) -> str:
        # wall-clock stays out so the file is reproducible
        lines = [CSV_HEADER] + [r.to_csv_row() for r in self.records]
        return "\n".join(lines) + "\n"

    def write_csv(self, path: str) -> None:
        with open(path, "w", encoding="utf-8", newline="\n") as f:
            f.write(self.to_csv_text())


@dataclass
class PairBatch:
    keys: List[tuple[int, bool]]  # (pair index, swapped)
    rgb1: Tensor
    rgb2: Tensor

    def __len__(self):
        return len(self.keys)


class ImageCache:
    """Decoded, height-normalized RGB images keyed by path."""

    def __init__(self, height: int):
        self.height = height
        self._images: dict[str, np.ndarray] = {}

    def get(self, path: str) -> np.ndarray:
        img = self._images.get(path)
        if img is None:
            img = resize_to_height(load_rgb(path), self.height)
            self._images[path] = img
        return img


def center_crop(img: np.ndarray, width: int) -> np.ndarray:
    start = (img.shape[1] - width) // 2
    return img[:, start : start + width]


def load_batch(
    manifest: DatasetManifest, keys: Sequence[tuple[int, bool]], cache: ImageCache
) -> PairBatch:
    firsts, seconds = [], []
    for index, swapped in keys:
        pair = manifest.pairs[index]
        a = cache.get(manifest.resolve(pair.img1))
        b = cache.get(manifest.resolve(pair.img2))
        if swapped:
            a, b = b, a
        firsts.append(a)
        seconds.append(b)
    width = min(img.shape[1] for img in firsts + seconds)

    def stack(images: List[np.ndarray]) -> Tensor:
        arr = np.stack([center_crop(img, width) for img in images]).transpose(0, 3, 1, 2)
        return torch.from_numpy(np.ascontiguousarray(arr)).to(torch.get_default_dtype())

    return PairBatch(keys=list(keys), rgb1=stack(firsts), rgb2=stack(seconds))


def pair_keys(manifest: DatasetManifest, symmetric: bool = False) -> List[tuple[int, bool]]:
    keys = [(i, False) for i in range(len(manifest))]
    if symmetric:
        keys += [(i, True) for i, p in enumerate(manifest.pairs) if not p.is_self_pair]
    return keys


def make_batches(
    manifest: DatasetManifest,
    batch_size: int,
    seed: int,
    epoch: int,
    cache: ImageCache | None = None,
    symmetric: bool = False,
) -> Iterator[PairBatch]:
    """Shuffled minibatches; the order depends only on (seed, epoch) and the last partial batch is kept."""
    cache = cache or ImageCache(config.DEFAULT_RESIZE_HEIGHT)
    keys = pair_keys(manifest, symmetric)
    order = np.random.default_rng([seed, epoch]).permutation(len(keys))
    for chunk in chunked([keys[i] for i in order], batch_size):
        yield load_batch(manifest, chunk, cache)


def batch_count(manifest: DatasetManifest, batch_size: int, symmetric: bool = False) -> int:
    return math.ceil(len(pair_keys(manifest, symmetric)) / batch_size)


def transform_hash(models: TransformModels | None, decimals: int = 4) -> str:
    """Hash of the transform parameters rounded to 10**-decimals."""
    if models is None:
        return GRAY_HASH
    digest = hashlib.sha256(models.kind.encode("utf-8"))
    for name, value in sorted(models.named_tensors().items()):
        rounded = np.round(value.detach().cpu().to(torch.float64).numpy(), decimals) + 0.0
        digest.update(name.encode("utf-8"))
        digest.update(rounded.tobytes())
    return digest.hexdigest()


class LabelCache:
    """Actual inlier counts keyed by (pair key, transform hash)."""

    def __init__(self, run_config: RunConfig, seed: int):
        self.matcher_cfg = run_config.matcher
        self.seed = seed
        self._counts: dict[tuple, int] = {}
        self.hits = 0
        self.misses = 0

    def pair_seed(self, key: tuple) -> int:
        index, swapped = key[-2], key[-1]
        return derive_seed(self.seed, index, int(swapped))

    def counts(self, g1: Tensor, g2: Tensor, keys: Sequence[tuple], digest: str) -> List[int]:
        # the matcher only ever sees detached float copies
        imgs1 = [torch_to_numpy(g) for g in g1.detach()]
        imgs2 = [torch_to_numpy(g) for g in g2.detach()]
        missing = [i for i, key in enumerate(keys) if (key, digest) not in self._counts]
        self.hits += len(keys) - len(missing)
        self.misses += len(missing)

        def job(i: int) -> int:
            report = count_inliers(imgs1[i], imgs2[i], self.matcher_cfg, seed=self.pair_seed(keys[i]))
            return report.inlier_count

        for i, count in zip(missing, parallel_map(job, missing)):
            self._counts[(keys[i], digest)] = count
        return [self._counts[(key, digest)] for key in keys]


def scaled_targets(counts: Sequence[int], scale: float) -> Tensor:
    return torch.tensor([c * scale for c in counts], dtype=torch.get_default_dtype())


def proxy_step(
    proxy: ProxyModel,
    state: AdamState,
    g1: Tensor,
    g2: Tensor,
    targets: Tensor,
) -> float:
    proxy.train()
    params = list(proxy.parameters())
    zero_grads(params)
    loss = mse_loss(proxy_forward(proxy, g1, g2), targets)
    backward(loss)
    adam_step(params, state)
    return float(loss.detach())


def transformed_pair(
    run_config: RunConfig, kind: str, batch: PairBatch, models: TransformModels | None
) -> tuple[Tensor, Tensor]:
    if models is None:
        return gray(batch.rgb1), gray(batch.rgb2)
    return apply_transform(
        kind,
        batch.rgb1,
        batch.rgb2,
        models=models,
        eps_log=run_config.colorspace.eps_log,
        eps_sigma=run_config.colorspace.eps_sigma,
    )


def validate(
    validation: DatasetManifest,
    proxy: ProxyModel,
    run_config: RunConfig,
    labels: LabelCache,
    cache: ImageCache,
    models: TransformModels | None = None,
) -> tuple[float, float]:
    """Mean actual and mean predicted inlier counts on up to validation_pairs held-out pairs."""
    cfg = run_config.train
    n = min(len(validation), cfg.validation_pairs)
    if n == 0:
        return math.nan, math.nan
    kind = models.kind if models is not None else config.DEFAULT_TRANSFORM_KIND
    digest = transform_hash(models, cfg.label_hash_decimals)
    actual: List[int] = []
    predicted: List[float] = []
    modules = [proxy] + (models.modules() if models is not None else [])
    with freeze(*modules), torch.no_grad():
        for chunk in chunked([(i, False) for i in range(n)], cfg.batch_size):
            batch = load_batch(validation, chunk, cache)
            g1, g2 = transformed_pair(run_config, kind, batch, models)
            keys = [("val", *k) for k in chunk]
            actual.extend(labels.counts(g1, g2, keys, digest))
            predicted.extend((proxy_forward(proxy, g1, g2) / cfg.target_scale).tolist())
    return float(np.mean(actual)), float(np.mean(predicted))


def _check_manifest(manifest: DatasetManifest) -> None:
    if len(manifest) == 0:
        msg = "training manifest has no pairs"
        raise EmptyManifestError(msg)


def pretrain_proxy(
    manifest: DatasetManifest,
    run_config: RunConfig | None = None,
    validation: DatasetManifest | None = None,
    proxy: ProxyModel | None = None,
    show_progress: bool = True,
) -> tuple[ProxyModel, TrainLog]:
    """Fit the proxy to actual inlier counts of grayscale pairs (MSE on scaled counts)."""
    run_config = run_config or RunConfig()
    cfg = run_config.train
    _check_manifest(manifest)
    seed_everything(cfg.seed)
    proxy = proxy or build_proxy(run_config.nets, seed=cfg.seed)
    state = AdamState(proxy.parameters(), lr=cfg.learning_rate)
    cache = ImageCache(cfg.resize_height)
    labels = LabelCache(run_config, cfg.seed)
    log = TrainLog(stage="proxy")

    for epoch in range(cfg.epochs):
        start = time.perf_counter()
        losses: List[float] = []
        batches = make_batches(manifest, cfg.batch_size, cfg.seed, epoch, cache, cfg.symmetric_pairs)
        total = batch_count(manifest, cfg.batch_size, cfg.symmetric_pairs)
        for batch in tqdm(batches, total=total, desc=f"proxy epoch {epoch}", disable=not show_progress, leave=False):
            g1, g2 = gray(batch.rgb1), gray(batch.rgb2)
            counts = labels.counts(g1, g2, batch.keys, GRAY_HASH)
            loss = proxy_step(proxy, state, g1, g2, scaled_targets(counts, cfg.target_scale))
            losses.append(loss)
            log.step_losses.append(loss)
            logger.debug(f"proxy step {state.step_count}: loss={loss:.6f}")

        val_inliers, val_predicted = validate(validation or manifest, proxy, run_config, labels, cache)
        record = EpochRecord(
            epoch=epoch,
            proxy_loss=float(np.mean(losses)),
            val_inliers=val_inliers,
            val_predicted=val_predicted,
            seconds=time.perf_counter() - start,
        )
        log.append(record)
        logger.info(
            f"proxy epoch {epoch}: loss={record.proxy_loss:.5f} "
            f"val_inliers={val_inliers:.1f} val_predicted={val_predicted:.1f} ({record.seconds:.1f}s)"
        )
    logger.debug(f"label cache: {labels.hits} hits, {labels.misses} misses")
    return proxy, log


def check_trainable_kind(kind: str) -> config.TransformKindConfig:
    kind_config = config.get_transform_kind(kind)
    if not kind_config.trainable:
        valid = ", ".join(config.TRAINABLE_KIND_NAMES)
        msg = f"transform kind '{kind}' has nothing to train; choose one of: {valid}"
        raise KindMismatchError(msg)
    return kind_config


def transform_optimizers(models: TransformModels, cfg: TrainConfig) -> List[tuple[List[Tensor], AdamState]]:
    """One Adam state for the network parameters and one for the global theta."""
    groups: List[tuple[List[Tensor], AdamState]] = []
    network = [p for m in models.modules() for p in m.parameters()]
    if network:
        groups.append((network, AdamState(network, lr=cfg.learning_rate)))
    if models.theta is not None:
        groups.append(([models.theta], AdamState([models.theta], lr=cfg.theta_learning_rate)))
    return groups


def train_transform(
    manifest: DatasetManifest,
    proxy: ProxyModel,
    run_config: RunConfig | None = None,
    kind: str | None = None,
    validation: DatasetManifest | None = None,
    models: TransformModels | None = None,
    show_progress: bool = True,
) -> tuple[TransformModels, ProxyModel, TrainLog]:
    """
    Alternate a transform step against the frozen proxy with proxy refresh steps.

    The transform step maximizes the mean predicted inlier count of the
    transformed pair. The refresh step labels the detached transformed outputs
    with the real matcher and takes an MSE step on the proxy alone.
    """
    run_config = run_config or RunConfig()
    cfg = run_config.train
    _check_manifest(manifest)
    kind_config = check_trainable_kind(kind or cfg.kind)
    kind = kind_config.primary_alias
    seed_everything(cfg.seed)

    if models is None:
        models = build_transform_models(kind, run_config.nets, seed=cfg.seed)
    elif config.get_transform_kind(models.kind) is not kind_config:
        msg = f"models were built for '{models.kind}' but training was asked for '{kind}'"
        raise KindMismatchError(msg)

    transform_params = list(models.parameters())
    proxy_params = list(proxy.parameters())
    optimizers = transform_optimizers(models, cfg)
    proxy_state = AdamState(proxy_params, lr=cfg.learning_rate)
    cache = ImageCache(cfg.resize_height)
    labels = LabelCache(run_config, cfg.seed)
    log = TrainLog(stage="transform")

    for epoch in range(cfg.epochs):
        start = time.perf_counter()
        transform_losses: List[float] = []
        proxy_losses: List[float] = []
        batches = make_batches(manifest, cfg.batch_size, cfg.seed, epoch, cache, cfg.symmetric_pairs)
        total = batch_count(manifest, cfg.batch_size, cfg.symmetric_pairs)
        for batch in tqdm(batches, total=total, desc=f"{kind} epoch {epoch}", disable=not show_progress, leave=False):
            models.train()
            with freeze(proxy):
                g1, g2 = transformed_pair(run_config, kind, batch, models)
                loss = -mean(proxy_forward(proxy, g1, g2))
                zero_grads(transform_params)
                backward(loss)
                for params, state in optimizers:
                    adam_step(params, state)
            transform_losses.append(float(loss.detach()))

            digest = transform_hash(models, cfg.label_hash_decimals)
            with freeze(*models.modules()), torch.no_grad():
                g1, g2 = transformed_pair(run_config, kind, batch, models)
            counts = labels.counts(g1, g2, batch.keys, digest)
            targets = scaled_targets(counts, cfg.target_scale)
            for _ in range(cfg.proxy_steps_per_transform_step):
                proxy_losses.append(proxy_step(proxy, proxy_state, g1, g2, targets))
            logger.debug(
                f"{kind} step {optimizers[0][1].step_count}: transform_loss={transform_losses[-1]:.5f}"
            )

        val_inliers, val_predicted = validate(
            validation or manifest, proxy, run_config, labels, cache, models
        )
        record = EpochRecord(
            epoch=epoch,
            proxy_loss=float(np.mean(proxy_losses)) if proxy_losses else math.nan,
            transform_loss=float(np.mean(transform_losses)),
            val_inliers=val_inliers,
            val_predicted=val_predicted,
            seconds=time.perf_counter() - start,
        )
        log.append(record)
        logger.info(
            f"{kind} epoch {epoch}: transform_loss={record.transform_loss:.5f} "
            f"proxy_loss={record.proxy_loss:.5f} val_inliers={val_inliers:.1f} ({record.seconds:.1f}s)"
        )
    models.eval()
    proxy.eval()
    return models, proxy, log
