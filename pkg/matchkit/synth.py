#!/usr/bin/env python3

"""
Synthetic cross-illumination dataset.

Planar textured scenes are lit by a single black-body illuminant and imaged by
a three-channel sensor with infinitely narrow spectral responses. Under this
model the log response of channel k separates into a material term, a global
intensity/shading term and an illuminant term that depends only on the
wavelength and the color temperature, which is what makes log-channel
combinations illumination invariant.
"""

import logging
import os
from dataclasses import dataclass, field
from typing import List, Sequence

import numpy as np

from matchkit import config
from matchkit.schema import DatasetManifest, ManifestPair, SynthConfig
from matchkit.utils import derive_seed, parallel_map
from matchkit.utils.img_utils import save_png

logger = logging.getLogger(__name__)

PLANCK_C1 = 3.741771852e20  # 2*pi*h*c^2 with wavelengths in nm (relative units)
PLANCK_C2 = 1.438776877e7  # h*c/k in nm*K
REFLECTANCE_RANGE = (0.02, 1.0)
IMAGES_DIR = "images"
VIEW_SHRINK_STEPS = (1.0, 0.5, 0.25, 0.125, 0.0)


def planck_radiance(wavelength_nm, temperature_k):
    """Black-body spectral radiance (relative units); accepts scalars or arrays."""
    lam = np.asarray(wavelength_nm, dtype=np.float64)
    t = np.asarray(temperature_k, dtype=np.float64)
    if np.any(lam <= 0) or np.any(t <= 0):
        msg = "wavelength and temperature must be positive"
        raise ValueError(msg)
    return PLANCK_C1 * lam**-5 / np.expm1(PLANCK_C2 / (lam * t))


@dataclass
class SensorSpec:
    wavelengths: tuple[float, float, float] = config.DEFAULT_WAVELENGTHS_NM
    gains: tuple[float, float, float] = (1.0, 1.0, 1.0)

    def __post_init__(self):
        if len(self.wavelengths) != 3 or any(w <= 0 for w in self.wavelengths):
            msg = f"sensor needs three positive wavelengths, got {self.wavelengths}"
            raise ValueError(msg)

    def illuminant_response(self, temperature_k: float) -> np.ndarray:
        """Per-channel illuminant response, scaled so the strongest channel is 1."""
        radiance = planck_radiance(np.asarray(self.wavelengths), temperature_k)
        response = np.asarray(self.gains) * radiance
        return response / response.max()


@dataclass
class SceneSpec:
    reflectance: np.ndarray  # (H, W, 3) at the sensor wavelengths
    seed: int

    @property
    def height(self) -> int:
        return self.reflectance.shape[0]

    @property
    def width(self) -> int:
        return self.reflectance.shape[1]


@dataclass
class CaptureSpec:
    temperature: float
    intensity: float = 0.9
    shadow: np.ndarray | None = None
    homography: np.ndarray = field(default_factory=lambda: np.eye(3))
    noise_sigma: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if not 2000 <= self.temperature <= 10000:
            msg = f"color temperature {self.temperature} K outside [2000, 10000]"
            raise ValueError(msg)


def value_noise(rng: np.random.Generator, height: int, width: int, cell: int) -> np.ndarray:
    import cv2

    gh, gw = height // cell + 3, width // cell + 3
    grid = rng.random((gh, gw)).astype(np.float32)
    up = cv2.resize(grid, (gw * cell, gh * cell), interpolation=cv2.INTER_CUBIC)
    return up[cell : cell + height, cell : cell + width]


def multiscale_noise(
    rng: np.random.Generator, height: int, width: int, cells: Sequence[int] = (3, 6, 12, 24, 48)
) -> np.ndarray:
    total = np.zeros((height, width), dtype=np.float32)
    weight_sum = 0.0
    for cell in cells:
        weight = float(cell) ** 0.5
        total += weight * value_noise(rng, height, width, cell)
        weight_sum += weight
    total /= weight_sum
    lo, hi = total.min(), total.max()
    return (total - lo) / max(hi - lo, 1e-6)


def generate_scene(seed: int, height: int, width: int, shapes: int = 60) -> SceneSpec:
    import cv2

    rng = np.random.default_rng(seed)
    shared = multiscale_noise(rng, height, width)
    channels = [0.5 * shared + 0.5 * multiscale_noise(rng, height, width) for _ in range(3)]
    refl = np.stack(channels, axis=2)

    for _ in range(shapes):
        color = tuple(float(c) for c in rng.uniform(0.0, 1.0, size=3))
        cx, cy = int(rng.integers(0, width)), int(rng.integers(0, height))
        size = int(rng.integers(4, max(5, min(height, width) // 6)))
        if rng.random() < 0.5:
            cv2.rectangle(refl, (cx - size, cy - size // 2), (cx + size, cy + size // 2), color, -1)
        else:
            cv2.circle(refl, (cx, cy), size // 2 + 1, color, -1)

    lo, hi = REFLECTANCE_RANGE
    # sqrt skews materials bright; median reflectance ends up near 0.7
    refl = lo + (hi - lo) * np.sqrt(np.clip(refl, 0.0, 1.0))
    return SceneSpec(reflectance=refl.astype(np.float32), seed=seed)


def shadow_map(rng: np.random.Generator, height: int, width: int, shadow_min: float) -> np.ndarray:
    smooth = multiscale_noise(rng, height, width, cells=(48, 96))
    return (shadow_min + (1.0 - shadow_min) * smooth).astype(np.float32)


def viewpoint_homography(
    height: int,
    width: int,
    translation: tuple[float, float],
    rotation_deg: float,
    perspective: tuple[float, float],
) -> np.ndarray:
    cx, cy = width / 2.0, height / 2.0
    theta = np.deg2rad(rotation_deg)
    c, s = np.cos(theta), np.sin(theta)
    to_center = np.array([[1, 0, -cx], [0, 1, -cy], [0, 0, 1]], dtype=np.float64)
    back = np.array([[1, 0, cx], [0, 1, cy], [0, 0, 1]], dtype=np.float64)
    rot = np.array([[c, -s, 0], [s, c, 0], [0, 0, 1]], dtype=np.float64)
    persp = np.array([[1, 0, 0], [0, 1, 0], [perspective[0], perspective[1], 1]], dtype=np.float64)
    shift = np.array([[1, 0, translation[0]], [0, 1, translation[1]], [0, 0, 1]], dtype=np.float64)
    h = shift @ back @ persp @ rot @ to_center
    return h / h[2, 2]


def homography_overlap(homography: np.ndarray, width: int, height: int) -> float:
    """Fraction of the image area still covered by the warped image frame."""
    import cv2

    corners = np.array([[0, 0], [width, 0], [width, height], [0, height]], dtype=np.float64)
    warped = cv2.perspectiveTransform(corners[None, :, :], homography)[0]
    area, _ = cv2.intersectConvexConvex(corners.astype(np.float32), warped.astype(np.float32))
    return float(area) / float(width * height)


def render(scene: SceneSpec, sensor: SensorSpec, capture: CaptureSpec) -> np.ndarray:
    """Linear-light render, homography-warped, with additive noise, clamped to [0, 1]; (H, W, 3) float32."""
    import cv2

    illum = sensor.illuminant_response(capture.temperature).astype(np.float32)
    img = scene.reflectance * illum[None, None, :] * np.float32(capture.intensity)
    if capture.shadow is not None:
        img = img * capture.shadow[:, :, None]

    if not np.allclose(capture.homography, np.eye(3)):
        img = cv2.warpPerspective(
            img,
            capture.homography,
            (scene.width, scene.height),
            flags=cv2.INTER_LINEAR,
            borderMode=cv2.BORDER_REFLECT_101,
        )

    if capture.noise_sigma > 0:
        rng = np.random.default_rng(capture.seed)
        img = img + rng.normal(0.0, capture.noise_sigma, size=img.shape).astype(np.float32)
    return np.clip(img, 0.0, 1.0).astype(np.float32)


def image_name(scene_id: int, frame: int, temperature: float) -> str:
    return f"{IMAGES_DIR}/s{scene_id:04d}_f{frame:03d}_t{int(round(temperature)):05d}.png"


def make_capture(
    cfg: SynthConfig, seed: int, scene_id: int, frame: int, condition: int
) -> CaptureSpec:
    # viewpoint depends on (scene, frame); lighting and shading on (scene, condition)
    view_rng = np.random.default_rng(derive_seed(seed, scene_id, frame, 1))
    jitter = view_rng.uniform(-config.VIEW_JITTER_PX, config.VIEW_JITTER_PX, size=2)
    translation = (frame * cfg.frame_step_px + jitter[0], jitter[1])
    rotation = float(view_rng.uniform(-cfg.max_rotation_deg, cfg.max_rotation_deg))
    perspective = view_rng.uniform(-cfg.max_perspective, cfg.max_perspective, size=2)
    # SynthConfig bounds the translation, so the unrotated view always keeps min_overlap
    for shrink in VIEW_SHRINK_STEPS:
        homography = viewpoint_homography(
            cfg.height,
            cfg.width,
            translation=translation,
            rotation_deg=rotation * shrink,
            perspective=(float(perspective[0] * shrink), float(perspective[1] * shrink)),
        )
        overlap = homography_overlap(homography, cfg.width, cfg.height)
        if overlap >= cfg.min_overlap:
            break
        logger.debug(
            f"scene {scene_id} frame {frame}: overlap {overlap:.2f} below {cfg.min_overlap}, "
            f"shrinking rotation and perspective"
        )

    light_rng = np.random.default_rng(derive_seed(seed, scene_id, condition, 2))
    shadow = (
        shadow_map(light_rng, cfg.height, cfg.width, cfg.shadow_min) if cfg.shadows else None
    )
    intensity = float(light_rng.uniform(*cfg.intensity_range))
    return CaptureSpec(
        temperature=cfg.temperatures[condition],
        intensity=intensity,
        shadow=shadow,
        homography=homography,
        noise_sigma=cfg.noise_sigma,
        seed=derive_seed(seed, scene_id, frame, condition, 3),
    )


def enumerate_pairs(cfg: SynthConfig, scene_id: int) -> List[ManifestPair]:
    """Self pairs for every capture, then windowed cross-condition pairs."""
    pairs: List[ManifestPair] = []
    temps = cfg.temperatures
    for t in temps:
        for f in range(cfg.frames_per_scene):
            name = image_name(scene_id, f, t)
            pairs.append(ManifestPair(img1=name, img2=name, scene_id=scene_id, t1=t, t2=t, frame_offset=0))
    for ca in range(len(temps)):
        for cb in range(ca + 1, len(temps)):
            for f1 in range(cfg.frames_per_scene):
                for f2 in range(cfg.frames_per_scene):
                    if abs(f1 - f2) > cfg.window:
                        continue
                    pairs.append(
                        ManifestPair(
                            img1=image_name(scene_id, f1, temps[ca]),
                            img2=image_name(scene_id, f2, temps[cb]),
                            scene_id=scene_id,
                            t1=temps[ca],
                            t2=temps[cb],
                            frame_offset=f2 - f1,
                        )
                    )
    return pairs


def split_scenes(scene_ids: Sequence[int], test_fraction: float, seed: int) -> tuple[set[int], set[int]]:
    rng = np.random.default_rng(derive_seed(seed, 4))
    order = [int(i) for i in rng.permutation(list(scene_ids))]
    n_test = int(round(test_fraction * len(order)))
    if test_fraction > 0 and len(order) > 1:
        n_test = min(max(n_test, 1), len(order) - 1)
    return set(order[n_test:]), set(order[:n_test])


def route_pairs(manifest: DatasetManifest) -> List[int]:
    """
    Indices of zero-offset cross-condition pairs, ordered along the route by scene then frame.

    A manifest without cross-condition pairs routes over its zero-offset pairs instead.
    """
    idx = [
        i
        for i, p in enumerate(manifest.pairs)
        if p.frame_offset == 0 and p.t1 != p.t2
    ]
    if not idx:
        idx = [i for i, p in enumerate(manifest.pairs) if p.frame_offset == 0]

    def route_key(i):
        p = manifest.pairs[i]
        return (p.t1, p.t2, p.scene_id, p.img1)

    return sorted(idx, key=route_key)


@dataclass
class DatasetPaths:
    root: str
    manifest: str
    train: str
    test: str


def dataset_paths(out_dir: str) -> DatasetPaths:
    return DatasetPaths(
        root=out_dir,
        manifest=os.path.join(out_dir, "manifest.txt"),
        train=os.path.join(out_dir, "train.txt"),
        test=os.path.join(out_dir, "test.txt"),
    )


def generate_dataset(
    cfg: SynthConfig, out_dir: str, seed: int = 0, sensor: SensorSpec | None = None
) -> DatasetManifest:
    sensor = sensor or SensorSpec()
    try:
        os.makedirs(os.path.join(out_dir, IMAGES_DIR), exist_ok=True)
    except OSError as e:
        msg = f"cannot create output directory {out_dir}: {e}"
        raise OSError(msg) from e
    if not os.access(out_dir, os.W_OK):
        msg = f"output directory is not writable: {out_dir}"
        raise PermissionError(msg)

    if len(set(cfg.temperatures)) != len(cfg.temperatures):
        msg = f"temperatures must be distinct, got {cfg.temperatures}"
        raise ValueError(msg)

    def render_scene(scene_id: int) -> int:
        scene = generate_scene(derive_seed(seed, scene_id, 0), cfg.height, cfg.width)
        for condition, temperature in enumerate(cfg.temperatures):
            for frame in range(cfg.frames_per_scene):
                capture = make_capture(cfg, seed, scene_id, frame, condition)
                img = render(scene, sensor, capture)
                save_png(img, os.path.join(out_dir, image_name(scene_id, frame, temperature)))
        return scene_id

    captures = cfg.scenes * len(cfg.temperatures) * cfg.frames_per_scene
    logger.info(f"Rendering {captures} captures of {cfg.scenes} scenes into {out_dir}")
    parallel_map(render_scene, range(cfg.scenes))

    pairs = [p for scene_id in range(cfg.scenes) for p in enumerate_pairs(cfg, scene_id)]
    manifest = DatasetManifest(root=os.path.abspath(out_dir), pairs=pairs)
    train_ids, test_ids = split_scenes(range(cfg.scenes), cfg.test_fraction, seed)

    # single writer, after every render finished
    paths = dataset_paths(out_dir)
    manifest.write(paths.manifest)
    manifest.subset([p for p in pairs if p.scene_id in train_ids]).write(paths.train)
    manifest.subset([p for p in pairs if p.scene_id in test_ids]).write(paths.test)
    logger.info(
        f"Wrote {len(pairs)} pairs ({len(train_ids)} train / {len(test_ids)} test scenes)"
    )
    return manifest
