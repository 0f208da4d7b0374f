"""Disc-tracking simulator: dynamics, noise regimes, rendering and dataset generation.

Coordinates are image-centered pixels (x right, y down). A sequence's randomness comes from
three independent streams derived from (dataset seed, split, sequence index): target noise,
scene draws (radii, colors, initial states) and distractor noise. The target stream alone
reproduces the recorded states from states[0].
"""

import colorsys
import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Dict, List, Literal, Optional, Tuple

import numpy as np
from pydantic import BaseModel, Field, model_validator

from app.core.config import settings
from app.core.errors import ConfigurationError
from app.models.process import F_DRAG, F_PULL

logger = logging.getLogger(__name__)

# ground-truth correlated process noise over (q_px, q_py, q_vx, q_vy)
Q_CORRELATED = [
    [9.0, -3.6, 1.2, 5.4],
    [-3.6, 9.0, -0.6, 0.0],
    [1.2, -0.6, 4.0, 0.0],
    [5.4, 0.0, 0.0, 4.0],
]

SPLIT_CODES = {"train": 0, "val": 1, "test": 2}
PAPER_SPLITS = {"train": 2400, "val": 300, "test": 303}
DESK_SPLITS = {"train": 300, "val": 50, "test": 50}


class NoiseRegime(BaseModel):
    kind: Literal["constant", "heteroscedastic", "correlated"] = "constant"
    sigma_qp: float = Field(default=0.1, ge=0)
    sigma_qv: float = Field(default=2.0, ge=0)
    q_full: Optional[List[List[float]]] = None
    # heteroscedastic schedule: radii at image size 100 (scaled with the image) and multipliers
    band_radii: List[float] = Field(default_factory=lambda: [15.0, 30.0])
    band_multipliers: List[float] = Field(default_factory=lambda: [3.0, 2.0, 1.0])

    @model_validator(mode="after")
    def _check(self):
        if self.kind == "correlated":
            if self.q_full is None:
                self.q_full = [row[:] for row in Q_CORRELATED]
            q = np.asarray(self.q_full, dtype=np.float64)
            if q.shape != (4, 4) or not np.allclose(q, q.T):
                raise ValueError("q_full must be a symmetric 4x4 matrix")
            if np.min(np.linalg.eigvalsh(q)) <= 0:
                raise ValueError("q_full must be positive definite")
        if len(self.band_multipliers) != len(self.band_radii) + 1:
            raise ValueError("need one more band multiplier than band radii")
        if list(self.band_radii) != sorted(self.band_radii):
            raise ValueError("band radii must be increasing")
        if list(self.band_multipliers) != sorted(self.band_multipliers, reverse=True):
            raise ValueError("band multipliers must be non-increasing")
        return self

    def ground_truth_q(self, p: Optional[np.ndarray] = None, image_size: int = 100) -> np.ndarray:
        """Covariance of (q_p, q_v) at position p (p only matters for heteroscedastic noise)."""
        if self.kind == "correlated":
            return np.asarray(self.q_full, dtype=np.float64)
        sv = self.sigma_qv
        if self.kind == "heteroscedastic" and p is not None:
            sv = hetero_sigma_v(p, self, image_size)
        return np.diag([self.sigma_qp ** 2] * 2 + [sv ** 2] * 2)


class SceneSpec(BaseModel):
    image_size: int = Field(default=100, ge=16)
    num_distractors: int = Field(default=5, ge=0)
    target_radius: Optional[float] = None
    distractor_radius_min: Optional[float] = None
    distractor_radius_max: Optional[float] = None

    @model_validator(mode="after")
    def _scale_defaults(self):
        scale = self.image_size / 100.0
        if self.target_radius is None:
            self.target_radius = 7.0 * scale
        if self.distractor_radius_min is None:
            self.distractor_radius_min = 3.0 * scale
        if self.distractor_radius_max is None:
            self.distractor_radius_max = 10.0 * scale
        if min(self.target_radius, self.distractor_radius_min) <= 0:
            raise ValueError("radii must be positive")
        if self.distractor_radius_max < self.distractor_radius_min:
            raise ValueError("distractor radius range is empty")
        return self


@dataclass
class SceneDraw:
    """Per-sequence random scene content."""

    radii: np.ndarray   # (D,)
    colors: np.ndarray  # (D, 3) uint8


@dataclass
class SequenceRecord:
    states: np.ndarray          # (T+1, 4)
    images: np.ndarray          # (T, H, W, 3) uint8
    visible_pixels: np.ndarray  # (T,)
    scene: SceneSpec
    regime: NoiseRegime
    seed: int
    index: int = 0
    split: str = "train"

    @property
    def length(self) -> int:
        return self.images.shape[0]


def hetero_sigma_v(p, regime: NoiseRegime, image_size: int = 100) -> float:
    """Velocity noise std in three radial bands, largest nearest the origin."""
    r = float(np.linalg.norm(np.asarray(p, dtype=np.float64)))
    scale = image_size / 100.0
    for radius, mult in zip(regime.band_radii, regime.band_multipliers):
        if r < radius * scale:
            return mult * regime.sigma_qv
    return regime.band_multipliers[-1] * regime.sigma_qv


def disc_dynamics(x: np.ndarray) -> np.ndarray:
    p, v = x[..., :2], x[..., 2:]
    return np.concatenate([p + v, v - F_PULL * p - F_DRAG * v * v * np.sign(v)], axis=-1)


def sample_process_noise(x: np.ndarray, regime: NoiseRegime, rng: np.random.Generator,
                         image_size: int = 100) -> np.ndarray:
    if regime.kind == "correlated":
        return rng.multivariate_normal(np.zeros(4), np.asarray(regime.q_full), method="cholesky")
    q_p = rng.normal(0.0, regime.sigma_qp, size=2) if regime.sigma_qp > 0 else np.zeros(2)
    sv = hetero_sigma_v(x[:2], regime, image_size) if regime.kind == "heteroscedastic" else regime.sigma_qv
    q_v = rng.normal(0.0, sv, size=2) if sv > 0 else np.zeros(2)
    return np.concatenate([q_p, q_v])


def simulate_step(s: np.ndarray, regime: NoiseRegime, rng: np.random.Generator,
                  image_size: int = 100) -> np.ndarray:
    s = np.asarray(s, dtype=np.float64)
    return disc_dynamics(s) + sample_process_noise(s, regime, rng, image_size)


def _pixel_grid(size: int) -> Tuple[np.ndarray, np.ndarray]:
    coords = np.arange(size) - size / 2.0 + 0.5
    return np.meshgrid(coords, coords, indexing="xy")


def disc_mask(center, radius: float, size: int) -> np.ndarray:
    xs, ys = _pixel_grid(size)
    return (xs - center[0]) ** 2 + (ys - center[1]) ** 2 <= radius ** 2


def render_frame(target: np.ndarray, scene: SceneSpec, distractors: np.ndarray,
                 draw: SceneDraw) -> Tuple[np.ndarray, int]:
    """Rasterize the red target, then distractors on top in their fixed order.

    Returns the RGB image and the number of target pixels that stay visible.
    """
    size = scene.image_size
    image = np.full((size, size, 3), 255, dtype=np.uint8)
    visible = disc_mask(target[:2], scene.target_radius, size)
    image[visible] = (255, 0, 0)
    for pos, radius, color in zip(distractors, draw.radii, draw.colors):
        mask = disc_mask(pos[:2], radius, size)
        image[mask] = color
        visible &= ~mask
    return image, int(visible.sum())


def _streams(seed: int, split: str, index: int) -> Tuple[np.random.Generator, ...]:
    root = np.random.SeedSequence([seed, SPLIT_CODES.get(split, 3), index])
    return tuple(np.random.default_rng(s) for s in root.spawn(3))


def _f32(x: np.ndarray) -> np.ndarray:
    """Round to the container's float32 grid so stored states replay exactly."""
    return np.asarray(x, dtype=np.float32).astype(np.float64)


def _random_state(rng: np.random.Generator, size: int) -> np.ndarray:
    half = 0.4 * size
    vmax = 5.0 * size / 100.0
    return np.concatenate([rng.uniform(-half, half, 2), rng.uniform(-vmax, vmax, 2)])


def _non_red_color(rng: np.random.Generator) -> np.ndarray:
    hue = rng.uniform(0.1, 0.9)
    value = rng.uniform(0.4, 1.0)
    return np.round(np.array(colorsys.hsv_to_rgb(hue, 1.0, value)) * 255).astype(np.uint8)


def draw_scene(scene: SceneSpec, rng: np.random.Generator) -> SceneDraw:
    d = scene.num_distractors
    radii = rng.uniform(scene.distractor_radius_min, scene.distractor_radius_max, size=d)
    colors = np.stack([_non_red_color(rng) for _ in range(d)]) if d else np.zeros((0, 3), np.uint8)
    return SceneDraw(radii=radii, colors=colors)


def simulate_sequence(scene: SceneSpec, regime: NoiseRegime, length: int, seed: int,
                      index: int = 0, split: str = "train") -> SequenceRecord:
    target_rng, scene_rng, distractor_rng = _streams(seed, split, index)
    size = scene.image_size
    draw = draw_scene(scene, scene_rng)
    state = _f32(_random_state(scene_rng, size))
    distractors = np.stack([_random_state(scene_rng, size) for _ in range(scene.num_distractors)]) \
        if scene.num_distractors else np.zeros((0, 4))
    states = [state]
    images, visible = [], []
    for _ in range(length):
        state = _f32(simulate_step(state, regime, target_rng, size))
        distractors = np.stack([simulate_step(d, regime, distractor_rng, size) for d in distractors]) \
            if len(distractors) else distractors
        image, count = render_frame(state, scene, distractors, draw)
        states.append(state)
        images.append(image)
        visible.append(count)
    return SequenceRecord(
        states=np.stack(states),
        images=np.stack(images) if images else np.zeros((0, size, size, 3), np.uint8),
        visible_pixels=np.asarray(visible, dtype=np.int64),
        scene=scene,
        regime=regime,
        seed=seed,
        index=index,
        split=split,
    )


def replay_states(record: SequenceRecord) -> np.ndarray:
    """Re-simulate the target from states[0] with the record's noise stream."""
    target_rng, _, _ = _streams(record.seed, record.split, record.index)
    states = [np.asarray(record.states[0], dtype=np.float64)]
    for _ in range(record.length):
        states.append(_f32(simulate_step(states[-1], record.regime, target_rng, record.scene.image_size)))
    return np.stack(states)


def full_disc_pixels(scene: SceneSpec) -> int:
    return int(disc_mask((0.0, 0.0), scene.target_radius, scene.image_size).sum())


def generate_split(split: str, count: int, length: int, scene: SceneSpec, regime: NoiseRegime,
                   seed: int, threads: Optional[int] = None) -> List[SequenceRecord]:
    """Simulate `count` sequences in parallel; order follows the sequence index."""
    workers = max(1, threads or settings.threads)
    with ThreadPoolExecutor(max_workers=workers) as pool:
        futures = [pool.submit(simulate_sequence, scene, regime, length, seed, i, split) for i in range(count)]
        return [f.result() for f in futures]


def generate_dataset(out_dir: str, splits: Optional[Dict[str, int]] = None, length: int = 50,
                     scene: Optional[SceneSpec] = None, regime: Optional[NoiseRegime] = None,
                     seed: int = 0, threads: Optional[int] = None) -> Dict[str, str]:
    """Write one container file per split; returns split -> path."""
    from app.services.dataset_store import DatasetManifest, write_split

    splits = dict(PAPER_SPLITS if splits is None else splits)
    scene = scene or SceneSpec()
    regime = regime or NoiseRegime()
    unknown = set(splits) - set(SPLIT_CODES)
    if unknown:
        raise ConfigurationError(f"unknown split names: {sorted(unknown)}")
    os.makedirs(out_dir, exist_ok=True)
    paths = {}
    for split, count in splits.items():
        records = generate_split(split, count, length, scene, regime, seed, threads)
        manifest = DatasetManifest(split=split, count=count, length=length, image_size=scene.image_size,
                                   regime=regime, scene=scene, seed=seed)
        path = os.path.join(out_dir, f"{split}.dfds")
        write_split(path, manifest, records)
        paths[split] = path
        print(f"✅ {split}: {count} sequences x {length} steps -> {path}")
    return paths
