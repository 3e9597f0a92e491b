"""
Synthetic Scene Generator
Bouncing balls / moving sprites rendered to intensity frames and converted
to DVS events with the log-intensity threshold model
"""

import math
from dataclasses import dataclass, field, replace
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from loguru import logger
from PIL import Image
from tqdm import tqdm

from event_core import Event, EventFrame, FrameSequence, Geometry, bin_events, inject_noise
from pipeline_errors import ConfigurationError, DimensionError, IntensityDomainError

INTENSITY_FLOOR = 1e-3
DEFAULT_TH_LOG = 0.3


@dataclass(frozen=True)
class SceneObject:
    """A ball (radius) or a sprite (boolean bitmap); position is the center in px"""
    position: Tuple[float, float]
    velocity: Tuple[float, float]
    radius: Optional[float] = None
    bitmap: Optional[np.ndarray] = None

    def __post_init__(self):
        if (self.radius is None) == (self.bitmap is None):
            raise ValueError("SceneObject needs exactly one of radius or bitmap")
        if self.radius is not None and self.radius <= 0:
            raise ValueError(f"Ball radius must be positive, got {self.radius}")

    @property
    def is_ball(self) -> bool:
        return self.radius is not None

    @property
    def half_extent(self) -> Tuple[float, float]:
        if self.is_ball:
            return (self.radius, self.radius)
        h, w = self.bitmap.shape
        return (w / 2.0, h / 2.0)


@dataclass(frozen=True)
class Scene:
    geometry: Geometry
    objects: Tuple[SceneObject, ...]
    i_bg: float = 0.2
    i_obj: float = 0.8

    def __post_init__(self):
        for name, value in (("i_bg", self.i_bg), ("i_obj", self.i_obj)):
            if not 0 < value <= 1:
                raise ValueError(f"{name} must be in (0, 1], got {value}")
        for obj in self.objects:
            x, y = obj.position
            if not (0 <= x <= self.geometry.width and 0 <= y <= self.geometry.height):
                raise ValueError(f"Object at ({x:.1f}, {y:.1f}) outside the scene")
        object.__setattr__(self, "objects", tuple(self.objects))


@dataclass
class DatasetConfig:
    """Configuration for a synthetic event dataset"""
    name: str
    width: int
    height: int
    n_sequences: int
    sequence_length: int  # event frames per sequence
    seed: int
    kind: str = "balls"  # "balls" or "sprites"
    n_objects: int = 3
    radius: float = 5.0
    speed_min: float = 1.5
    speed_max: float = 3.0
    i_bg: float = 0.2
    i_obj: float = 0.8
    th_log: float = DEFAULT_TH_LOG
    dt: int = 10_000  # microseconds per event frame
    sprite_paths: List[str] = field(default_factory=list)

    @property
    def geometry(self) -> Geometry:
        return Geometry(self.width, self.height)

    @classmethod
    def bouncing_ball_64(cls, seed: int = 0, n_sequences: int = 200, sequence_length: int = 20):
        return cls(
            name="bouncingball64",
            width=64,
            height=64,
            n_sequences=n_sequences,
            sequence_length=sequence_length,
            seed=seed,
            n_objects=3,
            radius=5.0,
        )

    @classmethod
    def bouncing_ball_256(cls, seed: int = 0, n_sequences: int = 200, sequence_length: int = 20):
        return cls(
            name="bouncingball256",
            width=256,
            height=256,
            n_sequences=n_sequences,
            sequence_length=sequence_length,
            seed=seed,
            n_objects=3,
            radius=20.0,
            speed_min=6.0,
            speed_max=12.0,
        )

    @classmethod
    def moving_sprites_64(cls, sprite_paths: Sequence[str], seed: int = 0, n_sequences: int = 200,
                          sequence_length: int = 20):
        return cls(
            name="movingsprites64",
            width=64,
            height=64,
            n_sequences=n_sequences,
            sequence_length=sequence_length,
            seed=seed,
            kind="sprites",
            n_objects=2,
            sprite_paths=list(sprite_paths),
        )

    @classmethod
    def from_dict(cls, data: Dict) -> "DatasetConfig":
        preset = data.get("preset")
        base: Dict = {}
        if preset == "bouncingball64":
            base = cls.bouncing_ball_64().__dict__.copy()
        elif preset == "bouncingball256":
            base = cls.bouncing_ball_256().__dict__.copy()
        elif preset == "movingsprites64":
            base = cls.moving_sprites_64(data.get("sprite_paths", [])).__dict__.copy()
        elif preset is not None:
            raise ConfigurationError(f"Unknown dataset preset '{preset}'")
        base.update({k: v for k, v in data.items() if k != "preset"})
        try:
            return cls(**base)
        except TypeError as e:
            raise ConfigurationError(f"Invalid dataset section: {e}") from e


@dataclass
class SyntheticDataset:
    train: List[FrameSequence]
    test: List[FrameSequence]
    train_seeds: List[int] = field(default_factory=list)
    test_seeds: List[int] = field(default_factory=list)


# ---------------- scene dynamics ----------------

def _reflect(pos: float, vel: float, low: float, high: float) -> Tuple[float, float]:
    if pos < low:
        return 2 * low - pos, abs(vel)
    if pos > high:
        return 2 * high - pos, -abs(vel)
    return pos, vel


def step_scene(scene: Scene) -> Scene:
    """Advance one frame: free flight, wall reflection, equal-mass ball collisions"""
    width, height = scene.geometry.width, scene.geometry.height
    positions = []
    velocities = []
    for obj in scene.objects:
        (x, y), (vx, vy) = obj.position, obj.velocity
        x, y = x + vx, y + vy
        hx, hy = obj.half_extent
        x, vx = _reflect(x, vx, hx, width - hx)
        y, vy = _reflect(y, vy, hy, height - hy)
        positions.append(np.array([x, y], dtype=float))
        velocities.append(np.array([vx, vy], dtype=float))

    balls = [i for i, obj in enumerate(scene.objects) if obj.is_ball]
    for a_pos, i in enumerate(balls):
        for j in balls[a_pos + 1:]:
            offset = positions[j] - positions[i]
            reach = scene.objects[i].radius + scene.objects[j].radius
            closing = float(np.dot(velocities[j] - velocities[i], offset)) < 0
            # swap only while approaching, otherwise overlapping balls stick together
            if float(np.hypot(*offset)) <= reach and closing:
                velocities[i], velocities[j] = velocities[j], velocities[i]

    objects = tuple(
        replace(obj, position=(float(p[0]), float(p[1])), velocity=(float(v[0]), float(v[1])))
        for obj, p, v in zip(scene.objects, positions, velocities)
    )
    return replace(scene, objects=objects)


def render(scene: Scene) -> np.ndarray:
    """Rasterize to an H x W intensity frame: I_obj inside any object, I_bg elsewhere"""
    height, width = scene.geometry.shape
    mask = np.zeros((height, width), dtype=bool)
    yy, xx = np.mgrid[0:height, 0:width]
    for obj in scene.objects:
        cx, cy = obj.position
        if obj.is_ball:
            mask |= (xx - cx) ** 2 + (yy - cy) ** 2 <= obj.radius ** 2
        else:
            bh, bw = obj.bitmap.shape
            top = int(round(cy - bh / 2.0))
            left = int(round(cx - bw / 2.0))
            r0, r1 = max(0, top), min(height, top + bh)
            c0, c1 = max(0, left), min(width, left + bw)
            if r0 < r1 and c0 < c1:
                mask[r0:r1, c0:c1] |= obj.bitmap[r0 - top:r1 - top, c0 - left:c1 - left]
    frame = np.where(mask, scene.i_obj, scene.i_bg).astype(np.float64)
    return np.clip(frame, INTENSITY_FLOOR, 1.0)


def _log_change(prev: np.ndarray, nxt: np.ndarray) -> np.ndarray:
    prev = np.asarray(prev, dtype=np.float64)
    nxt = np.asarray(nxt, dtype=np.float64)
    if prev.shape != nxt.shape:
        raise DimensionError(f"Intensity frames differ in shape: {prev.shape} vs {nxt.shape}")
    if (prev <= 0).any() or (nxt <= 0).any():
        raise IntensityDomainError("Intensities must be strictly positive before taking the log")
    return np.log(nxt) - np.log(prev)


def intensity_change_cells(prev: np.ndarray, nxt: np.ndarray, th_log: float = DEFAULT_TH_LOG) -> np.ndarray:
    """Ternary array of the per-pixel threshold crossings between two intensity frames"""
    change = _log_change(prev, nxt)
    cells = np.zeros(change.shape, dtype=np.int8)
    cells[change > th_log] = 1
    cells[-change > th_log] = -1
    return cells


def intensity_to_events(prev: np.ndarray, nxt: np.ndarray, th_log: float = DEFAULT_TH_LOG, t: int = 0) -> List[Event]:
    """Emit one event per pixel whose log-intensity change exceeds th_log"""
    cells = intensity_change_cells(prev, nxt, th_log)
    ys, xs = np.nonzero(cells)
    return [Event(x=int(x), y=int(y), t=int(t), p=int(cells[y, x])) for y, x in zip(ys, xs)]


# ---------------- sprites ----------------

def load_sprite(path: str, threshold: int = 128) -> np.ndarray:
    """Boolean mask of a PGM bitmap (bright pixels belong to the sprite)"""
    with Image.open(path) as img:
        gray = np.asarray(img.convert("L"))
    mask = gray >= threshold
    if not mask.any():
        raise ConfigurationError(f"Sprite {path} has no foreground pixels")
    return mask


# ---------------- dataset generation ----------------

def _random_objects(config: DatasetConfig, rng: np.random.Generator, sprites: List[np.ndarray]) -> List[SceneObject]:
    objects: List[SceneObject] = []
    attempts = 0
    while len(objects) < config.n_objects:
        attempts += 1
        if attempts > 1000:
            raise ConfigurationError(f"Cannot place {config.n_objects} objects in a {config.width}x{config.height} scene")
        speed = rng.uniform(config.speed_min, config.speed_max)
        angle = rng.uniform(0, 2 * math.pi)
        velocity = (speed * math.cos(angle), speed * math.sin(angle))
        if config.kind == "sprites":
            bitmap = sprites[int(rng.integers(len(sprites)))]
            hx, hy = bitmap.shape[1] / 2.0, bitmap.shape[0] / 2.0
            candidate = SceneObject((0.0, 0.0), velocity, bitmap=bitmap)
        else:
            hx = hy = config.radius
            candidate = SceneObject((0.0, 0.0), velocity, radius=config.radius)
        x = rng.uniform(hx, config.width - hx)
        y = rng.uniform(hy, config.height - hy)
        if config.kind != "sprites" and any(
            math.hypot(x - o.position[0], y - o.position[1]) <= 2 * config.radius for o in objects
        ):
            continue
        objects.append(replace(candidate, position=(x, y)))
    return objects


def sequence_seed(config: DatasetConfig, index: int) -> int:
    return int(np.random.SeedSequence([config.seed, index]).generate_state(1)[0])


def generate_sequence(config: DatasetConfig, index: int) -> Tuple[FrameSequence, List[Event], int]:
    """One sequence: L + 1 renders give L event frames; frame k's events are stamped k*dt"""
    seed = sequence_seed(config, index)
    rng = np.random.default_rng(seed)
    sprites = [load_sprite(p) for p in config.sprite_paths] if config.kind == "sprites" else []
    if config.kind == "sprites" and not sprites:
        raise ConfigurationError("Sprite datasets need at least one sprite_paths entry")

    scene = Scene(config.geometry, tuple(_random_objects(config, rng, sprites)), config.i_bg, config.i_obj)
    events: List[Event] = []
    prev = render(scene)
    for k in range(config.sequence_length):
        scene = step_scene(scene)
        nxt = render(scene)
        events.extend(intensity_to_events(prev, nxt, config.th_log, t=k * config.dt))
        prev = nxt

    sequence = bin_events(events, 0, config.dt, config.geometry, t_end=config.sequence_length * config.dt)
    return sequence, events, seed


def generate_dataset(config: DatasetConfig, show_progress: bool = False) -> SyntheticDataset:
    """Deterministic per seed; even sequence indices train, odd indices test"""
    dataset = SyntheticDataset(train=[], test=[])
    indices = range(config.n_sequences)
    for index in tqdm(indices, desc=f"gen {config.name}", disable=not show_progress):
        sequence, _, seed = generate_sequence(config, index)
        if index % 2 == 0:
            dataset.train.append(sequence)
            dataset.train_seeds.append(seed)
        else:
            dataset.test.append(sequence)
            dataset.test_seeds.append(seed)
    logger.info(f"Generated {config.name}: {len(dataset.train)} train / {len(dataset.test)} test sequences")
    return dataset


# ---------------- metric comparison scene ----------------

@dataclass(frozen=True)
class ShiftedBallCase:
    offset_pct: float
    frame: EventFrame


def _moving_ball_frame(geometry: Geometry, center: Tuple[float, float], radius: float, step: float,
                       i_bg: float, i_obj: float, th_log: float) -> EventFrame:
    before = Scene(geometry, (SceneObject(center, (step, 0.0), radius=radius),), i_bg, i_obj)
    after = Scene(geometry, (SceneObject((center[0] + step, center[1]), (step, 0.0), radius=radius),), i_bg, i_obj)
    return EventFrame(intensity_change_cells(render(before), render(after), th_log))


def shifted_ball_scenario(
    radius: float = 64.0,
    offsets_pct: Sequence[float] = (0.0, 5.0, 10.0, 25.0),
    noise_level: float = 0.8,
    seed: int = 0,
    size: int = 512,
    step: float = 16.0,
    i_bg: float = 0.2,
    i_obj: float = 0.8,
    th_log: float = DEFAULT_TH_LOG,
) -> Tuple[EventFrame, List[ShiftedBallCase]]:
    """Clean reference frame of a moving ball plus noised copies shifted right by % of the radius"""
    geometry = Geometry(size, size)
    center = (size / 2.0 - step / 2.0, size / 2.0)
    reference = _moving_ball_frame(geometry, center, radius, step, i_bg, i_obj, th_log)
    cases = []
    for i, pct in enumerate(offsets_pct):
        shifted_center = (center[0] + radius * pct / 100.0, center[1])
        clean = _moving_ball_frame(geometry, shifted_center, radius, step, i_bg, i_obj, th_log)
        noisy = inject_noise(clean, noise_level, seed).frame
        cases.append(ShiftedBallCase(float(pct), noisy.with_index(i)))
    return reference, cases
