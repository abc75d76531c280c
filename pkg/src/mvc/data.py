"""Procedural training data: primitive scenes, an analytic SDF renderer,
Canny edge extraction and the 2D/3D batch mixer.

Scenes are 1-3 colored primitives whose bounding boxes fit the unit cube
[-0.5, 0.5]^3 at the origin. Every item is a pure function of the generator
state handed in, so a dataset is reproducible from (seed, config).
"""
from __future__ import annotations

import json
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np
from scipy import ndimage

from .cameras import (
    CameraPose,
    absolute_canonical_poses,
    canonical_views,
    orbit_pose,
    sample_camera,
)
from .tokens import COLOR_WORDS, SHAPE_WORDS, SIZE_WORDS, VOCAB, PromptTokens

SCENE_BOUND = 0.5  # half-extent of the unit cube
RAY_DOMAIN_BOUND = 0.6  # marched region, slightly padded around the cube

COLOR_ALBEDO = {
    "red": (0.90, 0.15, 0.15),
    "green": (0.15, 0.80, 0.20),
    "blue": (0.20, 0.30, 0.90),
    "yellow": (0.95, 0.85, 0.10),
    "purple": (0.60, 0.20, 0.80),
    "orange": (0.95, 0.55, 0.10),
}

LIGHT_DIR = np.array([0.45, -0.35, 0.82])
AMBIENT = 0.35
DIFFUSE = 0.65

# size-word boundary on the largest AABB half-extent
SMALL_LARGE_SPLIT = 0.21


@dataclass(frozen=True)
class Primitive:
    shape: str  # sphere | box | cylinder | torus
    center: np.ndarray  # (3,)
    params: np.ndarray  # shape-specific sizes, see _primitive_sdf
    color: str

    @property
    def albedo(self) -> np.ndarray:
        return np.asarray(COLOR_ALBEDO[self.color])

    def half_extent(self) -> np.ndarray:
        """AABB half-size around the primitive center."""
        p = self.params
        if self.shape == "sphere":
            return np.full(3, p[0])
        if self.shape == "box":
            return p.copy()
        if self.shape == "cylinder":
            return np.array([p[0], p[0], p[1]])
        if self.shape == "torus":
            return np.array([p[0] + p[1], p[0] + p[1], p[1]])
        raise ValueError(f"unknown shape {self.shape!r}")

    @property
    def size_word(self) -> str:
        return "large" if float(self.half_extent().max()) >= SMALL_LARGE_SPLIT else "small"


@dataclass(frozen=True)
class PrimitiveScene:
    primitives: tuple[Primitive, ...]
    prompt: PromptTokens

    def sdf(self, points: np.ndarray) -> np.ndarray:
        return self.sdf_with_albedo(points)[0]

    def sdf_with_albedo(self, points: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Scene distance (min over primitives) and nearest-primitive albedo."""
        dists = np.stack([_primitive_sdf(p, points) for p in self.primitives], axis=0)
        nearest = np.argmin(dists, axis=0)
        albedos = np.stack([p.albedo for p in self.primitives], axis=0)
        return dists.min(axis=0), albedos[nearest]


@dataclass(frozen=True)
class ConditionImage:
    """Single-channel spatial condition in [0, 1]; edge maps are binary."""

    data: np.ndarray  # (H, W, 1)
    kind: str = "edge"

    def __post_init__(self):
        if self.data.ndim != 3 or self.data.shape[2] != 1:
            raise ValueError(f"condition image must be (H, W, 1), got {self.data.shape}")
        if self.kind not in ("edge", "depth"):
            raise ValueError(f"unknown condition kind {self.kind!r}")
        if self.data.min() < 0 or self.data.max() > 1:
            raise ValueError("condition values must lie in [0, 1]")
        if self.kind == "edge" and not np.all(np.isin(self.data, (0.0, 1.0))):
            raise ValueError("edge conditions must be binary")


@dataclass(frozen=True)
class MultiViewBatch:
    """One training item: four posed views (3D) or a standalone image (2D).

    ``rel_poses`` are expressed in the condition view's frame (view 0 is the
    identity); ``abs_poses`` keep the world-frame cameras the views were
    rendered from, which base-model training conditions on.
    """

    images: np.ndarray  # (V, H, W, 3) in [0, 1]
    rel_poses: tuple[CameraPose, ...]
    abs_poses: tuple[CameraPose, ...]
    condition: ConditionImage
    prompt: PromptTokens
    is_2d: bool
    camera_params: tuple[float, float, float, float]  # distance, fov, elevation, azimuth0
    scene: PrimitiveScene | None = None

    def __post_init__(self):
        views = self.images.shape[0]
        if self.is_2d and views != 1:
            raise ValueError(f"a 2D item carries exactly 1 view, got {views}")
        if not self.is_2d and views != 4:
            raise ValueError(f"a 3D item carries exactly 4 views, got {views}")
        if len(self.rel_poses) != views or len(self.abs_poses) != views:
            raise ValueError("pose count must match view count")


@dataclass(frozen=True)
class DataConfig:
    resolution: int = 64
    p_2d: float = 0.3
    p_drop_prompt: float = 0.5
    max_primitives: int = 3
    canny_low: float = 0.1
    canny_high: float = 0.2
    canny_sigma: float = 1.0


# ---------------------------------------------------------------------------
# scenes
# ---------------------------------------------------------------------------

def _primitive_sdf(prim: Primitive, points: np.ndarray) -> np.ndarray:
    q = points - prim.center
    p = prim.params
    if prim.shape == "sphere":
        return np.linalg.norm(q, axis=-1) - p[0]
    if prim.shape == "box":
        d = np.abs(q) - p
        outside = np.linalg.norm(np.maximum(d, 0.0), axis=-1)
        inside = np.minimum(d.max(axis=-1), 0.0)
        return outside + inside
    if prim.shape == "cylinder":
        radial = np.linalg.norm(q[..., :2], axis=-1) - p[0]
        axial = np.abs(q[..., 2]) - p[1]
        d = np.stack([radial, axial], axis=-1)
        outside = np.linalg.norm(np.maximum(d, 0.0), axis=-1)
        inside = np.minimum(d.max(axis=-1), 0.0)
        return outside + inside
    if prim.shape == "torus":
        ring = np.linalg.norm(q[..., :2], axis=-1) - p[0]
        return np.sqrt(ring**2 + q[..., 2] ** 2) - p[1]
    raise ValueError(f"unknown shape {prim.shape!r}")


def _sample_primitive(rng: np.random.Generator, centered: bool) -> Primitive:
    shape = SHAPE_WORDS[int(rng.integers(0, len(SHAPE_WORDS)))]
    color = COLOR_WORDS[int(rng.integers(0, len(COLOR_WORDS)))]
    if shape == "sphere":
        params = np.array([rng.uniform(0.14, 0.30)])
    elif shape == "box":
        params = rng.uniform(0.11, 0.25, size=3)
    elif shape == "cylinder":
        params = np.array([rng.uniform(0.10, 0.20), rng.uniform(0.14, 0.30)])
    else:  # torus
        params = np.array([rng.uniform(0.14, 0.24), rng.uniform(0.05, 0.08)])
    prim = Primitive(shape=shape, center=np.zeros(3), params=params, color=color)
    ext = prim.half_extent()
    room = np.maximum(SCENE_BOUND - ext, 0.0)
    limit = np.minimum(room, 0.12 if centered else room)
    center = rng.uniform(-limit, limit)
    return replace(prim, center=center)


def scene_prompt(primitives) -> PromptTokens:
    words: list[str] = []
    for i, prim in enumerate(primitives):
        if i > 0:
            words.append("and")
        words.extend([prim.size_word, prim.color, prim.shape])
    return PromptTokens.from_text(" ".join(words))


def parse_prompt(prompt: PromptTokens) -> list[tuple[str, str, str]]:
    """Invert scene_prompt: (size, color, shape) triples."""
    if prompt.is_empty:
        return []
    words = [VOCAB[i] for i in prompt.ids]
    triples = []
    i = 0
    while i < len(words):
        if words[i] == "and":
            i += 1
        size, color, shape = words[i : i + 3]
        if size not in SIZE_WORDS or color not in COLOR_WORDS or shape not in SHAPE_WORDS:
            raise ValueError(f"not a scene prompt: {words}")
        triples.append((size, color, shape))
        i += 3
    return triples


def make_scene(rng: np.random.Generator, max_primitives: int = 3) -> PrimitiveScene:
    """Draw a random 1-3 primitive scene; the first primitive stays central."""
    count = int(rng.integers(1, max_primitives + 1))
    prims = tuple(_sample_primitive(rng, centered=(i == 0)) for i in range(count))
    return PrimitiveScene(primitives=prims, prompt=scene_prompt(prims))


# ---------------------------------------------------------------------------
# rendering
# ---------------------------------------------------------------------------

def camera_rays(pose: CameraPose, resolution: int) -> tuple[np.ndarray, np.ndarray]:
    """Origins (3,) and per-pixel directions (H, W, 3) through pixel centers."""
    half = np.tan(np.deg2rad(pose.fov_deg) / 2.0)
    coords = (np.arange(resolution) + 0.5) / resolution * 2.0 - 1.0
    u, v = np.meshgrid(coords * half, coords * half, indexing="xy")
    right, down, forward = pose.rotation[:, 0], pose.rotation[:, 1], pose.rotation[:, 2]
    dirs = forward + u[..., None] * right + v[..., None] * down
    dirs = dirs / np.linalg.norm(dirs, axis=-1, keepdims=True)
    return pose.position, dirs


def ray_box_range(origin: np.ndarray, dirs: np.ndarray, bound: float) -> tuple[np.ndarray, np.ndarray]:
    """Entry/exit distances against the [-bound, bound]^3 box; miss => near > far."""
    inv = 1.0 / np.where(np.abs(dirs) < 1e-12, 1e-12, dirs)
    t0 = (-bound - origin) * inv
    t1 = (bound - origin) * inv
    near = np.minimum(t0, t1).max(axis=-1)
    far = np.maximum(t0, t1).min(axis=-1)
    return np.maximum(near, 0.0), far


def render_views(scene: PrimitiveScene, poses, resolution: int) -> np.ndarray:
    """Sphere-traced Lambertian render of several cameras in one marching
    loop; white background; returns (V, H, W, 3)."""
    v = len(poses)
    if not scene.primitives:
        return np.ones((v, resolution, resolution, 3))
    origins = []
    dirs = []
    for pose in poses:
        origin, d = camera_rays(pose, resolution)
        flat = d.reshape(-1, 3)
        dirs.append(flat)
        origins.append(np.broadcast_to(origin, flat.shape))
    origins = np.concatenate(origins)
    dirs = np.concatenate(dirs)
    near, far = ray_box_range(origins, dirs, RAY_DOMAIN_BOUND)

    n = dirs.shape[0]
    t = near.copy()
    hit = np.zeros(n, dtype=bool)
    active = near <= far
    for _ in range(96):
        if not active.any():
            break
        pts = origins[active] + dirs[active] * t[active, None]
        dist = scene.sdf(pts)
        newly_hit = dist < 1.5e-3
        idx = np.flatnonzero(active)
        hit[idx[newly_hit]] = True
        t[idx] += np.maximum(dist, 1e-4)
        still = ~newly_hit & (t[idx] <= far[idx])
        active[idx] = still

    image = np.ones((n, 3))
    if hit.any():
        pts = origins[hit] + dirs[hit] * t[hit, None]
        _, albedo = scene.sdf_with_albedo(pts)
        normal = _sdf_normal(scene, pts)
        light = LIGHT_DIR / np.linalg.norm(LIGHT_DIR)
        lambert = np.maximum(normal @ light, 0.0)
        image[hit] = np.clip(albedo * (AMBIENT + DIFFUSE * lambert[:, None]), 0.0, 1.0)
    return image.reshape(v, resolution, resolution, 3)


def render_scene(scene: PrimitiveScene, pose: CameraPose, resolution: int) -> np.ndarray:
    """Sphere-traced Lambertian render with a white background, (H, W, 3)."""
    return render_views(scene, [pose], resolution)[0]


def _sdf_normal(scene: PrimitiveScene, pts: np.ndarray, eps: float = 1e-4) -> np.ndarray:
    # tetrahedron-offset finite differences
    offsets = np.array([[1, -1, -1], [-1, -1, 1], [-1, 1, -1], [1, 1, 1]], dtype=np.float64)
    grad = np.zeros_like(pts)
    for off in offsets:
        grad += off * scene.sdf(pts + eps * off)[:, None]
    norm = np.linalg.norm(grad, axis=-1, keepdims=True)
    return grad / np.where(norm < 1e-12, 1.0, norm)


def render_silhouette(scene: PrimitiveScene, pose: CameraPose, resolution: int) -> np.ndarray:
    """Binary object mask via the same sphere tracer (True where geometry)."""
    image = render_scene(scene, pose, resolution)
    return ~np.all(image == 1.0, axis=-1)


# ---------------------------------------------------------------------------
# edge detection
# ---------------------------------------------------------------------------

def edge_map(image: np.ndarray, low: float = 0.1, high: float = 0.2, sigma: float = 1.0) -> ConditionImage:
    """Canny edges: smooth, gradient, non-maximum suppression, hysteresis.

    Thresholds are fractions of the maximum gradient magnitude.
    """
    if low > high:
        raise ValueError(f"low threshold ({low}) must not exceed high ({high})")
    if image.ndim == 3:
        gray = image @ np.array([0.299, 0.587, 0.114])
    else:
        gray = np.asarray(image, dtype=np.float64)
    smooth = ndimage.gaussian_filter(gray, sigma=sigma)
    gx = ndimage.sobel(smooth, axis=1)
    gy = ndimage.sobel(smooth, axis=0)
    mag = np.hypot(gx, gy)

    thinned = _non_maximum_suppression(mag, gx, gy)
    peak = thinned.max()
    if peak <= 0:
        return ConditionImage(data=np.zeros((*gray.shape, 1)), kind="edge")
    strong = thinned > high * peak
    weak = thinned > low * peak
    edges = ndimage.binary_dilation(strong, structure=np.ones((3, 3)), iterations=0, mask=weak)
    return ConditionImage(data=edges.astype(np.float64)[..., None], kind="edge")


def _non_maximum_suppression(mag: np.ndarray, gx: np.ndarray, gy: np.ndarray) -> np.ndarray:
    """Keep ridge pixels along the gradient direction (4 quantized bins).

    Ties between equal neighbors break toward the positive direction so a
    symmetric step edge thins to a single-pixel line.
    """
    angle = np.mod(np.arctan2(gy, gx), np.pi)
    sector = np.round(angle / (np.pi / 4)).astype(int) % 4
    # sector 0: E-W, 1: NE-SW, 2: N-S, 3: NW-SE (gradient direction offsets)
    offsets = {0: (0, 1), 1: (1, 1), 2: (1, 0), 3: (1, -1)}
    padded = np.pad(mag, 1, mode="constant")
    keep = np.zeros_like(mag, dtype=bool)
    h, w = mag.shape
    for s, (dy, dx) in offsets.items():
        fwd = padded[1 + dy : 1 + dy + h, 1 + dx : 1 + dx + w]
        bwd = padded[1 - dy : 1 - dy + h, 1 - dx : 1 - dx + w]
        keep |= (sector == s) & (mag > fwd) & (mag >= bwd)
    return np.where(keep, mag, 0.0)


# ---------------------------------------------------------------------------
# batches
# ---------------------------------------------------------------------------

def next_batch(rng: np.random.Generator, config: DataConfig) -> MultiViewBatch:
    """Draw one training item: 3D four-view with probability 1 - p_2d, else 2D."""
    is_2d = bool(rng.random() < config.p_2d)
    scene = make_scene(rng, config.max_primitives)
    distance, fov, elevation, azimuth0 = sample_camera(rng)

    if is_2d:
        # held-out single view at an unconstrained azimuth
        azimuth = rng.uniform(0.0, 360.0)
        pose = orbit_pose(distance, elevation, azimuth, fov)
        image = render_scene(scene, pose, config.resolution)
        images = image[None]
        abs_poses = (pose,)
        rel_poses = (CameraPose.identity(fov_deg=fov),)
        camera_params = (distance, fov, elevation, azimuth)
    else:
        abs_list = absolute_canonical_poses(distance, elevation, azimuth0, fov)
        images = render_views(scene, abs_list, config.resolution)
        abs_poses = tuple(abs_list)
        rel_poses = canonical_views(distance, elevation, azimuth0, fov).poses
        camera_params = (distance, fov, elevation, azimuth0)

    condition = edge_map(images[0], config.canny_low, config.canny_high, config.canny_sigma)
    prompt = PromptTokens.empty() if rng.random() < config.p_drop_prompt else scene.prompt
    return MultiViewBatch(
        images=images.astype(np.float32),
        rel_poses=rel_poses,
        abs_poses=abs_poses,
        condition=condition,
        prompt=prompt,
        is_2d=is_2d,
        camera_params=camera_params,
        scene=scene,
    )


def item_rng(seed: int, index: int) -> np.random.Generator:
    """Independent per-item stream so parallel workers get identical data."""
    return np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=(index,)))


def batch_stream(seed: int, config: DataConfig, start: int = 0):
    """Infinite deterministic item stream; item i depends only on (seed, i)."""
    index = start
    while True:
        yield next_batch(item_rng(seed, index), config)
        index += 1


# ---------------------------------------------------------------------------
# on-disk datasets (optional; streaming is the default)
# ---------------------------------------------------------------------------

def write_dataset(path: str | Path, seed: int, config: DataConfig, count: int) -> None:
    """Materialize ``count`` items: PNG views plus a JSON-lines manifest."""
    from PIL import Image

    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    with open(path / "manifest.jsonl", "w") as manifest:
        for index in range(count):
            item = next_batch(item_rng(seed, index), config)
            names = []
            for v in range(item.images.shape[0]):
                name = f"item{index:06d}_view{v}.png"
                arr = (np.clip(item.images[v], 0, 1) * 255).round().astype(np.uint8)
                Image.fromarray(arr).save(path / name)
                names.append(name)
            cond_name = f"item{index:06d}_cond.png"
            cond = (item.condition.data[..., 0] * 255).astype(np.uint8)
            Image.fromarray(cond).save(path / cond_name)
            record = {
                "index": index,
                "views": names,
                "condition": cond_name,
                "condition_kind": item.condition.kind,
                "rel_poses": [p.to_flat() for p in item.rel_poses],
                "abs_poses": [p.to_flat() for p in item.abs_poses],
                "fov_deg": [p.fov_deg for p in item.abs_poses],
                "prompt_ids": list(item.prompt.ids),
                "prompt_empty": item.prompt.is_empty,
                "is_2d": item.is_2d,
                "camera_params": list(item.camera_params),
            }
            manifest.write(json.dumps(record) + "\n")


def read_dataset(path: str | Path) -> list[MultiViewBatch]:
    from PIL import Image

    path = Path(path)
    items = []
    with open(path / "manifest.jsonl") as manifest:
        for line in manifest:
            rec = json.loads(line)
            images = np.stack(
                [np.asarray(Image.open(path / n), dtype=np.float32) / 255.0 for n in rec["views"]]
            )
            cond = np.asarray(Image.open(path / rec["condition"]), dtype=np.float64) / 255.0
            condition = ConditionImage(data=np.round(cond)[..., None], kind=rec["condition_kind"])
            fovs = rec["fov_deg"]
            rel = tuple(CameraPose.from_flat(v, f) for v, f in zip(rec["rel_poses"], fovs))
            abs_poses = tuple(CameraPose.from_flat(v, f) for v, f in zip(rec["abs_poses"], fovs))
            prompt = (
                PromptTokens.empty()
                if rec["prompt_empty"]
                else PromptTokens(ids=tuple(rec["prompt_ids"]))
            )
            items.append(
                MultiViewBatch(
                    images=images,
                    rel_poses=rel,
                    abs_poses=abs_poses,
                    condition=condition,
                    prompt=prompt,
                    is_2d=rec["is_2d"],
                    camera_params=tuple(rec["camera_params"]),
                )
            )
    return items
