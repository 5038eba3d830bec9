"""Synthetic object-flow episodes with exact ground truth.

Scenes are flat-coloured fronto-parallel objects seen by a pinhole camera.  A
target object undergoes a rigid motion made of constant per-step SE(3)
increments; tracking points sampled inside its box are carried through the
motion and projected, then the raw steps are subsampled to the horizon.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import datamodel as dm
from .rotations import rot_z

COLORS = {
    "red": (220, 40, 40),
    "green": (40, 170, 60),
    "blue": (50, 80, 220),
    "yellow": (230, 210, 40),
    "orange": (240, 140, 30),
    "purple": (150, 60, 190),
}
# shape name -> (raster kind, (min size, max size) in px)
SHAPES = {
    "block": ("rect", (12, 18)),
    "box": ("rect", (16, 22)),
    "cup": ("circle", (14, 18)),
    "ball": ("circle", (12, 16)),
}
DIRECTIONS = {"left": (-1, 0), "right": (1, 0), "up": (0, -1), "down": (0, 1)}
VERBS = {
    "move": "translate", "push": "translate", "slide": "translate",
    "lift": "lift", "raise": "lift",
    "put": "translate_then_place", "place": "translate_then_place",
    "rotate": "rotate_in_plane", "turn": "rotate_in_plane",
}
SPIN = ("clockwise", "counterclockwise")
BACKGROUND_RGB = (110, 110, 110)
BACKGROUND_DEPTH = 1.6
PAD, UNK = "<pad>", "<unk>"


class BBoxTooSmall(ValueError):
    pass


class PointLeavesView(ValueError):
    pass


@dataclass
class SceneObject:
    shape: str
    color: str
    size: int  # side (rect height / circle diameter) in px
    position: tuple[int, int]  # top-left pixel of the object's box
    depth: float
    aspect: float = 1.0  # rect width / height

    @property
    def kind(self) -> str:
        return SHAPES[self.shape][0]

    def box(self) -> tuple[int, int, int, int]:
        """Pixel box ``(x0, y0, x1, y1)`` with exclusive upper corners."""
        x0, y0 = self.position
        w = int(round(self.size * self.aspect)) if self.kind == "rect" else self.size
        return x0, y0, x0 + w, y0 + self.size

    def sampling_box(self) -> tuple[int, int, int, int]:
        """Region guaranteed to lie on the object (inscribed square for circles)."""
        x0, y0, x1, y1 = self.box()
        if self.kind == "rect":
            return x0, y0, x1, y1
        inset = int(np.ceil(self.size * (1 - 1 / np.sqrt(2)) / 2)) + 1
        return x0 + inset, y0 + inset, x1 - inset, y1 - inset

    def mask(self, height: int, width: int) -> np.ndarray:
        yy, xx = np.mgrid[0:height, 0:width]
        x0, y0, x1, y1 = self.box()
        if self.kind == "rect":
            return (xx >= x0) & (xx < x1) & (yy >= y0) & (yy < y1)
        cx, cy = (x0 + x1 - 1) / 2, (y0 + y1 - 1) / 2
        r = self.size / 2
        return (xx - cx) ** 2 + (yy - cy) ** 2 <= r * r


@dataclass
class MotionSpec:
    kind: str
    increments: list[dm.Pose6DoF]  # raw per-step transforms, camera frame

    @property
    def raw_steps(self) -> int:
        return len(self.increments) + 1

    def poses(self) -> list[dm.Pose6DoF]:
        """Cumulative pose at every raw step, starting from identity."""
        out = [dm.Pose6DoF.identity()]
        for inc in self.increments:
            out.append(inc.compose(out[-1]))
        return out


@dataclass
class SceneSpec:
    objects: list[SceneObject]
    actor: int
    motion: MotionSpec
    instruction: str
    verb: str
    seed: int
    horizon: int = dm.DEFAULT_HORIZON
    n_points: int = dm.DEFAULT_N_POINTS
    noise_sigma: float = 0.0
    camera: dm.CameraModel = field(default_factory=dm.default_camera)

    @property
    def target(self) -> SceneObject:
        return self.objects[self.actor]


# -- tokens -------------------------------------------------------------------
def tokenize(text: str) -> list[str]:
    return re.findall(r"[a-z0-9]+", text.lower())


def build_vocab() -> dict[str, int]:
    """Token -> id for every word the instruction templates can emit."""
    words = {"the", "near", *COLORS, *SHAPES, *DIRECTIONS, *VERBS, *SPIN}
    vocab = {PAD: 0, UNK: 1}
    for w in sorted(words):
        vocab[w] = len(vocab)
    return vocab


# -- sampling -----------------------------------------------------------------
def sample_tracking_points(bbox, n: int, seed) -> np.ndarray:
    """``n`` distinct integer pixels drawn uniformly from ``bbox`` = (x0, y0, x1, y1).

    Upper corners are exclusive, so a box covering one pixel is
    ``(x, y, x + 1, y + 1)``.
    """
    x0, y0, x1, y1 = (int(v) for v in bbox)
    if n < 1:
        raise ValueError("n must be >= 1")
    w, h = x1 - x0, y1 - y0
    if w <= 0 or h <= 0 or w * h < n:
        raise BBoxTooSmall(f"bbox {bbox} holds {max(w, 0) * max(h, 0)} pixels, need {n}")
    rng = np.random.default_rng(seed)
    flat = rng.choice(w * h, size=n, replace=False)
    return np.stack([x0 + flat % w, y0 + flat // w], axis=1).astype(np.float64)


def subsample_indices(raw_steps: int, horizon: int) -> np.ndarray:
    """Uniform-in-time indices including both endpoints."""
    return np.round(np.linspace(0, raw_steps - 1, horizon)).astype(int)


def raw_steps_for(horizon: int) -> int:
    return 3 * (horizon - 1) + 1


def _constant_increments(step: dm.Pose6DoF, count: int) -> list[dm.Pose6DoF]:
    return [dm.Pose6DoF(step.translation.copy(), step.rotation.copy()) for _ in range(count)]


def _translation_increments(delta3: np.ndarray, count: int) -> list[dm.Pose6DoF]:
    return _constant_increments(dm.Pose6DoF(np.asarray(delta3) / count), count)


def _rotation_increments(angle: float, pivot: np.ndarray, count: int) -> list[dm.Pose6DoF]:
    r = rot_z(angle / count)
    return _constant_increments(dm.Pose6DoF(pivot - r @ pivot, r), count)


def make_motion(kind: str, target: SceneObject, camera: dm.CameraModel, rng: np.random.Generator,
                horizon: int, reference: SceneObject | None = None,
                direction: str | None = None, spin: str | None = None) -> MotionSpec:
    raw = raw_steps_for(horizon)
    count = raw - 1
    z = target.depth
    px_to_m = np.array([z / camera.fx, z / camera.fy])
    if kind == "translate":
        dist = int(rng.integers(14, 41))
        d = np.array(DIRECTIONS[direction], dtype=float) * dist
        return MotionSpec(kind, _translation_increments(np.array([*(d * px_to_m), 0.0]), count))
    if kind == "lift":
        up = int(rng.integers(14, 35))
        dz = float(rng.uniform(0.04, 0.12))
        return MotionSpec(kind, _translation_increments(np.array([0.0, -up * px_to_m[1], -dz]), count))
    if kind == "translate_then_place":
        assert reference is not None
        tx0, ty0, tx1, ty1 = target.box()
        rx0, ry0, rx1, ry1 = reference.box()
        tc = np.array([(tx0 + tx1) / 2, (ty0 + ty1) / 2])
        rc = np.array([(rx0 + rx1) / 2, (ry0 + ry1) / 2])
        gap = (max(tx1 - tx0, ty1 - ty0) + max(rx1 - rx0, ry1 - ry0)) / 2 + 3
        diff = rc - tc
        goal = rc - diff / np.linalg.norm(diff) * gap
        d = goal - tc
        hop = float(rng.uniform(0.03, 0.08))
        carry = 2 * count // 3
        place = count - carry
        incs = _translation_increments(np.array([*(d * px_to_m), -hop]), carry)
        incs += _translation_increments(np.array([0.0, 0.0, hop]), place)
        return MotionSpec(kind, incs)
    if kind == "rotate_in_plane":
        x0, y0, x1, y1 = target.box()
        side = x0 if rng.random() < 0.5 else x1 - 1
        pivot_px = np.array([side, (y0 + y1 - 1) / 2])
        pivot = np.array([(pivot_px[0] - camera.cx) * px_to_m[0],
                          (pivot_px[1] - camera.cy) * px_to_m[1], z])
        angle = np.deg2rad(rng.uniform(30, 70)) * (1 if spin == "clockwise" else -1)
        return MotionSpec(kind, _rotation_increments(angle, pivot, count))
    raise ValueError(f"unknown motion kind {kind!r}")


def held_out_pairs(seed: int) -> set[tuple[str, str]]:
    """One (verb, colour) combination per verb reserved for the test split."""
    colors = sorted(COLORS)
    return {(verb, colors[(i + seed) % len(colors)]) for i, verb in enumerate(sorted(VERBS))}


def _overlaps(a: SceneObject, b: SceneObject, margin: int = 4) -> bool:
    ax0, ay0, ax1, ay1 = a.box()
    bx0, by0, bx1, by1 = b.box()
    return not (ax1 + margin <= bx0 or bx1 + margin <= ax0 or ay1 + margin <= by0 or by1 + margin <= ay0)


def _random_object(rng, shape, color, camera, margin=6) -> SceneObject:
    lo, hi = SHAPES[shape][1]
    size = int(rng.integers(lo, hi + 1))
    aspect = float(rng.uniform(1.0, 1.4)) if SHAPES[shape][0] == "rect" else 1.0
    w = int(round(size * aspect)) if SHAPES[shape][0] == "rect" else size
    x = int(rng.integers(margin, camera.width - margin - w))
    y = int(rng.integers(margin, camera.height - margin - size))
    return SceneObject(shape, color, size, (x, y), float(rng.uniform(0.9, 1.3)), aspect)


def sample_scene_spec(seed, verb: str | None = None, color: str | None = None,
                      forbidden: set[tuple[str, str]] = frozenset(), horizon: int = dm.DEFAULT_HORIZON,
                      n_points: int = dm.DEFAULT_N_POINTS, noise_sigma: float = 0.0,
                      camera: dm.CameraModel | None = None, max_tries: int = 500) -> SceneSpec:
    """Draw a valid scene: non-overlapping objects, target kept in view throughout."""
    camera = camera or dm.default_camera()
    rng = np.random.default_rng(seed)
    verbs, colors, shapes = sorted(VERBS), sorted(COLORS), sorted(SHAPES)
    for _ in range(max_tries):
        v = verb or verbs[rng.integers(len(verbs))]
        c = color or colors[rng.integers(len(colors))]
        if (v, c) in forbidden:
            continue
        kind = VERBS[v]
        n_objects = int(rng.integers(2, 4))
        palette = [c] + [x for x in rng.permutation(colors) if x != c]
        objects: list[SceneObject] = []
        for i in range(n_objects):
            for _ in range(50):
                obj = _random_object(rng, shapes[rng.integers(len(shapes))], palette[i], camera)
                if not any(_overlaps(obj, o) for o in objects):
                    objects.append(obj)
                    break
        if len(objects) < 2:
            continue
        target = objects[0]
        sx0, sy0, sx1, sy1 = target.sampling_box()
        if (sx1 - sx0) * (sy1 - sy0) < n_points:
            continue
        direction = spin = None
        reference = objects[1] if kind == "translate_then_place" else None
        if kind == "translate":
            direction = sorted(DIRECTIONS)[rng.integers(len(DIRECTIONS))]
            text = f"{v} the {c} {target.shape} {direction}"
        elif kind == "translate_then_place":
            text = f"{v} the {c} {target.shape} near the {reference.color} {reference.shape}"
        elif kind == "rotate_in_plane":
            spin = SPIN[rng.integers(2)]
            text = f"{v} the {c} {target.shape} {spin}"
        else:
            text = f"{v} the {c} {target.shape}"
        motion = make_motion(kind, target, camera, rng, horizon, reference, direction, spin)
        spec = SceneSpec(objects, 0, motion, text, v, int(rng.integers(2**31)), horizon, n_points,
                         noise_sigma, camera)
        if _target_stays_in_view(spec):
            return spec
    raise RuntimeError(f"could not sample a valid scene for seed {seed}")


def _object_points3d(obj: SceneObject, pixels: np.ndarray, camera: dm.CameraModel) -> np.ndarray:
    z = np.full(len(pixels), obj.depth)
    return np.stack([(pixels[:, 0] - camera.cx) * z / camera.fx,
                     (pixels[:, 1] - camera.cy) * z / camera.fy, z], axis=1)


def _target_stays_in_view(spec: SceneSpec, margin: float = 1.0) -> bool:
    cam = spec.camera
    x0, y0, x1, y1 = spec.target.box()
    corners = np.array([[x0, y0], [x1 - 1, y0], [x0, y1 - 1], [x1 - 1, y1 - 1]], dtype=float)
    pts = _object_points3d(spec.target, corners, cam)
    for pose in spec.motion.poses():
        moved = pose.apply(pts)
        if (moved[:, 2] <= 0).any():
            return False
        uv = cam.project(moved)
        if (uv < margin).any() or (uv[:, 0] >= cam.width - margin).any() \
                or (uv[:, 1] >= cam.height - margin).any():
            return False
    return True


# -- rendering / generation -----------------------------------------------------
def render(spec: SceneSpec) -> tuple[np.ndarray, np.ndarray]:
    cam = spec.camera
    rgb = np.empty((cam.height, cam.width, 3), dtype=np.uint8)
    rgb[:] = BACKGROUND_RGB
    depth = np.full((cam.height, cam.width), BACKGROUND_DEPTH)
    # far objects first so nearer ones overwrite them
    for obj in sorted(spec.objects, key=lambda o: -o.depth):
        m = obj.mask(cam.height, cam.width)
        rgb[m] = COLORS[obj.color]
        depth[m] = obj.depth
    return rgb, depth


def generate_episode(spec: SceneSpec, episode_id: str = "ep00000") -> dm.Episode:
    cam = spec.camera
    rgb, depth = render(spec)
    target = spec.target
    pixels = sample_tracking_points(target.sampling_box(), spec.n_points, spec.seed)
    pts = _object_points3d(target, pixels, cam)
    raw_poses = spec.motion.poses()
    idx = subsample_indices(len(raw_poses), spec.horizon)
    poses = [raw_poses[i] for i in idx]
    coords = np.stack([cam.project(p.apply(pts)) for p in poses])
    coords[0] = pixels
    if spec.noise_sigma > 0:
        rng = np.random.default_rng([spec.seed, 1])
        coords[1:] += rng.normal(0.0, spec.noise_sigma, size=coords[1:].shape)
        coords[1:, :, 0] = np.clip(coords[1:, :, 0], 0, cam.width - 1e-6)
        coords[1:, :, 1] = np.clip(coords[1:, :, 1], 0, cam.height - 1e-6)
    if not cam.in_bounds(coords).all():
        raise PointLeavesView(f"{episode_id}: a tracking point leaves the image")
    meta = {"verb": spec.verb, "color": target.color, "shape": target.shape,
            "motion": spec.motion.kind}
    return dm.Episode(episode_id, rgb, spec.instruction, depth, cam, dm.FlowSequence(coords),
                      poses, None, meta)


# -- datasets -----------------------------------------------------------------
@dataclass
class Dataset:
    splits: dict[str, list[dm.Episode]]
    held_out: set[tuple[str, str]]
    seed: int

    def manifests(self) -> dict[str, list[str]]:
        return {name: [e.id for e in eps] for name, eps in self.splits.items()}


def split_counts(count: int, ratios) -> tuple[int, int, int]:
    ratios = tuple(float(r) for r in ratios)
    if len(ratios) != 3 or abs(sum(ratios) - 1.0) > 1e-9 or min(ratios) < 0:
        raise ValueError(f"split ratios must be three non-negative values summing to 1, got {ratios}")
    n_train = int(round(count * ratios[0]))
    n_val = int(round(count * ratios[1]))
    n_val = min(n_val, count - n_train)
    return n_train, n_val, count - n_train - n_val


def build_dataset(count: int, split_ratios=(0.8, 0.1, 0.1), seed: int = 0, noise_sigma: float = 0.0,
                  horizon: int = dm.DEFAULT_HORIZON, n_points: int = dm.DEFAULT_N_POINTS,
                  with_prompts: bool = True) -> Dataset:
    """Generate ``count`` episodes split into train/val/test.

    Split membership is drawn serially from ``seed`` before any episode is
    generated.  Train and val never use the held-out (verb, colour) pairs;
    every other test episode is forced onto one of them.
    """
    if count < 1:
        raise ValueError("count must be >= 1")
    sizes = split_counts(count, split_ratios)
    labels = np.array(["train"] * sizes[0] + ["val"] * sizes[1] + ["test"] * sizes[2])
    labels = labels[np.random.default_rng(seed).permutation(count)]
    held = held_out_pairs(seed)
    held_sorted = sorted(held)
    splits: dict[str, list[dm.Episode]] = {"train": [], "val": [], "test": []}
    n_test = 0
    from .prompter import oracle_prompt  # local import: prompter depends on datamodel only

    for i, label in enumerate(labels):
        ep_seed = [seed, i]
        if label == "test" and n_test % 2 == 0:
            pick = np.random.default_rng(ep_seed).integers(len(held_sorted))
            verb, color = held_sorted[pick]
            spec = sample_scene_spec(ep_seed, verb, color, horizon=horizon, n_points=n_points,
                                     noise_sigma=noise_sigma)
        else:
            spec = sample_scene_spec(ep_seed, forbidden=held if label != "test" else frozenset(),
                                     horizon=horizon, n_points=n_points, noise_sigma=noise_sigma)
        n_test += label == "test"
        ep = generate_episode(spec, f"ep{i:05d}")
        if with_prompts:
            ep.prompt = oracle_prompt(ep, 0.0)
        splits[str(label)].append(ep)
    return Dataset(splits, held, seed)


def write_dataset(ds: Dataset, root) -> dict:
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    for name, eps in ds.splits.items():
        dm.write_split(root, name, eps)
    (root / "vocab.json").write_text(json.dumps(build_vocab(), indent=2) + "\n")
    info = {"seed": ds.seed, "counts": {k: len(v) for k, v in ds.splits.items()},
            "held_out": sorted([list(p) for p in ds.held_out])}
    (root / "dataset.json").write_text(json.dumps(info, indent=2, sort_keys=True) + "\n")
    return info


def load_dataset(root) -> dict[str, list[dm.Episode]]:
    root = Path(root)
    return {name: dm.load_split(root, name) for name in ("train", "val", "test")
            if (root / name / "manifest.json").exists()}
