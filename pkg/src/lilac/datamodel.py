"""Episode types, invariant checks, and the on-disk episode/manifest formats.

Episode record layout (little-endian)::

    b"LFLW" | u16 version | sections...

Each section is ``u32 byte_length`` followed by its payload, in this order:
header, rgb, depth, flow, trajectory, instruction, and optionally prompt.

* header      -- u16 id length, id (UTF-8), f64 fx fy cx cy, u32 width height
                 horizon n_points
* rgb         -- height*width*3 raw bytes
* depth       -- f32 [height][width], meters
* flow        -- f32 [T][n][2], pixels
* trajectory  -- f32 [T][7] as tx ty tz qw qx qy qz
* instruction -- UTF-8 bytes
* prompt      -- f32 [8] as start_u start_v end_u end_v x0 y0 x1 y1
"""

from __future__ import annotations

import hashlib
import itertools
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import rotations

MAGIC = b"LFLW"
FORMAT_VERSION = 1
IMAGE_SIZE = 128
DEFAULT_HORIZON = 8
DEFAULT_N_POINTS = 16
ORTHO_TOL = 1e-9


class FormatVersionMismatch(ValueError):
    pass


class CorruptPayload(ValueError):
    pass


class MissingField(ValueError):
    pass


@dataclass(frozen=True)
class CameraModel:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int = IMAGE_SIZE
    height: int = IMAGE_SIZE

    def intrinsics(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])

    def project(self, points: np.ndarray) -> np.ndarray:
        """(..., 3) camera-frame points -> (..., 2) pixel coordinates."""
        points = np.asarray(points, dtype=np.float64)
        z = points[..., 2]
        u = self.fx * points[..., 0] / z + self.cx
        v = self.fy * points[..., 1] / z + self.cy
        return np.stack([u, v], axis=-1)

    def in_bounds(self, uv: np.ndarray) -> np.ndarray:
        uv = np.asarray(uv)
        return ((uv[..., 0] >= 0) & (uv[..., 0] < self.width)
                & (uv[..., 1] >= 0) & (uv[..., 1] < self.height))

    def violations(self) -> list[str]:
        out = []
        if not (self.fx > 0 and self.fy > 0):
            out.append("camera: focal lengths must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            out.append("camera: principal point outside image")
        return out

    def to_dict(self) -> dict:
        return {"fx": self.fx, "fy": self.fy, "cx": self.cx, "cy": self.cy,
                "width": self.width, "height": self.height}

    @classmethod
    def from_dict(cls, d: dict) -> CameraModel:
        return cls(float(d["fx"]), float(d["fy"]), float(d["cx"]), float(d["cy"]),
                   int(d["width"]), int(d["height"]))


def default_camera() -> CameraModel:
    return CameraModel(fx=120.0, fy=120.0, cx=IMAGE_SIZE / 2, cy=IMAGE_SIZE / 2)


@dataclass
class FlowSequence:
    """Pixel tracks, ``coords[t, i] = (x, y)`` of point ``i`` at step ``t``."""

    coords: np.ndarray

    def __post_init__(self):
        self.coords = np.asarray(self.coords, dtype=np.float64)
        if self.coords.ndim != 3 or self.coords.shape[2] != 2:
            raise ValueError(f"flow coords must be (T, n, 2), got {self.coords.shape}")

    @property
    def horizon(self) -> int:
        return self.coords.shape[0]

    @property
    def n_points(self) -> int:
        return self.coords.shape[1]

    def violations(self, camera: CameraModel) -> list[str]:
        out = []
        if self.horizon < 2:
            out.append(f"flow: horizon {self.horizon} < 2")
        if not np.isfinite(self.coords).all():
            out.append("flow: non-finite coordinates")
        elif not camera.in_bounds(self.coords).all():
            bad = np.argwhere(~camera.in_bounds(self.coords))[0]
            out.append(f"flow: point {int(bad[1])} at step {int(bad[0])} outside image")
        return out

    def to_json(self) -> dict:
        return {"horizon": self.horizon, "n_points": self.n_points,
                "coords": self.coords.tolist()}

    @classmethod
    def from_json(cls, d: dict) -> FlowSequence:
        flow = cls(np.array(d["coords"], dtype=np.float64).reshape(d["horizon"], d["n_points"], 2))
        return flow


@dataclass(frozen=True)
class VisualPrompt:
    start: tuple[float, float]
    end: tuple[float, float]
    bbox: tuple[float, float, float, float]

    def violations(self, width: int, height: int) -> list[str]:
        out = []
        x0, y0, x1, y1 = self.bbox
        if not (x0 < x1 and y0 < y1):
            out.append("prompt: bbox not well-ordered")
        if not (0 <= x0 and 0 <= y0 and x1 <= width and y1 <= height):
            out.append("prompt: bbox outside image")
        for label, (u, v) in (("start", self.start), ("end", self.end)):
            if not (0 <= u < width and 0 <= v < height):
                out.append(f"prompt: {label} outside image")
        return out

    def to_json(self) -> dict:
        return {"start": list(self.start), "end": list(self.end), "bbox": list(self.bbox)}

    @classmethod
    def from_json(cls, d: dict) -> VisualPrompt:
        return cls(tuple(float(x) for x in d["start"]), tuple(float(x) for x in d["end"]),
                   tuple(float(x) for x in d["bbox"]))


@dataclass
class Pose6DoF:
    """Rigid transform in the t=0 camera frame: ``p' = R p + t``."""

    translation: np.ndarray
    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))

    def __post_init__(self):
        self.translation = np.asarray(self.translation, dtype=np.float64).reshape(3)
        self.rotation = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)

    @classmethod
    def identity(cls) -> Pose6DoF:
        return cls(np.zeros(3), np.eye(3))

    @classmethod
    def from_quaternion(cls, translation, quat) -> Pose6DoF:
        return cls(translation, rotations.quat_to_matrix(quat))

    @classmethod
    def from_vector6(cls, vec) -> Pose6DoF:
        vec = np.asarray(vec, dtype=np.float64)
        return cls(vec[:3], rotations.exp_so3(vec[3:]))

    @property
    def quaternion(self) -> np.ndarray:
        return rotations.matrix_to_quat(self.rotation)

    def to_vector6(self) -> np.ndarray:
        """Translation (m) followed by axis-angle rotation (rad)."""
        return np.concatenate([self.translation, rotations.log_so3(self.rotation)])

    def apply(self, points: np.ndarray) -> np.ndarray:
        return np.asarray(points) @ self.rotation.T + self.translation

    def compose(self, other: Pose6DoF) -> Pose6DoF:
        """``self ∘ other``: apply ``other`` first."""
        return Pose6DoF(self.rotation @ other.translation + self.translation,
                        self.rotation @ other.rotation)

    def inverse(self) -> Pose6DoF:
        rt = self.rotation.T
        return Pose6DoF(-rt @ self.translation, rt)

    def violations(self) -> list[str]:
        out = []
        r = self.rotation
        if np.abs(r.T @ r - np.eye(3)).max() > ORTHO_TOL:
            out.append("pose: rotation not orthonormal")
        if abs(np.linalg.det(r) - 1.0) > ORTHO_TOL:
            out.append("pose: rotation determinant != 1")
        if not np.isfinite(self.translation).all():
            out.append("pose: non-finite translation")
        return out

    def to_json(self, t: int) -> dict:
        return {"t": t, "translation": self.translation.tolist(),
                "quaternion": self.quaternion.tolist()}


@dataclass
class Episode:
    id: str
    rgb: np.ndarray  # (height, width, 3) uint8
    instruction: str
    depth: np.ndarray  # (height, width) meters
    camera: CameraModel
    gt_flow: FlowSequence
    gt_trajectory: list[Pose6DoF]
    prompt: VisualPrompt | None = None
    meta: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        self.rgb = np.asarray(self.rgb, dtype=np.uint8)
        self.depth = np.asarray(self.depth, dtype=np.float64)

    @property
    def horizon(self) -> int:
        return self.gt_flow.horizon

    def digest(self) -> str:
        return hashlib.sha256(encode_episode(self)).hexdigest()


def validate(e: Episode) -> list[str]:
    """Return every violated invariant as a message; empty means valid."""
    out: list[str] = []
    cam = e.camera
    out += cam.violations()
    if e.rgb.shape != (cam.height, cam.width, 3):
        out.append(f"rgb: shape {e.rgb.shape} != ({cam.height}, {cam.width}, 3)")
    if e.depth.shape != (cam.height, cam.width):
        out.append(f"depth: shape {e.depth.shape} != ({cam.height}, {cam.width})")
    if not e.instruction.strip():
        out.append("instruction: empty")
    out += e.gt_flow.violations(cam)
    if len(e.gt_trajectory) != e.gt_flow.horizon:
        out.append(f"trajectory: length {len(e.gt_trajectory)} != horizon {e.gt_flow.horizon}")
    for t, pose in enumerate(e.gt_trajectory):
        out += [f"{msg} (t={t})" for msg in pose.violations()]
    if e.depth.shape == (cam.height, cam.width) and cam.in_bounds(e.gt_flow.coords[0]).all():
        px = np.floor(e.gt_flow.coords[0]).astype(int)
        d0 = e.depth[px[:, 1], px[:, 0]]
        if not (d0 > 0).all():
            out.append("depth: non-positive depth at a tracked point at t=0")
    if e.prompt is not None:
        out += e.prompt.violations(cam.width, cam.height)
    return out


# -- binary record ------------------------------------------------------------
def _quat_round_trip(q32: np.ndarray) -> np.ndarray:
    return rotations.matrix_to_quat(rotations.quat_to_matrix(q32.astype(np.float64))).astype(np.float32)


def _stable_quat32(rotation: np.ndarray) -> np.ndarray:
    """Float32 quaternion ``c`` with ``round32(quat(matrix(c))) == c``.

    Decoding turns the stored quaternion into a matrix; re-encoding turns it
    back.  Storing a fixed point of that map makes save(load(file)) byte-exact.
    The nearest fixed point within two float32 ulps per component is used.
    """
    q32 = rotations.matrix_to_quat(rotation).astype(np.float32)
    if np.array_equal(_quat_round_trip(q32), q32):
        return q32
    ulp = np.spacing(np.abs(q32)).astype(np.float32)
    for radius in (1, 2):
        steps = np.array(list(itertools.product(range(-radius, radius + 1), repeat=4)), dtype=np.float32)
        order = np.argsort(np.abs(steps).sum(axis=1), kind="stable")
        for k in order:
            cand = (q32 + steps[k] * ulp).astype(np.float32)
            if np.array_equal(_quat_round_trip(cand), cand):
                return cand
    return q32


def _section(payload: bytes) -> bytes:
    return struct.pack("<I", len(payload)) + payload


def encode_episode(e: Episode) -> bytes:
    cam = e.camera
    T, n = e.gt_flow.horizon, e.gt_flow.n_points
    ident = e.id.encode("utf-8")
    header = (struct.pack("<H", len(ident)) + ident
              + struct.pack("<4d", cam.fx, cam.fy, cam.cx, cam.cy)
              + struct.pack("<4I", cam.width, cam.height, T, n))
    traj = np.zeros((len(e.gt_trajectory), 7), dtype=np.float32)
    for t, pose in enumerate(e.gt_trajectory):
        traj[t, :3] = pose.translation.astype(np.float32)
        traj[t, 3:] = _stable_quat32(pose.rotation)
    parts = [
        MAGIC, struct.pack("<H", FORMAT_VERSION),
        _section(header),
        _section(np.ascontiguousarray(e.rgb, dtype=np.uint8).tobytes()),
        _section(e.depth.astype("<f4").tobytes()),
        _section(e.gt_flow.coords.astype("<f4").tobytes()),
        _section(traj.astype("<f4").tobytes()),
        _section(e.instruction.encode("utf-8")),
    ]
    if e.prompt is not None:
        p = e.prompt
        parts.append(_section(np.array([*p.start, *p.end, *p.bbox], dtype="<f4").tobytes()))
    return b"".join(parts)


def decode_episode(buf: bytes) -> Episode:
    if len(buf) < 6 or buf[:4] != MAGIC:
        raise CorruptPayload("bad magic bytes")
    (version,) = struct.unpack_from("<H", buf, 4)
    if version != FORMAT_VERSION:
        raise FormatVersionMismatch(f"record version {version}, reader supports {FORMAT_VERSION}")
    sections: list[bytes] = []
    pos = 6
    while pos < len(buf):
        if pos + 4 > len(buf):
            raise CorruptPayload("truncated section length")
        (length,) = struct.unpack_from("<I", buf, pos)
        pos += 4
        if pos + length > len(buf):
            raise CorruptPayload("section overruns record")
        sections.append(buf[pos:pos + length])
        pos += length
    names = ["header", "rgb", "depth", "flow", "trajectory", "instruction"]
    if len(sections) < len(names):
        raise MissingField(f"missing section '{names[len(sections)]}'")
    if len(sections) > len(names) + 1:
        raise CorruptPayload("unexpected trailing sections")
    try:
        header = sections[0]
        (id_len,) = struct.unpack_from("<H", header, 0)
        ident = header[2:2 + id_len].decode("utf-8")
        fx, fy, cx, cy = struct.unpack_from("<4d", header, 2 + id_len)
        width, height, T, n = struct.unpack_from("<4I", header, 2 + id_len + 32)
        if len(header) != 2 + id_len + 48:
            raise CorruptPayload("header length mismatch")
        cam = CameraModel(fx, fy, cx, cy, width, height)
        expected = {1: height * width * 3, 2: height * width * 4, 3: T * n * 2 * 4, 4: T * 7 * 4}
        for idx, size in expected.items():
            if len(sections[idx]) != size:
                raise CorruptPayload(f"section '{names[idx]}' has {len(sections[idx])} bytes, expected {size}")
        rgb = np.frombuffer(sections[1], dtype=np.uint8).reshape(height, width, 3).copy()
        depth = np.frombuffer(sections[2], dtype="<f4").reshape(height, width).astype(np.float64)
        flow = np.frombuffer(sections[3], dtype="<f4").reshape(T, n, 2).astype(np.float64)
        traj = np.frombuffer(sections[4], dtype="<f4").reshape(T, 7).astype(np.float64)
        instruction = sections[5].decode("utf-8")
        prompt = None
        if len(sections) == 7:
            if len(sections[6]) != 32:
                raise CorruptPayload("prompt section must hold 8 float32 values")
            v = np.frombuffer(sections[6], dtype="<f4").astype(np.float64)
            prompt = VisualPrompt((v[0], v[1]), (v[2], v[3]), (v[4], v[5], v[6], v[7]))
    except (struct.error, UnicodeDecodeError) as exc:
        raise CorruptPayload(str(exc)) from exc
    poses = [Pose6DoF.from_quaternion(row[:3], row[3:]) for row in traj]
    return Episode(ident, rgb, instruction, depth, cam, FlowSequence(flow), poses, prompt)


def save_episode(e: Episode, path) -> None:
    Path(path).write_bytes(encode_episode(e))


def load_episode(path) -> Episode:
    return decode_episode(Path(path).read_bytes())


# -- dataset directories ------------------------------------------------------
EPISODE_SUFFIX = ".lflw"


def write_split(root, split: str, episodes: list[Episode]) -> dict:
    """Write one split directory (records + manifest.json); returns the manifest."""
    d = Path(root) / split
    d.mkdir(parents=True, exist_ok=True)
    entries = []
    for e in episodes:
        save_episode(e, d / f"{e.id}{EPISODE_SUFFIX}")
        entries.append({"id": e.id, "instruction": e.instruction, "camera": e.camera.to_dict(),
                        "digest": e.digest(), **({"meta": e.meta} if e.meta else {})})
    manifest = {"split": split, "format_version": FORMAT_VERSION, "count": len(entries),
                "episodes": entries}
    (d / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return manifest


def load_split(root, split: str) -> list[Episode]:
    d = Path(root) / split
    manifest = json.loads((d / "manifest.json").read_text())
    episodes = []
    for entry in manifest["episodes"]:
        e = load_episode(d / f"{entry['id']}{EPISODE_SUFFIX}")
        e.meta = entry.get("meta", {})
        episodes.append(e)
    return episodes


def dataset_digest(root) -> str:
    """SHA-256 over every file under ``root`` in sorted relative-path order."""
    h = hashlib.sha256()
    root = Path(root)
    for path in sorted(p for p in root.rglob("*") if p.is_file()):
        h.update(str(path.relative_to(root)).encode())
        h.update(path.read_bytes())
    return h.hexdigest()
