"""Visual prompts: an arrow plus a target box, from pluggable sources.

Sources:

* ``oracle``   -- derived from the ground-truth flow (optionally noised)
* ``recorded`` -- looked up by episode id in a JSON-lines store
* ``remote``   -- an HTTP endpoint speaking a small JSON contract::

      POST {"image_b64": <base64 PNG>, "instruction": str}
      ->   {"start": [u, v], "end": [u, v], "bbox": [x0, y0, x1, y1]}
"""

from __future__ import annotations

import base64
import io
import json
import socket
import urllib.error
import urllib.request
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .datamodel import Episode, VisualPrompt

ARROW_COLOR = (255, 0, 0)
HEAD_LENGTH = 4.0
HEAD_ANGLE = np.deg2rad(30.0)


class PrompterError(RuntimeError):
    kind = "prompter"


class PromptMissing(PrompterError):
    pass


class PromptStoreError(PrompterError):
    pass


class PromptTimeout(PrompterError):
    pass


class MalformedReply(PrompterError):
    pass


class NoPromptGenerated(PrompterError):
    pass


class InvalidPrompt(MalformedReply):
    pass


@dataclass
class PrompterSource:
    kind: str = "oracle"  # oracle | recorded | remote
    noise_sigma: float = 0.0
    path: str | None = None
    endpoint: str | None = None
    timeout: float = 10.0
    seed: int = 0

    def __post_init__(self):
        if self.kind not in ("oracle", "recorded", "remote"):
            raise ValueError(f"unknown prompter kind {self.kind!r}")
        if self.kind == "recorded" and not self.path:
            raise ValueError("recorded prompter needs a store path")
        if self.kind == "remote" and not self.endpoint:
            raise ValueError("remote prompter needs an endpoint URL")


def _clamp_point(p, width: int, height: int) -> tuple[float, float]:
    return (float(np.clip(p[0], 0.0, width - 1)), float(np.clip(p[1], 0.0, height - 1)))


def oracle_prompt(e: Episode, noise_sigma: float = 0.0,
                  rng: np.random.Generator | None = None) -> VisualPrompt:
    """Arrow between the t=0 and final centroids of the tracked points."""
    cam = e.camera
    coords = e.gt_flow.coords
    start = coords[0].mean(axis=0)
    end = coords[-1].mean(axis=0)
    if noise_sigma > 0:
        rng = rng or np.random.default_rng(0)
        start = start + rng.normal(0.0, noise_sigma, 2)
        end = end + rng.normal(0.0, noise_sigma, 2)
    x0, y0 = np.floor(coords[0].min(axis=0))
    x1, y1 = np.floor(coords[0].max(axis=0)) + 1
    bbox = (float(max(x0, 0)), float(max(y0, 0)), float(min(x1, cam.width)), float(min(y1, cam.height)))
    return VisualPrompt(_clamp_point(start, cam.width, cam.height),
                        _clamp_point(end, cam.width, cam.height), bbox)


def _prompt_from_obj(obj, width: int, height: int, clamp: bool) -> VisualPrompt:
    try:
        start = [float(v) for v in obj["start"]]
        end = [float(v) for v in obj["end"]]
        bbox = [float(v) for v in obj["bbox"]]
    except (KeyError, TypeError, ValueError) as exc:
        raise MalformedReply(f"missing or non-numeric prompt field: {exc}") from exc
    if len(start) != 2 or len(end) != 2 or len(bbox) != 4:
        raise MalformedReply("start/end need 2 values and bbox needs 4")
    if not np.isfinite(start + end + bbox).all():
        raise MalformedReply("non-finite prompt values")
    if clamp:
        start = _clamp_point(start, width, height)
        end = _clamp_point(end, width, height)
        bbox = [min(max(bbox[0], 0.0), width), min(max(bbox[1], 0.0), height),
                min(max(bbox[2], 0.0), width), min(max(bbox[3], 0.0), height)]
    prompt = VisualPrompt(tuple(start), tuple(end), tuple(bbox))
    problems = prompt.violations(width, height)
    if problems:
        raise InvalidPrompt("; ".join(problems))
    return prompt


class PromptStore:
    """Recorded prompts keyed by episode id, validated at load time."""

    def __init__(self, prompts: dict[str, VisualPrompt]):
        self.prompts = prompts

    @classmethod
    def load(cls, path, width: int = 128, height: int = 128) -> PromptStore:
        prompts = {}
        for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
                prompts[str(obj["id"])] = _prompt_from_obj(obj, width, height, clamp=False)
            except (json.JSONDecodeError, KeyError, TypeError, MalformedReply) as exc:
                raise PromptStoreError(f"{path}:{lineno}: invalid prompt record ({exc})") from exc
        return cls(prompts)

    def save(self, path) -> None:
        lines = [json.dumps({"id": k, **v.to_json()}) for k, v in sorted(self.prompts.items())]
        Path(path).write_text("\n".join(lines) + "\n")

    def __contains__(self, key: str) -> bool:
        return key in self.prompts


def recorded_prompt(e: Episode, store: PromptStore) -> VisualPrompt:
    try:
        return store.prompts[e.id]
    except KeyError:
        raise PromptMissing(f"no recorded prompt for episode {e.id!r}") from None


def encode_png(rgb: np.ndarray) -> bytes:
    from PIL import Image

    buf = io.BytesIO()
    Image.fromarray(np.asarray(rgb, dtype=np.uint8), "RGB").save(buf, format="PNG")
    return buf.getvalue()


def remote_prompt(e: Episode, endpoint: str, timeout: float = 10.0) -> VisualPrompt:
    """Ask a remote service for a prompt; reply values are clamped to the image."""
    body = json.dumps({"image_b64": base64.b64encode(encode_png(e.rgb)).decode("ascii"),
                       "instruction": e.instruction}).encode("utf-8")
    req = urllib.request.Request(endpoint, data=body, headers={"Content-Type": "application/json"},
                                 method="POST")
    try:
        with urllib.request.urlopen(req, timeout=timeout) as resp:
            raw = resp.read()
    except (socket.timeout, TimeoutError) as exc:
        raise PromptTimeout(f"remote prompter timed out after {timeout}s: {endpoint}") from exc
    except urllib.error.HTTPError as exc:
        raise MalformedReply(f"remote prompter returned HTTP {exc.code}") from exc
    except urllib.error.URLError as exc:
        raise PromptTimeout(f"remote prompter unreachable at {endpoint}: {exc.reason}") from exc
    try:
        obj = json.loads(raw.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise MalformedReply(f"reply is not JSON: {raw[:80]!r}") from exc
    if not isinstance(obj, dict):
        raise MalformedReply("reply must be a JSON object")
    if not any(k in obj for k in ("start", "end", "bbox")):
        raise NoPromptGenerated("remote prompter returned no prompt")
    return _prompt_from_obj(obj, e.camera.width, e.camera.height, clamp=True)


def get_prompt(e: Episode, source: PrompterSource, store: PromptStore | None = None,
               rng: np.random.Generator | None = None) -> VisualPrompt:
    if source.kind == "oracle":
        return oracle_prompt(e, source.noise_sigma, rng)
    if source.kind == "recorded":
        store = store or PromptStore.load(source.path, e.camera.width, e.camera.height)
        return recorded_prompt(e, store)
    return remote_prompt(e, source.endpoint, source.timeout)


# -- rasterisation ------------------------------------------------------------
def _round_px(v: float) -> int:
    return int(np.floor(v + 0.5))


def bresenham(x0: int, y0: int, x1: int, y1: int) -> list[tuple[int, int]]:
    dx, dy = abs(x1 - x0), -abs(y1 - y0)
    sx = 1 if x0 < x1 else -1
    sy = 1 if y0 < y1 else -1
    err = dx + dy
    out = []
    while True:
        out.append((x0, y0))
        if x0 == x1 and y0 == y1:
            return out
        e2 = 2 * err
        if e2 >= dy:
            err += dy
            x0 += sx
        if e2 <= dx:
            err += dx
            y0 += sy


def arrow_segments(start, end) -> list[tuple[int, int, int, int]]:
    """Integer segments making up the arrow: shaft then the two head strokes."""
    sx, sy = _round_px(start[0]), _round_px(start[1])
    ex, ey = _round_px(end[0]), _round_px(end[1])
    segs = [(sx, sy, ex, ey)]
    if (sx, sy) == (ex, ey):
        return segs
    back = np.arctan2(sy - ey, sx - ex)
    for sign in (-1.0, 1.0):
        a = back + sign * HEAD_ANGLE
        hx = _round_px(ex + HEAD_LENGTH * np.cos(a))
        hy = _round_px(ey + HEAD_LENGTH * np.sin(a))
        segs.append((ex, ey, hx, hy))
    return segs


def arrow_pixels(start, end, width: int, height: int) -> set[tuple[int, int]]:
    pix = set()
    for seg in arrow_segments(start, end):
        pix.update((x, y) for x, y in bresenham(*seg) if 0 <= x < width and 0 <= y < height)
    return pix


@dataclass
class PromptedImage:
    pixels: np.ndarray
    prompt: VisualPrompt


def render_prompt(rgb: np.ndarray, p: VisualPrompt) -> PromptedImage:
    """Copy of ``rgb`` with the prompt arrow drawn 1 px wide in red."""
    out = np.array(rgb, dtype=np.uint8, copy=True)
    h, w = out.shape[:2]
    for x, y in arrow_pixels(p.start, p.end, w, h):
        out[y, x] = ARROW_COLOR
    return PromptedImage(out, p)
