"""Flow metrics (ADE, P@K, AUC), baselines, and deterministic evaluation reports."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from .datamodel import Episode, FlowSequence

AUC_DEFINITION = "trapezoidal area under K -> P@K/100 for integer K in [0, auc_max_radius], divided by auc_max_radius"


class MetricUndefined(ValueError):
    pass


@dataclass(frozen=True)
class EvalConfig:
    precision_radii: tuple[float, ...] = (5.0, 10.0, 20.0)
    displacement_threshold: float = 2.0
    auc_max_radius: int = 30

    def __post_init__(self):
        radii = tuple(float(r) for r in self.precision_radii)
        object.__setattr__(self, "precision_radii", radii)
        if not radii or any(r <= 0 for r in radii) or list(radii) != sorted(set(radii)):
            raise ValueError(f"precision radii must be positive and strictly ascending, got {radii}")
        if self.displacement_threshold < 0:
            raise ValueError("displacement threshold must be >= 0")
        if int(self.auc_max_radius) != self.auc_max_radius or self.auc_max_radius < 1:
            raise ValueError("auc_max_radius must be a positive integer")
        object.__setattr__(self, "auc_max_radius", int(self.auc_max_radius))

    def to_dict(self) -> dict:
        return {"precision_radii": list(self.precision_radii),
                "displacement_threshold": self.displacement_threshold,
                "auc_max_radius": self.auc_max_radius, "auc_definition": AUC_DEFINITION}

    @classmethod
    def from_dict(cls, d: dict) -> EvalConfig:
        d = {k: v for k, v in d.items() if k != "auc_definition"}
        return cls(**d)


def _coords(flow) -> np.ndarray:
    return flow.coords if isinstance(flow, FlowSequence) else np.asarray(flow, dtype=np.float64)


def filter_points(gt, threshold: float) -> np.ndarray:
    """(T-1, n) mask: ground-truth step displacement strictly above ``threshold``."""
    c = _coords(gt)
    step = c[1:] - c[:-1]
    return np.sqrt(step[..., 0] * step[..., 0] + step[..., 1] * step[..., 1]) > threshold


def point_distances(pred, gt) -> np.ndarray:
    """(T-1, n) Euclidean distances for steps 1..T-1."""
    p, g = _coords(pred), _coords(gt)
    if p.shape != g.shape:
        raise ValueError(f"prediction shape {p.shape} != ground truth {g.shape}")
    d = p[1:] - g[1:]
    return np.sqrt(d[..., 0] * d[..., 0] + d[..., 1] * d[..., 1])


def _masked(pred, gt, mask) -> np.ndarray:
    dist = point_distances(pred, gt)[np.asarray(mask, dtype=bool)]
    if dist.size == 0:
        raise MetricUndefined("no points survive the displacement filter")
    return dist


def ade_from_distances(dist: np.ndarray) -> float:
    if len(dist) == 0:
        raise MetricUndefined("no points to average")
    return math.fsum(dist.tolist()) / len(dist)


def precision_from_distances(dist: np.ndarray, k: float) -> float:
    if len(dist) == 0:
        raise MetricUndefined("no points to score")
    return 100.0 * int(np.count_nonzero(dist <= k)) / len(dist)


def auc_from_distances(dist: np.ndarray, max_radius: int = 30) -> float:
    if len(dist) == 0:
        raise MetricUndefined("no points to score")
    n = len(dist)
    frac = [int(np.count_nonzero(dist <= k)) / n for k in range(max_radius + 1)]
    area = 0.0
    for k in range(max_radius):
        area += (frac[k] + frac[k + 1]) / 2.0
    return area / max_radius


def ade(pred, gt, mask) -> float:
    return ade_from_distances(_masked(pred, gt, mask))


def precision_at_k(pred, gt, mask, k: float) -> float:
    return precision_from_distances(_masked(pred, gt, mask), k)


def auc(pred, gt, mask, max_radius: int = 30) -> float:
    return auc_from_distances(_masked(pred, gt, mask), max_radius)


# -- baselines ----------------------------------------------------------------------
def baseline_static(e: Episode) -> FlowSequence:
    c = e.gt_flow.coords
    return FlowSequence(np.repeat(c[:1], len(c), axis=0))


def baseline_linear(e: Episode, prompt=None) -> FlowSequence:
    """Move every t=0 point along the prompt arrow at constant speed."""
    from .prompter import oracle_prompt

    p = prompt or e.prompt or oracle_prompt(e)
    c0 = e.gt_flow.coords[0]
    horizon = e.gt_flow.horizon
    step = (np.asarray(p.end, dtype=np.float64) - np.asarray(p.start, dtype=np.float64)) / (horizon - 1)
    coords = c0[None] + np.arange(horizon)[:, None, None] * step
    coords[..., 0] = np.clip(coords[..., 0], 0, e.camera.width - 1)
    coords[..., 1] = np.clip(coords[..., 1], 0, e.camera.height - 1)
    coords[0] = c0
    return FlowSequence(coords)


Predictor = Callable[[list[Episode]], list[np.ndarray]]


def oracle_predictor(episodes: list[Episode]) -> list[np.ndarray]:
    return [e.gt_flow.coords for e in episodes]


def static_predictor(episodes: list[Episode]) -> list[np.ndarray]:
    return [baseline_static(e).coords for e in episodes]


def linear_predictor(episodes: list[Episode]) -> list[np.ndarray]:
    return [baseline_linear(e).coords for e in episodes]


def model_predictor(model, batch_size: int = 16, prompts: dict | None = None) -> Predictor:
    """Greedy decoding with each episode's stored prompt (or ``prompts[id]``)."""
    from .flowdecoder import make_batch

    def predict(episodes: list[Episode]) -> list[np.ndarray]:
        out: list[np.ndarray] = []
        for i in range(0, len(episodes), batch_size):
            chunk = episodes[i:i + batch_size]
            ps = None if prompts is None else [prompts[e.id] for e in chunk]
            out.extend(model.generate(make_batch(chunk, ps)))
        return out

    return predict


# -- reports ------------------------------------------------------------------------
@dataclass
class EvalReport:
    name: str
    config: EvalConfig
    ade: float
    auc: float
    p_at_k: dict[str, float]
    evaluated_points: int
    filtered_points: int
    per_episode: list[dict]
    checkpoint_digest: str | None = None
    ablations: dict[str, bool] = field(default_factory=dict)
    trajectory: dict | None = None

    def to_dict(self) -> dict:
        d = {"name": self.name, "config": self.config.to_dict(),
             "checkpoint_digest": self.checkpoint_digest, "ablations": dict(self.ablations),
             "aggregate": {"ade": self.ade, "auc": self.auc, "p_at_k": dict(self.p_at_k)},
             "counts": {"evaluated_points": self.evaluated_points,
                        "filtered_points": self.filtered_points,
                        "episodes": len(self.per_episode)},
             "per_episode": self.per_episode}
        if self.trajectory is not None:
            d["trajectory"] = self.trajectory
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2) + "\n"

    def write(self, path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.to_json())
        path.with_suffix(".txt").write_text(format_table([self]))


def _k_label(k: float) -> str:
    return f"{k:g}"


def evaluate(predictor: Predictor, episodes: list[Episode], cfg: EvalConfig | None = None,
             name: str = "model", checkpoint_digest: str | None = None,
             ablations: dict[str, bool] | None = None) -> EvalReport:
    """Pool all masked-in points across episodes; per-episode values kept for reference."""
    cfg = cfg or EvalConfig()
    episodes = sorted(episodes, key=lambda e: e.id)
    preds = predictor(episodes)
    if len(preds) != len(episodes):
        raise ValueError("predictor returned the wrong number of flows")
    pooled: list[np.ndarray] = []
    per_episode = []
    filtered = 0
    for e, pred in zip(episodes, preds):
        mask = filter_points(e.gt_flow, cfg.displacement_threshold)
        dist = point_distances(pred, e.gt_flow)[mask]
        filtered += int(mask.size - mask.sum())
        pooled.append(dist)
        row = {"id": e.id, "points": int(dist.size)}
        if dist.size:
            row["ade"] = ade_from_distances(dist)
            row["p_at_k"] = {_k_label(k): precision_from_distances(dist, k) for k in cfg.precision_radii}
        else:
            row["ade"] = None
            row["p_at_k"] = None
        per_episode.append(row)
    alld = np.concatenate(pooled) if pooled else np.zeros(0)
    if alld.size == 0:
        raise MetricUndefined("no points survive the displacement filter in any episode")
    return EvalReport(
        name=name, config=cfg, ade=ade_from_distances(alld),
        auc=auc_from_distances(alld, cfg.auc_max_radius),
        p_at_k={_k_label(k): precision_from_distances(alld, k) for k in cfg.precision_radii},
        evaluated_points=int(alld.size), filtered_points=filtered, per_episode=per_episode,
        checkpoint_digest=checkpoint_digest, ablations=dict(ablations or {}))


def trajectory_metrics(pred: list[list], gt: list[list]) -> dict:
    """Mean L1 (m and rad, equal weight), mean translation error (m), mean rotation error (rad)."""
    from .detokenizer import trajectory_loss
    from .rotations import log_so3

    l1, terr, rerr = [], [], []
    for p, g in zip(pred, gt):
        l1.append(trajectory_loss(p, g))
        for a, b in zip(p, g):
            terr.append(float(np.linalg.norm(a.translation - b.translation)))
            rerr.append(float(np.linalg.norm(log_so3(a.rotation.T @ b.rotation))))
    return {"l1": math.fsum(l1) / len(l1), "translation_error_m": math.fsum(terr) / len(terr),
            "rotation_error_rad": math.fsum(rerr) / len(rerr)}


def format_table(reports: list[EvalReport]) -> str:
    """Aligned text table, one row per method."""
    if not reports:
        return ""
    ks = list(reports[0].p_at_k)
    header = ["Method", "ADE", "AUC"] + [f"P@{k}" for k in ks]
    rows = [[r.name, f"{r.ade:.2f}", f"{r.auc:.3f}"] + [f"{r.p_at_k[k]:.1f}" for k in ks]
            for r in reports]
    widths = [max(len(row[i]) for row in [header] + rows) for i in range(len(header))]
    fmt = lambda row: "  ".join(c.ljust(w) if i == 0 else c.rjust(w)  # noqa: E731
                                for i, (c, w) in enumerate(zip(row, widths)))
    cfg = reports[0].config
    lines = [fmt(header), fmt(["-" * w for w in widths])] + [fmt(r) for r in rows]
    lines.append(f"delta_t={cfg.displacement_threshold:g}px  AUC: {AUC_DEFINITION} "
                 f"(auc_max_radius={cfg.auc_max_radius})")
    return "\n".join(lines) + "\n"
