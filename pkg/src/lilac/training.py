"""Adam training loops for the flow generator and the trajectory refiner."""

from __future__ import annotations

import json
import logging
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable

import numpy as np

from . import numerics as T
from .checkpoint import Checkpoint
from .datamodel import Episode
from .detokenizer import (
    RefinerConfig,
    TrajectoryRefiner,
    coarse_trajectory,
    make_refiner_batch,
)
from .flowdecoder import FlowBatch, FlowGenerator, FlowModelConfig
from .numerics.nn import Module
from .prompter import oracle_prompt, render_prompt
from .synthbench import build_vocab

log = logging.getLogger(__name__)


class NonFiniteLoss(ArithmeticError):
    def __init__(self, msg: str, last_good: str | None = None):
        super().__init__(msg)
        self.last_good = last_good


class AblationMismatch(ValueError):
    pass


@dataclass
class TrainConfig:
    seed: int = 0
    lr: float = 3e-4
    batch_size: int = 8
    max_steps: int = 5000
    lambda_sem: float = 1.0
    no_srl: bool = False
    no_vp: bool = False
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    grad_clip: float = 1.0
    checkpoint_every: int = 0
    prompt_noise: float = 0.0
    model: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.lr < 0:
            raise ValueError("lr must be >= 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.lambda_sem < 0:
            raise ValueError("lambda_sem must be >= 0")
        if self.max_steps < 0:
            raise ValueError("max_steps must be >= 0")

    @property
    def effective_lambda_sem(self) -> float:
        return 0.0 if self.no_srl else self.lambda_sem

    @property
    def ablations(self) -> dict[str, bool]:
        return {"no_srl": self.no_srl, "no_vp": self.no_vp}

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> TrainConfig:
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown training config keys: {sorted(unknown)}")
        return cls(**d)


class Adam:
    def __init__(self, params: list[T.Tensor], lr: float, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = params
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = [np.zeros(p.shape) for p in params]
        self.v = [np.zeros(p.shape) for p in params]
        self.t = 0

    def step(self) -> None:
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for p, m, v in zip(self.params, self.m, self.v):
            if p.grad is None:
                continue
            g = p.grad
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p.data -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def clip_gradients(params: list[T.Tensor], max_norm: float) -> tuple[float, bool]:
    """Scale gradients in place so their global L2 norm is at most ``max_norm``."""
    norm = float(np.sqrt(sum(float((p.grad ** 2).sum()) for p in params if p.grad is not None)))
    if max_norm > 0 and norm > max_norm:
        scale = max_norm / norm
        for p in params:
            if p.grad is not None:
                p.grad *= scale
        return norm, True
    return norm, False


@dataclass
class TrainLog:
    entries: list[dict] = field(default_factory=list)

    def append(self, **entry) -> None:
        self.entries.append(entry)

    def losses(self, key: str = "loss") -> list[float]:
        return [e[key] for e in self.entries]

    def write_jsonl(self, path) -> None:
        Path(path).write_text("".join(json.dumps(e, sort_keys=True) + "\n" for e in self.entries))


@dataclass
class TrainResult:
    model: Module
    log: TrainLog
    checkpoint: Checkpoint
    checkpoint_path: str | None = None


def _batch_order(n: int, batch_size: int, steps: int, seed: int) -> list[np.ndarray]:
    rng = np.random.default_rng(seed)
    out: list[np.ndarray] = []
    perm = rng.permutation(n)
    pos = 0
    for _ in range(steps):
        if pos + batch_size > n:
            perm = rng.permutation(n)
            pos = 0
        out.append(perm[pos:pos + min(batch_size, n)])
        pos += batch_size
    return out


# -- flow generator -----------------------------------------------------------------
def flow_model_config(cfg: TrainConfig, episodes: list[Episode]) -> FlowModelConfig:
    e = episodes[0]
    base = dict(cfg.model)
    base.update(image_size=(e.camera.height, e.camera.width), horizon=e.gt_flow.horizon,
                n_points=e.gt_flow.n_points, no_vp=cfg.no_vp, seed=cfg.seed)
    return FlowModelConfig(**base)


def flow_checkpoint(model: FlowGenerator, cfg: TrainConfig, step: int) -> Checkpoint:
    meta = {"kind": "flow", "step": step, "model": model.cfg.to_dict(), "train": cfg.to_dict(),
            "ablations": cfg.ablations, "vocab": model.adapter.text_encoder.vocab}
    return Checkpoint(meta, model.state_dict())


def load_flow_model(ckpt: Checkpoint | str | Path) -> FlowGenerator:
    if not isinstance(ckpt, Checkpoint):
        ckpt = Checkpoint.load(ckpt)
    if ckpt.meta.get("kind") != "flow":
        raise ValueError(f"expected a flow checkpoint, got kind={ckpt.meta.get('kind')!r}")
    model = FlowGenerator(FlowModelConfig.from_dict(ckpt.meta["model"]), ckpt.meta.get("vocab"))
    model.load_state_dict(ckpt.tensors)
    return model


def check_ablations(ckpt: Checkpoint, expected: dict[str, bool] | None, force: bool = False) -> None:
    """Refuse checkpoints whose recorded ablation flags differ from ``expected``."""
    if expected is None:
        return
    recorded = ckpt.meta.get("ablations", {})
    diff = {k: (recorded.get(k, False), v) for k, v in expected.items() if recorded.get(k, False) != v}
    if diff and not force:
        raise AblationMismatch(f"checkpoint ablation flags differ (recorded, requested): {diff}")


def prepare_flow_data(episodes: list[Episode], cfg: TrainConfig) -> FlowBatch:
    rng = np.random.default_rng([cfg.seed, 17])
    vp = []
    for e in episodes:
        if cfg.prompt_noise > 0:
            p = oracle_prompt(e, cfg.prompt_noise, rng)
        else:
            p = e.prompt or oracle_prompt(e)
        vp.append(render_prompt(e.rgb, p).pixels)
    return FlowBatch(np.stack([e.rgb for e in episodes]), np.stack(vp),
                     [e.instruction for e in episodes],
                     np.stack([e.gt_flow.coords for e in episodes]), [e.id for e in episodes])


def subset(data: FlowBatch, idx: np.ndarray) -> FlowBatch:
    return FlowBatch(data.rgb[idx], data.prompted[idx], [data.instructions[i] for i in idx],
                     data.coords[idx], [data.ids[i] for i in idx])


def train_flow(episodes: list[Episode], cfg: TrainConfig, out_dir=None,
               model: FlowGenerator | None = None,
               callback: Callable[[int, FlowGenerator], None] | None = None) -> TrainResult:
    """Optimise flow CE + lambda_sem * semantic alignment with teacher forcing.

    ``callback(step, model)`` runs after every optimizer step (e.g. for validation).
    """
    if not episodes:
        raise ValueError("no training episodes")
    model = model or FlowGenerator(flow_model_config(cfg, episodes))
    params = model.parameters()
    opt = Adam(params, cfg.lr, cfg.beta1, cfg.beta2, cfg.eps)
    data = prepare_flow_data(episodes, cfg)
    order = _batch_order(len(episodes), cfg.batch_size, cfg.max_steps, cfg.seed)
    lam = cfg.effective_lambda_sem
    out_dir = Path(out_dir) if out_dir else None
    train_log = TrainLog()
    last_good: str | None = None
    start = time.perf_counter()
    for step, idx in enumerate(order, start=1):
        batch = subset(data, idx)
        model.zero_grad()
        losses = model.losses(batch, lam)
        values = {k: v.item() for k, v in losses.items()}
        if not all(np.isfinite(list(values.values()))):
            if out_dir:
                last_good = str(out_dir / "flow_last_good.ckpt")
                flow_checkpoint(model, cfg, step - 1).save(last_good)
            raise NonFiniteLoss(f"non-finite loss at step {step}: {values}", last_good)
        losses["total"].backward()
        gnorm, clipped = clip_gradients(params, cfg.grad_clip)
        opt.step()
        entry = {"step": step, "loss": values["total"], "l_flow": values["flow"],
                 "grad_norm": gnorm, "clipped": clipped,
                 "wall_time": round(time.perf_counter() - start, 4)}
        if lam > 0:
            entry["l_sem"] = values["sem"]
        train_log.append(**entry)
        if cfg.checkpoint_every and out_dir and step % cfg.checkpoint_every == 0:
            flow_checkpoint(model, cfg, step).save(out_dir / f"flow_step{step:06d}.ckpt")
        if step % 100 == 0:
            log.info("flow step %d loss %.4f", step, values["total"])
        if callback is not None:
            callback(step, model)
    ckpt = flow_checkpoint(model, cfg, len(order))
    path = None
    if out_dir:
        out_dir.mkdir(parents=True, exist_ok=True)
        path = str(out_dir / "flow.ckpt")
        ckpt.save(path)
        train_log.write_jsonl(out_dir / "flow_train_log.jsonl")
    return TrainResult(model, train_log, ckpt, path)


# -- refiner ------------------------------------------------------------------------
def refiner_checkpoint(model: TrajectoryRefiner, cfg: TrainConfig, step: int,
                       flow_source: str) -> Checkpoint:
    meta = {"kind": "refiner", "step": step, "model": model.cfg.to_dict(), "train": cfg.to_dict(),
            "flow_source": flow_source, "vocab": model.text_encoder.vocab}
    return Checkpoint(meta, model.state_dict())


def load_refiner(ckpt: Checkpoint | str | Path) -> TrajectoryRefiner:
    if not isinstance(ckpt, Checkpoint):
        ckpt = Checkpoint.load(ckpt)
    if ckpt.meta.get("kind") != "refiner":
        raise ValueError(f"expected a refiner checkpoint, got kind={ckpt.meta.get('kind')!r}")
    model = TrajectoryRefiner(RefinerConfig.from_dict(ckpt.meta["model"]), ckpt.meta.get("vocab"))
    model.load_state_dict(ckpt.tensors)
    return model


def predicted_flows(model: FlowGenerator, episodes: list[Episode], batch_size: int = 16) -> list[np.ndarray]:
    out = []
    cfg = TrainConfig()
    for i in range(0, len(episodes), batch_size):
        batch = prepare_flow_data(episodes[i:i + batch_size], cfg)
        out.extend(model.generate(batch))
    return out


def prepare_refiner_data(episodes: list[Episode], flows: list[np.ndarray]):
    from .datamodel import FlowSequence

    coarse = [coarse_trajectory(FlowSequence(f), e.depth, e.camera) for e, f in zip(episodes, flows)]
    return make_refiner_batch(np.stack([e.rgb for e in episodes]), [e.instruction for e in episodes],
                              coarse, flows, [e.gt_trajectory for e in episodes])


def _refiner_subset(data, idx):
    from .detokenizer import RefinerBatch

    return RefinerBatch(data.rgb[idx], [data.instructions[i] for i in idx], data.coarse_vec[idx],
                        data.coarse_rot[idx], data.coarse_trans[idx], data.flow[idx],
                        None if data.target is None else data.target[idx])


def train_refiner(episodes: list[Episode], cfg: TrainConfig, flow_source: str = "gt",
                  flow_model: FlowGenerator | None = None, out_dir=None) -> TrainResult:
    """Fit the residual refiner with L1 on trajectory vectors."""
    if flow_source not in ("gt", "predicted"):
        raise ValueError(f"flow_source must be 'gt' or 'predicted', got {flow_source!r}")
    if flow_source == "predicted" and flow_model is None:
        raise ValueError("predicted flow source needs a trained flow model")
    flows = ([e.gt_flow.coords for e in episodes] if flow_source == "gt"
             else predicted_flows(flow_model, episodes))
    data = prepare_refiner_data(episodes, flows)
    e = episodes[0]
    mcfg = dict(cfg.model)
    mcfg.update(image_size=(e.camera.height, e.camera.width), horizon=e.gt_flow.horizon,
                n_points=e.gt_flow.n_points, seed=cfg.seed)
    model = TrajectoryRefiner(RefinerConfig(**mcfg), build_vocab())
    params = model.parameters()
    opt = Adam(params, cfg.lr, cfg.beta1, cfg.beta2, cfg.eps)
    order = _batch_order(len(episodes), cfg.batch_size, cfg.max_steps, cfg.seed)
    train_log = TrainLog()
    out_dir = Path(out_dir) if out_dir else None
    start = time.perf_counter()
    for step, idx in enumerate(order, start=1):
        model.zero_grad()
        loss = model.loss(_refiner_subset(data, idx))
        value = loss.item()
        if not np.isfinite(value):
            last_good = None
            if out_dir:
                last_good = str(out_dir / "refiner_last_good.ckpt")
                refiner_checkpoint(model, cfg, step - 1, flow_source).save(last_good)
            raise NonFiniteLoss(f"non-finite refiner loss at step {step}", last_good)
        loss.backward()
        gnorm, clipped = clip_gradients(params, cfg.grad_clip)
        opt.step()
        train_log.append(step=step, loss=value, l_traj=value, grad_norm=gnorm, clipped=clipped,
                         wall_time=round(time.perf_counter() - start, 4))
    ckpt = refiner_checkpoint(model, cfg, len(order), flow_source)
    path = None
    if out_dir:
        out_dir.mkdir(parents=True, exist_ok=True)
        path = str(out_dir / "refiner.ckpt")
        ckpt.save(path)
        train_log.write_jsonl(out_dir / "refiner_train_log.jsonl")
    return TrainResult(model, train_log, ckpt, path)


def refiner_loss_on(model: TrajectoryRefiner, episodes: list[Episode],
                    flows: list[np.ndarray] | None = None) -> float:
    flows = flows or [e.gt_flow.coords for e in episodes]
    with T.no_grad():
        return model.loss(prepare_refiner_data(episodes, flows)).item()


def with_trajectory_offset(episodes: list[Episode], translation=(0.03, -0.02, 0.01),
                           rotvec=(0.0, 0.0, 0.05)) -> list[Episode]:
    """Copies of ``episodes`` whose ground-truth poses carry a fixed extra transform.

    Emulates a systematic grasp offset that the flow alone cannot explain.
    """
    from dataclasses import replace

    from .datamodel import Pose6DoF
    from .rotations import exp_so3

    dt = np.asarray(translation, dtype=np.float64)
    dr = exp_so3(np.asarray(rotvec, dtype=np.float64))
    out = []
    for e in episodes:
        traj = [Pose6DoF(p.translation + dt, dr @ p.rotation) for p in e.gt_trajectory]
        out.append(replace(e, gt_trajectory=traj))
    return out
