"""Flow -> 6-DoF trajectory.

Stage 1 fits a rigid transform per step: Kabsch on back-projected points when
per-step depth exists, otherwise Gauss-Newton on reprojection error with only
the t=0 depth.  Stage 2 is a small transformer decoder that predicts a
residual on top of the coarse poses, conditioned on image and instruction.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np

from . import numerics as T
from . import rotations
from .adapter import PatchEncoder, TextEmbedding, TextEncoder
from .datamodel import CameraModel, Episode, FlowSequence, Pose6DoF
from .numerics import Tensor
from .numerics.nn import DecoderLayer, Linear, Module, glorot_uniform, key_padding_mask, parameter
from .synthbench import build_vocab


class NonPositiveDepth(ValueError):
    pass


class DegenerateGeometry(ValueError):
    pass


class LengthMismatch(ValueError):
    pass


GN_MAX_ITERS = 50
GN_DAMPING = 1e-6
GN_TOL = 1e-10
DEGENERATE_SV = 1e-9


# -- stage 1: geometry ----------------------------------------------------------
def backproject(u, v, depth, cam: CameraModel) -> np.ndarray:
    u, v, depth = (np.asarray(a, dtype=np.float64) for a in (u, v, depth))
    if np.any(depth <= 0):
        raise NonPositiveDepth("depth must be positive")
    return np.stack([(u - cam.cx) * depth / cam.fx, (v - cam.cy) * depth / cam.fy, depth], axis=-1)


def project(points: np.ndarray, cam: CameraModel) -> np.ndarray:
    return cam.project(points)


def kabsch(src: np.ndarray, dst: np.ndarray) -> Pose6DoF:
    """Least-squares rigid transform with ``dst ≈ R src + t``."""
    src = np.asarray(src, dtype=np.float64)
    dst = np.asarray(dst, dtype=np.float64)
    if src.shape != dst.shape or src.ndim != 2 or src.shape[1] != 3:
        raise T.ShapeMismatch(f"kabsch needs matching (n, 3) arrays, got {src.shape}, {dst.shape}")
    if len(src) < 3:
        raise DegenerateGeometry(f"need at least 3 points, got {len(src)}")
    mu_s, mu_d = src.mean(axis=0), dst.mean(axis=0)
    cov = (src - mu_s).T @ (dst - mu_d)
    u, s, vt = np.linalg.svd(cov)
    if s[1] < DEGENERATE_SV:
        raise DegenerateGeometry("points are (near) collinear; rotation is underdetermined")
    d = np.sign(np.linalg.det(vt.T @ u.T))
    r = vt.T @ np.diag([1.0, 1.0, d if d != 0 else 1.0]) @ u.T
    return Pose6DoF(mu_d - r @ mu_s, r)


def _check_spread(points: np.ndarray) -> None:
    if len(points) < 3:
        raise DegenerateGeometry(f"need at least 3 points, got {len(points)}")
    s = np.linalg.svd(points - points.mean(axis=0), compute_uv=False)
    if s[1] < DEGENERATE_SV:
        raise DegenerateGeometry("points are (near) collinear; rotation is underdetermined")


def reprojection_residual(pose: Pose6DoF, points3d: np.ndarray, uv: np.ndarray,
                          cam: CameraModel) -> float:
    """Mean pixel distance between projected transformed points and ``uv``."""
    return float(np.linalg.norm(cam.project(pose.apply(points3d)) - uv, axis=1).mean())


@dataclass
class PoseFit:
    pose: Pose6DoF
    residual: float
    converged: bool = True
    iterations: int = 0


def gauss_newton_pose(points3d: np.ndarray, uv: np.ndarray, cam: CameraModel,
                      init: Pose6DoF | None = None) -> PoseFit:
    """Minimise sum ||pi(R p + t) - uv||^2 over SE(3) with left-multiplied updates."""
    pose = init or Pose6DoF.identity()
    rot, trans = pose.rotation.copy(), pose.translation.copy()
    best = PoseFit(Pose6DoF(trans, rot), np.inf, False)

    def cost(r, t):
        x = points3d @ r.T + t
        return float(((cam.project(x) - uv) ** 2).sum())

    current = cost(rot, trans)
    for it in range(1, GN_MAX_ITERS + 1):
        rp = points3d @ rot.T
        x = rp + trans
        z = x[:, 2]
        res = (cam.project(x) - uv).reshape(-1)
        n = len(points3d)
        dpi = np.zeros((n, 2, 3))
        dpi[:, 0, 0] = cam.fx / z
        dpi[:, 0, 2] = -cam.fx * x[:, 0] / z**2
        dpi[:, 1, 1] = cam.fy / z
        dpi[:, 1, 2] = -cam.fy * x[:, 1] / z**2
        dx = np.zeros((n, 3, 6))
        for i in range(n):
            dx[i, :, :3] = -rotations.hat(rp[i])
        dx[:, :, 3:] = np.eye(3)
        jac = np.einsum("nij,njk->nik", dpi, dx).reshape(-1, 6)
        h = jac.T @ jac + GN_DAMPING * np.eye(6)
        step = -np.linalg.solve(h, jac.T @ res)
        rot = rotations.exp_so3(step[:3]) @ rot
        trans = trans + step[3:]
        new = cost(rot, trans)
        if new <= current or not np.isfinite(best.residual):
            best = PoseFit(Pose6DoF(trans.copy(), rot.copy()), new, False, it)
            current = new
        if np.linalg.norm(step) < GN_TOL:
            best.converged = True
            break
    best.residual = reprojection_residual(best.pose, points3d, uv, cam)
    return best


def fit_pose_2d3d(points3d_t0: np.ndarray, flow_t: np.ndarray, cam: CameraModel,
                  depth_mode: str = "t0-only", depth_t: np.ndarray | None = None,
                  init: Pose6DoF | None = None) -> PoseFit:
    """Rigid motion of the t=0 points that explains their pixel positions ``flow_t``.

    ``depth_mode='dense'`` needs per-point depths at step t (``depth_t``) and
    solves a 3D-3D Kabsch problem; ``'t0-only'`` runs Gauss-Newton on the
    reprojection error starting from ``init``.
    """
    points3d_t0 = np.asarray(points3d_t0, dtype=np.float64)
    flow_t = np.asarray(flow_t, dtype=np.float64)
    _check_spread(points3d_t0)
    if depth_mode == "dense":
        if depth_t is None:
            raise ValueError("dense mode needs per-point depth at step t")
        dst = backproject(flow_t[:, 0], flow_t[:, 1], depth_t, cam)
        pose = kabsch(points3d_t0, dst)
        return PoseFit(pose, reprojection_residual(pose, points3d_t0, flow_t, cam))
    if depth_mode != "t0-only":
        raise ValueError(f"unknown depth mode {depth_mode!r}")
    return gauss_newton_pose(points3d_t0, flow_t, cam, init)


@dataclass
class CoarseTrajectory:
    poses: list[Pose6DoF]
    residuals: list[float]
    converged: list[bool] = field(default_factory=list)


def lookup_depth(depth: np.ndarray, uv: np.ndarray) -> np.ndarray:
    px = np.clip(np.floor(uv).astype(int), 0, [depth.shape[1] - 1, depth.shape[0] - 1])
    return depth[px[:, 1], px[:, 0]]


def coarse_trajectory(flow: FlowSequence, depth: np.ndarray, cam: CameraModel,
                      depth_mode: str = "t0-only",
                      point_depths: np.ndarray | None = None) -> CoarseTrajectory:
    """Per-step rigid fits; pose 0 is the identity.

    ``point_depths`` (T, n) is required in dense mode.  Points without positive
    depth at t=0 are dropped; at least three must remain.
    """
    coords = flow.coords
    d0 = lookup_depth(np.asarray(depth), coords[0])
    keep = d0 > 0
    if keep.sum() < 3:
        raise DegenerateGeometry("fewer than 3 tracked points have valid depth")
    pts = backproject(coords[0, keep, 0], coords[0, keep, 1], d0[keep], cam)
    poses, residuals, converged = [Pose6DoF.identity()], [0.0], [True]
    for t in range(1, flow.horizon):
        fit = fit_pose_2d3d(pts, coords[t, keep], cam, depth_mode,
                            None if point_depths is None else np.asarray(point_depths)[t, keep],
                            init=poses[-1])
        poses.append(fit.pose)
        residuals.append(fit.residual)
        converged.append(fit.converged)
    return CoarseTrajectory(poses, residuals, converged)


def true_point_depths(e: Episode) -> np.ndarray:
    """(T, n) depth of every tracked point under the episode's ground-truth motion."""
    pts = backproject(e.gt_flow.coords[0, :, 0], e.gt_flow.coords[0, :, 1],
                      lookup_depth(e.depth, e.gt_flow.coords[0]), e.camera)
    return np.stack([pose.apply(pts)[:, 2] for pose in e.gt_trajectory])


# -- trajectory loss ----------------------------------------------------------------
def trajectory_vectors(poses: list[Pose6DoF]) -> np.ndarray:
    return np.stack([p.to_vector6() for p in poses])


def trajectory_loss(pred: list[Pose6DoF], gt: list[Pose6DoF], rot_weight: float = 1.0) -> float:
    """Mean L1 over translation (m) and axis-angle (rad) components."""
    if len(pred) != len(gt):
        raise LengthMismatch(f"trajectory lengths differ: {len(pred)} vs {len(gt)}")
    diff = np.abs(trajectory_vectors(pred) - trajectory_vectors(gt))
    diff[:, 3:] *= rot_weight
    return float(diff.mean())


def compose_rotation(delta: Tensor, base: np.ndarray) -> Tensor:
    """Rotation vectors of ``exp(delta) @ base``; ``delta`` (..., 3), ``base`` (..., 3, 3).

    Differentiable in ``delta``: d out = J_l(out)^-1 J_l(delta) d delta.
    """
    lead = delta.shape[:-1]
    dflat = delta.data.reshape(-1, 3)
    bflat = np.asarray(base).reshape(-1, 3, 3)
    out = np.empty_like(dflat)
    jac = np.empty((len(dflat), 3, 3))
    for i, (d, b) in enumerate(zip(dflat, bflat)):
        out[i] = rotations.log_so3(rotations.exp_so3(d) @ b)
        jac[i] = rotations.left_jacobian_inv(out[i]) @ rotations.left_jacobian(d)

    def backward(g):
        gflat = g.reshape(-1, 3)
        return (np.einsum("nij,ni->nj", jac, gflat).reshape(delta.shape),)

    return T.tensor._make(out.reshape(*lead, 3), (delta,), backward, "compose_rotation")


# -- stage 2: refinement ---------------------------------------------------------------
@dataclass
class RefinerConfig:
    image_size: tuple[int, int] = (128, 128)
    patch: int = 16
    horizon: int = 8
    n_points: int = 16
    d_model: int = 64
    d_txt: int = 32
    n_heads: int = 4
    n_layers: int = 2
    ffn_mult: int = 2
    rot_weight: float = 1.0
    seed: int = 0

    def to_dict(self) -> dict:
        d = asdict(self)
        d["image_size"] = list(self.image_size)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> RefinerConfig:
        d = dict(d)
        d["image_size"] = tuple(d["image_size"])
        return cls(**d)


def step_causal_mask(horizon: int) -> np.ndarray:
    """Mask over [trajectory tokens | flow tokens]: step t sees steps <= t of both."""
    steps = np.concatenate([np.arange(horizon), np.arange(horizon)])
    return steps[None, :] <= steps[:, None]


@dataclass
class RefinerBatch:
    rgb: np.ndarray  # (B, H, W, 3)
    instructions: list[str]
    coarse_vec: np.ndarray  # (B, T, 6)
    coarse_rot: np.ndarray  # (B, T, 3, 3)
    coarse_trans: np.ndarray  # (B, T, 3)
    flow: np.ndarray  # (B, T, n, 2)
    target: np.ndarray | None = None  # (B, T, 6)


def make_refiner_batch(rgb, instructions, coarse: list[CoarseTrajectory], flows: list[np.ndarray],
                       targets: list[list[Pose6DoF]] | None = None) -> RefinerBatch:
    vec = np.stack([trajectory_vectors(c.poses) for c in coarse])
    rot = np.stack([np.stack([p.rotation for p in c.poses]) for c in coarse])
    trans = np.stack([np.stack([p.translation for p in c.poses]) for c in coarse])
    tgt = None if targets is None else np.stack([trajectory_vectors(g) for g in targets])
    return RefinerBatch(np.asarray(rgb), list(instructions), vec, rot, trans, np.stack(flows), tgt)


class TrajectoryRefiner(Module):
    def __init__(self, cfg: RefinerConfig, vocab: dict[str, int] | None = None):
        rng = np.random.default_rng(cfg.seed)
        self.cfg = cfg
        d = cfg.d_model
        self.image_encoder = PatchEncoder(rng, cfg.image_size, cfg.patch, d)
        self.text_encoder = TextEncoder(rng, vocab or build_vocab(), cfg.d_txt)
        self.text_proj = Linear(rng, cfg.d_txt, d)
        self.pose_proj = Linear(rng, 6, d)
        self.flow_proj = Linear(rng, 2 * cfg.n_points, d)
        self.kind = parameter(glorot_uniform(rng, 2, d))
        self.step_pos = parameter(glorot_uniform(rng, cfg.horizon, d))
        self.layers = [DecoderLayer(rng, d, cfg.n_heads, cfg.ffn_mult) for _ in range(cfg.n_layers)]
        self.head = Linear(rng, d, 6)
        self.head.weight.data[:] = 0.0

    def memory(self, rgb: np.ndarray, instructions) -> tuple[Tensor, np.ndarray | None]:
        img = self.image_encoder(rgb)
        txt = self.text_encoder(instructions)
        mem = T.concat([img, self.text_proj(txt.tokens)], axis=1)
        valid = np.concatenate([np.ones(img.shape[:2], bool), txt.valid], axis=1)
        return mem, key_padding_mask(valid)

    def residuals(self, batch: RefinerBatch, img_tokens: Tensor | None = None,
                  txt: TextEmbedding | None = None) -> Tensor:
        """(B, T, 6) residuals: translation (m) then rotation vector (rad)."""
        cfg = self.cfg
        b, horizon = batch.coarse_vec.shape[:2]
        if img_tokens is None or txt is None:
            mem, mem_mask = self.memory(batch.rgb, batch.instructions)
        else:
            mem = T.concat([img_tokens, self.text_proj(txt.tokens)], axis=1)
            mem_mask = key_padding_mask(np.concatenate(
                [np.ones(img_tokens.shape[:2], bool), txt.valid], axis=1))
        norm = batch.flow / np.array([cfg.image_size[1], cfg.image_size[0]])
        traj_tok = self.pose_proj(Tensor(batch.coarse_vec)) + self.kind[0] + self.step_pos[:horizon]
        flow_tok = self.flow_proj(Tensor(norm.reshape(b, horizon, -1))) + self.kind[1] \
            + self.step_pos[:horizon]
        x = T.concat([traj_tok, flow_tok], axis=1)
        mask = step_causal_mask(horizon)
        for layer in self.layers:
            x = layer(x, mem, causal=False, mask=mask, memory_mask=mem_mask)
        return self.head(x[:, :horizon])

    def refined_vectors(self, batch: RefinerBatch) -> Tensor:
        res = self.residuals(batch)
        trans = T.add(res[..., :3], batch.coarse_trans)
        rotvec = compose_rotation(res[..., 3:], batch.coarse_rot)
        return T.concat([trans, rotvec], axis=-1)

    def loss(self, batch: RefinerBatch) -> Tensor:
        pred = self.refined_vectors(batch)
        diff = T.abs_(T.sub(pred, batch.target))
        if self.cfg.rot_weight != 1.0:
            weights = np.array([1.0, 1.0, 1.0] + [self.cfg.rot_weight] * 3)
            diff = diff * weights
        return T.mean(diff)

    def refine_batch(self, batch: RefinerBatch) -> list[list[Pose6DoF]]:
        with T.no_grad():
            res = self.residuals(batch).data
        out = []
        for i in range(len(res)):
            out.append([Pose6DoF(batch.coarse_trans[i, t] + res[i, t, :3],
                                 rotations.exp_so3(res[i, t, 3:]) @ batch.coarse_rot[i, t])
                        for t in range(res.shape[1])])
        return out


def refine(coarse: CoarseTrajectory, flow: FlowSequence, rgb: np.ndarray, instruction: str,
           model: TrajectoryRefiner) -> list[Pose6DoF]:
    batch = make_refiner_batch(np.asarray(rgb)[None], [instruction], [coarse], [flow.coords])
    return model.refine_batch(batch)[0]


def export_trajectory(poses: list[Pose6DoF]) -> str:
    return json.dumps([p.to_json(t) for t, p in enumerate(poses)], indent=2)
