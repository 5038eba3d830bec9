"""Gradient-check suite over tiny configurations of every learned component."""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from . import numerics as T
from .numerics import gradient_check
from .numerics.nn import parameter

TOLERANCE = 1e-4


@dataclass
class CheckResult:
    module: str
    case: str
    error: float
    seconds: float

    @property
    def ok(self) -> bool:
        return self.error <= TOLERANCE


def _numerics_cases(rng):
    a = parameter(rng.normal(size=(5, 4)))
    b = parameter(rng.normal(size=(4, 3)))
    w = rng.normal(size=(5, 3))
    yield "matmul", lambda: T.sum_(T.matmul(a, b) * w), [a, b]

    logits = parameter(rng.normal(size=(3, 10)))
    target = rng.integers(0, 10, size=3)
    yield "softmax_cross_entropy", lambda: T.softmax_cross_entropy(logits, target), [logits]

    q = parameter(rng.normal(size=(1, 3, 4)))
    k = parameter(rng.normal(size=(1, 3, 4)))
    v = parameter(rng.normal(size=(1, 3, 4)))
    wa = rng.normal(size=(1, 3, 4))
    yield "attention", lambda: T.sum_(T.attention(q, k, v, causal=True) * wa), [q, k, v]

    x = parameter(rng.normal(size=(2, 6)))
    g = parameter(rng.normal(size=6))
    beta = parameter(rng.normal(size=6))
    wl = rng.normal(size=(2, 6))
    yield "layer_norm", lambda: T.sum_(T.layer_norm(x, g, beta) * wl), [x, g, beta]

    p = parameter(rng.normal(size=(3, 4)))
    tgt = np.tanh(p.data) + rng.choice([-1.0, 1.0], size=(3, 4)) * rng.uniform(0.1, 1.0, size=(3, 4))
    yield "l1_loss+tanh+relu", lambda: T.l1_loss(T.tanh(p), tgt) + T.sum_(T.relu(p)) * 0.1, [p]


def _tiny_flow_model(no_vp: bool = False):
    from .flowdecoder import FlowGenerator, FlowModelConfig

    cfg = FlowModelConfig(image_size=(16, 16), patch=8, horizon=3, n_points=2, d_model=16, d_txt=8,
                          n_heads=2, enc_layers=1, dec_layers=1, no_vp=no_vp, seed=3)
    return FlowGenerator(cfg)


def _tiny_flow_batch(rng):
    from .flowdecoder import FlowBatch

    rgb = rng.integers(0, 256, size=(2, 16, 16, 3), dtype=np.uint8)
    vp = rgb.copy()
    vp[:, 5, 3:12] = (255, 0, 0)
    coords = rng.uniform(0, 15.4, size=(2, 3, 2, 2))
    return FlowBatch(rgb, vp, ["move the red block left", "lift the blue cup"], coords)


def _adapter_cases(rng):
    model = _tiny_flow_model()
    batch = _tiny_flow_batch(rng)
    w = rng.normal(size=(2, 4 + 5 + 4, 16))

    def f():
        out, _ = model.adapter(batch.rgb, batch.instructions, batch.prompted)
        tokens = out.tokens
        return T.sum_(tokens[:, : w.shape[1]] * w[:, : tokens.shape[1]])

    yield "fuse", f, model.adapter.parameters()


def _flowdecoder_cases(rng):
    model = _tiny_flow_model()
    batch = _tiny_flow_batch(rng)
    yield "total_flow_loss", lambda: model.losses(batch, 1.0)["total"], model.parameters()


def _refiner_cases(rng):
    from .datamodel import Pose6DoF
    from .detokenizer import RefinerBatch, RefinerConfig, TrajectoryRefiner, trajectory_vectors
    from .rotations import random_rotation

    cfg = RefinerConfig(image_size=(16, 16), patch=8, horizon=3, n_points=2, d_model=16, d_txt=8,
                        n_heads=2, n_layers=1, seed=5)
    model = TrajectoryRefiner(cfg)
    # Give the zero-initialised head some weight so the check covers the whole graph.
    model.head.weight.data[:] = rng.normal(scale=0.1, size=model.head.weight.shape)
    poses = [[Pose6DoF(rng.normal(scale=0.1, size=3), random_rotation(rng)) for _ in range(3)]
             for _ in range(2)]
    target = [[Pose6DoF(rng.normal(scale=0.1, size=3), random_rotation(rng)) for _ in range(3)]
              for _ in range(2)]
    batch = RefinerBatch(
        rng.integers(0, 256, size=(2, 16, 16, 3), dtype=np.uint8),
        ["move the red block left", "rotate the green cup clockwise"],
        np.stack([trajectory_vectors(p) for p in poses]),
        np.stack([np.stack([q.rotation for q in p]) for p in poses]),
        np.stack([np.stack([q.translation for q in p]) for p in poses]),
        rng.uniform(0, 15, size=(2, 3, 2, 2)),
        np.stack([trajectory_vectors(p) for p in target]))
    yield "trajectory_l1", lambda: model.loss(batch), model.parameters()


SUITE = [("numerics", _numerics_cases), ("adapter", _adapter_cases),
         ("flowdecoder", _flowdecoder_cases), ("detokenizer", _refiner_cases)]


def run_suite(seed: int = 0, max_entries: int | None = 12) -> list[CheckResult]:
    """Run every case; ``max_entries`` caps finite-difference probes per tensor."""
    results = []
    for module, cases in SUITE:
        rng = np.random.default_rng(seed)
        for case, f, params in cases(rng):
            start = time.perf_counter()
            err = gradient_check(f, params, max_entries=max_entries, seed=seed)
            results.append(CheckResult(module, case, err, time.perf_counter() - start))
    return results
