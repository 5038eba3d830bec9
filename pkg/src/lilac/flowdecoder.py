"""Autoregressive flow decoder with per-axis pixel-bin classification heads.

Position ``t`` of the decoder input carries the tracking points at step ``t``;
its output predicts step ``t + 1``.  A learned CLS query sits after the last
step token and is projected into the instruction-embedding space for the
semantic alignment loss.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from . import numerics as T
from .adapter import AdapterConfig, AdapterOutput, MultiModalAdapter, TextEmbedding, TextEncoder
from .datamodel import Episode, FlowSequence, VisualPrompt
from .numerics import Tensor
from .numerics.nn import DecoderLayer, Linear, Module, freeze, glorot_uniform, parameter
from .prompter import oracle_prompt, render_prompt


class OutOfBounds(ValueError):
    pass


def to_bins(coords: np.ndarray, width: int, height: int) -> tuple[np.ndarray, np.ndarray]:
    """Round half-up to integer pixel bins, clamped to the image."""
    bx = np.clip(np.floor(coords[..., 0] + 0.5), 0, width - 1).astype(np.int64)
    by = np.clip(np.floor(coords[..., 1] + 0.5), 0, height - 1).astype(np.int64)
    return bx, by


@dataclass
class FlowLogits:
    x: Tensor  # (B, T-1, n, width)
    y: Tensor  # (B, T-1, n, height)


@dataclass
class DecoderConfig:
    width: int = 128
    height: int = 128
    horizon: int = 8
    n_points: int = 16
    d_model: int = 128
    d_txt: int = 64
    n_heads: int = 4
    n_layers: int = 2
    ffn_mult: int = 2
    relative_bins: bool = True


class FlowDecoder(Module):
    def __init__(self, rng, cfg: DecoderConfig):
        self.cfg = cfg
        self.step_proj = Linear(rng, 2 * cfg.n_points, cfg.d_model)
        self.time_pos = parameter(glorot_uniform(rng, cfg.horizon + 1, cfg.d_model))
        self.cls = parameter(glorot_uniform(rng, 1, cfg.d_model))
        self.layers = [DecoderLayer(rng, cfg.d_model, cfg.n_heads, cfg.ffn_mult)
                       for _ in range(cfg.n_layers)]
        # relative heads score every signed offset from the current bin
        span_x, span_y = (2 * cfg.width - 1, 2 * cfg.height - 1) if cfg.relative_bins \
            else (cfg.width, cfg.height)
        self.head_x = Linear(rng, cfg.d_model, cfg.n_points * span_x)
        self.head_y = Linear(rng, cfg.d_model, cfg.n_points * span_y)
        self.sem_proj = Linear(rng, cfg.d_model, cfg.d_txt)

    def embed_steps(self, coords: np.ndarray) -> Tensor:
        """(B, S, n, 2) pixel coords -> (B, S, d_model) step tokens for positions 0..S-1."""
        cfg = self.cfg
        coords = np.asarray(coords, dtype=np.float64)
        if coords.ndim == 2:
            coords = coords[None, None]
        if coords.shape[-2:] != (cfg.n_points, 2):
            raise T.ShapeMismatch(f"step coords {coords.shape} vs n_points={cfg.n_points}")
        inside = ((coords[..., 0] >= 0) & (coords[..., 0] < cfg.width)
                  & (coords[..., 1] >= 0) & (coords[..., 1] < cfg.height))
        if not inside.all():
            raise OutOfBounds("tracking point outside the image")
        b, s = coords.shape[:2]
        norm = coords / np.array([cfg.width, cfg.height])
        return self.step_proj(Tensor(norm.reshape(b, s, -1))) + self.time_pos[:s]

    def embed_step(self, points: np.ndarray, t: int = 0) -> Tensor:
        """One step's points (n, 2) -> d_model vector with time position ``t``."""
        cfg = self.cfg
        tok = self.embed_steps(np.asarray(points)[None, None])  # position 0
        if t:
            tok = tok - self.time_pos[0] + self.time_pos[t]
        return tok.reshape(cfg.d_model)

    def run(self, tokens: Tensor, memory: AdapterOutput) -> Tensor:
        x = tokens
        for layer in self.layers:
            x = layer(x, memory.tokens, causal=True, memory_mask=memory.key_mask)
        return x

    def heads(self, h: Tensor, coords: np.ndarray) -> FlowLogits:
        """Per-axis logits over absolute pixel bins for the step after each input step.

        ``coords`` (B, S, n, 2) are the points fed at those positions; relative heads
        read their offset scores starting from these points' bins.
        """
        cfg = self.cfg
        b, s, _ = h.shape
        n = cfg.n_points
        if not cfg.relative_bins:
            return FlowLogits(self.head_x(h).reshape(b, s, n, cfg.width),
                              self.head_y(h).reshape(b, s, n, cfg.height))
        ax, ay = to_bins(np.asarray(coords)[:, :s], cfg.width, cfg.height)
        lead = np.ix_(np.arange(b), np.arange(s), np.arange(n), np.arange(1))[:3]

        def gather(scores: Tensor, anchor: np.ndarray, size: int) -> Tensor:
            offset = np.arange(size)[None, None, None, :] - anchor[..., None] + size - 1
            return T.getitem(scores.reshape(b, s, n, 2 * size - 1), (*lead, offset))

        return FlowLogits(gather(self.head_x(h), ax, cfg.width), gather(self.head_y(h), ay, cfg.height))

    def teacher_forced(self, coords: np.ndarray, memory: AdapterOutput) -> tuple[FlowLogits, Tensor]:
        """Logits for steps 1..T-1 from ground-truth history, plus the CLS output."""
        b, horizon = coords.shape[:2]
        steps = self.embed_steps(coords)
        cls = T.broadcast_to(self.cls + self.time_pos[horizon], (b, 1, self.cfg.d_model))
        h = self.run(T.concat([steps, cls], axis=1), memory)
        logits = self.heads(h[:, : horizon - 1], coords)
        return logits, h[:, horizon]

    def decode_step(self, history: np.ndarray, memory: AdapterOutput) -> tuple[Tensor, FlowLogits]:
        """Given steps 0..t-1 (B, t, n, 2), return the last output token and step-t logits."""
        if history.shape[1] < 1:
            raise ValueError("history must contain at least the t=0 points")
        h = self.run(self.embed_steps(history), memory)
        last = h[:, history.shape[1] - 1:]
        return last, self.heads(last, history[:, -1:])


def flow_loss(logits: FlowLogits, gt_coords: np.ndarray) -> Tensor:
    """Mean cross-entropy over steps 1..T-1, points, and both axes."""
    width, height = logits.x.shape[-1], logits.y.shape[-1]
    target = np.asarray(gt_coords)[:, 1:]
    if target.shape[:3] != logits.x.shape[:3]:
        raise T.ShapeMismatch(f"gt {target.shape} vs logits {logits.x.shape}")
    bx, by = to_bins(target, width, height)
    return (T.softmax_cross_entropy(logits.x, bx) + T.softmax_cross_entropy(logits.y, by)) * 0.5


def semantic_alignment_loss(cls_projected: Tensor, h_inst: Tensor) -> Tensor:
    """L1 between the projected CLS output and the pooled instruction embedding."""
    return T.l1_loss(cls_projected, h_inst)


def total_flow_loss(l_flow: Tensor, l_sem: Tensor | None, lambda_sem: float = 1.0) -> Tensor:
    if lambda_sem == 0 or l_sem is None:
        return l_flow
    return l_flow + l_sem * lambda_sem


# -- full flow generator ---------------------------------------------------------
@dataclass
class FlowModelConfig:
    image_size: tuple[int, int] = (128, 128)
    patch: int = 16
    horizon: int = 8
    n_points: int = 16
    d_model: int = 128
    d_txt: int = 64
    n_heads: int = 4
    enc_layers: int = 2
    dec_layers: int = 2
    ffn_mult: int = 2
    no_vp: bool = False
    relative_bins: bool = True
    seed: int = 0

    def to_dict(self) -> dict:
        d = asdict(self)
        d["image_size"] = list(self.image_size)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> FlowModelConfig:
        d = dict(d)
        d["image_size"] = tuple(d["image_size"])
        return cls(**d)


@dataclass
class FlowBatch:
    rgb: np.ndarray
    prompted: np.ndarray
    instructions: list[str]
    coords: np.ndarray  # (B, T, n, 2)
    ids: list[str] = field(default_factory=list)


def make_batch(episodes: list[Episode], prompts: list[VisualPrompt] | None = None) -> FlowBatch:
    rgb, vp, coords = [], [], []
    for i, e in enumerate(episodes):
        p = prompts[i] if prompts is not None else (e.prompt or oracle_prompt(e))
        rgb.append(e.rgb)
        vp.append(render_prompt(e.rgb, p).pixels)
        coords.append(e.gt_flow.coords)
    return FlowBatch(np.stack(rgb), np.stack(vp), [e.instruction for e in episodes],
                     np.stack(coords), [e.id for e in episodes])


@dataclass
class FlowOutputs:
    logits: FlowLogits
    cls_projected: Tensor
    text: TextEmbedding
    memory: AdapterOutput


# Fixed seed: the instruction encoder plays the part of a pretrained, frozen
# language model, identical for every training run and ablation.
INSTRUCTION_ENCODER_SEED = 20250101


def instruction_encoder(vocab: dict[str, int], d_txt: int) -> TextEncoder:
    """Frozen text encoder whose pooled output is the semantic-alignment target."""
    return freeze(TextEncoder(np.random.default_rng(INSTRUCTION_ENCODER_SEED), vocab, d_txt))


class FlowGenerator(Module):
    """Adapter + decoder; the complete language-and-prompt conditioned flow model."""

    def __init__(self, cfg: FlowModelConfig, vocab: dict[str, int] | None = None):
        rng = np.random.default_rng(cfg.seed)
        self.cfg = cfg
        h, w = cfg.image_size
        self.adapter = MultiModalAdapter(rng, AdapterConfig(
            cfg.image_size, cfg.patch, cfg.d_model, cfg.d_txt, cfg.n_heads, cfg.enc_layers,
            cfg.ffn_mult, cfg.no_vp), vocab)
        self.decoder = FlowDecoder(rng, DecoderConfig(
            w, h, cfg.horizon, cfg.n_points, cfg.d_model, cfg.d_txt, cfg.n_heads, cfg.dec_layers,
            cfg.ffn_mult, cfg.relative_bins))
        self.instruction_encoder = instruction_encoder(self.adapter.text_encoder.vocab, cfg.d_txt)

    def encode(self, batch: FlowBatch) -> tuple[AdapterOutput, TextEmbedding]:
        return self.adapter(batch.rgb, batch.instructions, batch.prompted)

    def forward(self, batch: FlowBatch) -> FlowOutputs:
        memory, txt = self.encode(batch)
        logits, cls_out = self.decoder.teacher_forced(batch.coords, memory)
        return FlowOutputs(logits, self.decoder.sem_proj(cls_out), txt, memory)

    def losses(self, batch: FlowBatch, lambda_sem: float = 1.0) -> dict[str, Tensor]:
        out = self.forward(batch)
        l_flow = flow_loss(out.logits, batch.coords)
        h_inst = self.instruction_encoder(batch.instructions).pooled
        l_sem = semantic_alignment_loss(out.cls_projected, h_inst)
        return {"flow": l_flow, "sem": l_sem, "total": total_flow_loss(l_flow, l_sem, lambda_sem)}

    def generate(self, batch: FlowBatch) -> np.ndarray:
        """Greedy decoding from the given t=0 points; returns (B, T, n, 2) pixel coords."""
        cfg = self.cfg
        with T.no_grad():
            memory, _ = self.encode(batch)
            coords = np.asarray(batch.coords)[:, :1].astype(np.float64)
            for _ in range(1, cfg.horizon):
                _, logits = self.decoder.decode_step(coords, memory)
                x = logits.x.data[:, -1].argmax(axis=-1).astype(np.float64)
                y = logits.y.data[:, -1].argmax(axis=-1).astype(np.float64)
                coords = np.concatenate([coords, np.stack([x, y], axis=-1)[:, None]], axis=1)
        return coords

    def generate_flow(self, rgb: np.ndarray, instruction: str, prompt: VisualPrompt,
                      initial_points: np.ndarray) -> FlowSequence:
        vp = render_prompt(rgb, prompt).pixels
        batch = FlowBatch(rgb[None], vp[None], [instruction],
                          np.asarray(initial_points, dtype=np.float64)[None, None])
        return FlowSequence(self.generate(batch)[0])
