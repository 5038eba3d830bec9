"""Prompt-conditioned multi-modal adapter.

Encodes the RGB frame, the instruction, and the prompt-annotated frame, then
fuses them with a bidirectional transformer encoder.  Output token layout is
``[image patches | instruction tokens | prompt-image patches]``; with the
no-visual-prompt ablation the last block is a single learned null token.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numerics as T
from .numerics import Tensor
from .numerics.nn import EncoderLayer, Linear, Module, glorot_uniform, key_padding_mask, parameter
from .synthbench import PAD, UNK, build_vocab, tokenize


class EmptyInstruction(ValueError):
    pass


@dataclass
class TextEmbedding:
    tokens: Tensor  # (B, L, d_txt)
    pooled: Tensor  # (B, d_txt), mean over valid tokens
    valid: np.ndarray  # (B, L) bool


@dataclass
class AdapterOutput:
    tokens: Tensor  # (B, N_img + L_txt + N_vp, d_model)
    valid: np.ndarray  # (B, total) bool
    n_image: int
    n_text: int
    n_prompt: int

    @property
    def key_mask(self) -> np.ndarray | None:
        return key_padding_mask(self.valid)


def patchify(pixels: np.ndarray, patch: int) -> np.ndarray:
    """(B, H, W, 3) uint8 -> (B, num_patches, patch*patch*3) floats in [0, 1], row-major patches."""
    pixels = np.asarray(pixels)
    if pixels.ndim == 3:
        pixels = pixels[None]
    b, h, w, c = pixels.shape
    if h % patch or w % patch:
        raise T.ShapeMismatch(f"image {h}x{w} not divisible into {patch}px patches")
    x = pixels.reshape(b, h // patch, patch, w // patch, patch, c).transpose(0, 1, 3, 2, 4, 5)
    return x.reshape(b, (h // patch) * (w // patch), patch * patch * c) / 255.0


class PatchEncoder(Module):
    def __init__(self, rng, image_size: tuple[int, int], patch: int, d_model: int):
        self.height, self.width = image_size
        self.patch = patch
        n = (self.height // patch) * (self.width // patch)
        self.proj = Linear(rng, patch * patch * 3, d_model, bias=False)
        self.pos = parameter(glorot_uniform(rng, n, d_model))

    @property
    def num_patches(self) -> int:
        return self.pos.shape[0]

    def __call__(self, pixels: np.ndarray) -> Tensor:
        pixels = np.asarray(pixels)
        if pixels.shape[-3:-1] != (self.height, self.width) or pixels.shape[-1] != 3:
            raise T.ShapeMismatch(f"image shape {pixels.shape} vs encoder ({self.height}, {self.width}, 3)")
        return self.proj(Tensor(patchify(pixels, self.patch))) + self.pos


class TextEncoder(Module):
    def __init__(self, rng, vocab: dict[str, int], d_txt: int, max_len: int = 16):
        self.vocab = dict(vocab)
        self.max_len = max_len
        self.table = parameter(glorot_uniform(rng, len(vocab), d_txt))
        self.pos = parameter(glorot_uniform(rng, max_len, d_txt))

    def ids(self, instruction: str) -> list[int]:
        words = tokenize(instruction)
        if not words:
            raise EmptyInstruction("instruction has no tokens")
        unk = self.vocab[UNK]
        return [self.vocab.get(w, unk) for w in words][: self.max_len]

    def __call__(self, instructions: list[str] | str) -> TextEmbedding:
        if isinstance(instructions, str):
            instructions = [instructions]
        seqs = [self.ids(s) for s in instructions]
        length = max(len(s) for s in seqs)
        pad = self.vocab[PAD]
        ids = np.full((len(seqs), length), pad, dtype=np.int64)
        valid = np.zeros((len(seqs), length), dtype=bool)
        for i, s in enumerate(seqs):
            ids[i, : len(s)] = s
            valid[i, : len(s)] = True
        tokens = T.getitem(self.table, ids) + self.pos[:length]
        weights = valid / valid.sum(axis=1, keepdims=True)
        pooled = T.matmul(Tensor(weights[:, None, :]), tokens).reshape(len(seqs), -1)
        return TextEmbedding(tokens, pooled, valid)


@dataclass
class AdapterConfig:
    image_size: tuple[int, int] = (128, 128)
    patch: int = 16
    d_model: int = 128
    d_txt: int = 64
    n_heads: int = 4
    n_layers: int = 2
    ffn_mult: int = 2
    no_vp: bool = False


class MultiModalAdapter(Module):
    def __init__(self, rng, cfg: AdapterConfig, vocab: dict[str, int] | None = None):
        self.cfg = cfg
        self.image_encoder = PatchEncoder(rng, cfg.image_size, cfg.patch, cfg.d_model)
        self.text_encoder = TextEncoder(rng, vocab or build_vocab(), cfg.d_txt)
        self.text_proj = Linear(rng, cfg.d_txt, cfg.d_model)
        self.modality = parameter(glorot_uniform(rng, 3, cfg.d_model))
        self.null_prompt = parameter(glorot_uniform(rng, 1, cfg.d_model))
        self.layers = [EncoderLayer(rng, cfg.d_model, cfg.n_heads, cfg.ffn_mult)
                       for _ in range(cfg.n_layers)]

    def encode_image(self, pixels: np.ndarray) -> Tensor:
        return self.image_encoder(pixels)

    def encode_text(self, instructions) -> TextEmbedding:
        return self.text_encoder(instructions)

    def fuse(self, img_tokens: Tensor, txt: TextEmbedding, vp_tokens: Tensor | None) -> AdapterOutput:
        b, n_img, d = img_tokens.shape
        if txt.tokens.shape[0] != b:
            raise T.ShapeMismatch("image and text batch sizes differ")
        parts = [img_tokens + self.modality[0], self.text_proj(txt.tokens) + self.modality[1]]
        if vp_tokens is None:
            parts.append(T.broadcast_to(self.null_prompt, (b, 1, d)) + self.modality[2])
        else:
            if vp_tokens.shape != img_tokens.shape:
                raise T.ShapeMismatch(f"prompt tokens {vp_tokens.shape} vs image tokens {img_tokens.shape}")
            parts.append(vp_tokens + self.modality[2])
        x = T.concat(parts, axis=1)
        n_vp = parts[2].shape[1]
        valid = np.concatenate([np.ones((b, n_img), bool), txt.valid, np.ones((b, n_vp), bool)], axis=1)
        mask = key_padding_mask(valid)
        for layer in self.layers:
            x = layer(x, mask=mask)
        return AdapterOutput(x, valid, n_img, txt.tokens.shape[1], n_vp)

    def __call__(self, rgb: np.ndarray, instructions, prompted: np.ndarray | None,
                 txt: TextEmbedding | None = None) -> tuple[AdapterOutput, TextEmbedding]:
        """Encode and fuse; ``prompted`` is ignored under the no-vp ablation."""
        txt = txt or self.encode_text(instructions)
        img = self.encode_image(rgb)
        vp = None if self.cfg.no_vp or prompted is None else self.encode_image(prompted)
        return self.fuse(img, txt, vp), txt
