"""Prompt-conditioned change-map decoder.

The change-marker embedding from the language model, projected to decoder
width, converses with the flattened fused-feature tokens through two blocks
of bidirectional cross-attention. The spatial tokens are then upsampled by
two stride-2 transposed convolutions, bilinearly brought to the output
resolution, and scored per pixel by a dot product against the updated prompt
token; a sigmoid turns scores into change probabilities.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .nn import (BatchNorm2d, ConvTranspose2d, Linear, Module, ModuleList,
                 Parameter, normal_init)
from .llm import layer_norm
from .tensor import ContractError, DimensionError, Tensor


@dataclass(frozen=True)
class MaskDecoderConfig:
    d_dec: int = 64
    grid: int = 16
    blocks: int = 2
    heads: int = 4
    out_size: int = 64
    eps: float = 1e-5

    def __post_init__(self):
        if self.d_dec % self.heads:
            raise ContractError("d_dec must be divisible by heads")
        if self.d_dec % 4:
            raise ContractError("d_dec must be divisible by 4 for upsampling")

    @property
    def up_channels(self) -> int:
        return self.d_dec // 4


@dataclass
class ChangeProbMap:
    """Per-pixel change probabilities plus the resolution they describe."""
    probs: Tensor            # [H, W], values in [0, 1]
    source_hw: tuple


class CrossAttention(Module):
    """Multi-head attention with distinct query and key/value sequences."""

    def __init__(self, d: int, heads: int, rng: np.random.Generator):
        super().__init__()
        self.heads, self.hd = heads, d // heads
        self.wq = Parameter(normal_init(rng, (d, d)))
        self.wk = Parameter(normal_init(rng, (d, d)))
        self.wv = Parameter(normal_init(rng, (d, d)))
        self.wo = Parameter(normal_init(rng, (d, d)))

    def forward(self, q_seq, kv_seq) -> Tensor:
        nq, nk = q_seq.shape[0], kv_seq.shape[0]

        def split(x, w, n):
            return T.transpose(T.reshape(T.matmul(x, w), (n, self.heads, self.hd)),
                               (1, 0, 2))

        q = split(q_seq, self.wq, nq)
        k = split(kv_seq, self.wk, nk)
        v = split(kv_seq, self.wv, nk)
        scores = T.mul(T.matmul(q, T.transpose(k, (0, 2, 1))),
                       1.0 / np.sqrt(np.float32(self.hd)))
        ctx = T.matmul(T.softmax(scores, -1), v)
        out = T.reshape(T.transpose(ctx, (1, 0, 2)), (nq, self.heads * self.hd))
        return T.matmul(out, self.wo)


class TwoWayBlock(Module):
    """Prompt attends to the spatial tokens, refines through an MLP, then the
    spatial tokens attend back to the prompt."""

    def __init__(self, d: int, heads: int, eps: float, rng: np.random.Generator):
        super().__init__()
        self.p2s = CrossAttention(d, heads, rng)
        self.s2p = CrossAttention(d, heads, rng)
        self.fc1 = Linear(d, 2 * d, rng)
        self.fc2 = Linear(2 * d, d, rng)
        self.eps = eps
        for i in (1, 2, 3):
            setattr(self, f"ln{i}_g", Parameter(np.ones(d, dtype=np.float32)))
            setattr(self, f"ln{i}_b", Parameter(np.zeros(d, dtype=np.float32)))

    def forward(self, prompt, tokens):
        prompt = T.add(prompt, self.p2s(
            layer_norm(prompt, self.ln1_g, self.ln1_b, self.eps), tokens))
        prompt = T.add(prompt, self.fc2(T.gelu(self.fc1(
            layer_norm(prompt, self.ln2_g, self.ln2_b, self.eps)))))
        tokens = T.add(tokens, self.s2p(
            layer_norm(tokens, self.ln3_g, self.ln3_b, self.eps), prompt))
        return prompt, tokens


class MaskDecoder(Module):
    def __init__(self, cfg: MaskDecoderConfig, d_text: int, fused_channels: int,
                 rng: np.random.Generator):
        super().__init__()
        if fused_channels != cfg.d_dec:
            raise ContractError("fused channels must equal decoder width")
        self.cfg = cfg
        d = cfg.d_dec
        self.prompt_proj = Linear(d_text, d, rng)
        self.pos = Parameter(normal_init(rng, (cfg.grid * cfg.grid, d)))
        self.blocks = ModuleList([TwoWayBlock(d, cfg.heads, cfg.eps, rng)
                                  for _ in range(cfg.blocks)])
        self.up1 = ConvTranspose2d(d, d // 2, 2, rng, stride=2)
        self.up_bn = BatchNorm2d(d // 2)
        self.up2 = ConvTranspose2d(d // 2, d // 4, 2, rng, stride=2)
        self.head1 = Linear(d, d, rng)
        self.head2 = Linear(d, cfg.up_channels, rng)

    def project_prompt(self, chg_emb) -> Tensor:
        chg_emb = T.as_tensor(chg_emb)
        if chg_emb.ndim == 1:
            chg_emb = T.reshape(chg_emb, (1, chg_emb.shape[0]))
        return self.prompt_proj(chg_emb)

    def decode(self, prompt, fused) -> ChangeProbMap:
        """prompt: [1, d_dec] (or [d_dec]); fused: [d_dec, grid, grid]."""
        cfg = self.cfg
        prompt = T.as_tensor(prompt)
        if prompt.ndim == 1:
            prompt = T.reshape(prompt, (1, prompt.shape[0]))
        fused = T.as_tensor(fused)
        if fused.shape != (cfg.d_dec, cfg.grid, cfg.grid):
            raise DimensionError(
                f"fused feature must be [{cfg.d_dec}, {cfg.grid}, {cfg.grid}],"
                f" got {fused.shape}")
        n = cfg.grid * cfg.grid
        tokens = T.add(T.transpose(T.reshape(fused, (cfg.d_dec, n)), (1, 0)),
                       self.pos)
        for blk in self.blocks:
            prompt, tokens = blk(prompt, tokens)
        spatial = T.reshape(T.transpose(tokens, (1, 0)),
                            (1, cfg.d_dec, cfg.grid, cfg.grid))
        up = T.gelu(self.up_bn(self.up1(spatial)))
        up = T.gelu(self.up2(up))                       # 1, d/4, 4g, 4g
        if up.shape[2] != cfg.out_size:
            up = T.bilinear_resize(up, (cfg.out_size, cfg.out_size))
        query = self.head2(T.gelu(self.head1(prompt)))  # 1, d/4
        # per-pixel dot product: [1, c] x [c, H*W]
        flat = T.reshape(up, (cfg.up_channels, cfg.out_size * cfg.out_size))
        logits = T.reshape(T.matmul(query, flat), (cfg.out_size, cfg.out_size))
        return ChangeProbMap(probs=T.sigmoid(logits),
                             source_hw=(cfg.out_size, cfg.out_size))

    def forward(self, chg_emb, fused) -> ChangeProbMap:
        return self.decode(self.project_prompt(chg_emb), fused)


def binarize(m, threshold: float = 0.5) -> np.ndarray:
    """Probability map to {0, 1} uint8 with pixel >= threshold counted as
    change."""
    if not 0.0 < threshold < 1.0:
        raise ContractError("threshold must lie strictly inside (0, 1)")
    probs = m.probs if isinstance(m, ChangeProbMap) else m
    arr = probs.data if isinstance(probs, Tensor) else np.asarray(probs)
    return (arr >= threshold).astype(np.uint8)
