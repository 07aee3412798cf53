"""ViT-style image encoder shared across both acquisition dates.

Preprocessing follows the CLIP convention: per-channel normalization with the
CLIP means/stds, then bilinear resize to the square working resolution.
Patch features come from the penultimate transformer block with the CLS token
dropped; a single trainable linear projection lifts them to the text width,
and implant() splices the projected rows into an embedded token sequence in
place of the two temporal placeholder tokens.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from PIL import Image

from . import tensor as T
from .llm import layer_norm
from .nn import Linear, Module, ModuleList, Parameter, normal_init
from .tensor import ContractError, DimensionError, Tensor

CLIP_MEANS = np.array([0.48145466, 0.4578275, 0.40821073], dtype=np.float32)
CLIP_STDS = np.array([0.26862954, 0.26130258, 0.27577711], dtype=np.float32)


class FormatError(ContractError):
    """Image does not match the expected layout."""


@dataclass(frozen=True)
class VisionConfig:
    image_size: int = 64
    patch: int = 8
    d_v: int = 64
    blocks: int = 4
    heads: int = 4
    mlp_hidden: int = 256
    eps: float = 1e-5

    def __post_init__(self):
        if self.image_size % self.patch:
            raise ContractError("image_size must be divisible by patch")
        if self.d_v % self.heads:
            raise ContractError("d_v must be divisible by heads")
        if self.blocks < 2:
            raise ContractError("penultimate-layer extraction needs >= 2 blocks")

    @property
    def num_patches(self) -> int:
        return (self.image_size // self.patch) ** 2


# ---------------------------------------------------------------------------
# io and preprocessing
# ---------------------------------------------------------------------------

def load_image(path) -> np.ndarray:
    """PNG (or any PIL-readable) file to float32 [3, H, W] in [0, 1]."""
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0
    return np.ascontiguousarray(arr.transpose(2, 0, 1))


def save_image(path, arr: np.ndarray) -> None:
    """float [3, H, W] (or [H, W] mask) in [0, 1] to an 8-bit PNG."""
    a = np.clip(np.asarray(arr), 0.0, 1.0)
    if a.ndim == 3:
        a = a.transpose(1, 2, 0)
    Image.fromarray((a * 255.0 + 0.5).astype(np.uint8)).save(path)


def preprocess(img, out_size: int) -> Tensor:
    """Channel-normalize then bilinear-resize to [3, out_size, out_size]."""
    x = img.data if isinstance(img, Tensor) else np.asarray(img, dtype=np.float32)
    if x.ndim != 3 or x.shape[0] != 3:
        raise FormatError(f"expected [3, H, W] image, got {x.shape}")
    if x.shape[1] < 1 or x.shape[2] < 1:
        raise FormatError("empty image")
    normed = (x - CLIP_MEANS[:, None, None]) / CLIP_STDS[:, None, None]
    return T.bilinear_resize(Tensor(normed.astype(np.float32)),
                             (out_size, out_size))


# ---------------------------------------------------------------------------
# encoder
# ---------------------------------------------------------------------------

class ViTAttention(Module):
    """Full bidirectional multi-head self-attention (no mask, no rotary)."""

    def __init__(self, d: int, heads: int, rng: np.random.Generator):
        super().__init__()
        self.heads = heads
        self.hd = d // heads
        self.wq = Parameter(normal_init(rng, (d, d)))
        self.wk = Parameter(normal_init(rng, (d, d)))
        self.wv = Parameter(normal_init(rng, (d, d)))
        self.wo = Parameter(normal_init(rng, (d, d)))

    def forward(self, x) -> Tensor:
        n = x.shape[0]

        def heads_first(w):
            return T.transpose(T.reshape(T.matmul(x, w), (n, self.heads, self.hd)),
                               (1, 0, 2))

        q, k, v = heads_first(self.wq), heads_first(self.wk), heads_first(self.wv)
        scores = T.mul(T.matmul(q, T.transpose(k, (0, 2, 1))),
                       1.0 / np.sqrt(np.float32(self.hd)))
        ctx = T.matmul(T.softmax(scores, -1), v)
        out = T.reshape(T.transpose(ctx, (1, 0, 2)), (n, self.heads * self.hd))
        return T.matmul(out, self.wo)


class ViTBlock(Module):
    def __init__(self, cfg: VisionConfig, rng: np.random.Generator):
        super().__init__()
        d = cfg.d_v
        self.attn = ViTAttention(d, cfg.heads, rng)
        self.fc1 = Linear(d, cfg.mlp_hidden, rng)
        self.fc2 = Linear(cfg.mlp_hidden, d, rng)
        self.ln1_g = Parameter(np.ones(d, dtype=np.float32))
        self.ln1_b = Parameter(np.zeros(d, dtype=np.float32))
        self.ln2_g = Parameter(np.ones(d, dtype=np.float32))
        self.ln2_b = Parameter(np.zeros(d, dtype=np.float32))
        self.eps = cfg.eps

    def forward(self, x) -> Tensor:
        x = T.add(x, self.attn(layer_norm(x, self.ln1_g, self.ln1_b, self.eps)))
        h = self.fc2(T.gelu(self.fc1(layer_norm(x, self.ln2_g, self.ln2_b,
                                                self.eps))))
        return T.add(x, h)


class VisionEncoder(Module):
    """Patch-embedding ViT; encode_patches returns the penultimate block's
    output with the CLS row dropped, so the final block never influences the
    extracted features (it exists to make the stack depth honest and stays at
    its initialization unless some other head uses it)."""

    def __init__(self, cfg: VisionConfig, rng: np.random.Generator):
        super().__init__()
        self.cfg = cfg
        d = cfg.d_v
        fan_in = 3 * cfg.patch * cfg.patch
        self.patch_w = Parameter(
            (rng.standard_normal((d, 3, cfg.patch, cfg.patch)) *
             np.sqrt(2.0 / fan_in)).astype(np.float32))
        self.patch_b = Parameter(np.zeros(d, dtype=np.float32))
        self.cls = Parameter(normal_init(rng, (1, d)))
        self.pos = Parameter(normal_init(rng, (1 + cfg.num_patches, d)))
        self.blocks = ModuleList([ViTBlock(cfg, rng) for _ in range(cfg.blocks)])

    def encode_patches(self, img) -> Tensor:
        cfg = self.cfg
        x = T.as_tensor(img)
        if x.ndim != 3 or x.shape[0] != 3:
            raise FormatError(f"expected preprocessed [3, S, S], got {x.shape}")
        if x.shape[1] != cfg.image_size or x.shape[2] != cfg.image_size:
            raise FormatError("preprocessed image has wrong working resolution")
        grid = T.conv2d(T.reshape(x, (1, 3, cfg.image_size, cfg.image_size)),
                        self.patch_w, self.patch_b,
                        stride=cfg.patch, pad=0)              # 1,d,g,g
        g = cfg.image_size // cfg.patch
        tokens = T.transpose(T.reshape(grid, (cfg.d_v, g * g)), (1, 0))
        seq = T.add(T.concat([self.cls, tokens], axis=0), self.pos)
        hiddens = []
        h = seq
        for blk in self.blocks:
            h = blk(h)
            hiddens.append(h)
        return hiddens[-2][1:]                                 # drop CLS

    forward = encode_patches


class VisionProjection(Module):
    """Single affine map from patch width to text width, shared by both
    temporal images."""

    def __init__(self, d_v: int, d_text: int, rng: np.random.Generator):
        super().__init__()
        self.lin = Linear(d_v, d_text, rng)

    def forward(self, feats) -> Tensor:
        return self.lin(feats)


# ---------------------------------------------------------------------------
# implant
# ---------------------------------------------------------------------------

def implant(seq_emb, ids, t1_id: int, t2_id: int, f1, f2) -> Tensor:
    """Replace the placeholder rows of an embedded sequence with patch rows.

    ids is the token-id sequence that produced seq_emb; each placeholder must
    occur exactly once and the earlier-image one first. Output length is
    n - 2 + 2P.
    """
    seq_emb = T.as_tensor(seq_emb)
    ids = list(ids)
    if len(ids) != seq_emb.shape[0]:
        raise DimensionError("ids and embedded sequence disagree on length")
    if ids.count(t1_id) != 1 or ids.count(t2_id) != 1:
        raise ContractError("each image placeholder must occur exactly once")
    p1, p2 = ids.index(t1_id), ids.index(t2_id)
    if p1 >= p2:
        raise ContractError("earlier-image placeholder must precede the later")
    f1, f2 = T.as_tensor(f1), T.as_tensor(f2)
    if f1.shape[1] != seq_emb.shape[1] or f2.shape[1] != seq_emb.shape[1]:
        raise DimensionError("patch features not projected to text width")
    parts = [seq_emb[:p1], f1, seq_emb[p1 + 1:p2], f2, seq_emb[p2 + 1:]]
    return T.concat([p for p in parts if p.shape[0] > 0], axis=0)


def implant_positions(n: int, p1: int, p2: int, P: int):
    """Index bookkeeping after implant: returns (new length, row index map for
    the surviving text rows)."""
    idx = {}
    for i in range(n):
        if i == p1 or i == p2:
            continue
        shift = 0
        if i > p1:
            shift += P - 1
        if i > p2:
            shift += P - 1
        idx[i] = i + shift
    return n - 2 + 2 * P, idx


# ---------------------------------------------------------------------------
# contrastive alignment
# ---------------------------------------------------------------------------

def l2_normalize(x, eps: float = 1e-12) -> Tensor:
    x = T.as_tensor(x)
    n = T.sqrt(T.sum_(T.mul(x, x), axis=-1, keepdims=True))
    return T.div(x, T.add(n, eps))


def clip_alignment_logits(img_feats, txt_feats, t_log) -> Tensor:
    """Pairwise similarity logits <I_i, T_j> * e^t for the alignment stage.

    Both inputs must arrive row-L2-normalized; a row norm off unit by more
    than 1e-4 is a contract error, not something silently fixed here.
    """
    img_feats, txt_feats = T.as_tensor(img_feats), T.as_tensor(txt_feats)
    if img_feats.shape != txt_feats.shape:
        raise DimensionError("alignment batches must have matching shapes")
    for name, feats in (("image", img_feats), ("text", txt_feats)):
        norms = np.linalg.norm(feats.data, axis=-1)
        if np.any(np.abs(norms - 1.0) > 1e-4):
            raise ContractError(f"{name} rows are not L2-normalized")
    scale = T.exp(t_log)
    return T.mul(T.matmul(img_feats, T.transpose(txt_feats)), scale)
