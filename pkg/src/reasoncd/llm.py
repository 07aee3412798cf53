"""Decoder-only reasoning core.

Pre-norm residual blocks: RMSNorm then grouped-query attention, RMSNorm then
SwiGLU feed-forward, each wrapped in a residual connection; rotary position
embedding on Q and K only; a final RMSNorm; and a vocabulary projection tied
to the embedding lookup table (logits = hidden @ ELT^T). Tying keeps the
output head trainable through the embedding rows even when the decoder base
weights are frozen for adapter fine-tuning.

Sequences carry no batch axis: every tensor is [seq, ...]. Batching happens
one sample at a time in the trainer, which is the right trade at this scale.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .nn import Module, ModuleList, Parameter, normal_init
from .tensor import Tensor, TensorError


class CapacityError(TensorError):
    """Sequence exceeds the configured maximum length."""


class AbsentTokenError(TensorError):
    """A required token does not occur in the sequence."""


@dataclass(frozen=True)
class DecoderConfig:
    layers: int = 4
    d_text: int = 128
    heads: int = 8
    kv_groups: int = 2
    ffn_hidden: int = 512
    rope_base: float = 10000.0
    max_seq: int = 512
    eps: float = 1e-6

    def __post_init__(self):
        if self.heads % self.kv_groups:
            raise T.ContractError("heads must be divisible by kv_groups")
        if self.d_text % self.heads:
            raise T.ContractError("d_text must be divisible by heads")
        if (self.d_text // self.heads) % 2:
            raise T.ContractError("head_dim must be even for rotary pairs")
        if self.eps <= 0:
            raise T.ContractError("eps must be positive")

    @property
    def head_dim(self) -> int:
        return self.d_text // self.heads


# ---------------------------------------------------------------------------
# normalization
# ---------------------------------------------------------------------------

def layer_norm(x, gamma, beta, eps: float = 1e-5) -> Tensor:
    """(x - mean) / sqrt(var + eps) * gamma + beta over the last axis,
    population variance."""
    mu = T.mean_(x, axis=-1, keepdims=True)
    centered = T.sub(x, mu)
    var = T.mean_(T.mul(centered, centered), axis=-1, keepdims=True)
    xhat = T.div(centered, T.sqrt(T.add(var, eps)))
    return T.add(T.mul(xhat, gamma), beta)


def rms_norm(x, gamma, eps: float = 1e-6) -> Tensor:
    """x / (sqrt(mean(x^2)) + eps) * gamma; note eps sits outside the root."""
    ms = T.mean_(T.mul(x, x), axis=-1, keepdims=True)
    return T.mul(T.div(x, T.add(T.sqrt(ms), eps)), gamma)


# ---------------------------------------------------------------------------
# rotary position embedding
# ---------------------------------------------------------------------------

def _rope_tables(positions: np.ndarray, head_dim: int, base: float, dtype):
    inv = base ** (-np.arange(0, head_dim, 2, dtype=np.float64) / head_dim)
    ang = positions.astype(np.float64)[:, None] * inv[None, :]
    return (np.cos(ang)[:, None, :].astype(dtype),
            np.sin(ang)[:, None, :].astype(dtype))


def rope_apply(x, base: float, offset: int = 0) -> Tensor:
    """Rotate dimension pairs (2i, 2i+1) of a [seq, heads, head_dim] tensor by
    angle m * base^(-2i/head_dim), m the absolute position."""
    x = T.as_tensor(x)
    if x.ndim != 3:
        raise T.DimensionError("rope_apply expects [seq, heads, head_dim]")
    if x.shape[-1] % 2:
        raise T.ContractError("head_dim must be even")
    pos = np.arange(offset, offset + x.shape[0])
    cos, sin = _rope_tables(pos, x.shape[-1], base, x.dtype)
    return T.rope_rotate(x, cos, sin)


def causal_mask(n: int) -> np.ndarray:
    """Additive mask: zero on and below the diagonal, -inf above."""
    m = np.zeros((n, n), dtype=np.float32)
    m[np.triu_indices(n, k=1)] = -np.inf
    return m


# ---------------------------------------------------------------------------
# attention
# ---------------------------------------------------------------------------

class GQAttention(Module):
    """Grouped-query attention: heads share K/V in `kv_groups` groups, heads
    grouped contiguously. Optional low-rank adapters ride on the q and v
    projections (see lora.attach_adapters)."""

    def __init__(self, cfg: DecoderConfig, rng: np.random.Generator):
        super().__init__()
        d, hd = cfg.d_text, cfg.head_dim
        self.cfg = cfg
        self.wq = Parameter(normal_init(rng, (d, cfg.heads * hd)))
        self.wk = Parameter(normal_init(rng, (d, cfg.kv_groups * hd)))
        self.wv = Parameter(normal_init(rng, (d, cfg.kv_groups * hd)))
        self.wo = Parameter(normal_init(rng, (cfg.heads * hd, d)))
        self.lora_q = None
        self.lora_v = None

    def _proj(self, x, w, adapter):
        y = T.matmul(x, w)
        if adapter is not None:
            y = T.add(y, adapter.delta(x))
        return y

    def _qkv(self, x, offset: int):
        cfg = self.cfg
        L = x.shape[0]
        hd = cfg.head_dim
        q = T.reshape(self._proj(x, self.wq, self.lora_q), (L, cfg.heads, hd))
        k = T.reshape(T.matmul(x, self.wk), (L, cfg.kv_groups, hd))
        v = T.reshape(self._proj(x, self.wv, self.lora_v), (L, cfg.kv_groups, hd))
        q = rope_apply(q, cfg.rope_base, offset)
        k = rope_apply(k, cfg.rope_base, offset)
        return q, k, v

    def _expand_kv(self, t):
        # [L, G, hd] -> [L, heads, hd] with contiguous head groups
        cfg = self.cfg
        L, rep = t.shape[0], cfg.heads // cfg.kv_groups
        t = T.reshape(t, (L, cfg.kv_groups, 1, cfg.head_dim))
        t = T.broadcast_to(t, (L, cfg.kv_groups, rep, cfg.head_dim))
        return T.reshape(t, (L, cfg.heads, cfg.head_dim))

    def _attend(self, q, k, v, mask):
        # q,k,v: [L, H, hd] -> scores [H, Lq, Lk]
        hd = self.cfg.head_dim
        qh = T.transpose(q, (1, 0, 2))
        kh = T.transpose(k, (1, 2, 0))
        scores = T.mul(T.matmul(qh, kh), 1.0 / np.sqrt(np.float32(hd)))
        if mask is not None:
            scores = T.add(scores, mask)
        w = T.softmax(scores, axis=-1)
        ctx = T.matmul(w, T.transpose(v, (1, 0, 2)))        # [H, Lq, hd]
        L = q.shape[0]
        out = T.reshape(T.transpose(ctx, (1, 0, 2)),
                        (L, self.cfg.heads * hd))
        return T.matmul(out, self.wo)

    def forward(self, x) -> Tensor:
        q, k, v = self._qkv(x, 0)
        return self._attend(q, self._expand_kv(k), self._expand_kv(v),
                            causal_mask(x.shape[0]))

    def step(self, x_row, cache: dict, pos: int) -> Tensor:
        """Single-token decode against cached K/V. Extends the cache in place."""
        q, k, v = self._qkv(x_row, pos)
        if cache.get("k") is None:
            cache["k"], cache["v"] = k, v
        else:
            cache["k"] = T.concat([cache["k"], k], axis=0)
            cache["v"] = T.concat([cache["v"], v], axis=0)
        # the query is the newest position, so every cached key is visible
        return self._attend(q, self._expand_kv(cache["k"]),
                            self._expand_kv(cache["v"]), None)


class SwiGLU(Module):
    """(swish(x W1) * x W3) W2 with swish(z) = z * sigmoid(z)."""

    def __init__(self, d: int, hidden: int, rng: np.random.Generator):
        super().__init__()
        self.w1 = Parameter(normal_init(rng, (d, hidden)))
        self.w3 = Parameter(normal_init(rng, (d, hidden)))
        self.w2 = Parameter(normal_init(rng, (hidden, d)))

    def forward(self, x) -> Tensor:
        return T.matmul(T.mul(T.silu(T.matmul(x, self.w1)),
                              T.matmul(x, self.w3)), self.w2)


class DecoderBlock(Module):
    def __init__(self, cfg: DecoderConfig, rng: np.random.Generator):
        super().__init__()
        self.attn = GQAttention(cfg, rng)
        self.ffn = SwiGLU(cfg.d_text, cfg.ffn_hidden, rng)
        self.norm1_g = Parameter(np.ones(cfg.d_text, dtype=np.float32))
        self.norm2_g = Parameter(np.ones(cfg.d_text, dtype=np.float32))
        self.eps = cfg.eps

    def forward(self, x) -> Tensor:
        x = T.add(x, self.attn(rms_norm(x, self.norm1_g, self.eps)))
        return T.add(x, self.ffn(rms_norm(x, self.norm2_g, self.eps)))

    def step(self, x_row, cache: dict, pos: int) -> Tensor:
        x_row = T.add(x_row, self.attn.step(
            rms_norm(x_row, self.norm1_g, self.eps), cache, pos))
        return T.add(x_row, self.ffn(rms_norm(x_row, self.norm2_g, self.eps)))


class Decoder(Module):
    """Stack of pre-norm blocks with the output head tied to the embedding
    table: logits = hidden @ elt^T."""

    def __init__(self, cfg: DecoderConfig, elt: Parameter,
                 rng: np.random.Generator):
        super().__init__()
        self.cfg = cfg
        self.elt = elt
        self.blocks = ModuleList([DecoderBlock(cfg, rng)
                                  for _ in range(cfg.layers)])
        self.final_g = Parameter(np.ones(cfg.d_text, dtype=np.float32))

    def forward(self, seq_emb) -> tuple[Tensor, Tensor]:
        seq_emb = T.as_tensor(seq_emb)
        if seq_emb.shape[0] > self.cfg.max_seq:
            raise CapacityError(
                f"sequence length {seq_emb.shape[0]} exceeds {self.cfg.max_seq}")
        h = seq_emb
        for blk in self.blocks:
            h = blk(h)
        h = rms_norm(h, self.final_g, self.cfg.eps)
        logits = T.matmul(h, T.transpose(self.elt))
        return logits, h

    # -- incremental decode --------------------------------------------------
    def new_cache(self) -> list[dict]:
        return [{"k": None, "v": None} for _ in self.blocks]

    def step(self, emb_row, caches: list[dict], pos: int) -> tuple[Tensor, Tensor]:
        if pos + 1 > self.cfg.max_seq:
            raise CapacityError("decode exceeded max_seq")
        h = emb_row
        for blk, cache in zip(self.blocks, caches):
            h = blk.step(h, cache, pos)
        h = rms_norm(h, self.final_g, self.cfg.eps)
        return T.matmul(h, T.transpose(self.elt)), h


def greedy_decode(decoder: Decoder, prefix_emb, eos_id: int, max_new: int,
                  use_cache: bool = True) -> list[int]:
    """Greedy continuation of an embedded prefix.

    Argmax per step, ties to the lowest token id (numpy argmax takes the
    first maximum); generation stops at the end token, which is not emitted.
    The cached and cache-free paths are numerically identical; the cache just
    avoids re-running the prefix.
    """
    if max_new < 1:
        raise T.ContractError("max_new must be >= 1")
    prefix_emb = T.as_tensor(prefix_emb)
    out: list[int] = []
    with T.no_grad():
        if use_cache:
            caches = decoder.new_cache()
            logits = None
            for i in range(prefix_emb.shape[0]):
                logits, _ = decoder.step(prefix_emb[i:i + 1], caches, i)
            pos = prefix_emb.shape[0]
            for _ in range(max_new):
                tid = int(np.argmax(logits.data[-1]))
                if tid == eos_id:
                    break
                out.append(tid)
                if pos >= decoder.cfg.max_seq:
                    break                      # context full; nothing to feed
                emb = Tensor(decoder.elt.data[tid:tid + 1])
                logits, _ = decoder.step(emb, caches, pos)
                pos += 1
        else:
            seq = prefix_emb.data
            for _ in range(max_new):
                logits, _ = decoder(Tensor(seq))
                tid = int(np.argmax(logits.data[-1]))
                if tid == eos_id:
                    break
                out.append(tid)
                if seq.shape[0] >= decoder.cfg.max_seq:
                    break
                seq = np.concatenate([seq, decoder.elt.data[tid:tid + 1]], axis=0)
    return out


def extract_chg_embedding(hidden_last, ids, chg_id: int) -> Tensor:
    """Hidden-state row at the first change-marker occurrence."""
    ids = list(ids)
    if chg_id not in ids:
        raise AbsentTokenError("change marker token absent from sequence")
    k = ids.index(chg_id)
    hidden_last = T.as_tensor(hidden_last)
    if k >= hidden_last.shape[0]:
        raise T.DimensionError("ids longer than hidden states")
    return hidden_last[k]
