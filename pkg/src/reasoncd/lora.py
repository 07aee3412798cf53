"""Low-rank adapters for the attention q and v projections.

The weight update is exactly delta_W = A @ B with no alpha/r scaling factor;
that is the update rule this model family defines, even though most adapter
libraries add one. B starts at zero so a fresh adapter is an exact identity
on the base model; A uses Kaiming fan-in initialization.
"""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .nn import Module, Parameter, kaiming_normal
from .tensor import ContractError, DimensionError, Tensor


class LoraAdapter(Module):
    def __init__(self, d_in: int, d_out: int, r: int, rng: np.random.Generator):
        super().__init__()
        if not 1 <= r < min(d_in, d_out):
            raise ContractError(f"rank {r} invalid for {d_in}x{d_out}")
        self.r = r
        self.a = Parameter(kaiming_normal(rng, (d_in, r), d_in))
        self.b = Parameter(np.zeros((r, d_out), dtype=np.float32))

    def delta(self, x) -> Tensor:
        """(x @ A) @ B, the low-rank correction to the base projection."""
        return T.matmul(T.matmul(x, self.a), self.b)


def init_adapter(d_in: int, d_out: int, r: int, seed: int) -> LoraAdapter:
    return LoraAdapter(d_in, d_out, r, np.random.default_rng(seed))


def apply(x, w0: Tensor, adapter: LoraAdapter | None) -> Tensor:
    """x @ W0 plus the adapter correction; W0 stays gradient-free when its
    track_grad flag is off."""
    x = T.as_tensor(x)
    if x.shape[-1] != w0.shape[0]:
        raise DimensionError(f"lora apply mismatch {x.shape} vs {w0.shape}")
    y = T.matmul(x, w0)
    if adapter is not None:
        if adapter.a.shape[0] != w0.shape[0] or adapter.b.shape[1] != w0.shape[1]:
            raise DimensionError("adapter does not match base weight")
        y = T.add(y, adapter.delta(x))
    return y


def merge(w0: Tensor, adapter: LoraAdapter | None) -> np.ndarray:
    """W0 + A @ B as a plain exported weight."""
    w = np.asarray(w0.data if isinstance(w0, Tensor) else w0)
    if adapter is None:
        return w.copy()
    return (w + adapter.a.data @ adapter.b.data).astype(np.float32)


def attach_adapters(decoder, r: int, seed: int = 0) -> list[LoraAdapter]:
    """Install fresh adapters on the q and v projections of every attention
    layer (2 per layer). Re-attachment is a contract error."""
    rng = np.random.default_rng(seed)
    adapters: list[LoraAdapter] = []
    for blk in decoder.blocks:
        attn = blk.attn
        if attn.lora_q is not None or attn.lora_v is not None:
            raise ContractError("adapters already attached")
        d = attn.wq.shape[0]
        attn.lora_q = LoraAdapter(d, attn.wq.shape[1], r, rng)
        attn.lora_v = LoraAdapter(d, attn.wv.shape[1], r, rng)
        adapters.extend([attn.lora_q, attn.lora_v])
    return adapters


def adapter_parameter_count(d_in: int, d_out: int, r: int) -> tuple[int, int]:
    """(adapter trainable params, full-matrix params) for the saving check."""
    return d_in * r + r * d_out, d_in * d_out
