"""Training losses and evaluation metrics.

Loss sign convention: the text and mask cross-entropies are the standard
non-negative forms (mean of -log p). Reduction is the mean over positions or
pixels, so the loss weights are independent of sequence length, mask size,
and batch size.

Metric formulas use IoU = TP/(TP+FP+FN) and Cohen's kappa with
p_e = [(TP+FP)(TP+FN) + (TN+FN)(TN+FP)] / N^2. Variant forms that divide IoU
by (TP+TN+FP) and drop one product from p_e circulate in print; they are
available behind paper_literal=True strictly for comparison and never feed
training or model selection.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import tensor as T
from .mask_decoder import ChangeProbMap
from .tensor import ContractError, DimensionError, DomainError, Tensor

PROB_CLAMP = 1e-7


@dataclass(frozen=True)
class LossWeights:
    lam_ce: float = 1.0
    lam_bce: float = 2.0
    lam_dice: float = 0.5
    chg_absence_factor: float = 10.0

    def __post_init__(self):
        if min(self.lam_ce, self.lam_bce, self.lam_dice) < 0:
            raise ContractError("loss weights must be non-negative")


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int
    fp: int
    tn: int
    fn: int

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.tn + self.fn

    def __add__(self, other: "ConfusionCounts") -> "ConfusionCounts":
        return ConfusionCounts(self.tp + other.tp, self.fp + other.fp,
                               self.tn + other.tn, self.fn + other.fn)


def _as_probs(m) -> Tensor:
    if isinstance(m, ChangeProbMap):
        return m.probs
    return T.as_tensor(m)


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------

def ce_text_loss(logits, targets: Sequence[int], chg_id: int,
                 weights: LossWeights, generated_has_chg: bool) -> Tensor:
    """Mean next-token cross-entropy with the change-marker penalty.

    When the free-running generation for the same sample failed to produce
    the change marker, every position whose target is the marker weighs in at
    chg_absence_factor times the others. The divisor stays the position
    count, so a single marker position under the penalty costs exactly
    factor times its unpenalized self.
    """
    logits = T.as_tensor(logits)
    tgt = np.asarray(list(targets), dtype=np.int64)
    if logits.ndim != 2 or tgt.ndim != 1 or logits.shape[0] != tgt.shape[0]:
        raise ContractError(
            f"teacher forcing expects one target per row, got {logits.shape}"
            f" vs {tgt.shape}")
    if tgt.size == 0:
        raise ContractError("empty target sequence")
    logp = T.log_softmax(logits, axis=-1)
    nll = T.mul(T.gather_rows(logp, tgt), -1.0)
    w = np.ones(tgt.shape[0], dtype=np.float32)
    if not generated_has_chg:
        w[tgt == chg_id] = weights.chg_absence_factor
    return T.div(T.sum_(T.mul(nll, w)), float(tgt.shape[0]))


def bce_mask_loss(pred, gt) -> Tensor:
    """Mean binary cross-entropy with probabilities clamped to
    [1e-7, 1-1e-7]."""
    p = _as_probs(pred)
    m = T.as_tensor(gt)
    if p.shape != m.shape:
        raise DimensionError(f"mask shapes differ: {p.shape} vs {m.shape}")
    p = T.clip(p, PROB_CLAMP, 1.0 - PROB_CLAMP)
    ll = T.add(T.mul(m, T.log(p)), T.mul(T.sub(1.0, m), T.log(T.sub(1.0, p))))
    return T.mul(T.mean_(ll), -1.0)


def dice_mask_loss(pred, gt, eps: float = 1.0) -> Tensor:
    """1 - (2*sum(pred*gt) + eps) / (sum(pred) + sum(gt) + eps)."""
    p = _as_probs(pred)
    m = T.as_tensor(gt)
    if p.shape != m.shape:
        raise DimensionError(f"mask shapes differ: {p.shape} vs {m.shape}")
    num = T.add(T.mul(T.sum_(T.mul(p, m)), 2.0), eps)
    den = T.add(T.add(T.sum_(p), T.sum_(m)), eps)
    return T.sub(1.0, T.div(num, den))


def total_loss(ce, bce, dice, weights: LossWeights = LossWeights()) -> Tensor:
    """lam_ce*ce + lam_bce*bce + lam_dice*dice with finiteness checks."""
    parts = {"ce": T.as_tensor(ce), "bce": T.as_tensor(bce),
             "dice": T.as_tensor(dice)}
    for name, part in parts.items():
        if not np.all(np.isfinite(part.data)):
            raise DomainError(f"{name} loss is not finite")
    return T.add(T.add(T.mul(parts["ce"], weights.lam_ce),
                       T.mul(parts["bce"], weights.lam_bce)),
                 T.mul(parts["dice"], weights.lam_dice))


# ---------------------------------------------------------------------------
# metrics
# ---------------------------------------------------------------------------

def confusion(pred, gt) -> ConfusionCounts:
    p = np.asarray(pred)
    g = np.asarray(gt)
    if p.shape != g.shape:
        raise DimensionError(f"mask shapes differ: {p.shape} vs {g.shape}")
    if not (np.isin(p, (0, 1)).all() and np.isin(g, (0, 1)).all()):
        raise ContractError("confusion expects binary masks")
    p = p.astype(bool)
    g = g.astype(bool)
    return ConfusionCounts(tp=int(np.sum(p & g)), fp=int(np.sum(p & ~g)),
                           tn=int(np.sum(~p & ~g)), fn=int(np.sum(~p & g)))


def metrics(c: ConfusionCounts, paper_literal: bool = False) -> dict:
    """precision, recall, f1, oa, iou, kappa plus guard flags.

    Guarded denominators report the metric as 0.0 and add a flag naming the
    degenerate quantity instead of raising.
    """
    flags: list[str] = []

    def ratio(num: int, den: int, flag: str) -> float:
        if den == 0:
            flags.append(flag)
            return 0.0
        return num / den

    n = c.total
    precision = ratio(c.tp, c.tp + c.fp, "no_positive_predictions")
    recall = ratio(c.tp, c.tp + c.fn, "no_positive_ground_truth")
    if precision + recall > 0:
        f1 = 2 * precision * recall / (precision + recall)
    else:
        flags.append("f1_undefined")
        f1 = 0.0
    oa = ratio(c.tp + c.tn, n, "empty_masks")
    if paper_literal:
        iou = ratio(c.tp, c.tp + c.tn + c.fp, "iou_denominator_zero")
        pe_num = (c.tp + c.fp) * (c.tp + c.fn) + (c.tn + c.fn) + (c.tn + c.fp)
    else:
        iou = ratio(c.tp, c.tp + c.fp + c.fn, "iou_denominator_zero")
        pe_num = (c.tp + c.fp) * (c.tp + c.fn) + (c.tn + c.fn) * (c.tn + c.fp)
    if n == 0:
        flags.append("empty_masks")
        kappa = 0.0
    else:
        p0 = (c.tp + c.tn) / n
        pe = pe_num / (n * n)
        if pe == 1.0:
            flags.append("degenerate_marginals")
            kappa = 0.0
        else:
            kappa = (p0 - pe) / (1.0 - pe)
    return {"precision": precision, "recall": recall, "f1": f1, "oa": oa,
            "iou": iou, "kappa": kappa, "flags": flags}


def metrics_report(counts: ConfusionCounts, n_samples: int,
                   paper_literal: bool = False) -> dict:
    """The JSON-ready evaluation payload."""
    m = metrics(counts, paper_literal=paper_literal)
    return {"f1": m["f1"], "precision": m["precision"], "recall": m["recall"],
            "oa": m["oa"], "iou": m["iou"], "kappa": m["kappa"],
            "n_samples": n_samples, "flags": m["flags"]}
