"""Full model assembly: vision towers, language core, fusion, mask head.

One ReasonCD object owns every submodule plus the vocabulary, and exposes the
teacher-forced training forward, the free-running predict path, and the
checkpoint container. The language base is frozen at construction; low-rank
adapters and the embedding table stay trainable alongside the vision, fusion,
and mask stacks.
"""

from __future__ import annotations

import hashlib
import json
import os
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from . import prompt as pr
from . import tensor as T
from . import tokenizer as tok
from .fusion import FusionConfig, FusionModule
from .llm import (Decoder, DecoderConfig, extract_chg_embedding, greedy_decode)
from .lora import attach_adapters
from .losses_metrics import (LossWeights, bce_mask_loss, ce_text_loss,
                             dice_mask_loss, total_loss)
from .mask_decoder import MaskDecoder, MaskDecoderConfig, binarize
from .nn import Module, Parameter
from .tensor import ContractError, Tensor
from .tokenizer import Vocabulary
from .vision import (VisionConfig, VisionEncoder, VisionProjection, implant,
                     preprocess)

IMG_ROW_ID = -1  # sentinel id for implanted feature rows


@dataclass(frozen=True)
class PipelineConfig:
    decoder: DecoderConfig = field(default_factory=DecoderConfig)
    vision: VisionConfig = field(default_factory=VisionConfig)
    fusion: FusionConfig = field(default_factory=FusionConfig)
    mask: MaskDecoderConfig = field(default_factory=MaskDecoderConfig)
    lora_rank: int = 8
    threshold: float = 0.5
    max_answer_tokens: int = 48
    fusion_bypass: bool = False

    def __post_init__(self):
        if self.vision.d_v != self.fusion.d_v:
            raise ContractError("vision width disagrees with fusion d_v")
        if self.vision.image_size != self.fusion.image_size:
            raise ContractError("vision and fusion expect different image sizes")
        if self.fusion.grid != self.mask.grid:
            raise ContractError("fusion grid disagrees with mask decoder grid")
        if self.fusion.channels != self.mask.d_dec:
            raise ContractError("fused channels disagree with mask decoder width")
        if not 0.0 < self.threshold < 1.0:
            raise ContractError("threshold must lie in (0, 1)")
        if self.max_answer_tokens < 1:
            raise ContractError("max_answer_tokens must be positive")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "PipelineConfig":
        return cls(decoder=DecoderConfig(**d["decoder"]),
                   vision=VisionConfig(**d["vision"]),
                   fusion=FusionConfig(**d["fusion"]),
                   mask=MaskDecoderConfig(**d["mask"]),
                   lora_rank=d["lora_rank"], threshold=d["threshold"],
                   max_answer_tokens=d["max_answer_tokens"],
                   fusion_bypass=d["fusion_bypass"])


@dataclass
class PredictResult:
    answer_text: str
    has_chg: bool
    probs: np.ndarray | None
    mask: np.ndarray | None
    prompt_text: str
    timings: dict


class ReasonCD(Module):
    """The assembled pipeline. All initialization randomness flows from one
    seed, so construction is reproducible."""

    def __init__(self, cfg: PipelineConfig, vocab: Vocabulary, seed: int = 0):
        super().__init__()
        self.cfg = cfg
        self.vocab = vocab
        rng = np.random.default_rng(seed)
        elt = Parameter(tok.init_embedding_table(
            vocab.size, cfg.decoder.d_text, rng))
        self.vision_enc = VisionEncoder(cfg.vision, rng)
        self.vision_proj = VisionProjection(cfg.vision.d_v,
                                            cfg.decoder.d_text, rng)
        self.decoder = Decoder(cfg.decoder, elt, rng)
        self.adapters = attach_adapters(
            self.decoder, cfg.lora_rank, seed=int(rng.integers(0, 2 ** 31)))
        self.fusion = FusionModule(cfg.fusion, rng, bypass=cfg.fusion_bypass)
        self.mask_dec = MaskDecoder(cfg.mask, cfg.decoder.d_text,
                                    cfg.fusion.channels, rng)
        self._freeze_language_base()
        self.bos = vocab.special_id(tok.BOS)
        self.eos = vocab.special_id(tok.EOS)
        self.chg = vocab.special_id(tok.CHG)
        self.t1 = vocab.special_id(tok.IMG_T1)
        self.t2 = vocab.special_id(tok.IMG_T2)

    @property
    def elt(self) -> Parameter:
        return self.decoder.elt

    def _freeze_language_base(self):
        for name, p in self.decoder.named_parameters():
            if ".lora_" not in name and name != "elt":
                p.track_grad = False

    def trainable_parameters(self, freeze_vision: bool = False):
        """(name, Parameter) pairs the optimizer may touch: adapters, the
        embedding table, and the vision/fusion/mask stacks."""
        out = []
        for name, p in self.named_parameters():
            if name.startswith("decoder."):
                keep = ".lora_" in name or name == "decoder.elt"
            elif name.startswith("vision_enc."):
                keep = not freeze_vision
            else:
                keep = True
            if keep:
                out.append((name, p))
        return out

    # -- encoding ------------------------------------------------------------

    def encode_pair(self, img1: np.ndarray, img2: np.ndarray):
        """Preprocess both images once; returns (x1, x2, v1, v2, f1, f2):
        normalized inputs, encoder grids, and text-width implant features."""
        s = self.cfg.vision.image_size
        x1, x2 = preprocess(img1, s), preprocess(img2, s)
        v1 = self.vision_enc(x1)
        v2 = self.vision_enc(x2)
        return x1, x2, v1, v2, self.vision_proj(v1), self.vision_proj(v2)

    def implant_sequence(self, ids, f1, f2):
        """Embed a token sequence and splice the image features over the two
        placeholder rows. Returns (embedded sequence, row-aligned id list
        with sentinel ids on feature rows)."""
        emb = T.embedding(self.elt, ids)
        out = implant(emb, ids, self.t1, self.t2, f1, f2)
        num_p = f1.shape[0]
        impl_ids = []
        for i in ids:
            if i == self.t1 or i == self.t2:
                impl_ids.extend([IMG_ROW_ID] * num_p)
            else:
                impl_ids.append(i)
        return out, impl_ids

    def prompt_ids(self, question: str, explain: bool = False):
        p = pr.build_prompt(question, explain=explain)
        return [self.bos] + tok.tokenize(p.text, self.vocab), p

    # -- training forward ----------------------------------------------------

    def forward_train(self, img1, img2, question, answer, gt_mask,
                      explain: bool = False,
                      weights: LossWeights | None = None) -> dict:
        """Teacher-forced step: text loss over the answer span plus mask
        losses when the target answer carries the change marker. The absence
        penalty keys off a free-running greedy decode of the same step."""
        weights = weights or LossWeights()
        ids_prompt, _ = self.prompt_ids(question, explain)
        ids_answer = tok.tokenize(answer, self.vocab) + [self.eos]
        x1, x2, v1, v2, f1, f2 = self.encode_pair(img1, img2)
        impl_emb, impl_ids = self.implant_sequence(ids_prompt + ids_answer,
                                                   f1, f2)
        logits, hidden = self.decoder(impl_emb)
        n = impl_emb.shape[0]
        k = len(ids_answer)

        gen = greedy_decode(self.decoder, Tensor(impl_emb.data[:n - k]),
                            self.eos, self.cfg.max_answer_tokens)
        ce = ce_text_loss(logits[n - k - 1:n - 1], ids_answer, self.chg,
                          weights, generated_has_chg=self.chg in gen)

        probs = None
        if self.chg in ids_answer:
            chg_h = extract_chg_embedding(hidden, impl_ids, self.chg)
            fused = self.fusion(x1, x2, v1, v2)
            pm = self.mask_dec(chg_h, fused)
            gt = Tensor(np.asarray(gt_mask, dtype=np.float32))
            bce = bce_mask_loss(pm, gt)
            dice = dice_mask_loss(pm, gt)
            probs = pm
        else:
            bce = Tensor(np.float32(0.0))
            dice = Tensor(np.float32(0.0))
        total = total_loss(ce, bce, dice, weights)
        return {"total": total, "ce": ce, "bce": bce, "dice": dice,
                "gen_ids": gen, "probs": probs}

    # -- inference -----------------------------------------------------------

    def predict(self, img1, img2, question: str, explain: bool = False,
                threshold: float | None = None) -> PredictResult:
        """Free-running inference; deterministic given the checkpoint."""
        t0 = time.perf_counter()
        with T.no_grad():
            ids_prompt, p = self.prompt_ids(question, explain)
            x1, x2, v1, v2, f1, f2 = self.encode_pair(img1, img2)
            impl_emb, impl_ids = self.implant_sequence(ids_prompt, f1, f2)
            t1 = time.perf_counter()
            gen = greedy_decode(self.decoder, impl_emb, self.eos,
                                self.cfg.max_answer_tokens)
            answer_text = tok.decode(gen, self.vocab)
            has_chg = self.chg in gen
            t2 = time.perf_counter()
            probs = mask = None
            if has_chg:
                full = T.concat([impl_emb, T.embedding(self.elt, gen)], axis=0)
                _, hidden = self.decoder(full)
                chg_h = extract_chg_embedding(hidden, impl_ids + gen, self.chg)
                fused = self.fusion(x1, x2, v1, v2)
                pm = self.mask_dec(chg_h, fused)
                probs = pm.probs.data.copy()
                mask = binarize(pm, threshold if threshold is not None
                                else self.cfg.threshold)
            t3 = time.perf_counter()
        return PredictResult(
            answer_text=answer_text, has_chg=has_chg, probs=probs, mask=mask,
            prompt_text=p.text,
            timings={"encode_s": t1 - t0, "decode_s": t2 - t1,
                     "mask_s": t3 - t2})


# ---------------------------------------------------------------------------
# checkpoint container
# ---------------------------------------------------------------------------

def _sha256(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def _template_payload() -> str:
    return json.dumps({
        "template_version": pr.TEMPLATE_VERSION,
        "prompt_template": pr.PROMPT_TEMPLATE,
        "result_request": pr.RESULT_REQUEST,
        "result_request_explain": pr.RESULT_REQUEST_EXPLAIN,
        "answer_template": pr.ANSWER_TEMPLATE,
        "answer_no_change": pr.ANSWER_NO_CHANGE,
    }, indent=2, sort_keys=True)


def config_hash(cfg: PipelineConfig) -> str:
    return _sha256(json.dumps(cfg.to_dict(), sort_keys=True).encode())


def save_checkpoint(out_dir, model: ReasonCD, step: int = 0, epoch: int = 0,
                    val_metrics: dict | None = None) -> None:
    """Directory layout: weights.npz, adapters.npz, vocab.json,
    template.json, meta.json. Adapter tensors ride in their own archive so
    the base can ship without fine-tuned deltas."""
    os.makedirs(out_dir, exist_ok=True)
    state = model.state_dict()
    base = {k: v for k, v in state.items() if ".lora_" not in k}
    adapters = {k: v for k, v in state.items() if ".lora_" in k}
    np.savez(os.path.join(out_dir, "weights.npz"), **base)
    np.savez(os.path.join(out_dir, "adapters.npz"), **adapters)
    model.vocab.save(os.path.join(out_dir, "vocab.json"))
    with open(os.path.join(out_dir, "template.json"), "w",
              encoding="utf-8") as f:
        f.write(_template_payload())
    meta = {
        "step": step,
        "epoch": epoch,
        "val_metrics": val_metrics or {},
        "config": model.cfg.to_dict(),
        "config_hash": config_hash(model.cfg),
        "template_version": pr.TEMPLATE_VERSION,
        "template_hash": _sha256(_template_payload().encode()),
        "vocab_hash": _sha256(model.vocab.to_json().encode()),
    }
    with open(os.path.join(out_dir, "meta.json"), "w", encoding="utf-8") as f:
        json.dump(meta, f, indent=2)


def load_checkpoint(ckpt_dir) -> tuple[ReasonCD, dict]:
    """Rebuild the model and refuse mismatched config/template/vocab."""
    with open(os.path.join(ckpt_dir, "meta.json"), "r", encoding="utf-8") as f:
        meta = json.load(f)
    cfg = PipelineConfig.from_dict(meta["config"])
    if config_hash(cfg) != meta["config_hash"]:
        raise ContractError("checkpoint config hash mismatch")
    if meta["template_version"] != pr.TEMPLATE_VERSION:
        raise ContractError(
            f"checkpoint template version {meta['template_version']} != "
            f"runtime {pr.TEMPLATE_VERSION}")
    if _sha256(_template_payload().encode()) != meta["template_hash"]:
        raise ContractError("checkpoint template text differs from runtime")
    vocab = Vocabulary.load(os.path.join(ckpt_dir, "vocab.json"))
    if _sha256(vocab.to_json().encode()) != meta["vocab_hash"]:
        raise ContractError("checkpoint vocabulary hash mismatch")
    model = ReasonCD(cfg, vocab, seed=0)
    state = {}
    for name in ("weights.npz", "adapters.npz"):
        with np.load(os.path.join(ckpt_dir, name)) as z:
            state.update({k: z[k] for k in z.files})
    model.load_state_dict(state)
    return model, meta
