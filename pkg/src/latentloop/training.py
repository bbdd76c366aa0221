"""Few-shot adaptation objective and optimiser.

The loss is mean cross-entropy of step-K logits over the candidate classes
plus an anchor `lambda * (1 - mean cos(v0, vK))` that penalises image-side
drift from the frozen zero-shot embedding.  v0 has no gradient path (it is a
function of frozen weights only), so the anchor shapes vK alone.  Class-
prompt trajectories are computed once per batch and shared by its examples.
"""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import tensor as T
from .encoder import EncoderWeights
from .refinement import ProjectorBank, RefineConfig, run_refinement
from .rng import substream


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-4
    batch_size: int = 4
    epochs: int = 1
    anchor_weight: float = 1.0
    weight_decay: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0

    def __post_init__(self):
        if self.lr < 0 or self.batch_size < 1 or self.epochs < 0:
            raise ValueError("bad optimiser settings")
        if self.anchor_weight < 0:
            raise ValueError(f"anchor weight must be >= 0, got {self.anchor_weight}")


def class_logits(v: T.Tensor, text_matrix: T.Tensor, tau: float) -> T.Tensor:
    """Scaled similarities of one image embedding against class text rows."""
    if v.ndim != 1 or text_matrix.ndim != 2 or text_matrix.shape[1] != v.shape[0]:
        raise ValueError(f"logits need (C, d) rows against a (d,) vector, "
                         f"got {text_matrix.shape} and {v.shape}")
    return T.mul(T.matmul(text_matrix, v), tau)


def adaptation_loss(batch, prompts, weights: EncoderWeights, bank: ProjectorBank,
                    cfg: RefineConfig, tcfg: TrainConfig):
    """Classification-plus-anchor loss for one batch.

    `batch` is a list of (TokenSequence, local label) pairs; `prompts` is the
    candidate class prompt list the labels index into.  Returns the scalar
    loss tensor plus a float breakdown for logging.
    """
    if not batch:
        raise ValueError("empty batch")
    text_rows = []
    for prompt in prompts:
        trace = run_refinement(prompt, weights, bank, cfg)
        text_rows.append(trace.embeddings[-1])
    text_matrix = T.stack_rows(text_rows)
    tau = weights.config.logit_scale

    ce_terms = []
    cos_terms = []
    identical = 0
    for x, label in batch:
        trace = run_refinement(x, weights, bank, cfg)
        v = trace.embeddings[-1]
        ce_terms.append(T.cross_entropy(class_logits(v, text_matrix, tau), label))
        v0 = trace.embeddings[0]
        if v is v0:
            identical += 1  # no refinement on this side: cos contributes exact 1
        else:
            cos_terms.append(T.cosine_similarity(v0, v))

    n = len(batch)
    ce_sum = ce_terms[0]
    for term in ce_terms[1:]:
        ce_sum = ce_sum + term
    loss_cls = ce_sum * (1.0 / n)

    if cos_terms:
        cos_sum = cos_terms[0]
        for term in cos_terms[1:]:
            cos_sum = cos_sum + term
        mean_cos = (cos_sum + float(identical)) * (1.0 / n)
    else:
        mean_cos = T.Tensor(1.0)
    anchor = (1.0 - mean_cos) * tcfg.anchor_weight
    total = loss_cls + anchor
    parts = {
        "loss_total": total.item(),
        "loss_cls": loss_cls.item(),
        "loss_anchor": anchor.item(),
        "mean_cos_v0_vK": mean_cos.item(),
    }
    return total, parts


class AdamW:
    """Decoupled weight decay Adam; decay multiplies the parameter before the
    moment update, matching the reference single-tensor recipe."""

    def __init__(self, params, tcfg: TrainConfig):
        self.params = list(params)
        self.tcfg = tcfg
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]
        self.t = 0

    def step(self, grads: dict, lr_scale: float = 1.0) -> None:
        c = self.tcfg
        lr = c.lr * lr_scale
        self.t += 1
        bc1 = 1.0 - c.beta1 ** self.t
        bc2 = 1.0 - c.beta2 ** self.t
        for i, p in enumerate(self.params):
            g = grads.get(p)
            if g is None:
                g = np.zeros_like(p.data)
            new = p.data * (1.0 - lr * c.weight_decay)
            self.m[i] = c.beta1 * self.m[i] + (1.0 - c.beta1) * g
            self.v[i] = c.beta2 * self.v[i] + (1.0 - c.beta2) * (g * g)
            denom = np.sqrt(self.v[i] / bc2) + c.eps
            p.data = new - (lr / bc1) * self.m[i] / denom


LOG_HEADER = "step,loss_total,loss_cls,loss_anchor,mean_cos_v0_vK"


def train_few_shot(task, weights: EncoderWeights, bank: ProjectorBank,
                   cfg: RefineConfig, tcfg: TrainConfig):
    """Adapt the projectors on a task's support set (base classes only).

    One Fisher-Yates shuffle stream (derived from the run seed) orders the
    support set each epoch; the trailing partial batch is kept.  The frozen
    towers are never touched.  Returns the bank and the per-step log rows.
    """
    if not weights.frozen:
        raise ValueError("backbone must be frozen before adaptation")
    classes = sorted(task.base_classes)
    local = {c: i for i, c in enumerate(classes)}
    prompts = [task.class_prompts[c] for c in classes]
    examples = [(x, local[c]) for x, c in task.support]
    if not examples:
        raise ValueError("task has no support examples")

    optimizer = AdamW(bank.trainable(), tcfg)
    shuffle_rng = substream(tcfg.seed, "train.shuffle")
    rows = []
    step = 0
    for _ in range(tcfg.epochs):
        order = list(range(len(examples)))
        shuffle_rng.shuffle(order)
        for start in range(0, len(order), tcfg.batch_size):
            batch = [examples[i] for i in order[start : start + tcfg.batch_size]]
            total, parts = adaptation_loss(batch, prompts, weights, bank, cfg, tcfg)
            grads = T.backward(total)
            optimizer.step(grads)
            step += 1
            rows.append({"step": step, **parts})
    return bank, rows


def write_training_log(path, rows) -> None:
    lines = [LOG_HEADER]
    for row in rows:
        lines.append(
            f"{row['step']},{row['loss_total']:.10g},{row['loss_cls']:.10g},"
            f"{row['loss_anchor']:.10g},{row['mean_cos_v0_vK']:.10g}"
        )
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")
