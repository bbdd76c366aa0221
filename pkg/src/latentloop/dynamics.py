"""Per-step instrumentation of the refinement trajectory.

Everything here reads the step-indexed logits recorded during evaluation, or
re-runs single examples with a gradient-tracked input embedding for
input-sensitivity probes (Jacobian norms, patch contribution maps).
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import tensor as T
from .encoder import VISION, EncoderWeights, embed
from .refinement import ProjectorBank, RefineConfig, run_refinement

KL_EPS = 1e-12
GROUP_ORDER = ("correct-to-correct", "wrong-to-correct",
               "correct-to-wrong", "wrong-to-wrong")


def softmax_rows(logits: np.ndarray) -> np.ndarray:
    m = logits.max(axis=-1, keepdims=True)
    e = np.exp(logits - m)
    return e / e.sum(axis=-1, keepdims=True)


@dataclass
class StepMetrics:
    step: int
    accuracy: float          # percent
    confidence: float        # mean softmax probability of the true class
    brier: float             # mean multi-class Brier score
    jacobian_norm: float | None = None


def step_metrics(traces, jacobians: np.ndarray | None = None) -> list:
    """Accuracy / confidence / Brier per refinement step.

    `jacobians`, when given, is an (n_examples, K+1) array of per-example
    Jacobian norms whose step-wise mean fills the last field.
    """
    if not traces:
        raise ValueError("step_metrics needs at least one trace")
    n_steps = traces[0].step_logits.shape[0]
    out = []
    for k in range(n_steps):
        logits = np.stack([t.step_logits[k] for t in traces])
        labels = np.array([t.label for t in traces])
        probs = softmax_rows(logits)
        acc = 100.0 * float((logits.argmax(axis=1) == labels).mean())
        conf = float(probs[np.arange(len(traces)), labels].mean())
        onehot = np.zeros_like(probs)
        onehot[np.arange(len(traces)), labels] = 1.0
        brier = float(((probs - onehot) ** 2).sum(axis=1).mean())
        jac = float(jacobians[:, k].mean()) if jacobians is not None else None
        out.append(StepMetrics(k, acc, conf, brier, jac))
    return out


def jacobian_norms(x, target_class: int, weights: EncoderWeights,
                   bank: ProjectorBank | None, cfg: RefineConfig,
                   text_steps: np.ndarray) -> np.ndarray:
    """Frobenius norm of d(step-k target logit) / d(input embedding), per step.

    One gradient-tracked forward; one backward per step.  `text_steps` holds
    the per-step candidate text embeddings ((K+1, C, d), constants here).
    """
    seq0 = embed(x, weights).detach(requires_grad=True)
    trace = run_refinement(x, weights, bank, cfg, seq0=seq0)
    tau = weights.config.logit_scale
    out = np.zeros(cfg.k_steps + 1)
    for k in range(cfg.k_steps + 1):
        t_row = T.Tensor(text_steps[k, target_class])
        logit = T.mul(T.matmul(t_row, trace.embeddings[k]), tau)
        grad = T.backward(logit).get(seq0)
        if grad is not None:
            out[k] = math.sqrt(float((grad * grad).sum()))
    return out


def jacobian_norm(x, target_class: int, weights, bank, cfg, text_steps) -> float:
    """Final-step Jacobian norm of one example."""
    return float(jacobian_norms(x, target_class, weights, bank, cfg, text_steps)[-1])


def kl_to_step0(step_logits: np.ndarray) -> np.ndarray:
    """KL(p_k || p_0) in nats for each step; exactly zero at k = 0."""
    probs = softmax_rows(step_logits)
    ref = np.log(np.maximum(probs[0], KL_EPS))
    logs = np.log(np.maximum(probs, KL_EPS))
    return (probs * (logs - ref)).sum(axis=-1)


def transition_group(trace) -> str:
    first = int(np.argmax(trace.step_logits[0])) == trace.label
    last = int(np.argmax(trace.step_logits[-1])) == trace.label
    if first and last:
        return "correct-to-correct"
    if not first and last:
        return "wrong-to-correct"
    if first and not last:
        return "correct-to-wrong"
    return "wrong-to-wrong"


def group_transitions(traces) -> dict:
    """Group examples by (step-0 correct, step-K correct) and average the
    per-step KL divergence within each group.  Empty groups keep count 0 and
    no mean."""
    if not traces:
        raise ValueError("group_transitions needs at least one trace")
    n_steps = traces[0].step_logits.shape[0]
    members: dict = {g: [] for g in GROUP_ORDER}
    for trace in traces:
        members[transition_group(trace)].append(kl_to_step0(trace.step_logits))
    out = {}
    for g in GROUP_ORDER:
        if members[g]:
            out[g] = {"count": len(members[g]),
                      "mean_kl": np.stack(members[g]).mean(axis=0)}
        else:
            out[g] = {"count": 0, "mean_kl": np.full(n_steps, np.nan)}
    return out


def contribution_map(x, target_class: int, weights: EncoderWeights,
                     bank: ProjectorBank | None, cfg: RefineConfig,
                     text_steps: np.ndarray) -> np.ndarray:
    """Per-patch saliency per step: |d logit / d patch embedding| summed over
    the embedding dim, scaled so the largest entry is 1 (all-zero maps stay
    zero).  The CLS row is not a patch and is excluded."""
    if x.modality != VISION:
        raise ValueError("contribution maps are defined for vision inputs")
    seq0 = embed(x, weights).detach(requires_grad=True)
    trace = run_refinement(x, weights, bank, cfg, seq0=seq0)
    tau = weights.config.logit_scale
    n_patches = len(x) - 1
    maps = np.zeros((cfg.k_steps + 1, n_patches))
    for k in range(cfg.k_steps + 1):
        t_row = T.Tensor(text_steps[k, target_class])
        logit = T.mul(T.matmul(t_row, trace.embeddings[k]), tau)
        grad = T.backward(logit).get(seq0)
        if grad is None:
            continue
        scores = np.abs(grad[1:]).sum(axis=1)
        peak = scores.max()
        maps[k] = scores / peak if peak > 0 else scores
    return maps


# -- artifact writers ---------------------------------------------------------

METRICS_HEADER = "setting,dataset,step,accuracy,confidence,brier,jacobian_norm"
TRANSITIONS_HEADER = "setting,group,step,mean_kl,count"


def write_metrics_csv(path, rows) -> None:
    """Rows: (setting, dataset, StepMetrics)."""
    lines = [METRICS_HEADER]
    for setting, dataset, m in rows:
        jac = "" if m.jacobian_norm is None else f"{m.jacobian_norm:.8g}"
        lines.append(f"{setting},{dataset},{m.step},{m.accuracy:.2f},"
                     f"{m.confidence:.6f},{m.brier:.6f},{jac}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def write_transitions_csv(path, rows) -> None:
    """Rows: (setting, groups dict from group_transitions)."""
    lines = [TRANSITIONS_HEADER]
    for setting, groups in rows:
        for g in GROUP_ORDER:
            info = groups[g]
            n_steps = len(info["mean_kl"])
            for k in range(n_steps):
                mean = "" if info["count"] == 0 else f"{info['mean_kl'][k]:.8g}"
                lines.append(f"{setting},{g},{k},{mean},{info['count']}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def write_pgm(path, scores: np.ndarray) -> None:
    """Plain (P2) PGM of one contribution map, greyscale 0..255.

    A square patch count renders as a square grid, anything else as one row.
    """
    n = scores.shape[0]
    side = math.isqrt(n)
    width, height = (side, side) if side * side == n else (n, 1)
    values = np.rint(np.clip(scores, 0.0, 1.0) * 255).astype(int)
    lines = ["P2", f"{width} {height}", "255"]
    for r in range(height):
        row = values[r * width : (r + 1) * width]
        lines.append(" ".join(str(v) for v in row))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")
