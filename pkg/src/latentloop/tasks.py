"""Synthetic few-shot classification tasks for a dual encoder.

Each class is a unit prototype vector in a small latent space.  Images are a
CLS token plus patch tokens obtained by quantising noisy copies of the
prototype against a fixed vision codebook; the class prompt quantises the
prototype itself against per-position word codebooks, followed by EOS.  The
codebooks depend only on `codebook_seed`, so tasks drawn with different
seeds share geometry and a backbone pretrained on one pool of classes
transfers zero-shot to held-out classes.
"""
from __future__ import annotations

from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from . import tensor as T
from .container import load_arrays, save_arrays
from .encoder import (CLS_ID, TEXT, VISION, EncoderConfig, EncoderWeights,
                      TokenSequence)
from .refinement import ProjectorBank, RefineConfig, run_refinement
from .rng import SplitMix64, substream


@dataclass(frozen=True)
class SyntheticTaskSpec:
    n_classes: int = 16
    proto_dim: int = 8
    noise_scale: float = 0.25
    shots: int = 16
    queries_per_class: int = 8
    proto_jitter: float = 0.0     # distribution shift: prototype perturbation
    noise_inflation: float = 1.0  # distribution shift: noise multiplier
    codebook_seed: int = 1234     # quantisation geometry, shared across specs
    seed: int = 0

    def __post_init__(self):
        if self.n_classes < 1:
            raise ValueError(f"need at least one class, got {self.n_classes}")
        if self.proto_dim < 1:
            raise ValueError(f"proto_dim must be >= 1, got {self.proto_dim}")
        if self.noise_scale < 0 or self.noise_inflation < 0:
            raise ValueError("noise parameters must be non-negative")
        if self.shots < 1 or self.queries_per_class < 1:
            raise ValueError("shots and queries_per_class must be >= 1")


def _unit_rows(a: np.ndarray) -> np.ndarray:
    norms = np.sqrt((a * a).sum(axis=-1, keepdims=True))
    return a / np.maximum(norms, 1e-12)


def _quantize(latent: np.ndarray, codebook: np.ndarray) -> int:
    d = codebook - latent
    return int(np.argmin((d * d).sum(axis=1)))


class TaskSampler:
    """Stateless token samplers bound to one (spec, encoder-config) pair."""

    def __init__(self, spec: SyntheticTaskSpec, enc_cfg: EncoderConfig):
        self.spec = spec
        self.enc_cfg = enc_cfg
        p = spec.proto_dim
        vis_rng = substream(spec.codebook_seed, "codebook.vision")
        self.vision_codebook = _unit_rows(vis_rng.normals((enc_cfg.vision_vocab - 1, p)))
        n_prompt = enc_cfg.t_txt - 1
        txt_rng = substream(spec.codebook_seed, "codebook.text")
        self.word_codebooks = [
            _unit_rows(txt_rng.normals((enc_cfg.text_vocab - 1, p))) for _ in range(n_prompt)
        ]

    def prototypes(self) -> np.ndarray:
        """Unit class prototypes; `proto_jitter` shifts them off-distribution."""
        spec = self.spec
        rng = substream(spec.seed, "task.prototypes")
        protos = _unit_rows(rng.normals((spec.n_classes, spec.proto_dim)))
        if spec.proto_jitter > 0:
            shift_rng = substream(spec.seed, "task.shift")
            protos = _unit_rows(protos + spec.proto_jitter *
                                shift_rng.normals(protos.shape))
        return protos

    def prompt(self, proto: np.ndarray) -> TokenSequence:
        tokens = [_quantize(proto, cb) for cb in self.word_codebooks]
        tokens.append(self.enc_cfg.eos_id)
        return TokenSequence(TEXT, tokens, eos_index=len(tokens) - 1)

    def image(self, proto: np.ndarray, rng: SplitMix64) -> TokenSequence:
        sigma = self.spec.noise_scale * self.spec.noise_inflation
        tokens = [CLS_ID]
        for _ in range(self.enc_cfg.t_img - 1):
            latent = proto + sigma * rng.normals(self.spec.proto_dim)
            tokens.append(1 + _quantize(_unit_rows(latent), self.vision_codebook))
        return TokenSequence(VISION, tokens)


@dataclass
class FewShotTask:
    spec: SyntheticTaskSpec
    class_prompts: list          # one TokenSequence per class
    support: list                # (TokenSequence, class index), base classes only
    queries: list                # (TokenSequence, class index), all classes
    base_classes: list
    novel_classes: list

    def side_classes(self, side: str) -> list:
        if side == "base":
            classes = self.base_classes
        elif side == "novel":
            classes = self.novel_classes
        elif side == "all":
            classes = self.base_classes + self.novel_classes
        else:
            raise ValueError(f"side must be base/novel/all, got {side!r}")
        return sorted(classes)


def generate_task(spec: SyntheticTaskSpec, enc_cfg: EncoderConfig) -> FewShotTask:
    """Sample a task.  All classes start on the base side; use
    `split_base_novel` to carve out a novel side."""
    sampler = TaskSampler(spec, enc_cfg)
    protos = sampler.prototypes()
    prompts = [sampler.prompt(protos[c]) for c in range(spec.n_classes)]
    support, queries = [], []
    for c in range(spec.n_classes):
        srng = substream(spec.seed, f"task.support.{c}")
        for _ in range(spec.shots):
            support.append((sampler.image(protos[c], srng), c))
        qrng = substream(spec.seed, f"task.query.{c}")
        for _ in range(spec.queries_per_class):
            queries.append((sampler.image(protos[c], qrng), c))
    return FewShotTask(spec, prompts, support, queries,
                       base_classes=list(range(spec.n_classes)), novel_classes=[])


def split_base_novel(task: FewShotTask, fraction: float = 0.5, seed: int = 0) -> FewShotTask:
    """Partition classes into base/novel and drop novel support examples."""
    if not 0 < fraction < 1:
        raise ValueError(f"fraction must be in (0, 1), got {fraction}")
    classes = sorted(task.base_classes + task.novel_classes)
    n = len(classes)
    order = list(classes)
    substream(seed, "split").shuffle(order)
    n_base = int(round(n * fraction))
    if n >= 2:
        n_base = min(max(n_base, 1), n - 1)
    base = sorted(order[:n_base])
    novel = sorted(order[n_base:])
    base_set = set(base)
    support = [(x, c) for x, c in task.support if c in base_set]
    return FewShotTask(task.spec, task.class_prompts, support, list(task.queries),
                       base_classes=base, novel_classes=novel)


@dataclass
class EvalTrace:
    """Detached per-example record: logits for every refinement step."""

    x: TokenSequence
    label: int                   # index into the candidate class list
    step_logits: np.ndarray      # (K+1, n_candidates)
    block_evals: int


@dataclass
class EvalResult:
    accuracy: float              # percent, final step
    step_accuracy: np.ndarray    # percent per step
    traces: list
    classes: list                # global class ids backing the local labels
    text_steps: np.ndarray       # (K+1, n_candidates, d_embed) unit rows


def class_text_steps(prompts, weights, bank, cfg: RefineConfig) -> np.ndarray:
    """Per-step unit text embeddings for a candidate prompt list."""
    k = cfg.k_steps
    d = weights.config.d_embed
    out = np.empty((k + 1, len(prompts), d))
    with T.no_grad():
        for c, prompt in enumerate(prompts):
            trace = run_refinement(prompt, weights, bank, cfg)
            for step in range(k + 1):
                out[step, c] = trace.embeddings[step].data
    return out


def evaluate(task: FewShotTask, side: str, weights: EncoderWeights,
             bank: ProjectorBank | None, cfg: RefineConfig,
             k_steps: int | None = None) -> EvalResult:
    """Accuracy of step-K predictions restricted to one side's classes.

    Candidate prompts and labels cover only the requested side; step-k image
    embeddings are scored against step-k text embeddings.
    """
    if k_steps is not None:
        cfg = replace(cfg, k_steps=k_steps)
    classes = task.side_classes(side)
    if not classes:
        raise ValueError(f"side {side!r} has no classes")
    local = {c: i for i, c in enumerate(classes)}
    prompts = [task.class_prompts[c] for c in classes]
    text_steps = class_text_steps(prompts, weights, bank, cfg)
    tau = weights.config.logit_scale
    k = cfg.k_steps

    traces = []
    correct = np.zeros(k + 1)
    with T.no_grad():
        for x, c in task.queries:
            if c not in local:
                continue
            label = local[c]
            trace = run_refinement(x, weights, bank, cfg)
            logits = np.empty((k + 1, len(classes)))
            for step in range(k + 1):
                logits[step] = tau * text_steps[step] @ trace.embeddings[step].data
                if int(np.argmax(logits[step])) == label:
                    correct[step] += 1
            traces.append(EvalTrace(x, label, logits, trace.block_evals))
    if not traces:
        raise ValueError(f"no queries on side {side!r}")
    step_acc = 100.0 * correct / len(traces)
    return EvalResult(float(step_acc[k]), step_acc, traces, classes, text_steps)


def harmonic_mean(a: float, b: float) -> float:
    """Harmonic mean of two accuracies in (0, 100]."""
    for v in (a, b):
        if not 0 < v <= 100:
            raise ValueError(f"harmonic_mean needs values in (0, 100], got {v}")
    return 2.0 * a * b / (a + b)


def cross_task_protocol(source_task: FewShotTask, target_tasks: list,
                        weights: EncoderWeights, bank: ProjectorBank,
                        cfg: RefineConfig) -> dict:
    """Evaluate one adapted model on its source task and on shifted targets.

    `bank` must already be trained on the source task (all classes).  Returns
    source accuracy, per-target accuracies, and their mean.
    """
    if not target_tasks:
        raise ValueError("cross_task_protocol needs at least one target task")
    source = evaluate(source_task, "all", weights, bank, cfg).accuracy
    targets = [evaluate(t, "all", weights, bank, cfg).accuracy for t in target_tasks]
    return {
        "source_accuracy": source,
        "target_accuracies": targets,
        "target_mean": float(sum(targets) / len(targets)),
    }


# -- task files ---------------------------------------------------------------


def _tokens_matrix(items) -> np.ndarray:
    return np.array([x.token_ids for x, _ in items], dtype=np.float64)


def save_task(path, task: FewShotTask) -> None:
    """Container with token arrays plus a `key: value` sidecar (same stem,
    .meta suffix) holding the spec fields and the class split."""
    path = Path(path)
    arrays = {
        "prompt_tokens": np.array([p.token_ids for p in task.class_prompts], dtype=np.float64),
        "prompt_eos": np.array([p.eos_index for p in task.class_prompts], dtype=np.float64),
        "support_tokens": _tokens_matrix(task.support),
        "support_labels": np.array([c for _, c in task.support], dtype=np.float64),
        "query_tokens": _tokens_matrix(task.queries),
        "query_labels": np.array([c for _, c in task.queries], dtype=np.float64),
    }
    save_arrays(path, arrays)
    spec = task.spec
    lines = [
        f"n_classes: {spec.n_classes}",
        f"proto_dim: {spec.proto_dim}",
        f"noise_scale: {spec.noise_scale!r}",
        f"shots: {spec.shots}",
        f"queries_per_class: {spec.queries_per_class}",
        f"proto_jitter: {spec.proto_jitter!r}",
        f"noise_inflation: {spec.noise_inflation!r}",
        f"codebook_seed: {spec.codebook_seed}",
        f"seed: {spec.seed}",
        f"base_classes: {','.join(str(c) for c in task.base_classes)}",
        f"novel_classes: {','.join(str(c) for c in task.novel_classes)}",
    ]
    path.with_suffix(".meta").write_text("\n".join(lines) + "\n", encoding="utf-8")


def _parse_sidecar(text: str) -> dict:
    fields = {}
    for raw in text.splitlines():
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if ":" not in line:
            raise ValueError(f"sidecar line without key: value form: {raw!r}")
        key, value = line.split(":", 1)
        fields[key.strip()] = value.strip()
    return fields


def load_task(path) -> FewShotTask:
    path = Path(path)
    arrays = load_arrays(path)
    fields = _parse_sidecar(path.with_suffix(".meta").read_text(encoding="utf-8"))
    spec = SyntheticTaskSpec(
        n_classes=int(fields["n_classes"]),
        proto_dim=int(fields["proto_dim"]),
        noise_scale=float(fields["noise_scale"]),
        shots=int(fields["shots"]),
        queries_per_class=int(fields["queries_per_class"]),
        proto_jitter=float(fields["proto_jitter"]),
        noise_inflation=float(fields["noise_inflation"]),
        codebook_seed=int(fields["codebook_seed"]),
        seed=int(fields["seed"]),
    )

    def classes_of(key):
        value = fields[key]
        return [int(c) for c in value.split(",")] if value else []

    prompts = [
        TokenSequence(TEXT, row.astype(int), eos_index=int(eos))
        for row, eos in zip(arrays["prompt_tokens"], arrays["prompt_eos"])
    ]

    def pairs(tokens_key, labels_key):
        return [
            (TokenSequence(VISION, row.astype(int)), int(label))
            for row, label in zip(arrays[tokens_key], arrays[labels_key])
        ]

    return FewShotTask(spec, prompts, pairs("support_tokens", "support_labels"),
                       pairs("query_tokens", "query_labels"),
                       base_classes=classes_of("base_classes"),
                       novel_classes=classes_of("novel_classes"))
