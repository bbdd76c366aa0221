"""Iterative latent refinement over a frozen dual encoder.

A tiny trainable projector turns the previous pooled state into a "thought
token" that is prepended to the cached lower-tower activations, and the
upper blocks are re-run.  The frozen towers are split at an injection depth
j: blocks [0, j) run once per example, blocks [j, L) run once per step plus
once for the baseline, so K steps cost j + (K+1)(L - j) block evaluations.

Thought tokens are cached across steps, get no positional embedding, and are
never the readout position.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .container import load_arrays, save_arrays
from .encoder import (VISION, TEXT, BlockCounter, EncoderConfig, EncoderWeights,
                      TokenSequence, embed, pool, project, run_blocks)
from .rng import substream

SHARING_MODES = ("shared", "per_step", "per_layer", "per_layer_step")


@dataclass(frozen=True)
class RefineConfig:
    injection_depths: tuple = (7,)
    k_steps: int = 4
    rank: int = 1
    sharing: str = "shared"
    modalities: tuple = (VISION, TEXT)

    def __post_init__(self):
        depths = tuple(int(d) for d in self.injection_depths)
        object.__setattr__(self, "injection_depths", depths)
        object.__setattr__(self, "modalities", tuple(self.modalities))
        if not depths:
            raise ValueError("need at least one injection depth")
        if any(b <= a for a, b in zip(depths, depths[1:])):
            raise ValueError(f"injection depths must be strictly increasing, got {depths}")
        if any(d < 0 for d in depths):
            raise ValueError(f"injection depths must be non-negative, got {depths}")
        if self.k_steps < 0:
            raise ValueError(f"k_steps must be >= 0, got {self.k_steps}")
        if self.rank < 1:
            raise ValueError(f"rank must be >= 1, got {self.rank}")
        if self.sharing not in SHARING_MODES:
            raise ValueError(f"sharing must be one of {SHARING_MODES}, got {self.sharing!r}")
        if not self.modalities or any(m not in (VISION, TEXT) for m in self.modalities):
            raise ValueError(f"modalities must be a non-empty subset of (vision, text), got {self.modalities}")
        if len(set(self.modalities)) != len(self.modalities):
            raise ValueError(f"duplicate modalities in {self.modalities}")


@dataclass
class Projector:
    """One thought projector: LayerNorm affine + rank-r two-layer MLP."""

    modality: str
    depth_index: int
    step_index: int
    gamma: T.Tensor
    beta: T.Tensor
    w1: T.Tensor
    b1: T.Tensor
    w2: T.Tensor
    b2: T.Tensor

    def fields(self):
        return (("gamma", self.gamma), ("beta", self.beta), ("w1", self.w1),
                ("b1", self.b1), ("w2", self.w2), ("b2", self.b2))


def _canonical_key(cfg: RefineConfig, modality: str, depth_index: int, step_index: int):
    if cfg.sharing == "shared":
        return modality, 0, 0
    if cfg.sharing == "per_step":
        return modality, 0, step_index
    if cfg.sharing == "per_layer":
        return modality, depth_index, 0
    return modality, depth_index, step_index


def _canonical_grid(cfg: RefineConfig):
    n_depth = len(cfg.injection_depths) if cfg.sharing in ("per_layer", "per_layer_step") else 1
    n_step = cfg.k_steps if cfg.sharing in ("per_step", "per_layer_step") else 1
    return n_depth, n_step


class ProjectorBank:
    """All projector instances for a refinement config, with sharing ties."""

    def __init__(self, cfg: RefineConfig, instances: dict):
        self.cfg = cfg
        self.instances = instances  # canonical key -> Projector

    def trainable(self) -> list[T.Tensor]:
        out = []
        for key in sorted(self.instances):
            out.extend(t for _, t in self.instances[key].fields())
        return out

    def pack(self, depths: tuple) -> dict[str, np.ndarray]:
        arrays = {}
        for (modality, di, si), proj in sorted(self.instances.items()):
            prefix = f"phi.{modality}.{depths[di]}.{si}."
            for field, t in proj.fields():
                arrays[prefix + field] = t.data
        return arrays


def init_projector_bank(cfg: RefineConfig, enc_cfg: EncoderConfig, seed: int,
                        std: float = 0.02) -> ProjectorBank:
    """Fresh trainable projectors: Gaussian weight matrices, zero biases,
    identity LayerNorm affine.  One substream per array name."""
    n_depth, n_step = _canonical_grid(cfg)
    instances = {}
    for modality in cfg.modalities:
        d = enc_cfg.width(modality)
        r = cfg.rank
        for di in range(n_depth):
            for si in range(n_step):
                prefix = f"phi.{modality}.{cfg.injection_depths[di]}.{si}."

                def gauss(field, shape):
                    rng = substream(seed, "init." + prefix + field)
                    return T.Tensor(rng.normals(shape, std), requires_grad=True)

                instances[(modality, di, si)] = Projector(
                    modality, di, si,
                    gamma=T.Tensor(np.ones(d), requires_grad=True),
                    beta=T.Tensor(np.zeros(d), requires_grad=True),
                    w1=gauss("w1", (r, d)),
                    b1=T.Tensor(np.zeros(r), requires_grad=True),
                    w2=gauss("w2", (d, r)),
                    b2=T.Tensor(np.zeros(d), requires_grad=True),
                )
    return ProjectorBank(cfg, instances)


def select_projector(bank: ProjectorBank, modality: str, depth_index: int,
                     step_index: int) -> Projector:
    """Resolve the projector instance for (depth, step) under the sharing mode.

    `depth_index` indexes into cfg.injection_depths; `step_index` is the
    zero-based refinement step producing thought z^(step_index+1).
    """
    cfg = bank.cfg
    if not 0 <= depth_index < len(cfg.injection_depths):
        raise IndexError(f"depth index {depth_index} outside {cfg.injection_depths}")
    if cfg.k_steps and not 0 <= step_index < cfg.k_steps:
        raise IndexError(f"step index {step_index} outside K={cfg.k_steps}")
    return bank.instances[_canonical_key(cfg, modality, depth_index, step_index)]


def thought(h: T.Tensor, proj: Projector) -> T.Tensor:
    """Map a pooled state to a thought token in the same width."""
    normed = T.layer_norm(h, proj.gamma, proj.beta)
    hidden = T.gelu(T.matmul(proj.w1, normed) + proj.b1)
    return T.matmul(proj.w2, hidden) + proj.b2


def parameter_count(cfg: RefineConfig, d_vision: int, d_text: int) -> int:
    """Trainable scalar count across all distinct projector instances."""
    n_depth, n_step = _canonical_grid(cfg)
    instances = n_depth * n_step
    total = 0
    for modality in cfg.modalities:
        d = d_vision if modality == VISION else d_text
        per_instance = 2 * cfg.rank * d + cfg.rank + 3 * d
        total += instances * per_instance
    return total


def block_eval_count(depth_total: int, cfg: RefineConfig) -> int:
    """Frozen-block evaluations for one refined example.

    Single depth j reduces to j + (K+1)(depth_total - j); the general form
    is one full pass plus K passes above the first injection depth.
    """
    j = cfg.injection_depths[0]
    if not 0 <= j <= depth_total:
        raise ValueError(f"injection depth {j} outside [0, {depth_total}]")
    return depth_total + cfg.k_steps * (depth_total - j)


def block_eval_ratio(depth_total: int, cfg: RefineConfig) -> float:
    return block_eval_count(depth_total, cfg) / depth_total


@dataclass
class RefinementTrace:
    """Everything one refined example produced, step by step."""

    x: TokenSequence
    pooled: list          # h^(0..K)
    thoughts: list        # refine: K tensors; multi-depth: K lists (one per depth)
    embeddings: list      # unit embeddings v^(0..K) in the shared space
    block_evals: int
    active: bool          # False when this modality is excluded from refinement


def _passthrough_trace(x, weights, cfg, counter, seq0):
    """Frozen zero-shot forward, repeated so the trace still has K+1 steps."""
    local = BlockCounter()
    seq = seq0 if seq0 is not None else embed(x, weights)
    out = run_blocks(seq, weights, x.modality, 0, weights.config.depth, counter=local)
    h = pool(out, x, weights)
    v = project(h, weights, x.modality)
    if counter is not None:
        counter.add(local.count)
    k = cfg.k_steps
    return RefinementTrace(x, [h] * (k + 1), [], [v] * (k + 1), local.count, active=False)


def refine(x: TokenSequence, weights: EncoderWeights, bank: ProjectorBank,
           cfg: RefineConfig, counter: BlockCounter | None = None,
           seq0: T.Tensor | None = None) -> RefinementTrace:
    """K-step single-depth refinement of one example.

    The lower blocks run once; each step prepends all cached thought tokens
    plus one new token and re-runs the upper blocks.  `seq0` lets callers
    substitute a pre-embedded input (used for input-sensitivity probes).
    """
    if len(cfg.injection_depths) != 1:
        raise ValueError("refine handles a single injection depth; use multi_depth_refine")
    depth_total = weights.config.depth
    j = cfg.injection_depths[0]
    if not 0 <= j <= depth_total:
        raise ValueError(f"injection depth {j} outside [0, {depth_total}]")
    if x.modality not in cfg.modalities or cfg.k_steps == 0:
        return _passthrough_trace(x, weights, cfg, counter, seq0)

    local = BlockCounter()
    seq = seq0 if seq0 is not None else embed(x, weights)
    lower = run_blocks(seq, weights, x.modality, 0, j, counter=local)
    out = run_blocks(lower, weights, x.modality, j, depth_total, counter=local)
    h = pool(out, x, weights, prepended=0)
    pooled = [h]
    embeddings = [project(h, weights, x.modality)]
    thoughts: list = []
    for k in range(1, cfg.k_steps + 1):
        proj = select_projector(bank, x.modality, 0, k - 1)
        thoughts.append(thought(pooled[k - 1], proj))
        aug = T.concat([T.stack_rows(thoughts), lower], axis=0)
        out = run_blocks(aug, weights, x.modality, j, depth_total, counter=local)
        h = pool(out, x, weights, prepended=k)
        pooled.append(h)
        embeddings.append(project(h, weights, x.modality))
    if counter is not None:
        counter.add(local.count)
    return RefinementTrace(x, pooled, thoughts, embeddings, local.count, active=True)


def multi_depth_refine(x: TokenSequence, weights: EncoderWeights, bank: ProjectorBank,
                       cfg: RefineConfig, counter: BlockCounter | None = None,
                       seq0: T.Tensor | None = None) -> RefinementTrace:
    """Refinement with thought injection at several depths.

    Each step runs the tower as segments delimited by the injection depths.
    The thought injected at depth d_i is generated from the state the
    previous pass recorded after the segment starting at d_i (the readout row
    before the next injection; the final pooled state for the last depth), so
    a single-depth config reproduces `refine` bit for bit.  Step 1 reads the
    frozen baseline pass.
    """
    depth_total = weights.config.depth
    depths = cfg.injection_depths
    if depths[-1] > depth_total:
        raise ValueError(f"injection depths {depths} exceed tower depth {depth_total}")
    if x.modality not in cfg.modalities or cfg.k_steps == 0:
        return _passthrough_trace(x, weights, cfg, counter, seq0)

    n_depths = len(depths)
    local = BlockCounter()
    seq = seq0 if seq0 is not None else embed(x, weights)
    base = run_blocks(seq, weights, x.modality, 0, depths[0], counter=local)

    def segment_end(i):
        return depths[i + 1] if i + 1 < n_depths else depth_total

    # Baseline pass: record the per-depth states that feed step 1.
    recorded = []
    seq = base
    for i in range(n_depths):
        seq = run_blocks(seq, weights, x.modality, depths[i], segment_end(i), counter=local)
        if i + 1 < n_depths:
            recorded.append(T.take_row(seq, x.readout_index()))
        else:
            recorded.append(pool(seq, x, weights, prepended=0))
    h = recorded[-1]
    pooled = [h]
    embeddings = [project(h, weights, x.modality)]
    all_thoughts: list = []
    cached = [[] for _ in range(n_depths)]

    for k in range(1, cfg.k_steps + 1):
        step_thoughts = []
        new_recorded = []
        seq = base
        prepended = 0
        for i in range(n_depths):
            proj = select_projector(bank, x.modality, i, k - 1)
            z = thought(recorded[i], proj)
            cached[i].append(z)
            step_thoughts.append(z)
            seq = T.concat([T.stack_rows(cached[i]), seq], axis=0)
            prepended += k
            seq = run_blocks(seq, weights, x.modality, depths[i], segment_end(i), counter=local)
            if i + 1 < n_depths:
                new_recorded.append(T.take_row(seq, prepended + x.readout_index()))
            else:
                new_recorded.append(pool(seq, x, weights, prepended=prepended))
        recorded = new_recorded
        h = recorded[-1]
        pooled.append(h)
        embeddings.append(project(h, weights, x.modality))
        all_thoughts.append(step_thoughts)
    if counter is not None:
        counter.add(local.count)
    return RefinementTrace(x, pooled, all_thoughts, embeddings, local.count, active=True)


def run_refinement(x, weights, bank, cfg, counter=None, seq0=None) -> RefinementTrace:
    """Dispatch to refine / multi_depth_refine based on the depth list."""
    if len(cfg.injection_depths) == 1:
        return refine(x, weights, bank, cfg, counter=counter, seq0=seq0)
    return multi_depth_refine(x, weights, bank, cfg, counter=counter, seq0=seq0)


def save_projectors(path, bank: ProjectorBank) -> None:
    save_arrays(path, bank.pack(bank.cfg.injection_depths))


def load_projectors(path, cfg: RefineConfig) -> ProjectorBank:
    """Rebuild a bank from a checkpoint; sharing ties come from `cfg`."""
    arrays = load_arrays(path)
    n_depth, n_step = _canonical_grid(cfg)
    instances = {}
    for modality in cfg.modalities:
        for di in range(n_depth):
            for si in range(n_step):
                prefix = f"phi.{modality}.{cfg.injection_depths[di]}.{si}."
                fields = {}
                for field in ("gamma", "beta", "w1", "b1", "w2", "b2"):
                    name = prefix + field
                    if name not in arrays:
                        raise KeyError(f"projector checkpoint missing array {name!r}")
                    fields[field] = T.Tensor(arrays[name], requires_grad=True)
                instances[(modality, di, si)] = Projector(modality, di, si, **fields)
    return ProjectorBank(cfg, instances)
