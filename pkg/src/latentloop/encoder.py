"""Toy frozen dual encoder: two pre-norm transformer towers and a shared
embedding space.

The vision tower reads a CLS token plus quantised patch tokens; the text
tower reads prompt tokens ending in EOS.  Both towers share the block
structure (LN -> attention -> residual, LN -> MLP -> residual), a final
LayerNorm, and a linear projection onto the unit sphere in the shared space.
Attention is bidirectional in both towers; sequences are processed one at a
time (no batch axis).
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .container import load_arrays, save_arrays
from .rng import substream

VISION = "vision"
TEXT = "text"
CLS_ID = 0  # vision position 0 carries this dedicated token


@dataclass(frozen=True)
class EncoderConfig:
    depth: int = 12
    d_vision: int = 48
    d_text: int = 32
    d_embed: int = 16
    heads: int = 4
    t_img: int = 17          # CLS + patch grid
    t_txt: int = 8           # prompt tokens + EOS
    vision_vocab: int = 65   # CLS + patch codebook
    text_vocab: int = 33     # word codebook + EOS
    logit_scale: float = 10.0
    mlp_ratio: int = 4

    def __post_init__(self):
        if self.depth < 2:
            raise ValueError(f"depth must be >= 2, got {self.depth}")
        for name, d in (("d_vision", self.d_vision), ("d_text", self.d_text)):
            if d % self.heads != 0:
                raise ValueError(f"{name}={d} not divisible by heads={self.heads}")
        if self.t_img < 2 or self.t_txt < 2:
            raise ValueError("towers need at least two positions")

    def width(self, modality: str) -> int:
        if modality == VISION:
            return self.d_vision
        if modality == TEXT:
            return self.d_text
        raise ValueError(f"unknown modality {modality!r}")

    def max_positions(self, modality: str) -> int:
        return self.t_img if modality == VISION else self.t_txt

    def vocab(self, modality: str) -> int:
        return self.vision_vocab if modality == VISION else self.text_vocab

    @property
    def eos_id(self) -> int:
        return self.text_vocab - 1


@dataclass
class TokenSequence:
    """One tokenised input.  `eos_index` is required for text, None for vision."""

    modality: str
    token_ids: tuple
    eos_index: int | None = None

    def __post_init__(self):
        self.token_ids = tuple(int(t) for t in self.token_ids)
        if self.modality not in (VISION, TEXT):
            raise ValueError(f"unknown modality {self.modality!r}")
        if self.modality == TEXT:
            if self.eos_index is None or not 0 <= self.eos_index < len(self.token_ids):
                raise ValueError(f"text sequence needs a valid eos_index, got {self.eos_index}")

    def __len__(self) -> int:
        return len(self.token_ids)

    def readout_index(self) -> int:
        """Position whose row is pooled: CLS for vision, EOS for text."""
        return 0 if self.modality == VISION else self.eos_index


@dataclass
class BlockCounter:
    """Counts transformer-block evaluations across encoder calls."""

    count: int = 0

    def add(self, n: int) -> None:
        self.count += n


class EncoderWeights:
    """Named parameter store for both towers plus the shared projections."""

    def __init__(self, config: EncoderConfig, tensors: dict[str, T.Tensor]):
        self.config = config
        self.tensors = tensors
        self.frozen = False

    def __getitem__(self, name: str) -> T.Tensor:
        return self.tensors[name]

    def freeze(self) -> None:
        """Make every parameter immutable; refinement never updates these."""
        for t in self.tensors.values():
            t.requires_grad = False
            t.data.setflags(write=False)
        self.frozen = True

    def trainable(self) -> list[T.Tensor]:
        return [t for t in self.tensors.values() if t.requires_grad]

    def pack(self) -> dict[str, np.ndarray]:
        cfg = self.config
        header = np.array(
            [cfg.depth, cfg.d_vision, cfg.d_text, cfg.d_embed, cfg.heads,
             cfg.t_img, cfg.t_txt, cfg.vision_vocab, cfg.text_vocab,
             cfg.logit_scale, cfg.mlp_ratio],
            dtype=np.float64,
        )
        out = {"__config__": header}
        for name in sorted(self.tensors):
            out[name] = self.tensors[name].data
        return out


def _block_names(modality: str, i: int, heads: int):
    base = f"{modality}.block{i}"
    names = [f"{base}.ln1.gamma", f"{base}.ln1.beta"]
    for h in range(heads):
        names += [f"{base}.attn.q{h}", f"{base}.attn.k{h}", f"{base}.attn.v{h}"]
    names += [f"{base}.attn.out", f"{base}.ln2.gamma", f"{base}.ln2.beta",
              f"{base}.mlp.w1", f"{base}.mlp.b1", f"{base}.mlp.w2", f"{base}.mlp.b2"]
    return names


def init_encoder_weights(config: EncoderConfig, seed: int, std: float = 0.02) -> EncoderWeights:
    """Fresh trainable towers.  Every array draws from its own named
    substream, so the result is independent of initialisation order."""

    tensors: dict[str, T.Tensor] = {}

    def gauss(name: str, shape) -> None:
        rng = substream(seed, "init." + name)
        tensors[name] = T.Tensor(rng.normals(shape, std), requires_grad=True)

    def const(name: str, shape, value: float) -> None:
        tensors[name] = T.Tensor(np.full(shape, value, dtype=np.float64), requires_grad=True)

    for modality in (VISION, TEXT):
        d = config.width(modality)
        dh = d // config.heads
        hidden = config.mlp_ratio * d
        gauss(f"{modality}.tok_emb", (config.vocab(modality), d))
        gauss(f"{modality}.pos_emb", (config.max_positions(modality), d))
        for i in range(config.depth):
            base = f"{modality}.block{i}"
            const(f"{base}.ln1.gamma", (d,), 1.0)
            const(f"{base}.ln1.beta", (d,), 0.0)
            for h in range(config.heads):
                gauss(f"{base}.attn.q{h}", (d, dh))
                gauss(f"{base}.attn.k{h}", (d, dh))
                gauss(f"{base}.attn.v{h}", (d, dh))
            gauss(f"{base}.attn.out", (d, d))
            const(f"{base}.ln2.gamma", (d,), 1.0)
            const(f"{base}.ln2.beta", (d,), 0.0)
            gauss(f"{base}.mlp.w1", (d, hidden))
            const(f"{base}.mlp.b1", (hidden,), 0.0)
            gauss(f"{base}.mlp.w2", (hidden, d))
            const(f"{base}.mlp.b2", (d,), 0.0)
        const(f"{modality}.ln_final.gamma", (d,), 1.0)
        const(f"{modality}.ln_final.beta", (d,), 0.0)
        gauss(f"{modality}.proj", (d, config.d_embed))

    return EncoderWeights(config, tensors)


def embed(x: TokenSequence, weights: EncoderWeights) -> T.Tensor:
    """Token + positional embedding lookup.

    With frozen weights the result is a plain graph leaf; while pretraining
    the lookup stays differentiable so the tables learn too.
    """
    config = weights.config
    n = len(x)
    if n > config.max_positions(x.modality):
        raise ValueError(f"sequence length {n} exceeds {config.max_positions(x.modality)} positions")
    vocab = config.vocab(x.modality)
    for t in x.token_ids:
        if not 0 <= t < vocab:
            raise ValueError(f"token id {t} outside vocab of size {vocab}")
    tok = T.embedding_rows(weights[f"{x.modality}.tok_emb"], x.token_ids)
    pos = T.slice_rows(weights[f"{x.modality}.pos_emb"], 0, n)
    return tok + pos


def run_blocks(seq: T.Tensor, weights: EncoderWeights, modality: str,
               from_block: int, to_block: int,
               mask: np.ndarray | None = None,
               counter: BlockCounter | None = None) -> T.Tensor:
    """Apply transformer blocks [from_block, to_block) to the sequence."""
    config = weights.config
    if not 0 <= from_block <= to_block <= config.depth:
        raise ValueError(
            f"block range [{from_block}, {to_block}) invalid for depth {config.depth}"
        )
    for i in range(from_block, to_block):
        base = f"{modality}.block{i}"
        normed = T.layer_norm(seq, weights[f"{base}.ln1.gamma"], weights[f"{base}.ln1.beta"])
        attn = T.multi_head_attention(
            normed,
            [weights[f"{base}.attn.q{h}"] for h in range(config.heads)],
            [weights[f"{base}.attn.k{h}"] for h in range(config.heads)],
            [weights[f"{base}.attn.v{h}"] for h in range(config.heads)],
            weights[f"{base}.attn.out"],
            mask=mask,
        )
        seq = seq + attn
        normed = T.layer_norm(seq, weights[f"{base}.ln2.gamma"], weights[f"{base}.ln2.beta"])
        hidden = T.gelu(T.matmul(normed, weights[f"{base}.mlp.w1"]) + weights[f"{base}.mlp.b1"])
        seq = seq + (T.matmul(hidden, weights[f"{base}.mlp.w2"]) + weights[f"{base}.mlp.b2"])
    if counter is not None:
        counter.add(to_block - from_block)
    return seq


def pool(seq: T.Tensor, x: TokenSequence, weights: EncoderWeights, prepended: int = 0) -> T.Tensor:
    """Post-final-LayerNorm readout row.

    The readout position is the ORIGINAL CLS/EOS position shifted by the
    number of tokens prepended in front of the sequence; a prepended token is
    never itself the readout.
    """
    index = prepended + x.readout_index()
    if not 0 <= index < seq.shape[0]:
        raise IndexError(f"readout index {index} outside sequence of length {seq.shape[0]}")
    row = T.take_row(seq, index)
    return T.layer_norm(row, weights[f"{x.modality}.ln_final.gamma"],
                        weights[f"{x.modality}.ln_final.beta"])


def project(h: T.Tensor, weights: EncoderWeights, modality: str) -> T.Tensor:
    """Map a pooled state into the shared space; unit norm by construction."""
    return T.l2_normalize(T.matmul(h, weights[f"{modality}.proj"]))


def encode(x: TokenSequence, weights: EncoderWeights,
           counter: BlockCounter | None = None) -> T.Tensor:
    """Plain full-tower forward: the zero-shot embedding of one input."""
    seq = embed(x, weights)
    seq = run_blocks(seq, weights, x.modality, 0, weights.config.depth, counter=counter)
    return project(pool(seq, x, weights), weights, x.modality)


def save_encoder(path, weights: EncoderWeights) -> None:
    save_arrays(path, weights.pack())


def load_encoder(path) -> EncoderWeights:
    """Load a tower checkpoint; the result comes back frozen."""
    arrays = load_arrays(path)
    header = arrays.pop("__config__")
    config = EncoderConfig(
        depth=int(header[0]), d_vision=int(header[1]), d_text=int(header[2]),
        d_embed=int(header[3]), heads=int(header[4]), t_img=int(header[5]),
        t_txt=int(header[6]), vision_vocab=int(header[7]), text_vocab=int(header[8]),
        logit_scale=float(header[9]), mlp_ratio=int(header[10]),
    )
    tensors = {name: T.Tensor(arr) for name, arr in arrays.items()}
    weights = EncoderWeights(config, tensors)
    weights.freeze()
    return weights
