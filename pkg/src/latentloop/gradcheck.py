"""Finite-difference verification of every differentiable building block.

Central differences (h = 1e-5) on a fixed micro model, compared against
reverse-mode gradients with a relative-error threshold of 1e-4 over an
absolute floor of 1e-6.  The final entry differentiates the complete
adaptation loss through the refinement recursion with respect to every
projector parameter.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor
from . import training
from .encoder import (TEXT, VISION, EncoderConfig, TokenSequence,
                      init_encoder_weights)
from .refinement import RefineConfig, init_projector_bank, thought
from .rng import substream

FD_STEP = 1e-5
REL_TOL = 1e-4
ABS_FLOOR = 1e-6

MICRO_ENCODER = EncoderConfig(
    depth=4, d_vision=8, d_text=8, d_embed=4, heads=2, t_img=5, t_txt=4,
    vision_vocab=9, text_vocab=7, logit_scale=5.0, mlp_ratio=2,
)
MICRO_REFINE = RefineConfig(injection_depths=(2,), k_steps=2, rank=1)


def fd_gradient(f, x: np.ndarray, h: float = FD_STEP) -> np.ndarray:
    """Coordinate-wise central differences of a scalar function."""
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    out = g.reshape(-1)
    for i in range(flat.size):
        keep = flat[i]
        flat[i] = keep + h
        fp = f()
        flat[i] = keep - h
        fm = f()
        flat[i] = keep
        out[i] = (fp - fm) / (2 * h)
    return g


def max_rel_err(analytic: np.ndarray, numeric: np.ndarray) -> float:
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), ABS_FLOOR)
    return float((np.abs(analytic - numeric) / denom).max())


def _check_scalar_fn(build, leaves) -> float:
    """Compare backward() against FD for `build()` w.r.t. each leaf tensor."""
    grads = tensor.backward(build())
    worst = 0.0
    for leaf in leaves:
        analytic = grads.get(leaf)
        if analytic is None:
            raise AssertionError("leaf missing from gradient map")
        numeric = fd_gradient(lambda: build().item(), leaf.data)
        worst = max(worst, max_rel_err(analytic, numeric))
    return worst


def _rand(shape, seed, purpose, scale=1.0):
    return substream(seed, purpose).normals(shape, scale)


def _leaf(shape, seed, purpose, scale=1.0):
    return tensor.Tensor(_rand(shape, seed, purpose, scale), requires_grad=True)


# Each check returns its worst relative error.

def check_add_mul(seed=11):
    a = _leaf((3, 4), seed, "a")
    b = _leaf((3, 4), seed, "b")
    c = _leaf((4,), seed, "c")

    def build():
        return tensor.sum_all(tensor.mul(tensor.add(a, c), b) + a * 0.5)

    return _check_scalar_fn(build, [a, b, c])


def check_matmul(seed=12):
    a = _leaf((3, 4), seed, "a")
    b = _leaf((4, 2), seed, "b")
    v = _leaf((4,), seed, "v")

    def build():
        return tensor.sum_all(tensor.matmul(a, b)) + tensor.sum_all(tensor.matmul(a, v))

    return _check_scalar_fn(build, [a, b, v])


def check_layer_norm(seed=13):
    x = _leaf((3, 6), seed, "x")
    gamma = _leaf((6,), seed, "g")
    beta = _leaf((6,), seed, "b")
    w = _rand((3, 6), seed, "w")

    def build():
        return tensor.sum_all(tensor.mul(tensor.layer_norm(x, gamma, beta), w))

    return _check_scalar_fn(build, [x, gamma, beta])


def check_gelu(seed=14):
    x = _leaf((4, 5), seed, "x", scale=2.0)
    w = _rand((4, 5), seed, "w")

    def build():
        return tensor.sum_all(tensor.mul(tensor.gelu(x), w))

    return _check_scalar_fn(build, [x])


def check_softmax(seed=15):
    x = _leaf((3, 5), seed, "x", scale=2.0)
    w = _rand((3, 5), seed, "w")

    def build():
        return tensor.sum_all(tensor.mul(tensor.softmax(x), w))

    return _check_scalar_fn(build, [x])


def check_cross_entropy(seed=16):
    x = _leaf((6,), seed, "x", scale=2.0)

    def build():
        return tensor.cross_entropy(x, 2)

    return _check_scalar_fn(build, [x])


def check_cosine(seed=17):
    u = _leaf((7,), seed, "u")
    v = _leaf((7,), seed, "v")

    def build():
        return tensor.cosine_similarity(u, v)

    return _check_scalar_fn(build, [u, v])


def check_l2_normalize(seed=18):
    u = _leaf((6,), seed, "u")
    w = _rand((6,), seed, "w")

    def build():
        return tensor.sum_all(tensor.mul(tensor.l2_normalize(u), w))

    return _check_scalar_fn(build, [u])


def check_embedding_rows(seed=24):
    table = _leaf((5, 4), seed, "table")
    w = _rand((6, 4), seed, "w")
    ids = (3, 0, 3, 1, 4, 0)  # repeats exercise the scatter-add

    def build():
        return tensor.sum_all(tensor.mul(tensor.embedding_rows(table, ids), w))

    return _check_scalar_fn(build, [table])


def check_slice_rows(seed=25):
    t = _leaf((6, 3), seed, "t")
    w = _rand((4, 3), seed, "w")

    def build():
        return tensor.sum_all(tensor.mul(tensor.slice_rows(t, 1, 5), w))

    return _check_scalar_fn(build, [t])


def check_attention(seed=19):
    d, dh, t = 6, 3, 4
    x = _leaf((t, d), seed, "x")
    qs = [_leaf((d, dh), seed, f"q{h}", 0.5) for h in range(2)]
    ks = [_leaf((d, dh), seed, f"k{h}", 0.5) for h in range(2)]
    vs = [_leaf((d, dh), seed, f"v{h}", 0.5) for h in range(2)]
    out = _leaf((d, d), seed, "o", 0.5)
    w = _rand((t, d), seed, "w")

    def build():
        att = tensor.multi_head_attention(x, qs, ks, vs, out)
        return tensor.sum_all(tensor.mul(att, w))

    return _check_scalar_fn(build, [x, qs[0], ks[1], vs[0], out])


def check_thought(seed=20):
    enc = MICRO_ENCODER
    bank = init_projector_bank(MICRO_REFINE, enc, seed)
    proj = bank.instances[(VISION, 0, 0)]
    h = _leaf((enc.d_vision,), seed, "h")
    w = _rand((enc.d_vision,), seed, "w")

    def build():
        return tensor.sum_all(tensor.mul(thought(h, proj), w))

    leaves = [h, proj.gamma, proj.beta, proj.w1, proj.b1, proj.w2, proj.b2]
    return _check_scalar_fn(build, leaves)


def _micro_batch(enc: EncoderConfig, seed: int):
    rng = substream(seed, "gradcheck.tokens")
    images = []
    for _ in range(2):
        ids = [0] + [1 + rng.next_below(enc.vision_vocab - 1) for _ in range(enc.t_img - 1)]
        images.append(TokenSequence(VISION, ids))
    prompts = []
    for _ in range(2):
        ids = [rng.next_below(enc.text_vocab - 1) for _ in range(enc.t_txt - 1)]
        ids.append(enc.eos_id)
        prompts.append(TokenSequence(TEXT, ids, eos_index=len(ids) - 1))
    return images, prompts


def check_full_loss(seed=21):
    """FD through the complete refinement + loss w.r.t. every projector leaf."""
    enc = MICRO_ENCODER
    weights = init_encoder_weights(enc, seed)
    weights.freeze()
    bank = init_projector_bank(MICRO_REFINE, enc, seed + 1)
    images, prompts = _micro_batch(enc, seed)
    batch = [(images[0], 0), (images[1], 1)]
    tcfg = training.TrainConfig(anchor_weight=0.7)

    def build():
        total, _ = training.adaptation_loss(batch, prompts, weights, bank,
                                            MICRO_REFINE, tcfg)
        return total

    return _check_scalar_fn(build, bank.trainable())


CHECKS = (
    ("add_mul", check_add_mul),
    ("matmul", check_matmul),
    ("layer_norm", check_layer_norm),
    ("gelu", check_gelu),
    ("softmax", check_softmax),
    ("cross_entropy", check_cross_entropy),
    ("cosine_similarity", check_cosine),
    ("l2_normalize", check_l2_normalize),
    ("embedding_rows", check_embedding_rows),
    ("slice_rows", check_slice_rows),
    ("multi_head_attention", check_attention),
    ("thought", check_thought),
    ("full_loss", check_full_loss),
)


@dataclass
class CheckResult:
    op: str
    max_rel_err: float
    passed: bool


def run_all(tol: float = REL_TOL) -> list:
    results = []
    for name, fn in CHECKS:
        err = fn()
        results.append(CheckResult(name, err, err < tol))
    return results


def format_report(results) -> str:
    lines = []
    for r in results:
        status = "pass" if r.passed else "FAIL"
        lines.append(f"{r.op}: max_rel_err={r.max_rel_err:.3e} [{status}]")
    worst = max(results, key=lambda r: r.max_rel_err)
    lines.append(f"worst: {worst.op} ({worst.max_rel_err:.3e})")
    return "\n".join(lines) + "\n"
