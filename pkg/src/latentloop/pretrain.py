"""Contrastive pretraining of the toy dual encoder.

Symmetric InfoNCE at the encoder's fixed logit scale over batches of
(image, class prompt) pairs with distinct classes.  After the requested
number of steps the towers are frozen; adaptation never revisits them.
"""
from __future__ import annotations

from dataclasses import replace

from . import tensor as T
from .encoder import EncoderConfig, EncoderWeights, encode, init_encoder_weights
from .rng import substream
from .tasks import SyntheticTaskSpec, TaskSampler
from .training import AdamW, TrainConfig


def infonce_loss(image_embs, text_embs, tau: float) -> T.Tensor:
    """Symmetric cross-entropy over the scaled similarity matrix."""
    n = len(image_embs)
    sim = T.mul(T.matmul(T.stack_rows(image_embs), T.transpose(T.stack_rows(text_embs))), tau)
    sim_t = T.transpose(sim)
    terms = []
    for i in range(n):
        terms.append(T.cross_entropy(T.take_row(sim, i), i))
        terms.append(T.cross_entropy(T.take_row(sim_t, i), i))
    total = terms[0]
    for term in terms[1:]:
        total = total + term
    return total * (1.0 / (2 * n))


WARMUP_FRACTION = 0.1  # linear ramp; a cold high lr collapses both towers


def pretrain_backbone(generator: SyntheticTaskSpec, enc_cfg: EncoderConfig,
                      steps: int, seed: int, batch_size: int = 8,
                      lr: float = 1e-3, tau: float | None = None,
                      on_step=None) -> EncoderWeights:
    """Train fresh towers on the generator's class pool, then freeze them.

    Batches draw `batch_size` distinct classes so every off-diagonal pair is
    a true negative.  The contrastive temperature defaults to the encoder's
    frozen logit scale; very hard scales make collapsing both towers to a
    point the quickest descent direction, and that collapse is a true
    stationary point of the symmetric loss, hence the warmup ramp below.
    `on_step(step, loss)` is invoked after every update when given.  Returns
    immutable weights; rerunning with the same arguments reproduces them bit
    for bit.
    """
    if batch_size > generator.n_classes:
        raise ValueError(
            f"batch of {batch_size} distinct classes impossible with {generator.n_classes} classes"
        )
    if tau is None:
        tau = enc_cfg.logit_scale
    if tau <= 0:
        raise ValueError(f"temperature must be positive, got {tau}")
    weights = init_encoder_weights(enc_cfg, seed)
    sampler = TaskSampler(generator, enc_cfg)
    protos = sampler.prototypes()
    prompts = [sampler.prompt(protos[c]) for c in range(generator.n_classes)]

    tcfg = TrainConfig(lr=lr, batch_size=batch_size, weight_decay=0.0, seed=seed)
    optimizer = AdamW(weights.trainable(), tcfg)
    class_rng = substream(seed, "pretrain.classes")
    noise_rng = substream(seed, "pretrain.noise")
    warmup = max(1, int(round(steps * WARMUP_FRACTION)))

    for step in range(steps):
        order = list(range(generator.n_classes))
        class_rng.shuffle(order)
        batch_classes = order[:batch_size]
        image_embs, text_embs = [], []
        for c in batch_classes:
            image_embs.append(encode(sampler.image(protos[c], noise_rng), weights))
            text_embs.append(encode(prompts[c], weights))
        loss = infonce_loss(image_embs, text_embs, tau)
        optimizer.step(T.backward(loss), lr_scale=min(1.0, (step + 1) / warmup))
        if on_step is not None:
            on_step(step, loss.item())

    weights.freeze()
    return weights


def pretrain_generator_spec(n_classes: int, base: SyntheticTaskSpec, seed: int) -> SyntheticTaskSpec:
    """Generator pool for pretraining: same geometry as `base`, its own
    prototypes, no distribution shift."""
    return replace(base, n_classes=n_classes, seed=seed,
                   proto_jitter=0.0, noise_inflation=1.0)
