"""Contrastive pretraining of the toy backbone."""
import math
import statistics

import numpy as np
import pytest

from latentloop import tensor as T
from latentloop.container import pack_arrays
from latentloop.encoder import init_encoder_weights
from latentloop.pretrain import (infonce_loss, pretrain_backbone,
                                 pretrain_generator_spec)
from latentloop.tasks import SyntheticTaskSpec


def _embs(rows):
    return [T.l2_normalize(T.Tensor(np.array(r, dtype=np.float64))) for r in rows]


def test_infonce_matches_a_hand_softmax():
    image = _embs([[1.0, 0.0], [0.0, 1.0]])
    text = _embs([[1.0, 0.0], [1.0, 1.0]])
    tau = 3.0
    loss = infonce_loss(image, text, tau)
    sims = np.array([[i.data @ t.data for t in text] for i in image]) * tau
    ce = []
    for i in range(2):
        for row in (sims[i], sims[:, i]):
            p = np.exp(row - row.max())
            ce.append(-math.log(p[i] / p.sum()))
    assert loss.item() == pytest.approx(sum(ce) / 4, rel=1e-12)


def test_infonce_is_uniform_at_total_collapse():
    # both towers on one point: every similarity ties, so CE = ln(n) per term
    same = _embs([[0.6, 0.8]] * 4)
    assert infonce_loss(same, same, 7.0).item() == pytest.approx(math.log(4), rel=1e-12)


@pytest.fixture(scope="module")
def gen():
    return pretrain_generator_spec(8, SyntheticTaskSpec(), seed=33)


def test_generator_spec_keeps_geometry(gen):
    base = SyntheticTaskSpec(proto_jitter=0.5, noise_inflation=2.0, seed=4)
    pool = pretrain_generator_spec(24, base, seed=9)
    assert pool.n_classes == 24 and pool.seed == 9
    assert pool.codebook_seed == base.codebook_seed
    assert pool.proto_jitter == 0.0 and pool.noise_inflation == 1.0


def test_zero_steps_is_the_frozen_init(gen, micro_cfg):
    w = pretrain_backbone(gen, micro_cfg, 0, seed=3)
    ref = init_encoder_weights(micro_cfg, seed=3)
    ref.freeze()
    assert pack_arrays(w.pack()) == pack_arrays(ref.pack())
    with pytest.raises(ValueError):  # frozen arrays are read-only
        w["vision.tok_emb"].data[0, 0] = 1.0
    assert w.trainable() == []


def test_validation(gen, micro_cfg):
    with pytest.raises(ValueError, match="distinct classes"):
        pretrain_backbone(gen, micro_cfg, 1, seed=0, batch_size=9)
    with pytest.raises(ValueError, match="temperature"):
        pretrain_backbone(gen, micro_cfg, 1, seed=0, batch_size=4, tau=0.0)


def test_temperature_defaults_to_the_logit_scale(gen, micro_cfg):
    a = pretrain_backbone(gen, micro_cfg, 3, seed=5, batch_size=4)
    b = pretrain_backbone(gen, micro_cfg, 3, seed=5, batch_size=4,
                          tau=micro_cfg.logit_scale)
    c = pretrain_backbone(gen, micro_cfg, 3, seed=5, batch_size=4,
                          tau=micro_cfg.logit_scale / 2)
    assert pack_arrays(a.pack()) == pack_arrays(b.pack())
    assert pack_arrays(a.pack()) != pack_arrays(c.pack())


def test_same_seed_reproduces_bit_for_bit(gen, micro_cfg):
    a = pretrain_backbone(gen, micro_cfg, 8, seed=21, batch_size=4)
    b = pretrain_backbone(gen, micro_cfg, 8, seed=21, batch_size=4)
    c = pretrain_backbone(gen, micro_cfg, 8, seed=22, batch_size=4)
    assert pack_arrays(a.pack()) == pack_arrays(b.pack())
    assert pack_arrays(a.pack()) != pack_arrays(c.pack())


def test_on_step_reports_every_update(gen, micro_cfg):
    seen = []
    pretrain_backbone(gen, micro_cfg, 5, seed=1, batch_size=4,
                      on_step=lambda s, l: seen.append((s, l)))
    assert [s for s, _ in seen] == [0, 1, 2, 3, 4]
    assert all(isinstance(l, float) and l > 0 for _, l in seen)


def test_contrastive_loss_descends(gen, micro_cfg):
    losses = []
    pretrain_backbone(gen, micro_cfg, 200, seed=7, batch_size=4,
                      on_step=lambda s, l: losses.append(l))
    assert statistics.mean(losses[-10:]) < statistics.mean(losses[:10]) - 0.3
