"""Encoder tests: configs, token sequences, block splits, pooling, checkpoints."""
import numpy as np
import pytest

from latentloop import tensor as T
from latentloop.encoder import (CLS_ID, TEXT, VISION, BlockCounter,
                                EncoderConfig, TokenSequence, embed, encode,
                                init_encoder_weights, load_encoder, pool,
                                project, run_blocks, save_encoder)


def vision_seq(cfg, seed=0):
    rng = np.random.RandomState(seed)
    ids = [CLS_ID] + list(rng.randint(1, cfg.vision_vocab, size=cfg.t_img - 1))
    return TokenSequence(VISION, ids)


def text_seq(cfg, seed=0):
    rng = np.random.RandomState(seed)
    n = cfg.t_txt - 1
    ids = list(rng.randint(0, cfg.text_vocab - 1, size=n)) + [cfg.eos_id]
    return TokenSequence(TEXT, ids, eos_index=n)


def test_config_defaults_are_the_toy_dims():
    cfg = EncoderConfig()
    assert (cfg.depth, cfg.d_vision, cfg.d_text, cfg.d_embed) == (12, 48, 32, 16)
    assert (cfg.heads, cfg.t_img, cfg.t_txt) == (4, 17, 8)
    assert cfg.eos_id == cfg.text_vocab - 1


def test_config_validation():
    with pytest.raises(ValueError):
        EncoderConfig(depth=1)
    with pytest.raises(ValueError):
        EncoderConfig(d_vision=50, heads=4)
    with pytest.raises(ValueError):
        EncoderConfig(t_txt=1)
    with pytest.raises(ValueError):
        EncoderConfig().width("audio")


def test_token_sequence_readout_positions():
    v = TokenSequence(VISION, (0, 3, 5))
    assert v.readout_index() == 0
    t = TokenSequence(TEXT, (4, 2, 6), eos_index=2)
    assert t.readout_index() == 2
    with pytest.raises(ValueError):
        TokenSequence(TEXT, (1, 2, 3))  # missing eos_index
    with pytest.raises(ValueError):
        TokenSequence("audio", (1,))


def test_embed_validates_ids_and_length(micro_cfg, micro_frozen):
    too_long = TokenSequence(VISION, [0] * (micro_cfg.t_img + 1))
    with pytest.raises(ValueError, match="positions"):
        embed(too_long, micro_frozen)
    bad_id = TokenSequence(VISION, [0, micro_cfg.vision_vocab])
    with pytest.raises(ValueError, match="vocab"):
        embed(bad_id, micro_frozen)


def test_embed_equals_table_lookup(micro_cfg, micro_frozen):
    x = vision_seq(micro_cfg, seed=1)
    out = embed(x, micro_frozen).data
    tok = micro_frozen["vision.tok_emb"].data
    pos = micro_frozen["vision.pos_emb"].data
    want = tok[list(x.token_ids)] + pos[: len(x)]
    assert np.array_equal(out, want)


def test_init_is_order_independent_per_array(micro_cfg):
    # each array has its own named substream, so equal seeds agree array-wise
    w1 = init_encoder_weights(micro_cfg, seed=3)
    w2 = init_encoder_weights(micro_cfg, seed=3)
    for name in w1.tensors:
        assert np.array_equal(w1[name].data, w2[name].data)
    w3 = init_encoder_weights(micro_cfg, seed=4)
    assert not np.array_equal(w1["vision.tok_emb"].data, w3["vision.tok_emb"].data)


def test_layer_norm_affine_init_is_identity(micro_cfg):
    w = init_encoder_weights(micro_cfg, seed=0)
    assert np.array_equal(w["text.block0.ln1.gamma"].data, np.ones(micro_cfg.d_text))
    assert np.array_equal(w["text.block0.ln1.beta"].data, np.zeros(micro_cfg.d_text))


def test_split_forward_identity_every_depth(micro_cfg, micro_frozen):
    """Running blocks [0,J) then [J,L) must equal the one-shot pass exactly."""
    for modality, x in ((VISION, vision_seq(micro_cfg)), (TEXT, text_seq(micro_cfg))):
        seq0 = embed(x, micro_frozen)
        full = run_blocks(seq0, micro_frozen, modality, 0, micro_cfg.depth)
        for j in range(micro_cfg.depth + 1):
            lower = run_blocks(seq0, micro_frozen, modality, 0, j)
            upper = run_blocks(lower, micro_frozen, modality, j, micro_cfg.depth)
            assert np.array_equal(upper.data, full.data)


def test_run_blocks_range_validation(micro_cfg, micro_frozen):
    seq = embed(vision_seq(micro_cfg), micro_frozen)
    with pytest.raises(ValueError, match="block range"):
        run_blocks(seq, micro_frozen, VISION, 3, 2)
    with pytest.raises(ValueError, match="block range"):
        run_blocks(seq, micro_frozen, VISION, 0, micro_cfg.depth + 1)


def test_block_counter_counts_each_application(micro_cfg, micro_frozen):
    counter = BlockCounter()
    seq = embed(vision_seq(micro_cfg), micro_frozen)
    run_blocks(seq, micro_frozen, VISION, 0, 3, counter=counter)
    run_blocks(seq, micro_frozen, VISION, 1, 2, counter=counter)
    assert counter.count == 4
    counter2 = BlockCounter()
    encode(vision_seq(micro_cfg), micro_frozen, counter=counter2)
    assert counter2.count == micro_cfg.depth


def test_pool_reads_shifted_readout_row(micro_cfg, micro_frozen):
    x = text_seq(micro_cfg)
    seq = run_blocks(embed(x, micro_frozen), micro_frozen, TEXT, 0, micro_cfg.depth)
    base = pool(seq, x, micro_frozen)
    # prepending rows shifts the readout position by the same amount
    pad = T.Tensor(np.zeros((2, micro_cfg.d_text)))
    shifted = pool(T.concat([pad, seq], axis=0), x, micro_frozen, prepended=2)
    assert np.array_equal(base.data, shifted.data)
    with pytest.raises(IndexError):
        pool(seq, x, micro_frozen, prepended=micro_cfg.t_txt)


def test_encode_returns_unit_vectors(micro_cfg, micro_frozen):
    for x in (vision_seq(micro_cfg, 2), text_seq(micro_cfg, 2)):
        v = encode(x, micro_frozen)
        assert v.shape == (micro_cfg.d_embed,)
        assert np.linalg.norm(v.data) == pytest.approx(1.0, abs=1e-12)


def test_encode_deterministic_bitwise(micro_cfg, micro_frozen):
    x = vision_seq(micro_cfg, 5)
    assert np.array_equal(encode(x, micro_frozen).data, encode(x, micro_frozen).data)


def test_freeze_blocks_writes_and_empties_trainable(micro_cfg):
    w = init_encoder_weights(micro_cfg, seed=1)
    assert len(w.trainable()) == len(w.tensors)
    w.freeze()
    assert w.frozen and w.trainable() == []
    with pytest.raises(ValueError):
        w["vision.proj"].data[0, 0] = 1.0


def test_frozen_forward_builds_no_graph(micro_cfg, micro_frozen):
    v = encode(vision_seq(micro_cfg), micro_frozen)
    assert v.is_leaf() and not v.requires_grad


def test_trainable_forward_reaches_every_parameter(micro_cfg):
    """Pretraining must touch all weights, embedding tables included."""
    w = init_encoder_weights(micro_cfg, seed=8)
    r = np.random.RandomState(0)
    probe = T.Tensor(r.randn(micro_cfg.d_embed))
    loss = T.sum_all(T.mul(encode(vision_seq(micro_cfg, 3), w), probe))
    loss = loss + T.sum_all(T.mul(encode(text_seq(micro_cfg, 3), w), probe))
    grads = T.backward(loss)
    missing = [n for n, t in w.tensors.items() if t not in grads]
    assert missing == []


def test_checkpoint_round_trip_bit_exact(tmp_path, micro_cfg):
    w = init_encoder_weights(micro_cfg, seed=6)
    w.freeze()
    path = tmp_path / "towers.wts"
    save_encoder(path, w)
    loaded = load_encoder(path)
    assert loaded.frozen
    assert loaded.config == micro_cfg
    assert set(loaded.tensors) == set(w.tensors)
    for name in w.tensors:
        assert np.array_equal(loaded[name].data, w[name].data)
    x = vision_seq(micro_cfg, 9)
    assert np.array_equal(encode(x, w).data, encode(x, loaded).data)


def test_projection_is_modality_specific(micro_cfg, micro_frozen):
    h = T.Tensor(np.linspace(-1, 1, micro_cfg.d_vision))
    pv = project(h, micro_frozen, VISION)
    ht = T.Tensor(np.linspace(-1, 1, micro_cfg.d_text))
    pt = project(ht, micro_frozen, TEXT)
    assert pv.shape == pt.shape == (micro_cfg.d_embed,)
    assert not np.allclose(pv.data, pt.data)
