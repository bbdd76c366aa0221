"""Refinement tests: oracle replays, counting formulas, sharing semantics.

The straight-line oracles below rebuild every step from the raw embedding
with no activation caching, mirroring the recursion definition directly.
Agreement with the cached implementations must be bit-exact, not approximate.
"""
import numpy as np
import pytest

from latentloop import tensor as T
from latentloop.encoder import (TEXT, VISION, BlockCounter, TokenSequence,
                                embed, encode, pool, project, run_blocks)
from latentloop.refinement import (RefineConfig, block_eval_count,
                                   block_eval_ratio, init_projector_bank,
                                   load_projectors, multi_depth_refine,
                                   parameter_count, refine, run_refinement,
                                   save_projectors, select_projector, thought)


def vision_seq(cfg, seed=0):
    rng = np.random.RandomState(seed)
    ids = [0] + list(rng.randint(1, cfg.vision_vocab, size=cfg.t_img - 1))
    return TokenSequence(VISION, ids)


def text_seq(cfg, seed=0):
    rng = np.random.RandomState(seed)
    n = cfg.t_txt - 1
    ids = list(rng.randint(0, cfg.text_vocab - 1, size=n)) + [cfg.eos_id]
    return TokenSequence(TEXT, ids, eos_index=n)


# -- straight-line oracles ------------------------------------------------------


def oracle_single_depth(x, weights, bank, j, k_steps):
    """Recursion unrolled with zero caching: every pass restarts at the tokens."""
    depth = weights.config.depth
    h_list = []
    v_list = []
    z_list = []
    for k in range(k_steps + 1):
        seq = embed(x, weights)
        seq = run_blocks(seq, weights, x.modality, 0, j)
        if k > 0:
            z = thought(h_list[k - 1], select_projector(bank, x.modality, 0, k - 1))
            z_list.append(z)
            seq = T.concat([T.stack_rows(z_list), seq], axis=0)
        seq = run_blocks(seq, weights, x.modality, j, depth)
        h = pool(seq, x, weights, prepended=k)
        h_list.append(h)
        v_list.append(project(h, weights, x.modality))
    return h_list, v_list


def test_refine_matches_straight_line_oracle_bit_exact(micro_cfg, micro_frozen):
    # L=4, d_m=8 micro towers; every (j, K) pair with K <= 2 must agree exactly
    for x in (vision_seq(micro_cfg, 1), text_seq(micro_cfg, 1)):
        for j in range(micro_cfg.depth + 1):
            for k_steps in (1, 2):
                cfg = RefineConfig(injection_depths=(j,), k_steps=k_steps)
                bank = init_projector_bank(cfg, micro_cfg, seed=7)
                trace = refine(x, micro_frozen, bank, cfg)
                h_list, v_list = oracle_single_depth(x, micro_frozen, bank, j, k_steps)
                for k in range(k_steps + 1):
                    assert np.array_equal(trace.pooled[k].data, h_list[k].data), (j, k)
                    assert np.array_equal(trace.embeddings[k].data, v_list[k].data), (j, k)


def test_multi_depth_two_site_hand_unrolled_oracle(micro_cfg, micro_frozen):
    """depths=(1,3) on the 4-block tower, K=2, written out segment by segment."""
    x = vision_seq(micro_cfg, 3)
    cfg = RefineConfig(injection_depths=(1, 3), k_steps=2, sharing="per_layer_step")
    bank = init_projector_bank(cfg, micro_cfg, seed=9)
    w, m = micro_frozen, x.modality
    ro = x.readout_index()

    base = run_blocks(embed(x, w), w, m, 0, 1)
    seg = run_blocks(base, w, m, 1, 3)
    rec_a = T.take_row(seg, ro)
    seg = run_blocks(seg, w, m, 3, 4)
    rec_b = pool(seg, x, w, prepended=0)
    h0, v0 = rec_b, project(rec_b, w, m)

    za1 = thought(rec_a, select_projector(bank, m, 0, 0))
    seq = run_blocks(T.concat([T.stack_rows([za1]), base], axis=0), w, m, 1, 3)
    rec_a1 = T.take_row(seq, 1 + ro)
    zb1 = thought(rec_b, select_projector(bank, m, 1, 0))
    seq = run_blocks(T.concat([T.stack_rows([zb1]), seq], axis=0), w, m, 3, 4)
    rec_b1 = pool(seq, x, w, prepended=2)
    h1, v1 = rec_b1, project(rec_b1, w, m)

    za2 = thought(rec_a1, select_projector(bank, m, 0, 1))
    seq = run_blocks(T.concat([T.stack_rows([za1, za2]), base], axis=0), w, m, 1, 3)
    rec_a2 = T.take_row(seq, 2 + ro)
    zb2 = thought(rec_b1, select_projector(bank, m, 1, 1))
    seq = run_blocks(T.concat([T.stack_rows([zb1, zb2]), seq], axis=0), w, m, 3, 4)
    rec_b2 = pool(seq, x, w, prepended=4)
    h2, v2 = rec_b2, project(rec_b2, w, m)

    trace = multi_depth_refine(x, w, bank, cfg)
    for k, (h, v) in enumerate([(h0, v0), (h1, v1), (h2, v2)]):
        assert np.array_equal(trace.pooled[k].data, h.data), k
        assert np.array_equal(trace.embeddings[k].data, v.data), k
    assert np.array_equal(trace.thoughts[0][0].data, za1.data)
    assert np.array_equal(trace.thoughts[1][1].data, zb2.data)
    assert trace.block_evals == micro_cfg.depth + 2 * (micro_cfg.depth - 1)


def test_multi_depth_single_site_equals_refine_bitwise(micro_cfg, micro_frozen):
    for x in (vision_seq(micro_cfg, 4), text_seq(micro_cfg, 4)):
        cfg = RefineConfig(injection_depths=(2,), k_steps=2)
        bank = init_projector_bank(cfg, micro_cfg, seed=13)
        a = refine(x, micro_frozen, bank, cfg)
        b = multi_depth_refine(x, micro_frozen, bank, cfg)
        for k in range(cfg.k_steps + 1):
            assert np.array_equal(a.embeddings[k].data, b.embeddings[k].data)
            assert np.array_equal(a.pooled[k].data, b.pooled[k].data)
        assert a.block_evals == b.block_evals


def test_zero_steps_is_the_frozen_forward_bitwise(micro_cfg, micro_frozen):
    cfg = RefineConfig(injection_depths=(2,), k_steps=0)
    bank = init_projector_bank(cfg, micro_cfg, seed=1)
    for seed in range(10):
        for x in (vision_seq(micro_cfg, seed), text_seq(micro_cfg, seed)):
            trace = run_refinement(x, micro_frozen, bank, cfg)
            assert not trace.active
            assert np.array_equal(trace.embeddings[0].data, encode(x, micro_frozen).data)


def test_inactive_modality_passes_through(micro_cfg, micro_frozen):
    cfg = RefineConfig(injection_depths=(2,), k_steps=3, modalities=(VISION,))
    bank = init_projector_bank(cfg, micro_cfg, seed=2)
    t = text_seq(micro_cfg, 6)
    trace = run_refinement(t, micro_frozen, bank, cfg)
    assert not trace.active and trace.thoughts == []
    assert len(trace.embeddings) == cfg.k_steps + 1
    base = encode(t, micro_frozen).data
    for v in trace.embeddings:
        assert np.array_equal(v.data, base)
    v_trace = run_refinement(vision_seq(micro_cfg, 6), micro_frozen, bank, cfg)
    assert v_trace.active and len(v_trace.thoughts) == 3


# -- counting -------------------------------------------------------------------


def test_parameter_count_pinned_paper_dims():
    shared = RefineConfig(injection_depths=(7,), k_steps=4, rank=1)
    assert parameter_count(shared, 768, 512) == 6402
    vision_only = RefineConfig(injection_depths=(7,), k_steps=4, modalities=(VISION,))
    assert parameter_count(vision_only, 768, 512) == 3841
    text_only = RefineConfig(injection_depths=(7,), k_steps=4, modalities=(TEXT,))
    assert parameter_count(text_only, 768, 512) == 2561
    per_step = RefineConfig(injection_depths=(7,), k_steps=4, sharing="per_step")
    assert parameter_count(per_step, 768, 512) == 4 * 6402 == 25608


def test_parameter_count_equals_actual_bank_size(micro_cfg):
    grids = [
        RefineConfig(injection_depths=(2,), k_steps=4),
        RefineConfig(injection_depths=(2,), k_steps=4, sharing="per_step"),
        RefineConfig(injection_depths=(1, 2, 3), k_steps=4, sharing="per_layer"),
        RefineConfig(injection_depths=(1, 3), k_steps=2, sharing="per_layer_step"),
        RefineConfig(injection_depths=(2,), k_steps=3, rank=2, modalities=(TEXT,)),
    ]
    for cfg in grids:
        bank = init_projector_bank(cfg, micro_cfg, seed=0)
        actual = sum(t.size for t in bank.trainable())
        assert actual == parameter_count(cfg, micro_cfg.d_vision, micro_cfg.d_text), cfg


def test_block_eval_formula_and_pinned_ratio():
    for j in range(13):
        for k in range(7):
            cfg = RefineConfig(injection_depths=(j,), k_steps=k)
            assert block_eval_count(12, cfg) == j + (k + 1) * (12 - j)
    pinned = RefineConfig(injection_depths=(7,), k_steps=4)
    assert block_eval_count(12, pinned) == 32
    assert block_eval_ratio(12, pinned) == pytest.approx(2.667, abs=1e-3)
    with pytest.raises(ValueError):
        block_eval_count(4, RefineConfig(injection_depths=(5,), k_steps=1))


def test_counter_instrumentation_matches_formula(micro_cfg, micro_frozen):
    x = vision_seq(micro_cfg, 8)
    for j in range(micro_cfg.depth + 1):
        for k in range(4):
            cfg = RefineConfig(injection_depths=(j,), k_steps=k)
            bank = init_projector_bank(cfg, micro_cfg, seed=3)
            counter = BlockCounter()
            trace = refine(x, micro_frozen, bank, cfg, counter=counter)
            assert counter.count == trace.block_evals
            assert counter.count == block_eval_count(micro_cfg.depth, cfg)


# -- projector bank ---------------------------------------------------------------


def test_sharing_mode_identity_structure(micro_cfg):
    depths = (1, 2, 3)

    def ids(sharing, k_steps=4):
        cfg = RefineConfig(injection_depths=depths, k_steps=k_steps, sharing=sharing)
        bank = init_projector_bank(cfg, micro_cfg, seed=5)
        return cfg, bank

    cfg, bank = ids("shared")
    assert select_projector(bank, VISION, 0, 0) is select_projector(bank, VISION, 2, 3)
    assert len(bank.instances) == 2  # one per modality

    cfg, bank = ids("per_step")
    assert select_projector(bank, VISION, 0, 1) is select_projector(bank, VISION, 2, 1)
    assert select_projector(bank, VISION, 0, 1) is not select_projector(bank, VISION, 0, 2)
    assert len(bank.instances) == 2 * 4

    cfg, bank = ids("per_layer")
    assert select_projector(bank, VISION, 1, 0) is select_projector(bank, VISION, 1, 3)
    assert select_projector(bank, VISION, 1, 0) is not select_projector(bank, VISION, 2, 0)
    assert len(bank.instances) == 2 * 3

    cfg, bank = ids("per_layer_step")
    distinct = {id(select_projector(bank, VISION, di, si)) for di in range(3) for si in range(4)}
    assert len(distinct) == 12  # 3 depths x 4 steps, all separate
    assert len(bank.instances) == 2 * 12


def test_select_projector_bounds(micro_cfg):
    cfg = RefineConfig(injection_depths=(1, 2), k_steps=2)
    bank = init_projector_bank(cfg, micro_cfg, seed=0)
    with pytest.raises(IndexError):
        select_projector(bank, VISION, 2, 0)
    with pytest.raises(IndexError):
        select_projector(bank, VISION, 0, 2)


def test_refine_config_validation():
    with pytest.raises(ValueError):
        RefineConfig(injection_depths=())
    with pytest.raises(ValueError):
        RefineConfig(injection_depths=(3, 2))
    with pytest.raises(ValueError):
        RefineConfig(injection_depths=(-1,))
    with pytest.raises(ValueError):
        RefineConfig(k_steps=-1)
    with pytest.raises(ValueError):
        RefineConfig(rank=0)
    with pytest.raises(ValueError):
        RefineConfig(sharing="global")
    with pytest.raises(ValueError):
        RefineConfig(modalities=())
    with pytest.raises(ValueError):
        RefineConfig(modalities=("vision", "vision"))


def test_thought_shape_and_rank_bottleneck(micro_cfg):
    cfg = RefineConfig(injection_depths=(2,), k_steps=1)
    bank = init_projector_bank(cfg, micro_cfg, seed=4)
    proj = select_projector(bank, VISION, 0, 0)
    h = T.Tensor(np.linspace(-1, 1, micro_cfg.d_vision))
    z = thought(h, proj)
    assert z.shape == (micro_cfg.d_vision,)
    assert proj.w1.shape == (1, micro_cfg.d_vision)
    assert proj.w2.shape == (micro_cfg.d_vision, 1)


def test_gradients_flow_only_into_projectors(micro_cfg, micro_frozen, micro_refine):
    bank = init_projector_bank(micro_refine, micro_cfg, seed=6)
    trace = refine(vision_seq(micro_cfg, 2), micro_frozen, bank, micro_refine)
    grads = T.backward(T.sum_all(trace.embeddings[-1]))
    bank_tensors = set(map(id, bank.trainable()))
    assert grads, "refined output must be differentiable"
    for tensor in grads:
        assert id(tensor) in bank_tensors


def test_projector_checkpoint_round_trip(tmp_path, micro_cfg):
    cfg = RefineConfig(injection_depths=(1, 3), k_steps=2, sharing="per_layer_step")
    bank = init_projector_bank(cfg, micro_cfg, seed=21)
    path = tmp_path / "bank.wts"
    save_projectors(path, bank)
    loaded = load_projectors(path, cfg)
    assert set(loaded.instances) == set(bank.instances)
    for key, proj in bank.instances.items():
        for (fname, t), (_, t2) in zip(proj.fields(), loaded.instances[key].fields()):
            assert np.array_equal(t.data, t2.data), (key, fname)
            assert t2.requires_grad
    with pytest.raises(KeyError, match="missing"):
        load_projectors(path, RefineConfig(injection_depths=(2,), k_steps=2))


def test_refine_rejects_multi_depth_config(micro_cfg, micro_frozen):
    cfg = RefineConfig(injection_depths=(1, 2), k_steps=1)
    bank = init_projector_bank(cfg, micro_cfg, seed=0)
    with pytest.raises(ValueError, match="single injection depth"):
        refine(vision_seq(micro_cfg), micro_frozen, bank, cfg)
    with pytest.raises(ValueError, match="injection depth"):
        refine(vision_seq(micro_cfg), micro_frozen,
               init_projector_bank(RefineConfig(injection_depths=(9,), k_steps=1), micro_cfg, 0),
               RefineConfig(injection_depths=(9,), k_steps=1))
