"""Backbone contracts: position-blind semantics, exact geometric decode,
single-pass layer extraction, and DiT conditioning modes."""
import numpy as np
import pytest

from conftest import make_scenes, tiny_dit_cfg, tiny_geo_cfg, tiny_mllm_cfg
from geofuse.backbones import (
    ActionDiT,
    GeoEncoder,
    SceneSpec,
    ToyMLLM,
    sinusoid_table,
    timestep_embedding,
)
from geofuse.errors import CapacityError, ConfigError, DomainError, ShapeError
from geofuse.nn import grad_check, mse
from geofuse.rng import RngStream
from geofuse.tensor import ParamSet, Tensor


def build_mllm(rng, **kw):
    store = ParamSet()
    return ToyMLLM(tiny_mllm_cfg(**kw), store, rng), store


def build_geo(**kw):
    store = ParamSet()
    return GeoEncoder(tiny_geo_cfg(**kw), store), store


# ------------------------------------------------------------------ scenes

def test_scene_rejects_out_of_cube_positions():
    with pytest.raises(DomainError):
        SceneSpec(np.array([[0.5, 0.5, 1.5]]), [3], 0)


def test_scene_rejects_dangling_instruction():
    with pytest.raises(DomainError):
        SceneSpec(np.array([[0.5, 0.5, 0.5]]), [3], 1)


# ------------------------------------------------------------------ mllm

def test_mllm_layer_count_and_shapes(rng):
    mllm, _ = build_mllm(rng)
    scenes = make_scenes(rng.derive(1), 3, n_objects=2)
    out = mllm.forward(scenes)
    assert len(out.per_layer) == mllm.cfg.n_layers
    for h in out.per_layer:
        assert h.shape == (3, 3, mllm.cfg.d)  # 1 instruction + 2 visual tokens
    assert out.final is out.per_layer[-1]


def test_mllm_is_invariant_to_object_positions(rng):
    """The constructed ambiguity: the semantic channel must not see geometry."""
    mllm, _ = build_mllm(rng)
    ids, instr = [4, 9], 1
    a = SceneSpec(np.array([[0.1, 0.2, 0.3], [0.9, 0.8, 0.7]]), ids, instr)
    b = SceneSpec(np.array([[0.6, 0.6, 0.6], [0.2, 0.1, 0.9]]), ids, instr)
    out_a = mllm.forward([a])
    out_b = mllm.forward([b])
    for ha, hb in zip(out_a.per_layer, out_b.per_layer):
        np.testing.assert_array_equal(ha.data, hb.data)


def test_mllm_deterministic_across_runs():
    scenes = make_scenes(RngStream(3, 3), 2, n_objects=2)
    outs = []
    for _ in range(2):
        mllm, _ = build_mllm(RngStream(11, 0))
        outs.append(mllm.forward(scenes).final.data)
    np.testing.assert_array_equal(outs[0], outs[1])


def test_mllm_runs_each_layer_exactly_once_per_forward(rng):
    mllm, _ = build_mllm(rng)
    scenes = make_scenes(rng.derive(1), 2, n_objects=2)
    assert mllm.layer_calls == 0
    mllm.forward(scenes)
    assert mllm.layer_calls == mllm.cfg.n_layers


def test_mllm_sequence_capacity_error(rng):
    mllm, _ = build_mllm(rng, l_max=2)
    scenes = make_scenes(rng.derive(1), 1, n_objects=2)  # 3 tokens > 2
    with pytest.raises(CapacityError):
        mllm.forward(scenes)


def test_mllm_visual_slice_selects_visual_tokens(rng):
    mllm, _ = build_mllm(rng)
    scenes = make_scenes(rng.derive(1), 2, n_objects=2)
    out = mllm.forward(scenes)
    sl = out.visual_slice(0)
    assert sl.shape == (2, 2, mllm.cfg.d)


# ------------------------------------------------------------------ geo encoder

def test_geo_decode_roundtrip(rng):
    geo, _ = build_geo()
    scenes = make_scenes(rng, 3, n_objects=3)
    tokens = geo.forward(scenes).tokens.data
    decoded = geo.decode(tokens)
    want = np.stack([s.object_positions for s in scenes])
    assert np.max(np.abs(decoded - want)) < 1e-10


def test_geo_translation_locality():
    geo, _ = build_geo()
    base = SceneSpec(np.array([[0.2, 0.2, 0.2], [0.7, 0.7, 0.7]]), [1, 2], 0)
    moved = SceneSpec(np.array([[0.2, 0.2, 0.2], [0.7, 0.9, 0.7]]), [1, 2], 0)
    t0 = geo.forward([base]).tokens.data[0]
    t1 = geo.forward([moved]).tokens.data[0]
    np.testing.assert_array_equal(t0[0], t1[0])
    assert np.max(np.abs(t0[1] - t1[1])) > 0


def test_geo_params_fixed_by_class_seed():
    a, _ = build_geo()
    b, _ = build_geo()
    np.testing.assert_array_equal(a.w_embed.value.data, b.w_embed.value.data)
    np.testing.assert_array_equal(a.base.value.data, b.base.value.data)


def test_geo_frozen_params_take_no_grad(rng):
    geo, store = build_geo()
    scenes = make_scenes(rng, 2, n_objects=2)

    def loss():
        t = geo.forward(scenes).tokens
        return (t * t).mean()

    assert grad_check(loss, store, rng.derive(0), n_coords=4) == 0.0
    assert geo.w_embed.value.grad is None


def test_geo_capacity_error(rng):
    geo, _ = build_geo(n_patches=2)
    scenes = make_scenes(rng, 1, n_objects=3)
    with pytest.raises(CapacityError):
        geo.forward(scenes)


def test_geo_global_token_is_patch_mean(rng):
    geo, _ = build_geo()
    scenes = make_scenes(rng, 2, n_objects=3)
    out = geo.forward(scenes)
    np.testing.assert_allclose(out.global_token.data,
                               out.tokens.data.mean(axis=1, keepdims=True),
                               atol=1e-14)


# ------------------------------------------------------------------ timestep embedding

def test_timestep_embedding_zero_phase():
    emb = timestep_embedding(0.0, 8).data[0, 0]
    np.testing.assert_array_equal(emb[:4], 0.0)
    np.testing.assert_array_equal(emb[4:], 1.0)


def test_timestep_embedding_injective_on_grid():
    taus = [i / 10 for i in range(11)]
    embs = [timestep_embedding(t, 8).data.ravel() for t in taus]
    for i in range(len(taus)):
        for j in range(i + 1, len(taus)):
            assert np.max(np.abs(embs[i] - embs[j])) > 1e-6


def test_timestep_embedding_shape_and_domain():
    assert timestep_embedding(0.3, 8).shape == (1, 1, 8)
    with pytest.raises(DomainError):
        timestep_embedding(1.5, 8)
    with pytest.raises(ConfigError):
        timestep_embedding(0.5, 7)


def test_sinusoid_table_shape_and_first_row():
    tab = sinusoid_table(5, 6)
    assert tab.shape == (5, 6)
    np.testing.assert_array_equal(tab[0, :3], 0.0)
    np.testing.assert_array_equal(tab[0, 3:], 1.0)


# ------------------------------------------------------------------ action dit

def _dit_inputs(rng, dcfg):
    noisy = Tensor(rng.normal((2, dcfg.horizon, dcfg.d_action)))
    cond = Tensor(rng.normal((2, 5, dcfg.d)))
    return noisy, cond


def test_dit_pi_mode_with_duplicated_sequence_equals_groot(rng):
    store = ParamSet()
    dcfg = tiny_dit_cfg()
    dit = ActionDiT(dcfg, store, rng.derive(0))
    noisy, cond = _dit_inputs(rng.derive(1), dcfg)
    single = dit.forward(noisy, cond, 0.4)
    listed = dit.forward(noisy, [cond] * dcfg.n_dit_layers, 0.4)
    assert np.max(np.abs(single.data - listed.data)) < 1e-10


def test_dit_output_shape_independent_of_conditioning_length(rng):
    store = ParamSet()
    dcfg = tiny_dit_cfg()
    dit = ActionDiT(dcfg, store, rng.derive(0))
    noisy = Tensor(rng.normal((2, dcfg.horizon, dcfg.d_action)))
    for lk in (1, 4, 9):
        cond = Tensor(rng.normal((2, lk, dcfg.d)))
        assert dit.forward(noisy, cond, 0.2).shape == (2, dcfg.horizon, dcfg.d_action)


def test_dit_pi_mode_wrong_list_length(rng):
    store = ParamSet()
    dcfg = tiny_dit_cfg()
    dit = ActionDiT(dcfg, store, rng.derive(0))
    noisy, cond = _dit_inputs(rng.derive(1), dcfg)
    with pytest.raises(ConfigError):
        dit.forward(noisy, [cond] * (dcfg.n_dit_layers + 1), 0.4)


def test_dit_wrong_chunk_shape(rng):
    store = ParamSet()
    dcfg = tiny_dit_cfg()
    dit = ActionDiT(dcfg, store, rng.derive(0))
    noisy = Tensor(rng.normal((2, dcfg.horizon + 1, dcfg.d_action)))
    with pytest.raises(ShapeError):
        dit.forward(noisy, Tensor(rng.normal((2, 3, dcfg.d))), 0.4)


def test_dit_grad_check(rng):
    store = ParamSet()
    dcfg = tiny_dit_cfg()
    dit = ActionDiT(dcfg, store, rng.derive(0))
    noisy, cond = _dit_inputs(rng.derive(1), dcfg)
    target = rng.normal((2, dcfg.horizon, dcfg.d_action))

    def loss():
        return mse(dit.forward(noisy, cond, 0.35), Tensor(target))

    assert grad_check(loss, store, rng.derive(2), n_coords=50) < 1e-4
