"""Gated fusion math against an independent per-position loop oracle, gate
saturation limits, conditioning assembly, and the layer-wise variant."""
import numpy as np
import pytest

from geofuse.errors import ConfigError, ShapeError
from geofuse.gating import (
    GateParams,
    LayerwiseThreeDMixParams,
    ThreeDMixParams,
    build_conditioning,
    fuse_single,
    gate_and_fuse,
    init_threedmix_params,
    layerwise_fuse,
    project_geo,
    sparse_layer_schedule,
)
from geofuse.nn import grad_check, mse
from geofuse.rng import RngStream
from geofuse.tensor import Param, ParamSet, Tensor


# ------------------------------------------------------------------ oracle

def fused_oracle(h, f_vggt, w_proj, w_gate, w_s, w_g):
    """Independent per-position loop implementing the gating equations:
    project, pool, per-position sigmoid gate on the [context; geometry]
    pair, blended output, concatenated conditioning."""
    b, l, d = h.shape
    n = f_vggt.shape[1]
    f_geo = np.einsum("bnk,kd->bnd", f_vggt, w_proj)
    s = h.mean(axis=1)  # B x D
    gate = np.zeros((b, n, d))
    fused = np.zeros((b, n, d))
    for bi in range(b):
        for j in range(n):
            pair = np.concatenate([s[bi], f_geo[bi, j]])
            g = 1.0 / (1.0 + np.exp(-(pair @ w_gate)))
            gate[bi, j] = g
            fused[bi, j] = g * (s[bi] @ w_s) + (1.0 - g) * (f_geo[bi, j] @ w_g)
    cond = np.concatenate([h, fused], axis=1)
    return gate, fused, cond


def random_params(rng, d_vggt, d):
    store = ParamSet()
    return ThreeDMixParams(
        w_proj=store.new("w_proj", rng.normal((d_vggt, d), 0.6)),
        gate=GateParams(
            w_gate=store.new("w_gate", rng.normal((2 * d, d), 0.6)),
            w_s=store.new("w_s", rng.normal((d, d), 0.6)),
            w_g=store.new("w_g", rng.normal((d, d), 0.6)),
        ),
    ), store


# ------------------------------------------------------------------ projection

def test_project_geo_identity():
    f = Tensor(np.random.default_rng(0).normal(size=(1, 3, 4)))
    out = project_geo(f, Tensor(np.eye(4)))
    np.testing.assert_array_equal(out.data, f.data)


def test_project_geo_zero_input(rng):
    w = Tensor(rng.normal((6, 4)))
    out = project_geo(Tensor(np.zeros((2, 3, 6))), w)
    np.testing.assert_array_equal(out.data, 0.0)


def test_project_geo_has_no_bias(rng):
    """Doubling the input exactly doubles the output (pure linearity)."""
    w = Tensor(rng.normal((6, 4)))
    f = rng.normal((2, 3, 6))
    y1 = project_geo(Tensor(f), w).data
    y2 = project_geo(Tensor(2 * f), w).data
    np.testing.assert_allclose(y2, 2 * y1, atol=1e-12)


# ------------------------------------------------------------------ gate + fuse

def test_zero_gate_weights_give_half_gate(rng):
    d, n = 5, 3
    params, _ = random_params(rng, 6, d)
    params.gate.w_gate.value.data[:] = 0.0
    h = Tensor(rng.normal((2, 4, d)))
    f_geo = project_geo(Tensor(rng.normal((2, n, 6))), params.w_proj)
    gate, fused = gate_and_fuse(h, f_geo, params.gate)
    np.testing.assert_array_equal(gate.data, 0.5)
    s = h.data.mean(axis=1, keepdims=True)
    want = 0.5 * (s @ params.gate.w_s.value.data) \
        + 0.5 * (f_geo.data @ params.gate.w_g.value.data)
    np.testing.assert_allclose(fused.data, want, atol=1e-12)


def test_gate_saturation_extremes(rng):
    d = 5
    params, _ = random_params(rng, 6, d)
    h = Tensor(rng.normal((2, 4, d)))
    f_geo = project_geo(Tensor(rng.normal((2, 3, 6))), params.w_proj)
    s = h.data.mean(axis=1, keepdims=True)

    _, semantic_only = gate_and_fuse(h, f_geo, params.gate, logit_offset=50.0)
    want = np.broadcast_to(s @ params.gate.w_s.value.data, semantic_only.data.shape)
    assert np.max(np.abs(semantic_only.data - want)) < 1e-12

    _, geo_only = gate_and_fuse(h, f_geo, params.gate, logit_offset=-50.0)
    want = f_geo.data @ params.gate.w_g.value.data
    assert np.max(np.abs(geo_only.data - want)) < 1e-12


def test_gate_strictly_inside_unit_interval(rng):
    params, _ = random_params(rng, 6, 5)
    h = Tensor(rng.normal((2, 4, 5), 2.0))
    f_geo = Tensor(rng.normal((2, 3, 5), 2.0))
    gate, _ = gate_and_fuse(h, f_geo, params.gate)
    assert np.all(gate.data > 0.0) and np.all(gate.data < 1.0)


def test_fusion_matches_loop_oracle_on_random_shapes():
    rng = RngStream(77, 0)
    for case in range(100):
        r = rng.derive(case)
        b = int(r.integers(1, 3))
        l = int(r.integers(1, 5))
        n = int(r.integers(1, 4))
        d = int(r.integers(1, 6))
        dv = int(r.integers(1, 7))
        params, _ = random_params(r, dv, d)
        h = r.normal((b, l, d))
        f_vggt = r.normal((b, n, dv))
        cond = fuse_single(Tensor(h), Tensor(f_vggt), params)
        _, _, want = fused_oracle(h, f_vggt, params.w_proj.value.data,
                                  params.gate.w_gate.value.data,
                                  params.gate.w_s.value.data,
                                  params.gate.w_g.value.data)
        assert np.max(np.abs(cond.tokens.data - want)) < 1e-12


def test_gate_gradient_liveness(rng):
    """The gate weights receive a nonzero gradient from a fused-output loss."""
    store = ParamSet()
    params = init_threedmix_params(store, rng, "mix", 6, 5)
    h = Tensor(rng.normal((2, 4, 5)))
    f_vggt = Tensor(rng.normal((2, 3, 6)))
    target = rng.normal((2, 7, 5))

    def loss():
        return mse(fuse_single(h, f_vggt, params).tokens, Tensor(target))

    assert grad_check(loss, store, rng.derive(3), n_coords=40) < 1e-4
    assert params.gate.w_gate.value.grad is not None
    assert np.max(np.abs(params.gate.w_gate.value.grad)) > 0


def test_default_init_starts_at_half_gate(rng):
    store = ParamSet()
    params = init_threedmix_params(store, rng, "mix", 6, 5)
    h = Tensor(rng.normal((2, 4, 5)))
    f_geo = project_geo(Tensor(rng.normal((2, 3, 6))), params.w_proj)
    gate, _ = gate_and_fuse(h, f_geo, params.gate)
    np.testing.assert_array_equal(gate.data, 0.5)


# ------------------------------------------------------------------ conditioning

def test_conditioning_length_arithmetic(rng):
    h = Tensor(rng.normal((2, 4, 5)))
    fused = Tensor(rng.normal((2, 3, 5)))
    cond = build_conditioning(h, fused)
    assert cond.tokens.shape == (2, 7, 5)
    assert (cond.semantic_len, cond.geo_len) == (4, 3)


def test_conditioning_without_geo_is_the_input(rng):
    h = Tensor(rng.normal((2, 4, 5)))
    assert build_conditioning(h, None).tokens is h
    empty = Tensor(np.zeros((2, 0, 5)))
    assert build_conditioning(h, empty).tokens is h


def test_conditioning_prefix_is_bit_identical(rng):
    h = Tensor(rng.normal((2, 4, 5)))
    fused = Tensor(rng.normal((2, 3, 5)))
    cond = build_conditioning(h, fused)
    np.testing.assert_array_equal(cond.tokens.data[:, :4, :], h.data)


def test_conditioning_width_mismatch(rng):
    with pytest.raises(ShapeError):
        build_conditioning(Tensor(rng.normal((2, 4, 5))), Tensor(rng.normal((2, 3, 6))))


def test_geo_count_changes_only_geo_len(rng):
    h = Tensor(rng.normal((2, 4, 5)))
    for n in (1, 2, 3):
        cond = build_conditioning(h, Tensor(rng.normal((2, n, 5))))
        assert cond.semantic_len == 4 and cond.geo_len == n
        np.testing.assert_array_equal(cond.tokens.data[:, :4, :], h.data)


# ------------------------------------------------------------------ layer-wise

def layerwise_params(rng, d_vggt, d, n_layers, tie=False):
    store = ParamSet()
    w_proj = store.new("w_proj", rng.normal((d_vggt, d), 0.6))
    layers = []
    base = None
    for i in range(n_layers):
        r = rng if not tie else RngStream(500, 1)
        gp = GateParams(
            w_gate=store.new(f"l{i}.w_gate", r.normal((2 * d, d), 0.6)),
            w_s=store.new(f"l{i}.w_s", r.normal((d, d), 0.6)),
            w_g=store.new(f"l{i}.w_g", r.normal((d, d), 0.6)),
        )
        if tie and base is not None:
            gp.w_gate.value.data[:] = base.w_gate.value.data
            gp.w_s.value.data[:] = base.w_s.value.data
            gp.w_g.value.data[:] = base.w_g.value.data
        base = base or gp
        layers.append(gp)
    return LayerwiseThreeDMixParams(w_proj, layers), store


def test_layerwise_single_layer_equals_groot_path(rng):
    params, _ = layerwise_params(rng.derive(0), 6, 5, 1)
    h = Tensor(rng.normal((2, 4, 5)))
    f_vggt = Tensor(rng.normal((2, 3, 6)))
    single = ThreeDMixParams(params.w_proj, params.per_layer[0])
    a = fuse_single(h, f_vggt, single).tokens.data
    b = layerwise_fuse([h], f_vggt, params)[0].tokens.data
    np.testing.assert_array_equal(a, b)


def test_layerwise_identical_layers_are_symmetric(rng):
    params, _ = layerwise_params(rng.derive(0), 6, 5, 3, tie=True)
    h = Tensor(rng.normal((2, 4, 5)))
    f_vggt = Tensor(rng.normal((2, 3, 6)))
    outs = layerwise_fuse([h, h, h], f_vggt, params)
    for o in outs[1:]:
        np.testing.assert_array_equal(outs[0].tokens.data, o.tokens.data)


def test_layerwise_perturbation_locality(rng):
    params, _ = layerwise_params(rng.derive(0), 6, 5, 3)
    hs = [Tensor(rng.normal((2, 4, 5))) for _ in range(3)]
    f_vggt = Tensor(rng.normal((2, 3, 6)))
    ref = layerwise_fuse(hs, f_vggt, params)
    bumped = list(hs)
    bumped[1] = Tensor(hs[1].data + 0.25)
    out = layerwise_fuse(bumped, f_vggt, params)
    np.testing.assert_array_equal(ref[0].tokens.data, out[0].tokens.data)
    np.testing.assert_array_equal(ref[2].tokens.data, out[2].tokens.data)
    assert np.max(np.abs(ref[1].tokens.data - out[1].tokens.data)) > 0


def test_layerwise_length_mismatch(rng):
    params, _ = layerwise_params(rng.derive(0), 6, 5, 2)
    h = Tensor(rng.normal((2, 4, 5)))
    with pytest.raises(ConfigError):
        layerwise_fuse([h], Tensor(rng.normal((2, 3, 6))), params)
    with pytest.raises(ConfigError):
        layerwise_fuse([h, h], Tensor(rng.normal((2, 3, 6))), params,
                       schedule=[True])


def test_layerwise_skipped_layers_get_plain_semantics(rng):
    params, _ = layerwise_params(rng.derive(0), 6, 5, 2)
    hs = [Tensor(rng.normal((2, 4, 5))) for _ in range(2)]
    f_vggt = Tensor(rng.normal((2, 3, 6)))
    outs = layerwise_fuse(hs, f_vggt, params, schedule=[True, False])
    assert outs[0].tokens.shape[1] == 7
    assert outs[1].tokens is hs[1]


# ------------------------------------------------------------------ schedule

def test_schedule_k0_fuses_everywhere():
    assert sparse_layer_schedule(4, 0) == [True, True, True, True]


def test_schedule_k1_alternates():
    assert sparse_layer_schedule(4, 1) == [True, False, True, False]


def test_schedule_single_layer_always_fuses():
    assert sparse_layer_schedule(1, 5) == [True]


def test_schedule_last_phase_anchors_at_deepest():
    assert sparse_layer_schedule(4, 1, phase="last") == [False, True, False, True]


def test_schedule_rejects_bad_args():
    with pytest.raises(ConfigError):
        sparse_layer_schedule(4, -1)
    with pytest.raises(ConfigError):
        sparse_layer_schedule(0, 1)
    with pytest.raises(ConfigError):
        sparse_layer_schedule(4, 1, phase="middle")
