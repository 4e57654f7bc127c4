"""The nine geometry-fusion schemes plus the base model, behind one registry.

Each scheme is a bundle of its own parameters plus a fixed set of hooks
into the policy forward pass: rewriting the input token sequence,
patching an intermediate backbone layer, building the conditioning
sequence(s) for the action expert, adding a parallel read inside the
action blocks, or contributing a training-time alignment loss.  Every
scheme documents a parameter setting under which the policy collapses
exactly to the base model (`null_geo`, a zeroed branch projection, or a
zero adapter scale).
"""
from __future__ import annotations

import numpy as np

from .backbones import GeoTokens, MLLMOutput, sinusoid_table
from .errors import ConfigError, SchemeContractError, ShapeError
from .gating import (
    build_conditioning,
    fuse_single,
    init_layerwise_params,
    init_threedmix_params,
    layerwise_fuse,
)
from .nn import attention_params, cross_attention, expand_seq, init_matrix, layer_norm, linear, norm_params, cosine_rows
from .tensor import ParamSet, Tensor, concat

SCHEME_IDS = (
    "none",
    "ae_fusion",
    "early_fusion",
    "concat_fusion",
    "crossattn_fusion",
    "gated_fusion",
    "threed_tokens",
    "midlayer_injection",
    "spatial_forcing",
    "visual_fusion",
)

_REGISTRY: dict[str, type] = {}


def register(cls):
    _REGISTRY[cls.id] = cls
    return cls


def make_scheme(scheme_id: str, store: ParamSet, rng, mcfg, gcfg, dcfg, arch: str, opts=None):
    if scheme_id not in _REGISTRY:
        raise ConfigError(
            f"unknown fusion scheme {scheme_id!r}; valid ids: {', '.join(SCHEME_IDS)}"
        )
    return _REGISTRY[scheme_id](store, rng, mcfg, gcfg, dcfg, arch, opts or {})


class FusionScheme:
    """Base bundle: no geometry, conditioning is the raw semantic stream."""

    id = "none"
    hooks: frozenset = frozenset()
    inference_geo_required = False
    training_geo_required = False

    def __init__(self, store, rng, mcfg, gcfg, dcfg, arch, opts):
        self.mcfg, self.gcfg, self.dcfg = mcfg, gcfg, dcfg
        self.arch = arch
        self.null_geo = bool(opts.get("null_geo", False))
        self.opts = opts
        self.build(store, rng)

    def build(self, store, rng):
        pass

    # -- hooks, all optional ------------------------------------------------

    def modify_input(self, emb: Tensor, meta: dict, geo) -> Tensor:
        return emb

    def mid_hook(self, geo):
        return None

    def geo_branch(self, geo):
        return None

    def aux_loss(self, mllm_out: MLLMOutput, geo):
        return None

    def conditioning(self, mllm_out: MLLMOutput, geo, schedule=None):
        if self.arch == "pi":
            return [build_conditioning(h, None).tokens
                    for h in mllm_out.per_layer[-self.dcfg.n_dit_layers:]]
        return mllm_out.final

    # -- helpers ------------------------------------------------------------

    def _pi_layers(self, mllm_out: MLLMOutput):
        return mllm_out.per_layer[-self.dcfg.n_dit_layers:]

    def _need(self, geo) -> GeoTokens:
        if geo is None:
            raise SchemeContractError(f"scheme {self.id!r} needs geometric tokens here")
        return geo


register(FusionScheme)


class GateMixer:
    """Blend per-patch and pooled geometric components, then project."""

    def __init__(self, store, rng, prefix, d_vggt, d):
        self.w_mix = store.new(f"{prefix}.w_mix", np.zeros((2 * d_vggt, d_vggt)))
        self.w_proj = store.new(f"{prefix}.w_proj", init_matrix(rng, d_vggt, d))

    def __call__(self, geo: GeoTokens, logit_offset: float = 0.0) -> Tensor:
        if geo.global_token is None:
            raise SchemeContractError("gate mixer needs the pooled geometric component")
        n = geo.tokens.shape[1]
        glob = expand_seq(geo.global_token, n)
        logits = linear(concat([geo.tokens, glob], axis=2), self.w_mix)
        if logit_offset:
            logits = logits + logit_offset
        gate = logits.sigmoid()
        mixed = gate * geo.tokens + (1.0 - gate) * glob
        return linear(mixed, self.w_proj)


@register
class AEFusion(FusionScheme):
    """Parallel cross-attention over projected geometry inside every action block."""

    id = "ae_fusion"
    hooks = frozenset({"dit_block"})
    inference_geo_required = True
    training_geo_required = True

    def build(self, store, rng):
        d, dv = self.mcfg.d, self.gcfg.d_vggt
        self.w_proj = store.new("scheme.ae.w_proj", init_matrix(rng, dv, d))
        self.block_params = [
            attention_params(store, rng, f"scheme.ae.block{i}", d)
            for i in range(self.dcfg.n_dit_layers)
        ]

    def geo_branch(self, geo):
        geo = self._need(geo)
        return linear(geo.tokens, self.w_proj), self.block_params


@register
class EarlyFusion(FusionScheme):
    """Projected geometry tokens appended to the backbone input sequence."""

    id = "early_fusion"
    hooks = frozenset({"mllm_input"})
    inference_geo_required = True
    training_geo_required = True

    def build(self, store, rng):
        self.w_proj = store.new("scheme.early.w_proj",
                                init_matrix(rng, self.gcfg.d_vggt, self.mcfg.d))

    def modify_input(self, emb, meta, geo):
        if self.null_geo:
            return emb
        geo = self._need(geo)
        return concat([emb, linear(geo.tokens, self.w_proj)], axis=1)


@register
class ConcatFusion(FusionScheme):
    """Gate-mixed geometry concatenated onto the semantic output."""

    id = "concat_fusion"
    hooks = frozenset({"mllm_output"})
    inference_geo_required = True
    training_geo_required = True

    def build(self, store, rng):
        self.mixer = GateMixer(store, rng, "scheme.concat.mixer",
                               self.gcfg.d_vggt, self.mcfg.d)

    def _geo_tokens(self, geo, h):
        return self.mixer(self._need(geo))

    def conditioning(self, mllm_out, geo, schedule=None):
        if self.null_geo:
            return super().conditioning(mllm_out, geo, schedule)
        if self.arch == "pi":
            return [build_conditioning(h, self._geo_tokens(geo, h)).tokens
                    for h in self._pi_layers(mllm_out)]
        return build_conditioning(mllm_out.final,
                                  self._geo_tokens(geo, mllm_out.final)).tokens


@register
class CrossAttnFusion(ConcatFusion):
    """Like concat fusion, with a residual cross-attention refinement first."""

    id = "crossattn_fusion"
    hooks = frozenset({"mllm_output"})

    def build(self, store, rng):
        super().build(store, rng)
        self.attn = attention_params(store, rng, "scheme.crossattn.attn", self.mcfg.d)

    def _geo_tokens(self, geo, h):
        f_geo = self.mixer(self._need(geo))
        return cross_attention(f_geo, h, self.attn["wq"], self.attn["wk"],
                               self.attn["wv"], self.attn["wo"], self.mcfg.heads) + f_geo


@register
class GatedFusion(FusionScheme):
    """Semantic-conditioned gated blending of geometry (the headline module)."""

    id = "gated_fusion"
    hooks = frozenset({"mllm_output"})
    inference_geo_required = True
    training_geo_required = True

    def build(self, store, rng):
        d, dv = self.mcfg.d, self.gcfg.d_vggt
        if self.arch == "pi":
            self.params = init_layerwise_params(store, rng, "scheme.gated", dv, d,
                                                self.dcfg.n_dit_layers)
        else:
            self.params = init_threedmix_params(store, rng, "scheme.gated", dv, d)

    def conditioning(self, mllm_out, geo, schedule=None):
        if self.null_geo:
            return super().conditioning(mllm_out, geo, schedule)
        geo = self._need(geo)
        if self.arch == "pi":
            seqs = layerwise_fuse(self._pi_layers(mllm_out), geo.tokens,
                                  self.params, schedule)
            return [s.tokens for s in seqs]
        return fuse_single(mllm_out.final, geo.tokens, self.params).tokens


@register
class ThreeDTokens(FusionScheme):
    """Learnable special token supervised to carry geometry; geometry-free inference."""

    id = "threed_tokens"
    hooks = frozenset({"mllm_input", "loss_terms"})
    inference_geo_required = False
    training_geo_required = True

    def build(self, store, rng):
        d, dv = self.mcfg.d, self.gcfg.d_vggt
        self.token = store.new("scheme.tok3d.embed", rng.normal((1, 1, d), 0.5))
        self.w_align = store.new("scheme.tok3d.w_align", init_matrix(rng, d, d))
        self.w_proj = store.new("scheme.tok3d.w_proj", init_matrix(rng, dv, d))
        self.weight = float(self.opts.get("align_weight", 0.1))

    def modify_input(self, emb, meta, geo):
        if self.null_geo:
            return emb
        b = emb.shape[0]
        tok = self.token.value * Tensor(np.ones((b, 1, 1)))
        meta["special_token"] = True
        return concat([emb, tok], axis=1)

    def aux_loss(self, mllm_out, geo):
        if self.null_geo:
            return None
        geo = self._need(geo)
        h_tok = mllm_out.final[:, -1, :]  # the appended special token's state
        pooled = geo.tokens.mean(axis=1)
        cos = cosine_rows(linear(h_tok, self.w_align), linear(pooled, self.w_proj))
        return self.weight, (1.0 - cos).mean()


@register
class MidLayerInjection(FusionScheme):
    """Adapter-style cross-attention injected after one backbone layer.

    The adapter scale starts at zero, so a freshly built scheme is exactly
    the base model."""

    id = "midlayer_injection"
    hooks = frozenset({"mllm_mid_layer"})
    inference_geo_required = True
    training_geo_required = True

    def build(self, store, rng):
        d, dv = self.mcfg.d, self.gcfg.d_vggt
        self.k = int(self.opts.get("midlayer_k", self.mcfg.n_layers // 2))
        if not 0 <= self.k < self.mcfg.n_layers:
            raise ConfigError(f"mid-layer index {self.k} out of range")
        self.w_proj = store.new("scheme.mid.w_proj", init_matrix(rng, dv, d))
        self.ln = norm_params(store, "scheme.mid.ln", d)
        self.attn = attention_params(store, rng, "scheme.mid.attn", d)
        self.alpha = store.new("scheme.mid.alpha", np.zeros(()))

    def mid_hook(self, geo):
        geo = self._need(geo)
        f_geo = linear(geo.tokens, self.w_proj)

        def hook(i, h):
            if i != self.k:
                return h
            hn = layer_norm(h, self.ln["gain"].value, self.ln["bias"].value)
            upd = cross_attention(hn, f_geo, self.attn["wq"], self.attn["wk"],
                                  self.attn["wv"], self.attn["wo"], self.mcfg.heads)
            return h + self.alpha.value * upd

        return hook


@register
class SpatialForcing(FusionScheme):
    """Training-only alignment of intermediate visual states to geometry.

    The inference graph is the unmodified base model; geometry and the
    projector exist only inside the loss term."""

    id = "spatial_forcing"
    hooks = frozenset({"loss_terms"})
    inference_geo_required = False
    training_geo_required = True

    def build(self, store, rng):
        d, dv = self.mcfg.d, self.gcfg.d_vggt
        self.k = int(self.opts.get("forcing_k", self.mcfg.n_layers // 2))
        self.ln = norm_params(store, "scheme.sf.ln", d)
        self.w1 = store.new("scheme.sf.w1", init_matrix(rng, d, d))
        self.w2 = store.new("scheme.sf.w2", init_matrix(rng, d, dv))
        self.e_pos = sinusoid_table(self.gcfg.n_patches, dv)
        self.weight = float(self.opts.get("forcing_weight", 0.1))

    def aux_loss(self, mllm_out, geo):
        if self.null_geo:
            return None
        geo = self._need(geo)
        h_vis = mllm_out.visual_slice(self.k)
        n = geo.tokens.shape[1]
        if h_vis.shape[1] != n:
            raise ShapeError(
                f"visual slice length {h_vis.shape[1]} != {n} geometric patches"
            )
        proj = linear(linear(layer_norm(h_vis, self.ln["gain"].value,
                                        self.ln["bias"].value), self.w1).gelu(), self.w2)
        target = Tensor(geo.tokens.data + self.e_pos[:n])
        cos = cosine_rows(proj, target)
        return self.weight, -cos.mean()


@register
class VisualFusion(FusionScheme):
    """Enrich the visual input tokens by attending to geometry pre-backbone."""

    id = "visual_fusion"
    hooks = frozenset({"mllm_input"})
    inference_geo_required = True
    training_geo_required = True

    def build(self, store, rng):
        d, dv = self.mcfg.d, self.gcfg.d_vggt
        self.attn = attention_params(store, rng, "scheme.vf.attn", d, d_kv=dv)
        self.ln = norm_params(store, "scheme.vf.ln", d)

    def modify_input(self, emb, meta, geo):
        if self.null_geo:
            return emb
        geo = self._need(geo)
        lo, hi = meta["instr_len"], meta["instr_len"] + meta["n_visual"]
        t2d = emb[:, lo:hi, :]
        upd = cross_attention(t2d, geo.tokens, self.attn["wq"], self.attn["wk"],
                              self.attn["wv"], self.attn["wo"], self.mcfg.heads)
        enriched = layer_norm(t2d + upd, self.ln["gain"].value, self.ln["bias"].value)
        parts = [emb[:, :lo, :], enriched]
        if hi < emb.shape[1]:
            parts.append(emb[:, hi:, :])
        return concat(parts, axis=1)
