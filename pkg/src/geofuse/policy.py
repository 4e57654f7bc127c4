"""Full policy: backbone + fusion scheme + action expert + flow objective.

The policy owns every parameter (one ParamSet) and exposes the three
entry points the benchmark needs: a differentiable training loss, a
deterministic conditioning builder, and noise-to-action inference via
Euler integration.  Conditioning is computed once per inference call and
reused across all integration steps, since no scheme couples the
backbone to the flow time.
"""
from __future__ import annotations

import numpy as np

from .backbones import (
    ActionDiT,
    DiTConfig,
    GeoEncoder,
    GeoEncoderConfig,
    GeoTokens,
    MLLMOutput,
    SceneSpec,
    ToyMLLM,
    ToyMLLMConfig,
)
from .errors import SchemeContractError
from .flow import FlowConfig, euler_integrate, fm_loss, fm_training_targets, sample_tau
from .gating import sparse_layer_schedule
from .rng import RngStream
from .schemes import make_scheme
from .tensor import ParamSet, Tensor


class FusionPolicy:
    def __init__(
        self,
        scheme_id: str,
        arch: str = "groot",
        mllm_cfg: ToyMLLMConfig | None = None,
        geo_cfg: GeoEncoderConfig | None = None,
        dit_cfg: DiTConfig | None = None,
        flow_cfg: FlowConfig | None = None,
        rng: RngStream | None = None,
        with_geo_encoder: bool = True,
        sparse_k: int = 0,
        sparse_phase: str = "first",
        scheme_opts: dict | None = None,
    ):
        if arch not in ("groot", "pi"):
            raise SchemeContractError(f"unknown architecture {arch!r}")
        self.arch = arch
        self.mcfg = mllm_cfg or ToyMLLMConfig()
        self.gcfg = geo_cfg or GeoEncoderConfig()
        self.dcfg = dit_cfg or DiTConfig()
        self.fcfg = flow_cfg or FlowConfig()
        rng = rng or RngStream(0)

        self.store = ParamSet()
        self.mllm = ToyMLLM(self.mcfg, self.store, rng.derive(1))
        self.geo_encoder = GeoEncoder(self.gcfg, self.store) if with_geo_encoder else None
        self.dit = ActionDiT(self.dcfg, self.store, rng.derive(2))
        self.scheme = make_scheme(scheme_id, self.store, rng.derive(3),
                                  self.mcfg, self.gcfg, self.dcfg, arch, scheme_opts)
        self.schedule = (
            sparse_layer_schedule(self.dcfg.n_dit_layers, sparse_k, sparse_phase)
            if arch == "pi" else None
        )

    # -- parameter bookkeeping --------------------------------------------

    def param_groups(self):
        """(backbone params, fusion/action params); frozen params excluded
        from both (the optimizer skips them anyway)."""
        backbone = [p for p in self.store if p.id.startswith("mllm.")]
        rest = [p for p in self.store if not p.id.startswith("mllm.")
                and not p.id.startswith("geo.")]
        geo = [p for p in self.store if p.id.startswith("geo.") and p.trainable]
        return backbone, rest + geo

    # -- geometry ----------------------------------------------------------

    def geo_tokens(self, scenes, training: bool, corruption=None) -> GeoTokens | None:
        needed = (self.scheme.training_geo_required if training
                  else self.scheme.inference_geo_required)
        if not needed:
            return None
        if self.geo_encoder is None:
            raise SchemeContractError(
                f"scheme {self.scheme.id!r} needs geometric features but the "
                "policy was built without a geometric encoder"
            )
        geo = self.geo_encoder.forward(scenes)
        if corruption is not None:
            tokens = Tensor(corruption(geo.tokens.data))
            geo = GeoTokens(tokens, tokens.mean(axis=1, keepdims=True))
        return geo

    # -- forward -----------------------------------------------------------

    def conditioning(self, scenes, geo):
        """Run backbone + scheme hooks; returns (cond, geo_branch, mllm_out)."""
        emb, instr_len, n_vis = self.mllm.embed(scenes)
        meta = {"instr_len": instr_len, "n_visual": n_vis}
        emb = self.scheme.modify_input(emb, meta, geo)
        hook = self.scheme.mid_hook(geo) if "mllm_mid_layer" in self.scheme.hooks else None
        per_layer = self.mllm.run_layers(emb, hook)
        mllm_out = MLLMOutput(per_layer, instr_len, n_vis)
        cond = self.scheme.conditioning(mllm_out, geo, self.schedule)
        branch = self.scheme.geo_branch(geo) if "dit_block" in self.scheme.hooks else None
        return cond, branch, mllm_out

    def velocity(self, scenes, noisy: Tensor, tau, geo=None) -> Tensor:
        cond, branch, _ = self.conditioning(scenes, geo)
        return self.dit.forward(noisy, cond, tau, geo_branch=branch)

    # -- training objective ------------------------------------------------

    def loss(self, scenes, actions: np.ndarray, rng: RngStream):
        """Flow-matching loss plus any scheme alignment terms."""
        b = len(scenes)
        tau = sample_tau(rng, self.fcfg, size=b)
        eps = rng.normal(actions.shape, self.fcfg.noise_std)
        a_tau, v_target = fm_training_targets(actions, eps, tau)
        geo = self.geo_tokens(scenes, training=True)
        cond, branch, mllm_out = self.conditioning(scenes, geo)
        v_pred = self.dit.forward(Tensor(a_tau), cond, tau, geo_branch=branch)
        action_loss = fm_loss(v_pred, v_target)
        parts = {"action": action_loss.item()}
        total = action_loss
        if "loss_terms" in self.scheme.hooks:
            aux = self.scheme.aux_loss(mllm_out, geo)
            if aux is not None:
                weight, term = aux
                parts["align"] = term.item()
                total = total + weight * term
        return total, parts

    # -- inference ---------------------------------------------------------

    def predict(self, scenes, rng: RngStream, corruption=None) -> np.ndarray:
        """Sample an action chunk per scene by integrating the velocity field."""
        geo = self.geo_tokens(scenes, training=False, corruption=corruption)
        cond, branch, _ = self.conditioning(scenes, geo)
        shape = (len(scenes), self.dcfg.horizon, self.dcfg.d_action)

        def vel(a, tau):
            return self.dit.forward(Tensor(a), cond, tau, geo_branch=branch).data

        return euler_integrate(vel, shape, rng, self.fcfg)
