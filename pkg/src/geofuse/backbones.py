"""Toy stand-ins for the three neural components of the policy.

- ToyMLLM: a small pre-LN transformer over instruction + per-object visual
  tokens.  Visual tokens reveal object identity only; object *positions*
  are deliberately withheld from this channel, so any policy conditioned
  purely on the semantic stream is position-blind by construction.
- GeoEncoder: frozen featurizer standing in for a pretrained 3D encoder.
  Each patch token is a fixed affine embedding of one object's position
  plus a fixed per-slot offset, so positions are exactly recoverable via
  a known linear decode (used as a test oracle).
- ActionDiT: DiT-style action expert predicting flow-matching velocities,
  conditioned via cross-attention in either single-sequence mode or
  layer-wise mode (one conditioning sequence per block).
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import CapacityError, ConfigError, DomainError, ShapeError
from .nn import attention_params, cross_attention, init_matrix, layer_norm, linear, mlp, norm_params
from .rng import RngStream
from .tensor import ParamSet, Tensor, concat, embedding


@dataclass
class ToyMLLMConfig:
    d: int = 32
    n_layers: int = 4
    heads: int = 4
    l_max: int = 32
    vocab_size: int = 64
    mlp_mult: int = 4

    def __post_init__(self):
        if self.d % self.heads:
            raise ConfigError(f"d={self.d} not divisible by heads={self.heads}")


@dataclass
class GeoEncoderConfig:
    n_patches: int = 8
    d_vggt: int = 48
    frozen: bool = True


@dataclass
class DiTConfig:
    n_dit_layers: int = 4
    d: int = 32
    heads: int = 4
    horizon: int = 4
    d_action: int = 7
    mlp_mult: int = 4


@dataclass
class SceneSpec:
    """Objects on a unit-cube tabletop plus an instruction picking one."""

    object_positions: np.ndarray  # (n, 3) in [0, 1]^3
    object_ids: list[int]
    instruction_id: int  # index into object list

    def __post_init__(self):
        self.object_positions = np.asarray(self.object_positions, dtype=np.float64)
        if self.object_positions.ndim != 2 or self.object_positions.shape[1] != 3:
            raise ShapeError(f"object_positions must be (n, 3), got {self.object_positions.shape}")
        if np.any(self.object_positions < 0) or np.any(self.object_positions > 1):
            raise DomainError("object positions must lie in [0, 1]^3")
        if not 0 <= self.instruction_id < len(self.object_ids):
            raise DomainError(
                f"instruction_id {self.instruction_id} does not index "
                f"{len(self.object_ids)} objects"
            )

    @property
    def n_objects(self) -> int:
        return len(self.object_ids)

    @property
    def target_position(self) -> np.ndarray:
        return self.object_positions[self.instruction_id]


@dataclass
class MLLMOutput:
    per_layer: list  # n_layers Tensors, each B x L x D
    instr_len: int
    n_visual: int

    @property
    def final(self) -> Tensor:
        return self.per_layer[-1]

    def visual_slice(self, layer: int) -> Tensor:
        h = self.per_layer[layer]
        return h[:, self.instr_len : self.instr_len + self.n_visual, :]


@dataclass
class GeoTokens:
    tokens: Tensor        # B x N x D_vggt, one patch token per object
    global_token: Tensor  # B x 1 x D_vggt, pooled over patches


def sinusoid_table(n: int, d: int, max_freq: float = 100.0) -> np.ndarray:
    """Fixed sin/cos positional table, rows indexed by position."""
    if d % 2:
        raise ConfigError(f"sinusoid table needs even dim, got {d}")
    freqs = np.exp(np.linspace(0.0, np.log(max_freq), d // 2))
    pos = np.arange(n)[:, None] * freqs[None, :]
    return np.concatenate([np.sin(pos), np.cos(pos)], axis=1)


def timestep_embedding(tau, d: int) -> Tensor:
    """Sinusoidal embedding of flow time; tau scalar or per-sample vector."""
    if d % 2:
        raise ConfigError(f"timestep embedding needs even dim, got {d}")
    t = np.atleast_1d(np.asarray(tau, dtype=np.float64))
    if np.any(t < 0) or np.any(t > 1):
        raise DomainError(f"tau must lie in [0, 1], got {tau}")
    freqs = np.exp(np.linspace(0.0, np.log(100.0), d // 2))
    ang = t[:, None] * freqs[None, :]
    emb = np.concatenate([np.sin(ang), np.cos(ang)], axis=1)
    return Tensor(emb[:, None, :])  # B(or 1) x 1 x D


def _batch_indices(scenes: list[SceneSpec]):
    n = scenes[0].n_objects
    if any(s.n_objects != n for s in scenes):
        raise ShapeError("all scenes in a batch must share the object count")
    instr = np.array([[s.object_ids[s.instruction_id]] for s in scenes])
    vis = np.array([s.object_ids for s in scenes])
    return instr, vis


class ToyMLLM:
    """Minimal pre-LN transformer exposing every layer's hidden states."""

    def __init__(self, cfg: ToyMLLMConfig, store: ParamSet, rng: RngStream, prefix: str = "mllm"):
        self.cfg = cfg
        self.layer_calls = 0  # test hook: each block must run exactly once per forward
        d = cfg.d
        self.tok_embed = store.new(f"{prefix}.tok_embed", rng.normal((cfg.vocab_size, d), 0.5))
        self.vis_embed = store.new(f"{prefix}.vis_embed", rng.normal((cfg.vocab_size, d), 0.5))
        self.pos_table = sinusoid_table(cfg.l_max, d)
        self.blocks = []
        for i in range(cfg.n_layers):
            p = f"{prefix}.layer{i}"
            self.blocks.append(
                {
                    "ln1": norm_params(store, f"{p}.ln1", d),
                    "attn": attention_params(store, rng, f"{p}.attn", d),
                    "ln2": norm_params(store, f"{p}.ln2", d),
                    "w1": store.new(f"{p}.mlp.w1", init_matrix(rng, d, d * cfg.mlp_mult)),
                    "w2": store.new(f"{p}.mlp.w2", init_matrix(rng, d * cfg.mlp_mult, d)),
                }
            )

    def embed(self, scenes: list[SceneSpec]) -> tuple[Tensor, int, int]:
        """Token embeddings for a scene batch: (B x L x D, instr_len, n_visual)."""
        instr, vis = _batch_indices(scenes)
        if np.any(instr >= self.cfg.vocab_size) or np.any(vis >= self.cfg.vocab_size):
            raise CapacityError("object id outside instruction vocabulary")
        e_instr = embedding(self.tok_embed.value, instr)
        e_vis = embedding(self.vis_embed.value, vis)
        x = concat([e_instr, e_vis], axis=1)
        length = x.shape[1]
        self._check_len(length)
        return x + Tensor(self.pos_table[:length]), instr.shape[1], vis.shape[1]

    def _check_len(self, length: int):
        if length > self.cfg.l_max:
            raise CapacityError(f"sequence length {length} exceeds L_max={self.cfg.l_max}")

    def run_layers(self, x: Tensor, mid_hook=None) -> list:
        """Run all blocks once, returning each block's output; `mid_hook`
        may rewrite the hidden states right after a designated layer."""
        self._check_len(x.shape[1])
        per_layer = []
        h = x
        for i, blk in enumerate(self.blocks):
            self.layer_calls += 1
            hn = layer_norm(h, blk["ln1"]["gain"].value, blk["ln1"]["bias"].value)
            a = cross_attention(
                hn, hn,
                blk["attn"]["wq"], blk["attn"]["wk"], blk["attn"]["wv"], blk["attn"]["wo"],
                self.cfg.heads,
            )
            h = h + a
            h = h + mlp(layer_norm(h, blk["ln2"]["gain"].value, blk["ln2"]["bias"].value),
                        blk["w1"], blk["w2"])
            if mid_hook is not None:
                h = mid_hook(i, h)
            per_layer.append(h)
        return per_layer

    def forward(self, scenes: list[SceneSpec], mid_hook=None) -> MLLMOutput:
        x, instr_len, n_vis = self.embed(scenes)
        return MLLMOutput(self.run_layers(x, mid_hook), instr_len, n_vis)


class GeoEncoder:
    """Frozen geometric featurizer with an exact linear position decode."""

    INIT_SEED = 1234  # parameters are a fixed function of this seed alone

    def __init__(self, cfg: GeoEncoderConfig, store: ParamSet, prefix: str = "geo"):
        self.cfg = cfg
        rng = RngStream(self.INIT_SEED, 0)
        w = rng.normal((3, cfg.d_vggt), 1.0)
        base = rng.normal((cfg.n_patches, cfg.d_vggt), 1.0)
        self.w_embed = store.new(f"{prefix}.w_embed", w, trainable=not cfg.frozen)
        self.base = store.new(f"{prefix}.base", base, trainable=not cfg.frozen)

    def forward(self, scenes: list[SceneSpec]) -> GeoTokens:
        n = scenes[0].n_objects
        if any(s.n_objects != n for s in scenes):
            raise ShapeError("all scenes in a batch must share the object count")
        if n > self.cfg.n_patches:
            raise CapacityError(f"{n} objects exceed {self.cfg.n_patches} patch slots")
        pos = np.stack([s.object_positions for s in scenes])  # B x n x 3
        tokens = Tensor(pos) @ self.w_embed.value + self.base.value[:n]
        return GeoTokens(tokens, tokens.mean(axis=1, keepdims=True))

    def decode(self, tokens: np.ndarray) -> np.ndarray:
        """Recover object positions from patch tokens (test oracle)."""
        n = tokens.shape[-2]
        centered = tokens - self.base.value.data[:n]
        return centered @ np.linalg.pinv(self.w_embed.value.data)


class ActionDiT:
    """Flow-matching action expert: self-attn + cross-attn + MLP blocks."""

    def __init__(self, cfg: DiTConfig, store: ParamSet, rng: RngStream, prefix: str = "dit"):
        self.cfg = cfg
        d = cfg.d
        self.in_proj = store.new(f"{prefix}.in_proj", init_matrix(rng, cfg.d_action, d))
        self.pos_table = sinusoid_table(cfg.horizon, d)
        self.blocks = []
        for i in range(cfg.n_dit_layers):
            p = f"{prefix}.block{i}"
            self.blocks.append(
                {
                    "ln_s": norm_params(store, f"{p}.ln_s", d),
                    "self": attention_params(store, rng, f"{p}.self", d),
                    "ln_c": norm_params(store, f"{p}.ln_c", d),
                    "cross": attention_params(store, rng, f"{p}.cross", d),
                    "ln_m": norm_params(store, f"{p}.ln_m", d),
                    "w1": store.new(f"{p}.mlp.w1", init_matrix(rng, d, d * cfg.mlp_mult)),
                    "w2": store.new(f"{p}.mlp.w2", init_matrix(rng, d * cfg.mlp_mult, d)),
                }
            )
        self.ln_out = norm_params(store, f"{prefix}.ln_out", d)
        self.out_proj = store.new(f"{prefix}.out_proj", init_matrix(rng, d, cfg.d_action))

    def forward(self, noisy: Tensor, conditioning, tau, geo_branch=None) -> Tensor:
        """Predict the velocity field for a noisy action chunk.

        conditioning: one Tensor used by every block, or a list with one
        Tensor per block (layer-wise mode).  geo_branch, when present, is
        (f_geo, [per-block attention param dicts]) adding a parallel
        cross-attention read of geometric tokens inside every block.
        """
        if isinstance(conditioning, (list, tuple)):
            conds = list(conditioning)
            if len(conds) != self.cfg.n_dit_layers:
                raise ConfigError(
                    f"layer-wise mode needs {self.cfg.n_dit_layers} conditioning "
                    f"sequences, got {len(conds)}"
                )
        else:
            conds = [conditioning] * self.cfg.n_dit_layers
        if noisy.shape[1] != self.cfg.horizon or noisy.shape[2] != self.cfg.d_action:
            raise ShapeError(f"action chunk shape {noisy.shape} does not match config")

        z = linear(noisy, self.in_proj) + Tensor(self.pos_table[None, :, :])
        z = z + timestep_embedding(tau, self.cfg.d)
        for i, blk in enumerate(self.blocks):
            zn = layer_norm(z, blk["ln_s"]["gain"].value, blk["ln_s"]["bias"].value)
            z = z + cross_attention(zn, zn, blk["self"]["wq"], blk["self"]["wk"],
                                    blk["self"]["wv"], blk["self"]["wo"], self.cfg.heads)
            zc = layer_norm(z, blk["ln_c"]["gain"].value, blk["ln_c"]["bias"].value)
            upd = cross_attention(zc, conds[i], blk["cross"]["wq"], blk["cross"]["wk"],
                                  blk["cross"]["wv"], blk["cross"]["wo"], self.cfg.heads)
            if geo_branch is not None:
                f_geo, geo_params = geo_branch
                gp = geo_params[i]
                upd = upd + cross_attention(zc, f_geo, gp["wq"], gp["wk"], gp["wv"], gp["wo"],
                                            self.cfg.heads)
            z = z + upd
            z = z + mlp(layer_norm(z, blk["ln_m"]["gain"].value, blk["ln_m"]["bias"].value),
                        blk["w1"], blk["w2"])
        out = layer_norm(z, self.ln_out["gain"].value, self.ln_out["bias"].value)
        return linear(out, self.out_proj)
