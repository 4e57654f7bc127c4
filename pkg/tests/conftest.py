"""Shared helpers: tiny model configs and scene builders for fast tests."""
import pathlib

import numpy as np
import pytest

from geofuse.backbones import DiTConfig, GeoEncoderConfig, SceneSpec, ToyMLLMConfig
from geofuse.flow import FlowConfig
from geofuse.rng import RngStream

DATA_DIR = pathlib.Path(__file__).parent / "data"


def tiny_mllm_cfg(**kw):
    base = dict(d=8, n_layers=2, heads=2, l_max=16, vocab_size=16)
    base.update(kw)
    return ToyMLLMConfig(**base)


def tiny_geo_cfg(**kw):
    base = dict(n_patches=4, d_vggt=6)
    base.update(kw)
    return GeoEncoderConfig(**base)


def tiny_dit_cfg(**kw):
    base = dict(n_dit_layers=2, d=8, heads=2, horizon=2, d_action=3)
    base.update(kw)
    return DiTConfig(**base)


def tiny_flow_cfg(**kw):
    return FlowConfig(**kw)


def make_scenes(rng: RngStream, n_scenes: int, n_objects: int = 2, id_pool: int = 12):
    scenes = []
    for _ in range(n_scenes):
        pos = rng.uniform((n_objects, 3))
        ids = [int(i) for i in rng.generator.choice(id_pool, size=n_objects, replace=False)]
        instr = int(rng.integers(0, n_objects))
        scenes.append(SceneSpec(pos, ids, instr))
    return scenes


@pytest.fixture
def rng():
    return RngStream(1234, 5)
