import numpy as np
import pytest

from mvhan.data import SyntheticConfig, day_threshold, generate_synthetic, temporal_split
from mvhan.model import ModelConfig


def tiny_synth(**over):
    kw = dict(n_users=40, n_contents={"source": 60, "target": 30}, n_interactions={"source": 600, "target": 120},
              n_user_fields=4, n_content_fields=4, vocab_size=100, n_clusters=4)
    kw.update(over)
    return SyntheticConfig(**kw)


def small_model_config(variant="mvhan", **over):
    kw = dict(variant=variant, d=8, heads=2, head_dim=4, n_blocks=1, mrl_hidden=[16], k=8)
    kw.update(over)
    return ModelConfig(**kw)


@pytest.fixture(scope="session")
def tiny_data():
    ds, lat = generate_synthetic(tiny_synth(), seed=3)
    tr, te = temporal_split(ds, day_threshold(ds, 9))
    return ds, tr, te, lat


def param_bytes(model, names=None):
    params = model.parameters()
    return {n: params[n].data.tobytes() for n in (names if names is not None else params)}


def rows(n, seed=0, hi=100, width=4):
    return np.random.default_rng(seed).integers(0, hi, size=(n, width))
