"""Finite-difference checks for every differentiable layer, on small random instances."""

from __future__ import annotations

import numpy as np

from .data import Catalog, Dataset, FeatureSchema, Field
from .layers import (
    EmbeddingTableGroup,
    cosine,
    embed_concat,
    init_mhsa_stack,
    init_mlp,
    mhsa_block,
    mlp_forward,
)
from .model import ModelConfig, build_variant
from .tensor import Tensor, finite_diff_check, mul, tsum
from .training import ExampleBatch, sampled_softmax_loss

TOLERANCE = 1e-4


def _probe(rng, out_shape):
    return Tensor(rng.normal(size=out_shape))


def check_embedding(rng):
    group = EmbeddingTableGroup("user", ["a", "b", "c"], [5, 4, 6], 3, rng, "emb")
    ids = np.stack([rng.integers(0, v, size=4) for v in (5, 4, 6)], axis=1)
    probe = _probe(rng, (4, 3, 3))
    return finite_diff_check(lambda: tsum(mul(embed_concat(group, ids), probe)), group.parameters())


def check_mhsa(rng):
    block = init_mhsa_stack(rng, 4, 2, 2, 1, "fel").blocks[0]
    x = Tensor(rng.normal(size=(2, 3, 4)), requires_grad=True)
    probe = _probe(rng, (2, 3, 4))
    return finite_diff_check(lambda: tsum(mul(mhsa_block(x, block), probe)), [x] + block.parameters())


def check_mlp(rng):
    mlp = init_mlp(rng, [5, 4, 3], "mlp")
    for _, b in mlp.layers:
        b.data[:] = rng.normal(scale=0.1, size=b.shape)
    x = Tensor(rng.normal(size=(3, 5)), requires_grad=True)
    probe = _probe(rng, (3, 3))
    return finite_diff_check(lambda: tsum(mul(mlp_forward(x, mlp), probe)), [x] + mlp.parameters())


def check_cosine(rng):
    zu = Tensor(rng.normal(size=(3, 1, 4)), requires_grad=True)
    zc = Tensor(rng.normal(size=(3, 5, 4)), requires_grad=True)
    probe = _probe(rng, (3, 5))
    return finite_diff_check(lambda: tsum(mul(cosine(zu, zc), probe)), [zu, zc])


def tiny_dataset(rng, n_users=4, n_items=8, vocab=5):
    schema = FeatureSchema((Field("u0", "user", vocab), Field("u1", "user", vocab),
                            Field("c0", "content", vocab), Field("c1", "content", vocab)))
    users = np.arange(n_users, dtype=np.int64)
    ufeats = rng.integers(0, vocab, size=(n_users, 2))
    cat = Catalog(np.arange(n_items, dtype=np.int64), rng.integers(0, vocab, size=(n_items, 2)))
    empty = np.empty(0, dtype=np.int64)
    return Dataset(schema, ("source",), users, ufeats, {"source": cat}, empty, empty, empty, empty)


def check_sampled_softmax(rng):
    ds = tiny_dataset(rng)
    cfg = ModelConfig(d=4, heads=2, head_dim=2, n_blocks=1, mrl_hidden=[5], k=3, temperature=0.5, types=("source",))
    model = build_variant(cfg, ds.schema, int(rng.integers(0, 2**31)))
    for p in model.parameters().values():
        if p.name.endswith(".b"):
            p.data[:] = rng.normal(scale=0.1, size=p.shape)
    rows = rng.permutation(8)
    batch = ExampleBatch("source", np.array([0, 2], dtype=np.int64), rows[:2], rows[2:8].reshape(2, 3))
    return finite_diff_check(lambda: sampled_softmax_loss(model, batch, ds), list(model.parameters().values()))


CHECKS = {
    "embedding": check_embedding,
    "mhsa_block": check_mhsa,
    "mlp": check_mlp,
    "cosine_head": check_cosine,
    "sampled_softmax_loss": check_sampled_softmax,
}


def run_suite(instances=10, seed=0):
    """Max relative error per layer over ``instances`` random draws."""
    out = {}
    for name, check in CHECKS.items():
        rng = np.random.default_rng([seed, len(name)])
        out[name] = max(check(rng) for _ in range(instances))
    return out
