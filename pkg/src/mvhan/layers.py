"""Embedding tables, self-attentive interaction blocks, MLP heads and cosine scoring."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .tensor import (
    DegenerateVectorError,
    NORM_EPS,
    ShapeError,
    Tensor,
    add,
    l2_normalize,
    matmul,
    mul,
    relu,
    reshape,
    softmax,
    stack,
    take_rows,
    transpose,
    tsum,
)

EMBED_INIT_BOUND = 0.05


class FieldLookupError(IndexError):
    """Out-of-range feature id for a schema field."""


def glorot_uniform(rng, fan_in, fan_out, shape=None):
    bound = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=shape or (fan_in, fan_out))


def _param(data, name):
    return Tensor(data, requires_grad=True, name=name)


# ---------------------------------------------------------------------------
# embeddings
# ---------------------------------------------------------------------------

class EmbeddingTableGroup:
    """One table per schema field, looked up and stacked into a token matrix."""

    def __init__(self, side, field_names, vocab_sizes, dim, rng, prefix):
        if len(field_names) != len(vocab_sizes):
            raise ShapeError("one vocab size per field required")
        self.side = side
        self.field_names = list(field_names)
        self.vocab_sizes = [int(v) for v in vocab_sizes]
        self.dim = dim
        self.tables = [
            _param(rng.uniform(-EMBED_INIT_BOUND, EMBED_INIT_BOUND, size=(v, dim)), f"{prefix}.{fname}")
            for fname, v in zip(self.field_names, self.vocab_sizes)
        ]

    def parameters(self):
        return list(self.tables)

    def __call__(self, field_ids):
        return embed_concat(self, field_ids)


def embed_concat(tables, field_ids):
    """Look up one embedding per field; ``(..., F)`` ids -> ``(..., F, d)`` tokens."""
    ids = np.asarray(field_ids, dtype=np.int64)
    nfields = len(tables.tables)
    if ids.shape[-1] != nfields:
        raise ShapeError(f"expected {nfields} field ids, got {ids.shape[-1]}")
    tokens = []
    for f, (name, vocab, table) in enumerate(zip(tables.field_names, tables.vocab_sizes, tables.tables)):
        col = ids[..., f]
        if col.size and (col.min() < 0 or col.max() >= vocab):
            bad = int(col[(col < 0) | (col >= vocab)].reshape(-1)[0])
            raise FieldLookupError(f"field {name!r}: id {bad} outside [0, {vocab})")
        tokens.append(take_rows(table, col))
    return stack(tokens, axis=-2)


# ---------------------------------------------------------------------------
# multi-head self-attention blocks
# ---------------------------------------------------------------------------

@dataclass
class MhsaBlockParams:
    wq: Tensor  # (H, d, d_h)
    wk: Tensor
    wv: Tensor
    wres: Tensor  # (d, d)

    @property
    def heads(self):
        return self.wq.shape[0]

    def parameters(self):
        return [self.wq, self.wk, self.wv, self.wres]


@dataclass
class MhsaStackParams:
    blocks: list = field(default_factory=list)

    def parameters(self):
        return [p for b in self.blocks for p in b.parameters()]

    def __call__(self, tokens):
        return mhsa_stack(tokens, self)


def init_mhsa_stack(rng, dim, heads, head_dim, n_blocks, prefix):
    if heads * head_dim != dim:
        raise ShapeError(f"heads * head_dim must equal model width: {heads} * {head_dim} != {dim}")
    blocks = []
    for b in range(n_blocks):
        proj = {
            k: _param(glorot_uniform(rng, dim, head_dim, (heads, dim, head_dim)), f"{prefix}.block{b}.{k}")
            for k in ("wq", "wk", "wv")
        }
        wres = _param(glorot_uniform(rng, dim, dim), f"{prefix}.block{b}.wres")
        blocks.append(MhsaBlockParams(wres=wres, **proj))
    return MhsaStackParams(blocks)


def attention_weights(tokens, block):
    """Per-head attention matrices ``(..., H, F, F)``."""
    q, k, _ = _project_qkv(tokens, block)
    scores = matmul(q, transpose(k, _swap_last(k.ndim)))
    return softmax(scores * (1.0 / math.sqrt(block.wq.shape[-1])), axis=-1)


def _swap_last(ndim):
    axes = list(range(ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return axes


def _project_qkv(tokens, block):
    d = tokens.shape[-1]
    heads, _, head_dim = block.wq.shape
    if block.wq.shape[1] != d:
        raise ShapeError(f"block expects width {block.wq.shape[1]}, tokens have width {d}")
    lead = tokens.shape[:-1]  # (..., F)
    flat = reshape(tokens, (-1, d))
    nd = len(lead) + 2
    # (..., F, H, d_h) -> (..., H, F, d_h)
    axes = list(range(nd - 3)) + [nd - 2, nd - 3, nd - 1]
    out = []
    for w in (block.wq, block.wk, block.wv):
        wcat = reshape(transpose(w, (1, 0, 2)), (d, heads * head_dim))
        proj = reshape(matmul(flat, wcat), lead + (heads, head_dim))
        out.append(transpose(proj, axes))
    return out


def mhsa_block(tokens, block):
    """One interacting layer: ReLU(concat_h(softmax(QK^T/sqrt(d_h)) V) + x W_res)."""
    heads = block.heads
    head_dim = block.wq.shape[-1]
    if heads * head_dim != tokens.shape[-1]:
        raise ShapeError(f"{heads} heads of width {head_dim} do not tile model width {tokens.shape[-1]}")
    q, k, v = _project_qkv(tokens, block)
    scores = matmul(q, transpose(k, _swap_last(k.ndim))) * (1.0 / math.sqrt(head_dim))
    attn = softmax(scores, axis=-1)
    mixed = matmul(attn, v)  # (..., H, F, d_h)
    nd = mixed.ndim
    axes = list(range(nd - 3)) + [nd - 2, nd - 3, nd - 1]
    merged = reshape(transpose(mixed, axes), tokens.shape)  # (..., F, H*d_h)
    return relu(add(merged, matmul(tokens, block.wres)))


def mhsa_stack(tokens, params):
    for block in params.blocks:
        tokens = mhsa_block(tokens, block)
    return tokens


# ---------------------------------------------------------------------------
# MLPs
# ---------------------------------------------------------------------------

@dataclass
class MlpParams:
    layers: list = field(default_factory=list)  # [(W, b), ...]

    def parameters(self):
        return [p for wb in self.layers for p in wb]

    @property
    def widths(self):
        if not self.layers:
            return []
        return [self.layers[0][0].shape[0]] + [w.shape[1] for w, _ in self.layers]

    def __call__(self, x):
        return mlp_forward(x, self)


def init_mlp(rng, widths, prefix):
    layers = []
    for i, (a, b) in enumerate(zip(widths[:-1], widths[1:])):
        layers.append((_param(glorot_uniform(rng, a, b), f"{prefix}.layer{i}.w"),
                       _param(np.zeros(b), f"{prefix}.layer{i}.b")))
    return MlpParams(layers)


def mlp_forward(x, params):
    """Affine+ReLU hidden layers, linear output layer."""
    if not params.layers:
        return x
    if x.shape[-1] != params.layers[0][0].shape[0]:
        raise ShapeError(f"MLP expects input width {params.layers[0][0].shape[0]}, got {x.shape[-1]}")
    squeeze = x.ndim == 1
    if squeeze:
        x = reshape(x, (1, x.shape[0]))
    last = len(params.layers) - 1
    for i, (w, b) in enumerate(params.layers):
        x = add(matmul(x, w), b)
        if i < last:
            x = relu(x)
    if squeeze:
        x = reshape(x, (x.shape[-1],))
    return x


@dataclass
class MlpExtractorParams:
    """Feature extraction by residual MLP blocks over the flattened token matrix."""

    blocks: list = field(default_factory=list)  # MlpParams, each F*d -> h -> F*d

    def parameters(self):
        return [p for b in self.blocks for p in b.parameters()]

    def __call__(self, tokens):
        return mlp_extractor(tokens, self)


def mlp_block_size(flat, hidden):
    return flat * hidden + hidden + hidden * flat + flat


def matched_hidden_width(flat, target):
    """Hidden width whose block parameter count is closest to ``target``."""
    best = max(1, round((target - flat) / (2 * flat + 1)))
    candidates = [h for h in (best - 1, best, best + 1) if h >= 1]
    return min(candidates, key=lambda h: (abs(mlp_block_size(flat, h) - target), h))


def init_mlp_extractor(rng, n_fields, dim, hidden, n_blocks, prefix):
    flat = n_fields * dim
    return MlpExtractorParams([init_mlp(rng, [flat, hidden, flat], f"{prefix}.block{b}") for b in range(n_blocks)])


def mlp_extractor(tokens, params):
    shape = tokens.shape
    flat = reshape(tokens, shape[:-2] + (shape[-2] * shape[-1],))
    for block in params.blocks:
        flat = relu(add(mlp_forward(flat, block), flat))
    return reshape(flat, shape)


# ---------------------------------------------------------------------------
# scoring
# ---------------------------------------------------------------------------

def cosine(zu, zc, axis=-1):
    """Differentiable cosine similarity along ``axis`` with broadcasting."""
    return tsum(mul(l2_normalize(zu, axis=axis), l2_normalize(zc, axis=axis)), axis=axis)


def cosine_score(z_u, z_c):
    """Cosine of two plain vectors as a float."""
    a = np.asarray(z_u.data if isinstance(z_u, Tensor) else z_u, dtype=np.float64)
    b = np.asarray(z_c.data if isinstance(z_c, Tensor) else z_c, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeError(f"cosine needs equal shapes, got {a.shape} and {b.shape}")
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na <= NORM_EPS or nb <= NORM_EPS:
        raise DegenerateVectorError("cosine of a near-zero vector is undefined")
    return float(np.dot(a / na, b / nb))
