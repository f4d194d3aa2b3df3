"""Exact top-k cosine retrieval over exported content embeddings.

Index file (text)::

    <type>\\t<count>\\t<dim>
    <content_id>\\t<v0>,<v1>,...      # one line per item, ascending id, %.17g

Seventeen significant digits make every float64 round-trip exactly.
"""

from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np

from . import _kernels
from .tensor import NORM_EPS, DegenerateVectorError, ShapeError

ENCODE_CHUNK = 4096


class IndexFormatError(ValueError):
    pass


@dataclass
class EmbeddingIndex:
    ctype: str
    ids: np.ndarray       # ascending, unique
    vectors: np.ndarray   # (n, k), unit rows

    def __post_init__(self):
        self.ids = np.asarray(self.ids, dtype=np.int64)
        self.vectors = np.ascontiguousarray(self.vectors, dtype=np.float64)
        if self.vectors.ndim != 2 or self.vectors.shape[0] != self.ids.size:
            raise ShapeError(f"index needs one vector per id, got {self.vectors.shape} for {self.ids.size} ids")
        if self.ids.size > 1 and not np.all(np.diff(self.ids) > 0):
            raise ValueError("index ids must be unique and ascending")

    @classmethod
    def from_vectors(cls, ctype, ids, vectors):
        """Normalise rows and order them by id."""
        ids = np.asarray(ids, dtype=np.int64)
        vectors = np.asarray(vectors, dtype=np.float64)
        norms = np.linalg.norm(vectors, axis=1, keepdims=True)
        if np.any(norms <= NORM_EPS):
            raise DegenerateVectorError("cannot index a near-zero vector")
        order = np.argsort(ids, kind="stable")
        return cls(ctype, ids[order], (vectors / norms)[order])

    def __len__(self):
        return self.ids.size

    @property
    def dim(self):
        return self.vectors.shape[1]

    def scores(self, queries):
        q = _normalize_queries(queries, self.dim)
        return q @ self.vectors.T

    def top_k(self, query, k):
        ids, scores = self.top_k_batch(np.asarray(query, dtype=np.float64)[None, :], k)
        return list(zip(ids[0].tolist(), scores[0].tolist()))

    def top_k_batch(self, queries, k, exclude=None):
        """Best ``k`` (ids, scores) per query row, score descending, id ascending on ties.

        ``exclude`` is an optional boolean ``(Q, n)`` mask of items to skip;
        rows with fewer than ``k`` eligible items are padded with id -1.
        """
        if k < 1:
            raise ValueError(f"k must be >= 1, got {k}")
        s = self.scores(queries)
        if exclude is not None:
            s = np.where(exclude, -np.inf, s)
        cols = _kernels.topk_rows(np.ascontiguousarray(s), k)
        top_scores = np.take_along_axis(s, cols, axis=1)
        ids = self.ids[cols]
        if exclude is not None:
            dead = np.isneginf(top_scores)
            ids = np.where(dead, -1, ids)
        return ids, top_scores


def _normalize_queries(queries, dim):
    q = np.atleast_2d(np.asarray(queries, dtype=np.float64))
    if q.shape[1] != dim:
        raise ShapeError(f"query dimension {q.shape[1]} != index dimension {dim}")
    norms = np.linalg.norm(q, axis=1, keepdims=True)
    if np.any(norms <= NORM_EPS):
        raise DegenerateVectorError("query vector has near-zero norm")
    return q / norms


def top_k(index, query, k):
    return index.top_k(query, k)


def brute_force_top_k(ids, vectors, query, k):
    """Reference scan: normalise everything, sort by (-score, id)."""
    v = np.asarray(vectors, dtype=np.float64)
    v = v / np.linalg.norm(v, axis=1, keepdims=True)
    q = np.asarray(query, dtype=np.float64)
    q = q / np.linalg.norm(q)
    scored = sorted(((-float(np.dot(row, q)), int(i)) for i, row in zip(ids, v)))
    return [(i, -s) for s, i in scored[:k]]


# ---------------------------------------------------------------------------
# export / io
# ---------------------------------------------------------------------------

def encode_catalog(model, catalog, ctype):
    """Content-tower vectors for every catalog row, in catalog order."""
    out = np.empty((len(catalog), model.config.k))
    for start in range(0, len(catalog), ENCODE_CHUNK):
        rows = catalog.features[start:start + ENCODE_CHUNK]
        out[start:start + rows.shape[0]] = model.content_tower(rows, ctype).data
    return out


def encode_users(model, user_features):
    out = np.empty((user_features.shape[0], model.config.k))
    for start in range(0, user_features.shape[0], ENCODE_CHUNK):
        rows = user_features[start:start + ENCODE_CHUNK]
        out[start:start + rows.shape[0]] = model.user_tower(rows).data
    return out


def build_index(model, catalog, ctype):
    if len(catalog) == 0:
        raise ValueError("cannot export an empty catalog")
    return EmbeddingIndex.from_vectors(ctype, catalog.ids, encode_catalog(model, catalog, ctype))


def index_to_text(index):
    lines = [f"{index.ctype}\t{len(index)}\t{index.dim}\n"]
    for cid, row in zip(index.ids.tolist(), index.vectors):
        lines.append(f"{cid}\t" + ",".join("%.17g" % x for x in row.tolist()) + "\n")
    return "".join(lines)


def write_index(index, path):
    tmp = f"{path}.tmp"
    with open(tmp, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(index_to_text(index))
    os.replace(tmp, path)


def read_index(path):
    with open(path, encoding="utf-8") as fh:
        header = fh.readline().rstrip("\n").split("\t")
        if len(header) != 3:
            raise IndexFormatError(f"{path}: bad header")
        ctype, count, dim = header[0], int(header[1]), int(header[2])
        ids = np.empty(count, dtype=np.int64)
        vecs = np.empty((count, dim))
        for i in range(count):
            line = fh.readline()
            if not line:
                raise IndexFormatError(f"{path}: expected {count} rows, found {i}")
            cid, comps = line.rstrip("\n").split("\t")
            vals = comps.split(",")
            if len(vals) != dim:
                raise IndexFormatError(f"{path}: row {i + 1} has {len(vals)} components, expected {dim}")
            ids[i] = int(cid)
            vecs[i] = [float(x) for x in vals]
        if fh.readline().strip():
            raise IndexFormatError(f"{path}: trailing rows after {count} items")
    return EmbeddingIndex(ctype, ids, vecs)


def export_embeddings(model, catalog, ctype, path):
    index = build_index(model, catalog, ctype)
    write_index(index, path)
    return index
