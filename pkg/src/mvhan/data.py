"""Feature schema, interaction files, temporal splits and the synthetic generator.

File formats (UTF-8, tab separated, ``\\n`` line endings):

* schema:        ``name  side  vocab_size``                      one field per line
* interactions:  ``user_id  content_id  type  timestamp  u_ids  c_ids``
  where ``u_ids``/``c_ids`` are comma-separated field ids in schema order
* catalog:       ``type  content_id  c_ids``                     one content per line
* users:         ``user_id  u_ids``                              one user per line

A dataset directory holds ``schema.tsv``, ``interactions.tsv`` and optionally
``catalog.tsv`` and ``users.tsv`` (contents/users without interactions).
"""

from __future__ import annotations

import math
import os
import zlib
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

FNV_OFFSET = 0xCBF29CE484222325
FNV_PRIME = 0x100000001B3
MASK64 = 0xFFFFFFFFFFFFFFFF
SECONDS_PER_DAY = 86400
DEFAULT_TYPES = ("source", "target")


class ParseError(ValueError):
    def __init__(self, message, line=None, path=None):
        where = ""
        if path is not None:
            where += f"{path}:"
        if line is not None:
            where += f"line {line}: "
        elif where:
            where += " "
        super().__init__(where + message)
        self.line = line
        self.path = path


class SchemaError(ValueError):
    pass


# ---------------------------------------------------------------------------
# hashing
# ---------------------------------------------------------------------------

def fnv1a_64(data: bytes) -> int:
    h = FNV_OFFSET
    for byte in data:
        h ^= byte
        h = (h * FNV_PRIME) & MASK64
    return h


def hash_feature(raw: str, field_name: str, vocab_size: int) -> int:
    """Stable id in ``[0, vocab_size)`` for a raw categorical value."""
    if vocab_size < 1:
        raise SchemaError(f"vocab size must be >= 1, got {vocab_size}")
    return fnv1a_64(field_name.encode("utf-8") + b"\x1f" + raw.encode("utf-8")) % vocab_size


def derive_seed(seed: int, consumer: str) -> np.random.SeedSequence:
    """Independent, stable random stream for one named consumer of the root seed."""
    return np.random.SeedSequence([int(seed) & MASK64, zlib.crc32(consumer.encode("utf-8"))])


def derive_rng(seed: int, consumer: str) -> np.random.Generator:
    return np.random.default_rng(derive_seed(seed, consumer))


# ---------------------------------------------------------------------------
# schema
# ---------------------------------------------------------------------------

class Field(NamedTuple):
    name: str
    side: str
    vocab_size: int


@dataclass(frozen=True)
class FeatureSchema:
    fields: tuple

    def __post_init__(self):
        names = [f.name for f in self.fields]
        if len(set(names)) != len(names):
            raise SchemaError("field names must be unique")
        for f in self.fields:
            if f.side not in ("user", "content"):
                raise SchemaError(f"field {f.name!r}: side must be 'user' or 'content', got {f.side!r}")
            if f.vocab_size < 1:
                raise SchemaError(f"field {f.name!r}: vocab size must be >= 1")

    @classmethod
    def default(cls, n_user_fields=13, n_content_fields=13, vocab_size=10_000):
        fields = [Field(f"u{i:02d}", "user", vocab_size) for i in range(n_user_fields)]
        fields += [Field(f"c{i:02d}", "content", vocab_size) for i in range(n_content_fields)]
        return cls(tuple(fields))

    def side_fields(self, side):
        return [f for f in self.fields if f.side == side]

    @property
    def user_fields(self):
        return self.side_fields("user")

    @property
    def content_fields(self):
        return self.side_fields("content")

    def vocab(self, side):
        return np.array([f.vocab_size for f in self.side_fields(side)], dtype=np.int64)

    def to_text(self):
        return "".join(f"{f.name}\t{f.side}\t{f.vocab_size}\n" for f in self.fields)

    @classmethod
    def from_text(cls, text, path=None):
        fields = []
        for lineno, line in enumerate(text.splitlines(), 1):
            if not line.strip():
                continue
            parts = line.split("\t")
            if len(parts) != 3:
                raise ParseError(f"expected 3 tab-separated columns, got {len(parts)}", lineno, path)
            try:
                vocab = int(parts[2])
            except ValueError:
                raise ParseError(f"vocab size {parts[2]!r} is not an integer", lineno, path) from None
            fields.append(Field(parts[0], parts[1], vocab))
        try:
            return cls(tuple(fields))
        except SchemaError as exc:
            raise ParseError(str(exc), None, path) from None

    def to_dict(self):
        return [list(f) for f in self.fields]

    @classmethod
    def from_dict(cls, rows):
        return cls(tuple(Field(str(n), str(s), int(v)) for n, s, v in rows))


def read_schema(path):
    with open(path, encoding="utf-8") as fh:
        return FeatureSchema.from_text(fh.read(), path)


def write_schema(schema, path):
    _atomic_write(path, schema.to_text())


# ---------------------------------------------------------------------------
# datasets
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Interaction:
    user_id: int
    content_id: int
    type: str
    timestamp: int
    user_field_ids: tuple
    content_field_ids: tuple


@dataclass
class Catalog:
    """Contents of one type: sorted ids and their field-id rows."""

    ids: np.ndarray
    features: np.ndarray

    def __len__(self):
        return self.ids.size

    def rows_of(self, content_ids):
        pos = np.searchsorted(self.ids, content_ids)
        pos = np.minimum(pos, max(self.ids.size - 1, 0))
        if self.ids.size == 0 or not np.all(self.ids[pos] == content_ids):
            raise KeyError("content id not in catalog")
        return pos


@dataclass
class Dataset:
    """Interaction arrays plus the user table and per-type catalogs.

    ``type_codes`` index into ``types``; interaction order is file order.
    """

    schema: FeatureSchema
    types: tuple
    users: np.ndarray
    user_features: np.ndarray
    catalogs: dict
    user_ids: np.ndarray
    content_ids: np.ndarray
    type_codes: np.ndarray
    timestamps: np.ndarray

    def __len__(self):
        return self.user_ids.size

    def type_code(self, tag):
        try:
            return self.types.index(tag)
        except ValueError:
            raise KeyError(f"unknown content type {tag!r}") from None

    def user_rows(self, user_ids):
        pos = np.searchsorted(self.users, user_ids)
        pos = np.minimum(pos, max(self.users.size - 1, 0))
        if self.users.size == 0 or not np.all(self.users[pos] == user_ids):
            raise KeyError("user id not in user table")
        return pos

    def subset(self, mask):
        return Dataset(self.schema, self.types, self.users, self.user_features, self.catalogs,
                       self.user_ids[mask], self.content_ids[mask], self.type_codes[mask], self.timestamps[mask])

    def of_type(self, tag):
        return self.subset(self.type_codes == self.type_code(tag))

    def count(self, tag):
        return int(np.sum(self.type_codes == self.type_code(tag)))

    def interactions(self):
        urows = self.user_rows(self.user_ids) if len(self) else np.array([], dtype=np.int64)
        for i in range(len(self)):
            tag = self.types[self.type_codes[i]]
            cat = self.catalogs[tag]
            crow = cat.rows_of(np.array([self.content_ids[i]]))[0]
            yield Interaction(int(self.user_ids[i]), int(self.content_ids[i]), tag, int(self.timestamps[i]),
                              tuple(int(x) for x in self.user_features[urows[i]]),
                              tuple(int(x) for x in cat.features[crow]))

    def positives(self, tag):
        """Unique (user_id, content_id) pairs of one type, sorted."""
        sub = self.of_type(tag)
        pairs = np.stack([sub.user_ids, sub.content_ids], axis=1)
        return np.unique(pairs, axis=0) if pairs.size else pairs.reshape(0, 2)


def _ids_str(row):
    return ",".join(str(int(x)) for x in row)


def _parse_ids(text, expected, vocab, what, lineno, path):
    try:
        ids = [int(x) for x in text.split(",")] if text else []
    except ValueError:
        raise ParseError(f"{what} field ids {text!r} are not integers", lineno, path) from None
    if len(ids) != expected:
        raise ParseError(f"{what} field arity {len(ids)} does not match schema ({expected} fields)", lineno, path)
    arr = np.array(ids, dtype=np.int64)
    if np.any(arr < 0) or np.any(arr >= vocab):
        f = int(np.nonzero((arr < 0) | (arr >= vocab))[0][0])
        raise ParseError(f"{what} field {f} id {ids[f]} outside [0, {vocab[f]})", lineno, path)
    return arr


def _int_col(text, what, lineno, path):
    try:
        return int(text)
    except ValueError:
        raise ParseError(f"{what} {text!r} is not an integer", lineno, path) from None


class _TableBuilder:
    def __init__(self, width):
        self.rows = {}
        self.width = width

    def add(self, key, feats, what, lineno, path):
        prev = self.rows.get(key)
        if prev is None:
            self.rows[key] = feats
        elif not np.array_equal(prev, feats):
            raise ParseError(f"{what} {key} has conflicting field ids", lineno, path)

    def arrays(self):
        keys = np.array(sorted(self.rows), dtype=np.int64)
        feats = np.array([self.rows[k] for k in keys.tolist()], dtype=np.int64).reshape(len(keys), self.width)
        return keys, feats


def parse_interactions(path, schema, types=DEFAULT_TYPES, catalog_path=None, users_path=None):
    """Read and validate an interaction file (plus optional catalog/users files)."""
    types = tuple(types)
    uvocab, cvocab = schema.vocab("user"), schema.vocab("content")
    nu, nc = len(uvocab), len(cvocab)
    users = _TableBuilder(nu)
    cats = {t: _TableBuilder(nc) for t in types}
    if catalog_path is not None:
        with open(catalog_path, encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, 1):
                line = line.rstrip("\n")
                if not line:
                    continue
                parts = line.split("\t")
                if len(parts) != 3:
                    raise ParseError(f"expected 3 columns, got {len(parts)}", lineno, catalog_path)
                if parts[0] not in cats:
                    raise ParseError(f"undeclared content type {parts[0]!r}", lineno, catalog_path)
                cid = _int_col(parts[1], "content id", lineno, catalog_path)
                cats[parts[0]].add(cid, _parse_ids(parts[2], nc, cvocab, "content", lineno, catalog_path),
                                   "content", lineno, catalog_path)
    if users_path is not None:
        with open(users_path, encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, 1):
                line = line.rstrip("\n")
                if not line:
                    continue
                parts = line.split("\t")
                if len(parts) != 2:
                    raise ParseError(f"expected 2 columns, got {len(parts)}", lineno, users_path)
                uid = _int_col(parts[0], "user id", lineno, users_path)
                users.add(uid, _parse_ids(parts[1], nu, uvocab, "user", lineno, users_path), "user", lineno, users_path)
    uids, cids, codes, stamps = [], [], [], []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.rstrip("\n")
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != 6:
                raise ParseError(f"expected 6 tab-separated columns, got {len(parts)}", lineno, path)
            uid = _int_col(parts[0], "user id", lineno, path)
            cid = _int_col(parts[1], "content id", lineno, path)
            tag = parts[2]
            if tag not in cats:
                raise ParseError(f"undeclared content type {tag!r}", lineno, path)
            ts = _int_col(parts[3], "timestamp", lineno, path)
            users.add(uid, _parse_ids(parts[4], nu, uvocab, "user", lineno, path), "user", lineno, path)
            cats[tag].add(cid, _parse_ids(parts[5], nc, cvocab, "content", lineno, path), "content", lineno, path)
            uids.append(uid)
            cids.append(cid)
            codes.append(types.index(tag))
            stamps.append(ts)
    user_keys, user_feats = users.arrays()
    catalogs = {t: Catalog(*cats[t].arrays()) for t in types}
    return Dataset(schema, types, user_keys, user_feats, catalogs,
                   np.array(uids, dtype=np.int64), np.array(cids, dtype=np.int64),
                   np.array(codes, dtype=np.int64), np.array(stamps, dtype=np.int64))


def serialize_interactions(ds):
    if not len(ds):
        return ""
    urows = ds.user_rows(ds.user_ids)
    lines = []
    crow_cache = {}
    for t in ds.types:
        mask = ds.type_codes == ds.type_code(t)
        if mask.any():
            crow_cache[t] = dict(zip(np.nonzero(mask)[0].tolist(), ds.catalogs[t].rows_of(ds.content_ids[mask]).tolist()))
    for i in range(len(ds)):
        tag = ds.types[ds.type_codes[i]]
        crow = crow_cache[tag][i]
        lines.append(f"{ds.user_ids[i]}\t{ds.content_ids[i]}\t{tag}\t{ds.timestamps[i]}\t"
                     f"{_ids_str(ds.user_features[urows[i]])}\t{_ids_str(ds.catalogs[tag].features[crow])}\n")
    return "".join(lines)


def serialize_catalog(ds):
    return "".join(f"{t}\t{cid}\t{_ids_str(row)}\n"
                   for t in ds.types for cid, row in zip(ds.catalogs[t].ids.tolist(), ds.catalogs[t].features))


def serialize_users(ds):
    return "".join(f"{uid}\t{_ids_str(row)}\n" for uid, row in zip(ds.users.tolist(), ds.user_features))


def _atomic_write(path, text):
    tmp = f"{path}.tmp"
    with open(tmp, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(text)
    os.replace(tmp, path)


def write_dataset(ds, directory, interactions_name="interactions.tsv"):
    os.makedirs(directory, exist_ok=True)
    write_schema(ds.schema, os.path.join(directory, "schema.tsv"))
    _atomic_write(os.path.join(directory, interactions_name), serialize_interactions(ds))
    _atomic_write(os.path.join(directory, "catalog.tsv"), serialize_catalog(ds))
    _atomic_write(os.path.join(directory, "users.tsv"), serialize_users(ds))


def load_dataset(directory, types=None, interactions_name="interactions.tsv"):
    schema = read_schema(os.path.join(directory, "schema.tsv"))
    catalog_path = os.path.join(directory, "catalog.tsv")
    users_path = os.path.join(directory, "users.tsv")
    has_catalog = os.path.exists(catalog_path)
    if types is None:
        types = _types_in_catalog(catalog_path) if has_catalog else DEFAULT_TYPES
    return parse_interactions(os.path.join(directory, interactions_name), schema, types,
                              catalog_path if has_catalog else None,
                              users_path if os.path.exists(users_path) else None)


def _types_in_catalog(path):
    seen = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            tag = line.split("\t", 1)[0]
            if tag and tag not in seen:
                seen.append(tag)
    return tuple(seen) or DEFAULT_TYPES


def temporal_split(ds, threshold):
    """Events strictly before ``threshold`` train; the rest (including ties) test."""
    early = ds.timestamps < threshold
    return ds.subset(early), ds.subset(~early)


# ---------------------------------------------------------------------------
# synthetic generator
# ---------------------------------------------------------------------------

@dataclass
class SyntheticConfig:
    n_users: int = 2000
    n_contents: dict = field(default_factory=lambda: {"source": 5000, "target": 1000})
    n_interactions: dict = field(default_factory=lambda: {"source": 100_000, "target": 10_000})
    latent_dim: int = 8
    n_clusters: int = 12
    cluster_spread: float = 0.6
    sharpness: float = 3.0
    noise: float = 0.5
    field_signal: float = 0.8
    n_bins: int = 6
    n_user_fields: int = 13
    n_content_fields: int = 13
    vocab_size: int = 10_000
    start_ts: int = 1_599_955_200  # midnight UTC
    days: int = 10

    def validate(self):
        if self.n_users < 1:
            raise SchemaError("n_users must be >= 1")
        if set(self.n_contents) != set(self.n_interactions):
            raise SchemaError("n_contents and n_interactions must name the same types")
        for t, n in self.n_contents.items():
            if n < 1:
                raise SchemaError(f"type {t!r}: content count must be >= 1")
            if self.n_interactions[t] < 1:
                raise SchemaError(f"type {t!r}: interaction count must be >= 1")
        if self.noise < 0:
            raise SchemaError("noise must be >= 0")
        if not 0.0 <= self.field_signal <= 1.0:
            raise SchemaError("field_signal must lie in [0, 1]")
        if self.n_bins < 1 or self.n_bins > self.vocab_size:
            raise SchemaError("n_bins must lie in [1, vocab_size]")
        if self.n_user_fields < 1 or self.n_content_fields < 1:
            raise SchemaError("field counts must be >= 1")

    @property
    def types(self):
        return tuple(self.n_contents)


class PlantedLatents(NamedTuple):
    user: np.ndarray                # (n_users, L), row i = user id i
    content: dict                   # type -> (n_contents, L), row order = catalog ids


def _binned_fields(rng, latents, directions, edges, n_fields, signal, vocab, entity_ids):
    n = latents.shape[0]
    out = np.empty((n, n_fields), dtype=np.int64)
    out[:, 0] = entity_ids % vocab
    if n_fields > 1:
        proj = latents @ directions  # (n, F-1)
        for f in range(n_fields - 1):
            out[:, f + 1] = np.searchsorted(edges[f], proj[:, f])
        keep = rng.random((n, n_fields - 1)) < signal
        junk = rng.integers(0, vocab, size=(n, n_fields - 1))
        out[:, 1:] = np.where(keep, out[:, 1:], junk)
    return out


def generate_synthetic(cfg: SyntheticConfig, seed: int):
    """Multi-type interactions with transferable latent structure.

    Users and contents of every type draw latents around one set of shared
    cluster centres. Fields are the entity id plus noisy quantised
    projections of the latent onto fixed directions (content directions are
    shared across types). Events are drawn from a per-user softmax over
    ``sharpness * <u, v> / sqrt(L)`` plus Gaussian noise; timestamps are
    uniform over ``cfg.days`` days.
    """
    cfg.validate()
    rng = lambda name: derive_rng(seed, f"synthetic.{name}")  # noqa: E731
    L = cfg.latent_dim
    centres = rng("centres").normal(size=(cfg.n_clusters, L))

    def draw_latents(stream, n):
        r = rng(stream)
        which = r.integers(0, cfg.n_clusters, size=n)
        return centres[which] + cfg.cluster_spread * r.normal(size=(n, L))

    user_lat = draw_latents("users", cfg.n_users)
    content_lat = {}
    offsets = {}
    next_id = 0
    for t in cfg.types:
        content_lat[t] = draw_latents(f"contents.{t}", cfg.n_contents[t])
        offsets[t] = next_id
        next_id += cfg.n_contents[t]

    dirs = rng("directions")
    u_dirs = dirs.normal(size=(L, cfg.n_user_fields - 1)) / math.sqrt(L)
    c_dirs = dirs.normal(size=(L, cfg.n_content_fields - 1)) / math.sqrt(L)
    quant = np.linspace(0, 1, cfg.n_bins + 1)[1:-1]
    u_edges = [np.quantile(user_lat @ u_dirs[:, f], quant) for f in range(cfg.n_user_fields - 1)]
    pooled = np.concatenate([content_lat[t] for t in cfg.types])
    c_edges = [np.quantile(pooled @ c_dirs[:, f], quant) for f in range(cfg.n_content_fields - 1)]

    user_ids = np.arange(cfg.n_users, dtype=np.int64)
    user_feats = _binned_fields(rng("user_fields"), user_lat, u_dirs, u_edges, cfg.n_user_fields,
                                cfg.field_signal, cfg.vocab_size, user_ids)
    catalogs = {}
    for t in cfg.types:
        ids = offsets[t] + np.arange(cfg.n_contents[t], dtype=np.int64)
        feats = _binned_fields(rng(f"content_fields.{t}"), content_lat[t], c_dirs, c_edges, cfg.n_content_fields,
                               cfg.field_signal, cfg.vocab_size, ids)
        catalogs[t] = Catalog(ids, feats)

    cols = {"u": [], "c": [], "t": [], "ts": []}
    for code, t in enumerate(cfg.types):
        r = rng(f"events.{t}")
        n = cfg.n_interactions[t]
        per_user = r.multinomial(n, np.full(cfg.n_users, 1.0 / cfg.n_users))
        logits_base = cfg.sharpness * (user_lat @ content_lat[t].T) / math.sqrt(L)
        users_rep, items = [], []
        for u in np.nonzero(per_user)[0]:
            logits = logits_base[u] + cfg.noise * r.normal(size=cfg.n_contents[t])
            p = np.exp(logits - logits.max())
            p /= p.sum()
            items.append(r.choice(cfg.n_contents[t], size=per_user[u], p=p))
            users_rep.append(np.full(per_user[u], u, dtype=np.int64))
        ts = cfg.start_ts + r.integers(0, cfg.days * SECONDS_PER_DAY, size=n)
        cols["u"].append(np.concatenate(users_rep))
        cols["c"].append(offsets[t] + np.concatenate(items))
        cols["t"].append(np.full(n, code, dtype=np.int64))
        cols["ts"].append(ts)
    u = np.concatenate(cols["u"])
    c = np.concatenate(cols["c"])
    tc = np.concatenate(cols["t"])
    ts = np.concatenate(cols["ts"])
    order = np.lexsort((c, u, tc, ts))
    schema = FeatureSchema.default(cfg.n_user_fields, cfg.n_content_fields, cfg.vocab_size)
    ds = Dataset(schema, cfg.types, user_ids, user_feats, catalogs, u[order], c[order], tc[order], ts[order])
    return ds, PlantedLatents(user_lat, content_lat)


def day_threshold(ds, day):
    """Timestamp ``day`` whole UTC days after midnight of the earliest event."""
    first = int(ds.timestamps.min())
    return first - first % SECONDS_PER_DAY + int(day) * SECONDS_PER_DAY
