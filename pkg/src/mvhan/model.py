"""User/content towers, parameter sharing across content types, and checkpoints."""

from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, field

import numpy as np

from .data import FeatureSchema, derive_rng
from .layers import (
    EmbeddingTableGroup,
    cosine,
    cosine_score,
    init_mhsa_stack,
    init_mlp,
    init_mlp_extractor,
    matched_hidden_width,
    mlp_block_size,
    mlp_forward,
)
from .tensor import Tensor, reshape, take_rows

CHECKPOINT_FORMAT = "mvhan-checkpoint/1"

VARIANTS = ("mvhan", "mvhan-wose", "mvhan-wofe", "mvhan-mlp", "ttm", "ttm-all")

_ALIASES = {
    "mv-han": "mvhan", "mvhan": "mvhan",
    "mv-han-wose": "mvhan-wose", "mvhan-wose": "mvhan-wose", "wose": "mvhan-wose",
    "mv-han-wofe": "mvhan-wofe", "mvhan-wofe": "mvhan-wofe", "wofe": "mvhan-wofe",
    "mv-han-mlp": "mvhan-mlp", "mvhan-mlp": "mvhan-mlp", "mvhan_mlp": "mvhan-mlp", "mlp": "mvhan-mlp",
    "ttm": "ttm", "ttm-single-type": "ttm", "ttm-single": "ttm",
    "ttm-all": "ttm-all", "ttm_all": "ttm-all",
}

SHARED = "shared"
PER_TYPE = "per-type"

# content-side sharing per variant: (Emb_o, FEL_o, MRL_o)
_SHARING = {
    "mvhan": (SHARED, SHARED, PER_TYPE),
    "mvhan-wose": (PER_TYPE, SHARED, PER_TYPE),
    "mvhan-wofe": (SHARED, PER_TYPE, PER_TYPE),
    "mvhan-mlp": (SHARED, SHARED, PER_TYPE),
    "ttm": (SHARED, SHARED, SHARED),
    "ttm-all": (SHARED, SHARED, SHARED),
}

CONTENT_GROUPS = ("emb_o", "fel_o", "mrl_o")


class ConfigError(ValueError):
    pass


def canonical_variant(name):
    key = str(name).strip().lower().replace(" ", "")
    if key not in _ALIASES:
        raise ConfigError(f"unknown variant {name!r}; choose from {', '.join(VARIANTS)}")
    return _ALIASES[key]


@dataclass
class ModelConfig:
    variant: str = "mvhan"
    d: int = 16
    heads: int = 2
    head_dim: int = 8
    n_blocks: int = 2
    mrl_hidden: list = field(default_factory=lambda: [128])
    k: int = 64
    temperature: float = 0.2
    types: tuple = ("source", "target")
    ttm_type: str = "target"

    def __post_init__(self):
        self.variant = canonical_variant(self.variant)
        self.types = tuple(self.types)
        self.mrl_hidden = [int(h) for h in self.mrl_hidden]

    def validate(self):
        if self.heads * self.head_dim != self.d:
            raise ConfigError(f"heads * head_dim must equal d ({self.heads} * {self.head_dim} != {self.d})")
        for name in ("d", "heads", "head_dim", "k"):
            if getattr(self, name) < 1:
                raise ConfigError(f"model.{name} must be >= 1")
        if self.n_blocks < 0:
            raise ConfigError("model.n_blocks must be >= 0")
        if any(h < 1 for h in self.mrl_hidden):
            raise ConfigError("model.mrl_hidden widths must be >= 1")
        if not self.temperature > 0:
            raise ConfigError("model.temperature must be positive")
        if not self.types or len(set(self.types)) != len(self.types):
            raise ConfigError("model.types must be a non-empty list of distinct tags")
        if self.variant == "ttm" and self.ttm_type not in self.types:
            raise ConfigError(f"model.ttm_type {self.ttm_type!r} is not one of {self.types}")

    @property
    def tower_types(self):
        """Content types this model can score."""
        return (self.ttm_type,) if self.variant == "ttm" else self.types

    def to_dict(self):
        out = asdict(self)
        out["types"] = list(self.types)
        return out

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


def sharing_map(config):
    """Which named parameter groups are single shared instances."""
    emb, fel, mrl = _SHARING[config.variant]
    return {"emb_u": SHARED, "fel_u": SHARED, "mrl_u": SHARED, "emb_o": emb, "fel_o": fel, "mrl_o": mrl}


class MVHANModel:
    """Two towers; the content tower resolves each group per type via the sharing map."""

    def __init__(self, config, schema, seed, sharing, user, content):
        self.config = config
        self.schema = schema
        self.seed = int(seed)
        self.sharing = sharing
        self.user = user          # {"emb": ..., "fel": ..., "mrl": ...}
        self.content = content    # {"emb_o": {key: obj}, ...}; key is SHARED or a type tag

    # -- structure ----------------------------------------------------------

    @property
    def types(self):
        return self.config.tower_types

    def _check_type(self, ctype):
        if ctype not in self.types:
            raise ConfigError(f"content type {ctype!r} not served by variant {self.config.variant} (types {self.types})")

    def content_part(self, group, ctype):
        self._check_type(ctype)
        insts = self.content[group]
        return insts[SHARED] if self.sharing[group] == SHARED else insts[ctype]

    def parameters(self):
        """Ordered ``name -> Tensor`` over unique storages."""
        out = {}
        for obj in (self.user["emb"], self.user["fel"], self.user["mrl"]):
            for p in obj.parameters():
                out[p.name] = p
        for group in CONTENT_GROUPS:
            for obj in self.content[group].values():
                for p in obj.parameters():
                    out[p.name] = p
        return out

    def group_parameters(self, group, key=None):
        if group in ("emb_u", "fel_u", "mrl_u"):
            return self.user[group[:3]].parameters()
        insts = self.content[group]
        if key is None:
            return [p for obj in insts.values() for p in obj.parameters()]
        return insts[SHARED if self.sharing[group] == SHARED else key].parameters()

    def exclusive_parameters(self, ctype):
        """Parameters reachable only through ``ctype``'s content path."""
        names = []
        for group in CONTENT_GROUPS:
            if self.sharing[group] == PER_TYPE and ctype in self.content[group]:
                names += [p.name for p in self.content[group][ctype].parameters()]
        return names

    def n_parameters(self):
        return int(sum(p.data.size for p in self.parameters().values()))

    def zero_grad(self):
        for p in self.parameters().values():
            p.grad = None

    # -- forward ------------------------------------------------------------

    def user_features(self, user_field_ids):
        return self.user["fel"](self.user["emb"](user_field_ids))

    def user_tower(self, user_field_ids):
        """``(..., F_u)`` ids -> ``(..., k)`` user representations."""
        tokens = self.user_features(user_field_ids)
        return mlp_forward(reshape(tokens, tokens.shape[:-2] + (tokens.shape[-2] * tokens.shape[-1],)), self.user["mrl"])

    def content_features(self, content_field_ids, ctype):
        emb = self.content_part("emb_o", ctype)
        fel = self.content_part("fel_o", ctype)
        return fel(emb(content_field_ids))

    def content_tower(self, content_field_ids, ctype):
        tokens = self.content_features(content_field_ids, ctype)
        flat = reshape(tokens, tokens.shape[:-2] + (tokens.shape[-2] * tokens.shape[-1],))
        return mlp_forward(flat, self.content_part("mrl_o", ctype))

    def score_pair(self, user_field_ids, content_field_ids, ctype):
        zu = self.user_tower(np.asarray(user_field_ids)).data
        zc = self.content_tower(np.asarray(content_field_ids), ctype).data
        return cosine_score(zu, zc)

    def candidate_logits(self, user_field_ids, cand_field_ids, ctype):
        """Cosine logits ``(B, C)`` divided by the temperature, differentiable.

        ``cand_field_ids`` is ``(B, C, F_c)``; each distinct content row is
        encoded once and gathered back.
        """
        cand = np.asarray(cand_field_ids, dtype=np.int64)
        b, c, f = cand.shape
        uniq, inverse = np.unique(cand.reshape(b * c, f), axis=0, return_inverse=True)
        zu = self.user_tower(np.asarray(user_field_ids, dtype=np.int64))       # (B, k)
        zc_uniq = self.content_tower(uniq, ctype)                               # (U, k)
        zc = take_rows(zc_uniq, inverse.reshape(b, c))                          # (B, C, k)
        zu3 = reshape(zu, (b, 1, zu.shape[-1]))
        return cosine(zu3, zc) * (1.0 / self.config.temperature)


def _mhsa_block_size(cfg):
    return 3 * cfg.heads * cfg.d * cfg.head_dim + cfg.d * cfg.d


def _build_fel(rng, cfg, n_fields, prefix):
    if cfg.variant == "mvhan-mlp":
        hidden = matched_hidden_width(n_fields * cfg.d, _mhsa_block_size(cfg))
        return init_mlp_extractor(rng, n_fields, cfg.d, hidden, cfg.n_blocks, prefix)
    return init_mhsa_stack(rng, cfg.d, cfg.heads, cfg.head_dim, cfg.n_blocks, prefix)


def mlp_extractor_size_ratio(cfg, n_fields):
    """Parameter count of the MLP extractor relative to the MHSA stack it replaces."""
    hidden = matched_hidden_width(n_fields * cfg.d, _mhsa_block_size(cfg))
    return mlp_block_size(n_fields * cfg.d, hidden) / _mhsa_block_size(cfg)


def build_variant(config, schema, seed):
    """Initialise a model for ``config.variant`` deterministically from ``seed``."""
    config.validate()
    rng = derive_rng(seed, "init")
    sharing = sharing_map(config)
    ufields, cfields = schema.user_fields, schema.content_fields
    if not ufields or not cfields:
        raise ConfigError("schema needs at least one user field and one content field")
    user = {
        "emb": EmbeddingTableGroup("user", [f.name for f in ufields], [f.vocab_size for f in ufields], config.d, rng, "user.emb"),
        "fel": _build_fel(rng, config, len(ufields), "user.fel"),
        "mrl": init_mlp(rng, [len(ufields) * config.d] + config.mrl_hidden + [config.k], "user.mrl"),
    }
    content = {}
    keys_for = lambda group: [SHARED] if sharing[group] == SHARED else list(config.tower_types)  # noqa: E731
    content["emb_o"] = {
        key: EmbeddingTableGroup("content", [f.name for f in cfields], [f.vocab_size for f in cfields], config.d, rng,
                                 f"content.emb.{key}")
        for key in keys_for("emb_o")
    }
    content["fel_o"] = {key: _build_fel(rng, config, len(cfields), f"content.fel.{key}") for key in keys_for("fel_o")}
    content["mrl_o"] = {
        key: init_mlp(rng, [len(cfields) * config.d] + config.mrl_hidden + [config.k], f"content.mrl.{key}")
        for key in keys_for("mrl_o")
    }
    return MVHANModel(config, schema, seed, sharing, user, content)


# ---------------------------------------------------------------------------
# checkpoints: manifest.json + params.bin (little-endian float64, manifest order)
# ---------------------------------------------------------------------------

def _manifest(model):
    entries = []
    offset = 0
    for name, p in model.parameters().items():
        entries.append({"name": name, "shape": list(p.shape), "offset": offset})
        offset += p.data.size * 8
    return {
        "format": CHECKPOINT_FORMAT,
        "config": model.config.to_dict(),
        "schema": model.schema.to_dict(),
        "sharing": model.sharing,
        "seed": model.seed,
        "params": entries,
        "nbytes": offset,
    }


def save_checkpoint(model, directory, extra=None):
    os.makedirs(directory, exist_ok=True)
    manifest = _manifest(model)
    if extra:
        manifest["extra"] = extra
    blob = b"".join(p.data.astype("<f8").tobytes() for p in model.parameters().values())
    _write_bytes(os.path.join(directory, "params.bin"), blob)
    _write_bytes(os.path.join(directory, "manifest.json"),
                 (json.dumps(manifest, indent=1, sort_keys=True) + "\n").encode("utf-8"))


def _write_bytes(path, data):
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(data)
    os.replace(tmp, path)


class CheckpointError(ValueError):
    pass


def load_checkpoint(directory):
    with open(os.path.join(directory, "manifest.json"), encoding="utf-8") as fh:
        manifest = json.load(fh)
    if manifest.get("format") != CHECKPOINT_FORMAT:
        raise CheckpointError(f"unsupported checkpoint format {manifest.get('format')!r}")
    config = ModelConfig.from_dict(manifest["config"])
    schema = FeatureSchema.from_dict(manifest["schema"])
    model = build_variant(config, schema, manifest["seed"])
    if model.sharing != manifest["sharing"]:
        raise CheckpointError("sharing map in manifest does not match the variant")
    with open(os.path.join(directory, "params.bin"), "rb") as fh:
        blob = fh.read()
    if len(blob) != manifest["nbytes"]:
        raise CheckpointError(f"params.bin has {len(blob)} bytes, manifest says {manifest['nbytes']}")
    params = model.parameters()
    if [e["name"] for e in manifest["params"]] != list(params):
        raise CheckpointError("parameter names in manifest do not match the model")
    for entry in manifest["params"]:
        p = params[entry["name"]]
        if list(p.shape) != entry["shape"]:
            raise CheckpointError(f"{entry['name']}: shape {entry['shape']} != model {list(p.shape)}")
        n = p.data.size
        p.data[...] = np.frombuffer(blob, dtype="<f8", count=n, offset=entry["offset"]).reshape(p.shape)
    return model, manifest.get("extra")
