"""Sampled-softmax objective, negative sampling, alternating batches and optimizers."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

from . import _kernels
from .data import derive_rng
from .model import ConfigError
from .tensor import log_softmax, mean, scale

MAX_SAMPLING_ROUNDS = 64


class SamplingError(ValueError):
    pass


@dataclass
class TrainConfig:
    r: int = 20
    batch_size: int = 256
    epochs: int = 10
    optimizer: str = "adam"
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    momentum: float = 0.9
    seed: int = 0

    def validate(self):
        if self.r < 1:
            raise ConfigError("train.r must be >= 1")
        if self.batch_size < 1:
            raise ConfigError("train.batch_size must be >= 1")
        if self.epochs < 0:
            raise ConfigError("train.epochs must be >= 0")
        if self.optimizer not in ("adam", "sgd-momentum"):
            raise ConfigError(f"train.optimizer must be 'adam' or 'sgd-momentum', got {self.optimizer!r}")
        if not self.lr > 0:
            raise ConfigError("train.lr must be positive")

    def to_dict(self):
        return asdict(self)


# ---------------------------------------------------------------------------
# negative sampling
# ---------------------------------------------------------------------------

def sample_negatives(catalog_size, positives, r, rng):
    """``r`` distinct catalog rows drawn uniformly from those not in ``positives``."""
    if r == 0:
        return np.empty(0, dtype=np.int64)
    pos = np.unique(np.asarray(positives, dtype=np.int64))
    sampler = NegativeSampler(catalog_size, np.zeros(pos.size, dtype=np.int64), pos, n_users=1)
    return sampler.sample(np.zeros(1, dtype=np.int64), r, rng)[0]


class NegativeSampler:
    """Uniform negatives without replacement, excluding each user's positives.

    Positives are held as CSR over user rows with sorted, unique item rows.
    """

    def __init__(self, catalog_size, user_rows, item_rows, n_users):
        self.catalog_size = int(catalog_size)
        order = np.lexsort((item_rows, user_rows))
        pairs = np.stack([user_rows[order], item_rows[order]], axis=1)
        if pairs.size:
            keep = np.ones(len(pairs), dtype=bool)
            keep[1:] = np.any(pairs[1:] != pairs[:-1], axis=1)
            pairs = pairs[keep]
        counts = np.bincount(pairs[:, 0], minlength=n_users) if pairs.size else np.zeros(n_users, dtype=np.int64)
        self.indptr = np.concatenate([[0], np.cumsum(counts)]).astype(np.int64)
        self.items = np.ascontiguousarray(pairs[:, 1], dtype=np.int64)

    def n_positives(self, user_rows):
        return self.indptr[user_rows + 1] - self.indptr[user_rows]

    def positives_of(self, user_row):
        return self.items[self.indptr[user_row]:self.indptr[user_row + 1]]

    def sample(self, user_rows, r, rng):
        user_rows = np.ascontiguousarray(user_rows, dtype=np.int64)
        n = user_rows.size
        if r == 0 or n == 0:
            return np.empty((n, r), dtype=np.int64)
        eligible = self.catalog_size - self.n_positives(user_rows)
        if np.any(eligible < r):
            bad = int(user_rows[np.argmax(eligible < r)])
            raise SamplingError(f"user row {bad} has only {int(eligible.min())} eligible negatives, need {r}")
        out = np.empty((n, r), dtype=np.int64)
        todo = np.arange(n)
        width = r + 8
        for _ in range(MAX_SAMPLING_ROUNDS):
            draws = rng.integers(0, self.catalog_size, size=(todo.size, width), dtype=np.int64)
            chosen, filled = _kernels.select_negatives(draws, user_rows[todo], self.indptr, self.items, r)
            done = filled == r
            out[todo[done]] = chosen[done]
            todo = todo[~done]
            if todo.size == 0:
                return out
            width *= 2
        raise SamplingError("negative sampling did not converge")  # pragma: no cover


# ---------------------------------------------------------------------------
# batches
# ---------------------------------------------------------------------------

@dataclass
class ExampleBatch:
    """Type-homogeneous rows: user rows, positive catalog rows, ``(B, r)`` negative rows."""

    ctype: str
    user_rows: np.ndarray
    pos_rows: np.ndarray
    neg_rows: np.ndarray

    def __len__(self):
        return self.user_rows.size

    def candidate_rows(self):
        return np.concatenate([self.pos_rows[:, None], self.neg_rows], axis=1)


def alternating_batches(sizes, batch_size, rng):
    """Type-homogeneous index batches, round-robin over types in ``sizes`` order.

    ``sizes`` maps type -> number of examples. Each type's examples are
    shuffled and chunked; types take turns while more than one has batches
    left, then the remainder is emitted in order. Returns ``[(type, idx)]``.
    """
    if batch_size < 1:
        raise ConfigError("batch size must be >= 1")
    if not any(n > 0 for n in sizes.values()):
        raise ValueError("all datasets are empty")
    queues = {}
    for t, n in sizes.items():
        perm = rng.permutation(n) if n else np.empty(0, dtype=np.int64)
        queues[t] = [perm[i:i + batch_size] for i in range(0, n, batch_size)]
    out = []
    cursor = {t: 0 for t in queues}
    while True:
        live = [t for t in queues if cursor[t] < len(queues[t])]
        if not live:
            return out
        for t in live:
            out.append((t, queues[t][cursor[t]]))
            cursor[t] += 1


class TrainingData:
    """Training interactions of each served type, as user rows and catalog rows."""

    def __init__(self, dataset, types):
        self.dataset = dataset
        self.types = tuple(types)
        self.user_rows = {}
        self.item_rows = {}
        self.samplers = {}
        n_users = dataset.users.size
        for t in self.types:
            sub = dataset.of_type(t)
            urows = dataset.user_rows(sub.user_ids) if len(sub) else np.empty(0, dtype=np.int64)
            irows = dataset.catalogs[t].rows_of(sub.content_ids) if len(sub) else np.empty(0, dtype=np.int64)
            self.user_rows[t] = urows.astype(np.int64)
            self.item_rows[t] = irows.astype(np.int64)
            self.samplers[t] = NegativeSampler(len(dataset.catalogs[t]), self.user_rows[t], self.item_rows[t], n_users)

    def sizes(self):
        return {t: int(self.user_rows[t].size) for t in self.types}

    def batch(self, ctype, idx, r, rng):
        urows = self.user_rows[ctype][idx]
        negs = self.samplers[ctype].sample(urows, r, rng)
        return ExampleBatch(ctype, urows, self.item_rows[ctype][idx], negs)

    def epoch_batches(self, batch_size, r, seed, epoch):
        order = alternating_batches(self.sizes(), batch_size, derive_rng(seed, f"train.shuffle.{epoch}"))
        neg_rng = derive_rng(seed, f"train.negatives.{epoch}")
        for ctype, idx in order:
            yield self.batch(ctype, idx, r, neg_rng)


# ---------------------------------------------------------------------------
# objective
# ---------------------------------------------------------------------------

def sampled_softmax_loss(model, batch, dataset):
    """Mean over rows of -log softmax probability of the positive among 1 + r candidates."""
    ufeats = dataset.user_features[batch.user_rows]
    cfeats = dataset.catalogs[batch.ctype].features[batch.candidate_rows()]
    logits = model.candidate_logits(ufeats, cfeats, batch.ctype)
    logp = log_softmax(logits, axis=-1)
    return scale(mean(logp[:, 0]), -1.0)


def full_softmax_loss(model, batch, dataset):
    """Cross-entropy of each positive against the entire catalog of the batch type."""
    cat = dataset.catalogs[batch.ctype]
    n = len(cat)
    ufeats = dataset.user_features[batch.user_rows]
    all_rows = np.broadcast_to(np.arange(n), (len(batch), n))
    logits = model.candidate_logits(ufeats, cat.features[all_rows], batch.ctype).data
    z = logits - logits.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    return float(-logp[np.arange(len(batch)), batch.pos_rows].mean())


# ---------------------------------------------------------------------------
# optimizers
# ---------------------------------------------------------------------------

class SGDMomentum:
    """v <- mu v + g;  w <- w - lr v."""

    def __init__(self, lr, momentum=0.0):
        self.lr = lr
        self.momentum = momentum
        self.state = {}

    def step(self, params):
        for name, p in params.items():
            g = p.grad
            if g is None:
                continue
            if g.shape != p.data.shape:
                raise ValueError(f"{name}: gradient shape {g.shape} != parameter shape {p.data.shape}")
            v = self.state.get(name)
            if v is None:
                v = self.state[name] = np.zeros_like(p.data)
            v *= self.momentum
            v += g
            p.data -= self.lr * v


class Adam:
    """Bias-corrected Adam; parameters without a gradient are left untouched."""

    def __init__(self, lr, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.state = {}

    def step(self, params):
        b1, b2 = self.beta1, self.beta2
        for name, p in params.items():
            g = p.grad
            if g is None:
                continue
            if g.shape != p.data.shape:
                raise ValueError(f"{name}: gradient shape {g.shape} != parameter shape {p.data.shape}")
            st = self.state.get(name)
            if st is None:
                st = self.state[name] = {"m": np.zeros_like(p.data), "v": np.zeros_like(p.data), "t": 0}
            st["t"] += 1
            t = st["t"]
            m, v = st["m"], st["v"]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * (g * g)
            mhat = m / (1.0 - b1 ** t)
            vhat = v / (1.0 - b2 ** t)
            p.data -= self.lr * mhat / (np.sqrt(vhat) + self.eps)


def make_optimizer(cfg):
    if cfg.optimizer == "adam":
        return Adam(cfg.lr, cfg.beta1, cfg.beta2, cfg.adam_eps)
    return SGDMomentum(cfg.lr, cfg.momentum)


def optimizer_step(optimizer, params):
    optimizer.step(params)


# ---------------------------------------------------------------------------
# loop
# ---------------------------------------------------------------------------

@dataclass
class StepRecord:
    step: int
    epoch: int
    ctype: str
    loss: float

    def to_line(self):
        return f"{self.step}\t{self.epoch}\t{self.ctype}\t{self.loss!r}\n"


def train(model, dataset, cfg, callback=None):
    """Alternating-type training; returns one ``StepRecord`` per optimizer step."""
    cfg.validate()
    data = TrainingData(dataset, model.types)
    if not any(data.sizes().values()):
        raise ValueError("no training interactions for the model's content types")
    optimizer = make_optimizer(cfg)
    params = model.parameters()
    log = []
    step = 0
    for epoch in range(cfg.epochs):
        for batch in data.epoch_batches(cfg.batch_size, cfg.r, cfg.seed, epoch):
            model.zero_grad()
            loss = sampled_softmax_loss(model, batch, dataset)
            value = loss.item()
            if not math.isfinite(value):
                raise FloatingPointError(f"non-finite loss at step {step}")
            loss.backward()
            optimizer.step(params)
            rec = StepRecord(step, epoch, batch.ctype, value)
            log.append(rec)
            if callback is not None:
                callback(rec, model)
            step += 1
    model.zero_grad()
    return log


def write_metrics_log(log, path):
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("step\tepoch\ttype\tloss\n")
        for rec in log:
            fh.write(rec.to_line())


def epoch_mean_losses(log):
    out = {}
    for rec in log:
        out.setdefault(rec.epoch, []).append(rec.loss)
    return {e: float(np.mean(v)) for e, v in sorted(out.items())}
