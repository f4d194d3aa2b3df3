"""AUC, HR@K, relative improvement, and the end-to-end evaluation harness."""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from . import _kernels
from .data import derive_rng
from .retrieval import build_index, encode_users
from .training import NegativeSampler

REPORT_FORMAT = "mvhan-report/1"


class MetricError(ValueError):
    pass


def auc(scores, labels):
    """Probability that a random positive outscores a random negative; ties count half."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels).astype(bool)
    pos, neg = scores[labels], scores[~labels]
    return auc_from_groups(pos, neg)


def auc_from_groups(pos, neg):
    pos = np.ascontiguousarray(pos, dtype=np.float64)
    neg = np.ascontiguousarray(neg, dtype=np.float64)
    if pos.size == 0 or neg.size == 0:
        raise MetricError("AUC is undefined without both positives and negatives")
    twice = _kernels.auc_twice_numerator(pos, neg)
    return float(twice) / (2.0 * pos.size * neg.size)


def rela_impr(value, baseline, kind):
    """Relative improvement in percent (AUC measured above the 0.5 random level)."""
    if kind == "auc":
        if baseline == 0.5:
            raise MetricError("relative AUC improvement needs a baseline AUC other than 0.5")
        return ((value - 0.5) / (baseline - 0.5) - 1.0) * 100.0
    if kind == "hr":
        if not baseline > 0:
            raise MetricError("relative HR improvement needs a positive baseline HR")
        return (value / baseline - 1.0) * 100.0
    raise MetricError(f"unknown metric kind {kind!r}")


def hit_ratio(retrieved_ids, targets):
    """Fraction of rows whose target id appears in that row of ``retrieved_ids``."""
    retrieved_ids = np.asarray(retrieved_ids)
    targets = np.asarray(targets)
    if targets.size == 0:
        raise MetricError("hit ratio of an empty test set is undefined")
    return float(np.mean(np.any(retrieved_ids == targets[:, None], axis=1)))


def hr_at_k(index, user_vectors, test_pairs, k, exclude=None):
    """HR@k for ``(user_row, content_id)`` test pairs.

    ``user_vectors`` is indexed by user row. ``exclude`` maps user row to an
    array of index positions the user must not be shown (their training
    positives).
    """
    if k < 1:
        raise MetricError(f"k must be >= 1, got {k}")
    test_pairs = np.asarray(test_pairs, dtype=np.int64).reshape(-1, 2)
    if test_pairs.shape[0] == 0:
        raise MetricError("hit ratio of an empty test set is undefined")
    users, inverse = np.unique(test_pairs[:, 0], return_inverse=True)
    mask = None
    if exclude is not None:
        mask = np.zeros((users.size, len(index)), dtype=bool)
        for i, u in enumerate(users.tolist()):
            cols = exclude.get(u)
            if cols is not None and len(cols):
                mask[i, cols] = True
    ids, _ = index.top_k_batch(user_vectors[users], k, exclude=mask)
    return hit_ratio(ids[inverse], test_pairs[:, 1])


# ---------------------------------------------------------------------------
# reports
# ---------------------------------------------------------------------------

@dataclass
class EvalReport:
    k: int
    auc: dict = field(default_factory=dict)
    hr: dict = field(default_factory=dict)
    n_users: dict = field(default_factory=dict)
    n_pairs: dict = field(default_factory=dict)
    name: str = ""
    baseline: str = ""
    rela_impr: dict = field(default_factory=dict)

    def attach_baseline(self, other, name=None):
        self.baseline = name or other.name or "baseline"
        self.rela_impr = {}
        for t in self.auc:
            if t in other.auc:
                self.rela_impr[t] = {
                    "auc": round(rela_impr(self.auc[t], other.auc[t], "auc"), 2),
                    f"hr@{self.k}": round(rela_impr(self.hr[t], other.hr[t], "hr"), 2),
                }

    def to_dict(self):
        out = {
            "format": REPORT_FORMAT,
            "name": self.name,
            "k": self.k,
            "types": {
                t: {"auc": self.auc[t], f"hr@{self.k}": self.hr[t], "n_users": self.n_users[t], "n_pairs": self.n_pairs[t]}
                for t in self.auc
            },
        }
        if self.baseline:
            out["baseline"] = self.baseline
            out["rela_impr"] = self.rela_impr
        return out

    def to_text(self):
        return json.dumps(self.to_dict(), indent=1, sort_keys=True) + "\n"

    @classmethod
    def from_text(cls, text):
        d = json.loads(text)
        if d.get("format") != REPORT_FORMAT:
            raise MetricError(f"unsupported report format {d.get('format')!r}")
        k = int(d["k"])
        rep = cls(k=k, name=d.get("name", ""))
        for t, row in d["types"].items():
            rep.auc[t] = float(row["auc"])
            rep.hr[t] = float(row[f"hr@{k}"])
            rep.n_users[t] = int(row["n_users"])
            rep.n_pairs[t] = int(row["n_pairs"])
        rep.baseline = d.get("baseline", "")
        rep.rela_impr = d.get("rela_impr", {})
        return rep


def read_report(path):
    with open(path, encoding="utf-8") as fh:
        return EvalReport.from_text(fh.read())


def write_report(report, path):
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(report.to_text())


def _positive_rows(dataset, ctype):
    sub = dataset.of_type(ctype)
    if not len(sub):
        return np.empty(0, dtype=np.int64), np.empty(0, dtype=np.int64)
    return dataset.user_rows(sub.user_ids), dataset.catalogs[ctype].rows_of(sub.content_ids)


def evaluate(model, train, test, k=50, seed=0, n_auc_negatives=50, baseline=None, name="", types=None):
    """Per-type AUC over (positive, sampled unclicked) pairs and HR@k via exact retrieval.

    Test pairs are de-duplicated and pairs already positive in ``train`` are
    dropped. AUC negatives avoid every known positive of the user (train or
    test); HR candidates exclude the user's training positives.
    """
    report = EvalReport(k=k, name=name)
    n_users = train.users.size
    user_vecs = None
    for ctype in (types or model.types):
        if ctype not in test.types or ctype not in model.types:
            continue
        cat = train.catalogs[ctype]
        tr_u, tr_i = _positive_rows(train, ctype)
        te_u, te_i = _positive_rows(test, ctype)
        if te_u.size == 0:
            continue
        train_keys = set(zip(tr_u.tolist(), tr_i.tolist()))
        pairs = sorted({(u, i) for u, i in zip(te_u.tolist(), te_i.tolist())} - train_keys)
        if not pairs:
            continue
        pairs = np.array(pairs, dtype=np.int64)
        if user_vecs is None:
            user_vecs = encode_users(model, train.user_features)
        index = build_index(model, cat, ctype)
        item_vecs = index.vectors  # catalog order == index order (both ascending ids)
        uv = user_vecs / np.linalg.norm(user_vecs, axis=1, keepdims=True)

        known = NegativeSampler(len(cat), np.concatenate([tr_u, te_u]), np.concatenate([tr_i, te_i]), n_users)
        n_neg = min(n_auc_negatives, int(len(cat) - known.n_positives(pairs[:, 0]).max()))
        rng = derive_rng(seed, f"eval.auc_negatives.{ctype}")
        negs = known.sample(pairs[:, 0], n_neg, rng)
        pos_scores = np.einsum("ij,ij->i", uv[pairs[:, 0]], item_vecs[pairs[:, 1]])
        neg_scores = np.einsum("ij,ikj->ik", uv[pairs[:, 0]], item_vecs[negs])
        report.auc[ctype] = auc_from_groups(pos_scores, neg_scores.reshape(-1))

        train_only = NegativeSampler(len(cat), tr_u, tr_i, n_users)
        exclude = {u: train_only.positives_of(u) for u in np.unique(pairs[:, 0]).tolist()}
        test_ids = np.column_stack([pairs[:, 0], cat.ids[pairs[:, 1]]])
        report.hr[ctype] = hr_at_k(index, user_vecs, test_ids, k, exclude)
        report.n_users[ctype] = int(np.unique(pairs[:, 0]).size)
        report.n_pairs[ctype] = int(pairs.shape[0])
    if baseline is not None:
        report.attach_baseline(baseline)
    return report
