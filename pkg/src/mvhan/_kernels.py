"""Hot inner loops, compiled with numba when available.

Every kernel has a pure-numpy twin with identical results. The numba path is
used unless ``MVHAN_NUMBA=0`` is set in the environment (or numba is missing).
Both twins are importable directly (``*_numpy`` / ``*_numba``) so tests and
benchmarks can compare them in one process.
"""

import os

import numpy as np

try:
    from numba import njit
    HAS_NUMBA = True
except ImportError:  # pragma: no cover - numba is optional
    HAS_NUMBA = False

USE_NUMBA = HAS_NUMBA and os.environ.get("MVHAN_NUMBA", "1").strip().lower() not in ("0", "false", "no", "off")


# ---------------------------------------------------------------------------
# scatter-add of rows (embedding / gather backward)
# ---------------------------------------------------------------------------

def scatter_add_rows_numpy(out, idx, src):
    """out[idx[i]] += src[i] for each i, in index order."""
    np.add.at(out, idx, src)
    return out


# ---------------------------------------------------------------------------
# negative selection from pre-drawn candidates
# ---------------------------------------------------------------------------

def select_negatives_numpy(draws, row_users, pos_indptr, pos_items, r):
    """Pick, per row, the first ``r`` distinct draws not among the row user's positives.

    ``pos_indptr``/``pos_items`` are a CSR map user -> sorted positive item
    indices. Returns ``(chosen, filled)``; rows with ``filled < r`` ran out of
    draws and must be retried by the caller.
    """
    n, m = draws.shape
    chosen = np.full((n, r), -1, dtype=np.int64)
    filled = np.zeros(n, dtype=np.int64)
    if n == 0 or r == 0:
        return chosen, filled
    forbidden = np.zeros((n, m), dtype=bool)
    if pos_items.size:
        # (user, item) keys are globally sorted because each CSR slice is sorted
        span = int(max(pos_items.max(), draws.max())) + 1
        owners = np.repeat(np.arange(pos_indptr.size - 1, dtype=np.int64), np.diff(pos_indptr))
        keys = owners * span + pos_items
        query = row_users[:, None].astype(np.int64) * span + draws
        at = np.searchsorted(keys, query)
        forbidden = keys[np.minimum(at, keys.size - 1)] == query
    order = np.argsort(draws, axis=1, kind="stable")
    sorted_draws = np.take_along_axis(draws, order, axis=1)
    first_sorted = np.ones((n, m), dtype=bool)
    first_sorted[:, 1:] = sorted_draws[:, 1:] != sorted_draws[:, :-1]
    first = np.empty_like(first_sorted)
    np.put_along_axis(first, order, first_sorted, axis=1)
    valid = first & ~forbidden
    rank = np.cumsum(valid, axis=1)
    take = valid & (rank <= r)
    rows, cols = np.nonzero(take)
    chosen[rows, rank[rows, cols] - 1] = draws[rows, cols]
    filled[:] = np.minimum(rank[:, -1], r)
    return chosen, filled


# ---------------------------------------------------------------------------
# AUC numerator: 2 * (count of positive > negative pairs) + ties
# ---------------------------------------------------------------------------

def auc_twice_numerator_numpy(pos_scores, neg_scores):
    neg_sorted = np.sort(neg_scores)
    less = np.searchsorted(neg_sorted, pos_scores, side="left")
    leq = np.searchsorted(neg_sorted, pos_scores, side="right")
    return int(2 * less.sum() + (leq - less).sum())


# ---------------------------------------------------------------------------
# row-wise top-k over a score matrix, ties broken by column order
# ---------------------------------------------------------------------------

def topk_rows_numpy(scores, k):
    """Column indices of the ``k`` best scores per row, descending.

    Ties keep ascending column order, so callers that store ids sorted get the
    (score desc, id asc) contract for free.
    """
    k = min(k, scores.shape[1])
    order = np.argsort(-scores, axis=1, kind="stable")
    return order[:, :k].astype(np.int64)


if HAS_NUMBA:

    @njit(cache=True)
    def scatter_add_rows_numba(out, idx, src):
        n, d = src.shape
        for i in range(n):
            row = idx[i]
            for j in range(d):
                out[row, j] += src[i, j]
        return out

    @njit(cache=True)
    def select_negatives_numba(draws, row_users, pos_indptr, pos_items, r):
        n, m = draws.shape
        chosen = np.full((n, r), -1, dtype=np.int64)
        filled = np.zeros(n, dtype=np.int64)
        if r == 0:
            return chosen, filled
        for i in range(n):
            u = row_users[i]
            lo = pos_indptr[u]
            hi = pos_indptr[u + 1]
            c = 0
            for j in range(m):
                x = draws[i, j]
                # binary search in the user's sorted positives
                a = lo
                b = hi
                while a < b:
                    mid = (a + b) // 2
                    if pos_items[mid] < x:
                        a = mid + 1
                    else:
                        b = mid
                if a < hi and pos_items[a] == x:
                    continue
                dup = False
                for q in range(c):
                    if chosen[i, q] == x:
                        dup = True
                        break
                if dup:
                    continue
                chosen[i, c] = x
                c += 1
                if c == r:
                    break
            filled[i] = c
        return chosen, filled

    @njit(cache=True)
    def _auc_merge(p, q):
        total = 0
        lo = 0
        hi = 0
        nq = q.size
        for i in range(p.size):
            x = p[i]
            while lo < nq and q[lo] < x:
                lo += 1
            if hi < lo:
                hi = lo
            while hi < nq and q[hi] <= x:
                hi += 1
            total += 2 * lo + (hi - lo)
        return total

    def auc_twice_numerator_numba(pos_scores, neg_scores):
        # numpy's sort beats numba's; only the merge walk is compiled
        return int(_auc_merge(np.sort(pos_scores), np.sort(neg_scores)))

    @njit(cache=True)
    def topk_rows_numba(scores, k):
        nq, n = scores.shape
        if k > n:
            k = n
        out = np.empty((nq, k), dtype=np.int64)
        best = np.empty(k, dtype=np.float64)
        for i in range(nq):
            c = 0
            for j in range(n):
                s = scores[i, j]
                if c == k and not (s > best[k - 1]):
                    continue
                # insertion keeps earlier columns ahead on ties
                pos = c if c < k else k - 1
                while pos > 0 and s > best[pos - 1]:
                    if pos < k:
                        best[pos] = best[pos - 1]
                        out[i, pos] = out[i, pos - 1]
                    pos -= 1
                best[pos] = s
                out[i, pos] = j
                if c < k:
                    c += 1
        return out

else:  # pragma: no cover
    scatter_add_rows_numba = scatter_add_rows_numpy
    select_negatives_numba = select_negatives_numpy
    auc_twice_numerator_numba = auc_twice_numerator_numpy
    topk_rows_numba = topk_rows_numpy


if USE_NUMBA:
    scatter_add_rows = scatter_add_rows_numba
    select_negatives = select_negatives_numba
    auc_twice_numerator = auc_twice_numerator_numba
    topk_rows = topk_rows_numba
else:
    scatter_add_rows = scatter_add_rows_numpy
    select_negatives = select_negatives_numpy
    auc_twice_numerator = auc_twice_numerator_numpy
    topk_rows = topk_rows_numpy

BACKEND = "numba" if USE_NUMBA else "numpy"
