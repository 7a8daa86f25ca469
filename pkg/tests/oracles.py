"""Deliberately naive reference implementations used as test oracles.

Nothing here is shared with the package code paths: loops and textbook
formulas only, so agreement is meaningful.
"""

import math
from collections import Counter
from itertools import permutations

import numpy as np


def loop_distance_matrix(X, metric="norm_euclidean"):
    X = np.asarray(X, dtype=np.float64)
    n = X.shape[1]
    D = np.zeros((n, n))
    for i in range(n):
        for j in range(n):
            x, y = X[:, i], X[:, j]
            if metric != "euclidean":
                x = x / math.sqrt(sum(v * v for v in x))
                y = y / math.sqrt(sum(v * v for v in y))
            d = math.sqrt(sum((a - b) ** 2 for a, b in zip(x, y)))
            D[i, j] = d * d / 2 if metric == "cosine" else d
    return D


def row_distance_matrix(Z):
    """Euclidean distances between columns, filled one row at a time."""
    Z = np.asarray(Z, dtype=np.float64)
    n = Z.shape[1]
    D = np.zeros((n, n))
    for i in range(n):
        D[i] = np.sqrt(((Z - Z[:, [i]]) ** 2).sum(axis=0))
    return D


def unit_columns(X):
    X = np.asarray(X, dtype=np.float64)
    return X / np.linalg.norm(X, axis=0)


def scan_farthest_pair(D):
    best, pair = -1.0, None
    n = D.shape[0]
    for i in range(n):
        for j in range(n):
            if i != j and D[i, j] > best:
                best, pair = D[i, j], (i, j)
    return pair


def scan_knn(Z, query, k, candidates):
    """k nearest candidates by (query first, distance, index)."""
    cand = sorted(set(candidates) | {query})
    keyed = []
    for c in cand:
        d = -1.0 if c == query else float(np.linalg.norm(Z[:, c] - Z[:, query]))
        keyed.append((d, c))
    keyed.sort()
    return [c for _, c in keyed[:k]]


def scan_hard_positives(H, P):
    """Step-by-step tracklet mining on a d x N matrix; returns member lists."""
    Z = unit_columns(H)
    N = Z.shape[1]
    k = N // P
    D = row_distance_matrix(Z)
    a, _ = scan_farthest_pair(D) if N > 1 else (0, 0)
    remaining = list(range(N))
    out = []
    for t in range(P):
        if t == 0:
            seed = a
        else:
            seed = max(remaining, key=lambda c: (D[a, c], -c))
        members = scan_knn(Z, seed, k, remaining)
        remaining = [c for c in remaining if c not in members]
        out.append(sorted(members))
    return out


def naive_hac(X, n_clusters, linkage):
    """Agglomerate from scratch each step (cluster distances recomputed from points).

    Clusters are identified by their smallest member; ties go to the
    lexicographically smallest pair of identifiers.
    """
    X = np.asarray(X, dtype=np.float64)
    n = X.shape[1]
    D = np.sqrt(((X[:, :, None] - X[:, None, :]) ** 2).sum(axis=0))
    clusters = [[i] for i in range(n)]
    while len(clusters) > n_clusters:
        K = len(clusters)
        order = np.concatenate(clusters)
        bounds = np.cumsum([0] + [len(c) for c in clusters])[:-1]
        Ds = D[np.ix_(order, order)]
        sizes = np.array([len(c) for c in clusters], dtype=np.float64)
        if linkage == "single":
            C = np.minimum.reduceat(np.minimum.reduceat(Ds, bounds, axis=0), bounds, axis=1)
        elif linkage == "complete":
            C = np.maximum.reduceat(np.maximum.reduceat(Ds, bounds, axis=0), bounds, axis=1)
        elif linkage == "average":
            C = np.add.reduceat(np.add.reduceat(Ds, bounds, axis=0), bounds, axis=1) / np.outer(sizes, sizes)
        elif linkage == "ward":
            cent = np.column_stack([X[:, c].mean(axis=1) for c in clusters])
            cd = np.sqrt(((cent[:, :, None] - cent[:, None, :]) ** 2).sum(axis=0))
            C = np.sqrt(2 * np.outer(sizes, sizes) / np.add.outer(sizes, sizes)) * cd
        else:
            raise ValueError(linkage)
        C = np.where(np.triu(np.ones((K, K), dtype=bool), 1), C, np.inf)
        a, b = divmod(int(np.argmin(C)), K)
        clusters[a] = sorted(clusters[a] + clusters[b])
        del clusters[b]
        clusters.sort(key=lambda c: c[0])
    labels = np.empty(n, dtype=np.int64)
    for c_id, members in enumerate(clusters):
        labels[members] = c_id
    return first_seen(labels)


def first_seen(labels):
    mapping = {}
    return np.array([mapping.setdefault(l, len(mapping)) for l in labels], dtype=np.int64)


def textbook_hcv(pred, truth):
    n = len(pred)
    classes = Counter(truth)
    clusters = Counter(pred)
    joint = Counter(zip(truth, pred))
    H_C = -sum(c / n * math.log(c / n) for c in classes.values())
    H_K = -sum(c / n * math.log(c / n) for c in clusters.values())
    H_C_given_K = -sum(v / n * math.log(v / clusters[k]) for (_, k), v in joint.items())
    H_K_given_C = -sum(v / n * math.log(v / classes[c]) for (c, _), v in joint.items())
    h = 1.0 if H_C == 0 else 1 - H_C_given_K / H_C
    c = 1.0 if H_K == 0 else 1 - H_K_given_C / H_K
    v = 0.0 if h + c == 0 else 2 * h * c / (h + c)
    return h, c, v


def count_purity(pred, truth):
    total = 0
    for k in set(pred):
        total += Counter(t for p, t in zip(pred, truth) if p == k).most_common(1)[0][1]
    return total / len(pred)


def permutation_accuracy(pred, truth):
    """Best one-to-one matching by trying every assignment (small label sets only)."""
    ks = sorted(set(pred), key=str)
    cs = sorted(set(truth), key=str)
    joint = Counter(zip(pred, truth))
    best = 0
    if len(ks) <= len(cs):
        for perm in permutations(cs, len(ks)):
            best = max(best, sum(joint[(k, c)] for k, c in zip(ks, perm)))
    else:
        for perm in permutations(ks, len(cs)):
            best = max(best, sum(joint[(k, c)] for k, c in zip(perm, cs)))
    return best / len(pred)


def set_count_oci(pred, truth):
    per_class = {}
    for p, t in zip(pred, truth):
        per_class.setdefault(t, set()).add(p)
    return sum(len(s) for s in per_class.values()) / len(per_class)


def sweep_tpr_at_fpr(scores, same, target):
    scores = list(scores)
    same = list(same)
    n_pos = sum(same)
    n_neg = len(same) - n_pos
    best = 0.0
    for t in sorted(set(scores)) + [math.inf]:
        tp = sum(1 for s, y in zip(scores, same) if s >= t and y)
        fp = sum(1 for s, y in zip(scores, same) if s >= t and not y)
        if fp / n_neg <= target + 1e-12:
            best = max(best, tp / n_pos)
    return best


def finite_difference(f, x, h=1e-6):
    """Central differences of scalar f with respect to every entry of array x (in place)."""
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        idx = it.multi_index
        old = x[idx]
        x[idx] = old + h
        fp = f()
        x[idx] = old - h
        fm = f()
        x[idx] = old
        g[idx] = (fp - fm) / (2 * h)
    return g


def relative_error(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    scale = max(np.linalg.norm(a), np.linalg.norm(b), 1e-8)
    return float(np.linalg.norm(a - b) / scale)
