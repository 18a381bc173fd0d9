"""Slow, literal reference implementations used only by the tests."""
import itertools

import numpy as np


def objects(labels):
    """{id: set of (r, c)} built by walking every pixel."""
    out = {}
    h, w = labels.shape
    for r in range(h):
        for c in range(w):
            v = int(labels[r, c])
            if v > 0:
                out.setdefault(v, set()).add((r, c))
    return out


def dice_brute(pred, gt):
    P, G = objects(pred), objects(gt)
    if not P and not G:
        return 1.0

    def half(A, B):
        total = sum(len(a) for a in A.values())
        acc = 0.0
        for _, a in sorted(A.items()):
            best, best_ov = None, 0
            for j, b in sorted(B.items()):
                ov = len(a & b)
                if ov > best_ov:
                    best, best_ov = j, ov
            if best is not None:
                acc += len(a) / total * 2 * best_ov / (len(a) + len(B[best]))
        return acc

    return 0.5 * (half(G, P) + half(P, G))


def aji_brute(pred, gt):
    P, G = objects(pred), objects(gt)
    used = set()
    num = den = 0
    for i in sorted(G):
        g = G[i]
        cands = [(len(g & P[j]), len(P[j]), -j) for j in P if j not in used and g & P[j]]
        if not cands:
            den += len(g)
            continue
        _, _, negj = max(cands)
        j = -negj
        used.add(j)
        num += len(g & P[j])
        den += len(g | P[j])
    den += sum(len(P[j]) for j in P if j not in used)
    return num / den


def local_maxima_brute(prob, radius, min_prob):
    h, w = prob.shape
    out = []
    for r in range(h):
        for c in range(w):
            v = prob[r, c]
            if v < min_prob:
                continue
            ok = True
            for rr in range(max(0, r - radius), min(h, r + radius + 1)):
                for cc in range(max(0, c - radius), min(w, c + radius + 1)):
                    if (rr, cc) != (r, c) and prob[rr, cc] >= v:
                        ok = False
            if ok:
                out.append((r, c))
    return np.array(out, dtype=np.int64).reshape(-1, 2)


def nearest_seed_brute(points, shape):
    h, w = shape
    out = np.empty((h, w), dtype=np.int64)
    for r in range(h):
        for c in range(w):
            d = [(r - pr) ** 2 + (c - pc) ** 2 for pr, pc in points]
            m = min(d)
            out[r, c] = -1 if d.count(m) > 1 else d.index(m)
    return out


def max_matching_brute(pred, gt, radius):
    """Largest one-to-one matching within ``radius`` by exhaustive search."""
    pred, gt = list(map(tuple, pred)), list(map(tuple, gt))
    ok = [[np.hypot(p[0] - g[0], p[1] - g[1]) <= radius for g in gt] for p in pred]
    best = 0
    k = min(len(pred), len(gt))
    for perm in itertools.permutations(range(len(gt)), k) if len(pred) <= len(gt) else \
            itertools.permutations(range(len(pred)), k):
        if len(pred) <= len(gt):
            n = sum(ok[i][perm[i]] for i in range(k))
        else:
            n = sum(ok[perm[i]][i] for i in range(k))
        best = max(best, n)
    return best


def random_instance_map(rng, shape=(32, 32), max_objects=6):
    """Random rectangles and disks, later ones painted over earlier ones."""
    h, w = shape
    out = np.zeros(shape, dtype=np.int64)
    n = rng.integers(0, max_objects + 1)
    rr, cc = np.mgrid[0:h, 0:w]
    for i in range(1, n + 1):
        r, c = rng.integers(0, h), rng.integers(0, w)
        if rng.random() < 0.5:
            rad = rng.integers(2, 8)
            out[(rr - r) ** 2 + (cc - c) ** 2 <= rad ** 2] = i
        else:
            out[r:r + rng.integers(2, 10), c:c + rng.integers(2, 10)] = i
    return out
