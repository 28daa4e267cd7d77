"""Independent reference implementations used only by the tests.

None of these share code with the package: they are slow, direct
transcriptions of the definitions.
"""

import itertools
import math

import mpmath
import numpy as np


def pair_count_auroc(scores, labels):
    pos = [s for s, y in zip(scores, labels) if y]
    neg = [s for s, y in zip(scores, labels) if not y]
    wins = 0.0
    for p in pos:
        for n in neg:
            if p > n:
                wins += 1.0
            elif p == n:
                wins += 0.5
    return wins / (len(pos) * len(neg))


def brute_force_split(X, g, h, lam, min_child_h, rtol=1e-9, grid=None):
    """Best (gain, feature, threshold, default_left) by scanning every candidate.

    Candidates are midpoints of consecutive distinct non-missing values; the
    missing block is tried on both sides (right first, left wins only when
    better by more than ``rtol``).  Gains within ``rtol`` of each other are
    ties, kept by the lowest feature, then lowest threshold.  With ``grid``
    (sorted distinct training values per feature) the reported threshold sits
    between the upper value and its predecessor on that grid.
    """
    G, H = g.sum(), h.sum()
    parent = G * G / (H + lam)
    best = (1e-6, None, None, None)
    for j in range(X.shape[1]):
        col = X[:, j]
        miss = np.isnan(col)
        vals = np.unique(col[~miss])
        for lo, hi in zip(vals[:-1], vals[1:]):
            if grid is not None:
                lo = grid[j][np.searchsorted(grid[j], hi) - 1]
            thr = 0.5 * (lo + hi)
            left_nm = (~miss) & (col <= lo)
            options = []
            for dl in (False, True):
                left = left_nm | (miss & dl)
                right = ~left
                HL, HR = h[left].sum(), h[right].sum()
                if HL < min_child_h or HR < min_child_h:
                    options.append(-1.0)
                    continue
                GL, GR = g[left].sum(), g[right].sum()
                options.append(GL * GL / (HL + lam) + GR * GR / (HR + lam) - parent)
            better_left = options[1] > options[0] + rtol * abs(options[0])
            gain, dl = (options[1], True) if better_left else (options[0], False)
            if gain > best[0] and (best[1] is None or gain - best[0] > rtol * best[0]):
                best = (gain, j, thr, dl)
    return best


def route_left(X, feature, threshold, default_left):
    x = X[:, feature]
    return np.where(np.isnan(x), default_left, x < threshold)


def newton_intercept_path(y_const, n_rows, base, lr, lam, rounds):
    """Raw score after ``rounds`` Newton steps on an intercept-only logistic model."""
    s = base
    for _ in range(rounds):
        p = 1.0 / (1.0 + math.exp(-s))
        G = n_rows * (p - y_const)
        H = n_rows * p * (1 - p)
        s += -lr * G / (H + lam)
    return s


def mp_binary_loss(z, y):
    p = 1 / (1 + mpmath.e ** (-z))
    return -(y * mpmath.log(p) + (1 - y) * mpmath.log(1 - p))


def mp_softmax_loss(zs, y):
    return -(zs[y] - mpmath.log(sum(mpmath.e ** z for z in zs)))


def numeric_grad_hess_binary(z, y):
    mpmath.mp.dps = 40
    f = lambda t: mp_binary_loss(t, y)
    return float(mpmath.diff(f, mpmath.mpf(z), 1)), float(mpmath.diff(f, mpmath.mpf(z), 2))


def numeric_grad_hess_softmax(zs, y):
    mpmath.mp.dps = 40
    zs = [mpmath.mpf(z) for z in zs]
    g, h = [], []
    for c in range(len(zs)):
        def f(t, c=c):
            v = list(zs)
            v[c] = t
            return mp_softmax_loss(v, y)
        g.append(float(mpmath.diff(f, zs[c], 1)))
        h.append(float(mpmath.diff(f, zs[c], 2)))
    return np.array(g), np.array(h)


def depth2_tree_separates(X, y):
    """Exhaustively search depth-2 axis-aligned trees for a perfect separation."""
    cands = []
    for j in range(X.shape[1]):
        vals = np.unique(X[:, j])
        cands += [(j, 0.5 * (a + b)) for a, b in zip(vals[:-1], vals[1:])]
    for root, l, r in itertools.product(cands, repeat=3):
        left = X[:, root[0]] < root[1]
        ok = True
        for mask, (j, t) in ((left, l), (~left, r)):
            for side in (X[:, j] < t, X[:, j] >= t):
                leaf = mask & side
                if leaf.any() and np.unique(y[leaf]).size > 1:
                    ok = False
        if ok:
            return True
    return False


def ols_slope(x, y):
    A = np.vstack([x, np.ones_like(x)]).T
    return float(np.linalg.lstsq(A, y, rcond=None)[0][0])
