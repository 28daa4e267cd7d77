"""Gradient-boosted decision trees, written from scratch.

Second-order (Newton) boosting with exact greedy split search, in the style of
XGBoost's ``exact`` tree method:

* split gain  ``GL^2/(HL+lam) + GR^2/(HR+lam) - G^2/(H+lam)``
* leaf weight ``-learning_rate * G / (H + lam)``
* candidate splits fall between consecutive distinct values present in the
  node; the stored threshold is the midpoint between the upper value and its
  predecessor in the whole training column; ties (within a relative 1e-9) go
  to the lowest feature index, then the lowest threshold
* missing values follow a learned default direction (whichever side gives the
  larger gain; right on ties)

Objectives: ``binary`` (logistic) and ``softmax`` (``n_classes`` trees per
round).
"""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field, replace

import numba
import numpy as np

logger = logging.getLogger(__name__)

# minimum loss reduction for a split; guards against float noise on flat gradients
MIN_SPLIT_GAIN = 1e-6
# gains this close (relative) count as ties, so rounding noise cannot break them
GAIN_TIE_RTOL = 1e-9


@dataclass(frozen=True)
class HyperParams:
    max_depth: int = 4
    learning_rate: float = 0.2
    subsample: float = 0.9
    l2_lambda: float = 0.0
    n_rounds: int = 100
    min_child_hessian: float = 1.0
    seed: int = 0
    early_stopping_rounds: int | None = 10

    def __post_init__(self):
        if not 0 < self.subsample <= 1:
            raise ValueError(f"subsample must be in (0, 1], got {self.subsample}")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.l2_lambda < 0 or self.min_child_hessian < 0:
            raise ValueError("l2_lambda and min_child_hessian must be >= 0")
        if self.max_depth < 0 or self.n_rounds < 0:
            raise ValueError("max_depth and n_rounds must be >= 0")

    @classmethod
    def from_dict(cls, d: dict) -> "HyperParams":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown hyperparameters: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        return asdict(self)


# Settings reported for the two model families.
STRATUM_PARAMS = HyperParams(max_depth=4, learning_rate=0.2, subsample=0.9, l2_lambda=0.0)
STRATA_CLASSIFIER_PARAMS = HyperParams(max_depth=4, learning_rate=0.2, subsample=0.9, l2_lambda=0.02)


@dataclass
class Tree:
    """Flat tree in breadth-first order; ``feature == -1`` marks a leaf."""

    feature: np.ndarray
    threshold: np.ndarray
    default_left: np.ndarray
    left: np.ndarray
    right: np.ndarray
    value: np.ndarray
    gain: np.ndarray
    cover: np.ndarray

    @property
    def n_nodes(self) -> int:
        return self.feature.size

    def apply(self, X: np.ndarray) -> np.ndarray:
        """Leaf index reached by every row of ``X``."""
        node = np.zeros(X.shape[0], dtype=np.int64)
        rows = np.arange(X.shape[0])
        while True:
            f = self.feature[node]
            active = f >= 0
            if not active.any():
                return node
            r, n = rows[active], node[active]
            x = X[r, f[active]]
            go_left = np.where(np.isnan(x), self.default_left[n], x < self.threshold[n])
            node[active] = np.where(go_left, self.left[n], self.right[n])

    def predict(self, X: np.ndarray) -> np.ndarray:
        return self.value[self.apply(X)]

    def to_dict(self, i: int = 0) -> dict:
        if self.feature[i] < 0:
            return {"leaf": float(self.value[i]), "cover": float(self.cover[i])}
        return {
            "feature": int(self.feature[i]),
            "threshold": float(self.threshold[i]),
            "default_left": bool(self.default_left[i]),
            "gain": float(self.gain[i]),
            "cover": float(self.cover[i]),
            "value": float(self.value[i]),
            "left": self.to_dict(int(self.left[i])),
            "right": self.to_dict(int(self.right[i])),
        }

    @classmethod
    def from_dict(cls, root: dict) -> "Tree":
        nodes, queue = [], [root]
        # breadth-first numbering matches the order nodes are grown in
        while queue:
            nodes.append(queue.pop(0))
            if "leaf" not in nodes[-1]:
                queue.extend([nodes[-1]["left"], nodes[-1]["right"]])
        n = len(nodes)
        t = cls(np.full(n, -1, np.int32), np.zeros(n), np.zeros(n, bool), np.full(n, -1, np.int32),
                np.full(n, -1, np.int32), np.zeros(n), np.zeros(n), np.zeros(n))
        child = 1
        for i, d in enumerate(nodes):
            t.cover[i] = d["cover"]
            if "leaf" in d:
                t.value[i] = d["leaf"]
                continue
            t.feature[i], t.threshold[i], t.default_left[i] = d["feature"], d["threshold"], d["default_left"]
            t.gain[i], t.value[i] = d["gain"], d["value"]
            t.left[i], t.right[i] = child, child + 1
            child += 2
        return t


@numba.njit(cache=True)
def _grow_tree(codes, uniq, uoff, g, h, rows, max_depth, lam, min_child_h, lr, min_gain):
    # codes is feature-major: codes[j, r]
    n_feat = codes.shape[0]
    max_nodes = 2 ** (max_depth + 1) - 1
    feature = np.full(max_nodes, -1, np.int32)
    threshold = np.zeros(max_nodes)
    default_left = np.zeros(max_nodes, np.bool_)
    left = np.full(max_nodes, -1, np.int32)
    right = np.full(max_nodes, -1, np.int32)
    value = np.zeros(max_nodes)
    gain = np.zeros(max_nodes)
    cover = np.zeros(max_nodes)
    start = np.zeros(max_nodes, np.int64)
    end = np.zeros(max_nodes, np.int64)
    depth = np.zeros(max_nodes, np.int64)

    n_bins = uoff[n_feat]
    hg = np.zeros(n_bins)
    hh = np.zeros(n_bins)
    hc = np.zeros(n_bins, np.int64)
    buf = rows.copy()
    tmp = np.empty_like(buf)
    gs = np.empty(buf.size)
    hs = np.empty(buf.size)

    start[0] = 0
    end[0] = buf.size
    n_nodes = 1
    i = 0
    while i < n_nodes:
        s = start[i]
        e = end[i]
        G = 0.0
        H = 0.0
        for k in range(s, e):
            gs[k] = g[buf[k]]
            hs[k] = h[buf[k]]
            G += gs[k]
            H += hs[k]
        cover[i] = H
        if H + lam > 0:
            value[i] = -lr * G / (H + lam)
        parent_score = G * G / (H + lam) if H + lam > 0 else 0.0

        best_gain = min_gain
        best_f = -1
        best_hi = -1
        best_dl = False
        if depth[i] < max_depth and e - s >= 2:
            for j in range(n_feat):
                b0 = uoff[j]
                b1 = uoff[j + 1]
                if b1 - b0 < 2:
                    continue
                for b in range(b0, b1):
                    hg[b] = 0.0
                    hh[b] = 0.0
                    hc[b] = 0
                Gm = 0.0
                Hm = 0.0
                cj = codes[j]
                for k in range(s, e):
                    c = cj[buf[k]]
                    if c < 0:
                        Gm += gs[k]
                        Hm += hs[k]
                    else:
                        hg[b0 + c] += gs[k]
                        hh[b0 + c] += hs[k]
                        hc[b0 + c] += 1
                GL = 0.0
                HL = 0.0
                prev = -1
                for b in range(b0, b1):
                    if hc[b] == 0:
                        continue
                    if prev >= 0:
                        GR = G - Gm - GL
                        HR = H - Hm - HL
                        # missing to the right
                        gr = -1.0
                        hl_, hr_ = HL, HR + Hm
                        if hl_ >= min_child_h and hr_ >= min_child_h and hl_ + lam > 0 and hr_ + lam > 0:
                            gr = GL * GL / (hl_ + lam) + (GR + Gm) ** 2 / (hr_ + lam) - parent_score
                        # missing to the left
                        gl = -1.0
                        hl_, hr_ = HL + Hm, HR
                        if hl_ >= min_child_h and hr_ >= min_child_h and hl_ + lam > 0 and hr_ + lam > 0:
                            gl = (GL + Gm) ** 2 / (hl_ + lam) + GR * GR / (hr_ + lam) - parent_score
                        cand = gr
                        dl = False
                        if gl > gr + GAIN_TIE_RTOL * abs(gr):
                            cand = gl
                            dl = True
                        if cand > best_gain and (best_f < 0 or cand - best_gain > GAIN_TIE_RTOL * best_gain):
                            best_gain = cand
                            best_f = j
                            best_hi = b - b0
                            best_dl = dl
                    GL += hg[b]
                    HL += hh[b]
                    prev = b

        if best_f >= 0:
            b0 = uoff[best_f]
            # midpoint below ``hi`` on the whole column's grid, so every training
            # value routes the same way whatever monotone scale the column has
            lo = uniq[b0 + best_hi - 1]
            hi = uniq[b0 + best_hi]
            thr = 0.5 * (lo + hi)
            if not (lo < thr <= hi):
                thr = hi
            feature[i] = best_f
            threshold[i] = thr
            default_left[i] = best_dl
            gain[i] = best_gain
            # stable partition of this node's rows
            nl = 0
            for k in range(s, e):
                r = buf[k]
                c = codes[best_f, r]
                if (c < 0 and best_dl) or (c >= 0 and c < best_hi):
                    tmp[nl] = r
                    nl += 1
            m = nl
            for k in range(s, e):
                r = buf[k]
                c = codes[best_f, r]
                if not ((c < 0 and best_dl) or (c >= 0 and c < best_hi)):
                    tmp[m] = r
                    m += 1
            for k in range(e - s):
                buf[s + k] = tmp[k]
            for side in range(2):
                ch = n_nodes
                n_nodes += 1
                depth[ch] = depth[i] + 1
                if side == 0:
                    left[i] = ch
                    start[ch] = s
                    end[ch] = s + nl
                else:
                    right[i] = ch
                    start[ch] = s + nl
                    end[ch] = e
        i += 1

    return (feature[:n_nodes], threshold[:n_nodes], default_left[:n_nodes], left[:n_nodes],
            right[:n_nodes], value[:n_nodes], gain[:n_nodes], cover[:n_nodes])


def _bin_features(X: np.ndarray):
    """Integer codes of each value among its column's sorted distinct values."""
    n, f = X.shape
    codes = np.full((f, n), -1, dtype=np.int32)
    uniq, uoff = [], [0]
    for j in range(f):
        col = X[:, j]
        present = ~np.isnan(col)
        u = np.unique(col[present])
        codes[j, present] = np.searchsorted(u, col[present])
        uniq.append(u)
        uoff.append(uoff[-1] + u.size)
    flat = np.concatenate(uniq) if uniq else np.empty(0)
    return codes, flat.astype(np.float64), np.asarray(uoff, dtype=np.int64)


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------


def sigmoid(z):
    return 1.0 / (1.0 + np.exp(-z))


def softmax(z):
    z = z - z.max(axis=1, keepdims=True)
    ez = np.exp(z)
    return ez / ez.sum(axis=1, keepdims=True)


def logloss_grad_hess(objective: str, raw_scores, labels):
    """Gradient and hessian of cross-entropy w.r.t. the raw scores.

    binary:  g = p - y, h = p(1 - p)
    softmax: g_c = p_c - [y == c], h_c = p_c(1 - p_c), arrays of shape (n, K)
    """
    raw_scores = np.asarray(raw_scores, dtype=float)
    labels = np.asarray(labels)
    if objective == "binary":
        p = sigmoid(raw_scores)
        return p - labels, p * (1.0 - p)
    if objective == "softmax":
        p = softmax(raw_scores)
        onehot = np.zeros_like(p)
        onehot[np.arange(labels.size), labels.astype(np.int64)] = 1.0
        return p - onehot, p * (1.0 - p)
    raise ValueError(f"unknown objective {objective!r}")


def cross_entropy(objective: str, raw_scores, labels) -> np.ndarray:
    """Per-row cross-entropy from raw scores."""
    raw_scores = np.asarray(raw_scores, dtype=float)
    labels = np.asarray(labels)
    if objective == "binary":
        # log(1 + e^z) - y z, computed stably
        return np.logaddexp(0.0, raw_scores) - labels * raw_scores
    z = raw_scores - raw_scores.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1))
    return lse - z[np.arange(labels.size), labels.astype(np.int64)]


# ---------------------------------------------------------------------------
# model
# ---------------------------------------------------------------------------


@dataclass
class BoostedModel:
    objective: str
    n_classes: int
    n_features: int
    base_score: np.ndarray
    trees: list[Tree]
    params: HyperParams
    best_round: int | None = None
    history: list[dict] = field(default_factory=list, repr=False, compare=False)

    @property
    def n_rounds(self) -> int:
        return len(self.trees) // self._per_round

    @property
    def _per_round(self) -> int:
        return self.n_classes if self.objective == "softmax" else 1

    def _check(self, X) -> np.ndarray:
        X = np.asarray(X, dtype=float)
        if X.ndim == 1:
            X = X[None, :]
        if X.shape[1] != self.n_features:
            raise ValueError(f"model expects {self.n_features} features, got {X.shape[1]}")
        return X

    def predict_raw(self, X) -> np.ndarray:
        X = self._check(X)
        if self.objective == "binary":
            out = np.full(X.shape[0], self.base_score[0])
            for t in self.trees:
                out += t.predict(X)
            return out
        out = np.tile(self.base_score, (X.shape[0], 1))
        for i, t in enumerate(self.trees):
            out[:, i % self.n_classes] += t.predict(X)
        return out

    def predict_proba(self, X) -> np.ndarray:
        raw = self.predict_raw(X)
        return sigmoid(raw) if self.objective == "binary" else softmax(raw)

    def to_dict(self) -> dict:
        return {
            "objective": self.objective,
            "n_classes": self.n_classes,
            "n_features": self.n_features,
            "base_score": [float(b) for b in self.base_score],
            "params": self.params.to_dict(),
            "best_round": self.best_round,
            "trees": [t.to_dict() for t in self.trees],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "BoostedModel":
        return cls(d["objective"], d["n_classes"], d["n_features"], np.asarray(d["base_score"], dtype=float),
                   [Tree.from_dict(t) for t in d["trees"]], HyperParams.from_dict(d["params"]), d["best_round"])

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), separators=(",", ":"))

    @classmethod
    def from_json(cls, text: str) -> "BoostedModel":
        return cls.from_dict(json.loads(text))


def predict_proba(model: BoostedModel, X) -> np.ndarray:
    return model.predict_proba(X)


def _prior_scores(objective, y, n_classes):
    if objective == "binary":
        p = np.clip(y.mean(), 1e-6, 1 - 1e-6)
        return np.array([np.log(p / (1 - p))])
    freq = np.bincount(y, minlength=n_classes) / y.size
    return np.log(np.clip(freq, 1e-6, None))


def train(X, y, params: HyperParams = HyperParams(), eval_set=None, objective: str = "binary",
          n_classes: int | None = None) -> BoostedModel:
    """Fit a boosted ensemble.

    ``eval_set=(X_val, y_val)`` enables early stopping on holdout log-loss after
    ``params.early_stopping_rounds`` rounds without improvement; the model is
    truncated to the best round.
    """
    X = np.asarray(X, dtype=float)
    y = np.asarray(y).astype(np.int64)
    if X.ndim != 2 or X.shape[0] == 0:
        raise ValueError("training requires at least one row")
    if y.shape != (X.shape[0],):
        raise ValueError("labels must have one entry per row")
    if objective == "binary":
        n_classes = 2
        if set(np.unique(y)) - {0, 1}:
            raise ValueError("binary labels must be 0/1")
    elif objective == "softmax":
        n_classes = int(n_classes or y.max() + 1)
        if y.min() < 0 or y.max() >= n_classes:
            raise ValueError("class labels out of range")
    else:
        raise ValueError(f"unknown objective {objective!r}")
    if np.unique(y).size < 2:
        logger.info("training labels are constant; model reduces to its prior")

    n, _ = X.shape
    codes, uniq, uoff = _bin_features(X)
    base = _prior_scores(objective, y, n_classes)
    model = BoostedModel(objective, n_classes, X.shape[1], base, [], params)
    raw = model.predict_raw(X) if n else None
    rng = np.random.default_rng(params.seed)
    n_sub = max(1, int(round(params.subsample * n)))

    watch = eval_set is not None and len(eval_set[1]) > 0
    if watch:
        Xv = model._check(eval_set[0])
        yv = np.asarray(eval_set[1]).astype(np.int64)
        raw_v = model.predict_raw(Xv)
    patience = params.early_stopping_rounds
    best_loss, best_round = np.inf, -1

    for rnd in range(params.n_rounds):
        rows = np.arange(n) if params.subsample >= 1 else np.sort(rng.choice(n, n_sub, replace=False))
        g, h = logloss_grad_hess(objective, raw, y)
        if objective == "binary":
            g, h = g[:, None], h[:, None]
        new = []
        for c in range(g.shape[1]):
            arrays = _grow_tree(codes, uniq, uoff, np.ascontiguousarray(g[:, c]), np.ascontiguousarray(h[:, c]),
                                rows, params.max_depth, params.l2_lambda, params.min_child_hessian,
                                params.learning_rate, MIN_SPLIT_GAIN)
            tree = Tree(*[np.array(a) for a in arrays])
            new.append(tree)
            if objective == "binary":
                raw = raw + tree.predict(X)
            else:
                raw[:, c] += tree.predict(X)
        model.trees.extend(new)
        entry = {"round": rnd, "train_loss": float(cross_entropy(objective, raw, y).mean())}
        if watch:
            for c, tree in enumerate(new):
                if objective == "binary":
                    raw_v = raw_v + tree.predict(Xv)
                else:
                    raw_v[:, c] += tree.predict(Xv)
            vloss = float(cross_entropy(objective, raw_v, yv).mean())
            entry["valid_loss"] = vloss
            if vloss < best_loss - 1e-12:
                best_loss, best_round = vloss, rnd
        model.history.append(entry)
        if watch and patience is not None and rnd - best_round >= patience:
            break

    if watch and best_round >= 0:
        model.trees = model.trees[: (best_round + 1) * model._per_round]
        model.best_round = best_round
    return model


def feature_importance(model: BoostedModel, names=None) -> dict:
    """Gain share and split count per feature used in the ensemble.

    Shares sum to 1 over the features that appear in at least one split.
    """
    gain = np.zeros(model.n_features)
    count = np.zeros(model.n_features, dtype=np.int64)
    for t in model.trees:
        split = t.feature >= 0
        np.add.at(gain, t.feature[split], t.gain[split])
        np.add.at(count, t.feature[split], 1)
    total = gain.sum()
    out = {}
    for j in np.flatnonzero(count):
        key = names[j] if names is not None else int(j)
        out[key] = (float(gain[j] / total) if total > 0 else 0.0, int(count[j]))
    return out


def with_seed(params: HyperParams, seed: int) -> HyperParams:
    return replace(params, seed=int(seed))
