"""The tree booster on problems small enough to check by eye."""

import numpy as np

from stratrisk.boosting import HyperParams, feature_importance, train

rng = np.random.default_rng(0)

# one informative feature with a clean threshold at 0.3
x = rng.uniform(-1, 1, 200)
X = np.column_stack([x, rng.normal(size=200)])
y = (x > 0.3).astype(int)
model = train(X, y, HyperParams(max_depth=1, n_rounds=1, subsample=1.0, early_stopping_rounds=None))
root = model.trees[0]
print("root split: feature", root.feature[0], "threshold", round(float(root.threshold[0]), 3))

# missing values get a learned default direction
X[:40, 0] = np.nan
y[:40] = 1
model = train(X, y, HyperParams(max_depth=1, n_rounds=1, subsample=1.0, early_stopping_rounds=None))
print("missing rows go", "left" if model.trees[0].default_left[0] else "right")

# XOR needs two levels.  The perfectly balanced four-point version has zero
# gain at the root, so a greedy learner stays put; tilt it by one duplicate.
X = np.array([[0, 0], [0, 1], [1, 0], [1, 1], [1, 1]], dtype=float)
y = np.array([0, 1, 1, 0, 0])
params = HyperParams(max_depth=2, n_rounds=200, learning_rate=0.3, subsample=1.0, min_child_hessian=0.0,
                     early_stopping_rounds=None)
model = train(X, y, params)
print("\nweighted XOR probabilities:", np.round(model.predict_proba(X[:4]), 3))
print("gain importance:", feature_importance(model, ["a", "b"]))

# softmax over five classes always lands on the simplex
X = rng.normal(size=(300, 3))
labels = np.digitize(X[:, 0], [-1, -0.3, 0.3, 1])
model = train(X, labels, HyperParams(n_rounds=30), objective="softmax", n_classes=5)
P = model.predict_proba(X[:4])
print("\nclass probabilities\n", np.round(P, 3), "\nrow sums", P.sum(axis=1))

# loss history with full-batch rounds only goes down
hist = train(X, (X[:, 1] > 0).astype(int), HyperParams(subsample=1.0, n_rounds=20, early_stopping_rounds=None)).history
print("\ntrain loss:", " ".join(f"{e['train_loss']:.3f}" for e in hist[::4]))
