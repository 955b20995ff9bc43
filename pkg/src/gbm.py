"""
Gradient-boosted decision trees for binary risk scoring.

Second-order (Newton) boosting on the logistic loss. Each round grows one
depth-limited regression tree on the per-sample gradients and hessians,
scanning every feature for the best midpoint split with the gain

    G_L^2 / (H_L + eps) + G_R^2 / (H_R + eps) - G^2 / (H + eps)

and setting leaves to the L1 soft-thresholded Newton step
-sign(G) * max(|G| - l1_reg, 0) / (H + eps).

Serialized models are JSON documents:

    {
      "format": "scrisk-gbm", "version": 1,
      "base_score": <float log-odds>, "learning_rate": <float>,
      "feature_names": [<str>, ...],
      "trees": [<node>, ...]
    }

where a node is either {"leaf": <float>, "cover": <float>} or
{"feature": <int>, "threshold": <float>, "cover": <float>,
"left": <node>, "right": <node>}. A sample goes left when
x[feature] <= threshold. Floats are written with repr precision, so a
save/load round trip is bit-exact.
"""

import logging
import math
from dataclasses import asdict, dataclass
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy.special import expit

from errors import DataValidationError
from utils import PathLike, dumps_json, load_json, atomic_write_text

logger = logging.getLogger(__name__)

MODULE = "gbm"
EPSILON = 1e-16
MODEL_FORMAT = "scrisk-gbm"
MODEL_VERSION = 1


@dataclass(frozen=True)
class Hyperparams:
    learning_rate: float = 0.1
    n_estimators: int = 100
    max_depth: int = 3
    l1_reg: float = 0.0
    min_samples_leaf: int = 20

    def __post_init__(self):
        if not 0.0 < self.learning_rate <= 1.0:
            raise DataValidationError(f"learning_rate must lie in (0, 1], got {self.learning_rate}", MODULE)
        if int(self.n_estimators) != self.n_estimators or self.n_estimators < 0:
            raise DataValidationError(f"n_estimators must be a non-negative integer, got {self.n_estimators}", MODULE)
        if int(self.max_depth) != self.max_depth or self.max_depth < 1:
            raise DataValidationError(f"max_depth must be a positive integer, got {self.max_depth}", MODULE)
        if not self.l1_reg >= 0.0:
            raise DataValidationError(f"l1_reg must be non-negative, got {self.l1_reg}", MODULE)
        if int(self.min_samples_leaf) != self.min_samples_leaf or self.min_samples_leaf < 1:
            raise DataValidationError(f"min_samples_leaf must be a positive integer, got {self.min_samples_leaf}", MODULE)

    def as_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class Leaf:
    value: float
    cover: Optional[float] = None


@dataclass(frozen=True)
class Split:
    feature: int
    threshold: float
    left: "TreeNode"
    right: "TreeNode"
    cover: Optional[float] = None


TreeNode = Union[Leaf, Split]


def tree_value(node: TreeNode, x: Sequence[float]) -> float:
    while isinstance(node, Split):
        node = node.left if x[node.feature] <= node.threshold else node.right
    return node.value


def tree_values(node: TreeNode, X: np.ndarray) -> np.ndarray:
    """Leaf value reached by every row of X"""
    out = np.empty(X.shape[0], dtype=float)
    stack = [(node, np.arange(X.shape[0]))]
    while stack:
        current, rows = stack.pop()
        if isinstance(current, Leaf):
            out[rows] = current.value
            continue
        goes_left = X[rows, current.feature] <= current.threshold
        stack.append((current.left, rows[goes_left]))
        stack.append((current.right, rows[~goes_left]))
    return out


def tree_depth(node: TreeNode) -> int:
    if isinstance(node, Leaf):
        return 0
    return 1 + max(tree_depth(node.left), tree_depth(node.right))


@dataclass(frozen=True)
class GbmModel:
    """Boosted ensemble: margin(x) = base_score + learning_rate * sum_k tree_k(x)"""

    base_score: float
    learning_rate: float
    feature_names: Tuple[str, ...]
    trees: Tuple[TreeNode, ...] = ()

    @property
    def n_features(self) -> int:
        return len(self.feature_names)

    def _check_row(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        if x.ndim != 1 or x.shape[0] != self.n_features:
            raise DataValidationError(
                f"expected {self.n_features} features, got shape {x.shape}", MODULE)
        return x

    def predict_margin(self, x) -> float:
        x = self._check_row(x)
        total = 0.0
        for tree in self.trees:
            total += tree_value(tree, x)
        return self.base_score + self.learning_rate * total

    def predict_proba(self, x) -> float:
        return float(expit(self.predict_margin(x)))

    def margins(self, X) -> np.ndarray:
        """Vectorized predict_margin over the rows of X (same summation order)"""
        X = np.asarray(X, dtype=float)
        if X.ndim != 2 or X.shape[1] != self.n_features:
            raise DataValidationError(f"expected a matrix with {self.n_features} columns, got {X.shape}", MODULE)
        total = np.zeros(X.shape[0], dtype=float)
        for tree in self.trees:
            total += tree_values(tree, X)
        return self.base_score + self.learning_rate * total

    def probabilities(self, X) -> np.ndarray:
        return expit(self.margins(X))

    def max_depth(self) -> int:
        return max((tree_depth(t) for t in self.trees), default=0)

    def to_dict(self) -> dict:
        return {
            "format": MODEL_FORMAT,
            "version": MODEL_VERSION,
            "base_score": self.base_score,
            "learning_rate": self.learning_rate,
            "feature_names": list(self.feature_names),
            "trees": [_node_to_dict(t) for t in self.trees],
        }

    @classmethod
    def from_dict(cls, data: dict) -> "GbmModel":
        if data.get("format") != MODEL_FORMAT:
            raise DataValidationError(f"not a {MODEL_FORMAT} model document", MODULE)
        if data.get("version") != MODEL_VERSION:
            raise DataValidationError(f"unsupported model version {data.get('version')}", MODULE)
        return cls(
            base_score=float(data["base_score"]),
            learning_rate=float(data["learning_rate"]),
            feature_names=tuple(data["feature_names"]),
            trees=tuple(_node_from_dict(t) for t in data["trees"]),
        )

    def to_json(self) -> str:
        return dumps_json(self.to_dict())


def _node_to_dict(node: TreeNode) -> dict:
    if isinstance(node, Leaf):
        return {"leaf": node.value, "cover": node.cover}
    return {
        "feature": node.feature,
        "threshold": node.threshold,
        "cover": node.cover,
        "left": _node_to_dict(node.left),
        "right": _node_to_dict(node.right),
    }


def _node_from_dict(data: dict) -> TreeNode:
    cover = data.get("cover")
    cover = None if cover is None else float(cover)
    if "leaf" in data:
        return Leaf(float(data["leaf"]), cover)
    return Split(int(data["feature"]), float(data["threshold"]),
                 _node_from_dict(data["left"]), _node_from_dict(data["right"]), cover)


def save_model(model: GbmModel, path: PathLike):
    return atomic_write_text(path, model.to_json())


def load_model(path: PathLike) -> GbmModel:
    return GbmModel.from_dict(load_json(path))


def predict_margin(model: GbmModel, x) -> float:
    return model.predict_margin(x)


def predict_proba(model: GbmModel, x) -> float:
    return model.predict_proba(x)


def leaf_weight(G: float, H: float, l1_reg: float) -> float:
    """L1 soft-thresholded Newton step"""
    shrunk = max(abs(G) - l1_reg, 0.0)
    if shrunk == 0.0:
        return 0.0
    return -math.copysign(shrunk, G) / (H + EPSILON)


class _TreeGrower:
    """Exact greedy growth of one regression tree over presorted feature columns"""

    def __init__(self, X: np.ndarray, order: np.ndarray, hp: Hyperparams):
        self.X = X
        self.order = order
        self.hp = hp

    def grow(self, g: np.ndarray, h: np.ndarray) -> TreeNode:
        self.g, self.h = g, h
        return self._node(np.ones(self.X.shape[0], dtype=bool), depth=0)

    def _best_split(self, in_node: np.ndarray, n_node: int) -> Tuple[float, int, float]:
        msl = self.hp.min_samples_leaf
        best_gain, best_feature, best_threshold = 0.0, -1, math.nan
        for j in range(self.X.shape[1]):
            column_order = self.order[:, j]
            rows = column_order[in_node[column_order]]
            xs = self.X[rows, j]
            cg = np.cumsum(self.g[rows])
            ch = np.cumsum(self.h[rows])
            G, H = cg[-1], ch[-1]
            # split after position i keeps i + 1 samples on the left
            positions = np.arange(msl - 1, n_node - msl)
            if positions.size == 0:
                break
            positions = positions[xs[positions] != xs[positions + 1]]
            if positions.size == 0:
                continue
            GL, HL = cg[positions], ch[positions]
            GR, HR = G - GL, H - HL
            gains = GL * GL / (HL + EPSILON) + GR * GR / (HR + EPSILON) - G * G / (H + EPSILON)
            k = int(np.argmax(gains))
            if gains[k] > best_gain:
                i = positions[k]
                threshold = 0.5 * (xs[i] + xs[i + 1])
                if not xs[i] <= threshold < xs[i + 1]:
                    threshold = xs[i]
                best_gain, best_feature, best_threshold = float(gains[k]), j, float(threshold)
        return best_gain, best_feature, best_threshold

    def _node(self, in_node: np.ndarray, depth: int) -> TreeNode:
        n_node = int(in_node.sum())
        G = float(self.g[in_node].sum())
        H = float(self.h[in_node].sum())
        leaf = Leaf(leaf_weight(G, H, self.hp.l1_reg), float(n_node))
        if depth >= self.hp.max_depth or n_node < 2 * self.hp.min_samples_leaf:
            return leaf
        gain, feature, threshold = self._best_split(in_node, n_node)
        if feature < 0 or gain <= 0.0:
            return leaf
        logger.debug(f"depth {depth}: split feature {feature} at {threshold:.6g}, gain {gain:.6g}, n={n_node}")
        goes_left = self.X[:, feature] <= threshold
        return Split(
            feature=feature,
            threshold=threshold,
            left=self._node(in_node & goes_left, depth + 1),
            right=self._node(in_node & ~goes_left, depth + 1),
            cover=float(n_node),
        )


def fit(X, y, hp: Hyperparams, seed: int = 0, feature_names: Optional[Sequence[str]] = None) -> GbmModel:
    """Fit a boosted ensemble to binary labels.

    The algorithm has no random component; seed is accepted so callers
    can pass a per-job seed uniformly.
    """
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    if X.ndim != 2 or X.shape[0] == 0:
        raise DataValidationError(f"X must be a non-empty 2-D matrix, got shape {X.shape}", MODULE)
    if y.shape != (X.shape[0],):
        raise DataValidationError(f"y has shape {y.shape}, expected ({X.shape[0]},)", MODULE)
    if X.shape[0] < 2:
        raise DataValidationError("need at least two samples", MODULE)
    if not np.all(np.isfinite(X)):
        raise DataValidationError("feature matrix contains non-finite values", MODULE)
    if not np.all((y == 0) | (y == 1)):
        raise DataValidationError("labels must be 0 or 1", MODULE)
    prevalence = float(y.mean())
    if prevalence in (0.0, 1.0):
        raise DataValidationError("labels contain a single class", MODULE)
    if feature_names is None:
        feature_names = [f"f{j}" for j in range(X.shape[1])]
    if len(feature_names) != X.shape[1]:
        raise DataValidationError("feature_names length does not match X", MODULE)

    base_score = math.log(prevalence / (1.0 - prevalence))
    order = np.argsort(X, axis=0, kind="stable")
    grower = _TreeGrower(X, order, hp)
    tree_sum = np.zeros(X.shape[0], dtype=float)
    trees: List[TreeNode] = []
    for round_index in range(hp.n_estimators):
        p = expit(base_score + hp.learning_rate * tree_sum)
        g = p - y
        h = p * (1.0 - p)
        tree = grower.grow(g, h)
        trees.append(tree)
        tree_sum += tree_values(tree, X)
    logger.debug(f"Fitted {len(trees)} trees on {X.shape[0]}x{X.shape[1]} (seed {seed}, {hp})")
    return GbmModel(base_score=base_score, learning_rate=hp.learning_rate,
                    feature_names=tuple(feature_names), trees=tuple(trees))


def logloss(model: GbmModel, X, y) -> float:
    y = np.asarray(y, dtype=float)
    p = np.clip(model.probabilities(X), 1e-15, 1 - 1e-15)
    return float(-np.mean(y * np.log(p) + (1 - y) * np.log(1 - p)))
