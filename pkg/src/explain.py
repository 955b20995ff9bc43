"""
Exact Shapley attributions for boosted tree ensembles.

Path-dependent TreeSHAP: the effect of an absent feature is integrated out
by following both children of a split, weighted by the training-sample
cover recorded on every node at fit time. Attributions explain the margin
(log-odds), where they are exactly additive across trees.
"""

import logging
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from joblib import Parallel, delayed

from errors import DataValidationError, InvariantViolation
from gbm import GbmModel, Leaf, Split, TreeNode

logger = logging.getLogger(__name__)

MODULE = "explain"
# absolute bound on |base + sum(phi) - margin|
LOCAL_ACCURACY_TOL = 1e-9


@dataclass(frozen=True)
class Attribution:
    entity_id: str
    base_value: float
    phi: Tuple[float, ...]
    feature_names: Tuple[str, ...] = ()

    @property
    def margin(self) -> float:
        return self.base_value + float(np.sum(self.phi))

    def to_frame(self) -> pd.DataFrame:
        """One row per feature, highest |phi| first"""
        names = self.feature_names or tuple(f"f{j}" for j in range(len(self.phi)))
        frame = pd.DataFrame({"feature": names, "phi": self.phi})
        frame["abs_phi"] = frame["phi"].abs()
        frame = frame.sort_values(["abs_phi", "feature"], ascending=[False, True], kind="mergesort")
        frame.insert(0, "entity_id", self.entity_id)
        frame["base_value"] = self.base_value
        frame["margin"] = self.margin
        return frame.drop(columns="abs_phi").reset_index(drop=True)


class _FlatTree:
    """Array form of one tree; internal node values are cover-weighted child expectations"""

    def __init__(self, root: TreeNode):
        self.left: List[int] = []
        self.right: List[int] = []
        self.feature: List[int] = []
        self.threshold: List[float] = []
        self.value: List[float] = []
        self.cover: List[float] = []
        self._add(root)

    def _add(self, node: TreeNode) -> int:
        if node.cover is None:
            raise DataValidationError("tree node without cover metadata; refit the model", MODULE)
        index = len(self.cover)
        self.left.append(-1)
        self.right.append(-1)
        self.feature.append(-1)
        self.threshold.append(0.0)
        self.value.append(0.0)
        self.cover.append(float(node.cover))
        if isinstance(node, Leaf):
            self.value[index] = node.value
            return index
        left = self._add(node.left)
        right = self._add(node.right)
        self.left[index], self.right[index] = left, right
        self.feature[index], self.threshold[index] = node.feature, node.threshold
        total = self.cover[left] + self.cover[right]
        if total <= 0.0:
            raise DataValidationError("split with zero cover below it", MODULE)
        self.value[index] = (self.cover[left] * self.value[left] + self.cover[right] * self.value[right]) / total
        return index

    @property
    def expected_value(self) -> float:
        return self.value[0]


# A path element is [feature, zero_fraction, one_fraction, permutation_weight].

def _extend(path: list, zero_fraction: float, one_fraction: float, feature: int) -> list:
    depth = len(path)
    path = [list(e) for e in path] + [[feature, zero_fraction, one_fraction, 1.0 if depth == 0 else 0.0]]
    for i in range(depth - 1, -1, -1):
        path[i + 1][3] += one_fraction * path[i][3] * (i + 1) / (depth + 1)
        path[i][3] = zero_fraction * path[i][3] * (depth - i) / (depth + 1)
    return path


def _unwind(path: list, index: int) -> list:
    depth = len(path) - 1
    _, zero_fraction, one_fraction, _ = path[index]
    weights = [e[3] for e in path]
    next_one = weights[depth]
    for i in range(depth - 1, -1, -1):
        if one_fraction != 0.0:
            tmp = weights[i]
            weights[i] = next_one * (depth + 1) / ((i + 1) * one_fraction)
            next_one = tmp - weights[i] * zero_fraction * (depth - i) / (depth + 1)
        else:
            weights[i] = weights[i] * (depth + 1) / (zero_fraction * (depth - i))
    kept = [e for j, e in enumerate(path) if j != index]
    return [[e[0], e[1], e[2], weights[i]] for i, e in enumerate(kept)]


def _unwound_sum(path: list, index: int) -> float:
    depth = len(path) - 1
    _, zero_fraction, one_fraction, _ = path[index]
    next_one = path[depth][3]
    total = 0.0
    for i in range(depth - 1, -1, -1):
        if one_fraction != 0.0:
            tmp = next_one * (depth + 1) / ((i + 1) * one_fraction)
            total += tmp
            next_one = path[i][3] - tmp * zero_fraction * (depth - i) / (depth + 1)
        else:
            total += path[i][3] / zero_fraction / ((depth - i) / (depth + 1))
    return total


def _recurse(tree: _FlatTree, x: np.ndarray, phi: np.ndarray, node: int, path: list,
             zero_fraction: float, one_fraction: float, feature: int) -> None:
    path = _extend(path, zero_fraction, one_fraction, feature)
    if tree.left[node] < 0:
        for i in range(1, len(path)):
            weight = _unwound_sum(path, i)
            phi[path[i][0]] += weight * (path[i][2] - path[i][1]) * tree.value[node]
        return

    split_feature = tree.feature[node]
    if x[split_feature] <= tree.threshold[node]:
        hot, cold = tree.left[node], tree.right[node]
    else:
        hot, cold = tree.right[node], tree.left[node]
    incoming_zero, incoming_one = 1.0, 1.0
    for k in range(1, len(path)):
        if path[k][0] == split_feature:
            incoming_zero, incoming_one = path[k][1], path[k][2]
            path = _unwind(path, k)
            break
    cover = tree.cover[node]
    _recurse(tree, x, phi, hot, path, tree.cover[hot] / cover * incoming_zero, incoming_one, split_feature)
    _recurse(tree, x, phi, cold, path, tree.cover[cold] / cover * incoming_zero, 0.0, split_feature)


class TreeExplainer:
    """Path-dependent Shapley attributions of a GbmModel's margin"""

    def __init__(self, model: GbmModel):
        self.model = model
        self.trees = [_FlatTree(t) for t in model.trees]
        self.base_value = model.base_score + model.learning_rate * sum(t.expected_value for t in self.trees)

    def shap_values(self, x) -> np.ndarray:
        x = self.model._check_row(x)
        phi = np.zeros(self.model.n_features, dtype=float)
        for tree in self.trees:
            _recurse(tree, x, phi, 0, [], 1.0, 1.0, -1)
        return phi * self.model.learning_rate

    def explain(self, x, entity_id: str = "") -> Attribution:
        phi = self.shap_values(x)
        attribution = Attribution(entity_id, float(self.base_value), tuple(float(v) for v in phi),
                                  self.model.feature_names)
        margin = self.model.predict_margin(x)
        if abs(attribution.margin - margin) > LOCAL_ACCURACY_TOL:
            raise InvariantViolation(
                f"attributions of {entity_id or 'sample'} sum to {attribution.margin!r}, margin is {margin!r}", MODULE)
        return attribution

    def shap_matrix(self, X) -> np.ndarray:
        X = np.asarray(X, dtype=float)
        return np.vstack([self.shap_values(row) for row in X]) if len(X) else np.zeros((0, self.model.n_features))


def tree_shap(model: GbmModel, x, background=None, entity_id: str = "") -> Attribution:
    """Attribution of one feature vector.

    Absent features are integrated out with the node covers, so background
    is only checked for shape.
    """
    if background is not None:
        background = np.asarray(background, dtype=float)
        if background.ndim != 2 or background.shape[1] != model.n_features:
            raise DataValidationError(f"background must have {model.n_features} columns", MODULE)
    values = getattr(x, "values", x)
    entity_id = entity_id or getattr(x, "entity_id", "")
    return TreeExplainer(model).explain(values, entity_id)


def _chunk_abs_sum(explainer: TreeExplainer, X: np.ndarray) -> np.ndarray:
    return np.abs(explainer.shap_matrix(X)).sum(axis=0)


def global_importance(model: GbmModel, X, top_k: Optional[int] = None,
                      n_jobs: int = 1) -> List[Tuple[str, float]]:
    """Mean |phi| per feature over the rows of X, descending with ties by name"""
    X = np.asarray(X, dtype=float)
    if X.ndim != 2 or X.shape[0] == 0:
        raise DataValidationError("global importance needs a non-empty feature matrix", MODULE)
    explainer = TreeExplainer(model)
    chunks = np.array_split(X, max(1, min(len(X), 4 * max(1, n_jobs))))
    sums = Parallel(n_jobs=n_jobs)(delayed(_chunk_abs_sum)(explainer, chunk) for chunk in chunks if len(chunk))
    mean_abs = np.sum(sums, axis=0) / X.shape[0]
    ranked = sorted(zip(model.feature_names, (float(v) for v in mean_abs)), key=lambda item: (-item[1], item[0]))
    logger.info(f"Global importance over {X.shape[0]} samples; top feature {ranked[0][0] if ranked else None}")
    return ranked if top_k is None else ranked[:top_k]


def importance_frame(ranked: Sequence[Tuple[str, float]]) -> pd.DataFrame:
    """importance.csv layout"""
    return pd.DataFrame({
        "feature": [name for name, _ in ranked],
        "mean_abs_phi": [value for _, value in ranked],
        "rank": np.arange(1, len(ranked) + 1),
    })
