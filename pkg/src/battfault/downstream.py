"""Frozen-encoder feature extraction and a gradient-boosted tree classifier.

Features are the encoder's summary vector concatenated with the snippet's
z-scored static metadata. The classifier is boosted depth-limited regression
trees on logistic loss: exhaustive split search over midpoints of sorted
distinct feature values, second-order leaf weights with L2 regularization.
Deterministic throughout; ties break on lowest feature index, then lowest
threshold.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .dataio import FleetDataset
from .model import ModelConfig, ModelParams, encode_batch

GBDT_FORMAT_VERSION = 1


@dataclass(frozen=True)
class FusedFeature:
    values: np.ndarray  # (H+K,)
    snippet_id: str
    vehicle_id: str
    label: int


def extract_features(params: ModelParams, cfg: ModelConfig, ds: FleetDataset,
                     batch_size: int = 32) -> list:
    """Per snippet: eval-mode summary vector concatenated with its metadata.

    The dataset must already be normalized with statistics fit on the
    training split.
    """
    if len(ds) and ds.snippets[0].meta.shape[0] != cfg.K:
        raise ValueError(f"metadata length {ds.snippets[0].meta.shape[0]} != cfg.K {cfg.K}")
    out = []
    for start in range(0, len(ds), batch_size):
        chunk = ds.snippets[start:start + batch_size]
        X = np.stack([s.channels for s in chunk], axis=0)
        vecs = encode_batch(X, params, cfg)
        for s, v in zip(chunk, vecs):
            fused = np.concatenate([v, s.meta]) if cfg.K else v.copy()
            if not np.all(np.isfinite(fused)):
                raise ValueError(f"non-finite feature for snippet {s.snippet_id}")
            out.append(FusedFeature(fused, s.snippet_id, s.vehicle_id, s.label))
    return out


# ---------------------------------------------------------------------------
# Gradient-boosted trees
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class GbdtConfig:
    rounds: int = 200
    max_depth: int = 3
    shrinkage: float = 0.1
    reg_lambda: float = 1.0
    min_child_weight: float = 1e-6

    def __post_init__(self):
        if self.rounds < 1 or self.max_depth < 1:
            raise ValueError("rounds and max_depth must be positive")
        if not 0.0 < self.shrinkage <= 1.0:
            raise ValueError("shrinkage must be in (0,1]")


@dataclass
class TreeNode:
    """Axis-aligned split or leaf. Leaves carry the boosting weight."""

    feature: int = -1
    threshold: float = 0.0
    left: "TreeNode" = None
    right: "TreeNode" = None
    weight: float = 0.0

    @property
    def is_leaf(self) -> bool:
        return self.feature < 0


@dataclass
class GbdtModel:
    base_score: float           # prior log-odds
    trees: list                 # list of TreeNode roots
    shrinkage: float
    max_depth: int
    rounds: int
    n_features: int


def _sigmoid(z):
    return np.where(z >= 0, 1.0 / (1.0 + np.exp(-z)), np.exp(z) / (1.0 + np.exp(z)))


def _leaf_weight(g_sum, h_sum, lam):
    return -g_sum / (h_sum + lam)


def _best_split(X, g, h, idx, lam, min_child_weight):
    """Exhaustive search over all features and midpoint thresholds.

    Returns (gain, feature, threshold) of the best split, or None.
    Deterministic tie-break: lowest feature, then lowest threshold.
    """
    g_tot, h_tot = g[idx].sum(), h[idx].sum()
    parent = g_tot * g_tot / (h_tot + lam)
    best = None
    for f in range(X.shape[1]):
        order = idx[np.argsort(X[idx, f], kind="stable")]
        xs = X[order, f]
        gl = np.cumsum(g[order])
        hl = np.cumsum(h[order])
        # candidate cuts sit between distinct consecutive values
        cuts = np.nonzero(xs[1:] > xs[:-1])[0]
        for c in cuts:
            h_left, h_right = hl[c], h_tot - hl[c]
            if h_left < min_child_weight or h_right < min_child_weight:
                continue
            g_left = gl[c]
            gain = (g_left * g_left / (h_left + lam)
                    + (g_tot - g_left) ** 2 / (h_tot - hl[c] + lam)
                    - parent)
            thr = 0.5 * (xs[c] + xs[c + 1])
            cand = (-gain, f, thr)
            if best is None or cand < best:
                best = cand
    if best is None or -best[0] <= 1e-12:
        return None
    return (-best[0], best[1], best[2])


def _grow_tree(X, g, h, idx, depth, cfg: GbdtConfig) -> TreeNode:
    split = _best_split(X, g, h, idx, cfg.reg_lambda, cfg.min_child_weight) \
        if depth < cfg.max_depth and idx.size > 1 else None
    if split is None:
        return TreeNode(weight=_leaf_weight(g[idx].sum(), h[idx].sum(), cfg.reg_lambda))
    _, f, thr = split
    go_left = X[idx, f] <= thr
    node = TreeNode(feature=f, threshold=thr)
    node.left = _grow_tree(X, g, h, idx[go_left], depth + 1, cfg)
    node.right = _grow_tree(X, g, h, idx[~go_left], depth + 1, cfg)
    return node


def _tree_apply(node: TreeNode, X: np.ndarray) -> np.ndarray:
    out = np.empty(X.shape[0])
    stack = [(node, np.arange(X.shape[0]))]
    while stack:
        n, idx = stack.pop()
        if n.is_leaf:
            out[idx] = n.weight
        else:
            go_left = X[idx, n.feature] <= n.threshold
            stack.append((n.left, idx[go_left]))
            stack.append((n.right, idx[~go_left]))
    return out


def _logloss(y, p):
    eps = 1e-15
    p = np.clip(p, eps, 1 - eps)
    return float(-(y * np.log(p) + (1 - y) * np.log(1 - p)).mean())


def train_gbdt(features: list, cfg: GbdtConfig = GbdtConfig(), seed: int = 0) -> GbdtModel:
    """Boost regression trees on logistic loss over fused features.

    Training log-loss is asserted non-increasing round over round.
    """
    if not features:
        raise ValueError("no training features")
    X = np.stack([f.values for f in features], axis=0)
    y = np.array([f.label for f in features], dtype=np.float64)
    if not np.all(np.isfinite(X)):
        raise ValueError("non-finite values in training features")
    pos_rate = y.mean()
    if pos_rate == 0.0 or pos_rate == 1.0:
        raise ValueError(f"single-class training set (positive rate {pos_rate}); need both classes")

    base_score = float(np.log(pos_rate / (1.0 - pos_rate)))
    score = np.full(y.shape, base_score)
    all_idx = np.arange(y.size)
    trees = []
    prev_loss = _logloss(y, _sigmoid(score))
    for _ in range(cfg.rounds):
        p = _sigmoid(score)
        g = p - y
        h = p * (1.0 - p)
        root = _grow_tree(X, g, h, all_idx, 0, cfg)
        trees.append(root)
        score = score + cfg.shrinkage * _tree_apply(root, X)
        loss = _logloss(y, _sigmoid(score))
        assert loss <= prev_loss + 1e-12, f"logloss increased: {prev_loss} -> {loss}"
        prev_loss = loss
    return GbdtModel(base_score, trees, cfg.shrinkage, cfg.max_depth, cfg.rounds, X.shape[1])


def predict_proba(model: GbdtModel, feature: np.ndarray) -> float:
    """Fault probability for one fused feature vector."""
    feature = np.asarray(feature, dtype=np.float64)
    if feature.shape != (model.n_features,):
        raise ValueError(f"feature length {feature.shape} != expected ({model.n_features},)")
    return float(predict_proba_batch(model, feature[None, :])[0])


def predict_proba_batch(model: GbdtModel, X: np.ndarray) -> np.ndarray:
    if X.ndim != 2 or X.shape[1] != model.n_features:
        raise ValueError(f"feature matrix {X.shape} incompatible with {model.n_features} features")
    score = np.full(X.shape[0], model.base_score)
    for tree in model.trees:
        score += model.shrinkage * _tree_apply(tree, X)
    return _sigmoid(score)


# ---------------------------------------------------------------------------
# Serialization (same text container convention as checkpoints)
# ---------------------------------------------------------------------------


def _node_to_dict(node: TreeNode) -> dict:
    if node.is_leaf:
        return {"weight": node.weight}
    return {"feature": node.feature, "threshold": node.threshold,
            "left": _node_to_dict(node.left), "right": _node_to_dict(node.right)}


def _node_from_dict(d: dict) -> TreeNode:
    if "weight" in d:
        return TreeNode(weight=float(d["weight"]))
    return TreeNode(feature=int(d["feature"]), threshold=float(d["threshold"]),
                    left=_node_from_dict(d["left"]), right=_node_from_dict(d["right"]))


def save_gbdt(model: GbdtModel, path):
    doc = {
        "format_version": GBDT_FORMAT_VERSION,
        "base_score": model.base_score,
        "config": {"shrinkage": model.shrinkage, "max_depth": model.max_depth,
                   "rounds": model.rounds, "n_features": model.n_features},
        "trees": [_node_to_dict(t) for t in model.trees],
    }
    with open(path, "w", newline="\n", encoding="utf-8") as fh:
        fh.write(json.dumps(doc, indent=1, sort_keys=True) + "\n")


def load_gbdt(path) -> GbdtModel:
    with open(path, encoding="utf-8") as fh:
        doc = json.load(fh)
    if doc.get("format_version") != GBDT_FORMAT_VERSION:
        raise ValueError(f"unsupported classifier format version {doc.get('format_version')}")
    c = doc["config"]
    return GbdtModel(float(doc["base_score"]), [_node_from_dict(t) for t in doc["trees"]],
                     float(c["shrinkage"]), int(c["max_depth"]), int(c["rounds"]),
                     int(c["n_features"]))
