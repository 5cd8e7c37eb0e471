"""Frozen-feature probes (weighted kNN, logistic regression) and representation blending."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError, DimensionError, ParameterError


@dataclass
class FeatureMatrix:
    rows: np.ndarray
    labels: np.ndarray
    ids: np.ndarray | None = None
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        self.rows = np.asarray(self.rows, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.rows.ndim != 2:
            raise DimensionError(f"feature rows must be 2-d, got {self.rows.shape}")
        if len(self.rows) != len(self.labels):
            raise DimensionError(f"{len(self.rows)} rows but {len(self.labels)} labels")
        self.ids = np.arange(len(self.rows)) if self.ids is None else np.asarray(self.ids, dtype=np.int64)
        if len(self.ids) != len(self.rows):
            raise DimensionError("ids must align with rows")

    def __len__(self):
        return len(self.rows)


@dataclass
class ProbeResult:
    accuracy: float
    predictions: np.ndarray
    correct: np.ndarray
    ids: np.ndarray

    @property
    def solved(self) -> frozenset:
        return frozenset(int(i) for i in self.ids[self.correct])


def _unit_rows(x: np.ndarray) -> np.ndarray:
    return x / np.maximum(np.linalg.norm(x, axis=1, keepdims=True), 1e-12)


def _result(pred, test: FeatureMatrix) -> ProbeResult:
    pred = np.asarray(pred, dtype=np.int64)
    correct = pred == test.labels
    acc = float(correct.mean()) if len(correct) else float("nan")
    return ProbeResult(acc, pred, correct, test.ids)


def knn_probe(train: FeatureMatrix, test: FeatureMatrix, k: int = 10, temperature: float = 0.07,
              metric: str = "cosine", chunk: int = 512) -> ProbeResult:
    """Similarity-weighted k-nearest-neighbour vote.

    With ``metric="cosine"`` rows are L2-normalized and each neighbour votes
    with weight ``exp(sim / temperature)``. ``metric="euclidean"`` ranks by
    squared distance and votes uniformly. Ties in ranking go to the earlier
    training row, ties in the vote to the smaller class index.
    """
    if k < 1 or k > len(train):
        raise ParameterError(f"k={k} must lie in [1, {len(train)}]")
    if train.rows.shape[1] != test.rows.shape[1]:
        raise DimensionError("train and test features differ in width")
    if metric not in ("cosine", "euclidean"):
        raise ParameterError(f"unknown metric {metric!r}")
    num_classes = int(max(train.labels.max(), test.labels.max() if len(test) else 0)) + 1
    tr = _unit_rows(train.rows) if metric == "cosine" else train.rows
    preds = []
    for i in range(0, len(test), chunk):
        q = test.rows[i:i + chunk]
        if metric == "cosine":
            score = _unit_rows(q) @ tr.T
        else:
            score = -(np.sum(q * q, 1)[:, None] - 2 * q @ tr.T + np.sum(tr * tr, 1)[None])
        idx = np.argsort(-score, axis=1, kind="stable")[:, :k]
        top = np.take_along_axis(score, idx, axis=1)
        w = np.exp(top / temperature) if metric == "cosine" else np.ones_like(top)
        votes = np.zeros((len(q), num_classes))
        np.add.at(votes, (np.repeat(np.arange(len(q)), k), train.labels[idx].ravel()), w.ravel())
        preds.append(np.argmax(votes, axis=1))
    pred = np.concatenate(preds) if preds else np.zeros(0, np.int64)
    return _result(pred, test)


def linear_probe(train: FeatureMatrix, test: FeatureMatrix, epochs: int = 100, lr: float = 0.1,
                 seed: int = 0, batch_size: int = 128, weight_decay: float = 1e-4) -> ProbeResult:
    """Multinomial logistic regression on standardized frozen features.

    Weights start at zero, so zero epochs predicts class 0 everywhere.
    Mini-batch SGD with momentum; batch order depends only on ``seed``.
    """
    classes = np.unique(train.labels)
    if len(classes) < 2:
        raise ContractError("linear probe needs at least two classes in the training set")
    num_classes = int(max(train.labels.max(), test.labels.max() if len(test) else 0)) + 1
    mu = train.rows.mean(axis=0)
    sd = train.rows.std(axis=0) + 1e-6
    x = (train.rows - mu) / sd
    xt = (test.rows - mu) / sd
    n, d = x.shape
    w = np.zeros((d, num_classes))
    b = np.zeros(num_classes)
    vw, vb = np.zeros_like(w), np.zeros_like(b)
    onehot = np.eye(num_classes)[train.labels]
    rng = np.random.default_rng(seed)
    for epoch in range(epochs):
        step = lr * 0.5 * (1 + np.cos(np.pi * epoch / max(epochs, 1)))
        order = rng.permutation(n)
        for i0 in range(0, n, batch_size):
            idx = order[i0:i0 + batch_size]
            logits = x[idx] @ w + b
            logits -= logits.max(axis=1, keepdims=True)
            p = np.exp(logits)
            p /= p.sum(axis=1, keepdims=True)
            g = (p - onehot[idx]) / len(idx)
            gw = x[idx].T @ g + weight_decay * w
            gb = g.sum(axis=0)
            vw = 0.9 * vw + gw
            vb = 0.9 * vb + gb
            w -= step * vw
            b -= step * vb
    pred = np.argmax(xt @ w + b, axis=1) if len(test) else np.zeros(0, np.int64)
    return _result(pred, test)


def _plain_layer_norm(x: np.ndarray, eps: float = 1e-5) -> np.ndarray:
    xc = x - x.mean(axis=1, keepdims=True)
    return xc / np.sqrt((xc * xc).mean(axis=1, keepdims=True) + eps)


def source_pipeline(feat: FeatureMatrix, projection: np.ndarray | None = None,
                    normalize: bool = True) -> FeatureMatrix:
    """Per-source 1x1 projection followed by affine-free layer normalization."""
    rows = feat.rows if projection is None else feat.rows @ projection
    rows = _plain_layer_norm(rows) if normalize else rows
    return FeatureMatrix(rows, feat.labels, feat.ids, dict(feat.provenance, pipeline="projected"))


def _projections(d1: int, d2: int, seed: int):
    if d1 == d2:
        return None, None
    d = min(d1, d2)
    rng = np.random.default_rng([seed, 9])

    def make(din):
        if din == d:
            return None
        q, _ = np.linalg.qr(rng.standard_normal((din, d)))
        return q

    return make(d1), make(d2)


def blend_representations(feat1: FeatureMatrix, feat2: FeatureMatrix, alpha: float,
                          normalize: bool = True, projections=None, seed: int = 0) -> FeatureMatrix:
    """``alpha * norm(proj(feat1)) + (1 - alpha) * norm(proj(feat2))`` per row.

    Projections are identity when widths agree; otherwise a fixed seeded
    orthonormal map to the smaller width is used for the wider source.
    """
    if not 0.0 <= alpha <= 1.0:
        raise ParameterError(f"alpha must lie in [0, 1], got {alpha}")
    if len(feat1) != len(feat2):
        raise DimensionError(f"row counts differ: {len(feat1)} vs {len(feat2)}")
    p1, p2 = projections if projections is not None else _projections(
        feat1.rows.shape[1], feat2.rows.shape[1], seed)
    a = source_pipeline(feat1, p1, normalize).rows
    b = source_pipeline(feat2, p2, normalize).rows
    if a.shape != b.shape:
        raise DimensionError(f"projected widths differ: {a.shape[1]} vs {b.shape[1]}")
    rows = alpha * a + (1.0 - alpha) * b
    return FeatureMatrix(rows, feat1.labels, feat1.ids, {"blend": float(alpha)})


def alpha_sweep(train1: FeatureMatrix, test1: FeatureMatrix, train2: FeatureMatrix,
                test2: FeatureMatrix, alphas=(0.0, 0.25, 0.5, 0.75, 1.0), probe: str = "knn",
                **probe_kwargs) -> list:
    """Probe accuracy of the blended representation for every alpha: ``[(alpha, acc), ...]``."""
    run = knn_probe if probe == "knn" else linear_probe
    curve = []
    for a in alphas:
        tr = blend_representations(train1, train2, a)
        te = blend_representations(test1, test2, a)
        curve.append((float(a), run(tr, te, **probe_kwargs).accuracy))
    return curve
