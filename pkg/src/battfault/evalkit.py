"""Evaluation suite: AUROC, ROC/cost analysis, exact t-SNE, mixing diagnostics.

AUROC uses the rank (Mann-Whitney) form with half credit for ties; roc_points
provides the threshold sweep whose trapezoidal area must agree with it. The
expected direct cost combines missed-fault and inspection costs at an
operating point; defaults follow the fleet statistics the cost model was
published with (fault rate 0.038%, 5M CNY per missed fault, 8k CNY per
inspection).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, asdict

import numpy as np

from .numcore import SeededRng


class SingleClassError(ValueError):
    """Metric undefined because only one label class is present."""


@dataclass(frozen=True)
class RocPoint:
    threshold: float
    q_tp: float
    q_fp: float


@dataclass(frozen=True)
class CostParams:
    p: float = 0.00038          # fleet fault rate
    c_f: float = 5_000_000.0    # direct cost of a missed fault (CNY/vehicle)
    c_r: float = 8_000.0        # inspection cost (CNY/vehicle)

    def __post_init__(self):
        if not 0.0 <= self.p <= 1.0:
            raise ValueError(f"fault rate must be in [0,1], got {self.p}")
        if self.c_f < 0 or self.c_r < 0:
            raise ValueError("costs must be nonnegative")


@dataclass
class EvaluationReport:
    snippet_auroc: float
    vehicle_auroc: float
    roc_points: list                  # RocPoint at vehicle level
    min_expected_cost: float
    min_cost_threshold: float
    min_cost_point: RocPoint
    n_pos_vehicles: int
    n_neg_vehicles: int
    n_pos_snippets: int
    n_neg_snippets: int
    cost_params: CostParams = field(default_factory=CostParams)
    config_echo: dict = field(default_factory=dict)
    seeds: dict = field(default_factory=dict)
    tsne_rows: list = field(default_factory=list)  # optional (x, y, vehicle_id, label)


# ---------------------------------------------------------------------------
# AUROC and ROC sweep
# ---------------------------------------------------------------------------


def _check_two_classes(labels: np.ndarray):
    n_pos = int((labels == 1).sum())
    n_neg = int((labels == 0).sum())
    if n_pos == 0 or n_neg == 0:
        raise SingleClassError(f"need both classes, got {n_pos} positives / {n_neg} negatives")
    return n_pos, n_neg


def auroc(scores, labels) -> float:
    """Mann-Whitney AUROC: P(random positive outranks random negative), ties half."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    n_pos, n_neg = _check_two_classes(labels)
    order = np.argsort(scores, kind="stable")
    ranks = np.empty(scores.size, dtype=np.float64)
    sorted_scores = scores[order]
    i = 0
    while i < scores.size:
        j = i
        while j + 1 < scores.size and sorted_scores[j + 1] == sorted_scores[i]:
            j += 1
        ranks[order[i:j + 1]] = 0.5 * (i + j) + 1.0  # average 1-based rank for ties
        i = j + 1
    rank_sum_pos = ranks[labels == 1].sum()
    return float((rank_sum_pos - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def roc_points(scores, labels) -> list:
    """Threshold sweep: one point per distinct score plus the (0,0) endpoint.

    Predicting positive means score >= threshold; points run from (0,0) at
    threshold +inf down to (1,1) at the minimum score.
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    n_pos, n_neg = _check_two_classes(labels)
    order = np.argsort(-scores, kind="stable")
    points = [RocPoint(float("inf"), 0.0, 0.0)]
    tp = fp = 0
    i = 0
    while i < scores.size:
        thr = scores[order[i]]
        while i < scores.size and scores[order[i]] == thr:
            if labels[order[i]] == 1:
                tp += 1
            else:
                fp += 1
            i += 1
        points.append(RocPoint(float(thr), tp / n_pos, fp / n_neg))
    return points


def trapezoid_auroc(points: list) -> float:
    """Area under a roc_points sweep; the independent check against auroc()."""
    area = 0.0
    for a, b in zip(points[:-1], points[1:]):
        area += (b.q_fp - a.q_fp) * (a.q_tp + b.q_tp) / 2.0
    return float(area)


# ---------------------------------------------------------------------------
# Expected direct cost
# ---------------------------------------------------------------------------


def expected_cost(params: CostParams, q_tp: float, q_fp: float) -> float:
    """Per-vehicle expected direct cost at an operating point (CNY)."""
    if not (0.0 <= q_tp <= 1.0 and 0.0 <= q_fp <= 1.0):
        raise ValueError(f"rates must be in [0,1], got q_tp={q_tp}, q_fp={q_fp}")
    p = params.p
    return p * (1.0 - q_tp) * params.c_f + (p * q_tp + (1.0 - p) * q_fp) * params.c_r


def min_expected_cost(scores, labels, params: CostParams = CostParams()):
    """Minimum expected cost over the full threshold sweep.

    Returns (cost, threshold, RocPoint); cost ties break toward lower q_fp.
    Note this is a sweep minimum: any other operating-point convention can be
    read off the emitted cost curve.
    """
    best = None
    for pt in roc_points(scores, labels):
        cost = expected_cost(params, pt.q_tp, pt.q_fp)
        key = (cost, pt.q_fp)
        if best is None or key < best[0]:
            best = (key, pt)
    (cost, _), pt = best
    return float(cost), pt.threshold, pt


def vehicle_scores(scores, vehicle_ids, aggregator: str = "mean") -> dict:
    """Aggregate snippet scores to one score per vehicle (mean or max)."""
    if aggregator not in ("mean", "max"):
        raise ValueError(f"unknown aggregator {aggregator!r}")
    groups = {}
    for s, v in zip(scores, vehicle_ids):
        groups.setdefault(v, []).append(float(s))
    for v, g in groups.items():
        if not g:
            raise ValueError(f"empty score group for vehicle {v}")
    agg = np.mean if aggregator == "mean" else np.max
    return {v: float(agg(g)) for v, g in groups.items()}


# ---------------------------------------------------------------------------
# Exact t-SNE
# ---------------------------------------------------------------------------

DIST_FLOOR = 1e-12
TSNE_MAX_POINTS = 2000
EXAGGERATION = 12.0
EXAG_ITERS = 250
MOMENTUM_EARLY = 0.5
MOMENTUM_LATE = 0.8
TSNE_ETA = 100.0


def _pairwise_sq_dists(X: np.ndarray) -> np.ndarray:
    sq = (X * X).sum(axis=1)
    d = sq[:, None] + sq[None, :] - 2.0 * (X @ X.T)
    np.fill_diagonal(d, 0.0)
    return np.maximum(d, DIST_FLOOR)


def _conditional_probs(dists_row: np.ndarray, beta: float) -> np.ndarray:
    p = np.exp(-dists_row * beta)
    s = p.sum()
    return p / s if s > 0 else p


def _row_perplexity(p: np.ndarray) -> float:
    nz = p[p > 0]
    h = -(nz * np.log(nz)).sum()
    return float(np.exp(h))


def conditional_affinities(X: np.ndarray, perplexity: float, tol: float = 1e-5,
                           max_iter: int = 200) -> np.ndarray:
    """Row-wise Gaussian affinities with precisions binary-searched to the target perplexity."""
    n = X.shape[0]
    if n < 3 * perplexity:
        raise ValueError(f"perplexity {perplexity} infeasible for {n} points (need N >= 3*perplexity)")
    dists = _pairwise_sq_dists(X)
    target_h = np.log(perplexity)
    P = np.zeros((n, n))
    for i in range(n):
        row = np.delete(dists[i], i)
        beta, lo, hi = 1.0, 0.0, np.inf
        for _ in range(max_iter):
            p = _conditional_probs(row, beta)
            h = -(p[p > 0] * np.log(p[p > 0])).sum()
            diff = h - target_h
            if abs(diff) < tol:
                break
            if diff > 0:            # entropy too high -> sharpen
                lo = beta
                beta = beta * 2.0 if hi == np.inf else 0.5 * (beta + hi)
            else:
                hi = beta
                beta = 0.5 * (beta + lo)
        P[i, np.arange(n) != i] = p
    return P


def tsne(X: np.ndarray, perplexity: float = 30.0, iterations: int = 1000, seed: int = 0):
    """Exact O(N^2) t-SNE to 2D. Returns (coords (N,2), kl_history)."""
    X = np.asarray(X, dtype=np.float64)
    n = X.shape[0]
    if n > TSNE_MAX_POINTS:
        raise ValueError(f"{n} points exceeds the exact-method bound of {TSNE_MAX_POINTS}")
    cond = conditional_affinities(X, perplexity)
    P = (cond + cond.T) / (2.0 * n)
    P = np.maximum(P, 1e-12)

    rng = SeededRng(seed, ("tsne",))
    Y = rng.normal((n, 2), std=1e-4)
    velocity = np.zeros_like(Y)
    gains = np.ones_like(Y)
    kl_history = []

    for it in range(iterations):
        exag = EXAGGERATION if it < EXAG_ITERS else 1.0
        momentum = MOMENTUM_EARLY if it < EXAG_ITERS else MOMENTUM_LATE

        d = _pairwise_sq_dists(Y)
        num = 1.0 / (1.0 + d)
        np.fill_diagonal(num, 0.0)
        Q = np.maximum(num / num.sum(), 1e-12)

        kl_history.append(float((P * np.log(P / Q)).sum()))

        PQ = (exag * P - Q) * num
        grad = 4.0 * ((np.diag(PQ.sum(axis=1)) - PQ) @ Y)

        flips = np.sign(grad) != np.sign(velocity)
        gains = np.clip(np.where(flips, gains + 0.2, gains * 0.8), 0.01, None)
        velocity = momentum * velocity - TSNE_ETA * gains * grad
        Y = Y + velocity
        Y = Y - Y.mean(axis=0)

    return Y, kl_history


# ---------------------------------------------------------------------------
# Mixing diagnostics
# ---------------------------------------------------------------------------


def mixing_score(embeddings: np.ndarray, group_ids) -> float:
    """Group indistinguishability under leave-one-out 1-NN, rescaled to [0,1].

    1 means the groups are statistically indistinguishable to a nearest
    neighbor classifier, 0 means perfectly separable.
    """
    X = np.asarray(embeddings, dtype=np.float64)
    groups = np.asarray(group_ids)
    uniq, counts = np.unique(groups, return_counts=True)
    if uniq.size < 2:
        raise ValueError("need at least 2 groups")
    if counts.min() < 2:
        raise ValueError("every group needs at least 2 members")
    d = _pairwise_sq_dists(X)
    np.fill_diagonal(d, np.inf)
    nn = d.argmin(axis=1)
    acc = float((groups[nn] == groups).mean())
    chance = float(counts.max() / counts.sum())
    return float(np.clip((1.0 - acc) / (1.0 - chance), 0.0, 1.0))


# ---------------------------------------------------------------------------
# Report emission
# ---------------------------------------------------------------------------


def _fmt(x: float) -> str:
    return repr(float(x))


def _svg_document(width, height, body) -> str:
    return (f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
            f'viewBox="0 0 {width} {height}">\n<rect width="{width}" height="{height}" '
            'fill="white"/>\n' + body + "</svg>\n")


def roc_svg(points: list, width: int = 480, height: int = 480) -> str:
    """Minimal ROC curve figure (deterministic bytes)."""
    pad = 40
    sx = lambda v: pad + v * (width - 2 * pad)
    sy = lambda v: height - pad - v * (height - 2 * pad)
    coords = " ".join(f"{sx(p.q_fp):.2f},{sy(p.q_tp):.2f}" for p in points)
    body = (f'<line x1="{sx(0):.2f}" y1="{sy(0):.2f}" x2="{sx(1):.2f}" y2="{sy(1):.2f}" '
            'stroke="#bbbbbb" stroke-dasharray="4 4"/>\n'
            f'<polyline points="{coords}" fill="none" stroke="#1f77b4" stroke-width="2"/>\n'
            f'<text x="{width/2:.0f}" y="{height - 8}" text-anchor="middle" '
            'font-size="12">false positive rate</text>\n'
            f'<text x="12" y="{height/2:.0f}" font-size="12" '
            f'transform="rotate(-90 12 {height/2:.0f})" text-anchor="middle">true positive rate</text>\n')
    return _svg_document(width, height, body)


def scatter_svg(rows: list, width: int = 480, height: int = 480) -> str:
    """Minimal 2D scatter: rows of (x, y, group, label); color by group hash."""
    pad = 30
    xs = np.array([r[0] for r in rows], dtype=np.float64)
    ys = np.array([r[1] for r in rows], dtype=np.float64)
    span_x = max(xs.max() - xs.min(), 1e-12)
    span_y = max(ys.max() - ys.min(), 1e-12)
    palette = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e",
               "#8c564b", "#e377c2", "#7f7f7f"]
    groups = []
    body = []
    for x, y, group, label in rows:
        if group not in groups:
            groups.append(group)
        color = palette[groups.index(group) % len(palette)]
        px = pad + (x - xs.min()) / span_x * (width - 2 * pad)
        py = height - pad - (y - ys.min()) / span_y * (height - 2 * pad)
        shape = 'stroke="black" stroke-width="0.8"' if label else ""
        body.append(f'<circle cx="{px:.2f}" cy="{py:.2f}" r="3" fill="{color}" {shape}/>')
    return _svg_document(width, height, "\n".join(body) + "\n")


def write_tsne_outputs(rows: list, out_dir, stem: str = "tsne"):
    """Write tsne CSV + scatter SVG for rows of (x, y, vehicle_id, label)."""
    import os
    csv_path = os.path.join(out_dir, f"{stem}.csv")
    with open(csv_path, "w", newline="\n", encoding="utf-8") as fh:
        fh.write("x,y,vehicle_id,label\n")
        for x, y, vid, label in rows:
            fh.write(f"{_fmt(x)},{_fmt(y)},{vid},{int(label)}\n")
    with open(os.path.join(out_dir, f"{stem}.svg"), "w", newline="\n", encoding="utf-8") as fh:
        fh.write(scatter_svg(rows))


def emit_report(report: EvaluationReport, out_dir):
    """Write report.json, roc.csv (+ cost column), figures, optional t-SNE files."""
    import os
    os.makedirs(out_dir, exist_ok=True)

    with open(os.path.join(out_dir, "roc.csv"), "w", newline="\n", encoding="utf-8") as fh:
        fh.write("threshold,q_tp,q_fp,expected_cost_cny\n")
        for pt in report.roc_points:
            cost = expected_cost(report.cost_params, pt.q_tp, pt.q_fp)
            fh.write(f"{_fmt(pt.threshold)},{_fmt(pt.q_tp)},{_fmt(pt.q_fp)},{_fmt(cost)}\n")

    with open(os.path.join(out_dir, "roc.svg"), "w", newline="\n", encoding="utf-8") as fh:
        fh.write(roc_svg(report.roc_points))

    doc = {
        "snippet_auroc": report.snippet_auroc,
        "vehicle_auroc": report.vehicle_auroc,
        "min_expected_cost": report.min_expected_cost,
        "min_cost_threshold": report.min_cost_threshold,
        "min_cost_point": asdict(report.min_cost_point),
        "min_cost_convention": "minimum of the expected cost over all ROC operating points",
        "n_pos_vehicles": report.n_pos_vehicles,
        "n_neg_vehicles": report.n_neg_vehicles,
        "n_pos_snippets": report.n_pos_snippets,
        "n_neg_snippets": report.n_neg_snippets,
        "cost_params": asdict(report.cost_params),
        "config_echo": report.config_echo,
        "seeds": report.seeds,
    }
    with open(os.path.join(out_dir, "report.json"), "w", newline="\n", encoding="utf-8") as fh:
        fh.write(json.dumps(doc, indent=1, sort_keys=True) + "\n")

    if report.tsne_rows:
        write_tsne_outputs(report.tsne_rows, out_dir)
