"""Downstream task models and the measurement-vs-performance correlation
experiment.

Per seller: train a lightweight model on the seller's data, score it on the
buyer's held-out test set, and correlate the score with each data
measurement across sellers. Dirichlet class skew makes sellers heterogeneous
the way non-IID federated clients are.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .data import EmbeddingSet, sample_mixture
from .marketplace import (
    STREAM_TASK,
    Scenario,
    TrialWorld,
    cell_seed,
)
from .measures import (
    MeasureConfig,
    MeasureKind,
    compute_query,
    default_omega,
    evaluate,
    seller_report,
)

TASKS = ("binary", "clustering")


# --- logistic regression -----------------------------------------------------


@dataclass(frozen=True)
class LogisticConfig:
    step_size: float = 0.1
    epochs: int = 500
    l2_penalty: float = 1e-4


@dataclass(frozen=True)
class LogisticModel:
    weights: np.ndarray
    bias: float
    feature_mean: np.ndarray
    feature_std: np.ndarray
    loss_history: tuple


def _sigmoid(z):
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def logistic_fit(train: EmbeddingSet, config: LogisticConfig = LogisticConfig()) -> LogisticModel:
    """Full-batch gradient-descent logistic regression on binary labels.

    Inputs are standardized by training statistics; weights start at zero so
    the fit is deterministic.
    """
    if train.labels is None:
        raise ValueError("logistic_fit requires labeled data")
    y = np.asarray(train.labels, dtype=np.float64)
    if not np.all((y == 0) | (y == 1)):
        raise ValueError("logistic_fit requires 0/1 labels")
    if len(np.unique(y)) < 2:
        raise ValueError("training data contains a single class")

    mean = train.vectors.mean(axis=0)
    std = train.vectors.std(axis=0)
    std = np.where(std > 0, std, 1.0)
    x = (train.vectors - mean) / std
    n, d = x.shape

    w = np.zeros(d)
    b = 0.0
    losses = []
    for _ in range(config.epochs):
        z = x @ w + b
        p = _sigmoid(z)
        # Mean log-loss plus L2 penalty on the weights only.
        with np.errstate(divide="ignore"):
            loss = -np.mean(y * np.log(p + 1e-300) + (1 - y) * np.log(1 - p + 1e-300))
        losses.append(float(loss + 0.5 * config.l2_penalty * float(w @ w)))
        grad_w = x.T @ (p - y) / n + config.l2_penalty * w
        grad_b = float(np.mean(p - y))
        w -= config.step_size * grad_w
        b -= config.step_size * grad_b
    return LogisticModel(
        weights=w, bias=b, feature_mean=mean, feature_std=std, loss_history=tuple(losses)
    )


def logistic_predict(model: LogisticModel, x) -> np.ndarray:
    x = (np.asarray(x, dtype=np.float64) - model.feature_mean) / model.feature_std
    return (_sigmoid(x @ model.weights + model.bias) >= 0.5).astype(np.int64)


def accuracy(predicted, actual) -> float:
    predicted = np.asarray(predicted)
    actual = np.asarray(actual)
    if predicted.shape != actual.shape:
        raise ValueError("prediction/label length mismatch")
    return float(np.mean(predicted == actual))


# --- k-means ------------------------------------------------------------------


@dataclass(frozen=True)
class KMeansResult:
    assignments: np.ndarray
    centroids: np.ndarray
    inertia: float
    inertia_history: tuple
    iterations: int


def _squared_distances(x, centroids):
    # ||x - c||^2 expanded; clip wipes tiny negatives from cancellation.
    d2 = (
        np.sum(x * x, axis=1)[:, None]
        - 2.0 * x @ centroids.T
        + np.sum(centroids * centroids, axis=1)[None, :]
    )
    return np.clip(d2, 0.0, None)


def kmeans(x, k: int, seed=0, max_iter: int = 100) -> KMeansResult:
    """Lloyd iterations with distance-weighted (k-means++ style) seeding.

    Converges when assignments stop changing; empty clusters keep their
    previous centroid so inertia never increases.
    """
    x = np.asarray(x, dtype=np.float64)
    n = x.shape[0]
    if n < k:
        raise ValueError(f"cannot form {k} clusters from {n} points")
    rng = np.random.default_rng(seed)

    centroids = np.empty((k, x.shape[1]))
    centroids[0] = x[rng.integers(n)]
    closest = _squared_distances(x, centroids[:1]).ravel()
    for j in range(1, k):
        total = closest.sum()
        if total <= 0:
            centroids[j] = x[rng.integers(n)]
        else:
            centroids[j] = x[rng.choice(n, p=closest / total)]
        closest = np.minimum(closest, _squared_distances(x, centroids[j : j + 1]).ravel())

    assignments = np.full(n, -1, dtype=np.int64)
    history = []
    for iteration in range(1, max_iter + 1):
        d2 = _squared_distances(x, centroids)
        new_assignments = np.argmin(d2, axis=1)
        history.append(float(d2[np.arange(n), new_assignments].sum()))
        if np.array_equal(new_assignments, assignments):
            break
        assignments = new_assignments
        for j in range(k):
            members = x[assignments == j]
            if len(members):
                centroids[j] = members.mean(axis=0)
    return KMeansResult(
        assignments=assignments,
        centroids=centroids,
        inertia=history[-1],
        inertia_history=tuple(history),
        iterations=len(history),
    )


def kmeans_predict(result: KMeansResult, x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    return np.argmin(_squared_distances(x, result.centroids), axis=1)


def homogeneity(assignments, true_labels) -> float:
    """1 - H(class|cluster)/H(class); 1.0 when classes are degenerate."""
    assignments = np.asarray(assignments)
    labels = np.asarray(true_labels)
    if assignments.shape != labels.shape:
        raise ValueError("assignments/labels length mismatch")
    n = labels.shape[0]
    _, class_idx = np.unique(labels, return_inverse=True)
    _, cluster_idx = np.unique(assignments, return_inverse=True)
    class_counts = np.bincount(class_idx)
    p_class = class_counts / n
    h_class = -np.sum(p_class * np.log(p_class))
    if h_class == 0.0:
        return 1.0
    joint = np.zeros((cluster_idx.max() + 1, class_idx.max() + 1))
    np.add.at(joint, (cluster_idx, class_idx), 1.0)
    cluster_totals = joint.sum(axis=1, keepdims=True)
    with np.errstate(divide="ignore", invalid="ignore"):
        cond = np.where(joint > 0, joint / cluster_totals, 1.0)
        h_cond = -np.sum((joint / n) * np.log(cond))
    return float(1.0 - h_cond / h_class)


def pearson(x, y) -> float:
    """Sample Pearson correlation of two equal-length sequences."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1 or x.shape[0] < 2:
        raise ValueError("pearson requires two equal-length sequences of at least 2 values")
    xc = x - x.mean()
    yc = y - y.mean()
    denom = math.sqrt(float(xc @ xc) * float(yc @ yc))
    if denom == 0.0:
        raise ValueError("pearson undefined for a constant sequence")
    return float(xc @ yc / denom)


# --- correlation experiment ----------------------------------------------------


@dataclass(frozen=True)
class SellerOutcome:
    buyer: int
    seller: int
    test_metric: Optional[float]
    measurements: dict  # MeasureKind -> value or None
    skipped: Optional[str] = None


@dataclass(frozen=True)
class CorrelationResult:
    scenario: Scenario
    task: str
    outcomes: tuple
    per_buyer: dict  # MeasureKind -> list of per-buyer correlations

    def mean_correlation(self, kind: MeasureKind) -> float:
        values = self.per_buyer[MeasureKind(kind)]
        if not values:
            raise ValueError(f"no correlations computed for {kind}")
        return float(np.mean(values))

    def to_rows(self) -> list:
        rows = []
        for o in self.outcomes:
            row = {
                "record": "seller",
                "buyer": o.buyer,
                "seller": o.seller,
                "test_metric": o.test_metric,
                "skipped": o.skipped or "",
            }
            row.update({k.value: o.measurements.get(k) for k in MeasureKind})
            rows.append(row)
        for kind in MeasureKind:
            values = self.per_buyer.get(kind, [])
            if values:
                rows.append(
                    {
                        "record": "pearson",
                        "kind": kind.value,
                        "mean": float(np.mean(values)),
                        "buyers": len(values),
                    }
                )
        return rows


def dirichlet_seller(
    world: TrialWorld, buyer_trial: int, seller_idx: int, points: int, alpha: float
) -> EmbeddingSet:
    """Sample one seller whose class proportions follow Dirichlet(alpha)."""
    scenario = world.scenario
    t = scenario.template
    rng = np.random.default_rng(
        cell_seed(scenario.seed, buyer_trial, STREAM_TASK, seller_idx)
    )
    proportions = rng.dirichlet(np.full(t.classes, alpha))
    counts = rng.multinomial(points, proportions)
    dataset = sample_mixture(
        world.class_means(0),
        [t.within_scale] * t.classes,
        counts,
        seed=cell_seed(scenario.seed, buyer_trial, STREAM_TASK, seller_idx, 1),
        name=f"dirichlet-seller{seller_idx}",
    )
    if world.shared_directions is not None:
        from .data import add_shared_factors

        dataset = add_shared_factors(
            dataset,
            world.shared_directions,
            world.shared_scales,
            seed=cell_seed(scenario.seed, buyer_trial, STREAM_TASK, seller_idx, 2),
        )
    return dataset


def _binary_labels(labels: np.ndarray, positive: np.ndarray) -> np.ndarray:
    return np.isin(labels, positive).astype(np.int64)


def run_correlation_experiment(scenario: Scenario, task: str = "clustering") -> CorrelationResult:
    """Correlate data measurements with downstream test performance.

    One buyer per trial. Each of the scenario's Dirichlet sellers trains a
    model on its own sample (binary logistic regression or k-means with one
    cluster per class); performance is scored on the buyer's held-out test
    set and Pearson-correlated with every measurement across sellers, then
    averaged over buyers.
    """
    if task not in TASKS:
        raise ValueError(f"unknown task {task!r}")
    if scenario.dirichlet_sellers < 2:
        raise ValueError("correlation experiment needs at least two Dirichlet sellers")

    classes = scenario.template.classes
    outcomes = []
    per_buyer: dict = {kind: [] for kind in MeasureKind}
    for buyer_trial in range(scenario.trials):
        world = TrialWorld(scenario, buyer_trial)
        buyer = world.buyer()
        test = world.test_set()
        query = compute_query(buyer, scenario.k)
        config = MeasureConfig(omega=default_omega(buyer, query))
        buyer_rep = seller_report(buyer, query, config)

        rng = np.random.default_rng(cell_seed(scenario.seed, buyer_trial, STREAM_TASK))
        positive = rng.choice(classes, size=max(1, classes // 2), replace=False)
        test_binary = _binary_labels(test.labels, positive)

        for seller_idx in range(scenario.dirichlet_sellers):
            seller = dirichlet_seller(
                world, buyer_trial, seller_idx, scenario.dirichlet_points, scenario.dirichlet_alpha
            )
            measurements: dict = {}
            try:
                rep = seller_report(seller, query, config)
                for kind in MeasureKind:
                    try:
                        measurements[kind] = evaluate(kind, buyer_rep, rep, config.jitter)
                    except ValueError:
                        measurements[kind] = None
            except ValueError:
                measurements = {kind: None for kind in MeasureKind}

            skipped = None
            metric = None
            try:
                if task == "binary":
                    train = EmbeddingSet(
                        vectors=seller.vectors,
                        labels=_binary_labels(seller.labels, positive),
                        name=seller.name,
                    )
                    model = logistic_fit(train)
                    metric = accuracy(logistic_predict(model, test.vectors), test_binary)
                else:
                    fit = kmeans(
                        seller.vectors,
                        classes,
                        seed=cell_seed(scenario.seed, buyer_trial, STREAM_TASK, seller_idx, 3),
                    )
                    metric = homogeneity(kmeans_predict(fit, test.vectors), test.labels)
            except ValueError as exc:
                skipped = str(exc)
            outcomes.append(
                SellerOutcome(
                    buyer=buyer_trial,
                    seller=seller_idx,
                    test_metric=metric,
                    measurements=measurements,
                    skipped=skipped,
                )
            )

        buyer_outcomes = [o for o in outcomes if o.buyer == buyer_trial]
        for kind in MeasureKind:
            pairs = [
                (o.measurements.get(kind), o.test_metric)
                for o in buyer_outcomes
                if o.test_metric is not None and o.measurements.get(kind) is not None
            ]
            if len(pairs) >= 2:
                values = [p[0] for p in pairs]
                metrics = [p[1] for p in pairs]
                try:
                    per_buyer[kind].append(pearson(values, metrics))
                except ValueError:
                    pass
    return CorrelationResult(
        scenario=scenario, task=task, outcomes=tuple(outcomes), per_buyer=per_buyer
    )
