"""Multi-seller marketplace simulation: seller ranking, duplicate, noise and
size sweeps over synthetic embedding scenarios.

A scenario describes one synthetic "world" per trial: optional covariance
axes shared by every dataset (embedding corpora share their strongest
directions), plus per-dataset base offsets and class means. The buyer's
dataset is dataset 0; the IID seller samples from it, every other seller
gets a fresh dataset. Per-cell seeds derive from
(scenario seed, trial, stream, dataset, role) so results are independent of
evaluation order.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .data import (
    CORRUPTION_KINDS,
    EmbeddingSet,
    add_shared_factors,
    allocate_counts,
    corrupt,
    inject_duplicates,
    sample_mixture,
)
from .linalg import random_orthonormal_rows
from .measures import (
    DEFAULT_K,
    MeasureConfig,
    MeasureKind,
    compute_query,
    default_omega,
    evaluate,
    seller_report,
)

# Seed-stream tags; every cell seed is SeedSequence([seed, trial, stream, ...]).
STREAM_WORLD = 1  # reserved (shared axes are fixed coordinates)
STREAM_MEANS = 2
STREAM_SAMPLE = 3
STREAM_DUPLICATE = 4
STREAM_CORRUPT = 5
STREAM_DECOY = 6
STREAM_TASK = 7

ROLE_BUYER = 0
ROLE_TEST = 1
ROLE_SELLER_BASE = 10


def cell_seed(*parts) -> np.random.SeedSequence:
    return np.random.SeedSequence([int(p) & 0xFFFFFFFF for p in parts])


def dcg_of_rank(rank: int) -> float:
    """Discounted cumulative gain of the single relevant seller at ``rank``."""
    if rank < 1:
        raise ValueError("rank must be at least 1")
    return 1.0 / math.log2(rank + 1)


@dataclass(frozen=True)
class DatasetTemplate:
    """Structural knobs shared by every synthetic dataset in a scenario."""

    dim: int = 512
    classes: int = 10
    mean_scale: float = 1.0  # length of the per-dataset base direction
    class_scale: float = 0.5  # spread of class means around the base
    within_scale: float = 0.013  # per-coordinate within-class std
    class_weights: Optional[tuple] = None  # sampling weights, None = uniform
    shared_axes: int = 0  # covariance axes common to all datasets
    shared_scale: float = 0.0  # std along the strongest shared axis
    shared_decay: float = 0.7  # geometric decay of the following axes

    def weights(self) -> np.ndarray:
        if self.class_weights is None:
            return np.full(self.classes, 1.0 / self.classes)
        w = np.asarray(self.class_weights, dtype=np.float64)
        if w.shape != (self.classes,) or w.min() <= 0:
            raise ValueError("class_weights must be positive, one per class")
        return w / w.sum()


@dataclass(frozen=True)
class SellerSpec:
    points: int = 10000
    distribution: str = "fresh"  # "iid" shares the buyer's dataset
    duplication: int = 1
    corruption: Optional[tuple] = None  # (kind, severity)
    scale: float = 1.0  # systematic multiplier on the seller's embeddings
    mean_factor: float = 1.0  # systematic multiplier on the seller's mean only

    def __post_init__(self):
        if self.points < 1:
            raise ValueError("seller needs at least one point")
        if self.distribution not in ("iid", "fresh"):
            raise ValueError(f"unknown seller distribution {self.distribution!r}")
        if self.duplication < 1:
            raise ValueError("duplication factor must be >= 1")
        if self.scale <= 0:
            raise ValueError("seller scale must be positive")
        if self.mean_factor <= 0:
            raise ValueError("seller mean_factor must be positive")
        if self.corruption is not None:
            kind, severity = self.corruption
            if kind not in CORRUPTION_KINDS:
                raise ValueError(f"unknown corruption kind {kind!r}")
            if not 1 <= int(severity) <= 5:
                raise ValueError("corruption severity must be in 1..5")


@dataclass(frozen=True)
class Scenario:
    """Declarative description of a simulated marketplace."""

    name: str = "scenario"
    seed: int = 0
    trials: int = 10
    k: int = DEFAULT_K
    buyer_points: int = 100
    test_points: int = 500
    template: DatasetTemplate = field(default_factory=DatasetTemplate)
    sellers: tuple = ()
    iid_seller_index: int = 0
    dirichlet_sellers: int = 0
    dirichlet_points: int = 5000
    dirichlet_alpha: float = 0.5

    def __post_init__(self):
        if self.trials < 1:
            raise ValueError("trials must be >= 1")
        if self.buyer_points < self.k:
            raise ValueError("buyer needs at least k points")

    def require_ranking_sellers(self):
        if not self.sellers:
            raise ValueError("scenario defines no sellers")
        iid = [i for i, s in enumerate(self.sellers) if s.distribution == "iid"]
        if iid != [self.iid_seller_index]:
            raise ValueError("ranking scenarios need exactly one IID seller at iid_seller_index")

    def iid_spec(self) -> "SellerSpec":
        """The IID seller's spec; sweeps fall back to a plain 10k-point one."""
        if self.sellers and self.iid_seller_index < len(self.sellers):
            spec = self.sellers[self.iid_seller_index]
            if spec.distribution == "iid":
                return spec
        return SellerSpec(points=10000, distribution="iid")


# --- scenario files ----------------------------------------------------------

_TEMPLATE_KEYS = {f.name for f in DatasetTemplate.__dataclass_fields__.values()}  # type: ignore[attr-defined]
_SELLER_KEYS = {"points", "distribution", "duplication", "corruption", "scale", "mean_factor"}
_SCENARIO_KEYS = {
    "name", "seed", "trials", "k", "buyer_points", "test_points", "template",
    "sellers", "iid_seller_index", "dirichlet_sellers", "dirichlet_points",
    "dirichlet_alpha",
}


def scenario_from_dict(obj: dict) -> Scenario:
    unknown = set(obj) - _SCENARIO_KEYS
    if unknown:
        raise ValueError(f"unknown scenario keys: {sorted(unknown)}")
    template_obj = dict(obj.get("template", {}))
    unknown = set(template_obj) - _TEMPLATE_KEYS
    if unknown:
        raise ValueError(f"unknown template keys: {sorted(unknown)}")
    if template_obj.get("class_weights") is not None:
        template_obj["class_weights"] = tuple(template_obj["class_weights"])
    template = DatasetTemplate(**template_obj)
    sellers = []
    for raw in obj.get("sellers", []):
        unknown = set(raw) - _SELLER_KEYS
        if unknown:
            raise ValueError(f"unknown seller keys: {sorted(unknown)}")
        corruption = raw.get("corruption")
        if corruption is not None:
            corruption = (corruption["kind"], int(corruption["severity"]))
        sellers.append(
            SellerSpec(
                points=int(raw.get("points", 10000)),
                distribution=raw.get("distribution", "fresh"),
                duplication=int(raw.get("duplication", 1)),
                corruption=corruption,
                scale=float(raw.get("scale", 1.0)),
                mean_factor=float(raw.get("mean_factor", 1.0)),
            )
        )
    fields = {k: obj[k] for k in obj if k not in ("template", "sellers")}
    return Scenario(template=template, sellers=tuple(sellers), **fields)


def scenario_to_dict(scenario: Scenario) -> dict:
    template = scenario.template
    return {
        "name": scenario.name,
        "seed": scenario.seed,
        "trials": scenario.trials,
        "k": scenario.k,
        "buyer_points": scenario.buyer_points,
        "test_points": scenario.test_points,
        "template": {
            "dim": template.dim,
            "classes": template.classes,
            "mean_scale": template.mean_scale,
            "class_scale": template.class_scale,
            "within_scale": template.within_scale,
            "class_weights": list(template.class_weights) if template.class_weights else None,
            "shared_axes": template.shared_axes,
            "shared_scale": template.shared_scale,
            "shared_decay": template.shared_decay,
        },
        "sellers": [
            {
                "points": s.points,
                "distribution": s.distribution,
                "duplication": s.duplication,
                "corruption": None
                if s.corruption is None
                else {"kind": s.corruption[0], "severity": s.corruption[1]},
                "scale": s.scale,
                "mean_factor": s.mean_factor,
            }
            for s in scenario.sellers
        ],
        "iid_seller_index": scenario.iid_seller_index,
        "dirichlet_sellers": scenario.dirichlet_sellers,
        "dirichlet_points": scenario.dirichlet_points,
        "dirichlet_alpha": scenario.dirichlet_alpha,
    }


def load_scenario(path) -> Scenario:
    with open(path) as fh:
        return scenario_from_dict(json.load(fh))


def save_scenario(scenario: Scenario, path) -> None:
    Path(path).write_text(json.dumps(scenario_to_dict(scenario), indent=2) + "\n")


# --- synthetic worlds ---------------------------------------------------------


class TrialWorld:
    """Dataset factory for one (scenario, trial) pair."""

    def __init__(self, scenario: Scenario, trial: int):
        self.scenario = scenario
        self.trial = trial
        t = scenario.template
        if t.shared_axes > 0 and t.shared_scale > 0:
            # Shared dominant axes are a global property of the embedding
            # space, so they sit on fixed coordinates, like the heavy
            # coordinates real embedding models produce.
            self.shared_directions = np.eye(t.shared_axes, t.dim)
            self.shared_scales = t.shared_scale * t.shared_decay ** np.arange(t.shared_axes)
        else:
            self.shared_directions = None
            self.shared_scales = None
        self._means_cache: dict = {}

    def class_means(self, dataset_id: int) -> np.ndarray:
        if dataset_id not in self._means_cache:
            t = self.scenario.template
            rng = np.random.default_rng(
                cell_seed(self.scenario.seed, self.trial, STREAM_MEANS, dataset_id)
            )
            base = rng.standard_normal(t.dim)
            base *= t.mean_scale / np.linalg.norm(base)
            # Orthonormal class directions keep the dataset mean out of the
            # centered class span, so PCA-basis ambiguity inside that span
            # cannot leak into mean-based measurements.
            spread = random_orthonormal_rows(rng, t.classes, t.dim)
            self._means_cache[dataset_id] = base + t.class_scale * spread
        return self._means_cache[dataset_id]

    def sample(self, dataset_id: int, points: int, role: int, name: str) -> EmbeddingSet:
        t = self.scenario.template
        counts = allocate_counts(t.weights(), points)
        dataset = sample_mixture(
            self.class_means(dataset_id),
            [t.within_scale] * t.classes,
            counts,
            seed=cell_seed(self.scenario.seed, self.trial, STREAM_SAMPLE, dataset_id, role),
            name=name,
        )
        if self.shared_directions is not None:
            dataset = add_shared_factors(
                dataset,
                self.shared_directions,
                self.shared_scales,
                seed=cell_seed(
                    self.scenario.seed, self.trial, STREAM_SAMPLE, dataset_id, role, 1
                ),
            )
        return dataset

    def buyer(self) -> EmbeddingSet:
        return self.sample(0, self.scenario.buyer_points, ROLE_BUYER, "buyer")

    def test_set(self) -> EmbeddingSet:
        return self.sample(0, self.scenario.test_points, ROLE_TEST, "test")

    def base_seller(self, index: int, spec: SellerSpec) -> EmbeddingSet:
        """Seller sample before duplication/corruption are applied."""
        dataset_id = 0 if spec.distribution == "iid" else index + 1
        dataset = self.sample(
            dataset_id, spec.points, ROLE_SELLER_BASE + index, f"seller{index}"
        )
        vectors = dataset.vectors
        if spec.scale != 1.0:
            vectors = vectors * spec.scale
        if spec.mean_factor != 1.0:
            vectors = vectors + (spec.mean_factor - 1.0) * vectors.mean(axis=0)
        if vectors is not dataset.vectors:
            dataset = EmbeddingSet(vectors=vectors, labels=dataset.labels, name=dataset.name)
        return dataset

    def seller(self, index: int, spec: SellerSpec) -> EmbeddingSet:
        dataset = self.base_seller(index, spec)
        if spec.duplication > 1:
            dataset = inject_duplicates(
                dataset,
                spec.duplication,
                seed=cell_seed(self.scenario.seed, self.trial, STREAM_DUPLICATE, index),
            )
        if spec.corruption is not None:
            kind, severity = spec.corruption
            dataset = corrupt(
                dataset,
                kind,
                severity,
                seed=cell_seed(self.scenario.seed, self.trial, STREAM_CORRUPT, index),
            )
        return dataset


def _trial_context(scenario: Scenario, trial: int):
    """Buyer data, query, measurement config and buyer report for one trial."""
    world = TrialWorld(scenario, trial)
    buyer = world.buyer()
    query = compute_query(buyer, scenario.k)
    config = MeasureConfig(omega=default_omega(buyer, query))
    return world, buyer, query, config, seller_report(buyer, query, config)


# --- ranking ------------------------------------------------------------------


@dataclass(frozen=True)
class TrialRanking:
    kind: MeasureKind
    trial: int
    values: tuple  # per seller, None where the measure failed
    ordering: tuple  # seller indices, best first
    iid_rank: int
    dcg: float
    ties: int
    failures: int


@dataclass(frozen=True)
class RankingResult:
    scenario: Scenario
    kinds: tuple
    trials: tuple  # TrialRanking records

    def per_kind(self, kind: MeasureKind) -> list:
        return [t for t in self.trials if t.kind == kind]

    def mean_rank(self, kind: MeasureKind) -> float:
        return float(np.mean([t.iid_rank for t in self.per_kind(kind)]))

    def mean_dcg(self, kind: MeasureKind) -> float:
        return float(np.mean([t.dcg for t in self.per_kind(kind)]))

    def to_rows(self) -> list:
        rows = []
        for t in self.trials:
            for seller, value in enumerate(t.values):
                rows.append(
                    {
                        "record": "measurement",
                        "kind": t.kind.value,
                        "trial": t.trial,
                        "seller": seller,
                        "value": value,
                        "rank": int(np.where(np.array(t.ordering) == seller)[0][0]) + 1,
                        "is_iid": int(seller == self.scenario.iid_seller_index),
                    }
                )
            rows.append(
                {
                    "record": "trial",
                    "kind": t.kind.value,
                    "trial": t.trial,
                    "rank": t.iid_rank,
                    "dcg": t.dcg,
                    "ties": t.ties,
                    "warnings": t.failures,
                }
            )
        for kind in self.kinds:
            per = self.per_kind(kind)
            ranks = [t.iid_rank for t in per]
            dcgs = [t.dcg for t in per]
            rows.append(
                {
                    "record": "aggregate",
                    "kind": kind.value,
                    "trials": len(per),
                    "rank": float(np.mean(ranks)),
                    "std_rank": _std(ranks),
                    "dcg": float(np.mean(dcgs)),
                    "std_dcg": _std(dcgs),
                    "ties": int(sum(t.ties for t in per)),
                    "warnings": int(sum(t.failures for t in per)),
                }
            )
        return rows


def _std(values) -> float:
    return float(np.std(values, ddof=1)) if len(values) > 1 else 0.0


def rank_sellers(values: Sequence, maximize: bool = True) -> tuple:
    """Seller ordering, best first; failed (None) values rank last and ties
    break on the lower seller index."""
    order = sorted(
        range(len(values)),
        key=lambda j: (
            values[j] is None,
            -values[j] if (maximize and values[j] is not None) else (values[j] or 0.0),
            j,
        ),
    )
    valued = [v for v in values if v is not None]
    ties = len(valued) - len(set(valued))
    return tuple(order), ties


def run_ranking(
    scenario: Scenario,
    kinds=tuple(MeasureKind),
    orientations: Optional[dict] = None,
) -> RankingResult:
    """Rank every seller under every measure, trial by trial.

    ``orientations`` maps kinds to True (sort descending, the default for
    every kind including "difference") or False to minimize instead.
    """
    scenario.require_ranking_sellers()
    kinds = tuple(MeasureKind(k) for k in kinds)
    orientations = {MeasureKind(k): bool(v) for k, v in (orientations or {}).items()}
    records = []
    for trial in range(scenario.trials):
        world, buyer, query, config, buyer_rep = _trial_context(scenario, trial)
        reports: list = []
        for index, spec in enumerate(scenario.sellers):
            try:
                reports.append(seller_report(world.seller(index, spec), query, config))
            except ValueError:
                reports.append(None)
        for kind in kinds:
            values = []
            failures = 0
            for rep in reports:
                if rep is None:
                    values.append(None)
                    failures += 1
                    continue
                try:
                    values.append(evaluate(kind, buyer_rep, rep, config.jitter))
                except ValueError:
                    values.append(None)
                    failures += 1
            ordering, ties = rank_sellers(values, orientations.get(kind, True))
            iid_rank = ordering.index(scenario.iid_seller_index) + 1
            records.append(
                TrialRanking(
                    kind=kind,
                    trial=trial,
                    values=tuple(values),
                    ordering=ordering,
                    iid_rank=iid_rank,
                    dcg=dcg_of_rank(iid_rank),
                    ties=ties,
                    failures=failures,
                )
            )
    return RankingResult(scenario=scenario, kinds=kinds, trials=tuple(records))


# --- sweeps -------------------------------------------------------------------


@dataclass(frozen=True)
class SweepCell:
    params: tuple  # ((name, value), ...)
    kind: MeasureKind
    values: tuple  # one per trial, None on failure

    @property
    def mean(self) -> Optional[float]:
        valued = [v for v in self.values if v is not None]
        return float(np.mean(valued)) if valued else None

    @property
    def std(self) -> float:
        valued = [v for v in self.values if v is not None]
        return _std(valued)


@dataclass(frozen=True)
class SweepResult:
    scenario: Scenario
    sweep: str
    cells: tuple

    def cell(self, kind: MeasureKind, **params) -> SweepCell:
        want = tuple(sorted(params.items()))
        for cell in self.cells:
            if cell.kind == kind and tuple(sorted(cell.params)) == want:
                return cell
        raise KeyError(f"no sweep cell for {kind} {params}")

    def to_rows(self) -> list:
        rows = []
        for cell in self.cells:
            base = {"record": "trial", "sweep": self.sweep, "kind": cell.kind.value}
            base.update(dict(cell.params))
            for trial, value in enumerate(cell.values):
                rows.append({**base, "trial": trial, "value": value})
            rows.append(
                {
                    "record": "aggregate",
                    "sweep": self.sweep,
                    "kind": cell.kind.value,
                    **dict(cell.params),
                    "trials": len(cell.values),
                    "mean": cell.mean,
                    "std": cell.std,
                }
            )
        return rows


def _evaluate_safe(kind, buyer_rep, rep, jitter):
    try:
        return evaluate(kind, buyer_rep, rep, jitter)
    except ValueError:
        return None


def run_duplicate_sweep(
    scenario: Scenario,
    factors: Sequence[int] = (1, 10, 100, 200),
    kinds=tuple(MeasureKind),
) -> SweepResult:
    """Measure a buyer-IID seller at increasing duplication factors.

    Within a trial every factor sees the same underlying seller sample, so
    factor columns are directly comparable.
    """
    if any(f < 1 for f in factors):
        raise ValueError("duplication factors must be >= 1")
    kinds = tuple(MeasureKind(k) for k in kinds)
    iid_spec = scenario.iid_spec()
    table: dict = {(f, kind): [] for f in factors for kind in kinds}
    for trial in range(scenario.trials):
        world, buyer, query, config, buyer_rep = _trial_context(scenario, trial)
        base = world.base_seller(scenario.iid_seller_index, replace(iid_spec, duplication=1))
        for factor in factors:
            dup = inject_duplicates(
                base, factor, seed=cell_seed(scenario.seed, trial, STREAM_DUPLICATE, factor)
            )
            rep = seller_report(dup, query, config)
            for kind in kinds:
                table[(factor, kind)].append(_evaluate_safe(kind, buyer_rep, rep, config.jitter))
    cells = tuple(
        SweepCell(params=(("factor", f),), kind=kind, values=tuple(table[(f, kind)]))
        for f in factors
        for kind in kinds
    )
    return SweepResult(scenario=scenario, sweep="duplicates", cells=cells)


def run_noise_sweep(
    scenario: Scenario,
    corruption_kinds: Sequence[str] = ("gaussian",),
    severities: Sequence[int] = (1, 2, 3, 4, 5),
    kinds=tuple(MeasureKind),
) -> SweepResult:
    """Measure a buyer-IID seller under corruptions of rising severity.

    Severity 0 rows hold the uncorrupted baseline. The same clean seller
    sample underlies every severity within a trial.
    """
    for kind in corruption_kinds:
        if kind not in CORRUPTION_KINDS:
            raise ValueError(f"unknown corruption kind {kind!r}")
    kinds = tuple(MeasureKind(k) for k in kinds)
    iid_spec = scenario.iid_spec()
    levels = [0] + [int(s) for s in severities]
    table: dict = {
        (ck, s, kind): [] for ck in corruption_kinds for s in levels for kind in kinds
    }
    for trial in range(scenario.trials):
        world, buyer, query, config, buyer_rep = _trial_context(scenario, trial)
        base = world.base_seller(scenario.iid_seller_index, replace(iid_spec, corruption=None))
        base_rep = seller_report(base, query, config)
        for ck in corruption_kinds:
            for severity in levels:
                if severity == 0:
                    rep = base_rep
                else:
                    # One noise realization per trial: severities are nested
                    # strengths of the same corruption pattern, the way
                    # image-corruption benchmarks grade severity.
                    noisy = corrupt(
                        base,
                        ck,
                        severity,
                        seed=cell_seed(scenario.seed, trial, STREAM_CORRUPT),
                    )
                    rep = seller_report(noisy, query, config)
                for kind in kinds:
                    table[(ck, severity, kind)].append(
                        _evaluate_safe(kind, buyer_rep, rep, config.jitter)
                    )
    cells = tuple(
        SweepCell(
            params=(("corruption", ck), ("severity", s)),
            kind=kind,
            values=tuple(table[(ck, s, kind)]),
        )
        for ck in corruption_kinds
        for s in levels
        for kind in kinds
    )
    return SweepResult(scenario=scenario, sweep="noise", cells=cells)


def run_size_sweep(
    scenario: Scenario,
    seller_sizes: Optional[Sequence[int]] = None,
    buyer_sizes: Optional[Sequence[int]] = None,
    kinds=tuple(MeasureKind),
) -> SweepResult:
    """Vary the seller's or the buyer's point count, holding the other fixed.

    Seller sweep: buyer fixed at the scenario's buyer_points, seller IID with
    the buyer. Buyer sweep: the same IID seller spec fixed at 5000 points.
    Scenario seller specs can carry a small systematic scale deficit, the way
    two splits of a real corpus differ, so measurements are not pure
    sampling noise.
    """
    if (seller_sizes is None) == (buyer_sizes is None):
        raise ValueError("pass exactly one of seller_sizes or buyer_sizes")
    kinds = tuple(MeasureKind(k) for k in kinds)
    sizes = [int(s) for s in (seller_sizes if seller_sizes is not None else buyer_sizes)]
    if any(s < scenario.k for s in sizes):
        raise ValueError("sizes must be at least k")
    param = "seller_points" if seller_sizes is not None else "buyer_points"
    table: dict = {(size, kind): [] for size in sizes for kind in kinds}
    for trial in range(scenario.trials):
        world = TrialWorld(scenario, trial)
        if seller_sizes is not None:
            buyer = world.buyer()
            query = compute_query(buyer, scenario.k)
            config = MeasureConfig(omega=default_omega(buyer, query))
            buyer_rep = seller_report(buyer, query, config)
            for size in sizes:
                seller = world.base_seller(
                    scenario.iid_seller_index, replace(scenario.iid_spec(), points=size)
                )
                rep = seller_report(seller, query, config)
                for kind in kinds:
                    table[(size, kind)].append(
                        _evaluate_safe(kind, buyer_rep, rep, config.jitter)
                    )
        else:
            seller = world.base_seller(
                scenario.iid_seller_index, replace(scenario.iid_spec(), points=5000)
            )
            for i, size in enumerate(sizes):
                buyer = world.sample(0, size, ROLE_SELLER_BASE + 1000 + i, "buyer")
                query = compute_query(buyer, scenario.k)
                config = MeasureConfig(omega=default_omega(buyer, query))
                buyer_rep = seller_report(buyer, query, config)
                rep = seller_report(seller, query, config)
                for kind in kinds:
                    table[(size, kind)].append(
                        _evaluate_safe(kind, buyer_rep, rep, config.jitter)
                    )
    cells = tuple(
        SweepCell(params=((param, size),), kind=kind, values=tuple(table[(size, kind)]))
        for size in sizes
        for kind in kinds
    )
    return SweepResult(scenario=scenario, sweep="size", cells=cells)
