"""Experiment protocols: the SNR-threshold sweep, FL comparisons, ablations and PCA."""

from __future__ import annotations

import csv
import dataclasses
import enum
import hashlib
import io
import json
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

from . import flcore as fl
from . import neuralnet as nn
from .datastore import (
    ALL_SCHEMES,
    Dataset,
    ScenarioKind,
    ScenarioSpec,
    filter_by_snr,
    generate_dataset,
    sample_scenario,
)
from .errors import ConfigurationError, DimensionError
from .signal import NO_IMPAIRMENTS, SNR_GRID, ImpairmentSpec

SWEEP = 11  # stream purpose for sweep subsampling
TEST_INDEX_OFFSET = 1_000_000


@dataclass(frozen=True)
class RunConfig:
    """Everything needed to reproduce a run.  Defaults follow the full-scale protocol."""

    seed: int = 0
    clients: int = 10
    global_epochs: int = 100
    local_epochs: int = 10
    batch_size: int = 400
    lr: float = 1e-3
    theta: int = -12
    queue: int = 1500
    clusters: int = 2  # 0 means no clustering (model chained client to client)
    scenario: str = "iid"
    algorithm: str = "fedvaccine"
    repeats: int = 4
    snr_grid: tuple[int, ...] = SNR_GRID
    frames_per_cell: int = 60
    test_frames_per_cell: int = 20
    schemes: tuple[int, ...] = ALL_SCHEMES
    samples_per_round: int = 1000
    feature_bounds: tuple[int, int] = (400, 600)
    prox_mu: float = 0.01
    queue_extension: int = 500
    queue_unit: int = 1000
    impairments: bool = True
    channels: tuple[int, int] = (16, 32)
    hidden: int = 128
    dropout: float = 0.5

    def __post_init__(self):
        positive = ("clients", "global_epochs", "batch_size", "repeats", "frames_per_cell",
                    "test_frames_per_cell", "samples_per_round", "queue_unit", "hidden")
        for name in positive:
            if getattr(self, name) <= 0:
                raise ConfigurationError(f"{name} must be positive")
        for name in ("local_epochs", "queue", "clusters", "queue_extension", "seed"):
            if getattr(self, name) < 0:
                raise ConfigurationError(f"{name} must be nonnegative")
        if self.lr <= 0 or self.prox_mu < 0 or not 0 <= self.dropout < 1:
            raise ConfigurationError("lr > 0, prox_mu >= 0 and 0 <= dropout < 1 are required")
        if self.theta not in SNR_GRID:
            raise ConfigurationError(f"theta={self.theta} must be an even integer in [-20, 18]")
        if not self.snr_grid or any(s not in SNR_GRID for s in self.snr_grid):
            raise ConfigurationError("snr_grid values must be even integers in [-20, 18]")
        if self.clusters > self.clients:
            raise ConfigurationError("clusters cannot exceed clients")
        if len(set(self.schemes)) != len(self.schemes) or any(s not in ALL_SCHEMES for s in self.schemes):
            raise ConfigurationError("schemes must be distinct modulation ordinals 0..7")
        ScenarioKind.parse(self.scenario)
        fl.AlgorithmKind.parse(self.algorithm)
        ScenarioSpec(ScenarioKind.IID, self.samples_per_round, tuple(self.feature_bounds))

    def replace(self, **changes) -> "RunConfig":
        return dataclasses.replace(self, **changes)

    @property
    def class_count(self) -> int:
        return len(self.schemes)

    def train_config(self) -> fl.TrainConfig:
        return fl.TrainConfig(self.local_epochs, self.batch_size, self.lr, "adam", self.prox_mu)

    def architecture(self) -> list[nn.LayerSpec]:
        return nn.default_architecture(self.class_count, self.channels, self.hidden, self.dropout)

    def impairment(self) -> ImpairmentSpec:
        return ImpairmentSpec() if self.impairments else NO_IMPAIRMENTS

    def resolved(self) -> str:
        """Canonical ``key=value`` text; parses back to an equal config."""
        lines = []
        for f in dataclasses.fields(self):
            value = getattr(self, f.name)
            if isinstance(value, tuple):
                value = ",".join(str(v) for v in value)
            elif isinstance(value, bool):
                value = "true" if value else "false"
            lines.append(f"{f.name}={value}")
        return "\n".join(lines) + "\n"

    def config_hash(self) -> str:
        # the seed is excluded so repeats of one setup share a hash; run ids add it back
        text = "".join(l + "\n" for l in self.resolved().splitlines() if not l.startswith("seed="))
        return hashlib.sha256(text.encode()).hexdigest()[:12]

    def run_id(self, seed: int | None = None) -> str:
        return f"{self.config_hash()}-s{self.seed if seed is None else seed}"


def theta_candidates() -> list[int]:
    return list(range(-20, 19, 2))


# -- data -------------------------------------------------------------------------


def make_pools(config: RunConfig, seed: int | None = None) -> tuple[Dataset, Dataset]:
    """Training pool and a disjoint test split over every (scheme, SNR) cell."""
    seed = config.seed if seed is None else seed
    kw = dict(impair=config.impairment())
    train = generate_dataset(config.schemes, config.snr_grid, config.frames_per_cell, seed, **kw)
    test = generate_dataset(config.schemes, config.snr_grid, config.test_frames_per_cell, seed,
                            index_offset=TEST_INDEX_OFFSET, **kw)
    return train, test


def scenario_spec(config: RunConfig, scenario: str | ScenarioKind | None = None) -> ScenarioSpec:
    kind = ScenarioKind.parse(config.scenario if scenario is None else scenario)
    return ScenarioSpec(kind, config.samples_per_round, tuple(config.feature_bounds))


def make_data_fn(seed: int, pool: Dataset, spec: ScenarioSpec) -> fl.DataFn:
    """Client data keyed only by (seed, client, round): identical across algorithms."""

    def data_fn(client: int, round_index: int) -> Dataset:
        return sample_scenario(spec, pool, client, round_index, fl.stream(seed, fl.DATA, client, round_index))

    return data_fn


def build_federation(
    config: RunConfig,
    kind: fl.AlgorithmKind | str,
    pool: Dataset,
    test: Dataset,
    *,
    seed: int | None = None,
    scenario: str | ScenarioKind | None = None,
    queue: int | None = None,
    clusters: int | None = None,
    theta: int | None = None,
) -> fl.Federation:
    seed = config.seed if seed is None else seed
    kind = fl.AlgorithmKind.parse(kind)
    clusters = config.clusters if clusters is None else clusters
    if kind is fl.AlgorithmKind.FEDVACCINE and clusters == 0:
        kind = fl.AlgorithmKind.FEDVACCINE_CHAIN
    init = nn.init_model(config.architecture(), seed, (2, pool.frame_length, 1))
    clients = fl.make_clients(config.clients, config.queue if queue is None else queue,
                              pool.class_count, pool.frame_length)
    return fl.Federation(
        kind=kind,
        state=fl.GlobalState(init, seed),
        clients=clients,
        config=config.train_config(),
        data_fn=make_data_fn(seed, pool, scenario_spec(config, scenario)),
        test=test,
        theta=config.theta if theta is None else theta,
        cluster_count=max(clusters, 1),
    )


def epochs_to_reach(curve: Sequence[float], target: float) -> int | None:
    """First 1-based round whose accuracy is at least ``target``."""
    for i, acc in enumerate(curve, start=1):
        if acc >= target:
            return i
    return None


# -- records --------------------------------------------------------------------------


@dataclass
class MetricRecord:
    """One CSV row."""

    run_id: str
    algorithm: str
    scenario: str
    round: int
    theta: int
    clusters: int
    queue: int
    accuracy: float
    loss: float
    per_snr: dict[int, float] = field(default_factory=dict)

    @classmethod
    def from_round(cls, m: fl.RoundMetrics, run_id: str, scenario: str, theta: int, clusters: int, queue: int):
        return cls(run_id, m.algorithm, scenario, m.round, theta, clusters, queue, m.accuracy, m.loss,
                   dict(m.per_snr_accuracy))


CSV_COLUMNS = ["run_id", "algorithm", "scenario", "round", "theta", "clusters", "queue", "accuracy", "loss"] + [
    f"snr_{s}" for s in SNR_GRID
]


def _fmt(x: float) -> str:
    return f"{x:.6f}"


def metrics_csv(records: Iterable[MetricRecord]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_COLUMNS)
    for r in records:
        row = [r.run_id, r.algorithm, r.scenario, r.round, r.theta, r.clusters, r.queue, _fmt(r.accuracy), _fmt(r.loss)]
        row += [_fmt(r.per_snr[s]) if s in r.per_snr else "" for s in SNR_GRID]
        w.writerow(row)
    return buf.getvalue()


def write_metrics_csv(records: Iterable[MetricRecord], path: str | Path) -> None:
    Path(path).write_text(metrics_csv(records), encoding="utf-8", newline="")


def write_summary(summary: dict, path: str | Path) -> None:
    Path(path).write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n", encoding="utf-8")


# -- SNR-threshold sweep ----------------------------------------------------------


@dataclass
class SweepRow:
    theta: int
    repeat: int
    seed: int
    train_size: int
    max_train_accuracy: float
    max_test_accuracy: float
    min_test_loss: float


@dataclass
class SweepResult:
    rows: list[SweepRow]
    records: list[MetricRecord]
    repeats: int

    def thetas(self) -> list[int]:
        return sorted({r.theta for r in self.rows})

    def mean_accuracy(self, theta: int) -> float:
        return float(np.mean([r.max_test_accuracy for r in self.rows if r.theta == theta]))

    def std_accuracy(self, theta: int) -> float:
        vals = [r.max_test_accuracy for r in self.rows if r.theta == theta]
        if len(vals) != self.repeats:
            raise ValueError(f"theta {theta} has {len(vals)} repeats, expected {self.repeats}")
        return float(np.std(vals))

    @property
    def best_theta(self) -> int:
        means = {t: self.mean_accuracy(t) for t in self.thetas()}
        return max(means, key=lambda t: (means[t], -t))

    def table(self) -> list[dict]:
        return [
            {"theta": t, "mean_max_test_accuracy": self.mean_accuracy(t), "std": self.std_accuracy(t),
             "mean_max_train_accuracy": float(np.mean([r.max_train_accuracy for r in self.rows if r.theta == t]))}
            for t in self.thetas()
        ]


def run_theta_sweep(
    config: RunConfig,
    thetas: Sequence[int] | None = None,
    progress: Callable[[SweepRow], None] | None = None,
) -> SweepResult:
    """Train one centralized model per (theta, repeat) on equal-size subsets.

    Every training set has as many frames as the pool holds at 18 dB alone.
    Repeat ``k`` uses seed ``config.seed + k`` for its subsample, model
    initialization and dropout, and the same seed across thetas.
    """
    thetas = theta_candidates() if thetas is None else list(thetas)
    pool, test = make_pools(config)
    size = int(np.sum(pool.snr_db == max(config.snr_grid)))
    tc = config.train_config()
    rows, records = [], []
    for theta in thetas:
        subset_pool = filter_by_snr(pool, theta)
        if len(subset_pool) < size:
            raise ConfigurationError(f"theta={theta} leaves {len(subset_pool)} frames, fewer than {size}")
        for k in range(config.repeats):
            seed_k = config.seed + k
            rng = np.random.default_rng(np.random.SeedSequence([seed_k, SWEEP, theta + 128]))
            train = subset_pool.subset(np.sort(rng.choice(len(subset_pool), size, replace=False)))
            model = nn.init_model(config.architecture(), seed_k, (2, pool.frame_length, 1))
            state = tc.new_optimizer()
            train_rng = np.random.default_rng(np.random.SeedSequence([seed_k, fl.TRAIN, theta + 128]))
            best_train = best_test = 0.0
            best_loss = np.inf
            for epoch in range(1, config.global_epochs + 1):
                nn.fit(model, train.iq, train.labels, 1, tc.batch_size, state, train_rng)
                ev = nn.evaluate(model, test)
                tr = nn.evaluate(model, train)
                best_train = max(best_train, tr.accuracy)
                best_test = max(best_test, ev.accuracy)
                best_loss = min(best_loss, ev.loss)
                records.append(MetricRecord(config.run_id(seed_k), "centralized", "iid", epoch, theta, 0, 0,
                                            ev.accuracy, ev.loss, ev.per_snr_accuracy))
            row = SweepRow(theta, k, seed_k, len(train), best_train, best_test, float(best_loss))
            rows.append(row)
            if progress is not None:
                progress(row)
    return SweepResult(rows, records, config.repeats)


# -- federated protocols -----------------------------------------------------------------


@dataclass
class CurveResult:
    """Per-round curve of one algorithm run."""

    algorithm: str
    scenario: str
    seed: int
    theta: int
    clusters: int
    queue: int
    metrics: list[fl.RoundMetrics]

    @property
    def accuracies(self) -> list[float]:
        return [m.accuracy for m in self.metrics]

    @property
    def max_accuracy(self) -> float:
        return max(self.accuracies)

    @property
    def best_round(self) -> int:
        return int(np.argmax(self.accuracies)) + 1

    @property
    def min_loss(self) -> float:
        return min(m.loss for m in self.metrics)

    @property
    def loss_at_best(self) -> float:
        """Test loss of the round that reached the maximum accuracy."""
        return self.metrics[self.best_round - 1].loss

    def records(self, config: RunConfig) -> list[MetricRecord]:
        rid = config.run_id(self.seed)
        return [MetricRecord.from_round(m, rid, self.scenario, self.theta, self.clusters, self.queue)
                for m in self.metrics]


def run_algorithm(
    config: RunConfig,
    kind: fl.AlgorithmKind | str,
    pool: Dataset,
    test: Dataset,
    *,
    seed: int | None = None,
    scenario: str | None = None,
    queue: int | None = None,
    clusters: int | None = None,
    theta: int | None = None,
    on_round: Callable[[fl.RoundMetrics], None] | None = None,
) -> CurveResult:
    seed = config.seed if seed is None else seed
    scenario = ScenarioKind.parse(config.scenario if scenario is None else scenario).value
    queue = config.queue if queue is None else queue
    clusters = config.clusters if clusters is None else clusters
    theta = config.theta if theta is None else theta
    fed = build_federation(config, kind, pool, test, seed=seed, scenario=scenario, queue=queue,
                           clusters=clusters, theta=theta)
    metrics = fed.run(config.global_epochs, on_round)
    return CurveResult(fed.kind.value, scenario, seed, theta, clusters, queue, metrics)


def run_iid_comparison(
    config: RunConfig,
    thetas: Sequence[int] | None = None,
    seeds: Sequence[int] | None = None,
    algorithms: Sequence[str] = ("fedavg", "fedvaccine"),
    on_round: Callable[[fl.RoundMetrics], None] | None = None,
) -> list[CurveResult]:
    """FedAvg and FedVaccine under IID sampling, per theta and seed, on shared data draws."""
    thetas = theta_candidates() if thetas is None else list(thetas)
    seeds = [config.seed] if seeds is None else list(seeds)
    out = []
    for seed in seeds:
        pool, test = make_pools(config, seed)
        for theta in thetas:
            for alg in algorithms:
                out.append(run_algorithm(config, alg, pool, test, seed=seed, scenario="iid", theta=theta,
                                         on_round=on_round))
    return out


NONIID_SCENARIOS = ("class-imb", "vol-imb", "feat-var")
BENCHMARK_ALGORITHMS = ("fedvaccine", "fedavg", "fedsgd", "fedprox", "gl", "cl", "distl")


def run_noniid_benchmark(
    config: RunConfig,
    scenarios: Sequence[str] = NONIID_SCENARIOS,
    algorithms: Sequence[str] = BENCHMARK_ALGORITHMS,
    on_round: Callable[[fl.RoundMetrics], None] | None = None,
) -> list[CurveResult]:
    """Every algorithm on every non-IID scenario; queues get the extra capacity."""
    pool, test = make_pools(config)
    out = []
    for scenario in scenarios:
        if ScenarioKind.parse(scenario) is ScenarioKind.IID:
            raise ConfigurationError("the non-IID benchmark takes non-IID scenarios only")
        for alg in algorithms:
            out.append(run_algorithm(config, alg, pool, test, scenario=scenario,
                                     queue=config.queue + config.queue_extension, on_round=on_round))
    return out


class AblationKind(enum.Enum):
    CLUSTER = "cluster"
    QUEUE = "queue"
    SNR_RANGE = "snr-range"

    @classmethod
    def parse(cls, value) -> "AblationKind":
        if isinstance(value, cls):
            return value
        text = str(value).strip().lower().replace("_", "-")
        for kind in cls:
            if text in (kind.value, kind.name.lower().replace("_", "-")):
                return kind
        raise ConfigurationError(f"unknown ablation {value!r}")


CLUSTER_SETTINGS = (1, 2, 3, 4, 5, 10, 0)  # 0 = no clusters
QUEUE_MULTIPLIERS = (0, 1, 2, 3, 4, 5, 10)
SNR_BANDS = {
    "-20..-10": tuple(range(-20, -9, 2)),
    "-10..-2": tuple(range(-10, -1, 2)),
    "0..8": tuple(range(0, 9, 2)),
    "10..18": tuple(range(10, 19, 2)),
}


@dataclass
class AblationRow:
    setting: str
    max_accuracy: float
    min_loss: float
    loss_at_best: float
    memory: str = ""
    curve: CurveResult | None = field(default=None, repr=False)


def band_pool(pool: Dataset, band: Sequence[int]) -> Dataset:
    sub = pool.subset(np.flatnonzero(np.isin(pool.snr_db, band)))
    sub.snrs = tuple(band)
    return sub


def run_ablation(
    kind: AblationKind | str,
    config: RunConfig,
    settings: Sequence | None = None,
    on_round: Callable[[fl.RoundMetrics], None] | None = None,
) -> list[AblationRow]:
    """FedVaccine under IID sampling, varying one factor.

    ``CLUSTER`` varies the cluster count (0 means chained clients), ``QUEUE``
    the capacity in units of ``queue_unit`` frames, and ``SNR_RANGE`` restricts
    client data to one SNR band while testing on the full grid.
    """
    kind = AblationKind.parse(kind)
    pool, test = make_pools(config)
    rows = []
    if kind is AblationKind.CLUSTER:
        for c in CLUSTER_SETTINGS if settings is None else settings:
            if c > config.clients:
                continue
            curve = run_algorithm(config, "fedvaccine", pool, test, scenario="iid", clusters=c, on_round=on_round)
            rows.append(AblationRow(str(c) if c else "None", curve.max_accuracy, curve.min_loss, curve.loss_at_best,
                                    curve=curve))
    elif kind is AblationKind.QUEUE:
        for mult in QUEUE_MULTIPLIERS if settings is None else settings:
            cap = mult * config.queue_unit
            curve = run_algorithm(config, "fedvaccine", pool, test, scenario="iid", queue=cap, on_round=on_round)
            # memory column at 1 KB per stored frame
            mem = f"+{cap}KB" if cap else "+0KB"
            rows.append(AblationRow(str(mult), curve.max_accuracy, curve.min_loss, curve.loss_at_best, mem, curve=curve))
    else:
        bands = SNR_BANDS if settings is None else {k: SNR_BANDS[k] for k in settings}
        for name, band in bands.items():
            curve = run_algorithm(config, "fedvaccine", band_pool(pool, band), test, scenario="iid",
                                  theta=band[0], on_round=on_round)
            rows.append(AblationRow(name, curve.max_accuracy, curve.min_loss, curve.loss_at_best, curve=curve))
    return rows


# -- PCA --------------------------------------------------------------------------------------


class RankWarning(UserWarning):
    pass


@dataclass
class PCAResult:
    projections: np.ndarray
    components: np.ndarray
    explained_variance: np.ndarray
    mean: np.ndarray
    total_variance: float = 0.0

    @property
    def explained_ratio(self) -> np.ndarray:
        if self.total_variance <= 0:
            return np.zeros_like(self.explained_variance)
        return self.explained_variance / self.total_variance


def top_eigenpairs(
    matrix: np.ndarray, k: int, tol: float = 1e-10, max_iter: int = 10_000, seed: int = 0
) -> tuple[np.ndarray, np.ndarray]:
    """Leading eigenpairs of a symmetric PSD matrix by power iteration with deflation.

    Each vector is refined with a few Rayleigh-quotient iterations once the
    power iteration has settled, then re-orthogonalized against earlier ones.
    Stops early (with :class:`RankWarning`) when the remaining spectrum is
    numerically zero.
    """
    a = np.array(matrix, dtype=np.float64)
    n = a.shape[0]
    if a.shape != (n, n):
        raise DimensionError("matrix must be square")
    rng = np.random.default_rng(seed)
    scale = max(np.abs(np.diag(a)).max(initial=0.0), np.finfo(float).tiny)
    vals, vecs = [], []
    original = a.copy()
    for _ in range(min(k, n)):
        v = rng.standard_normal(n)
        for u in vecs:
            v -= (u @ v) * u
        v /= np.linalg.norm(v)
        lam = v @ a @ v
        for _ in range(max_iter):
            w = a @ v
            for u in vecs:
                w -= (u @ w) * u
            norm = np.linalg.norm(w)
            if norm <= 1e-14 * scale:
                break
            w /= norm
            new_lam = w @ a @ w
            done = np.linalg.norm(w - v) < tol or abs(new_lam - lam) <= tol * scale * 1e-3
            v, lam = w, new_lam
            if done:
                break
        if lam <= 1e-12 * scale:
            warnings.warn(f"covariance rank {len(vals)} is below the requested {k} components", RankWarning)
            break
        # Rayleigh-quotient polishing on the original matrix, kept orthogonal to earlier vectors
        for _ in range(3):
            mu = v @ original @ v
            try:
                w = np.linalg.solve(original - mu * np.eye(n) + 1e-14 * scale * np.eye(n), v)
            except np.linalg.LinAlgError:
                break
            for u in vecs:
                w -= (u @ w) * u
            nw = np.linalg.norm(w)
            if not np.isfinite(nw) or nw == 0:
                break
            w /= nw
            if abs(w @ original @ w - mu) > 1e-6 * scale + abs(mu) * 1e-6:
                break  # drifted to a different eigenvalue; keep the power-iteration vector
            v = w
        lam = float(v @ original @ v)
        vals.append(lam)
        vecs.append(v)
        a = a - lam * np.outer(v, v)
    if len(vals) < k and len(vals) == n:
        warnings.warn(f"only {n} dimensions available for {k} components", RankWarning)
    comps = np.array(vecs).reshape(len(vecs), n)
    if len(comps) > 1:
        # final symmetric cleanup keeps the set orthonormal to rounding error
        q, r = np.linalg.qr(comps.T)
        comps = (q * np.sign(np.diag(r))).T
    return np.array(vals), comps


def pca_matrix(x: np.ndarray, k: int = 3) -> PCAResult:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2:
        raise DimensionError("expected an N x D matrix")
    n = x.shape[0]
    if n <= k:
        raise DimensionError(f"need more than k={k} samples, got {n}")
    mean = x.mean(axis=0)
    xc = x - mean
    cov = xc.T @ xc / (n - 1)
    vals, comps = top_eigenpairs(cov, k)
    # orient each component so its largest-magnitude entry is positive
    for i in range(len(comps)):
        if comps[i, np.argmax(np.abs(comps[i]))] < 0:
            comps[i] = -comps[i]
    proj = xc @ comps.T
    return PCAResult(proj, comps, vals, mean, float(np.trace(cov)))


def pca_project(frames: Dataset, k: int = 3) -> PCAResult:
    """Project frames (flattened to ``2 * L`` vectors) onto their top ``k`` principal axes."""
    return pca_matrix(frames.iq.reshape(len(frames), -1), k)
