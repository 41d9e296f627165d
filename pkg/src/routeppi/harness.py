"""Budget sweeps: repeated calibrate/deploy trials with aggregation.

A sweep runs every (budget, method, trial) cell that clears the viability
cutoff, calibrating on a trial burn-in sample and deploying on a trial
stream with per-instance budget b = B / n_test.  Per-trial seeds derive from
(root seed, budget index, trial index) for the data and (root seed, budget
index, method index, trial index) for method randomness, so methods see
paired data, adding a method never changes the others' results, and trials
are embarrassingly parallel.
"""

from __future__ import annotations

import csv
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Callable, Mapping, Sequence

import numpy as np

from .core import CostModel, Dataset, SubsetFamily, TwoPopParams
from .datagen import (fit_tree_predictor, gen_specialized_pair,
                      gen_synthetic_regression, gen_two_population,
                      heteroscedastic_labels, make_noisy_predictor)
from .engine import asi_config, deploy
from .optimizer import BisectionConfig, FixedPointConfig, calibrate
from .rng import derive_seed, stream
from .uncertainty import UncertaintyConfig


# ---------------------------------------------------------------------------
# configuration and results


@dataclass(frozen=True)
class SweepConfig:
    """One sweep: budgets x methods x trials over a single data source."""

    budgets: tuple[float, ...]
    n_trials: int
    methods: tuple[str, ...]  # "ampi", "asi:<predictor-id>", "ampi-random-routing"
    predictor_costs: Mapping[str, float]
    label_cost: float
    family: SubsetFamily
    alpha: float = 0.1
    n_min: int = 7
    seed: int = 0
    pi_floor: float = 0.01
    threads: int = 1
    uncertainty: UncertaintyConfig = field(default_factory=UncertaintyConfig)
    fixed_point: FixedPointConfig = field(default_factory=FixedPointConfig)
    bisection: BisectionConfig = field(default_factory=BisectionConfig)

    def __post_init__(self):
        budgets = tuple(float(b) for b in self.budgets)
        if not budgets:
            raise ValueError("budgets must be non-empty")
        if any(b2 <= b1 for b1, b2 in zip(budgets, budgets[1:])):
            raise ValueError("budgets must be strictly ascending")
        if any(b <= 0 for b in budgets):
            raise ValueError("budgets must be positive")
        object.__setattr__(self, "budgets", budgets)
        if self.n_trials < 1:
            raise ValueError("n_trials must be >= 1")
        if not self.methods:
            raise ValueError("methods must be non-empty")
        for m in self.methods:
            parse_method(m)  # raises on unknown


def parse_method(method: str) -> tuple[str, str | None]:
    """Split a method string into (kind, predictor-id or None)."""
    if method == "ampi":
        return "ampi", None
    if method == "ampi-random-routing":
        return "ampi-random-routing", None
    if method.startswith("asi:"):
        pid = method[len("asi:"):]
        if not pid:
            raise ValueError("asi method needs a predictor id, e.g. 'asi:cheap'")
        return "asi", pid
    raise ValueError(f"unknown method {method!r}; expected 'ampi', "
                     f"'asi:<predictor-id>', or 'ampi-random-routing'")


@dataclass(frozen=True)
class TrialRecord:
    budget: float
    method: str
    trial: int
    ci_width: float
    covered: bool
    labels: int
    spend: float  # realized total spend for the trial


@dataclass(frozen=True)
class SweepRow:
    budget: float
    method: str
    ci_width_mean: float
    ci_width_sem: float
    coverage: float
    mean_labels: float
    mean_spend: float
    n_trials_effective: int
    viable: bool


@dataclass(frozen=True)
class SweepResult:
    rows: tuple[SweepRow, ...]
    trial_records: tuple[TrialRecord, ...]

    def row(self, budget: float, method: str) -> SweepRow | None:
        for r in self.rows:
            if r.method == method and np.isclose(r.budget, budget):
                return r
        return None

    def widths(self, budget: float, method: str) -> np.ndarray:
        return np.array([t.ci_width for t in self.trial_records
                         if t.method == method and np.isclose(t.budget, budget)])


# ---------------------------------------------------------------------------
# viability


def viability_cutoff(method_cost: float, n_test: int, n_min: int,
                     c_label: float) -> float:
    """Smallest total budget funding the queries plus n_min gold labels."""
    if n_test < 1 or n_min < 1 or c_label <= 0 or method_cost < 0:
        raise ValueError("viability inputs must be positive (cost nonnegative)")
    return method_cost * n_test + n_min * c_label


def method_query_cost(method: str, config: SweepConfig) -> float:
    """Per-instance query cost used in the viability cutoff.

    Single-predictor baselines use their own predictor cost; routed methods
    use the mean of the family's subset costs as a routing-cost approximation.
    """
    kind, pid = parse_method(method)
    if kind == "asi":
        return float(config.predictor_costs[pid])
    costs = [sum(config.predictor_costs[p] for p in key) for key in config.family]
    return float(np.mean(costs))


# ---------------------------------------------------------------------------
# data sources


class DataSource:
    """Provides per-trial burn-in and deployment data plus the true mean."""

    theta_star: float

    def prepare(self) -> None:  # heavy one-time setup (e.g. predictor fitting)
        pass

    def n_test(self) -> int:
        raise NotImplementedError

    def trial(self, data_seed: int) -> tuple[Dataset, Dataset, Callable[[int], float]]:
        raise NotImplementedError


def _attach_predictions(data: Dataset, predict: Mapping[str, Callable]) -> Dataset:
    preds = {pid: fn(data.covariates) for pid, fn in predict.items()}
    return Dataset(covariates=data.covariates, predictions=preds, labels=data.labels)


@dataclass(eq=False)
class SyntheticTreeSource(DataSource):
    """Heteroscedastic regression with fitted tree predictors of two depths.

    Trees are fit once on a training split drawn from its own seed domain;
    each trial then draws a fresh burn-in sample and deployment stream.
    """

    n_train: int = 2000
    n_burn: int = 300
    n_test_size: int = 400
    d: int = 5
    easy_frac: float = 0.7
    depth_cheap: int = 2
    depth_expensive: int = 6
    seed: int = 0
    theta_star: float = 0.0

    def prepare(self) -> None:
        train, _ = gen_synthetic_regression(self.n_train, self.d, self.easy_frac,
                                            seed=derive_seed(self.seed, "train"))
        self._trees = {
            "cheap": fit_tree_predictor(train.covariates, train.labels, self.depth_cheap),
            "expensive": fit_tree_predictor(train.covariates, train.labels,
                                            self.depth_expensive),
        }

    def n_test(self) -> int:
        return self.n_test_size

    def trial(self, data_seed: int):
        predict = {pid: tree.predict for pid, tree in self._trees.items()}
        burn, _ = gen_synthetic_regression(self.n_burn, self.d, self.easy_frac,
                                           seed=derive_seed(data_seed, "burn"))
        test, _ = gen_synthetic_regression(self.n_test_size, self.d, self.easy_frac,
                                           seed=derive_seed(data_seed, "test"))
        burn = _attach_predictions(burn, predict)
        test = _attach_predictions(test, predict)
        labels = test.labels
        return burn, test, (lambda i: float(labels[i]))


@dataclass(eq=False)
class NoisyOracleSource(DataSource):
    """Heteroscedastic labels with noisy-oracle predictors f = y + sigma eta.

    ``sigmas`` maps predictor id -> noise standard deviation; no fitting
    happens, so the mechanism being exercised is the optimization itself.
    """

    sigmas: Mapping[str, float] = field(default_factory=lambda: {"cheap": 2.5,
                                                                 "expensive": 0.75})
    n_burn: int = 300
    n_test_size: int = 600
    d: int = 5
    easy_frac: float = 0.7
    seed: int = 0
    theta_star: float = 0.0

    def n_test(self) -> int:
        return self.n_test_size

    def _sample(self, n: int, seed: int) -> Dataset:
        base, _ = gen_synthetic_regression(n, self.d, self.easy_frac, seed=seed)
        preds = {pid: make_noisy_predictor(base.labels, sig, seed=derive_seed(seed, pid))
                 for pid, sig in self.sigmas.items()}
        return Dataset(covariates=base.covariates, predictions=preds, labels=base.labels)

    def trial(self, data_seed: int):
        burn = self._sample(self.n_burn, derive_seed(data_seed, "burn"))
        test = self._sample(self.n_test_size, derive_seed(data_seed, "test"))
        labels = test.labels
        return burn, test, (lambda i: float(labels[i]))


@dataclass(eq=False)
class SpecializedPairSource(DataSource):
    """Equal-cost two-population source with mirrored predictor strengths."""

    p: float = 0.5
    sigma_strong: float = 1.0
    sigma_weak: float = 1.8
    var_y: float = 1.0
    n_burn: int = 300
    n_test_size: int = 500
    seed: int = 0
    theta_star: float = 0.0

    def n_test(self) -> int:
        return self.n_test_size

    def trial(self, data_seed: int):
        burn, _ = gen_specialized_pair(self.p, self.sigma_strong, self.sigma_weak,
                                       self.var_y, self.n_burn,
                                       seed=derive_seed(data_seed, "burn"))
        test, _ = gen_specialized_pair(self.p, self.sigma_strong, self.sigma_weak,
                                       self.var_y, self.n_test_size,
                                       seed=derive_seed(data_seed, "test"))
        labels = test.labels
        return burn, test, (lambda i: float(labels[i]))


@dataclass(eq=False)
class TwoPopSource(DataSource):
    """Source matching the closed-form two-population model."""

    params: TwoPopParams | None = None
    n_burn: int = 300
    n_test_size: int = 500
    seed: int = 0
    theta_star: float = 0.0

    def n_test(self) -> int:
        return self.n_test_size

    def trial(self, data_seed: int):
        burn, _ = gen_two_population(self.params, self.n_burn,
                                     seed=derive_seed(data_seed, "burn"))
        test, _ = gen_two_population(self.params, self.n_test_size,
                                     seed=derive_seed(data_seed, "test"))
        labels = test.labels
        return burn, test, (lambda i: float(labels[i]))


# ---------------------------------------------------------------------------
# CSV ingestion


@dataclass(frozen=True)
class CsvSchema:
    """Column-name mapping from a CSV file onto a Dataset."""

    covariates: tuple[str, ...]
    label: str
    predictors: Mapping[str, str]  # predictor id -> column name


def load_csv_dataset(path: str, schema: CsvSchema) -> Dataset:
    """Load a dataset from a headered CSV ('.' decimal, UTF-8).

    Rows containing non-finite or unparseable values in any mapped column are
    rejected, with their line numbers reported in a warning.  Missing columns
    and empty results raise.
    """
    wanted = list(schema.covariates) + [schema.label] + list(schema.predictors.values())
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        header = reader.fieldnames or []
        missing = [c for c in wanted if c not in header]
        if missing:
            raise ValueError(f"CSV {path} is missing mapped columns: {missing}")
        rows, bad_lines = [], []
        for line_no, record in enumerate(reader, start=2):  # header is line 1
            try:
                values = [float(record[c]) for c in wanted]
            except (TypeError, ValueError):
                bad_lines.append(line_no)
                continue
            if not all(np.isfinite(v) for v in values):
                bad_lines.append(line_no)
                continue
            rows.append(values)
    if bad_lines:
        warnings.warn(f"rejected {len(bad_lines)} rows with non-finite or "
                      f"unparseable values at lines {bad_lines[:20]}"
                      + ("..." if len(bad_lines) > 20 else ""), RuntimeWarning)
    if not rows:
        raise ValueError(f"CSV {path} yielded zero usable rows")
    arr = np.array(rows, dtype=float)
    k = len(schema.covariates)
    preds = {pid: arr[:, k + 1 + i]
             for i, pid in enumerate(schema.predictors.keys())}
    return Dataset(covariates=arr[:, :k], predictions=preds, labels=arr[:, k])


def write_csv_dataset(data: Dataset, path: str,
                      covariate_names: Sequence[str] | None = None,
                      extra: Mapping[str, np.ndarray] | None = None) -> None:
    """Write a dataset (and optional extra columns) to the CSV schema."""
    names = list(covariate_names or [f"x{i + 1}" for i in range(data.d)])
    pred_ids = list(data.predictions.keys())
    header = names + ["y"] + [f"pred_{pid}" for pid in pred_ids]
    columns = [data.covariates[:, i] for i in range(data.d)]
    columns.append(data.labels if data.labels is not None
                   else np.full(data.n, np.nan))
    columns.extend(data.predictions[pid] for pid in pred_ids)
    for name, col in (extra or {}).items():
        header.append(name)
        columns.append(np.asarray(col, dtype=float))
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for row in zip(*columns):
            writer.writerow([repr(float(v)) for v in row])


@dataclass(eq=False)
class CsvSource(DataSource):
    """Fixed CSV data split once into train/calibration/test fractions.

    The splits stay fixed across trials (only method randomness varies); the
    training fraction is reserved for fitting external predictors and is
    unused here because prediction columns arrive precomputed.  Coverage is
    judged against the mean label over the test split.
    """

    path: str = ""
    schema: CsvSchema | None = None
    fractions: tuple[float, float, float] = (0.6, 0.2, 0.2)
    seed: int = 0
    theta_star: float = float("nan")

    def prepare(self) -> None:
        if abs(sum(self.fractions) - 1.0) > 1e-9:
            raise ValueError("split fractions must sum to 1")
        data = load_csv_dataset(self.path, self.schema)
        perm = stream(self.seed, "splits").permutation(data.n)
        n_train = int(round(self.fractions[0] * data.n))
        n_burn = int(round(self.fractions[1] * data.n))
        burn_idx = perm[n_train:n_train + n_burn]
        test_idx = perm[n_train + n_burn:]
        if burn_idx.size < 2 or test_idx.size < 2:
            raise ValueError("calibration/test splits are too small")
        self._burn = _take(data, burn_idx)
        self._test = _take(data, test_idx)
        self.theta_star = float(self._test.labels.mean())

    def n_test(self) -> int:
        return self._test.n

    def trial(self, data_seed: int):
        labels = self._test.labels
        return self._burn, self._test, (lambda i: float(labels[i]))


def _take(data: Dataset, idx: np.ndarray) -> Dataset:
    return Dataset(covariates=data.covariates[idx],
                   predictions={k: v[idx] for k, v in data.predictions.items()},
                   labels=None if data.labels is None else data.labels[idx])


def class_balance(data: Dataset, seed: int) -> Dataset:
    """Undersample the majority class of a binary-labeled dataset, seeded."""
    if data.labels is None:
        raise ValueError("class balancing needs labels")
    values = np.unique(data.labels)
    if values.size != 2:
        raise ValueError(f"expected binary labels, found classes {values}")
    idx0 = np.flatnonzero(data.labels == values[0])
    idx1 = np.flatnonzero(data.labels == values[1])
    minority, majority = (idx0, idx1) if idx0.size <= idx1.size else (idx1, idx0)
    keep = stream(seed, "class-balance").permutation(majority)[:minority.size]
    chosen = np.sort(np.concatenate([minority, keep]))
    return _take(data, chosen)


# ---------------------------------------------------------------------------
# sweep execution


def _run_trial(config: SweepConfig, source: DataSource, budget: float,
               b_idx: int, m_idx: int, method: str, trial: int) -> TrialRecord:
    data_seed = derive_seed(config.seed, "data", b_idx, trial)
    method_seed = derive_seed(config.seed, "method", b_idx, m_idx, trial)
    burn_in, stream_data, label_source = source.trial(data_seed)
    n_test = stream_data.n
    costs = CostModel(config.predictor_costs, config.label_cost, budget / n_test)
    unc = replace(config.uncertainty, seed=method_seed)

    kind, pid = parse_method(method)
    if kind == "asi":
        calib = asi_config(pid, burn_in, costs, n_test, pi_floor=config.pi_floor,
                           fp_cfg=config.fixed_point, bis_cfg=config.bisection,
                           uncertainty_cfg=unc)
    else:
        routing = "uniform" if kind == "ampi-random-routing" else "optimal"
        calib = calibrate(burn_in, config.family, costs, n_test,
                          pi_floor=config.pi_floor, fp_cfg=config.fixed_point,
                          bis_cfg=config.bisection, uncertainty_cfg=unc,
                          routing=routing)

    outcome = deploy(stream_data, calib, config.alpha, method_seed, label_source,
                     collect_decisions=False)
    est = outcome.estimate
    covered = bool(est.lower <= source.theta_star <= est.upper)
    return TrialRecord(budget=budget, method=method, trial=trial,
                       ci_width=est.upper - est.lower, covered=covered,
                       labels=outcome.labels_collected,
                       spend=est.realized_spend)


def _trial_worker(args) -> TrialRecord:
    return _run_trial(*args)


def run_sweep(config: SweepConfig, source: DataSource,
              progress: Callable[[str], None] | None = None) -> SweepResult:
    """Run all viable (budget, method, trial) cells and aggregate.

    Non-viable (budget, method) pairs -- total budget below the method's
    query cost times the stream size plus n_min labels -- are skipped
    entirely and produce no output rows.
    """
    source.prepare()
    n_test = source.n_test()

    tasks = []
    for b_idx, budget in enumerate(config.budgets):
        for m_idx, method in enumerate(config.methods):
            cutoff = viability_cutoff(method_query_cost(method, config), n_test,
                                      config.n_min, config.label_cost)
            if budget < cutoff:
                continue
            for trial in range(config.n_trials):
                tasks.append((config, source, budget, b_idx, m_idx, method, trial))

    if config.threads > 1 and len(tasks) > 1:
        with ProcessPoolExecutor(max_workers=config.threads) as pool:
            records = list(pool.map(_trial_worker, tasks, chunksize=8))
    else:
        records = []
        for i, task in enumerate(tasks):
            records.append(_trial_worker(task))
            if progress and (i + 1) % 50 == 0:
                progress(f"{i + 1}/{len(tasks)} trials")

    rows = []
    for budget in config.budgets:
        for method in config.methods:
            cell = [r for r in records
                    if r.method == method and r.budget == budget]
            if not cell:
                continue
            widths = np.array([r.ci_width for r in cell])
            sem = float(widths.std(ddof=1) / np.sqrt(len(cell))) if len(cell) > 1 else 0.0
            rows.append(SweepRow(
                budget=budget, method=method,
                ci_width_mean=float(widths.mean()), ci_width_sem=sem,
                coverage=float(np.mean([r.covered for r in cell])),
                mean_labels=float(np.mean([r.labels for r in cell])),
                mean_spend=float(np.mean([r.spend for r in cell])),
                n_trials_effective=len(cell), viable=True))
    return SweepResult(rows=tuple(rows), trial_records=tuple(records))


SWEEP_CSV_COLUMNS = ("budget", "method", "ci_width_mean", "ci_width_sem",
                     "coverage", "mean_labels", "mean_spend",
                     "n_trials_effective", "viable")


def write_sweep_csv(result: SweepResult, path: str) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(SWEEP_CSV_COLUMNS)
        for row in result.rows:
            writer.writerow([repr(row.budget), row.method, repr(row.ci_width_mean),
                             repr(row.ci_width_sem), repr(row.coverage),
                             repr(row.mean_labels), repr(row.mean_spend),
                             row.n_trials_effective, row.viable])


def read_sweep_csv(path: str) -> list[dict]:
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        rows = []
        for record in reader:
            row = dict(record)
            for key in ("budget", "ci_width_mean", "ci_width_sem", "coverage",
                        "mean_labels", "mean_spend"):
                row[key] = float(record[key])
            row["n_trials_effective"] = int(record["n_trials_effective"])
            rows.append(row)
        return rows
