"""Flat key-value sweep configuration files.

Format: one ``key = value`` per line, ``#`` comments, dotted section prefixes
(``costs.label = 1.0``).  Every key the sweep reads is listed in DEFAULTS;
``routeppi config --defaults`` prints them all.  Values may be overridden by
environment variables named ROUTEPPI_<KEY> with dots replaced by underscores
(e.g. ROUTEPPI_SWEEP_SEED).
"""

from __future__ import annotations

import os
from dataclasses import dataclass

from .core import SubsetFamily, TwoPopParams, subset_key
from .harness import (CsvSchema, CsvSource, DataSource, NoisyOracleSource,
                      SpecializedPairSource, SweepConfig, SyntheticTreeSource,
                      TwoPopSource)
from .optimizer import BisectionConfig, FixedPointConfig
from .uncertainty import CvGrid, UncertaintyConfig

ENV_PREFIX = "ROUTEPPI_"


class ConfigError(ValueError):
    """A malformed or unknown configuration entry; carries the offending key."""

    def __init__(self, key: str, message: str):
        super().__init__(f"config key {key!r}: {message}")
        self.key = key


# key -> (default value as text, comment)
DEFAULTS: dict[str, tuple[str, str]] = {
    "data.source": ("synthetic", "synthetic | panel | twopop | specialized | csv"),
    "data.seed": ("0", "seed domain for dataset generation / predictor fitting"),
    "data.n_train": ("2000", "training rows for fitted predictors (synthetic)"),
    "data.n_burn": ("300", "fully labeled burn-in rows per trial"),
    "data.n_test": ("400", "deployment stream size per trial"),
    "data.d": ("5", "covariate dimension (synthetic/panel)"),
    "data.easy_frac": ("0.7", "easy-instance fraction (synthetic/panel)"),
    "data.depth_cheap": ("2", "tree depth of the cheap predictor (synthetic)"),
    "data.depth_expensive": ("6", "tree depth of the expensive predictor (synthetic)"),
    "data.sigma_cheap": ("2.5", "cheap predictor noise sd (panel)"),
    "data.sigma_expensive": ("0.75", "expensive predictor noise sd (panel)"),
    "data.p": ("0.5", "easy-population fraction (twopop/specialized)"),
    "data.r_easy": ("0.0001", "easy residual variance (twopop)"),
    "data.r_hard": ("1.0", "hard residual variance, cheap predictor (twopop)"),
    "data.delta": ("0.5", "hard-residual reduction of the expensive predictor (twopop)"),
    "data.var_y": ("0.25", "label variance (twopop/specialized)"),
    "data.sigma_strong": ("1.0", "strong-side noise sd (specialized)"),
    "data.sigma_weak": ("1.8", "weak-side noise sd (specialized)"),
    "data.path": ("", "input CSV path (csv)"),
    "data.covariates": ("x1,x2,x3,x4,x5", "covariate column names (csv)"),
    "data.label": ("y", "label column name (csv)"),
    "data.predictors": ("cheap:pred_cheap,expensive:pred_expensive",
                        "predictor-id:column pairs (csv)"),
    "data.splits": ("0.6,0.2,0.2", "train/calibration/test fractions (csv)"),
    "costs.cheap": ("0.01", "query cost of predictor 'cheap'"),
    "costs.expensive": ("0.04", "query cost of predictor 'expensive'"),
    "costs.label": ("1.0", "gold label cost"),
    "family": ("cheap; expensive", "candidate subsets, ';'-separated, members '+'-joined"),
    "sweep.budgets": ("15,25,40,60,90,130", "ascending total budgets"),
    "sweep.trials": ("50", "independent trials per (budget, method)"),
    "sweep.methods": ("ampi, asi:cheap, asi:expensive",
                      "ampi | asi:<predictor-id> | ampi-random-routing"),
    "sweep.alpha": ("0.1", "interval miscoverage level"),
    "sweep.n_min": ("7", "minimum fundable gold labels for viability"),
    "sweep.seed": ("0", "root seed for trials"),
    "sweep.pi_floor": ("0.01", "sampling probability stability floor"),
    "sweep.threads": ("1", "parallel trial workers"),
    "uncertainty.kind": ("boosted", "boosted | constant | oracle"),
    "uncertainty.trees": ("25,50,100", "boosted: tree-count grid"),
    "uncertainty.depths": ("2,6,8", "boosted: depth grid"),
    "uncertainty.rates": ("0.05,0.1", "boosted: learning-rate grid"),
    "uncertainty.folds": ("3", "boosted: CV folds"),
    "uncertainty.features": ("", "boosted: covariate column indices, blank = all"),
    "fixedpoint.max_iters": ("25", "calibration outer-iteration cap"),
    "fixedpoint.tol": ("0.0001", "relative convergence tolerance for multiplier and weights"),
    "fixedpoint.ridge": ("0.0", "Gram ridge regularizer"),
    "bisection.rel_tol": ("1e-9", "budget-identity relative tolerance"),
    "bisection.max_iters": ("200", "bisection iteration cap"),
}


def parse_config_file(path: str) -> dict[str, str]:
    """Read a key-value file into a dict, validating keys against DEFAULTS."""
    values: dict[str, str] = {}
    with open(path, encoding="utf-8") as fh:
        for line_no, raw in enumerate(fh, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(line, f"line {line_no} is not 'key = value'")
            key, value = (part.strip() for part in line.split("=", 1))
            if key not in DEFAULTS:
                raise ConfigError(key, "unknown key")
            values[key] = value
    return values


def resolve(values: dict[str, str]) -> dict[str, str]:
    """Layer DEFAULTS, then the file, then ROUTEPPI_* environment overrides."""
    out = {key: default for key, (default, _) in DEFAULTS.items()}
    out.update(values)
    for key in DEFAULTS:
        env = ENV_PREFIX + key.replace(".", "_").upper()
        if env in os.environ:
            out[key] = os.environ[env]
    return out


def defaults_text() -> str:
    lines = [f"{key} = {default}"
             + (" " * max(1, 34 - len(key) - len(default)) + f"# {comment}")
             for key, (default, comment) in DEFAULTS.items()]
    return "\n".join(lines) + "\n"


def _get_float(values: dict[str, str], key: str) -> float:
    try:
        return float(values[key])
    except ValueError as exc:
        raise ConfigError(key, f"expected a number, got {values[key]!r}") from exc


def _get_int(values: dict[str, str], key: str) -> int:
    try:
        return int(values[key])
    except ValueError as exc:
        raise ConfigError(key, f"expected an integer, got {values[key]!r}") from exc


def _get_list(values: dict[str, str], key: str, cast) -> tuple:
    text = values[key].strip()
    if not text:
        return ()
    try:
        return tuple(cast(part.strip()) for part in text.split(","))
    except ValueError as exc:
        raise ConfigError(key, f"could not parse list {values[key]!r}") from exc


def _parse_family(values: dict[str, str]) -> SubsetFamily:
    text = values["family"]
    try:
        subsets = [subset_key(part.strip().split("+"))
                   for part in text.split(";") if part.strip()]
        return SubsetFamily(tuple(subsets))
    except ValueError as exc:
        raise ConfigError("family", str(exc)) from exc


def _parse_predictor_costs(values: dict[str, str],
                           family: SubsetFamily) -> dict[str, float]:
    costs = {}
    for pid in sorted(family.predictor_ids()):
        key = f"costs.{pid}"
        if key not in values:
            raise ConfigError(key, f"no query cost configured for predictor {pid!r}")
        costs[pid] = _get_float(values, key)
    return costs


def build_uncertainty(values: dict[str, str]) -> UncertaintyConfig:
    kind = values["uncertainty.kind"]
    if kind not in ("boosted", "constant", "oracle"):
        raise ConfigError("uncertainty.kind", f"unknown kind {kind!r}")
    features = _get_list(values, "uncertainty.features", int) or None
    grid = CvGrid(n_trees_options=_get_list(values, "uncertainty.trees", int),
                  depth_options=_get_list(values, "uncertainty.depths", int),
                  learning_rate_options=_get_list(values, "uncertainty.rates", float),
                  folds=_get_int(values, "uncertainty.folds"))
    return UncertaintyConfig(kind=kind, grid=grid, feature_cols=features)


def build_source(values: dict[str, str]) -> DataSource:
    source = values["data.source"]
    seed = _get_int(values, "data.seed")
    n_burn = _get_int(values, "data.n_burn")
    n_test = _get_int(values, "data.n_test")
    if source == "synthetic":
        return SyntheticTreeSource(
            n_train=_get_int(values, "data.n_train"), n_burn=n_burn,
            n_test_size=n_test, d=_get_int(values, "data.d"),
            easy_frac=_get_float(values, "data.easy_frac"),
            depth_cheap=_get_int(values, "data.depth_cheap"),
            depth_expensive=_get_int(values, "data.depth_expensive"), seed=seed)
    if source == "panel":
        return NoisyOracleSource(
            sigmas={"cheap": _get_float(values, "data.sigma_cheap"),
                    "expensive": _get_float(values, "data.sigma_expensive")},
            n_burn=n_burn, n_test_size=n_test, d=_get_int(values, "data.d"),
            easy_frac=_get_float(values, "data.easy_frac"), seed=seed)
    if source == "twopop":
        params = TwoPopParams(
            p=_get_float(values, "data.p"), r_e=_get_float(values, "data.r_easy"),
            r_h=_get_float(values, "data.r_hard"),
            delta=_get_float(values, "data.delta"),
            c1=_get_float(values, "costs.cheap"),
            c2=_get_float(values, "costs.expensive"),
            c_label=_get_float(values, "costs.label"), b=1.0, n=n_test,
            var_y=_get_float(values, "data.var_y"))
        return TwoPopSource(params=params, n_burn=n_burn, n_test_size=n_test,
                            seed=seed)
    if source == "specialized":
        return SpecializedPairSource(
            p=_get_float(values, "data.p"),
            sigma_strong=_get_float(values, "data.sigma_strong"),
            sigma_weak=_get_float(values, "data.sigma_weak"),
            var_y=_get_float(values, "data.var_y"), n_burn=n_burn,
            n_test_size=n_test, seed=seed)
    if source == "csv":
        if not values["data.path"]:
            raise ConfigError("data.path", "csv source needs a file path")
        predictors = {}
        for pair in values["data.predictors"].split(","):
            if ":" not in pair:
                raise ConfigError("data.predictors",
                                  f"expected 'id:column', got {pair!r}")
            pid, col = (s.strip() for s in pair.split(":", 1))
            predictors[pid] = col
        schema = CsvSchema(covariates=_get_list(values, "data.covariates", str),
                           label=values["data.label"], predictors=predictors)
        fractions = _get_list(values, "data.splits", float)
        if len(fractions) != 3:
            raise ConfigError("data.splits", "expected three fractions")
        return CsvSource(path=values["data.path"], schema=schema,
                         fractions=fractions, seed=seed)
    raise ConfigError("data.source", f"unknown source {source!r}")


def build_sweep(values: dict[str, str], seed_override: int | None = None,
                threads_override: int | None = None) -> tuple[SweepConfig, DataSource]:
    family = _parse_family(values)
    budgets = _get_list(values, "sweep.budgets", float)
    methods = tuple(m.strip() for m in values["sweep.methods"].split(",") if m.strip())
    try:
        config = SweepConfig(
            budgets=budgets,
            n_trials=_get_int(values, "sweep.trials"),
            methods=methods,
            predictor_costs=_parse_predictor_costs(values, family),
            label_cost=_get_float(values, "costs.label"),
            family=family,
            alpha=_get_float(values, "sweep.alpha"),
            n_min=_get_int(values, "sweep.n_min"),
            seed=seed_override if seed_override is not None
                 else _get_int(values, "sweep.seed"),
            pi_floor=_get_float(values, "sweep.pi_floor"),
            threads=threads_override if threads_override is not None
                    else _get_int(values, "sweep.threads"),
            uncertainty=build_uncertainty(values),
            fixed_point=FixedPointConfig(
                max_outer_iters=_get_int(values, "fixedpoint.max_iters"),
                mu_rel_tol=_get_float(values, "fixedpoint.tol"),
                lambda_rel_tol=_get_float(values, "fixedpoint.tol"),
                ridge=_get_float(values, "fixedpoint.ridge")),
            bisection=BisectionConfig(
                rel_tol=_get_float(values, "bisection.rel_tol"),
                max_iters=_get_int(values, "bisection.max_iters")),
        )
    except ValueError as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError("sweep", str(exc)) from exc
    return config, build_source(values)
