"""Seeded synthetic generators.

All generators are pure functions of (parameters, seed); label noise,
predictor noise, and hardness assignments come from distinct named streams,
so regenerating any piece is bit-identical and the streams stay independent.
Normal variates come from numpy's ziggurat transform over the Philox
counter-based stream, which is deterministic across platforms.
"""

from __future__ import annotations

import numpy as np

from .core import Dataset, TwoPopParams
from .rng import stream
from .uncertainty import RegressionTree


def heteroscedastic_labels(X: np.ndarray, hard: np.ndarray, seed: int,
                           noise_easy: float = 0.1, noise_hard: float = 2.0) -> np.ndarray:
    """Labels: 2 x1 + eps on easy rows, sin(3 x1 x2) + eps on hard rows.

    ``noise_easy`` / ``noise_hard`` are variances.  The population mean is 0
    for any mix (both branches are odd in the covariates).
    """
    eps = stream(seed, "label-noise").standard_normal(X.shape[0])
    easy_y = 2.0 * X[:, 0] + np.sqrt(noise_easy) * eps
    hard_y = np.sin(3.0 * X[:, 0] * X[:, 1]) + np.sqrt(noise_hard) * eps
    return np.where(hard, hard_y, easy_y)


def gen_synthetic_regression(n: int, d: int = 5, easy_frac: float = 0.7, seed: int = 0,
                             noise_easy: float = 0.1,
                             noise_hard: float = 2.0) -> tuple[Dataset, np.ndarray]:
    """Heteroscedastic regression sample; returns (dataset, hardness flags).

    Covariates are i.i.d. standard normal in d dimensions; hardness is an
    i.i.d. Bernoulli(1 - easy_frac) flag per instance.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    if d < 2:
        raise ValueError("need d >= 2 (labels read the first two covariates)")
    X = stream(seed, "covariates").standard_normal((n, d))
    hard = stream(seed, "hardness").random(n) >= easy_frac
    y = heteroscedastic_labels(X, hard, seed, noise_easy, noise_hard)
    return Dataset(covariates=X, predictions={}, labels=y), hard


def fit_tree_predictor(X: np.ndarray, y: np.ndarray, depth: int) -> RegressionTree:
    """A plain regression tree of the given depth, reusing the tree learner."""
    return RegressionTree.fit(X, y, max_depth=depth)


def make_noisy_predictor(labels: np.ndarray, sigma, seed: int) -> np.ndarray:
    """Noisy oracle f_i = y_i + sigma_i eta_i with standard-normal eta.

    ``sigma`` may be a scalar or a per-instance array.  Distinct predictors
    must use distinct seeds so their noise streams stay independent.
    """
    labels = np.asarray(labels, dtype=float)
    sigma = np.asarray(sigma, dtype=float)
    if np.any(sigma < 0):
        raise ValueError("sigma must be nonnegative")
    eta = stream(seed, "predictor-noise").standard_normal(labels.shape[0])
    return labels + sigma * eta


def gen_two_population(params: TwoPopParams, n: int, seed: int) -> tuple[Dataset, np.ndarray]:
    """Two-population sample for the closed-form advantage model.

    Returns (dataset, easy flags).  Labels are N(0, var_y); the two
    predictors are noisy oracles whose conditional residual variances are
    (r_e, r_h) and (r_e, r_h (1 - delta)) on the easy/hard populations.  The
    single covariate column is the population flag, so covariate-based
    uncertainty surrogates can recover the per-population residual levels.
    """
    easy = stream(seed, "population").random(n) < params.p
    y = np.sqrt(params.var_y) * stream(seed, "labels").standard_normal(n)
    sigma1 = np.where(easy, np.sqrt(params.r_e), np.sqrt(params.r_h))
    sigma2 = np.where(easy, np.sqrt(params.r_e), np.sqrt(params.r_h * (1.0 - params.delta)))
    f1 = make_noisy_predictor(y, sigma1, seed=_sub_seed(seed, 1))
    f2 = make_noisy_predictor(y, sigma2, seed=_sub_seed(seed, 2))
    data = Dataset(covariates=easy.astype(float)[:, None],
                   predictions={"cheap": f1, "expensive": f2}, labels=y)
    return data, easy


def gen_specialized_pair(p: float, sigma_strong: float, sigma_weak: float,
                         var_y: float, n: int, seed: int) -> tuple[Dataset, np.ndarray]:
    """Equal-strength predictors specialized on opposite populations.

    The "cheap" predictor is strong (noise sigma_strong) on the easy
    population and weak (sigma_weak) on the hard one; the "expensive"
    predictor is mirrored.  Returns (dataset, easy flags).
    """
    if not 0 < p < 1:
        raise ValueError("p must lie in (0, 1)")
    easy = stream(seed, "population").random(n) < p
    y = np.sqrt(var_y) * stream(seed, "labels").standard_normal(n)
    sigma1 = np.where(easy, sigma_strong, sigma_weak)
    sigma2 = np.where(easy, sigma_weak, sigma_strong)
    f1 = make_noisy_predictor(y, sigma1, seed=_sub_seed(seed, 1))
    f2 = make_noisy_predictor(y, sigma2, seed=_sub_seed(seed, 2))
    data = Dataset(covariates=easy.astype(float)[:, None],
                   predictions={"cheap": f1, "expensive": f2}, labels=y)
    return data, easy


def _sub_seed(seed: int, k: int) -> int:
    # distinct seed domain per predictor noise stream
    return (int(seed) << 8) + 17 + k
