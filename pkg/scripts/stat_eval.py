"""
Statistical comparison of experiment configurations.

Per-entry-per-class absolute errors of two configurations are compared with
a one-tailed Wilcoxon signed-rank test (alternative: the first configuration
has smaller errors), Hedges' g_av effect size with a paired percentile
bootstrap interval, and Bonferroni correction over the comparison family.
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, replace
from typing import NamedTuple

import numpy as np
import pandas as pd
from joblib import Parallel, delayed
from scipy.stats import norm, rankdata
from statsmodels.stats.multitest import multipletests

from scripts.errors import AlignmentError, ConfigError, DataError, DegenerateVarianceError

logger = logging.getLogger(__name__)

EXACT_MAX_PAIRS = 25
BOOTSTRAP_CHUNK = 250
MIN_BOOTSTRAP_PAIRS = 10
SD_FLOOR = 1e-12


@dataclass(frozen=True, eq=False)
class ErrorVector:
    """|p_c - y_c| per entry (rows) and class (columns), rows keyed by entry id."""

    values: np.ndarray
    entry_ids: tuple

    @property
    def n_entries(self) -> int:
        return self.values.shape[0]

    def flatten(self) -> np.ndarray:
        return self.values.ravel()

    def mean(self) -> float:
        return float(self.values.mean())


def error_vectors(proba, labels, entry_ids=None) -> ErrorVector:
    proba = np.asarray(proba, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if proba.ndim != 2 or proba.shape[0] != labels.size:
        raise AlignmentError(f"proba {proba.shape} does not match {labels.size} labels")
    if entry_ids is None:
        entry_ids = range(labels.size)
    entry_ids = tuple(entry_ids)
    if len(entry_ids) != labels.size:
        raise AlignmentError("entry_ids do not match the number of entries")
    onehot = np.zeros_like(proba)
    onehot[np.arange(labels.size), labels] = 1.0
    return ErrorVector(np.abs(proba - onehot), entry_ids)


def _paired(alt, null) -> tuple[np.ndarray, np.ndarray]:
    if isinstance(alt, ErrorVector) and isinstance(null, ErrorVector):
        if alt.entry_ids != null.entry_ids:
            raise AlignmentError("Error vectors are not paired by the same entry ids")
        alt, null = alt.flatten(), null.flatten()
    alt = np.asarray(alt, dtype=np.float64).ravel()
    null = np.asarray(null, dtype=np.float64).ravel()
    if alt.shape != null.shape:
        raise AlignmentError(f"Paired vectors differ in length: {alt.size} vs {null.size}")
    return alt, null


# Wilcoxon


class WilcoxonResult(NamedTuple):
    p_value: float
    statistic: float
    method: str
    n_used: int
    degenerate: bool


def _exact_lower_tail(doubled_ranks: np.ndarray, doubled_w: int) -> float:
    """P(W+ <= w) under the null, built one rank at a time as probabilities."""
    dist = np.zeros(int(doubled_ranks.sum()) + 1)
    dist[0] = 1.0
    for r in doubled_ranks:
        shifted = np.zeros_like(dist)
        shifted[r:] = dist[: dist.size - r]
        dist = 0.5 * (dist + shifted)
    return float(dist[: doubled_w + 1].sum())


def wilcoxon_one_tailed(
    alt, null, zero_method: str = "wilcox", method: str = "auto"
) -> WilcoxonResult:
    """Signed-rank test of d = alt - null against the alternative median(d) < 0.

    W is the sum of the ranks of the positive differences; small W favors the
    alternative. ``zero_method`` is "wilcox" (discard zeros before ranking) or
    "pratt" (rank with zeros, then drop them). ``method`` is "exact",
    "normal" or "auto" (exact up to 25 non-zero differences).
    """
    if zero_method not in ("wilcox", "pratt"):
        raise ConfigError(f"Unknown zero_method {zero_method!r}")
    if method not in ("auto", "exact", "normal"):
        raise ConfigError(f"Unknown method {method!r}")
    alt, null = _paired(alt, null)
    d = alt - null
    nonzero = d != 0
    m = int(nonzero.sum())
    if m == 0:
        return WilcoxonResult(1.0, 0.0, "degenerate", 0, True)

    if zero_method == "wilcox":
        ranks = rankdata(np.abs(d[nonzero]))
    else:
        ranks = rankdata(np.abs(d))[nonzero]
    d = d[nonzero]
    statistic = float(ranks[d > 0].sum())

    use_exact = method == "exact" or (method == "auto" and m <= EXACT_MAX_PAIRS)
    if use_exact:
        doubled = np.rint(2 * ranks).astype(np.int64)
        p = _exact_lower_tail(doubled, int(round(2 * statistic)))
        return WilcoxonResult(min(p, 1.0), statistic, "exact", m, False)

    # Each rank enters W+ with probability 1/2; tie-corrected by construction.
    mean = float(ranks.sum()) / 2.0
    var = float((ranks**2).sum()) / 4.0
    z = (statistic - mean + 0.5) / np.sqrt(var)
    return WilcoxonResult(float(min(norm.cdf(z), 1.0)), statistic, "normal", m, False)


# Effect size


def _correction(n: int) -> float:
    return 1.0 - 3.0 / (4.0 * (n - 1) - 1.0)


def hedges_gav(alt, null) -> float:
    """(mean(null) - mean(alt)) / mean(sd) with the small-sample correction.

    Positive when ``alt`` has the lower errors.
    """
    alt, null = _paired(alt, null)
    n = alt.size
    if n < 3:
        raise DataError(f"Hedges g_av needs at least 3 paired values, got {n}")
    sd_alt, sd_null = np.std(alt, ddof=1), np.std(null, ddof=1)
    if sd_alt < SD_FLOOR and sd_null < SD_FLOOR:
        raise DegenerateVarianceError("Both error vectors have zero standard deviation")
    d_av = (null.mean() - alt.mean()) / ((sd_alt + sd_null) / 2.0)
    return float(d_av * _correction(n))


def _gav_batch(alt: np.ndarray, null: np.ndarray, idx: np.ndarray) -> np.ndarray:
    a, b = alt[idx], null[idx]
    denom = (a.std(axis=1, ddof=1) + b.std(axis=1, ddof=1)) / 2.0
    gap = b.mean(axis=1) - a.mean(axis=1)
    with np.errstate(divide="ignore", invalid="ignore"):
        g = np.where(denom > SD_FLOOR, gap / denom, np.nan)
    return g * _correction(alt.size)


def _bootstrap_chunk(alt, null, seed_seq, size) -> np.ndarray:
    rng = np.random.default_rng(seed_seq)
    idx = rng.integers(0, alt.size, size=(size, alt.size))
    return _gav_batch(alt, null, idx)


def bootstrap_distribution(alt, null, n_boot: int = 10000, seed: int = 42, jobs: int = 1):
    alt, null = _paired(alt, null)
    if alt.size < MIN_BOOTSTRAP_PAIRS:
        raise DataError(
            f"Bootstrap needs at least {MIN_BOOTSTRAP_PAIRS} paired values, got {alt.size}"
        )
    if n_boot < 1:
        raise ConfigError(f"n_boot must be >= 1, got {n_boot}")
    sizes = [BOOTSTRAP_CHUNK] * (n_boot // BOOTSTRAP_CHUNK)
    if n_boot % BOOTSTRAP_CHUNK:
        sizes.append(n_boot % BOOTSTRAP_CHUNK)
    children = np.random.SeedSequence(seed).spawn(len(sizes))
    parts = Parallel(n_jobs=jobs)(
        delayed(_bootstrap_chunk)(alt, null, child, size)
        for child, size in zip(children, sizes)
    )
    return np.concatenate(parts)


@dataclass(frozen=True)
class BootstrapInterval:
    lower: float
    upper: float
    level: float

    @property
    def half_width(self) -> float:
        return (self.upper - self.lower) / 2.0

    def contains(self, value: float) -> bool:
        return self.lower <= value <= self.upper


def bootstrap_interval(
    alt, null, level: float = 0.95, n_boot: int = 10000, seed: int = 42, jobs: int = 1
) -> BootstrapInterval:
    if not 0.0 < level < 1.0:
        raise ConfigError(f"CI level must be in (0, 1), got {level}")
    samples = bootstrap_distribution(alt, null, n_boot=n_boot, seed=seed, jobs=jobs)
    if np.all(np.isnan(samples)):
        return BootstrapInterval(0.0, 0.0, level)
    tail = (1.0 - level) / 2.0
    lower, upper = np.nanquantile(samples, [tail, 1.0 - tail])
    return BootstrapInterval(float(lower), float(upper), level)


def bootstrap_ci(
    alt, null, level: float = 0.95, n_boot: int = 10000, seed: int = 42, jobs: int = 1
) -> float:
    """Half-width of the percentile bootstrap interval of g_av."""
    return bootstrap_interval(alt, null, level, n_boot, seed, jobs).half_width


def bonferroni(alpha: float, n_tests: int) -> tuple[float, float]:
    """Corrected alpha and the matching confidence level."""
    if not 0.0 < alpha < 1.0:
        raise ConfigError(f"alpha must be in (0, 1), got {alpha}")
    if n_tests < 1:
        raise ConfigError(f"n_tests must be >= 1, got {n_tests}")
    corrected = alpha / n_tests
    return corrected, 1.0 - corrected


# Reports


@dataclass(frozen=True)
class StatReport:
    alt: str
    null: str
    estimator: str
    p_value: float
    test_statistic: float
    test_method: str
    n_pairs: int
    degenerate: bool
    g_av: float
    ci_half_width: float
    ci_lower: float
    ci_upper: float
    ci_level: float
    mae_alt: float
    mae_null: float
    median_alt: float
    median_null: float
    sd_alt: float
    sd_null: float
    alpha: float
    alpha_corrected: float
    p_adjusted: float
    significant: bool

    def to_dict(self) -> dict:
        return asdict(self)


def compare_configurations(
    alt_proba,
    null_proba,
    labels,
    entry_ids=None,
    alt_name: str = "alt",
    null_name: str = "null",
    estimator: str = "",
    alpha: float = 0.05,
    n_tests: int = 1,
    n_boot: int = 10000,
    seed: int = 42,
    zero_method: str = "wilcox",
    jobs: int = 1,
) -> StatReport:
    alt = error_vectors(alt_proba, labels, entry_ids)
    null = error_vectors(null_proba, labels, entry_ids)
    a, b = alt.flatten(), null.flatten()
    alpha_corrected, level = bonferroni(alpha, n_tests)

    test = wilcoxon_one_tailed(alt, null, zero_method=zero_method)
    g = hedges_gav(alt, null)
    ci = bootstrap_interval(alt, null, level=level, n_boot=n_boot, seed=seed, jobs=jobs)
    p_adjusted = min(test.p_value * n_tests, 1.0)
    logger.info(
        f"{alt_name} vs {null_name} [{estimator}]: p={test.p_value:.3g} "
        f"g_av={g:.3f}±{ci.half_width:.3f}"
    )
    return StatReport(
        alt=alt_name,
        null=null_name,
        estimator=estimator,
        p_value=test.p_value,
        test_statistic=test.statistic,
        test_method=test.method,
        n_pairs=test.n_used,
        degenerate=test.degenerate,
        g_av=g,
        ci_half_width=ci.half_width,
        ci_lower=ci.lower,
        ci_upper=ci.upper,
        ci_level=level,
        mae_alt=float(a.mean()),
        mae_null=float(b.mean()),
        median_alt=float(np.median(a)),
        median_null=float(np.median(b)),
        sd_alt=float(np.std(a, ddof=1)),
        sd_null=float(np.std(b, ddof=1)),
        alpha=alpha,
        alpha_corrected=alpha_corrected,
        p_adjusted=p_adjusted,
        significant=bool(test.p_value < alpha_corrected),
    )


def adjust_family(reports: list[StatReport], alpha: float = 0.05) -> list[StatReport]:
    """Bonferroni-adjust p-values over one comparison family."""
    if not reports:
        return []
    reject, p_adj, _, alpha_bonf = multipletests(
        [r.p_value for r in reports], alpha=alpha, method="bonferroni"
    )
    return [
        replace(r, p_adjusted=float(p), significant=bool(rej), alpha_corrected=float(alpha_bonf))
        for r, p, rej in zip(reports, p_adj, reject)
    ]


def stat_table(reports: list[StatReport]) -> pd.DataFrame:
    rows = [
        {
            "comparison": f"{r.alt} vs {r.null}",
            "estimator": r.estimator,
            "p_value": r.p_value,
            "p_adjusted": r.p_adjusted,
            "g_av": f"{r.g_av:.3f}±{r.ci_half_width:.3f}",
            "mae_alt": r.mae_alt,
            "mae_null": r.mae_null,
            "median_alt": r.median_alt,
            "median_null": r.median_null,
            "sd_alt": r.sd_alt,
            "sd_null": r.sd_null,
            "significant": r.significant,
        }
        for r in reports
    ]
    return pd.DataFrame(rows)
