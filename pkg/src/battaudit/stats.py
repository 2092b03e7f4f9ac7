"""Epidemiological statistics: correlations, rank tests, bootstrap, power.

Small samples get exact answers on purpose: Spearman p-values come from full
permutation enumeration for n <= 10 and Mann-Whitney p-values from full
arrangement enumeration when both sides have n <= 8, so they can be checked
against brute-force oracles. Larger samples use the standard approximations
(t for Spearman, tie-corrected normal for Mann-Whitney).

All tests are two-sided.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from math import comb, factorial

import numpy as np
from scipy import stats as sps


# --------------------------------------------------------------------------
# rank helpers
# --------------------------------------------------------------------------

def _ranks(x: np.ndarray) -> np.ndarray:
    """Average ranks (ties share the mean rank)."""
    return sps.rankdata(x, method="average")


@dataclass
class CorrelationResult:
    rho: float | None
    p: float | None
    n: int
    method: str = ""

    def to_dict(self) -> dict:
        return {"rho": self.rho, "p": self.p, "n": self.n, "method": self.method}


def spearman_rho(x, y) -> float | None:
    """Just the rank correlation, no p-value.

    The resampling and pooling paths call this thousands of times; the exact
    permutation p of `spearman` would be pointless work there.
    """
    xr = _ranks(np.asarray(x, dtype=float))
    yr = _ranks(np.asarray(y, dtype=float))
    if np.std(xr) == 0 or np.std(yr) == 0:
        return None
    xc, yc = xr - xr.mean(), yr - yr.mean()
    return float(np.dot(xc, yc) / np.sqrt(np.sum(xc**2) * np.sum(yc**2)))


def spearman(x, y, exact_max_n: int = 10) -> CorrelationResult:
    """Spearman rank correlation with a two-sided p-value.

    p is exact (full n! permutation enumeration) for n <= exact_max_n and a
    t-approximation above. Constant input makes the coefficient undefined,
    reported as absent rather than zero.
    """
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    n = len(x)
    if n != len(y):
        raise ValueError("length mismatch")
    if n < 4:
        raise ValueError("spearman requires n >= 4")
    xr, yr = _ranks(x), _ranks(y)
    if np.std(xr) == 0 or np.std(yr) == 0:
        return CorrelationResult(rho=None, p=None, n=n, method="undefined: constant input")
    xc = xr - xr.mean()
    yc = yr - yr.mean()
    denom = np.sqrt(np.sum(xc**2) * np.sum(yc**2))
    rho = float(np.dot(xc, yc) / denom)
    if n <= exact_max_n:
        p = _spearman_exact_p(xc, yc, denom)
        return CorrelationResult(rho=rho, p=p, n=n, method="exact permutation")
    if abs(rho) >= 1.0:
        return CorrelationResult(rho=rho, p=0.0, n=n, method="t approximation")
    t = rho * np.sqrt((n - 2) / (1 - rho**2))
    p = float(2 * sps.t.sf(abs(t), df=n - 2))
    return CorrelationResult(rho=rho, p=p, n=n, method="t approximation")


def _spearman_exact_p(xc: np.ndarray, yc: np.ndarray, denom: float) -> float:
    """Two-sided permutation p: fraction of y-orderings at least as extreme."""
    n = len(xc)
    obs = abs(np.dot(xc, yc))
    total = factorial(n)
    count = 0
    chunk = 200_000
    perm_iter = itertools.permutations(range(n))
    eps = 1e-9 * denom
    while True:
        block = list(itertools.islice(perm_iter, chunk))
        if not block:
            break
        dots = np.abs(yc[np.array(block)] @ xc)
        count += int(np.sum(dots >= obs - eps))
    return count / total


def pearson(x, y) -> CorrelationResult:
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    n = len(x)
    if np.std(x) == 0 or np.std(y) == 0:
        return CorrelationResult(rho=None, p=None, n=n, method="undefined: constant input")
    r, p = sps.pearsonr(x, y)
    return CorrelationResult(rho=float(r), p=float(p), n=n, method="pearson")


# --------------------------------------------------------------------------
# Mann-Whitney U
# --------------------------------------------------------------------------

@dataclass
class MannWhitneyResult:
    u: float
    p: float
    n1: int
    n2: int
    method: str

    def to_dict(self) -> dict:
        return {"U": self.u, "p": self.p, "n1": self.n1, "n2": self.n2, "method": self.method}


def mannwhitney_u(a, b, exact_max_per_side: int = 8) -> MannWhitneyResult:
    """Two-sided Mann-Whitney U test.

    Exact enumeration of all C(n1+n2, n1) group assignments when both sides
    have at most ``exact_max_per_side`` observations (ties handled by
    enumerating index combinations over the pooled average ranks); the
    tie-corrected normal approximation with continuity correction otherwise.
    The two-sided p is 2 * min(lower tail, upper tail), capped at 1.
    """
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    n1, n2 = len(a), len(b)
    if n1 == 0 or n2 == 0:
        raise ValueError("both samples must be nonempty")
    pooled = np.concatenate([a, b])
    ranks = _ranks(pooled)
    r1 = float(np.sum(ranks[:n1]))
    u1 = r1 - n1 * (n1 + 1) / 2.0

    if n1 <= exact_max_per_side and n2 <= exact_max_per_side:
        us = _mw_enumerate_u(ranks, n1)
        lower = np.sum(us <= u1 + 1e-9) / len(us)
        upper = np.sum(us >= u1 - 1e-9) / len(us)
        p = min(1.0, 2.0 * min(lower, upper))
        return MannWhitneyResult(u=u1, p=float(p), n1=n1, n2=n2, method="exact enumeration")

    nn = n1 + n2
    mu = n1 * n2 / 2.0
    _, tie_counts = np.unique(pooled, return_counts=True)
    tie_term = np.sum(tie_counts**3 - tie_counts) / (nn * (nn - 1))
    sigma2 = n1 * n2 / 12.0 * ((nn + 1) - tie_term)
    if sigma2 <= 0:
        return MannWhitneyResult(u=u1, p=1.0, n1=n1, n2=n2, method="normal approximation")
    z = (u1 - mu - 0.5 * np.sign(u1 - mu)) / np.sqrt(sigma2)
    p = float(min(1.0, 2.0 * sps.norm.sf(abs(z))))
    return MannWhitneyResult(u=u1, p=p, n1=n1, n2=n2, method="normal approximation")


def _mw_enumerate_u(ranks: np.ndarray, n1: int) -> np.ndarray:
    n = len(ranks)
    combos = np.array(list(itertools.combinations(range(n), n1)))
    r1 = ranks[combos].sum(axis=1)
    return r1 - n1 * (n1 + 1) / 2.0


# --------------------------------------------------------------------------
# quartile comparisons
# --------------------------------------------------------------------------

@dataclass
class QuartileGap:
    metric: str
    q1_mean: float
    q4_mean: float
    gap: float          # (Q4 - Q1)/Q1 * 100, or Q4 - Q1 in points when as_points
    as_points: bool
    p_value: float
    n_per_quartile: int
    had_boundary_ties: bool

    def to_dict(self) -> dict:
        return dict(self.__dict__)


def quartile_gap(health, stratifier, metric: str = "", as_points: bool = False,
                 min_n: int = 12) -> QuartileGap:
    """Q4 vs Q1 comparison of ``health`` after sorting by ``stratifier``.

    Quartile membership ties at the boundary are resolved by stable sort
    order and flagged in the result. The p-value is a two-sided
    Mann-Whitney U on the two groups' health values.
    """
    health = np.asarray(health, dtype=float)
    stratifier = np.asarray(stratifier, dtype=float)
    n = len(health)
    if n < min_n:
        raise ValueError(f"quartile_gap requires n >= {min_n}, got {n}")
    order = np.argsort(stratifier, kind="stable")
    k = n // 4
    q1_idx, q4_idx = order[:k], order[-k:]
    boundary_ties = (stratifier[order[k - 1]] == stratifier[order[k]]) or (
        stratifier[order[-k]] == stratifier[order[-k - 1]]
    )
    q1, q4 = health[q1_idx], health[q4_idx]
    if as_points:
        gap = float(np.mean(q4) - np.mean(q1))
    else:
        gap = float((np.mean(q4) - np.mean(q1)) / np.mean(q1) * 100.0)
    p = mannwhitney_u(q1, q4).p
    return QuartileGap(
        metric=metric,
        q1_mean=float(np.mean(q1)),
        q4_mean=float(np.mean(q4)),
        gap=gap,
        as_points=as_points,
        p_value=p,
        n_per_quartile=k,
        had_boundary_ties=bool(boundary_ties),
    )


# --------------------------------------------------------------------------
# bootstrap
# --------------------------------------------------------------------------

@dataclass
class BootstrapCI:
    lo: float
    hi: float
    point: float
    n_boot: int
    seed: int
    widened: bool  # statistic was undefined on > 10% of resamples

    def to_dict(self) -> dict:
        return dict(self.__dict__)


def bootstrap_ci(statistic, data, n_boot: int = 1000, seed: int = 0,
                 ci: float = 0.95) -> BootstrapCI:
    """Percentile bootstrap CI with per-iteration counter-based RNG streams.

    ``data`` is an array or a tuple of equal-length arrays resampled jointly
    by row. Each iteration derives its own generator from (seed, iteration),
    so results are independent of evaluation order.
    """
    arrays = data if isinstance(data, tuple) else (data,)
    arrays = tuple(np.asarray(a) for a in arrays)
    n = len(arrays[0])
    if n < 8:
        raise ValueError("bootstrap_ci requires n >= 8")
    point = statistic(*arrays)
    vals = np.empty(n_boot)
    bad = 0
    for k in range(n_boot):
        rng = np.random.default_rng([seed, k])
        idx = rng.integers(0, n, n)
        try:
            v = statistic(*(a[idx] for a in arrays))
        except Exception:
            v = np.nan
        if v is None or not np.isfinite(v):
            bad += 1
            vals[k] = np.nan
        else:
            vals[k] = v
    good = vals[np.isfinite(vals)]
    tail = (1 - ci) / 2 * 100
    lo, hi = np.percentile(good, [tail, 100 - tail])
    return BootstrapCI(
        lo=float(lo), hi=float(hi), point=float(point),
        n_boot=n_boot, seed=seed, widened=bad > 0.10 * n_boot,
    )


# --------------------------------------------------------------------------
# multiple comparisons, partial correlation, power
# --------------------------------------------------------------------------

def bonferroni(p_values, m: int | None = None, alpha: float = 0.05) -> dict:
    """Reject H0_i iff p_i < alpha / m."""
    p_values = list(p_values)
    m = m if m is not None else len(p_values)
    if m < 1:
        raise ValueError("m >= 1 required")
    adjusted_alpha = alpha / m
    return {
        "alpha": alpha,
        "m": m,
        "adjusted_alpha": adjusted_alpha,
        "reject": [bool(p is not None and p < adjusted_alpha) for p in p_values],
    }


def partial_spearman(x, y, control) -> float:
    """Rank-based partial correlation of x and y given one control variable.

    All three variables are rank-transformed; x-ranks and y-ranks are
    residualized on the control ranks by least squares and the Pearson
    correlation of the residuals is returned. A constant control reduces to
    plain Spearman.
    """
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    control = np.asarray(control, dtype=float)
    if len(x) < 10:
        raise ValueError("partial_spearman requires n >= 10")
    if np.std(control) == 0:
        return spearman(x, y).rho
    xr, yr, cr = _ranks(x), _ranks(y), _ranks(control)
    design = np.column_stack([np.ones(len(cr)), cr])
    rx = xr - design @ np.linalg.lstsq(design, xr, rcond=None)[0]
    ry = yr - design @ np.linalg.lstsq(design, yr, rcond=None)[0]
    return float(np.corrcoef(rx, ry)[0, 1])


def posthoc_power(rho_alt: float, n: int, alpha: float = 0.05) -> float:
    """Approximate power of a two-sided correlation test via Fisher z.

    power = Phi(sqrt(n - 3) * atanh(rho_alt) - z_{1 - alpha/2})
    """
    if n < 4:
        raise ValueError("posthoc_power requires n >= 4")
    z_crit = sps.norm.ppf(1 - alpha / 2)
    return float(sps.norm.cdf(np.sqrt(n - 3) * np.arctanh(rho_alt) - z_crit))


# --------------------------------------------------------------------------
# dose-response and warranty audit
# --------------------------------------------------------------------------

@dataclass
class DoseResponse:
    per_bin: list[dict]             # SOC-bin occupancy vs health correlations
    bands: list[dict]               # mileage-stratified Q1-vs-Q4 gaps
    high_soc_edge: float

    def to_dict(self) -> dict:
        return {"per_bin": self.per_bin, "bands": self.bands, "high_soc_edge": self.high_soc_edge}


def dose_response(
    soc_bins: np.ndarray,
    health,
    mileage,
    high_soc_edge: float = 80.0,
    n_bands: int = 4,
    min_vehicles: int = 20,
    min_band_n: int = 6,
) -> DoseResponse:
    """Per-SOC-bin health correlations plus mileage-stratified exposure gaps.

    ``soc_bins`` is (n_vehicles, 10) occupancy fractions. Within each mileage
    band (quantile-based), vehicles are split into quartiles of high-SOC
    occupancy and the Q4-Q1 relative health gap is reported; bands with
    fewer than ``min_band_n`` vehicles are skipped.
    """
    soc_bins = np.asarray(soc_bins, dtype=float)
    health = np.asarray(health, dtype=float)
    mileage = np.asarray(mileage, dtype=float)
    n = len(health)
    if n < min_vehicles:
        raise ValueError(f"dose_response requires >= {min_vehicles} vehicles")
    per_bin = []
    for j in range(soc_bins.shape[1]):
        res = spearman(soc_bins[:, j], health)
        per_bin.append({"soc_bin": j, "rho": res.rho, "p": res.p})

    first_high = int(high_soc_edge // 10)
    high_frac = soc_bins[:, first_high:].sum(axis=1)
    edges = np.quantile(mileage, np.linspace(0, 1, n_bands + 1))
    bands = []
    for bi in range(n_bands):
        lo, hi = edges[bi], edges[bi + 1]
        mask = (mileage >= lo) & ((mileage <= hi) if bi == n_bands - 1 else (mileage < hi))
        nb = int(mask.sum())
        if nb < min_band_n:
            bands.append({"band": bi, "mileage_lo": float(lo), "mileage_hi": float(hi),
                          "n": nb, "skipped": True})
            continue
        h, f = health[mask], high_frac[mask]
        order = np.argsort(f, kind="stable")
        k = max(1, nb // 4)
        q1, q4 = h[order[:k]], h[order[-k:]]
        gap = float((np.mean(q4) - np.mean(q1)) / np.mean(q1) * 100.0)
        bands.append({
            "band": bi, "mileage_lo": float(lo), "mileage_hi": float(hi),
            "n": nb, "skipped": False, "gap_pct": gap,
            "q1_mean": float(np.mean(q1)), "q4_mean": float(np.mean(q4)),
        })
    return DoseResponse(per_bin=per_bin, bands=bands, high_soc_edge=high_soc_edge)


@dataclass
class WarrantyAudit:
    slope: float
    intercept: float
    r2: float
    n: int
    miss_rate_bottom: dict         # {5: fraction, 10: fraction}
    healthy_spread: tuple | None   # (min, max) relative capacity among SOH >= 95
    clamped_soh: bool

    def to_dict(self) -> dict:
        d = dict(self.__dict__)
        d["miss_rate_bottom"] = {str(k): v for k, v in self.miss_rate_bottom.items()}
        d["healthy_spread"] = list(self.healthy_spread) if self.healthy_spread else None
        return d


def warranty_audit(soh, rel_capacity, ks=(5, 10), healthy_soh: float = 95.0,
                   min_n: int = 20) -> WarrantyAudit:
    """How well BMS SOH tracks independently measured relative capacity.

    Reports the least-squares slope of SOH on relative capacity (ideal 1.0),
    the fraction of bottom-k% capacity vehicles the BMS fails to place in its
    own bottom k% (ties in SOH broken by stable order), and the capacity
    spread hidden behind "healthy" SOH readings.
    """
    soh = np.asarray(soh, dtype=float)
    rel = np.asarray(rel_capacity, dtype=float)
    n = len(soh)
    if n < min_n:
        raise ValueError(f"warranty_audit requires n >= {min_n}")
    clamped = np.std(soh) == 0
    if clamped:
        slope, intercept, r2 = 0.0, float(np.mean(soh)), 0.0
    else:
        slope, intercept = np.polyfit(rel, soh, 1)
        pred = slope * rel + intercept
        ss_res = np.sum((soh - pred) ** 2)
        ss_tot = np.sum((soh - np.mean(soh)) ** 2)
        r2 = 1 - ss_res / ss_tot
    by_rel = np.argsort(rel, kind="stable")
    by_soh = np.argsort(soh, kind="stable")
    miss = {}
    for k in ks:
        nk = max(1, int(round(k / 100 * n)))
        worst_rel = set(by_rel[:nk].tolist())
        worst_soh = set(by_soh[:nk].tolist())
        miss[k] = len(worst_rel - worst_soh) / nk
    healthy = rel[soh >= healthy_soh]
    spread = (float(np.min(healthy)), float(np.max(healthy))) if healthy.size else None
    return WarrantyAudit(
        slope=float(slope),
        intercept=float(intercept),
        r2=float(r2),
        n=n,
        miss_rate_bottom=miss,
        healthy_spread=spread,
        clamped_soh=bool(clamped),
    )


def iqr_filter(*arrays, factor: float = 1.5) -> np.ndarray:
    """Mask of rows inside the 1.5*IQR fences on every given axis.

    Only applied where a report explicitly asks for outlier removal.
    """
    mask = np.ones(len(arrays[0]), dtype=bool)
    for a in arrays:
        a = np.asarray(a, dtype=float)
        q1, q3 = np.percentile(a, [25, 75])
        iqr = q3 - q1
        mask &= (a >= q1 - factor * iqr) & (a <= q3 + factor * iqr)
    return mask
