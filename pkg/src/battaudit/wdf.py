"""Usage-pattern degradation models: PCA-5 + Ridge with within-model pooling.

The pooling protocol is the point: leave-one-out cross-validation runs
inside each vehicle model (so baselines never mix across models and
Simpson's paradox cannot flip the sign of a within-model law), and the
out-of-fold predictions from all models of a platform are pooled into a
single R^2 around the pooled observed mean. PCA and feature scaling are
refit inside every training fold; nothing about a held-out row leaks into
its own prediction.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import InsufficientDataError
from .stats import spearman_rho

Z_CLIP = np.arctanh(0.999999)


# --------------------------------------------------------------------------
# building blocks
# --------------------------------------------------------------------------

@dataclass
class PCAModel:
    mean: np.ndarray
    scale: np.ndarray
    components: np.ndarray          # (k, p)
    explained_variance_ratio: np.ndarray
    rank_deficient: bool

    @property
    def k(self) -> int:
        return self.components.shape[0]

    def transform(self, x: np.ndarray) -> np.ndarray:
        return ((x - self.mean) / self.scale) @ self.components.T


def pca_fit(x: np.ndarray, n_components: int = 5) -> PCAModel:
    """Standardize columns, then keep the top components by variance.

    Constant columns are left centered with unit scale so they contribute
    nothing. If the matrix has rank below the requested component count, all
    available components are returned and the model is flagged. The sign
    convention makes the largest-magnitude loading of each component
    positive, so results do not depend on row order or solver phase.
    """
    x = np.asarray(x, dtype=float)
    n, p = x.shape
    if n < 2:
        raise InsufficientDataError("pca requires >= 2 rows")
    mean = x.mean(axis=0)
    scale = x.std(axis=0)
    scale[scale == 0] = 1.0
    z = (x - mean) / scale
    _, s, vt = np.linalg.svd(z, full_matrices=False)
    var = s**2
    tol = max(n, p) * np.finfo(float).eps * (s[0] if s.size else 0.0)
    rank = int(np.sum(s > tol))
    k = min(n_components, rank) if rank > 0 else 1
    comps = vt[:k]
    for i in range(k):
        j = np.argmax(np.abs(comps[i]))
        if comps[i, j] < 0:
            comps[i] = -comps[i]
    total = var.sum()
    evr = var[:k] / total if total > 0 else np.zeros(k)
    return PCAModel(
        mean=mean,
        scale=scale,
        components=comps,
        explained_variance_ratio=evr,
        rank_deficient=rank < n_components,
    )


@dataclass
class RidgeFit:
    coef: np.ndarray
    intercept: float
    alpha: float

    def predict(self, x: np.ndarray) -> np.ndarray:
        return np.asarray(x, dtype=float) @ self.coef + self.intercept


def ridge_fit(x: np.ndarray, y: np.ndarray, alpha: float = 1.0) -> RidgeFit:
    """Ridge regression with an unpenalized intercept.

    Minimizes ||y - X b - b0||^2 + alpha ||b||^2 by centering both sides and
    solving the regularized normal equations. The n >= p + 2 requirement
    applies to the unregularized case (alpha = 0, also refused when
    singular); any positive alpha keeps the system well-posed, which the
    leave-one-out protocol relies on at the minimum model size.
    """
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    n, p = x.shape
    if alpha < 0:
        raise ValueError("alpha must be >= 0")
    if alpha == 0 and n < p + 2:
        raise InsufficientDataError(f"ridge_fit with alpha=0 requires n >= p + 2 (n={n}, p={p})")
    if n < 2:
        raise InsufficientDataError("ridge_fit requires n >= 2")
    xm = x.mean(axis=0)
    ym = y.mean()
    xc = x - xm
    yc = y - ym
    gram = xc.T @ xc + alpha * np.eye(p)
    if alpha == 0 and np.linalg.matrix_rank(xc) < p:
        raise InsufficientDataError("singular normal equations with alpha = 0")
    coef = np.linalg.solve(gram, xc.T @ yc)
    return RidgeFit(coef=coef, intercept=float(ym - xm @ coef), alpha=alpha)


# --------------------------------------------------------------------------
# within-model pooled LOOCV
# --------------------------------------------------------------------------

@dataclass
class WDFResult:
    pooled_r2: float | None
    n_pooled: int
    per_model_n: dict        # model -> vehicle count (included models)
    predictions: np.ndarray  # out-of-fold prediction per row (nan if excluded)
    included_models: list
    excluded_models: dict    # model -> reason

    def to_dict(self) -> dict:
        return {
            "pooled_r2": self.pooled_r2,
            "n_pooled": self.n_pooled,
            "per_model_n": self.per_model_n,
            "included_models": self.included_models,
            "excluded_models": self.excluded_models,
        }


def _standardize_extra(train: np.ndarray, test: np.ndarray):
    mu = train.mean(axis=0)
    sd = train.std(axis=0)
    sd[sd == 0] = 1.0
    return (train - mu) / sd, (test - mu) / sd


def pooled_loocv(
    features: np.ndarray,
    target: np.ndarray,
    model_labels,
    min_model_n: int = 7,
    n_components: int = 5,
    alpha: float = 1.0,
    extra: np.ndarray | None = None,
) -> WDFResult:
    """Within-model LOOCV, pooled across models into one cross-validated R^2.

    Models with fewer than ``min_model_n`` vehicles, or fewer than the
    realized PCA component count + 2, are excluded with a reason. ``extra``
    columns (e.g. a peak-voltage marker) bypass the PCA and enter the
    regression standardized but otherwise raw. Pooled R^2 is
    1 - SSE/SST with SST around the pooled mean of the observed targets
    among out-of-fold rows.
    """
    x = np.asarray(features, dtype=float)
    y = np.asarray(target, dtype=float)
    labels = np.asarray(model_labels)
    if extra is not None:
        extra = np.asarray(extra, dtype=float)
        if extra.ndim == 1:
            extra = extra[:, None]
    n = len(y)
    preds = np.full(n, np.nan)
    per_model_n: dict = {}
    included, excluded = [], {}

    for model in sorted(set(labels.tolist())):
        idx = np.nonzero(labels == model)[0]
        n_m = len(idx)
        if n_m < min_model_n:
            excluded[model] = f"n={n_m} < min_model_n={min_model_n}"
            continue
        k_real = pca_fit(x[idx], n_components).k
        if n_m < k_real + 2:
            excluded[model] = f"n={n_m} < components+2={k_real + 2}"
            continue
        for i in idx:
            train = idx[idx != i]
            pca = pca_fit(x[train], n_components)
            zt = pca.transform(x[train])
            zi = pca.transform(x[i][None, :])
            if extra is not None:
                et, ei = _standardize_extra(extra[train], extra[i][None, :])
                zt = np.column_stack([zt, et])
                zi = np.column_stack([zi, ei])
            fit = ridge_fit(zt, y[train], alpha)
            preds[i] = fit.predict(zi)[0]
        included.append(model)
        per_model_n[model] = n_m

    mask = np.isfinite(preds)
    if not np.any(mask):
        return WDFResult(
            pooled_r2=None, n_pooled=0, per_model_n=per_model_n,
            predictions=preds, included_models=included, excluded_models=excluded,
        )
    sse = float(np.sum((y[mask] - preds[mask]) ** 2))
    sst = float(np.sum((y[mask] - y[mask].mean()) ** 2))
    r2 = 1.0 - sse / sst if sst > 0 else None
    return WDFResult(
        pooled_r2=r2, n_pooled=int(mask.sum()), per_model_n=per_model_n,
        predictions=preds, included_models=included, excluded_models=excluded,
    )


def hierarchical_r2(
    bin_features: np.ndarray,
    mileage: np.ndarray,
    target: np.ndarray,
    model_labels,
    min_model_n: int = 7,
    n_components: int = 5,
    alpha: float = 1.0,
) -> dict:
    """Variance decomposition: mileage-only, usage-only, and usage beyond mileage.

    partial_wdf = R^2(mileage + bins) - R^2(mileage); negative values are
    reported as-is.
    """
    mileage = np.asarray(mileage, dtype=float)[:, None]
    r_m = pooled_loocv(mileage, target, model_labels, min_model_n, n_components, alpha)
    r_w = pooled_loocv(bin_features, target, model_labels, min_model_n, n_components, alpha)
    r_c = pooled_loocv(bin_features, target, model_labels, min_model_n, n_components, alpha,
                       extra=mileage)
    partial = None
    if r_c.pooled_r2 is not None and r_m.pooled_r2 is not None:
        partial = r_c.pooled_r2 - r_m.pooled_r2
    return {
        "r2_mileage": r_m.pooled_r2,
        "r2_wdf": r_w.pooled_r2,
        "r2_combined": r_c.pooled_r2,
        "partial_wdf": partial,
    }


def augmented_wdf(
    bin_features: np.ndarray,
    v_peak: np.ndarray,
    target: np.ndarray,
    model_labels,
    min_model_n: int = 7,
    n_components: int = 5,
    alpha: float = 1.0,
) -> dict:
    """Bins-only vs bins + peak-voltage marker, same pooled-LOOCV protocol.

    The marker stays a separate regression column rather than entering the
    PCA, so its signal is not diluted across usage components.
    """
    vp = np.asarray(v_peak, dtype=float)
    if np.any(~np.isfinite(vp)):
        raise InsufficientDataError("augmented_wdf requires v_peak for every included row")
    r_bins = pooled_loocv(bin_features, target, model_labels, min_model_n, n_components, alpha)
    r_aug = pooled_loocv(bin_features, target, model_labels, min_model_n, n_components, alpha,
                         extra=vp[:, None])
    delta = None
    if r_bins.pooled_r2 is not None and r_aug.pooled_r2 is not None:
        delta = r_aug.pooled_r2 - r_bins.pooled_r2
    return {"r2_bins": r_bins.pooled_r2, "r2_aug": r_aug.pooled_r2, "delta": delta}


# --------------------------------------------------------------------------
# Fisher-z pooled correlations
# --------------------------------------------------------------------------

@dataclass
class PooledCorrelation:
    rho_pooled: float | None
    per_model: list          # dicts: model, rho, n, weight
    n_models: int
    clipped: bool
    method: str = "fisher-z inverse-variance (w = n - 3)"

    def to_dict(self) -> dict:
        return dict(self.__dict__)


def fisher_pooled_rho(x, y, model_labels, min_n: int = 4) -> PooledCorrelation:
    """Pool within-model Spearman correlations via Fisher z.

    z_i = atanh(rho_i), pooled z = sum(w_i z_i) / sum(w_i) with w_i = n_i - 3,
    back-transformed with tanh. A per-model |rho| of 1 is clipped to
    atanh(0.999999) and flagged. For one model this reduces to its rho.
    """
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    labels = np.asarray(model_labels)
    per_model = []
    clipped = False
    for model in sorted(set(labels.tolist())):
        idx = labels == model
        n_m = int(idx.sum())
        if n_m < min_n:
            continue
        rho = spearman_rho(x[idx], y[idx])
        if rho is None:
            continue
        if abs(rho) >= 1.0:
            z = np.sign(rho) * Z_CLIP
            clipped = True
        else:
            z = np.arctanh(rho)
        per_model.append({"model": model, "rho": rho, "n": n_m, "z": float(z),
                          "weight": n_m - 3})
    if not per_model:
        return PooledCorrelation(rho_pooled=None, per_model=[], n_models=0, clipped=False)
    w = np.array([m["weight"] for m in per_model], dtype=float)
    z = np.array([m["z"] for m in per_model])
    pooled = float(np.tanh(np.sum(w * z) / np.sum(w)))
    return PooledCorrelation(
        rho_pooled=pooled, per_model=per_model, n_models=len(per_model), clipped=clipped,
    )


# --------------------------------------------------------------------------
# normalized leave-one-subgroup-out transfer
# --------------------------------------------------------------------------

def _zscore_within(x: np.ndarray, groups: np.ndarray) -> np.ndarray:
    out = np.empty_like(x, dtype=float)
    for g in np.unique(groups):
        m = groups == g
        mu = x[m].mean(axis=0)
        sd = x[m].std(axis=0)
        sd = np.where(sd == 0, 1.0, sd)
        out[m] = (x[m] - mu) / sd
    return out


def _r2_score(y_true: np.ndarray, y_pred: np.ndarray) -> float:
    sst = float(np.sum((y_true - y_true.mean()) ** 2))
    if sst == 0:
        return float("nan")
    return 1.0 - float(np.sum((y_true - y_pred) ** 2)) / sst


def render_r2(v) -> str:
    """Human rendering: negative transfer collapses to "<=0"."""
    if v is None or (isinstance(v, float) and not np.isfinite(v)):
        return "N/A"
    return "<=0" if v <= 0 else f"{v:.2f}"


def normalized_loso(
    features: np.ndarray,
    target: np.ndarray,
    platform_labels,
    n_components: int = 5,
    alpha: float = 1.0,
    normalize: bool = True,
    min_test_n: int = 5,
) -> dict:
    """Cross-platform transfer with per-platform z-scored features and targets.

    LOSO trains on all-but-one platform and scores R^2 on the held-out one;
    the pairwise matrix trains on a single source platform. Held-out
    platforms below ``min_test_n`` vehicles are skipped with a reason.
    Negative R^2 is kept numeric here; use ``render_r2`` for display.
    """
    x = np.asarray(features, dtype=float)
    y = np.asarray(target, dtype=float)
    groups = np.asarray(platform_labels)
    platforms = sorted(set(groups.tolist()))
    if len(platforms) < 2:
        raise InsufficientDataError("normalized_loso requires >= 2 platforms")
    if normalize:
        x = _zscore_within(x, groups)
        y = _zscore_within(y[:, None], groups)[:, 0]

    def _fit_score(train_mask, test_mask):
        pca = pca_fit(x[train_mask], n_components)
        fit = ridge_fit(pca.transform(x[train_mask]), y[train_mask], alpha)
        pred = fit.predict(pca.transform(x[test_mask]))
        return _r2_score(y[test_mask], pred)

    loso: dict = {}
    skipped: dict = {}
    for p in platforms:
        test = groups == p
        if int(test.sum()) < min_test_n:
            skipped[p] = f"held-out n={int(test.sum())} < {min_test_n}"
            continue
        loso[p] = _fit_score(~test, test)
    pairwise: dict = {}
    for src in platforms:
        for dst in platforms:
            if src == dst:
                continue
            test = groups == dst
            if int(test.sum()) < min_test_n:
                continue
            pairwise[f"{src}->{dst}"] = _fit_score(groups == src, test)
    return {
        "normalized": normalize,
        "loso_r2": loso,
        "skipped": skipped,
        "pairwise_r2": pairwise,
        "platforms": platforms,
    }
