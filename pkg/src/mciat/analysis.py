"""Evaluation metrics and representation-behaviour association statistics."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import stats

from . import autograd as ag
from .synth import kfold_split

# ---------------------------------------------------------------------------
# classification metrics


@dataclass
class MetricsReport:
    """Confusion-derived metrics; a metric with an empty denominator is ``None``."""

    acc: float | None
    sen: float | None
    spe: float | None
    auc: float | None
    tp: int
    tn: int
    fp: int
    fn: int

    FIELDS = ("acc", "sen", "spe", "auc", "tp", "tn", "fp", "fn")

    def as_dict(self) -> dict:
        return {k: getattr(self, k) for k in self.FIELDS}


def _ratio(num: int, den: int) -> float | None:
    return num / den if den else None


def _binary(name: str, values) -> np.ndarray:
    arr = np.asarray(values)
    if arr.ndim != 1 or not np.all(np.isin(arr, (0, 1))):
        raise ValueError(f"{name} must be a 1-D array of 0/1 values")
    return arr.astype(np.int64)


def classification_metrics(predictions, labels, scores=None) -> MetricsReport:
    pred = _binary("predictions", predictions)
    lab = _binary("labels", labels)
    if pred.shape != lab.shape:
        raise ValueError(f"{len(pred)} predictions for {len(lab)} labels")
    tp = int(np.sum((pred == 1) & (lab == 1)))
    tn = int(np.sum((pred == 0) & (lab == 0)))
    fp = int(np.sum((pred == 1) & (lab == 0)))
    fn = int(np.sum((pred == 0) & (lab == 1)))
    auc = auc_score(scores, lab) if scores is not None else None
    return MetricsReport(_ratio(tp + tn, len(lab)), _ratio(tp, tp + fn), _ratio(tn, tn + fp), auc, tp, tn, fp, fn)


def auc_score(scores, labels) -> float | None:
    """Mann-Whitney estimate of P(pos > neg) + 0.5 P(pos == neg); ``None`` for one class."""
    scores = np.asarray(scores, dtype=np.float64)
    lab = _binary("labels", labels)
    if scores.shape != lab.shape:
        raise ValueError(f"{len(scores)} scores for {len(lab)} labels")
    n_pos = int(lab.sum())
    n_neg = len(lab) - n_pos
    if n_pos == 0 or n_neg == 0:
        return None
    ranks = stats.rankdata(scores)
    u = ranks[lab == 1].sum() - n_pos * (n_pos + 1) / 2
    return float(u / (n_pos * n_neg))


# ---------------------------------------------------------------------------
# linear probe: L2 logistic regression by full-batch gradient descent


@dataclass
class Standardizer:
    mean: np.ndarray
    scale: np.ndarray

    @classmethod
    def fit(cls, x: np.ndarray) -> "Standardizer":
        sd = x.std(axis=0)
        return cls(x.mean(axis=0), np.where(sd > 0, sd, 1.0))

    def __call__(self, x: np.ndarray) -> np.ndarray:
        return (x - self.mean) / self.scale


@dataclass
class ProbeModel:
    scaler: Standardizer
    weight: np.ndarray
    bias: float

    def decision(self, x: np.ndarray) -> np.ndarray:
        return self.scaler(np.asarray(x, dtype=np.float64)) @ self.weight + self.bias


def fit_logistic(x, y, reg: float = 1e-2, iterations: int = 2000) -> ProbeModel:
    """Minimise mean log-loss + reg/2 |w|^2 with a step of 1/L (L the gradient Lipschitz bound)."""
    x = np.asarray(x, dtype=np.float64)
    y = _binary("labels", y).astype(np.float64)
    if x.ndim != 2 or len(x) != len(y):
        raise ValueError(f"features {x.shape} do not match {len(y)} labels")
    if not np.any(x.std(axis=0) > 0):
        raise ValueError("probe features have zero variance everywhere")
    scaler = Standardizer.fit(x)
    xs = scaler(x)
    lipschitz = 0.25 * (np.linalg.norm(xs, 2) ** 2 / len(xs) + 1.0) + reg
    step = 1.0 / lipschitz
    w = ag.Tensor(np.zeros(xs.shape[1]), requires_grad=True)
    b = ag.Tensor(np.zeros(1), requires_grad=True)
    xt = ag.Tensor(xs)
    target = ag.Tensor(y)
    for _ in range(iterations):
        z = ag.add(ag.matmul(xt, ag.reshape(w, (-1, 1))), b)
        z = ag.reshape(z, (len(y),))
        # log(1 + e^z) - y z, written with a stable softplus
        softplus = ag.add(ag.clip(z, 0.0, np.inf), ag.log(ag.add(1.0, ag.exp(ag.mul(_abs(z), -1.0)))))
        loss = ag.add(ag.mean(ag.sub(softplus, ag.mul(target, z))), ag.mul(ag.sum_(ag.mul(w, w)), 0.5 * reg))
        w.zero_grad()
        b.zero_grad()
        ag.backward(loss, (w, b))
        w.data -= step * w.grad
        b.data -= step * b.grad
    return ProbeModel(scaler, w.data.copy(), float(b.data[0]))


def _abs(z: ag.Tensor) -> ag.Tensor:
    return ag.mul(z, np.sign(z.data))


def linear_probe(train_x, train_y, test_x, test_y, reg: float = 1e-2, iterations: int = 2000) -> MetricsReport:
    model = fit_logistic(train_x, train_y, reg, iterations)
    score = model.decision(test_x)
    return classification_metrics((score > 0).astype(int), test_y, score)


# ---------------------------------------------------------------------------
# partial least squares (PLS1, NIPALS)


@dataclass
class PLSRModel:
    x_scaler: Standardizer
    y_mean: float
    y_scale: float
    weights: np.ndarray  # W, (features, components)
    loadings: np.ndarray  # P, (features, components)
    y_loadings: np.ndarray  # q, (components,)
    coef: np.ndarray  # regression vector in standardized units

    @property
    def n_components(self) -> int:
        return self.weights.shape[1]

    def predict(self, x) -> np.ndarray:
        xs = self.x_scaler(np.asarray(x, dtype=np.float64))
        return self.y_mean + self.y_scale * (xs @ self.coef)


def plsr_fit(x, y, components: int = 5, tol: float = 1e-10, max_iter: int = 500) -> PLSRModel:
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if components < 1:
        raise ValueError(f"components must be >= 1, got {components}")
    if x.ndim != 2 or y.shape != (len(x),):
        raise ValueError(f"PLSR needs X (n, f) and y (n,), got {x.shape} and {y.shape}")
    y_sd = y.std()
    if not y_sd > 0:
        raise ValueError("PLSR target has zero variance")
    scaler = Standardizer.fit(x)
    xr = scaler(x)
    yr = (y - y.mean()) / y_sd
    ws, ps, qs = [], [], []
    for _ in range(components):
        # with a single response the y-score is y itself, so the inner
        # NIPALS loop settles after its second pass
        t_old = None
        for _ in range(max_iter):
            w = xr.T @ yr
            norm = np.linalg.norm(w)
            if norm < 1e-12:
                break
            w /= norm
            t = xr @ w
            if t_old is not None and np.linalg.norm(t - t_old) <= tol * np.linalg.norm(t):
                break
            t_old = t
        if norm < 1e-12:
            # X is exhausted: fewer components than requested exist
            break
        tt = t @ t
        p = xr.T @ t / tt
        q = (yr @ t) / tt
        xr = xr - np.outer(t, p)
        yr = yr - q * t
        ws.append(w)
        ps.append(p)
        qs.append(q)
    if not ws:
        raise ValueError("PLSR found no component: features carry no variance")
    w_mat, p_mat, q_vec = np.array(ws).T, np.array(ps).T, np.array(qs)
    coef = w_mat @ np.linalg.solve(p_mat.T @ w_mat, q_vec)
    return PLSRModel(scaler, float(y.mean()), float(y_sd), w_mat, p_mat, q_vec, coef)


def plsr_regress(x_train, y_train, x_test, components: int = 5) -> np.ndarray:
    return plsr_fit(x_train, y_train, components).predict(x_test)


# ---------------------------------------------------------------------------
# correlation and multiple testing


def pearson_r(a, b, alternative: str = "two-sided") -> tuple[float, float]:
    """Pearson r with a t-distribution p-value; ``(nan, nan)`` if either vector is constant."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise ValueError(f"pearson_r needs two equal-length vectors, got {a.shape} and {b.shape}")
    n = len(a)
    if n < 3:
        raise ValueError(f"pearson_r needs at least 3 observations, got {n}")
    ac = a - a.mean()
    bc = b - b.mean()
    den = math.sqrt(float(ac @ ac) * float(bc @ bc))
    if den == 0.0:
        return math.nan, math.nan
    r = max(-1.0, min(1.0, float(ac @ bc) / den))
    df = n - 2
    if abs(r) == 1.0:
        t = math.copysign(math.inf, r)
    else:
        t = r * math.sqrt(df / (1.0 - r * r))
    if alternative == "two-sided":
        p = 2.0 * stats.t.sf(abs(t), df)
    elif alternative == "greater":
        p = stats.t.sf(t, df)
    elif alternative == "less":
        p = stats.t.cdf(t, df)
    else:
        raise ValueError(f"unknown alternative {alternative!r}")
    return r, float(min(1.0, p))


def fdr_bh(p_values, q: float = 0.05) -> np.ndarray:
    """Benjamini-Hochberg step-up rejections at level ``q``; NaN p-values are never rejected."""
    p = np.asarray(p_values, dtype=np.float64)
    if np.any((p < 0) | (p > 1)):
        raise ValueError("p-values must lie in [0, 1]")
    flat = np.where(np.isnan(p), 1.0, p).ravel()
    m = flat.size
    reject = np.zeros(m, dtype=bool)
    if m == 0:
        return reject.reshape(p.shape)
    order = np.argsort(flat, kind="stable")
    below = flat[order] <= q * np.arange(1, m + 1) / m
    if below.any():
        last = int(np.nonzero(below)[0].max())
        reject[order[: last + 1]] = True
    return reject.reshape(p.shape)


def age_decorrelate_features(features, ages, alpha: float = 0.05) -> np.ndarray:
    """Indices of features whose correlation with age does not survive Bonferroni at ``alpha``."""
    x = np.asarray(features, dtype=np.float64)
    f = x.shape[1]
    if f == 0:
        return np.arange(0)
    keep = []
    for j in range(f):
        r, p = pearson_r(x[:, j], ages)
        if not (p < alpha / f):
            keep.append(j)
    return np.array(keep, dtype=np.intp)


# ---------------------------------------------------------------------------
# repeated cross-validated association


@dataclass
class AssociationRow:
    layer: int
    metric: str
    mean_r: float
    std_r: float
    p: float
    fdr_significant: bool


@dataclass
class AssociationResult:
    rows: list[AssociationRow]
    age_control: bool
    repetitions: int
    folds: int
    fold_r: dict = field(default_factory=dict)

    COLUMNS = ("layer", "metric", "mean_r", "std_r", "p", "fdr_significant")

    def lookup(self, layer: int, metric: str) -> AssociationRow:
        for row in self.rows:
            if row.layer == layer and row.metric == metric:
                return row
        raise KeyError((layer, metric))

    def table(self) -> list[list]:
        return [[getattr(r, c) for c in self.COLUMNS] for r in self.rows]


def _one_sided_p(pred: np.ndarray, truth: np.ndarray) -> float:
    r, p = pearson_r(pred, truth, alternative="greater")
    return 1.0 if math.isnan(p) else p


def _cv_predictions(x, y, ages, test_folds, components, age_control, alpha):
    """Out-of-fold predictions plus per-fold r for one repetition."""
    n = len(y)
    pred = np.full(n, np.nan)
    fold_r = []
    for test in test_folds:
        train = np.setdiff1d(np.arange(n), test)
        cols = age_decorrelate_features(x[train], ages[train], alpha) if age_control else np.arange(x.shape[1])
        if len(cols) == 0:
            pred[test] = y[train].mean()
            fold_r.append(math.nan)
            continue
        p = plsr_fit(x[train][:, cols], y[train], min(components, len(cols))).predict(x[test][:, cols])
        pred[test] = p
        fold_r.append(pearson_r(p, y[test])[0] if len(test) >= 3 else math.nan)
    return pred, fold_r


def run_association(
    layer_features,
    behavior,
    names,
    ages=None,
    repetitions: int = 20,
    folds: int = 10,
    age_control: bool = False,
    seed: int = 0,
    components: int = 5,
    alpha: float = 0.05,
    q: float = 0.05,
    pooled: bool = False,
    metrics=None,
) -> AssociationResult:
    """PLSR prediction of each behaviour score from each layer's features.

    ``layer_features`` is (L, n, d); ``behavior`` is (n, K) with columns named
    by ``names``. For every repetition the folds are redrawn from ``seed``.
    ``mean_r``/``std_r`` summarise per-fold test r over all repetitions (or the
    per-repetition pooled out-of-fold r when ``pooled``). ``p`` is the median
    over repetitions of the one-sided p of the pooled out-of-fold r, and FDR is
    applied over the whole (layer, metric) table.
    """
    feats = np.asarray(layer_features, dtype=np.float64)
    beh = np.asarray(behavior, dtype=np.float64)
    names = list(names)
    if feats.ndim != 3:
        raise ValueError(f"layer features must be (layers, samples, dims), got {feats.shape}")
    n = feats.shape[1]
    if beh.shape != (n, len(names)):
        raise ValueError(f"behaviour scores {beh.shape} do not match {n} samples and {len(names)} names")
    wanted = names if metrics is None else list(metrics)
    missing = [m for m in wanted if m not in names]
    if missing:
        raise KeyError(f"behaviour metric(s) not in dataset: {missing}")
    if age_control and ages is None:
        raise ValueError("age control needs ages")
    ages = None if ages is None else np.asarray(ages, dtype=np.float64)
    fold_seeds = np.random.SeedSequence(seed).generate_state(repetitions)
    splits = [kfold_split(n, folds, int(s)) for s in fold_seeds]

    rows, all_r = [], {}
    for layer in range(feats.shape[0]):
        for metric in wanted:
            y = beh[:, names.index(metric)]
            per_fold, per_rep, p_rep = [], [], []
            for split in splits:
                pred, fr = _cv_predictions(feats[layer], y, ages, split, components, age_control, alpha)
                per_fold.extend(fr)
                pr, _ = pearson_r(pred, y)
                per_rep.append(pr)
                p_rep.append(_one_sided_p(pred, y))
            values = np.array(per_rep if pooled else per_fold)
            values = values[~np.isnan(values)]
            mean_r = float(values.mean()) if len(values) else math.nan
            std_r = float(values.std()) if len(values) else math.nan
            rows.append(AssociationRow(layer + 1, metric, mean_r, std_r, float(np.median(p_rep)), False))
            all_r[(layer + 1, metric)] = np.array(per_fold)
    flags = fdr_bh([r.p for r in rows], q)
    for row, flag in zip(rows, flags):
        row.fdr_significant = bool(flag)
    return AssociationResult(rows, age_control, repetitions, folds, all_r)


# ---------------------------------------------------------------------------
# features and projection


def extract_layer_features(encoder, patches: np.ndarray, batch_size: int = 32) -> np.ndarray:
    """(L, n, d) float64 per-layer token features, mean-pooled over all patch tokens."""
    n_tok = patches.shape[1]
    out = []
    with ag.no_grad():
        for start in range(0, len(patches), batch_size):
            enc = encoder(patches[start : start + batch_size], np.arange(n_tok))
            out.append(np.stack([x.data.astype(np.float64).mean(axis=1) for x in enc.layers]))
    return np.concatenate(out, axis=1)


@dataclass
class PCAResult:
    coords: np.ndarray
    components: np.ndarray  # (dims, features)
    explained_ratio: np.ndarray
    mean: np.ndarray

    def reconstruct(self) -> np.ndarray:
        return self.coords @ self.components + self.mean


def pca_project(features, dims: int = 2) -> PCAResult:
    x = np.asarray(features, dtype=np.float64)
    if x.ndim != 2:
        raise ValueError(f"PCA needs a (samples, features) matrix, got {x.shape}")
    if dims < 1 or dims > x.shape[1]:
        raise ValueError(f"cannot project {x.shape[1]} features onto {dims} components")
    if x.shape[0] < dims:
        raise ValueError(f"need at least {dims} samples, got {x.shape[0]}")
    mean = x.mean(axis=0)
    xc = x - mean
    _, s, vt = np.linalg.svd(xc, full_matrices=False)
    comps = vt[:dims].copy()
    for row in comps:
        if row[np.argmax(np.abs(row))] < 0:
            row *= -1.0
    var = s**2
    total = var.sum()
    ratio = var[:dims] / total if total > 0 else np.zeros(dims)
    return PCAResult(xc @ comps.T, comps, ratio, mean)


# ---------------------------------------------------------------------------
# CSV


def _cell(v) -> str:
    if v is None:
        return ""
    if isinstance(v, (bool, np.bool_)):
        return "true" if v else "false"
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def write_csv(path, columns, rows) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for row in rows:
            if len(row) != len(columns):
                raise ValueError(f"row of {len(row)} cells for {len(columns)} columns")
            w.writerow([_cell(v) for v in row])
    return path


def read_csv(path) -> tuple[list[str], list[list[str]]]:
    with Path(path).open(newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise ValueError(f"{path} is empty")
    return rows[0], rows[1:]


def write_association_csv(path, result: AssociationResult) -> Path:
    return write_csv(path, AssociationResult.COLUMNS, result.table())


def write_pca_csv(path, sample_ids, labels, pca: PCAResult) -> Path:
    rows = [[int(i), int(l), float(c[0]), float(c[1])] for i, l, c in zip(sample_ids, labels, pca.coords)]
    return write_csv(path, ("sample", "label", "pc1", "pc2"), rows)
