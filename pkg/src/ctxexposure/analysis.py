"""Cohort-level analyses built on activity spaces and exposure profiles."""
from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np
from scipy import special
from sklearn.base import BaseEstimator, ClusterMixin
from sklearn.utils.validation import check_array, check_is_fitted

from .activity import ActivityDistribution, ActivitySpace, activity_space, pool
from .errors import (
    DegenerateInputError,
    DegenerateVarianceError,
    InsufficientDataError,
    InvalidResampleError,
    LevelMismatchError,
    ValidationError,
)

LOG_EPSILON = 1e-15
RISK_GROUPS = ("low", "high", "high_local", "high_external", "unassigned")
DEVIATION_GAMMAS = tuple(range(50, 96))


# ------------------------------------------------------------------
# paired t-test
# ------------------------------------------------------------------


@dataclass(frozen=True)
class TTestResult:
    t: float
    df: int
    p: float
    mean_difference: float


def paired_t_test(x, y) -> TTestResult:
    """Two-sided paired t-test on ``d = x - y``."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if x.shape != y.shape or x.ndim != 1:
        raise ValidationError("paired samples must be 1-d and of equal length")
    n = len(x)
    if n < 2:
        raise InsufficientDataError("paired t-test needs at least two pairs")
    d = x - y
    mean = math.fsum(d) / n
    # identical differences are tested directly since the rounded mean can
    # sit one ulp off them; the rest is scaled so tiny values do not underflow
    scale = float(np.max(np.abs(d - mean)))
    if np.all(d == d[0]) or scale == 0:
        raise DegenerateVarianceError(f"all paired differences equal {mean!r}; t is undefined")
    sd = scale * math.sqrt(math.fsum(((d - mean) / scale) ** 2) / (n - 1))
    t = mean / (sd / math.sqrt(n))
    df = n - 1
    p = float(2.0 * special.stdtr(df, -abs(t)))
    return TTestResult(t, df, min(p, 1.0), mean)


# ------------------------------------------------------------------
# risk quadrants
# ------------------------------------------------------------------


@dataclass(frozen=True)
class RiskAssignment:
    person_id: str
    group: str


class RiskStratifier(BaseEstimator):
    """Percentile quadrants of (local exposure, time outside).

    Thresholds use linear interpolation between order statistics (the
    "type 7" rule).  Comparisons are strict, so values sitting exactly on
    a threshold stay unassigned.
    """

    def __init__(self, p_low=40.0, p_high=60.0, min_participants=5):
        self.p_low = p_low
        self.p_high = p_high
        self.min_participants = min_participants

    def fit(self, X, y=None):
        X = check_array(X, dtype=float)
        if X.shape[1] != 2:
            raise ValidationError("X must have columns (e_in, fraction_out)")
        if not 0 <= self.p_low < self.p_high <= 100:
            raise ValidationError("need 0 <= p_low < p_high <= 100")
        if len(X) < self.min_participants:
            raise InsufficientDataError(
                f"risk stratification needs at least {self.min_participants} participants")
        self.low_ = np.percentile(X, self.p_low, axis=0, method="linear")
        self.high_ = np.percentile(X, self.p_high, axis=0, method="linear")
        return self

    def predict(self, X):
        check_is_fitted(self, "low_")
        X = check_array(X, dtype=float)
        hi_e = X[:, 0] > self.high_[0]
        hi_f = X[:, 1] > self.high_[1]
        lo_both = (X[:, 0] < self.low_[0]) & (X[:, 1] < self.low_[1])
        out = np.full(len(X), "unassigned", dtype=object)
        out[lo_both] = "low"
        out[hi_e & ~hi_f] = "high_local"
        out[hi_f & ~hi_e] = "high_external"
        out[hi_e & hi_f] = "high"
        return out

    def fit_predict(self, X, y=None):
        return self.fit(X).predict(X)


def risk_stratify(profiles, p_low: float = 40.0, p_high: float = 60.0):
    """``profiles``: iterable of ``(person_id, e_in, fraction_out)``."""
    profiles = list(profiles)
    X = np.array([[e, f] for _, e, f in profiles], dtype=float).reshape(-1, 2)
    if len(profiles) < 5:
        raise InsufficientDataError("risk stratification needs at least 5 participants")
    groups = RiskStratifier(p_low, p_high).fit_predict(X)
    return [RiskAssignment(pid, str(g)) for (pid, _, _), g in zip(profiles, groups)]


# ------------------------------------------------------------------
# k-means over deviation curves
# ------------------------------------------------------------------


def _sq_dist(X, C):
    return ((X[:, None, :] - C[None, :, :]) ** 2).sum(axis=2)


def _kmeanspp(X, k, rng):
    n = len(X)
    centers = [X[rng.integers(n)]]
    d2 = ((X - centers[0]) ** 2).sum(axis=1)
    for _ in range(1, k):
        total = d2.sum()
        if total <= 0:
            raise DegenerateInputError("fewer distinct curves than clusters")
        idx = int(rng.choice(n, p=d2 / total))
        centers.append(X[idx])
        d2 = np.minimum(d2, ((X - X[idx]) ** 2).sum(axis=1))
    return np.array(centers, dtype=float)


def lloyd(X, centers, max_iter=100):
    """Lloyd iterations from ``centers``.

    Returns ``(labels, centers, inertia, history)``; ``history`` holds the
    objective after every assignment step and never increases.
    """
    centers = centers.copy()
    k = len(centers)
    labels = np.argmin(_sq_dist(X, centers), axis=1)
    history = [float(((X - centers[labels]) ** 2).sum())]
    for _ in range(max_iter):
        for j in range(k):
            members = labels == j
            if members.any():
                centers[j] = X[members].mean(axis=0)
        for j in range(k):
            if not (labels == j).any():
                own = ((X - centers[labels]) ** 2).sum(axis=1)
                far = int(np.argmax(own))
                centers[j] = X[far]
                labels[far] = j
        new = np.argmin(_sq_dist(X, centers), axis=1)
        inertia = float(((X - centers[new]) ** 2).sum())
        if inertia > history[-1] * (1 + 1e-12) + 1e-300:
            raise AssertionError("k-means objective increased")
        history.append(inertia)
        if np.array_equal(new, labels):
            labels = new
            break
        labels = new
    for j in range(k):
        if (labels == j).any():
            centers[j] = X[labels == j].mean(axis=0)
    inertia = float(((X - centers[labels]) ** 2).sum())
    return labels, centers, inertia, history


def transfer_refine(X, labels, k):
    """Single-point transfers that strictly lower the objective.

    Moving point ``i`` from cluster ``a`` to ``b`` changes the objective by
    ``n_b/(n_b+1)|x_i-c_b|^2 - n_a/(n_a-1)|x_i-c_a|^2``; the best strictly
    negative move is applied and centroids are updated in place, until a
    full pass makes no move. Lloyd fixed points that are not optimal under
    a single move are escaped this way.
    """
    labels = labels.copy()
    counts = np.bincount(labels, minlength=k).astype(float)
    sums = np.zeros((k, X.shape[1]))
    np.add.at(sums, labels, X)
    moved = True
    while moved:
        moved = False
        for i in range(len(X)):
            a = labels[i]
            if counts[a] <= 1:
                continue
            c = sums / np.maximum(counts, 1.0)[:, None]
            d2 = ((X[i] - c) ** 2).sum(axis=1)
            delta = counts / (counts + 1.0) * d2 - counts[a] / (counts[a] - 1.0) * d2[a]
            delta[a] = 0.0
            b = int(np.argmin(delta))
            if delta[b] < -1e-12 * max(1.0, d2[a]):
                labels[i] = b
                counts[a] -= 1.0
                counts[b] += 1.0
                sums[a] -= X[i]
                sums[b] += X[i]
                moved = True
    return labels


def fit_once(X, centers, max_iter=100):
    """Lloyd iterations alternated with transfer refinement until neither moves."""
    labels, centers, inertia, history = lloyd(X, centers, max_iter)
    while True:
        refined = transfer_refine(X, labels, len(centers))
        if np.array_equal(refined, labels):
            return labels, centers, inertia, history
        start = np.array([X[refined == j].mean(axis=0) for j in range(len(centers))])
        labels, centers, inertia, more = lloyd(X, start, max_iter)
        history = history + more


def cluster_names(k: int):
    if k == 1:
        return ["stable"]
    if k == 2:
        return ["decrease", "increase"]
    if k == 3:
        return ["decrease", "stable", "increase"]
    return ["decrease"] + [f"stable_{i}" for i in range(1, k - 1)] + ["increase"]


class DeviationKMeans(BaseEstimator, ClusterMixin):
    """Seeded k-means with k-means++ seeding and best-of-``n_init`` restarts.

    Each restart runs Lloyd iterations and single-point transfer refinement
    in turn until neither changes the partition.

    Restart ``r`` draws from the ``r``-th child of ``SeedSequence(random_state)``;
    the winner is the lowest objective, ties going to the earlier restart.
    Cluster indices are reordered by ascending centroid mean, and
    ``names_`` maps them to decrease/stable/increase.
    """

    def __init__(self, n_clusters=3, n_init=10, max_iter=100, random_state=0, n_jobs=1):
        self.n_clusters = n_clusters
        self.n_init = n_init
        self.max_iter = max_iter
        self.random_state = random_state
        self.n_jobs = n_jobs

    def fit(self, X, y=None):
        X = check_array(X, dtype=float)
        k = int(self.n_clusters)
        if k < 1:
            raise ValidationError("n_clusters must be positive")
        if len(X) < k:
            raise InsufficientDataError(f"need at least {k} curves, got {len(X)}")
        if len(np.unique(X, axis=0)) < k:
            raise DegenerateInputError("fewer distinct curves than clusters")
        seeds = np.random.SeedSequence(int(self.random_state)).spawn(int(self.n_init))

        def restart(ss):
            rng = np.random.default_rng(ss)
            return fit_once(X, _kmeanspp(X, k, rng), self.max_iter)

        if self.n_jobs and self.n_jobs > 1:
            with ThreadPoolExecutor(max_workers=self.n_jobs) as ex:
                runs = list(ex.map(restart, seeds))
        else:
            runs = [restart(s) for s in seeds]
        best = min(range(len(runs)), key=lambda r: (runs[r][2], r))
        labels, centers, inertia, history = runs[best]
        order = np.argsort(centers.mean(axis=1), kind="stable")
        remap = np.empty(k, dtype=int)
        remap[order] = np.arange(k)
        self.labels_ = remap[labels]
        self.cluster_centers_ = centers[order]
        self.inertia_ = inertia
        self.history_ = history
        self.restart_inertias_ = [r[2] for r in runs]
        self.names_ = cluster_names(k)
        return self

    def predict(self, X):
        check_is_fitted(self, "cluster_centers_")
        X = check_array(X, dtype=float)
        return np.argmin(_sq_dist(X, self.cluster_centers_), axis=1)


@dataclass(frozen=True)
class ClusterResult:
    assignments: dict
    centroids: dict
    seed: int
    inertia: float


def cluster_deviations(curves: dict, k: int = 3, seed: int = 0, n_init: int = 10, n_jobs: int = 1) -> ClusterResult:
    """Cluster ``{person_id: deviation curve}``; curves with NaN are dropped."""
    ids = [pid for pid in sorted(curves, key=str)
           if curves[pid] is not None and np.all(np.isfinite(curves[pid]))]
    if not ids:
        raise InsufficientDataError("no complete deviation curves")
    X = np.array([curves[pid] for pid in ids], dtype=float)
    km = DeviationKMeans(k, n_init=n_init, random_state=seed, n_jobs=n_jobs).fit(X)
    names = km.names_
    return ClusterResult(
        {pid: names[lab] for pid, lab in zip(ids, km.labels_)},
        {names[j]: km.cluster_centers_[j] for j in range(k)},
        seed,
        km.inertia_,
    )


# ------------------------------------------------------------------
# coverage curves, overlap, exports
# ------------------------------------------------------------------


def coverage_curves(dists: dict, groups: dict, gammas, resample=None, mode="duration_weighted"):
    """Collective and mean individual ``|AS_gamma|`` per group.

    ``resample=(target_size, repetitions, seed)`` subsamples every group to
    ``target_size`` members without replacement, ``repetitions`` times, and
    averages; ``q1``/``q3`` then give the interquartile band of the
    collective curve across repetitions.  Returns a list of row dicts.
    """
    gammas = list(gammas)
    for g in gammas:
        if not 0 < g <= 100:
            raise ValidationError(f"gamma {g!r} outside (0, 100]")
    members_of: dict = {}
    for pid in sorted(dists, key=str):
        if dists[pid].support and pid in groups:
            members_of.setdefault(groups[pid], []).append(pid)
    sizes = {pid: [len(activity_space(dists[pid], g)) for g in gammas]
             for ms in members_of.values() for pid in ms}

    def curves(sample):
        pooled = pool([dists[p] for p in sample], sample, mode)
        coll = [len(activity_space(pooled, g)) for g in gammas]
        indiv = np.mean([sizes[p] for p in sample], axis=0)
        return np.array(coll, dtype=float), indiv

    rows = []
    rng = np.random.default_rng(resample[2]) if resample else None
    for group in sorted(members_of, key=str):
        members = members_of[group]
        if resample:
            target, reps = int(resample[0]), int(resample[1])
            if target > len(members) or target < 1:
                raise InvalidResampleError(
                    f"cannot draw {target} of {len(members)} members of group {group!r}")
            colls, indivs = [], []
            for _ in range(reps):
                pick = sorted(rng.choice(len(members), size=target, replace=False).tolist())
                c, i = curves([members[j] for j in pick])
                colls.append(c)
                indivs.append(i)
            colls = np.array(colls)
            coll = colls.mean(axis=0)
            indiv = np.mean(indivs, axis=0)
            q1, q3 = np.percentile(colls, [25, 75], axis=0)
        else:
            coll, indiv = curves(members)
            q1 = q3 = coll
        for j, g in enumerate(gammas):
            rows.append({"group": group, "gamma": g, "collective": float(coll[j]),
                         "mean_individual": float(indiv[j]), "q1": float(q1[j]), "q3": float(q3[j])})
    return rows


def overlap_map(space_f: ActivitySpace, space_m: ActivitySpace) -> dict:
    """Per-cell membership: ``women_only``, ``men_only`` or ``both``."""
    if space_f.level != space_m.level:
        raise LevelMismatchError(f"levels differ: {space_f.level} vs {space_m.level}")
    f, m = set(space_f.cells), set(space_m.cells)
    out = {}
    for c in f | m:
        out[c] = "both" if (c in f and c in m) else ("women_only" if c in f else "men_only")
    return dict(sorted(out.items(), key=lambda kv: (str(type(kv[0])), kv[0])))


DESIGN_COLUMNS = ("person_id", "sex", "age", "gamma", "n_cells")


def export_design_table(spaces: dict, demographics: dict):
    """Long table of ``|AS_gamma|`` per (person, gamma) for regression software.

    ``spaces``: ``{person_id: {gamma: n_cells}}``; ``demographics``:
    ``{person_id: (sex, age)}``.
    """
    rows = []
    for pid in sorted(spaces, key=str):
        sex, age = demographics[pid]
        for g in sorted(spaces[pid]):
            if not 50 <= g <= 95:
                raise ValidationError(f"design table gamma {g!r} outside [50, 95]")
            rows.append((pid, sex, age, g, int(spaces[pid][g])))
    return rows


def log_activity_export(dist: ActivityDistribution, n_cells: int, epsilon: float = LOG_EPSILON) -> np.ndarray:
    """``log(pi_j + epsilon)`` over all grid cells, for plotting."""
    p = np.zeros(n_cells)
    for c, v in dist.support.items():
        if isinstance(c, (int, np.integer)) and 0 <= c < n_cells:
            p[c] = v
    return np.log(p + epsilon)
