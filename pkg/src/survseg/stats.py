"""Segmentation metrics, survival metrics and the statistical tests around them."""

from __future__ import annotations

import itertools
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
import pandas as pd
from scipy import stats as sps

from .volume import Component, Mask3D, check_same_grid

log = logging.getLogger(__name__)

DETECTION_MIN_DICE = 0.1


class StatsError(ValueError):
    pass


# --------------------------------------------------------------------------
# segmentation


def dice(pred: Mask3D | np.ndarray, gt: Mask3D | np.ndarray, label: int | None = None) -> float:
    """Dice of class ``label`` (or of boolean arrays when ``label`` is None).

    Two empty sets score 1.
    """
    if isinstance(pred, Mask3D) and isinstance(gt, Mask3D):
        check_same_grid(pred, gt)
    p = np.asarray(getattr(pred, "data", pred))
    g = np.asarray(getattr(gt, "data", gt))
    if p.shape != g.shape:
        raise StatsError(f"dimension mismatch: {p.shape} vs {g.shape}")
    if label is not None:
        p, g = p == label, g == label
    else:
        p, g = p.astype(bool), g.astype(bool)
    denom = int(p.sum()) + int(g.sum())
    if denom == 0:
        return 1.0
    return 2.0 * int(np.sum(p & g)) / denom


@dataclass
class DetectionReport:
    tp: int
    fp: int
    fn: int
    matches: list[tuple[int, int, float]] = field(default_factory=list)  # (gt, pred, dice)

    @property
    def precision(self) -> float:
        return self.tp / (self.tp + self.fp) if self.tp + self.fp else 0.0

    @property
    def recall(self) -> float:
        return self.tp / (self.tp + self.fn) if self.tp + self.fn else 0.0

    @property
    def f1(self) -> float:
        p, r = self.precision, self.recall
        return 2 * p * r / (p + r) if p + r else 0.0

    def to_dict(self) -> dict:
        return {
            "tp": self.tp, "fp": self.fp, "fn": self.fn,
            "precision": self.precision, "recall": self.recall, "f1": self.f1,
            "matches": [{"gt": g, "pred": p, "dice": d} for g, p, d in self.matches],
        }


def detection_metrics(tp: int, fp: int, fn: int) -> DetectionReport:
    return DetectionReport(int(tp), int(fp), int(fn))


def _component_keys(comps: Sequence[Component], shape) -> list[np.ndarray]:
    return [np.sort(c.voxels[:, 0] + shape[0] * (c.voxels[:, 1] + shape[1] * c.voxels[:, 2])) for c in comps]


def dice_matrix(gt: Sequence[Component], pred: Sequence[Component]) -> np.ndarray:
    comps = list(gt) + list(pred)
    if not comps:
        return np.zeros((0, 0))
    shape = np.max([c.voxels.max(axis=0) for c in comps], axis=0) + 1
    gk = _component_keys(gt, shape)
    pk = _component_keys(pred, shape)
    D = np.zeros((len(gk), len(pk)))
    for i, a in enumerate(gk):
        for j, b in enumerate(pk):
            inter = np.intersect1d(a, b, assume_unique=True).size
            if inter:
                D[i, j] = 2.0 * inter / (a.size + b.size)
    return D


def match_detections(pred: Sequence[Component], gt: Sequence[Component], min_dice: float = DETECTION_MIN_DICE) -> DetectionReport:
    """One-to-one greedy matching of predicted to ground-truth tumours.

    Ground-truth tumours are visited in descending order of their best dice;
    each takes its highest-dice unmatched prediction with dice >= ``min_dice``.
    """
    D = dice_matrix(gt, pred)
    n_gt, n_pred = len(gt), len(pred)
    if n_gt == 0 or n_pred == 0:
        return DetectionReport(0, n_pred, n_gt)
    best = D.max(axis=1)
    order = sorted(range(n_gt), key=lambda i: (-best[i], i))
    used = np.zeros(n_pred, dtype=bool)
    matches = []
    for i in order:
        row = np.where(used | (D[i] < min_dice), -np.inf, D[i])
        j = int(np.argmax(row))
        if np.isfinite(row[j]):
            used[j] = True
            matches.append((i, j, float(D[i, j])))
    tp = len(matches)
    return DetectionReport(tp, n_pred - tp, n_gt - tp, matches)


# --------------------------------------------------------------------------
# concordance


def c_index(times, events, hazards, ties: str = "strict") -> float:
    """Fraction of usable pairs whose hazards are ordered like their times.

    A pair is usable when the patient with the shorter time had an event.
    ``ties="strict"`` gives tied hazards no credit; ``"half"`` gives 0.5.
    """
    T = np.asarray(times, dtype=np.float64)
    E = np.asarray(events).astype(bool)
    H = np.asarray(hazards, dtype=np.float64)
    if not (T.shape == E.shape == H.shape):
        raise StatsError("times, events and hazards must have equal length")
    usable = (T[:, None] < T[None, :]) & E[:, None]  # row j fails before column i
    n_usable = int(usable.sum())
    if n_usable == 0:
        raise StatsError("no usable pairs")
    conc = usable & (H[:, None] > H[None, :])
    score = float(conc.sum())
    if ties == "half":
        score += 0.5 * float((usable & (H[:, None] == H[None, :])).sum())
    elif ties != "strict":
        raise StatsError(f"ties must be 'strict' or 'half', got {ties!r}")
    return score / n_usable


# --------------------------------------------------------------------------
# Cox regression


@dataclass
class CoxFit:
    beta: np.ndarray
    se: np.ndarray
    loglik: float
    converged: bool
    n_iter: int
    names: tuple[str, ...] = ()

    @property
    def hr(self) -> np.ndarray:
        return np.exp(self.beta)

    @property
    def z(self) -> np.ndarray:
        return self.beta / self.se

    @property
    def p(self) -> np.ndarray:
        return np.clip(2.0 * sps.norm.sf(np.abs(self.z)), 0.0, 1.0)

    def summary(self) -> pd.DataFrame:
        names = self.names or tuple(f"x{i}" for i in range(len(self.beta)))
        return pd.DataFrame({"beta": self.beta, "hr": self.hr, "se": self.se, "z": self.z, "p": self.p}, index=list(names))


def standardize(x) -> np.ndarray:
    """Column z-scores (population std)."""
    x = np.asarray(x, dtype=np.float64)
    sd = x.std(axis=0)
    if np.any(sd == 0):
        raise StatsError("cannot standardise a constant variable")
    return (x - x.mean(axis=0)) / sd


def cox_partial_loglik(beta, Z, times, events) -> float:
    """Breslow log partial likelihood."""
    Z = np.asarray(Z, dtype=np.float64).reshape(len(times), -1)
    eta = Z @ np.atleast_1d(np.asarray(beta, dtype=np.float64))
    return -_cox_terms(eta, np.asarray(times, float), np.asarray(events).astype(bool), Z, order=0)[0]


def _cox_terms(eta, T, E, Z, order=2):
    c = eta.max()
    w = np.exp(eta - c)
    srt = np.argsort(T, kind="stable")
    ts = T[srt]
    ev = np.flatnonzero(E)
    start = np.searchsorted(ts, T[ev], side="left")
    S0 = np.cumsum(w[srt][::-1])[::-1][start]
    nll = -float(np.sum(eta[ev] - c - np.log(S0)))
    if order == 0:
        return nll, None, None
    wz = (w[:, None] * Z)[srt]
    S1 = np.cumsum(wz[::-1], axis=0)[::-1][start]
    mean = S1 / S0[:, None]
    score = np.sum(Z[ev] - mean, axis=0)
    wzz = (w[:, None, None] * Z[:, :, None] * Z[:, None, :])[srt]
    S2 = np.cumsum(wzz[::-1], axis=0)[::-1][start]
    info = np.sum(S2 / S0[:, None, None] - mean[:, :, None] * mean[:, None, :], axis=0)
    return nll, score, info


def cox_fit(Z, times, events, max_iter: int = 100, tol: float = 1e-8, names: Sequence[str] = ()) -> CoxFit:
    """Maximise the Breslow partial likelihood by step-halving Newton iterations.

    Covariates are used as given; standardise them first for per-SD hazard
    ratios. Convergence is declared when ``max|score| < tol``; otherwise the
    fit is returned with ``converged=False``.

    Raises:
        StatsError: no events, a constant covariate or a singular information matrix.
    """
    T = np.asarray(times, dtype=np.float64)
    E = np.asarray(events).astype(bool)
    Z = np.asarray(Z, dtype=np.float64).reshape(len(T), -1)
    if not E.any():
        raise StatsError("Cox fit needs at least one event")
    if np.any(np.ptp(Z, axis=0) == 0):
        raise StatsError("constant covariate")
    p = Z.shape[1]
    beta = np.zeros(p)
    nll, score, info = _cox_terms(Z @ beta, T, E, Z)
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        if np.max(np.abs(score)) < tol:
            converged = True
            it -= 1
            break
        try:
            step = np.linalg.solve(info, score)
        except np.linalg.LinAlgError:
            raise StatsError("singular information matrix") from None
        for _ in range(60):
            cand = beta + step
            c_nll, c_score, c_info = _cox_terms(Z @ cand, T, E, Z)
            if np.isfinite(c_nll) and c_nll <= nll + 1e-12 * abs(nll):
                break
            step = step / 2
        beta, nll, score, info = cand, c_nll, c_score, c_info
    else:
        converged = bool(np.max(np.abs(score)) < tol)
    try:
        cov = np.linalg.inv(info)
    except np.linalg.LinAlgError:
        raise StatsError("singular information matrix") from None
    se = np.sqrt(np.clip(np.diag(cov), 0, None))
    return CoxFit(beta, se, -nll, converged, it, tuple(names))


# --------------------------------------------------------------------------
# Kaplan-Meier / log-rank


@dataclass
class SurvivalCurve:
    times: np.ndarray  # distinct observed times
    survival: np.ndarray  # S just after each time
    at_risk: np.ndarray
    events: np.ndarray
    label: str = ""

    def at(self, t) -> np.ndarray:
        """Right-continuous step function; S = 1 before the first time."""
        t = np.asarray(t, dtype=np.float64)
        k = np.searchsorted(self.times, t, side="right")
        s = np.r_[1.0, self.survival]
        return s[k]


def kaplan_meier(times, events, label: str = "") -> SurvivalCurve:
    T = np.asarray(times, dtype=np.float64)
    E = np.asarray(events).astype(int)
    if T.size == 0:
        raise StatsError("no observations")
    grid, inv = np.unique(T, return_inverse=True)
    d = np.bincount(inv, weights=E, minlength=grid.size)
    leaving = np.bincount(inv, minlength=grid.size)
    n = T.size - np.r_[0, np.cumsum(leaving)[:-1]]
    S = np.cumprod(1.0 - d / n)
    return SurvivalCurve(grid, S, n.astype(int), d.astype(int), label)


@dataclass
class LogRankResult:
    chi2: float
    p: float
    observed_a: float
    expected_a: float
    variance: float


def log_rank(times_a, events_a, times_b, events_b) -> LogRankResult:
    """Two-group log-rank test (hypergeometric variance, ties handled per time)."""
    ta, ea = np.asarray(times_a, float), np.asarray(events_a).astype(int)
    tb, eb = np.asarray(times_b, float), np.asarray(events_b).astype(int)
    if ta.size == 0 or tb.size == 0:
        raise StatsError("both groups must be non-empty")
    T = np.r_[ta, tb]
    E = np.r_[ea, eb]
    event_times = np.unique(T[E == 1])
    if event_times.size == 0:
        return LogRankResult(0.0, 1.0, 0.0, 0.0, 0.0)
    n_a = (ta[None, :] >= event_times[:, None]).sum(axis=1)
    n = (T[None, :] >= event_times[:, None]).sum(axis=1)
    d_a = ((ta[None, :] == event_times[:, None]) & (ea[None, :] == 1)).sum(axis=1)
    d = ((T[None, :] == event_times[:, None]) & (E[None, :] == 1)).sum(axis=1)
    expected = d * n_a / n
    with np.errstate(invalid="ignore", divide="ignore"):
        var = np.where(n > 1, d * (n_a / n) * (1 - n_a / n) * (n - d) / (n - 1), 0.0)
    O, Ex, V = float(d_a.sum()), float(expected.sum()), float(var.sum())
    if V <= 0:
        return LogRankResult(0.0, 1.0, O, Ex, V)
    chi2 = (O - Ex) ** 2 / V
    return LogRankResult(chi2, float(sps.chi2.sf(chi2, 1)), O, Ex, V)


# --------------------------------------------------------------------------
# Wilcoxon rank-sum


def wilcoxon_rank_sum(a, b, exact_max: int = 12) -> float:
    """Two-sided rank-sum p-value.

    Exact permutation distribution of the midrank sum when ``len(a) + len(b)
    <= exact_max``; otherwise the tie-corrected normal approximation with a
    0.5 continuity correction.
    """
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    na, nb = a.size, b.size
    if na == 0 or nb == 0:
        raise StatsError("both samples must be non-empty")
    N = na + nb
    ranks = sps.rankdata(np.r_[a, b])
    W = ranks[:na].sum()
    mean = na * (N + 1) / 2.0
    dev = abs(W - mean)
    if N <= exact_max:
        sums = np.array([ranks[list(c)].sum() for c in itertools.combinations(range(N), na)])
        p = float(np.mean(np.abs(sums - mean) >= dev - 1e-9))
        return min(1.0, p)
    _, counts = np.unique(ranks, return_counts=True)
    tie = np.sum(counts ** 3 - counts) / (N * (N - 1))
    var = na * nb / 12.0 * ((N + 1) - tie)
    if var <= 0:
        return 1.0
    z = max(dev - 0.5, 0.0) / np.sqrt(var)
    return float(min(1.0, 2.0 * sps.norm.sf(z)))


# --------------------------------------------------------------------------
# bootstrap hazard ratio


@dataclass
class BootstrapHR:
    hr: float  # mean of the bootstrapped hazard ratios
    ci_low: float
    ci_high: float
    p: float
    z: float
    n_failed: int
    degenerate: bool
    hrs: np.ndarray = field(repr=False, default_factory=lambda: np.zeros(0))


def wald_from_bootstrap(hrs: np.ndarray) -> tuple[float, float, bool]:
    """``z = log(mean HR) / sd(log HR)`` with a sample sd; returns (z, p, degenerate)."""
    log_mean = float(np.log(np.mean(hrs)))
    sd = float(np.std(np.log(hrs), ddof=1)) if len(hrs) > 1 else 0.0
    if sd == 0 or not np.isfinite(sd):
        if log_mean == 0:
            return 0.0, 1.0, True
        return float(np.sign(log_mean) * np.inf), 0.0, True
    z = log_mean / sd
    return z, float(min(1.0, 2.0 * sps.norm.sf(abs(z)))), False


def bootstrap_hr(hazards, times, events, B: int = 1000, seed: int = 0, standardize_hazards: bool = True) -> BootstrapHR:
    """Bootstrap the univariate Cox hazard ratio of a risk score.

    Patients are resampled with replacement; replicate ``r`` draws from
    ``default_rng(seed + r)``. The score is z-scored once on the full cohort.

    Raises:
        StatsError: more than half the resamples fail to fit.
    """
    if B < 2:
        raise StatsError("need at least two bootstrap replicates")
    h = np.asarray(hazards, dtype=np.float64)
    T = np.asarray(times, dtype=np.float64)
    E = np.asarray(events).astype(int)
    x = standardize(h) if standardize_hazards else h
    hrs, failed = [], 0
    for r in range(B):
        idx = np.random.default_rng(seed + r).integers(0, len(h), len(h))
        try:
            fit = cox_fit(x[idx], T[idx], E[idx])
        except StatsError:
            failed += 1
            continue
        if not fit.converged or not np.isfinite(fit.beta[0]):
            failed += 1
            continue
        hrs.append(float(fit.hr[0]))
    if failed > B / 2:
        raise StatsError(f"{failed} of {B} bootstrap fits failed")
    hrs_arr = np.array(hrs)
    z, p, degenerate = wald_from_bootstrap(hrs_arr)
    lo, hi = np.percentile(hrs_arr, [2.5, 97.5])
    return BootstrapHR(float(np.mean(hrs_arr)), float(lo), float(hi), p, z, failed, degenerate, hrs_arr)


# --------------------------------------------------------------------------
# randomisation test


@dataclass
class RandomizationResult:
    observed: float
    null: np.ndarray
    p: float  # fraction of null scores >= observed; NaN when the null is empty


Runner = Callable[[np.ndarray, np.ndarray, int], float]


def randomization_test(runner: Runner, times, events, R: int = 1000, seed: int = 0, workers: int = 1) -> RandomizationResult:
    """Null distribution of a pipeline score under jointly shuffled survival labels.

    ``runner(times, events, seed)`` must be deterministic. The observed score
    uses ``seed``; null replicate ``r`` shuffles with ``default_rng(seed + r)``
    and runs with seed ``seed + r``, so results do not depend on ``workers``.
    """
    T = np.asarray(times, dtype=np.float64)
    E = np.asarray(events).astype(int)
    observed = float(runner(T, E, seed))

    def one(r: int) -> float:
        perm = np.random.default_rng(seed + r).permutation(len(T))
        return float(runner(T[perm], E[perm], seed + r))

    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            null = np.array(list(pool.map(one, range(R))), dtype=np.float64)
    else:
        null = np.array([one(r) for r in range(R)], dtype=np.float64)
    p = float(np.mean(null >= observed)) if R > 0 else float("nan")
    return RandomizationResult(observed, null, p)


# --------------------------------------------------------------------------
# risk groups


def stratify(hazards) -> np.ndarray:
    """True for high risk (hazard above the median), False otherwise."""
    h = np.asarray(hazards, dtype=np.float64)
    if h.size < 2:
        raise StatsError("need at least two patients to stratify")
    return h > np.median(h)


def km_table(times, events, high: np.ndarray) -> pd.DataFrame:
    """Plot-ready KM curves of the two risk groups on a shared time grid."""
    T = np.asarray(times, dtype=np.float64)
    E = np.asarray(events).astype(int)
    high = np.asarray(high, dtype=bool)
    grid = np.r_[0.0, np.unique(T)]
    out = {"time": grid}
    for name, sel in (("low", ~high), ("high", high)):
        if sel.any():
            curve = kaplan_meier(T[sel], E[sel], name)
            out[f"S_{name}"] = curve.at(grid)
            out[f"n_risk_{name}"] = (T[sel][None, :] >= grid[:, None]).sum(axis=1)
        else:
            out[f"S_{name}"] = np.full(grid.size, np.nan)
            out[f"n_risk_{name}"] = np.zeros(grid.size, dtype=int)
    return pd.DataFrame(out)[["time", "S_low", "S_high", "n_risk_low", "n_risk_high"]]
