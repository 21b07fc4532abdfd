"""Tumour-level first-order features, two-step normalisation and CSV I/O."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np
import pandas as pd

from .volume import Component, Mask3D, Volume3D, check_same_grid, connected_components

log = logging.getLogger(__name__)

FIRST_ORDER = (
    "mean", "median", "minimum", "maximum", "range", "variance", "std",
    "skewness", "kurtosis", "energy", "total_energy", "entropy", "uniformity",
    "p10", "p90", "iqr", "mad", "rms",
)
SHAPE = ("volume_mm3", "longest_diameter_mm")
FEATURE_NAMES = FIRST_ORDER + SHAPE
KEY_COLUMNS = ("patient_id", "tumor_id", "phase")
PHASES = ("pre", "post")
EPS = 1e-6


class FeatureError(ValueError):
    pass


# --------------------------------------------------------------------------
# extraction


def _moments(x: np.ndarray) -> tuple[float, float, float]:
    # shifting by one sample keeps a constant region exactly at zero spread
    d = x - x[0]
    d = d - d.mean()
    m2 = float(np.mean(d ** 2))
    m3 = float(np.mean(d ** 3))
    m4 = float(np.mean(d ** 4))
    return m2, m3, m4


def first_order(values: Sequence[float], voxel_volume: float = 1.0, bin_width: float = 5.0) -> dict[str, float]:
    """First-order statistics of a 1D sample of (already preprocessed) intensities.

    Kurtosis is the plain fourth standardised moment (not excess); skewness and
    kurtosis of a zero-variance sample are 0.
    """
    x = np.asarray(values, dtype=np.float64).ravel()
    if x.size == 0:
        raise FeatureError("no voxels left to compute features on")
    n = x.size
    m2, m3, m4 = _moments(x)
    energy = float(np.sum(x ** 2))
    p10, p25, p75, p90 = np.percentile(x, [10, 25, 75, 90])

    lo_edge = np.floor(x.min() / bin_width)
    bins = (np.floor(x / bin_width) - lo_edge).astype(np.int64)
    p = np.bincount(bins) / n
    p = p[p > 0]

    return {
        "mean": float(x.mean()),
        "median": float(np.median(x)),
        "minimum": float(x.min()),
        "maximum": float(x.max()),
        "range": float(x.max() - x.min()),
        "variance": m2,
        "std": float(np.sqrt(m2)),
        "skewness": m3 / m2 ** 1.5 if m2 > 0 else 0.0,
        "kurtosis": m4 / m2 ** 2 if m2 > 0 else 0.0,
        "energy": energy,
        "total_energy": energy * voxel_volume,
        "entropy": float(-np.sum(p * np.log2(p))) + 0.0,
        "uniformity": float(np.sum(p ** 2)),
        "p10": float(p10),
        "p90": float(p90),
        "iqr": float(p75 - p25),
        "mad": float(np.mean(np.abs(x - x.mean()))),
        "rms": float(np.sqrt(energy / n)),
    }


def extract_first_order(
    vol: Volume3D,
    component: Component,
    normalize: str | None = "image",
    scale: float = 100.0,
    bin_width: float = 5.0,
    exclude_outliers: bool = True,
) -> dict[str, float]:
    """Features of one tumour: 18 first-order statistics plus volume and diameter.

    Args:
        normalize: ``"image"`` z-scores intensities with whole-volume
            statistics, ``"roi"`` with the tumour's own, ``None`` leaves them
            raw. Normalised values are multiplied by ``scale``.
        exclude_outliers: drop voxels outside mean +/- 3 std of the region.

    Raises:
        FeatureError: the region is empty after outlier exclusion.
    """
    if component.n_voxels == 0:
        raise FeatureError("empty component")
    vals = vol.data[tuple(component.voxels.T)].astype(np.float64)
    if normalize is not None:
        ref = vol.data if normalize == "image" else vals
        if normalize not in ("image", "roi"):
            raise ValueError(f"normalize must be 'image', 'roi' or None, got {normalize!r}")
        mu, sd = float(ref.mean()), float(ref.std())
        vals = (vals - mu) / sd * scale if sd > 0 else (vals - mu) * 0.0
    if exclude_outliers and vals.size > 1:
        mu, sd = float(vals.mean()), float(np.sqrt(_moments(vals)[0]))
        vals = vals[(vals >= mu - 3 * sd) & (vals <= mu + 3 * sd)]
    sx, sy, sz = vol.spacing
    feats = first_order(vals, sx * sy * sz, bin_width)
    feats["volume_mm3"] = component.volume_mm3
    feats["longest_diameter_mm"] = component.longest_diameter
    return feats


@dataclass
class TumorRecord:
    patient_id: str
    tumor_id: int
    phase: str
    features: dict[str, float] = field(default_factory=dict)

    def row(self) -> dict:
        return {"patient_id": self.patient_id, "tumor_id": self.tumor_id, "phase": self.phase, **self.features}


def extract_tumors(
    vol: Volume3D,
    mask: Mask3D,
    label: int,
    patient_id: str,
    phase: str,
    connectivity: int = 26,
    **kwargs,
) -> list[TumorRecord]:
    """One record per connected component of ``label``; unusable regions are skipped."""
    check_same_grid(vol, mask)
    if phase not in PHASES:
        raise FeatureError(f"phase must be one of {PHASES}, got {phase!r}")
    records = []
    for i, comp in enumerate(connected_components(mask, label, connectivity)):
        try:
            feats = extract_first_order(vol, comp, **kwargs)
        except FeatureError as err:
            log.warning("patient %s tumour %d dropped: %s", patient_id, i, err)
            continue
        records.append(TumorRecord(str(patient_id), i, phase, feats))
    return records


def records_to_frame(records: Iterable[TumorRecord]) -> pd.DataFrame:
    rows = [r.row() for r in records]
    if not rows:
        return pd.DataFrame(columns=list(KEY_COLUMNS) + list(FEATURE_NAMES))
    return pd.DataFrame(rows)


# --------------------------------------------------------------------------
# small prediction filter


def diameter_threshold(gt_diameters: Sequence[float], percentile: float = 1.0) -> float:
    """Percentile (linear interpolation) of training ground-truth diameters."""
    d = np.asarray(gt_diameters, dtype=np.float64)
    if d.size == 0:
        raise FeatureError("no ground-truth diameters")
    return float(np.percentile(d, percentile))


def filter_small_predictions(frame: pd.DataFrame, threshold_mm: float, column: str = "longest_diameter_mm") -> pd.DataFrame:
    """Drop tumours whose longest diameter is ``<= threshold_mm``."""
    return frame[frame[column] > threshold_mm].reset_index(drop=True)


# --------------------------------------------------------------------------
# normalisation


@dataclass(frozen=True)
class NormalizerState:
    """Per-column log-shift and z-score statistics fitted on training data."""

    columns: tuple[str, ...]
    minimum: np.ndarray
    shift: np.ndarray
    mu: np.ndarray
    sigma: np.ndarray
    eps: float = EPS

    def to_dict(self) -> dict:
        return {
            "columns": list(self.columns),
            "minimum": self.minimum.tolist(),
            "shift": self.shift.tolist(),
            "mu": self.mu.tolist(),
            "sigma": self.sigma.tolist(),
            "eps": self.eps,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "NormalizerState":
        return cls(
            tuple(d["columns"]),
            np.asarray(d["minimum"], float),
            np.asarray(d["shift"], float),
            np.asarray(d["mu"], float),
            np.asarray(d["sigma"], float),
            float(d.get("eps", EPS)),
        )


def _as_matrix(x, columns: Sequence[str] | None) -> tuple[np.ndarray, tuple[str, ...]]:
    if isinstance(x, pd.DataFrame):
        cols = tuple(columns) if columns is not None else tuple(c for c in x.columns if c not in KEY_COLUMNS)
        missing = [c for c in cols if c not in x.columns]
        if missing:
            raise FeatureError(f"missing feature columns: {missing}")
        return x.loc[:, list(cols)].to_numpy(dtype=np.float64), cols
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim != 2:
        raise FeatureError("feature matrix must be 2D")
    cols = tuple(columns) if columns is not None else tuple(f"f{i}" for i in range(arr.shape[1]))
    if len(cols) != arr.shape[1]:
        raise FeatureError(f"{len(cols)} column names for {arr.shape[1]} columns")
    return arr, cols


def _log_shift(x: np.ndarray, minimum, shift, eps) -> np.ndarray:
    return np.log(np.maximum(x - minimum + shift, eps))


def fit_normalizer(x, columns: Sequence[str] | None = None, eps: float = EPS) -> NormalizerState:
    """Fit the shift-log-zscore transform on a training matrix (n >= 2)."""
    X, cols = _as_matrix(x, columns)
    if X.shape[0] < 2:
        raise FeatureError("need at least two rows to fit the normaliser")
    if not np.all(np.isfinite(X)):
        raise FeatureError("feature matrix contains NaN or Inf")
    minimum = X.min(axis=0)
    shift = np.median(X - minimum, axis=0)
    T = _log_shift(X, minimum, shift, eps)
    mu = T.mean(axis=0)
    sigma = T.std(axis=0)
    sigma[np.ptp(T, axis=0) == 0] = 0.0
    return NormalizerState(cols, minimum, shift, mu, sigma, eps)


def apply_normalizer(x, state: NormalizerState) -> np.ndarray:
    """Transform with the stored training statistics; constant columns become 0."""
    if isinstance(x, pd.DataFrame):
        X, _ = _as_matrix(x, state.columns)
    else:
        X = np.asarray(x, dtype=np.float64)
        if X.ndim != 2 or X.shape[1] != len(state.columns):
            raise FeatureError(f"expected {len(state.columns)} columns, got shape {X.shape}")
    T = _log_shift(X, state.minimum, state.shift, state.eps)
    safe = np.where(state.sigma > 0, state.sigma, 1.0)
    return np.where(state.sigma > 0, (T - state.mu) / safe, 0.0)


# --------------------------------------------------------------------------
# CSV I/O


def read_features_csv(path) -> pd.DataFrame:
    df = pd.read_csv(path, dtype={"patient_id": str})
    missing = [c for c in KEY_COLUMNS if c not in df.columns]
    if missing:
        raise FeatureError(f"{path}: missing columns {missing}")
    bad = set(df["phase"]) - set(PHASES)
    if bad:
        raise FeatureError(f"{path}: unknown phases {sorted(bad)}")
    if df.duplicated(list(KEY_COLUMNS)).any():
        raise FeatureError(f"{path}: duplicate (patient_id, tumor_id, phase) rows")
    return df


def write_features_csv(frame: pd.DataFrame, path) -> None:
    frame.to_csv(path, index=False, float_format="%.17g")


def read_survival_csv(path) -> pd.DataFrame:
    df = pd.read_csv(path, dtype={"patient_id": str})
    for c in ("patient_id", "time_months", "event"):
        if c not in df.columns:
            raise FeatureError(f"{path}: missing column {c!r}")
    if not set(df["event"].unique()) <= {0, 1}:
        raise FeatureError(f"{path}: event must be 0 or 1")
    if (df["time_months"] <= 0).any() or not np.all(np.isfinite(df["time_months"])):
        raise FeatureError(f"{path}: times must be positive and finite")
    return df
