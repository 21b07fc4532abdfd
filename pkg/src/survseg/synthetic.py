"""Synthetic cohorts and phantoms with known ground truth, for tests and demos."""

from __future__ import annotations

import numpy as np
import pandas as pd

from .volume import Mask3D, Volume3D


def _survival(risk: np.ndarray, rng: np.random.Generator, censor_frac: float, base_rate: float = 0.05):
    """Exponential event times with rate ``base_rate * exp(risk)``.

    A random ``censor_frac`` of patients is censored at a uniform fraction of
    their event time, so the censoring proportion is exact.
    """
    n = len(risk)
    t = rng.exponential(1.0 / (base_rate * np.exp(risk)))
    events = np.ones(n, dtype=int)
    cen = rng.choice(n, int(round(censor_frac * n)), replace=False)
    events[cen] = 0
    t[cen] *= rng.uniform(0.05, 1.0, size=cen.size)
    return np.maximum(t, 1e-3), events


def _frames(pids, tumour_rows, times, events):
    feats = pd.DataFrame(tumour_rows)
    surv = pd.DataFrame({"patient_id": pids, "time_months": times, "event": events})
    return feats, surv


def planted_cohort(
    n_patients: int = 200,
    n_features: int = 4,
    beta: float = 3.0,
    censor_frac: float = 0.4,
    max_tumours: int = 2,
    phases: tuple[str, ...] = ("pre",),
    noise: float = 0.1,
    seed: int = 0,
) -> tuple[pd.DataFrame, pd.DataFrame]:
    """Cohort whose log-hazard is ``beta * z`` for a latent per-patient score ``z``.

    Every tumour carries ``z`` (plus small noise) in feature ``f0``; the other
    features are pure noise. Returns (features, survival) frames in the CSV
    layouts used by the CLI.
    """
    rng = np.random.default_rng(seed)
    z = rng.standard_normal(n_patients)
    times, events = _survival(beta * z, rng, censor_frac)
    pids = [f"P{i:04d}" for i in range(n_patients)]
    rows = []
    for i, pid in enumerate(pids):
        k = int(rng.integers(1, max_tumours + 1))
        for phase in phases:
            X = rng.standard_normal((k, n_features))
            X[:, 0] = z[i] + noise * rng.standard_normal(k)
            vol = rng.uniform(200, 5000, k)
            for t in range(k):
                row = {"patient_id": pid, "tumor_id": t, "phase": phase}
                row.update({f"f{j}": float(X[t, j]) for j in range(n_features)})
                row["volume_mm3"] = float(vol[t])
                rows.append(row)
    return _frames(pids, rows, times, events)


def multifocal_cohort(
    n_patients: int = 200,
    n_features: int = 4,
    beta: float = 1.5,
    censor_frac: float = 0.3,
    tumour_range: tuple[int, int] = (1, 8),
    seed: int = 0,
) -> tuple[pd.DataFrame, pd.DataFrame]:
    """Cohort where each tumour has its own aggressiveness ``a`` (feature ``f0``).

    The patient log-hazard is ``log sum exp(beta * a)`` over the patient's
    tumours: the worst tumour dominates and tumour burden adds to it. The
    tumour count varies widely, so averaging tumours loses information.
    """
    rng = np.random.default_rng(seed)
    pids = [f"M{i:04d}" for i in range(n_patients)]
    rows, risk = [], np.zeros(n_patients)
    lo, hi = tumour_range
    for i, pid in enumerate(pids):
        k = int(rng.integers(lo, hi + 1))
        a = rng.standard_normal(k)
        m = np.max(beta * a)
        risk[i] = m + np.log(np.sum(np.exp(beta * a - m)))
        X = rng.standard_normal((k, n_features))
        X[:, 0] = a
        vol = rng.uniform(200, 5000, k)
        for t in range(k):
            row = {"patient_id": pid, "tumor_id": t, "phase": "pre"}
            row.update({f"f{j}": float(X[t, j]) for j in range(n_features)})
            row["volume_mm3"] = float(vol[t])
            rows.append(row)
    times, events = _survival(risk - risk.mean(), rng, censor_frac)
    return _frames(pids, rows, times, events)


def shuffle_labels(survival: pd.DataFrame, seed: int = 0) -> pd.DataFrame:
    """Permute (time, event) jointly across patients."""
    perm = np.random.default_rng(seed).permutation(len(survival))
    out = survival.copy()
    out[["time_months", "event"]] = survival[["time_months", "event"]].to_numpy()[perm]
    out["event"] = out["event"].astype(int)
    return out


# --------------------------------------------------------------------------
# phantoms


def cube_phantom(n: int = 40, side: int = 20, value: float = 100.0) -> tuple[Volume3D, np.ndarray]:
    """Centred cube of constant intensity on a zero background."""
    data = np.zeros((n, n, n))
    a = (n - side) // 2
    data[a:a + side, a:a + side, a:a + side] = value
    return Volume3D(data), data > 0


def sphere_phantom(n: int = 32, radius: float = 8.0, value: float = 100.0) -> tuple[Volume3D, np.ndarray]:
    """Ball of constant intensity centred in an ``n``-cube grid."""
    c = (n - 1) / 2.0
    g = np.indices((n, n, n)) - c
    inside = np.sum(g ** 2, axis=0) <= radius ** 2
    return Volume3D(np.where(inside, value, 0.0)), inside


def liver_phantom(n: int = 48) -> tuple[Volume3D, Mask3D, dict]:
    """Liver block holding one tumour sphere, plus a tumour-like decoy outside it.

    Returns the image, the ground-truth labels (1 liver, 2 tumour) and seed
    points keyed by object name.
    """
    data = np.zeros((n, n, n))
    gt = np.zeros((n, n, n), dtype=np.uint8)
    lo, hi = n // 8, n // 8 + n // 2
    data[lo:hi, lo:hi, lo:hi] = 60.0
    gt[lo:hi, lo:hi, lo:hi] = 1
    c = (lo + hi) // 2
    g = np.indices((n, n, n))
    ball = np.sum((g - c) ** 2, axis=0) <= 5 ** 2
    data[ball] = 120.0
    gt[ball] = 2
    d = n - 7
    decoy = np.sum((g - d) ** 2, axis=0) <= 3 ** 2
    data[decoy] = 120.0
    seeds = {"liver": (lo + 2, c, c), "tumor": (c, c, c), "decoy": (d, d, d)}
    return Volume3D(data), Mask3D(gt, (1.0, 1.0, 1.0)), seeds

