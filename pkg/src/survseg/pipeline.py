"""Cross-validated survival runs, the segmentation path and result files."""

from __future__ import annotations

import dataclasses
import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import pandas as pd
from scipy import ndimage

from . import __version__
from .features import KEY_COLUMNS, PHASES, NormalizerState, apply_normalizer, fit_normalizer
from .milnet import POOL_MODES, PatientBag, SurvivalError, TrainConfig, late_fusion, predict, train
from .propagation import (
    CriterionWeights,
    ObjectResult,
    ObjectSeeds,
    PropagationConfig,
    Segmenter,
    compose_labels,
    propagate,
)
from .stats import DetectionReport, StatsError, c_index, dice, km_table, match_detections, stratify
from .volume import DEFAULT_LABELS, Mask3D, Volume3D, connected_components, mask_outside, remove_small_objects

log = logging.getLogger(__name__)

# component ids for the counter-based seed split
_SEED_FOLDS = 0
_SEED_TRAIN = 1
SEED_FINAL = 2  # final fit on all patients


class PipelineError(ValueError):
    pass


def derive_seed(base: int, *key: int) -> int:
    """Independent 63-bit seed for the stream addressed by ``key``."""
    ss = np.random.SeedSequence(base, spawn_key=tuple(int(k) for k in key))
    return int(ss.generate_state(1, dtype=np.uint64)[0] >> np.uint64(1))


# --------------------------------------------------------------------------
# config


@dataclass(frozen=True)
class PipelineConfig:
    seed: int = 0
    folds: int = 3
    repeats: int = 15
    pool: str = "lse"
    epochs: int = 250
    learning_rate: float = 4e-4
    weight_decay: float = 1e-3
    dropout: float = 0.2
    encoder: tuple[int, ...] = (64, 32, 16)
    regressor: tuple[int, ...] = (8,)
    stratified_folds: bool = False
    tie_credit: str = "strict"
    prompt_weights: tuple[float, float, float] = (1.0, 1.0, 2.0)
    min_tumor_volume_mm3: float = 100.0
    diameter_percentile: float = 1.0
    randomization_runs: int = 0
    bootstrap_runs: int = 1000
    workers: int = 1
    paths: dict[str, str] = field(default_factory=dict)

    def __post_init__(self):
        if self.folds < 2:
            raise PipelineError("folds must be >= 2")
        if self.repeats < 1:
            raise PipelineError("repeats must be >= 1")
        if self.pool not in POOL_MODES:
            raise PipelineError(f"pool must be one of {POOL_MODES}")
        if self.tie_credit not in ("strict", "half"):
            raise PipelineError("tie_credit must be 'strict' or 'half'")
        if self.epochs < 0 or self.learning_rate <= 0 or self.weight_decay < 0:
            raise PipelineError("epochs, learning_rate and weight_decay must be non-negative (lr > 0)")
        if not 0 <= self.dropout < 1:
            raise PipelineError("dropout must be in [0, 1)")
        if self.min_tumor_volume_mm3 < 0 or not 0 <= self.diameter_percentile <= 100:
            raise PipelineError("min_tumor_volume_mm3 >= 0 and diameter_percentile in [0, 100] required")
        if self.randomization_runs < 0 or self.bootstrap_runs < 0 or self.workers < 1:
            raise PipelineError("run counts must be >= 0 and workers >= 1")

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        for k in ("encoder", "regressor", "prompt_weights"):
            d[k] = list(d[k])
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "PipelineConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise PipelineError(f"unknown config keys: {sorted(unknown)}")
        d = dict(d)
        for k in ("encoder", "regressor"):
            if k in d:
                d[k] = tuple(int(v) for v in d[k])
        if "prompt_weights" in d:
            d["prompt_weights"] = tuple(float(v) for v in d["prompt_weights"])
        if "paths" in d:
            d["paths"] = {str(k): str(v) for k, v in d["paths"].items()}
        return cls(**d)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "PipelineConfig":
        return cls.from_dict(json.loads(text))

    @classmethod
    def load(cls, path) -> "PipelineConfig":
        return cls.from_json(Path(path).read_text())

    def train_config(self, seed: int) -> TrainConfig:
        return TrainConfig(self.epochs, self.learning_rate, self.weight_decay, self.dropout, seed, self.encoder, self.regressor)


# --------------------------------------------------------------------------
# cohort assembly


@dataclass
class Cohort:
    """Feature rows and survival records joined at patient level."""

    patients: list[str]
    times: np.ndarray
    events: np.ndarray
    features: pd.DataFrame
    feature_columns: tuple[str, ...]
    phases: tuple[str, ...]
    excluded: list[str]

    @classmethod
    def build(cls, features: pd.DataFrame, survival: pd.DataFrame) -> "Cohort":
        missing = [c for c in KEY_COLUMNS if c not in features.columns]
        if missing:
            raise PipelineError(f"feature table lacks columns {missing}")
        surv = survival.copy()
        surv["patient_id"] = surv["patient_id"].astype(str)
        if surv["patient_id"].duplicated().any():
            raise PipelineError("duplicate patients in the survival table")
        feats = features.copy()
        feats["patient_id"] = feats["patient_id"].astype(str)
        cols = tuple(c for c in feats.columns if c not in KEY_COLUMNS)
        if not cols:
            raise PipelineError("feature table has no feature columns")
        with_tumours = set(feats["patient_id"])
        surv = surv.sort_values("patient_id", kind="stable")
        keep = surv["patient_id"].isin(with_tumours).to_numpy()
        excluded = surv.loc[~keep, "patient_id"].tolist()
        if excluded:
            log.warning("%d patient(s) without tumours excluded: %s", len(excluded), ", ".join(excluded))
        surv = surv[keep]
        unknown = sorted(with_tumours - set(surv["patient_id"]))
        if unknown:
            log.warning("%d patient(s) in the feature table have no survival record", len(unknown))
        feats = feats[feats["patient_id"].isin(set(surv["patient_id"]))]
        phases = tuple(p for p in PHASES if (feats["phase"] == p).any())
        return cls(
            surv["patient_id"].tolist(),
            surv["time_months"].to_numpy(dtype=np.float64),
            surv["event"].to_numpy().astype(int),
            feats.reset_index(drop=True),
            cols,
            phases,
            excluded,
        )

    def with_labels(self, times, events) -> "Cohort":
        return dataclasses.replace(self, times=np.asarray(times, float), events=np.asarray(events).astype(int))

    def phase_rows(self, phase: str, patients: Sequence[str]) -> pd.DataFrame:
        f = self.features
        return f[(f["phase"] == phase) & f["patient_id"].isin(set(patients))]


def make_bags(rows: pd.DataFrame, columns: Sequence[str], state: NormalizerState, survival: dict[str, tuple[float, int]]) -> list[PatientBag]:
    """One bag per patient present in ``rows`` (ordered by patient id)."""
    X = apply_normalizer(rows.loc[:, list(columns)].to_numpy(dtype=np.float64), state)
    volume = rows["volume_mm3"].to_numpy(dtype=np.float64) if "volume_mm3" in rows.columns else None
    pids = rows["patient_id"].to_numpy()
    bags = []
    for pid in sorted(set(pids)):
        sel = np.flatnonzero(pids == pid)
        largest = int(np.argmax(volume[sel])) if volume is not None else None
        t, e = survival[pid]
        bags.append(PatientBag(pid, X[sel], t, e, largest))
    return bags


def fit_phase(cohort: Cohort, phase: str, train_ids: Sequence[str], config: PipelineConfig, seed: int):
    """Normaliser + network for one phase, fitted on ``train_ids`` only."""
    rows = cohort.phase_rows(phase, train_ids)
    if len(rows) < 2:
        raise SurvivalError(f"phase {phase}: fewer than two training tumours")
    state = fit_normalizer(rows.loc[:, list(cohort.feature_columns)].to_numpy(dtype=np.float64), cohort.feature_columns)
    surv = dict(zip(cohort.patients, zip(cohort.times.tolist(), cohort.events.tolist())))
    bags = make_bags(rows, cohort.feature_columns, state, surv)
    result = train(bags, config.train_config(seed), config.pool)
    return state, result


def predict_phase(cohort: Cohort, phase: str, ids: Sequence[str], state: NormalizerState, params, pool: str) -> dict[str, float]:
    rows = cohort.phase_rows(phase, ids)
    if rows.empty:
        return {}
    surv = dict(zip(cohort.patients, zip(cohort.times.tolist(), cohort.events.tolist())))
    bags = make_bags(rows, cohort.feature_columns, state, surv)
    return dict(zip([b.patient_id for b in bags], predict(params, bags, pool).tolist()))


# --------------------------------------------------------------------------
# cross-validation


def assign_folds(events: np.ndarray, k: int, seed: int, stratified: bool = False) -> np.ndarray:
    """Patient-level fold labels with sizes differing by at most one (per stratum)."""
    rng = np.random.default_rng(seed)
    n = len(events)
    folds = np.empty(n, dtype=int)
    groups = [np.flatnonzero(events == 1), np.flatnonzero(events == 0)] if stratified else [np.arange(n)]
    start = 0
    for g in groups:
        perm = rng.permutation(g)
        folds[perm] = (start + np.arange(len(perm))) % k
        start += len(perm)
    return folds


@dataclass
class RunManifest:
    config: dict
    version: str
    patients: list[str]
    times: list[float]
    events: list[int]
    excluded: list[str]
    folds: list[list[int]]  # [repeat][patient]
    fold_cindex: list[list[float]]  # NaN when a fold has no usable pair
    repeat_cindex: list[float]
    hazards: list[list[float]]  # [repeat][patient], held-out predictions
    mean_cindex: float
    std_cindex: float
    wall_clock_s: float = 0.0
    null_distribution: list[float] = field(default_factory=list)
    randomization_p: float | None = None
    bootstrap: dict | None = None

    @property
    def mean_hazards(self) -> np.ndarray:
        return np.mean(np.asarray(self.hazards), axis=0)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "RunManifest":
        return cls(**d)

    def to_json(self) -> str:
        return json.dumps(_jsonable(self.to_dict()), indent=1, sort_keys=True, allow_nan=True)


def _jsonable(obj):
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.generic):
        return obj.item()
    return obj


def _safe_cindex(times, events, hazards, ties) -> float:
    try:
        return c_index(times, events, hazards, ties)
    except StatsError:
        return float("nan")


def run_cv(config: PipelineConfig, cohort: Cohort) -> RunManifest:
    """Repeated k-fold CV with per-fold normalisation and late fusion of phases.

    Raises:
        SurvivalError: a training split has fewer than two events.
    """
    t0 = time.perf_counter()
    n = len(cohort.patients)
    if n < config.folds:
        raise SurvivalError(f"{n} patients cannot fill {config.folds} folds")
    if cohort.events.sum() < config.folds:
        raise SurvivalError(f"{int(cohort.events.sum())} events cannot fill {config.folds} folds")
    ids = np.array(cohort.patients, dtype=object)
    all_folds, fold_c, rep_c, hazards = [], [], [], []
    for r in range(config.repeats):
        folds = assign_folds(cohort.events, config.folds, derive_seed(config.seed, _SEED_FOLDS, r), config.stratified_folds)
        held = np.full(n, np.nan)
        per_fold = []
        for f in range(config.folds):
            test = folds == f
            train_ids, test_ids = ids[~test].tolist(), ids[test].tolist()
            phase_h = {}
            for pi, phase in enumerate(cohort.phases):
                seed = derive_seed(config.seed, _SEED_TRAIN, r, f, pi)
                state, result = fit_phase(cohort, phase, train_ids, config, seed)
                phase_h[phase] = predict_phase(cohort, phase, test_ids, state, result.params, config.pool)
            fused = late_fusion(phase_h.get("pre", {}), phase_h.get("post", {}), test_ids)
            held[test] = [fused[p] for p in test_ids]
            per_fold.append(_safe_cindex(cohort.times[test], cohort.events[test], held[test], config.tie_credit))
        all_folds.append(folds.tolist())
        fold_c.append(per_fold)
        rep_c.append(c_index(cohort.times, cohort.events, held, config.tie_credit))
        hazards.append(held.tolist())
        log.info("repeat %d: C-index %.4f", r, rep_c[-1])
    return RunManifest(
        config=config.to_dict(),
        version=__version__,
        patients=list(cohort.patients),
        times=cohort.times.tolist(),
        events=cohort.events.tolist(),
        excluded=list(cohort.excluded),
        folds=all_folds,
        fold_cindex=fold_c,
        repeat_cindex=rep_c,
        hazards=hazards,
        mean_cindex=float(np.mean(rep_c)),
        std_cindex=float(np.std(rep_c)),
        wall_clock_s=time.perf_counter() - t0,
    )


def cv_runner(config: PipelineConfig, cohort: Cohort):
    """Adapter for :func:`stats.randomization_test`: mean CV C-index for given labels and seed."""

    def run(times, events, seed):
        cfg = dataclasses.replace(config, seed=int(seed))
        return run_cv(cfg, cohort.with_labels(times, events)).mean_cindex

    return run


# --------------------------------------------------------------------------
# segmentation path


@dataclass
class SegmentationOutput:
    mask: Mask3D
    objects: list[ObjectResult]
    removed_outside: int = 0
    removed_small: int = 0
    dice: dict[int, float] | None = None
    detection: DetectionReport | None = None


def liver_envelope(results: Sequence[ObjectResult], organ_label: int) -> np.ndarray | None:
    """Union of the non-empty organ masks with internal cavities filled; None when there are none."""
    masks = [r.mask for r in results if r.ok and r.label == organ_label and r.mask.any()]
    if not masks:
        return None
    return ndimage.binary_fill_holes(np.logical_or.reduce(masks))


def run_segmentation(
    config: PipelineConfig,
    vol: Volume3D,
    objects: Sequence[ObjectSeeds],
    segmenter: Segmenter,
    gt: Mask3D | None = None,
    labels: dict[int, str] | None = None,
    organ_label: int = 1,
    tumor_label: int = 2,
) -> SegmentationOutput:
    """Propagate seeds, drop tumours outside the organ and below the volume floor, then score."""
    labels = dict(DEFAULT_LABELS) if labels is None else labels
    pcfg = PropagationConfig(weights=CriterionWeights(*config.prompt_weights), workers=config.workers)
    results = propagate(vol, objects, segmenter, pcfg)
    for r in results:
        if not r.ok:
            log.warning("object with label %d failed: %s", r.label, r.error)
    mask = compose_labels(vol, results, labels)
    n_before = len(connected_components(mask, tumor_label)) if tumor_label in labels else 0

    envelope = liver_envelope(results, organ_label)
    if envelope is not None:
        mask = mask_outside(mask, envelope, labels=[tumor_label])
    else:
        log.warning("no organ object segmented; extra-organ tumours are kept")
    n_inside = len(connected_components(mask, tumor_label))
    mask = remove_small_objects(mask, tumor_label, config.min_tumor_volume_mm3)
    n_after = len(connected_components(mask, tumor_label))
    out = SegmentationOutput(mask, list(results), n_before - n_inside, n_inside - n_after)
    if gt is not None:
        present = sorted(set(np.unique(gt.data).tolist()) | set(np.unique(mask.data).tolist()) - {0})
        out.dice = {c: dice(mask, gt, c) for c in present if c != 0}
        out.detection = match_detections(connected_components(mask, tumor_label), connected_components(gt, tumor_label))
    return out


# --------------------------------------------------------------------------
# result files


def _fmt(x: float) -> str:
    return repr(float(x))


def emit_results(manifest: RunManifest, out_dir) -> dict[str, Path]:
    """Write manifest, hazards, KM and null-distribution files; byte-stable for a given manifest."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {
        "manifest": out / "manifest.json",
        "hazards": out / "hazards.csv",
        "km": out / "km.csv",
        "null": out / "null.csv",
    }
    paths["manifest"].write_text(manifest.to_json() + "\n")

    h = manifest.mean_hazards
    high = stratify(h)
    lines = ["patient_id,hazard,risk_group,time_months,event"]
    for pid, hz, hi, t, e in zip(manifest.patients, h, high, manifest.times, manifest.events):
        lines.append(f"{pid},{_fmt(hz)},{'high' if hi else 'low'},{_fmt(t)},{int(e)}")
    paths["hazards"].write_text("\n".join(lines) + "\n")

    km = km_table(manifest.times, manifest.events, high)
    lines = [",".join(km.columns)]
    for row in km.itertuples(index=False):
        lines.append(f"{_fmt(row.time)},{_fmt(row.S_low)},{_fmt(row.S_high)},{int(row.n_risk_low)},{int(row.n_risk_high)}")
    paths["km"].write_text("\n".join(lines) + "\n")

    lines = ["replicate,c_index"] + [f"{i},{_fmt(c)}" for i, c in enumerate(manifest.null_distribution)]
    paths["null"].write_text("\n".join(lines) + "\n")
    return paths
