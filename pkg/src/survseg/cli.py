"""Command-line entry point (``survseg``).

Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical failure.
Log verbosity comes from ``SURVSEG_LOG_LEVEL`` (default WARNING).
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np
import pandas as pd

from . import __version__
from .features import (
    FeatureError,
    NormalizerState,
    extract_tumors,
    read_features_csv,
    read_survival_csv,
    records_to_frame,
    write_features_csv,
)
from .milnet import POOL_MODES, SurvivalError, late_fusion, load_model, predict, save_model
from .nrrd import NrrdError, load_mask, load_volume, save_mask
from .pipeline import (
    Cohort,
    PipelineConfig,
    PipelineError,
    SEED_FINAL,
    cv_runner,
    derive_seed,
    emit_results,
    fit_phase,
    make_bags,
    run_cv,
    run_segmentation,
)
from .propagation import CriterionWeights, ObjectSeeds, OracleSegmenter, PropagationConfig, compose_labels, propagate
from .stats import (
    StatsError,
    bootstrap_hr,
    c_index,
    detection_metrics,
    dice,
    km_table,
    log_rank,
    match_detections,
    randomization_test,
    stratify,
)
from .volume import DEFAULT_LABELS, VolumeError, connected_components

log = logging.getLogger("survseg")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _emit(obj) -> None:
    print(json.dumps(obj, indent=2, sort_keys=True))


def _labels(path: str | None) -> dict[int, str]:
    if path is None:
        return dict(DEFAULT_LABELS)
    raw = json.loads(Path(path).read_text())
    return {int(k): str(v) for k, v in raw.items()}


def _read_seeds(path: str) -> list[ObjectSeeds]:
    raw = json.loads(Path(path).read_text())
    if isinstance(raw, dict):
        raw = raw.get("objects", [])
    if not raw:
        raise PipelineError(f"{path}: no objects")
    return [ObjectSeeds.from_dict(o) for o in raw]


def _read_hazards(path: str) -> pd.DataFrame:
    df = pd.read_csv(path, dtype={"patient_id": str})
    for c in ("patient_id", "hazard"):
        if c not in df.columns:
            raise PipelineError(f"{path}: missing column {c!r}")
    return df


def _joined(hazards: str, survival: str) -> pd.DataFrame:
    h = _read_hazards(hazards)
    s = read_survival_csv(survival)
    df = h.merge(s, on="patient_id", how="inner")
    dropped = len(h) - len(df)
    if dropped:
        log.warning("%d hazard rows without a survival record dropped", dropped)
    if df.empty:
        raise PipelineError("no patient appears in both files")
    return df


# --------------------------------------------------------------------------
# commands


def cmd_samonai(args) -> int:
    vol = load_volume(args.image)
    objects = _read_seeds(args.seeds)
    cfg = PropagationConfig(weights=CriterionWeights.parse(args.weights), workers=args.workers)
    seg = OracleSegmenter(tolerance=args.oracle_tolerance)
    results = propagate(vol, objects, seg, cfg)
    labels = _labels(args.labels)
    save_mask(args.out, compose_labels(vol, results, labels))
    report = [
        {"label": r.label, "ok": r.ok, "error": r.error, "voxels": int(r.mask.sum()) if r.mask is not None else 0}
        for r in results
    ]
    _emit({"objects": report})
    return EXIT_OK


def cmd_features(args) -> int:
    vol = load_volume(args.image)
    mask = load_mask(args.mask, _labels(args.labels))
    normalize = None if args.normalize == "none" else args.normalize
    recs = extract_tumors(
        vol, mask, args.label, args.patient_id, args.phase, args.connectivity,
        normalize=normalize, scale=args.scale, bin_width=args.bin_width,
    )
    frame = records_to_frame(recs)
    out = Path(args.out)
    if args.append and out.exists():
        frame = pd.concat([read_features_csv(out), frame], ignore_index=True)
        if frame.duplicated(["patient_id", "tumor_id", "phase"]).any():
            raise FeatureError("appending would duplicate (patient_id, tumor_id, phase) rows")
    write_features_csv(frame, out)
    _emit({"tumors": len(recs)})
    return EXIT_OK


def _base_config(args) -> PipelineConfig:
    cfg = PipelineConfig.load(args.config) if getattr(args, "config", None) else PipelineConfig()
    overrides = {}
    for name in ("pool", "folds", "seed", "epochs"):
        v = getattr(args, name, None)
        if v is not None:
            overrides[name] = v
    if getattr(args, "repeats", None):
        overrides["repeats"] = args.repeats
    return dataclasses.replace(cfg, **overrides)


def cmd_surv_train(args) -> int:
    cfg = _base_config(args)
    cohort = Cohort.build(read_features_csv(args.features), read_survival_csv(args.survival))
    extra = {"version": __version__, "config": cfg.to_dict(), "feature_columns": list(cohort.feature_columns)}
    if args.repeats:
        manifest = run_cv(cfg, cohort)
        extra["cv"] = {"repeat_cindex": manifest.repeat_cindex, "mean": manifest.mean_cindex, "std": manifest.std_cindex}
        if args.manifest_dir:
            emit_results(manifest, args.manifest_dir)
    models, norms = {}, {}
    for pi, phase in enumerate(cohort.phases):
        state, result = fit_phase(cohort, phase, cohort.patients, cfg, derive_seed(cfg.seed, SEED_FINAL, pi))
        models[phase] = result.params
        norms[phase] = state.to_dict()
    save_model(args.out, models, norms, cfg.pool, cfg.seed, extra)
    _emit({"phases": list(cohort.phases), "patients": len(cohort.patients), **({"cv": extra["cv"]} if "cv" in extra else {})})
    return EXIT_OK


def cmd_surv_predict(args) -> int:
    model = load_model(args.model)
    feats = read_features_csv(args.features)
    feats["patient_id"] = feats["patient_id"].astype(str)
    per_phase = {}
    for phase, params in model["networks"].items():
        state = NormalizerState.from_dict(model["phases"][phase]["normalizer"])
        rows = feats[feats["phase"] == phase]
        if rows.empty:
            per_phase[phase] = {}
            continue
        dummy = {pid: (1.0, 0) for pid in rows["patient_id"]}
        bags = make_bags(rows, state.columns, state, dummy)
        per_phase[phase] = dict(zip([b.patient_id for b in bags], predict(params, bags, model["pool"]).tolist()))
    fused = late_fusion(per_phase.get("pre", {}), per_phase.get("post", {}))
    out = pd.DataFrame({"patient_id": list(fused), "hazard": list(fused.values())})
    for phase in ("pre", "post"):
        if phase in per_phase:
            out[f"hazard_{phase}"] = [per_phase[phase].get(p, np.nan) for p in fused]
    out.to_csv(args.out, index=False, float_format="%.17g")
    _emit({"patients": len(out)})
    return EXIT_OK


def cmd_eval_dice(args) -> int:
    labels = _labels(args.labels)
    pred, gt = load_mask(args.pred, labels), load_mask(args.gt, labels)
    _emit({labels[c]: dice(pred, gt, c) for c in sorted(labels)})
    return EXIT_OK


def cmd_eval_detect(args) -> int:
    if args.counts:
        report = detection_metrics(*args.counts)
    else:
        if not (args.pred and args.gt):
            raise UsageError("eval detect needs --pred and --gt, or --counts TP FP FN")
        labels = _labels(args.labels)
        pred, gt = load_mask(args.pred, labels), load_mask(args.gt, labels)
        report = match_detections(
            connected_components(pred, args.label, args.connectivity),
            connected_components(gt, args.label, args.connectivity),
        )
    _emit(report.to_dict())
    return EXIT_OK


def cmd_eval_cindex(args) -> int:
    df = _joined(args.hazards, args.survival)
    _emit({"c_index": c_index(df["time_months"], df["event"], df["hazard"], args.ties), "patients": len(df)})
    return EXIT_OK


def cmd_eval_km(args) -> int:
    df = _joined(args.hazards, args.survival)
    high = stratify(df["hazard"].to_numpy())
    km_table(df["time_months"], df["event"], high).to_csv(args.out, index=False, float_format="%.17g")
    t, e = df["time_months"].to_numpy(), df["event"].to_numpy()
    lr = log_rank(t[~high], e[~high], t[high], e[high])
    _emit({"chi2": lr.chi2, "p": lr.p, "n_low": int((~high).sum()), "n_high": int(high.sum())})
    return EXIT_OK


def cmd_eval_hr(args) -> int:
    df = _joined(args.hazards, args.survival)
    res = bootstrap_hr(df["hazard"], df["time_months"], df["event"], args.runs, args.seed)
    _emit({"hr": res.hr, "ci": [res.ci_low, res.ci_high], "p": res.p, "z": res.z, "failed": res.n_failed, "degenerate": res.degenerate})
    return EXIT_OK


def _cohort_from_config(cfg: PipelineConfig) -> Cohort:
    try:
        return Cohort.build(read_features_csv(cfg.paths["features"]), read_survival_csv(cfg.paths["survival"]))
    except KeyError as err:
        raise PipelineError(f"config paths lack {err}") from None


def cmd_eval_randtest(args) -> int:
    cfg = PipelineConfig.load(args.config)
    runs = cfg.randomization_runs if args.runs is None else args.runs
    cohort = _cohort_from_config(cfg)
    res = randomization_test(cv_runner(cfg, cohort), cohort.times, cohort.events, runs, cfg.seed, cfg.workers)
    if args.out:
        lines = ["replicate,c_index"] + [f"{i},{c!r}" for i, c in enumerate(res.null.tolist())]
        Path(args.out).write_text("\n".join(lines) + "\n")
    _emit({"observed": res.observed, "p": None if np.isnan(res.p) else res.p, "runs": runs,
           "null_mean": float(np.mean(res.null)) if runs else None})
    return EXIT_OK


def cmd_pipeline_run(args) -> int:
    cfg = PipelineConfig.load(args.config)
    out_dir = Path(args.out or cfg.paths.get("out_dir", "results"))
    summary: dict = {}
    if "image" in cfg.paths and "seeds" in cfg.paths:
        labels = _labels(cfg.paths.get("labels"))
        vol = load_volume(cfg.paths["image"])
        gt = load_mask(cfg.paths["gt"], labels) if "gt" in cfg.paths else None
        seg = run_segmentation(cfg, vol, _read_seeds(cfg.paths["seeds"]), OracleSegmenter(), gt, labels)
        out_dir.mkdir(parents=True, exist_ok=True)
        save_mask(out_dir / "mask.nrrd", seg.mask)
        summary["segmentation"] = {
            "failed_objects": [r.label for r in seg.objects if not r.ok],
            "removed_outside": seg.removed_outside,
            "removed_small": seg.removed_small,
        }
        if seg.dice is not None:
            summary["segmentation"]["dice"] = {labels.get(k, str(k)): v for k, v in seg.dice.items()}
            summary["segmentation"]["detection"] = seg.detection.to_dict()
    if "features" in cfg.paths and "survival" in cfg.paths:
        cohort = _cohort_from_config(cfg)
        manifest = run_cv(cfg, cohort)
        if cfg.randomization_runs:
            res = randomization_test(cv_runner(cfg, cohort), cohort.times, cohort.events, cfg.randomization_runs, cfg.seed, cfg.workers)
            manifest.null_distribution = res.null.tolist()
            manifest.randomization_p = res.p
        if cfg.bootstrap_runs >= 2:
            try:
                b = bootstrap_hr(manifest.mean_hazards, manifest.times, manifest.events, cfg.bootstrap_runs, cfg.seed)
                manifest.bootstrap = {"hr": b.hr, "ci": [b.ci_low, b.ci_high], "p": b.p, "failed": b.n_failed, "degenerate": b.degenerate}
            except StatsError as err:
                log.warning("bootstrap skipped: %s", err)
        paths = emit_results(manifest, out_dir)
        summary["survival"] = {"mean_cindex": manifest.mean_cindex, "std_cindex": manifest.std_cindex,
                               "files": {k: str(v) for k, v in paths.items()}}
    if not summary:
        raise PipelineError("config paths name neither image+seeds nor features+survival")
    _emit(summary)
    return EXIT_OK


# --------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="survseg", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("samonai", help="propagate point prompts to 3D masks (oracle segmenter)")
    s.add_argument("--image", required=True)
    s.add_argument("--seeds", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--weights", default="1,1,2", help="criterion weights a,b,g")
    s.add_argument("--oracle-tolerance", type=float, default=0.0)
    s.add_argument("--labels")
    s.add_argument("--workers", type=int, default=1)
    s.set_defaults(func=cmd_samonai)

    s = sub.add_parser("features", help="first-order + shape features per tumour")
    s.add_argument("--image", required=True)
    s.add_argument("--mask", required=True)
    s.add_argument("--patient-id", required=True)
    s.add_argument("--phase", choices=("pre", "post"), required=True)
    s.add_argument("--label", type=int, default=2)
    s.add_argument("--labels")
    s.add_argument("--connectivity", type=int, choices=(6, 26), default=26)
    s.add_argument("--normalize", choices=("image", "roi", "none"), default="image")
    s.add_argument("--scale", type=float, default=100.0)
    s.add_argument("--bin-width", type=float, default=5.0)
    s.add_argument("--append", action="store_true")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_features)

    surv = sub.add_parser("surv", help="train or apply the survival network")
    ss = surv.add_subparsers(dest="action", required=True, parser_class=_Parser)
    s = ss.add_parser("train")
    s.add_argument("--features", required=True)
    s.add_argument("--survival", required=True)
    s.add_argument("--pool", choices=POOL_MODES)
    s.add_argument("--folds", type=int)
    s.add_argument("--repeats", type=int, default=0, help="CV repeats to report before the final fit (0 = none)")
    s.add_argument("--seed", type=int)
    s.add_argument("--epochs", type=int)
    s.add_argument("--config")
    s.add_argument("--manifest-dir")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_surv_train)
    s = ss.add_parser("predict")
    s.add_argument("--model", required=True)
    s.add_argument("--features", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_surv_predict)

    ev = sub.add_parser("eval", help="metrics and statistical tests")
    es = ev.add_subparsers(dest="action", required=True, parser_class=_Parser)
    for name, func in (("dice", cmd_eval_dice), ("detect", cmd_eval_detect)):
        s = es.add_parser(name)
        s.add_argument("--pred")
        s.add_argument("--gt")
        s.add_argument("--labels")
        s.set_defaults(func=func)
    s = es.choices["detect"]
    s.add_argument("--label", type=int, default=2)
    s.add_argument("--connectivity", type=int, choices=(6, 26), default=26)
    s.add_argument("--counts", type=int, nargs=3, metavar=("TP", "FP", "FN"))
    es.choices["dice"].set_defaults(_needs=("pred", "gt"))
    s = es.add_parser("cindex")
    s.add_argument("--hazards", required=True)
    s.add_argument("--survival", required=True)
    s.add_argument("--ties", choices=("strict", "half"), default="strict")
    s.set_defaults(func=cmd_eval_cindex)
    s = es.add_parser("km")
    s.add_argument("--hazards", required=True)
    s.add_argument("--survival", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_eval_km)
    s = es.add_parser("hr", help="bootstrap hazard ratio of a risk score")
    s.add_argument("--hazards", required=True)
    s.add_argument("--survival", required=True)
    s.add_argument("--runs", type=int, default=1000)
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_eval_hr)
    s = es.add_parser("randtest")
    s.add_argument("--config", required=True)
    s.add_argument("--runs", type=int)
    s.add_argument("--out")
    s.set_defaults(func=cmd_eval_randtest)

    pl = sub.add_parser("pipeline", help="end-to-end run from a JSON config")
    ps = pl.add_subparsers(dest="action", required=True, parser_class=_Parser)
    s = ps.add_parser("run")
    s.add_argument("--config", required=True)
    s.add_argument("--out")
    s.set_defaults(func=cmd_pipeline_run)
    return p


def main(argv: list[str] | None = None) -> int:
    level = os.environ.get("SURVSEG_LOG_LEVEL", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING), format="%(levelname)s %(name)s: %(message)s")
    try:
        args = build_parser().parse_args(argv)
        for name in getattr(args, "_needs", ()):
            if getattr(args, name) is None:
                raise UsageError(f"--{name} is required")
        return args.func(args)
    except UsageError as err:
        print(err, file=sys.stderr)
        return EXIT_USAGE
    except (StatsError, np.linalg.LinAlgError, FloatingPointError) as err:
        print(f"numerical failure: {err}", file=sys.stderr)
        return EXIT_NUMERIC
    except (FeatureError, NrrdError, VolumeError, PipelineError, SurvivalError, OSError, KeyError, ValueError) as err:
        print(f"data error: {err}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
