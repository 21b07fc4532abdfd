"""Zero-shot 3D prompt propagation over a 2D point-promptable segmenter.

One positive click per object is turned into a 3D mask in three steps:

1. segment the clicked slice in the clicked view;
2. in each of the two other views, segment the slice crossing the step-1
   mask along its longest run of positive points;
3. fit a box over the three segmented planes and segment every third slice
   inside it in all three views, interpolating the skipped slices, then
   average the three reconstructed logit volumes and threshold them at
   ``mean + 2 * std``.

Prompts on steps 2 and 3 are picked from candidate pools by a weighted cost
of distance-to-centroid, intensity-deviation-from-median and local texture.
"""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Protocol, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy import ndimage

from .volume import Mask3D, View, Volume3D, VolumeError, put_slice, take_slice

log = logging.getLogger(__name__)

HOMOGENEITY_WINDOW = 11
_TIE_TOL = 1e-12
_DEGENERATE_RTOL = 1e-9


@dataclass(frozen=True)
class PointPrompt:
    coords: tuple[int, ...]
    positive: bool = True


@dataclass(frozen=True)
class CriterionWeights:
    alpha: float = 1.0  # location
    beta: float = 1.0  # intensity
    gamma: float = 2.0  # homogeneity

    def __post_init__(self):
        w = (self.alpha, self.beta, self.gamma)
        if any(not np.isfinite(v) or v < 0 for v in w):
            raise ValueError(f"criterion weights must be non-negative, got {w}")
        if not any(v > 0 for v in w):
            raise ValueError("at least one criterion weight must be positive")

    @classmethod
    def parse(cls, text: str) -> "CriterionWeights":
        parts = [float(t) for t in text.split(",")]
        if len(parts) != 3:
            raise ValueError(f"expected 'alpha,beta,gamma', got {text!r}")
        return cls(*parts)


class Segmenter(Protocol):
    """A 2D point-promptable segmenter.

    ``positives`` and ``negatives`` are (k, 2) integer arrays of in-plane
    coordinates. Returns a logit grid shaped like ``image``; pixels with
    logit ``> mask_threshold`` are object. Implementations that cannot be
    called from several threads at once set ``concurrent_safe = False``.
    """

    concurrent_safe: bool
    mask_threshold: float

    def __call__(self, image: np.ndarray, positives: np.ndarray, negatives: np.ndarray) -> np.ndarray: ...


# --------------------------------------------------------------------------
# prompt criteria


def _points(P) -> np.ndarray:
    P = np.asarray(P, dtype=np.int64)
    if P.ndim == 1:
        P = P[None, :]
    if P.shape[0] == 0:
        raise ValueError("candidate set is empty")
    return P


def criterion_location(p, P) -> float:
    """Euclidean distance (voxel units) from ``p`` to the centroid of ``P``."""
    P = _points(P)
    return float(np.linalg.norm(np.asarray(p, float) - P.mean(axis=0)))


def criterion_intensity(p, P, image: np.ndarray) -> float:
    """``|I(p) - median(I(P))|``; even-sized sets use the mean of the middle pair."""
    P = _points(P)
    med = np.median(image[tuple(P.T)])
    return float(abs(image[tuple(np.asarray(p, int))] - med))


def criterion_homogeneity(p, image: np.ndarray, size: int = HOMOGENEITY_WINDOW) -> float:
    """Population std of a ``size`` x ``size`` window centred on ``p``, clipped at the borders."""
    return float(_homogeneity(image, _points(p), size)[0])


def _homogeneity(image: np.ndarray, P: np.ndarray, size: int = HOMOGENEITY_WINDOW) -> np.ndarray:
    r = size // 2
    img = np.asarray(image, dtype=np.float64)
    padded = np.pad(img, r, mode="constant", constant_values=np.nan)
    win = sliding_window_view(padded, (size, size))[P[:, 0], P[:, 1]]
    # shift by the centre value so that constant windows give exactly 0
    centre = img[P[:, 0], P[:, 1]]
    win = win - centre[:, None, None]
    return np.sqrt(np.nanmean((win - np.nanmean(win, axis=(1, 2), keepdims=True)) ** 2, axis=(1, 2)))


def _minmax(c: np.ndarray) -> np.ndarray:
    lo, hi = c.min(), c.max()
    if hi - lo <= _DEGENERATE_RTOL * max(abs(lo), abs(hi)):
        return np.zeros_like(c)
    return (c - lo) / (hi - lo)


def prompt_costs(P, image: np.ndarray, weights: CriterionWeights = CriterionWeights()) -> np.ndarray:
    """Total normalised cost of every candidate in ``P`` on a 2D ``image``."""
    P = _points(P)
    img = np.asarray(image, dtype=np.float64)
    loc = np.linalg.norm(P - P.mean(axis=0), axis=1)
    vals = img[P[:, 0], P[:, 1]]
    inten = np.abs(vals - np.median(vals))
    homo = _homogeneity(img, P)
    return weights.alpha * _minmax(loc) + weights.beta * _minmax(inten) + weights.gamma * _minmax(homo)


def _plane_linear(P: np.ndarray, shape) -> np.ndarray:
    return P[:, 0] + shape[0] * P[:, 1]


def select_prompt(P, image: np.ndarray, weights: CriterionWeights = CriterionWeights()) -> np.ndarray:
    """Candidate of ``P`` with the lowest total cost.

    Costs within 1e-12 of the minimum count as ties and the candidate with the
    smallest linear in-plane index wins.
    """
    P = _points(P)
    cost = prompt_costs(P, image, weights)
    tied = np.flatnonzero(cost <= cost.min() + _TIE_TOL)
    lin = _plane_linear(P[tied], np.shape(image))
    return P[tied[np.argmin(lin)]].copy()


def negative_threshold(image: np.ndarray) -> float:
    """Intensity cut below which points are never used as negative prompts."""
    img = np.asarray(image, dtype=np.float64)
    if img.size == 0:
        raise ValueError("empty image")
    lo, hi = float(img.min()), float(img.max())
    return lo + 0.1 * (hi - lo)


# --------------------------------------------------------------------------
# logits


@dataclass(frozen=True)
class ObjectLogits:
    logits: np.ndarray
    mu: float
    sigma: float
    threshold: float

    @classmethod
    def from_array(cls, logits: np.ndarray) -> "ObjectLogits":
        L = np.asarray(logits, dtype=np.float64)
        if not np.all(np.isfinite(L)):
            raise ValueError("logits must be finite")
        mu = float(np.mean(L))
        sigma = float(np.std(L))
        return cls(L, mu, sigma, mu + 2.0 * sigma)


def binarize(logits: ObjectLogits | np.ndarray) -> np.ndarray:
    """Voxels strictly above ``mean + 2 * std`` of the logits."""
    if not isinstance(logits, ObjectLogits):
        logits = ObjectLogits.from_array(logits)
    L = logits.logits
    if logits.sigma == 0 or L.max() == L.min():
        return np.zeros(L.shape, dtype=bool)
    return L > logits.threshold


# --------------------------------------------------------------------------
# oracle segmenter


class OracleSegmenter:
    """Region-growing stand-in for a promptable model.

    Grows 4-connected regions of pixels within ``tolerance`` of each positive
    point's intensity and suppresses regions grown the same way from negative
    points. Pixels at or below ``background`` (if not None) never grow, so a
    click on empty background yields an empty mask.
    """

    concurrent_safe = True
    mask_threshold = 0.0

    def __init__(self, tolerance: float = 0.0, background: float | None = 0.0):
        self.tolerance = float(tolerance)
        self.background = background

    def _grow(self, image: np.ndarray, seed) -> np.ndarray:
        u, v = int(seed[0]), int(seed[1])
        ok = np.abs(image - image[u, v]) <= self.tolerance
        if self.background is not None:
            ok &= image > self.background
        if not ok[u, v]:
            return np.zeros(image.shape, dtype=bool)
        lab, _ = ndimage.label(ok)  # default 2D structure is 4-connected
        return lab == lab[u, v]

    def __call__(self, image, positives, negatives=()) -> np.ndarray:
        image = np.asarray(image, dtype=np.float64)
        out = np.zeros(image.shape, dtype=bool)
        for p in np.asarray(positives, dtype=int).reshape(-1, 2):
            out |= self._grow(image, p)
        for q in np.asarray(negatives, dtype=int).reshape(-1, 2):
            out &= ~self._grow(image, q)
        return out.astype(np.float64)


def oracle_segmenter(image, positives, negatives=(), tolerance: float = 0.0, background: float | None = 0.0):
    return OracleSegmenter(tolerance, background)(image, positives, negatives)


# --------------------------------------------------------------------------
# propagation


@dataclass(frozen=True)
class ObjectSeeds:
    label: int
    positives: tuple[tuple[int, int, int], ...]
    view: View = View.AXIAL
    negatives: tuple[tuple[int, int, int], ...] = ()

    @classmethod
    def from_dict(cls, obj: dict) -> "ObjectSeeds":
        return cls(
            label=int(obj["label"]),
            positives=tuple(tuple(int(c) for c in p) for p in obj["positive"]),
            view=View.parse(obj.get("view", "axial")),
            negatives=tuple(tuple(int(c) for c in p) for p in obj.get("negative", [])),
        )


@dataclass(frozen=True)
class PropagationConfig:
    weights: CriterionWeights = CriterionWeights()
    sample_every: int = 3
    negative_margin: int = 3
    box_margin: int = 3
    workers: int = 1


@dataclass
class ObjectResult:
    label: int
    mask: np.ndarray | None = None  # boolean, [x, y, z]
    logits: ObjectLogits | None = None
    error: str | None = None
    box: tuple[tuple[int, ...], tuple[int, ...]] | None = None
    step2_slices: dict[str, int] = field(default_factory=dict)

    @property
    def ok(self) -> bool:
        return self.error is None


def _check_in_bounds(p, dims) -> None:
    if len(p) != 3 or any(not 0 <= c < n for c, n in zip(p, dims)):
        raise VolumeError(f"seed {tuple(p)} outside volume {tuple(dims)}")


def _to_plane(pts3: np.ndarray, view: View) -> np.ndarray:
    return pts3[:, list(view.plane_axes)]


def _to_volume(pts2: np.ndarray, view: View, index: int) -> np.ndarray:
    out = np.empty((pts2.shape[0], 3), dtype=np.int64)
    out[:, view.axis] = index
    out[:, list(view.plane_axes)] = pts2
    return out


def _step2_negative(image2: np.ndarray, run_pts: np.ndarray, line_axis: int, t_neg: float, margin: int):
    # run_pts are in-plane coords; the positive run varies along in-plane
    # axis ``line_axis`` and is constant along the other one
    fixed_axis = 1 - line_axis
    fixed = int(run_pts[0, fixed_axis])
    line = image2[:, fixed] if fixed_axis == 1 else image2[fixed, :]
    pos = np.arange(line.shape[0])
    run = np.unique(run_pts[:, line_axis])
    dist = np.abs(pos[:, None] - run[None, :]).min(axis=1)
    ok = (dist >= margin) & (line >= t_neg)
    if not ok.any():
        return None
    idx = np.flatnonzero(ok)
    best = idx[np.argmin(dist[idx])]  # argmin takes the smallest index on ties
    q = np.empty(2, dtype=np.int64)
    q[line_axis] = best
    q[fixed_axis] = fixed
    return q


def _step3_negative(image2: np.ndarray, lo2, hi2, t_neg: float, margin: int):
    n0, n1 = image2.shape
    u = np.arange(n0)[:, None]
    v = np.arange(n1)[None, :]
    inside = (u >= lo2[0] - margin) & (u <= hi2[0] + margin) & (v >= lo2[1] - margin) & (v <= hi2[1] + margin)
    ok = ~inside & (image2 >= t_neg)
    if not ok.any():
        return None
    cu = (lo2[0] + hi2[0]) / 2.0
    cv = (lo2[1] + hi2[1]) / 2.0
    d2 = (u - cu) ** 2 + (v - cv) ** 2
    d2 = np.where(ok, d2, np.inf)
    # Fortran ravel gives linear order u + n0 * v, so argmin breaks ties by it
    k = int(np.argmin(d2.ravel(order="F")))
    return np.array([k % n0, k // n0], dtype=np.int64)


def _sampled_indices(lo: int, hi: int, every: int) -> list[int]:
    idx = list(range(lo, hi + 1, every))
    if idx[-1] != hi:
        idx.append(hi)
    return idx


def _interpolate_view(planes: dict[int, np.ndarray], dims, view: View) -> np.ndarray:
    vol = np.zeros(dims, dtype=np.float64)
    keys = sorted(planes)
    for k in keys:
        put_slice(vol, view, k, planes[k])
    for k1, k2 in zip(keys[:-1], keys[1:]):
        for k in range(k1 + 1, k2):
            w = (k - k1) / (k2 - k1)
            put_slice(vol, view, k, (1.0 - w) * planes[k1] + w * planes[k2])
    return vol


class _Job:
    __slots__ = ("view", "index", "pos", "neg")

    def __init__(self, view, index, pos, neg):
        self.view, self.index, self.pos, self.neg = view, index, pos, neg


def propagate_object(
    vol: Volume3D,
    seeds: ObjectSeeds,
    segmenter: Segmenter,
    config: PropagationConfig = PropagationConfig(),
    t_neg: float | None = None,
) -> ObjectResult:
    """Segment one object from its seed click(s). See module docstring."""
    I = vol.data
    dims = vol.dims
    if not seeds.positives:
        raise VolumeError(f"object {seeds.label} has no positive seed")
    for p in seeds.positives + seeds.negatives:
        _check_in_bounds(p, dims)
    if t_neg is None:
        t_neg = negative_threshold(I)
    thr = getattr(segmenter, "mask_threshold", 0.0)
    res = ObjectResult(label=seeds.label)

    # step 1
    v0 = seeds.view
    pos3 = np.asarray(seeds.positives, dtype=np.int64)
    s0 = int(pos3[0, v0.axis])
    if np.any(pos3[:, v0.axis] != s0):
        raise VolumeError(f"object {seeds.label}: positive seeds must lie on one {v0.value} slice")
    neg3 = np.asarray(seeds.negatives, dtype=np.int64).reshape(-1, 3)
    if len(neg3) and np.any(neg3[:, v0.axis] != s0):
        log.warning("object %d: negative seeds off the seed slice are ignored", seeds.label)
        neg3 = neg3[neg3[:, v0.axis] == s0]
    plane0 = take_slice(I, v0, s0)
    m1 = np.asarray(segmenter(plane0, _to_plane(pos3, v0), _to_plane(neg3, v0))) > thr
    if not m1.any():
        res.error = "step-1 mask is empty"
        return res
    lines = [_to_volume(np.argwhere(m1), v0, s0)]

    # step 2
    for view in View:
        if view is v0:
            continue
        a = view.axis
        counts = np.bincount(lines[0][:, a], minlength=dims[a])
        k = int(np.argmax(counts))
        res.step2_slices[view.value] = k
        run3 = lines[0][lines[0][:, a] == k]
        plane = take_slice(I, view, k)
        run2 = _to_plane(run3, view)
        pos = select_prompt(run2, plane, config.weights)
        # the run varies along the in-plane axis that is neither the view axis nor v0's axis
        line_axis = list(view.plane_axes).index(3 - a - v0.axis)
        neg = _step2_negative(plane, run2, line_axis, t_neg, config.negative_margin)
        neg2 = np.empty((0, 2), np.int64) if neg is None else neg[None, :]
        m = np.asarray(segmenter(plane, pos[None, :], neg2)) > thr
        if m.any():
            lines.append(_to_volume(np.argwhere(m), view, k))
        else:
            log.info("object %d: step-2 %s slice %d came back empty", seeds.label, view.value, k)

    # step 3: prompts are fixed up front so the jobs can run in any order
    cloud = np.unique(np.concatenate(lines), axis=0)
    lo, hi = cloud.min(axis=0), cloud.max(axis=0)
    res.box = (tuple(int(v) for v in lo), tuple(int(v) for v in hi))
    jobs: list[_Job] = []
    for view in View:
        a = view.axis
        pa = list(view.plane_axes)
        for k in _sampled_indices(int(lo[a]), int(hi[a]), config.sample_every):
            on = cloud[cloud[:, a] == k]
            if len(on) == 0:
                jobs.append(_Job(view, k, None, None))
                continue
            plane = take_slice(I, view, k)
            pos = select_prompt(_to_plane(on, view), plane, config.weights)
            neg = _step3_negative(plane, lo[pa], hi[pa], t_neg, config.box_margin)
            jobs.append(_Job(view, k, pos, neg))

    def run(job: _Job) -> np.ndarray:
        plane = take_slice(I, job.view, job.index)
        if job.pos is None:
            return np.zeros(plane.shape)
        neg2 = np.empty((0, 2), np.int64) if job.neg is None else job.neg[None, :]
        out = np.asarray(segmenter(plane, job.pos[None, :], neg2), dtype=np.float64)
        if out.shape != plane.shape:
            raise ValueError(f"segmenter returned shape {out.shape} for a {plane.shape} slice")
        return out

    if config.workers > 1 and getattr(segmenter, "concurrent_safe", False):
        with ThreadPoolExecutor(max_workers=config.workers) as pool:
            outputs = list(pool.map(run, jobs))
    else:
        outputs = [run(j) for j in jobs]

    total = np.zeros(dims, dtype=np.float64)
    for view in View:
        planes = {j.index: o for j, o in zip(jobs, outputs) if j.view is view}
        total += _interpolate_view(planes, dims, view)
    logits = ObjectLogits.from_array(total / 3.0)
    res.logits = logits
    res.mask = binarize(logits)
    return res


def propagate(
    vol: Volume3D,
    objects: Sequence[ObjectSeeds],
    segmenter: Segmenter,
    config: PropagationConfig = PropagationConfig(),
) -> list[ObjectResult]:
    """Run propagation for every object; per-object failures are reported, not raised."""
    t_neg = negative_threshold(vol.data)
    return [propagate_object(vol, obj, segmenter, config, t_neg) for obj in objects]


def compose_labels(vol: Volume3D, results: Sequence[ObjectResult], labels: dict[int, str] | None = None) -> Mask3D:
    """Paint successful objects into one label volume; later objects win overlaps."""
    out = np.zeros(vol.dims, dtype=np.int32)
    for r in results:
        if r.ok and r.mask is not None:
            out[r.mask] = r.label
    mask = Mask3D.empty_like(vol, labels)
    return mask.replace(out)
