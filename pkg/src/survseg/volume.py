"""Dense 3D volumes, label masks, view slicing and connected components.

Arrays are indexed ``[x, y, z]`` so that flattening in Fortran order yields
the row-major, x-fastest voxel layout used on disk. The linear index of a
voxel is ``x + nx * (y + ny * z)``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum
from functools import cached_property
from typing import Iterable, Sequence

import numpy as np
from scipy import ndimage

DEFAULT_LABELS = {1: "liver", 2: "tumor", 3: "spleen"}


class VolumeError(ValueError):
    """Raised for malformed volumes, masks or out-of-range requests."""


class View(Enum):
    AXIAL = "axial"
    SAGITTAL = "sagittal"
    CORONAL = "coronal"

    @property
    def axis(self) -> int:
        """Array axis held fixed by slices of this view."""
        return _VIEW_AXIS[self]

    @property
    def plane_axes(self) -> tuple[int, int]:
        """The two in-plane array axes, ascending."""
        a = self.axis
        return tuple(i for i in range(3) if i != a)  # type: ignore[return-value]

    @classmethod
    def parse(cls, value: "str | View") -> "View":
        if isinstance(value, View):
            return value
        try:
            return cls(value.lower())
        except ValueError:
            raise VolumeError(f"unknown view {value!r}") from None


_VIEW_AXIS = {View.AXIAL: 2, View.SAGITTAL: 0, View.CORONAL: 1}


def _check_spacing(spacing: Sequence[float]) -> tuple[float, float, float]:
    if len(spacing) != 3:
        raise VolumeError(f"spacing must have 3 entries, got {len(spacing)}")
    sp = tuple(float(s) for s in spacing)
    if not all(np.isfinite(s) and s > 0 for s in sp):
        raise VolumeError(f"spacing must be positive and finite, got {sp}")
    return sp  # type: ignore[return-value]


@dataclass(frozen=True)
class Volume3D:
    """Scalar image on a regular grid; spacing in millimetres per voxel."""

    data: np.ndarray
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)

    def __post_init__(self):
        arr = np.array(self.data, dtype=np.float64)
        if arr.ndim != 3 or min(arr.shape) < 1:
            raise VolumeError(f"expected a non-empty 3D array, got shape {arr.shape}")
        if not np.all(np.isfinite(arr)):
            raise VolumeError("volume contains NaN or Inf")
        arr.setflags(write=False)
        object.__setattr__(self, "data", arr)
        object.__setattr__(self, "spacing", _check_spacing(self.spacing))

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.data.shape  # type: ignore[return-value]

    @classmethod
    def from_flat(cls, values: Sequence[float], dims: Sequence[int], spacing=(1.0, 1.0, 1.0)) -> "Volume3D":
        """Build from an x-fastest flat buffer."""
        values = np.asarray(values, dtype=np.float64)
        if values.size != int(np.prod(dims)):
            raise VolumeError(f"data length {values.size} != prod{tuple(dims)}")
        return cls(values.reshape(tuple(dims), order="F"), spacing)

    def flat(self) -> np.ndarray:
        return self.data.ravel(order="F")


@dataclass(frozen=True)
class Mask3D:
    """Integer label volume, 0 is background."""

    data: np.ndarray
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)
    labels: dict[int, str] = field(default_factory=lambda: dict(DEFAULT_LABELS))

    def __post_init__(self):
        arr = np.asarray(self.data)
        if arr.ndim != 3 or min(arr.shape) < 1:
            raise VolumeError(f"expected a non-empty 3D array, got shape {arr.shape}")
        if arr.dtype.kind == "f":
            if not np.all(np.isfinite(arr)) or np.any(arr != np.round(arr)):
                raise VolumeError("mask values must be integers")
        arr = arr.astype(np.int32, copy=True)
        if arr.size and arr.min() < 0:
            raise VolumeError("mask labels must be non-negative")
        arr.setflags(write=False)
        object.__setattr__(self, "data", arr)
        object.__setattr__(self, "spacing", _check_spacing(self.spacing))
        object.__setattr__(self, "labels", {int(k): str(v) for k, v in self.labels.items()})

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.data.shape  # type: ignore[return-value]

    def binary(self, label: int) -> np.ndarray:
        return self.data == label

    def replace(self, data: np.ndarray) -> "Mask3D":
        return Mask3D(data, self.spacing, self.labels)

    @classmethod
    def empty_like(cls, other: "Volume3D | Mask3D", labels: dict[int, str] | None = None) -> "Mask3D":
        return cls(np.zeros(other.dims, dtype=np.int32), other.spacing,
                   dict(DEFAULT_LABELS) if labels is None else labels)


def check_same_grid(a, b) -> None:
    if tuple(a.dims) != tuple(b.dims):
        raise VolumeError(f"dimension mismatch: {a.dims} vs {b.dims}")
    if not np.allclose(a.spacing, b.spacing, rtol=1e-9, atol=0):
        raise VolumeError(f"spacing mismatch: {a.spacing} vs {b.spacing}")


# --------------------------------------------------------------------------
# slicing


def _as_array(vol) -> np.ndarray:
    return vol.data if isinstance(vol, (Volume3D, Mask3D)) else np.asarray(vol)


def take_slice(vol, view: View | str, index: int) -> np.ndarray:
    """Return the 2D plane ``index`` of ``vol`` orthogonal to ``view``.

    The result is indexed by the view's in-plane axes in ascending order,
    e.g. ``[x, y]`` for axial and ``[y, z]`` for sagittal.
    """
    arr = _as_array(vol)
    view = View.parse(view)
    extent = arr.shape[view.axis]
    if not 0 <= index < extent:
        raise VolumeError(f"{view.value} slice {index} out of range [0, {extent})")
    return np.take(arr, index, axis=view.axis).copy()


def stack_slices(planes: Sequence[np.ndarray], view: View | str) -> np.ndarray:
    """Inverse of taking every slice of a view in order."""
    view = View.parse(view)
    return np.stack(list(planes), axis=view.axis)


def put_slice(arr: np.ndarray, view: View | str, index: int, plane: np.ndarray) -> None:
    """Write ``plane`` into ``arr`` in place."""
    view = View.parse(view)
    sl = [slice(None)] * 3
    sl[view.axis] = index
    arr[tuple(sl)] = plane


def slices(vol, view: View | str) -> list[np.ndarray]:
    arr = _as_array(vol)
    view = View.parse(view)
    return [take_slice(arr, view, k) for k in range(arr.shape[view.axis])]


# --------------------------------------------------------------------------
# components


def linear_index(coords: np.ndarray, dims: Sequence[int]) -> np.ndarray:
    coords = np.asarray(coords, dtype=np.int64)
    return coords[..., 0] + dims[0] * (coords[..., 1] + dims[1] * coords[..., 2])


@dataclass(frozen=True, eq=False)
class Component:
    """One connected set of voxels; ``voxels`` is (n, 3) in linear-index order."""

    voxels: np.ndarray
    spacing: tuple[float, float, float]

    @property
    def n_voxels(self) -> int:
        return int(self.voxels.shape[0])

    @property
    def volume_mm3(self) -> float:
        sx, sy, sz = self.spacing
        return self.n_voxels * sx * sy * sz

    @property
    def bbox(self) -> tuple[tuple[int, int, int], tuple[int, int, int]]:
        lo = self.voxels.min(axis=0)
        hi = self.voxels.max(axis=0)
        return tuple(int(v) for v in lo), tuple(int(v) for v in hi)  # type: ignore[return-value]

    @cached_property
    def longest_diameter(self) -> float:
        return longest_diameter(self)

    def to_mask(self, dims: Sequence[int]) -> np.ndarray:
        out = np.zeros(tuple(dims), dtype=bool)
        out[tuple(self.voxels.T)] = True
        return out


ComponentSet = list  # list[Component], ordered by minimum linear voxel index


def _structure(connectivity: int) -> np.ndarray:
    if connectivity == 6:
        return ndimage.generate_binary_structure(3, 1)
    if connectivity == 26:
        return ndimage.generate_binary_structure(3, 3)
    raise VolumeError(f"connectivity must be 6 or 26, got {connectivity}")


def binary_components(binary: np.ndarray, spacing=(1.0, 1.0, 1.0), connectivity: int = 26) -> list[Component]:
    """Connected components of a boolean 3D array, ordered by min linear index."""
    binary = np.asarray(binary, dtype=bool)
    labelled, n = ndimage.label(binary, structure=_structure(connectivity))
    if n == 0:
        return []
    flat = labelled.ravel(order="F")
    lin = np.flatnonzero(flat)  # ascending linear index
    ids = flat[lin]
    # stable sort by component id keeps linear order within each component
    order = np.argsort(ids, kind="stable")
    ids_sorted = ids[order]
    lin_sorted = lin[order]
    starts = np.flatnonzero(np.r_[True, ids_sorted[1:] != ids_sorted[:-1]])
    groups = np.split(lin_sorted, starts[1:])
    groups.sort(key=lambda g: int(g[0]))
    dims = binary.shape
    spacing = _check_spacing(spacing)
    comps = []
    for g in groups:
        coords = np.stack(np.unravel_index(g, dims, order="F"), axis=1)
        comps.append(Component(coords.astype(np.int64), spacing))
    return comps


def connected_components(mask: Mask3D, label: int, connectivity: int = 26) -> list[Component]:
    """Connected components of one label of ``mask``.

    Raises:
        VolumeError: if ``label`` is not in the mask's label map.
    """
    if label not in mask.labels:
        raise VolumeError(f"label {label} not in label map {sorted(mask.labels)}")
    return binary_components(mask.binary(label), mask.spacing, connectivity)


def _boundary_voxels(voxels: np.ndarray) -> np.ndarray:
    # a voxel whose six face neighbours are all present is the midpoint of
    # two set members and so can never be an endpoint of the diameter
    lo = voxels.min(axis=0)
    local = voxels - lo + 1
    grid = np.zeros(tuple(local.max(axis=0) + 2), dtype=bool)
    grid[tuple(local.T)] = True
    interior = grid.copy()
    for ax in range(3):
        interior &= np.roll(grid, 1, axis=ax) & np.roll(grid, -1, axis=ax)
    keep = ~interior[tuple(local.T)]
    return voxels[keep]


def longest_diameter(component: Component | np.ndarray, spacing: Sequence[float] | None = None) -> float:
    """Maximum Euclidean distance in mm between two voxel centres.

    Exact: only boundary voxels are considered, points that cannot beat the
    current lower bound (judged by their farthest bounding-box corner) are
    pruned, and the survivors are compared pairwise in chunks.
    """
    if isinstance(component, Component):
        voxels, spacing = component.voxels, component.spacing
    else:
        voxels = np.asarray(component, dtype=np.int64).reshape(-1, 3)
        spacing = (1.0, 1.0, 1.0) if spacing is None else spacing
    if voxels.shape[0] == 0:
        raise VolumeError("longest diameter of an empty component")
    if voxels.shape[0] == 1:
        return 0.0
    sp = np.asarray(_check_spacing(spacing))
    pts = _boundary_voxels(voxels) * sp

    # lower bound from extreme points along a few directions
    dirs = np.array([[1, 0, 0], [0, 1, 0], [0, 0, 1], [1, 1, 1], [1, 1, -1], [1, -1, 1], [-1, 1, 1]], float)
    proj = pts @ dirs.T
    ext = np.unique(np.r_[proj.argmin(axis=0), proj.argmax(axis=0)])
    e = pts[ext]
    best2 = float(((e[:, None, :] - e[None, :, :]) ** 2).sum(-1).max())

    lo, hi = pts.min(axis=0), pts.max(axis=0)
    far = np.maximum(np.abs(pts - lo), np.abs(hi - pts))
    ub2 = (far ** 2).sum(axis=1)
    cand = pts[ub2 >= best2 * (1 - 1e-12)]

    chunk = max(1, 4_000_000 // max(len(cand), 1))
    for i in range(0, len(cand), chunk):
        block = cand[i:i + chunk]
        d2 = ((block[:, None, :] - cand[None, :, :]) ** 2).sum(-1)
        best2 = max(best2, float(d2.max()))
    return float(np.sqrt(best2))


# --------------------------------------------------------------------------
# post-processing


def remove_small_objects(mask: Mask3D, label: int, min_volume_mm3: float, connectivity: int = 26) -> Mask3D:
    """Clear components of ``label`` whose volume is below ``min_volume_mm3``."""
    if min_volume_mm3 < 0:
        raise VolumeError("min_volume_mm3 must be >= 0")
    out = mask.data.copy()
    for comp in connected_components(mask, label, connectivity):
        if comp.volume_mm3 < min_volume_mm3:
            out[tuple(comp.voxels.T)] = 0
    return mask.replace(out)


def mask_outside(tumor_mask: Mask3D, organ_mask: Mask3D | np.ndarray, labels: Iterable[int] | None = None) -> Mask3D:
    """Clear voxels of ``tumor_mask`` lying where ``organ_mask`` is zero.

    ``labels`` restricts clearing to the given tumor labels; by default every
    nonzero label is affected.
    """
    if isinstance(organ_mask, (Mask3D, Volume3D)):
        check_same_grid(tumor_mask, organ_mask)
        organ = organ_mask.data != 0
    else:
        organ = np.asarray(organ_mask) != 0
        if organ.shape != tuple(tumor_mask.dims):
            raise VolumeError(f"dimension mismatch: {tumor_mask.dims} vs {organ.shape}")
    data = tumor_mask.data.copy()
    hit = data != 0 if labels is None else np.isin(data, list(labels))
    data[hit & ~organ] = 0
    return tumor_mask.replace(data)
