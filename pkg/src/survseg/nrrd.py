"""Minimal NRRD reader/writer: 3D, raw little-endian float32 or uint8 payloads."""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .volume import DEFAULT_LABELS, Mask3D, Volume3D

_TYPES = {
    "float": np.dtype("<f4"),
    "float32": np.dtype("<f4"),
    "uint8": np.dtype("u1"),
    "uchar": np.dtype("u1"),
    "unsigned char": np.dtype("u1"),
    "uint8_t": np.dtype("u1"),
}


class NrrdError(ValueError):
    pass


def _parse_header(raw: bytes) -> tuple[dict[str, str], int]:
    if not raw.startswith(b"NRRD000"):
        raise NrrdError("missing NRRD magic line")
    end = raw.find(b"\n\n")
    if end < 0:
        raise NrrdError("header is not terminated by a blank line")
    fields: dict[str, str] = {}
    for line in raw[:end].decode("ascii").splitlines()[1:]:
        if not line or line.startswith("#") or ":=" in line:
            continue
        key, sep, value = line.partition(":")
        if not sep:
            raise NrrdError(f"malformed header line {line!r}")
        fields[key.strip().lower()] = value.strip()
    return fields, end + 2


def read_nrrd(path: str | Path) -> tuple[np.ndarray, tuple[float, float, float]]:
    """Read an array indexed ``[x, y, z]`` and its spacing."""
    raw = Path(path).read_bytes()
    fields, offset = _parse_header(raw)
    if fields.get("dimension") != "3":
        raise NrrdError(f"only 3D volumes are supported, got dimension {fields.get('dimension')}")
    enc = fields.get("encoding", "")
    if enc != "raw":
        raise NrrdError(f"unsupported encoding {enc!r}; only raw is accepted")
    if "data file" in fields or "datafile" in fields:
        raise NrrdError("detached data files are not supported")
    dtype = _TYPES.get(fields.get("type", "").lower())
    if dtype is None:
        raise NrrdError(f"unsupported type {fields.get('type')!r}")
    if dtype.itemsize > 1 and fields.get("endian", "little") != "little":
        raise NrrdError("only little-endian payloads are supported")
    sizes = tuple(int(s) for s in fields["sizes"].split())
    if "spacings" in fields:
        spacing = tuple(float(s) for s in fields["spacings"].split())
    elif "space directions" in fields:
        spacing = _spacing_from_directions(fields["space directions"])
    else:
        spacing = (1.0, 1.0, 1.0)
    n = int(np.prod(sizes))
    payload = raw[offset:offset + n * dtype.itemsize]
    if len(payload) != n * dtype.itemsize:
        raise NrrdError(f"payload truncated: expected {n * dtype.itemsize} bytes, got {len(payload)}")
    arr = np.frombuffer(payload, dtype=dtype).reshape(sizes, order="F")
    return arr.copy(), spacing  # type: ignore[return-value]


def _spacing_from_directions(text: str) -> tuple[float, ...]:
    vecs = []
    for tok in text.replace(")", ") ").split():
        if tok.startswith("("):
            vecs.append(np.array([float(v) for v in tok.strip("()").split(",")]))
    return tuple(float(np.linalg.norm(v)) for v in vecs)


def write_nrrd(path: str | Path, arr: np.ndarray, spacing=(1.0, 1.0, 1.0)) -> None:
    arr = np.asarray(arr)
    if arr.ndim != 3:
        raise NrrdError("only 3D arrays can be written")
    if arr.dtype.kind in "iub":
        if arr.size and (arr.min() < 0 or arr.max() > 255):
            raise NrrdError("integer data must fit uint8")
        data, type_name = arr.astype("u1"), "uint8"
    else:
        data, type_name = arr.astype("<f4"), "float"
    header = (
        "NRRD0004\n"
        f"type: {type_name}\n"
        "dimension: 3\n"
        f"sizes: {' '.join(str(s) for s in arr.shape)}\n"
        f"spacings: {' '.join(repr(float(s)) for s in spacing)}\n"
        "encoding: raw\n"
        "endian: little\n\n"
    )
    with open(path, "wb") as fh:
        fh.write(header.encode("ascii"))
        fh.write(data.ravel(order="F").tobytes())


def load_volume(path) -> Volume3D:
    arr, spacing = read_nrrd(path)
    return Volume3D(arr.astype(np.float64), spacing)


def load_mask(path, labels: dict[int, str] | None = None) -> Mask3D:
    arr, spacing = read_nrrd(path)
    return Mask3D(arr, spacing, dict(DEFAULT_LABELS) if labels is None else labels)


def save_volume(path, vol: Volume3D) -> None:
    write_nrrd(path, vol.data.astype(np.float32), vol.spacing)


def save_mask(path, mask: Mask3D) -> None:
    write_nrrd(path, mask.data.astype(np.uint8), mask.spacing)
