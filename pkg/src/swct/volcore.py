"""Volumetric data model, coordinate conventions and file IO for 4D-CT sequences.

Conventions used throughout the toolkit:

* Voxel arrays are indexed ``[x, y, z]`` (shape ``(nx, ny, nz)``); the
  serialized layout is x-fastest, matching the on-disk NRRD order.
* ``origin`` is the world position (mm) of the *center* of voxel (0,0,0);
  axes are documented as +x left, +y anterior, +z superior.
* Hounsfield values are kept as 32-bit signed integers after load,
  regardless of the on-disk scalar type.
* Volumes and label maps are treated as immutable after construction and
  are safe to share across threads.
"""

from __future__ import annotations

import gzip
import json
import re
from dataclasses import dataclass
from enum import IntEnum
from pathlib import Path

import numpy as np

from .errors import DataError, GeometryMismatchError, NrrdFormatError


class RegionCode(IntEnum):
    """Stable anatomical region codes used in every label file and report."""

    background = 0
    tongue = 1
    soft_palate = 2
    facial_bones = 3
    mandible = 4
    cervical_vertebrae = 5
    hyoid = 6
    thyroid_cartilage = 7
    epiglottis = 8
    bolus = 9


REGION_NAMES: dict[int, str] = {int(c): c.name for c in RegionCode}
REGION_CODES: dict[str, int] = {c.name: int(c) for c in RegionCode}


def regions_markdown() -> str:
    """Region code table as a markdown snippet (published in REGIONS.md)."""
    lines = ["| code | region |", "| ---- | ------ |"]
    lines += [f"| {code} | {name} |" for code, name in sorted(REGION_NAMES.items())]
    return "\n".join(lines) + "\n"


def _as_triple(value, name: str) -> tuple[float, float, float]:
    t = tuple(float(v) for v in value)
    if len(t) != 3:
        raise DataError(f"{name} must have 3 components, got {len(t)}")
    return t


@dataclass(frozen=True)
class Volume3:
    """One CT frame: scalar voxel grid in Hounsfield units plus geometry."""

    spacing: tuple[float, float, float]
    origin: tuple[float, float, float]
    voxels: np.ndarray  # int32, shape (nx, ny, nz), indexed [x, y, z]

    def __post_init__(self):
        object.__setattr__(self, "spacing", _as_triple(self.spacing, "spacing"))
        object.__setattr__(self, "origin", _as_triple(self.origin, "origin"))
        arr = np.asarray(self.voxels)
        if arr.ndim != 3:
            raise DataError(f"voxel array must be 3-D, got shape {arr.shape}")
        if arr.dtype != np.int32:
            if np.issubdtype(arr.dtype, np.floating):
                if not np.isfinite(arr).all():
                    raise DataError("HU values must be finite")
                arr = np.rint(arr).astype(np.int32)
            else:
                arr = arr.astype(np.int32)
        object.__setattr__(self, "voxels", arr)
        if any(d < 1 for d in arr.shape):
            raise DataError(f"dims must all be >= 1, got {arr.shape}")
        if any(s <= 0 for s in self.spacing):
            raise DataError(f"spacing must be positive, got {self.spacing}")

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.voxels.shape


@dataclass(frozen=True)
class LabelMap:
    """Per-voxel region codes on the same grid as a reference Volume3."""

    spacing: tuple[float, float, float]
    origin: tuple[float, float, float]
    codes: np.ndarray  # uint8, shape (nx, ny, nz)

    def __post_init__(self):
        object.__setattr__(self, "spacing", _as_triple(self.spacing, "spacing"))
        object.__setattr__(self, "origin", _as_triple(self.origin, "origin"))
        arr = np.asarray(self.codes)
        if arr.ndim != 3:
            raise DataError(f"label array must be 3-D, got shape {arr.shape}")
        if arr.dtype != np.uint8:
            arr = arr.astype(np.uint8)
        object.__setattr__(self, "codes", arr)
        if any(s <= 0 for s in self.spacing):
            raise DataError(f"spacing must be positive, got {self.spacing}")

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.codes.shape

    def as_bool(self) -> np.ndarray:
        """Binary view (nonzero codes) for mask arithmetic."""
        return self.codes.astype(bool)


def same_geometry(a, b) -> bool:
    """Exact dims/spacing/origin equality between two grids."""
    return a.dims == b.dims and a.spacing == b.spacing and a.origin == b.origin


def require_same_geometry(a, b, what: str = "grids"):
    if not same_geometry(a, b):
        raise GeometryMismatchError(
            f"{what} differ: dims {a.dims} vs {b.dims}, spacing {a.spacing} vs "
            f"{b.spacing}, origin {a.origin} vs {b.origin}"
        )


def binary_labelmap(ref, mask: np.ndarray) -> LabelMap:
    """Wrap a boolean array as a {0,1}-coded LabelMap on ``ref``'s grid."""
    mask = np.asarray(mask)
    if mask.shape != ref.dims:
        raise GeometryMismatchError(f"mask shape {mask.shape} != grid dims {ref.dims}")
    return LabelMap(ref.spacing, ref.origin, mask.astype(np.uint8))


# ---------------------------------------------------------------------------
# Coordinate transforms


def world_to_index(v, p) -> np.ndarray:
    """Continuous voxel index of world point(s) ``p`` (mm). No clamping."""
    p = np.asarray(p, dtype=float)
    return (p - np.asarray(v.origin)) / np.asarray(v.spacing)


def index_to_world(v, idx) -> np.ndarray:
    """World position (mm) of continuous voxel index(es) ``idx``."""
    idx = np.asarray(idx, dtype=float)
    return idx * np.asarray(v.spacing) + np.asarray(v.origin)


# ---------------------------------------------------------------------------
# NRRD IO (pinned profile: NRRD0004, 3-D, diagonal directions, little endian,
# raw or gzip encoding, scalar types int16/int32/float32/uint8)

_NRRD_MAGIC_RE = re.compile(rb"^NRRD000[1-9]$")
_WRITE_MAGIC = b"NRRD0004"

_READ_DTYPES = {
    "int16": np.int16, "short": np.int16, "signed short": np.int16,
    "int32": np.int32, "int": np.int32, "signed int": np.int32,
    "float": np.float32, "float32": np.float32,
    "uint8": np.uint8, "uchar": np.uint8, "unsigned char": np.uint8,
}
_WRITE_NAMES = {
    np.dtype(np.int16): "int16",
    np.dtype(np.int32): "int32",
    np.dtype(np.float32): "float32",
    np.dtype(np.uint8): "uint8",
}
_VEC_RE = re.compile(r"\(([^)]*)\)")


def _parse_vectors(text: str, name: str) -> list[tuple[float, ...]]:
    out = []
    for group in _VEC_RE.findall(text):
        try:
            out.append(tuple(float(x) for x in group.split(",")))
        except ValueError as e:
            raise NrrdFormatError(f"bad {name} vector '({group})'") from e
    if not out:
        raise NrrdFormatError(f"could not parse {name}: '{text}'")
    return out


def _read_header(f, path) -> dict[str, str]:
    magic = f.readline().rstrip(b"\r\n")
    if not _NRRD_MAGIC_RE.match(magic):
        raise NrrdFormatError(f"{path}: not an NRRD file (magic {magic!r})")
    fields: dict[str, str] = {}
    while True:
        line = f.readline()
        if line in (b"\n", b"\r\n"):
            return fields
        if not line:
            raise NrrdFormatError(f"{path}: header not terminated by blank line")
        try:
            text = line.decode("ascii").rstrip("\r\n")
        except UnicodeDecodeError as e:
            raise NrrdFormatError(f"{path}: non-ASCII header line") from e
        if text.startswith("#") or ":=" in text:
            continue  # comments and key:=value metadata are ignored
        if ": " not in text:
            raise NrrdFormatError(f"{path}: malformed header line '{text}'")
        key, value = text.split(": ", 1)
        fields[key.strip().lower()] = value.strip()


def _read_nrrd(path) -> tuple[np.ndarray, tuple, tuple]:
    path = Path(path)
    if not path.exists():
        raise DataError(f"file not found: {path}")
    with open(path, "rb") as f:
        fields = _read_header(f, path)
        payload = f.read()

    required = ("type", "dimension", "sizes", "space directions",
                "space origin", "endian", "encoding")
    missing = [k for k in required if k not in fields]
    if missing:
        raise NrrdFormatError(f"{path}: missing header field(s): {', '.join(missing)}")

    if fields["dimension"] != "3":
        raise NrrdFormatError(f"{path}: only dimension 3 supported, got {fields['dimension']}")
    typename = fields["type"].lower()
    if typename not in _READ_DTYPES:
        raise NrrdFormatError(f"{path}: unsupported scalar type '{fields['type']}'")
    dtype = np.dtype(_READ_DTYPES[typename]).newbyteorder("<")
    if fields["endian"] != "little":
        raise NrrdFormatError(f"{path}: only little endian supported")

    try:
        sizes = tuple(int(s) for s in fields["sizes"].split())
    except ValueError as e:
        raise NrrdFormatError(f"{path}: bad sizes '{fields['sizes']}'") from e
    if len(sizes) != 3 or any(s < 1 for s in sizes):
        raise NrrdFormatError(f"{path}: sizes must be 3 positive ints, got {sizes}")

    directions = _parse_vectors(fields["space directions"], "space directions")
    if len(directions) != 3 or any(len(d) != 3 for d in directions):
        raise NrrdFormatError(f"{path}: space directions must be 3 3-vectors")
    spacing = []
    for axis, d in enumerate(directions):
        off = [d[i] for i in range(3) if i != axis]
        if any(x != 0.0 for x in off):
            raise NrrdFormatError(f"{path}: non-diagonal space directions unsupported")
        if d[axis] <= 0:
            raise NrrdFormatError(f"{path}: non-positive spacing on axis {axis}")
        spacing.append(d[axis])
    origin = _parse_vectors(fields["space origin"], "space origin")[0]
    if len(origin) != 3:
        raise NrrdFormatError(f"{path}: space origin must be a 3-vector")

    encoding = fields["encoding"].lower()
    if encoding == "raw":
        data = payload
    elif encoding == "gzip":
        try:
            data = gzip.decompress(payload)
        except (OSError, EOFError) as e:
            raise NrrdFormatError(f"{path}: corrupt gzip payload: {e}") from e
    else:
        raise NrrdFormatError(f"{path}: unsupported encoding '{fields['encoding']}'")

    expected = sizes[0] * sizes[1] * sizes[2] * dtype.itemsize
    if len(data) != expected:
        raise NrrdFormatError(
            f"{path}: payload holds {len(data) // dtype.itemsize} scalars, "
            f"header declares {sizes[0] * sizes[1] * sizes[2]}"
        )
    flat = np.frombuffer(data, dtype=dtype)
    # x-fastest on disk -> reshape as [z,y,x] then transpose to [x,y,z]
    arr = flat.reshape((sizes[2], sizes[1], sizes[0])).transpose(2, 1, 0)
    return arr, tuple(spacing), tuple(origin)


def _write_nrrd(path, arr: np.ndarray, spacing, origin, encoding: str):
    if encoding not in ("raw", "gzip"):
        raise NrrdFormatError(f"unsupported encoding '{encoding}'")
    dtype = np.dtype(arr.dtype).newbyteorder("<")
    name = _WRITE_NAMES.get(np.dtype(arr.dtype))
    if name is None:
        raise NrrdFormatError(f"unsupported scalar type {arr.dtype}")
    sx, sy, sz = spacing
    ox, oy, oz = origin
    header = (
        f"type: {name}\n"
        f"dimension: 3\n"
        f"sizes: {arr.shape[0]} {arr.shape[1]} {arr.shape[2]}\n"
        f"space directions: ({sx!r},0,0) (0,{sy!r},0) (0,0,{sz!r})\n"
        f"space origin: ({ox!r},{oy!r},{oz!r})\n"
        "endian: little\n"
        f"encoding: {encoding}\n"
        "\n"
    )
    payload = arr.astype(dtype, copy=False).transpose(2, 1, 0).tobytes()
    if encoding == "gzip":
        payload = gzip.compress(payload, compresslevel=6, mtime=0)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as f:
        f.write(_WRITE_MAGIC + b"\n")
        f.write(header.encode("ascii"))
        f.write(payload)


def load_volume(path) -> Volume3:
    """Load an NRRD volume; scalars are cast to int32 HU."""
    arr, spacing, origin = _read_nrrd(path)
    return Volume3(spacing, origin, arr)


def save_volume(v: Volume3, path, encoding: str = "gzip", dtype=None):
    """Write a volume as NRRD. ``dtype`` defaults to int16 when HU fit, else int32."""
    if dtype is None:
        lo, hi = int(v.voxels.min()), int(v.voxels.max())
        dtype = np.int16 if -32768 <= lo and hi <= 32767 else np.int32
    _write_nrrd(path, v.voxels.astype(dtype), v.spacing, v.origin, encoding)


def load_labels(path) -> LabelMap:
    """Load an NRRD label map (must be uint8-coded)."""
    arr, spacing, origin = _read_nrrd(path)
    if arr.dtype != np.uint8:
        raise NrrdFormatError(f"{path}: label maps must be uint8, got {arr.dtype}")
    return LabelMap(spacing, origin, arr)


def save_labels(l: LabelMap, path, encoding: str = "gzip"):
    _write_nrrd(path, l.codes, l.spacing, l.origin, encoding)


# ---------------------------------------------------------------------------
# Sequences and case manifests


@dataclass(frozen=True)
class Frame:
    volume: Volume3
    labels: LabelMap | None = None


@dataclass(frozen=True)
class Sequence4D:
    """Ordered frames of one case. Geometry consistency is checked by
    :func:`validate_sequence`, not the constructor, so that inconsistent
    on-disk cases can still be loaded and reported on."""

    frames: list[Frame]
    frame_interval_s: float = 0.1
    case_id: str = ""

    def __post_init__(self):
        if len(self.frames) < 1:
            raise DataError("a sequence needs at least one frame")
        if not self.frame_interval_s > 0:
            raise DataError(f"frame_interval_s must be > 0, got {self.frame_interval_s}")

    def __len__(self) -> int:
        return len(self.frames)


def save_case(seq: Sequence4D, case_dir, encoding: str = "gzip") -> Path:
    """Write a case directory: one NRRD per frame (+labels) plus case.json."""
    case_dir = Path(case_dir)
    case_dir.mkdir(parents=True, exist_ok=True)
    entries = []
    for i, frame in enumerate(seq.frames):
        vol_name = f"f{i:03d}.nrrd"
        save_volume(frame.volume, case_dir / vol_name, encoding=encoding)
        lab_name = None
        if frame.labels is not None:
            lab_name = f"f{i:03d}_labels.nrrd"
            save_labels(frame.labels, case_dir / lab_name, encoding=encoding)
        entries.append({"volume": vol_name, "labels": lab_name})
    manifest = {
        "case_id": seq.case_id,
        "frame_interval_s": seq.frame_interval_s,
        "frames": entries,
    }
    path = case_dir / "case.json"
    path.write_text(json.dumps(manifest, indent=2) + "\n")
    return path


def load_case(path, with_labels: bool = True) -> Sequence4D:
    """Load a case from its directory or its case.json path."""
    path = Path(path)
    manifest_path = path / "case.json" if path.is_dir() else path
    if not manifest_path.exists():
        raise DataError(f"case manifest not found: {manifest_path}")
    try:
        manifest = json.loads(manifest_path.read_text())
    except json.JSONDecodeError as e:
        raise DataError(f"{manifest_path}: invalid JSON: {e}") from e
    for key in ("case_id", "frame_interval_s", "frames"):
        if key not in manifest:
            raise DataError(f"{manifest_path}: missing manifest key '{key}'")
    base = manifest_path.parent
    frames = []
    for i, entry in enumerate(manifest["frames"]):
        if "volume" not in entry:
            raise DataError(f"{manifest_path}: frame {i} has no volume path")
        volume = load_volume(base / entry["volume"])
        labels = None
        if with_labels and entry.get("labels"):
            labels = load_labels(base / entry["labels"])
        frames.append(Frame(volume, labels))
    return Sequence4D(frames, float(manifest["frame_interval_s"]), str(manifest["case_id"]))


# ---------------------------------------------------------------------------
# Validation and region extraction


@dataclass(frozen=True)
class Finding:
    """One validation finding; an empty findings list means the sequence is clean."""

    kind: str
    frame: int | None
    message: str
    count: int = 0


def validate_sequence(seq: Sequence4D) -> list[Finding]:
    """Report inter-frame geometry mismatches, invalid label codes and
    non-finite HU. Findings are report entries, not failures."""
    findings: list[Finding] = []
    ref = seq.frames[0].volume
    valid_codes = set(REGION_NAMES)
    for i, frame in enumerate(seq.frames):
        v = frame.volume
        if not same_geometry(v, ref):
            findings.append(Finding(
                "geometry-mismatch", i,
                f"frame {i} geometry (dims {v.dims}, spacing {v.spacing}, origin "
                f"{v.origin}) differs from frame 0",
            ))
        if np.issubdtype(v.voxels.dtype, np.floating):
            bad = int((~np.isfinite(v.voxels)).sum())
            if bad:
                findings.append(Finding(
                    "non-finite-hu", i, f"frame {i} has {bad} non-finite HU voxels", bad))
        if frame.labels is not None:
            l = frame.labels
            if not same_geometry(l, v):
                findings.append(Finding(
                    "label-geometry-mismatch", i,
                    f"frame {i} labels do not match the volume grid",
                ))
            codes = np.unique(l.codes)
            invalid = [int(c) for c in codes if int(c) not in valid_codes]
            if invalid:
                n = int(np.isin(l.codes, invalid).sum())
                findings.append(Finding(
                    "invalid-label-code", i,
                    f"frame {i} has {n} voxels with invalid code(s) {invalid}", n))
    return findings


def extract_region(labels: LabelMap, region: int) -> LabelMap:
    """Binary mask (codes {0,1}) of one region; geometry preserved."""
    mask = (labels.codes == int(region)).astype(np.uint8)
    return LabelMap(labels.spacing, labels.origin, mask)
