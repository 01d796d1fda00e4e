"""Volume, manifest and atlas I/O plus the light preprocessing applied
before the network sees a scan (time windowing, averaging, z-scoring,
zero padding).

On disk a volume is a pair of files::

    <name>.vol.json   {"dims": [...], "voxel_size_mm": [...], "dtype": "f32le", "order": "x-fastest"}
    <name>.vol        raw little-endian float32 payload

In memory 3D data is indexed ``data[x, y, z]`` and 4D data ``data[t, x, y, z]``.
"""
from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np

from .errors import DataError

MANIFEST_COLUMNS = ("subject_id", "label", "cdr", "mmse", "volume_path")
WORKING_DTYPE = np.float32
_FILE_DTYPE = np.dtype("<f4")


class Label(str, Enum):
    HC = "HC"
    MCI = "MCI"
    AD = "AD"

    @property
    def index(self) -> int:
        return LABELS.index(self)

    @classmethod
    def parse(cls, text: str) -> "Label":
        try:
            return cls(text.strip().upper())
        except ValueError:
            raise DataError(f"unknown label {text!r} (expected HC, MCI or AD)") from None


LABELS: Tuple[Label, ...] = (Label.HC, Label.MCI, Label.AD)


def _readonly(a: np.ndarray) -> np.ndarray:
    # private copy, so freezing it never touches the caller's array
    a = np.array(a, order="C", copy=True)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class Volume3D:
    data: np.ndarray
    voxel_size_mm: Tuple[float, float, float] = (3.0, 3.0, 3.0)

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.ndim != 3:
            raise DataError(f"Volume3D needs 3 dims, got shape {data.shape}")
        if not np.all(np.isfinite(data)):
            raise DataError("volume contains NaN or Inf")
        object.__setattr__(self, "data", _readonly(data))
        object.__setattr__(self, "voxel_size_mm", tuple(float(v) for v in self.voxel_size_mm))

    @property
    def dims(self) -> Tuple[int, int, int]:
        return tuple(self.data.shape)


@dataclass(frozen=True)
class Volume4D:
    data: np.ndarray  # (nt, nx, ny, nz)
    voxel_size_mm: Tuple[float, float, float] = (3.0, 3.0, 3.0)

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.ndim != 4 or data.shape[0] < 1:
            raise DataError(f"Volume4D needs shape (nt>=1, nx, ny, nz), got {data.shape}")
        if not np.all(np.isfinite(data)):
            raise DataError("volume contains NaN or Inf")
        object.__setattr__(self, "data", _readonly(data))
        object.__setattr__(self, "voxel_size_mm", tuple(float(v) for v in self.voxel_size_mm))

    @property
    def dims(self) -> Tuple[int, int, int]:
        return tuple(self.data.shape[1:])

    @property
    def nt(self) -> int:
        return self.data.shape[0]

    def frame(self, i: int) -> Volume3D:
        return Volume3D(self.data[i], self.voxel_size_mm)


@dataclass(frozen=True)
class SubjectRecord:
    subject_id: str
    label: Label
    cdr: float
    mmse: int
    volume_path: str

    def __post_init__(self):
        if not self.subject_id:
            raise DataError("empty subject_id")
        if not (math.isfinite(self.cdr) and self.cdr >= 0):
            raise DataError(f"{self.subject_id}: cdr out of range ({self.cdr})")
        if not 0 <= self.mmse <= 30:
            raise DataError(f"{self.subject_id}: mmse out of range ({self.mmse})")


@dataclass
class CohortDataset:
    """Subjects of one cohort plus a lazy cache of their volumes."""

    subjects: List[SubjectRecord]
    root: Path = field(default_factory=Path)
    volumes: Dict[str, Union[Volume3D, Volume4D]] = field(default_factory=dict)

    def __post_init__(self):
        seen = set()
        for s in self.subjects:
            if s.subject_id in seen:
                raise DataError(f"duplicate subject_id {s.subject_id!r}")
            seen.add(s.subject_id)
        self._by_id = {s.subject_id: s for s in self.subjects}

    def __len__(self) -> int:
        return len(self.subjects)

    def __getitem__(self, subject_id: str) -> SubjectRecord:
        return self._by_id[subject_id]

    @property
    def ids(self) -> List[str]:
        return [s.subject_id for s in self.subjects]

    def labels(self) -> np.ndarray:
        return np.array([s.label.index for s in self.subjects], dtype=np.int64)

    def class_counts(self) -> Tuple[int, ...]:
        return tuple(int(c) for c in np.bincount(self.labels(), minlength=len(LABELS)))

    def require_all_classes(self) -> None:
        missing = [lab.value for lab, c in zip(LABELS, self.class_counts()) if c == 0]
        if missing:
            raise DataError(f"cohort has no subjects of class {', '.join(missing)}")

    def volume(self, subject_id: str) -> Union[Volume3D, Volume4D]:
        if subject_id not in self.volumes:
            rec = self._by_id[subject_id]
            self.volumes[subject_id] = load_volume(self.root / rec.volume_path)
        return self.volumes[subject_id]

    def subset(self, ids: Iterable[str]) -> "CohortDataset":
        ids = list(ids)
        sub = CohortDataset([self._by_id[i] for i in ids], self.root)
        sub.volumes = {i: self.volumes[i] for i in ids if i in self.volumes}
        return sub

    def with_records(self, records: Sequence[SubjectRecord]) -> "CohortDataset":
        """Same volumes, replaced clinical records (used for label shuffles)."""
        out = CohortDataset(list(records), self.root)
        out.volumes = dict(self.volumes)
        return out


@dataclass(frozen=True)
class Atlas:
    label_volume: Volume3D
    names: Dict[int, str]

    def __post_init__(self):
        labels = self.label_volume.data
        if np.any(labels != np.round(labels)) or np.any(labels < 0):
            raise DataError("atlas labels must be non-negative integers")
        present = {int(v) for v in np.unique(labels) if v != 0}
        unnamed = sorted(present - set(self.names))
        if unnamed:
            raise DataError(f"atlas label(s) without a name entry: {unnamed}")

    @property
    def dims(self) -> Tuple[int, int, int]:
        return self.label_volume.dims

    @property
    def region_ids(self) -> List[int]:
        return sorted(self.names)

    def labels(self) -> np.ndarray:
        return self.label_volume.data.astype(np.int64)


# --------------------------------------------------------------------------
# file formats


def _stem(path: Union[str, Path]) -> Path:
    path = Path(path)
    name = path.name
    for suffix in (".vol.json", ".vol"):
        if name.endswith(suffix):
            return path.with_name(name[: -len(suffix)])
    return path


def save_volume(vol: Union[Volume3D, Volume4D], path: Union[str, Path]) -> Path:
    """Write ``vol`` as a ``.vol`` payload with its ``.vol.json`` sidecar.

    Returns the payload path.
    """
    stem = _stem(path)
    stem.parent.mkdir(parents=True, exist_ok=True)
    if isinstance(vol, Volume4D):
        dims = list(vol.dims) + [vol.nt]
        # x-fastest with time slowest == C order of data[t, z, y, x]
        payload = np.transpose(vol.data, (0, 3, 2, 1))
    else:
        dims = list(vol.dims)
        payload = np.transpose(vol.data, (2, 1, 0))
    header = {
        "dims": [int(d) for d in dims],
        "voxel_size_mm": [float(v) for v in vol.voxel_size_mm],
        "dtype": "f32le",
        "order": "x-fastest",
    }
    stem.with_name(stem.name + ".vol.json").write_text(json.dumps(header, indent=2) + "\n", encoding="utf-8")
    out = stem.with_name(stem.name + ".vol")
    out.write_bytes(np.ascontiguousarray(payload, dtype=_FILE_DTYPE).tobytes())
    return out


def load_volume(path: Union[str, Path]) -> Union[Volume3D, Volume4D]:
    stem = _stem(path)
    header_path = stem.with_name(stem.name + ".vol.json")
    payload_path = stem.with_name(stem.name + ".vol")
    try:
        header = json.loads(header_path.read_text(encoding="utf-8"))
        raw = payload_path.read_bytes()
    except FileNotFoundError as e:
        raise DataError(f"missing volume file: {e.filename}") from None
    except json.JSONDecodeError as e:
        raise DataError(f"{header_path}: bad JSON header ({e})") from None

    if header.get("dtype") != "f32le":
        raise DataError(f"{header_path}: unsupported dtype {header.get('dtype')!r}")
    if header.get("order", "x-fastest") != "x-fastest":
        raise DataError(f"{header_path}: unsupported order {header.get('order')!r}")
    dims = header.get("dims")
    if not isinstance(dims, list) or len(dims) not in (3, 4) or not all(isinstance(d, int) and d > 0 for d in dims):
        raise DataError(f"{header_path}: dims must be 3 or 4 positive ints, got {dims!r}")
    voxel = header.get("voxel_size_mm", [1.0, 1.0, 1.0])
    if len(voxel) != 3 or not all(float(v) > 0 for v in voxel):
        raise DataError(f"{header_path}: bad voxel_size_mm {voxel!r}")

    n = int(np.prod(dims))
    if len(raw) != n * 4:
        raise DataError(f"{payload_path}: payload has {len(raw)} bytes, header implies {n * 4}")
    flat = np.frombuffer(raw, dtype=_FILE_DTYPE)
    if not np.all(np.isfinite(flat)):
        raise DataError(f"{payload_path}: payload contains NaN or Inf")
    flat = flat.astype(WORKING_DTYPE)
    if len(dims) == 4:
        nx, ny, nz, nt = dims
        data = flat.reshape(nt, nz, ny, nx).transpose(0, 3, 2, 1)
        return Volume4D(data, tuple(voxel))
    nx, ny, nz = dims
    return Volume3D(flat.reshape(nz, ny, nx).transpose(2, 1, 0), tuple(voxel))


def load_manifest(path: Union[str, Path]) -> CohortDataset:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except FileNotFoundError:
        raise DataError(f"manifest not found: {path}") from None
    reader = csv.reader(text.splitlines())
    header = next(reader, None)
    if header is None or tuple(h.strip() for h in header) != MANIFEST_COLUMNS:
        raise DataError(f"{path}: header must be exactly {','.join(MANIFEST_COLUMNS)}; got {header}")

    records: List[SubjectRecord] = []
    seen = set()
    for lineno, row in enumerate(reader, start=2):
        if not row or all(not c.strip() for c in row):
            continue
        where = f"{path.name} row {lineno}"
        if len(row) != len(MANIFEST_COLUMNS):
            raise DataError(f"{where}: expected {len(MANIFEST_COLUMNS)} columns, got {len(row)}")
        sid, label, cdr, mmse, vpath = (c.strip() for c in row)
        if sid in seen:
            raise DataError(f"{where}: duplicate subject_id {sid!r}")
        try:
            cdr_v = float(cdr)
        except ValueError:
            raise DataError(f"{where}: unparseable cdr {cdr!r}") from None
        try:
            mmse_f = float(mmse)
        except ValueError:
            raise DataError(f"{where}: unparseable mmse {mmse!r}") from None
        if mmse_f != int(mmse_f):
            raise DataError(f"{where}: mmse must be an integer, got {mmse!r}")
        if not 0 <= mmse_f <= 30:
            raise DataError(f"{where}: mmse out of range ({mmse})")
        if not (math.isfinite(cdr_v) and cdr_v >= 0):
            raise DataError(f"{where}: cdr out of range ({cdr})")
        try:
            lab = Label.parse(label)
        except DataError as e:
            raise DataError(f"{where}: {e}") from None
        records.append(SubjectRecord(sid, lab, cdr_v, int(mmse_f), vpath))
        seen.add(sid)
    return CohortDataset(records, path.parent)


def write_manifest(dataset_or_records, path: Union[str, Path]) -> None:
    records = getattr(dataset_or_records, "subjects", dataset_or_records)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = [",".join(MANIFEST_COLUMNS)]
    for r in records:
        lines.append(f"{r.subject_id},{r.label.value},{r.cdr:g},{r.mmse},{r.volume_path}")
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_atlas(label_path: Union[str, Path], names_path: Union[str, Path],
               expected_dims: Optional[Sequence[int]] = None) -> Atlas:
    vol = load_volume(label_path)
    if isinstance(vol, Volume4D):
        raise DataError(f"{label_path}: atlas label volume must be 3D")
    if expected_dims is not None and tuple(vol.dims) != tuple(expected_dims):
        raise DataError(f"atlas dims {vol.dims} do not match data grid {tuple(expected_dims)}")
    names: Dict[int, str] = {}
    try:
        lines = Path(names_path).read_text(encoding="utf-8").splitlines()
    except FileNotFoundError:
        raise DataError(f"atlas names file not found: {names_path}") from None
    for n, line in enumerate(lines, start=1):
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) != 2:
            raise DataError(f"{names_path} line {n}: expected 'id<TAB>name'")
        if n == 1 and parts[0].strip().lower() == "id":
            continue
        try:
            rid = int(parts[0])
        except ValueError:
            raise DataError(f"{names_path} line {n}: bad region id {parts[0]!r}") from None
        names[rid] = parts[1].strip()
    return Atlas(vol, names)


def save_atlas(atlas: Atlas, label_path: Union[str, Path], names_path: Union[str, Path]) -> None:
    save_volume(atlas.label_volume, label_path)
    lines = ["id\tname"] + [f"{rid}\t{atlas.names[rid]}" for rid in sorted(atlas.names)]
    Path(names_path).write_text("\n".join(lines) + "\n", encoding="utf-8")


# --------------------------------------------------------------------------
# preprocessing


def select_time_window(scan: Volume4D, start: int, end: int) -> Volume4D:
    """Frames ``start..end``, 1-based and inclusive on both ends."""
    if not 1 <= start <= end <= scan.nt:
        raise DataError(f"time window [{start}, {end}] invalid for nt={scan.nt} (1-based, inclusive)")
    return Volume4D(scan.data[start - 1:end], scan.voxel_size_mm)


def time_average(scan: Volume4D) -> Volume3D:
    mean = scan.data.astype(np.float64).mean(axis=0)
    return Volume3D(mean.astype(scan.data.dtype), scan.voxel_size_mm)


def normalize_volume(vol: Volume3D) -> Volume3D:
    x = vol.data.astype(np.float64)
    x = x - x.mean()
    sd = x.std()
    if sd >= 1e-8:
        x = x / sd
    return Volume3D(x.astype(vol.data.dtype), vol.voxel_size_mm)


def pad_volume(vol: Volume3D, target: Sequence[int]) -> Volume3D:
    """Zero-pad ``vol`` to ``target`` with the source centered.

    On an odd margin the extra voxel goes to the high side.
    """
    target = tuple(int(t) for t in target)
    if len(target) != 3 or any(t < s for t, s in zip(target, vol.dims)):
        raise DataError(f"pad target {target} smaller than source {vol.dims}")
    if target == vol.dims:
        return vol
    out = np.zeros(target, dtype=vol.data.dtype)
    lo = [(t - s) // 2 for t, s in zip(target, vol.dims)]
    out[tuple(slice(l, l + s) for l, s in zip(lo, vol.dims))] = vol.data
    return Volume3D(out, vol.voxel_size_mm)


def prepare_average(vol: Union[Volume3D, Volume4D], target: Sequence[int],
                    window: Optional[Tuple[int, int]] = None) -> Volume3D:
    """Subject-level input: window, average over time, z-score, pad."""
    if isinstance(vol, Volume4D):
        if window is not None:
            vol = select_time_window(vol, *window)
        vol = time_average(vol)
    return pad_volume(normalize_volume(vol), target)


def prepare_frames(vol: Union[Volume3D, Volume4D], target: Sequence[int],
                   window: Optional[Tuple[int, int]] = None) -> np.ndarray:
    """Per-timepoint training samples, each z-scored then padded.

    Returns an array of shape ``(n_frames, *target)``.
    """
    if isinstance(vol, Volume3D):
        return pad_volume(normalize_volume(vol), target).data[None]
    if window is not None:
        vol = select_time_window(vol, *window)
    return np.stack([pad_volume(normalize_volume(vol.frame(t)), target).data for t in range(vol.nt)])

