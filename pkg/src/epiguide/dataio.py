"""Bit-exact file formats: tensors, named-tensor archives, JSON-lines manifests.

Byte layouts are documented in docs/formats.md; everything is little-endian
and round-trips bitwise.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import (
    BadMagic,
    DanglingPath,
    DuplicateId,
    SchemaViolation,
    TruncatedPayload,
    UnsupportedDtype,
)

TENSOR_MAGIC = b"EPGT"
ARCHIVE_MAGIC = b"EPGA"
FORMAT_VERSION = 1

_DTYPE_CODES = {0: np.dtype("<f4"), 1: np.dtype("u1")}
_CODE_FOR_KIND = {"f": 0, "u": 1, "i": 1, "b": 1}


def _dtype_code(arr: np.ndarray) -> int:
    if arr.dtype == np.dtype("<f4") or arr.dtype.kind == "f":
        return 0
    if arr.dtype == np.dtype("u1") or arr.dtype.kind in ("u", "i", "b"):
        return 1
    raise UnsupportedDtype(f"no dtype code for {arr.dtype}")


def tensor_bytes(tensor: np.ndarray) -> bytes:
    """Serialize an array (f32 or u8 storage) to the tensor wire format."""
    arr = np.asarray(tensor)
    code = _dtype_code(arr)
    arr = arr.astype(_DTYPE_CODES[code], copy=False)
    if arr.ndim > 255:
        raise ValueError("too many dimensions")
    for d in arr.shape:
        if d >= 2**32:
            raise ValueError("dimension exceeds u32")
    header = TENSOR_MAGIC + struct.pack("<HBB", FORMAT_VERSION, code, arr.ndim)
    header += struct.pack(f"<{arr.ndim}I", *arr.shape)
    return header + arr.tobytes()


def tensor_from_bytes(blob: bytes, context: str = "tensor") -> np.ndarray:
    if blob[:4] != TENSOR_MAGIC:
        raise BadMagic(f"{context}: expected {TENSOR_MAGIC!r}, found {blob[:4]!r}")
    if len(blob) < 8:
        raise TruncatedPayload(f"{context}: header cut short at {len(blob)} bytes")
    version, code, ndim = struct.unpack("<HBB", blob[4:8])
    if version != FORMAT_VERSION:
        raise UnsupportedDtype(f"{context}: unknown format version {version}")
    if code not in _DTYPE_CODES:
        raise UnsupportedDtype(f"{context}: unknown dtype code {code}")
    dims_end = 8 + 4 * ndim
    if len(blob) < dims_end:
        raise TruncatedPayload(f"{context}: dims cut short at {len(blob)} bytes")
    dims = struct.unpack(f"<{ndim}I", blob[8:dims_end])
    dtype = _DTYPE_CODES[code]
    expected = int(np.prod(dims, dtype=np.int64)) * dtype.itemsize
    payload = blob[dims_end:]
    if len(payload) != expected:
        raise TruncatedPayload(
            f"{context}: payload is {len(payload)} bytes, header promises {expected}"
        )
    return np.frombuffer(payload, dtype=dtype).reshape(dims).copy()


def write_tensor(path, tensor: np.ndarray) -> None:
    Path(path).write_bytes(tensor_bytes(tensor))


def read_tensor(path) -> np.ndarray:
    return tensor_from_bytes(Path(path).read_bytes(), context=str(path))


def write_archive(path, tensors: dict[str, np.ndarray]) -> None:
    """Write named tensors in insertion order (order is part of the bytes)."""
    out = [ARCHIVE_MAGIC, struct.pack("<HI", FORMAT_VERSION, len(tensors))]
    for name, tensor in tensors.items():
        encoded = name.encode("utf-8")
        blob = tensor_bytes(tensor)
        out.append(struct.pack("<H", len(encoded)))
        out.append(encoded)
        out.append(struct.pack("<Q", len(blob)))
        out.append(blob)
    Path(path).write_bytes(b"".join(out))


def read_archive(path) -> dict[str, np.ndarray]:
    blob = Path(path).read_bytes()
    if blob[:4] != ARCHIVE_MAGIC:
        raise BadMagic(f"{path}: expected {ARCHIVE_MAGIC!r}, found {blob[:4]!r}")
    if len(blob) < 10:
        raise TruncatedPayload(f"{path}: archive header cut short")
    version, count = struct.unpack("<HI", blob[4:10])
    if version != FORMAT_VERSION:
        raise UnsupportedDtype(f"{path}: unknown format version {version}")
    offset = 10
    out: dict[str, np.ndarray] = {}
    for _ in range(count):
        if len(blob) < offset + 2:
            raise TruncatedPayload(f"{path}: entry name length cut short")
        (name_len,) = struct.unpack_from("<H", blob, offset)
        offset += 2
        name = blob[offset : offset + name_len].decode("utf-8")
        offset += name_len
        if len(blob) < offset + 8:
            raise TruncatedPayload(f"{path}: entry size cut short for {name!r}")
        (blob_len,) = struct.unpack_from("<Q", blob, offset)
        offset += 8
        if len(blob) < offset + blob_len:
            raise TruncatedPayload(f"{path}: entry payload cut short for {name!r}")
        out[name] = tensor_from_bytes(blob[offset : offset + blob_len], context=f"{path}:{name}")
        offset += blob_len
    if offset != len(blob):
        raise TruncatedPayload(f"{path}: {len(blob) - offset} trailing bytes after last entry")
    return out


# -- manifests ---------------------------------------------------------------

_SPLITS = ("train", "test")


@dataclass(frozen=True)
class PoseRecord:
    """Flattened camera pose as stored in the manifest."""

    r: tuple[float, ...]
    t: tuple[float, ...]
    k: tuple[float, ...]
    w: int
    h: int

    def as_json(self) -> dict:
        return {"r": list(self.r), "t": list(self.t), "k": list(self.k), "w": self.w, "h": self.h}


@dataclass(frozen=True)
class ManifestRecord:
    image_id: str
    instance_id: str
    category_id: str
    split: str
    feature_path: str
    pose: PoseRecord | None = None
    overlaps: dict[str, float] | None = None
    correspondences_path: str | None = None

    def as_json(self) -> dict:
        return {
            "image_id": self.image_id,
            "instance_id": self.instance_id,
            "category_id": self.category_id,
            "split": self.split,
            "feature_path": self.feature_path,
            "pose": None if self.pose is None else self.pose.as_json(),
            "overlaps": self.overlaps,
            "correspondences_path": self.correspondences_path,
        }


@dataclass
class ManifestIndex:
    records: list[ManifestRecord]
    root: Path
    by_id: dict[str, ManifestRecord] = field(init=False)

    def __post_init__(self):
        self.by_id = {r.image_id: r for r in self.records}

    def split(self, name: str) -> list[ManifestRecord]:
        return [r for r in self.records if r.split == name]

    def resolve(self, relative: str) -> Path:
        return self.root / relative


def _parse_pose(raw, line: int) -> PoseRecord:
    if not isinstance(raw, dict):
        raise SchemaViolation("pose must be an object or null", line)
    for key, n in (("r", 9), ("t", 3), ("k", 9)):
        vals = raw.get(key)
        if not isinstance(vals, list) or len(vals) != n:
            raise SchemaViolation(f"pose.{key} must be a list of {n} numbers", line)
        if not all(isinstance(v, (int, float)) for v in vals):
            raise SchemaViolation(f"pose.{key} must contain numbers", line)
    for key in ("w", "h"):
        if not isinstance(raw.get(key), int) or raw[key] <= 0:
            raise SchemaViolation(f"pose.{key} must be a positive integer", line)
    return PoseRecord(
        r=tuple(float(v) for v in raw["r"]),
        t=tuple(float(v) for v in raw["t"]),
        k=tuple(float(v) for v in raw["k"]),
        w=raw["w"],
        h=raw["h"],
    )


def _parse_record(raw: dict, line: int) -> ManifestRecord:
    for key in ("image_id", "instance_id", "category_id", "split", "feature_path"):
        if not isinstance(raw.get(key), str) or not raw[key]:
            raise SchemaViolation(f"{key} must be a non-empty string", line)
    if raw["split"] not in _SPLITS:
        raise SchemaViolation(f"split must be one of {_SPLITS}, got {raw['split']!r}", line)
    pose = None if raw.get("pose") is None else _parse_pose(raw["pose"], line)
    overlaps = raw.get("overlaps")
    if overlaps is not None:
        if not isinstance(overlaps, dict) or not all(
            isinstance(k, str) and isinstance(v, (int, float)) for k, v in overlaps.items()
        ):
            raise SchemaViolation("overlaps must map image ids to numbers", line)
        overlaps = {k: float(v) for k, v in overlaps.items()}
    corr = raw.get("correspondences_path")
    if corr is not None and not isinstance(corr, str):
        raise SchemaViolation("correspondences_path must be a string or null", line)
    return ManifestRecord(
        image_id=raw["image_id"],
        instance_id=raw["instance_id"],
        category_id=raw["category_id"],
        split=raw["split"],
        feature_path=raw["feature_path"],
        pose=pose,
        overlaps=overlaps,
        correspondences_path=corr,
    )


def load_manifest(path) -> ManifestIndex:
    """Parse and validate a JSON-lines manifest; paths resolve beside it."""
    path = Path(path)
    root = path.parent
    records: list[ManifestRecord] = []
    seen: dict[str, int] = {}
    with path.open("r", encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                raw = json.loads(line)
            except json.JSONDecodeError as exc:
                raise SchemaViolation(f"invalid JSON ({exc.msg})", line_no) from exc
            if not isinstance(raw, dict):
                raise SchemaViolation("each line must be a JSON object", line_no)
            record = _parse_record(raw, line_no)
            if record.image_id in seen:
                raise DuplicateId(
                    f"image_id {record.image_id!r} already defined on line {seen[record.image_id]}",
                    line_no,
                )
            seen[record.image_id] = line_no
            for rel in (record.feature_path, record.correspondences_path):
                if rel is not None and not (root / rel).exists():
                    raise DanglingPath(f"referenced file {rel!r} does not exist", line_no)
            records.append(record)
    return ManifestIndex(records=records, root=root)


def write_manifest(path, records: list[ManifestRecord]) -> None:
    """Deterministic JSON-lines serialization (sorted keys, tight separators)."""
    with Path(path).open("w", encoding="utf-8") as fh:
        for record in records:
            fh.write(json.dumps(record.as_json(), sort_keys=True, separators=(",", ":")))
            fh.write("\n")
