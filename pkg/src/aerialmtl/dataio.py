"""Sample and checkpoint storage.

Dataset layout: ``<root>/<sample_id>/{rgb.png, depth.raw, sparse.raw, boxes.json, meta.json}``.
Depth rasters are a 16-byte header (``b"DPF1"``, u32 width, u32 height, u32 reserved)
followed by little-endian float32 values in row-major order. 0.0 marks a missing pixel.
"""
from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import asdict, dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Any

import numpy as np
from PIL import Image

RASTER_MAGIC = b"DPF1"
_HEADER = struct.Struct("<4sIII")

PARAMS_MAGIC = b"AMTLPRM1"


class FormatError(ValueError):
    """Raised when a file on disk does not match the expected layout."""


class ValidationError(ValueError):
    """Raised when a record violates a domain invariant."""


class CheckpointMismatch(ValueError):
    """Raised when a checkpoint's config hash does not match."""


class DepthMap:
    """Dense depth raster in meters; 0 marks an invalid pixel."""

    def __init__(self, values: np.ndarray):
        values = np.asarray(values, dtype=np.float32)
        if values.ndim != 2:
            raise ValidationError(f"depth must be 2-D, got shape {values.shape}")
        if not np.all(np.isfinite(values)) or np.any(values < 0):
            raise ValidationError("depth values must be finite and non-negative")
        self.values = values

    @property
    def valid_mask(self) -> np.ndarray:
        return self.values > 0

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape

    def num_valid(self) -> int:
        return int(np.count_nonzero(self.values))

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, DepthMap):
            return NotImplemented
        return (
            self.values.shape == other.values.shape
            and self.values.tobytes() == other.values.tobytes()
        )

    def __repr__(self) -> str:
        h, w = self.shape
        return f"{type(self).__name__}({w}x{h}, valid={self.num_valid()})"


class SparseDepthMap(DepthMap):
    def __init__(self, values: np.ndarray, density: float):
        super().__init__(values)
        if not 0.0 < density <= 1.0:
            raise ValidationError(f"density must lie in (0, 1], got {density}")
        self.density = float(density)

    def __eq__(self, other: object) -> bool:
        eq = super().__eq__(other)
        if eq is NotImplemented or not eq:
            return eq
        return getattr(other, "density", None) == self.density


@dataclass
class BoundingBox:
    x_min: float
    y_min: float
    x_max: float
    y_max: float
    class_id: int = 1
    score: float = 1.0

    def __post_init__(self):
        if not (self.x_min < self.x_max and self.y_min < self.y_max):
            raise ValidationError(f"degenerate box {self}")
        if self.class_id < 1:
            raise ValidationError(f"class_id must be >= 1, got {self.class_id}")
        if not 0.0 <= self.score <= 1.0:
            raise ValidationError(f"score must lie in [0, 1], got {self.score}")

    def as_tuple(self) -> tuple[float, float, float, float]:
        return (self.x_min, self.y_min, self.x_max, self.y_max)

    def inside(self, width: int, height: int) -> bool:
        # right/bottom edges are pixel boundaries, so x_max == width is allowed
        return self.x_min >= 0 and self.y_min >= 0 and self.x_max <= width and self.y_max <= height


@dataclass
class SceneMeta:
    fx: float
    fy: float
    cx: float
    cy: float
    seed: int = 0
    provenance: dict[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ValidationError("focal lengths must be positive")


@dataclass(eq=False)
class Sample:
    rgb: np.ndarray
    dense_depth: DepthMap
    sparse_depth: SparseDepthMap | None
    boxes: list[BoundingBox]
    meta: SceneMeta

    def __post_init__(self):
        self.validate()

    @property
    def size(self) -> tuple[int, int]:
        """(width, height)."""
        h, w = self.dense_depth.shape
        return w, h

    def validate(self) -> None:
        h, w = self.dense_depth.shape
        if self.rgb.dtype != np.uint8 or self.rgb.shape != (h, w, 3):
            raise ValidationError(f"rgb must be uint8 {h}x{w}x3, got {self.rgb.dtype} {self.rgb.shape}")
        if self.sparse_depth is not None and self.sparse_depth.shape != (h, w):
            raise ValidationError("sparse depth shape differs from dense depth")
        for b in self.boxes:
            if not b.inside(w, h):
                raise ValidationError(f"box {b} outside {w}x{h} image")

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, Sample):
            return NotImplemented
        return (
            np.array_equal(self.rgb, other.rgb)
            and self.dense_depth == other.dense_depth
            and self.sparse_depth == other.sparse_depth
            and self.boxes == other.boxes
            and self.meta == other.meta
        )


# --------------------------------------------------------------------------- rasters

def write_raster(path: str | Path, values: np.ndarray) -> None:
    values = np.ascontiguousarray(values, dtype="<f4")
    h, w = values.shape
    with open(path, "wb") as f:
        f.write(_HEADER.pack(RASTER_MAGIC, w, h, 0))
        f.write(values.tobytes())


def read_raster(path: str | Path) -> np.ndarray:
    data = Path(path).read_bytes()
    if len(data) < _HEADER.size:
        raise FormatError(f"{path}: truncated header")
    magic, w, h, _ = _HEADER.unpack_from(data)
    if magic != RASTER_MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}")
    expected = _HEADER.size + 4 * w * h
    if len(data) != expected:
        raise FormatError(f"{path}: expected {expected} bytes for {w}x{h}, got {len(data)}")
    return np.frombuffer(data, dtype="<f4", offset=_HEADER.size).reshape(h, w).astype(np.float32)


# --------------------------------------------------------------------------- samples

def write_sample(sample: Sample, directory: str | Path) -> Path:
    sample.validate()
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    Image.fromarray(sample.rgb, mode="RGB").save(directory / "rgb.png")
    write_raster(directory / "depth.raw", sample.dense_depth.values)
    meta = asdict(sample.meta)
    if sample.sparse_depth is not None:
        write_raster(directory / "sparse.raw", sample.sparse_depth.values)
        meta["sparse_density"] = sample.sparse_depth.density
    else:
        (directory / "sparse.raw").unlink(missing_ok=True)
    with open(directory / "boxes.json", "w") as f:
        json.dump([asdict(b) for b in sample.boxes], f, indent=1)
    with open(directory / "meta.json", "w") as f:
        json.dump(meta, f, indent=1, sort_keys=True)
    return directory


def read_sample(directory: str | Path) -> Sample:
    directory = Path(directory)
    rgb = np.asarray(Image.open(directory / "rgb.png").convert("RGB"), dtype=np.uint8)
    dense = DepthMap(read_raster(directory / "depth.raw"))
    meta_raw = json.loads((directory / "meta.json").read_text())
    density = meta_raw.pop("sparse_density", None)
    sparse = None
    if (directory / "sparse.raw").exists():
        values = read_raster(directory / "sparse.raw")
        if values.shape != dense.shape:
            raise ValidationError("sparse.raw and depth.raw dimensions differ")
        if density is None:
            density = max(np.count_nonzero(values), 1) / values.size
        sparse = SparseDepthMap(values, density)
    boxes = [BoundingBox(**rec) for rec in json.loads((directory / "boxes.json").read_text())]
    return Sample(rgb=rgb, dense_depth=dense, sparse_depth=sparse, boxes=boxes, meta=SceneMeta(**meta_raw))


def list_samples(root: str | Path) -> list[Path]:
    """Sample directories under ``root``, sorted by id."""
    root = Path(root)
    return sorted(p for p in root.iterdir() if (p / "depth.raw").exists())


def load_dataset(root: str | Path) -> list[Sample]:
    return [read_sample(p) for p in list_samples(root)]


# --------------------------------------------------------------------------- checkpoints

def config_hash(config: Any) -> str:
    cfg = asdict(config) if hasattr(config, "__dataclass_fields__") else dict(config)
    blob = json.dumps(cfg, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()


def write_params(path: str | Path, params: dict[str, np.ndarray]) -> None:
    """Self-describing tensor file: magic, u64 header length, JSON index, raw data."""
    index, chunks, offset = {}, [], 0
    for name, arr in params.items():
        arr = np.asarray(arr, order="C")
        dtype = arr.dtype.newbyteorder("<") if arr.dtype.byteorder == ">" else arr.dtype
        arr = arr.astype(dtype, copy=False)
        raw = arr.tobytes()
        index[name] = {"dtype": arr.dtype.str, "shape": list(arr.shape), "offset": offset, "nbytes": len(raw)}
        chunks.append(raw)
        offset += len(raw)
    header = json.dumps(index).encode()
    with open(path, "wb") as f:
        f.write(PARAMS_MAGIC)
        f.write(struct.pack("<Q", len(header)))
        f.write(header)
        for raw in chunks:
            f.write(raw)


def read_params(path: str | Path) -> dict[str, np.ndarray]:
    data = Path(path).read_bytes()
    if data[:8] != PARAMS_MAGIC:
        raise FormatError(f"{path}: bad magic")
    (hlen,) = struct.unpack_from("<Q", data, 8)
    index = json.loads(data[16:16 + hlen])
    base = 16 + hlen
    out = {}
    for name, rec in index.items():
        start = base + rec["offset"]
        buf = data[start:start + rec["nbytes"]]
        out[name] = np.frombuffer(buf, dtype=np.dtype(rec["dtype"])).reshape(tuple(rec["shape"])).copy()
    return out


def save_checkpoint(state: dict, config: Any, epoch: int, directory: str | Path, **extra: Any) -> Path:
    """Write ``params.bin``, ``config.json`` and ``manifest.json`` into ``directory``.

    ``state`` maps parameter names to tensors or arrays (a torch ``state_dict`` works).
    """
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    params = {k: (v.detach().cpu().numpy() if hasattr(v, "detach") else np.asarray(v)) for k, v in state.items()}
    write_params(directory / "params.bin", params)
    cfg = asdict(config)
    (directory / "config.json").write_text(json.dumps(cfg, indent=1, sort_keys=True))
    manifest = {
        "config_hash": config_hash(config),
        "epoch": int(epoch),
        "created_at": datetime.now(timezone.utc).isoformat(),
        **extra,
    }
    (directory / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True))
    return directory


def load_checkpoint(directory: str | Path, config_cls=None, expected_config: Any = None):
    """Return ``(params, config, epoch)``.

    ``config`` is a ``config_cls`` instance when given, otherwise the raw dict.
    Raises CheckpointMismatch when the stored config does not hash to the manifest's
    value, or when ``expected_config`` differs from the stored one.
    """
    directory = Path(directory)
    manifest = json.loads((directory / "manifest.json").read_text())
    cfg_dict = json.loads((directory / "config.json").read_text())
    if config_cls is not None:
        config = config_cls.from_dict(cfg_dict) if hasattr(config_cls, "from_dict") else config_cls(**cfg_dict)
    else:
        config = cfg_dict
    stored = config_hash(config)
    if stored != manifest["config_hash"]:
        raise CheckpointMismatch(f"{directory}: config hash {stored[:12]} != manifest {manifest['config_hash'][:12]}")
    if expected_config is not None and config_hash(expected_config) != manifest["config_hash"]:
        raise CheckpointMismatch(f"{directory}: checkpoint was saved with a different model config")
    return read_params(directory / "params.bin"), config, int(manifest["epoch"])


def checkpoint_digest(directory: str | Path) -> str:
    """sha256 over params.bin and manifest hash; used for report provenance."""
    directory = Path(directory)
    h = hashlib.sha256((directory / "params.bin").read_bytes())
    h.update(json.loads((directory / "manifest.json").read_text())["config_hash"].encode())
    return h.hexdigest()
