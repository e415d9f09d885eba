"""
Synthetic labelled densities, preprocessing, and dataset files.

Files come in two formats:

* CSV: header row, a column named "label", every other column a numeric feature.
* JTB: magic b"JTB1", little-endian u32 N, u32 D, u32 K, N*D float32 features,
  then N u32 labels.
"""

import hashlib
import json
import logging
import math
import struct
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Any, Dict, Optional, Tuple

import numpy as np
import pandas as pd

from .errors import (
    ConfigError, DatasetParseError, HeaderError, LabelRangeError, MagicError, TruncatedFileError,
)
from .rng import Rng

logger = logging.getLogger(__name__)

GENERATORS = ("gauss_mixture", "rings", "spirals", "checkerboard", "file")
JTB_MAGIC = b"JTB1"
_JTB_HEADER = struct.Struct("<4sIII")


@dataclass(frozen=True)
class DatasetSpec:
    """Recipe for a dataset; generation is a pure function of spec + seed."""
    generator: str = "gauss_mixture"
    num_classes: int = 2
    num_points: int = 400
    components: int = 0          # 0 means one component per class
    scale: float = 1.0
    std: float = 0.1
    cells: int = 4
    label_noise: float = 0.0
    seed: int = 0
    path: str = ""
    format: str = "csv"

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)

    def spec_hash(self) -> str:
        return hashlib.sha256(self.to_json().encode("utf-8")).hexdigest()


@dataclass
class LabeledDataset:
    """Inputs [N, D] with class labels in [0, K) (or -1 for unlabelled rows)."""
    inputs: np.ndarray
    labels: np.ndarray
    num_classes: int
    name: str = "dataset"
    normalization: Optional[Tuple[np.ndarray, np.ndarray]] = None
    geometry: Dict[str, Any] = field(default_factory=dict)
    batch_noise: float = 0.0

    def __post_init__(self):
        self.inputs = np.asarray(self.inputs, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.inputs.ndim != 2 or len(self.inputs) != len(self.labels):
            raise ConfigError(f"inputs {self.inputs.shape} and labels {self.labels.shape} do not pair up")

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def dim(self) -> int:
        return self.inputs.shape[1]

    def subset(self, indices: np.ndarray, name: Optional[str] = None) -> "LabeledDataset":
        return replace(self, inputs=self.inputs[indices], labels=self.labels[indices],
                       name=name or self.name)

    def draw(self, indices: np.ndarray, rng: Rng) -> Tuple[np.ndarray, np.ndarray]:
        """A batch of inputs/labels; re-noised here when the dataset is a per-batch view."""
        x = self.inputs[indices]
        if self.batch_noise > 0:
            x = x + _truncated_noise(rng, x.shape, self.batch_noise)
        return x, self.labels[indices]

    def to_model_space(self, points) -> np.ndarray:
        """Apply this dataset's [-1, 1] scaling to raw-space points."""
        points = np.asarray(points, dtype=np.float64)
        if self.normalization is None:
            return points
        return rescale(points, *self.normalization)


def _truncated_noise(rng: Rng, shape, std: float) -> np.ndarray:
    return np.clip(rng.normal(shape), -4.0, 4.0) * std


def _balanced_labels(n: int, k: int) -> np.ndarray:
    return np.arange(n) % k


def _gauss_mixture(spec: DatasetSpec, rng: Rng):
    components = spec.components or spec.num_classes
    angles = 2.0 * math.pi * np.arange(components) / components
    means = spec.scale * np.stack([np.cos(angles), np.sin(angles)], axis=1)
    means = np.round(means, 12)
    component = _balanced_labels(spec.num_points, components)
    x = means[component] + spec.std * rng.normal((spec.num_points, 2))
    labels = component % spec.num_classes
    class_means = np.stack([means[np.arange(components) % spec.num_classes == k].mean(axis=0)
                            for k in range(spec.num_classes)])
    geometry = {"component_means": means.tolist(), "component_labels": (np.arange(components) % spec.num_classes).tolist(),
                "component_std": spec.std, "class_means": class_means.tolist()}
    return x, labels, geometry


def _rings(spec: DatasetSpec, rng: Rng):
    labels = _balanced_labels(spec.num_points, spec.num_classes)
    radii = spec.scale * (labels + 1) / spec.num_classes
    angles = rng.uniform(0.0, 2.0 * math.pi, spec.num_points)
    radius = radii + spec.std * rng.normal(spec.num_points)
    x = np.stack([radius * np.cos(angles), radius * np.sin(angles)], axis=1)
    geometry = {"ring_radii": (spec.scale * np.arange(1, spec.num_classes + 1) / spec.num_classes).tolist(),
                "class_means": np.zeros((spec.num_classes, 2)).tolist()}
    return x, labels, geometry


def _spirals(spec: DatasetSpec, rng: Rng):
    labels = _balanced_labels(spec.num_points, spec.num_classes)
    t = np.sqrt(rng.random(spec.num_points))
    angle = 3.0 * math.pi * t + 2.0 * math.pi * labels / spec.num_classes
    radius = spec.scale * t
    x = np.stack([radius * np.cos(angle), radius * np.sin(angle)], axis=1)
    x = x + spec.std * rng.normal(x.shape)
    return x, labels, {"arms": spec.num_classes}


def _checkerboard(spec: DatasetSpec, rng: Rng):
    cells = spec.cells
    width = 2.0 * spec.scale / cells
    ij = rng.integers(cells, (spec.num_points, 2))
    x = -spec.scale + width * (ij + rng.random((spec.num_points, 2)))
    labels = (ij[:, 0] + ij[:, 1]) % spec.num_classes
    centers = -spec.scale + width * (np.stack(np.meshgrid(np.arange(cells), np.arange(cells), indexing="ij"), -1).reshape(-1, 2) + 0.5)
    center_labels = (np.arange(cells)[:, None] + np.arange(cells)[None, :]).reshape(-1) % spec.num_classes
    class_means = np.stack([centers[center_labels == k].mean(axis=0) for k in range(spec.num_classes)])
    geometry = {"cell_centers": centers.tolist(), "cell_labels": center_labels.tolist(),
                "cell_width": width, "class_means": class_means.tolist()}
    return x, labels, geometry


_GENERATOR_FNS = {
    "gauss_mixture": _gauss_mixture,
    "rings": _rings,
    "spirals": _spirals,
    "checkerboard": _checkerboard,
}


def validate_spec(spec: DatasetSpec):
    if spec.generator not in GENERATORS:
        raise ConfigError(f"unknown generator '{spec.generator}', expected one of {GENERATORS}")
    if spec.num_classes < 1 or spec.num_points < 1:
        raise ConfigError("num_classes and num_points must be positive")
    if spec.generator == "gauss_mixture" and spec.components and spec.num_classes > spec.components:
        raise ConfigError(f"{spec.num_classes} classes cannot be spread over {spec.components} components")
    if spec.generator == "checkerboard" and spec.num_classes > spec.cells * spec.cells:
        raise ConfigError(f"{spec.num_classes} classes need more than {spec.cells}x{spec.cells} cells")
    if not 0.0 <= spec.label_noise <= 1.0:
        raise ConfigError("label_noise must lie in [0, 1]")


def generate(spec: DatasetSpec, rng: Optional[Rng] = None) -> LabeledDataset:
    """
    Build a labelled dataset from a spec.

    Args:
        spec: Generator recipe; `spec.seed` seeds the draw when rng is omitted.
        rng: Optional stream overriding the spec seed.

    Returns:
        LabeledDataset with ground-truth geometry (raw space) attached.
    """
    validate_spec(spec)
    if spec.generator == "file":
        return load_file(spec.path, spec.format, spec.num_classes)
    rng = rng or Rng(spec.seed).substream("data", spec.generator)
    x, labels, geometry = _GENERATOR_FNS[spec.generator](spec, rng.substream("points"))
    if spec.label_noise > 0:
        flip = rng.substream("label_noise").random(len(labels)) < spec.label_noise
        offsets = 1 + rng.substream("label_offsets").integers(max(spec.num_classes - 1, 1), len(labels))
        labels = np.where(flip, (labels + offsets) % spec.num_classes, labels)
    logger.debug(f"Generated {spec.generator} dataset with {len(labels)} points")
    return LabeledDataset(x, labels, spec.num_classes, name=spec.generator, geometry=geometry)


def rescale(x: np.ndarray, mins: np.ndarray, maxs: np.ndarray) -> np.ndarray:
    span = maxs - mins
    degenerate = span == 0
    scaled = 2.0 * (x - mins) / np.where(degenerate, 1.0, span) - 1.0
    return np.where(degenerate, 0.0, scaled)


def preprocess(ds: LabeledDataset, rng: Rng, noise_std: float = 0.03, renoise: bool = False,
               normalization: Optional[Tuple[np.ndarray, np.ndarray]] = None) -> LabeledDataset:
    """
    Scale each dimension to [-1, 1] and add Gaussian noise.

    Args:
        ds: Raw dataset with finite inputs.
        rng: Stream for the one-off noise draw (unused when renoise is set).
        noise_std: Noise standard deviation, truncated at four deviations.
        renoise: Return a view that draws fresh noise per batch instead.
        normalization: (mins, maxs) to reuse, e.g. the training split's.

    Returns:
        Dataset in model space carrying its normalization.
    """
    if not np.all(np.isfinite(ds.inputs)):
        raise ValueError(f"dataset '{ds.name}' contains non-finite inputs")
    if normalization is None:
        normalization = (ds.inputs.min(axis=0), ds.inputs.max(axis=0))
    mins, maxs = (np.asarray(a, dtype=np.float64) for a in normalization)
    scaled = rescale(ds.inputs, mins, maxs)
    if noise_std > 0 and not renoise:
        scaled = scaled + _truncated_noise(rng, scaled.shape, noise_std)
    return replace(ds, inputs=scaled, normalization=(mins, maxs),
                   batch_noise=noise_std if renoise else 0.0)


def split_train_val(ds: LabeledDataset, val_fraction: float, rng: Rng) -> Tuple[LabeledDataset, LabeledDataset]:
    """Seeded permutation split; the first ceil(N * val_fraction) points go to validation."""
    order = rng.permutation(len(ds))
    n_val = int(math.ceil(len(ds) * val_fraction)) if val_fraction > 0 else 0
    n_val = min(n_val, len(ds) - 1)
    val_idx, train_idx = np.sort(order[:n_val]), np.sort(order[n_val:])
    return ds.subset(train_idx, f"{ds.name}-train"), ds.subset(val_idx, f"{ds.name}-val")


# --- files --------------------------------------------------------------------

def save_file(ds: LabeledDataset, path, format: str = "jtb"):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if format == "jtb":
        if np.any(ds.labels < 0) or np.any(ds.labels >= ds.num_classes):
            raise LabelRangeError(f"labels must lie in [0, {ds.num_classes}) to be stored as JTB")
        n, d = ds.inputs.shape
        payload = (_JTB_HEADER.pack(JTB_MAGIC, n, d, ds.num_classes)
                   + ds.inputs.astype("<f4").tobytes()
                   + ds.labels.astype("<u4").tobytes())
        path.write_bytes(payload)
    elif format == "csv":
        frame = pd.DataFrame(ds.inputs, columns=[f"x{i}" for i in range(ds.dim)])
        frame["label"] = ds.labels
        frame.to_csv(path, index=False, float_format="%.17g")
    else:
        raise ConfigError(f"unknown dataset format '{format}'")
    logger.info(f"Saved {len(ds)} points to {path}")


def _load_jtb(path: Path, num_classes: Optional[int]) -> LabeledDataset:
    raw = path.read_bytes()
    if len(raw) < 4 or raw[:4] != JTB_MAGIC:
        raise MagicError(f"{path} does not start with {JTB_MAGIC!r}")
    if len(raw) < _JTB_HEADER.size:
        raise TruncatedFileError(f"{path} ends inside the header")
    _, n, d, k = _JTB_HEADER.unpack_from(raw)
    expected = _JTB_HEADER.size + 4 * n * d + 4 * n
    if len(raw) < expected:
        raise TruncatedFileError(f"{path} holds {len(raw)} bytes, header promises {expected}")
    if len(raw) > expected:
        raise DatasetParseError(f"{path} has {len(raw) - expected} trailing bytes")
    features = np.frombuffer(raw, dtype="<f4", count=n * d, offset=_JTB_HEADER.size)
    labels = np.frombuffer(raw, dtype="<u4", count=n, offset=_JTB_HEADER.size + 4 * n * d)
    if np.any(labels >= k):
        raise LabelRangeError(f"{path} has a label >= K={k}")
    if num_classes is not None and k != num_classes:
        raise LabelRangeError(f"{path} declares K={k}, expected {num_classes}")
    return LabeledDataset(features.astype(np.float64).reshape(n, d), labels.astype(np.int64), k,
                          name=path.stem)


def _load_csv(path: Path, num_classes: Optional[int]) -> LabeledDataset:
    try:
        frame = pd.read_csv(path)
    except (pd.errors.ParserError, pd.errors.EmptyDataError, UnicodeDecodeError) as e:
        raise HeaderError(f"{path} is not a readable CSV file: {e}") from e
    if "label" not in frame.columns:
        raise HeaderError(f"{path} has no 'label' column")
    features = frame.drop(columns=["label"])
    if features.shape[1] == 0:
        raise HeaderError(f"{path} has no feature columns")
    try:
        x = features.to_numpy(dtype=np.float64)
        labels = frame["label"].to_numpy(dtype=np.float64)
    except ValueError as e:
        raise DatasetParseError(f"{path} contains non-numeric values: {e}") from e
    if not np.all(np.isfinite(x)):
        raise DatasetParseError(f"{path} has missing or non-finite feature values")
    if np.any(np.isnan(labels)) or np.any(labels != np.round(labels)):
        raise LabelRangeError(f"{path} has non-integer labels")
    labels = labels.astype(np.int64)
    k = num_classes if num_classes is not None else int(labels.max()) + 1
    if np.any(labels < 0) or np.any(labels >= k):
        raise LabelRangeError(f"{path} has labels outside [0, {k})")
    return LabeledDataset(x, labels, k, name=path.stem)


def load_file(path, format: Optional[str] = None, num_classes: Optional[int] = None) -> LabeledDataset:
    """Read a CSV or JTB dataset; format defaults to the file suffix."""
    path = Path(path)
    format = format or path.suffix.lstrip(".").lower()
    if format == "jtb":
        return _load_jtb(path, num_classes)
    if format == "csv":
        return _load_csv(path, num_classes)
    raise ConfigError(f"unknown dataset format '{format}'")
