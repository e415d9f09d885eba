"""
JEMC checkpoint files.

Layout: magic b"JEMC", little-endian u32 format version, u32 metadata length,
UTF-8 JSON metadata, then every array named in the metadata as raw
little-endian float64 in the order listed.
"""

import json
import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np

from .data import rescale
from .diffcore import LayerSpec, Network, Tensor
from .energy import JemModel
from .errors import CheckpointError
from .sampler import ReplayBuffer
from .trainer import AdamState, Snapshot, TrainState
from .utils import atomic_write_bytes

logger = logging.getLogger(__name__)

MAGIC = b"JEMC"
FORMAT_VERSION = 1
_PREAMBLE = struct.Struct("<4sII")

_STATE_SCALARS = ("epoch", "step", "eta", "seed", "seed_offset", "lr_scale", "restarts",
                  "e_data_mean", "e_neg_mean", "best_val")


@dataclass
class Checkpoint:
    network: Network
    state: TrainState
    buffer: ReplayBuffer
    spec_hash: str = ""
    rng: Dict[str, Any] = field(default_factory=dict)
    config_text: str = ""
    normalization: Optional[Tuple[np.ndarray, np.ndarray]] = None
    class_prior: Optional[List[float]] = None

    @property
    def model(self) -> JemModel:
        return JemModel(self.network)

    def to_model_space(self, points) -> np.ndarray:
        points = np.asarray(points, dtype=np.float64)
        return points if self.normalization is None else rescale(points, *self.normalization)


def _arrays(ckpt: Checkpoint) -> List[Tuple[str, np.ndarray]]:
    arrays = [(f"param_{i}", p.data) for i, p in enumerate(ckpt.network.parameters)]
    arrays += [(f"adam_m_{i}", m) for i, m in enumerate(ckpt.state.adam.m)]
    arrays += [(f"adam_v_{i}", v) for i, v in enumerate(ckpt.state.adam.v)]
    arrays.append(("buffer", ckpt.buffer.states))
    if ckpt.normalization is not None:
        arrays += [("norm_min", ckpt.normalization[0]), ("norm_max", ckpt.normalization[1])]
    return arrays


def encode_checkpoint(ckpt: Checkpoint) -> bytes:
    arrays = _arrays(ckpt)
    state = {name: getattr(ckpt.state, name) for name in _STATE_SCALARS}
    state.update(adam_t=ckpt.state.adam.t, recoveries=list(ckpt.state.recoveries),
                 gap_window=[float(g) for g in ckpt.state.gap_window])
    meta = {
        "network": {
            "layers": [[l.kind, l.in_dim, l.out_dim] for l in ckpt.network.layers],
            "input_dim": ckpt.network.input_dim,
            "num_classes": ckpt.network.num_classes,
        },
        "state": state,
        "buffer": {
            "capacity": ckpt.buffer.capacity,
            "dim": ckpt.buffer.dim,
            "write_cursor": ckpt.buffer.write_cursor,
            "transitions": ckpt.buffer.transitions,
        },
        "spec_hash": ckpt.spec_hash,
        "rng": ckpt.rng,
        "config": ckpt.config_text,
        "class_prior": ckpt.class_prior,
        "arrays": [[name, list(a.shape)] for name, a in arrays],
    }
    blob = json.dumps(meta, sort_keys=True).encode("utf-8")
    body = b"".join(np.ascontiguousarray(a, dtype="<f8").tobytes() for _, a in arrays)
    return _PREAMBLE.pack(MAGIC, FORMAT_VERSION, len(blob)) + blob + body


def decode_checkpoint(raw: bytes, source: str = "<bytes>") -> Checkpoint:
    if len(raw) < _PREAMBLE.size or raw[:4] != MAGIC:
        raise CheckpointError(f"{source} is not a JEMC checkpoint (bad magic)")
    _, version, meta_len = _PREAMBLE.unpack_from(raw)
    if version != FORMAT_VERSION:
        raise CheckpointError(f"{source} has JEMC version {version}, this build reads version {FORMAT_VERSION}")
    try:
        meta = json.loads(raw[_PREAMBLE.size:_PREAMBLE.size + meta_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointError(f"{source} has corrupt metadata: {e}") from e

    arrays: Dict[str, np.ndarray] = {}
    offset = _PREAMBLE.size + meta_len
    for name, shape in meta["arrays"]:
        count = int(np.prod(shape)) if shape else 1
        if offset + 8 * count > len(raw):
            raise CheckpointError(f"{source} is truncated inside array '{name}'")
        arrays[name] = np.frombuffer(raw, dtype="<f8", count=count, offset=offset).astype(np.float64).reshape(shape)
        offset += 8 * count
    if offset != len(raw):
        raise CheckpointError(f"{source} has {len(raw) - offset} trailing bytes")

    net_meta = meta["network"]
    layers = [LayerSpec(kind, in_dim, out_dim) for kind, in_dim, out_dim in net_meta["layers"]]
    n_params = sum(1 for name in arrays if name.startswith("param_"))
    network = Network(layers, [Tensor(arrays[f"param_{i}"]) for i in range(n_params)],
                      net_meta["input_dim"], net_meta["num_classes"])

    s = meta["state"]
    adam = AdamState(s["adam_t"], [arrays[f"adam_m_{i}"] for i in range(n_params)],
                     [arrays[f"adam_v_{i}"] for i in range(n_params)])
    state = TrainState(adam=adam, recoveries=list(s["recoveries"]), gap_window=list(s["gap_window"]),
                       **{name: s[name] for name in _STATE_SCALARS})

    b = meta["buffer"]
    buffer = ReplayBuffer(b["capacity"], b["dim"])
    buffer.states = arrays["buffer"].reshape(-1, b["dim"])
    buffer.write_cursor = b["write_cursor"]
    buffer.transitions = b["transitions"]

    normalization = (arrays["norm_min"], arrays["norm_max"]) if "norm_min" in arrays else None
    return Checkpoint(network, state, buffer, meta["spec_hash"], meta["rng"], meta["config"],
                      normalization, meta.get("class_prior"))


def save_checkpoint(path, ckpt: Checkpoint):
    """Atomic write (temporary file, then rename)."""
    atomic_write_bytes(path, encode_checkpoint(ckpt))


def load_checkpoint(path) -> Checkpoint:
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"checkpoint {path} does not exist")
    return decode_checkpoint(path.read_bytes(), str(path))


class CheckpointStore:
    """Writes epoch_NNNN.jemc, last.jemc and best.jemc for one run."""

    def __init__(self, directory, spec_hash: str = "", config_text: str = "", rng: Optional[Dict] = None,
                 normalization: Optional[Tuple[np.ndarray, np.ndarray]] = None,
                 class_prior: Optional[Sequence[float]] = None):
        self.directory = Path(directory)
        self.spec_hash = spec_hash
        self.config_text = config_text
        self.rng = rng or {}
        self.normalization = normalization
        self.class_prior = None if class_prior is None else [float(p) for p in class_prior]

    @property
    def last_path(self) -> Path:
        return self.directory / "last.jemc"

    @property
    def best_path(self) -> Path:
        return self.directory / "best.jemc"

    def checkpoint(self, snapshot: Snapshot) -> Checkpoint:
        return Checkpoint(snapshot.network, snapshot.state, snapshot.buffer, self.spec_hash, self.rng,
                          self.config_text, self.normalization, self.class_prior)

    def save(self, snapshot: Snapshot, best: bool = False):
        payload = encode_checkpoint(self.checkpoint(snapshot))
        epoch_path = self.directory / f"epoch_{snapshot.state.epoch:04d}.jemc"
        atomic_write_bytes(epoch_path, payload)
        atomic_write_bytes(self.last_path, payload)
        if best:
            atomic_write_bytes(self.best_path, payload)
        logger.info(f"Saved checkpoint {epoch_path}{' (best)' if best else ''}")
