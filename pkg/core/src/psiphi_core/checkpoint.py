"""Versioned binary checkpoints.

Layout: 8 magic bytes, a little-endian uint32 format version, a uint64
header length, the UTF-8 JSON header, then every array's raw bytes in
header order. The header carries array names, dtypes and shapes plus
free-form metadata; keys are sorted and no timestamps are written, so
equal inputs give byte-identical files.
"""
import json
import logging
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Dict, Optional, Tuple, Union

import numpy as np

from .interfaces import MalformedRecord
from .network import ParamStore
from .optim import AdamState
from .parameters import NetworkConfig, config_from_dict
from .seeding import SeedStream

logger = logging.getLogger(__name__)

MAGIC = b"PSIPHICK"
VERSION = 1
_PREFIX = struct.Struct("<8sIQ")


@dataclass
class Checkpoint:
    """Everything needed to resume a learner bit-exactly.

    Attributes:
        params: Online parameters
        targets: Frozen target parameters, if any
        optimizer: Adam moments and per-block step counts
        streams: Named seed streams
        metadata: JSON-serializable counters and settings
    """
    params: ParamStore
    targets: Optional[ParamStore] = None
    optimizer: AdamState = field(default_factory=AdamState)
    streams: Dict[str, SeedStream] = field(default_factory=dict)
    metadata: Dict[str, Any] = field(default_factory=dict)


def _store_header(store: ParamStore) -> Dict[str, Any]:
    return {
        "input_size": store.input_size,
        "n_actions": store.n_actions,
        "head_ids": list(store.head_ids),
        "network": asdict(store.config),
    }


def _flatten(ckpt: Checkpoint) -> Dict[str, np.ndarray]:
    arrays = {f"params/{k}": v for k, v in ckpt.params.arrays.items()}
    if ckpt.targets is not None:
        arrays.update({f"targets/{k}": v for k, v in ckpt.targets.arrays.items()})
    arrays.update({f"adam.m/{k}": v for k, v in ckpt.optimizer.m.items()})
    arrays.update({f"adam.v/{k}": v for k, v in ckpt.optimizer.v.items()})
    return arrays


def save_checkpoint(ckpt: Checkpoint, path: Union[str, Path]) -> int:
    """Write a checkpoint; returns the number of bytes written."""
    arrays = _flatten(ckpt)
    names = sorted(arrays)
    header = {
        "params": _store_header(ckpt.params),
        "targets": _store_header(ckpt.targets) if ckpt.targets is not None else None,
        "adam_steps": ckpt.optimizer.t,
        "streams": {name: list(s.state()) for name, s in ckpt.streams.items()},
        "metadata": ckpt.metadata,
        "arrays": [
            {"name": n, "dtype": arrays[n].dtype.str, "shape": list(arrays[n].shape)}
            for n in names
        ],
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as f:
        f.write(_PREFIX.pack(MAGIC, VERSION, len(blob)))
        f.write(blob)
        for n in names:
            f.write(np.ascontiguousarray(arrays[n]).tobytes())
    size = path.stat().st_size
    logger.debug(f"Saved checkpoint {path} ({size} bytes, {len(names)} arrays)")
    return size


def _read_exact(f, n: int, what: str) -> bytes:
    data = f.read(n)
    if len(data) != n:
        raise MalformedRecord(f"truncated checkpoint while reading {what}")
    return data


def _store(arrays: Dict[str, np.ndarray], prefix: str, meta: Dict[str, Any]) -> ParamStore:
    blocks = {k[len(prefix) + 1:]: v for k, v in arrays.items() if k.startswith(prefix + "/")}
    network = meta["network"]
    network["hidden_sizes"] = tuple(network["hidden_sizes"])
    return ParamStore(
        arrays=blocks,
        input_size=int(meta["input_size"]),
        n_actions=int(meta["n_actions"]),
        head_ids=tuple(meta["head_ids"]),
        config=config_from_dict(NetworkConfig, network, "network"),
    )


def load_checkpoint(path: Union[str, Path]) -> Checkpoint:
    """Read a checkpoint written by save_checkpoint.

    Raises:
        MalformedRecord: On a bad magic, unknown version, bad header or
            truncated array data
    """
    with open(path, "rb") as f:
        magic, version, header_len = _PREFIX.unpack(_read_exact(f, _PREFIX.size, "prefix"))
        if magic != MAGIC:
            raise MalformedRecord(f"{path} is not a checkpoint")
        if version != VERSION:
            raise MalformedRecord(f"unsupported checkpoint version {version}")
        try:
            header = json.loads(_read_exact(f, header_len, "header").decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as e:
            raise MalformedRecord(f"bad checkpoint header: {e}") from e

        arrays = {}
        for entry in header["arrays"]:
            dtype = np.dtype(entry["dtype"])
            shape: Tuple[int, ...] = tuple(entry["shape"])
            count = int(np.prod(shape, dtype=np.int64))
            data = _read_exact(f, count * dtype.itemsize, entry["name"])
            arrays[entry["name"]] = np.frombuffer(data, dtype=dtype).reshape(shape).copy()
        if f.read(1):
            raise MalformedRecord("trailing bytes after checkpoint arrays")

    optimizer = AdamState(
        m={k[len("adam.m/"):]: v for k, v in arrays.items() if k.startswith("adam.m/")},
        v={k[len("adam.v/"):]: v for k, v in arrays.items() if k.startswith("adam.v/")},
        t={k: int(t) for k, t in header["adam_steps"].items()},
    )
    return Checkpoint(
        params=_store(arrays, "params", header["params"]),
        targets=_store(arrays, "targets", header["targets"]) if header["targets"] else None,
        optimizer=optimizer,
        streams={name: SeedStream(int(b), int(c)) for name, (b, c) in header["streams"].items()},
        metadata=header["metadata"],
    )
