"""
Trainable parameter storage, keyed random streams and checkpoints.

Parameters are addressed by slash-separated paths (``rgrm/W_q``,
``align/W_s/3``) so that checkpoints, finite-difference checks and the
optimizer state all agree on naming.
"""

import hashlib
import json
import logging
from pathlib import Path
from typing import Dict, Iterator, List, Tuple

import numpy as np

from .numcore import Tensor

logger = logging.getLogger(__name__)

CHECKPOINT_MANIFEST = "manifest.json"
CHECKPOINT_PAYLOAD = "params.bin"


def make_rng(seed: int, stream: str) -> np.random.Generator:
    """
    Counter-based generator keyed by (seed, stream name).

    Streams with different names are statistically independent and do not
    depend on the order in which other streams are consumed.
    """
    digest = hashlib.blake2b(f"{seed}:{stream}".encode("utf-8"), digest_size=16).digest()
    key = int.from_bytes(digest, "little")
    return np.random.Generator(np.random.Philox(key=key))


class ParamStore:
    """Named trainable tensors plus non-trainable buffers."""

    def __init__(self, dtype=np.float32):
        self.dtype = np.dtype(dtype)
        self._params: Dict[str, Tensor] = {}
        self._buffers: Dict[str, np.ndarray] = {}
        self.version = 0
        self.step = 0

    # -- registration ------------------------------------------------------

    def add(self, path: str, value: np.ndarray) -> Tensor:
        if path in self._params or path in self._buffers:
            raise KeyError(f"Duplicate parameter path: {path}")
        tensor = Tensor(np.array(value, dtype=self.dtype), requires_grad=True, name=path)
        self._params[path] = tensor
        return tensor

    def add_buffer(self, path: str, value: np.ndarray) -> np.ndarray:
        if path in self._params or path in self._buffers:
            raise KeyError(f"Duplicate parameter path: {path}")
        self._buffers[path] = np.array(value, dtype=self.dtype)
        return self._buffers[path]

    def __getitem__(self, path: str) -> Tensor:
        return self._params[path]

    def __contains__(self, path: str) -> bool:
        return path in self._params

    def __iter__(self) -> Iterator[str]:
        return iter(sorted(self._params))

    def __len__(self) -> int:
        return len(self._params)

    def buffer(self, path: str) -> np.ndarray:
        return self._buffers[path]

    def items(self) -> List[Tuple[str, Tensor]]:
        return [(path, self._params[path]) for path in sorted(self._params)]

    def subset(self, prefix: str) -> Dict[str, Tensor]:
        return {path: t for path, t in self.items() if path.startswith(prefix)}

    def count(self) -> int:
        return int(sum(t.data.size for t in self._params.values()))

    # -- gradients and state -------------------------------------------------

    def zero_grad(self) -> None:
        for tensor in self._params.values():
            tensor.grad = None

    def grad_of(self, path: str) -> np.ndarray:
        tensor = self._params[path]
        return tensor.grad if tensor.grad is not None else np.zeros_like(tensor.data)

    def bump(self) -> None:
        self.version += 1

    def snapshot(self) -> Dict[str, np.ndarray]:
        state = {path: t.data.copy() for path, t in self._params.items()}
        state.update({path: b.copy() for path, b in self._buffers.items()})
        return state

    def restore(self, state: Dict[str, np.ndarray]) -> None:
        for path, value in state.items():
            if path in self._params:
                self._params[path].data[...] = value
            elif path in self._buffers:
                self._buffers[path][...] = value
            else:
                raise KeyError(f"Snapshot holds unknown path: {path}")
        self.bump()

    # -- checkpoints -------------------------------------------------------

    def save(self, directory: str) -> Path:
        """Write manifest.json plus one little-endian payload with per-tensor offsets."""
        target = Path(directory)
        target.mkdir(parents=True, exist_ok=True)
        fmt = "<f4" if self.dtype == np.float32 else "<f8"
        entries = []
        offset = 0
        with open(target / CHECKPOINT_PAYLOAD, "wb") as payload:
            for kind, path, array in self._entries():
                raw = np.ascontiguousarray(array, dtype=fmt).tobytes()
                payload.write(raw)
                entries.append({"path": path, "kind": kind, "shape": list(array.shape),
                                "offset": offset, "nbytes": len(raw)})
                offset += len(raw)
        manifest = {
            "precision": 32 if self.dtype == np.float32 else 64,
            "global_step": self.step,
            "tensors": entries,
        }
        with open(target / CHECKPOINT_MANIFEST, "w", encoding="utf-8") as f:
            json.dump(manifest, f, indent=2)
        logger.info(f"Checkpoint with {len(entries)} tensors written to {target}")
        return target

    def load(self, directory: str) -> None:
        """Load values saved by ``save`` into already-registered paths."""
        source = Path(directory)
        with open(source / CHECKPOINT_MANIFEST, "r", encoding="utf-8") as f:
            manifest = json.load(f)
        fmt = "<f4" if manifest["precision"] == 32 else "<f8"
        payload = (source / CHECKPOINT_PAYLOAD).read_bytes()
        for entry in manifest["tensors"]:
            start, stop = entry["offset"], entry["offset"] + entry["nbytes"]
            if stop > len(payload):
                raise ValueError(f"Checkpoint payload truncated at tensor {entry['path']} (offset {start})")
            value = np.frombuffer(payload[start:stop], dtype=fmt).reshape(entry["shape"])
            path = entry["path"]
            if path in self._params:
                if self._params[path].shape != tuple(entry["shape"]):
                    raise ValueError(f"Shape mismatch for {path}: {self._params[path].shape} vs {entry['shape']}")
                self._params[path].data[...] = value
            elif path in self._buffers:
                self._buffers[path][...] = value
            else:
                raise KeyError(f"Checkpoint holds unknown path: {path}")
        self.step = int(manifest.get("global_step", 0))
        self.bump()
        logger.info(f"Checkpoint loaded from {source}")

    def _entries(self):
        for path in sorted(self._params):
            yield "param", path, self._params[path].data
        for path in sorted(self._buffers):
            yield "buffer", path, self._buffers[path]


def glorot(rng: np.random.Generator, fan_out: int, fan_in: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_out, fan_in))


def orthogonal(rng: np.random.Generator, size: int) -> np.ndarray:
    q, r = np.linalg.qr(rng.standard_normal((size, size)))
    return q * np.sign(np.diag(r))


def zeros(*shape: int) -> np.ndarray:
    return np.zeros(shape)


def ones(*shape: int) -> np.ndarray:
    return np.ones(shape)


def identity(size: int) -> np.ndarray:
    return np.eye(size)

