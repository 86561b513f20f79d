"""Named parameter storage, Adam updates and the binary checkpoint format."""
from __future__ import annotations

import io
import os
import struct
import tempfile
from pathlib import Path

import numpy as np

from .autograd import Tensor

MAGIC = b"ACDZ"
FORMAT_VERSION = 1


class CheckpointError(ValueError):
    pass


class ParamStore:
    """Ordered collection of named parameter tensors plus Adam state.

    Shapes are fixed at creation.  ``snapshot()`` returns an independent
    copy that rollout workers may read while the trainer keeps writing.
    """

    def __init__(self):
        self._params: dict[str, Tensor] = {}
        self._m: dict[str, np.ndarray] = {}
        self._v: dict[str, np.ndarray] = {}
        self.step = 0

    def add(self, name: str, value) -> Tensor:
        if name in self._params:
            raise KeyError(f"duplicate parameter name {name!r}")
        t = Tensor(np.array(value, dtype=np.float64), requires_grad=True, name=name)
        self._params[name] = t
        self._m[name] = np.zeros_like(t.data)
        self._v[name] = np.zeros_like(t.data)
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __len__(self) -> int:
        return len(self._params)

    def names(self) -> list[str]:
        return list(self._params)

    def items(self):
        return self._params.items()

    def tensors(self) -> dict[str, Tensor]:
        return dict(self._params)

    def arrays(self) -> dict[str, np.ndarray]:
        """Raw arrays keyed by name; ops on these skip the tape entirely."""
        return {k: t.data for k, t in self._params.items()}

    def num_values(self) -> int:
        return int(np.sum([t.size for t in self._params.values()]))

    def zero_grad(self) -> None:
        for t in self._params.values():
            t.zero_grad()

    def grad_norm(self) -> float:
        return float(np.sqrt(np.sum([np.sum(t.grad ** 2) for t in self._params.values()])))

    def clip_grad_norm(self, max_norm: float) -> float:
        norm = self.grad_norm()
        if norm > max_norm:
            scale = max_norm / (norm + 1e-12)
            for t in self._params.values():
                t.grad = t.grad * scale
        return norm

    def snapshot(self) -> "ParamStore":
        other = ParamStore()
        for name, t in self._params.items():
            other.add(name, t.data.copy())
            other._m[name] = self._m[name].copy()
            other._v[name] = self._v[name].copy()
        other.step = self.step
        return other

    def load_values(self, other: "ParamStore") -> None:
        if other.names() != self.names():
            raise CheckpointError("parameter manifest mismatch")
        for name, t in self._params.items():
            src = other[name].data
            if src.shape != t.shape:
                raise CheckpointError(f"shape mismatch for {name}: {src.shape} vs {t.shape}")
            t.data = src.copy()

    # ------------------------------------------------------------ serialization

    def to_bytes(self) -> bytes:
        buf = io.BytesIO()
        buf.write(MAGIC)
        buf.write(struct.pack("<II", FORMAT_VERSION, len(self._params)))
        for name, t in self._params.items():
            raw = name.encode("utf-8")
            buf.write(struct.pack("<I", len(raw)))
            buf.write(raw)
            buf.write(struct.pack("<I", t.ndim))
            buf.write(struct.pack(f"<{t.ndim}I", *t.shape))
            buf.write(np.ascontiguousarray(t.data, dtype="<f8").tobytes())
        return buf.getvalue()

    @classmethod
    def from_bytes(cls, data: bytes) -> "ParamStore":
        if data[:4] != MAGIC:
            raise CheckpointError("not an ACDZ checkpoint (bad magic)")
        version, count = struct.unpack_from("<II", data, 4)
        if version != FORMAT_VERSION:
            raise CheckpointError(f"unsupported checkpoint version {version}")
        off = 12
        store = cls()
        for _ in range(count):
            (nlen,) = struct.unpack_from("<I", data, off)
            off += 4
            name = data[off:off + nlen].decode("utf-8")
            off += nlen
            (rank,) = struct.unpack_from("<I", data, off)
            off += 4
            dims = struct.unpack_from(f"<{rank}I", data, off)
            off += 4 * rank
            n = int(np.prod(dims)) if rank else 1
            values = np.frombuffer(data, dtype="<f8", count=n, offset=off).astype(np.float64)
            off += 8 * n
            store.add(name, values.reshape(dims))
        if off != len(data):
            raise CheckpointError("trailing bytes after last parameter")
        return store

    def save(self, path) -> None:
        """Write atomically: temp file in the target directory, then rename."""
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name, suffix=".tmp")
        with os.fdopen(fd, "wb") as fh:
            fh.write(self.to_bytes())
        os.replace(tmp, path)

    @classmethod
    def load(cls, path) -> "ParamStore":
        return cls.from_bytes(Path(path).read_bytes())


def adam_step(store: ParamStore, lr: float = 3e-4, beta1: float = 0.9,
              beta2: float = 0.999, eps: float = 1e-8) -> None:
    """Bias-corrected Adam update of every parameter from its ``grad``."""
    store.step += 1
    t = store.step
    c1 = 1.0 - beta1 ** t
    c2 = 1.0 - beta2 ** t
    for name, p in store.items():
        g = p.grad
        m = store._m[name] = beta1 * store._m[name] + (1.0 - beta1) * g
        v = store._v[name] = beta2 * store._v[name] + (1.0 - beta2) * g * g
        p.data = p.data - lr * (m / c1) / (np.sqrt(v / c2) + eps)
