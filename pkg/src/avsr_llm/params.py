"""Named parameter registry with per-parameter trainable/frozen flags.

Base weights of the encoders and the language model are registered as
*locked*: they can never be made trainable.  The trainable set in the default
configuration is therefore exactly the projector and LoRA parameters.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator

import numpy as np

from .autograd import Tensor, get_default_dtype

CHECKPOINT_FORMAT = "avsr-llm-checkpoint/1"


class FreezePolicyError(RuntimeError):
    """Attempt to train or update a parameter the freeze policy protects."""


@dataclass
class Entry:
    tensor: Tensor
    trainable: bool
    locked: bool


class ParamStore:
    def __init__(self) -> None:
        self._entries: dict[str, Entry] = {}
        # bumped on every in-place parameter change; decode caches check it
        self.version = 0

    def add(self, name: str, data, trainable: bool = False, locked: bool = False) -> Tensor:
        if name in self._entries:
            raise KeyError(f"duplicate parameter name {name!r}")
        if locked and trainable:
            raise FreezePolicyError(f"{name!r} is locked and cannot be trainable")
        t = Tensor(np.array(data, dtype=get_default_dtype()), requires_grad=trainable, name=name)
        self._entries[name] = Entry(t, trainable, locked)
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._entries[name].tensor

    def __contains__(self, name: str) -> bool:
        return name in self._entries

    def __len__(self) -> int:
        return len(self._entries)

    def __iter__(self) -> Iterator[str]:
        return iter(self._entries)

    def items(self):
        return ((k, e.tensor) for k, e in self._entries.items())

    def is_trainable(self, name: str) -> bool:
        return self._entries[name].trainable

    def is_locked(self, name: str) -> bool:
        return self._entries[name].locked

    def set_trainable(self, name: str, flag: bool) -> None:
        e = self._entries[name]
        if flag and e.locked:
            raise FreezePolicyError(f"{name!r} is a frozen base weight")
        e.trainable = flag
        e.tensor.requires_grad = flag

    def lock(self, prefix: str = "") -> None:
        """Freeze and lock every parameter whose name starts with ``prefix``."""
        for name, e in self._entries.items():
            if name.startswith(prefix):
                e.trainable = False
                e.locked = True
                e.tensor.requires_grad = False

    def trainable(self) -> dict[str, Tensor]:
        return {k: e.tensor for k, e in self._entries.items() if e.trainable}

    def frozen(self) -> dict[str, Tensor]:
        return {k: e.tensor for k, e in self._entries.items() if not e.trainable}

    def num_trainable(self) -> int:
        return sum(e.tensor.data.size for e in self._entries.values() if e.trainable)

    def zero_grad(self) -> None:
        for e in self._entries.values():
            e.tensor.grad = None

    def assign(self, name: str, data: np.ndarray) -> None:
        """Overwrite a parameter's values in place (optimizer / merge / load)."""
        t = self._entries[name].tensor
        if data.shape != t.shape:
            raise ValueError(f"{name}: shape {data.shape} != {t.shape}")
        t.data[...] = data
        self.version += 1

    def fingerprint(self, names=None) -> str:
        """SHA-256 over the raw bytes of the named (default: frozen) parameters."""
        h = hashlib.sha256()
        names = sorted(self.frozen() if names is None else names)
        for n in names:
            h.update(n.encode())
            h.update(np.ascontiguousarray(self[n].data).tobytes())
        return h.hexdigest()

    def state_dict(self, prefix: str = "") -> dict[str, np.ndarray]:
        return {k: e.tensor.data.copy() for k, e in self._entries.items() if k.startswith(prefix)}

    def load_state_dict(self, state: dict[str, np.ndarray], strict: bool = True) -> None:
        missing = [k for k in self._entries if k not in state]
        if strict and missing:
            raise KeyError(f"missing parameters: {missing[:5]}")
        for k, v in state.items():
            if k in self._entries:
                self.assign(k, np.asarray(v, dtype=self[k].dtype))
            elif strict:
                raise KeyError(f"unexpected parameter {k!r}")


def save_checkpoint(path, arrays: dict[str, np.ndarray], config: dict) -> None:
    """Write an ``.npz`` archive: one little-endian array per parameter name
    plus a JSON document under ``__config__``."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {}
    for k, v in arrays.items():
        v = np.asarray(v)
        payload[k] = v.astype(v.dtype.newbyteorder("<"), copy=False)
    meta = {"format": CHECKPOINT_FORMAT, "config": config}
    payload["__config__"] = np.frombuffer(json.dumps(meta, sort_keys=True).encode(), dtype=np.uint8)
    with open(path, "wb") as fh:
        np.savez(fh, **payload)


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict]:
    with np.load(path, allow_pickle=False) as z:
        meta = json.loads(bytes(z["__config__"]).decode())
        if meta.get("format") != CHECKPOINT_FORMAT:
            raise ValueError(f"{path}: unknown checkpoint format {meta.get('format')!r}")
        arrays = {k: z[k] for k in z.files if k != "__config__"}
    return arrays, meta["config"]
