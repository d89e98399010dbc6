"""Byte-reproducible checkpoint container: a zip of ``.npy`` arrays plus JSON metadata.

Layout: ``meta.json`` (config snapshot, step, seeds), ``params/<name>.npy`` and
``optim/<name>.npy``. Zip entries carry a fixed timestamp so identical
contents give identical bytes.
"""

from __future__ import annotations

import io
import json
import zipfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .tensor import Tensor

_EPOCH = (1980, 1, 1, 0, 0, 0)


@dataclass
class Checkpoint:
    meta: dict
    params: dict[str, np.ndarray]
    optim: dict[str, np.ndarray] = field(default_factory=dict)

    def tensors(self, trainable: set[str] | None = None) -> dict[str, Tensor]:
        """Parameters as tensors; everything not prefixed ``norm.`` is trainable by default."""
        out = {}
        for k, v in self.params.items():
            grad = (not k.startswith("norm.")) if trainable is None else k in trainable
            out[k] = Tensor(v, requires_grad=grad)
        return out


def _write_entry(zf: zipfile.ZipFile, name: str, payload: bytes) -> None:
    info = zipfile.ZipInfo(name, date_time=_EPOCH)
    info.compress_type = zipfile.ZIP_DEFLATED
    info.external_attr = 0o644 << 16
    zf.writestr(info, payload)


def _npy_bytes(arr: np.ndarray) -> bytes:
    buf = io.BytesIO()
    np.save(buf, arr, allow_pickle=False)
    return buf.getvalue()


def save_checkpoint(path: str | Path, ckpt: Checkpoint) -> None:
    with zipfile.ZipFile(path, "w") as zf:
        _write_entry(zf, "meta.json", json.dumps(ckpt.meta, sort_keys=True, indent=1).encode())
        for group, arrays in (("params", ckpt.params), ("optim", ckpt.optim)):
            for name in sorted(arrays):
                _write_entry(zf, f"{group}/{name}.npy", _npy_bytes(np.asarray(arrays[name])))


def load_checkpoint(path: str | Path) -> Checkpoint:
    params, optim = {}, {}
    with zipfile.ZipFile(path) as zf:
        try:
            meta = json.loads(zf.read("meta.json"))
        except KeyError:
            raise ValueError(f"{path}: not a checkpoint (no meta.json)") from None
        for name in zf.namelist():
            group, _, key = name.partition("/")
            if not key.endswith(".npy"):
                continue
            arr = np.load(io.BytesIO(zf.read(name)), allow_pickle=False)
            (params if group == "params" else optim)[key[:-4]] = arr
    return Checkpoint(meta, params, optim)
