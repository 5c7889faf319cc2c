"""Flat named-parameter archives: ``<name>.bin`` holds the raw little-endian
tensors back to back, ``<name>.json`` lists name, dtype, shape and offset
plus any config stored alongside."""

from __future__ import annotations

import json
from pathlib import Path
from typing import Any, Optional

import numpy as np
import torch

_DTYPES = {torch.float32: "<f4", torch.float64: "<f8", torch.int64: "<i8", torch.bool: "|b1"}


def save_params(path: str | Path, state: dict[str, torch.Tensor], config: Optional[dict] = None) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    entries = []
    offset = 0
    with open(path.with_suffix(".bin"), "wb") as fh:
        for name, tensor in state.items():
            t = tensor.detach().cpu()
            if t.dtype not in _DTYPES:
                raise TypeError(f"unsupported dtype {t.dtype} for {name}")
            raw = np.ascontiguousarray(t.numpy(), dtype=_DTYPES[t.dtype]).tobytes()
            fh.write(raw)
            entries.append({"name": name, "dtype": _DTYPES[t.dtype], "shape": list(t.shape), "offset": offset, "nbytes": len(raw)})
            offset += len(raw)
    manifest = {"tensors": entries, "total_bytes": offset, "config": config or {}}
    path.with_suffix(".json").write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")


def load_manifest(path: str | Path) -> dict[str, Any]:
    return json.loads(Path(path).with_suffix(".json").read_text())


def load_params(path: str | Path) -> dict[str, torch.Tensor]:
    path = Path(path)
    manifest = load_manifest(path)
    raw = path.with_suffix(".bin").read_bytes()
    if len(raw) != manifest["total_bytes"]:
        raise ValueError(f"{path.with_suffix('.bin')}: expected {manifest['total_bytes']} bytes, found {len(raw)}")
    out = {}
    for e in manifest["tensors"]:
        arr = np.frombuffer(raw, dtype=e["dtype"], count=int(np.prod(e["shape"], dtype=np.int64)), offset=e["offset"])
        out[e["name"]] = torch.from_numpy(arr.reshape(e["shape"]).copy())
    return out
