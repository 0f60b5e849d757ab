"""Flat named-tensor container: one raw .bin plus a JSON manifest.

The manifest lists each tensor's name, shape, dtype, byte offset, and
trainability; the .bin is the little-endian float64 buffers concatenated in
manifest order. See README for the on-disk layout.
"""

from __future__ import annotations

import json
import os

import numpy as np

from .numerics import Tensor

DTYPE = "<f8"


def save(params: dict[str, Tensor], prefix: str, extra: dict | None = None) -> None:
    names = sorted(params)
    manifest = {"format": "dmslab-flat-v1", "dtype": DTYPE, "tensors": [], "extra": extra or {}}
    offset = 0
    with open(prefix + ".bin", "wb") as f:
        for name in names:
            t = params[name]
            buf = np.ascontiguousarray(t.data, dtype=DTYPE).tobytes()
            f.write(buf)
            manifest["tensors"].append(
                {
                    "name": name,
                    "shape": list(t.shape),
                    "offset": offset,
                    "nbytes": len(buf),
                    "requires_grad": t.requires_grad,
                }
            )
            offset += len(buf)
    with open(prefix + ".manifest.json", "w") as f:
        json.dump(manifest, f, sort_keys=True, indent=1)
        f.write("\n")


def load(prefix: str) -> tuple[dict[str, Tensor], dict]:
    with open(prefix + ".manifest.json") as f:
        manifest = json.load(f)
    raw = open(prefix + ".bin", "rb").read()
    params: dict[str, Tensor] = {}
    for entry in manifest["tensors"]:
        a = np.frombuffer(
            raw, dtype=DTYPE, count=entry["nbytes"] // 8, offset=entry["offset"]
        ).reshape(entry["shape"])
        params[entry["name"]] = Tensor(a.copy(), requires_grad=entry["requires_grad"])
    return params, manifest.get("extra", {})


def exists(prefix: str) -> bool:
    return os.path.exists(prefix + ".bin") and os.path.exists(prefix + ".manifest.json")
