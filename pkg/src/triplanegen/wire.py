"""JSON wire encoding shared by the remote-oracle client and the guidance
server: tensors travel as base64 little-endian float32 payloads with explicit
shape arrays."""

from __future__ import annotations

import base64

import numpy as np


def encode_tensor(arr: np.ndarray) -> dict:
    # asarray keeps 0-d shapes; ascontiguousarray would promote them to 1-d
    arr = np.asarray(arr, dtype="<f4", order="C")
    return {"shape": list(arr.shape),
            "data": base64.b64encode(arr.tobytes()).decode("ascii")}


def decode_tensor(obj: dict) -> np.ndarray:
    shape = tuple(int(s) for s in obj["shape"])
    raw = base64.b64decode(obj["data"])
    n = int(np.prod(shape)) if shape else 1
    if len(raw) != 4 * n:
        raise ValueError(f"tensor payload length {len(raw)} != expected {4 * n}")
    return np.frombuffer(raw, dtype="<f4").reshape(shape).astype(np.float32)
