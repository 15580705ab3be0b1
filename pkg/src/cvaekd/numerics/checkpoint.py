"""JSON checkpoint container shared by the model and the teacher.

Layout::

    {"version": 1, "config": {...}, "params": [{"name", "shape", "data"}],
     "adam": {"m": [...], "v": [...], "t": int, ...} | null, ...extra keys}

Floats go through ``repr`` so values round-trip bit-exactly.
"""
from __future__ import annotations

import json
import os
from pathlib import Path
from typing import Any, Mapping

import numpy as np

from .optim import AdamState
from .tensor import Tensor

FORMAT_VERSION = 1


def encode_params(params: Mapping[str, Tensor]) -> list[dict]:
    return [
        {"name": name, "shape": list(t.shape), "data": t.data.reshape(-1).tolist()}
        for name, t in params.items()
    ]


def decode_params(entries: list[dict]) -> dict[str, np.ndarray]:
    out = {}
    for e in entries:
        arr = np.asarray(e["data"], dtype=np.float64)
        out[e["name"]] = arr.reshape(e["shape"])
    return out


def encode_adam(state: AdamState | None) -> dict | None:
    if state is None:
        return None
    return {
        "t": state.t,
        "lr": state.lr,
        "beta1": state.beta1,
        "beta2": state.beta2,
        "eps": state.eps,
        "m": [m.reshape(-1).tolist() for m in state.m],
        "v": [v.reshape(-1).tolist() for v in state.v],
    }


def decode_adam(blob: dict | None, shapes: list[tuple[int, ...]]) -> AdamState | None:
    if blob is None:
        return None
    st = AdamState(lr=blob["lr"], beta1=blob["beta1"], beta2=blob["beta2"], eps=blob["eps"], t=blob["t"])
    if blob["m"]:
        st.m = [np.asarray(m, dtype=np.float64).reshape(s) for m, s in zip(blob["m"], shapes)]
        st.v = [np.asarray(v, dtype=np.float64).reshape(s) for v, s in zip(blob["v"], shapes)]
    return st


def write_json(path: str | os.PathLike, payload: Mapping[str, Any]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "w", encoding="utf-8") as fh:
        json.dump({"version": FORMAT_VERSION, **payload}, fh, separators=(",", ":"))
    os.replace(tmp, path)


def read_json(path: str | os.PathLike) -> dict:
    with open(path, encoding="utf-8") as fh:
        blob = json.load(fh)
    if blob.get("version") != FORMAT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {blob.get('version')!r}")
    return blob
