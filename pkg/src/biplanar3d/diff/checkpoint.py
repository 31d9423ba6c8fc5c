"""ckv1 checkpoints: a JSON header line followed by little-endian float32 blobs.

The header lists every entry (name, shape) in blob order plus the optimizer
step and schedule. Optimizer moments are stored as extra entries prefixed
``optim.m.`` and ``optim.v.``.
"""
from __future__ import annotations

import logging
from dataclasses import asdict

import numpy as np

from ..volume import _read_record, _write_record
from .array import DiffArray
from .optim import OptimizerState, Schedule

log = logging.getLogger(__name__)


def save_checkpoint(path, params: dict[str, DiffArray], state: OptimizerState | None = None,
                    extra: dict | None = None) -> None:
    entries, blobs = [], []

    def put(name, arr):
        entries.append({"name": name, "shape": list(arr.shape)})
        blobs.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())

    for name, p in params.items():
        put(name, p.value)
    header = {"format": "ckv1", "entries": None, "step": 0, "schedule": None,
              "optimizer": None, "extra": extra or {}}
    if state is not None:
        for name in params:
            if name in state.m:
                put("optim.m." + name, state.m[name])
                put("optim.v." + name, state.v[name])
        header["step"] = state.step
        header["schedule"] = asdict(state.schedule)
        header["optimizer"] = {"weight_decay": state.weight_decay, "betas": list(state.betas),
                               "eps": state.eps}
    header["entries"] = entries
    _write_record(path, header, b"".join(blobs))


def read_checkpoint(path) -> tuple[dict[str, np.ndarray], dict]:
    header, payload = _read_record(path)
    if header.get("format") != "ckv1":
        raise ValueError(f"{path}: not a ckv1 checkpoint")
    arrays, offset = {}, 0
    for e in header["entries"]:
        n = int(np.prod(e["shape"])) if e["shape"] else 1
        arrays[e["name"]] = np.frombuffer(payload, dtype="<f4", count=n,
                                          offset=offset).reshape(e["shape"]).copy()
        offset += 4 * n
    if offset != len(payload):
        raise ValueError(f"{path}: payload size does not match header")
    return arrays, header


def load_checkpoint(path, params: dict[str, DiffArray],
                    strict: bool = True) -> OptimizerState | None:
    """Load parameter values in place; returns the optimizer state if one was saved."""
    arrays, header = read_checkpoint(path)
    missing = [n for n in params if n not in arrays]
    if strict and missing:
        raise KeyError(f"checkpoint lacks parameters: {missing[:5]}")
    for name, p in params.items():
        if name in arrays:
            if arrays[name].shape != p.shape:
                raise ValueError(f"shape mismatch for {name}: {arrays[name].shape} vs {p.shape}")
            p.value[...] = arrays[name]
    if header.get("optimizer") is None:
        return None
    opt = header["optimizer"]
    state = OptimizerState(step=header["step"], weight_decay=opt["weight_decay"],
                           betas=tuple(opt["betas"]), eps=opt["eps"],
                           schedule=Schedule(**header["schedule"]))
    for name, p in params.items():
        if "optim.m." + name in arrays:
            state.m[name] = arrays["optim.m." + name].astype(p.dtype)
            state.v[name] = arrays["optim.v." + name].astype(p.dtype)
    return state


def load_pretrained(path, params: dict[str, DiffArray]) -> list[str]:
    """Copy every checkpoint entry whose name and shape match; returns loaded names."""
    arrays, _ = read_checkpoint(path)
    loaded = []
    for name, p in params.items():
        a = arrays.get(name)
        if a is not None and a.shape == p.shape:
            p.value[...] = a
            loaded.append(name)
    log.info("loaded %d/%d parameters from %s", len(loaded), len(params), path)
    return loaded
