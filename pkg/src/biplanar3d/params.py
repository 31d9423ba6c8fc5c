"""Named parameter specifications and their initialisation.

Networks describe their weights as an ordered mapping ``name -> ParamSpec``
first, so parameter counts never need the weights in memory.
"""
from __future__ import annotations

from typing import NamedTuple

import numpy as np

from .diff.array import DiffArray, default_dtype


class ParamSpec(NamedTuple):
    shape: tuple[int, ...]
    init: str  # "trunc" | "conv" | "zeros" | "ones"


def linear_specs(specs: dict, name: str, n_in: int, n_out: int, bias: bool = True) -> None:
    specs[f"{name}.w"] = ParamSpec((n_in, n_out), "trunc")
    if bias:
        specs[f"{name}.b"] = ParamSpec((n_out,), "zeros")


def norm_specs(specs: dict, name: str, n: int) -> None:
    specs[f"{name}.g"] = ParamSpec((n,), "ones")
    specs[f"{name}.b"] = ParamSpec((n,), "zeros")


def count(specs: dict[str, ParamSpec]) -> int:
    return int(sum(int(np.prod(s.shape)) for s in specs.values()))


def _trunc_normal(rng: np.random.Generator, shape, std: float) -> np.ndarray:
    out = rng.standard_normal(shape)
    bad = np.abs(out) > 2.0
    while bad.any():
        out[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(out) > 2.0
    return out * std


def materialize(specs: dict[str, ParamSpec], seed: int = 0) -> dict[str, DiffArray]:
    """Create parameters in spec order; each name gets its own seeded stream."""
    dtype = default_dtype()
    params = {}
    for i, (name, spec) in enumerate(specs.items()):
        rng = np.random.default_rng([seed, i])
        if spec.init == "zeros":
            v = np.zeros(spec.shape)
        elif spec.init == "ones":
            v = np.ones(spec.shape)
        elif spec.init == "trunc":
            v = _trunc_normal(rng, spec.shape, 0.02)
        elif spec.init == "conv":
            fan_in = int(np.prod(spec.shape[:-1]))
            v = rng.standard_normal(spec.shape) * np.sqrt(2.0 / fan_in)
        else:
            raise ValueError(f"unknown init {spec.init!r} for {name}")
        params[name] = DiffArray(v.astype(dtype), True, name)
    return params
