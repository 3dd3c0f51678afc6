"""Trainable weights of the observed, posterior and prior networks, plus checkpoint I/O.

Weights act on row vectors: a hidden state of shape ``(batch, dim)`` is multiplied
on the right by a ``(dim, out)`` matrix.

Checkpoint layout (all integers little-endian)::

    magic     8 bytes   b"IMTPPCK1"
    version   u32       currently 1
    count     u32       number of entries
    entry*    name_len u16, name (utf-8), ndim u8, dims u32 * ndim,
              then prod(dims) float64 values in C order
    meta_len  u32, meta (utf-8 JSON)
"""

from __future__ import annotations

import hashlib
import json
import math
import os
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import diffgraph as dg

MAGIC = b"IMTPPCK1"
VERSION = 1


class CheckpointError(ValueError):
    pass


@dataclass(frozen=True)
class Dims:
    n_marks: int
    obs_input: int = 16     # v
    obs_state: int = 64     # s
    miss_input: int = 32    # gamma
    miss_state: int = 128   # m


OBSERVED = "observed"
POSTERIOR = "posterior"
PRIOR = "prior"
INTENSITY = "intensity"

# posterior tensors that shape the missing-state recurrence (fine-tuned by the
# budgeted variant); the posterior output heads are not among them
MISSING_RNN = ("g_tg", "emb_y", "g_dg", "b_g", "G_mm", "G_mg", "g_mt", "b_m")

# absolute-time input weights start at zero: with normalized cumulative times
# reaching the hundreds, a unit-scale weight would saturate tanh at once
_ZERO_INIT = {"w_tv", "g_tg"}
# the intensity slope passes through relu, so it starts on the live side
_ABS_INIT = {"w_ld"}


def _layout(d: Dims, time_head: str) -> list[tuple[str, str, tuple[int, ...], int | None]]:
    """(name, group, shape, fan_in) for every tensor; fan_in None marks a bias."""
    C, V, S, G, M = d.n_marks, d.obs_input, d.obs_state, d.miss_input, d.miss_state
    rows = [
        ("w_tv", OBSERVED, (V,), 1),
        ("emb_x", OBSERVED, (C, V), C),
        ("w_td", OBSERVED, (V,), 1),
        ("a_v", OBSERVED, (V,), None),
        ("W_ss", OBSERVED, (S, S), S),
        ("W_sv", OBSERVED, (V, S), V),
        ("w_sk", OBSERVED, (S,), 1),
        ("a_s", OBSERVED, (S,), None),
    ]
    if time_head == "lognormal":
        rows += [
            ("W_ts", OBSERVED, (S, 2), S),
            ("W_tm", OBSERVED, (M, 2), M),
            ("a_t", OBSERVED, (2,), None),
        ]
    elif time_head == "intensity":
        rows += [
            ("w_ls", INTENSITY, (S,), S),
            ("w_lm", INTENSITY, (M,), M),
            ("w_ld", INTENSITY, (1,), 1),
            ("b_l", INTENSITY, (1,), None),
        ]
    else:
        raise ValueError(f"unknown time head {time_head!r}")
    rows += [
        ("U_xs", OBSERVED, (S, C), S),
        ("U_xm", OBSERVED, (M, C), M),
        ("g_tg", POSTERIOR, (G,), 1),
        ("emb_y", POSTERIOR, (C, G), C),
        ("g_dg", POSTERIOR, (G,), 1),
        ("b_g", POSTERIOR, (G,), None),
        ("G_mm", POSTERIOR, (M, M), M),
        ("G_mg", POSTERIOR, (G, M), G),
        ("g_mt", POSTERIOR, (M,), 1),
        ("b_m", POSTERIOR, (M,), None),
        ("G_tm", POSTERIOR, (M, 2), M),
        ("G_ts", POSTERIOR, (S, 2), S),
        ("b_t", POSTERIOR, (2,), None),
        ("V_ys", POSTERIOR, (S, C), S),
        ("V_ym", POSTERIOR, (M, C), M),
        ("q_mm", PRIOR, (M, 2), M),
        ("q_ms", PRIOR, (S, 2), S),
        ("c", PRIOR, (2,), None),
        ("Q_ys", PRIOR, (S, C), S),
        ("Q_ym", PRIOR, (M, C), M),
    ]
    return rows


class ParameterStore:
    """Named tensors with gradient slots, grouped by network."""

    def __init__(self, dims: Dims, time_head: str = "lognormal", mu_bar: float = 1.0,
                 meta: dict | None = None):
        self.dims = dims
        self.time_head = time_head
        self.mu_bar = float(mu_bar)
        self.meta = dict(meta or {})
        self.tensors: dict[str, dg.Tensor] = {}
        self.groups: dict[str, str] = {}
        self.frozen: set[str] = set()
        for name, group, shape, _ in _layout(dims, time_head):
            self.tensors[name] = dg.tensor(np.zeros(shape), name=name)
            self.groups[name] = group

    @classmethod
    def initialize(cls, dims: Dims, gen: np.random.Generator, time_head: str = "lognormal",
                   mu_bar: float = 1.0, meta: dict | None = None) -> "ParameterStore":
        """Weights uniform on +-1/sqrt(fan_in), biases zero."""
        store = cls(dims, time_head, mu_bar, meta)
        for name, _, shape, fan_in in _layout(dims, time_head):
            if fan_in is None or name in _ZERO_INIT:
                continue
            bound = 1.0 / math.sqrt(fan_in)
            draw = gen.uniform(-bound, bound, size=shape)
            store.tensors[name].value[...] = np.abs(draw) if name in _ABS_INIT else draw
        return store

    def __getitem__(self, name: str) -> dg.Tensor:
        return self.tensors[name]

    def __contains__(self, name: str) -> bool:
        return name in self.tensors

    def names(self, groups=None) -> list[str]:
        if groups is None:
            return list(self.tensors)
        if isinstance(groups, str):
            groups = (groups,)
        return [n for n in self.tensors if self.groups[n] in groups]

    def params(self, names=None) -> list[dg.Tensor]:
        """Trainable tensors in registration order (which fixes the update order)."""
        names = self.names() if names is None else names
        return [self.tensors[n] for n in names if n not in self.frozen]

    def zero_grad(self) -> None:
        for t in self.tensors.values():
            t.zero_grad()

    def copy(self) -> "ParameterStore":
        out = ParameterStore(self.dims, self.time_head, self.mu_bar, self.meta)
        for n, t in self.tensors.items():
            out.tensors[n].value[...] = t.value
        out.frozen = set(self.frozen)
        return out

    def values(self) -> dict[str, np.ndarray]:
        return {n: t.value.copy() for n, t in self.tensors.items()}

    def load_values(self, values: dict[str, np.ndarray]) -> None:
        for n, t in self.tensors.items():
            if n not in values:
                raise CheckpointError(f"missing tensor {n!r}")
            v = np.asarray(values[n], dtype=np.float64)
            if v.shape != t.shape:
                raise CheckpointError(f"tensor {n!r} has shape {v.shape}, expected {t.shape}")
            t.value[...] = v

    def digest(self) -> str:
        h = hashlib.sha256()
        for n, t in self.tensors.items():
            h.update(n.encode())
            h.update(np.ascontiguousarray(t.value).tobytes())
        return h.hexdigest()

    def all_finite(self) -> bool:
        return all(np.all(np.isfinite(t.value)) for t in self.tensors.values())


# -- checkpoint I/O ---------------------------------------------------------------------

def save(store: ParameterStore, path) -> None:
    meta = dict(store.meta)
    meta.update(n_marks=store.dims.n_marks, time_head=store.time_head, mu_bar=store.mu_bar,
                dims=[store.dims.obs_input, store.dims.obs_state,
                      store.dims.miss_input, store.dims.miss_state])
    parts = [MAGIC, struct.pack("<II", VERSION, len(store.tensors))]
    for name, t in store.tensors.items():
        raw = name.encode("utf-8")
        parts.append(struct.pack("<H", len(raw)) + raw)
        parts.append(struct.pack("<B", t.value.ndim) + struct.pack(f"<{t.value.ndim}I", *t.value.shape))
        parts.append(np.ascontiguousarray(t.value, dtype="<f8").tobytes())
    blob = json.dumps(meta, sort_keys=True).encode("utf-8")
    parts.append(struct.pack("<I", len(blob)) + blob)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(b"".join(parts))
    os.replace(tmp, path)


def load(path) -> ParameterStore:
    data = Path(path).read_bytes()
    if data[:8] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file")
    pos = 8

    def read(fmt):
        nonlocal pos
        size = struct.calcsize(fmt)
        if pos + size > len(data):
            raise CheckpointError(f"{path}: truncated")
        out = struct.unpack_from(fmt, data, pos)
        pos += size
        return out

    version, count = read("<II")
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported version {version}")
    values = {}
    for _ in range(count):
        (nlen,) = read("<H")
        name = data[pos:pos + nlen].decode("utf-8")
        pos += nlen
        (ndim,) = read("<B")
        shape = read(f"<{ndim}I") if ndim else ()
        n = int(np.prod(shape)) if shape else 1
        if pos + 8 * n > len(data):
            raise CheckpointError(f"{path}: truncated")
        values[name] = np.frombuffer(data, dtype="<f8", count=n, offset=pos).reshape(shape).astype(np.float64)
        pos += 8 * n
    (mlen,) = read("<I")
    meta = json.loads(data[pos:pos + mlen].decode("utf-8"))
    v, s, g, m = meta.pop("dims")
    dims = Dims(meta.pop("n_marks"), v, s, g, m)
    store = ParameterStore(dims, meta.pop("time_head"), meta.pop("mu_bar"), meta)
    store.load_values(values)
    return store
