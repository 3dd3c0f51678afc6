"""Multivariate Hawkes simulation and synthetic deletion of events.

``simulate`` draws sequences by Ogata thinning. ``simulate_cluster`` draws the same
process through its branching (immigrant/offspring) construction; it is linear in
the number of events, which makes long burn-ins affordable, so it serves for
long-run rate checks and as an independent cross-check of the thinning sampler.

Kernel ``kernels[i][j]`` is the excitation that an event in dimension ``j`` adds to
the intensity of dimension ``i``.
"""

from __future__ import annotations

import json
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import integrate

from .core import Dataset, Event, Sequence

log = logging.getLogger(__name__)

MAX_CANDIDATES = 1_000_000
# mean sequence length is about 132 from an empty start at this horizon (pilot runs)
DEFAULT_HORIZON = 155.0


class RunawayIntensity(RuntimeError):
    pass


@dataclass(frozen=True)
class KernelSpec:
    """One excitation kernel ``rho(t)`` for ``t >= 0``.

    kinds and parameters:
      zero          -
      power_law     a, c, p      a * (c + t)^-p           (p > 1)
      exponential   a, b         a * exp(-b t)
      exp_mixture   a1, b1, a2, b2
      sine          scale, horizon   scale * max(0, sin t) on [0, horizon]
    """

    kind: str
    params: tuple[float, ...] = ()

    def __post_init__(self):
        need = {"zero": 0, "power_law": 3, "exponential": 2, "exp_mixture": 4, "sine": 2}
        if self.kind not in need:
            raise ValueError(f"unknown kernel kind {self.kind!r}")
        if len(self.params) != need[self.kind]:
            raise ValueError(f"{self.kind} kernel takes {need[self.kind]} parameters")
        if any(x < 0 for x in self.params):
            raise ValueError("kernel parameters must be nonnegative")
        if self.kind == "power_law" and self.params[2] <= 1:
            raise ValueError("power-law exponent must exceed 1 for integrability")

    def __call__(self, t) -> np.ndarray:
        t = np.asarray(t, dtype=np.float64)
        k, q = self.kind, self.params
        if k == "zero":
            return np.zeros_like(t)
        if k == "power_law":
            return np.where(t >= 0, q[0] * np.power(q[1] + np.maximum(t, 0.0), -q[2]), 0.0)
        if k == "exponential":
            return np.where(t >= 0, q[0] * np.exp(-q[1] * np.maximum(t, 0.0)), 0.0)
        if k == "exp_mixture":
            tt = np.maximum(t, 0.0)
            return np.where(t >= 0, q[0] * np.exp(-q[1] * tt) + q[2] * np.exp(-q[3] * tt), 0.0)
        return np.where((t >= 0) & (t <= q[1]), q[0] * np.maximum(np.sin(t), 0.0), 0.0)

    def envelope(self, elapsed) -> np.ndarray:
        """An upper bound on ``rho(s)`` for every ``s >= elapsed``."""
        if self.kind == "sine":
            e = np.asarray(elapsed, dtype=np.float64)
            return np.where(e < self.params[1], self.params[0], 0.0)
        # the other kinds are non-increasing
        return self(elapsed)

    def integral(self) -> float:
        """Total mass by adaptive quadrature."""
        if self.kind == "zero":
            return 0.0
        if self.kind == "sine":
            h = self.params[1]
            breaks = [math.pi * k for k in range(1, int(h // math.pi) + 1) if math.pi * k < h]
            return integrate.quad(self, 0.0, h, points=breaks or None, limit=200)[0]
        return integrate.quad(self, 0.0, np.inf, limit=500, epsabs=1e-13, epsrel=1e-12)[0]

    def integral_closed(self) -> float:
        """Total mass in closed form."""
        k, q = self.kind, self.params
        if k == "zero":
            return 0.0
        if k == "power_law":
            return q[0] * q[1] ** (1 - q[2]) / (q[2] - 1)
        if k == "exponential":
            return q[0] / q[1]
        if k == "exp_mixture":
            return q[0] / q[1] + q[2] / q[3]
        h = q[1]
        full, rest = divmod(h, 2 * math.pi)
        # positive lobes of sin: 2 per full period, plus the part of [0, rest] inside [0, pi]
        return q[0] * (2.0 * full + (1.0 - math.cos(min(rest, math.pi))))

    def sample_delay(self, n: int, gen: np.random.Generator) -> np.ndarray:
        """Draws from the normalized kernel ``rho / integral`` (inverse CDF)."""
        k, q = self.kind, self.params
        u = gen.random(n)
        if k == "power_law":
            return q[1] * ((1.0 - u) ** (-1.0 / (q[2] - 1.0)) - 1.0)
        if k == "exponential":
            return -np.log1p(-u) / q[1]
        if k == "exp_mixture":
            w1 = (q[0] / q[1]) / (q[0] / q[1] + q[2] / q[3])
            rate = np.where(gen.random(n) < w1, q[1], q[3])
            return -np.log1p(-u) / rate
        if k == "sine":
            if q[1] > 2 * math.pi:
                raise NotImplementedError("delay sampling supports sine horizons up to one period")
            return np.arccos(1.0 - u * (1.0 - math.cos(min(q[1], math.pi))))
        raise ValueError("zero kernel has no delay distribution")


@dataclass(frozen=True)
class HawkesSpec:
    mu: tuple[float, ...]
    kernels: tuple[tuple[KernelSpec, ...], ...]
    horizon: float = DEFAULT_HORIZON
    n_sequences: int = 4000
    marks: tuple[str, ...] = ()

    def __post_init__(self):
        d = len(self.mu)
        if any(m < 0 for m in self.mu):
            raise ValueError("base rates must be nonnegative")
        if len(self.kernels) != d or any(len(row) != d for row in self.kernels):
            raise ValueError("kernel matrix must be d x d")
        if self.horizon <= 0:
            raise ValueError("horizon must be positive")
        if not self.marks:
            object.__setattr__(self, "marks", tuple(str(i + 1) for i in range(d)))
        rho = spectral_radius(self)
        if rho >= 1:
            log.warning("kernel-integral spectral radius %.4f >= 1: the process is not stationary", rho)

    @property
    def dim(self) -> int:
        return len(self.mu)


def benchmark_kernels() -> tuple[tuple[KernelSpec, ...], ...]:
    return (
        (KernelSpec("power_law", (0.2, 0.5, 1.3)), KernelSpec("exponential", (0.03, 0.3))),
        (KernelSpec("exp_mixture", (0.05, 0.2, 0.16, 0.8)), KernelSpec("sine", (1.0 / 8.0, 4.0))),
    )


def default_spec(horizon: float = DEFAULT_HORIZON, n_sequences: int = 4000) -> HawkesSpec:
    """The two-dimensional benchmark process with base rates (0.1, 0.2)."""
    return HawkesSpec((0.1, 0.2), benchmark_kernels(), horizon, n_sequences)


def integral_matrix(spec: HawkesSpec, closed: bool = False) -> np.ndarray:
    f = (lambda k: k.integral_closed()) if closed else (lambda k: k.integral())
    return np.array([[f(k) for k in row] for row in spec.kernels])


def spectral_radius(spec: HawkesSpec) -> float:
    return float(np.max(np.abs(np.linalg.eigvals(integral_matrix(spec, closed=True)))))


def stationary_rates(spec: HawkesSpec) -> np.ndarray:
    """Long-run rates (I - G)^-1 mu from the quadrature kernel integrals."""
    G = integral_matrix(spec)
    return np.linalg.solve(np.eye(spec.dim) - G, np.asarray(spec.mu))


def intensity(spec: HawkesSpec, times, dims, t: float, i: int) -> float:
    """lambda_i(t) = mu_i + sum over past events of rho_{i, dim}(t - time)."""
    times = np.asarray(times, dtype=np.float64)
    dims = np.asarray(dims, dtype=np.intp)
    past = times < t
    out = spec.mu[i]
    for j in range(spec.dim):
        sel = past & (dims == j)
        if sel.any():
            out += float(spec.kernels[i][j](t - times[sel]).sum())
    return out


# -- Ogata thinning -----------------------------------------------------------------------

def simulate_sequence(spec: HawkesSpec, gen: np.random.Generator, horizon: float | None = None,
                      max_candidates: int = MAX_CANDIDATES) -> tuple[np.ndarray, np.ndarray]:
    """One realization on [0, horizon] from an empty history; returns (times, dims)."""
    T = spec.horizon if horizon is None else horizon
    d = spec.dim
    mu = np.asarray(spec.mu, dtype=np.float64)
    times: list[list[float]] = [[] for _ in range(d)]
    arr = [np.empty(0) for _ in range(d)]
    out_t: list[float] = []
    out_d: list[int] = []
    t = 0.0
    candidates = 0
    while True:
        bound = mu.sum()
        for j in range(d):
            if arr[j].size:
                el = t - arr[j]
                for i in range(d):
                    bound += float(spec.kernels[i][j].envelope(el).sum())
        if bound <= 0:
            break
        t += gen.exponential(1.0 / bound)
        if t > T:
            break
        candidates += 1
        if candidates > max_candidates:
            raise RunawayIntensity(f"more than {max_candidates} candidate points")
        lam = mu.copy()
        for j in range(d):
            if arr[j].size:
                el = t - arr[j]
                for i in range(d):
                    lam[i] += float(spec.kernels[i][j](el).sum())
        total = lam.sum()
        if total > bound * (1 + 1e-12):
            raise AssertionError("thinning envelope below the intensity")
        if gen.random() * bound <= total:
            i = int(np.searchsorted(np.cumsum(lam), gen.random() * total, side="right"))
            i = min(i, d - 1)
            times[i].append(t)
            arr[i] = np.asarray(times[i])
            out_t.append(t)
            out_d.append(i)
    return np.asarray(out_t), np.asarray(out_d, dtype=np.intp)


def _simulate_one(args):
    spec, seed, horizon = args
    try:
        return simulate_sequence(spec, np.random.default_rng(seed), horizon)
    except RunawayIntensity as exc:
        log.warning("sequence aborted: %s", exc)
        return None


def simulate(spec: HawkesSpec, gen: np.random.Generator, workers: int = 1) -> Dataset:
    """``spec.n_sequences`` independent realizations; each gets its own child seed."""
    seeds = gen.integers(0, 2**63 - 1, size=spec.n_sequences)
    jobs = [(spec, int(s), spec.horizon) for s in seeds]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_simulate_one, jobs, chunksize=16))
    else:
        results = [_simulate_one(j) for j in jobs]
    seqs = []
    width = len(str(spec.n_sequences))
    for n, res in enumerate(results):
        if res is None or res[0].size == 0:
            continue
        t, dims = res
        seqs.append(Sequence(f"seq{n:0{width}d}", tuple(Event(spec.marks[i], float(x)) for x, i in zip(t, dims))))
    skipped = spec.n_sequences - len(seqs)
    if skipped:
        log.warning("%d simulated sequences were empty or aborted", skipped)
    present = {e.mark for s in seqs for e in s.events}
    return Dataset(tuple(seqs), tuple(m for m in spec.marks if m in present))


# -- branching construction ---------------------------------------------------------------

def simulate_cluster(spec: HawkesSpec, gen: np.random.Generator, horizon: float | None = None,
                     burn_in: float = 0.0) -> tuple[np.ndarray, np.ndarray]:
    """One realization on [0, horizon] via immigrants and offspring generations.

    Immigrants arrive on [-burn_in, horizon]; the events before 0 act as history
    and are dropped. Returns (times, dims) sorted by time.
    """
    T = spec.horizon if horizon is None else horizon
    d = spec.dim
    G = integral_matrix(spec, closed=True)
    cur_t, cur_d = [], []
    for j in range(d):
        n = gen.poisson(spec.mu[j] * (burn_in + T))
        cur_t.append(gen.uniform(-burn_in, T, n))
        cur_d.append(np.full(n, j, dtype=np.intp))
    cur_t, cur_d = np.concatenate(cur_t), np.concatenate(cur_d)
    keep_t, keep_d = [], []
    while cur_t.size:
        inside = cur_t >= 0
        keep_t.append(cur_t[inside])
        keep_d.append(cur_d[inside])
        nt, nd = [], []
        for j in range(d):
            parents = cur_t[cur_d == j]
            for i in range(d):
                if G[i, j] == 0 or parents.size == 0:
                    continue
                kids = gen.poisson(G[i, j], parents.size)
                total = int(kids.sum())
                if total == 0:
                    continue
                ct = np.repeat(parents, kids) + spec.kernels[i][j].sample_delay(total, gen)
                ct = ct[ct <= T]
                nt.append(ct)
                nd.append(np.full(ct.size, i, dtype=np.intp))
        cur_t = np.concatenate(nt) if nt else np.empty(0)
        cur_d = np.concatenate(nd) if nd else np.empty(0, dtype=np.intp)
    t = np.concatenate(keep_t)
    dims = np.concatenate(keep_d)
    order = np.argsort(t, kind="stable")
    return t[order], dims[order]


# -- deletion ------------------------------------------------------------------------------

@dataclass(frozen=True)
class DeletionMask:
    """Per sequence, the deleted event indices and the fraction that was targeted."""

    target: float
    jitter: float
    seed: int
    deleted: dict = field(default_factory=dict)      # seq_id -> tuple of indices
    fractions: dict = field(default_factory=dict)    # seq_id -> per-sequence fraction

    def retained(self, seq_id: str, n: int) -> tuple[int, ...]:
        gone = set(self.deleted.get(seq_id, ()))
        return tuple(i for i in range(n) if i not in gone)


def make_deletion_mask(d: Dataset, fraction: float, seed: int, jitter: float = 0.05,
                       min_retained: int = 2) -> DeletionMask:
    """Delete each event independently with a per-sequence probability drawn from
    Normal(fraction, jitter) and clipped to [0, 1). Sequences that would keep fewer
    than ``min_retained`` events are left intact."""
    if not 0.0 <= fraction < 1.0:
        raise ValueError("deletion fraction must lie in [0, 1)")
    gen = np.random.default_rng(seed)
    deleted, fractions = {}, {}
    spared = 0
    for s in d.sequences:
        f = fraction if jitter == 0 or fraction == 0 else float(np.clip(gen.normal(fraction, jitter), 0.0, 1.0 - 1e-12))
        drop = gen.random(len(s)) < f
        if len(s) - int(drop.sum()) < min_retained:
            drop[:] = False
            spared += 1
        deleted[s.id] = tuple(int(i) for i in np.flatnonzero(drop))
        fractions[s.id] = f
    if spared:
        log.warning("%d sequences too short to delete from; left intact", spared)
    return DeletionMask(fraction, jitter, seed, deleted, fractions)


def apply_deletion(d: Dataset, mask: DeletionMask) -> tuple[Dataset, Dataset]:
    """Partition every sequence into (observed, held-out) events, both time-ordered."""
    obs, held = [], []
    for s in d.sequences:
        gone = set(mask.deleted.get(s.id, ()))
        kept = tuple(e for i, e in enumerate(s.events) if i not in gone)
        lost = tuple(e for i, e in enumerate(s.events) if i in gone)
        if len(kept) + len(lost) != len(s):
            raise AssertionError("deletion is not a partition")
        obs.append(Sequence(s.id, kept, s.offset))
        if lost:
            held.append(Sequence(s.id, lost, s.offset))
    return _dataset(obs, d), _dataset(held, d)


def _dataset(seqs, like: Dataset) -> Dataset:
    present = {e.mark for s in seqs for e in s.events}
    return Dataset(tuple(seqs), tuple(m for m in like.vocab if m in present), like.time_scale)


def merge(observed: Dataset, held_out: Dataset) -> Dataset:
    """Inverse of :func:`apply_deletion`."""
    held = {s.id: s for s in held_out.sequences}
    out = []
    for s in observed.sequences:
        events = list(s.events)
        if s.id in held:
            events = sorted(events + list(held[s.id].events), key=lambda e: e.time)
        out.append(Sequence(s.id, tuple(events), s.offset))
    vocab = tuple(dict.fromkeys(observed.vocab + held_out.vocab))
    present = {e.mark for s in out for e in s.events}
    return Dataset(tuple(out), tuple(m for m in vocab if m in present), observed.time_scale)


def save_mask(mask: DeletionMask, path) -> None:
    with Path(path).open("w", encoding="utf-8") as fh:
        fh.write(json.dumps({"target": mask.target, "jitter": mask.jitter, "seed": mask.seed}) + "\n")
        for sid, idx in mask.deleted.items():
            fh.write(json.dumps({"seq_id": sid, "fraction": mask.fractions.get(sid), "deleted": list(idx)}) + "\n")


def load_mask(path) -> DeletionMask:
    with Path(path).open("r", encoding="utf-8") as fh:
        head = json.loads(fh.readline())
        deleted, fractions = {}, {}
        for line in fh:
            if line.strip():
                rec = json.loads(line)
                deleted[rec["seq_id"]] = tuple(rec["deleted"])
                fractions[rec["seq_id"]] = rec["fraction"]
    return DeletionMask(head["target"], head["jitter"], head["seed"], deleted, fractions)
