"""Observed-event network: input embedding, recurrent state and next-event heads.

All functions are batched over rows. Times and gaps are arrays of shape ``(B,)``
(or Tensors when they come from reparameterized samples), marks are integer ids
and states are Tensors of shape ``(B, dim)``.

Two time heads are supported. The default emits a log-normal inter-arrival
density. The ``intensity`` head uses an intensity ``exp(b + w * gap)`` that grows
exponentially in the elapsed time, with density
``exp(b + w*gap - e^b * expm1(w*gap) / w)``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Any

import numpy as np
from scipy import special

from . import diffgraph as dg
from .core import Dataset, Sequence
from .distributions import (LogNormalParams, MarkDistribution, categorical_logpmf,
                            lognormal_logpdf, lognormal_mean, lognormal_median, sigma_from_raw)
from .params import ParameterStore

SLOPE_FLOOR = 1e-6


@dataclass(frozen=True)
class IntensityParams:
    base: Any     # log intensity at the start of the gap, shape (B,)
    slope: Any    # growth rate w > 0, shape (1,)


@dataclass
class Batch:
    """Padded sequences. Padding repeats unit gaps after the last event so every
    gap stays positive; padded positions are never scored."""

    times: np.ndarray      # (B, L) float
    marks: np.ndarray      # (B, L) int
    lengths: np.ndarray    # (B,) int
    ids: list[str]

    @property
    def size(self) -> int:
        return self.times.shape[0]

    @property
    def width(self) -> int:
        return self.times.shape[1]


def pack(d: Dataset, sequences: list[Sequence], width: int | None = None) -> Batch:
    lengths = np.array([len(s) for s in sequences], dtype=np.intp)
    L = int(lengths.max()) if width is None else width
    times = np.zeros((len(sequences), L))
    marks = np.zeros((len(sequences), L), dtype=np.intp)
    for b, s in enumerate(sequences):
        n = min(len(s), L)
        t = s.times[:n]
        times[b, :n] = t
        if n < L:
            times[b, n:] = t[-1] + np.arange(1, L - n + 1)
        marks[b, :n] = d.mark_ids(s)[:n]
    return Batch(times, marks, lengths, [s.id for s in sequences])


def _col(x) -> dg.Tensor:
    if isinstance(x, dg.Tensor):
        return dg.reshape(x, (-1, 1))
    return dg.Tensor(np.asarray(x, dtype=np.float64).reshape(-1, 1))


def _column(t: dg.Tensor, j: int) -> dg.Tensor:
    return dg.take(t, (slice(None), j))


def zero_state(P: ParameterStore, batch: int) -> dg.Tensor:
    return dg.Tensor(np.zeros((batch, P.dims.obs_state)))


def embed_event(time, mark, gap, P: ParameterStore) -> dg.Tensor:
    """v = w_tv * t + emb_x[mark] + w_td * gap + a_v."""
    mark = np.asarray(mark, dtype=np.intp)
    if np.any((mark < 0) | (mark >= P.dims.n_marks)):
        raise KeyError("mark id outside the vocabulary")
    v = dg.add(dg.mul(_col(time), P["w_tv"]), dg.take(P["emb_x"], mark))
    return dg.add(dg.add(v, dg.mul(_col(gap), P["w_td"])), P["a_v"])


def update_state(s_prev: dg.Tensor, v: dg.Tensor, gap, P: ParameterStore) -> dg.Tensor:
    """s = tanh(s_prev W_ss + v W_sv + gap * w_sk + a_s)."""
    pre = dg.add(dg.matmul(s_prev, P["W_ss"]), dg.matmul(v, P["W_sv"]))
    pre = dg.add(dg.add(pre, dg.mul(_col(gap), P["w_sk"])), P["a_s"])
    return dg.tanh(pre)


def emit_next(s: dg.Tensor, m: dg.Tensor, P: ParameterStore):
    """Time head and mark distribution for the next observed event."""
    logits = dg.add(dg.matmul(s, P["U_xs"]), dg.matmul(m, P["U_xm"]))
    marks = MarkDistribution(logits)
    if P.time_head == "intensity":
        base = dg.add(dg.add(dg.matmul(s, P["w_ls"]), dg.matmul(m, P["w_lm"])), P["b_l"])
        slope = dg.add(dg.relu(P["w_ld"]), SLOPE_FLOOR)
        return IntensityParams(base, slope), marks
    raw = dg.add(dg.add(dg.matmul(s, P["W_ts"]), dg.matmul(m, P["W_tm"])), P["a_t"])
    return LogNormalParams(_column(raw, 0), sigma_from_raw(_column(raw, 1))), marks


# -- time-head helpers ------------------------------------------------------------------

def intensity_logpdf(gap, p: IntensityParams) -> dg.Tensor:
    wg = dg.mul(p.slope, gap)
    comp = dg.div(dg.mul(dg.exp(p.base), dg.expm1(wg)), p.slope)
    return dg.sub(dg.add(p.base, wg), comp)


def _scaled_exp1(a: np.ndarray) -> np.ndarray:
    """e^a * E1(a), switching to the asymptotic series where exp would overflow."""
    a = np.asarray(a, dtype=np.float64)
    out = np.empty_like(a)
    small = a < 50.0
    out[small] = np.exp(a[small]) * special.exp1(a[small])
    x = a[~small]
    out[~small] = (1.0 - 1.0 / x + 2.0 / x**2 - 6.0 / x**3 + 24.0 / x**4 - 120.0 / x**5) / x
    return out


def intensity_mean_gap(p: IntensityParams) -> np.ndarray:
    """E[gap] = (1/w) e^a E1(a) with a = e^b / w (integral of the survival function)."""
    w = np.asarray(p.slope.value if isinstance(p.slope, dg.Tensor) else p.slope, dtype=np.float64)
    rate0 = np.exp(p.base.value if isinstance(p.base, dg.Tensor) else p.base)
    return _scaled_exp1(rate0 / w) / w


def intensity_median_gap(p: IntensityParams) -> np.ndarray:
    w = np.asarray(p.slope.value if isinstance(p.slope, dg.Tensor) else p.slope, dtype=np.float64)
    rate0 = np.exp(p.base.value if isinstance(p.base, dg.Tensor) else p.base)
    return np.log1p(w * np.log(2.0) / rate0) / w


def time_logpdf(gap, head) -> dg.Tensor:
    if isinstance(head, IntensityParams):
        return intensity_logpdf(gap, head)
    return lognormal_logpdf(gap, head)


def point_gap(head, rule: str = "mean") -> np.ndarray:
    """Predicted inter-arrival time: distribution mean (default) or median."""
    if rule not in ("mean", "median"):
        raise ValueError(f"unknown prediction rule {rule!r}")
    if isinstance(head, IntensityParams):
        return intensity_mean_gap(head) if rule == "mean" else intensity_median_gap(head)
    out = lognormal_mean(head) if rule == "mean" else lognormal_median(head)
    return out.value


def predict_next(s: dg.Tensor, m: dg.Tensor, prev_time, P: ParameterStore,
                 rule: str = "mean") -> tuple[np.ndarray, np.ndarray]:
    """(predicted time, predicted mark id); ties in the mark argmax go to the lowest id."""
    head, marks = emit_next(s, m, P)
    t_hat = np.asarray(prev_time, dtype=np.float64) + point_gap(head, rule)
    return t_hat, np.argmax(marks.logits.value, axis=-1)


def event_logprob(s, m, gap, mark, P: ParameterStore) -> dg.Tensor:
    """log p(gap, mark | s, m) per row."""
    head, marks = emit_next(s, m, P)
    return dg.add(time_logpdf(gap, head), categorical_logpmf(marks, mark))


# -- whole-sequence likelihood ------------------------------------------------------------

def initial_state(batch: Batch, P: ParameterStore) -> dg.Tensor:
    """State after the first event; the first event's gap is measured from time 0."""
    t0 = batch.times[:, 0]
    v = embed_event(t0, batch.marks[:, 0], t0, P)
    return update_state(zero_state(P, batch.size), v, t0, P)


def observe(s: dg.Tensor, batch: Batch, j: int, P: ParameterStore) -> dg.Tensor:
    """Advance the state over event ``j``."""
    t = batch.times[:, j]
    gap = t - batch.times[:, j - 1]
    return update_state(s, embed_event(t, batch.marks[:, j], gap, P), gap, P)


def observed_loglik(batch: Batch, P: ParameterStore, start=None, stop=None,
                    s: dg.Tensor | None = None, first: int = 1, last: int | None = None):
    """Log-likelihood of events ``start..stop-1`` (per row) with no latent events.

    Processes steps ``first..last-1``; ``s`` is the state after event ``first-1``
    (computed from scratch when None). Returns (total, n_scored, state after the
    last processed event).
    """
    B = batch.size
    start = np.ones(B, dtype=np.intp) if start is None else np.asarray(start)
    stop = batch.lengths if stop is None else np.asarray(stop)
    last = int(stop.max()) if last is None else last
    if s is None:
        s = initial_state(batch, P)
    m = dg.Tensor(np.zeros((B, P.dims.miss_state)))
    terms = []
    count = 0
    for j in range(first, last):
        mask = ((j >= start) & (j < stop)).astype(np.float64)
        gap = batch.times[:, j] - batch.times[:, j - 1]
        lp = event_logprob(s, m, gap, batch.marks[:, j], P)
        terms.append(dg.sum(dg.mul(lp, mask)))
        count += int(mask.sum())
        s = observe(s, batch, j, P)
    total = dg.Tensor(0.0)
    for t in terms:
        total = dg.add(total, t)
    return total, count, s
