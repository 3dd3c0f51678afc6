"""Missing-event networks: the interval-truncated posterior and the scaled prior.

The posterior proposes latent events inside an observed interval ``(t_k, t_{k+1})``.
Each slot first decides whether the interval closes (probability ``1 - F`` where
``F`` is the head's mass below the remaining width), and otherwise draws a gap from
the head truncated to the remaining width by inverse CDF. The draw is a
differentiable function of the head's parameters, so the ELBO can be optimized
through it.

The missing state ``m`` persists across intervals of a sequence and starts at zero.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import special

from . import diffgraph as dg
from .distributions import (MASS_FLOOR, LogNormalParams, MarkDistribution, TruncatedLogNormalParams,
                            categorical_kl, categorical_logpmf, categorical_sample, lognormal_logpdf,
                            sigma_from_raw, truncated_lognormal_logpdf, truncated_lognormal_sample)
from .obs_mtpp import _col, _column, emit_next, point_gap
from .params import ParameterStore

log = logging.getLogger(__name__)

DEFAULT_CAP = 5


# -- noise ------------------------------------------------------------------------------

class NoiseStream:
    """Uniform draws for latent sampling, three per row per slot (stop, gap, mark).

    With ``record=True`` every draw is kept so a :class:`ReplayNoise` can repeat
    the exact same randomness (used to freeze noise for gradient checks).
    """

    def __init__(self, gen: np.random.Generator, record: bool = False):
        self.gen = gen
        self.recorded: list[np.ndarray] | None = [] if record else None

    def draw(self, rows: int) -> np.ndarray:
        u = self.gen.random((3, rows))
        if self.recorded is not None:
            self.recorded.append(u.copy())
        return u

    def replay(self) -> "ReplayNoise":
        if self.recorded is None:
            raise RuntimeError("stream was not recording")
        return ReplayNoise(self.recorded)


class ReplayNoise:
    def __init__(self, draws: list[np.ndarray]):
        self.draws = list(draws)
        self.pos = 0

    def draw(self, rows: int) -> np.ndarray:
        if self.pos >= len(self.draws):
            raise RuntimeError("replayed noise exhausted")
        u = self.draws[self.pos]
        if u.shape != (3, rows):
            raise RuntimeError("replayed noise does not match the requested shape")
        self.pos += 1
        return u


# -- network pieces ------------------------------------------------------------------------

def zero_state(P: ParameterStore, batch: int) -> dg.Tensor:
    return dg.Tensor(np.zeros((batch, P.dims.miss_state)))


def embed_missing(tau, mark, gap, P: ParameterStore) -> dg.Tensor:
    """gamma = g_tg * tau + emb_y[mark] + g_dg * gap + b_g."""
    mark = np.asarray(mark, dtype=np.intp)
    if np.any((mark < 0) | (mark >= P.dims.n_marks)):
        raise KeyError("mark id outside the vocabulary")
    g = dg.add(dg.mul(_col(tau), P["g_tg"]), dg.take(P["emb_y"], mark))
    return dg.add(dg.add(g, dg.mul(_col(gap), P["g_dg"])), P["b_g"])


def update_missing_state(m_prev: dg.Tensor, gamma: dg.Tensor, gap, P: ParameterStore) -> dg.Tensor:
    """m = tanh(m_prev G_mm + gamma G_mg + gap * g_mt + b_m)."""
    pre = dg.add(dg.matmul(m_prev, P["G_mm"]), dg.matmul(gamma, P["G_mg"]))
    pre = dg.add(dg.add(pre, dg.mul(_col(gap), P["g_mt"])), P["b_m"])
    return dg.tanh(pre)


def posterior_head(m: dg.Tensor, s: dg.Tensor, P: ParameterStore) -> tuple[LogNormalParams, MarkDistribution]:
    """Untruncated posterior gap law and the posterior mark distribution."""
    raw = dg.add(dg.add(dg.matmul(m, P["G_tm"]), dg.matmul(s, P["G_ts"])), P["b_t"])
    logits = dg.add(dg.matmul(s, P["V_ys"]), dg.matmul(m, P["V_ym"]))
    return LogNormalParams(_column(raw, 0), sigma_from_raw(_column(raw, 1))), MarkDistribution(logits)


def posterior_emit(m: dg.Tensor, s: dg.Tensor, last_time, t_next, P: ParameterStore):
    """Posterior gap law truncated to ``t_next - last_time``, and the mark distribution."""
    base, marks = posterior_head(m, s, P)
    upper = dg.sub(t_next, last_time)
    return TruncatedLogNormalParams(base, upper), marks


def prior_emit(m: dg.Tensor, s: dg.Tensor, P: ParameterStore) -> tuple[LogNormalParams, MarkDistribution]:
    """Prior gap law and marks; every prior tensor enters multiplied by mu_bar."""
    mu_bar = P.mu_bar
    raw = dg.add(dg.add(dg.matmul(m, P["q_mm"]), dg.matmul(s, P["q_ms"])), P["c"])
    raw = dg.scale(raw, mu_bar)
    logits = dg.scale(dg.add(dg.matmul(s, P["Q_ys"]), dg.matmul(m, P["Q_ym"])), mu_bar)
    return LogNormalParams(_column(raw, 0), sigma_from_raw(_column(raw, 1))), MarkDistribution(logits)


# -- interval sampling ----------------------------------------------------------------------

@dataclass
class SlotRecord:
    """One sampling slot across the batch (values only, for bookkeeping)."""

    accepted: np.ndarray   # (B,) bool
    times: np.ndarray      # (B,) latent times (meaningful where accepted)
    marks: np.ndarray      # (B,) mark ids
    logq: np.ndarray       # (B,) truncated gap logpdf + mark logpmf under the posterior
    logp_prior: np.ndarray  # (B,) gap logpdf + mark logpmf under the prior
    drawn: np.ndarray = None   # (B,) rows still open when this slot ran
    z_q: np.ndarray = None     # (B,) standardized remaining width under the posterior head
    z_prior: np.ndarray = None  # (B,) the same under the prior


@dataclass
class IntervalResult:
    m: dg.Tensor
    last_missing: dg.Tensor     # time of the most recent latent event per row (0 if none)
    kl: dg.Tensor               # (B,) summed KL estimates of the accepted latents
    counts: np.ndarray          # (B,) latents accepted
    capped: np.ndarray          # (B,) interval closed by the cap rather than the stop draw
    slots: list[SlotRecord]
    violations: int = 0         # latents outside their interval (must stay 0)


def _value(x) -> np.ndarray:
    return x.value if isinstance(x, dg.Tensor) else np.asarray(x, dtype=np.float64)


def sample_interval_batch(s: dg.Tensor, m: dg.Tensor, last_missing, t_k, t_next, active,
                          P: ParameterStore, noise, cap: int = DEFAULT_CAP) -> IntervalResult:
    """Generate latent events inside ``(t_k, t_next)`` for every active row."""
    B = s.shape[0]
    t_k = np.asarray(t_k, dtype=np.float64)
    t_next = np.asarray(t_next, dtype=np.float64)
    open_ = np.asarray(active, dtype=bool) & (t_next > t_k)
    cur = dg.Tensor(t_k.copy())
    last_missing = last_missing if isinstance(last_missing, dg.Tensor) else dg.Tensor(np.asarray(last_missing, dtype=np.float64))
    kl = dg.Tensor(np.zeros(B))
    counts = np.zeros(B, dtype=np.intp)
    slots: list[SlotRecord] = []
    violations = 0
    for _ in range(cap):
        if not open_.any():
            break
        u = noise.draw(B)
        base, q_marks = posterior_head(m, s, P)
        upper = dg.sub(t_next, cur)
        width = np.where(open_, upper.value, 1.0)
        z_q = (np.log(width) - base.mu.value) / base.sigma.value
        mass = special.ndtr(z_q)
        cont = open_ & (mass >= MASS_FLOOR) & (u[0] < mass)
        # rows that do not draw get a harmless stand-in distribution
        safe = TruncatedLogNormalParams(
            LogNormalParams(dg.where(cont, base.mu, 0.0), dg.where(cont, base.sigma, 1.0)),
            dg.where(cont, upper, 1.0))
        gap = truncated_lognormal_sample(safe, u[1], strict=False)
        tau = dg.add(cur, gap)
        tv, cv = tau.value, cur.value
        inside = (gap.value > 0) & (tv > cv) & (tv < t_next)
        acc = cont & inside
        gap = dg.where(acc, gap, dg.scale(safe.upper, 0.5))
        tau = dg.add(cur, gap)
        violations += int(np.sum(acc & ~((tau.value > t_k) & (tau.value < t_next))))
        y = categorical_sample(q_marks, u=u[2])
        prior, p_marks = prior_emit(m, s, P)
        lq_t = truncated_lognormal_logpdf(gap, safe)
        lp_t = lognormal_logpdf(gap, prior)
        kl_i = dg.add(dg.sub(lq_t, lp_t), categorical_kl(q_marks, p_marks))
        kl = dg.add(kl, dg.where(acc, kl_i, 0.0))
        slots.append(SlotRecord(
            accepted=acc.copy(), times=tau.value.copy(), marks=y.copy(),
            logq=lq_t.value + categorical_logpmf(q_marks, y).value,
            logp_prior=lp_t.value + categorical_logpmf(p_marks, y).value,
            drawn=open_.copy(), z_q=z_q, z_prior=(np.log(width) - prior.mu.value) / prior.sigma.value))
        step = dg.sub(tau, last_missing)
        m_new = update_missing_state(m, embed_missing(tau, y, step, P), step, P)
        m = dg.where(acc[:, None], m_new, m)
        last_missing = dg.where(acc, tau, last_missing)
        cur = dg.where(acc, tau, cur)
        counts += acc
        open_ = acc
    capped = open_.copy()
    if cap > 0 and capped.any():
        log.debug("%d intervals closed by the latent cap", int(capped.sum()))
    return IntervalResult(m, last_missing, kl, counts, capped, slots, violations)


def rollout_open(s: dg.Tensor, m: dg.Tensor, last_missing, t_k, active, P: ParameterStore,
                 noise, cap: int = DEFAULT_CAP, rule: str = "mean"):
    """Latents after ``t_k`` when the next observation is unknown.

    Gaps come from the untruncated posterior head; a latent is kept while it lands
    before the current prediction of the next observed event, which is refreshed
    after every kept latent. Returns (m, last_missing, predicted time, predicted
    mark, slot records). Values only; nothing is recorded for gradients.
    """
    B = s.shape[0]
    t_k = np.asarray(t_k, dtype=np.float64)
    cur = t_k.copy()
    last = _value(last_missing).copy()
    open_ = np.asarray(active, dtype=bool).copy()
    slots: list[SlotRecord] = []
    head, marks = emit_next(s, m, P)
    t_hat = t_k + point_gap(head, rule)
    for _ in range(cap):
        if not open_.any():
            break
        u = noise.draw(B)
        base, q_marks = posterior_head(m, s, P)
        z = dg.ndtri(np.clip(u[1], 1e-16, 1.0 - 2.0 ** -53)).value
        with np.errstate(over="ignore"):
            tau = cur + np.exp(base.mu.value + base.sigma.value * z)
        acc = open_ & (tau > cur) & (tau < t_hat)
        y = np.atleast_1d(categorical_sample(q_marks, u=u[2]))
        slots.append(SlotRecord(acc.copy(), np.where(acc, tau, cur), y.copy(),
                                np.zeros(B), np.zeros(B)))
        if acc.any():
            tau_safe = np.where(acc, tau, cur + 1.0)
            step = tau_safe - last
            m_new = update_missing_state(m, embed_missing(tau_safe, y, step, P), step, P)
            m = dg.Tensor(np.where(acc[:, None], m_new.value, m.value))
            last = np.where(acc, tau_safe, last)
            cur = np.where(acc, tau_safe, cur)
            head, marks = emit_next(s, m, P)
            t_hat = np.where(acc, t_k + point_gap(head, rule), t_hat)
        open_ = acc
    head, marks = emit_next(s, m, P)
    t_hat = t_k + point_gap(head, rule)
    return m, dg.Tensor(last), t_hat, np.argmax(marks.logits.value, axis=-1), slots


# -- per-sequence bookkeeping -------------------------------------------------------------

@dataclass(frozen=True)
class LatentEvent:
    time: float
    mark: int
    logq: float
    logp_prior: float
    interval: int    # index k of the observed event opening the interval


@dataclass
class MissingBuffer:
    """Latent events of one sequence with first/last indices per interval.

    ``bounds[k] = (l, u)`` lists the latents inside ``(t_k, t_{k+1})`` as
    ``events[l:u+1]``; an empty interval has ``u = l - 1``.
    """

    seq_id: str
    events: list[LatentEvent] = field(default_factory=list)
    bounds: dict[int, tuple[int, int]] = field(default_factory=dict)

    def close(self, k: int, new: list[LatentEvent]) -> None:
        lo = len(self.events)
        self.events.extend(new)
        self.bounds[k] = (lo, lo + len(new) - 1)

    def in_interval(self, k: int) -> list[LatentEvent]:
        lo, hi = self.bounds.get(k, (0, -1))
        return self.events[lo:hi + 1]


def collect(buffers: list[MissingBuffer], rows, k_of_row, result_slots: list[SlotRecord]) -> None:
    """Append the accepted latents of one interval pass to per-row buffers."""
    per_row = {b: [] for b in rows}
    for rec in result_slots:
        for b in rows:
            if rec.accepted[b]:
                per_row[b].append(LatentEvent(float(rec.times[b]), int(rec.marks[b]),
                                              float(rec.logq[b]), float(rec.logp_prior[b]),
                                              int(k_of_row[b])))
    for b in rows:
        buffers[b].close(int(k_of_row[b]), per_row[b])


def sample_interval(s_k, m, interval: tuple[float, float], P: ParameterStore,
                    gen: np.random.Generator, cap: int = DEFAULT_CAP, last_missing: float = 0.0,
                    k: int = 0, seq_id: str = ""):
    """Single-row convenience wrapper; returns (MissingBuffer, new missing state)."""
    s_k = s_k if isinstance(s_k, dg.Tensor) else dg.Tensor(np.atleast_2d(s_k))
    m = m if isinstance(m, dg.Tensor) else dg.Tensor(np.atleast_2d(m))
    res = sample_interval_batch(s_k, m, np.array([last_missing]), np.array([interval[0]]),
                                np.array([interval[1]]), np.array([True]), P, NoiseStream(gen), cap)
    buf = MissingBuffer(seq_id)
    collect([buf], [0], [k], res.slots)
    return buf, res.m


# -- latent dumps ---------------------------------------------------------------------------

def dump_latents(path, buffers: list[MissingBuffer], observed_times: dict[str, np.ndarray],
                 vocab, time_scale: float = 1.0, offsets: dict[str, float] | None = None) -> None:
    """JSON Lines, one record per interval holding latents, in dataset time units."""
    offsets = offsets or {}
    with Path(path).open("w", encoding="utf-8") as fh:
        for buf in buffers:
            times = observed_times[buf.seq_id]
            off = offsets.get(buf.seq_id, 0.0)
            for k in sorted(buf.bounds):
                evs = buf.in_interval(k)
                if not evs:
                    continue
                rec = {
                    "seq_id": buf.seq_id,
                    "interval": [off + time_scale * float(times[k]), off + time_scale * float(times[k + 1])],
                    "events": [{"t": off + time_scale * e.time, "m": vocab[e.mark],
                                "logq": e.logq, "logp_prior": e.logp_prior} for e in evs],
                }
                fh.write(json.dumps(rec) + "\n")
