"""Prediction metrics, forecasting, imputation scoring, drill-down and baselines.

One-step evaluation feeds the true history forward. Latents in closed
observed intervals come from the truncated posterior. For the interval after the
last observed event, whose end is unknown, latents are rolled out from the
untruncated posterior head while they fall before the current prediction.
Forecasting repeats that rollout for ``n`` steps, feeding each predicted event back
in. ``evaluate`` is the ``n = 1`` case of the same pass.

Reported times are in dataset units, so errors are multiplied by ``time_scale``.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import optimize

from . import diffgraph as dg
from . import miss_mtpp as mm
from . import obs_mtpp as om
from .config import Config
from .core import Dataset, View, denormalized_times, split_validation
from .params import ParameterStore

log = logging.getLogger(__name__)


class EmptyEvaluation(ValueError):
    pass


@dataclass
class MetricReport:
    mae: float
    mpa: float
    n_events: int
    seq_ids: list = field(default_factory=list)
    event_idx: np.ndarray = field(default_factory=lambda: np.empty(0, dtype=np.intp))
    true_t: np.ndarray = field(default_factory=lambda: np.empty(0))
    pred_t: np.ndarray = field(default_factory=lambda: np.empty(0))
    abs_errors: np.ndarray = field(default_factory=lambda: np.empty(0))
    true_m: list = field(default_factory=list)
    pred_m: list = field(default_factory=list)
    correct: np.ndarray = field(default_factory=lambda: np.empty(0, dtype=bool))
    ci: dict = field(default_factory=dict)
    extra: dict = field(default_factory=dict)

    def keys(self) -> list[tuple[str, int]]:
        return list(zip(self.seq_ids, (int(i) for i in self.event_idx)))


@dataclass
class ForecastReport:
    n: int
    mae: np.ndarray
    mpa: np.ndarray
    counts: np.ndarray
    steps: list = field(default_factory=list)   # MetricReport per step


def _report(seq_ids, idx, true_t, pred_t, errors, true_m, pred_m) -> MetricReport:
    true_t = np.asarray(true_t, dtype=np.float64)
    pred_t = np.asarray(pred_t, dtype=np.float64)
    err = np.abs(true_t - pred_t) if errors is None else np.asarray(errors, dtype=np.float64)
    correct = np.array([a == b for a, b in zip(true_m, pred_m)], dtype=bool)
    n = len(err)
    return MetricReport(float(err.mean()) if n else float("nan"), float(correct.mean()) if n else float("nan"),
                        n, list(seq_ids), np.asarray(idx, dtype=np.intp), true_t, pred_t, err,
                        list(true_m), list(pred_m), correct)


# -- the predictive pass ---------------------------------------------------------------------

def _noise_streams(seed: int):
    a, b = np.random.SeedSequence([seed, 7]).spawn(2)
    return mm.NoiseStream(np.random.default_rng(a)), mm.NoiseStream(np.random.default_rng(b))


def predictive_pass(P: ParameterStore, view: View, n: int = 1, seed: int = 0, cap: int | None = None,
                    rollout_cap: int | None = None, rule: str = "mean", batch_size: int = 64) -> list:
    """Predictions for targets ``start..stop-1`` of every sequence and ``n`` steps ahead.

    Returns tuples (sequence index, event index, step, predicted time, predicted mark id).
    """
    if n < 1:
        raise ValueError("forecast horizon must be at least 1")
    cap = int(P.meta.get("cap", mm.DEFAULT_CAP)) if cap is None else cap
    rollout_cap = cap if rollout_cap is None else rollout_cap
    if cap == 0:
        rollout_cap = 0
    closed_noise, branch_noise = _noise_streams(seed)
    d = view.dataset
    rows = [i for i in range(len(d.sequences)) if view.stop[i] > max(view.start[i], 1)]
    out = []
    for k in range(0, len(rows), batch_size):
        chunk = rows[k:k + batch_size]
        batch = om.pack(d, [d.sequences[i] for i in chunk])
        start = np.maximum(np.array([view.start[i] for i in chunk]), 1)
        stop = np.array([view.stop[i] for i in chunk])
        s = om.initial_state(batch, P)
        m = mm.zero_state(P, batch.size)
        lm = dg.Tensor(np.zeros(batch.size))
        for j in range(1, int(stop.max())):
            R = np.flatnonzero((j >= start) & (j < stop))
            if R.size:
                sb, mb, lmb = dg.Tensor(s.value[R]), dg.Tensor(m.value[R]), dg.Tensor(lm.value[R])
                t_prev = batch.times[R, j - 1]
                for h in range(n):
                    valid = j + h < stop[R]
                    if not valid.any():
                        break
                    mb, lmb, t_hat, x_hat, _ = mm.rollout_open(sb, mb, lmb, t_prev, valid, P,
                                                               branch_noise, rollout_cap, rule)
                    for r in np.flatnonzero(valid):
                        out.append((chunk[R[r]], j + h, h, float(t_hat[r]), int(x_hat[r])))
                    if h + 1 < n:
                        gap = t_hat - t_prev
                        sb = om.update_state(sb, om.embed_event(t_hat, x_hat, gap, P), gap, P)
                        t_prev = t_hat
            if cap > 0:
                res = mm.sample_interval_batch(s, m, lm, batch.times[:, j - 1], batch.times[:, j],
                                               j < stop, P, closed_noise, cap)
                m, lm = res.m, res.last_missing
            s = om.observe(s, batch, j, P)
    return out


def _records_to_report(records, d: Dataset, step: int = 0) -> MetricReport:
    sel = [r for r in records if r[2] == step]
    sel.sort(key=lambda r: (r[0], r[1]))
    seq_ids, idx, tt, pt, tm, pmk = [], [], [], [], [], []
    for si, j, _, t_hat, x_hat in sel:
        s = d.sequences[si]
        abs_t = denormalized_times(d, s)
        seq_ids.append(s.id)
        idx.append(j)
        tt.append(abs_t[j])
        pt.append(s.offset + d.time_scale * t_hat)
        tm.append(s.events[j].mark)
        pmk.append(d.vocab[x_hat])
    return _report(seq_ids, idx, tt, pt, None, tm, pmk)


def _settings(P: ParameterStore, cfg: Config | None, rule: str | None):
    cfg = cfg or Config()
    return cfg, (rule or cfg.predict)


def evaluate(P: ParameterStore, view: View, seed: int = 0, cfg: Config | None = None,
             rule: str | None = None) -> MetricReport:
    """One-step-ahead MAE and MPA over the targets of ``view``."""
    if view.n_targets == 0:
        raise EmptyEvaluation("no test events to evaluate")
    cfg, rule = _settings(P, cfg, rule)
    recs = predictive_pass(P, view, 1, seed, rollout_cap=cfg.forecast_cap, rule=rule)
    return _records_to_report(recs, view.dataset)


def forecast(P: ParameterStore, view: View, n: int, seed: int = 0, cfg: Config | None = None,
             rule: str | None = None) -> ForecastReport:
    """Per-step metrics of ``n``-step autoregressive rollouts started at every target."""
    if view.n_targets == 0:
        raise EmptyEvaluation("no test events to forecast")
    cfg, rule = _settings(P, cfg, rule)
    recs = predictive_pass(P, view, n, seed, rollout_cap=cfg.forecast_cap, rule=rule)
    steps = [_records_to_report(recs, view.dataset, h) for h in range(n)]
    return ForecastReport(n, np.array([r.mae for r in steps]), np.array([r.mpa for r in steps]),
                          np.array([r.n_events for r in steps]), steps)


# -- imputation ------------------------------------------------------------------------------

def impute_eval(observed: Dataset, held_out: Dataset, P: ParameterStore | None = None,
                latents: dict | None = None, seed: int = 0, cap: int | None = None,
                matching: str = "order") -> MetricReport:
    """Score generated latents against deleted events, interval by interval.

    Generated and held-out events in the same observed interval are paired in
    time order (or by minimum total |dt| with ``matching="hungarian"``). A held-out
    event left without a partner counts as a miss with error equal to the interval
    width and a wrong mark. Held-out events outside the observed span are excluded
    and counted in ``extra["outside"]``.
    """
    if latents is None:
        if P is None:
            raise ValueError("need a model or an explicit latent set")
        from .trainer import sample_latents
        cap = int(P.meta.get("cap", mm.DEFAULT_CAP)) if cap is None else cap
        latents = {b.seq_id: b.events for b in sample_latents(observed, P, seed, cap)}
    held = {s.id: s for s in held_out.sequences}
    seq_ids, idx, tt, pt, errs, tm, pmk = [], [], [], [], [], [], []
    outside = 0
    imputed_counts, true_counts = [], []
    for s in observed.sequences:
        obs_abs = denormalized_times(observed, s)
        lat = latents.get(s.id, [])
        lat_abs = np.array([s.offset + observed.time_scale * e.time for e in lat])
        h = held.get(s.id)
        h_abs = denormalized_times(held_out, h) if h is not None else np.empty(0)
        h_marks = [e.mark for e in h.events] if h is not None else []
        # held-out event i lies in interval k when obs_abs[k] < t < obs_abs[k+1]
        k_of = np.searchsorted(obs_abs, h_abs, side="right") - 1
        inside = (k_of >= 0) & (k_of < len(obs_abs) - 1)
        outside += int((~inside).sum())
        lat_k = np.array([e.interval for e in lat], dtype=np.intp)
        for k in range(len(obs_abs) - 1):
            hi = np.flatnonzero(inside & (k_of == k))
            li = np.flatnonzero(lat_k == k) if lat_k.size else np.empty(0, dtype=np.intp)
            imputed_counts.append(li.size)
            true_counts.append(hi.size)
            if hi.size == 0:
                continue
            width = obs_abs[k + 1] - obs_abs[k]
            pairs = _match(h_abs[hi], lat_abs[li] if li.size else np.empty(0), matching)
            for a, b in pairs:
                i = hi[a]
                seq_ids.append(s.id)
                idx.append(int(i))
                tt.append(h_abs[i])
                tm.append(h_marks[i])
                if b is None:
                    pt.append(float("nan"))
                    errs.append(width)
                    pmk.append("")
                else:
                    e = lat[li[b]]
                    pt.append(lat_abs[li[b]])
                    errs.append(abs(h_abs[i] - lat_abs[li[b]]))
                    pmk.append(observed.vocab[e.mark])
    rep = _report(seq_ids, idx, tt, pt, errs, tm, pmk)
    rep.extra = {"outside": outside, "missed": int(sum(1 for p in pmk if p == "")),
                 "imputed_per_interval": np.array(imputed_counts), "held_per_interval": np.array(true_counts)}
    return rep


def _match(true_t: np.ndarray, gen_t: np.ndarray, how: str) -> list[tuple[int, int | None]]:
    if how == "order":
        return [(a, a if a < gen_t.size else None) for a in range(true_t.size)]
    if how == "hungarian":
        if gen_t.size == 0:
            return [(a, None) for a in range(true_t.size)]
        cost = np.abs(true_t[:, None] - gen_t[None, :])
        r, c = optimize.linear_sum_assignment(cost)
        got = dict(zip(r.tolist(), c.tolist()))
        return [(a, got.get(a)) for a in range(true_t.size)]
    raise ValueError(f"unknown matching {how!r}")


# -- drill-down ---------------------------------------------------------------------------------

@dataclass
class DrilldownReport:
    keys: list
    gains: np.ndarray          # sorted descending
    positive_fraction: float
    total: float


def drilldown(baseline: MetricReport, model: MetricReport) -> DrilldownReport:
    """Per-event gain AE(baseline) - AE(model)."""
    ka, kb = baseline.keys(), model.keys()
    if ka != kb:
        raise ValueError("reports cover different events")
    gains = baseline.abs_errors - model.abs_errors
    order = np.argsort(-gains, kind="stable")
    return DrilldownReport([ka[i] for i in order], gains[order],
                           float(np.mean(gains > 0)) if gains.size else float("nan"), float(gains.sum()))


# -- Markov-chain baseline -------------------------------------------------------------------------

_BOS = -1


class MarkovChain:
    """Order-k mark transitions with add-one smoothing and backoff to lower orders."""

    def __init__(self, order: int, n_marks: int):
        self.order = order
        self.n_marks = n_marks
        self.tables: list[dict] = [dict() for _ in range(order + 1)]

    def fit(self, sequences) -> "MarkovChain":
        for marks in sequences:
            for i, x in enumerate(marks):
                for k in range(self.order + 1):
                    ctx = self._context(marks, i, k)
                    row = self.tables[k].setdefault(ctx, np.zeros(self.n_marks))
                    row[x] += 1
        return self

    @staticmethod
    def _context(marks, i: int, k: int) -> tuple:
        return tuple(marks[i - r] if i - r >= 0 else _BOS for r in range(k, 0, -1))

    def probs(self, marks, i: int) -> np.ndarray:
        for k in range(self.order, -1, -1):
            row = self.tables[k].get(self._context(marks, i, k))
            if row is not None:
                return (row + 1.0) / (row.sum() + self.n_marks)
        return np.full(self.n_marks, 1.0 / self.n_marks)

    def predict(self, marks, i: int) -> int:
        return int(np.argmax(self.probs(marks, i)))


@dataclass
class MarkovReport:
    best_order: int
    val_mpa: dict
    test_mpa: dict
    best: MetricReport


def _mark_lists(view: View) -> list[list[int]]:
    return [list(view.dataset.mark_ids(s)) for s in view.dataset.sequences]


def _chain_mpa(chain: MarkovChain, marks, view: View):
    hits = []
    for i, (a, b) in enumerate(zip(view.start, view.stop)):
        for j in range(a, b):
            hits.append(chain.predict(marks[i], j) == marks[i][j])
    return float(np.mean(hits)) if hits else float("nan"), hits


def markov_baseline(train: View, test: View, max_order: int = 3, val_fraction: float = 0.1) -> MarkovReport:
    """Chains of order 1..max_order; the order is picked on the validation carve-out."""
    if test.n_targets == 0 or train.n_targets == 0:
        raise EmptyEvaluation("markov baseline needs training and test events")
    marks = _mark_lists(train)
    C = train.dataset.n_marks
    fit_view, val_view = split_validation(train, val_fraction)
    val_mpa, test_mpa = {}, {}
    for k in range(1, max_order + 1):
        chain = MarkovChain(k, C).fit(m[:b] for m, b in zip(marks, fit_view.stop))
        val_mpa[k] = _chain_mpa(chain, marks, val_view)[0] if val_view.n_targets else float("nan")
        full = MarkovChain(k, C).fit(m[:b] for m, b in zip(marks, train.stop))
        test_mpa[k] = _chain_mpa(full, marks, test)[0]
    scored = {k: v for k, v in val_mpa.items() if not math.isnan(v)}
    best = max(scored, key=lambda k: (scored[k], -k)) if scored else 1
    chain = MarkovChain(best, C).fit(m[:b] for m, b in zip(marks, train.stop))
    d = test.dataset
    seq_ids, idx, tm, pmk = [], [], [], []
    for i, (a, b) in enumerate(zip(test.start, test.stop)):
        for j in range(a, b):
            seq_ids.append(d.sequences[i].id)
            idx.append(j)
            tm.append(d.vocab[marks[i][j]])
            pmk.append(d.vocab[chain.predict(marks[i], j)])
    n = len(idx)
    rep = _report(seq_ids, idx, np.full(n, np.nan), np.full(n, np.nan), np.full(n, np.nan), tm, pmk)
    rep.mae = float("nan")
    return MarkovReport(best, val_mpa, test_mpa, rep)


def marginal_mpa(view: View, on: View | None = None) -> float:
    """Accuracy of always predicting the most frequent training mark."""
    marks = _mark_lists(view)
    counts = np.zeros(view.dataset.n_marks)
    for m, b in zip(marks, view.stop):
        np.add.at(counts, m[:b], 1)
    top = int(np.argmax(counts))
    on = on or view
    hits = [marks[i][j] == top for i, (a, b) in enumerate(zip(on.start, on.stop)) for j in range(a, b)]
    return float(np.mean(hits))


# -- sweeps and aggregation ----------------------------------------------------------------------------

@dataclass
class SweepRow:
    mu_bar: float
    mae: float
    mpa: float
    best: bool = False


def sweep_mu(train_view: View, mus, cfg: Config) -> list[SweepRow]:
    """Train one model per mu_bar on the fit part; score on the validation carve-out."""
    from .trainer import make_store, train
    mus = list(mus)
    if not mus:
        raise ValueError("empty mu_bar list")
    fit_view, val_view = split_validation(train_view, cfg.val_fraction)
    rows = []
    for mu in mus:
        P = make_store(train_view.dataset, cfg, mu_bar=mu)
        res = train(fit_view, P, cfg)
        rep = evaluate(res.last, val_view, seed=cfg.seed, cfg=cfg)
        rows.append(SweepRow(float(mu), rep.mae, rep.mpa))
    best = min(range(len(rows)), key=lambda i: rows[i].mae)
    rows[best].best = True
    return rows


def aggregate(values) -> tuple[float, float]:
    """Mean and maximum absolute deviation from it (the run-to-run spread)."""
    v = np.asarray(values, dtype=np.float64)
    mean = float(v.mean())
    return mean, float(np.max(np.abs(v - mean)))


# -- CSV output ------------------------------------------------------------------------------------------

def write_summary(rep: MetricReport, path) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["metric", "value", "ci"])
        for name in ("mae", "mpa"):
            w.writerow([name, repr(getattr(rep, name)), repr(rep.ci.get(name, float("nan")))])
        w.writerow(["n_events", rep.n_events, ""])


def write_per_event(rep: MetricReport, path) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["seq_id", "event_idx", "true_t", "pred_t", "abs_err", "true_m", "pred_m", "correct"])
        for i in range(rep.n_events):
            w.writerow([rep.seq_ids[i], int(rep.event_idx[i]), repr(float(rep.true_t[i])),
                        repr(float(rep.pred_t[i])), repr(float(rep.abs_errors[i])), rep.true_m[i],
                        rep.pred_m[i], int(rep.correct[i])])


def write_forecast(rep: ForecastReport, path) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["step", "mae", "mpa", "n_events"])
        for h in range(rep.n):
            w.writerow([h + 1, repr(float(rep.mae[h])), repr(float(rep.mpa[h])), int(rep.counts[h])])


def write_sweep(rows: list[SweepRow], path) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["mu_bar", "mae", "mpa", "best"])
        for r in rows:
            w.writerow([r.mu_bar, repr(r.mae), repr(r.mpa), int(r.best)])


def write_drilldown(rep: DrilldownReport, path) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["rank", "seq_id", "event_idx", "gain"])
        for r, ((sid, j), g) in enumerate(zip(rep.keys, rep.gains), start=1):
            w.writerow([r, sid, j, repr(float(g))])


def read_per_event(path) -> tuple[float, float, int]:
    """Recompute (MAE, MPA, count) from a per-event CSV in a single pass."""
    total = 0.0
    hits = 0
    n = 0
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            total += float(row["abs_err"])
            hits += int(row["correct"])
            n += 1
    return total / n, hits / n, n
