"""ELBO assembly, SGD training, the budgeted fine-tuning variant and the ablations.

The objective per window is the mean over scored events of
``log p(next observed event) - KL estimates of the latents in its interval``.
Gradients flow through the reparameterized latent draws. Sequences are trained
in truncated windows of ``bptt`` events; states carry over between windows as
constants.
"""

from __future__ import annotations

import csv
import hashlib
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import diffgraph as dg
from . import miss_mtpp as mm
from . import obs_mtpp as om
from . import params as pm
from .config import Config
from .core import Dataset, Sequence, View, split_validation
from .params import ParameterStore

log = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class ElboReport:
    recon: float
    kl: float
    total: float
    n_events: int
    latent_counts: list = field(default_factory=list)
    objective: dg.Tensor | None = None    # recon - kl as a graph node when taped
    violations: int = 0


@dataclass
class PassState:
    s: dg.Tensor
    m: dg.Tensor
    last_missing: dg.Tensor

    def detached(self) -> "PassState":
        return PassState(dg.Tensor(self.s.value.copy()), dg.Tensor(self.m.value.copy()),
                         dg.Tensor(self.last_missing.value.copy()))


def initial_pass_state(batch: om.Batch, P: ParameterStore) -> PassState:
    return PassState(om.initial_state(batch, P), mm.zero_state(P, batch.size),
                     dg.Tensor(np.zeros(batch.size)))


def elbo_pass(batch: om.Batch, P: ParameterStore, noise, cap: int, start, stop,
              first: int = 1, last: int | None = None, state: PassState | None = None,
              buffers: list | None = None):
    """Interleaved generative pass over steps ``first..last-1``.

    Step ``j`` samples latents in ``(t_{j-1}, t_j)``, scores event ``j`` given the
    states, then advances the observed state over event ``j``. Returns
    (recon, kl, n_scored, latent counts per step, violations, final state).
    """
    start = np.asarray(start)
    stop = np.asarray(stop)
    last = int(stop.max()) if last is None else last
    state = initial_pass_state(batch, P) if state is None else state
    s, m, last_missing = state.s, state.m, state.last_missing
    recon = dg.Tensor(0.0)
    kl = dg.Tensor(0.0)
    count = 0
    counts = []
    violations = 0
    for j in range(first, last):
        mask = ((j >= start) & (j < stop)).astype(np.float64)
        if cap > 0:
            res = mm.sample_interval_batch(s, m, last_missing, batch.times[:, j - 1], batch.times[:, j],
                                           j < stop, P, noise, cap)
            m, last_missing = res.m, res.last_missing
            kl = dg.add(kl, dg.sum(dg.mul(res.kl, mask)))
            counts.append(res.counts * (j < stop))
            violations += res.violations
            if buffers is not None:
                rows = [b for b in range(batch.size) if j < stop[b]]
                mm.collect(buffers, rows, np.full(batch.size, j - 1), res.slots)
        gap = batch.times[:, j] - batch.times[:, j - 1]
        lp = om.event_logprob(s, m, gap, batch.marks[:, j], P)
        recon = dg.add(recon, dg.sum(dg.mul(lp, mask)))
        count += int(mask.sum())
        s = om.observe(s, batch, j, P)
    return recon, kl, count, counts, violations, PassState(s, m, last_missing)


def elbo(seq: Sequence, dataset: Dataset, P: ParameterStore, gen_or_noise, cap: int = mm.DEFAULT_CAP,
         start: int = 1, stop: int | None = None) -> ElboReport:
    """Single-sequence ELBO. Run inside a :class:`~imtpp.diffgraph.Tape` to get gradients."""
    if len(seq) < 2:
        raise ValueError("the ELBO needs at least two events")
    noise = gen_or_noise if hasattr(gen_or_noise, "draw") else mm.NoiseStream(gen_or_noise)
    batch = om.pack(dataset, [seq])
    stop = len(seq) if stop is None else stop
    recon, kl, n, counts, viol, _ = elbo_pass(batch, P, noise, cap, [start], [stop])
    total = dg.sub(recon, kl)
    return ElboReport(recon.item(), kl.item(), total.item(), n,
                      [int(c[0]) for c in counts], total, viol)


# -- training loop -------------------------------------------------------------------------

@dataclass
class EpochLog:
    epoch: int
    elbo: float       # per scored event
    recon: float
    kl: float
    wall_seconds: float
    val_mae: float = float("nan")
    skipped_steps: int = 0


@dataclass
class TrainResult:
    best: ParameterStore
    last: ParameterStore
    log: list
    diverged: bool = False
    violations: int = 0


def _streams(seed: int) -> tuple[np.random.Generator, np.random.Generator]:
    """Independent generators for batch shuffling and latent noise."""
    a, b = np.random.SeedSequence(seed).spawn(2)
    return np.random.default_rng(a), np.random.default_rng(b)


POOL = 8  # batches per length-sorting pool


def _batches(view: View, order: np.ndarray, size: int):
    # Sorting by length inside a pool of shuffled rows keeps padding low
    # while batch composition still changes every epoch.
    rows = [i for i in order if view.stop[i] - view.start[i] > 0]
    for p in range(0, len(rows), size * POOL):
        pool = sorted(rows[p:p + size * POOL], key=lambda i: view.stop[i])
        for k in range(0, len(pool), size):
            yield pool[k:k + size]


def _windows(last: int, width: int):
    j = 1
    while j < last:
        yield j, min(last, j + width)
        j += width


def make_store(dataset: Dataset, cfg: Config, time_head: str | None = None,
               mu_bar: float | None = None) -> ParameterStore:
    init_gen = np.random.default_rng(np.random.SeedSequence(cfg.seed).spawn(3)[2])
    meta = {"vocab": list(dataset.vocab), "time_scale": dataset.time_scale, "cap": cfg.cap,
            "seed": cfg.seed}
    return ParameterStore.initialize(pm.Dims(dataset.n_marks), init_gen,
                                     time_head or cfg.time_head,
                                     cfg.mu_bar if mu_bar is None else mu_bar, meta)


def _run(view: View, P: ParameterStore, cfg: Config, step_fn, names, val_view: View | None,
         log_path=None, ckpt_dir=None) -> TrainResult:
    shuffle_gen, noise_gen = _streams(cfg.seed)
    noise = mm.NoiseStream(noise_gen)
    d = view.dataset
    params = P.params(names)
    rows_log: list[EpochLog] = []
    best = P.copy()
    best_score = math.inf
    stale = 0
    diverged = False
    violations = 0
    good = P.values()
    writer = None
    fh = None
    if log_path is not None:
        Path(log_path).parent.mkdir(parents=True, exist_ok=True)
        fh = open(log_path, "w", newline="")
        writer = csv.writer(fh)
        writer.writerow(["epoch", "elbo", "recon", "kl", "wall_seconds"])
    try:
        for epoch in range(1, cfg.epochs + 1):
            t0 = time.perf_counter()
            order = shuffle_gen.permutation(len(d.sequences))
            tot_r = tot_k = 0.0
            tot_n = 0
            skipped = 0
            for rows in _batches(view, order, cfg.batch):
                seqs = [d.sequences[i] for i in rows]
                batch = om.pack(d, seqs)
                start = np.array([view.start[i] for i in rows])
                stop = np.array([view.stop[i] for i in rows])
                state = None
                for a, b in _windows(int(stop.max()), cfg.bptt):
                    with dg.Tape() as tape:
                        recon, kl, n, viol, state = step_fn(batch, P, noise, start, stop, a, b, state)
                        violations += viol
                        if n == 0:
                            state = state.detached()
                            continue
                        loss = dg.scale(dg.sub(recon, kl), -1.0 / n)
                    dg.backward(tape, loss)
                    if not dg.sgd_step(params, cfg.lr, cfg.l2, cfg.clip):
                        skipped += 1
                    tot_r += recon.item()
                    tot_k += kl.item()
                    tot_n += n
                    state = state.detached()
            wall = time.perf_counter() - t0
            elbo_ev = (tot_r - tot_k) / max(tot_n, 1)
            entry = EpochLog(epoch, elbo_ev, tot_r / max(tot_n, 1), tot_k / max(tot_n, 1), wall,
                             skipped_steps=skipped)
            if not math.isfinite(elbo_ev) or not P.all_finite():
                log.error("ELBO diverged at epoch %d; restoring the last good parameters", epoch)
                P.load_values(good)
                diverged = True
                break
            good = P.values()
            if skipped:
                log.warning("epoch %d: skipped %d steps with non-finite gradients", epoch, skipped)
            if val_view is not None and val_view.n_targets:
                from .evaluation import evaluate
                entry.val_mae = evaluate(P, val_view, seed=cfg.seed, cfg=cfg).mae
                score = entry.val_mae
            else:
                score = -elbo_ev
            rows_log.append(entry)
            if writer is not None:
                writer.writerow([epoch, repr(entry.elbo), repr(entry.recon), repr(entry.kl), f"{wall:.3f}"])
                fh.flush()
            log.info("epoch %d elbo %.4f recon %.4f kl %.4f val_mae %.4f (%.1fs)", epoch, entry.elbo,
                     entry.recon, entry.kl, entry.val_mae, wall)
            if score < best_score:
                best_score, best, stale = score, P.copy(), 0
            else:
                stale += 1
            if ckpt_dir is not None:
                pm.save(P, Path(ckpt_dir) / "last")
                pm.save(best, Path(ckpt_dir) / "best")
            if val_view is not None and stale >= cfg.patience:
                log.info("early stop after %d epochs without validation improvement", stale)
                break
    finally:
        if fh is not None:
            fh.close()
    if ckpt_dir is not None:
        pm.save(P, Path(ckpt_dir) / "last")
        pm.save(best, Path(ckpt_dir) / "best")
    return TrainResult(best, P, rows_log, diverged, violations)


def train(view: View, P: ParameterStore, cfg: Config, val_view: View | None = None,
          log_path=None, ckpt_dir=None) -> TrainResult:
    """Maximize the ELBO over the targets of ``view``.

    With ``cap = 0`` no latent is ever drawn, so only the observed network is trained;
    the latent networks would otherwise drift under weight decay alone.
    """
    cap = cfg.cap
    P.meta["cap"] = cap
    names = None if cap > 0 else P.names((pm.OBSERVED, pm.INTENSITY))

    def step(batch, P, noise, start, stop, a, b, state):
        recon, kl, n, _, viol, state = elbo_pass(batch, P, noise, cap, start, stop, a, b, state)
        return recon, kl, n, viol, state

    return _run(view, P, cfg, step, names, val_view, log_path, ckpt_dir)


def train_mle(view: View, P: ParameterStore, cfg: Config, val_view: View | None = None,
              log_path=None, ckpt_dir=None) -> TrainResult:
    """Maximum likelihood of the observed events alone (no latent events)."""
    P.meta["cap"] = 0
    names = P.names((pm.OBSERVED, pm.INTENSITY))

    def step(batch, P, noise, start, stop, a, b, state):
        if state is None:
            state = initial_pass_state(batch, P)
        total, n, s = om.observed_loglik(batch, P, start, stop, s=state.s, first=a, last=b)
        return total, dg.Tensor(0.0), n, 0, PassState(s, state.m, state.last_missing)

    return _run(view, P, cfg, step, names, val_view, log_path, ckpt_dir)


def ablation_variants(view: View, dataset_cfg: Config, val_view: View | None = None) -> dict:
    """IMTPP_S (no latent events) and IMTPP_R (intensity time head)."""
    d = view.dataset
    s_store = make_store(d, dataset_cfg)
    r_store = make_store(d, dataset_cfg, time_head="intensity")
    return {
        "IMTPP_S": train(view, s_store, dataset_cfg.replace(cap=0), val_view).best,
        "IMTPP_R": train(view, r_store, dataset_cfg, val_view).best,
    }


def fit(dataset: Dataset, train_view: View, cfg: Config, variant: str = "full", log_path=None,
        ckpt_dir=None, early_stop: bool = True) -> TrainResult:
    """Train one variant with the validation carve-out of the training segment."""
    fit_view, val_view = split_validation(train_view, cfg.val_fraction)
    if variant == "full":
        return train(fit_view, make_store(dataset, cfg), cfg, val_view if early_stop else None, log_path, ckpt_dir)
    if variant == "S":
        return train(fit_view, make_store(dataset, cfg), cfg.replace(cap=0),
                     val_view if early_stop else None, log_path, ckpt_dir)
    if variant == "R":
        return train(fit_view, make_store(dataset, cfg, time_head="intensity"), cfg,
                     val_view if early_stop else None, log_path, ckpt_dir)
    raise ValueError(f"unknown variant {variant!r}")


# -- budgeted imputation -----------------------------------------------------------------------

def _latent_digest(latents: dict) -> str:
    h = hashlib.sha256()
    for sid in sorted(latents):
        for e in latents[sid]:
            h.update(repr((sid, e.time, e.mark, e.interval)).encode())
    return h.hexdigest()


def sample_latents(dataset: Dataset, P: ParameterStore, seed: int, cap: int,
                   batch_size: int = 64) -> list[mm.MissingBuffer]:
    """Posterior latents for every observed interval of every sequence."""
    noise = mm.NoiseStream(np.random.default_rng(seed))
    out: list[mm.MissingBuffer] = []
    seqs = [s for s in dataset.sequences]
    for k in range(0, len(seqs), batch_size):
        chunk = seqs[k:k + batch_size]
        batch = om.pack(dataset, chunk)
        bufs = [mm.MissingBuffer(s.id) for s in chunk]
        if cap > 0:
            elbo_pass(batch, P, noise, cap, np.ones(len(chunk)), batch.lengths, buffers=bufs)
        out.extend(bufs)
    return out


def select_budget(buffers: list[mm.MissingBuffer], nbar: int) -> dict:
    """Per sequence, the ``nbar`` latents with the highest posterior log-density, in time order."""
    chosen = {}
    short = 0
    for buf in buffers:
        ranked = sorted(buf.events, key=lambda e: (-e.logq, e.time))
        if len(ranked) < nbar:
            short += 1
        chosen[buf.seq_id] = sorted(ranked[:nbar], key=lambda e: e.time)
    if short:
        log.warning("%d sequences had fewer than %d latent events; all of them were kept", short, nbar)
    return chosen


def frozen_pass(batch: om.Batch, P: ParameterStore, latents: list[list[mm.LatentEvent]], start, stop,
                first: int = 1, last: int | None = None, state: PassState | None = None):
    """Observed log-likelihood with a fixed set of latent events feeding the missing state."""
    start = np.asarray(start)
    stop = np.asarray(stop)
    last = int(stop.max()) if last is None else last
    state = initial_pass_state(batch, P) if state is None else state
    s, m, lm = state.s, state.m, state.last_missing.value.copy()
    by_interval = [dict() for _ in range(batch.size)]
    for b, evs in enumerate(latents):
        for e in evs:
            by_interval[b].setdefault(e.interval, []).append(e)
    recon = dg.Tensor(0.0)
    count = 0
    for j in range(first, last):
        lists = [by_interval[b].get(j - 1, []) if j < stop[b] else [] for b in range(batch.size)]
        for r in range(max((len(x) for x in lists), default=0)):
            has = np.array([len(x) > r for x in lists])
            tau = np.array([x[r].time if len(x) > r else lm[b] + 1.0 for b, x in enumerate(lists)])
            y = np.array([x[r].mark if len(x) > r else 0 for x in lists], dtype=np.intp)
            step = tau - lm
            m_new = mm.update_missing_state(m, mm.embed_missing(tau, y, step, P), step, P)
            m = dg.where(has[:, None], m_new, m)
            lm = np.where(has, tau, lm)
        mask = ((j >= start) & (j < stop)).astype(np.float64)
        gap = batch.times[:, j] - batch.times[:, j - 1]
        lp = om.event_logprob(s, m, gap, batch.marks[:, j], P)
        recon = dg.add(recon, dg.sum(dg.mul(lp, mask)))
        count += int(mask.sum())
        s = om.observe(s, batch, j, P)
    return recon, count, PassState(s, m, dg.Tensor(lm))


@dataclass
class FinetuneResult:
    store: ParameterStore
    latents: dict           # seq_id -> list of LatentEvent (the frozen set)
    log: list


def finetune_pp(train_view: View, pretrained: ParameterStore, nbar: int, cfg: Config,
                impute_on: Dataset | None = None) -> FinetuneResult:
    """Two steps: pick ``nbar`` latents per sequence, then fit theta and the missing-state
    recurrence to the observed likelihood with those latents held fixed."""
    if nbar < 0:
        raise ValueError("the budget must be nonnegative")
    d = train_view.dataset
    source = impute_on if impute_on is not None else d
    buffers = sample_latents(source, pretrained, cfg.seed, cfg.cap)
    latents = select_budget(buffers, nbar)
    digest = _latent_digest(latents)
    P = pretrained.copy()
    names = P.names((pm.OBSERVED, pm.INTENSITY)) + list(pm.MISSING_RNN)
    names = [n for n in P.names() if n in names]

    def step(batch, P, noise, start, stop, a, b, state):
        lat = [latents.get(sid, []) for sid in batch.ids]
        recon, n, state = frozen_pass(batch, P, lat, start, stop, a, b, state)
        return recon, dg.Tensor(0.0), n, 0, state

    res = _run(train_view, P, cfg.replace(epochs=cfg.finetune_epochs), step, names, None)
    if _latent_digest(latents) != digest:
        raise AssertionError("the frozen latent set changed during fine-tuning")
    return FinetuneResult(res.last, latents, res.log)
