"""Command-line entry point.

Every run writes a manifest (JSON) next to its outputs recording the command,
arguments, effective configuration, input and output content hashes, seed,
code version and wall time. ``imtpp replay MANIFEST --out DIR`` re-executes the
run from the manifest alone and checks that every report is byte-identical.
"""

from __future__ import annotations

import os

# Pin BLAS pools before numpy loads: small matmuls gain nothing from threads and a
# fixed pool keeps reductions in a fixed order.
for _var in ("OPENBLAS_NUM_THREADS", "OMP_NUM_THREADS", "MKL_NUM_THREADS"):
    os.environ.setdefault(_var, "1")

import argparse  # noqa: E402
import hashlib  # noqa: E402
import json  # noqa: E402
import logging  # noqa: E402
import sys  # noqa: E402
import time  # noqa: E402
from pathlib import Path  # noqa: E402

import numpy as np  # noqa: E402

from . import __version__  # noqa: E402
from . import config as config_mod  # noqa: E402
from . import core  # noqa: E402
from . import evaluation as ev  # noqa: E402
from . import hawkes_sim as hs  # noqa: E402
from . import miss_mtpp as mm  # noqa: E402
from . import params as pm  # noqa: E402
from . import trainer  # noqa: E402
from .config import Config  # noqa: E402

log = logging.getLogger("imtpp")

MANIFEST_NAME = "manifest.json"


class CliError(RuntimeError):
    pass


# -- hashing and manifests -----------------------------------------------------------------

def file_digest(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _write_json(path: Path, obj) -> None:
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    os.replace(tmp, path)


def manifest_path(command: str, out) -> Path:
    out = Path(out)
    if command == "simulate":
        return out.with_name(out.name + ".manifest.json")
    return out / MANIFEST_NAME


# -- data preparation --------------------------------------------------------------------------

def _prepared(path, cfg: Config, P: pm.ParameterStore | None = None) -> core.Dataset:
    """Ingest and normalize; with a checkpoint, reuse its vocabulary order and time scale."""
    raw = core.ingest(path)
    if P is None:
        return core.normalize_times(raw, cfg.train_fraction)
    vocab = [str(v) for v in P.meta.get("vocab", ())]
    if set(vocab) != set(raw.vocab):
        raise CliError(f"{path}: marks {sorted(raw.vocab)} do not match the checkpoint vocabulary {sorted(vocab)}")
    raw = core.build_dataset(raw.sequences, vocab=vocab)
    return core.normalize_times(raw, cfg.train_fraction, scale=float(P.meta["time_scale"]))


def _views(d: core.Dataset, cfg: Config) -> tuple[core.View, core.View]:
    return core.split(d, core.SplitSpec(cfg.train_fraction))


def _spec(cfg: Config) -> hs.HawkesSpec:
    dim = len(cfg.base_rates)
    if cfg.kernels == "benchmark":
        if dim != 2:
            raise CliError("the benchmark kernels are two-dimensional; give two base_rates")
        kernels = hs.benchmark_kernels()
    else:
        kernels = tuple(tuple(hs.KernelSpec("zero", ()) for _ in range(dim)) for _ in range(dim))
    return hs.HawkesSpec(tuple(cfg.base_rates), kernels, cfg.horizon, cfg.n_sequences)


def _write_latents(path: Path, latents: dict, d: core.Dataset) -> None:
    offsets = {s.id: s.offset for s in d.sequences}
    with path.open("w", encoding="utf-8") as fh:
        for s in d.sequences:
            evs = latents.get(s.id, [])
            rec = {"seq_id": s.id,
                   "events": [{"t": offsets[s.id] + d.time_scale * e.time, "m": d.vocab[e.mark],
                               "interval": int(e.interval), "logq": e.logq} for e in evs]}
            fh.write(json.dumps(rec) + "\n")


def _summary_runs(reports: list[ev.MetricReport]) -> ev.MetricReport:
    rep = reports[0]
    if len(reports) > 1:
        mae, dmae = ev.aggregate([r.mae for r in reports])
        mpa, dmpa = ev.aggregate([r.mpa for r in reports])
        rep.mae, rep.mpa = mae, mpa
        rep.ci = {"mae": dmae, "mpa": dmpa}
    return rep


# -- subcommands -----------------------------------------------------------------------------------
# Each handler returns (outputs, volatile): artifact key -> path, and the keys whose
# bytes legitimately vary between runs (wall-clock columns).

def cmd_simulate(a, cfg: Config):
    out = Path(a.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    spec = _spec(cfg)
    sim_ss, mask_ss = np.random.SeedSequence(cfg.seed).spawn(2)
    d = hs.simulate(spec, np.random.default_rng(sim_ss), workers=a.threads)
    outputs = {"data": out}
    if cfg.deletion > 0:
        mask = hs.make_deletion_mask(d, cfg.deletion, seed=int(mask_ss.generate_state(1)[0]),
                                     jitter=cfg.deletion_jitter)
        observed, held = hs.apply_deletion(d, mask)
        stem = out.name[:-len(".jsonl")] if out.name.endswith(".jsonl") else out.name
        full = out.with_name(stem + ".full.jsonl")
        held_path = out.with_name(stem + ".heldout.jsonl")
        mask_path = out.with_name(stem + ".mask.jsonl")
        core.write_jsonl(observed, out)
        core.write_jsonl(d, full)
        core.write_jsonl(held, held_path)
        hs.save_mask(mask, mask_path)
        outputs.update(full=full, held_out=held_path, mask=mask_path)
    else:
        core.write_jsonl(d, out)
    return outputs, set()


def cmd_train(a, cfg: Config):
    out = Path(a.out)
    out.mkdir(parents=True, exist_ok=True)
    d = _prepared(a.data, cfg)
    tr, _ = _views(d, cfg)
    res = trainer.fit(d, tr, cfg, a.variant, log_path=out / "train_log.csv", ckpt_dir=out,
                      early_stop=not a.no_early_stop)
    if res.diverged:
        log.warning("training diverged; checkpoints hold the last finite parameters")
    return {"best": out / "best", "last": out / "last", "train_log": out / "train_log.csv"}, {"train_log"}


def cmd_evaluate(a, cfg: Config):
    out = Path(a.out)
    out.mkdir(parents=True, exist_ok=True)
    P = pm.load(a.ckpt)
    d = _prepared(a.data, cfg, P)
    _, te = _views(d, cfg)
    reports = [ev.evaluate(P, te, seed=cfg.seed + r, cfg=cfg) for r in range(a.runs)]
    rep = _summary_runs(reports)
    outputs = {"summary": out / "summary.csv", "per_event": out / "per_event.csv"}
    ev.write_summary(rep, outputs["summary"])
    ev.write_per_event(reports[0], outputs["per_event"])
    if a.baseline:
        B = pm.load(a.baseline)
        base = ev.evaluate(B, te, seed=cfg.seed, cfg=cfg)
        outputs["drilldown"] = out / "drilldown.csv"
        ev.write_drilldown(ev.drilldown(base, reports[0]), outputs["drilldown"])
    return outputs, set()


def cmd_forecast(a, cfg: Config):
    out = Path(a.out)
    out.mkdir(parents=True, exist_ok=True)
    P = pm.load(a.ckpt)
    d = _prepared(a.data, cfg, P)
    _, te = _views(d, cfg)
    rep = ev.forecast(P, te, a.n or cfg.forecast_n, seed=cfg.seed, cfg=cfg)
    ev.write_forecast(rep, out / "forecast.csv")
    return {"forecast": out / "forecast.csv"}, set()


def cmd_impute(a, cfg: Config):
    out = Path(a.out)
    out.mkdir(parents=True, exist_ok=True)
    P = pm.load(a.ckpt)
    d = _prepared(a.data, cfg, P)
    held = core.ingest(a.held_out)
    cap = int(P.meta.get("cap", cfg.cap))
    buffers = trainer.sample_latents(d, P, cfg.seed, cap)
    latents = {b.seq_id: b.events for b in buffers}
    rep = ev.impute_eval(d, held, latents=latents, matching=cfg.matching)
    outputs = {"summary": out / "summary.csv", "per_event": out / "per_event.csv",
               "latents": out / "latents.jsonl"}
    ev.write_summary(rep, outputs["summary"])
    ev.write_per_event(rep, outputs["per_event"])
    mm.dump_latents(outputs["latents"], buffers, {s.id: s.times for s in d.sequences}, d.vocab,
                    d.time_scale, {s.id: s.offset for s in d.sequences})
    return outputs, set()


def cmd_finetune_pp(a, cfg: Config):
    out = Path(a.out)
    out.mkdir(parents=True, exist_ok=True)
    P = pm.load(a.ckpt)
    d = _prepared(a.data, cfg, P)
    tr, _ = _views(d, cfg)
    nbar = cfg.nbar if a.nbar is None else a.nbar
    res = trainer.finetune_pp(tr, P, nbar, cfg, impute_on=d)
    outputs = {"finetuned": out / "finetuned", "latents": out / "latents.jsonl"}
    res.store.meta["nbar"] = nbar
    pm.save(res.store, outputs["finetuned"])
    _write_latents(outputs["latents"], res.latents, d)
    if a.held_out:
        rep = ev.impute_eval(d, core.ingest(a.held_out), latents=res.latents, matching=cfg.matching)
        outputs.update(summary=out / "summary.csv", per_event=out / "per_event.csv")
        ev.write_summary(rep, outputs["summary"])
        ev.write_per_event(rep, outputs["per_event"])
    return outputs, set()


def cmd_sweep_mu(a, cfg: Config):
    out = Path(a.out)
    out.mkdir(parents=True, exist_ok=True)
    d = _prepared(a.data, cfg)
    tr, _ = _views(d, cfg)
    rows = ev.sweep_mu(tr, cfg.mu_sweep, cfg)
    ev.write_sweep(rows, out / "sweep.csv")
    return {"sweep": out / "sweep.csv"}, set()


def cmd_baseline_mc(a, cfg: Config):
    out = Path(a.out)
    out.mkdir(parents=True, exist_ok=True)
    d = _prepared(a.data, cfg)
    tr, te = _views(d, cfg)
    res = ev.markov_baseline(tr, te, a.max_order, cfg.val_fraction)
    outputs = {"orders": out / "orders.csv", "summary": out / "summary.csv", "per_event": out / "per_event.csv"}
    with open(outputs["orders"], "w", encoding="utf-8", newline="") as fh:
        fh.write("order,val_mpa,test_mpa,best\n")
        for k in sorted(res.test_mpa):
            fh.write(f"{k},{res.val_mpa[k]!r},{res.test_mpa[k]!r},{int(k == res.best_order)}\n")
    ev.write_summary(res.best, outputs["summary"])
    ev.write_per_event(res.best, outputs["per_event"])
    return outputs, set()


COMMANDS = {
    "simulate": cmd_simulate,
    "train": cmd_train,
    "evaluate": cmd_evaluate,
    "forecast": cmd_forecast,
    "impute": cmd_impute,
    "finetune-pp": cmd_finetune_pp,
    "sweep-mu": cmd_sweep_mu,
    "baseline-mc": cmd_baseline_mc,
}

# arguments naming files the run reads
INPUT_ARGS = ("data", "ckpt", "baseline", "held_out", "config")


# -- argument parsing -----------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="imtpp", description="Marked point processes with missing events.")
    p.add_argument("--version", action="version", version=f"imtpp {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    def add(name, help_, data=True, ckpt=False, out_help="output directory"):
        sp = sub.add_parser(name, help=help_)
        sp.add_argument("--config", help="key = value configuration file")
        if data:
            sp.add_argument("--data", required=True, help="JSON Lines dataset")
            sp.add_argument("--format", default="jsonl", choices=["jsonl"])
        if ckpt:
            sp.add_argument("--ckpt", required=True, help="checkpoint file")
        sp.add_argument("--out", required=True, help=out_help)
        sp.add_argument("--seed", type=int, help="overrides the configured seed")
        sp.add_argument("--threads", type=int, default=1, help="worker processes (default 1)")
        sp.add_argument("-v", "--verbose", action="store_true")
        return sp

    add("simulate", "generate a synthetic Hawkes dataset", data=False, out_help="output JSONL file")
    sp = add("train", "train a model")
    sp.add_argument("--variant", choices=["full", "S", "R"], default="full")
    sp.add_argument("--no-early-stop", action="store_true")
    sp = add("evaluate", "one-step prediction metrics on the test split", ckpt=True)
    sp.add_argument("--runs", type=int, default=1, help="seeded repetitions for the spread column")
    sp.add_argument("--baseline", help="second checkpoint for a per-event drill-down")
    sp = add("forecast", "multi-step forecasting metrics", ckpt=True)
    sp.add_argument("--n", type=int, help="horizon (default: forecast_n)")
    sp = add("impute", "sample latents and score them against held-out events", ckpt=True)
    sp.add_argument("--held-out", required=True, help="JSON Lines file of deleted events")
    sp = add("finetune-pp", "budgeted imputation followed by fine-tuning", ckpt=True)
    sp.add_argument("--nbar", type=int, help="latents kept per sequence (default: nbar)")
    sp.add_argument("--held-out", help="score the kept latents against these deleted events")
    add("sweep-mu", "train and validate over the mu_bar grid")
    sp = add("baseline-mc", "Markov-chain mark baseline")
    sp.add_argument("--max-order", type=int, default=3)
    rp = sub.add_parser("replay", help="re-run a manifest and compare its reports")
    rp.add_argument("manifest")
    rp.add_argument("--out", required=True, help="directory for the re-run outputs")
    rp.add_argument("-v", "--verbose", action="store_true")
    return p


def _config_for(a) -> Config:
    return config_mod.load(a.config, seed=a.seed)


def _args_record(a) -> dict:
    rec = {k: v for k, v in vars(a).items() if k not in ("verbose", "command")}
    for k in INPUT_ARGS + ("out",):
        if rec.get(k):
            rec[k] = str(Path(rec[k]).resolve())
    return rec


def _inputs(a) -> dict:
    return {k: file_digest(getattr(a, k)) for k in INPUT_ARGS if getattr(a, k, None)}


def _guard_inputs(a, outputs: dict) -> None:
    ins = {Path(getattr(a, k)).resolve() for k in INPUT_ARGS if getattr(a, k, None)}
    for p in outputs.values():
        if Path(p).resolve() in ins:
            raise CliError(f"refusing to overwrite input file {p}")


def _planned_outputs(a) -> dict:
    out = Path(a.out)
    if a.command == "simulate":
        return {"data": out}
    return {"manifest": out / MANIFEST_NAME, "best": out / "best", "last": out / "last"}


def run(command: str, a, cfg: Config) -> dict:
    """Execute one subcommand and write its manifest; returns the manifest."""
    _guard_inputs(a, _planned_outputs(a))
    inputs = _inputs(a)
    t0 = time.perf_counter()
    outputs, volatile = COMMANDS[command](a, cfg)
    wall = time.perf_counter() - t0
    _guard_inputs(a, outputs)
    manifest = {
        "command": command,
        "args": _args_record(a),
        "config": cfg.to_dict(),
        "config_hash": cfg.digest(),
        "dataset_hash": inputs.get("data"),
        "inputs": inputs,
        "seed": cfg.seed,
        "code_version": __version__,
        "threads": getattr(a, "threads", 1),
        "wall_seconds": wall,
        "outputs": {k: {"path": str(Path(p).resolve()), "sha256": file_digest(p), "volatile": k in volatile}
                    for k, p in sorted(outputs.items())},
    }
    _write_json(manifest_path(command, a.out), manifest)
    return manifest


def replay(path, out) -> tuple[dict, list[str]]:
    """Re-execute the run recorded in ``path`` into ``out``; returns (new manifest, mismatches)."""
    old = json.loads(Path(path).read_text(encoding="utf-8"))
    if old.get("code_version") != __version__:
        log.warning("manifest was written by version %s, this is %s", old.get("code_version"), __version__)
    args = dict(old["args"])
    out = Path(out)
    if old["command"] == "simulate":
        out.mkdir(parents=True, exist_ok=True)
        args["out"] = str(out / Path(args["out"]).name)
    else:
        args["out"] = str(out)
    args["threads"] = 1
    a = argparse.Namespace(command=old["command"], verbose=False, **args)
    for k, digest in old["inputs"].items():
        if file_digest(getattr(a, k)) != digest:
            raise CliError(f"input {k} ({getattr(a, k)}) changed since the recorded run")
    cfg = Config(**old["config"])
    if cfg.digest() != old["config_hash"]:
        raise CliError("recorded configuration does not match its hash")
    new = run(old["command"], a, cfg)
    bad = []
    for k, rec in old["outputs"].items():
        got = new["outputs"].get(k)
        if rec["volatile"]:
            continue
        if got is None or got["sha256"] != rec["sha256"]:
            bad.append(k)
    return new, bad


def main(argv=None) -> int:
    parser = build_parser()
    a = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if a.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if a.command == "replay":
            _, bad = replay(a.manifest, a.out)
            if bad:
                print(f"replay differs in: {', '.join(bad)}", file=sys.stderr)
                return 1
            print("replay identical")
            return 0
        if a.threads < 1:
            parser.error("--threads must be at least 1")
        cfg = _config_for(a)
        run(a.command, a, cfg)
        return 0
    except (CliError, config_mod.ConfigError, pm.CheckpointError, core.ParseError,
            core.EmptyDatasetError, ev.EmptyEvaluation, OSError, ValueError, KeyError,
            trainer.TrainingDiverged, hs.RunawayIntensity) as exc:
        print(f"imtpp: error: {exc}", file=sys.stderr)
        return 1
