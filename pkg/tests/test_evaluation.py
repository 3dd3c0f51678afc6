import math

import numpy as np
import pytest

from imtpp import core, diffgraph as dg, evaluation as ev, miss_mtpp as mm, obs_mtpp as om
from imtpp.config import Config

from conftest import make_dataset, small_store


def _view(d, start=1):
    return core.View(d, [start] * len(d.sequences), [len(s) for s in d.sequences])


def _seqs_from_marks(mark_lists, prefix="s"):
    out = []
    for i, marks in enumerate(mark_lists):
        out.append(core.Sequence(f"{prefix}{i}", tuple(core.Event(str(x), float(k + 1)) for k, x in enumerate(marks))))
    return out


def test_latent_free_predictions_match_direct_recursion(dataset):
    P = small_store(dataset)
    P.meta["cap"] = 0
    view = _view(dataset)
    rep = ev.evaluate(P, view, cfg=Config(forecast_cap=0))
    seq = dataset.sequences[1]
    batch = om.pack(dataset, [seq])
    s = om.initial_state(batch, P)
    m = dg.Tensor(np.zeros((1, P.dims.miss_state)))
    mine = []
    for j in range(1, len(seq)):
        t_hat, _ = om.predict_next(s, m, batch.times[:, j - 1], P)
        mine.append(seq.offset + dataset.time_scale * t_hat[0])
        s = om.observe(s, batch, j, P)
    got = [p for sid, p in zip(rep.seq_ids, rep.pred_t) if sid == seq.id]
    np.testing.assert_allclose(got, mine, rtol=1e-12)


def test_evaluate_is_first_forecast_step(dataset):
    P = small_store(dataset)
    view = _view(dataset, start=6)
    # rollouts consume branch noise per step, so compare without rollout latents
    cfg = Config(forecast_cap=0)
    one = ev.evaluate(P, view, seed=3, cfg=cfg)
    fc = ev.forecast(P, view, 3, seed=3, cfg=cfg)
    assert fc.steps[0].mae == pytest.approx(one.mae) and fc.steps[0].mpa == one.mpa
    assert fc.counts.tolist() == [sum(len(s) - 6 - h for s in dataset.sequences) for h in range(3)]


def test_errors_are_in_dataset_units():
    raw = make_dataset(n_seq=4)
    norm = core.normalize_times(raw)
    P = small_store(norm)
    rep = ev.evaluate(P, _view(norm))
    np.testing.assert_allclose(rep.true_t, np.concatenate([s.times[1:] for s in raw.sequences]), rtol=1e-12)


def test_per_event_csv_recomputes_summary(tmp_path, dataset):
    rep = ev.evaluate(small_store(dataset), _view(dataset))
    ev.write_per_event(rep, tmp_path / "pe.csv")
    mae, mpa, n = ev.read_per_event(tmp_path / "pe.csv")
    assert n == rep.n_events
    assert mae == pytest.approx(rep.mae, rel=1e-12) and mpa == pytest.approx(rep.mpa, rel=1e-12)


def test_empty_views_raise(dataset, store):
    empty = core.View(dataset, [len(s) for s in dataset.sequences], [len(s) for s in dataset.sequences])
    with pytest.raises(ev.EmptyEvaluation):
        ev.evaluate(store, empty)
    with pytest.raises(ev.EmptyEvaluation):
        ev.forecast(store, empty, 2)


def test_drilldown_sums_to_mae_difference(dataset):
    view = _view(dataset)
    a = ev.evaluate(small_store(dataset, seed=1), view)
    b = ev.evaluate(small_store(dataset, seed=2), view)
    dd = ev.drilldown(a, b)
    assert dd.total == pytest.approx(a.n_events * (a.mae - b.mae), rel=1e-9)
    assert np.all(np.diff(dd.gains) <= 0)
    assert sorted(dd.keys) == sorted(a.keys())
    # telescoping: prefix sums of sorted gains end at the total
    assert np.cumsum(dd.gains)[-1] == pytest.approx(dd.total)
    b.seq_ids = b.seq_ids[::-1]
    with pytest.raises(ValueError):
        ev.drilldown(a, b)


def test_markov_learns_a_cycle():
    cycle = [[k % 3 for k in range(i, i + 40)] for i in range(20)]
    d = core.build_dataset(_seqs_from_marks(cycle))
    tr, te = core.split(d)
    rep = ev.markov_baseline(tr, te, max_order=2)
    assert rep.test_mpa[1] == 1.0 and rep.best.mpa == 1.0 and rep.best_order == 1


def test_markov_on_uniform_marks_is_chance():
    gen = np.random.default_rng(0)
    d = core.build_dataset(_seqs_from_marks(gen.integers(0, 5, size=(200, 60)).tolist()))
    tr, te = core.split(d)
    rep = ev.markov_baseline(tr, te, max_order=1)
    assert abs(rep.test_mpa[1] - 0.2) < 0.03


def test_markov_picks_order_two():
    # x_i = x_{i-1} xor x_{i-2}: invisible at order one, exact at order two
    gen = np.random.default_rng(1)
    seqs = []
    for _ in range(60):
        x = list(gen.integers(0, 2, size=2))
        while len(x) < 50:
            x.append(x[-1] ^ x[-2])
        seqs.append(x)
    d = core.build_dataset(_seqs_from_marks(seqs))
    tr, te = core.split(d)
    rep = ev.markov_baseline(tr, te, max_order=3)
    assert rep.best_order == 2 and rep.test_mpa[2] > 0.99 and rep.test_mpa[1] < 0.8


def test_markov_beats_marginal_in_sample():
    gen = np.random.default_rng(4)
    d = core.build_dataset(_seqs_from_marks(gen.integers(0, 4, size=(30, 25)).tolist()))
    tr, _ = core.split(d)
    marks = ev._mark_lists(tr)
    for k in (1, 2):
        chain = ev.MarkovChain(k, d.n_marks).fit(m[:b] for m, b in zip(marks, tr.stop))
        assert ev._chain_mpa(chain, marks, tr)[0] >= ev.marginal_mpa(tr) - 1e-12


def test_markov_probabilities_normalize():
    chain = ev.MarkovChain(2, 3).fit([[0, 1, 2, 0, 1]])
    for i in range(6):
        assert chain.probs([0, 1, 2, 0, 1, 2], i).sum() == pytest.approx(1.0)


def _imputation_fixture():
    full = [core.Event("a", 1.0), core.Event("b", 2.0), core.Event("b", 3.0), core.Event("a", 4.0),
            core.Event("a", 5.0)]
    obs = core.build_dataset([core.Sequence("s", (full[0], full[2], full[4]))], vocab=["a", "b"])
    held = core.build_dataset([core.Sequence("s", (full[1], full[3]))], vocab=["a", "b"])
    return obs, held


def test_impute_eval_perfect_and_empty():
    obs, held = _imputation_fixture()
    perfect = {"s": [mm.LatentEvent(2.0, 1, 0.0, 0.0, 0), mm.LatentEvent(4.0, 0, 0.0, 0.0, 1)]}
    rep = ev.impute_eval(obs, held, latents=perfect)
    assert rep.mae == 0.0 and rep.mpa == 1.0 and rep.extra["missed"] == 0
    none = ev.impute_eval(obs, held, latents={"s": []})
    assert none.mae == 2.0 and none.mpa == 0.0 and none.extra["missed"] == 2


def test_impute_eval_matching_rules():
    obs = core.build_dataset([core.Sequence("s", (core.Event("a", 0.0), core.Event("a", 10.0)))], vocab=["a"])
    held = core.build_dataset([core.Sequence("s", (core.Event("a", 1.0), core.Event("a", 2.0)))], vocab=["a"])
    lat = {"s": [mm.LatentEvent(1.9, 0, 0.0, 0.0, 0)]}
    in_order = ev.impute_eval(obs, held, latents=lat)
    best = ev.impute_eval(obs, held, latents=lat, matching="hungarian")
    assert in_order.abs_errors.tolist() == pytest.approx([0.9, 10.0])
    assert best.abs_errors.tolist() == pytest.approx([10.0, 0.1])
    with pytest.raises(ValueError):
        ev.impute_eval(obs, held, latents=lat, matching="greedy")


def test_single_value_sweep_is_best(dataset):
    tr, _ = core.split(dataset)
    rows = ev.sweep_mu(tr, [1.0], Config(epochs=1, batch=4, cap=1))
    assert len(rows) == 1 and rows[0].best
    with pytest.raises(ValueError):
        ev.sweep_mu(tr, [], Config(epochs=1))


def test_aggregate_spread():
    assert ev.aggregate([1.0, 2.0, 3.0]) == (2.0, 1.0)
    assert ev.aggregate([5.0]) == (5.0, 0.0)


def test_perfect_and_majority_predictors():
    rep = ev._report(["s"] * 3, [1, 2, 3], [1.0, 2.0, 3.0], [1.0, 2.0, 3.0], None, list("aba"), list("aba"))
    assert rep.mae == 0 and rep.mpa == 1
    gen = np.random.default_rng(0)
    marks = (gen.random((100, 40)) < 0.3).astype(int).tolist()
    d = core.build_dataset(_seqs_from_marks(marks))
    v = _view(d)
    n = v.n_targets
    assert abs(ev.marginal_mpa(v) - 0.7) < 3 * math.sqrt(0.21 / n) + 0.005


def test_constant_gap_matching_predictor_has_zero_error(dataset):
    from imtpp import params as pm
    seqs = [core.Sequence(f"s{i}", tuple(core.Event("a", 2.0 * k) for k in range(8))) for i in range(3)]
    d = core.normalize_times(core.build_dataset(seqs))
    P = pm.ParameterStore(pm.Dims(1))
    P["a_t"].value[...] = [0.0, -50.0]   # point mass at gap 1 in normalized units
    P.meta["cap"] = 0
    # the median is exactly exp(mu); the mean carries the sigma floor's exp(sigma^2 / 2)
    rep = ev.evaluate(P, _view(d), cfg=Config(forecast_cap=0), rule="median")
    assert rep.mae < 1e-9


def test_forecast_one_step_equals_evaluate(dataset):
    P = small_store(dataset)
    one = ev.evaluate(P, _view(dataset), seed=5)
    fc = ev.forecast(P, _view(dataset), 1, seed=5)
    assert fc.steps[0].mae == one.mae and fc.steps[0].mpa == one.mpa
    again = ev.forecast(P, _view(dataset), 1, seed=5)
    assert again.mae.tolist() == fc.mae.tolist()


def test_model_against_itself_has_zero_gains(dataset):
    rep = ev.evaluate(small_store(dataset), _view(dataset))
    dd = ev.drilldown(rep, rep)
    assert np.all(dd.gains == 0) and dd.positive_fraction == 0


def test_empty_held_out_is_vacuous():
    obs, held = _imputation_fixture()
    rep = ev.impute_eval(obs, core.build_dataset([core.Sequence("other", held.sequences[0].events)]),
                         latents={"s": []})
    assert rep.n_events == 0


def test_duplicate_mu_gives_identical_rows(dataset):
    tr, _ = core.split(dataset)
    rows = ev.sweep_mu(tr, [0.5, 0.5], Config(epochs=1, batch=4, cap=1))
    assert (rows[0].mae, rows[0].mpa) == (rows[1].mae, rows[1].mpa)


def test_sweep_reports_an_optimum(dataset):
    tr, _ = core.split(dataset)
    rows = ev.sweep_mu(tr, [0.1, 1.0, 5.0], Config(epochs=1, batch=4, cap=1))
    assert sum(r.best for r in rows) == 1
    best = next(r for r in rows if r.best)
    assert best.mae == min(r.mae for r in rows)
