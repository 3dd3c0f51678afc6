import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import special, stats

from imtpp import diffgraph as dg
from imtpp import miss_mtpp as mm
from imtpp import obs_mtpp as om

from conftest import small_store


def _states(P, B, seed=0):
    gen = np.random.default_rng(seed)
    s = dg.Tensor(gen.uniform(-0.5, 0.5, (B, P.dims.obs_state)))
    m = dg.Tensor(gen.uniform(-0.5, 0.5, (B, P.dims.miss_state)))
    return s, m


def _run(P, t_k, t_next, seed=0, cap=5, record=True):
    B = len(t_k)
    s, m = _states(P, B)
    noise = mm.NoiseStream(np.random.default_rng(seed), record=record)
    res = mm.sample_interval_batch(s, m, np.zeros(B), np.asarray(t_k), np.asarray(t_next),
                                   np.ones(B, bool), P, noise, cap)
    return res, noise, s, m


def test_cap_zero_yields_nothing(store):
    res, noise, _, m = _run(store, [0.0, 1.0], [1.0, 3.0], cap=0)
    assert res.slots == [] and res.counts.tolist() == [0, 0]
    assert noise.recorded == []
    np.testing.assert_array_equal(res.m.value, m.value)


def test_latents_inside_interval_and_ordered(store):
    t_k = np.linspace(0, 5, 40)
    t_next = t_k + np.linspace(0.05, 6, 40)
    res, _, _, _ = _run(store, t_k, t_next, cap=5)
    assert res.violations == 0
    prev = t_k.copy()
    for rec in res.slots:
        a = rec.accepted
        assert np.all(rec.times[a] > prev[a]) and np.all(rec.times[a] < t_next[a])
        prev = np.where(a, rec.times, prev)
    assert res.counts.max() <= 5


def test_step_through_oracle(dataset):
    """Walk the slots of one row by hand and compare every recorded number."""
    P = small_store(dataset, scale=2.0)
    t_k, t_next = 0.4, 3.9
    res, noise, s, m = _run(P, [t_k], [t_next], seed=0, cap=5)
    draws = noise.recorded
    v = P.values()
    mv = m.value[0].copy()
    sv = s.value[0]
    cur, last = t_k, 0.0
    for rec, u in zip(res.slots, draws):
        raw = mv @ v["G_tm"] + sv @ v["G_ts"] + v["b_t"]
        mu, sig = raw[0], math.exp(np.clip(raw[1], math.log(1e-3), math.log(1e3)))
        width = t_next - cur
        F = stats.norm.cdf((math.log(width) - mu) / sig)
        keep = u[0, 0] < F
        assert bool(rec.accepted[0]) == keep
        assert rec.z_q[0] == pytest.approx((math.log(width) - mu) / sig, rel=1e-12)
        if not keep:
            break
        gap = math.exp(mu + sig * stats.norm.ppf(u[1, 0] * F))
        assert rec.times[0] == pytest.approx(cur + gap, rel=1e-9)
        logits = sv @ v["V_ys"] + mv @ v["V_ym"]
        y = int(rec.marks[0])
        lq = stats.lognorm.logpdf(gap, sig, scale=math.exp(mu)) - math.log(F) + logits[y] - special.logsumexp(logits)
        assert rec.logq[0] == pytest.approx(lq, rel=1e-8)
        tau = cur + gap
        step = tau - last
        emb = v["g_tg"] * tau + v["emb_y"][y] + v["g_dg"] * step + v["b_g"]
        mv = np.tanh(mv @ v["G_mm"] + emb @ v["G_mg"] + step * v["g_mt"] + v["b_m"])
        cur, last = tau, tau
    assert res.counts[0] >= 1
    np.testing.assert_allclose(res.m.value[0], mv, rtol=1e-10)
    assert res.counts[0] == sum(int(r.accepted[0]) for r in res.slots)


def test_replay_repeats_exactly(store):
    a, noise, _, _ = _run(store, [0.0, 2.0, 4.0], [3.0, 2.5, 9.0], seed=8)
    s, m = _states(store, 3)
    b = mm.sample_interval_batch(s, m, np.zeros(3), np.array([0.0, 2.0, 4.0]), np.array([3.0, 2.5, 9.0]),
                                 np.ones(3, bool), store, noise.replay(), 5)
    np.testing.assert_array_equal(a.m.value, b.m.value)
    np.testing.assert_array_equal(a.kl.value, b.kl.value)
    with pytest.raises(RuntimeError):
        mm.NoiseStream(np.random.default_rng(0)).replay()


def test_inactive_rows_untouched(store):
    s, m = _states(store, 2)
    res = mm.sample_interval_batch(s, m, np.zeros(2), np.zeros(2), np.full(2, 4.0), np.array([True, False]),
                                   store, mm.NoiseStream(np.random.default_rng(1)), 5)
    assert res.counts[1] == 0
    np.testing.assert_array_equal(res.m.value[1], m.value[1])


def test_prior_scales_with_mu_bar(dataset):
    P1 = small_store(dataset, mu_bar=1.0)
    P3 = small_store(dataset, mu_bar=3.0)
    s, m = _states(P1, 2)
    p1, y1 = mm.prior_emit(m, s, P1)
    p3, y3 = mm.prior_emit(m, s, P3)
    np.testing.assert_allclose(p3.mu.value, 3 * p1.mu.value)
    np.testing.assert_allclose(y3.logits.value, 3 * y1.logits.value)


def test_buffers_and_dump(tmp_path, store, dataset):
    buf, _ = mm.sample_interval(dg.Tensor(np.zeros((1, store.dims.obs_state))),
                                np.zeros((1, store.dims.miss_state)), (1.0, 6.0), store,
                                np.random.default_rng(2), cap=5, k=0, seq_id="s0")
    assert buf.bounds[0][1] - buf.bounds[0][0] + 1 == len(buf.events)
    assert all(1.0 < e.time < 6.0 for e in buf.events)
    assert buf.in_interval(3) == []
    path = tmp_path / "lat.jsonl"
    mm.dump_latents(path, [buf], {"s0": np.array([1.0, 6.0])}, dataset.vocab, time_scale=2.0)
    text = path.read_text()
    if buf.events:
        assert '"interval": [2.0, 12.0]' in text


def test_rollout_respects_prediction(store):
    s, m = _states(store, 4)
    noise = mm.NoiseStream(np.random.default_rng(3))
    _, _, t_hat, y, slots = mm.rollout_open(s, m, np.zeros(4), np.full(4, 1.0), np.ones(4, bool), store, noise, 5)
    assert np.all(t_hat > 1.0) and y.shape == (4,)
    for rec in slots:
        assert np.all(rec.times[rec.accepted] > 1.0)


@settings(max_examples=40, deadline=None)
@given(width=st.floats(1e-4, 50.0), seed=st.integers(0, 10_000), start=st.floats(0.0, 100.0))
def test_no_latent_escapes(width, seed, start):
    from conftest import make_dataset, small_store as mk
    P = mk(make_dataset(n_seq=1), seed=seed % 7, scale=3.0)
    res, _, _, _ = _run(P, [start], [start + width], seed=seed)
    assert res.violations == 0
    for rec in res.slots:
        if rec.accepted[0]:
            assert start < rec.times[0] < start + width


def test_zero_network_heads():
    from imtpp import params as pm
    P = pm.ParameterStore(pm.Dims(2))
    s = dg.Tensor(np.zeros((1, P.dims.obs_state)))
    m = dg.Tensor(np.zeros((1, P.dims.miss_state)))
    q, _ = mm.posterior_emit(m, s, np.array([1.0]), np.array([3.5]), P)
    assert q.base.mu.value[0] == 0 and q.base.sigma.value[0] == 1 and q.upper.value[0] == 2.5
    P.mu_bar = 0.0
    P["c"].value[...] = [3.0, 2.0]
    prior, marks = mm.prior_emit(m, s, P)
    assert prior.mu.value[0] == 0 and prior.sigma.value[0] == 1
    np.testing.assert_allclose(marks.probs, 0.5)


def test_missing_embedding_recomputation(store):
    gen = np.random.default_rng(4)
    tau, gap, y = gen.uniform(0, 5, 3), gen.uniform(0, 2, 3), np.array([0, 1, 1])
    m0 = dg.Tensor(gen.uniform(-1, 1, (3, store.dims.miss_state)))
    gam = mm.embed_missing(tau, y, gap, store)
    v = store.values()
    want = v["g_tg"] * tau[:, None] + v["emb_y"][y] + v["g_dg"] * gap[:, None] + v["b_g"]
    np.testing.assert_allclose(gam.value, want, rtol=1e-12)
    got = mm.update_missing_state(m0, gam, gap, store).value
    ref = np.tanh(m0.value @ v["G_mm"] + want @ v["G_mg"] + gap[:, None] * v["g_mt"] + v["b_m"])
    np.testing.assert_allclose(got, ref, rtol=1e-12)


def test_vanishing_interval_has_no_events(store):
    res, _, _, _ = _run(store, [2.0, 2.0], [2.0, 2.0 + 1e-300])
    assert res.counts.tolist() == [0, 0]


def test_mean_count_matches_step_through_simulation(dataset):
    """Average latents per interval against a scalar re-simulation with its own generator."""
    P = small_store(dataset, seed=3)
    P["b_t"].value[...] = [math.log(0.5), math.log(0.3)]   # posterior mass near width/2 for width 1
    B = 10_000
    res, _, s, m = _run(P, np.zeros(B), np.ones(B), seed=1, cap=5)
    batched = res.counts.mean()
    gen = np.random.default_rng(77)
    v = P.values()
    sv, mv0 = s.value, m.value
    n = []
    for b in range(2000):
        mv, cur, last, k = mv0[b].copy(), 0.0, 0.0, 0
        while k < 5:
            raw = mv @ v["G_tm"] + sv[b] @ v["G_ts"] + v["b_t"]
            mu, sig = raw[0], math.exp(raw[1])
            F = stats.norm.cdf((math.log(1.0 - cur) - mu) / sig)
            if gen.random() >= F:
                break
            tau = cur + math.exp(mu + sig * stats.norm.ppf(gen.random() * F))
            logits = sv[b] @ v["V_ys"] + mv @ v["V_ym"]
            pr = np.exp(logits - special.logsumexp(logits))
            y = int(gen.choice(len(pr), p=pr))
            step = tau - last
            emb = v["g_tg"] * tau + v["emb_y"][y] + v["g_dg"] * step + v["b_g"]
            mv = np.tanh(mv @ v["G_mm"] + emb @ v["G_mg"] + step * v["g_mt"] + v["b_m"])
            cur = last = tau
            k += 1
        n.append(k)
    assert batched == pytest.approx(np.mean(n), rel=0.03)
