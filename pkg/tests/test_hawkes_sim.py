import math

import numpy as np
import pytest
from scipy import stats

from imtpp import core
from imtpp import hawkes_sim as hs


def one_dim_exponential(a=0.6, b=1.5, mu=0.5, horizon=2000.0):
    return hs.HawkesSpec((mu,), ((hs.KernelSpec("exponential", (a, b)),),), horizon, 1, ("x",))


def test_kernel_integrals_quadrature_vs_closed():
    for row in hs.benchmark_kernels():
        for k in row:
            assert k.integral() == pytest.approx(k.integral_closed(), rel=1e-8)


def test_integral_matrix_values():
    G = hs.integral_matrix(hs.default_spec())
    np.testing.assert_allclose(G, [[0.8207, 0.1], [0.45, 0.25]], atol=1e-4)
    assert hs.spectral_radius(hs.default_spec()) < 1


def test_stationary_rates_solve_branching_equation():
    spec = hs.default_spec()
    lam = hs.stationary_rates(spec)
    G = hs.integral_matrix(spec)
    np.testing.assert_allclose(lam, np.asarray(spec.mu) + G @ lam, rtol=1e-12)


def test_sine_kernel_support_and_envelope():
    k = hs.KernelSpec("sine", (1 / 8, 4.0))
    assert k(np.array([-0.1, 4.01, 10.0])).tolist() == [0.0, 0.0, 0.0]
    t = np.linspace(0, 4, 401)
    assert np.all(k.envelope(t) >= k(t))
    assert k.envelope(np.array([4.5]))[0] == 0.0


def test_kernel_validation():
    with pytest.raises(ValueError):
        hs.KernelSpec("power_law", (0.2, 0.5, 0.9))
    with pytest.raises(ValueError):
        hs.KernelSpec("exponential", (1.0,))
    with pytest.raises(ValueError):
        hs.KernelSpec("gaussian", ())


def test_supercritical_spec_warns(caplog):
    k = hs.KernelSpec("exponential", (2.0, 1.0))
    hs.HawkesSpec((0.1,), ((k,),), 10.0, 1)
    assert "not stationary" in caplog.text


def test_delay_sampler_matches_normalized_kernel():
    gen = np.random.default_rng(0)
    for row in hs.benchmark_kernels():
        for k in row:
            x = k.sample_delay(20000, gen)
            grid = np.array([0.2, 0.7, 1.5, 3.0])
            mass = np.array([__import__("scipy").integrate.quad(k, 0, g, limit=200)[0] for g in grid])
            np.testing.assert_allclose([(x <= g).mean() for g in grid], mass / k.integral(), atol=0.015)


def test_intensity_at_least_base_rate():
    spec = hs.default_spec(horizon=50.0)
    t, dims = hs.simulate_sequence(spec, np.random.default_rng(3))
    for q in np.linspace(0, 50, 60):
        for i in range(2):
            assert hs.intensity(spec, t, dims, q, i) >= spec.mu[i]


def test_zero_kernels_give_poisson_counts():
    zero = hs.KernelSpec("zero", ())
    spec = hs.HawkesSpec((0.1, 0.2), ((zero, zero), (zero, zero)), 1000.0, 1)
    gen = np.random.default_rng(5)
    counts = [hs.simulate_sequence(spec, gen)[0].size for _ in range(10)]
    lam = 0.3 * 1000
    assert abs(np.mean(counts) - lam) < 3 * math.sqrt(lam / len(counts))


def test_thinning_time_rescaling_is_unit_exponential():
    a, b, mu = 0.6, 1.5, 0.5
    spec = one_dim_exponential(a, b, mu, horizon=14000.0)
    t, _ = hs.simulate_sequence(spec, np.random.default_rng(7))
    assert t.size > 10000
    # compensator of an exponential-kernel Hawkes process, by the usual recursion
    comp = np.empty(t.size)
    A = 0.0
    prev = 0.0
    total = 0.0
    for n, x in enumerate(t):
        total += mu * (x - prev) + (a / b) * A * (1 - math.exp(-b * (x - prev)))
        comp[n] = total
        A = A * math.exp(-b * (x - prev)) + 1.0
        prev = x
    gaps = np.diff(np.concatenate([[0.0], comp]))[:10000]
    assert stats.kstest(gaps, "expon").statistic < 0.02


def test_fixed_seed_is_byte_identical(tmp_path):
    spec = hs.default_spec(horizon=30.0, n_sequences=5)
    p1, p2 = tmp_path / "a.jsonl", tmp_path / "b.jsonl"
    core.write_jsonl(hs.simulate(spec, np.random.default_rng(11)), p1)
    core.write_jsonl(hs.simulate(spec, np.random.default_rng(11)), p2)
    assert p1.read_bytes() == p2.read_bytes()


def test_worker_pool_matches_serial():
    spec = hs.default_spec(horizon=30.0, n_sequences=6)
    a = hs.simulate(spec, np.random.default_rng(2))
    b = hs.simulate(spec, np.random.default_rng(2), workers=2)
    assert a == b


def test_cluster_and_thinning_agree_on_short_windows():
    spec = hs.default_spec(horizon=40.0)
    g1, g2 = np.random.default_rng(1), np.random.default_rng(2)
    a = np.array([hs.simulate_sequence(spec, g1)[0].size for _ in range(300)])
    b = np.array([hs.simulate_cluster(spec, g2)[0].size for _ in range(300)])
    z = (a.mean() - b.mean()) / math.sqrt(a.var() / a.size + b.var() / b.size)
    assert abs(z) < 4


def _data(n=40, horizon=60.0, seed=0):
    return hs.simulate(hs.default_spec(horizon=horizon, n_sequences=n), np.random.default_rng(seed))


def test_deletion_zero_fraction_is_identity():
    d = _data()
    obs, held = hs.apply_deletion(d, hs.make_deletion_mask(d, 0.0, seed=1))
    assert obs == d and len(held) == 0


def test_deletion_rejects_bad_fraction():
    with pytest.raises(ValueError):
        hs.make_deletion_mask(_data(n=2), 1.0, seed=0)


def test_deletion_count_in_binomial_band():
    d = _data(n=200, horizon=100.0)
    mask = hs.make_deletion_mask(d, 0.4, seed=3, jitter=0.0)
    n = d.n_events()
    k = sum(len(v) for v in mask.deleted.values())
    assert abs(k - 0.4 * n) < 3 * math.sqrt(n * 0.4 * 0.6)


def test_deletion_partition_and_merge(tmp_path):
    d = _data()
    mask = hs.make_deletion_mask(d, 0.3, seed=9)
    obs, held = hs.apply_deletion(d, mask)
    assert hs.merge(obs, held) == d
    for s in obs.sequences + held.sequences:
        assert np.all(np.diff(s.times) > 0)
    hs.save_mask(mask, tmp_path / "m.jsonl")
    again = hs.load_mask(tmp_path / "m.jsonl")
    assert again.deleted == mask.deleted and again.seed == mask.seed
    assert hs.apply_deletion(d, again) == (obs, held)


def test_deletion_spares_short_sequences(caplog):
    seqs = [core.Sequence("s", (core.Event("1", 0.0), core.Event("1", 1.0)))]
    d = core.build_dataset(seqs)
    mask = hs.make_deletion_mask(d, 0.9, seed=0, jitter=0.0)
    assert mask.deleted["s"] == ()


def test_kernel_point_values():
    k = hs.benchmark_kernels()
    assert k[0][0](np.array([0.0]))[0] == pytest.approx(0.2 * 0.5 ** -1.3, rel=1e-12)
    assert k[0][0](np.array([0.0]))[0] == pytest.approx(0.4925, abs=1e-4)
    assert k[1][1](np.array([math.pi / 2]))[0] == pytest.approx(0.125)
    assert k[1][1](np.array([4.0, 5.0]))[1] == 0.0


def test_empty_history_intensity_is_base_rate():
    spec = hs.default_spec()
    for i in range(2):
        assert hs.intensity(spec, np.empty(0), np.empty(0, dtype=np.intp), 3.0, i) == spec.mu[i]
