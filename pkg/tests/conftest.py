import numpy as np
import pytest

from imtpp import core, params as pm, trainer
from imtpp.config import Config


def make_dataset(n_seq=6, length=12, n_marks=2, seed=0):
    gen = np.random.default_rng(seed)
    marks = [chr(ord("a") + i) for i in range(n_marks)]
    seqs = []
    for i in range(n_seq):
        t = np.cumsum(gen.exponential(1.0, size=length)) + 0.5
        evs = tuple(core.Event(marks[(i + k) % n_marks if k < n_marks else int(gen.integers(n_marks))], float(x))
                    for k, x in enumerate(t))
        seqs.append(core.Sequence(f"s{i}", evs))
    return core.build_dataset(seqs, vocab=marks)


@pytest.fixture
def dataset():
    return core.normalize_times(make_dataset())


@pytest.fixture
def small_dims():
    return pm.Dims(2, 3, 4, 3, 5)


def small_store(d, seed=0, time_head="lognormal", dims=None, mu_bar=1.0, scale=1.0):
    dims = dims or pm.Dims(d.n_marks, 3, 4, 3, 5)
    P = pm.ParameterStore.initialize(dims, np.random.default_rng(seed), time_head, mu_bar,
                                     {"vocab": list(d.vocab), "time_scale": d.time_scale, "cap": 2})
    if scale != 1.0:
        for t in P.tensors.values():
            t.value *= scale
    # exercise the zero-initialized input weights too
    gen = np.random.default_rng(seed + 100)
    for n in ("w_tv", "g_tg"):
        P[n].value[...] = gen.uniform(-0.1, 0.1, size=P[n].shape)
    return P


@pytest.fixture
def store(dataset):
    return small_store(dataset)


@pytest.fixture
def fast_cfg():
    return Config(epochs=2, batch=4, bptt=5, cap=2, patience=5)


def full_store(d, cfg):
    return trainer.make_store(d, cfg)


# -- acceptance reporting -----------------------------------------------------------------

_CRITERIA: dict[int, str] = {}


@pytest.fixture
def criterion():
    """Record one verdict line per acceptance criterion, printed in the terminal summary."""
    def record(number: int, ok: bool, detail: str) -> bool:
        line = f"criterion {number:2d}: {'PASS' if ok else 'FAIL'}  {detail}"
        _CRITERIA[number] = line
        print(line)
        return ok
    return record


def pytest_terminal_summary(terminalreporter):
    if _CRITERIA:
        terminalreporter.section("acceptance criteria")
        for k in sorted(_CRITERIA):
            terminalreporter.write_line(_CRITERIA[k])
