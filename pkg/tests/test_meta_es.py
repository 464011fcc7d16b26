import math

import numpy as np
import pytest

from conftest import make_genome
from blur.errors import ConfigurationError, ValidationError
from blur.genome import GenomeLayout, backprop_init, encode, zero_update
from blur.inner_loop import UnrollConfig
from blur.meta_es import CMAES, EsConfig, EsHistory, accuracy_fitness, cma_es_optimize, curriculum
from blur.network import Architecture
from blur.tasks import boolean_task, dataset_task, Dataset


def sphere(x, seed=0, generation=0):
    return -float(np.sum(np.square(x)))


def test_sphere_converges():
    cfg = EsConfig(population=16, sigma0=0.5, generations=300, confirm_best=False, seed=0)
    best, history = cma_es_optimize(sphere, np.full(10, 1.0), cfg)
    assert history.best[-1] > -1e-6
    assert sphere(best) == history.best[-1]


def test_best_ever_monotone():
    cfg = EsConfig(population=4, sigma0=1.0, generations=60, seed=3)
    noisy = lambda x, seed, generation: sphere(x) + np.random.default_rng(seed).normal(0, 0.1)
    _, history = cma_es_optimize(noisy, np.array([2.0, -1.0]), cfg)
    assert np.all(np.diff(history.best) >= 0)


def test_history_reproducible():
    cfg = EsConfig(population=8, sigma0=0.3, generations=20, seed=5)
    a = cma_es_optimize(sphere, np.ones(4), cfg)
    b = cma_es_optimize(sphere, np.ones(4), cfg)
    np.testing.assert_array_equal(a[0], b[0])
    assert a[1].to_dict() == b[1].to_dict()


def test_parallel_matches_serial():
    cfg = EsConfig(population=8, sigma0=0.3, generations=10, seed=5)
    a = cma_es_optimize(sphere, np.ones(4), cfg)
    b = cma_es_optimize(sphere, np.ones(4), EsConfig(**{**cfg.__dict__, "threads": 4}))
    assert a[1].best == b[1].best


def test_resume_is_bit_identical():
    cfg = EsConfig(population=6, sigma0=0.4, generations=12, seed=2)
    _, full = cma_es_optimize(sphere, np.ones(3), cfg)
    states = {}

    def keep(generation, state, history, best_x):
        states[generation] = state
        return generation == 4

    cma_es_optimize(sphere, np.ones(3), cfg, callback=keep)
    _, resumed = cma_es_optimize(sphere, np.ones(3), cfg, resume=states[4])
    assert resumed.best == full.best
    assert resumed.sigma == full.sigma


def test_common_random_numbers():
    seen = []

    def record(x, seed, generation):
        seen.append((generation, seed))
        return sphere(x)

    cma_es_optimize(record, np.ones(2), EsConfig(population=5, generations=3, confirm_best=False))
    for g in range(3):
        assert len({s for gen, s in seen if gen == g}) == 1
    assert len({s for _, s in seen}) == 3


def test_confirm_best_uses_fresh_seed():
    seeds = []

    def record(x, seed, generation):
        seeds.append(seed)
        return sphere(x)

    cma_es_optimize(record, np.ones(2), EsConfig(population=4, generations=1, confirm_best=True))
    assert len(seeds) == 5
    assert len(set(seeds)) == 2


def test_nonfinite_fitness_clamped(caplog):
    calls = {"n": 0}

    def sometimes_nan(x, seed, generation):
        calls["n"] += 1
        return math.nan if calls["n"] % 3 == 0 else sphere(x)

    _, history = cma_es_optimize(sometimes_nan, np.ones(3), EsConfig(population=6, generations=5,
                                                                      confirm_best=False))
    assert all(math.isfinite(v) for v in history.mean)
    assert "clamped" in caplog.text


def test_all_nonfinite_rejected():
    with pytest.raises(ValidationError):
        cma_es_optimize(lambda x, seed, generation: math.nan, np.ones(2),
                        EsConfig(population=4, generations=1))


def test_default_population():
    es = CMAES(np.zeros(25), 0.1)
    assert es.lam == 4 + int(3 * math.log(25))
    assert es.mu == es.lam // 2


def test_covariance_stays_positive_definite():
    es = CMAES(np.ones(5), 0.5, seed=0)
    for _ in range(50):
        xs = es.ask()
        es.tell(xs, [np.sum(x ** 2) for x in xs])
        np.testing.assert_allclose(es.C, es.C.T)
        assert np.linalg.eigvalsh(es.C).min() > 0
        assert es.sigma > 0


@pytest.mark.parametrize("kwargs", [dict(population=3), dict(sigma0=0.0), dict(fitness="loss"),
                                    dict(curriculum_period=0), dict(population=4, parents=5)])
def test_config_validation(kwargs):
    with pytest.raises(ConfigurationError):
        EsConfig(**kwargs)


def test_history_csv(tmp_path):
    _, history = cma_es_optimize(sphere, np.ones(2), EsConfig(population=4, generations=3))
    history.write_csv(tmp_path / "h.csv")
    lines = (tmp_path / "h.csv").read_text().splitlines()
    assert lines[0] == ",".join(EsHistory.CSV_HEADER)
    assert len(lines) == 4
    assert EsHistory.from_dict(history.to_dict()) == history


# -- curriculum ----------------------------------------------------------------------------


def test_curriculum_examples():
    cfg = EsConfig(unroll=UnrollConfig(10), curriculum_period=50)
    assert curriculum(cfg, 0).unroll_steps == 10
    assert curriculum(cfg, 49).unroll_steps == 10
    assert curriculum(cfg, 50).unroll_steps == 15
    assert curriculum(cfg, 120).unroll_steps == 20


def test_curriculum_infinite_period_constant():
    cfg = EsConfig(unroll=UnrollConfig(10))
    assert {curriculum(cfg, g).unroll_steps for g in (0, 50, 10_000)} == {10}


# -- accuracy fitness ------------------------------------------------------------------------


def _fitness(tasks, genome, unroll, kind="train", **arch):
    layout = GenomeLayout.for_genome(genome)
    cfg = EsConfig(unroll=unroll, fitness=kind)
    fn = accuracy_fitness(tasks, Architecture((2, 20, 2), **arch), cfg, layout)
    return fn, encode(genome, layout)


def test_zero_update_genome_scores_chance():
    rng = np.random.default_rng(0)
    data = Dataset(rng.normal(size=(2000, 2)), np.arange(2000) % 10, 10)
    fn, x = _fitness([dataset_task("noise", data)], zero_update(2, "tanh"), UnrollConfig(5, 10, 128))
    scores = [fn(x, seed=s) for s in range(5)]
    assert abs(np.mean(scores) - 0.1) < 0.03


def test_backprop_genome_fitness_on_xor():
    g = backprop_init(2, "section31", 1.0, "sigmoid")
    fn, x = _fitness([boolean_task("xor")], g, UnrollConfig(60, 10, 128), kind="eval",
                     multistate_synapses=False, backward_mode="mult_second_state_only",
                     normalize_activations=False)
    assert np.mean([fn(x, seed=s) for s in range(3)]) > 0.9


def test_fitness_is_mean_over_tasks():
    g = make_genome(2, "tanh", eta_tilde=0.05)
    unroll = UnrollConfig(4, 3, 32)
    a, x = _fitness([boolean_task("and")], g, unroll)
    b, _ = _fitness([boolean_task("xor")], g, unroll)
    both, _ = _fitness([boolean_task("and"), boolean_task("xor")], g, unroll)
    assert both(x, seed=7) == pytest.approx((a(x, seed=7) + b(x, seed=7)) / 2)


def test_invalid_genome_scores_chance():
    g = zero_update(2, "tanh")
    fn, x = _fitness([boolean_task("and")], g, UnrollConfig(2, 2, 16))
    layout = GenomeLayout.for_genome(g)
    x = x.copy()
    x[layout.size - 2] = -1.0              # a norm_std entry
    assert fn(x) == 0.5


def test_fitness_deterministic_per_seed():
    g = make_genome(2, "tanh", eta_tilde=0.05)
    fn, x = _fitness([boolean_task("and")], g, UnrollConfig(3, 2, 16))
    assert fn(x, seed=3) == fn(x, seed=3)


def test_fitness_needs_tasks():
    with pytest.raises(ConfigurationError):
        _fitness([], zero_update(2), UnrollConfig(1))
