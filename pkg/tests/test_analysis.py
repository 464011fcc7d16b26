import numpy as np
import pytest

from conftest import make_batch
from blur.analysis import (
    MAX_PROBE_DIM,
    bounded_growth,
    constant_metric_probe,
    fd_noise,
    is_monotone_increasing,
    log_gap,
    metric_residual,
    metric_system,
    probe_jacobians,
    random_probe_states,
    symmetry_gap,
    synapse_norm_trace,
    unpack_symmetric,
    update_jacobian,
    update_map,
    weight_coords,
    write_matrix_csv,
)
from blur.errors import ConfigurationError
from blur.genome import backprop_init, random_init
from blur.inner_loop import FitnessReport, MLP, UnrollConfig, run_episode
from blur.network import Architecture, init_synapses
from blur.tasks import boolean_task


def _oracle_arch(sizes):
    return Architecture(sizes, multistate_synapses=False, normalize_activations=False,
                        backward_mode="mult_second_state_only")


def _batch(n=16, dim=2, seed=0, classes=2):
    rng = np.random.default_rng(seed)
    return make_batch(rng.normal(size=(n, dim)), rng.integers(0, classes, n), classes)


# -- Jacobian -------------------------------------------------------------------------------


def test_update_map_matches_sgd_step():
    arch = _oracle_arch((2, 3, 2))
    g = backprop_init(2, "section31", 0.1, "sigmoid")
    syn = init_synapses(arch, 2, 0)
    batch = _batch()
    net = MLP([w[0] for w in syn.forward], "sigmoid", "feedback")
    grads = net.gradients(batch.inputs, batch.labels)
    expected = -0.1 * np.concatenate([gr.ravel() for gr in grads])
    np.testing.assert_allclose(update_map(g, arch, syn, batch)(syn.flat_forward()), expected,
                               rtol=1e-10, atol=1e-14)


@pytest.mark.parametrize("act", ["identity", "sigmoid"])
def test_backprop_jacobian_symmetric(act):
    # Q is -lr times the Hessian of the loss, hence symmetric
    arch = _oracle_arch((2, 3, 2))
    g = backprop_init(2, "section31", 0.1, act)
    jac = update_jacobian(g, arch, init_synapses(arch, 2, 1), _batch())
    assert jac.dim == 2 * 3 + 3 * 2 + 3 + 2
    _, gap = symmetry_gap(jac)
    assert gap < 1e-6
    assert np.abs(jac.Q).max() > 1e-3


def test_linear_jacobian_matches_analytic_hessian():
    arch = _oracle_arch((2, 2, 2))
    lr = 0.1
    g = backprop_init(2, "section31", lr, "identity")
    syn = init_synapses(arch, 2, 2)
    batch = _batch(8)
    jac = update_jacobian(g, arch, syn, batch)
    net = MLP([w[0] for w in syn.forward], "identity", "feedback")
    w0 = syn.flat_forward()
    shapes = [w[0].shape for w in syn.forward]

    def grad(flat):
        parts, i = [], 0
        for s in shapes:
            parts.append(flat[i:i + np.prod(s)].reshape(s))
            i += np.prod(s)
        net.weights = parts
        return np.concatenate([gr.ravel() for gr in net.gradients(batch.inputs, batch.labels)])

    # the loss is bilinear in the two layers, so differences of gradients are exact
    hess = np.stack([grad(w0 + e) - grad(w0) for e in np.eye(w0.size)], axis=1)
    np.testing.assert_allclose(jac.Q, -lr * hess, atol=1e-8)


def test_jacobian_central_difference_order():
    arch = Architecture((2, 3, 2))
    g = random_init(2, 0, 0.3)
    syn = init_synapses(arch, 2, 0)
    batch = _batch(32)
    q1 = update_jacobian(g, arch, syn, batch, 1e-3).Q
    q2 = update_jacobian(g, arch, syn, batch, 5e-4).Q
    q4 = update_jacobian(g, arch, syn, batch, 2.5e-4).Q
    # O(h^2): halving h shrinks the change by about 4
    ratio = np.abs(q1 - q2).max() / np.abs(q2 - q4).max()
    assert 3.0 < ratio < 5.0


def test_jacobian_step_bounds():
    arch = Architecture((2, 2))
    for h in (1e-7, 1e-2):
        with pytest.raises(ConfigurationError):
            update_jacobian(random_init(2, 0), arch, init_synapses(arch, 2, 0), _batch(), h)


def test_jacobian_threads_deterministic():
    arch = Architecture((2, 3, 2))
    g = random_init(2, 0, 0.3)
    syn = init_synapses(arch, 2, 0)
    a = update_jacobian(g, arch, syn, _batch()).Q
    b = update_jacobian(g, arch, syn, _batch(), threads=4).Q
    np.testing.assert_array_equal(a, b)


def test_jacobian_coordinate_order_invariance():
    arch = Architecture((2, 3, 2))
    g = random_init(2, 0, 0.3)
    syn = init_synapses(arch, 2, 0)
    jac = update_jacobian(g, arch, syn, _batch())
    assert len(jac.coords) == jac.dim == len(set(jac.coords))
    # a permutation of coordinates permutes rows and columns alike
    perm = np.random.default_rng(0).permutation(jac.dim)
    delta = update_map(g, arch, syn, _batch())
    w0 = syn.flat_forward()
    inv = np.argsort(perm)
    h = 1e-5
    cols = []
    for b in perm:
        e = np.zeros(jac.dim)
        e[b] = h
        cols.append(((delta(w0 + e) - delta(w0 - e)) / (2 * h))[perm])
    np.testing.assert_allclose(np.stack(cols, axis=1)[np.ix_(inv, inv)], jac.Q, rtol=1e-12)


def test_weight_coords_count():
    syn = init_synapses(Architecture((2, 20, 2)), 2, 0)
    coords = weight_coords(syn)
    assert len(coords) == 2 * (3 * 20 + 21 * 2) == 204
    assert coords[0] == (0, 0, 0, 0)
    syn1 = init_synapses(Architecture((2, 20, 2), multistate_synapses=False), 2, 0)
    assert len(weight_coords(syn1)) == 102


# -- symmetry gap -----------------------------------------------------------------------------


def test_gap_of_symmetric_matrix_is_zero():
    q = np.array([[1.0, 2.0], [2.0, 5.0]])
    gap, mx = symmetry_gap(q)
    assert not gap.any() and mx == 0.0


def test_gap_example():
    gap, mx = symmetry_gap(np.array([[0.0, 1.0], [0.0, 0.0]]))
    assert mx == 1.0
    np.testing.assert_array_equal(gap, [[0, 1], [1, 0]])


def test_backprop_gap_below_noise_floor():
    arch = _oracle_arch((2, 5, 2))
    g = backprop_init(2, "section31", 0.5, "sigmoid")
    syn = init_synapses(arch, 2, 0)
    batch = _batch(64)
    _, gap = symmetry_gap(update_jacobian(g, arch, syn, batch))
    assert gap <= 1e-4
    assert gap <= 10 * fd_noise(g, arch, syn, batch)


def test_gap_csv_and_log(tmp_path):
    gap, _ = symmetry_gap(np.array([[0.0, 1.0], [0.0, 0.0]]))
    write_matrix_csv(tmp_path / "gap.csv", gap)
    back = np.loadtxt(tmp_path / "gap.csv", delimiter=",")
    np.testing.assert_array_equal(back, gap)
    lg = log_gap(gap)
    assert lg[0, 1] == 0.0 and np.isfinite(lg).all()


# -- metric probe ---------------------------------------------------------------------------


def test_metric_system_matches_definition():
    rng = np.random.default_rng(0)
    q = rng.normal(size=(4, 4))
    packed = rng.normal(size=10)
    g = unpack_symmetric(packed, 4)
    z = g @ q - (g @ q).T
    iu = np.triu_indices(4, 1)
    np.testing.assert_allclose(metric_system(q) @ packed, z[iu], rtol=1e-12)


def test_rotation_field_has_no_pd_metric():
    rot = np.array([[0.0, 1.0], [-1.0, 0.0]])
    res = probe_jacobians([rot, rot])
    assert res.null_dim == 2                 # g = [[a, b], [b, -a]]
    assert res.survivors == 2
    assert res.pd_survivors == 0
    assert not res.identity_survives
    assert res.span_max_min_eig is not None and res.span_max_min_eig < 1e-6


def test_symmetric_q_identity_survives():
    rng = np.random.default_rng(1)
    qs = []
    for _ in range(4):
        a = rng.normal(size=(5, 5))
        qs.append(a + a.T)
    res = probe_jacobians(qs)
    assert res.identity_survives
    assert res.joint_null_dim >= 1
    assert res.span_max_min_eig > 0.1


def test_backprop_genome_probe_identity_survives():
    arch = _oracle_arch((2, 3, 2))
    g = backprop_init(2, "section31", 0.1, "sigmoid")
    probes = random_probe_states(arch, 2, 4, seed=0)
    res = constant_metric_probe(g, arch, probes, _batch(32), check_tol=1e-5)
    assert res.identity_survives
    assert res.num_probes == 3
    assert res.span_max_min_eig > 0
    assert "identity metric survives: True" in res.summary()


def test_metric_residual_zero_for_compatible_metric():
    rng = np.random.default_rng(3)
    a = rng.normal(size=(3, 3))
    spd = a @ a.T + np.eye(3)
    s = rng.normal(size=(3, 3))
    q = np.linalg.inv(spd) @ (s + s.T)             # g q symmetric for g = spd
    assert metric_residual(spd, q) < 1e-12
    assert metric_residual(np.eye(3), q) > 1e-3


def test_probe_guards_dimension():
    arch = Architecture((2, 20, 2))
    with pytest.raises(ConfigurationError):
        constant_metric_probe(random_init(2, 0), arch, [init_synapses(arch, 2, 0)], _batch())
    small = Architecture((2, 5, 2), multistate_synapses=False)
    assert init_synapses(small, 2, 0).flat_forward().size <= MAX_PROBE_DIM
    with pytest.raises(ConfigurationError):
        constant_metric_probe(random_init(2, 0), arch, [], _batch())


def test_random_probe_states_distinct_and_reproducible():
    arch = Architecture((2, 3, 2))
    a = random_probe_states(arch, 2, 3, seed=4)
    b = random_probe_states(arch, 2, 3, seed=4)
    for x, y in zip(a, b):
        np.testing.assert_array_equal(x.flat_forward(), y.flat_forward())
    assert not np.array_equal(a[0].flat_forward(), a[1].flat_forward())


# -- norm diagnostics ---------------------------------------------------------------------------


def test_norm_trace_reads_recorded_values():
    arch = Architecture((2, 6, 2), synapse_stabilizer="oja")
    _, report = run_episode(random_init(2, 0).replace(oja_multiplier=1.0), arch,
                            boolean_task("and"), UnrollConfig(12, 2, 32))
    trace = synapse_norm_trace(report)
    np.testing.assert_array_equal(trace.max, report.norm_max.max(axis=1))
    np.testing.assert_allclose(trace.mean, report.norm_mean.mean(axis=1))
    assert not trace.diverged


def test_norm_trace_of_immediately_diverged_episode(recwarn):
    nan = np.full((3, 2), np.nan)
    trace = synapse_norm_trace(FitnessReport([0.5] * 3, 0.5, nan, nan, True, 0))
    assert trace.diverged and np.isnan(trace.max).all()
    assert not [w for w in recwarn if issubclass(w.category, RuntimeWarning)]


def test_monotone_detector():
    assert is_monotone_increasing([1, 2, 3, 4])
    assert not is_monotone_increasing([1, 2, 2, 4])
    assert is_monotone_increasing([1, 2, 2, 4], strict=False)
    assert is_monotone_increasing([9, 0, 1, 2], start=1)
    assert not is_monotone_increasing([1])


def test_bounded_growth():
    flat = np.ones(100)
    assert bounded_growth(flat)
    grow = np.exp(np.linspace(0, 10, 100))
    assert not bounded_growth(grow)
    assert not bounded_growth(np.r_[flat[:60], np.inf, flat[:39]])
    assert not bounded_growth(flat[:40])
