import warnings

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from invlab import encoder as enc
from invlab import invariance as inv
from invlab import world as w
from oracles import brute_ris


@st.composite
def instances(draw):
    n_classes = draw(st.integers(1, 4))
    units = draw(st.integers(1, 8))
    labels, traj = [], []
    tid = 0
    for y in range(n_classes):
        for _ in range(draw(st.integers(1, 3))):
            size = draw(st.integers(1, 3))
            labels += [y] * size
            traj += [tid] * size
            tid += 1
    labels, traj = labels[:30], traj[:30]
    n = len(labels)
    if n < 2:
        labels, traj, n = labels + labels, traj + traj, 2 * n
    seed = draw(st.integers(0, 2**31))
    rng = np.random.default_rng(seed)
    if draw(st.booleans()):
        h = rng.integers(-2, 3, size=(n, units)).astype(float)  # plenty of ties
    else:
        h = rng.normal(size=(n, units))
    k = draw(st.integers(1, units))
    return h, labels, traj, k


@settings(max_examples=300, deadline=None)
@given(inst=instances())
def test_pipeline_matches_brute_force(inst):
    h, labels, traj, k = inst
    expected = brute_ris(h.tolist(), labels, traj, k)
    cal = inv.calibrate(h, labels, traj_ids=traj)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        if expected is None:
            with pytest.raises(ValueError):
                inv.top_k_ris(cal, h, labels, traj, k)
            return
        got = inv.top_k_ris(cal, h, labels, traj, k).percentage
    assert abs(got - expected) <= 1e-12
    assert 0.0 <= got <= 100.0 + 1e-12


def test_order_statistic_threshold_example():
    h = np.arange(100.0)[:, None]
    labels = np.repeat(np.arange(10), 10)
    cal = inv.calibrate(h, labels)
    assert cal.threshold[0, 0] == 89.5
    assert np.flatnonzero(h[:, 0] > cal.threshold[0, 0]).tolist() == list(range(90, 100))


def test_constant_unit_is_degenerate():
    h = np.column_stack([np.ones(6), np.arange(6.0)])
    labels = [0, 0, 0, 1, 1, 1]
    traj = [0, 0, 1, 2, 2, 3]
    cal = inv.calibrate(h, labels, traj_ids=traj)
    assert cal.degenerate[0].all() and not cal.degenerate[1].any()
    _, table = inv.invariance_table(cal, h, labels, traj)
    assert np.all(table[0] == 0.0)


def test_uniform_three_class_rates_within_granularity():
    rng = np.random.default_rng(0)
    n = 99
    h = rng.normal(size=(n, 8))
    labels = np.repeat(np.arange(3), 33)
    cal = inv.calibrate(h, labels)
    ok = ~cal.degenerate
    assert np.all(np.abs(cal.global_rate - cal.priors[None, :])[ok] <= 1 / n)


def test_local_firing_rate_examples():
    assert inv.local_firing_rate(np.ones((4, 1), bool), [0, 0, 1, 1])[0] == 1.0
    fire = np.array([[1], [1], [1], [0]], bool)
    assert inv.local_firing_rate(fire, [0, 0, 1, 1])[0] == 0.75
    with pytest.raises(ValueError):
        inv.local_firing_rate(np.zeros((0, 1), bool), [])


def test_local_firing_rate_double_mean():
    rng = np.random.default_rng(3)
    fire = rng.uniform(size=(12, 5)) < 0.5
    traj = np.repeat(np.arange(3), 4)
    brute = np.mean([fire[traj == t].mean(axis=0) for t in range(3)], axis=0)
    assert np.allclose(inv.local_firing_rate(fire, traj), brute, rtol=0, atol=1e-15)


def _one_unit_example():
    # class 0 trajectories A, B; class 1 trajectories C, D; two samples each
    h = np.array([[10.0], [9.0], [8.0], [1.0], [7.0], [2.0], [3.0], [0.0]])
    labels = [0, 0, 0, 0, 1, 1, 1, 1]
    traj = [0, 0, 1, 1, 2, 2, 3, 3]
    return h, labels, traj


def test_one_unit_example_gives_75():
    h, labels, traj = _one_unit_example()
    cal = inv.calibrate(h, labels, traj_ids=traj)
    local, table = inv.invariance_table(cal, h, labels, traj)
    assert local.tolist() == [[0.75, 0.75]]
    assert cal.global_rate.tolist() == [[0.5, 0.5]]
    assert table.tolist() == [[1.5, 1.5]]
    assert inv.top_k_ris(cal, h, labels, traj, 1).percentage == pytest.approx(75.0, abs=1e-12)
    assert brute_ris(h.tolist(), labels, traj, 1) == pytest.approx(75.0, abs=1e-12)


def test_k_above_usable_units_rejected():
    h = np.column_stack([np.ones(4), np.arange(4.0)])
    cal = inv.calibrate(h, [0, 0, 1, 1], traj_ids=[0, 0, 1, 1])
    with pytest.raises(ValueError):
        inv.top_k_ris(cal, h, [0, 0, 1, 1], [0, 0, 1, 1], 2)
    with pytest.raises(ValueError):
        inv.top_k_ris(cal, h, [0, 0, 1, 1], [0, 0, 1, 1], 3)


def one_hot_features(labels, copies):
    labels = np.asarray(labels)
    n_classes = labels.max() + 1
    return np.tile(np.eye(n_classes)[labels], (1, copies))


@pytest.mark.parametrize("name", w.TRANSFORMATIONS)
def test_one_hot_class_encoder_scores_100(name):
    trajs = w.make_trajectory_dataset(name, 4, 3, 4, seed=0)
    _, labels, tids = inv.flatten_trajectories(trajs)
    h = one_hot_features(labels, 25)
    entries, _, _ = inv.ris_scores(h, labels, tids)
    assert entries[10].percentage == pytest.approx(100.0, abs=1e-12)
    assert entries[25].percentage == pytest.approx(100.0, abs=1e-12)


def test_random_encoder_scores_within_bounds_and_repeat():
    params = enc.init_params(np.random.default_rng(0), hidden=(32, 32), dim=32)
    data = {n: w.make_trajectory_dataset(n, 4, 3, 4, seed=1) for n in ("viewpoint", "instance")}
    a = inv.evaluate_all(params, data)
    b = inv.evaluate_all(params, data)
    assert a.to_dict() == b.to_dict()
    for per in a.scores.values():
        for ks in per.values():
            assert all(0.0 <= v <= 100.0 for v in ks.values())
    assert inv.RISReport.from_dict(a.to_dict()).to_dict() == a.to_dict()


def test_missing_dataset_is_skipped_with_warning():
    params = enc.init_params(np.random.default_rng(0))
    data = {"viewpoint": w.make_trajectory_dataset("viewpoint", 4, 3, 4, seed=1), "occlusion": None}
    with pytest.warns(UserWarning):
        rep = inv.evaluate_all(params, data, layers=("raw",))
    assert set(rep.scores["raw"]) == {"viewpoint"}


@settings(max_examples=100, deadline=None)
@given(seed=st.integers(0, 2**31), bump=st.floats(0.0, 2.0))
def test_raising_threshold_never_raises_rates(seed, bump):
    rng = np.random.default_rng(seed)
    h = rng.normal(size=(12, 3))
    traj = np.repeat(np.arange(4), 3)
    t = rng.normal(size=3)
    lo = inv._fires(h, 1.0, t)
    hi = inv._fires(h, 1.0, t + bump)
    assert np.all(inv.local_firing_rate(hi, traj) <= inv.local_firing_rate(lo, traj))
    assert np.all(hi.mean(0) <= lo.mean(0))


@settings(max_examples=100, deadline=None)
@given(inst=instances())
def test_kept_sign_is_at_least_as_invariant(inst):
    h, labels, traj, _ = inst
    labels, traj = np.asarray(labels), np.asarray(traj)
    cal = inv.calibrate(h, labels, traj_ids=traj)
    _, table = inv.invariance_table(cal, h, labels, traj)
    for c, y in enumerate(cal.classes):
        m = inv._round_half_up(cal.priors[c] * len(h))
        mask = labels == y
        for i in range(h.shape[1]):
            other = -cal.sign[i, c]
            t, g, d = inv._candidate(h[:, i : i + 1], m, other)
            local = inv.local_firing_rate(inv._fires(h[mask, i : i + 1], other, t), traj[mask])
            alt = inv._invariance(local, g, d)[0]
            assert table[i, c] >= alt - 1e-15
            if table[i, c] == alt:
                assert cal.sign[i, c] == 1.0


def test_permutations():
    rng = np.random.default_rng(5)
    h = rng.normal(size=(24, 6))
    labels = np.repeat(np.arange(3), 8)
    traj = np.repeat(np.arange(8), 3)
    cfg = inv.FiringConfig(ks=(1, 3))
    base, _, table = inv.ris_scores(h, labels, traj, cfg)
    rows = rng.permutation(24)
    shuffled, _, table_rows = inv.ris_scores(h[rows], labels[rows], traj[rows], cfg)
    cols = rng.permutation(6)
    swapped, _, table_cols = inv.ris_scores(h[:, cols], labels, traj, cfg)
    for k in cfg.ks:
        assert shuffled[k].percentage == pytest.approx(base[k].percentage, abs=1e-12)
        assert swapped[k].percentage == pytest.approx(base[k].percentage, abs=1e-12)
    assert np.allclose(table_rows, table)
    assert np.allclose(table_cols, table[cols])


def test_fixed_rate_mode_uses_one_rule_per_unit():
    rng = np.random.default_rng(2)
    h = rng.normal(size=(200, 5))
    labels = np.repeat(np.arange(4), 50)
    traj = np.repeat(np.arange(40), 5)
    cal = inv.calibrate(h, labels, inv.FiringConfig(mode="fixed_rate", rate=0.05, ks=(2,)), traj)
    assert np.all(cal.threshold == cal.threshold[:, :1])
    assert np.allclose(cal.global_rate[~cal.degenerate], 0.05)
    entry = inv.top_k_ris(cal, h, labels, traj, 2)
    assert 0.0 <= entry.percentage <= 100.0


def test_invalid_firing_config():
    with pytest.raises(ValueError):
        inv.FiringConfig(mode="adaptive")
    with pytest.raises(ValueError):
        inv.FiringConfig(rate=1.0)
