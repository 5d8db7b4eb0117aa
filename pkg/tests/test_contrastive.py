import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from invlab import contrastive as con
from invlab import encoder as enc
from invlab import world as w
from mpmath import mp


def unit_rows(rng, n, d):
    x = rng.normal(size=(n, d))
    return x / np.linalg.norm(x, axis=1, keepdims=True)


def test_symmetric_logits_give_ln2():
    q = np.array([[1.0, 0.0]])
    k = np.array([[0.0, 1.0]])
    neg = np.array([[0.0, -1.0]])
    loss, _ = con.contrastive_loss(q, k, neg, 1.0)
    assert loss == pytest.approx(math.log(2), abs=1e-12)


def test_confident_positive_matches_high_precision_value():
    q = np.array([[1.0, 0.0]])
    loss, _ = con.contrastive_loss(q, q, -q, 0.07)
    mp.dps = 50
    expected = float(mp.log(1 + mp.exp(mp.mpf(-2) / mp.mpf("0.07"))))
    assert expected == pytest.approx(3.9e-13, rel=0.05)
    assert loss == pytest.approx(expected, rel=1e-6, abs=1e-18)


@pytest.mark.parametrize("seed", range(20))
def test_loss_gradient_matches_finite_differences(seed):
    rng = np.random.default_rng(seed)
    n, d, k = 4, 6, 9
    q, kp, neg = unit_rows(rng, n, d), unit_rows(rng, n, d), unit_rows(rng, k, d)
    tau = 0.5
    _, grad = con.contrastive_loss(q, kp, neg, tau)

    def raw_loss(qq):
        # same loss without the unit-norm precondition so q can be perturbed freely
        logits = np.concatenate([np.sum(qq * kp, 1, keepdims=True), qq @ neg.T], 1) / tau
        m = logits.max(1, keepdims=True)
        return float(np.mean(-(logits[:, 0] - m[:, 0] - np.log(np.exp(logits - m).sum(1)))))

    h = 1e-5
    num = np.zeros_like(q)
    for idx in np.ndindex(q.shape):
        up, down = q.copy(), q.copy()
        up[idx] += h
        down[idx] -= h
        num[idx] = (raw_loss(up) - raw_loss(down)) / (2 * h)
    err = np.max(np.abs(grad - num) / np.maximum(np.abs(num), 1e-8))
    assert err < 1e-6


def test_loss_errors():
    q = np.array([[1.0, 0.0]])
    with pytest.raises(ValueError):
        con.contrastive_loss(q, q, np.zeros((0, 2)), 0.07)
    with pytest.raises(ValueError):
        con.contrastive_loss(q * 1.1, q, q, 0.07)


def test_aligned_positive_orthogonal_negatives_bound():
    d, k = 8, 5
    q = np.eye(d)[:1]
    neg = np.eye(d)[1 : 1 + k]
    loss, _ = con.contrastive_loss(q, q, neg, 0.07)
    assert loss < math.log(1 + k * math.exp(-1 / 0.07)) + 1e-9


def test_gradient_ignores_key_parameters():
    # the gradient is wrt q only; keys can be perturbed without any key-side gradient existing
    rng = np.random.default_rng(0)
    q, kp, neg = unit_rows(rng, 3, 4), unit_rows(rng, 3, 4), unit_rows(rng, 6, 4)
    loss_a, grad_a = con.contrastive_loss(q, kp, neg, 0.2)
    loss_b, grad_b = con.contrastive_loss(q, unit_rows(rng, 3, 4), neg, 0.2)
    assert grad_a.shape == grad_b.shape == q.shape
    assert loss_a != loss_b


def test_momentum_extremes():
    rng = np.random.default_rng(0)
    a = enc.init_params(rng, (4,), 3, image_size=2, channels=1)
    b = enc.init_params(rng, (4,), 3, image_size=2, channels=1)
    assert con.momentum_update(a, b, 1.0).allclose(a)
    assert con.momentum_update(a, b, 0.0).allclose(b)


def test_momentum_geometric_closed_form():
    rng = np.random.default_rng(1)
    key = enc.init_params(rng, (4,), 3, image_size=2, channels=1)
    query = enc.init_params(rng, (4,), 3, image_size=2, channels=1)
    k = key
    for _ in range(100):
        k = con.momentum_update(k, query, 0.999)
    for kk, k0, q in zip(k.arrays(), key.arrays(), query.arrays()):
        assert np.allclose(kk, q + 0.999**100 * (k0 - q), rtol=0, atol=1e-12)


def test_momentum_shape_mismatch():
    rng = np.random.default_rng(0)
    with pytest.raises(ValueError):
        con.momentum_update(enc.init_params(rng, (4,), 3, 2, 1), enc.init_params(rng, (5,), 3, 2, 1), 0.5)


def test_queue_fifo_examples():
    q = con.NegativeQueue(4, 1)
    for batch in ([1, 2], [3, 4], [5, 6]):
        q.push(np.array(batch, float)[:, None])
    assert q.buffer[:, 0].tolist() == [3, 4, 5, 6]
    q = con.NegativeQueue(4, 1)
    q.push(np.arange(4.0)[:, None])
    assert q.buffer[:, 0].tolist() == [0, 1, 2, 3]
    q = con.NegativeQueue(5, 1)
    rows = []
    for size in (2, 3, 2):
        batch = np.arange(len(rows), len(rows) + size, dtype=float)
        rows += batch.tolist()
        con.queue_push(q, batch[:, None])
    assert q.buffer[:, 0].tolist() == rows[-5:]
    with pytest.raises(ValueError):
        q.push(np.zeros((1, 2)))


@settings(max_examples=1000, deadline=None)
@given(
    capacity=st.integers(1, 12),
    sizes=st.lists(st.integers(1, 7), min_size=1, max_size=8),
)
def test_queue_matches_list_replay(capacity, sizes):
    q = con.NegativeQueue(capacity, 2)
    replay, counter = [], 0
    for s in sizes:
        batch = np.arange(counter, counter + s, dtype=float)
        counter += s
        q.push(np.stack([batch, -batch], axis=1))
        replay.extend(batch.tolist())
        del replay[: max(0, len(replay) - capacity)]
        assert len(q) == len(replay) <= capacity
    assert q.buffer[:, 0].tolist() == replay


def _videos(lengths):
    return [w.Video([np.zeros((2, 2, 1))] * n, [[]] * n, []) for n in lengths]


def test_sample_pairs_examples():
    assert con.sample_pairs(_videos([10]), 4) == [(0, 0, 4), (0, 4, 8)]
    assert con.sample_pairs(_videos([3]), 1) == [(0, 0, 1), (0, 1, 2)]
    with pytest.warns(UserWarning):
        assert con.sample_pairs(_videos([3, 10]), 4) == [(1, 0, 4), (1, 4, 8)]


@settings(max_examples=200, deadline=None)
@given(lengths=st.lists(st.integers(1, 30), min_size=1, max_size=5), g=st.integers(1, 10))
def test_sample_pairs_count_matches_enumeration(lengths, g):
    import warnings

    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        pairs = con.sample_pairs(_videos(lengths), g)
    brute = [(v, i, i + g) for v, n in enumerate(lengths) for i in range(n) if i % g == 0 and i + g < n]
    assert pairs == brute
    assert len(pairs) == sum((n - 1) // g for n in lengths)


def test_augment_identity():
    img = w.render(w.make_spec(2, 1, pose=20.0))
    out = con.augment(img, con.AugParams.identity(), np.random.default_rng(0))
    assert np.array_equal(out, img)


def test_augment_is_deterministic_per_seed():
    img = w.render(w.make_spec(2, 1, pose=20.0), 32, 32)
    a = con.augment(img, con.AugParams(), np.random.default_rng(5))
    b = con.augment(img, con.AugParams(), np.random.default_rng(5))
    assert np.array_equal(a, b)


def test_crop_area_fraction_mean():
    rng = np.random.default_rng(0)
    aug = con.AugParams()
    fr = [np.prod(con.sample_crop_box(32, 32, aug, rng)[2:]) / 1024 for _ in range(10_000)]
    assert abs(np.mean(fr) - 0.6) < 0.02


def test_grayscale_is_identity_for_single_channel():
    img = w.render(w.make_spec(0, 1), channels=1)
    aug = con.AugParams.identity()
    aug.grayscale_prob = 1.0
    assert np.array_equal(con.augment(img, aug, np.random.default_rng(0)), img)


def test_invalid_config():
    with pytest.raises(ValueError):
        con.TrainConfig(temperature=0)
    with pytest.raises(ValueError):
        con.TrainConfig(momentum=1.5)
    with pytest.raises(ValueError):
        con.AugParams(crop_area=(0.0, 1.0))
    with pytest.raises(ValueError):
        con.TrainConfig.from_dict({"learning_rate": 0.1})


def test_config_round_trip():
    cfg = con.TrainConfig(steps=7, aug=con.AugParams(crop_area=(0.5, 1.0)))
    assert con.TrainConfig.from_dict(cfg.to_dict()) == cfg


def test_baseline_smoke_contract():
    frame = w.render(w.make_spec(1, 1, pose=5.0))
    cfg = con.TrainConfig(steps=1, batch_size=4, queue_size=4)
    init = enc.init_params(np.random.default_rng(0))
    res = con.train("baseline", [frame], cfg, seed=0, init=init)
    assert np.isfinite(res.losses[0])
    assert not res.params.allclose(init)
    assert res.metrics[0]["queue_size"] == cfg.batch_size


def test_training_is_deterministic():
    videos = w.make_video_dataset(3, 6, 2, seed=0)
    cfg = con.TrainConfig(steps=5, batch_size=4, queue_size=16)
    a = con.train("gt_tracks", videos, cfg, seed=3)
    b = con.train("gt_tracks", videos, cfg, seed=3)
    assert all(np.array_equal(x, y) for x, y in zip(a.params.arrays(), b.params.arrays()))
    assert a.losses.tolist() == b.losses.tolist()


@pytest.mark.parametrize("regime", con.REGIMES)
def test_first_step_loss_near_uniform(regime):
    videos = w.make_video_dataset(4, 6, 2, seed=1)
    cfg = con.TrainConfig(steps=1)
    tracks = None
    if regime == "region_tracker":
        from invlab.tracker import Track

        tracks = [Track([(0, r) for _, r in t[:1]] + [(4, t[4][1])], 1.0, v)
                  for v, vid in enumerate(videos) for t in vid.gt_tracks]
    res = con.train(regime, videos, cfg, seed=0, tracks=tracks)
    expected = math.log(1 + cfg.queue_size)
    assert abs(res.losses[0] - expected) <= 0.15 * expected


def test_track_regimes_need_tracks():
    videos = w.make_video_dataset(2, 6, 2, seed=1)
    with pytest.raises(ValueError):
        con.train("region_tracker", videos, con.TrainConfig(steps=1), seed=0)
    with pytest.raises(ValueError):
        con.train("frame_temporal", [np.zeros((16, 16, 3))], con.TrainConfig(steps=1), seed=0)


def test_track_regime_enqueues_frame_and_patch_keys():
    videos = w.make_video_dataset(3, 6, 2, seed=2)
    cfg = con.TrainConfig(steps=2, batch_size=3, queue_size=100)
    res = con.train("gt_tracks", videos, cfg, seed=0)
    for m in res.metrics:
        assert m["patch_rows"] == 3
        assert m["enqueued"] == cfg.batch_size + m["patch_rows"]
        assert m["loss"] == pytest.approx(0.5 * m["loss_frame"] + 0.5 * m["loss_patch"])
