import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from invlab import encoder as enc
from invlab import tracker as tk
from invlab import world as w
from oracles import path_sum


def unit(rng, n, d=4):
    x = rng.normal(size=(n, d))
    return x / np.linalg.norm(x, axis=1, keepdims=True)


def test_identical_sets_self_match():
    f = unit(np.random.default_rng(0), 5)
    assert tk.match_regions(f, f).tolist() == list(range(5))


def test_single_candidate():
    rng = np.random.default_rng(1)
    assert tk.match_regions(unit(rng, 4), unit(rng, 1)).tolist() == [0, 0, 0, 0]


def test_ties_go_to_lowest_id():
    f = np.array([[1.0, 0.0]])
    assert tk.match_regions(f, np.array([[0.0, 1.0], [0.0, 1.0]])).tolist() == [0]


@pytest.mark.parametrize("seed", range(10))
def test_match_equals_brute_force(seed):
    rng = np.random.default_rng(seed)
    a, b = unit(rng, 5), unit(rng, 4)
    brute = [max(range(4), key=lambda j: (a[i] @ b[j], -j)) for i in range(5)]
    assert tk.match_regions(a, b).tolist() == brute


def test_empty_region_set_rejected():
    with pytest.raises(ValueError):
        tk.match_regions(np.zeros((0, 4)), unit(np.random.default_rng(0), 2))


def test_adjacent_score_is_clamped_cosine():
    assert tk.track_score([np.array([[0.8]])], (0, 0), (1, 0)) == pytest.approx(0.8)
    a = np.array([[1.0, 0.0]])
    assert tk.track_score([tk.match_matrix(a, -a)], (0, 0), (1, 0)) == 0.0


def test_three_frame_example():
    mats = [np.array([[0.9, 0.5]]), np.array([[0.8], [0.4]])]
    assert tk.track_score(mats, (0, 0), (2, 0)) == pytest.approx(0.46, abs=1e-15)


def test_start_must_precede_end():
    with pytest.raises(ValueError):
        tk.track_score([np.ones((1, 1))], (1, 0), (1, 0))


@settings(max_examples=200, deadline=None)
@given(data=st.data(), n_frames=st.integers(2, 4))
def test_dp_equals_path_enumeration(data, n_frames):
    sizes = [data.draw(st.integers(1, 4)) for _ in range(n_frames)]
    seed = data.draw(st.integers(0, 2**31))
    rng = np.random.default_rng(seed)
    feats = [unit(rng, s) for s in sizes]
    mats = [tk.match_matrix(feats[t], feats[t + 1]) for t in range(n_frames - 1)]
    for i in range(n_frames - 1):
        for j in range(i + 1, n_frames):
            for r in range(sizes[i]):
                for r2 in range(sizes[j]):
                    assert abs(tk.track_score(mats, (i, r), (j, r2)) - path_sum(mats[i:j], r, r2)) <= 1e-12


@pytest.mark.parametrize("c", [0.5, 1.0])
@pytest.mark.parametrize("R", [1, 2, 3])
@pytest.mark.parametrize("h", [1, 2, 3])
def test_constant_cosine_closed_form(c, R, h):
    mats = [np.full((R, R), c) for _ in range(h)]
    assert tk.track_score(mats, (0, 0), (h, R - 1)) == pytest.approx(c**h * R ** (h - 1) / h, rel=1e-12)


@settings(max_examples=100, deadline=None)
@given(seed=st.integers(0, 2**31), bump=st.floats(0.0, 0.5))
def test_raising_a_cosine_never_lowers_scores(seed, bump):
    rng = np.random.default_rng(seed)
    mats = [rng.uniform(0, 1, size=(3, 3)) for _ in range(3)]
    base, _ = tk.score_table(mats)
    t, a, b = rng.integers(3), rng.integers(3), rng.integers(3)
    mats[t] = mats[t].copy()
    mats[t][a, b] = min(1.0, mats[t][a, b] + bump)
    bumped, _ = tk.score_table(mats)
    assert np.all(bumped >= base - 1e-15)


def _toy_video(seed=0):
    (video,) = w.make_video_dataset(1, 6, 2, seed=seed)
    return video


def test_threshold_zero_keeps_every_pair_and_above_one_keeps_none():
    video = _toy_video()
    params = enc.init_params(np.random.default_rng(0))
    horizon = 4
    tracks = tk.build_tracks(video, params, horizon, 0.0)
    n0, nh = len(video.regions[0]), len(video.regions[horizon])
    assert len(tracks) == n0 * nh


def test_threshold_above_one_keeps_none_with_one_region_per_frame():
    # c^h / h <= 1 only holds for a single region per frame; with R regions the
    # score can reach R^(h-1)/h (see the closed-form test)
    video = _toy_video()
    params = enc.init_params(np.random.default_rng(0))
    assert tk.build_tracks(video, params, 4, 1.0 + 1e-9, top_r=1) == []
    assert len(tk.build_tracks(video, params, 4, 0.0, top_r=1)) == 1


def test_threshold_monotone_and_scores_recompute():
    video = _toy_video(1)
    params = enc.init_params(np.random.default_rng(2))
    lo = tk.build_tracks(video, params, 3, 0.05, stride=1)
    hi = tk.build_tracks(video, params, 3, 0.2, stride=1)
    key = lambda t: (t.entries[0], t.entries[-1])
    assert {key(t) for t in hi} <= {key(t) for t in lo}
    ids, feats = tk.frame_features(video, params)
    for t in lo:
        frames = [f for f, _ in t.entries]
        assert len(set(np.diff(frames))) == 1 and frames == sorted(frames)
        mats = [tk.match_matrix(feats[a], feats[b]) for a, b in zip(frames[:-1], frames[1:])]
        start = (0, ids[frames[0]].index(t.entries[0][1]))
        end = (len(frames) - 1, ids[frames[-1]].index(t.entries[-1][1]))
        assert abs(tk.track_score(mats, start, end) - t.score) <= 1e-9


def test_intermediate_regions_follow_backpointers():
    # one clearly best path: identity-like matrices
    mats = [np.eye(3) * 0.9 + 0.01, np.eye(3) * 0.9 + 0.01]
    s, bp = tk.score_table(mats)
    assert tk._path(bp, 1, 1) == [1, 1, 1]


def test_no_regions_returns_empty():
    video = w.Video([np.zeros((32, 32, 3))] * 3, [[], [], []], [])
    assert tk.build_tracks(video, enc.init_params(np.random.default_rng(0)), 2, 0.0) == []


def test_purity_examples():
    video = _toy_video()
    gt = [tk.Track(list(track), 1.0, 0) for track in video.gt_tracks]
    assert tk.track_purity(gt, [video]) == 1.0
    a, b = video.gt_tracks
    swapped = tk.Track([a[0], b[-1]], 1.0, 0)
    assert tk.track_purity([swapped], [video]) == 0.0
    assert tk.track_purity(gt + [gt[0], swapped], [video]) == 0.75


def test_track_round_trip():
    t = tk.Track([(0, 2), (4, 1)], 0.123456789, 3)
    assert tk.Track.from_dict(t.to_dict()) == t


def test_threshold_calibration_is_a_quantile():
    scores = np.arange(101, dtype=float)
    assert tk.calibrate_threshold(scores, 0.9) == pytest.approx(90.0)


@pytest.mark.parametrize("center", ["video", "frame"])
def test_centered_features_are_unit_rows(center):
    video = _toy_video(2)
    ids, feats = tk.frame_features(video, enc.init_params(np.random.default_rng(0)), center=center)
    for f in feats:
        assert np.allclose(np.linalg.norm(f, axis=1), 1.0)
    if center == "frame":
        # per-frame centring leaves no common direction inside a frame
        raw = tk.frame_features(video, enc.init_params(np.random.default_rng(0)))[1]
        assert np.mean(feats[0] @ feats[0].T) < np.mean(raw[0] @ raw[0].T)


def test_unknown_centering_rejected():
    with pytest.raises(ValueError):
        tk.frame_features(_toy_video(), enc.init_params(np.random.default_rng(0)), center="global")


def test_stride_must_divide_horizon():
    with pytest.raises(ValueError):
        tk.build_tracks(_toy_video(), enc.init_params(np.random.default_rng(0)), 4, 0.0, stride=3)
