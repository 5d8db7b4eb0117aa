"""Unsupervised region tracks from clamped-cosine matching and a recursive
path score."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from . import encoder as enc

log = logging.getLogger(__name__)


@dataclass
class Track:
    entries: list  # [(frame, region_id), ...], uniform stride
    score: float
    video: int

    def to_dict(self):
        return {"video": self.video, "entries": [list(e) for e in self.entries], "score": self.score}

    @classmethod
    def from_dict(cls, d):
        return cls([tuple(e) for e in d["entries"]], float(d["score"]), int(d["video"]))


def match_matrix(feats_a, feats_b):
    """``max(0, cos)`` between every region of frame a and frame b."""
    return np.maximum(0.0, np.asarray(feats_a) @ np.asarray(feats_b).T)


def match_regions(feats_t, feats_t1):
    """Best match in the next frame for each region (lowest index on ties)."""
    feats_t = np.atleast_2d(feats_t)
    feats_t1 = np.atleast_2d(feats_t1)
    if feats_t.shape[0] == 0 or feats_t1.shape[0] == 0:
        raise ValueError("both frames need at least one region")
    return np.argmax(feats_t @ feats_t1.T, axis=1)


def score_table(mats):
    """Scores from every start region to every end region over ``len(mats)`` steps.

    ``mats[t]`` is the match matrix between step t and t+1. At horizon h the
    running table is ``(h-1)/h * S_{h-1} @ C``, so the result equals the
    path-product sum divided by the horizon. Also returns per-step argmax
    backpointers ``bp[h][r, r']`` (the best previous region, ``h >= 1``).
    """
    if not mats:
        raise ValueError("need at least one match matrix")
    s = np.array(mats[0], dtype=np.float64)
    backptrs = []
    for h, c in enumerate(mats[1:], start=2):
        contrib = s[:, :, None] * c[None, :, :]
        backptrs.append(np.argmax(contrib, axis=1))
        s = (h - 1) / h * (s @ c)
    return s, backptrs


def track_score(match_matrices, start, end):
    """Score of the track from ``start=(i, r)`` to ``end=(j, r2)``.

    ``match_matrices[t]`` relates frame t to frame t+1.
    """
    (i, r), (j, r2) = start, end
    if i >= j:
        raise ValueError("track must end after it starts")
    s, _ = score_table(list(match_matrices[i:j]))
    return float(s[r, r2])


def _path(backptrs, r, r2):
    path = [r2]
    cur = r2
    for bp in reversed(backptrs):
        cur = int(bp[r, cur])
        path.append(cur)
    path.append(r)
    return path[::-1]


CENTERING = (None, "video", "frame")


def frame_features(video, params, top_r=None, rng=None, center=None):
    """Region ids (possibly subsampled) and their embeddings for every frame.

    ``center="video"`` subtracts the mean region embedding of the whole video
    (``"frame"``: of each frame) and renormalises. Raw embeddings share a large
    common component, and the path sum then favours regions that resemble
    everything rather than regions that resemble each other.
    """
    if center not in CENTERING:
        raise ValueError(f"center must be one of {CENTERING}")
    ids, feats = [], []
    for t, frame in enumerate(video.frames):
        regions = video.regions[t]
        chosen = [reg.region_id for reg in regions]
        if top_r is not None and len(chosen) > top_r:
            pick = np.sort(rng.choice(len(chosen), size=top_r, replace=False))
            chosen = [chosen[p] for p in pick]
        ids.append(chosen)
        feats.append(enc.region_embed_many(params, frame, [video.box(t, r) for r in chosen]))
    if center == "video" and any(len(f) for f in feats):
        mu = np.concatenate([f for f in feats if len(f)]).mean(axis=0)
        feats = [_unit(f - mu) for f in feats]
    elif center == "frame":
        feats = [_unit(f - f.mean(axis=0)) if len(f) else f for f in feats]
    return ids, feats


def _unit(x):
    return x / np.maximum(np.linalg.norm(x, axis=1, keepdims=True), 1e-12)


def build_tracks(video, params, horizon, threshold, top_r=None, stride=1, seed=0, video_index=None, center=None):
    """Tracks spanning ``horizon`` frames whose score reaches ``threshold``.

    Start frames are ``0, horizon, 2*horizon, ...`` so tracks line up with the
    frame pairs used for training. Every (start, end) region pair whose score
    is at least ``threshold`` becomes a track, with the intermediate regions
    read off argmax backpointers.
    """
    vid = video.video_id if video_index is None else video_index
    if horizon % stride:
        raise ValueError("horizon must be a multiple of stride")
    if not any(video.regions):
        log.warning("video %s has no regions", vid)
        return []
    rng = np.random.default_rng([seed, vid, 0x7AC])
    ids, feats = frame_features(video, params, top_r, rng, center)
    tracks = []
    n = len(video.frames)
    for i in range(0, n - horizon, horizon):
        frames = list(range(i, i + horizon + 1, stride))
        if any(len(ids[t]) == 0 for t in frames):
            continue
        mats = [match_matrix(feats[a], feats[b]) for a, b in zip(frames[:-1], frames[1:])]
        s, backptrs = score_table(mats)
        for r in range(s.shape[0]):
            for r2 in range(s.shape[1]):
                if s[r, r2] >= threshold:
                    path = _path(backptrs, r, r2)
                    entries = [(f, ids[f][k]) for f, k in zip(frames, path)]
                    tracks.append(Track(entries, float(s[r, r2]), vid))
    return tracks


def all_scores(videos, params, horizon, top_r=None, stride=1, seed=0, center=None):
    out = []
    for v, video in enumerate(videos):
        out.extend(t.score for t in build_tracks(video, params, horizon, 0.0, top_r, stride, seed, v, center))
    return np.array(out)


def calibrate_threshold(scores, quantile=0.9):
    """Threshold at the given quantile of a score distribution."""
    scores = np.asarray(scores, dtype=float)
    if scores.size == 0:
        return 0.0
    return float(np.quantile(scores, quantile))


def build_all_tracks(videos, params, horizon, threshold=None, top_r=None, stride=1, seed=0, quantile=0.9,
                     center=None):
    """Tracks for every video; ``threshold=None`` uses the score quantile."""
    if threshold is None:
        threshold = calibrate_threshold(all_scores(videos, params, horizon, top_r, stride, seed, center), quantile)
    tracks = []
    for v, video in enumerate(videos):
        tracks.extend(build_tracks(video, params, horizon, threshold, top_r, stride, seed, v, center))
    return tracks, threshold


def iou(a, b):
    ax, ay, aw, ah = a
    bx, by, bw, bh = b
    ix = max(0, min(ax + aw, bx + bw) - max(ax, bx))
    iy = max(0, min(ay + ah, by + bh) - max(ay, by))
    inter = ix * iy
    union = aw * ah + bw * bh - inter
    return inter / union if union > 0 else 0.0


def _owners(video, frame, region_id, min_iou):
    box = video.box(frame, region_id)
    out = set()
    for k, track in enumerate(video.gt_tracks):
        rid = dict(track).get(frame)
        if rid is not None and iou(box, video.box(frame, rid)) >= min_iou:
            out.add(k)
    return out


def track_purity(tracks, videos, min_iou=0.5):
    """Fraction of tracks whose two endpoints overlap the same ground-truth object."""
    if not isinstance(videos, (list, tuple)):
        videos = [videos]
    if not tracks:
        return 0.0
    pure = 0
    for t in tracks:
        video = videos[t.video] if len(videos) > 1 else videos[0]
        (i, ri), (j, rj) = t.entries[0], t.entries[-1]
        if _owners(video, i, ri, min_iou) & _owners(video, j, rj, min_iou):
            pure += 1
    return pure / len(tracks)
