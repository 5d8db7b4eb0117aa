"""Top-K Representation Invariance Score.

Hidden unit ``i`` fires on ``x`` when ``s * h_i(x) > t``. In class-adaptive
mode each (unit, class) pair gets its own threshold so that the unit fires on
``round(P(y) * N)`` samples of the pooled trajectory dataset; the sign is the
one giving the larger target-conditioned invariance ``L_y(i) / G_y(i)``.
"""

from __future__ import annotations

import logging
import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from . import encoder as enc

log = logging.getLogger(__name__)

MODES = ("class_adaptive", "fixed_rate")


@dataclass
class FiringConfig:
    mode: str = "class_adaptive"
    rate: float = 0.01  # fixed_rate mode only
    ks: tuple = (10, 25)

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"unknown firing mode {self.mode!r}")
        if not 0.0 < self.rate < 1.0:
            raise ValueError("rate must be in (0, 1)")
        self.ks = tuple(int(k) for k in self.ks)


@dataclass
class UnitCalibration:
    """Per (unit, class) firing rule. Arrays are ``(n_units, n_classes)``.

    In fixed-rate mode every column is identical (one rule per unit).
    """

    classes: np.ndarray
    priors: np.ndarray
    sign: np.ndarray
    threshold: np.ndarray
    global_rate: np.ndarray
    degenerate: np.ndarray
    n_samples: int
    mode: str = "class_adaptive"
    target_rate: np.ndarray | None = None  # per class; the rate the threshold aims for

    @property
    def n_units(self):
        return self.sign.shape[0]


def _round_half_up(x):
    return int(math.floor(x + 0.5))


def _quantile_threshold(values, m):
    """Midpoint between the m-th and (m+1)-th largest of each column."""
    desc = -np.sort(-values, axis=0)
    return 0.5 * (desc[m - 1] + desc[m])


def _fires(h, sign, threshold):
    return sign * h > threshold


def _trajectory_means(fire, traj_ids, traj_order):
    # mean firing per trajectory, rows follow traj_order
    out = np.empty((len(traj_order), fire.shape[1]))
    for row, tid in enumerate(traj_order):
        out[row] = fire[traj_ids == tid].mean(axis=0)
    return out


def local_firing_rate(fire, traj_ids):
    """Mean over trajectories of the within-trajectory firing fraction.

    ``fire`` is a boolean ``(n_samples, n_units)`` matrix restricted to one
    class; ``traj_ids`` labels the trajectory of every row.
    """
    fire = np.asarray(fire, dtype=float)
    traj_ids = np.asarray(traj_ids)
    if fire.shape[0] == 0:
        raise ValueError("empty trajectory set")
    order = np.unique(traj_ids)
    return _trajectory_means(fire, traj_ids, order).mean(axis=0)


def _candidate(h, m, sign):
    n = h.shape[0]
    if m <= 0 or m >= n:
        thr = np.full(h.shape[1], np.inf)
        return thr, np.zeros(h.shape[1]), np.ones(h.shape[1], dtype=bool)
    thr = _quantile_threshold(sign * h, m)
    g = _fires(h, sign, thr).mean(axis=0)
    return thr, g, g == 0.0


def calibrate(h, labels, config=None, traj_ids=None):
    """Fit signs and thresholds for every unit and class.

    ``h`` is ``(n_samples, n_units)`` over the pooled trajectory dataset. When
    ``traj_ids`` is given the sign is chosen per (unit, class) to maximise
    the invariance on those trajectories; otherwise it is +1.
    """
    cfg = config or FiringConfig()
    h = np.asarray(h, dtype=np.float64)
    labels = np.asarray(labels)
    n, u = h.shape
    if n < 2:
        raise ValueError("need at least two samples")
    classes, counts = np.unique(labels, return_counts=True)
    priors = counts / n
    nc = len(classes)
    sign = np.ones((u, nc))
    thr = np.zeros((u, nc))
    grate = np.zeros((u, nc))
    degen = np.zeros((u, nc), dtype=bool)

    if cfg.mode == "fixed_rate":
        m = _round_half_up(cfg.rate * n)
        best = None
        for s in (1.0, -1.0):
            t, g, d = _candidate(h, m, s)
            if traj_ids is None:
                score = np.zeros(u)
            else:
                score = _invariance(local_firing_rate(_fires(h, s, t), traj_ids), g, d)
            if best is None:
                best = (np.full(u, s), t, g, d, score)
            else:
                take = score > best[4]
                best = tuple(np.where(take, new, old) for new, old in
                             zip((np.full(u, s), t, g, d, score), best))
        for c in range(nc):
            sign[:, c], thr[:, c], grate[:, c], degen[:, c] = best[0], best[1], best[2], best[3]
        target = np.full(nc, max(m, 1) / n)
        return UnitCalibration(classes, priors, sign, thr, grate, degen.astype(bool), n, cfg.mode, target)

    for c, y in enumerate(classes):
        m = _round_half_up(priors[c] * n)
        best = None
        for s in (1.0, -1.0):
            t, g, d = _candidate(h, m, s)
            if traj_ids is None:
                score = np.zeros(u)
            else:
                mask = labels == y
                score = _invariance(local_firing_rate(_fires(h[mask], s, t), np.asarray(traj_ids)[mask]), g, d)
            if best is None:
                best = [np.full(u, s), t, g, d, score]
            else:
                take = score > best[4]
                best = [np.where(take, new, old) for new, old in
                        zip((np.full(u, s), t, g, d, score), best)]
        sign[:, c], thr[:, c], grate[:, c], degen[:, c] = best[0], best[1], best[2], best[3]
    return UnitCalibration(classes, priors, sign, thr, grate, degen.astype(bool), n, cfg.mode, priors.copy())


def _invariance(local, grate, degenerate):
    safe = np.where(degenerate, 1.0, grate)
    return np.where(degenerate, 0.0, local / safe)


def invariance_table(calibration, h, labels, traj_ids):
    """``(L, I)`` tables of shape ``(n_units, n_classes)``."""
    h = np.asarray(h, dtype=np.float64)
    labels = np.asarray(labels)
    traj_ids = np.asarray(traj_ids)
    cal = calibration
    local = np.zeros_like(cal.sign)
    if cal.mode == "fixed_rate":
        fire = _fires(h, cal.sign[:, 0], cal.threshold[:, 0])
        col = local_firing_rate(fire, traj_ids)
        local[:] = col[:, None]
    else:
        for c, y in enumerate(cal.classes):
            mask = labels == y
            if not mask.any():
                continue
            fire = _fires(h[mask], cal.sign[:, c], cal.threshold[:, c])
            local[:, c] = local_firing_rate(fire, traj_ids[mask])
    return local, _invariance(local, cal.global_rate, cal.degenerate)


@dataclass
class RISEntry:
    percentage: float
    k: int
    selected: list  # per class: unit indices
    score: float
    max_score: float


def _top_k(values, k):
    # largest first, ties by lower unit id
    order = np.lexsort((np.arange(len(values)), -values))
    return order[:k]


def top_k_ris(calibration, h, labels, traj_ids, k):
    """Top-K RIS as a percentage of its maximum given the achieved firing rates."""
    cal = calibration
    if k > cal.n_units:
        raise ValueError(f"K={k} exceeds the number of units ({cal.n_units})")
    usable = (~cal.degenerate).any(axis=1).sum()
    if k > usable:
        raise ValueError(f"K={k} exceeds the number of non-degenerate units ({usable})")
    _, inv = invariance_table(cal, h, labels, traj_ids)
    # achievable maximum per unit: 1/G, or 1/target rate where degenerate
    target = cal.priors if cal.target_rate is None else cal.target_rate
    achieved = np.where(cal.global_rate > 0, cal.global_rate, 1.0)
    ceiling = np.where(cal.degenerate, 1.0 / target[None, :], 1.0 / achieved)

    if cal.mode == "fixed_rate":
        col = inv[:, 0]
        sel = _top_k(col, k)
        score = col[sel].mean()
        best = ceiling[sel, 0].mean()
        selected = [sel.tolist()] * len(cal.classes)
    else:
        scores, bests, selected = [], [], []
        for c in range(len(cal.classes)):
            if cal.degenerate[:, c].all():
                warnings.warn(f"every unit is degenerate for class {cal.classes[c]}")
            sel = _top_k(inv[:, c], k)
            selected.append(sel.tolist())
            scores.append(inv[sel, c].mean())
            bests.append(ceiling[sel, c].mean())
        score, best = float(np.mean(scores)), float(np.mean(bests))
    pct = 100.0 * score / best if best > 0 else 0.0
    return RISEntry(float(pct), int(k), selected, float(score), float(best))


def flatten_trajectories(trajectories):
    """Images, labels and trajectory ids for a list of trajectories."""
    images, labels, tids = [], [], []
    for t, traj in enumerate(trajectories):
        if not traj.samples:
            raise ValueError(f"trajectory {t} is empty")
        for s in traj.samples:
            images.append(s.image)
            labels.append(traj.category)
            tids.append(t)
    return images, np.array(labels), np.array(tids)


def ris_scores(h, labels, traj_ids, config=None):
    """``{k: RISEntry}`` plus the calibration and invariance table."""
    cfg = config or FiringConfig()
    cal = calibrate(h, labels, cfg, traj_ids)
    out = {k: top_k_ris(cal, h, labels, traj_ids, k) for k in cfg.ks}
    _, table = invariance_table(cal, h, labels, traj_ids)
    return out, cal, table


@dataclass
class RISReport:
    """``scores[layer][transformation][k]`` percentages plus per-class tables."""

    scores: dict
    tables: dict = field(default_factory=dict)
    metadata: dict = field(default_factory=dict)

    def to_dict(self):
        return {
            "scores": {
                layer: {tr: {str(k): v for k, v in ks.items()} for tr, ks in per.items()}
                for layer, per in self.scores.items()
            },
            "tables": {
                layer: {tr: np.asarray(t).tolist() for tr, t in per.items()}
                for layer, per in self.tables.items()
            },
            "metadata": self.metadata,
        }

    @classmethod
    def from_dict(cls, d):
        scores = {
            layer: {tr: {int(k): float(v) for k, v in ks.items()} for tr, ks in per.items()}
            for layer, per in d["scores"].items()
        }
        tables = {layer: {tr: np.array(t) for tr, t in per.items()} for layer, per in d.get("tables", {}).items()}
        return cls(scores, tables, d.get("metadata", {}))


def evaluate_all(params, datasets, config=None, layers=("raw", "embedding"), metadata=None):
    """RIS for every transformation dataset under ``params``.

    ``datasets`` maps a transformation name to its trajectories; names mapped
    to ``None`` or an empty list are skipped with a warning.
    """
    cfg = config or FiringConfig()
    scores = {layer: {} for layer in layers}
    tables = {layer: {} for layer in layers}
    for name, trajectories in datasets.items():
        if not trajectories:
            warnings.warn(f"no trajectories for {name!r}; skipped")
            continue
        images, labels, tids = flatten_trajectories(trajectories)
        for layer in layers:
            h = enc.embed(params, images, layer=layer)
            entries, _, table = ris_scores(h, labels, tids, cfg)
            scores[layer][name] = {k: e.percentage for k, e in entries.items()}
            tables[layer][name] = table
    meta = {"mode": cfg.mode, "ks": list(cfg.ks), **(metadata or {})}
    return RISReport(scores, tables, meta)
