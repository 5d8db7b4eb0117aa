"""Downstream evaluation: linear probes, mean AP, top-1 and the
scene-centric vs object-centric training comparison."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass

import numpy as np

from . import contrastive as con
from . import encoder as enc


@dataclass
class ProbeConfig:
    steps: int = 500
    lr: float = 0.1
    l2: float = 1e-4
    layer: str = "embedding"


@dataclass
class ProbeResult:
    task: str
    metric: str
    value: float
    n_train: int
    n_test: int
    seed: int
    checkpoint: str = ""

    def to_dict(self):
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


def _softmax(z):
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def fit_softmax(x, y, n_classes, config=None):
    """Full-batch gradient descent on multinomial cross-entropy.

    Features are standardised with training statistics; weights start at zero
    so the fit is deterministic.
    """
    cfg = config or ProbeConfig()
    x = np.asarray(x, dtype=np.float64)
    mu = x.mean(axis=0)
    sd = x.std(axis=0)
    sd = np.where(sd > 1e-12, sd, 1.0)
    xs = (x - mu) / sd
    w = np.zeros((x.shape[1], n_classes))
    b = np.zeros(n_classes)
    onehot = np.eye(n_classes)[y]
    n = x.shape[0]
    for _ in range(cfg.steps):
        p = _softmax(xs @ w + b)
        g = (p - onehot) / n
        w -= cfg.lr * (xs.T @ g + cfg.l2 * w)
        b -= cfg.lr * g.sum(axis=0)
    return w, b, mu, sd


def probe_scores(model, x):
    w, b, mu, sd = model
    return (np.asarray(x, dtype=np.float64) - mu) / sd @ w + b


def top1(scores, labels):
    return float(np.mean(np.argmax(scores, axis=1) == np.asarray(labels)))


def linear_probe(train_x, train_y, test_x, test_y, config=None, seed=0, task="probe", checkpoint=""):
    """Train a linear softmax classifier on frozen features; report test top-1."""
    train_y = np.asarray(train_y)
    test_y = np.asarray(test_y)
    classes = np.unique(np.concatenate([train_y, test_y]))
    missing = set(classes) - set(np.unique(train_y))
    if missing:
        raise ValueError(f"classes {sorted(missing)} missing from the training set")
    index = {c: i for i, c in enumerate(classes)}
    ytr = np.array([index[c] for c in train_y])
    yte = np.array([index[c] for c in test_y])
    model = fit_softmax(train_x, ytr, len(classes), config)
    value = top1(probe_scores(model, test_x), yte)
    return ProbeResult(task, "top1", value, len(ytr), len(yte), seed, checkpoint)


def average_precision(scores, positives):
    """Non-interpolated AP; ties keep input order (stable sort)."""
    scores = np.asarray(scores, dtype=np.float64)
    positives = np.asarray(positives, dtype=bool)
    n_pos = positives.sum()
    if n_pos == 0:
        raise ValueError("no positives")
    order = np.argsort(-scores, kind="stable")
    hits = positives[order]
    ranks = np.nonzero(hits)[0] + 1
    precision = np.arange(1, len(ranks) + 1) / ranks
    return float(precision.sum() / n_pos)


def mean_ap(scores, labels):
    """Mean over classes of AP. ``labels`` is a binary ``(n, C)`` matrix or class ids."""
    scores = np.atleast_2d(np.asarray(scores, dtype=np.float64))
    labels = np.asarray(labels)
    if labels.ndim == 1:
        labels = np.eye(scores.shape[1], dtype=bool)[labels]
    aps = []
    for c in range(scores.shape[1]):
        if not labels[:, c].any():
            raise ValueError(f"class {c} has no positives")
        aps.append(average_precision(scores[:, c], labels[:, c]))
    return float(np.mean(aps))


def split_half(n, seed):
    perm = np.random.default_rng([seed, 0x5B11]).permutation(n)
    return perm[: n // 2], perm[n // 2 :]


def probe_samples(params, samples, config=None, seed=0, task="probe", checkpoint=""):
    """Embed samples, split them in half and probe their category labels."""
    cfg = config or ProbeConfig()
    x = enc.embed(params, [s.image for s in samples], layer=cfg.layer)
    y = np.array([s.category for s in samples])
    tr, te = split_half(len(samples), seed)
    return linear_probe(x[tr], y[tr], x[te], y[te], cfg, seed, task, checkpoint)


# ---------------------------------------------------------------------------
# scene-centric vs object-centric


@dataclass
class BiasResult:
    rows: list  # ProbeResult dicts tagged with arm and eval set
    verdict: dict

    def to_dict(self):
        return {"rows": self.rows, "verdict": self.verdict}

    def table(self):
        """``{arm: {eval: [values per seed]}}``."""
        out = {}
        for r in self.rows:
            out.setdefault(r["arm"], {}).setdefault(r["eval"], []).append(r["value"])
        return out


def bias_experiment(scene_set, box_set, eval_scenes, eval_boxes, config=None, seeds=(0,),
                    probe=None, box_config=None):
    """Train one encoder per training set and probe both on scene and box eval sets.

    Both arms share the training budget; passing a ``box_config`` whose
    steps or batch size differ from ``config`` is an error.
    """
    cfg = config or con.TrainConfig()
    box_cfg = box_config or cfg
    if (box_cfg.steps, box_cfg.batch_size) != (cfg.steps, cfg.batch_size):
        raise ValueError("training budgets differ between the two arms")
    rows = []
    for seed in seeds:
        for arm, data, arm_cfg in (("scene", scene_set, cfg), ("box", box_set, box_cfg)):
            result = con.train("baseline", data, arm_cfg, seed)
            for name, ev in (("scene_eval", eval_scenes), ("box_eval", eval_boxes)):
                res = probe_samples(result.params, ev, probe, seed, task=name, checkpoint=arm)
                rows.append({**res.to_dict(), "arm": arm, "eval": name})
    out = BiasResult(rows, {})
    out.verdict = bias_verdict(out.table())
    return out


def bias_verdict(table):
    box_gap = np.array(table["box"]["box_eval"]) - np.array(table["scene"]["box_eval"])
    scene_gap = np.array(table["box"]["scene_eval"]) - np.array(table["scene"]["scene_eval"])
    return {
        "box_wins_on_boxes": int((box_gap > 0).sum()),
        "n_seeds": int(len(box_gap)),
        "mean_gap_box_eval": float(box_gap.mean()),
        "mean_gap_scene_eval": float(scene_gap.mean()),
        "narrows_or_reverses": bool(scene_gap.mean() < box_gap.mean()),
    }
