"""Momentum-contrast training: augmentation, InfoNCE loss, negative queue and
the baseline / frame-temporal / track-based training loops."""

from __future__ import annotations

import dataclasses
import logging
import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from . import encoder as enc
from .world import IMAGE_SIZE, crop, resize_nearest

log = logging.getLogger(__name__)

REGIMES = ("baseline", "frame_temporal", "region_tracker", "gt_tracks")
TRACK_REGIMES = ("region_tracker", "gt_tracks")


@dataclass
class AugParams:
    crop_area: tuple = (0.2, 1.0)
    aspect: tuple = (3 / 4, 4 / 3)
    flip_prob: float = 0.5
    brightness: float = 0.4
    contrast: float = 0.4
    grayscale_prob: float = 0.2
    blur_prob: float = 0.5

    def __post_init__(self):
        lo, hi = self.crop_area
        if not 0.0 < lo <= hi <= 1.0:
            raise ValueError(f"crop_area {self.crop_area} must lie in (0, 1]")

    @classmethod
    def identity(cls):
        return cls(crop_area=(1.0, 1.0), flip_prob=0.0, brightness=0.0, contrast=0.0,
                   grayscale_prob=0.0, blur_prob=0.0)


@dataclass
class TrainConfig:
    """Hyperparameters for one training run. Serialised as flat JSON."""

    regime: str = "baseline"
    temperature: float = 0.07
    momentum: float = 0.999
    lr: float = 0.01
    sgd_momentum: float = 0.9
    weight_decay: float = 1e-4
    batch_size: int = 32
    steps: int = 300
    queue_size: int = 512
    frame_gap: int | None = None
    hidden: tuple = (64, 64)
    dim: int = 32
    aug: AugParams = field(default_factory=AugParams)

    def __post_init__(self):
        if isinstance(self.aug, dict):
            self.aug = AugParams(**{k: tuple(v) if isinstance(v, list) else v
                                    for k, v in self.aug.items()})
        self.hidden = tuple(self.hidden)
        if self.regime not in REGIMES:
            raise ValueError(f"unknown regime {self.regime!r}")
        if self.temperature <= 0:
            raise ValueError("temperature must be > 0")
        if not 0.0 <= self.momentum <= 1.0:
            raise ValueError("momentum must be in [0, 1]")
        if self.batch_size < 1 or self.queue_size < 1:
            raise ValueError("batch_size and queue_size must be positive")

    def to_dict(self):
        d = dataclasses.asdict(self)
        d["hidden"] = list(self.hidden)
        d["aug"] = {k: list(v) if isinstance(v, tuple) else v for k, v in d["aug"].items()}
        return d

    @classmethod
    def from_dict(cls, d):
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)

    def replace(self, **changes):
        return dataclasses.replace(self, **changes)


def default_frame_gap(video_length):
    return max(1, int(round(2 * video_length / 3)))


# ---------------------------------------------------------------------------
# augmentation


def sample_crop_box(height, width, aug, rng):
    area = height * width * rng.uniform(*aug.crop_area)
    ratio = math.exp(rng.uniform(math.log(aug.aspect[0]), math.log(aug.aspect[1])))
    w = max(1, int(round(math.sqrt(area * ratio))))
    h = max(1, int(round(math.sqrt(area / ratio))))
    if w > width:
        w, h = width, max(1, min(height, int(round(area / width))))
    if h > height:
        h, w = height, max(1, min(width, int(round(area / height))))
    x = int(rng.integers(0, width - w + 1))
    y = int(rng.integers(0, height - h + 1))
    return x, y, w, h


def _blur(img):
    # separable [1, 2, 1] / 4 with edge padding
    p = np.pad(img, ((1, 1), (1, 1), (0, 0)), mode="edge")
    p = (p[:-2] + 2 * p[1:-1] + p[2:]) / 4.0
    return (p[:, :-2] + 2 * p[:, 1:-1] + p[:, 2:]) / 4.0


def augment(image, aug, rng, out_size=IMAGE_SIZE):
    """Random resized crop, flip, brightness/contrast jitter, grayscale, blur."""
    img = np.asarray(image, dtype=np.float64)
    h, w = img.shape[:2]
    box = sample_crop_box(h, w, aug, rng)
    out = resize_nearest(crop(img, box), out_size, out_size)
    if rng.uniform() < aug.flip_prob:
        out = out[:, ::-1]
    if aug.brightness or aug.contrast:
        b = rng.uniform(1 - aug.brightness, 1 + aug.brightness)
        c = rng.uniform(1 - aug.contrast, 1 + aug.contrast)
        mean = out.mean()
        out = np.clip(((out - mean) * c + mean) * b, 0.0, 1.0)
    if out.shape[2] == 3 and rng.uniform() < aug.grayscale_prob:
        gray = out @ np.array([0.299, 0.587, 0.114])
        out = np.repeat(gray[:, :, None], 3, axis=2)
    if rng.uniform() < aug.blur_prob:
        out = _blur(out)
    return np.ascontiguousarray(out)


# ---------------------------------------------------------------------------
# loss, queue and momentum encoder


class NegativeQueue:
    """FIFO buffer of key embeddings, oldest row first."""

    def __init__(self, capacity, dim):
        if capacity < 1:
            raise ValueError("capacity must be positive")
        self.capacity = int(capacity)
        self.dim = int(dim)
        self.buffer = np.zeros((0, self.dim))

    def __len__(self):
        return self.buffer.shape[0]

    def push(self, keys):
        keys = np.atleast_2d(np.asarray(keys, dtype=np.float64))
        if keys.shape[1] != self.dim:
            raise ValueError(f"key dim {keys.shape[1]} != queue dim {self.dim}")
        self.buffer = np.concatenate([self.buffer, keys])[-self.capacity :]
        return self


def queue_push(queue, keys):
    return queue.push(keys)


def _check_unit(name, x, tol=1e-5):
    norms = np.linalg.norm(x, axis=1)
    if np.any(np.abs(norms - 1.0) > tol):
        raise ValueError(f"{name} rows must be unit-norm (max deviation {np.abs(norms - 1).max():.2e})")


def contrastive_loss(q, k_pos, queue, temperature):
    """Mean InfoNCE loss with the positive at logit 0, and its gradient wrt ``q``.

    Keys and queue entries are constants.
    """
    negatives = queue.buffer if isinstance(queue, NegativeQueue) else np.asarray(queue, dtype=float)
    if negatives.shape[0] == 0:
        raise ValueError("negative queue is empty")
    q = np.asarray(q, dtype=np.float64)
    k_pos = np.asarray(k_pos, dtype=np.float64)
    _check_unit("query", q)
    _check_unit("positive key", k_pos)
    _check_unit("queue", negatives)
    n = q.shape[0]
    logits = np.concatenate([np.sum(q * k_pos, axis=1, keepdims=True), q @ negatives.T], axis=1)
    logits /= temperature
    top = logits.argmax(axis=1)
    rows = np.arange(n)
    shift = logits[rows, top][:, None]
    exp = np.exp(logits - shift)
    # log1p over the non-max terms keeps precision when one logit dominates
    others = exp.copy()
    others[rows, top] = 0.0
    rest = others.sum(axis=1)
    log_prob_pos = logits[:, 0] - shift[:, 0] - np.log1p(rest)
    loss = float(-log_prob_pos.mean())
    p = exp / (1.0 + rest)[:, None]
    grad = (p[:, :1] - 1.0) * k_pos + p[:, 1:] @ negatives
    grad /= n * temperature
    return loss, grad


def momentum_update(key_params, query_params, m):
    """``p_k <- m p_k + (1 - m) p_q`` for every parameter array."""
    ka, qa = key_params.arrays(), query_params.arrays()
    if len(ka) != len(qa) or any(a.shape != b.shape for a, b in zip(ka, qa)):
        raise ValueError("key and query parameter shapes differ")
    new = [m * a + (1.0 - m) * b for a, b in zip(ka, qa)]
    return enc.EncoderParams.from_arrays(new, key_params.image_size, key_params.channels)


# ---------------------------------------------------------------------------
# data


def sample_pairs(videos, frame_gap):
    """Frame pairs ``(video, i, i + g)`` with ``i % g == 0``."""
    if frame_gap < 1:
        raise ValueError("frame_gap must be >= 1")
    pairs, skipped = [], 0
    for v, video in enumerate(videos):
        n = len(video)
        if n < frame_gap + 1:
            skipped += 1
            continue
        pairs.extend((v, i, i + frame_gap) for i in range(0, n - frame_gap, frame_gap))
    if skipped:
        warnings.warn(f"{skipped} videos shorter than frame_gap + 1 were skipped")
    return pairs


def gt_track_list(videos, frame_gap):
    """Ground-truth tracks as ``{video: {(i, j): [(box_i, box_j), ...]}}``."""
    out = {}
    for v, video in enumerate(videos):
        per_pair = {}
        for _, i, j in sample_pairs([video], frame_gap):
            boxes = []
            for track in video.gt_tracks:
                ri = dict(track).get(i)
                rj = dict(track).get(j)
                if ri is not None and rj is not None:
                    boxes.append((video.box(i, ri), video.box(j, rj)))
            per_pair[(i, j)] = boxes
        out[v] = per_pair
    return out


def tracked_boxes(videos, tracks):
    """Accepted tracks as ``{video: {(start_frame, end_frame): [(box_a, box_b), ...]}}``."""
    out = {v: {} for v in range(len(videos))}
    for t in tracks:
        (i, ri), (j, rj) = t.entries[0], t.entries[-1]
        video = videos[t.video]
        out[t.video].setdefault((i, j), []).append((video.box(i, ri), video.box(j, rj)))
    return out


@dataclass
class TrainResult:
    params: enc.EncoderParams
    key_params: enc.EncoderParams
    config: TrainConfig
    seed: int
    metrics: list
    patch_fallbacks: int = 0

    @property
    def losses(self):
        return np.array([row["loss"] for row in self.metrics])


def _frames_of(data):
    frames = []
    for item in data:
        if hasattr(item, "frames"):
            frames.extend(item.frames)
        elif hasattr(item, "image"):
            frames.append(item.image)
        else:
            frames.append(np.asarray(item))
    return frames


def train(regime, data, config=None, seed=0, tracks=None, init=None):
    """Train a query encoder with a momentum key encoder and negative queue.

    ``data`` is a list of images, samples or videos for ``baseline`` and a list
    of videos otherwise. ``region_tracker`` needs ``tracks`` (a list of
    tracker tracks over those videos); ``gt_tracks`` reads ``Video.gt_tracks``.
    """
    cfg = (config or TrainConfig()).replace(regime=regime)
    ss = np.random.SeedSequence([seed, REGIMES.index(regime), 0xC0DE])
    init_rng, data_rng, aug_rng = (np.random.default_rng(s) for s in ss.spawn(3))
    size = IMAGE_SIZE
    if init is None:
        params = enc.init_params(init_rng, cfg.hidden, cfg.dim)
    else:
        params = init.copy()
    key_params = params.copy()
    size = params.image_size

    if regime == "baseline":
        frames = _frames_of(data)
        if not frames:
            raise ValueError("baseline training needs at least one frame")
        pairs = None
    else:
        videos = list(data)
        if not videos or not hasattr(videos[0], "frames"):
            raise ValueError(f"{regime} training needs videos")
        gap = cfg.frame_gap or default_frame_gap(min(len(v) for v in videos))
        pairs = sample_pairs(videos, gap)
        if not pairs:
            raise ValueError("no frame pairs at this frame_gap")
        frames = _frames_of(videos)
    patch_table = None
    if regime == "gt_tracks":
        patch_table = gt_track_list(videos, gap)
    elif regime == "region_tracker":
        if not tracks:
            raise ValueError("region_tracker regime needs tracks")
        patch_table = tracked_boxes(videos, tracks)

    queue = NegativeQueue(cfg.queue_size, params.dim)
    init_idx = data_rng.integers(len(frames), size=cfg.queue_size)
    init_imgs = [augment(frames[i], cfg.aug, aug_rng, size) for i in init_idx]
    queue.push(enc.forward(key_params, init_imgs)[0])

    buffer = None
    metrics = []
    fallbacks = 0
    n = cfg.batch_size
    for step in range(1, cfg.steps + 1):
        patch_pairs = []
        if pairs is None:
            idx = data_rng.integers(len(frames), size=n)
            src_q = [frames[i] for i in idx]
            src_k = src_q
        else:
            idx = data_rng.integers(len(pairs), size=n)
            swap = data_rng.uniform(size=n) < 0.5
            src_q, src_k = [], []
            for p, s in zip(idx, swap):
                v, i, j = pairs[p]
                a, b = videos[v].frames[i], videos[v].frames[j]
                src_q.append(b if s else a)
                src_k.append(a if s else b)
                if patch_table is not None:
                    cands = patch_table.get(v, {}).get((i, j), [])
                    if not cands:
                        fallbacks += 1
                        continue
                    box_a, box_b = cands[int(data_rng.integers(len(cands)))]
                    pa = crop(videos[v].frames[i], box_a)
                    pb = crop(videos[v].frames[j], box_b)
                    patch_pairs.append((pb, pa) if s else (pa, pb))

        xq = [augment(x, cfg.aug, aug_rng, size) for x in src_q]
        xk = [augment(x, cfg.aug, aug_rng, size) for x in src_k]
        q, cache = enc.forward(params, xq)
        k, _ = enc.forward(key_params, xk)
        loss_frame, gq = contrastive_loss(q, k, queue, cfg.temperature)
        loss, loss_patch = loss_frame, float("nan")
        keys_patch = None
        if patch_pairs:
            pq = [augment(a, cfg.aug, aug_rng, size) for a, _ in patch_pairs]
            pk = [augment(b, cfg.aug, aug_rng, size) for _, b in patch_pairs]
            qp, cache_p = enc.forward(params, pq)
            keys_patch, _ = enc.forward(key_params, pk)
            loss_patch, gp = contrastive_loss(qp, keys_patch, queue, cfg.temperature)
            loss = 0.5 * loss_frame + 0.5 * loss_patch
            grads = enc.backward(params, cache, 0.5 * gq)
            grads_p = enc.backward(params, cache_p, 0.5 * gp)
            grads = enc.EncoderParams.from_arrays(
                [a + b for a, b in zip(grads.arrays(), grads_p.arrays())],
                params.image_size, params.channels,
            )
        else:
            grads = enc.backward(params, cache, gq)

        params, buffer = enc.sgd_step(params, grads, cfg.lr, cfg.weight_decay, cfg.sgd_momentum, buffer)
        key_params = momentum_update(key_params, params, cfg.momentum)
        queue.push(k)
        enqueued = len(k)
        if keys_patch is not None:
            queue.push(keys_patch)
            enqueued += len(keys_patch)
        metrics.append(
            dict(step=step, loss=loss, queue_size=len(queue), lr=cfg.lr, loss_frame=loss_frame,
                 loss_patch=loss_patch, patch_rows=len(patch_pairs), enqueued=enqueued)
        )
        if not np.isfinite(loss):
            raise FloatingPointError(f"non-finite loss at step {step}")
    if fallbacks:
        log.info("%d frame pairs had no track; used frame loss only", fallbacks)
    return TrainResult(params, key_params, cfg, seed, metrics, fallbacks)
