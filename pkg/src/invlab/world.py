"""Procedural synthetic world: shapes, transformation trajectories, videos and
scene/box dataset pairs.

Images are ``(height, width, channels)`` float64 arrays with values in [0, 1].
Everything here is a pure function of its arguments and a seed.
"""

from __future__ import annotations

import colorsys
import dataclasses
from dataclasses import dataclass, field

import numpy as np

TRANSFORMATIONS = (
    "occlusion",
    "viewpoint",
    "illum_dir",
    "illum_color",
    "instance",
    "instance+viewpoint",
)

SHAPE_NAMES = ("disk", "square", "triangle", "cross", "ring", "ell")
MAX_CLASSES = len(SHAPE_NAMES)

# object-centric renders use this canvas; encoder input size follows it
IMAGE_SIZE = 16
CHANNELS = 3
BACKGROUND_AMPLITUDE = 0.06


@dataclass(frozen=True)
class ObjectSpec:
    """Everything needed to render one object.

    ``size``, ``aspect`` and ``marking`` are the continuous instance latent and
    are a function of ``(category, instance_id)`` when built through
    :func:`make_spec`.
    """

    category: int
    instance_id: int
    size: float = 0.8
    aspect: float = 1.0
    marking: float = 0.5
    pose: float = 0.0
    occlusion: float = 0.0
    illum_dir: float = 0.0
    illum_color: tuple = (1.0, 1.0, 1.0)
    occluder_side: int = 0
    tint: tuple = (1.0, 1.0, 1.0)

    def validate(self):
        if not 0 <= self.category < MAX_CLASSES:
            raise ValueError(f"category {self.category} outside [0, {MAX_CLASSES})")
        if not 0.3 <= self.size <= 1.0:
            raise ValueError(f"size {self.size} outside [0.3, 1]")
        if not 0.5 <= self.aspect <= 1.0:
            raise ValueError(f"aspect {self.aspect} outside [0.5, 1]")
        if not 0.0 <= self.marking <= 1.0:
            raise ValueError(f"marking {self.marking} outside [0, 1]")
        if not 0.0 <= self.pose < 360.0:
            raise ValueError(f"pose {self.pose} outside [0, 360)")
        if not 0.0 <= self.occlusion <= 1.0:
            raise ValueError(f"occlusion {self.occlusion} outside [0, 1]")
        if not 0.0 <= self.illum_dir < 360.0:
            raise ValueError(f"illum_dir {self.illum_dir} outside [0, 360)")
        if len(self.illum_color) != 3 or not all(0.5 <= g <= 1.5 for g in self.illum_color):
            raise ValueError(f"illum_color {self.illum_color} must be 3 gains in [0.5, 1.5]")
        if len(self.tint) != 3 or not all(0.2 <= g <= 1.0 for g in self.tint):
            raise ValueError(f"tint {self.tint} must be 3 values in [0.2, 1]")
        if self.occluder_side not in (0, 1, 2, 3):
            raise ValueError(f"occluder_side {self.occluder_side} not in 0..3")
        return self

    def replace(self, **changes):
        return dataclasses.replace(self, **changes)

    def to_dict(self):
        d = dataclasses.asdict(self)
        d["illum_color"] = list(self.illum_color)
        d["tint"] = list(self.tint)
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        d["illum_color"] = tuple(d["illum_color"])
        d["tint"] = tuple(d["tint"])
        return cls(**d)


def instance_latent(category, instance_id):
    """Deterministic (size, aspect, marking, tint) for an object instance."""
    rng = np.random.default_rng([int(category), int(instance_id), 0x5EED])
    size = float(rng.uniform(0.6, 0.95))
    aspect = float(rng.uniform(0.6, 1.0))
    marking = float(rng.uniform(0.0, 1.0))
    # a saturated hue per instance: objects are told apart by colour as well as shape
    hue, sat = rng.uniform(0.0, 1.0), rng.uniform(0.6, 0.8)
    tint = tuple(float(t) for t in colorsys.hsv_to_rgb(hue, sat, 1.0))
    return size, aspect, marking, tint


def make_spec(category, instance_id, **fields):
    size, aspect, marking, tint = instance_latent(category, instance_id)
    spec = ObjectSpec(
        category=int(category),
        instance_id=int(instance_id),
        size=size,
        aspect=aspect,
        marking=marking,
        tint=tint,
        **fields,
    )
    return spec.validate()


@dataclass
class Sample:
    image: np.ndarray
    category: int
    instance_id: int
    spec: ObjectSpec | None = None


@dataclass
class Trajectory:
    transformation: str
    category: int
    samples: list


@dataclass
class Region:
    region_id: int
    box: tuple  # (x, y, w, h) in pixels


@dataclass
class Video:
    frames: list
    regions: list  # per frame: list[Region], indexed by region_id
    gt_tracks: list  # per object: list[(frame, region_id)]
    objects: list = field(default_factory=list)  # per object: list[ObjectSpec] per frame
    video_id: int = 0

    def __len__(self):
        return len(self.frames)

    def box(self, frame, region_id):
        return self.regions[frame][region_id].box


# ---------------------------------------------------------------------------
# rendering


def _inside(category, u, v):
    if category == 0:
        return u * u + v * v <= 1.0
    if category == 1:
        return np.maximum(np.abs(u), np.abs(v)) <= 0.85
    if category == 2:
        return (v <= 0.7) & (np.abs(u) <= 0.9 * (v + 0.9) / 1.6)
    if category == 3:
        return ((np.abs(u) <= 0.3) & (np.abs(v) <= 0.95)) | (
            (np.abs(v) <= 0.3) & (np.abs(u) <= 0.95)
        )
    if category == 4:
        r2 = u * u + v * v
        return (r2 <= 1.0) & (r2 >= 0.3)
    if category == 5:
        box = (np.abs(u) <= 0.9) & (np.abs(v) <= 0.9)
        return box & ~((u > -0.25) & (v < 0.25))
    raise ValueError(f"unknown category {category}")


def _object_coords(spec, width, height):
    # pixel centres in [-1, 1], rotated into the object frame
    xs = (np.arange(width) + 0.5) / width * 2.0 - 1.0
    ys = (np.arange(height) + 0.5) / height * 2.0 - 1.0
    x, y = np.meshgrid(xs, ys)
    theta = np.deg2rad(spec.pose)
    c, s = np.cos(theta), np.sin(theta)
    u = (c * x + s * y) / spec.size
    v = (-s * x + c * y) / (spec.size * spec.aspect)
    return x, y, u, v


def object_mask(spec, width=IMAGE_SIZE, height=IMAGE_SIZE):
    """Boolean silhouette of the unoccluded object."""
    _, _, u, v = _object_coords(spec, width, height)
    return _inside(spec.category, u, v)


def occlusion_mask(spec, width=IMAGE_SIZE, height=IMAGE_SIZE):
    """Pixels of the silhouette hidden by the occluder band.

    The occluder slides in from ``spec.occluder_side`` and covers
    ``round(occlusion * area)`` silhouette pixels, column (or row) first.
    """
    obj = object_mask(spec, width, height)
    hidden = np.zeros_like(obj)
    n_hide = int(round(spec.occlusion * obj.sum()))
    if n_hide == 0:
        return hidden
    rows, cols = np.nonzero(obj)
    side = spec.occluder_side
    if side == 0:
        order = np.lexsort((rows, cols))
    elif side == 1:
        order = np.lexsort((rows, -cols))
    elif side == 2:
        order = np.lexsort((cols, rows))
    else:
        order = np.lexsort((cols, -rows))
    pick = order[:n_hide]
    hidden[rows[pick], cols[pick]] = True
    return hidden


def render(spec, width=IMAGE_SIZE, height=IMAGE_SIZE, channels=CHANNELS, illuminate=True):
    """Render ``spec`` on a black canvas of the given size.

    Deterministic in ``spec``. ``illuminate=False`` skips the colour gain stage.
    """
    spec.validate()
    if channels not in (1, 3):
        raise ValueError("channels must be 1 or 3")
    x, y, u, v = _object_coords(spec, width, height)
    visible = _inside(spec.category, u, v) & ~occlusion_mask(spec, width, height)

    freq = 1.0 + 2.0 * spec.marking
    stripes = 0.5 + 0.5 * np.sin(np.pi * freq * u + 6.0 * spec.marking)
    albedo = 0.45 + 0.45 * stripes
    phi = np.deg2rad(spec.illum_dir)
    shading = 0.65 + 0.35 * np.clip(x * np.cos(phi) + y * np.sin(phi), -1.0, 1.0)
    lum = np.where(visible, albedo * shading, 0.0)

    if channels == 3:
        img = lum[:, :, None] * np.asarray(spec.tint, dtype=float)[None, None, :]
    else:
        img = lum[:, :, None] * float(np.mean(spec.tint))
    if illuminate and channels == 3:
        img = img * np.asarray(spec.illum_color, dtype=float)[None, None, :]
    return np.clip(img, 0.0, 1.0)


def resize_nearest(image, height, width):
    """Nearest-neighbour resize; identity when the size already matches."""
    h, w = image.shape[:2]
    if (h, w) == (height, width):
        return image.copy()
    rows = np.minimum((np.arange(height) + 0.5) * h / height, h - 1).astype(int)
    cols = np.minimum((np.arange(width) + 0.5) * w / width, w - 1).astype(int)
    return image[rows][:, cols]


def crop(image, box):
    x, y, w, h = (int(round(c)) for c in box)
    return image[y : y + h, x : x + w]


def background(rng, width, height, channels=CHANNELS, amplitude=BACKGROUND_AMPLITUDE):
    """Low-amplitude smooth noise texture."""
    coarse = rng.uniform(0.0, 1.0, size=((height + 3) // 4, (width + 3) // 4, 1))
    tex = resize_nearest(coarse, height, width)
    fine = rng.uniform(0.0, 1.0, size=(height, width, 1))
    tex = amplitude * (0.7 * tex + 0.3 * fine)
    return np.repeat(tex, channels, axis=2)


def paste(canvas, spec, box):
    """Composite the rendered object into ``canvas`` in place."""
    x, y, w, h = box
    patch = render(spec, w, h, canvas.shape[2])
    visible = object_mask(spec, w, h) & ~occlusion_mask(spec, w, h)
    region = canvas[y : y + h, x : x + w]
    region[visible] = patch[visible]
    return canvas


# ---------------------------------------------------------------------------
# trajectory datasets


def _illum_gains(phase):
    return tuple(float(1.0 + 0.45 * np.cos(phase + 2.0 * np.pi * c / 3.0)) for c in range(3))


def trajectory_grid(transformation, steps):
    """Evenly spaced grid for the varied axis.

    Occlusion runs over ``linspace(0, 0.5, steps)``; angular axes cover the full
    circle without repeating the start; colour phases cover the full hue wheel.
    """
    if steps < 2:
        raise ValueError("steps must be >= 2")
    if transformation == "occlusion":
        return np.linspace(0.0, 0.5, steps)
    if transformation in ("viewpoint", "illum_dir", "illum_color", "instance+viewpoint"):
        return np.arange(steps) * (360.0 / steps)
    if transformation == "instance":
        return np.arange(steps, dtype=float)
    raise ValueError(f"unknown transformation {transformation!r}")


def make_trajectory_dataset(
    transformation,
    n_classes,
    n_trajectories_per_class,
    steps,
    seed,
    size=IMAGE_SIZE,
    channels=CHANNELS,
):
    if transformation not in TRANSFORMATIONS:
        raise ValueError(f"unknown transformation {transformation!r}")
    if not 1 <= n_classes <= MAX_CLASSES:
        raise ValueError(f"n_classes must be in 1..{MAX_CLASSES}")
    grid = trajectory_grid(transformation, steps)
    rng = np.random.default_rng([seed, TRANSFORMATIONS.index(transformation)])
    trajectories = []
    next_instance = 0
    for category in range(n_classes):
        for _ in range(n_trajectories_per_class):
            base_pose = float(rng.uniform(0.0, 360.0))
            base = dict(
                pose=base_pose,
                occlusion=0.0,
                illum_dir=float(rng.uniform(0.0, 360.0)),
                illum_color=(1.0, 1.0, 1.0),
                occluder_side=int(rng.integers(4)),
            )
            instance_id = next_instance
            next_instance += steps
            specs = []
            for k, value in enumerate(grid):
                fields = dict(base)
                inst = instance_id
                if transformation == "occlusion":
                    fields["occlusion"] = float(value)
                elif transformation == "viewpoint":
                    fields["pose"] = float((base_pose + value) % 360.0)
                elif transformation == "illum_dir":
                    fields["illum_dir"] = float((base["illum_dir"] + value) % 360.0)
                elif transformation == "illum_color":
                    fields["illum_color"] = _illum_gains(np.deg2rad(value))
                elif transformation == "instance":
                    inst = instance_id + k
                else:
                    inst = instance_id + k
                    fields["pose"] = float((base_pose + value) % 360.0)
                specs.append(make_spec(category, inst, **fields))
            samples = [
                Sample(render(s, size, size, channels), s.category, s.instance_id, s) for s in specs
            ]
            trajectories.append(Trajectory(transformation, category, samples))
    return trajectories


# ---------------------------------------------------------------------------
# videos


@dataclass
class VideoConfig:
    frame_size: int = 32
    n_classes: int = 4
    box_min: int = 12
    box_max: int = 16
    max_pose_delta: float = 12.0
    max_shift: int = 1
    max_occlusion: float = 0.25
    max_occlusion_delta: float = 0.03
    max_illum_delta: float = 6.0
    jitter_per_object: int = 1
    background_boxes: int = 1
    jitter: float = 0.3
    channels: int = CHANNELS


def _cells(frame_size, box_max):
    n = frame_size // box_max
    return [(cx * box_max, cy * box_max) for cy in range(n) for cx in range(n)]


def _jitter_box(rng, box, frac, frame_size):
    x, y, w, h = box
    scale = 1.0 + rng.uniform(-frac, frac)
    nw = int(np.clip(round(w * scale), 2, frame_size))
    nh = int(np.clip(round(h * scale), 2, frame_size))
    cx = x + w / 2 + rng.uniform(-frac, frac) * w
    cy = y + h / 2 + rng.uniform(-frac, frac) * h
    nx = int(np.clip(round(cx - nw / 2), 0, frame_size - nw))
    ny = int(np.clip(round(cy - nh / 2), 0, frame_size - nh))
    return (nx, ny, nw, nh)


def _random_box(rng, frame_size, lo, hi):
    w = int(rng.integers(lo, hi + 1))
    h = int(rng.integers(lo, hi + 1))
    x = int(rng.integers(0, frame_size - w + 1))
    y = int(rng.integers(0, frame_size - h + 1))
    return (x, y, w, h)


def make_video_dataset(n_videos, frames_per_video, objects_per_scene, seed, config=None, frame_gap=None):
    """Videos of slowly transforming objects with ground-truth and distractor boxes.

    Every object lives in its own grid cell of the frame, rotates with a
    constant drift plus a little noise (|delta pose| <= ``max_pose_delta``),
    and drifts by at most ``max_shift`` pixels per frame. Region ids are
    shuffled per frame so they carry no identity information.
    """
    cfg = config or VideoConfig()
    if frames_per_video < 2:
        raise ValueError("frames_per_video must be >= 2")
    if frame_gap is not None and frames_per_video < 2 * frame_gap:
        raise ValueError("frames_per_video must be >= 2 * frame_gap")
    cells = _cells(cfg.frame_size, cfg.box_max)
    if objects_per_scene > len(cells):
        raise ValueError(
            f"{objects_per_scene} objects exceed placement capacity {len(cells)}"
        )
    rng = np.random.default_rng([seed, 0x71DE0])
    videos = []
    instance_counter = 0
    for vid in range(n_videos):
        chosen = rng.permutation(len(cells))[:objects_per_scene]
        objs = []
        for c in chosen:
            category = int(rng.integers(cfg.n_classes))
            side = int(rng.integers(cfg.box_min, cfg.box_max + 1))
            cx, cy = cells[c]
            slack = cfg.box_max - side
            objs.append(
                dict(
                    category=category,
                    instance=instance_counter,
                    side=side,
                    cell=(cx, cy),
                    slack=slack,
                    pos=[int(rng.integers(0, slack + 1)), int(rng.integers(0, slack + 1))],
                    pose=float(rng.uniform(0, 360)),
                    spin=float(rng.choice([-1.0, 1.0]) * rng.uniform(0.5, 0.9) * cfg.max_pose_delta),
                    occ=float(rng.uniform(0, cfg.max_occlusion)),
                    illum=float(rng.uniform(0, 360)),
                    occluder_side=int(rng.integers(4)),
                )
            )
            instance_counter += 1

        frames, regions, owner_maps = [], [], []
        specs_per_obj = [[] for _ in objs]
        for t in range(frames_per_video):
            frame = background(rng, cfg.frame_size, cfg.frame_size, cfg.channels)
            gt_boxes = []
            for k, o in enumerate(objs):
                if t > 0:
                    noise = cfg.max_pose_delta - abs(o["spin"])
                    delta = o["spin"] + rng.uniform(-noise, noise)
                    o["pose"] = float((o["pose"] + delta) % 360.0)
                    for a in range(2):
                        step = int(rng.integers(-cfg.max_shift, cfg.max_shift + 1))
                        o["pos"][a] = int(np.clip(o["pos"][a] + step, 0, o["slack"]))
                    o["occ"] = float(
                        np.clip(
                            o["occ"] + rng.uniform(-cfg.max_occlusion_delta, cfg.max_occlusion_delta),
                            0.0,
                            cfg.max_occlusion,
                        )
                    )
                    o["illum"] = float(
                        (o["illum"] + rng.uniform(-cfg.max_illum_delta, cfg.max_illum_delta)) % 360.0
                    )
                spec = make_spec(
                    o["category"],
                    o["instance"],
                    pose=o["pose"],
                    occlusion=o["occ"],
                    illum_dir=o["illum"],
                    occluder_side=o["occluder_side"],
                )
                box = (o["cell"][0] + o["pos"][0], o["cell"][1] + o["pos"][1], o["side"], o["side"])
                paste(frame, spec, box)
                specs_per_obj[k].append(spec)
                gt_boxes.append(box)

            boxes = [(b, k) for k, b in enumerate(gt_boxes)]
            for b in gt_boxes:
                for _ in range(cfg.jitter_per_object):
                    boxes.append((_jitter_box(rng, b, cfg.jitter, cfg.frame_size), None))
            for _ in range(cfg.background_boxes):
                boxes.append((_random_box(rng, cfg.frame_size, cfg.box_min // 2, cfg.box_max), None))
            order = rng.permutation(len(boxes))
            frame_regions, gt_ids = [], {}
            for rid, idx in enumerate(order):
                box, owner = boxes[idx]
                frame_regions.append(Region(rid, tuple(int(c) for c in box)))
                if owner is not None:
                    gt_ids[owner] = rid
            frames.append(frame)
            regions.append(frame_regions)
            owner_maps.append(gt_ids)
        gt_tracks = [[(t, owner_maps[t][k]) for t in range(frames_per_video)] for k in range(len(objs))]
        videos.append(Video(frames, regions, gt_tracks, specs_per_obj, video_id=vid))
    return videos


# ---------------------------------------------------------------------------
# scene-centric vs object-centric datasets


@dataclass
class SceneSample(Sample):
    """A multi-object scene; ``category`` is the dominant (largest box) object."""

    categories: tuple = ()
    boxes: tuple = ()


def make_bias_datasets(
    n_scenes,
    seed,
    objects_per_scene=2,
    n_classes=4,
    frame_size=32,
    box_min=10,
    box_max=16,
    size=IMAGE_SIZE,
    channels=CHANNELS,
):
    """Scene images and, for each scene, one uniformly chosen object crop.

    Crops are the object's placement box resized to ``size``; objects sit in
    disjoint cells so a crop never contains another object's pixels.
    """
    cells = _cells(frame_size, box_max)
    if objects_per_scene > len(cells):
        raise ValueError(f"{objects_per_scene} objects exceed placement capacity {len(cells)}")
    rng = np.random.default_rng([seed, 0xB1A5])
    scenes, boxes_out = [], []
    instance = 0
    for _ in range(n_scenes):
        frame = background(rng, frame_size, frame_size, channels)
        chosen = rng.permutation(len(cells))[:objects_per_scene]
        specs, boxes = [], []
        for c in chosen:
            side = int(rng.integers(box_min, box_max + 1))
            slack = box_max - side
            box = (
                cells[c][0] + int(rng.integers(0, slack + 1)),
                cells[c][1] + int(rng.integers(0, slack + 1)),
                side,
                side,
            )
            spec = make_spec(
                int(rng.integers(n_classes)),
                instance,
                pose=float(rng.uniform(0, 360)),
                illum_dir=float(rng.uniform(0, 360)),
            )
            instance += 1
            paste(frame, spec, box)
            specs.append(spec)
            boxes.append(box)
        # dominant object: largest box, first on ties
        dom = int(np.argmax([b[2] * b[3] for b in boxes]))
        scenes.append(
            SceneSample(
                frame,
                specs[dom].category,
                specs[dom].instance_id,
                specs[dom],
                categories=tuple(s.category for s in specs),
                boxes=tuple(boxes),
            )
        )
        pick = int(rng.integers(len(boxes)))
        patch = resize_nearest(crop(frame, boxes[pick]), size, size)
        boxes_out.append(Sample(patch, specs[pick].category, specs[pick].instance_id, specs[pick]))
    return scenes, boxes_out
