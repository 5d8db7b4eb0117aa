"""On-disk formats.

Datasets are directories holding ``manifest.json`` and ``pixels.f32``: a
raw little-endian float32 blob of every image, row-major ``(h, w, c)``,
concatenated in the order of ``manifest["images"]`` (a list of shapes).
Checkpoints are single files: one line of JSON header, then the weights as a
little-endian float64 blob in ``EncoderParams.arrays()`` order.
"""

from __future__ import annotations

import hashlib
import json
import os
from pathlib import Path

import numpy as np

from .encoder import EncoderParams
from .world import ObjectSpec, Region, Sample, SceneSample, Trajectory, Video

FORMAT = "invlab-dataset"
VERSION = 1
MANIFEST = "manifest.json"
BLOB = "pixels.f32"
CKPT_MAGIC = "invlab-checkpoint"


def dumps(obj):
    return json.dumps(obj, sort_keys=True, indent=1)


def write_json(path, obj):
    Path(path).write_text(dumps(obj) + "\n")


def read_json(path):
    return json.loads(Path(path).read_text())


class _Blob:
    def __init__(self):
        self.chunks, self.shapes = [], []

    def add(self, image):
        arr = np.asarray(image, dtype="<f4")
        self.shapes.append(list(arr.shape))
        self.chunks.append(arr.tobytes(order="C"))
        return len(self.shapes) - 1


def _spec(s):
    return None if s is None else s.to_dict()


def _unspec(d):
    return None if d is None else ObjectSpec.from_dict(d)


def save_dataset(path, kind, payload, seed=None, config=None):
    """Write ``payload`` (trajectories, videos or a ``(scenes, boxes)`` pair)."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    blob = _Blob()
    manifest = {"format": FORMAT, "version": VERSION, "kind": kind, "seed": seed, "config": config or {}}
    if kind == "trajectories":
        manifest["trajectories"] = [
            {
                "transformation": t.transformation,
                "category": t.category,
                "samples": [
                    {"image": blob.add(s.image), "category": s.category,
                     "instance_id": s.instance_id, "spec": _spec(s.spec)}
                    for s in t.samples
                ],
            }
            for t in payload
        ]
        manifest["n_classes"] = len({t.category for t in payload})
    elif kind == "videos":
        manifest["videos"] = [
            {
                "video_id": v.video_id,
                "frames": [blob.add(f) for f in v.frames],
                "regions": [[{"id": r.region_id, "box": list(r.box)} for r in regs] for regs in v.regions],
                "gt_tracks": [[list(e) for e in track] for track in v.gt_tracks],
                "objects": [[_spec(s) for s in obj] for obj in v.objects],
            }
            for v in payload
        ]
    elif kind == "bias":
        scenes, boxes = payload
        manifest["scenes"] = [
            {"image": blob.add(s.image), "category": s.category, "instance_id": s.instance_id,
             "spec": _spec(s.spec), "categories": list(s.categories),
             "boxes": [list(b) for b in s.boxes]}
            for s in scenes
        ]
        manifest["boxes"] = [
            {"image": blob.add(s.image), "category": s.category, "instance_id": s.instance_id,
             "spec": _spec(s.spec)}
            for s in boxes
        ]
    else:
        raise ValueError(f"unknown dataset kind {kind!r}")
    manifest["images"] = blob.shapes
    (path / BLOB).write_bytes(b"".join(blob.chunks))
    write_json(path / MANIFEST, manifest)
    return path


def _read_images(path, shapes):
    raw = np.frombuffer((Path(path) / BLOB).read_bytes(), dtype="<f4")
    need = sum(int(np.prod(s)) for s in shapes)
    if raw.size != need:
        raise ValueError(f"pixel blob holds {raw.size} values, manifest expects {need}")
    out, offset = [], 0
    for shape in shapes:
        size = int(np.prod(shape))
        out.append(raw[offset : offset + size].astype(np.float64).reshape(shape))
        offset += size
    return out


def load_dataset(path):
    """Return ``(kind, payload, manifest)``."""
    path = Path(path)
    manifest = read_json(path / MANIFEST)
    if manifest.get("format") != FORMAT:
        raise ValueError(f"{path} is not an {FORMAT} directory")
    images = _read_images(path, manifest["images"])
    kind = manifest["kind"]
    if kind == "trajectories":
        payload = [
            Trajectory(
                t["transformation"],
                t["category"],
                [Sample(images[s["image"]], s["category"], s["instance_id"], _unspec(s["spec"]))
                 for s in t["samples"]],
            )
            for t in manifest["trajectories"]
        ]
    elif kind == "videos":
        payload = [
            Video(
                [images[i] for i in v["frames"]],
                [[Region(r["id"], tuple(r["box"])) for r in regs] for regs in v["regions"]],
                [[tuple(e) for e in track] for track in v["gt_tracks"]],
                [[_unspec(s) for s in obj] for obj in v["objects"]],
                v["video_id"],
            )
            for v in manifest["videos"]
        ]
    elif kind == "bias":
        scenes = [
            SceneSample(images[s["image"]], s["category"], s["instance_id"], _unspec(s["spec"]),
                        categories=tuple(s["categories"]), boxes=tuple(tuple(b) for b in s["boxes"]))
            for s in manifest["scenes"]
        ]
        boxes = [
            Sample(images[s["image"]], s["category"], s["instance_id"], _unspec(s["spec"]))
            for s in manifest["boxes"]
        ]
        payload = (scenes, boxes)
    else:
        raise ValueError(f"unknown dataset kind {kind!r}")
    return kind, payload, manifest


def dataset_dirs(paths):
    """Expand paths to dataset directories (a parent of dataset dirs expands to its children)."""
    out = []
    for p in paths:
        p = Path(p)
        if (p / MANIFEST).exists():
            out.append(p)
        elif p.is_dir():
            out.extend(sorted(c for c in p.iterdir() if (c / MANIFEST).exists()))
        else:
            raise FileNotFoundError(f"no dataset at {p}")
    return out


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(path, params, config=None, step=0, extra=None):
    header = {
        "format": CKPT_MAGIC,
        "version": VERSION,
        "shapes": params.shapes,
        "image_size": params.image_size,
        "channels": params.channels,
        "config": config or {},
        "step": int(step),
        **(extra or {}),
    }
    blob = b"".join(np.asarray(a, dtype="<f8").tobytes(order="C") for a in params.arrays())
    path = Path(path)
    if path.parent:
        path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(json.dumps(header, sort_keys=True).encode() + b"\n")
        fh.write(blob)
    return path


def load_checkpoint(path):
    """Return ``(params, header)``."""
    data = Path(path).read_bytes()
    line_end = data.index(b"\n")
    header = json.loads(data[:line_end])
    if header.get("format") != CKPT_MAGIC:
        raise ValueError(f"{path} is not a checkpoint")
    raw = np.frombuffer(data[line_end + 1 :], dtype="<f8")
    arrays, offset = [], 0
    for shape in header["shapes"]:
        for s in (tuple(shape), (shape[1],)):
            size = int(np.prod(s))
            arrays.append(raw[offset : offset + size].astype(np.float64).reshape(s))
            offset += size
    if offset != raw.size:
        raise ValueError("checkpoint blob size does not match its header")
    params = EncoderParams.from_arrays(arrays, header["image_size"], header["channels"])
    return params, header


# ---------------------------------------------------------------------------
# digests


def digest(path):
    """SHA-256 of a file, or of every file under a directory (sorted by relative path)."""
    path = Path(path)
    h = hashlib.sha256()
    if path.is_dir():
        for root, dirs, files in os.walk(path):
            dirs.sort()
            for name in sorted(files):
                f = Path(root) / name
                h.update(str(f.relative_to(path)).encode())
                h.update(hashlib.sha256(f.read_bytes()).digest())
    else:
        h.update(path.read_bytes())
    return h.hexdigest()
