"""``lab`` command line.

Every subcommand takes ``--seed``, ``--config`` (a JSON file) and ``--out``.
Exit status is 0 only when every stage succeeded.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
import warnings
from pathlib import Path

import numpy as np

from . import contrastive as con
from . import evaluation as ev
from . import invariance as inv
from . import storage
from . import tracker as tk
from . import world

log = logging.getLogger("lab")

GENERATE_DEFAULTS = {
    "trajectories": {
        "n_classes": 4,
        "n_trajectories_per_class": 25,
        "steps": 8,
        "transformations": list(world.TRANSFORMATIONS),
    },
    "videos": {"n_videos": 150, "frames_per_video": 12, "objects_per_scene": 2, "video": {}},
    "bias": {"n_scenes": 400, "objects_per_scene": 2, "n_classes": 4},
}


def regime_name(text):
    """CLI spelling (``frame-temporal``) to library spelling (``frame_temporal``)."""
    name = text.replace("-", "_")
    if name not in con.REGIMES:
        raise argparse.ArgumentTypeError(f"unknown regime {text!r}")
    return name


def load_config(path):
    return {} if path is None else storage.read_json(path)


def _merged(defaults, cfg):
    unknown = set(cfg) - set(defaults)
    if unknown:
        raise ValueError(f"unknown config keys: {sorted(unknown)}")
    return {**defaults, **cfg}


# ---------------------------------------------------------------------------
# subcommands


def cmd_generate(args):
    cfg = load_config(args.config)
    kind = args.kind or cfg.pop("kind", None)
    cfg.pop("kind", None)
    if kind not in GENERATE_DEFAULTS:
        raise ValueError(f"--kind must be one of {sorted(GENERATE_DEFAULTS)}")
    cfg = _merged(GENERATE_DEFAULTS[kind], cfg)
    out = Path(args.out)
    meta = {"kind": kind, **cfg}
    if kind == "trajectories":
        for name in cfg["transformations"]:
            trajs = world.make_trajectory_dataset(
                name, cfg["n_classes"], cfg["n_trajectories_per_class"], cfg["steps"], args.seed
            )
            storage.save_dataset(out / name.replace("+", "_"), kind, trajs, args.seed, meta)
    elif kind == "videos":
        vcfg = world.VideoConfig(**cfg["video"])
        videos = world.make_video_dataset(
            cfg["n_videos"], cfg["frames_per_video"], cfg["objects_per_scene"], args.seed, vcfg
        )
        storage.save_dataset(out, kind, videos, args.seed, meta)
    else:
        pair = world.make_bias_datasets(
            cfg["n_scenes"], args.seed, objects_per_scene=cfg["objects_per_scene"], n_classes=cfg["n_classes"]
        )
        storage.save_dataset(out, kind, pair, args.seed, meta)
    return 0


def write_metrics(path, metrics):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["step", "loss", "queue_size", "lr"])
        for m in metrics:
            w.writerow([m["step"], repr(float(m["loss"])), m["queue_size"], repr(float(m["lr"]))])


def read_metrics(path):
    with open(path, newline="") as fh:
        return [
            {"step": int(r["step"]), "loss": float(r["loss"]), "queue_size": int(r["queue_size"]), "lr": float(r["lr"])}
            for r in csv.DictReader(fh)
        ]


def cmd_train(args):
    cfg = con.TrainConfig.from_dict({**load_config(args.config), "regime": args.regime})
    kind, payload, _ = storage.load_dataset(args.data)
    if kind != "videos" and args.regime != "baseline":
        raise ValueError(f"{args.regime} needs a videos dataset")
    if kind == "bias":
        data = payload[0] if args.use == "scenes" else payload[1]
    elif kind == "trajectories":
        data = [s for t in payload for s in t.samples]
    else:
        data = payload
    tracks = None
    if args.regime == "region_tracker":
        if not args.tracks:
            raise ValueError("region-tracker training needs --tracks")
        tracks = [tk.Track.from_dict(d) for d in storage.read_json(args.tracks)]
    result = con.train(args.regime, data, cfg, args.seed, tracks=tracks)
    out = Path(args.out)
    storage.save_checkpoint(
        out, result.params, cfg.to_dict(), cfg.steps,
        extra={"seed": args.seed, "regime": args.regime, "patch_fallbacks": result.patch_fallbacks},
    )
    write_metrics(out.with_suffix(".metrics.csv"), result.metrics)
    return 0


TRACK_DEFAULTS = {"horizon": None, "quantile": 0.9, "top_r": None, "stride": 4, "center": "frame"}


def cmd_track(args):
    cfg = _merged(TRACK_DEFAULTS, load_config(args.config))
    kind, videos, _ = storage.load_dataset(args.data)
    if kind != "videos":
        raise ValueError("tracking needs a videos dataset")
    params, header = storage.load_checkpoint(args.ckpt)
    horizon = cfg["horizon"] or header["config"].get("frame_gap") or con.default_frame_gap(
        min(len(v) for v in videos)
    )
    tracks, threshold = tk.build_all_tracks(
        videos, params, horizon, args.threshold, cfg["top_r"], cfg["stride"], args.seed, cfg["quantile"],
        cfg["center"],
    )
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    storage.write_json(args.out, [t.to_dict() for t in tracks])
    summary = {
        "n_tracks": len(tracks),
        "threshold": threshold,
        "horizon": horizon,
        "purity": tk.track_purity(tracks, videos),
    }
    storage.write_json(Path(args.out).with_suffix(".summary.json"), summary)
    return 0


def cmd_ris(args):
    cfg = load_config(args.config)
    mode = (args.mode or cfg.get("mode", "class-adaptive")).replace("-", "_")
    ks = tuple(int(k) for k in (args.k.split(",") if args.k else cfg.get("ks", (10, 25))))
    layers = tuple(cfg.get("layers", ("raw", "embedding")))
    firing = inv.FiringConfig(mode=mode, rate=cfg.get("rate", 0.01), ks=ks)
    params, header = storage.load_checkpoint(args.ckpt)
    datasets = {}
    for d in storage.dataset_dirs(args.data):
        kind, trajs, _ = storage.load_dataset(d)
        if kind != "trajectories" or not trajs:
            warnings.warn(f"{d} holds no trajectories; skipped")
            continue
        datasets[trajs[0].transformation] = trajs
    for name in cfg.get("transformations", []):
        if name not in datasets:
            warnings.warn(f"no dataset for {name!r}; skipped")
    meta = {"checkpoint": storage.digest(args.ckpt)[:16], "regime": header.get("regime"), "seed": args.seed}
    report = inv.evaluate_all(params, datasets, firing, layers, meta)
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    storage.write_json(args.out, report.to_dict())
    return 0


def cmd_probe(args):
    cfg = load_config(args.config)
    probe = ev.ProbeConfig(**cfg)
    params, _ = storage.load_checkpoint(args.ckpt)
    kind, payload, _ = storage.load_dataset(args.data)
    if kind == "bias":
        scenes, boxes = payload
        samples = boxes if args.use == "boxes" else scenes
    elif kind == "trajectories":
        samples = [s for t in payload for s in t.samples]
    else:
        raise ValueError("probing needs a bias or trajectories dataset")
    res = ev.probe_samples(params, samples, probe, args.seed, task=f"{args.use}_top1",
                           checkpoint=storage.digest(args.ckpt)[:16])
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    storage.write_json(args.out, res.to_dict())
    return 0


BIAS_DEFAULTS = {"seeds": [0, 1, 2, 3, 4], "train": {}, "probe": {}, "eval_scenes": 400}


def cmd_bias(args):
    cfg = _merged(BIAS_DEFAULTS, load_config(args.config))
    _, (scenes, boxes), manifest = storage.load_dataset(args.data)
    n_scenes = cfg["eval_scenes"]
    eval_scenes, eval_boxes = world.make_bias_datasets(
        n_scenes, args.seed + 7919,
        objects_per_scene=manifest["config"].get("objects_per_scene", 2),
        n_classes=manifest["config"].get("n_classes", 4),
    )
    res = ev.bias_experiment(
        scenes, boxes, eval_scenes, eval_boxes,
        con.TrainConfig.from_dict(cfg["train"]), [args.seed + s for s in cfg["seeds"]],
        ev.ProbeConfig(**cfg["probe"]),
    )
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    storage.write_json(args.out, res.to_dict())
    return 0


def cmd_report(args):
    from . import report

    cfg = load_config(args.config)
    report.render(args.inputs, Path(args.out), cfg)
    return 0


def cmd_pipeline(args):
    from . import pipeline

    manifest = load_config(args.config) if args.config else {"stages": []}
    result = pipeline.run_pipeline(manifest, Path(args.out), seed=args.seed)
    print(json.dumps({"executed": result.executed, "skipped": result.skipped}))
    return 0


# ---------------------------------------------------------------------------


def build_parser():
    p = argparse.ArgumentParser(prog="lab", description="Invariance lab: synthetic data, contrastive training, RIS")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def add(name, fn, help_text):
        sp = sub.add_parser(name, help=help_text)
        sp.add_argument("--seed", type=int, default=0)
        sp.add_argument("--config", default=None, help="JSON config file")
        sp.add_argument("--out", required=True)
        sp.set_defaults(func=fn)
        return sp

    sp = add("generate", cmd_generate, "render a synthetic dataset")
    sp.add_argument("--kind", choices=sorted(GENERATE_DEFAULTS))

    sp = add("train", cmd_train, "train an encoder")
    sp.add_argument("--regime", type=regime_name, default="baseline")
    sp.add_argument("--data", required=True)
    sp.add_argument("--tracks", default=None)
    sp.add_argument("--use", choices=("scenes", "boxes"), default="scenes")

    sp = add("track", cmd_track, "build region tracks")
    sp.add_argument("--data", required=True)
    sp.add_argument("--ckpt", required=True)
    sp.add_argument("--threshold", type=float, default=None)

    sp = add("ris", cmd_ris, "Top-K invariance scores")
    sp.add_argument("--ckpt", required=True)
    sp.add_argument("--data", nargs="+", required=True)
    sp.add_argument("--mode", choices=("class-adaptive", "fixed-rate"), default=None)
    sp.add_argument("--k", default=None, help="comma separated, e.g. 10,25")

    sp = add("probe", cmd_probe, "linear probe on frozen features")
    sp.add_argument("--ckpt", required=True)
    sp.add_argument("--data", required=True)
    sp.add_argument("--use", choices=("scenes", "boxes"), default="boxes")

    sp = add("bias", cmd_bias, "scene-trained vs box-trained comparison")
    sp.add_argument("--data", required=True)

    sp = add("report", cmd_report, "render tables and figures")
    sp.add_argument("inputs", nargs="+", help="RIS, probe, bias, track summary or metrics files")

    add("pipeline", cmd_pipeline, "run a staged experiment manifest")
    return p


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return int(args.func(args) or 0)
    except Exception as exc:  # noqa: BLE001 - report and fail the stage
        log.error("%s failed: %s", args.command, exc)
        if args.verbose:
            raise
        return 1


if __name__ == "__main__":
    sys.exit(main())
