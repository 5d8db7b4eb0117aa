"""Staged experiment runner with artifact digests.

A manifest is ``{"stages": [...]}``; each stage is

    {"name": "train_baseline", "command": "train",
     "args": {"regime": "baseline", "data": "data/videos", "out": "ckpt/baseline.ckpt"},
     "config": {...} | "path.json" | null, "seed": 0,
     "inputs": ["data/videos"], "outputs": ["ckpt/baseline.ckpt"]}

Relative paths resolve against the working directory. A stage is skipped
when its definition, seed and input digests match the previous run and its
outputs still carry the recorded digests. An output whose digest changed
since it was written is treated as tampering: the run aborts and names the
stage that produced it.
"""

from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

from . import __version__, storage

log = logging.getLogger(__name__)

STATE = "pipeline_state.json"
PATH_ARGS = ("data", "ckpt", "tracks", "out", "inputs")


class PipelineError(RuntimeError):
    def __init__(self, stage, message):
        super().__init__(f"stage {stage!r}: {message}")
        self.stage = stage


@dataclass
class PipelineResult:
    executed: list = field(default_factory=list)
    skipped: list = field(default_factory=list)
    state: dict = field(default_factory=dict)


def _hash(obj):
    return hashlib.sha256(json.dumps(obj, sort_keys=True).encode()).hexdigest()


def _resolve(workdir, value):
    if isinstance(value, list):
        return [_resolve(workdir, v) for v in value]
    p = Path(value)
    return str(p if p.is_absolute() else workdir / p)


def stage_argv(stage, workdir, seed):
    """The ``lab`` argument vector for one stage."""
    argv = [stage["command"], "--seed", str(stage.get("seed", seed))]
    config = stage.get("config")
    if isinstance(config, dict):
        cfg_path = workdir / "configs" / f"{stage['name']}.json"
        cfg_path.parent.mkdir(parents=True, exist_ok=True)
        storage.write_json(cfg_path, config)
        argv += ["--config", str(cfg_path)]
    elif config:
        argv += ["--config", _resolve(workdir, config)]
    positional = []
    for key, value in stage.get("args", {}).items():
        if key in PATH_ARGS:
            value = _resolve(workdir, value)
        if key == "inputs":
            positional += value
            continue
        flag = "--" + key.replace("_", "-")
        if isinstance(value, list):
            argv += [flag, *map(str, value)]
        elif value is not None:
            argv += [flag, str(value)]
    return argv + positional


def _digests(workdir, paths):
    return {p: storage.digest(workdir / p) for p in paths if (workdir / p).exists()}


def run_pipeline(manifest, workdir, seed=0, runner=None):
    """Execute the stages of ``manifest`` in order inside ``workdir``."""
    from .cli import main as cli_main

    runner = runner or cli_main
    workdir = Path(workdir)
    workdir.mkdir(parents=True, exist_ok=True)
    state_path = workdir / STATE
    old = storage.read_json(state_path) if state_path.exists() else {}
    records = old.get("stages", {})
    producers = {out: name for name, rec in records.items() for out in rec.get("outputs", {})}
    result = PipelineResult()
    stages = manifest.get("stages", [])
    names = [s["name"] for s in stages]
    if len(set(names)) != len(names):
        raise ValueError("stage names must be unique")

    for stage in stages:
        name = stage["name"]
        # anything written by an earlier run must still match its digest
        for path in [*stage.get("inputs", []), *stage.get("outputs", [])]:
            owner = producers.get(path)
            if owner is None or not (workdir / path).exists():
                continue
            recorded = records[owner]["outputs"][path]
            if storage.digest(workdir / path) != recorded:
                raise PipelineError(owner, f"digest mismatch for {path}")
        inputs = _digests(workdir, stage.get("inputs", []))
        missing = [p for p in stage.get("inputs", []) if p not in inputs]
        if missing:
            raise PipelineError(name, f"missing inputs {missing}")
        key = _hash({"stage": stage, "seed": seed, "inputs": inputs})
        rec = records.get(name)
        outputs = stage.get("outputs", [])
        if rec and rec["key"] == key and all((workdir / p).exists() for p in outputs):
            result.skipped.append(name)
            continue
        argv = stage_argv(stage, workdir, seed)
        log.info("running %s: lab %s", name, " ".join(argv))
        code = runner(argv)
        if code != 0:
            raise PipelineError(name, f"exited with status {code}")
        produced = _digests(workdir, outputs)
        absent = [p for p in outputs if p not in produced]
        if absent:
            raise PipelineError(name, f"did not write {absent}")
        records[name] = {"key": key, "inputs": inputs, "outputs": produced, "argv": argv}
        for p in produced:
            producers[p] = name
        result.executed.append(name)
        _save_state(state_path, manifest, seed, records)

    if not stages and not (workdir / "report" / "report.md").exists():
        from . import report

        report.render([], workdir / "report")
    if not state_path.exists() or result.executed:
        _save_state(state_path, manifest, seed, records)
    result.state = records
    return result


def _save_state(path, manifest, seed, records):
    storage.write_json(path, {"version": __version__, "seed": seed, "manifest": manifest, "stages": records})


# ---------------------------------------------------------------------------


# Training recipe for the directional experiments. Crops of at least half the
# frame keep some object in both views of a positive pair.
EXPERIMENT_TRAIN = {"steps": 4000, "aug": {"crop_area": [0.5, 1.0]}}


def standard_manifest(steps=EXPERIMENT_TRAIN["steps"], n_videos=150, frames=12, train=None, bias_train=None,
                      seeds=(0, 1, 2, 3, 4)):
    """generate -> train (all regimes) -> track -> retrain -> ris -> probe -> bias -> report."""
    train_cfg = {**EXPERIMENT_TRAIN, "steps": steps, **(train or {})}
    stages = [
        {"name": "gen_videos", "command": "generate", "args": {"kind": "videos", "out": "data/videos"},
         "config": {"n_videos": n_videos, "frames_per_video": frames}, "outputs": ["data/videos"]},
        {"name": "gen_trajectories", "command": "generate", "args": {"kind": "trajectories", "out": "data/trajectories"},
         "config": {}, "outputs": ["data/trajectories"]},
        {"name": "gen_bias", "command": "generate", "args": {"kind": "bias", "out": "data/bias"},
         "config": {}, "outputs": ["data/bias"]},
    ]
    for regime in ("baseline", "frame-temporal", "gt-tracks"):
        stages.append({
            "name": f"train_{regime}", "command": "train",
            "args": {"regime": regime, "data": "data/videos", "out": f"ckpt/{regime}.ckpt"},
            "config": train_cfg, "inputs": ["data/videos"],
            "outputs": [f"ckpt/{regime}.ckpt", f"ckpt/{regime}.metrics.csv"],
        })
    stages += [
        {"name": "track", "command": "track",
         "args": {"data": "data/videos", "ckpt": "ckpt/baseline.ckpt", "out": "tracks/tracks.json"},
         "config": {}, "inputs": ["data/videos", "ckpt/baseline.ckpt"],
         "outputs": ["tracks/tracks.json", "tracks/tracks.summary.json"]},
        {"name": "train_region-tracker", "command": "train",
         "args": {"regime": "region-tracker", "data": "data/videos", "tracks": "tracks/tracks.json",
                  "out": "ckpt/region-tracker.ckpt"},
         "config": train_cfg, "inputs": ["data/videos", "tracks/tracks.json"],
         "outputs": ["ckpt/region-tracker.ckpt", "ckpt/region-tracker.metrics.csv"]},
    ]
    report_inputs = ["tracks/tracks.summary.json"]
    for regime in ("baseline", "frame-temporal", "gt-tracks", "region-tracker"):
        ckpt = f"ckpt/{regime}.ckpt"
        stages.append({
            "name": f"ris_{regime}", "command": "ris",
            "args": {"ckpt": ckpt, "data": ["data/trajectories"], "out": f"ris/{regime}.json"},
            "inputs": [ckpt, "data/trajectories"], "outputs": [f"ris/{regime}.json"],
        })
        stages.append({
            "name": f"probe_{regime}", "command": "probe",
            "args": {"ckpt": ckpt, "data": "data/bias", "use": "boxes", "out": f"probe/{regime}.json"},
            "inputs": [ckpt, "data/bias"], "outputs": [f"probe/{regime}.json"],
        })
        report_inputs += [f"ris/{regime}.json", f"probe/{regime}.json", f"ckpt/{regime}.metrics.csv"]
    stages.append({
        "name": "bias", "command": "bias", "args": {"data": "data/bias", "out": "bias/bias.json"},
        "config": {"seeds": list(seeds), "train": {**EXPERIMENT_TRAIN, "steps": steps, **(bias_train or train or {})}},
        "inputs": ["data/bias"], "outputs": ["bias/bias.json"],
    })
    report_inputs.append("bias/bias.json")
    stages.append({
        "name": "report", "command": "report", "args": {"inputs": report_inputs, "out": "report"},
        "inputs": report_inputs,
        "outputs": ["report/report.md", "report/ris.csv", "report/probe.csv", "report/report.json"],
    })
    return {"stages": stages}
