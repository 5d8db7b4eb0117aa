"""Render result files into Markdown tables, CSV, JSON and PNG figures."""

from __future__ import annotations

import csv
import json
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from . import storage  # noqa: E402
from .world import TRANSFORMATIONS  # noqa: E402

COLUMN_TITLES = {
    "occlusion": "Occlusion",
    "viewpoint": "Viewpoint",
    "illum_dir": "Illum. dir",
    "illum_color": "Illum. color",
    "instance": "Instance",
    "instance+viewpoint": "Instance+Viewpoint",
}


def classify(path):
    """Kind of a result file: ris, probe, bias, tracks or metrics."""
    path = Path(path)
    if path.suffix == ".csv":
        return "metrics", None
    data = json.loads(path.read_text())
    if isinstance(data, dict):
        if "scores" in data and "tables" in data:
            return "ris", data
        if "metric" in data and "value" in data:
            return "probe", data
        if "rows" in data and "verdict" in data:
            return "bias", data
        if "purity" in data:
            return "tracks", data
    raise ValueError(f"cannot tell what {path} holds")


def _label(path, data=None):
    meta = (data or {}).get("metadata", {})
    return Path(path).name.split(".")[0]


def collect(inputs):
    out = {"ris": {}, "probe": {}, "bias": None, "tracks": None, "metrics": {}}
    for p in inputs:
        kind, data = classify(p)
        if kind == "ris":
            out["ris"][_label(p, data)] = data
        elif kind == "probe":
            out["probe"][_label(p)] = data
        elif kind == "metrics":
            from .cli import read_metrics

            out["metrics"][_label(p)] = read_metrics(p)
        else:
            out[kind] = data
    return out


def _fmt(v):
    return "" if v is None else f"{v:.2f}"


def ris_rows(ris):
    """Flat rows ``(model, layer, k, transformation, percentage)``."""
    rows = []
    for model, rep in ris.items():
        for layer, per in rep["scores"].items():
            for name in TRANSFORMATIONS:
                for k, v in sorted(per.get(name, {}).items(), key=lambda kv: int(kv[0])):
                    rows.append({"model": model, "layer": layer, "k": int(k), "transformation": name, "ris": v})
    return rows


def ris_markdown(ris):
    lines = []
    rows = ris_rows(ris)
    layers = sorted({r["layer"] for r in rows})
    ks = sorted({r["k"] for r in rows})
    names = [n for n in TRANSFORMATIONS if any(r["transformation"] == n for r in rows)]
    for layer in layers:
        for k in ks:
            lines.append(f"### Top-{k} invariance (%), layer `{layer}`")
            lines.append("")
            lines.append("| Model | " + " | ".join(COLUMN_TITLES[n] for n in names) + " |")
            lines.append("|---" * (len(names) + 1) + "|")
            for model in ris:
                vals = {r["transformation"]: r["ris"] for r in rows
                        if r["model"] == model and r["layer"] == layer and r["k"] == k}
                lines.append(f"| {model} | " + " | ".join(_fmt(vals.get(n)) for n in names) + " |")
            lines.append("")
    return lines


def render(inputs, outdir, config=None):
    """Write ``report.md``, ``report.json``, ``ris.csv``, ``probe.csv`` and figures to ``outdir``."""
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    res = collect(inputs)
    md = ["# Invariance lab report", ""]

    rows = ris_rows(res["ris"])
    _write_csv(outdir / "ris.csv", ["model", "layer", "k", "transformation", "ris"], rows)
    if rows:
        md += ["## Representation invariance", ""] + ris_markdown(res["ris"])
        _plot_ris(rows, outdir / "ris.png")

    probe_rows = [{"model": m, **d} for m, d in res["probe"].items()]
    _write_csv(outdir / "probe.csv", ["model", "task", "metric", "value", "n_train", "n_test", "seed"], probe_rows)
    if probe_rows:
        md += ["## Linear probe", "", "| Model | Task | Top-1 |", "|---|---|---|"]
        md += [f"| {r['model']} | {r['task']} | {100 * r['value']:.2f} |" for r in probe_rows]
        md.append("")

    if res["tracks"]:
        t = res["tracks"]
        md += ["## Region tracks", "",
               f"{t['n_tracks']} tracks over horizon {t['horizon']}, threshold {t['threshold']:.4f}, "
               f"purity {t['purity']:.3f}.", ""]

    if res["bias"]:
        md += bias_markdown(res["bias"])
        _plot_bias(res["bias"], outdir / "bias.png")

    if res["metrics"]:
        _plot_losses(res["metrics"], outdir / "loss.png")
        md += ["## Training", "", "| Model | Steps | First-10% median loss | Last-10% median loss |",
               "|---|---|---|---|"]
        for model, m in res["metrics"].items():
            loss = np.array([r["loss"] for r in m])
            tenth = max(1, len(loss) // 10)
            md.append(f"| {model} | {len(loss)} | {np.median(loss[:tenth]):.4f} | {np.median(loss[-tenth:]):.4f} |")
        md.append("")

    (outdir / "report.md").write_text("\n".join(md) + "\n")
    storage.write_json(outdir / "report.json", {
        "ris": rows, "probe": probe_rows, "bias": res["bias"], "tracks": res["tracks"],
    })
    return outdir


def bias_markdown(bias):
    table = {}
    for r in bias["rows"]:
        table.setdefault(r["arm"], {}).setdefault(r["eval"], []).append(r["value"])
    lines = ["## Scene-centric vs object-centric training", "",
             "| Trained on | Scene eval top-1 | Box eval top-1 |", "|---|---|---|"]
    for arm, name in (("scene", "Scenes"), ("box", "Cropped boxes")):
        if arm in table:
            s = 100 * np.mean(table[arm]["scene_eval"])
            b = 100 * np.mean(table[arm]["box_eval"])
            lines.append(f"| {name} | {s:.2f} | {b:.2f} |")
    v = bias["verdict"]
    lines += ["", f"Box-trained wins on boxes in {v['box_wins_on_boxes']} of {v['n_seeds']} seeds; "
              f"mean gap {100 * v['mean_gap_box_eval']:.2f} on boxes, "
              f"{100 * v['mean_gap_scene_eval']:.2f} on scenes.", ""]
    return lines


def _write_csv(path, fields, rows):
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=fields, extrasaction="ignore", lineterminator="\n")
        w.writeheader()
        w.writerows(rows)


def _plot_ris(rows, path):
    layer = "raw" if any(r["layer"] == "raw" for r in rows) else rows[0]["layer"]
    k = min(r["k"] for r in rows)
    sel = [r for r in rows if r["layer"] == layer and r["k"] == k]
    models = list(dict.fromkeys(r["model"] for r in sel))
    names = [n for n in TRANSFORMATIONS if any(r["transformation"] == n for r in sel)]
    fig, ax = plt.subplots(figsize=(8, 3.5))
    width = 0.8 / max(1, len(models))
    for i, m in enumerate(models):
        vals = [next((r["ris"] for r in sel if r["model"] == m and r["transformation"] == n), 0.0) for n in names]
        ax.bar(np.arange(len(names)) + i * width, vals, width, label=m)
    ax.set_xticks(np.arange(len(names)) + 0.4 - width / 2)
    ax.set_xticklabels([COLUMN_TITLES[n] for n in names], fontsize=8)
    ax.set_ylabel(f"Top-{k} RIS (%)")
    ax.legend(fontsize=7)
    fig.tight_layout()
    fig.savefig(path, dpi=100, metadata={"Software": None})
    plt.close(fig)


def _plot_losses(metrics, path):
    fig, ax = plt.subplots(figsize=(6, 3.5))
    for model, m in metrics.items():
        ax.plot([r["step"] for r in m], [r["loss"] for r in m], label=model, lw=0.8)
    ax.set_xlabel("step")
    ax.set_ylabel("contrastive loss")
    ax.legend(fontsize=7)
    fig.tight_layout()
    fig.savefig(path, dpi=100, metadata={"Software": None})
    plt.close(fig)


def _plot_bias(bias, path):
    table = {}
    for r in bias["rows"]:
        table.setdefault(r["arm"], {}).setdefault(r["eval"], []).append(r["value"])
    fig, ax = plt.subplots(figsize=(4.5, 3.5))
    for i, arm in enumerate(("scene", "box")):
        if arm not in table:
            continue
        vals = [np.mean(table[arm].get(e, [0.0])) for e in ("scene_eval", "box_eval")]
        ax.bar(np.arange(2) + 0.4 * i, vals, 0.4, label=f"trained on {arm}s")
    ax.set_xticks([0.2, 1.2])
    ax.set_xticklabels(["scene eval", "box eval"])
    ax.set_ylabel("top-1")
    ax.legend(fontsize=7)
    fig.tight_layout()
    fig.savefig(path, dpi=100, metadata={"Software": None})
    plt.close(fig)
