"""Run orchestration shared by the CLI and the acceptance suite."""

from __future__ import annotations

import csv
import io
import json
import shutil
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from . import synthdata
from .config import RunConfig, desk_config
from .errors import ConfigError
from .metrics import EvalReport, evaluate
from .model import UTNet, build
from .train import FitResult, fit, predict_logits

ABLATION_AXES: dict[str, tuple] = {
    "levels": ("4", "34", "234", "1234"),
    "reduced_size": (4, 8, 16),
    "projection": ("bilinear", "maxpool"),
    "relpos": ("on", "off"),
}


def prepare_out(path: str | Path, force: bool = False, is_file: bool = False) -> Path:
    """Refuse to reuse an existing output unless ``force``; with ``force`` clear it first."""
    path = Path(path)
    if path.exists():
        if not force:
            raise ConfigError(f"{path} already exists; pass --force to overwrite")
        if path.is_dir():
            shutil.rmtree(path)
        else:
            path.unlink()
    (path.parent if is_file else path).mkdir(parents=True, exist_ok=True)
    return path


@dataclass
class RunResult:
    config: RunConfig
    model: UTNet
    fit: FitResult
    report: EvalReport | None
    out_dir: Path | None


def run_training(cfg: RunConfig, out_dir: str | Path | None = None, log=None) -> RunResult:
    """Build, train, and evaluate on the manifest's test split (final weights)."""
    manifest = cfg.data.make_manifest()
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        (out / "config.json").write_text(cfg.dumps())
        synthdata.save_manifest(manifest, out / "manifest.json")
    model = build(cfg.model, seed=cfg.train.seed)
    result = fit(model, manifest, cfg.train, out, log=log)
    report = None
    if synthdata.split_entries(manifest, "test"):
        report = evaluate(lambda im: predict_logits(model, im), manifest, multiple=model.multiple)
        if out is not None:
            (out / "eval.csv").write_text(report.to_csv({"checkpoint": "checkpoints/last"}))
    return RunResult(cfg, model, result, report, out)


# --------------------------------------------------------------------------
# UTNet versus baseline over seeds


COMPARE_COLUMNS = ["seed", "model", "params", "test_dice", "dice_A", "dice_B", "dice_C", "dice_D", "drop_C", "drop_D", "mean_drop_CD", "final_train_loss"]


def compare_row(seed: int, name: str, run: RunResult) -> dict:
    r = run.report
    row = {"seed": seed, "model": name, "params": run.model.census()["total"], "test_dice": r.overall_dice()}
    for v in "ABCD":
        row[f"dice_{v}"] = r.dice_mean(v) if v in r.vendors else ""
    for v in "CD":
        row[f"drop_{v}"] = r.drop(v) if v in r.vendors else ""
    row["mean_drop_CD"] = r.mean_drop() if {"C", "D"} <= set(r.vendors) else ""
    row["final_train_loss"] = run.fit.history[-1]["train_loss"]
    return row


def rows_csv(rows: list[dict], columns: list[str], header: dict | None = None) -> str:
    buf = io.StringIO()
    for k, v in (header or {}).items():
        buf.write(f"# {k}: {v}\n")
    w = csv.DictWriter(buf, fieldnames=columns, lineterminator="\n")
    w.writeheader()
    for row in rows:
        w.writerow({k: repr(v) if isinstance(v, float) else v for k, v in row.items()})
    return buf.getvalue()


def compare(seeds=(0, 1, 2), out_dir: str | Path | None = None, base: RunConfig | None = None, log=None) -> list[dict]:
    """Seed-matched UTNet and baseline runs on the same manifest."""
    base = base or desk_config()
    rows = []
    for seed in seeds:
        for name, baseline in (("utnet", False), ("baseline", True)):
            cfg = replace(base, model=replace(base.model, baseline_mode=baseline), train=replace(base.train, seed=seed))
            sub = Path(out_dir) / f"{name}_seed{seed}" if out_dir is not None else None
            run = run_training(cfg, sub, log=log)
            rows.append(compare_row(seed, name, run))
            if out_dir is not None:
                (Path(out_dir) / "compare.csv").write_text(rows_csv(rows, COMPARE_COLUMNS))
    return rows


# --------------------------------------------------------------------------
# ablation


def parse_axis_values(axis: str, values: str | None) -> tuple:
    if axis not in ABLATION_AXES:
        raise ConfigError(f"unknown ablation axis {axis!r}; valid axes: {sorted(ABLATION_AXES)}")
    valid = ABLATION_AXES[axis]
    if values is None:
        return valid
    out = []
    for raw in values.split(","):
        raw = raw.strip()
        val = int(raw) if axis == "reduced_size" and raw.isdigit() else raw
        if val not in valid:
            raise ConfigError(f"invalid {axis} value {raw!r}; valid values: {list(valid)}")
        out.append(val)
    return tuple(out)


def ablation_config(base: RunConfig, axis: str, value) -> RunConfig:
    m = base.model
    if axis == "levels":
        m = replace(m, attention_levels=value, baseline_mode=False)
    elif axis == "reduced_size":
        m = replace(m, attention=replace(m.attention, reduced_size=int(value)))
    elif axis == "projection":
        m = replace(m, attention=replace(m.attention, projection=value))
    elif axis == "relpos":
        m = replace(m, attention=replace(m.attention, use_relpos=(value == "on")))
    else:
        raise ConfigError(f"unknown ablation axis {axis!r}")
    return replace(base, model=m)


ABLATE_COLUMNS = ["axis", "value", "seed", "params", "final_train_loss", "best_val_dice_mean", "final_val_dice_mean"]


def ablate(base: RunConfig, axis: str, values=None, out_dir: str | Path | None = None, log=None) -> list[dict]:
    """One run per axis value, all sharing seeds and data; returns the comparison rows."""
    values = parse_axis_values(axis, values if isinstance(values, (str, type(None))) else ",".join(map(str, values)))
    rows = []
    for value in values:
        cfg = ablation_config(base, axis, value)
        sub = Path(out_dir) / f"{axis}_{value}" if out_dir is not None else None
        manifest = cfg.data.make_manifest()
        if sub is not None:
            sub.mkdir(parents=True, exist_ok=True)
            (sub / "config.json").write_text(cfg.dumps())
        model = build(cfg.model, seed=cfg.train.seed)
        res = fit(model, manifest, cfg.train, sub, log=log)
        vals = [h["val_dice_mean"] for h in res.history if h["val_dice_mean"] != ""]
        rows.append({
            "axis": axis,
            "value": value,
            "seed": cfg.train.seed,
            "params": model.census()["total"],
            "final_train_loss": res.history[-1]["train_loss"],
            "best_val_dice_mean": max(vals) if vals else "",
            "final_val_dice_mean": vals[-1] if vals else "",
        })
    if out_dir is not None:
        (Path(out_dir) / "ablate.csv").write_text(rows_csv(rows, ABLATE_COLUMNS, {"base": json.dumps(base.to_dict(), sort_keys=True)}))
    return rows


def config_diff(a: RunConfig, b: RunConfig) -> dict:
    """Flattened keys whose values differ between two run configs."""

    def flat(d, prefix=""):
        out = {}
        for k, v in d.items():
            if isinstance(v, dict):
                out.update(flat(v, f"{prefix}{k}."))
            else:
                out[f"{prefix}{k}"] = v
        return out

    fa, fb = flat(a.to_dict()), flat(b.to_dict())
    return {k: (fa.get(k), fb.get(k)) for k in sorted(set(fa) | set(fb)) if fa.get(k) != fb.get(k)}


def mean_over(rows: list[dict], model: str, key: str) -> float:
    return float(np.mean([r[key] for r in rows if r["model"] == model]))
