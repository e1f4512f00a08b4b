"""Dice, Hausdorff and the per-vendor robustness report."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy import ndimage
from scipy.spatial import cKDTree

from . import synthdata
from .errors import ConfigError, DataError

FOREGROUND = (1, 2, 3)
CLASS_LABELS = {1: "LV", 2: "MYO", 3: "RV"}
_CROSS = ndimage.generate_binary_structure(2, 1)


def _masks(pred, gt, class_id):
    pred, gt = np.asarray(pred), np.asarray(gt)
    if pred.shape != gt.shape:
        raise DataError(f"mask shapes differ: {pred.shape} vs {gt.shape}")
    return pred == class_id, gt == class_id


def dice_score(pred, gt, class_id: int) -> float:
    """2|P and G| / (|P| + |G|); both empty scores 1, one empty scores 0."""
    p, g = _masks(pred, gt, class_id)
    denom = int(p.sum()) + int(g.sum())
    if denom == 0:
        return 1.0
    return 2.0 * int((p & g).sum()) / denom


def boundary(mask: np.ndarray) -> np.ndarray:
    """Pixels of ``mask`` removed by one 4-connected erosion (image edge counts as outside)."""
    return mask & ~ndimage.binary_erosion(mask, structure=_CROSS, border_value=0)


def hausdorff(pred, gt, class_id: int) -> float:
    """Symmetric Hausdorff distance in pixels between the two class boundaries.

    Both empty gives 0; exactly one empty gives the image diagonal.
    """
    p, g = _masks(pred, gt, class_id)
    has_p, has_g = bool(p.any()), bool(g.any())
    if not has_p and not has_g:
        return 0.0
    if has_p != has_g:
        return math.hypot(*p.shape)
    bp = np.argwhere(boundary(p)).astype(np.float64)
    bg = np.argwhere(boundary(g)).astype(np.float64)
    d_pg = cKDTree(bg).query(bp)[0].max()
    d_gp = cKDTree(bp).query(bg)[0].max()
    return float(max(d_pg, d_gp))


# --------------------------------------------------------------------------
# robustness report


@dataclass
class EvalReport:
    """Per-sample scores plus the aggregates derived from them."""

    vendors: list[str]
    # (vendor, class_id) -> per-sample values, in seed order
    dice: dict[tuple[str, int], list[float]] = field(default_factory=dict)
    hd: dict[tuple[str, int], list[float]] = field(default_factory=dict)

    def dice_mean(self, vendor: str, class_id: int | None = None) -> float:
        if class_id is None:
            return float(np.mean([self.dice_mean(vendor, c) for c in FOREGROUND]))
        return float(np.mean(self.dice[vendor, class_id]))

    def hd_mean(self, vendor: str, class_id: int | None = None) -> float:
        if class_id is None:
            return float(np.mean([self.hd_mean(vendor, c) for c in FOREGROUND]))
        return float(np.mean(self.hd[vendor, class_id]))

    def overall_dice(self) -> float:
        """Mean foreground Dice over every evaluated sample."""
        vals = [v for c in FOREGROUND for vd in self.vendors for v in self.dice[vd, c]]
        return float(np.mean(vals))

    def has_reference(self) -> bool:
        return "A" in self.vendors and "B" in self.vendors

    def drop(self, vendor: str, class_id: int | None = None) -> float:
        """mean(A, B) - value; positive means worse than the training vendors."""
        if not self.has_reference():
            raise ConfigError("drop needs both vendor A and vendor B in the evaluation set")
        ref = (self.dice_mean("A", class_id) + self.dice_mean("B", class_id)) / 2.0
        return ref - self.dice_mean(vendor, class_id)

    def mean_drop(self, vendors=("C", "D")) -> float:
        return float(np.mean([self.drop(v) for v in vendors]))

    def rows(self) -> list[dict]:
        out = []
        for v in self.vendors:
            for c in (*FOREGROUND, None):
                if c is None:
                    d_std = h_std = ""
                    n = len(self.dice[v, FOREGROUND[0]])
                else:
                    d_std = repr(float(np.std(self.dice[v, c])))
                    h_std = repr(float(np.std(self.hd[v, c])))
                    n = len(self.dice[v, c])
                out.append({
                    "vendor": v,
                    "class": CLASS_LABELS.get(c, "mean"),
                    "n": n,
                    "dice_mean": repr(self.dice_mean(v, c)),
                    "dice_std": d_std,
                    "hausdorff_mean": repr(self.hd_mean(v, c)),
                    "hausdorff_std": h_std,
                    "dice_drop": repr(self.drop(v, c)) if self.has_reference() else "",
                })
        return out

    def to_csv(self, header: dict | None = None) -> str:
        buf = io.StringIO()
        for k, v in (header or {}).items():
            buf.write(f"# {k}: {v}\n")
        buf.write("# hausdorff unit: pixels (spacing metadata 1.2 mm)\n")
        buf.write("# dice_drop = mean(dice_A, dice_B) - dice_vendor\n")
        rows = self.rows()
        w = csv.DictWriter(buf, fieldnames=list(rows[0]), lineterminator="\n")
        w.writeheader()
        w.writerows(rows)
        return buf.getvalue()

    def table(self) -> str:
        """Fixed-width human-readable summary."""
        lines = [f"{'vendor':<7}{'LV':>8}{'MYO':>8}{'RV':>8}{'mean':>8}{'HD':>8}{'drop':>8}"]
        for v in self.vendors:
            cells = [f"{self.dice_mean(v, c):8.4f}" for c in FOREGROUND]
            drop = f"{self.drop(v):8.4f}" if self.has_reference() else f"{'-':>8}"
            lines.append(f"{v:<7}{''.join(cells)}{self.dice_mean(v):8.4f}{self.hd_mean(v):8.2f}{drop}")
        return "\n".join(lines)


def read_report_csv(text: str) -> list[dict]:
    body = [line for line in text.splitlines() if not line.startswith("#")]
    return list(csv.DictReader(body))


def predict_labels(predict: Callable[[np.ndarray], np.ndarray], images: np.ndarray) -> np.ndarray:
    """Argmax over the class axis of ``predict(images)``."""
    return np.asarray(predict(images)).argmax(axis=1)


def evaluate(
    predict: Callable[[np.ndarray], np.ndarray],
    manifest: dict,
    split: str = "test",
    batch_size: int = 8,
    multiple: int = 1,
) -> EvalReport:
    """Score ``predict`` (images B x 1 x H x W -> logits B x K x H x W) on a manifest split.

    Samples are processed in (vendor, seed) order so the result does not
    depend on manifest ordering.
    """
    size = manifest["size"]
    if size % multiple:
        raise ConfigError(f"manifest size {size} is not a multiple of {multiple} required by the model")
    entries = sorted(synthdata.split_entries(manifest, split), key=lambda e: (e["vendor"], e["seed"]))
    if not entries:
        raise ConfigError(f"manifest has no {split!r} entries")
    vendors = sorted({e["vendor"] for e in entries})
    report = EvalReport(vendors=vendors)
    for v in vendors:
        for c in FOREGROUND:
            report.dice[v, c], report.hd[v, c] = [], []
    for i in range(0, len(entries), batch_size):
        chunk = entries[i : i + batch_size]
        samples = [synthdata.generate(e["seed"], e["vendor"], size) for e in chunk]
        logits = np.asarray(predict(np.stack([s.image for s in samples])))
        if logits.ndim != 4 or logits.shape[1] != 4 or logits.shape[2:] != (size, size):
            raise ConfigError(f"model produced logits {logits.shape}, expected (B, 4, {size}, {size})")
        preds = logits.argmax(axis=1)
        for s, pred in zip(samples, preds):
            for c in FOREGROUND:
                report.dice[s.vendor, c].append(dice_score(pred, s.label, c))
                report.hd[s.vendor, c].append(hausdorff(pred, s.label, c))
    return report
