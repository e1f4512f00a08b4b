"""Synthetic cardiac-like phantoms with vendor-style appearance shifts.

Each sample is a pure function of ``(seed, vendor, size)``. Geometry depends
on the seed only, so the four vendor renderings of one seed share a label
map and differ only in appearance.

Random numbers come from a splitmix64 stream: state advances by the
constant 0x9E3779B97F4A7C15 and each output is
``z ^= z >> 30; z *= 0xBF58476D1CE4E5B9; z ^= z >> 27; z *= 0x94D049BB133111EB; z ^= z >> 31``
(all mod 2**64). Uniforms take the top 53 bits; normals use Box-Muller on
consecutive uniform pairs.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from .errors import ConfigError, DataError

MASK64 = (1 << 64) - 1
GOLDEN = 0x9E3779B97F4A7C15
CLASS_NAMES = {1: "LV", 2: "MYO", 3: "RV"}
VENDORS = ("A", "B", "C", "D")
SPACING_MM = 1.2
MAX_RESAMPLE = 32


def _mix64(z: np.ndarray) -> np.ndarray:
    z = (z ^ (z >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
    z = (z ^ (z >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
    return z ^ (z >> np.uint64(31))


def mix_seed(*parts: int) -> int:
    """Fold integers into one 64-bit seed (used to derive independent streams)."""
    h = 0
    for p in parts:
        h = int(_mix64(np.array([(h ^ (p & MASK64)) + GOLDEN & MASK64], dtype=np.uint64))[0])
    return h


class SplitMix64:
    def __init__(self, seed: int):
        self.state = seed & MASK64

    def next_u64(self, n: int = 1) -> np.ndarray:
        steps = np.arange(1, n + 1, dtype=np.uint64)
        states = np.uint64(self.state) + steps * np.uint64(GOLDEN)
        self.state = (self.state + n * GOLDEN) & MASK64
        return _mix64(states)

    def uniform(self, n: int | None = None, low: float = 0.0, high: float = 1.0):
        u = (self.next_u64(1 if n is None else n) >> np.uint64(11)).astype(np.float64) * 2.0**-53
        u = low + (high - low) * u
        return float(u[0]) if n is None else u

    def normal(self, n: int) -> np.ndarray:
        u = self.uniform(2 * n)
        u1, u2 = 1.0 - u[0::2], u[1::2]
        return np.sqrt(-2.0 * np.log(u1)) * np.cos(2.0 * np.pi * u2)


@dataclass(frozen=True)
class VendorShift:
    gain: float  # contrast scale about mid-grey
    noise: float  # gaussian sigma
    blur: tuple[float, float]  # gaussian sigma (rows, cols); anisotropic mimics motion
    gamma: float


VENDOR_SHIFTS = {
    "A": VendorShift(gain=1.0, noise=0.02, blur=(0.0, 0.0), gamma=1.0),
    "B": VendorShift(gain=0.9, noise=0.03, blur=(0.5, 0.5), gamma=1.15),
    "C": VendorShift(gain=0.95, noise=0.02, blur=(0.3, 1.4), gamma=0.9),
    "D": VendorShift(gain=0.6, noise=0.06, blur=(0.0, 0.0), gamma=1.1),
}


@dataclass
class SegmentationSample:
    image: np.ndarray  # 1 x H x W in [0, 1]
    label: np.ndarray  # H x W, uint8 in {0,1,2,3}
    vendor: str
    seed: int
    seed_bump: int = 0
    meta: dict = field(default_factory=dict)


# --------------------------------------------------------------------------
# geometry


def _ellipse(yy, xx, cy, cx, ry, rx, theta):
    c, s = math.cos(theta), math.sin(theta)
    u = (xx - cx) * c + (yy - cy) * s
    v = -(xx - cx) * s + (yy - cy) * c
    return (u / rx) ** 2 + (v / ry) ** 2 <= 1.0


def _draw_geometry(rng: SplitMix64, size: int) -> tuple[np.ndarray, dict]:
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    S = float(size)
    p = {}
    p["cy"] = S * (0.5 + rng.uniform(low=-0.06, high=0.06))
    p["cx"] = S * (0.52 + rng.uniform(low=-0.06, high=0.06))
    p["ry"] = S * rng.uniform(low=0.09, high=0.13)
    p["rx"] = S * rng.uniform(low=0.09, high=0.13)
    p["theta"] = rng.uniform(low=0.0, high=math.pi)
    p["wall"] = S * rng.uniform(low=0.05, high=0.07)
    p["rv_angle"] = math.pi + rng.uniform(low=-0.5, high=0.5)
    p["rv_long"] = S * rng.uniform(low=0.16, high=0.22)
    p["rv_short"] = S * rng.uniform(low=0.08, high=0.11)
    p["body_ry"] = S * rng.uniform(low=0.36, high=0.42)
    p["body_rx"] = S * rng.uniform(low=0.40, high=0.46)

    lv = _ellipse(yy, xx, p["cy"], p["cx"], p["ry"], p["rx"], p["theta"])
    outer = _ellipse(yy, xx, p["cy"], p["cx"], p["ry"] + p["wall"], p["rx"] + p["wall"], p["theta"])
    # RV sits beside the ring along rv_angle, elongated tangentially
    reach = max(p["ry"], p["rx"]) + p["wall"] + 0.5 * p["rv_short"]
    rcy = p["cy"] + reach * math.sin(p["rv_angle"])
    rcx = p["cx"] + reach * math.cos(p["rv_angle"])
    rv = _ellipse(yy, xx, rcy, rcx, p["rv_long"], p["rv_short"], p["rv_angle"])
    body = _ellipse(yy, xx, S * 0.5, S * 0.5, p["body_ry"], p["body_rx"], 0.0)

    label = np.zeros((size, size), dtype=np.uint8)
    label[rv & ~ndimage.binary_dilation(outer)] = 3
    label[outer] = 2
    label[lv] = 1
    p["body"] = body
    return label, p


def ring_encloses_disk(label: np.ndarray) -> bool:
    """True when no 8-connected path from the border reaches class 1 without crossing class 2."""
    if not (label == 1).any():
        return False
    comps, _ = ndimage.label(label != 2, structure=np.ones((3, 3), dtype=int))
    border = np.unique(np.concatenate([comps[0], comps[-1], comps[:, 0], comps[:, -1]]))
    border = border[border > 0]
    return not np.isin(comps[label == 1], border).any()


def _render(label: np.ndarray, p: dict, rng: SplitMix64, shift: VendorShift) -> np.ndarray:
    size = label.shape[0]
    levels = rng.uniform(4, low=-0.04, high=0.04)
    img = np.zeros(label.shape)
    img[p["body"]] = 0.35 + levels[0]
    img[label == 2] = 0.15 + levels[1]
    img[label == 1] = 0.85 + levels[2]
    img[label == 3] = 0.72 + levels[3]
    yy, xx = np.mgrid[0:size, 0:size] / max(size - 1, 1) - 0.5
    c = rng.uniform(3, low=-0.15, high=0.15)
    img *= 1.0 + c[0] * xx + c[1] * yy + c[2] * xx * yy
    if any(shift.blur):
        img = ndimage.gaussian_filter(img, sigma=shift.blur, mode="nearest")
    img = img + shift.noise * rng.normal(size * size).reshape(size, size)
    img = np.clip(img, 0.0, 1.0) ** shift.gamma
    # gain last so a low-gain vendor really has a compressed dynamic range
    return np.clip(0.5 + shift.gain * (img - 0.5), 0.0, 1.0)


def generate(seed: int, vendor: str = "A", size: int = 256) -> SegmentationSample:
    """Deterministic phantom for ``(seed, vendor, size)``.

    If a drawn geometry breaks the ring-encloses-disk topology the geometry
    stream is re-seeded; the number of retries is kept in ``seed_bump``.
    """
    if vendor not in VENDOR_SHIFTS:
        raise ConfigError(f"unknown vendor {vendor!r}; expected one of {VENDORS}")
    if size % 16 or size <= 0:
        raise ConfigError(f"phantom size must be a positive multiple of 16, got {size}")
    for bump in range(MAX_RESAMPLE):
        geo = SplitMix64(mix_seed(seed, bump))
        label, params = _draw_geometry(geo, size)
        if ring_encloses_disk(label):
            break
    else:
        raise DataError(f"seed {seed}: no valid phantom geometry after {MAX_RESAMPLE} draws")
    look = SplitMix64(mix_seed(seed, bump, VENDORS.index(vendor) + 1))
    image = _render(label, params, look, VENDOR_SHIFTS[vendor])
    return SegmentationSample(
        image=image[None].astype(np.float64),
        label=label,
        vendor=vendor,
        seed=seed,
        seed_bump=bump,
        meta={"spacing_mm": SPACING_MM},
    )


def michelson_contrast(image: np.ndarray) -> float:
    hi, lo = float(image.max()), float(image.min())
    return 0.0 if hi + lo == 0 else (hi - lo) / (hi + lo)


# --------------------------------------------------------------------------
# augmentation


@dataclass(frozen=True)
class AugmentParams:
    rotation_deg: float = 0.0
    scale: float = 1.0
    shift_y: float = 0.0  # fraction of size
    shift_x: float = 0.0
    noise_sigma: float = 0.0
    gamma: float = 1.0

    @classmethod
    def draw(cls, seed: int) -> "AugmentParams":
        r = SplitMix64(mix_seed(seed, 0xA06))
        return cls(
            rotation_deg=r.uniform(low=-30.0, high=30.0),
            scale=r.uniform(low=0.8, high=1.2),
            shift_y=r.uniform(low=-0.1, high=0.1),
            shift_x=r.uniform(low=-0.1, high=0.1),
            noise_sigma=r.uniform(low=0.0, high=0.05),
            gamma=r.uniform(low=0.7, high=1.5),
        )

    @property
    def is_geometric_identity(self) -> bool:
        return self.rotation_deg == 0.0 and self.scale == 1.0 and self.shift_y == 0.0 and self.shift_x == 0.0


def crop_or_pad(arr: np.ndarray, size: int) -> np.ndarray:
    """Centre crop or zero-pad the last two axes to ``size`` x ``size``."""
    out = arr
    for axis in (-2, -1):
        n = out.shape[axis]
        if n > size:
            start = (n - size) // 2
            out = np.take(out, np.arange(start, start + size), axis=axis)
        elif n < size:
            before = (size - n) // 2
            pad = [(0, 0)] * out.ndim
            pad[axis] = (before, size - n - before)
            out = np.pad(out, pad)
    return out


def _affine(arr: np.ndarray, p: AugmentParams, order: int) -> np.ndarray:
    H, W = arr.shape
    centre = np.array([(H - 1) / 2.0, (W - 1) / 2.0])
    t = math.radians(p.rotation_deg)
    rot = np.array([[math.cos(t), -math.sin(t)], [math.sin(t), math.cos(t)]])
    # output -> input map: in = R^-1 (out - c - shift) / s + c
    inv = rot.T / p.scale
    shift = np.array([p.shift_y * H, p.shift_x * W])
    offset = centre - inv @ (centre + shift)
    return ndimage.affine_transform(arr, inv, offset=offset, order=order, mode="constant", cval=0.0)


def augment(
    sample: SegmentationSample,
    seed: int,
    params: AugmentParams | None = None,
    size: int | None = None,
) -> SegmentationSample:
    """Random rotation, scaling, translation, gamma and additive noise; labels use nearest neighbour."""
    p = AugmentParams.draw(seed) if params is None else params
    image, label = sample.image[0], sample.label
    if not p.is_geometric_identity:
        image = _affine(image, p, order=1)
        label = _affine(label.astype(np.float64), p, order=0).round().astype(np.uint8)
    if p.gamma != 1.0:
        image = np.clip(image, 0.0, 1.0) ** p.gamma
    if p.noise_sigma > 0.0:
        noise = SplitMix64(mix_seed(seed, 0x401)).normal(image.size).reshape(image.shape)
        image = image + p.noise_sigma * noise
    image = np.clip(image, 0.0, 1.0)
    if size is not None:
        image, label = crop_or_pad(image, size), crop_or_pad(label, size)
    return SegmentationSample(
        image=image[None], label=label, vendor=sample.vendor, seed=sample.seed,
        seed_bump=sample.seed_bump, meta=dict(sample.meta),
    )


# --------------------------------------------------------------------------
# splits and export


def make_splits(
    n_train: int = 150,
    n_test: int = 200,
    train_vendors: tuple[str, ...] = ("A", "B"),
    test_vendors: tuple[str, ...] = VENDORS,
    n_val: int = 20,
    size: int = 256,
    seed_starts: dict[str, int] | None = None,
) -> dict:
    """Manifest of (seed, vendor, split) entries; vendors are balanced within each split.

    Validation draws from the training vendors. Seed ranges must not overlap.
    """
    starts = {"train": 0, "val": 50_000, "test": 100_000}
    starts.update(seed_starts or {})
    counts = {"train": n_train, "val": n_val, "test": n_test}
    vendors = {"train": tuple(train_vendors), "val": tuple(train_vendors), "test": tuple(test_vendors)}
    for split, vs in vendors.items():
        bad = [v for v in vs if v not in VENDOR_SHIFTS]
        if bad:
            raise ConfigError(f"{split}: unknown vendors {bad}")
        if counts[split] and not vs:
            raise ConfigError(f"{split}: no vendors given")
    ranges = sorted((starts[s], starts[s] + counts[s], s) for s in counts if counts[s])
    for (a0, a1, sa), (b0, b1, sb) in zip(ranges, ranges[1:]):
        if b0 < a1:
            raise ConfigError(f"seed ranges overlap: {sa} [{a0}, {a1}) and {sb} [{b0}, {b1})")
    entries = []
    for split in ("train", "val", "test"):
        vs = vendors[split]
        for i in range(counts[split]):
            entries.append({"seed": starts[split] + i, "vendor": vs[i % len(vs)], "split": split})
    return {"size": size, "spacing_mm": SPACING_MM, "entries": entries}


def split_entries(manifest: dict, split: str) -> list[dict]:
    return [e for e in manifest["entries"] if e["split"] == split]


def dump_manifest(manifest: dict) -> str:
    return json.dumps(manifest, indent=1, sort_keys=True) + "\n"


def save_manifest(manifest: dict, path: str | Path) -> None:
    Path(path).write_text(dump_manifest(manifest))


def load_manifest(path: str | Path) -> dict:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"manifest {path} does not exist")
    manifest = json.loads(path.read_text())
    if "entries" not in manifest or "size" not in manifest:
        raise ConfigError(f"{path} is not a dataset manifest")
    return manifest


def write_pgm(path: str | Path, arr: np.ndarray, maxval: int) -> None:
    """Binary PGM (P5); 16-bit samples are big-endian as the format requires."""
    arr = np.asarray(arr)
    H, W = arr.shape
    dtype = ">u2" if maxval > 255 else "u1"
    header = f"P5\n{W} {H}\n{maxval}\n".encode()
    Path(path).write_bytes(header + arr.astype(dtype).tobytes())


def read_pgm(path: str | Path) -> np.ndarray:
    raw = Path(path).read_bytes()
    fields, pos = [], 0
    while len(fields) < 4:
        while raw[pos : pos + 1].isspace():
            pos += 1
        start = pos
        while not raw[pos : pos + 1].isspace():
            pos += 1
        fields.append(raw[start:pos])
    if fields[0] != b"P5":
        raise DataError(f"{path}: not a binary PGM")
    W, H, maxval = int(fields[1]), int(fields[2]), int(fields[3])
    dtype = ">u2" if maxval > 255 else "u1"
    return np.frombuffer(raw[pos + 1 :], dtype=dtype, count=W * H).reshape(H, W).astype(np.int64)


def export_dataset(manifest: dict, out_dir: str | Path) -> list[Path]:
    """Write every manifest entry as 16-bit image / 8-bit label PGM pairs plus the manifest."""
    out_dir = Path(out_dir)
    written = []
    for e in manifest["entries"]:
        s = generate(e["seed"], e["vendor"], manifest["size"])
        e["seed_bump"] = s.seed_bump
        d = out_dir / e["split"]
        d.mkdir(parents=True, exist_ok=True)
        stem = f"{e['vendor']}_{e['seed']:06d}"
        write_pgm(d / f"{stem}_image.pgm", np.round(s.image[0] * 65535), 65535)
        write_pgm(d / f"{stem}_label.pgm", s.label, 255)
        written.append(d / f"{stem}_image.pgm")
    save_manifest(manifest, out_dir / "manifest.json")
    return written


def load_split(manifest: dict, split: str) -> list[SegmentationSample]:
    return [generate(e["seed"], e["vendor"], manifest["size"]) for e in split_entries(manifest, split)]
