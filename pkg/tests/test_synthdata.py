import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import ndimage

from utnet import synthdata as S
from utnet.errors import ConfigError, DataError

M64 = (1 << 64) - 1


def splitmix_ref(seed, n):
    """Scalar SplitMix64 with Python integers."""
    out, state = [], seed
    for _ in range(n):
        state = (state + 0x9E3779B97F4A7C15) & M64
        z = state
        z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & M64
        z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & M64
        out.append(z ^ (z >> 31))
    return out


def test_splitmix_known_stream():
    assert [int(v) for v in S.SplitMix64(0).next_u64(3)] == [
        0xE220A8397B1DCDAF,
        0x6E789E6AA1B965F4,
        0x06C45D188009454F,
    ]


@given(st.integers(0, M64), st.integers(1, 40))
def test_splitmix_matches_scalar(seed, n):
    r = S.SplitMix64(seed)
    first = [int(v) for v in r.next_u64(n)]
    assert first == splitmix_ref(seed, n)
    assert int(r.next_u64(1)[0]) == splitmix_ref(seed, n + 1)[-1]


@given(st.integers(0, 2**32))
def test_uniform_in_unit_interval(seed):
    u = S.SplitMix64(seed).uniform(500)
    assert u.min() >= 0.0 and u.max() < 1.0


def test_normal_moments():
    z = S.SplitMix64(7).normal(200_000)
    assert abs(z.mean()) < 0.01 and abs(z.std() - 1) < 0.01


# --- phantoms


@pytest.mark.parametrize("vendor", S.VENDORS)
def test_generate_deterministic(vendor):
    a, b = S.generate(11, vendor, 64), S.generate(11, vendor, 64)
    assert a.image.tobytes() == b.image.tobytes() and a.label.tobytes() == b.label.tobytes()
    assert a.image.shape == (1, 64, 64) and a.label.dtype == np.uint8
    assert a.meta["spacing_mm"] == 1.2
    assert 0.0 <= a.image.min() and a.image.max() <= 1.0


def test_geometry_shared_across_vendors():
    labels = [S.generate(3, v, 64).label for v in S.VENDORS]
    assert all(np.array_equal(labels[0], lab) for lab in labels[1:])
    images = [S.generate(3, v, 64).image for v in S.VENDORS]
    assert not np.array_equal(images[0], images[3])


def test_all_classes_present_in_nearly_all_seeds():
    hits = sum(set(np.unique(S.generate(s, "A", 256).label)) == {0, 1, 2, 3} for s in range(1000))
    assert hits >= 990


def test_topology_ring_encloses_disk():
    for s in range(100):
        lab = S.generate(s, "A", 64).label
        assert S.ring_encloses_disk(lab)
        # the disk touches only itself and the ring
        ring_of_disk = ndimage.binary_dilation(lab == 1, structure=np.ones((3, 3))) & (lab != 1)
        assert set(np.unique(lab[ring_of_disk])) == {2}


def test_ring_check_rejects_broken_ring():
    lab = np.zeros((16, 16), np.uint8)
    lab[4:12, 4:12] = 2
    lab[6:10, 6:10] = 1
    assert S.ring_encloses_disk(lab)
    lab[7:9, 10:12] = 0  # gap to the background
    assert not S.ring_encloses_disk(lab)
    assert not S.ring_encloses_disk(np.zeros((16, 16), np.uint8))


def test_vendor_d_lower_contrast():
    for s in range(100):
        assert S.michelson_contrast(S.generate(s, "D", 64).image) < S.michelson_contrast(S.generate(s, "A", 64).image)


def test_michelson_contrast_values():
    assert S.michelson_contrast(np.array([0.25, 0.75])) == 0.5
    assert S.michelson_contrast(np.zeros(3)) == 0.0


def test_generate_rejects_bad_arguments():
    with pytest.raises(ConfigError):
        S.generate(0, "E")
    with pytest.raises(ConfigError):
        S.generate(0, "A", 40)


def test_exhausted_resampling_raises(monkeypatch):
    monkeypatch.setattr(S, "ring_encloses_disk", lambda label: False)
    with pytest.raises(DataError, match="no valid phantom"):
        S.generate(0, "A", 32)


def test_seed_bump_recorded(monkeypatch):
    calls = []

    def flaky(label):
        calls.append(1)
        return len(calls) > 2

    monkeypatch.setattr(S, "ring_encloses_disk", flaky)
    assert S.generate(5, "A", 32).seed_bump == 2


# --- augmentation


def test_identity_augmentation_is_exact():
    s = S.generate(4, "B", 64)
    out = S.augment(s, seed=0, params=S.AugmentParams())
    assert np.array_equal(out.image, s.image) and np.array_equal(out.label, s.label)


def test_quarter_turn_matches_rot90():
    s = S.generate(4, "A", 64)
    out = S.augment(s, seed=0, params=S.AugmentParams(rotation_deg=90.0))
    assert np.array_equal(np.bincount(out.label.ravel(), minlength=4), np.bincount(s.label.ravel(), minlength=4))
    assert np.array_equal(out.label, np.rot90(s.label, 1)) or np.array_equal(out.label, np.rot90(s.label, -1))


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000))
def test_augmented_labels_stay_in_class_set(seed):
    s = S.generate(seed % 37, "A", 32)
    out = S.augment(s, seed=seed)
    assert set(np.unique(out.label)) <= {0, 1, 2, 3}
    assert out.label.dtype == np.uint8 and out.label.shape == s.label.shape
    assert 0.0 <= out.image.min() and out.image.max() <= 1.0


@given(st.integers(0, 2**40))
def test_augment_draw_ranges(seed):
    p = S.AugmentParams.draw(seed)
    assert -30 <= p.rotation_deg <= 30 and 0.8 <= p.scale <= 1.2
    assert abs(p.shift_y) <= 0.1 and abs(p.shift_x) <= 0.1
    assert 0 <= p.noise_sigma <= 0.05 and 0.7 <= p.gamma <= 1.5
    assert p == S.AugmentParams.draw(seed)


@given(st.integers(1, 12), st.integers(1, 12), st.integers(1, 12))
def test_crop_or_pad_shape_and_content(h, w, size):
    x = np.arange(h * w).reshape(h, w) + 1
    out = S.crop_or_pad(x, size)
    assert out.shape == (size, size)
    if size >= max(h, w):
        assert out.sum() == x.sum()
        r, c = (size - h) // 2, (size - w) // 2
        assert np.array_equal(out[r : r + h, c : c + w], x)
    if size <= min(h, w):
        r, c = (h - size) // 2, (w - size) // 2
        assert np.array_equal(out, x[r : r + size, c : c + size])


# --- splits and files


def test_default_split_sizes_and_balance():
    m = S.make_splits()
    train, test = S.split_entries(m, "train"), S.split_entries(m, "test")
    assert len(train) == 150 and len(test) == 200 and len(S.split_entries(m, "val")) == 20
    assert {e["vendor"] for e in train} == {"A", "B"}
    counts = {v: sum(e["vendor"] == v for e in test) for v in S.VENDORS}
    assert counts == {"A": 50, "B": 50, "C": 50, "D": 50}
    seeds = [e["seed"] for e in m["entries"]]
    assert len(seeds) == len(set(seeds))


def test_split_overlap_and_vendor_errors():
    with pytest.raises(ConfigError, match="overlap"):
        S.make_splits(seed_starts={"val": 100})
    with pytest.raises(ConfigError):
        S.make_splits(train_vendors=("Z",))


def test_manifest_round_trip(tmp_path):
    m = S.make_splits(4, 4, n_val=2, size=32)
    S.save_manifest(m, tmp_path / "m.json")
    assert S.load_manifest(tmp_path / "m.json") == m
    (tmp_path / "bad.json").write_text("{}")
    with pytest.raises(ConfigError):
        S.load_manifest(tmp_path / "bad.json")
    with pytest.raises(ConfigError):
        S.load_manifest(tmp_path / "missing.json")


@pytest.mark.parametrize("maxval", [255, 65535])
def test_pgm_round_trip(tmp_path, maxval):
    x = np.random.default_rng(0).integers(0, maxval + 1, size=(7, 5))
    S.write_pgm(tmp_path / "x.pgm", x, maxval)
    assert np.array_equal(S.read_pgm(tmp_path / "x.pgm"), x)
    (tmp_path / "y.pgm").write_bytes(b"P2\n1 1\n255\n0")
    with pytest.raises(DataError):
        S.read_pgm(tmp_path / "y.pgm")


def test_export_dataset(tmp_path):
    m = S.make_splits(2, 4, n_val=1, size=32)
    paths = S.export_dataset(m, tmp_path)
    assert len(paths) == 7 and (tmp_path / "manifest.json").exists()
    e = S.split_entries(m, "test")[3]
    stem = tmp_path / "test" / f"{e['vendor']}_{e['seed']:06d}"
    s = S.generate(e["seed"], e["vendor"], 32)
    assert np.array_equal(S.read_pgm(f"{stem}_label.pgm"), s.label)
    assert np.abs(S.read_pgm(f"{stem}_image.pgm") / 65535 - s.image[0]).max() <= 0.5 / 65535
    assert all("seed_bump" in e for e in S.load_manifest(tmp_path / "manifest.json")["entries"])
    loaded = S.load_split(m, "test")
    assert [x.seed for x in loaded] == [e["seed"] for e in S.split_entries(m, "test")]
