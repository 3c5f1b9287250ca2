import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays
from scipy import stats

from eqdense import io
from eqdense.data import (
    PCAM_SPLIT_SIZES,
    PCAM_TOTAL,
    PatchSet,
    balanced_sampler,
    generate_region,
    generate_synthetic,
    load_dataset,
    load_split,
    rgb_to_sv,
    save_dataset,
    save_split,
    tissue_filter,
)
from eqdense.errors import ConfigurationError, FormatError, ValidationError
from eqdense.groups import elements
from eqdense.tensor import transform_plane


def _solid(rgb, size=8):
    return np.broadcast_to(np.array(rgb, np.uint8), (size, size, 3)).copy()


def test_tissue_filter_examples():
    assert tissue_filter(_solid((255, 255, 255))) is False
    assert tissue_filter(_solid((255, 0, 0))) is True
    assert tissue_filter(_solid((0, 0, 0))) is True


def test_tissue_filter_blurs_before_max():
    # one saturated pixel on white: raw max S is 1 but the 3x3 mean is 1/9 > 0.07
    img = _solid((255, 255, 255), 9)
    img[4, 4] = (255, 0, 0)
    assert tissue_filter(img) is True
    # a faint tint whose raw saturation (0.1) is above threshold but whose blur is not
    img = _solid((255, 255, 255), 9)
    img[4, 4] = (255, 230, 230)
    assert tissue_filter(img) is False


def test_tissue_filter_rejects_bad_input():
    with pytest.raises(ValidationError):
        tissue_filter(np.zeros((4, 4), np.uint8))
    with pytest.raises(ValidationError):
        tissue_filter(np.zeros((4, 4, 3), np.float32))


def test_rgb_to_sv_against_colorsys():
    import colorsys

    r = np.random.default_rng(0)
    img = r.integers(0, 256, size=(6, 6, 3), dtype=np.uint8)
    s, v = rgb_to_sv(img)
    for i in range(6):
        for j in range(6):
            _, hs, hv = colorsys.rgb_to_hsv(*(img[i, j] / 255.0))
            assert np.isclose(s[i, j], hs) and np.isclose(v[i, j], hv)


@given(arrays(np.uint8, (7, 7, 3)), st.integers(0, 7))
def test_tissue_filter_d4_invariant(img, g):
    el = elements("D4")[g]
    moved = np.moveaxis(transform_plane(np.moveaxis(img, -1, 0), el.rot, el.mirror), 0, -1)
    assert tissue_filter(img) == tissue_filter(np.ascontiguousarray(moved))


def _patchset(labels, sources):
    n = len(labels)
    return PatchSet(np.zeros((n, 2, 2, 3), np.uint8), np.array(labels), np.array(sources, dtype=object))


def test_sampler_balance():
    ps = _patchset([0] * 30 + [1] * 970, ["a"] * 30 + ["b"] * 970)
    draws = np.concatenate([next(balanced_sampler(ps, np.random.default_rng(0), 10_000))])
    frac = ps.labels[draws].mean()
    assert abs(frac - 0.5) < 0.02
    # 3 sigma binomial bound
    assert abs(frac - 0.5) < 3 * np.sqrt(0.25 / 10_000)


def test_sampler_two_stage_sources():
    labels = [0] * 100 + [1] * 10 + [1] * 10_000
    sources = ["n"] * 100 + ["t1"] * 10 + ["t2"] * 10_000
    ps = _patchset(labels, sources)
    draws = next(balanced_sampler(ps, np.random.default_rng(1), 20_000))
    src = ps.sources[draws]
    assert abs(np.mean(src == "t1") - 0.25) < 0.02
    assert abs(np.mean(src == "t2") - 0.25) < 0.02


def test_sampler_single_source_is_uniform_within_class():
    ps = _patchset([0, 0, 0, 0, 1, 1], ["n"] * 4 + ["t"] * 2)
    draws = next(balanced_sampler(ps, np.random.default_rng(2), 40_000))
    counts = np.bincount(draws, minlength=6) / len(draws)
    np.testing.assert_allclose(counts, [0.125] * 4 + [0.25] * 2, atol=0.01)


def test_sampler_is_seeded_and_requires_both_classes():
    ps = _patchset([0, 1, 0, 1], list("abcd"))
    a = next(balanced_sampler(ps, np.random.default_rng(3), 50))
    b = next(balanced_sampler(ps, np.random.default_rng(3), 50))
    np.testing.assert_array_equal(a, b)
    with pytest.raises(ConfigurationError):
        next(balanced_sampler(_patchset([1, 1], ["a", "b"]), np.random.default_rng(0)))


def test_synthetic_is_deterministic_and_balanced():
    a = generate_synthetic(4, 16)
    b = generate_synthetic(4, 16)
    for name in ("train", "valid", "test"):
        np.testing.assert_array_equal(a.split(name).images, b.split(name).images)
        np.testing.assert_array_equal(a.split(name).labels, b.split(name).labels)
        assert a.split(name).labels.mean() == 0.5
    assert a.train.images.shape[1:] == (96, 96, 3)
    assert (len(a.train), len(a.valid), len(a.test)) == (24, 4, 4)
    assert not np.array_equal(generate_synthetic(5, 16).train.images, a.train.images)


def _orientation_stat(images):
    """Horizontal minus vertical gradient energy: sensitive to a preferred axis."""
    g = images.astype(np.float64).mean(axis=-1)
    return (np.diff(g, axis=2) ** 2).mean(axis=(1, 2)) - (np.diff(g, axis=1) ** 2).mean(axis=(1, 2))


def _asymmetry_stat(images):
    g = images.astype(np.float64).mean(axis=-1)
    return g[:, :, :48].mean(axis=(1, 2)) - g[:, :48, :].mean(axis=(1, 2))


def test_synthetic_classes_are_d4_closed():
    ds = generate_synthetic(8, 96)
    imgs = ds.train.images
    els = elements("D4")
    r = np.random.default_rng(0)
    moved = np.stack([
        np.moveaxis(transform_plane(np.moveaxis(im, -1, 0), els[d].rot, els[d].mirror), 0, -1)
        for im, d in zip(imgs, r.integers(0, 8, len(imgs)))
    ])
    other = generate_synthetic(9, 96).train
    for stat in (_orientation_stat, _asymmetry_stat):
        for label in (0, 1):
            sel = ds.train.labels == label
            p = stats.ks_2samp(stat(moved[sel]), stat(other.images[other.labels == label])).pvalue
            assert p > 0.01


def test_synthetic_classes_differ():
    ds = generate_synthetic(2, 64)
    dark = ds.train.images.astype(np.float64).mean(axis=(1, 2, 3))
    assert dark[ds.train.labels == 1].mean() < dark[ds.train.labels == 0].mean()


def test_generate_region():
    img, mask, centres = generate_region(3, 160, n_lesions=2)
    assert img.shape == (160, 160, 3) and img.dtype == np.uint8 and mask.shape == (160, 160)
    assert centres.shape == (2, 2)
    for cy, cx in centres:
        assert mask[int(cy), int(cx)]
    empty = generate_region(3, 64, n_lesions=0)
    assert not empty[1].any() and empty[2].shape == (0, 2)


def test_split_round_trip(tmp_path):
    ds = generate_synthetic(1, 70)
    save_dataset(tmp_path / "d", ds)
    loaded = load_dataset(tmp_path / "d", verify=True)
    for name in ("train", "valid", "test"):
        np.testing.assert_array_equal(np.asarray(loaded.split(name).images), ds.split(name).images)
        np.testing.assert_array_equal(loaded.split(name).labels, ds.split(name).labels)
        assert list(loaded.split(name).sources) == list(ds.split(name).sources)
    assert loaded.total == 140
    np.testing.assert_allclose(loaded.fractions, (0.75, 0.125, 0.125), atol=0.01)


def test_hundred_record_round_trip(tmp_path):
    r = np.random.default_rng(0)
    ps = PatchSet(r.integers(0, 256, (100, 96, 96, 3), dtype=np.uint8), r.integers(0, 2, 100))
    save_split(tmp_path / "s", ps)
    back = load_split(tmp_path / "s", "pcam", verify=True)
    np.testing.assert_array_equal(np.asarray(back.images), ps.images)
    np.testing.assert_array_equal(back.labels, ps.labels)


def test_manifest_count_mismatch_names_file(tmp_path):
    ps = PatchSet(np.zeros((5, 4, 4, 3), np.uint8), [0, 1, 0, 1, 0])
    save_split(tmp_path / "s", ps)
    m = tmp_path / "s" / "manifest.txt"
    m.write_text(m.read_text().replace("count = 5", "count = 6"))
    with pytest.raises(FormatError, match="images.eqt"):
        load_split(tmp_path / "s")


def test_bad_labels_and_checksum(tmp_path):
    ps = PatchSet(np.zeros((3, 4, 4, 3), np.uint8), [0, 1, 0])
    save_split(tmp_path / "s", ps)
    io.save_tensor(tmp_path / "s" / "labels.eqt", np.array([0, 2, 0], np.uint8))
    with pytest.raises(FormatError, match="label"):
        load_split(tmp_path / "s")
    io.save_tensor(tmp_path / "s" / "labels.eqt", np.array([1, 1, 0], np.uint8))
    with pytest.raises(FormatError, match="checksum"):
        load_split(tmp_path / "s", verify=True)
    with pytest.raises(FormatError, match="96x96x3"):
        load_split(tmp_path / "s", "pcam")


def test_pcam_profile_counts_327680(tmp_path):
    # sparse image blobs: only the headers are real bytes
    for name, n in PCAM_SPLIT_SIZES.items():
        d = tmp_path / "pcam" / name
        d.mkdir(parents=True)
        header = io.header_bytes(np.uint8, (n, 96, 96, 3))
        with open(d / "images.eqt", "wb") as fh:
            fh.write(header)
            fh.truncate(len(header) + n * 96 * 96 * 3)
        io.save_tensor(d / "labels.eqt", (np.arange(n) % 2).astype(np.uint8))
        (d / "manifest.txt").write_text(f"count = {n}\nprofile = pcam\n")
    ds = load_dataset(tmp_path / "pcam", "pcam")
    assert ds.total == PCAM_TOTAL == 327_680
    np.testing.assert_allclose(ds.fractions, (0.8, 0.1, 0.1))


def test_convert_pcam(tmp_path):
    h5py = pytest.importorskip("h5py")
    r = np.random.default_rng(0)
    src = tmp_path / "src"
    src.mkdir()
    sizes = {"train": 6, "valid": 2, "test": 2}
    for name, n in sizes.items():
        stem = src / f"camelyonpatch_level_2_split_{name}"
        with h5py.File(f"{stem}_x.h5", "w") as f:
            f["x"] = r.integers(0, 256, (n, 96, 96, 3), dtype=np.uint8)
        with h5py.File(f"{stem}_y.h5", "w") as f:
            f["y"] = r.integers(0, 2, (n, 1, 1, 1), dtype=np.uint8)
        with open(f"{stem}_meta.csv", "w") as f:
            f.write("coord_y,coord_x,tumor_patch,center_tumor_patch,wsi\n")
            f.writelines(f"0,0,False,False,slide_{i % 3}\n" for i in range(n))
    ds = __import__("eqdense.data", fromlist=["convert_pcam"]).convert_pcam(src, tmp_path / "out", chunk=4)
    assert (len(ds.train), len(ds.valid), len(ds.test)) == (6, 2, 2)
    with h5py.File(src / "camelyonpatch_level_2_split_train_x.h5", "r") as f:
        np.testing.assert_array_equal(np.asarray(ds.train.images), f["x"][:])
    assert ds.train.sources[4] == "slide_1"
