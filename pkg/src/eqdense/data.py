"""Patch datasets: container I/O, balanced sampling, tissue filtering, synthetic data."""

from __future__ import annotations

import hashlib
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator

import numpy as np
from scipy import ndimage

from eqdense import io
from eqdense.errors import ConfigurationError, FormatError, ValidationError

PATCH_SHAPE = (96, 96, 3)
SPLIT_NAMES = ("train", "valid", "test")
PCAM_SPLIT_SIZES = {"train": 262_144, "valid": 32_768, "test": 32_768}
PCAM_TOTAL = sum(PCAM_SPLIT_SIZES.values())
SPLIT_FRACTIONS = (0.75, 0.125, 0.125)

SATURATION_THRESHOLD = 0.07
VALUE_THRESHOLD = 0.1


@dataclass
class PatchRecord:
    image: np.ndarray
    label: int
    source: str


@dataclass
class PatchSet:
    """Column-oriented collection of patches: images ``[N,H,W,3]`` uint8, labels ``[N]``."""

    images: np.ndarray
    labels: np.ndarray
    sources: np.ndarray | None = None

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.uint8)
        if len(self.images) != len(self.labels):
            raise ValidationError(f"{len(self.images)} images but {len(self.labels)} labels")
        if self.sources is None:
            self.sources = np.where(self.labels == 1, "tumor", "normal").astype(object)
        else:
            self.sources = np.asarray(self.sources, dtype=object)

    def __len__(self) -> int:
        return len(self.labels)

    def __getitem__(self, i: int) -> PatchRecord:
        return PatchRecord(np.asarray(self.images[i]), int(self.labels[i]), str(self.sources[i]))

    def records(self) -> Iterator[PatchRecord]:
        for i in range(len(self)):
            yield self[i]


@dataclass
class DatasetSplit:
    train: PatchSet
    valid: PatchSet
    test: PatchSet
    fractions: tuple = SPLIT_FRACTIONS
    profile: str = "synthetic"

    @property
    def total(self) -> int:
        return len(self.train) + len(self.valid) + len(self.test)

    def split(self, name: str) -> PatchSet:
        return {"train": self.train, "valid": self.valid, "test": self.test}[name]


# ---------------------------------------------------------------------------
# tissue filter


def rgb_to_sv(image: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Hexcone saturation and value in [0, 1]; hue is not needed."""
    rgb = image.astype(np.float64) / 255.0
    mx = rgb.max(axis=-1)
    mn = rgb.min(axis=-1)
    s = np.divide(mx - mn, mx, out=np.zeros_like(mx), where=mx > 0)
    return s, mx


def tissue_filter(patch: np.ndarray) -> bool:
    """True keeps the patch; bright low-saturation background is rejected.

    S and V are box-blurred (3x3, edge-replicating) before thresholding.
    """
    patch = np.asarray(patch)
    if patch.ndim != 3 or patch.shape[-1] != 3 or patch.dtype != np.uint8:
        raise ValidationError(f"expected an 8-bit RGB image [H,W,3], got {patch.dtype} {patch.shape}")
    s, v = rgb_to_sv(patch)
    s = ndimage.uniform_filter(s, size=3, mode="nearest")
    v = ndimage.uniform_filter(v, size=3, mode="nearest")
    reject = s.max() < SATURATION_THRESHOLD and v.max() > VALUE_THRESHOLD
    return not reject


# ---------------------------------------------------------------------------
# sampling


def balanced_sampler(patches: PatchSet, rng: np.random.Generator, batch_size: int = 64
                     ) -> Iterator[np.ndarray]:
    """Endless stream of index batches.

    Each draw picks the class with probability 1/2, then a source uniformly
    within the class, then a patch uniformly within that source.
    """
    per_class = []
    for cls in (0, 1):
        idx = np.flatnonzero(patches.labels == cls)
        if len(idx) == 0:
            raise ConfigurationError(f"class {cls} has no patches; balanced sampling impossible")
        src = patches.sources[idx]
        order = np.argsort(src, kind="stable")
        idx, src = idx[order], src[order]
        _, starts, counts = np.unique(src, return_index=True, return_counts=True)
        per_class.append((idx, starts, counts))
    while True:
        cls = rng.integers(0, 2, size=batch_size)
        out = np.empty(batch_size, dtype=np.int64)
        for c, (idx, starts, counts) in enumerate(per_class):
            sel = np.flatnonzero(cls == c)
            which = rng.integers(0, len(starts), size=len(sel))
            offset = (rng.random(len(sel)) * counts[which]).astype(np.int64)
            out[sel] = idx[starts[which] + offset]
        yield out


# ---------------------------------------------------------------------------
# synthetic tissue

_BACKGROUND = np.array([232.0, 196.0, 214.0])
_STROMA = np.array([214.0, 150.0, 184.0])
_NUCLEUS = np.array([92.0, 52.0, 140.0])

# (mean count per 96x96 patch, semi-axis ranges, darkness range)
_NORMAL = dict(count=11, major=(2.2, 3.6), minor=(2.0, 3.2), alpha=(0.55, 0.8))
_TUMOR = dict(count=20, major=(4.0, 7.0), minor=(2.4, 4.0), alpha=(0.75, 0.95))


def _paint_nuclei(alpha_map: np.ndarray, rng, centers, style) -> None:
    H, W = alpha_map.shape
    for cy, cx in centers:
        a = rng.uniform(*style["major"])
        b = min(rng.uniform(*style["minor"]), a)
        theta = rng.uniform(0, np.pi)
        dark = rng.uniform(*style["alpha"])
        r = int(np.ceil(a)) + 2
        y0, y1 = max(0, int(cy) - r), min(H, int(cy) + r + 1)
        x0, x1 = max(0, int(cx) - r), min(W, int(cx) + r + 1)
        if y0 >= y1 or x0 >= x1:
            continue
        yy, xx = np.mgrid[y0:y1, x0:x1]
        dy, dx = yy + 0.5 - cy, xx + 0.5 - cx
        u = (dx * np.cos(theta) + dy * np.sin(theta)) / a
        w = (-dx * np.sin(theta) + dy * np.cos(theta)) / b
        d = np.sqrt(u * u + w * w)
        blob = dark * np.clip(1.5 - d, 0.0, 1.0) ** 0.7 * (d < 1.5)
        np.maximum(alpha_map[y0:y1, x0:x1], blob, out=alpha_map[y0:y1, x0:x1])


def _paint_fibres(stroma: np.ndarray, rng, n: int) -> None:
    H, W = stroma.shape
    yy, xx = np.mgrid[0:H, 0:W] + 0.5
    for _ in range(n):
        cy, cx = rng.uniform(0, H), rng.uniform(0, W)
        theta = rng.uniform(0, np.pi)
        dist = np.abs((xx - cx) * np.sin(theta) - (yy - cy) * np.cos(theta))
        along = np.abs((xx - cx) * np.cos(theta) + (yy - cy) * np.sin(theta))
        length = rng.uniform(20, 60)
        fibre = np.clip(1.2 - dist, 0, 1) * (along < length / 2) * rng.uniform(0.3, 0.6)
        np.maximum(stroma, fibre, out=stroma)


def _sample_centers(rng, mask: np.ndarray, density: float) -> np.ndarray:
    """Poisson point process with intensity ``density`` per pixel, restricted to ``mask``."""
    H, W = mask.shape
    n = rng.poisson(density * H * W)
    pts = rng.uniform(0, 1, size=(n, 2)) * (H, W)
    keep = mask[pts[:, 0].astype(int).clip(0, H - 1), pts[:, 1].astype(int).clip(0, W - 1)]
    return pts[keep]


def render_tissue(rng: np.random.Generator, tumor_mask: np.ndarray) -> np.ndarray:
    """Synthetic H&E-like RGB tile; nuclei inside ``tumor_mask`` are tumour-like.

    Every random ingredient is isotropic (uniform positions, uniform
    orientations, isotropic smoothing), so the image distribution is closed
    under rotations and reflections.
    """
    H, W = tumor_mask.shape
    area = 96.0 * 96.0
    nuclei = np.zeros((H, W))
    _paint_nuclei(nuclei, rng, _sample_centers(rng, ~tumor_mask, _NORMAL["count"] / area), _NORMAL)
    _paint_nuclei(nuclei, rng, _sample_centers(rng, tumor_mask, _TUMOR["count"] / area), _TUMOR)
    stroma = np.zeros((H, W))
    _paint_fibres(stroma, rng, rng.poisson(4 * H * W / area))
    shade = ndimage.gaussian_filter(rng.standard_normal((H, W)), sigma=12, mode="wrap")
    shade = shade / (shade.std() + 1e-9) * 6.0
    img = _BACKGROUND + shade[..., None]
    img = img * (1 - stroma[..., None]) + _STROMA * stroma[..., None]
    img = img * (1 - nuclei[..., None]) + _NUCLEUS * nuclei[..., None]
    img = img + rng.normal(0, 6.0, size=img.shape)
    return np.clip(np.rint(img), 0, 255).astype(np.uint8)


def generate_synthetic(seed: int, n_per_class: int, size: int = 96, sources_per_class: int = 4,
                       fractions: tuple = SPLIT_FRACTIONS) -> DatasetSplit:
    """Deterministic two-class synthetic patch dataset with exact label balance."""
    n_train = int(round(n_per_class * fractions[0]))
    n_valid = int(round(n_per_class * fractions[1]))
    bounds = (0, n_train, n_train + n_valid, n_per_class)
    parts = {name: ([], [], []) for name in SPLIT_NAMES}
    for label in (0, 1):
        rng = np.random.default_rng([seed, label])
        mask = np.full((size, size), bool(label))
        for i in range(n_per_class):
            split = SPLIT_NAMES[np.searchsorted(bounds, i, side="right") - 1]
            imgs, labels, sources = parts[split]
            imgs.append(render_tissue(rng, mask))
            labels.append(label)
            sources.append(f"synth-{'tumor' if label else 'normal'}-{i % sources_per_class}")

    def build(name):
        imgs, labels, sources = parts[name]
        if not imgs:
            return PatchSet(np.zeros((0, size, size, 3), np.uint8), np.zeros(0, np.uint8), np.zeros(0, object))
        return PatchSet(np.stack(imgs), np.array(labels, np.uint8), np.array(sources, dtype=object))

    return DatasetSplit(build("train"), build("valid"), build("test"), tuple(fractions), "synthetic")


def generate_region(seed: int, size: int, n_lesions: int = 1, radius_range=(0.15, 0.3)
                    ) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Large synthetic tissue region with disc-shaped tumour lesions.

    Returns ``(image [size,size,3] uint8, tumour mask, lesion centres [(y, x)])``.
    """
    rng = np.random.default_rng([seed, 0x5EED])
    yy, xx = np.mgrid[0:size, 0:size] + 0.5
    mask = np.zeros((size, size), dtype=bool)
    centres = []
    for _ in range(n_lesions):
        r = rng.uniform(*radius_range) * size
        cy, cx = rng.uniform(r, size - r, size=2)
        mask |= (yy - cy) ** 2 + (xx - cx) ** 2 <= r * r
        centres.append((cy, cx))
    return render_tissue(rng, mask), mask, np.array(centres).reshape(-1, 2)


# ---------------------------------------------------------------------------
# container I/O


def _checksum(*paths) -> str:
    h = hashlib.sha256()
    for path in paths:
        with open(path, "rb") as fh:
            for chunk in iter(lambda: fh.read(1 << 22), b""):
                h.update(chunk)
    return h.hexdigest()


def save_split(path, patches: PatchSet, profile: str = "synthetic") -> None:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    io.save_tensor(path / "images.eqt", np.ascontiguousarray(patches.images, dtype=np.uint8))
    io.save_tensor(path / "labels.eqt", patches.labels.astype(np.uint8))
    io.atomic_write_text(path / "sources.txt", "".join(f"{s}\n" for s in patches.sources))
    write_split_manifest(path, len(patches), profile, tuple(patches.images.shape[1:]))


def write_split_manifest(path, count: int, profile: str, image_shape: tuple) -> None:
    path = Path(path)
    items = {
        "count": count,
        "profile": profile,
        "image_shape": "x".join(str(d) for d in image_shape),
        "checksum": _checksum(path / "images.eqt", path / "labels.eqt"),
    }
    io.atomic_write_text(path / "manifest.txt", io.format_key_values(items))


def save_dataset(path, dataset: DatasetSplit) -> None:
    for name in SPLIT_NAMES:
        save_split(Path(path) / name, dataset.split(name), dataset.profile)


def load_split(path, profile: str = "synthetic", verify: bool = False) -> PatchSet:
    path = Path(path)
    manifest = io.read_key_values(path / "manifest.txt")
    try:
        count = int(manifest["count"])
    except (KeyError, ValueError):
        raise FormatError(f"{path / 'manifest.txt'}: missing or bad 'count'") from None
    images = io.load_tensor(path / "images.eqt", mmap=True)
    labels = io.load_tensor(path / "labels.eqt")
    if len(images) != count:
        raise FormatError(f"{path / 'images.eqt'}: holds {len(images)} records, manifest says {count}")
    if len(labels) != count:
        raise FormatError(f"{path / 'labels.eqt'}: holds {len(labels)} records, manifest says {count}")
    if images.dtype != np.uint8 or images.ndim != 4 or images.shape[-1] != 3:
        raise FormatError(f"{path / 'images.eqt'}: expected uint8 [N,H,W,3], got {images.dtype} {images.shape}")
    if profile == "pcam" and tuple(images.shape[1:]) != PATCH_SHAPE:
        raise FormatError(f"{path / 'images.eqt'}: PCam patches must be 96x96x3")
    labels = labels.reshape(-1)
    if labels.size and labels.max(initial=0) > 1:
        raise FormatError(f"{path / 'labels.eqt'}: label outside {{0,1}}")
    if verify and manifest.get("checksum") != _checksum(path / "images.eqt", path / "labels.eqt"):
        raise FormatError(f"{path}: checksum mismatch")
    sources = None
    src_file = path / "sources.txt"
    if src_file.exists():
        sources = np.array(src_file.read_text().splitlines(), dtype=object)
        if len(sources) != count:
            raise FormatError(f"{src_file}: {len(sources)} lines, manifest says {count}")
    return PatchSet(images, labels, sources)


def load_dataset(path, profile: str = "synthetic", verify: bool = False) -> DatasetSplit:
    """Load ``train/``, ``valid/`` and ``test/`` split directories (images memory-mapped)."""
    if profile not in ("pcam", "synthetic"):
        raise ConfigurationError(f"unknown dataset profile {profile!r}")
    path = Path(path)
    if not path.is_dir():
        raise FileNotFoundError(f"dataset directory {path} does not exist")
    splits = {name: load_split(path / name, profile, verify) for name in SPLIT_NAMES}
    ds = DatasetSplit(splits["train"], splits["valid"], splits["test"], profile=profile)
    total = ds.total
    ds.fractions = tuple(len(splits[n]) / total if total else 0.0 for n in SPLIT_NAMES)
    return ds


def convert_pcam(src_dir, out_dir, chunk: int = 4096) -> DatasetSplit:
    """One-shot converter from the published PCam HDF5 files to the native container.

    Reads ``camelyonpatch_level_2_split_{train,valid,test}_{x,y}.h5`` (and the
    optional ``*_meta.csv`` for slide ids) from ``src_dir``.
    """
    import h5py  # optional dependency

    src_dir, out_dir = Path(src_dir), Path(out_dir)
    for name in SPLIT_NAMES:
        stem = src_dir / f"camelyonpatch_level_2_split_{name}"
        dest = out_dir / name
        dest.mkdir(parents=True, exist_ok=True)
        with h5py.File(f"{stem}_x.h5", "r") as fx, h5py.File(f"{stem}_y.h5", "r") as fy:
            x, y = fx["x"], fy["y"]
            n = x.shape[0]
            partial = dest / "images.eqt.partial"
            with open(partial, "wb") as fh:
                fh.write(io.header_bytes(np.uint8, (n,) + tuple(x.shape[1:])))
                for start in range(0, n, chunk):
                    fh.write(np.ascontiguousarray(x[start:start + chunk], dtype=np.uint8).tobytes())
            os.replace(partial, dest / "images.eqt")
            io.save_tensor(dest / "labels.eqt", np.asarray(y[:]).reshape(n).astype(np.uint8))
        meta = Path(f"{stem}_meta.csv")
        if meta.exists():
            lines = meta.read_text().splitlines()
            header = lines[0].split(",")
            col = header.index("wsi") if "wsi" in header else 0
            io.atomic_write_text(dest / "sources.txt", "".join(l.split(",")[col] + "\n" for l in lines[1:]))
        write_split_manifest(dest, n, "pcam", (96, 96, 3))
    return load_dataset(out_dir, "pcam")
