"""Patch metrics, tumour-localisation FROC scoring and rotation-stability maps."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np
from scipy import ndimage
from scipy.stats import rankdata

from eqdense import io
from eqdense.errors import (
    ContractError,
    DimensionError,
    FormatError,
    UndefinedMetricError,
    ValidationError,
)
from eqdense.tensor import BCE_EPS

FROC_FP_LEVELS = (0.25, 0.5, 1.0, 2.0, 4.0, 8.0)


# ---------------------------------------------------------------------------
# patch metrics


def _check_binary(probs, labels) -> tuple[np.ndarray, np.ndarray]:
    p = np.asarray(probs, dtype=np.float64).reshape(-1)
    y = np.asarray(labels).reshape(-1)
    if p.size == 0:
        raise UndefinedMetricError("metrics of an empty prediction set")
    if p.size != y.size:
        raise ValidationError(f"{p.size} predictions but {y.size} labels")
    if not np.isin(y, (0, 1)).all():
        raise ValidationError("labels must be 0 or 1")
    return p, y.astype(np.int64)


def nll(probs, labels, eps: float = BCE_EPS) -> float:
    p, y = _check_binary(probs, labels)
    p = np.clip(p, eps, 1 - eps)
    return float(-(y * np.log(p) + (1 - y) * np.log1p(-p)).mean())


def accuracy(probs, labels, threshold: float = 0.5) -> float:
    p, y = _check_binary(probs, labels)
    return float(((p >= threshold).astype(np.int64) == y).mean())


def auc(probs, labels) -> float:
    """Area under the ROC curve via the rank statistic, ties at midranks."""
    p, y = _check_binary(probs, labels)
    n_pos = int(y.sum())
    n_neg = y.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError("AUC needs both classes present")
    ranks = rankdata(p)  # average ranks for ties
    return float((ranks[y == 1].sum() - n_pos * (n_pos + 1) / 2) / (n_pos * n_neg))


def metrics(probs, labels) -> dict:
    return {"nll": nll(probs, labels), "accuracy": accuracy(probs, labels), "auc": auc(probs, labels)}


# ---------------------------------------------------------------------------
# candidates and square NMS


@dataclass(frozen=True, order=True)
class Candidate:
    slide: str
    x: float
    y: float
    prob: float

    def __post_init__(self):
        if not 0.0 <= self.prob <= 1.0:
            raise ValidationError(f"candidate probability {self.prob} outside [0, 1]")


def _sort_key(c: Candidate):
    return (-c.prob, c.y, c.x, c.slide)


def heatmap_candidates(heatmap: np.ndarray, slide: str = "slide", threshold: float = 0.0
                       ) -> list[Candidate]:
    """Every heatmap pixel with probability above ``threshold`` as a candidate."""
    heatmap = np.asarray(heatmap)
    ys, xs = np.nonzero(heatmap > threshold)
    return [Candidate(slide, float(x), float(y), float(heatmap[y, x])) for y, x in zip(ys, xs)]


def square_nms(candidates, window_side: int, slide: str = "slide", threshold: float = 0.0
               ) -> list[Candidate]:
    """Greedy non-maximum suppression with a square exclusion window.

    A candidate is kept unless an already kept candidate on the same slide
    lies within ``window_side // 2`` pixels along both axes.  Candidates are
    visited by descending probability, ties broken by ``(y, x)``.
    ``candidates`` may also be a 2-d heatmap.
    """
    if window_side < 1:
        raise ContractError("window_side must be >= 1")
    if isinstance(candidates, np.ndarray):
        candidates = heatmap_candidates(candidates, slide, threshold)
    w = window_side // 2
    cell = w + 1
    buckets: dict[tuple, list[Candidate]] = {}
    kept: list[Candidate] = []
    for c in sorted(candidates, key=_sort_key):
        bx, by = int(c.x // cell), int(c.y // cell)
        clash = False
        for dx in (-1, 0, 1):
            for dy in (-1, 0, 1):
                for k in buckets.get((c.slide, bx + dx, by + dy), ()):
                    if abs(k.x - c.x) <= w and abs(k.y - c.y) <= w:
                        clash = True
                        break
                if clash:
                    break
            if clash:
                break
        if not clash:
            kept.append(c)
            buckets.setdefault((c.slide, bx, by), []).append(c)
    return kept


# ---------------------------------------------------------------------------
# FROC


@dataclass
class FrocResult:
    curve: list  # (avg false positives per slide, sensitivity), threshold descending
    thresholds: list
    score: float
    sensitivities: dict  # FP level -> sensitivity
    ci: tuple | None = None


@dataclass
class _SlideHits:
    probs: np.ndarray
    lesion: np.ndarray  # local lesion index per candidate, -1 for a false positive
    n_lesions: int


def _assign_hits(candidates: Iterable[Candidate], truth: Mapping[str, np.ndarray],
                 hit_radius: float) -> dict[str, _SlideHits]:
    by_slide: dict[str, list[Candidate]] = {s: [] for s in truth}
    for c in candidates:
        if c.slide not in by_slide:
            raise ContractError(f"slide {c.slide!r} has no ground-truth record")
        by_slide[c.slide].append(c)
    out = {}
    for slide, cands in by_slide.items():
        lesions = np.asarray(truth[slide], dtype=np.float64).reshape(-1, 2)
        probs = np.array([c.prob for c in cands], dtype=np.float64)
        hit = np.full(len(cands), -1, dtype=np.int64)
        if len(cands) and len(lesions):
            xy = np.array([(c.x, c.y) for c in cands], dtype=np.float64)
            d = np.hypot(xy[:, None, 0] - lesions[None, :, 0], xy[:, None, 1] - lesions[None, :, 1])
            nearest = d.argmin(axis=1)
            within = d[np.arange(len(cands)), nearest] <= hit_radius
            hit[within] = nearest[within]
        out[slide] = _SlideHits(probs, hit, len(lesions))
    return out


def _froc_from_arrays(probs: np.ndarray, lesion: np.ndarray, n_lesions: int, n_slides: int,
                      levels=FROC_FP_LEVELS) -> FrocResult:
    if n_lesions == 0:
        raise UndefinedMetricError("FROC is undefined without any lesions")
    order = np.argsort(-probs, kind="stable")
    p, les = probs[order], lesion[order]
    fp_cum = np.cumsum(les < 0)
    first = np.zeros(len(les), dtype=bool)
    if len(les):
        hits = np.flatnonzero(les >= 0)
        _, first_pos = np.unique(les[hits], return_index=True)
        first[hits[first_pos]] = True
    tp_cum = np.cumsum(first)
    # operating point after admitting every candidate with prob >= threshold
    last = np.flatnonzero(np.r_[p[1:] != p[:-1], True]) if len(p) else np.zeros(0, np.int64)
    fps = np.r_[0.0, fp_cum[last] / n_slides]
    sens = np.r_[0.0, tp_cum[last] / n_lesions]
    thresholds = [math.inf] + [float(t) for t in p[last]]
    per_level = {lvl: float(sens[fps <= lvl].max()) for lvl in levels}
    score = float(np.mean(list(per_level.values())))
    return FrocResult(list(zip(fps.tolist(), sens.tolist())), thresholds, score, per_level)


def froc(candidates: Iterable[Candidate], truth: Mapping[str, np.ndarray], hit_radius: float,
         levels=FROC_FP_LEVELS) -> FrocResult:
    """FROC curve and score (mean sensitivity at the given FP-per-slide levels).

    ``truth`` maps every slide id to its lesion centroids ``[(x, y), ...]``
    (possibly empty).  A candidate within ``hit_radius`` of a lesion is
    attributed to its nearest lesion and is never a false positive; a lesion
    counts once however many candidates hit it.  At each FP level the best
    sensitivity among operating points with no more FPs per slide is used.
    """
    hits = _assign_hits(candidates, truth, hit_radius)
    probs, lesion, n = [], [], 0
    for h in hits.values():
        probs.append(h.probs)
        lesion.append(np.where(h.lesion >= 0, h.lesion + n, -1))
        n += h.n_lesions
    probs = np.concatenate(probs) if probs else np.zeros(0)
    lesion = np.concatenate(lesion) if lesion else np.zeros(0, np.int64)
    return _froc_from_arrays(probs, lesion, n, len(hits), levels)


def bootstrap_scores(candidates: Iterable[Candidate], truth: Mapping[str, np.ndarray],
                     hit_radius: float, n: int = 2000, seed: int = 0,
                     levels=FROC_FP_LEVELS) -> np.ndarray:
    """FROC scores of ``n`` slide-level resamples (replicates without lesions are redrawn)."""
    hits = list(_assign_hits(candidates, truth, hit_radius).values())
    n_slides = len(hits)
    if n_slides < 2:
        raise ContractError("bootstrap needs at least 2 slides")
    if sum(h.n_lesions for h in hits) == 0:
        raise UndefinedMetricError("FROC is undefined without any lesions")
    lesion_counts = np.array([h.n_lesions for h in hits])
    rng = np.random.default_rng(seed)
    scores = np.empty(n)
    for r in range(n):
        while True:
            pick = rng.integers(0, n_slides, size=n_slides)
            if lesion_counts[pick].sum() > 0:
                break
        probs, lesion, total = [], [], 0
        for i in pick:
            h = hits[i]
            probs.append(h.probs)
            lesion.append(np.where(h.lesion >= 0, h.lesion + total, -1))
            total += h.n_lesions
        scores[r] = _froc_from_arrays(np.concatenate(probs), np.concatenate(lesion), total,
                                      n_slides, levels).score
    return scores


def bootstrap_ci(candidates, truth, hit_radius: float, n: int = 2000, seed: int = 0,
                 alpha: float = 0.05, levels=FROC_FP_LEVELS) -> tuple[float, float]:
    """Percentile bootstrap bounds of the FROC score."""
    candidates = list(candidates)
    scores = bootstrap_scores(candidates, truth, hit_radius, n, seed, levels)
    lo, hi = np.percentile(scores, [100 * alpha / 2, 100 * (1 - alpha / 2)])
    return float(lo), float(hi)


def tune_window(heatmaps: Mapping[str, np.ndarray], truth: Mapping[str, np.ndarray],
                windows: Sequence[int], hit_radius: float) -> tuple[int, dict]:
    """Grid sweep of the NMS window side; returns the best side and all scores."""
    scores = {}
    for w in windows:
        cands = [c for s, hm in heatmaps.items() for c in square_nms(hm, w, slide=s)]
        scores[w] = froc(cands, truth, hit_radius).score
    best = max(scores, key=lambda w: (scores[w], -w))
    return best, scores


# ---------------------------------------------------------------------------
# rotation stability


def rotate_image(img: np.ndarray, angle: float, axes=(-2, -1)) -> np.ndarray:
    """Rotate counter-clockwise by ``angle`` degrees about the centre.

    Multiples of 90 degrees are exact index permutations; other angles use
    bilinear interpolation with reflected borders.
    """
    q, rem = divmod(float(angle), 90.0)
    if rem == 0.0:
        return np.ascontiguousarray(np.rot90(img, int(q) % 4, axes=axes))
    a0, a1 = (ax % img.ndim for ax in axes)
    return ndimage.rotate(img, angle, axes=(a1, a0), reshape=False, order=1, mode="reflect")


@dataclass
class StabilityResult:
    mean: np.ndarray
    std: np.ndarray
    instability: float
    angles: list
    maps: list = field(default_factory=list, repr=False)


def stability_angles(n_angles: int = 32) -> list[float]:
    """``n_angles`` evenly spaced angles in [0, 90)."""
    return [k * 90.0 / n_angles for k in range(n_angles)]


def stability_map(predict: Callable[[np.ndarray], np.ndarray], region: np.ndarray,
                  n_angles: int = 32, angles: Sequence[float] | None = None) -> StabilityResult:
    """Mean/std of heat maps predicted on rotated copies of ``region``.

    ``region`` is a float ``[C,H,W]`` array and ``predict`` maps such an array
    to a 2-d heat map.  Each map is rotated back and centre-cropped to the
    area covered at every angle; the instability score is the spatial mean of
    the std map.
    """
    angles = list(stability_angles(n_angles) if angles is None else angles)
    if not angles:
        raise ContractError("need at least one angle")
    maps = []
    for theta in angles:
        if theta == 0:
            hm = np.asarray(predict(region))
        else:
            hm = rotate_image(np.asarray(predict(rotate_image(region, theta))), -theta)
        maps.append(hm)
    m = maps[0].shape[0]
    if any(h.shape != maps[0].shape for h in maps) or maps[0].ndim != 2:
        raise DimensionError("heat maps must be 2-d and equally sized")
    if any(float(t) % 90.0 for t in angles):
        side = max(1, int(m / math.sqrt(2)))
        side -= (m - side) % 2
        side = max(side, 1 if m % 2 else 2)
    else:
        side = m
    off = (m - side) // 2
    cropped = np.stack([h[off:off + side, off:off + side] for h in maps])
    std = cropped.std(axis=0)
    return StabilityResult(cropped.mean(axis=0), std, float(std.mean()), angles, maps)


def model_heatmap_fn(model, store) -> Callable[[np.ndarray], np.ndarray]:
    """Adapter: ``[C,H,W]`` float region to the model's eval-mode heat map."""

    def predict(region: np.ndarray) -> np.ndarray:
        x = np.ascontiguousarray(region[None], dtype=np.float32)
        return model(store, x).data[0, 0]

    return predict


# ---------------------------------------------------------------------------
# file formats


def write_pgm(path, image: np.ndarray) -> None:
    """Binary 8-bit portable graymap (P5) of an array scaled from [0, 1]."""
    img = np.clip(np.rint(np.asarray(image, dtype=np.float64) * 255), 0, 255).astype(np.uint8)
    if img.ndim != 2:
        raise DimensionError("PGM needs a 2-d array")
    header = f"P5\n{img.shape[1]} {img.shape[0]}\n255\n".encode("ascii")
    io.atomic_write_bytes(path, header + img.tobytes())


def read_pgm(path) -> np.ndarray:
    data = Path(path).read_bytes()
    parts = data.split(maxsplit=4)
    if parts[0] != b"P5":
        raise FormatError(f"{path}: not a binary PGM")
    w, h = int(parts[1]), int(parts[2])
    return np.frombuffer(parts[4][: w * h], dtype=np.uint8).reshape(h, w)


def _parse_lines(path, ncols: int):
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), 1):
        if not raw.strip() or raw.startswith("#"):
            continue
        fields = raw.rstrip("\n").split("\t")
        if len(fields) != ncols:
            raise FormatError(f"{path}:{lineno}: expected {ncols} tab-separated fields, got {len(fields)}")
        yield lineno, fields


def read_candidates(path) -> list[Candidate]:
    """``slide_id<TAB>prob<TAB>x<TAB>y`` per line."""
    out = []
    for lineno, (slide, prob, x, y) in _parse_lines(path, 4):
        try:
            out.append(Candidate(slide, float(x), float(y), float(prob)))
        except ValueError as exc:
            raise FormatError(f"{path}:{lineno}: {exc}") from None
    return out


def write_candidates(path, candidates: Iterable[Candidate]) -> None:
    text = "".join(f"{c.slide}\t{c.prob!r}\t{c.x!r}\t{c.y!r}\n" for c in candidates)
    io.atomic_write_text(path, text)


def read_truth(path, slides_path=None) -> dict[str, np.ndarray]:
    """``slide_id<TAB>cx<TAB>cy`` per lesion; ``slides_path`` lists every slide (one id per line)."""
    truth: dict[str, list] = {}
    if slides_path is not None:
        for line in Path(slides_path).read_text().splitlines():
            if line.strip():
                truth.setdefault(line.strip(), [])
    for lineno, (slide, cx, cy) in _parse_lines(path, 3):
        try:
            truth.setdefault(slide, []).append((float(cx), float(cy)))
        except ValueError as exc:
            raise FormatError(f"{path}:{lineno}: {exc}") from None
    return {s: np.array(v, dtype=np.float64).reshape(-1, 2) for s, v in truth.items()}


def write_truth(path, truth: Mapping[str, np.ndarray], slides_path=None) -> None:
    lines = [f"{s}\t{float(cx)!r}\t{float(cy)!r}\n" for s, pts in truth.items() for cx, cy in np.asarray(pts).reshape(-1, 2)]
    io.atomic_write_text(path, "".join(lines))
    if slides_path is not None:
        io.atomic_write_text(slides_path, "".join(f"{s}\n" for s in truth))
