"""Slow reference implementations used to cross-check the fast library paths.

Nothing here calls into the code it checks: plane transforms are done by
mapping centred coordinates through 2x2 matrices, group products by matrix
multiplication, and convolutions by explicit loops.
"""

from __future__ import annotations

import itertools

import numpy as np

ROT = np.array([[0, -1], [1, 0]])
FLIP = np.array([[-1, 0], [0, 1]])


def element_matrix(mirror: bool, rot: int) -> np.ndarray:
    return np.linalg.matrix_power(ROT, rot) @ np.linalg.matrix_power(FLIP, int(mirror))


def group_matrices(kind: str) -> list[np.ndarray]:
    """Element matrices in slot order ``4 * mirror + rot``."""
    mirrors = {"trivial": (False,), "C4": (False,), "D4": (False, True)}[kind]
    rots = range(1) if kind == "trivial" else range(4)
    return [element_matrix(m, r) for m in mirrors for r in rots]


def slot_of(matrix: np.ndarray, mats: list[np.ndarray]) -> int:
    for i, m in enumerate(mats):
        if np.array_equal(m, matrix):
            return i
    raise KeyError("matrix not in group")


def transform_square(img: np.ndarray, g: np.ndarray) -> np.ndarray:
    """``out(p) = img(g^-1 p)`` on the last two axes of a square array.

    Coordinates are centred with x to the right and y upwards:
    ``x = col - c``, ``y = c - row``.
    """
    n = img.shape[-1]
    assert img.shape[-2] == n
    c = (n - 1) / 2
    ginv = np.rint(np.linalg.inv(g)).astype(int)
    out = np.empty_like(img)
    for row in range(n):
        for col in range(n):
            x, y = col - c, c - row
            sx, sy = ginv @ np.array([x, y])
            out[..., row, col] = img[..., int(round(c - sy)), int(round(sx + c))]
    return out


def conv_loop(x: np.ndarray, w: np.ndarray) -> np.ndarray:
    """Valid cross-correlation by explicit loops over every output cell."""
    N, C, H, W = x.shape
    O, _, kh, kw = w.shape
    out = np.zeros((N, O, H - kh + 1, W - kw + 1), dtype=np.float64)
    for n, o, i, j in itertools.product(range(N), range(O), range(H - kh + 1), range(W - kw + 1)):
        acc = 0.0
        for c in range(C):
            for u in range(kh):
                for v in range(kw):
                    acc += x[n, c, i + u, j + v] * w[o, c, u, v]
        out[n, o, i, j] = acc
    return out


def lift_oracle(x: np.ndarray, w: np.ndarray, kind: str) -> np.ndarray:
    """``out[n,o,s] = sum_c x[n,c] * (s . psi[o,c])`` with ``(s.psi)(y) = psi(s^-1 y)``.

    ``w`` is ``[O, C, 1, k, k]``; the result is ``[N, O, S, H', W']``.
    """
    mats = group_matrices(kind)
    O, C, _, k, _ = w.shape
    outs = []
    for s in mats:
        bank = np.stack([[transform_square(w[o, c, 0], s) for c in range(C)] for o in range(O)])
        outs.append(conv_loop(x, bank))
    return np.stack(outs, axis=2)


def gconv_oracle(f: np.ndarray, w: np.ndarray, kind: str) -> np.ndarray:
    """``out[n,o,s] = sum_{c,t} f[n,c,t] * (s . psi[o,c,s^-1 t])`` on ``[N,C,S,H,W]`` input."""
    mats = group_matrices(kind)
    S = len(mats)
    N, C, _, H, W = f.shape
    O, _, _, k, _ = w.shape
    out = np.zeros((N, O, S, H - k + 1, W - k + 1))
    for si, s in enumerate(mats):
        sinv = np.rint(np.linalg.inv(s)).astype(int)
        for o, c, ti in itertools.product(range(O), range(C), range(S)):
            src = slot_of(sinv @ mats[ti], mats)
            kern = transform_square(w[o, c, src], s)
            out[:, o, si] += conv_loop(f[:, c, ti][:, None], kern[None, None])[:, 0]
    return out


def numeric_grad(f, x: np.ndarray, eps: float = 1e-6, idx=None) -> np.ndarray:
    """Central differences of scalar ``f`` w.r.t. ``x`` (in place perturbation, restored)."""
    g = np.zeros_like(x, dtype=np.float64)
    positions = np.ndindex(*x.shape) if idx is None else idx
    for pos in positions:
        old = x[pos]
        x[pos] = old + eps
        fp = f()
        x[pos] = old - eps
        fm = f()
        x[pos] = old
        g[pos] = (fp - fm) / (2 * eps)
    return g


def rel_error(a: np.ndarray, b: np.ndarray) -> float:
    """``||a - b|| / max(||a||, ||b||)`` (0 when both vanish)."""
    a, b = np.asarray(a, np.float64).ravel(), np.asarray(b, np.float64).ravel()
    denom = max(np.linalg.norm(a), np.linalg.norm(b))
    return 0.0 if denom < 1e-12 else float(np.linalg.norm(a - b) / denom)


def froc_bruteforce(cands, truth: dict, hit_radius: float,
                    levels=(0.25, 0.5, 1, 2, 4, 8)) -> float:
    """FROC score by re-scoring every distinct threshold from scratch.

    ``cands`` are ``(slide, x, y, prob)`` tuples.  At each threshold the
    admitted candidates are matched to their nearest lesion within the
    radius; a lesion counts once, unmatched candidates are false positives.
    """
    n_slides = len(truth)
    n_lesions = sum(len(v) for v in truth.values())
    thresholds = sorted({c[3] for c in cands}, reverse=True)
    points = [(0.0, 0.0)]
    for t in thresholds:
        fp, found = 0, set()
        for slide, x, y, p in cands:
            if p < t:
                continue
            best, best_d = None, None
            for li, (lx, ly) in enumerate(truth[slide]):
                d = np.hypot(x - lx, y - ly)
                if best_d is None or d < best_d:
                    best, best_d = li, d
            if best is not None and best_d <= hit_radius:
                found.add((slide, best))
            else:
                fp += 1
        points.append((fp / n_slides, len(found) / n_lesions))
    sens = [max(s for f, s in points if f <= lvl) for lvl in levels]
    return float(np.mean(sens))
