"""Difference image, hierarchical FCM pseudo-labels and training-sample draw."""
from __future__ import annotations

import math
import os
from dataclasses import dataclass, field

import numpy as np

UNCHANGED, INTERMEDIATE, CHANGED = 0, 128, 255
THETA = 1.2


class PreclassError(ValueError):
    pass


def log_ratio_di(i1: np.ndarray, i2: np.ndarray, rescale: bool = True) -> np.ndarray:
    """|log((I2 + 1) / (I1 + 1))|, optionally min-max rescaled to [0, 255]."""
    i1 = np.asarray(i1, dtype=np.float64)
    i2 = np.asarray(i2, dtype=np.float64)
    if i1.shape != i2.shape:
        raise ValueError(f"images differ in size: {i1.shape} vs {i2.shape}")
    # difference of logs keeps the operator exactly symmetric in (i1, i2)
    di = np.abs(np.log(i2 + 1.0) - np.log(i1 + 1.0))
    if not rescale:
        return di
    lo, hi = di.min(), di.max()
    if hi == lo:
        return np.zeros_like(di)
    return (di - lo) / (hi - lo) * 255.0


@dataclass
class FcmResult:
    centers: np.ndarray
    memberships: np.ndarray
    objective_trace: list[float]

    @property
    def labels(self) -> np.ndarray:
        return self.memberships.argmax(axis=1)


def _memberships(x: np.ndarray, centers: np.ndarray, m: float) -> np.ndarray:
    d2 = (x[:, None] - centers[None, :]) ** 2
    zero = d2 == 0
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = d2 ** (-1.0 / (m - 1.0))
        u = inv / inv.sum(axis=1, keepdims=True)
    hit = zero.any(axis=1)
    if hit.any():
        # a point sitting on a center belongs to it (shared if centers coincide)
        u[hit] = zero[hit] / zero[hit].sum(axis=1, keepdims=True)
    return u


def _objective(x, centers, um) -> float:
    return float((um * (x[:, None] - centers[None, :]) ** 2).sum())


def fcm(values, c: int = 2, m: float = 2.0, tol: float = 1e-5, max_iter: int = 100,
        seed: int = 0) -> FcmResult:
    """Fuzzy c-means on scalar data.

    Centers start at seeded positions inside equal-probability quantile bins
    of the data; iteration stops when no center moves more than ``tol``.
    ``objective_trace[t]`` is the objective after the t-th center update and
    is asserted non-increasing.
    """
    x = np.asarray(values, dtype=np.float64).ravel()
    if c < 2:
        raise ValueError(f"need c >= 2 clusters, got {c}")
    if m <= 1:
        raise ValueError(f"fuzziness m must exceed 1, got {m}")
    uniq = np.unique(x)
    if uniq.size < c:
        raise ValueError(f"FCM needs at least {c} distinct values, data has {uniq.size}")
    rng = np.random.default_rng(seed)
    q = (np.arange(c) + rng.uniform(0.25, 0.75, size=c)) / c
    centers = np.quantile(x, q)
    if np.unique(centers).size < c:
        centers = uniq[np.round(q * (uniq.size - 1)).astype(int)]
    trace: list[float] = []
    for _ in range(max_iter):
        u = _memberships(x, centers, m)
        um = u ** m
        new = (um * x[:, None]).sum(axis=0) / um.sum(axis=0)
        trace.append(_objective(x, new, um))
        shift = np.abs(new - centers).max()
        centers = new
        if shift < tol:
            break
    u = _memberships(x, centers, m)
    for a, b in zip(trace, trace[1:]):
        if b > a + 1e-9 * max(abs(a), 1.0):
            raise AssertionError(f"FCM objective increased: {a} -> {b}")
    return FcmResult(centers, u, trace)


@dataclass
class PreclassMap:
    """Three-way pseudo-label map with codes 0 (unchanged), 128 (intermediate), 255 (changed)."""

    labels: np.ndarray
    t_c1: int
    cap: int
    cluster_sizes: list[int]
    train_indices: np.ndarray = field(default_factory=lambda: np.zeros((0, 3), dtype=np.int64))

    @property
    def changed(self) -> np.ndarray:
        return self.labels == CHANGED

    @property
    def unchanged(self) -> np.ndarray:
        return self.labels == UNCHANGED

    @property
    def intermediate(self) -> np.ndarray:
        return self.labels == INTERMEDIATE

    def binary(self) -> np.ndarray:
        """Changed class alone as a 0/255 map (the FCM-only baseline)."""
        return np.where(self.changed, 255.0, 0.0)


def hierarchical_preclassify(di: np.ndarray, theta: float = THETA, seed: int = 0,
                             n_fine: int = 5, **fcm_kw) -> PreclassMap:
    """Two-pass FCM pseudo-labelling of a difference image.

    Pass 1 (two clusters) fixes the changed-pixel count T and the cap
    ceil(theta * T). Pass 2 splits the DI into ``n_fine`` clusters ordered by
    descending center; the first is the changed class, and following clusters
    join the intermediate class while the running count of changed plus
    intermediate pixels stays below theta * T. The rest are unchanged.
    When the DI has fewer distinct levels than ``n_fine``, pass 2 uses one
    cluster per level.
    """
    di = np.asarray(di, dtype=np.float64)
    x = di.ravel()
    coarse = fcm(x, c=2, seed=seed, **fcm_kw)
    hi = int(np.argmax(coarse.centers))
    t_c1 = int((coarse.labels == hi).sum())
    cap = math.ceil(theta * t_c1)

    k = min(n_fine, np.unique(x).size)
    fine = fcm(x, c=k, seed=seed, **fcm_kw)
    order = np.argsort(-fine.centers, kind="stable")
    lab = fine.labels
    sizes = [int((lab == j).sum()) for j in order]

    out = np.full(x.shape, UNCHANGED, dtype=np.uint8)
    out[lab == order[0]] = CHANGED
    running = sizes[0]
    for j, size in zip(order[1:], sizes[1:]):
        if running + size >= theta * t_c1:
            break
        out[lab == j] = INTERMEDIATE
        running += size
    return PreclassMap(out.reshape(di.shape), t_c1, cap, sizes)


def select_training_samples(pmap: PreclassMap, fraction: float = 0.04, seed: int = 0,
                            min_class_share: float = 0.1) -> np.ndarray:
    """Draw ``round(fraction * |eligible|)`` pixels from the changed and unchanged classes.

    The draw is stratified by class ratio, but each class contributes at
    least ``min_class_share`` of it when available. Returns an (n, 3) int
    array of (row, col, label) with label 1 = changed.
    """
    if not 0 < fraction <= 1:
        raise ValueError(f"sample fraction must be in (0, 1], got {fraction}")
    ch = np.flatnonzero(pmap.changed.ravel())
    un = np.flatnonzero(pmap.unchanged.ravel())
    if ch.size == 0 or un.size == 0:
        which = "changed" if ch.size == 0 else "unchanged"
        raise PreclassError(f"pseudo-label class '{which}' is empty; inspect the difference image "
                            "(identical or nearly identical inputs?)")
    total = ch.size + un.size
    n = int(round(fraction * total))
    n = max(min(n, total), 2)
    floor = int(math.ceil(min_class_share * n))
    n_ch = int(round(n * ch.size / total))
    n_ch = min(max(n_ch, floor), ch.size)
    n_un = n - n_ch
    if n_un > un.size:
        n_un = un.size
        n_ch = n - n_un
    elif n_un < floor and un.size >= floor:
        n_un = floor
        n_ch = n - n_un
    rng = np.random.default_rng(seed)
    pick_ch = rng.choice(ch, size=n_ch, replace=False)
    pick_un = rng.choice(un, size=n_un, replace=False)
    flat = np.concatenate([pick_ch, pick_un])
    labels = np.concatenate([np.ones(n_ch, np.int64), np.zeros(n_un, np.int64)])
    order = np.argsort(flat, kind="stable")
    flat, labels = flat[order], labels[order]
    rows, cols = np.divmod(flat, pmap.labels.shape[1])
    return np.stack([rows, cols, labels], axis=1).astype(np.int64)


def holdout_pool(pmap: PreclassMap, train: np.ndarray) -> np.ndarray:
    """Eligible (changed or unchanged) pixels not drawn for training, as (row, col, label)."""
    eligible = pmap.changed | pmap.unchanged
    eligible = eligible.copy()
    eligible[train[:, 0], train[:, 1]] = False
    rows, cols = np.nonzero(eligible)
    labels = pmap.changed[rows, cols].astype(np.int64)
    return np.stack([rows, cols, labels], axis=1)


def save_samples(samples: np.ndarray, path) -> None:
    directory = os.path.dirname(os.fspath(path))
    if directory:
        os.makedirs(directory, exist_ok=True)
    with open(path, "w") as fh:
        for row, col, label in samples:
            fh.write(f"{row},{col},{label}\n")


def load_samples(path) -> np.ndarray:
    rows = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            parts = line.split(",")
            if len(parts) != 3:
                raise ValueError(f"{path}:{lineno}: expected 'row,col,label', got {line!r}")
            rows.append([int(p) for p in parts])
    return np.array(rows, dtype=np.int64).reshape(-1, 3)


def labels_from_pgm(grid: np.ndarray) -> np.ndarray:
    """Validate a 0/128/255 preclassification raster and return it as uint8 codes."""
    codes = np.asarray(grid).astype(np.uint8)
    bad = ~np.isin(codes, (UNCHANGED, INTERMEDIATE, CHANGED))
    if bad.any():
        r, c = np.argwhere(bad)[0]
        raise ValueError(f"preclassification value {codes[r, c]} at ({r},{c}) not in 0/128/255")
    return codes
