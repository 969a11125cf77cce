"""Evaluation suite: k-means purity of the latent spaces, inertia-vs-k
curves, within-modality and cross-modal generation grids, latent CSV export,
and grayscale grid rendering.

Clustering always operates on posterior means from the unimodal encoders,
which is also how the similarity term reads the latent space.
"""

from __future__ import annotations

import csv
import dataclasses
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .autodiff import Tensor
from .data import Dataset, TemplateClassifier
from .networks import (AUDIO, IMAGE, PvaeModel, decode_audio, decode_image,
                       infer_unimodal)


# ----------------------------------------------------------------- k-means

@dataclass
class ClusterResult:
    assignments: np.ndarray
    centroids: np.ndarray
    inertia: float
    iterations: int
    seed: int

    def recomputed_inertia(self, points: np.ndarray) -> float:
        return float(np.sum((points - self.centroids[self.assignments]) ** 2))


def _dist2(points: np.ndarray, centroids: np.ndarray) -> np.ndarray:
    return (np.sum(points ** 2, axis=1)[:, None]
            - 2.0 * points @ centroids.T
            + np.sum(centroids ** 2, axis=1)[None, :])


def _kmeanspp_init(points: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = len(points)
    centroids = np.empty((k, points.shape[1]))
    centroids[0] = points[rng.integers(0, n)]
    d2 = np.sum((points - centroids[0]) ** 2, axis=1)
    for j in range(1, k):
        total = d2.sum()
        if total <= 0:
            centroids[j:] = points[rng.integers(0, n, size=k - j)]
            break
        probs = d2 / total
        centroids[j] = points[rng.choice(n, p=probs)]
        d2 = np.minimum(d2, np.sum((points - centroids[j]) ** 2, axis=1))
    return centroids


def kmeans(points: np.ndarray, k: int, seed: int, max_iter: int = 300,
           init_centroids: Optional[np.ndarray] = None) -> ClusterResult:
    """Lloyd iterations from k-means++ seeding until the assignment fixpoint.

    Nearest-centroid ties break toward the lowest centroid index; a cluster
    that empties is re-seeded to the point farthest from its current centroid.
    Inertia is checked to be non-increasing on every iteration.
    """
    points = np.asarray(points, dtype=np.float64)
    n = len(points)
    if n < k or k < 1:
        raise ValueError(f"need at least k={k} points, got {n}")
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed])))
    centroids = (_kmeanspp_init(points, k, rng) if init_centroids is None
                 else np.array(init_centroids, dtype=np.float64))
    if centroids.shape != (k, points.shape[1]):
        raise ValueError(f"bad init centroids shape {centroids.shape}")

    prev_assign = None
    inertia = np.inf
    iterations = 0
    while True:
        iterations += 1
        d2 = _dist2(points, centroids)
        assign = np.argmin(d2, axis=1)  # argmin takes the lowest index on ties
        new_inertia = float(np.sum((points - centroids[assign]) ** 2))
        if new_inertia > inertia + 1e-9 * max(1.0, abs(inertia)):
            raise AssertionError(
                f"Lloyd inertia increased: {inertia} -> {new_inertia}")
        inertia = new_inertia
        converged = prev_assign is not None and np.array_equal(assign, prev_assign)
        if converged or iterations >= max_iter:
            return ClusterResult(assignments=assign, centroids=centroids,
                                 inertia=inertia, iterations=iterations, seed=seed)
        prev_assign = assign
        for j in range(k):
            members = points[assign == j]
            if len(members):
                centroids[j] = members.mean(axis=0)
            else:
                own = d2[np.arange(n), assign]
                centroids[j] = points[int(np.argmax(own))]


def weighted_purity(assignments: Sequence[int], labels: Sequence[int]) -> float:
    """Cluster-size weighted majority-label fraction: (1/N) sum_c max_l n_{c,l}."""
    assignments = np.asarray(assignments)
    labels = np.asarray(labels)
    if assignments.shape != labels.shape:
        raise ValueError(f"length mismatch: {assignments.shape} vs {labels.shape}")
    if assignments.size == 0:
        raise ValueError("empty input")
    total = 0
    for c in np.unique(assignments):
        in_c = labels[assignments == c]
        total += np.bincount(in_c).max()
    return float(total / assignments.size)


def inertia_curve(points: np.ndarray, k_min: int, k_max: int, seed: int,
                  restarts: int = 5) -> list[tuple[int, float]]:
    """Best-of-restarts inertia per k.

    In addition to the seeded k-means++ restarts, each k also runs one
    warm start from the previous k's best centroids plus the farthest point,
    which makes the curve monotone non-increasing by construction; the
    monotonicity is still checked.
    """
    out: list[tuple[int, float]] = []
    prev_best: Optional[ClusterResult] = None
    for k in range(k_min, k_max + 1):
        best: Optional[ClusterResult] = None
        for r in range(restarts):
            res = kmeans(points, k, seed=seed * 10_000 + k * 100 + r)
            if best is None or res.inertia < best.inertia:
                best = res
        if prev_best is not None:
            d2 = _dist2(points, prev_best.centroids)
            own = d2[np.arange(len(points)), prev_best.assignments]
            extra = points[int(np.argmax(own))]
            init = np.vstack([prev_best.centroids, extra])
            res = kmeans(points, k, seed=seed, init_centroids=init)
            if res.inertia < best.inertia:
                best = res
        if out and best.inertia > out[-1][1] + 1e-9:
            raise AssertionError(f"inertia increased from k={k-1} to k={k}")
        out.append((k, best.inertia))
        prev_best = best
    return out


# ------------------------------------------------------------- encoding API

def encode_means(model: PvaeModel, dataset: Dataset, modality: str, latent: str,
                 batch_size: int = 256) -> np.ndarray:
    """Unimodal posterior means [N, D] of one latent over a dataset pool."""
    means = []
    if modality == AUDIO:
        n = dataset.n_audios
        for lo in range(0, n, batch_size):
            chunk = dataset.audios[lo:lo + batch_size]
            t_max = max(a.shape[0] for a in chunk)
            batch = np.zeros((len(chunk), t_max, dataset.config.audio_channels))
            mask = np.zeros((len(chunk), t_max))
            for row, a in enumerate(chunk):
                batch[row, :a.shape[0]] = a
                mask[row, :a.shape[0]] = 1.0
            post = infer_unimodal(model, AUDIO, batch, mask=mask)
            means.append(post[latent].mean.data)
    elif modality == IMAGE:
        n = dataset.n_images
        for lo in range(0, n, batch_size):
            chunk = dataset.images[lo:lo + batch_size].astype(np.float64)[:, None]
            post = infer_unimodal(model, IMAGE, chunk)
            means.append(post[latent].mean.data)
    else:
        raise ValueError(f"unknown modality {modality!r}")
    return np.concatenate(means, axis=0)


def latent_purity(model: PvaeModel, dataset: Dataset, modality: str, latent: str,
                  k: int = 10, seed: int = 0, restarts: int = 5) -> float:
    """The clustering metric: weighted purity of k-means on posterior means."""
    means = encode_means(model, dataset, modality, latent)
    labels = (dataset.audio_identities if modality == AUDIO
              else dataset.image_identities)
    best = None
    for r in range(restarts):
        res = kmeans(means, k, seed=seed * 1000 + r)
        if best is None or res.inertia < best.inertia:
            best = res
    return weighted_purity(best.assignments, labels)


# -------------------------------------------------------- generation grids

@dataclass
class GenerationGrid:
    semantic_modality: str
    output_modality: str
    semantic_sources: list[np.ndarray]
    style_sources: list[np.ndarray]
    semantic_identities: list[int]
    style_identities: list[int]
    cells: list[list[np.ndarray]]  # [len(style_sources)][len(semantic_sources)]

    @property
    def shape(self) -> tuple[int, int]:
        return (len(self.style_sources), len(self.semantic_sources))


def _stack_audio(sources: list[np.ndarray], channels: int):
    t_max = max(a.shape[0] for a in sources)
    batch = np.zeros((len(sources), t_max, channels))
    mask = np.zeros((len(sources), t_max))
    for i, a in enumerate(sources):
        batch[i, :a.shape[0]] = a
        mask[i, :a.shape[0]] = 1.0
    return batch, mask


def _unimodal_means_of(model: PvaeModel, sources: list[np.ndarray], modality: str,
                       latent: str) -> np.ndarray:
    if modality == AUDIO:
        batch, mask = _stack_audio(sources, model.arch.audio_feat_dim)
        return infer_unimodal(model, AUDIO, batch, mask=mask)[latent].mean.data
    imgs = np.stack([np.asarray(s, dtype=np.float64) for s in sources])[:, None]
    return infer_unimodal(model, IMAGE, imgs)[latent].mean.data


def generation_grid(model: PvaeModel, semantic_sources: list[np.ndarray],
                    semantic_modality: str, style_sources: list[np.ndarray],
                    output_modality: str,
                    semantic_identities: Optional[list[int]] = None,
                    style_identities: Optional[list[int]] = None) -> GenerationGrid:
    """Decode the cross product of semantic latents (columns) and style
    latents (rows). Semantic z_s comes from the unimodal encoder of the
    semantic sources' modality; style latents and the output modality follow
    the style sources. Audio rollout length is copied per row from the style
    source."""
    style_key = "a" if output_modality == AUDIO else "i"
    z_s = _unimodal_means_of(model, semantic_sources, semantic_modality, "s")
    z_style = _unimodal_means_of(model, style_sources, output_modality, style_key)
    n_sem = len(semantic_sources)
    cells: list[list[np.ndarray]] = []
    for row, style in enumerate(style_sources):
        z_row = np.repeat(z_style[row:row + 1], n_sem, axis=0)
        if output_modality == AUDIO:
            t = style.shape[0]
            out = decode_audio(model, Tensor(z_row), Tensor(z_s), num_frames=t)
            cells.append([out.data[j] for j in range(n_sem)])
        else:
            out = decode_image(model, Tensor(z_row), Tensor(z_s))
            cells.append([out.data[j, 0] for j in range(n_sem)])
    return GenerationGrid(
        semantic_modality=semantic_modality, output_modality=output_modality,
        semantic_sources=list(semantic_sources), style_sources=list(style_sources),
        semantic_identities=list(semantic_identities or [-1] * n_sem),
        style_identities=list(style_identities or [-1] * len(style_sources)),
        cells=cells)


def style_transfer_grid(model: PvaeModel, semantic_sources: list[np.ndarray],
                        style_sources: list[np.ndarray], modality: str,
                        semantic_identities: Optional[list[int]] = None,
                        style_identities: Optional[list[int]] = None) -> GenerationGrid:
    """Within-modality recombination: semantics and styles from the same
    modality, decoded back into it."""
    return generation_grid(model, semantic_sources, modality, style_sources,
                           modality, semantic_identities, style_identities)


def cross_modal_grid(model: PvaeModel, semantic_sources: list[np.ndarray],
                     semantic_modality: str, style_sources: list[np.ndarray],
                     semantic_identities: Optional[list[int]] = None,
                     style_identities: Optional[list[int]] = None) -> GenerationGrid:
    """Cross-modal conversion: z_s inferred in one modality, style and output
    in the other."""
    output = IMAGE if semantic_modality == AUDIO else AUDIO
    return generation_grid(model, semantic_sources, semantic_modality,
                           style_sources, output, semantic_identities,
                           style_identities)


# -------------------------------------------------------------- grid scoring

def grid_identity_accuracy(grid: GenerationGrid, oracle: TemplateClassifier) -> float:
    """Fraction of body cells whose oracle-judged identity matches the
    semantic source of their column."""
    hits = 0
    total = 0
    for row in grid.cells:
        for col, cell in enumerate(row):
            want = grid.semantic_identities[col]
            if grid.output_modality == AUDIO:
                got = oracle.classify_audio(cell)
            else:
                got = oracle.classify_image(cell)
            hits += got == want
            total += 1
    return hits / total


def rankdata(v: np.ndarray) -> np.ndarray:
    """Average ranks with tie handling."""
    v = np.asarray(v, dtype=np.float64)
    order = np.argsort(v, kind="stable")
    ranks = np.empty(len(v))
    i = 0
    sorted_v = v[order]
    while i < len(v):
        j = i
        while j + 1 < len(v) and sorted_v[j + 1] == sorted_v[i]:
            j += 1
        ranks[order[i:j + 1]] = (i + j) / 2.0 + 1.0
        i = j + 1
    return ranks


def spearman(x: np.ndarray, y: np.ndarray) -> float:
    """Spearman rank correlation (Pearson on average ranks)."""
    rx, ry = rankdata(x), rankdata(y)
    rx = rx - rx.mean()
    ry = ry - ry.mean()
    denom = np.sqrt(np.sum(rx ** 2) * np.sum(ry ** 2))
    if denom == 0:
        return 0.0
    return float(np.sum(rx * ry) / denom)


def measure_style_value(cell: np.ndarray, modality: str) -> float:
    """Style proxy measured on a generated cell: active duration for audio,
    total pixel mass for images."""
    if modality == AUDIO:
        return float(TemplateClassifier.measured_duration(cell))
    return float(np.clip(cell, 0.0, 1.0).sum())


def grid_style_spearman(grid: GenerationGrid, row_truths: Sequence[float]) -> float:
    """Rank correlation between each row's style-source ground truth and the
    measured style proxy of that row's generated cells."""
    xs, ys = [], []
    for row_idx, row in enumerate(grid.cells):
        for cell in row:
            xs.append(float(row_truths[row_idx]))
            ys.append(measure_style_value(cell, grid.output_modality))
    return spearman(np.array(xs), np.array(ys))


# ------------------------------------------------------------------ export

def export_latents(model: PvaeModel, dataset: Dataset, latent: str,
                   modality: str, path: str | Path) -> int:
    """CSV of identity, style metadata, and posterior-mean coordinates; one
    row per sample of the source pool. Returns the row count."""
    means = encode_means(model, dataset, modality, latent)
    if modality == AUDIO:
        identities = dataset.audio_identities
        styles = [dataclasses.asdict(s) for s in dataset.audio_styles]
    else:
        identities = dataset.image_identities
        styles = [dataclasses.asdict(s) for s in dataset.image_styles]
    style_fields = list(styles[0].keys())
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["index", "identity", *style_fields,
                    *[f"z{i}" for i in range(means.shape[1])]])
        for i in range(len(means)):
            w.writerow([i, int(identities[i]),
                        *[repr(styles[i][k]) for k in style_fields],
                        *[repr(float(v)) for v in means[i]]])
    return len(means)


# ---------------------------------------------------------------- rendering

def _to_u8_tile(cell: np.ndarray, modality: str) -> np.ndarray:
    if modality == IMAGE:
        return (np.clip(cell, 0.0, 1.0) * 255.0).round().astype(np.uint8)
    # audio: frequency rows, time columns, per-tile min-max normalization
    tile = cell.T
    lo, hi = tile.min(), tile.max()
    if hi - lo < 1e-12:
        return np.zeros(tile.shape, dtype=np.uint8)
    return ((tile - lo) / (hi - lo) * 255.0).round().astype(np.uint8)


def render_grid_pgm(grid: GenerationGrid, path: str | Path,
                    separator: int = 255) -> None:
    """Tile the grid into one 8-bit binary PGM: semantic sources across the
    top, style sources down the left, generated cells in the body."""
    tiles: list[list[np.ndarray]] = []
    top = [None] + [_to_u8_tile(s, grid.semantic_modality) for s in grid.semantic_sources]
    tiles.append(top)
    for row_idx, row in enumerate(grid.cells):
        left = _to_u8_tile(grid.style_sources[row_idx], grid.output_modality)
        tiles.append([left] + [_to_u8_tile(c, grid.output_modality) for c in row])

    heights = [max(t.shape[0] for t in row if t is not None) for row in tiles]
    widths = [0] * len(tiles[0])
    for row in tiles:
        for j, t in enumerate(row):
            if t is not None:
                widths[j] = max(widths[j], t.shape[1])

    total_h = sum(heights) + len(heights) - 1
    total_w = sum(widths) + len(widths) - 1
    canvas = np.zeros((total_h, total_w), dtype=np.uint8)
    y = 0
    for i, row in enumerate(tiles):
        x = 0
        for j, t in enumerate(row):
            if t is not None:
                canvas[y:y + t.shape[0], x:x + t.shape[1]] = t
            x += widths[j]
            if j + 1 < len(row):
                canvas[:, x] = separator
                x += 1
        y += heights[i]
        if i + 1 < len(tiles):
            canvas[y, :] = separator
            y += 1

    with open(path, "wb") as f:
        f.write(f"P5\n{total_w} {total_h}\n255\n".encode())
        f.write(canvas.tobytes())
