import numpy as np
import pytest

from conftest import TINY_ARCH, make_tiny_model
from pvae.data import AudioStyle, GeneratorConfig, ImageStyle, TemplateClassifier, synth_audio
from pvae.evaluation import (ClusterResult, GenerationGrid, cross_modal_grid,
                             encode_means, export_latents, generation_grid,
                             grid_identity_accuracy, grid_style_spearman,
                             inertia_curve, kmeans, measure_style_value,
                             rankdata, render_grid_pgm, spearman,
                             style_transfer_grid, weighted_purity)


# ------------------------------------------------------------------- kmeans

def test_kmeans_k_equals_n_zero_inertia():
    rng = np.random.default_rng(0)
    pts = rng.normal(size=(8, 3))
    res = kmeans(pts, k=8, seed=0)
    assert res.inertia == pytest.approx(0.0, abs=1e-18)


def test_kmeans_k1_centroid_is_mean():
    rng = np.random.default_rng(1)
    pts = rng.normal(size=(40, 2))
    res = kmeans(pts, k=1, seed=0)
    assert np.allclose(res.centroids[0], pts.mean(axis=0))
    assert res.inertia == pytest.approx(np.sum((pts - pts.mean(axis=0)) ** 2))


def test_kmeans_recovers_separated_blobs():
    rng = np.random.default_rng(2)
    centers = np.array([[0, 0], [40, 0], [0, 40], [40, 40]], dtype=float)
    pts = np.concatenate([c + 0.5 * rng.normal(size=(25, 2)) for c in centers])
    truth = np.repeat(np.arange(4), 25)
    res = kmeans(pts, k=4, seed=3)
    assert weighted_purity(res.assignments, truth) == 1.0
    assert res.recomputed_inertia(pts) == pytest.approx(res.inertia, rel=1e-9)
    assert np.all(res.assignments < 4)


def test_kmeans_n_less_than_k_rejected():
    with pytest.raises(ValueError):
        kmeans(np.zeros((3, 2)), k=4, seed=0)


def test_kmeans_deterministic_per_seed():
    rng = np.random.default_rng(4)
    pts = rng.normal(size=(50, 4))
    a = kmeans(pts, k=5, seed=9)
    b = kmeans(pts, k=5, seed=9)
    assert np.array_equal(a.assignments, b.assignments)
    assert a.inertia == b.inertia


# ---------------------------------------------------------- weighted_purity

def test_purity_label_pure_clusters():
    assert weighted_purity([0, 0, 1, 1, 2], [5, 5, 3, 3, 7]) == 1.0


def test_purity_hand_case():
    # clusters {[0,0,1], [1,1]} -> (2 + 2) / 5
    assert weighted_purity([0, 0, 0, 1, 1], [0, 0, 1, 1, 1]) == pytest.approx(0.8)


def test_purity_single_cluster_uniform_labels():
    assert weighted_purity([0] * 10, list(range(10))) == pytest.approx(0.1)


def test_purity_errors():
    with pytest.raises(ValueError):
        weighted_purity([0, 1], [0])
    with pytest.raises(ValueError):
        weighted_purity([], [])


def test_purity_matches_brute_force_on_random_instances():
    rng = np.random.default_rng(5)
    for _ in range(100):
        n = int(rng.integers(1, 200))
        k = int(rng.integers(1, 12))
        assign = rng.integers(0, k, size=n)
        labels = rng.integers(0, 10, size=n)
        # brute force: explicit per-cluster majority count
        total = 0
        for c in set(assign.tolist()):
            members = [l for a, l in zip(assign, labels) if a == c]
            counts = {}
            for l in members:
                counts[l] = counts.get(l, 0) + 1
            total += max(counts.values())
        assert weighted_purity(assign, labels) == pytest.approx(total / n)


def test_purity_invariant_under_cluster_relabeling():
    rng = np.random.default_rng(6)
    assign = rng.integers(0, 6, size=100)
    labels = rng.integers(0, 5, size=100)
    perm = rng.permutation(6)
    assert weighted_purity(assign, labels) == pytest.approx(
        weighted_purity(perm[assign], labels))


# ------------------------------------------------------------ inertia_curve

def test_inertia_curve_monotone_and_terminal_zero():
    rng = np.random.default_rng(7)
    pts = rng.normal(size=(12, 2))
    curve = inertia_curve(pts, 1, 12, seed=0, restarts=3)
    vals = [v for _, v in curve]
    assert all(a >= b - 1e-9 for a, b in zip(vals, vals[1:]))
    assert vals[-1] == pytest.approx(0.0, abs=1e-12)


def test_inertia_curve_elbow_on_blobs():
    rng = np.random.default_rng(8)
    centers = rng.uniform(-30, 30, size=(10, 3))
    pts = np.concatenate([c + 0.3 * rng.normal(size=(30, 3)) for c in centers])
    curve = dict(inertia_curve(pts, 8, 12, seed=1, restarts=5))
    drop_9_10 = (curve[9] - curve[10]) / max(curve[9], 1e-12)
    drop_10_11 = (curve[10] - curve[11]) / max(curve[10], 1e-12)
    assert drop_10_11 < 0.5 * drop_9_10


# ------------------------------------------------------- rank statistics

def test_rankdata_with_ties():
    assert np.array_equal(rankdata(np.array([10.0, 20.0, 20.0, 30.0])),
                          [1.0, 2.5, 2.5, 4.0])


def test_spearman_perfect_and_reversed():
    x = np.array([1.0, 2.0, 3.0, 4.0])
    assert spearman(x, x * 10 + 3) == pytest.approx(1.0)
    assert spearman(x, -x) == pytest.approx(-1.0)


def test_spearman_constant_input():
    assert spearman(np.ones(5), np.arange(5.0)) == 0.0


# ------------------------------------------------------------------- grids

@pytest.fixture(scope="module")
def grid_setup():
    model = make_tiny_model(seed=0)
    rng = np.random.default_rng(9)
    sem_imgs = [rng.uniform(0, 1, size=(28, 28)) for _ in range(3)]
    sty_imgs = [rng.uniform(0, 1, size=(28, 28)) for _ in range(2)]
    sem_auds = [rng.uniform(-1, 1, size=(int(t), TINY_ARCH.audio_feat_dim))
                for t in (5, 7, 6)]
    sty_auds = [rng.uniform(-1, 1, size=(int(t), TINY_ARCH.audio_feat_dim))
                for t in (4, 8)]
    return model, sem_imgs, sty_imgs, sem_auds, sty_auds


def test_style_grid_shape_image(grid_setup):
    model, sem_imgs, sty_imgs, _, _ = grid_setup
    grid = style_transfer_grid(model, sem_imgs, sty_imgs, "image")
    assert grid.shape == (2, 3)
    assert all(cell.shape == (28, 28) for row in grid.cells for cell in row)
    assert grid.output_modality == "image"


def test_style_grid_shape_audio_copies_length(grid_setup):
    model, _, _, sem_auds, sty_auds = grid_setup
    grid = style_transfer_grid(model, sem_auds, sty_auds, "audio")
    assert grid.shape == (2, 3)
    for row_idx, row in enumerate(grid.cells):
        for cell in row:
            assert cell.shape == (sty_auds[row_idx].shape[0], TINY_ARCH.audio_feat_dim)


def test_cross_modal_grid_output_modality(grid_setup):
    model, sem_imgs, _, sem_auds, sty_auds = grid_setup
    g1 = cross_modal_grid(model, sem_imgs, "image", sty_auds)
    assert g1.output_modality == "audio" and g1.shape == (2, 3)
    g2 = cross_modal_grid(model, sem_auds, "audio", [s for s in sem_imgs[:2]])
    assert g2.output_modality == "image" and g2.shape == (2, 3)


def test_grid_deterministic(grid_setup):
    model, sem_imgs, sty_imgs, _, _ = grid_setup
    a = style_transfer_grid(model, sem_imgs, sty_imgs, "image")
    b = style_transfer_grid(model, sem_imgs, sty_imgs, "image")
    for ra, rb in zip(a.cells, b.cells):
        for ca, cb in zip(ra, rb):
            assert np.array_equal(ca, cb)


def test_grid_identity_accuracy_scoring():
    # synthetic grid whose cells are clean renders: oracle must score 1.0
    from pvae.data import render_glyph
    oracle = TemplateClassifier(GeneratorConfig())
    cells = [[render_glyph(d, ImageStyle(), seed=p * 10 + d) for d in (0, 1, 2)]
             for p in range(2)]
    grid = GenerationGrid(semantic_modality="image", output_modality="image",
                          semantic_sources=[np.zeros((28, 28))] * 3,
                          style_sources=[np.zeros((28, 28))] * 2,
                          semantic_identities=[0, 1, 2], style_identities=[0, 0],
                          cells=cells)
    assert grid_identity_accuracy(grid, oracle) == 1.0


def test_grid_style_spearman_on_truthful_cells():
    # audio rows with increasing true durations and cells that honor them
    cfg = GeneratorConfig(t_min=10, t_max=60)
    rows = []
    durations = [12, 25, 40]
    for t in durations:
        frames = synth_audio(3, AudioStyle(duration=t, onset=0), seed=t, config=cfg)
        rows.append([frames, frames])
    grid = GenerationGrid(semantic_modality="audio", output_modality="audio",
                          semantic_sources=[rows[0][0]] * 2,
                          style_sources=[r[0] for r in rows],
                          semantic_identities=[3, 3], style_identities=[3, 3, 3],
                          cells=rows)
    assert grid_style_spearman(grid, durations) >= 0.9


def test_measure_style_value_image_mass():
    img = np.zeros((28, 28))
    img[5:10, 5:10] = 1.0
    assert measure_style_value(img, "image") == pytest.approx(25.0)


# ------------------------------------------------------------------ export

def test_export_latents_rows_and_determinism(tmp_path):
    from pvae.data import generate_dataset
    model = make_tiny_model(seed=1)
    cfg = GeneratorConfig(n_train=30, n_test=20, t_min=5, t_max=9,
                          audio_channels=TINY_ARCH.audio_feat_dim)
    ds = generate_dataset(cfg, seed=3, split="test")
    p1, p2 = tmp_path / "a.csv", tmp_path / "b.csv"
    n = export_latents(model, ds, "s", "audio", p1)
    export_latents(model, ds, "s", "audio", p2)
    assert n == ds.n_audios
    lines = p1.read_text().strip().splitlines()
    assert len(lines) == n + 1
    header = lines[0].split(",")
    # index, identity, 4 audio style fields, latent coordinates
    assert header[:2] == ["index", "identity"]
    assert len(header) == 2 + 4 + TINY_ARCH.latent_dim_s
    assert p1.read_bytes() == p2.read_bytes()


# --------------------------------------------------------------------- PGM

def test_render_grid_pgm_bytes(tmp_path, grid_setup):
    model, sem_imgs, sty_imgs, sem_auds, sty_auds = grid_setup
    grid = style_transfer_grid(model, sem_imgs, sty_imgs, "image")
    p = tmp_path / "grid.pgm"
    render_grid_pgm(grid, p)
    raw = p.read_bytes()
    assert raw.startswith(b"P5\n")
    header, _, rest = raw.partition(b"255\n")
    dims = header.split(b"\n")[1].split()
    w, h = int(dims[0]), int(dims[1])
    assert len(rest) == w * h
    # 4 tile columns (style col + 3 semantic) and 3 tile rows, 28px tiles + separators
    assert w == 4 * 28 + 3 and h == 3 * 28 + 2

    agrid = style_transfer_grid(model, sem_auds, sty_auds, "audio")
    pa = tmp_path / "agrid.pgm"
    render_grid_pgm(agrid, pa)
    assert pa.read_bytes().startswith(b"P5\n")


def test_render_pgm_deterministic(tmp_path, grid_setup):
    model, sem_imgs, sty_imgs, _, _ = grid_setup
    grid = style_transfer_grid(model, sem_imgs, sty_imgs, "image")
    p1, p2 = tmp_path / "g1.pgm", tmp_path / "g2.pgm"
    render_grid_pgm(grid, p1)
    render_grid_pgm(grid, p2)
    assert p1.read_bytes() == p2.read_bytes()
