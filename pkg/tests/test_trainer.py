import dataclasses
import json

import numpy as np
import pytest

from conftest import TINY_ARCH, make_tiny_model
from pvae.autodiff import Tensor
from pvae.data import GeneratorConfig, generate_dataset
from pvae.networks import build_model, infer_unimodal_audio
from pvae.objectives import ObjectiveWeights
from pvae.trainer import (AdamState, CheckpointConfigError, CheckpointError,
                          CheckpointShapeError, CheckpointTruncatedError,
                          CheckpointVersionError, NonFiniteGradientError,
                          TrainConfig, TrainerState, adam_step, clip_global_norm,
                          fit, load_checkpoint, save_checkpoint)

DATA_CFG = GeneratorConfig(n_train=60, n_test=30, t_min=6, t_max=12,
                           audio_channels=TINY_ARCH.audio_feat_dim)


@pytest.fixture(scope="module")
def dataset():
    return generate_dataset(DATA_CFG, seed=5, split="train")


def tiny_train_config(**kw):
    base = dict(lr=1e-3, batch_size=16, epochs=2, seed=1, grad_clip=5.0,
                weights=ObjectiveWeights(alpha_ch=0.1, alpha_cm=10.0))
    base.update(kw)
    return TrainConfig(**base)


# --------------------------------------------------------------------- adam

def test_adam_first_step_magnitude():
    # constant gradient g: bias-corrected update is lr * g / (|g| + eps)
    p = {"w": Tensor(np.array([1.0]), requires_grad=True)}
    cfg = TrainConfig(lr=0.01, epochs=1)
    state = AdamState(p)
    g = 0.37
    adam_step(p, {"w": np.array([g])}, state, cfg)
    expected = 1.0 - 0.01 * g / (g + cfg.eps)
    assert p["w"].data[0] == pytest.approx(expected, rel=1e-12)
    assert abs(1.0 - p["w"].data[0]) == pytest.approx(0.01, rel=1e-6)


def test_adam_zero_gradient_keeps_params():
    p = {"w": Tensor(np.ones(4), requires_grad=True)}
    cfg = TrainConfig(epochs=1)
    state = AdamState(p)
    for _ in range(3):
        adam_step(p, {"w": np.zeros(4)}, state, cfg)
    assert np.array_equal(p["w"].data, np.ones(4))


def test_adam_deterministic_across_runs():
    def run():
        rng = np.random.default_rng(3)
        p = {"w": Tensor(np.ones((3, 3)), requires_grad=True)}
        cfg = TrainConfig(lr=0.05, epochs=1)
        state = AdamState(p)
        for _ in range(10):
            adam_step(p, {"w": rng.normal(size=(3, 3))}, state, cfg)
        return p["w"].data

    assert np.array_equal(run(), run())


def test_adam_shape_mismatch():
    p = {"w": Tensor(np.ones(4), requires_grad=True)}
    with pytest.raises(ValueError):
        adam_step(p, {"w": np.zeros(5)}, AdamState(p), TrainConfig(epochs=1))


def test_adam_nonfinite_gradient_names_parameter():
    p = {"layer.w": Tensor(np.ones(2), requires_grad=True)}
    with pytest.raises(NonFiniteGradientError) as exc:
        adam_step(p, {"layer.w": np.array([1.0, np.nan])}, AdamState(p),
                  TrainConfig(epochs=1))
    assert "layer.w" in str(exc.value)


def test_clip_global_norm():
    grads = {"a": np.array([3.0]), "b": np.array([4.0])}
    total = clip_global_norm(grads, 1.0)
    assert total == pytest.approx(5.0)
    assert np.sqrt(sum(np.sum(g * g) for g in grads.values())) == pytest.approx(1.0)
    grads2 = {"a": np.array([0.3])}
    clip_global_norm(grads2, 1.0)  # under the limit: untouched
    assert grads2["a"][0] == pytest.approx(0.3)


# ---------------------------------------------------------------------- fit

def test_fit_improves_elbo(dataset, tmp_path):
    model = build_model(TINY_ARCH, seed=0)
    cfg = tiny_train_config(epochs=12, lr=3e-3)
    result = fit(model, dataset, cfg, out_dir=tmp_path / "run")
    first = result.log_rows[0]
    last = result.log_rows[-1]
    elbo = lambda r: (r["recon_audio"] + r["recon_image"] - r["kl_za"]
                      - r["kl_zi"] - r["kl_zs"])
    assert elbo(last) > elbo(first)


def test_fit_zero_lr_keeps_parameters(dataset):
    model = build_model(TINY_ARCH, seed=2)
    before = {n: t.data.copy() for n, t in model.parameters().items()}
    fit(model, dataset, tiny_train_config(lr=0.0, epochs=2))
    for n, t in model.parameters().items():
        assert np.array_equal(before[n], t.data), n


def test_fit_breakdown_identity_in_log(dataset):
    model = build_model(TINY_ARCH, seed=3)
    cfg = tiny_train_config(epochs=2)
    result = fit(model, dataset, cfg)
    for row in result.log_rows:
        expect = (row["recon_audio"] + row["recon_image"] - row["kl_za"]
                  - row["kl_zi"] - row["kl_zs"]
                  + cfg.weights.alpha_ch * row["coherence"]
                  + cfg.weights.alpha_cm * row["contrastive"])
        assert row["total"] == pytest.approx(expect, rel=1e-12)


def test_fit_contrastive_only_leaves_theta_phi(dataset):
    # gradient routing seen end to end: one step of a CM-only objective must
    # leave decoder and joint-encoder parameters at their initialization
    model = build_model(TINY_ARCH, seed=4)
    before = {n: t.data.copy() for n, t in model.parameters().items()}
    cfg = tiny_train_config(epochs=1, batch_size=60,
                            weights=ObjectiveWeights(alpha_ch=0.0, alpha_cm=1.0),
                            lr=1e-2)
    # zero out the bound's influence by freezing on a single step with lr on
    # psi only: instead, run the full step and check theta/phi moved only via
    # the bound; so here use a model where the bound is weighted away by
    # directly calling the objective path: simplest is lr=0 baseline compare.
    # The structural assertion lives in test_objectives; here we check Adam
    # does not invent updates for parameters with identically zero gradients.
    from pvae.data import make_batch, negative_for, pair_epoch
    from pvae.objectives import contrastive
    from pvae.autodiff import backward, neg
    from pvae.trainer import AdamState, adam_step
    pairs = pair_epoch(dataset, epoch_seed=0)[:16]
    batch = make_batch(dataset, pairs)
    negp = negative_for(batch.identity, dataset, "label_filtered", seed=1)
    negb = make_batch(dataset, negp)
    backward(neg(contrastive(model, batch, negb)))
    params = model.parameters()
    grads = {n: p.grad for n, p in params.items() if p.grad is not None}
    adam_step(params, grads, AdamState(params), cfg)
    for n, t in model.parameters().items():
        if n.startswith(("theta/", "phi/")):
            assert np.array_equal(before[n], t.data), n
    moved = [n for n, t in model.parameters().items()
             if n.startswith("psi/") and not np.array_equal(before[n], t.data)]
    assert moved


def test_fit_writes_log_csv(dataset, tmp_path):
    model = build_model(TINY_ARCH, seed=5)
    out = tmp_path / "logrun"
    fit(model, dataset, tiny_train_config(epochs=2), out_dir=out)
    lines = (out / "train_log.csv").read_text().strip().splitlines()
    assert lines[0] == ("epoch,recon_audio,recon_image,kl_za,kl_zi,kl_zs,"
                        "coherence,contrastive,total,wall_time_s")
    assert len(lines) == 3


# -------------------------------------------------------------- checkpoints

def test_checkpoint_roundtrip(tmp_path):
    model = build_model(TINY_ARCH, seed=6)
    cfg = tiny_train_config()
    state = TrainerState.fresh(model, cfg)
    p = tmp_path / "m.ckpt"
    save_checkpoint(model, cfg, state, p)
    loaded, cfg2, state2 = load_checkpoint(p)
    assert cfg2 == cfg
    assert state2.epoch == state.epoch and state2.adam.t == state.adam.t
    for (na, ta), (nb, tb) in zip(model.parameters().items(),
                                  loaded.parameters().items()):
        assert na == nb
        assert np.array_equal(ta.data, tb.data)  # save quantized the live model
        assert ta.data.dtype == np.float64
    assert state2.rng.bit_generator.state == state.rng.bit_generator.state


def test_checkpoint_resume_matches_uninterrupted(dataset, tmp_path):
    cfg = tiny_train_config(epochs=4, checkpoint_every=2)
    model_a = build_model(TINY_ARCH, seed=7)
    fit(model_a, dataset, cfg, out_dir=tmp_path / "a")

    model_b, cfg_b, state_b = load_checkpoint(tmp_path / "a" / "checkpoint_epoch0002.ckpt")
    assert state_b.epoch == 2
    fit(model_b, dataset, cfg_b, out_dir=tmp_path / "b", state=state_b)

    for (na, ta), (nb, tb) in zip(model_a.parameters().items(),
                                  model_b.parameters().items()):
        assert np.array_equal(ta.data, tb.data), f"drift in {na}"
    assert ((tmp_path / "a" / "checkpoint_final.ckpt").read_bytes()
            == (tmp_path / "b" / "checkpoint_final.ckpt").read_bytes())


def test_checkpoint_version_error(tmp_path):
    model = build_model(TINY_ARCH, seed=8)
    cfg = tiny_train_config()
    p = tmp_path / "v.ckpt"
    save_checkpoint(model, cfg, TrainerState.fresh(model, cfg), p)
    raw = p.read_bytes()
    head, _, payload = raw.partition(b"\n")
    header = json.loads(head)
    header["format_version"] = 999
    p.write_bytes(json.dumps(header, sort_keys=True).encode() + b"\n" + payload)
    with pytest.raises(CheckpointVersionError):
        load_checkpoint(p)


def test_checkpoint_truncation_error(tmp_path):
    model = build_model(TINY_ARCH, seed=9)
    cfg = tiny_train_config()
    p = tmp_path / "t.ckpt"
    save_checkpoint(model, cfg, TrainerState.fresh(model, cfg), p)
    raw = p.read_bytes()
    p.write_bytes(raw[:len(raw) - 64])
    with pytest.raises(CheckpointTruncatedError):
        load_checkpoint(p)


def test_checkpoint_arch_mismatch(tmp_path):
    model = build_model(TINY_ARCH, seed=10)
    cfg = tiny_train_config()
    p = tmp_path / "a.ckpt"
    save_checkpoint(model, cfg, TrainerState.fresh(model, cfg), p)
    other = dataclasses.replace(TINY_ARCH, latent_dim_s=TINY_ARCH.latent_dim_s + 1)
    with pytest.raises(CheckpointConfigError):
        load_checkpoint(p, expect_arch=other)


def test_checkpoint_not_a_checkpoint(tmp_path):
    p = tmp_path / "junk.ckpt"
    p.write_bytes(b'{"kind": "something-else"}\n')
    with pytest.raises(CheckpointError):
        load_checkpoint(p)


def test_fit_epochs_zero_checkpoint_is_initialization(dataset, tmp_path):
    model = build_model(TINY_ARCH, seed=11)
    init = {n: t.data.astype("<f4") for n, t in model.parameters().items()}
    res = fit(model, dataset, tiny_train_config(epochs=0), out_dir=tmp_path / "z")
    loaded, _, state = load_checkpoint(res.checkpoint_path)
    assert state.epoch == 0
    for n, t in loaded.parameters().items():
        assert np.array_equal(t.data.astype("<f4"), init[n])
