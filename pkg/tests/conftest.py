import numpy as np
import pytest

from pvae.data import MultimodalBatch
from pvae.gaussian import LOG_2PI
from pvae.networks import AUDIO, IMAGE, ArchConfig, build_model, decode_audio, decode_image, infer_joint

TINY_ARCH = ArchConfig(latent_dim_s=3, latent_dim_a=2, latent_dim_i=2,
                       lstm_cells=6, preenc_out=8, audio_feat_dim=4,
                       fc_units=(12, 7 * 7 * 16))


def make_tiny_model(seed=0, modalities=(AUDIO, IMAGE)):
    return build_model(TINY_ARCH, modalities=modalities, seed=seed)


def make_tiny_batch(rng, n=2, t=5, arch=TINY_ARCH, ragged=True):
    lengths = np.full(n, t, dtype=np.int64)
    if ragged and n > 1:
        lengths[0] = max(1, t - 2)
    audio = np.zeros((n, t, arch.audio_feat_dim))
    mask = np.zeros((n, t))
    for i, L in enumerate(lengths):
        audio[i, :L] = rng.uniform(-1.0, 1.0, size=(L, arch.audio_feat_dim))
        mask[i, :L] = 1.0
    image = rng.uniform(0.0, 1.0, size=(n, 1, 28, 28))
    ids = rng.integers(0, 10, size=n)
    return MultimodalBatch(audio=audio, audio_lengths=lengths, audio_mask=mask,
                           image=image, identity=ids,
                           audio_indices=np.arange(n), image_indices=np.arange(n))


def gaussian_logpdf(x, mean, log_var):
    """Plain numpy diagonal-Gaussian log density, summed over the last axis."""
    return -0.5 * np.sum((x - mean) ** 2 * np.exp(-log_var) + log_var + LOG_2PI,
                         axis=-1)


def iw_bound_estimate(model, batch, rng, k=64):
    """Importance-weighted bound oracle: log mean_k p(x, z_k) / q(z_k | x).

    Forward-only; independent of the training-path estimator it checks.
    Returns the batch mean of per-sample log(1/K sum_k w_k).
    """
    q = infer_joint(model, audio=batch.audio, image=batch.image,
                    mask=batch.audio_mask)
    n = batch.size
    log_w = np.zeros((k, n))
    for j in range(k):
        z = {}
        for key, dist in q.items():
            mean, lv = dist.mean.data, dist.log_var.data
            eps = rng.standard_normal(mean.shape)
            zval = mean + np.exp(0.5 * lv) * eps
            z[key] = zval
            log_w[j] += gaussian_logpdf(zval, 0.0, np.zeros_like(zval))
            log_w[j] -= gaussian_logpdf(zval, mean, lv)
        if AUDIO in model.modalities:
            pred = decode_audio(model, z["a"], z["s"],
                                num_frames=batch.audio.shape[1]).data
            sq = (batch.audio - pred) ** 2 * batch.audio_mask[:, :, None]
            log_w[j] += -0.5 * (sq.sum(axis=(1, 2))
                                + batch.audio_lengths * batch.audio.shape[2] * LOG_2PI)
        if IMAGE in model.modalities:
            pred = decode_image(model, z["i"], z["s"]).data
            d = pred[0].size
            log_w[j] += -0.5 * (((batch.image - pred) ** 2).reshape(n, -1).sum(axis=1)
                                + d * LOG_2PI)
    m = log_w.max(axis=0)
    return float(np.mean(m + np.log(np.mean(np.exp(log_w - m), axis=0))))
