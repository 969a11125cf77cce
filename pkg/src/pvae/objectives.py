"""Training objectives: variational lower bound, joint-vs-unimodal coherence,
and the cross-modality semantic contrastive hinge, combined with weights.

Conventions
-----------
* The combined objective is *maximized*; the trainer descends on its negation.
* Coherence and the contrastive term are non-positive by construction and hit
  zero exactly at their optima.
* All batch reductions are means, so the weights are batch-size invariant.
* The expectation in the bound uses one reparameterized sample per latent per
  call; the caller supplies the standard-normal draws for determinism.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .data import MultimodalBatch
from .gaussian import (LOG_2PI, DiagGaussian, kl_divergence, kl_to_standard,
                       rbf_kernel, sample_reparam)
from .networks import (AUDIO, IMAGE, PvaeModel, decode_audio, decode_image,
                       infer_joint, infer_unimodal)


class MissingModalityError(ValueError):
    """Batch lacks a modality the model requires; use the unimodal paths."""


@dataclass(frozen=True)
class ObjectiveWeights:
    alpha_ch: float = 0.1
    alpha_cm: float = 10.0
    margin_t: float = 0.5

    def __post_init__(self):
        if not (np.isfinite(self.alpha_ch) and self.alpha_ch >= 0):
            raise ValueError(f"alpha_ch must be finite and >= 0, got {self.alpha_ch}")
        if not (np.isfinite(self.alpha_cm) and self.alpha_cm >= 0):
            raise ValueError(f"alpha_cm must be finite and >= 0, got {self.alpha_cm}")

    def to_dict(self) -> dict:
        return {"alpha_ch": self.alpha_ch, "alpha_cm": self.alpha_cm,
                "margin_t": self.margin_t}

    @staticmethod
    def from_dict(d: dict) -> "ObjectiveWeights":
        return ObjectiveWeights(**d)


@dataclass
class ObjectiveBreakdown:
    """Per-term values (batch means) plus the differentiable total."""

    recon_audio: float = 0.0
    recon_image: float = 0.0
    kl_za: float = 0.0
    kl_zi: float = 0.0
    kl_zs: float = 0.0
    coherence: float = 0.0
    contrastive: float = 0.0
    total: float = 0.0
    node: Optional[Tensor] = field(default=None, repr=False, compare=False)

    @property
    def elbo(self) -> float:
        return (self.recon_audio + self.recon_image
                - self.kl_za - self.kl_zi - self.kl_zs)

    CSV_FIELDS = ("recon_audio", "recon_image", "kl_za", "kl_zi", "kl_zs",
                  "coherence", "contrastive", "total")

    def as_row(self) -> list[float]:
        return [getattr(self, f) for f in self.CSV_FIELDS]


def draw_noise(rng: np.random.Generator, model: PvaeModel, n: int) -> dict[str, np.ndarray]:
    """One standard-normal draw per latent variable per sample, in a fixed
    key order so consumption of the RNG stream is reproducible."""
    noise = {"s": rng.standard_normal((n, model.arch.latent_dim_s))}
    for m in model.modalities:
        key = model.style_key(m)
        noise[key] = rng.standard_normal((n, model.style_dim(m)))
    return noise


def _require(batch: MultimodalBatch, model: PvaeModel) -> None:
    if AUDIO in model.modalities and batch.audio is None:
        raise MissingModalityError(
            "batch has no audio; for single-modality data use the unimodal "
            "inference path instead of the joint bound")
    if IMAGE in model.modalities and batch.image is None:
        raise MissingModalityError(
            "batch has no image; for single-modality data use the unimodal "
            "inference path instead of the joint bound")


def _masked_audio_logprob(pred: Tensor, batch: MultimodalBatch) -> Tensor:
    """Per-sample unit-variance Gaussian log-likelihood over valid frames."""
    diff = ad.sub(Tensor(batch.audio), pred)
    sq = ad.mul(diff, diff)
    masked = ad.mul(sq, Tensor(batch.audio_mask[:, :, None]))
    quad = ad.tsum(ad.tsum(masked, axis=-1), axis=-1)
    const = batch.audio_lengths * batch.audio.shape[2] * LOG_2PI
    return ad.mul(ad.add(quad, Tensor(const)), -0.5)


def _image_logprob(pred: Tensor, batch: MultimodalBatch) -> Tensor:
    n = pred.shape[0]
    d = int(np.prod(pred.shape[1:]))
    diff = ad.sub(Tensor(batch.image), pred).reshape((n, d))
    quad = ad.tsum(ad.mul(diff, diff), axis=-1)
    return (quad + d * LOG_2PI) * -0.5


def _elbo_terms(model: PvaeModel, batch: MultimodalBatch,
                q: dict[str, DiagGaussian], noise: dict[str, np.ndarray]) -> dict:
    z = {key: sample_reparam(q[key], noise[key]) for key in q}
    terms: dict[str, Tensor] = {}
    if AUDIO in model.modalities:
        t_max = batch.audio.shape[1]
        pred = decode_audio(model, z["a"], z["s"], num_frames=t_max)
        terms["recon_audio"] = ad.tmean(_masked_audio_logprob(pred, batch))
        terms["kl_za"] = ad.tmean(kl_to_standard(q["a"]))
    if IMAGE in model.modalities:
        pred = decode_image(model, z["i"], z["s"])
        terms["recon_image"] = ad.tmean(_image_logprob(pred, batch))
        terms["kl_zi"] = ad.tmean(kl_to_standard(q["i"]))
    terms["kl_zs"] = ad.tmean(kl_to_standard(q["s"]))
    return terms


def _combine_elbo(terms: dict) -> Tensor:
    zero = Tensor(0.0)
    node = ad.add(terms.get("recon_audio", zero), terms.get("recon_image", zero))
    node = ad.sub(node, terms.get("kl_za", zero))
    node = ad.sub(node, terms.get("kl_zi", zero))
    return ad.sub(node, terms["kl_zs"])


def elbo(model: PvaeModel, batch: MultimodalBatch,
         noise: dict[str, np.ndarray]) -> ObjectiveBreakdown:
    """Single-sample estimate of the variational lower bound, batch mean.

    Per sample: reparameterized draws from every joint posterior, unit-variance
    Gaussian reconstruction terms per modality, closed-form KL terms against
    the standard-normal priors.
    """
    _require(batch, model)
    q = infer_joint(model, audio=batch.audio, image=batch.image, mask=batch.audio_mask)
    terms = _elbo_terms(model, batch, q, noise)
    node = _combine_elbo(terms)
    bd = ObjectiveBreakdown(node=node, total=node.item())
    for name in ("recon_audio", "recon_image", "kl_za", "kl_zi", "kl_zs"):
        if name in terms:
            setattr(bd, name, terms[name].item())
    return bd


def _coherence_node(model: PvaeModel, q: dict[str, DiagGaussian],
                    r: dict[str, dict[str, DiagGaussian]]) -> Tensor:
    """-sum_m [ KL(q_zm || r_zm) + KL(q_zs || r_zs from modality m) ].

    This is the joint KL between the factorized joint posterior over
    (z_m, z_s) and the factorized unimodal posterior, decomposed exactly.
    """
    acc = None
    for m in model.modalities:
        key = model.style_key(m)
        part = ad.add(ad.tmean(kl_divergence(q[key], r[m][key])),
                      ad.tmean(kl_divergence(q["s"], r[m]["s"])))
        acc = part if acc is None else ad.add(acc, part)
    return ad.neg(acc)


def coherence(model: PvaeModel, batch: MultimodalBatch) -> Tensor:
    """Non-positive alignment term between joint and unimodal posteriors.

    Zero iff the unimodal posteriors match the joint ones; gradients reach
    both phi (through q) and psi (through r). Structurally zero for
    single-modality models, where the two inference paths coincide.
    """
    _require(batch, model)
    if not model.multimodal:
        return Tensor(0.0)
    q = infer_joint(model, audio=batch.audio, image=batch.image, mask=batch.audio_mask)
    r = {m: infer_unimodal(model, m, batch.audio if m == AUDIO else batch.image,
                           mask=batch.audio_mask if m == AUDIO else None)
         for m in model.modalities}
    return _coherence_node(model, q, r)


def _unimodal_semantic_means(model: PvaeModel, batch: MultimodalBatch) -> dict[str, Tensor]:
    means = {}
    for m in model.modalities:
        x = batch.audio if m == AUDIO else batch.image
        mask = batch.audio_mask if m == AUDIO else None
        means[m] = infer_unimodal(model, m, x, mask=mask)["s"].mean
    return means


def _contrastive_node(mu: dict[str, Tensor], mu_neg: dict[str, Tensor],
                      margin: float) -> Tensor:
    """-(1/M) sum over ordered modality pairs of the hinge on kernel scores."""
    modalities = sorted(mu)
    m_count = len(modalities)
    acc = None
    for anchor in modalities:
        for other in modalities:
            if anchor == other:
                continue
            pos = rbf_kernel(mu[anchor], mu[other])
            neg = rbf_kernel(mu[anchor], mu_neg[other])
            hinge = ad.relu(ad.add(ad.sub(Tensor(np.full(pos.shape, margin)), pos), neg))
            term = ad.tmean(hinge)
            acc = term if acc is None else ad.add(acc, term)
    return ad.mul(ad.neg(acc), 1.0 / m_count)


def contrastive(model: PvaeModel, batch: MultimodalBatch,
                negatives: MultimodalBatch,
                margin: float = ObjectiveWeights().margin_t) -> Tensor:
    """Hinge loss on unimodal semantic-posterior-mean similarities.

    Pulls the two modalities' z_s means of the same sample together and pushes
    them away from a negative sample's means; only psi receives gradients
    because the term is built from unimodal means alone. Zero for
    single-modality models (no cross-modal pairs).
    """
    _require(batch, model)
    if not model.multimodal:
        return Tensor(0.0)
    if negatives.size != batch.size:
        raise ValueError(f"negatives batch size {negatives.size} != anchors {batch.size}")
    mu = _unimodal_semantic_means(model, batch)
    mu_neg = _unimodal_semantic_means(model, negatives)
    return _contrastive_node(mu, mu_neg, margin)


def total_objective(model: PvaeModel, batch: MultimodalBatch,
                    negatives: Optional[MultimodalBatch],
                    weights: ObjectiveWeights,
                    noise: dict[str, np.ndarray]) -> ObjectiveBreakdown:
    """Weighted combination (maximized): bound + a_ch * CH + a_cm * CM.

    Terms with zero weight are skipped entirely; their breakdown entries stay
    zero. Joint posteriors are computed once and shared between the bound and
    the coherence term.
    """
    _require(batch, model)
    q = infer_joint(model, audio=batch.audio, image=batch.image, mask=batch.audio_mask)
    terms = _elbo_terms(model, batch, q, noise)
    node = _combine_elbo(terms)
    bd = ObjectiveBreakdown()
    for name in ("recon_audio", "recon_image", "kl_za", "kl_zi", "kl_zs"):
        if name in terms:
            setattr(bd, name, terms[name].item())

    use_ch = weights.alpha_ch > 0 and model.multimodal
    use_cm = weights.alpha_cm > 0 and model.multimodal
    r = None
    if use_ch:
        r = {m: infer_unimodal(model, m, batch.audio if m == AUDIO else batch.image,
                               mask=batch.audio_mask if m == AUDIO else None)
             for m in model.modalities}
        ch_node = _coherence_node(model, q, r)
        bd.coherence = ch_node.item()
        node = ad.add(node, ad.mul(ch_node, weights.alpha_ch))
    if use_cm:
        if negatives is None:
            raise ValueError("contrastive weight is positive but no negatives given")
        if r is not None:
            mu = {m: r[m]["s"].mean for m in model.modalities}
        else:
            mu = _unimodal_semantic_means(model, batch)
        mu_neg = _unimodal_semantic_means(model, negatives)
        cm_node = _contrastive_node(mu, mu_neg, weights.margin_t)
        bd.contrastive = cm_node.item()
        node = ad.add(node, ad.mul(cm_node, weights.alpha_cm))

    bd.node = node
    bd.total = node.item()
    return bd
