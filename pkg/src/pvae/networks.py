"""Model architecture: modality pre-encoders, inference heads, and decoders.

Parameters live in three disjoint registries: ``theta`` (decoders), ``phi``
(joint inference from all modalities), ``psi`` (single-modality inference).
Pre-encoders are never shared between phi and psi. The same machinery covers
the single-modality baselines: with one modality the joint encoder *is* the
single-modality encoder, so psi stays empty and unimodal inference routes to
phi.

All model-level functions are batched: audio is [N, T, F] plus per-row
lengths, images are [N, 1, 28, 28], posteriors are [N, D] diagonal Gaussians.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Optional

import numpy as np

from . import autodiff as ad
from .autodiff import LstmParams, ShapeError, Tensor
from .gaussian import DiagGaussian

AUDIO = "audio"
IMAGE = "image"


@dataclass(frozen=True)
class ArchConfig:
    """Network sizes. Defaults are desk scale; ``paper_scale`` restores the
    published sizes (32-d latents, 512-cell LSTM, 512-d pre-encoder outputs)."""

    latent_dim_s: int = 16
    latent_dim_a: int = 16
    latent_dim_i: int = 16
    lstm_cells: int = 64
    preenc_out: int = 64
    image_side: int = 28
    audio_feat_dim: int = 8
    conv_channels: tuple[int, int] = (4, 8)
    deconv_channels: tuple[int, int] = (8, 1)
    fc_units: tuple[int, int] = (64, 7 * 7 * 16)

    def __post_init__(self):
        dims = (self.latent_dim_s, self.latent_dim_a, self.latent_dim_i,
                self.lstm_cells, self.preenc_out, self.audio_feat_dim)
        if any(d <= 0 for d in dims):
            raise ValueError(f"all sizes must be positive: {self}")
        if self.image_side != 28:
            raise ValueError("image geometry is fixed to the 28->14->7 halving chain")
        if self.fc_units[1] != 7 * 7 * 16:
            raise ValueError("second decoder fc layer must match the 7x7x16 interface")

    @staticmethod
    def paper_scale(audio_feat_dim: int = 80) -> "ArchConfig":
        return ArchConfig(latent_dim_s=32, latent_dim_a=32, latent_dim_i=32,
                          lstm_cells=512, preenc_out=512,
                          audio_feat_dim=audio_feat_dim, fc_units=(512, 7 * 7 * 16))

    def to_dict(self) -> dict:
        return {"latent_dim_s": self.latent_dim_s, "latent_dim_a": self.latent_dim_a,
                "latent_dim_i": self.latent_dim_i, "lstm_cells": self.lstm_cells,
                "preenc_out": self.preenc_out, "image_side": self.image_side,
                "audio_feat_dim": self.audio_feat_dim,
                "conv_channels": list(self.conv_channels),
                "deconv_channels": list(self.deconv_channels),
                "fc_units": list(self.fc_units)}

    @staticmethod
    def from_dict(d: dict) -> "ArchConfig":
        d = dict(d)
        for key in ("conv_channels", "deconv_channels", "fc_units"):
            if key in d:
                d[key] = tuple(d[key])
        return ArchConfig(**d)


class Registry:
    """Named, ordered collection of trainable leaf tensors."""

    def __init__(self, name: str):
        self.name = name
        self._params: dict[str, Tensor] = {}

    def add(self, name: str, array: np.ndarray) -> Tensor:
        if name in self._params:
            raise ValueError(f"duplicate parameter {self.name}/{name}")
        t = Tensor(np.asarray(array, dtype=np.float64), requires_grad=True)
        self._params[name] = t
        return t

    def items(self):
        return self._params.items()

    def __len__(self):
        return len(self._params)

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def tensors(self) -> list[Tensor]:
        return list(self._params.values())


def _uniform_init(rng: np.random.Generator, fan_in: int, shape) -> np.ndarray:
    bound = np.sqrt(1.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


class Linear:
    def __init__(self, reg: Registry, prefix: str, d_in: int, d_out: int,
                 rng: np.random.Generator):
        self.w = reg.add(f"{prefix}.w", _uniform_init(rng, d_in, (d_in, d_out)))
        self.b = reg.add(f"{prefix}.b", np.zeros(d_out))

    def __call__(self, x: Tensor) -> Tensor:
        return ad.matmul(x, self.w) + self.b


class GaussianHead:
    """Linear map to (mean, log_var) halves of one latent variable."""

    def __init__(self, reg: Registry, prefix: str, d_in: int, d_latent: int,
                 rng: np.random.Generator):
        self.d = d_latent
        self.lin = Linear(reg, prefix, d_in, 2 * d_latent, rng)

    def __call__(self, x: Tensor) -> DiagGaussian:
        out = self.lin(x)
        return DiagGaussian(out[:, :self.d], out[:, self.d:])


class LstmCell:
    """Single-layer LSTM with forget-gate bias +1 at init."""

    def __init__(self, reg: Registry, prefix: str, d_in: int, d_h: int,
                 rng: np.random.Generator):
        self.d_h = d_h
        b = np.zeros(4 * d_h)
        b[d_h:2 * d_h] = 1.0
        self.params = LstmParams(
            reg.add(f"{prefix}.w_x", _uniform_init(rng, d_in, (d_in, 4 * d_h))),
            reg.add(f"{prefix}.w_h", _uniform_init(rng, d_h, (d_h, 4 * d_h))),
            reg.add(f"{prefix}.b", b))


class ConvStack:
    """Image pre-encoder: two strided 4x4 convolutions then a dense summary."""

    def __init__(self, reg: Registry, prefix: str, arch: ArchConfig,
                 rng: np.random.Generator):
        c1, c2 = arch.conv_channels
        self.k1 = reg.add(f"{prefix}.conv1.k", _uniform_init(rng, 1 * 16, (c1, 1, 4, 4)))
        self.b1 = reg.add(f"{prefix}.conv1.b", np.zeros(c1))
        self.k2 = reg.add(f"{prefix}.conv2.k", _uniform_init(rng, c1 * 16, (c2, c1, 4, 4)))
        self.b2 = reg.add(f"{prefix}.conv2.b", np.zeros(c2))
        flat = c2 * (arch.image_side // 4) ** 2
        self.fc = Linear(reg, f"{prefix}.fc", flat, arch.preenc_out, rng)
        self._flat = flat

    def __call__(self, image: Tensor) -> Tensor:
        h = ad.relu(ad.conv2d(image, self.k1) + self.b1.reshape((1, -1, 1, 1)))
        h = ad.relu(ad.conv2d(h, self.k2) + self.b2.reshape((1, -1, 1, 1)))
        return ad.relu(self.fc(h.reshape((h.shape[0], self._flat))))


class AudioPreEncoder:
    """LSTM over frames; the final hidden state (per true length) is the summary."""

    def __init__(self, reg: Registry, prefix: str, arch: ArchConfig,
                 rng: np.random.Generator):
        self.cell = LstmCell(reg, prefix, arch.audio_feat_dim, arch.lstm_cells, rng)

    def __call__(self, audio: Tensor, mask: np.ndarray) -> Tensor:
        n, t_max, f = audio.shape
        d_h = self.cell.d_h
        params = self.cell.params
        if audio.requires_grad:
            xproj = ad.matmul(audio.reshape((n * t_max, f)), params.w_x)
            xproj = xproj.reshape((n, t_max, 4 * d_h))
            step_proj = lambda t: xproj[:, t]
        else:
            # constant input: per-step matmul on a plain frame slice keeps the
            # backward small (grad accumulates into w_x, never into a padded
            # [N, T, 4H] buffer)
            frames = audio.data
            step_proj = lambda t: ad.matmul(Tensor(frames[:, t]), params.w_x)
        hc = Tensor(np.zeros((n, 2 * d_h)))
        for t in range(t_max):
            col = mask[:, t:t + 1]
            hc = ad.lstm_cell_step(step_proj(t), hc, params,
                                   mask_col=None if col.all() else col)
        return hc[:, :d_h]


class AudioDecoder:
    """LSTM fed the same latent pair at every step; shared per-step frame head."""

    def __init__(self, reg: Registry, prefix: str, arch: ArchConfig,
                 rng: np.random.Generator):
        d_z = arch.latent_dim_s + arch.latent_dim_a
        self.cell = LstmCell(reg, f"{prefix}.lstm", d_z, arch.lstm_cells, rng)
        self.out = Linear(reg, f"{prefix}.out", arch.lstm_cells, arch.audio_feat_dim, rng)

    def __call__(self, z: Tensor, num_frames: int) -> Tensor:
        n = z.shape[0]
        d_h = self.cell.d_h
        xproj = ad.matmul(z, self.cell.params.w_x)  # latents repeat every step
        hc = Tensor(np.zeros((n, 2 * d_h)))
        states = []
        for _ in range(num_frames):
            hc = ad.lstm_cell_step(xproj, hc, self.cell.params)
            states.append(hc[:, :d_h].reshape((n, 1, d_h)))
        hidden = ad.concat(states, axis=1).reshape((n * num_frames, d_h))
        return self.out(hidden).reshape((n, num_frames, -1))


class ImageDecoder:
    """Dense expansion to the 7x7x16 interface, then two 2x upsampling stages."""

    def __init__(self, reg: Registry, prefix: str, arch: ArchConfig,
                 rng: np.random.Generator):
        d_z = arch.latent_dim_s + arch.latent_dim_i
        self.fc1 = Linear(reg, f"{prefix}.fc1", d_z, arch.fc_units[0], rng)
        self.fc2 = Linear(reg, f"{prefix}.fc2", arch.fc_units[0], arch.fc_units[1], rng)
        d1, d2 = arch.deconv_channels
        self.k1 = reg.add(f"{prefix}.deconv1.k", _uniform_init(rng, 16 * 16, (16, d1, 4, 4)))
        self.b1 = reg.add(f"{prefix}.deconv1.b", np.zeros(d1))
        self.k2 = reg.add(f"{prefix}.deconv2.k", _uniform_init(rng, d1 * 16, (d1, d2, 4, 4)))
        self.b2 = reg.add(f"{prefix}.deconv2.b", np.zeros(d2))

    def __call__(self, z: Tensor) -> Tensor:
        n = z.shape[0]
        h = ad.relu(self.fc1(z))
        h = ad.relu(self.fc2(h))
        h = h.reshape((n, 16, 7, 7))
        h = ad.relu(ad.conv2d_transposed(h, self.k1) + self.b1.reshape((1, -1, 1, 1)))
        return ad.conv2d_transposed(h, self.k2) + self.b2.reshape((1, -1, 1, 1))


@dataclass
class PvaeModel:
    arch: ArchConfig
    modalities: tuple[str, ...]
    theta: Registry
    phi: Registry
    psi: Registry
    joint_pre: dict = field(default_factory=dict)     # modality -> pre-encoder (phi)
    joint_heads: dict = field(default_factory=dict)   # latent key -> head (phi)
    uni_pre: dict = field(default_factory=dict)       # modality -> pre-encoder (psi)
    uni_heads: dict = field(default_factory=dict)     # modality -> {latent: head} (psi)
    decoders: dict = field(default_factory=dict)      # modality -> decoder (theta)

    def style_key(self, modality: str) -> str:
        return "a" if modality == AUDIO else "i"

    def style_dim(self, modality: str) -> int:
        return self.arch.latent_dim_a if modality == AUDIO else self.arch.latent_dim_i

    @property
    def multimodal(self) -> bool:
        return len(self.modalities) > 1

    def parameters(self) -> dict[str, Tensor]:
        out = {}
        for reg in (self.theta, self.phi, self.psi):
            for name, t in reg.items():
                out[f"{reg.name}/{name}"] = t
        return out

    def zero_grads(self) -> None:
        for t in self.parameters().values():
            t.zero_grad()


def build_model(arch: ArchConfig, modalities: Iterable[str] = (AUDIO, IMAGE),
                seed: int = 0) -> PvaeModel:
    """Construct a model with freshly initialized parameters.

    ``modalities`` of length one yields the corresponding single-modality
    baseline (same encoder/decoder stacks, latents z_s plus one style z).
    """
    modalities = tuple(modalities)
    if not modalities or any(m not in (AUDIO, IMAGE) for m in modalities):
        raise ValueError(f"modalities must be drawn from (audio, image), got {modalities}")
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed])))
    theta, phi, psi = Registry("theta"), Registry("phi"), Registry("psi")
    model = PvaeModel(arch=arch, modalities=modalities, theta=theta, phi=phi, psi=psi)

    summary_dim = 0
    for m in modalities:
        if m == AUDIO:
            model.joint_pre[m] = AudioPreEncoder(phi, "audio_pre", arch, rng)
            summary_dim += arch.lstm_cells
        else:
            model.joint_pre[m] = ConvStack(phi, "image_pre", arch, rng)
            summary_dim += arch.preenc_out

    model.joint_heads["s"] = GaussianHead(phi, "head_s", summary_dim, arch.latent_dim_s, rng)
    for m in modalities:
        key = model.style_key(m)
        model.joint_heads[key] = GaussianHead(phi, f"head_{key}", summary_dim,
                                              model.style_dim(m), rng)

    if model.multimodal:
        for m in modalities:
            key = model.style_key(m)
            if m == AUDIO:
                model.uni_pre[m] = AudioPreEncoder(psi, "audio_pre", arch, rng)
                d = arch.lstm_cells
            else:
                model.uni_pre[m] = ConvStack(psi, "image_pre", arch, rng)
                d = arch.preenc_out
            model.uni_heads[m] = {
                "s": GaussianHead(psi, f"{m}_head_s", d, arch.latent_dim_s, rng),
                key: GaussianHead(psi, f"{m}_head_{key}", d, model.style_dim(m), rng),
            }

    for m in modalities:
        if m == AUDIO:
            model.decoders[m] = AudioDecoder(theta, "audio_dec", arch, rng)
        else:
            model.decoders[m] = ImageDecoder(theta, "image_dec", arch, rng)
    return model


# ------------------------------------------------------------- input checks

def _check_audio(model: PvaeModel, audio, mask):
    audio = audio if isinstance(audio, Tensor) else Tensor(audio)
    if audio.ndim != 3 or audio.shape[2] != model.arch.audio_feat_dim:
        raise ShapeError(f"audio must be [N, T, {model.arch.audio_feat_dim}], "
                         f"got {audio.shape}")
    if audio.shape[1] < 1:
        raise ShapeError("audio sequence is empty")
    if mask is None:
        mask = np.ones(audio.shape[:2])
    return audio, np.asarray(mask, dtype=np.float64)


def _check_image(model: PvaeModel, image):
    image = image if isinstance(image, Tensor) else Tensor(image)
    side = model.arch.image_side
    if image.ndim != 4 or image.shape[1:] != (1, side, side):
        raise ShapeError(f"image must be [N, 1, {side}, {side}], got {image.shape}")
    return image


# ---------------------------------------------------------------- inference

def infer_joint(model: PvaeModel, audio=None, image=None,
                mask=None) -> dict[str, DiagGaussian]:
    """Posteriors over all latents from the joint (phi) encoder.

    Returns a dict keyed by latent: "s" plus "a"/"i" for present modalities.
    """
    summaries = []
    for m in model.modalities:
        if m == AUDIO:
            if audio is None:
                raise ValueError("model expects audio input")
            a, msk = _check_audio(model, audio, mask)
            summaries.append(model.joint_pre[m](a, msk))
        else:
            if image is None:
                raise ValueError("model expects image input")
            summaries.append(model.joint_pre[m](_check_image(model, image)))
    summary = summaries[0] if len(summaries) == 1 else ad.concat(summaries, axis=-1)
    return {key: head(summary) for key, head in model.joint_heads.items()}


def infer_multimodal(model: PvaeModel, audio, image,
                     mask=None) -> tuple[DiagGaussian, DiagGaussian, DiagGaussian]:
    """(q_zs, q_za, q_zi) from a paired audio/image batch."""
    post = infer_joint(model, audio=audio, image=image, mask=mask)
    return post["s"], post["a"], post["i"]


def infer_unimodal(model: PvaeModel, modality: str, x,
                   mask=None) -> dict[str, DiagGaussian]:
    """Posteriors over z_s and the modality's own style latent only.

    The other modality's style latent has no inferable posterior from a
    single-modality sample (its exact posterior is the prior), so no head
    exists for it. Single-modality models route to the joint encoder, which
    coincides with the unimodal one when M=1.
    """
    if modality not in model.modalities:
        raise ValueError(f"model has no {modality} modality")
    if not model.multimodal:
        if modality == AUDIO:
            return infer_joint(model, audio=x, mask=mask)
        return infer_joint(model, image=x)
    if modality == AUDIO:
        a, msk = _check_audio(model, x, mask)
        summary = model.uni_pre[AUDIO](a, msk)
    else:
        summary = model.uni_pre[IMAGE](_check_image(model, x))
    return {key: head(summary) for key, head in model.uni_heads[modality].items()}


def infer_unimodal_audio(model: PvaeModel, audio,
                         mask=None) -> tuple[DiagGaussian, DiagGaussian]:
    """(r_zs, r_za) from audio alone."""
    post = infer_unimodal(model, AUDIO, audio, mask=mask)
    return post["s"], post["a"]


def infer_unimodal_image(model: PvaeModel, image) -> tuple[DiagGaussian, DiagGaussian]:
    """(r_zs, r_zi) from an image alone."""
    post = infer_unimodal(model, IMAGE, image)
    return post["s"], post["i"]


# ----------------------------------------------------------------- decoding

def decode_audio(model: PvaeModel, z_a: Tensor, z_s: Tensor, num_frames: int) -> Tensor:
    """Mean frame sequence [N, T, F] for the requested rollout length."""
    if num_frames < 1:
        raise ShapeError("num_frames must be >= 1")
    z_a = z_a if isinstance(z_a, Tensor) else Tensor(z_a)
    z_s = z_s if isinstance(z_s, Tensor) else Tensor(z_s)
    if z_s.shape[1] != model.arch.latent_dim_s or z_a.shape[1] != model.arch.latent_dim_a:
        raise ShapeError(f"latent dims {z_s.shape}/{z_a.shape} do not match "
                         f"({model.arch.latent_dim_s}, {model.arch.latent_dim_a})")
    return model.decoders[AUDIO](ad.concat([z_s, z_a], axis=-1), num_frames)


def decode_image(model: PvaeModel, z_i: Tensor, z_s: Tensor) -> Tensor:
    """Mean image [N, 1, 28, 28]."""
    z_i = z_i if isinstance(z_i, Tensor) else Tensor(z_i)
    z_s = z_s if isinstance(z_s, Tensor) else Tensor(z_s)
    if z_s.shape[1] != model.arch.latent_dim_s or z_i.shape[1] != model.arch.latent_dim_i:
        raise ShapeError(f"latent dims {z_s.shape}/{z_i.shape} do not match "
                         f"({model.arch.latent_dim_s}, {model.arch.latent_dim_i})")
    return model.decoders[IMAGE](ad.concat([z_s, z_i], axis=-1))


def num_frames_policy(lengths: np.ndarray | None = None,
                      requested: int | None = None,
                      style_reference_length: int | None = None) -> int:
    """Rollout length: ground-truth length at training time, the caller's
    request or the style reference's length at generation time."""
    if lengths is not None:
        return int(np.max(lengths))
    if requested is not None:
        return int(requested)
    if style_reference_length is not None:
        return int(style_reference_length)
    raise ValueError("no frame-count source provided")
