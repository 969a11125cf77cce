"""Synthetic parallel spoken/written digit data with known ground-truth factors.

Each modality pool is generated independently: written digits are styled
renders of a fixed 5x7 bitmap font, spoken digits are noisy two-formant
trajectories over a small filter-bank-like channel grid. Digit identity is the
shared factor; every style factor is drawn independently of identity, so the
pools can be re-paired by identity each epoch.

Also provides an IDX-format reader for optional real handwritten digits and a
template-matching identity classifier used as an independent scoring oracle.
"""

from __future__ import annotations

import dataclasses
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

DATASET_FORMAT_VERSION = 1

IDX_IMAGE_MAGIC = 0x00000803
IDX_LABEL_MAGIC = 0x00000801


class IdxFormatError(ValueError):
    """Base for malformed IDX files."""


class IdxMagicError(IdxFormatError):
    pass


class IdxTruncatedError(IdxFormatError):
    pass


class IdxDimensionError(IdxFormatError):
    pass


class IdxLabelRangeError(IdxFormatError):
    pass


class DatasetFormatError(ValueError):
    """Malformed native dataset file."""


# 5x7 bitmap font, row-major, one string per row.
_FONT = {
    0: ["01110", "10001", "10011", "10101", "11001", "10001", "01110"],
    1: ["00100", "01100", "00100", "00100", "00100", "00100", "01110"],
    2: ["01110", "10001", "00001", "00010", "00100", "01000", "11111"],
    3: ["11111", "00010", "00100", "00010", "00001", "10001", "01110"],
    4: ["00010", "00110", "01010", "10010", "11111", "00010", "00010"],
    5: ["11111", "10000", "11110", "00001", "00001", "10001", "01110"],
    6: ["00110", "01000", "10000", "11110", "10001", "10001", "01110"],
    7: ["11111", "00001", "00010", "00100", "01000", "01000", "01000"],
    8: ["01110", "10001", "10001", "01110", "10001", "10001", "01110"],
    9: ["01110", "10001", "10001", "01111", "00001", "00010", "01100"],
}

# Two formant tracks per digit: (f1_start, f1_end, f2_start, f2_end) on the
# channel axis. Chosen pairwise distinct; separation is verified by the
# template-classifier accuracy tests.
_FORMANTS = {
    0: (1.0, 1.0, 6.0, 6.0),
    1: (1.0, 4.0, 6.0, 6.0),
    2: (4.0, 1.0, 6.0, 6.0),
    3: (1.0, 1.0, 6.0, 3.0),
    4: (1.0, 1.0, 3.0, 6.0),
    5: (1.0, 4.0, 6.0, 3.0),
    6: (4.0, 1.0, 3.0, 6.0),
    7: (2.5, 2.5, 4.5, 4.5),
    8: (1.0, 4.0, 3.0, 6.0),
    9: (4.0, 1.0, 6.0, 3.0),
}

_FORMANT_WIDTH = 0.5
_SECOND_FORMANT_GAIN = 0.85
IMAGE_SIDE = 28
_GLYPH_SIDE = 20


@dataclass(frozen=True)
class ImageStyle:
    tilt: float = 0.0        # shear factor
    thickness: int = 1       # dilation iterations on the glyph
    scale: float = 1.0
    dx: float = 0.0          # horizontal offset in pixels
    dy: float = 0.0
    intensity: float = 1.0


@dataclass(frozen=True)
class AudioStyle:
    duration: int = 40       # total frames T
    amplitude: float = 1.0
    pitch: int = 0           # integer channel shift of both formants
    onset: int = 0           # leading near-silent frames


@dataclass(frozen=True)
class GeneratorConfig:
    identities: int = 10
    n_train: int = 2000
    n_test: int = 500
    audio_channels: int = 8
    t_min: int = 20
    t_max: int = 60
    image_noise: float = 0.02
    audio_noise: float = 0.05

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @staticmethod
    def from_dict(d: dict) -> "GeneratorConfig":
        known = {f.name for f in dataclasses.fields(GeneratorConfig)}
        unknown = set(d) - known
        if unknown:
            raise DatasetFormatError(f"unknown generator config keys: {sorted(unknown)}")
        return GeneratorConfig(**d)


@dataclass
class MultimodalSample:
    image: np.ndarray        # [28, 28] in [0, 1]
    audio: np.ndarray        # [T, F]
    identity: int
    image_style: ImageStyle
    audio_style: AudioStyle


@dataclass
class MultimodalBatch:
    """Padded, batched view over paired samples, ready for the networks."""

    audio: np.ndarray          # [N, T_max, F] zero-padded float64
    audio_lengths: np.ndarray  # [N] int
    audio_mask: np.ndarray     # [N, T_max] float64, 1 on valid frames
    image: np.ndarray          # [N, 1, 28, 28] float64
    identity: np.ndarray       # [N] int
    audio_indices: np.ndarray  # provenance into the dataset pools
    image_indices: np.ndarray

    @property
    def size(self) -> int:
        return len(self.identity)


@dataclass
class Dataset:
    split: str
    seed: int
    config: GeneratorConfig
    images: np.ndarray             # [N_img, 28, 28] float32
    image_identities: np.ndarray   # [N_img] int64
    image_styles: list[ImageStyle]
    audios: list[np.ndarray]       # N_aud arrays [T_i, F] float32
    audio_identities: np.ndarray   # [N_aud] int64
    audio_styles: list[AudioStyle]

    @property
    def n_images(self) -> int:
        return len(self.images)

    @property
    def n_audios(self) -> int:
        return len(self.audios)

    def images_by_identity(self) -> dict[int, np.ndarray]:
        return {d: np.flatnonzero(self.image_identities == d)
                for d in range(self.config.identities)}


# ------------------------------------------------------------------ glyphs

def _glyph_bitmap(identity: int) -> np.ndarray:
    rows = _FONT[identity]
    return np.array([[float(ch) for ch in row] for row in rows])


def _upscale_glyph(bitmap: np.ndarray) -> np.ndarray:
    """Nearest-neighbour upscale of the 5x7 bitmap onto a 20x20 canvas."""
    out = np.zeros((_GLYPH_SIDE, _GLYPH_SIDE))
    h, w = bitmap.shape
    for r in range(_GLYPH_SIDE):
        for c in range(_GLYPH_SIDE):
            out[r, c] = bitmap[min(h - 1, r * h // _GLYPH_SIDE),
                               min(w - 1, c * w // _GLYPH_SIDE)]
    return out


def _dilate(img: np.ndarray, iterations: int) -> np.ndarray:
    out = img.copy()
    for _ in range(iterations):
        grown = out.copy()
        grown[1:, :] = np.maximum(grown[1:, :], out[:-1, :])
        grown[:-1, :] = np.maximum(grown[:-1, :], out[1:, :])
        grown[:, 1:] = np.maximum(grown[:, 1:], out[:, :-1])
        grown[:, :-1] = np.maximum(grown[:, :-1], out[:, 1:])
        out = grown
    return out


def _bilinear(img: np.ndarray, y: np.ndarray, x: np.ndarray) -> np.ndarray:
    """Sample img at float coords, zero outside."""
    h, w = img.shape
    y0 = np.floor(y).astype(int)
    x0 = np.floor(x).astype(int)
    fy, fx = y - y0, x - x0
    val = np.zeros_like(y)
    for oy, wy in ((0, (1 - fy)), (1, fy)):
        for ox, wx in ((0, (1 - fx)), (1, fx)):
            yy, xx = y0 + oy, x0 + ox
            inside = (yy >= 0) & (yy < h) & (xx >= 0) & (xx < w)
            val[inside] += (wy * wx)[inside] * img[yy[inside], xx[inside]]
    return val


def render_glyph(identity: int, style: ImageStyle, seed: int) -> np.ndarray:
    """Deterministic styled render of a digit onto a 28x28 canvas in [0, 1]."""
    if not 0 <= identity <= 9:
        raise ValueError(f"identity must be in 0..9, got {identity}")
    glyph = _dilate(_upscale_glyph(_glyph_bitmap(identity)), style.thickness)

    r, c = np.mgrid[0:IMAGE_SIDE, 0:IMAGE_SIDE]
    yr = r - (IMAGE_SIDE - 1) / 2.0 - style.dy
    xc = c - (IMAGE_SIDE - 1) / 2.0 - style.dx
    u = yr / style.scale
    v = xc / style.scale + style.tilt * u
    img = _bilinear(glyph, u + (_GLYPH_SIDE - 1) / 2.0, v + (_GLYPH_SIDE - 1) / 2.0)
    img *= style.intensity

    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, identity])))
    img += rng.normal(scale=0.02, size=img.shape)
    return np.clip(img, 0.0, 1.0)


# ------------------------------------------------------------------- audio

def audio_template(identity: int, n_frames: int, channels: int = 8,
                   pitch: float = 0.0) -> np.ndarray:
    """Clean two-formant energy pattern for a digit, [n_frames, channels]."""
    if identity not in _FORMANTS:
        raise ValueError(f"identity must be in 0..9, got {identity}")
    f1a, f1b, f2a, f2b = _FORMANTS[identity]
    u = np.linspace(0.0, 1.0, n_frames)[:, None]
    ch = np.arange(channels)[None, :].astype(float)
    f1 = f1a + (f1b - f1a) * u + pitch
    f2 = f2a + (f2b - f2a) * u + pitch
    env = 0.3 + 0.7 * np.sin(np.pi * u)
    return env * (np.exp(-((ch - f1) ** 2) / _FORMANT_WIDTH)
                  + _SECOND_FORMANT_GAIN * np.exp(-((ch - f2) ** 2) / _FORMANT_WIDTH))


def synth_audio(identity: int, style: AudioStyle, seed: int,
                config: GeneratorConfig | None = None) -> np.ndarray:
    """Deterministic noisy frame sequence [T, F] for a spoken digit."""
    cfg = config or GeneratorConfig()
    if not 0 <= identity <= 9:
        raise ValueError(f"identity must be in 0..9, got {identity}")
    if not cfg.t_min <= style.duration <= cfg.t_max:
        raise ValueError(
            f"duration {style.duration} outside [{cfg.t_min}, {cfg.t_max}]")
    content = max(1, style.duration - style.onset)
    frames = np.zeros((style.duration, cfg.audio_channels))
    frames[style.onset:] = style.amplitude * audio_template(
        identity, content, cfg.audio_channels, pitch=float(style.pitch))
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, identity, 1])))
    frames += rng.normal(scale=cfg.audio_noise, size=frames.shape)
    return frames


# --------------------------------------------------------------- generation

def _draw_image_style(rng: np.random.Generator) -> ImageStyle:
    return ImageStyle(
        tilt=float(rng.uniform(-0.35, 0.35)),
        thickness=int(rng.integers(0, 3)),
        scale=float(rng.uniform(0.75, 1.1)),
        dx=float(rng.uniform(-2.5, 2.5)),
        dy=float(rng.uniform(-2.5, 2.5)),
        intensity=float(rng.uniform(0.6, 1.0)),
    )


def _draw_audio_style(rng: np.random.Generator, cfg: GeneratorConfig) -> AudioStyle:
    return AudioStyle(
        duration=int(rng.integers(cfg.t_min, cfg.t_max + 1)),
        amplitude=float(rng.uniform(0.5, 1.3)),
        pitch=int(rng.integers(-1, 2)),
        onset=int(rng.integers(0, 5)),
    )


_SPLIT_CODE = {"train": 0, "test": 1}


def generate_dataset(config: GeneratorConfig, seed: int, split: str) -> Dataset:
    """Build one split: n samples per modality, identity-balanced, styles
    drawn independently of identity. Per-sample seeding keeps generation
    order-independent."""
    if split not in _SPLIT_CODE:
        raise ValueError(f"split must be train|test, got {split!r}")
    n = config.n_train if split == "train" else config.n_test
    if n < config.identities:
        raise ValueError(f"{n} samples cannot cover {config.identities} identities")
    scode = _SPLIT_CODE[split]

    order = np.random.Generator(
        np.random.PCG64(np.random.SeedSequence([seed, scode, 999]))).permutation(n)
    identities = np.array([i % config.identities for i in range(n)])[order]

    images = np.empty((n, IMAGE_SIDE, IMAGE_SIDE), dtype=np.float32)
    image_styles: list[ImageStyle] = []
    audios: list[np.ndarray] = []
    audio_styles: list[AudioStyle] = []
    audio_identities = identities.copy()

    for i in range(n):
        rng_i = np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, scode, 0, i])))
        style_i = _draw_image_style(rng_i)
        image_styles.append(style_i)
        images[i] = render_glyph(int(identities[i]), style_i,
                                 seed=int(rng_i.integers(0, 2**31)))
        rng_a = np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, scode, 1, i])))
        style_a = _draw_audio_style(rng_a, config)
        audio_styles.append(style_a)
        audios.append(synth_audio(int(audio_identities[i]), style_a,
                                  seed=int(rng_a.integers(0, 2**31)),
                                  config=config).astype(np.float32))

    return Dataset(split=split, seed=seed, config=config, images=images,
                   image_identities=identities.astype(np.int64),
                   image_styles=image_styles, audios=audios,
                   audio_identities=audio_identities.astype(np.int64),
                   audio_styles=audio_styles)


# ----------------------------------------------------------- epoch pairing

def pair_epoch(dataset: Dataset, epoch_seed: int) -> np.ndarray:
    """Pair every audio sample with a uniformly drawn same-identity image.

    Returns [N_audio, 2] of (audio index, image index); redrawn per epoch.
    """
    by_id = dataset.images_by_identity()
    for d, idxs in by_id.items():
        if len(idxs) == 0:
            raise ValueError(f"no image samples for identity {d}")
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([epoch_seed])))
    pairs = np.empty((dataset.n_audios, 2), dtype=np.int64)
    for i, d in enumerate(dataset.audio_identities):
        pool = by_id[int(d)]
        pairs[i] = (i, pool[rng.integers(0, len(pool))])
    return pairs


def negative_for(anchor_identities: np.ndarray, dataset: Dataset, mode: str,
                 seed: int) -> np.ndarray:
    """Draw one negative multimodal pair per anchor.

    mode="label_filtered": uniform over audio samples whose identity differs
    from the anchor's; mode="uniform": uniform over all audio samples. The
    image half is a same-identity partner of the drawn audio sample, so each
    negative is itself a coherent pair. Returns [N, 2] (audio idx, image idx).
    """
    if mode not in ("label_filtered", "uniform"):
        raise ValueError(f"mode must be label_filtered|uniform, got {mode!r}")
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed])))
    by_id = dataset.images_by_identity()
    out = np.empty((len(anchor_identities), 2), dtype=np.int64)
    all_idx = np.arange(dataset.n_audios)
    for i, anchor in enumerate(anchor_identities):
        if mode == "label_filtered":
            pool = all_idx[dataset.audio_identities != anchor]
            if len(pool) == 0:
                raise ValueError(f"no negatives available for identity {anchor}")
        else:
            pool = all_idx
        a = int(pool[rng.integers(0, len(pool))])
        imgs = by_id[int(dataset.audio_identities[a])]
        out[i] = (a, imgs[rng.integers(0, len(imgs))])
    return out


def make_batch(dataset: Dataset, pairs: np.ndarray) -> MultimodalBatch:
    """Assemble padded arrays for a list of (audio idx, image idx) rows."""
    a_idx = pairs[:, 0]
    i_idx = pairs[:, 1]
    lengths = np.array([dataset.audios[i].shape[0] for i in a_idx], dtype=np.int64)
    t_max = int(lengths.max())
    f = dataset.config.audio_channels
    audio = np.zeros((len(a_idx), t_max, f))
    mask = np.zeros((len(a_idx), t_max))
    for row, ai in enumerate(a_idx):
        t = lengths[row]
        audio[row, :t] = dataset.audios[ai]
        mask[row, :t] = 1.0
    image = dataset.images[i_idx].astype(np.float64)[:, None, :, :]
    return MultimodalBatch(audio=audio, audio_lengths=lengths, audio_mask=mask,
                           image=image,
                           identity=dataset.audio_identities[a_idx].copy(),
                           audio_indices=np.asarray(a_idx, dtype=np.int64),
                           image_indices=np.asarray(i_idx, dtype=np.int64))


# ------------------------------------------------------------- persistence

def save_dataset(dataset: Dataset, path: str | Path) -> None:
    """One JSON header line, then float32 little-endian blobs (images, audio)."""
    header = {
        "format_version": DATASET_FORMAT_VERSION,
        "kind": "pvae-dataset",
        "split": dataset.split,
        "seed": dataset.seed,
        "config": dataset.config.to_dict(),
        "image_count": dataset.n_images,
        "image_side": IMAGE_SIDE,
        "audio_count": dataset.n_audios,
        "audio_channels": dataset.config.audio_channels,
        "image_identities": dataset.image_identities.tolist(),
        "audio_identities": dataset.audio_identities.tolist(),
        "audio_lengths": [int(a.shape[0]) for a in dataset.audios],
        "image_styles": [dataclasses.asdict(s) for s in dataset.image_styles],
        "audio_styles": [dataclasses.asdict(s) for s in dataset.audio_styles],
    }
    with open(path, "wb") as f:
        f.write(json.dumps(header, sort_keys=True).encode() + b"\n")
        f.write(np.ascontiguousarray(dataset.images, dtype="<f4").tobytes())
        for a in dataset.audios:
            f.write(np.ascontiguousarray(a, dtype="<f4").tobytes())


def load_dataset(path: str | Path) -> Dataset:
    with open(path, "rb") as f:
        line = f.readline()
        try:
            header = json.loads(line)
        except json.JSONDecodeError as e:
            raise DatasetFormatError(f"bad dataset header: {e}") from e
        if header.get("kind") != "pvae-dataset":
            raise DatasetFormatError("not a dataset file")
        if header.get("format_version") != DATASET_FORMAT_VERSION:
            raise DatasetFormatError(
                f"unsupported dataset version {header.get('format_version')}")
        config = GeneratorConfig.from_dict(header["config"])
        n_img = header["image_count"]
        side = header["image_side"]
        img_bytes = f.read(n_img * side * side * 4)
        if len(img_bytes) != n_img * side * side * 4:
            raise DatasetFormatError("truncated image payload")
        images = np.frombuffer(img_bytes, dtype="<f4").reshape(n_img, side, side).copy()
        audios = []
        for t in header["audio_lengths"]:
            blob = f.read(t * header["audio_channels"] * 4)
            if len(blob) != t * header["audio_channels"] * 4:
                raise DatasetFormatError("truncated audio payload")
            audios.append(np.frombuffer(blob, dtype="<f4")
                          .reshape(t, header["audio_channels"]).copy())
    return Dataset(
        split=header["split"], seed=header["seed"], config=config, images=images,
        image_identities=np.asarray(header["image_identities"], dtype=np.int64),
        image_styles=[ImageStyle(**s) for s in header["image_styles"]],
        audios=audios,
        audio_identities=np.asarray(header["audio_identities"], dtype=np.int64),
        audio_styles=[AudioStyle(**s) for s in header["audio_styles"]])


# ------------------------------------------------------------------ IDX I/O

def read_idx(path: str | Path):
    """Read an IDX image or label file.

    Images (magic 0x803) return float64 [N, rows, cols] scaled to [0, 1];
    labels (magic 0x801) return int64 [N] and must lie in 0..9.
    """
    with open(path, "rb") as f:
        head = f.read(4)
        if len(head) < 4:
            raise IdxTruncatedError("file shorter than the magic field")
        (magic,) = struct.unpack(">I", head)
        if magic == IDX_IMAGE_MAGIC:
            dims = f.read(12)
            if len(dims) < 12:
                raise IdxTruncatedError("image header truncated")
            count, rows, cols = struct.unpack(">III", dims)
            if rows == 0 or cols == 0:
                raise IdxDimensionError(f"bad image dims {rows}x{cols}")
            payload = f.read(count * rows * cols)
            if len(payload) != count * rows * cols:
                raise IdxTruncatedError(
                    f"expected {count * rows * cols} pixel bytes, got {len(payload)}")
            raw = np.frombuffer(payload, dtype=np.uint8).reshape(count, rows, cols)
            return raw.astype(np.float64) / 255.0
        if magic == IDX_LABEL_MAGIC:
            cnt = f.read(4)
            if len(cnt) < 4:
                raise IdxTruncatedError("label header truncated")
            (count,) = struct.unpack(">I", cnt)
            payload = f.read(count)
            if len(payload) != count:
                raise IdxTruncatedError(f"expected {count} label bytes, got {len(payload)}")
            labels = np.frombuffer(payload, dtype=np.uint8).astype(np.int64)
            if labels.size and labels.max() > 9:
                raise IdxLabelRangeError(f"label value {labels.max()} outside 0..9")
            return labels
        raise IdxMagicError(f"unrecognized IDX magic 0x{magic:08x}")


# ------------------------------------------------- template identity oracle

class TemplateClassifier:
    """Nearest-clean-template digit classifier, independent of any model.

    Audio: trims silence, time-normalizes, energy-normalizes, then matches
    against pitch-shifted clean templates. Images: matches intensity-normalized
    pixels against a bank of noise-free styled renders.
    """

    AUDIO_FRAMES = 32
    PITCH_SHIFTS = (-2, -1, 0, 1, 2)

    def __init__(self, config: GeneratorConfig | None = None):
        self.config = config or GeneratorConfig()
        f = self.config.audio_channels
        self._audio_bank = []  # (digit, normalized template) over pitch shifts
        for d in range(10):
            for shift in self.PITCH_SHIFTS:
                t = audio_template(d, self.AUDIO_FRAMES, f, pitch=float(shift))
                self._audio_bank.append((d, t / np.linalg.norm(t)))
        self._image_bank_labels, self._image_bank = self._build_image_bank()
        self._image_bank_sq = np.sum(self._image_bank ** 2, axis=1)

    def _build_image_bank(self):
        temps, labels = [], []
        for d in range(10):
            for tilt in (-0.25, 0.0, 0.25):
                for scale in (0.8, 0.95, 1.1):
                    for thick in (0, 1, 2):
                        for dx in (-2.0, 0.0, 2.0):
                            for dy in (-2.0, 0.0, 2.0):
                                img = self._clean_render(
                                    d, ImageStyle(tilt=tilt, thickness=thick,
                                                  scale=scale, dx=dx, dy=dy))
                                temps.append(img.ravel())
                                labels.append(d)
        bank = np.array(temps)
        bank /= np.maximum(np.linalg.norm(bank, axis=1, keepdims=True), 1e-9)
        return np.array(labels), bank

    @staticmethod
    def _clean_render(identity: int, style: ImageStyle) -> np.ndarray:
        glyph = _dilate(_upscale_glyph(_glyph_bitmap(identity)), style.thickness)
        r, c = np.mgrid[0:IMAGE_SIDE, 0:IMAGE_SIDE]
        yr = r - (IMAGE_SIDE - 1) / 2.0 - style.dy
        xc = c - (IMAGE_SIDE - 1) / 2.0 - style.dx
        u = yr / style.scale
        v = xc / style.scale + style.tilt * u
        return _bilinear(glyph, u + (_GLYPH_SIDE - 1) / 2.0, v + (_GLYPH_SIDE - 1) / 2.0)

    @staticmethod
    def active_extent(frames: np.ndarray) -> tuple[int, int]:
        """(first, last) active frame indices by L2 energy thresholding."""
        e = np.linalg.norm(frames, axis=1)
        thresh = 0.35 * e.max()
        active = np.flatnonzero(e >= thresh)
        if len(active) == 0:
            return 0, frames.shape[0] - 1
        return int(active[0]), int(active[-1])

    @staticmethod
    def measured_duration(frames: np.ndarray) -> int:
        first, last = TemplateClassifier.active_extent(frames)
        return last - first + 1

    def classify_audio(self, frames: np.ndarray) -> int:
        first, last = self.active_extent(frames)
        content = frames[first:last + 1]
        # linear time-resampling of each channel to the canonical length
        src = np.linspace(0.0, 1.0, content.shape[0])
        dst = np.linspace(0.0, 1.0, self.AUDIO_FRAMES)
        resampled = np.stack([np.interp(dst, src, content[:, c])
                              for c in range(content.shape[1])], axis=1)
        norm = np.linalg.norm(resampled)
        if norm > 0:
            resampled = resampled / norm
        dists = [np.linalg.norm(resampled - t) for _, t in self._audio_bank]
        return self._audio_bank[int(np.argmin(dists))][0]

    def classify_image(self, image: np.ndarray) -> int:
        v = np.clip(image, 0.0, 1.0).ravel()
        norm = np.linalg.norm(v)
        if norm > 0:
            v = v / norm
        d2 = self._image_bank_sq - 2.0 * self._image_bank @ v + v @ v
        return int(self._image_bank_labels[np.argmin(d2)])
