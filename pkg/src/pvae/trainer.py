"""Adam training loop with per-epoch re-pairing and checkpoint persistence.

The objective is maximized by descending on its negation. Training consumes a
single RNG stream (pairing, shuffling, negatives, reparameterization noise);
the stream state is stored in checkpoints, so a resumed run replays the exact
step sequence of an uninterrupted one.

Checkpoints store parameters and Adam moments as little-endian float32. To
make resume bit-exact, saving also rounds the live float64 state to the same
float32 values, so the on-disk and in-memory states coincide from that point
on in every run that checkpoints at the same cadence.
"""

from __future__ import annotations

import csv
import dataclasses
import json
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .autodiff import Tensor, backward, neg
from .data import Dataset, make_batch, negative_for, pair_epoch
from .networks import ArchConfig, PvaeModel, build_model
from .objectives import (ObjectiveBreakdown, ObjectiveWeights, draw_noise,
                         total_objective)

CHECKPOINT_FORMAT_VERSION = 1

LOG_COLUMNS = ("epoch", "recon_audio", "recon_image", "kl_za", "kl_zi", "kl_zs",
               "coherence", "contrastive", "total", "wall_time_s")


class CheckpointError(ValueError):
    """Base for unreadable checkpoint files."""


class CheckpointVersionError(CheckpointError):
    pass


class CheckpointTruncatedError(CheckpointError):
    pass


class CheckpointShapeError(CheckpointError):
    pass


class CheckpointConfigError(CheckpointError):
    pass


class NonFiniteGradientError(RuntimeError):
    """A parameter received a NaN/Inf gradient; carries the parameter name."""


class TrainingDivergedError(RuntimeError):
    def __init__(self, message: str, epoch: int, batch_index: int):
        super().__init__(message)
        self.epoch = epoch
        self.batch_index = batch_index


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-3
    beta1: float = 0.95
    beta2: float = 0.999
    eps: float = 1e-8
    batch_size: int = 64
    epochs: int = 60
    weights: ObjectiveWeights = field(default_factory=ObjectiveWeights)
    seed: int = 0
    checkpoint_every: int = 0       # epochs between snapshots; 0 = final only
    grad_clip: float = 5.0          # global-norm clip; 0 disables
    negative_mode: str = "label_filtered"

    def __post_init__(self):
        if self.lr < 0:
            raise ValueError(f"lr must be >= 0, got {self.lr}")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ValueError(f"betas must lie in [0, 1): {self.beta1}, {self.beta2}")
        if self.batch_size < 1 or self.epochs < 0:
            raise ValueError("batch_size must be >= 1 and epochs >= 0")

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["weights"] = self.weights.to_dict()
        return d

    @staticmethod
    def from_dict(d: dict) -> "TrainConfig":
        d = dict(d)
        if "weights" in d:
            d["weights"] = ObjectiveWeights.from_dict(d["weights"])
        return TrainConfig(**d)


class AdamState:
    """First/second moment arrays per parameter plus the step counter."""

    def __init__(self, params: dict[str, Tensor]):
        self.m = {k: np.zeros_like(t.data) for k, t in params.items()}
        self.v = {k: np.zeros_like(t.data) for k, t in params.items()}
        self.t = 0


def adam_step(params: dict[str, Tensor], grads: dict[str, np.ndarray],
              state: AdamState, config: TrainConfig) -> None:
    """One bias-corrected Adam descent update, in place.

    Parameters without a gradient entry decay their moments against a zero
    gradient, matching a single optimizer over the union of all registries.
    """
    state.t += 1
    t = state.t
    bc1 = 1.0 - config.beta1 ** t
    bc2 = 1.0 - config.beta2 ** t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p.data)
        elif g.shape != p.data.shape:
            raise ValueError(f"gradient shape {g.shape} != parameter {name} "
                             f"shape {p.data.shape}")
        elif not np.all(np.isfinite(g)):
            raise NonFiniteGradientError(f"non-finite gradient for parameter {name}")
        m = state.m[name]
        v = state.v[name]
        m *= config.beta1
        m += (1.0 - config.beta1) * g
        v *= config.beta2
        v += (1.0 - config.beta2) * (g * g)
        p.data -= config.lr * (m / bc1) / (np.sqrt(v / bc2) + config.eps)


def clip_global_norm(grads: dict[str, np.ndarray], max_norm: float) -> float:
    """Scale all gradients so their joint L2 norm is at most ``max_norm``."""
    total = np.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
    if max_norm > 0 and total > max_norm:
        scale = max_norm / total
        for g in grads.values():
            g *= scale
    return total


@dataclass
class TrainerState:
    adam: AdamState
    epoch: int                      # completed epochs
    rng: np.random.Generator

    @staticmethod
    def fresh(model: PvaeModel, config: TrainConfig) -> "TrainerState":
        rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([config.seed, 2])))
        return TrainerState(adam=AdamState(model.parameters()), epoch=0, rng=rng)


@dataclass
class TrainResult:
    epochs_run: int
    log_rows: list[dict]
    checkpoint_path: Optional[Path]


def _epoch_batches(dataset: Dataset, config: TrainConfig,
                   rng: np.random.Generator) -> list[np.ndarray]:
    pair_seed = int(rng.integers(0, 2**63))
    pairs = pair_epoch(dataset, epoch_seed=pair_seed)
    order = rng.permutation(len(pairs))
    pairs = pairs[order]
    return [pairs[i:i + config.batch_size]
            for i in range(0, len(pairs), config.batch_size)]


def fit(model: PvaeModel, dataset: Dataset, config: TrainConfig,
        out_dir: str | Path | None = None, state: Optional[TrainerState] = None,
        verbose: bool = False) -> TrainResult:
    """Train until ``config.epochs`` completed epochs, logging one CSV row per
    epoch and checkpointing at the configured cadence plus at the end.

    Pass the ``state`` returned by ``load_checkpoint`` to resume; epochs
    already completed are skipped and the RNG stream continues where it left
    off, reproducing the uninterrupted run exactly.
    """
    out_dir = Path(out_dir) if out_dir is not None else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
    state = state or TrainerState.fresh(model, config)
    params = model.parameters()
    log_rows: list[dict] = []
    log_file = None
    writer = None
    if out_dir is not None:
        log_file = open(out_dir / "train_log.csv", "w", newline="")
        writer = csv.writer(log_file)
        writer.writerow(LOG_COLUMNS)

    ckpt_path = None
    try:
        for epoch in range(state.epoch + 1, config.epochs + 1):
            t0 = time.monotonic()
            sums = np.zeros(len(ObjectiveBreakdown.CSV_FIELDS) - 1)  # all but total
            count = 0
            for b_idx, batch_pairs in enumerate(_epoch_batches(dataset, config, state.rng)):
                batch = make_batch(dataset, batch_pairs)
                negatives = None
                if config.weights.alpha_cm > 0 and model.multimodal:
                    neg_pairs = negative_for(batch.identity, dataset,
                                             mode=config.negative_mode,
                                             seed=int(state.rng.integers(0, 2**63)))
                    negatives = make_batch(dataset, neg_pairs)
                noise = draw_noise(state.rng, model, batch.size)
                try:
                    bd = total_objective(model, batch, negatives, config.weights, noise)
                    backward(neg(bd.node))
                except (FloatingPointError, NonFiniteGradientError) as e:
                    if out_dir is not None:
                        replay = {"epoch": epoch, "batch_index": b_idx,
                                  "pairs": batch_pairs.tolist(), "error": str(e)}
                        (out_dir / "diverged_batch.json").write_text(json.dumps(replay))
                    raise TrainingDivergedError(
                        f"non-finite value at epoch {epoch} batch {b_idx}: {e}",
                        epoch=epoch, batch_index=b_idx) from e
                grads = {n: p.grad for n, p in params.items() if p.grad is not None}
                clip_global_norm(grads, config.grad_clip)
                adam_step(params, grads, state.adam, config)
                model.zero_grads()
                sums += np.array(bd.as_row()[:-1]) * batch.size
                count += batch.size
            state.epoch = epoch

            means = sums / max(count, 1)
            parts = {k: float(v)
                     for k, v in zip(ObjectiveBreakdown.CSV_FIELDS[:-1], means)}
            total = (parts["recon_audio"] + parts["recon_image"] - parts["kl_za"]
                     - parts["kl_zi"] - parts["kl_zs"]
                     + config.weights.alpha_ch * parts["coherence"]
                     + config.weights.alpha_cm * parts["contrastive"])
            row = {"epoch": epoch, **parts, "total": total,
                   "wall_time_s": time.monotonic() - t0}
            log_rows.append(row)
            if writer is not None:
                writer.writerow([repr(row[c]) if isinstance(row[c], float) else row[c]
                                 for c in LOG_COLUMNS])
                log_file.flush()
            if verbose:
                print(f"epoch {epoch:4d}  total {total:12.4f}  "
                      f"elbo {total - config.weights.alpha_ch * parts['coherence'] - config.weights.alpha_cm * parts['contrastive']:12.4f}  "
                      f"ch {parts['coherence']:9.4f}  cm {parts['contrastive']:9.4f}")

            if (out_dir is not None and config.checkpoint_every > 0
                    and epoch % config.checkpoint_every == 0):
                save_checkpoint(model, config, state,
                                out_dir / f"checkpoint_epoch{epoch:04d}.ckpt")
    finally:
        if log_file is not None:
            log_file.close()

    if out_dir is not None:
        ckpt_path = out_dir / "checkpoint_final.ckpt"
        save_checkpoint(model, config, state, ckpt_path)
    return TrainResult(epochs_run=state.epoch, log_rows=log_rows,
                       checkpoint_path=ckpt_path)


# -------------------------------------------------------------- checkpoints

def _quantize_inplace(arr: np.ndarray) -> np.ndarray:
    """Round float64 values to their float32 representation, in place."""
    arr[...] = arr.astype("<f4").astype(np.float64)
    return arr


def save_checkpoint(model: PvaeModel, config: TrainConfig, state: TrainerState,
                    path: str | Path) -> None:
    """Write header JSON plus float32 blobs; rounds live state to storage
    precision so a resumed run continues from exactly the saved values."""
    params = model.parameters()
    arrays: list[tuple[str, np.ndarray]] = []
    for name, p in params.items():
        arrays.append((f"param/{name}", _quantize_inplace(p.data)))
    for name in params:
        arrays.append((f"adam_m/{name}", _quantize_inplace(state.adam.m[name])))
        arrays.append((f"adam_v/{name}", _quantize_inplace(state.adam.v[name])))
    header = {
        "format_version": CHECKPOINT_FORMAT_VERSION,
        "kind": "pvae-checkpoint",
        "arch": model.arch.to_dict(),
        "modalities": list(model.modalities),
        "train": config.to_dict(),
        "epoch": state.epoch,
        "adam_t": state.adam.t,
        "rng_state": state.rng.bit_generator.state,
        "arrays": [{"name": n, "shape": list(a.shape)} for n, a in arrays],
    }
    with open(path, "wb") as f:
        f.write(json.dumps(header, sort_keys=True).encode() + b"\n")
        for _, a in arrays:
            f.write(np.ascontiguousarray(a, dtype="<f4").tobytes())


def load_checkpoint(path: str | Path,
                    expect_arch: Optional[ArchConfig] = None
                    ) -> tuple[PvaeModel, TrainConfig, TrainerState]:
    """Rebuild the model and trainer state from a checkpoint file."""
    with open(path, "rb") as f:
        line = f.readline()
        try:
            header = json.loads(line)
        except json.JSONDecodeError as e:
            raise CheckpointError(f"bad checkpoint header: {e}") from e
        if header.get("kind") != "pvae-checkpoint":
            raise CheckpointError("not a checkpoint file")
        if header.get("format_version") != CHECKPOINT_FORMAT_VERSION:
            raise CheckpointVersionError(
                f"unsupported checkpoint version {header.get('format_version')}")
        arch = ArchConfig.from_dict(header["arch"])
        if expect_arch is not None and arch != expect_arch:
            raise CheckpointConfigError(
                f"checkpoint architecture {arch} does not match expected {expect_arch}")
        config = TrainConfig.from_dict(header["train"])
        model = build_model(arch, modalities=tuple(header["modalities"]), seed=0)
        params = model.parameters()
        state = TrainerState(adam=AdamState(params), epoch=header["epoch"],
                             rng=np.random.Generator(np.random.PCG64()))
        state.adam.t = header["adam_t"]
        state.rng.bit_generator.state = header["rng_state"]

        loaded: dict[str, np.ndarray] = {}
        for entry in header["arrays"]:
            n_elem = int(np.prod(entry["shape"])) if entry["shape"] else 1
            blob = f.read(n_elem * 4)
            if len(blob) != n_elem * 4:
                raise CheckpointTruncatedError(
                    f"array {entry['name']}: expected {n_elem * 4} bytes, "
                    f"got {len(blob)}")
            loaded[entry["name"]] = np.frombuffer(blob, dtype="<f4").astype(
                np.float64).reshape(entry["shape"])

    for name, p in params.items():
        key = f"param/{name}"
        if key not in loaded:
            raise CheckpointShapeError(f"checkpoint is missing parameter {name}")
        if loaded[key].shape != p.data.shape:
            raise CheckpointShapeError(
                f"parameter {name}: checkpoint shape {loaded[key].shape} != "
                f"model shape {p.data.shape}")
        p.data[...] = loaded[key]
        state.adam.m[name][...] = loaded[f"adam_m/{name}"]
        state.adam.v[name][...] = loaded[f"adam_v/{name}"]
    return model, config, state
