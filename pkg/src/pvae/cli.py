"""Command-line entry point: data generation, training, evaluation,
generation grids, and the oracle verification suite.

Every command is driven by one JSON config document (all keys optional,
unknown keys rejected) plus a handful of flags; the fully resolved config is
written into the output directory so runs are reproducible from their outputs.
Errors print a single ``error: ...`` line to stderr and exit non-zero.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .data import (Dataset, GeneratorConfig, generate_dataset, load_dataset,
                   save_dataset, synth_audio, render_glyph,
                   _draw_audio_style, _draw_image_style)
from .evaluation import (cross_modal_grid, encode_means, export_latents,
                         inertia_curve, kmeans, render_grid_pgm,
                         style_transfer_grid, weighted_purity)
from .networks import AUDIO, IMAGE, ArchConfig, build_model
from .objectives import ObjectiveWeights
from .trainer import TrainConfig, fit, load_checkpoint
from .verify import run_suite


class ConfigError(ValueError):
    """Malformed run configuration."""


@dataclass(frozen=True)
class EvalSettings:
    k_min: int = 2
    k_max: int = 20
    restarts: int = 5
    purity_k: int = 10
    seed: int = 0


@dataclass
class RunConfig:
    arch: ArchConfig = field(default_factory=ArchConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    data: GeneratorConfig = field(default_factory=GeneratorConfig)
    eval: EvalSettings = field(default_factory=EvalSettings)

    def to_dict(self) -> dict:
        return {"arch": self.arch.to_dict(), "train": self.train.to_dict(),
                "data": self.data.to_dict(),
                "eval": dataclasses.asdict(self.eval)}


def _check_keys(d: dict, allowed: set[str], where: str) -> None:
    unknown = set(d) - allowed
    if unknown:
        raise ConfigError(f"unknown config keys in {where}: {sorted(unknown)}")


def parse_run_config(doc: dict) -> RunConfig:
    _check_keys(doc, {"arch", "train", "data", "eval"}, "top level")
    cfg = RunConfig()
    try:
        if "arch" in doc:
            _check_keys(doc["arch"], {f.name for f in dataclasses.fields(ArchConfig)},
                        "arch")
            cfg.arch = ArchConfig.from_dict(doc["arch"])
        if "train" in doc:
            allowed = {f.name for f in dataclasses.fields(TrainConfig)}
            _check_keys(doc["train"], allowed, "train")
            if "weights" in doc["train"]:
                _check_keys(doc["train"]["weights"],
                            {f.name for f in dataclasses.fields(ObjectiveWeights)},
                            "train.weights")
            cfg.train = TrainConfig.from_dict(doc["train"])
        if "data" in doc:
            cfg.data = GeneratorConfig.from_dict(doc["data"])
        if "eval" in doc:
            _check_keys(doc["eval"], {f.name for f in dataclasses.fields(EvalSettings)},
                        "eval")
            cfg.eval = EvalSettings(**doc["eval"])
    except (TypeError, ValueError) as e:
        if isinstance(e, ConfigError):
            raise
        raise ConfigError(str(e)) from e
    if cfg.arch.audio_feat_dim != cfg.data.audio_channels:
        raise ConfigError(
            f"arch.audio_feat_dim ({cfg.arch.audio_feat_dim}) must equal "
            f"data.audio_channels ({cfg.data.audio_channels})")
    return cfg


def load_run_config(path: str | None) -> RunConfig:
    if path is None:
        return RunConfig()
    try:
        doc = json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}")
    except json.JSONDecodeError as e:
        raise ConfigError(f"config is not valid JSON: {e}")
    if not isinstance(doc, dict):
        raise ConfigError("config document must be a JSON object")
    return parse_run_config(doc)


def _write_effective_config(cfg: RunConfig, out: Path, extra: dict) -> None:
    doc = cfg.to_dict()
    doc.update(extra)
    (out / "effective_config.json").write_text(
        json.dumps(doc, sort_keys=True, indent=2) + "\n")


_STYLE_FIELDS_IMG = ("tilt", "thickness", "scale", "dx", "dy", "intensity")
_STYLE_FIELDS_AUD = ("duration", "amplitude", "pitch", "onset")


def _write_metadata_csv(datasets: dict[str, Dataset], path: Path) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["split", "modality", "index", "identity",
                    *_STYLE_FIELDS_IMG, *_STYLE_FIELDS_AUD])
        for split, ds in datasets.items():
            for i in range(ds.n_images):
                s = ds.image_styles[i]
                w.writerow([split, "image", i, int(ds.image_identities[i]),
                            *[repr(getattr(s, k)) for k in _STYLE_FIELDS_IMG],
                            "", "", "", ""])
            for i in range(ds.n_audios):
                s = ds.audio_styles[i]
                w.writerow([split, "audio", i, int(ds.audio_identities[i]),
                            "", "", "", "", "", "",
                            *[repr(getattr(s, k)) for k in _STYLE_FIELDS_AUD]])


def cmd_gen_data(args) -> int:
    cfg = load_run_config(args.config)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    datasets = {}
    for split in ("train", "test"):
        ds = generate_dataset(cfg.data, seed=args.seed, split=split)
        save_dataset(ds, out / f"{split}.ds")
        datasets[split] = ds
    _write_metadata_csv(datasets, out / "metadata.csv")
    _write_effective_config(cfg, out, {"command": "gen-data", "seed": args.seed})
    print(f"wrote {datasets['train'].n_audios} train / "
          f"{datasets['test'].n_audios} test pairs to {out}")
    return 0


_MODEL_KINDS = {"pvae": (AUDIO, IMAGE), "vae-sp": (AUDIO,), "vae-im": (IMAGE,)}


def cmd_train(args) -> int:
    cfg = load_run_config(args.config)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    dataset = load_dataset(Path(args.data) / "train.ds")
    if dataset.config.audio_channels != cfg.arch.audio_feat_dim:
        raise ConfigError(
            f"dataset has {dataset.config.audio_channels} audio channels but "
            f"arch.audio_feat_dim is {cfg.arch.audio_feat_dim}")

    if args.resume:
        model, train_cfg, state = load_checkpoint(args.resume, expect_arch=cfg.arch)
    else:
        weights = cfg.train.weights
        if args.no_cm:
            weights = dataclasses.replace(weights, alpha_cm=0.0)
        if args.no_ch:
            weights = dataclasses.replace(weights, alpha_ch=0.0)
        train_cfg = dataclasses.replace(cfg.train, weights=weights)
        model = build_model(cfg.arch, modalities=_MODEL_KINDS[args.model],
                            seed=train_cfg.seed)
        state = None
    if args.epochs is not None:
        train_cfg = dataclasses.replace(train_cfg, epochs=args.epochs)
    cfg.train = train_cfg
    _write_effective_config(cfg, out, {"command": "train", "model": args.model,
                                       "resume": args.resume})
    result = fit(model, dataset, train_cfg, out_dir=out, state=state,
                 verbose=not args.quiet)
    print(f"trained {result.epochs_run} epochs; checkpoint at {result.checkpoint_path}")
    return 0


def _model_kind(modalities: tuple[str, ...]) -> str:
    for kind, mods in _MODEL_KINDS.items():
        if tuple(mods) == tuple(modalities):
            return kind
    return "+".join(modalities)


def cmd_eval(args) -> int:
    cfg = load_run_config(args.config)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    model, train_cfg, _ = load_checkpoint(args.checkpoint)
    dataset = load_dataset(Path(args.data) / "test.ds")
    ev = cfg.eval
    kind = _model_kind(model.modalities)
    ds_name = f"synthetic-{dataset.split}-seed{dataset.seed}"

    rows = []
    inertia_rows = []
    for m in model.modalities:
        labels = dataset.audio_identities if m == AUDIO else dataset.image_identities
        for latent in ("s", model.style_key(m)):
            means = encode_means(model, dataset, m, latent)
            best = None
            for r in range(ev.restarts):
                res = kmeans(means, ev.purity_k, seed=ev.seed * 1000 + r)
                if best is None or res.inertia < best.inertia:
                    best = res
            purity = weighted_purity(best.assignments, labels)
            rows.append([kind, ds_name, m, f"z_{latent}", ev.purity_k,
                         repr(float(purity)), ev.seed])
            if latent == "s":
                for k, inertia in inertia_curve(means, ev.k_min, ev.k_max,
                                                seed=ev.seed, restarts=ev.restarts):
                    inertia_rows.append([kind, m, k, repr(inertia)])
            export_latents(model, dataset, latent, m,
                           out / f"latents_{m}_z{latent}.csv")

    with open(out / "metrics.csv", "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["model", "dataset", "modality", "latent", "k", "purity", "seed"])
        w.writerows(rows)
    with open(out / "inertia.csv", "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["model", "modality", "k", "inertia"])
        w.writerows(inertia_rows)
    _write_effective_config(cfg, out, {"command": "eval",
                                       "checkpoint": str(args.checkpoint)})
    for row in rows:
        print(f"{row[0]} {row[2]:>5} {row[3]}: purity {float(row[5]):.4f}")
    return 0


def _parse_ids(text: str) -> list[int]:
    try:
        ids = [int(v) for v in text.split(",") if v != ""]
    except ValueError:
        raise ConfigError(f"ids must be comma-separated integers, got {text!r}")
    if not ids or any(not 0 <= v <= 9 for v in ids):
        raise ConfigError(f"ids must be digits 0..9, got {text!r}")
    return ids


def _reference_samples(cfg: RunConfig, modality: str, identities: list[int],
                       seed: int, dataset: Dataset | None):
    """Reference inputs for grids: drawn from a dataset when given, otherwise
    synthesized with seeded random styles."""
    samples = []
    if dataset is not None:
        rng = np.random.default_rng(seed)
        pool_ids = (dataset.audio_identities if modality == AUDIO
                    else dataset.image_identities)
        for d in identities:
            idxs = np.flatnonzero(pool_ids == d)
            if len(idxs) == 0:
                raise ConfigError(f"dataset has no {modality} sample of identity {d}")
            pick = int(idxs[rng.integers(0, len(idxs))])
            samples.append(dataset.audios[pick].astype(np.float64)
                           if modality == AUDIO
                           else dataset.images[pick].astype(np.float64))
        return samples
    for i, d in enumerate(identities):
        rng = np.random.Generator(np.random.PCG64(
            np.random.SeedSequence([seed, 0 if modality == AUDIO else 1, i])))
        if modality == AUDIO:
            style = _draw_audio_style(rng, cfg.data)
            samples.append(synth_audio(d, style, seed=int(rng.integers(0, 2**31)),
                                       config=cfg.data))
        else:
            style = _draw_image_style(rng)
            samples.append(render_glyph(d, style, seed=int(rng.integers(0, 2**31))))
    return samples


def cmd_generate(args) -> int:
    cfg = load_run_config(args.config)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    model, _, _ = load_checkpoint(args.checkpoint)
    sem_ids = _parse_ids(args.semantic_ids)
    sty_ids = _parse_ids(args.style_ids)
    output_modality = args.modality
    if output_modality not in model.modalities:
        raise ConfigError(f"checkpointed model has no {output_modality} modality")
    if args.mode == "within":
        sem_modality = output_modality
    else:
        sem_modality = IMAGE if output_modality == AUDIO else AUDIO
        if sem_modality not in model.modalities:
            raise ConfigError("cross-modal generation needs a two-modality model")
    dataset = load_dataset(Path(args.data) / "test.ds") if args.data else None
    sem_sources = _reference_samples(cfg, sem_modality, sem_ids, args.seed, dataset)
    sty_sources = _reference_samples(cfg, output_modality, sty_ids,
                                     args.seed + 1, dataset)
    if args.mode == "within":
        grid = style_transfer_grid(model, sem_sources, sty_sources, output_modality,
                                   semantic_identities=sem_ids,
                                   style_identities=sty_ids)
    else:
        grid = cross_modal_grid(model, sem_sources, sem_modality, sty_sources,
                                semantic_identities=sem_ids,
                                style_identities=sty_ids)
    path = out / f"grid_{args.mode}_{output_modality}.pgm"
    render_grid_pgm(grid, path)
    _write_effective_config(cfg, out, {
        "command": "generate", "mode": args.mode, "modality": args.modality,
        "semantic_ids": sem_ids, "style_ids": sty_ids, "seed": args.seed,
        "checkpoint": str(args.checkpoint)})
    print(f"wrote {path}")
    return 0


def cmd_verify(args) -> int:
    results = run_suite(args.level)
    failed = 0
    for r in results:
        print(f"{'PASS' if r.passed else 'FAIL'} {r.name}: {r.detail}")
        failed += not r.passed
    print(f"{len(results) - failed}/{len(results)} checks passed")
    return 1 if failed else 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="pvae",
                                description="multimodal semantic/style VAE toolkit")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="generate synthetic train/test datasets")
    g.add_argument("--config", default=None, help="JSON run config")
    g.add_argument("--out", required=True)
    g.add_argument("--seed", type=int, default=0)
    g.set_defaults(fn=cmd_gen_data)

    t = sub.add_parser("train", help="train a model on a generated dataset")
    t.add_argument("--config", default=None)
    t.add_argument("--data", required=True, help="directory with train.ds")
    t.add_argument("--out", required=True)
    t.add_argument("--resume", default=None, help="checkpoint to continue from")
    t.add_argument("--model", choices=sorted(_MODEL_KINDS), default="pvae")
    t.add_argument("--no-cm", action="store_true",
                   help="train with the contrastive weight set to 0")
    t.add_argument("--no-ch", action="store_true",
                   help="train with the coherence weight set to 0")
    t.add_argument("--epochs", type=int, default=None,
                   help="override the configured epoch count")
    t.add_argument("--quiet", action="store_true")
    t.set_defaults(fn=cmd_train)

    e = sub.add_parser("eval", help="clustering purity, inertia curves, latents")
    e.add_argument("--config", default=None)
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", required=True, help="directory with test.ds")
    e.add_argument("--out", required=True)
    e.set_defaults(fn=cmd_eval)

    r = sub.add_parser("generate", help="emit style-transfer / cross-modal grids")
    r.add_argument("--config", default=None)
    r.add_argument("--checkpoint", required=True)
    r.add_argument("--mode", choices=("within", "cross"), required=True)
    r.add_argument("--modality", choices=(AUDIO, IMAGE), required=True,
                   help="output modality of the grid")
    r.add_argument("--semantic-ids", required=True,
                   help="comma-separated digit identities for columns")
    r.add_argument("--style-ids", required=True,
                   help="comma-separated digit identities for rows")
    r.add_argument("--data", default=None,
                   help="optional dataset dir; otherwise references are synthesized")
    r.add_argument("--seed", type=int, default=0)
    r.add_argument("--out", required=True)
    r.set_defaults(fn=cmd_generate)

    v = sub.add_parser("verify", help="run the oracle verification suites")
    v.add_argument("--level", choices=("fast", "full"), default="fast")
    v.set_defaults(fn=cmd_verify)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except (ConfigError, ValueError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
