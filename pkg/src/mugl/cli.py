"""``mugl`` command line: synthesize data, train, generate, evaluate and audit.

Every artifact written to ``--out`` gets a ``<out>.meta.json`` sidecar with
the effective configuration, seed and package version.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch

from . import __version__
from .data import Archive, Manifest, archive_from_json, archive_to_json, desk_spec, load_archive, load_spec, save_archive, synth_generate
from .diffcore import load_checkpoint, seed_everything
from .errors import ConfigError, IoFailure, MuglError, UntrainedModel
from .evaluation import evaluate
from .kinematics import bone_lengths
from .model import MUGL, ModelConfig, config_from_dict, generate
from .sequence import sequence_world
from .training import LossWeights, TrainConfig, fit, load_model, loss_gradcheck, prepare_data

# keys that always come from the data manifest
DATA_KEYS = {"T", "J", "P", "num_classes", "num_views"}
WEIGHT_KEYS = {"rot_weight": "rot", "global_weight": "global_", "len_weight": "len"}


@dataclass
class RunConfig:
    model: dict = field(default_factory=dict)
    train: dict = field(default_factory=dict)
    weights: dict = field(default_factory=dict)
    data_keys: dict = field(default_factory=dict)

    @classmethod
    def from_flat(cls, d: dict) -> "RunConfig":
        model_keys = ModelConfig.keys() - DATA_KEYS
        train_keys = TrainConfig.keys()
        unknown = set(d) - model_keys - train_keys - set(WEIGHT_KEYS) - DATA_KEYS
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        model = {k: v for k, v in d.items() if k in model_keys}
        weights = {WEIGHT_KEYS[k]: v for k, v in d.items() if k in WEIGHT_KEYS}
        if "theta_s" in d:
            weights["theta_s"] = d["theta_s"]
        return cls(model, {k: v for k, v in d.items() if k in train_keys}, weights,
                   {k: v for k, v in d.items() if k in DATA_KEYS})

    @classmethod
    def load(cls, path: str | None) -> "RunConfig":
        if path is None:
            return cls.from_flat(DESK_RUN)
        try:
            d = json.loads(Path(path).read_text())
        except OSError as exc:
            raise IoFailure(f"cannot read config {path}: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path} is not valid JSON: {exc}") from exc
        if not isinstance(d, dict):
            raise ConfigError(f"{path}: config must be a JSON object")
        return cls.from_flat(d)

    def model_config(self, manifest) -> ModelConfig:
        derived = {"T": manifest.T, "J": manifest.skeleton.tree.joint_count, "P": manifest.P,
                   "num_classes": manifest.num_classes, "num_views": manifest.num_views}
        for k, v in self.data_keys.items():
            if derived[k] != v:
                raise ConfigError(f"config sets {k}={v} but the data has {derived[k]}")
        return ModelConfig(**{**self.model, **derived})

    def train_config(self, seed: int | None) -> TrainConfig:
        d = dict(self.train)
        if seed is not None:
            d["seed"] = seed
        return TrainConfig(**d)

    def loss_weights(self) -> LossWeights:
        return LossWeights(**self.weights)


# desk-scale defaults; also shipped as configs/desk.json
DESK_RUN = {"epochs": 200, "batch_size": 32, "steps_per_epoch": 5, "seed": 0}


def _meta_path(out) -> Path:
    return Path(str(out) + ".meta.json")


def write_meta(out, command: str, seed, config: dict, **extra) -> None:
    meta = {"command": command, "version": __version__, "seed": seed, "config": config, **extra}
    try:
        _meta_path(out).write_text(json.dumps(meta, indent=2, sort_keys=True))
    except OSError as exc:
        raise IoFailure(f"cannot write {_meta_path(out)}: {exc}") from exc


def read_meta(path) -> dict:
    p = _meta_path(path)
    if not Path(path).exists():
        raise UntrainedModel(f"no checkpoint at {path}; run `mugl train` first")
    try:
        return json.loads(p.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise IoFailure(f"cannot read checkpoint metadata {p}: {exc}") from exc


def load_trained(ckpt) -> tuple[MUGL, Archive]:
    """Model plus an empty archive carrying the training manifest."""
    meta = read_meta(ckpt)
    if "model_config" not in meta or "manifest" not in meta:
        raise UntrainedModel(f"{ckpt} was not written by `mugl train`")
    cfg = config_from_dict(meta["model_config"])
    model = load_model(load_checkpoint(ckpt), cfg)
    return model, Archive(Manifest.from_dict(meta["manifest"]), [])


def class_seed(seed: int, c: int) -> int:
    return int(np.random.SeedSequence([seed, c]).generate_state(1)[0])


# -- subcommands -----------------------------------------------------------------

def cmd_synth_data(args) -> int:
    spec = load_spec(args.spec) if args.spec else desk_spec()
    manifest, samples = synth_generate(spec, args.seed)
    save_archive(manifest, samples, args.out)
    write_meta(args.out, "synth-data", args.seed, spec)
    print(f"wrote {len(samples)} samples in {manifest.num_classes} classes to {args.out}")
    return 0


def cmd_train(args) -> int:
    run = RunConfig.load(args.config)
    archive = load_archive(args.data)
    manifest = archive.manifest
    model_cfg = run.model_config(manifest)
    train_cfg = run.train_config(args.seed)
    weights = run.loss_weights()
    seed_everything(train_cfg.seed)
    history_path = str(args.out) + ".history.csv"
    result = fit(archive.samples, manifest.skeleton, model_cfg, train_cfg, weights,
                 leg_classes=manifest.leg_classes, history_path=history_path, ckpt_path=args.out)
    effective = {**model_cfg.to_dict(), **asdict(train_cfg),
                 **{k: getattr(weights, v) for k, v in WEIGHT_KEYS.items()}}
    write_meta(args.out, "train", train_cfg.seed, effective, model_config=model_cfg.to_dict(),
               manifest=manifest.to_dict(), data=str(args.data))
    last = result.history[-1]
    print(f"trained {train_cfg.epochs} epochs: loss {last['total']:.5f}, masked 3D MSE {last['mse_3d']:.6f}")
    return 0


def cmd_generate(args) -> int:
    model, empty = load_trained(args.ckpt)
    manifest = empty.manifest
    classes = range(manifest.num_classes) if args.class_ is None else [args.class_]
    samples = []
    for c in classes:
        samples += generate(model, c, args.count, class_seed(args.seed, c),
                            person_counts=manifest.person_counts, upsample=args.upsample)
    if args.upsample > 1:
        manifest = Manifest.from_dict({**manifest.to_dict(), "T": manifest.T * args.upsample,
                                             "frame_rate": manifest.frame_rate * args.upsample})
    save_archive(manifest, samples, args.out)
    write_meta(args.out, "generate", args.seed,
               {"ckpt": str(args.ckpt), "classes": list(classes), "count": args.count, "upsample": args.upsample})
    print(f"wrote {len(samples)} generated samples to {args.out}")
    return 0


def cmd_eval(args) -> int:
    report = evaluate(load_archive(args.gen), load_archive(args.ref))
    report.write_csv(args.out)
    write_meta(args.out, "eval", None, {"gen": str(args.gen), "ref": str(args.ref)})
    for c, a, s in zip(report.classes, report.mmd_a, report.mmd_s):
        print(f"class {c}: MMD-A {a:.6f}  MMD-S {s:.6f}")
    print(report.summary())
    return 0


def cmd_export_json(args) -> int:
    doc = archive_to_json(load_archive(args.data), include_joints=args.joints)
    try:
        Path(args.out).write_text(json.dumps(doc))
    except OSError as exc:
        raise IoFailure(f"cannot write {args.out}: {exc}") from exc
    write_meta(args.out, "export-json", None, {"data": str(args.data), "joints": args.joints})
    print(f"exported {len(doc['samples'])} samples to {args.out}")
    return 0


def cmd_import_json(args) -> int:
    try:
        doc = json.loads(Path(args.json).read_text())
    except OSError as exc:
        raise IoFailure(f"cannot read {args.json}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{args.json} is not valid JSON: {exc}") from exc
    archive = archive_from_json(doc)
    save_archive(archive.manifest, archive.samples, args.out)
    write_meta(args.out, "import-json", None, {"json": str(args.json)})
    print(f"imported {len(archive.samples)} samples to {args.out}")
    return 0


def cmd_gradcheck(args) -> int:
    run = RunConfig.load(args.config)
    spec = load_spec(args.spec) if args.spec else desk_spec()
    if args.data:
        archive = load_archive(args.data)
        manifest, samples = archive.manifest, archive.samples
    else:
        manifest, samples = synth_generate(spec, args.seed)
    model_cfg = run.model_config(manifest)
    model = load_trained(args.ckpt)[0] if args.ckpt else MUGL(model_cfg)
    step = max(1, len(samples) // args.batch)
    data = prepare_data(samples[::step][: args.batch], manifest.skeleton)
    report = loss_gradcheck(model, data, manifest.skeleton, run.loss_weights(), seed=args.seed,
                            max_entries=args.entries)
    print(f"max relative error {report.max_rel_error:.3e} at {report.worst} over {report.checked} entries")
    if not report.passed:
        print(f"gradient check FAILED: error >= {report.tol:g}", file=sys.stderr)
        return 1
    print("gradient check passed")
    return 0


def cmd_fk_check(args) -> int:
    archive = load_archive(args.data)
    sk = archive.manifest.skeleton
    rest = bone_lengths(sk.rest, sk.tree)
    worst = 0.0
    for s in archive.samples:
        world = sequence_world(s, sk)[: s.length]
        lens = bone_lengths(world.reshape(-1, *world.shape[-2:]), sk.tree)
        dev = np.abs(lens - rest) / rest
        worst = max(worst, float(dev.max()))
    print(f"{len(archive.samples)} samples, max relative bone-length deviation {worst:.3e}")
    if worst > args.tol:
        print(f"bone-length audit FAILED: deviation > {args.tol:g}", file=sys.stderr)
        return 1
    return 0


# -- parser -----------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="mugl", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"mugl {__version__}")
    p.add_argument("--threads", type=int, default=None, help="torch intra-op threads (default: $MUGL_THREADS or 1)")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth-data", help="write a synthetic action archive")
    s.add_argument("--spec", help="synthesis spec JSON (default: built-in desk set)")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.set_defaults(fn=cmd_synth_data)

    s = sub.add_parser("train", help="train a model on an archive")
    s.add_argument("--data", required=True)
    s.add_argument("--config", help="flat JSON run config (default: desk settings)")
    s.add_argument("--seed", type=int, default=None)
    s.add_argument("--out", required=True, help="checkpoint path")
    s.set_defaults(fn=cmd_train)

    s = sub.add_parser("generate", help="sample sequences from a trained model")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--class", dest="class_", type=int, default=None, help="class id (default: every class)")
    s.add_argument("--count", type=int, default=100, help="samples per class")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--upsample", type=int, default=1, help="temporal upsampling factor")
    s.add_argument("--out", required=True)
    s.set_defaults(fn=cmd_generate)

    s = sub.add_parser("eval", help="per-class MMD-A / MMD-S of generated vs reference archives")
    s.add_argument("--gen", required=True)
    s.add_argument("--ref", required=True)
    s.add_argument("--out", required=True, help="CSV report path")
    s.set_defaults(fn=cmd_eval)

    s = sub.add_parser("export-json", help="convert an archive to JSON")
    s.add_argument("--data", required=True)
    s.add_argument("--joints", action="store_true", help="include world joint positions")
    s.add_argument("--out", required=True)
    s.set_defaults(fn=cmd_export_json)

    s = sub.add_parser("import-json", help="convert JSON back to a binary archive")
    s.add_argument("--json", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(fn=cmd_import_json)

    s = sub.add_parser("gradcheck", help="finite-difference check of the training loss gradients")
    s.add_argument("--config")
    s.add_argument("--spec")
    s.add_argument("--data")
    s.add_argument("--ckpt")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--batch", type=int, default=8)
    s.add_argument("--entries", type=int, default=6, help="coordinates probed per parameter tensor")
    s.set_defaults(fn=cmd_gradcheck)

    s = sub.add_parser("fk-check", help="audit bone lengths of every sample in an archive")
    s.add_argument("--data", required=True)
    s.add_argument("--tol", type=float, default=1e-4)
    s.set_defaults(fn=cmd_fk_check)
    return p


def resolve_threads(flag: int | None) -> int:
    if flag is not None:
        n = flag
    else:
        env = os.environ.get("MUGL_THREADS")
        try:
            n = int(env) if env else 1
        except ValueError as exc:
            raise ConfigError(f"MUGL_THREADS must be an integer, got {env!r}") from exc
    if n < 1:
        raise ConfigError("thread count must be >= 1")
    return n


def dispatch(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(name)s: %(message)s")
    try:
        torch.set_num_threads(resolve_threads(args.threads))
        return args.fn(args)
    except MuglError as exc:
        print(f"mugl {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


def main() -> None:
    sys.exit(dispatch())


if __name__ == "__main__":
    main()
