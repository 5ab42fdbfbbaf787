"""Command-line entry point: ``anids {gen-data,pretrain,train,probe,reduce-check}``.

Configuration is a JSON object with optional sections::

    {"data":  {"potential": {"preset": "harmonic_diatomic"}, "n_frames": 1000,
               "temperature": 0.1, "val_fraction": 0.2, "seed": 0},
     "train": {"steps": 5000, "lr": 0.001, "noise_mode": "anids", ...},
     "probe": {"delta": 0.05, "n_magnitudes": 8, "seed": 0}}

Unknown keys are rejected.  Exit codes: 0 success, 1 usage or configuration
error, 2 runtime failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from . import analysis, moldata, trainer
from .errors import AnidsError
from .moldata import Molecule, ToyPotential

log = logging.getLogger("anids")

CHECKPOINT_FILE = "checkpoint.json"
LOG_FILE = "log.csv"


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


@dataclass(frozen=True)
class DataConfig:
    potential: dict | None = None
    n_frames: int = 1000
    temperature: float = 0.1
    val_fraction: float = 0.2
    corr_steps: int = 100
    dt: float | None = None
    burn_in: int | None = None
    seed: int = 0


@dataclass(frozen=True)
class ProbeConfig:
    delta: float = 0.05
    n_magnitudes: int = 8
    seed: int = 0


def _section(cls, d):
    d = dict(d or {})
    unknown = sorted(set(d) - {f.name for f in fields(cls)})
    if unknown:
        raise UsageError(f"unknown option(s) {', '.join(unknown)}")
    return cls(**d)


def load_config(path) -> dict:
    """Parse a config file into ``{"data": DataConfig, "train": TrainConfig, "probe": ProbeConfig}``."""
    raw = {}
    if path is not None:
        try:
            raw = json.loads(Path(path).read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise UsageError(f"{path}: invalid JSON: {exc}") from exc
        if not isinstance(raw, dict):
            raise UsageError(f"{path}: config must be a JSON object")
    extra = sorted(set(raw) - {"data", "train", "probe"})
    if extra:
        raise UsageError(f"unknown config section(s) {', '.join(extra)}")
    try:
        return {
            "data": _section(DataConfig, raw.get("data")),
            "train": trainer.TrainConfig.from_dict(raw.get("train")),
            "probe": _section(ProbeConfig, raw.get("probe")),
        }
    except (TypeError, ValueError) as exc:
        raise UsageError(str(exc)) from exc


# -- verbs -----------------------------------------------------------------------------

def cmd_gen_data(args, conf) -> int:
    dc: DataConfig = conf["data"]
    seed = dc.seed if args.seed is None else args.seed
    pot = ToyPotential.from_dict(dc.potential or {"preset": "harmonic_diatomic"})
    frames = []
    if dc.n_frames > 0:
        frames = moldata.sample_boltzmann(pot, dc.n_frames, dc.temperature, seed, dc.dt, dc.corr_steps, dc.burn_in)
    order = np.random.default_rng([seed, 7]).permutation(dc.n_frames)
    n_val = int(round(dc.val_fraction * dc.n_frames))
    splits = {"train": sorted(order[n_val:].tolist()), "val": sorted(order[:n_val].tolist())}
    meta = {**asdict(dc), "seed": seed}
    path = moldata.write_dataset(args.out, frames, splits, pot, meta)
    print(f"wrote {len(frames)} frames to {path.parent}")
    return 0


def _train_config(args, conf) -> trainer.TrainConfig:
    cfg = conf["train"]
    changes = {}
    if args.seed is not None:
        changes["seed"] = args.seed
    if args.steps is not None:
        changes["steps"] = args.steps
    if args.noise_mode is not None:
        changes["noise_mode"] = args.noise_mode
    if getattr(args, "freeze_generator", False):
        changes["freeze_generator"] = True
    return cfg.replace(**changes) if changes else cfg


def _run_training(args, conf, supervised: bool) -> int:
    if args.data is None:
        raise UsageError("--data is required")
    frames, manifest = moldata.read_dataset(args.data)
    train_idx = manifest["splits"].get("train", list(range(len(frames))))
    phase = "train" if supervised else "pretrain"
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    cfg = _train_config(args, conf)
    append = False
    if args.checkpoint:
        blob = json.loads(Path(args.checkpoint).read_text(encoding="utf-8"))
        if args.config is None:
            cfg = _train_config(args, {"train": trainer.TrainConfig.from_dict(blob["config"])})
        run = trainer.load_checkpoint(args.checkpoint, frames, cfg)
        if blob.get("phase", "pretrain") == phase:
            append = (out / LOG_FILE).exists()
        else:
            # fresh supervised run starting from pretrained weights
            run = trainer.new_run(cfg, frames, train_idx, params=run.params)
    else:
        run = trainer.new_run(cfg, frames, train_idx)
    first = len(run.log)
    trainer.train(run, cfg.steps, supervised)
    trainer.save_checkpoint(run, out / CHECKPOINT_FILE, phase)
    trainer.write_log(out / LOG_FILE, run.log[first:], append=append)
    summary = {"phase": phase, "steps": run.step, "skipped": len(run.skipped)}
    if run.log:
        summary["last"] = dict(zip(("step", "anids", "kl", "gamma", "energy", "force", "total"), run.log[-1]))
    if supervised:
        val = [frames[i] for i in manifest["splits"].get("val", [])]
        if val:
            summary["val"] = trainer.force_metrics(run.params, cfg, val)
    (out / "summary.json").write_text(json.dumps(summary, indent=1, sort_keys=True) + "\n", encoding="utf-8")
    print(json.dumps(summary, sort_keys=True))
    return 0


def cmd_pretrain(args, conf) -> int:
    return _run_training(args, conf, supervised=False)


def cmd_train(args, conf) -> int:
    return _run_training(args, conf, supervised=True)


def cmd_probe(args, conf) -> int:
    if not args.checkpoint:
        raise UsageError("--checkpoint is required")
    run = trainer.load_checkpoint(args.checkpoint)
    cfg = run.config
    pc: ProbeConfig = conf["probe"]
    delta = pc.delta if args.delta is None else args.delta
    seed = pc.seed if args.seed is None else args.seed
    pot = None
    if args.data is not None:
        _, manifest = moldata.read_dataset(args.data)
        if manifest.get("potential"):
            pot = ToyPotential.from_dict(manifest["potential"])
    if pot is None:
        if conf["data"].potential is None:
            raise UsageError("no reference potential: pass --data or set data.potential in the config")
        pot = ToyPotential.from_dict(conf["data"].potential)
    if args.structure:
        mol = moldata.read_extxyz(args.structure)[0]
    else:
        mol = Molecule(pot.atomic_numbers, pot.reference)
    mode = args.noise_mode or cfg.noise_mode
    report = analysis.probe(run.params, cfg.encoder, mol, pot, delta, pc.n_magnitudes, seed, mode, cfg.sigma_p)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    report.write(out / "probe.json", out / "probe.csv")
    d = report.to_dict()
    print(json.dumps({"spearman": d["spearman"], "mean_bond_alignment": d["mean_bond_alignment"]}, sort_keys=True))
    return 0


def cmd_reduce_check(args, conf) -> int:
    checks = analysis.reduce_check(seed=0 if args.seed is None else args.seed)
    for c in checks:
        print(c.line())
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        blob = [asdict(c) for c in checks]
        (out / "reduce_check.json").write_text(json.dumps(blob, indent=1) + "\n", encoding="utf-8")
    return 0 if all(c.passed for c in checks) else 2


COMMANDS = {
    "gen-data": cmd_gen_data,
    "pretrain": cmd_pretrain,
    "train": cmd_train,
    "probe": cmd_probe,
    "reduce-check": cmd_reduce_check,
}


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="anids", description="Anisotropic denoising toolkit for atomistic systems.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)
    common = _Parser(add_help=False)
    common.add_argument("--config", type=Path, help="JSON config file")
    common.add_argument("--seed", type=int, help="override the seed of the relevant config section")
    common.add_argument("--out", type=Path, default=Path("."), help="output directory")
    common.add_argument("-v", "--verbose", action="store_true")

    sub.add_parser("gen-data", parents=[common], help="sample a toy Boltzmann dataset")
    for name, text in (("pretrain", "pretrain generator and denoiser"), ("train", "supervised training")):
        sp = sub.add_parser(name, parents=[common], help=text)
        sp.add_argument("--data", type=Path, help="dataset directory or manifest")
        sp.add_argument("--checkpoint", type=Path, help="resume, or start from pretrained weights")
        sp.add_argument("--steps", type=int, help="number of steps to run")
        sp.add_argument("--noise-mode", choices=("anids", "dens", "denoisevae"))
        if name == "train":
            sp.add_argument("--freeze-generator", action="store_true", help="keep noise generator fixed")
    sp = sub.add_parser("probe", parents=[common], help="eigen-probe a checkpoint against the toy potential")
    sp.add_argument("--checkpoint", type=Path)
    sp.add_argument("--data", type=Path, help="dataset whose manifest names the potential")
    sp.add_argument("--structure", type=Path, help="extxyz file; first frame is probed")
    sp.add_argument("--delta", type=float, help="largest probe displacement in angstrom")
    sp.add_argument("--noise-mode", choices=("anids", "dens", "denoisevae"))
    sub.add_parser("reduce-check", parents=[common], help="run the special-case reduction suite")
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        conf = load_config(args.config)
        return COMMANDS[args.command](args, conf)
    except UsageError as exc:
        print(f"anids {args.command}: error: {exc}", file=sys.stderr)
        return 1
    except (AnidsError, OSError, KeyError, ValueError) as exc:
        print(f"anids {args.command}: failed: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
