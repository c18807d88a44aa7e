"""Command-line entry point.

Every subcommand takes ``--config`` (YAML) and ``--run-dir``; phases already
present in the run directory with a matching hash are reused.  Reports go to
stdout as JSON and are also written under the run directory.

Exit codes: 0 success, 2 invalid config or arguments, 3 stale checkpoint,
4 phase/runtime failure, 5 dataset error.
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

import numpy as np
import torch
import yaml

from .config import ConfigError, ExperimentConfig, config_from_dict, load_config
from .data import DatasetError, load_dataset
from .models import load_checkpoint, save_checkpoint
from .ntk import KernelDataset, median_gamma, toy_gaussians, verify_assumption1
from .pipeline import evaluate_attack
from .runner import PhaseError, Run, StaleCheckpointError, sweep, train_config
from .training import accuracy, train_classifier
from .wavelet import perturb_midhigh, save_pyramid, sdwt_decompose

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_STALE = 3
EXIT_RUNTIME = 4
EXIT_DATA = 5

log = logging.getLogger("fulltarget")


def _emit(obj, path: Path = None):
    text = json.dumps(obj, indent=2, sort_keys=True)
    if path is not None:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(text)
    print(text)


def _config(args) -> ExperimentConfig:
    cfg = load_config(args.config) if args.config else config_from_dict({})
    if getattr(args, "paradigm", None):
        cfg = dataclasses.replace(cfg, paradigm=args.paradigm).validate()
    return cfg


def _run(args, cfg=None) -> Run:
    return Run(cfg or _config(args), args.run_dir, reuse_from=args.reuse_from or (), force=args.force)


def dump_pyramids(run: Run, out_dir, count: int = 4) -> list:
    """Write S-DWT pyramids of the first ``count`` training images and their perturbed versions."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    train, _ = run.datasets()
    rng = np.random.default_rng(run.cfg.seeds.trigger)
    n = min(count, len(train))
    refs = (np.arange(n) + rng.integers(1, len(train), size=n)) % len(train)
    perturbed = perturb_midhigh(train.images[:n], train.images[refs], run.cfg.trigger.k)
    written = []
    for i in range(n):
        written.append(str(save_pyramid(sdwt_decompose(train.images[i]), out / f"clean-{i:03d}.ffpy")))
        written.append(str(save_pyramid(sdwt_decompose(perturbed[i]), out / f"perturbed-{i:03d}.ffpy")))
    return written


# -- subcommands -----------------------------------------------------------------

def cmd_train_proxy(args):
    run = _run(args)
    run.proxy()
    _emit(json.loads((run.dir / "train-proxy" / "phase.json").read_text()))


def cmd_centroids(args):
    run = _run(args)
    c = run.centroids()
    _emit({"num_classes": c.num_classes, "latent_dim": int(c.centroids.shape[1])})


def cmd_train_trigger(args):
    run = _run(args)
    if args.dump_pyramid:
        dump_pyramids(run, args.dump_pyramid)
    run.generator()
    _emit(json.loads((run.dir / "train-trigger" / "phase.json").read_text()))


def cmd_poison(args):
    cfg = _config(args)
    if args.plan:
        plan = yaml.safe_load(Path(args.plan).read_text()) or {}
        unknown = set(plan) - {"rate", "seed"}
        if unknown:
            raise ConfigError(f"unknown plan key(s): {', '.join(sorted(unknown))}")
        cfg = dataclasses.replace(
            cfg, poison=dataclasses.replace(cfg.poison, rate=plan.get("rate", cfg.poison.rate)),
            seeds=dataclasses.replace(cfg.seeds, poison=plan.get("seed", cfg.seeds.poison))).validate()
    run = _run(args, cfg)
    _, manifest = run.poisoned()
    _emit(manifest)


def cmd_train_victim(args):
    run = _run(args)
    if args.data is None:
        run.victim()
        _emit(json.loads((run.dir / "train-victim" / "phase.json").read_text()))
        return
    data = load_dataset(Path(args.data) / "train.npz")
    _, test = run.datasets()
    cfg = run.cfg
    model = train_classifier(data, cfg.victim_arch, train_config(cfg.victim_schedule, cfg.seeds.victim))
    out = Path(args.out) if args.out else run.dir / "external-victim.pt"
    save_checkpoint(model, out, in_channels=data.image_shape[0], image_size=data.image_shape[1:])
    _emit({"checkpoint": str(out), "train_acc": model.train_accuracy, "test_acc": accuracy(model, test)})


def cmd_evaluate(args):
    run = _run(args)
    if args.victim is None and args.generator is None:
        _emit(json.loads(run.evaluate().to_json()))
        return
    _, test = run.datasets()
    victim = load_checkpoint(args.victim)[0] if args.victim else run.victim()
    gen = load_checkpoint(args.generator)[0] if args.generator else run.generator()
    clean = run.clean_victim()
    torch.manual_seed(run.cfg.seeds.evaluation)
    report = evaluate_attack(victim, gen, test, accuracy(clean, test), clean_model=clean)
    text = report.to_json()
    if args.out:
        Path(args.out).write_text(text)
    print(text)


def cmd_sweep(args):
    cfg = _config(args)
    rates = sorted(args.rates)
    _emit(sweep(cfg, args.run_dir, rates, args.tolerance), Path(args.run_dir) / "sweep.json")


def cmd_defend(args):
    run = _run(args)
    if args.defense == "strip":
        _emit(run.defend_strip(), run.dir / "defend" / "strip.json")
    else:
        _emit(run.defend_fineprune(), run.dir / "defend" / "fineprune.json")


def _load_kernel_file(path, gamma_arg) -> KernelDataset:
    with np.load(path) as z:
        x = np.asarray(z["samples"], dtype=np.float64)
        y = np.asarray(z["labels"], dtype=np.int64)
    x = x.reshape(len(x), -1)
    g = median_gamma(x) if gamma_arg == "auto" else float(gamma_arg)
    return KernelDataset(x, y, g, int(y.max()) + 1)


def cmd_verify_ntk(args):
    if args.gamma != "auto":
        try:
            if float(args.gamma) <= 0:
                raise ValueError
        except ValueError:
            raise ConfigError(f"--gamma must be 'auto' or a positive number, got {args.gamma!r}") from None
    if args.dataset == "toy":
        counts = [args.per_class] * args.classes
        if args.imbalance != 1:
            counts[0] = int(round(args.per_class * args.imbalance))
        ds = toy_gaussians(counts, dim=args.dim, seed=args.seed)
    else:
        if not args.file:
            raise ConfigError("--dataset file requires --file <npz with samples, labels>")
        try:
            ds = _load_kernel_file(args.file, args.gamma)
        except (OSError, KeyError) as exc:
            raise DatasetError(f"{args.file}: {exc}") from exc
    gamma = "auto" if args.gamma == "auto" else float(args.gamma)
    rep = verify_assumption1(ds, trials=args.trials, gamma=gamma, seed=args.seed)
    rep["class_counts"] = ds.class_counts.tolist()
    if not args.full:
        rep.pop("pairs")
    _emit(rep, Path(args.out) if args.out else None)


def cmd_run(args):
    run = _run(args)
    if args.dump_pyramid:
        dump_pyramids(run, args.dump_pyramid)
    report = run.run()
    print(report.to_json())


# -- parser ------------------------------------------------------------------------

def _run_args(p):
    p.add_argument("--config", help="experiment YAML; defaults apply when omitted")
    p.add_argument("--run-dir", required=True)
    p.add_argument("--reuse-from", nargs="*", default=[], help="other run directories to take matching phases from")
    p.add_argument("--force", action="store_true", help="recompute phases instead of loading them")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="fulltarget", description=__doc__.splitlines()[0])
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train-proxy", help="train the attacker's proxy classifier")
    _run_args(p)
    p.set_defaults(fn=cmd_train_proxy)

    p = sub.add_parser("centroids", help="per-class latent centroids of the proxy")
    _run_args(p)
    p.set_defaults(fn=cmd_centroids)

    p = sub.add_parser("train-trigger", help="train the class-conditional trigger generator")
    _run_args(p)
    p.add_argument("--paradigm", choices=("fsba", "fmba"))
    p.add_argument("--dump-pyramid", metavar="DIR", help="write S-DWT pyramids of a few samples as FFPY files")
    p.set_defaults(fn=cmd_train_trigger)

    p = sub.add_parser("poison", help="build the clean-label poisoned training set")
    _run_args(p)
    p.add_argument("--plan", help="YAML/JSON with optional keys rate, seed")
    p.set_defaults(fn=cmd_poison)

    p = sub.add_parser("train-victim", help="train the victim on poisoned data")
    _run_args(p)
    p.add_argument("--data", help="directory holding train.npz (defaults to the run's poison phase)")
    p.add_argument("--out", help="checkpoint path when --data is given")
    p.set_defaults(fn=cmd_train_victim)

    p = sub.add_parser("evaluate", help="ASR/BA/DV and visual metrics")
    _run_args(p)
    p.add_argument("--victim", help="victim checkpoint (defaults to the run's)")
    p.add_argument("--generator", help="generator checkpoint (defaults to the run's)")
    p.add_argument("--out", help="also write the report here")
    p.set_defaults(fn=cmd_evaluate)

    p = sub.add_parser("sweep", help="poison-rate sweep sharing proxy, generator and clean model")
    _run_args(p)
    p.add_argument("--rates", type=float, nargs="+", required=True)
    p.add_argument("--tolerance", type=float, default=0.05)
    p.set_defaults(fn=cmd_sweep)

    p = sub.add_parser("defend", help="STRIP or Fine-Pruning against the run's victim")
    _run_args(p)
    p.add_argument("defense", choices=("strip", "fineprune"))
    p.set_defaults(fn=cmd_defend)

    p = sub.add_parser("verify-ntk", help="kernel-regression check of near-equal class feature strength")
    p.add_argument("--dataset", choices=("toy", "file"), default="toy")
    p.add_argument("--file", help="npz with arrays samples (N, ...) and labels (N,)")
    p.add_argument("--trials", type=int, default=200)
    p.add_argument("--gamma", default="auto")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--classes", type=int, default=2, help="toy: number of classes")
    p.add_argument("--per-class", type=int, default=100, help="toy: samples per class")
    p.add_argument("--imbalance", type=float, default=1.0, help="toy: class 0 size multiplier")
    p.add_argument("--dim", type=int, default=8, help="toy: dimension")
    p.add_argument("--full", action="store_true", help="include the sampled index pairs")
    p.add_argument("--out")
    p.set_defaults(fn=cmd_verify_ntk)

    p = sub.add_parser("run", help="all phases end to end")
    _run_args(p)
    p.add_argument("--dump-pyramid", metavar="DIR")
    p.set_defaults(fn=cmd_run)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    try:
        args.fn(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except StaleCheckpointError as exc:
        print(f"stale checkpoint: {exc}", file=sys.stderr)
        return EXIT_STALE
    except DatasetError as exc:
        print(f"dataset error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except PhaseError as exc:
        print(str(exc), file=sys.stderr)
        return EXIT_RUNTIME
    except (ValueError, RuntimeError, OSError) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
