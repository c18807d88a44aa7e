"""Phase orchestration: proxy -> centroids -> trigger -> poison -> victim -> evaluate.

Every phase writes into ``<run>/<phase>/`` together with ``phase.json``
recording the hash of everything it depends on.  A phase directory whose hash
differs from the current config is stale and rejected; a matching one is
loaded instead of recomputed.  ``reuse_from`` lets a run pick up matching
phases from another run directory (sweeps and ablations share the proxy).
"""
from __future__ import annotations

import dataclasses
import hashlib
import json
import logging
import platform
from pathlib import Path
from typing import Callable, Dict, Optional, Sequence

import numpy as np
import torch

from . import __version__
from .config import ExperimentConfig, dump_config
from .data import (DatasetError, ImageDataset, load_cifar_binary, load_dataset, load_image_folder, make_synthetic,
                   save_dataset)
from .defenses import fine_prune, strip_compare, strip_report_json
from .fmba import FmbaSchedule, fmba_train
from .fsba import FsbaSchedule, fsba_train
from .models import TriggerGenerator, load_checkpoint, save_checkpoint
from .pipeline import AttackReport, PoisonPlan, build_poisoned_dataset, evaluate_attack, poison_rate_sweep, \
    target_rates, triggered
from .training import FeatureCentroids, TrainConfig, accuracy, compute_centroids, train_classifier

log = logging.getLogger(__name__)

PHASES = ("train-proxy", "centroids", "train-trigger", "poison", "train-victim", "evaluate")


class PhaseError(RuntimeError):
    def __init__(self, phase: str, message: str):
        super().__init__(f"phase {phase} failed: {message}")
        self.phase = phase


class StaleCheckpointError(PhaseError):
    pass


def _hash(*parts) -> str:
    return hashlib.sha256(json.dumps(parts, sort_keys=True, default=str).encode()).hexdigest()[:16]


def load_datasets(cfg: ExperimentConfig):
    ds = cfg.dataset
    size = (ds.image_size, ds.image_size)
    if ds.name == "synthetic":
        params = dataclasses.asdict(ds.synthetic)
        common = dict(num_classes=ds.num_classes, size=ds.image_size, channels=ds.channels, **params)
        train = make_synthetic(ds.train_per_class, seed=cfg.seeds.data, **common)
        test = make_synthetic(ds.test_per_class, seed=cfg.seeds.data + 10_000, **common)
        return train, test
    if ds.name == "folder":
        train = load_image_folder(ds.path, size, ds.channels)
        test = load_image_folder(ds.test_path, size, ds.channels) if ds.test_path else None
    else:
        train_files = sorted(Path(ds.path).glob("data_batch_*.bin")) or [Path(ds.path)]
        train = load_cifar_binary(train_files, size, ds.num_classes)
        test_file = Path(ds.test_path) if ds.test_path else Path(ds.path) / "test_batch.bin"
        test = load_cifar_binary([test_file], size, ds.num_classes) if test_file.exists() else None
    if test is None:
        raise PhaseError("train-proxy", "no test split found (set dataset.test_path)")
    return train, test


def train_config(sched, seed: int) -> TrainConfig:
    return TrainConfig(optimizer=sched.optimizer, lr=sched.lr, momentum=sched.momentum,
                       weight_decay=sched.weight_decay, lr_decay=sched.lr_decay, decay_every=sched.decay_every,
                       epochs=sched.epochs, batch_size=sched.batch_size, seed=seed)


def _write_jsonl(path: Path, records):
    with open(path, "w") as fh:
        for r in records:
            fh.write(json.dumps(r, sort_keys=True) + "\n")


class Run:
    def __init__(self, cfg: ExperimentConfig, run_dir, reuse_from: Sequence = (), force: bool = False):
        self.cfg = cfg.validate()
        self.dir = Path(run_dir)
        self.dir.mkdir(parents=True, exist_ok=True)
        self.reuse_from = [Path(p) for p in reuse_from]
        self.force = force
        self._train: Optional[ImageDataset] = None
        self._test: Optional[ImageDataset] = None
        self._cache: Dict[str, object] = {}
        c = cfg.to_dict()
        data_h = _hash(c["dataset"], cfg.seeds.data)
        proxy_h = _hash(data_h, c["proxy_arch"], c["classifier"], cfg.seeds.proxy)
        trig_h = _hash(proxy_h, c["paradigm"], c["trigger"], cfg.seeds.trigger)
        pois_h = _hash(trig_h, c["poison"], cfg.seeds.poison)
        vic_sched = dataclasses.asdict(cfg.victim_schedule)
        clean_h = _hash(data_h, c["victim_arch"], vic_sched, cfg.seeds.victim)
        vic_h = _hash(pois_h, clean_h)
        self.hashes = {
            "train-proxy": proxy_h,
            "centroids": _hash(proxy_h, "centroids"),
            "train-trigger": trig_h,
            "poison": pois_h,
            "train-clean": clean_h,
            "train-victim": vic_h,
            "evaluate": _hash(vic_h, trig_h, cfg.seeds.evaluation),
        }
        self._write_manifest()

    # -- bookkeeping ----------------------------------------------------------
    def _write_manifest(self):
        manifest = {
            "package": "fulltarget",
            "version": __version__,
            "torch": torch.__version__,
            "numpy": np.__version__,
            "python": platform.python_version(),
            "config": self.cfg.to_dict(),
            "seeds": dataclasses.asdict(self.cfg.seeds),
            "phase_hashes": self.hashes,
        }
        (self.dir / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
        (self.dir / "config.resolved.yaml").write_text(dump_config(self.cfg))

    def _locate(self, phase: str) -> Optional[Path]:
        """Directory holding a valid result for ``phase``, or None if it must run."""
        want = self.hashes[phase]
        own = self.dir / phase
        meta = own / "phase.json"
        if meta.exists() and not self.force:
            got = json.loads(meta.read_text()).get("hash")
            if got != want:
                raise StaleCheckpointError(phase, f"checkpoint hash {got} does not match config hash {want}")
            return own
        for other in self.reuse_from:
            m = other / phase / "phase.json"
            if m.exists() and json.loads(m.read_text()).get("hash") == want:
                return other / phase
        return None

    def _begin(self, phase: str) -> Path:
        d = self.dir / phase
        d.mkdir(parents=True, exist_ok=True)
        (d / "phase.json").unlink(missing_ok=True)
        return d

    def _finish(self, phase: str, d: Path, **info):
        info = {"phase": phase, "hash": self.hashes[phase], **info}
        (d / "phase.json").write_text(json.dumps(info, indent=2, sort_keys=True))

    def datasets(self):
        if self._train is None:
            self._train, self._test = load_datasets(self.cfg)
            self._train.validate_labels()
            self._test.validate_labels()
        return self._train, self._test

    def _guard(self, phase: str, fn: Callable):
        try:
            return fn()
        except (PhaseError, DatasetError):
            raise
        except Exception as exc:  # noqa: BLE001 - re-raised with the phase named
            raise PhaseError(phase, f"{type(exc).__name__}: {exc}") from exc

    # -- phases ---------------------------------------------------------------
    def proxy(self):
        return self._guard("train-proxy", lambda: self._classifier("train-proxy", "proxy.pt", self.cfg.proxy_arch,
                                                                     self.cfg.classifier, self.cfg.seeds.proxy,
                                                                     lambda: self.datasets()[0]))

    def clean_victim(self):
        return self._guard("train-victim", lambda: self._classifier("train-clean", "clean.pt", self.cfg.victim_arch,
                                                                      self.cfg.victim_schedule, self.cfg.seeds.victim,
                                                                      lambda: self.datasets()[0]))

    def victim(self):
        return self._guard("train-victim", lambda: self._classifier("train-victim", "victim.pt", self.cfg.victim_arch,
                                                                      self.cfg.victim_schedule, self.cfg.seeds.victim,
                                                                      lambda: self.poisoned()[0]))

    def _classifier(self, phase, fname, arch, sched, seed, get_data):
        if phase in self._cache:
            return self._cache[phase]
        where = self._locate(phase)
        if where is None:
            data = get_data()
            _, test = self.datasets()
            d = self._begin(phase)
            hist = []
            model = train_classifier(data, arch, train_config(sched, seed), history=hist)
            save_checkpoint(model, d / fname, in_channels=data.image_shape[0], image_size=data.image_shape[1:])
            _write_jsonl(d / "train_log.jsonl", hist)
            self._finish(phase, d, arch=arch, seed=seed, train_acc=model.train_accuracy,
                         test_acc=accuracy(model, test))
            where = d
        model, _, _ = load_checkpoint(where / fname)
        model.freeze()
        self._cache[phase] = model
        return model

    def centroids(self) -> FeatureCentroids:
        def go():
            if "centroids" in self._cache:
                return self._cache["centroids"]
            where = self._locate("centroids")
            if where is None:
                proxy = self.proxy()
                c = compute_centroids(proxy, self.datasets()[0])
                d = self._begin("centroids")
                torch.save(c.centroids, d / "centroids.pt")
                self._finish("centroids", d, num_classes=c.num_classes, latent_dim=int(c.centroids.shape[1]))
                where = d
            c = FeatureCentroids(torch.load(where / "centroids.pt"))
            self._cache["centroids"] = c
            return c
        return self._guard("centroids", go)

    def generator(self) -> TriggerGenerator:
        def go():
            if "train-trigger" in self._cache:
                return self._cache["train-trigger"]
            where = self._locate("train-trigger")
            if where is None:
                cfg = self.cfg
                train, _ = self.datasets()
                proxy, cents = self.proxy(), self.centroids()
                torch.manual_seed(cfg.seeds.trigger)
                gen = TriggerGenerator(train.num_classes, train.image_shape[0], train.image_shape[1:], cfg.epsilon,
                                       cfg.trigger.final_bn_init)
                t = cfg.trigger
                if cfg.paradigm == "fsba":
                    sched = FsbaSchedule(k=t.k, epochs=t.epochs, batch_size=t.batch_size, lr=t.lr,
                                         weights=cfg.weights, psnr_thresh=t.psnr_thresh, seed=cfg.seeds.trigger)
                    gen, tlog = fsba_train(gen, proxy, cents, train, sched)
                else:
                    s1 = t.stage1_epochs if t.stage1_epochs is not None else FmbaSchedule.split(t.epochs).stage1_epochs
                    sched = FmbaSchedule(stage1_epochs=s1, stage2_epochs=t.epochs - s1, batch_size=t.batch_size,
                                         lr=t.lr, stage1_weights=cfg.weights, stage2_weights=cfg.stage2_weights,
                                         psnr_thresh=t.psnr_thresh, seed=cfg.seeds.trigger)
                    gen, tlog = fmba_train(gen, proxy, cents, train, sched)
                d = self._begin("train-trigger")
                save_checkpoint(gen, d / "generator.pt")
                _write_jsonl(d / "trigger_log.jsonl", tlog.records)
                self._finish("train-trigger", d, paradigm=cfg.paradigm, output_padding=gen.output_padding,
                             conditioning=gen.conditioning, epsilon=gen.epsilon,
                             loss_terms=sorted({k for r in tlog.records for k in r if k.startswith("L_")}))
                where = d
            gen, _, _ = load_checkpoint(where / "generator.pt")
            self._cache["train-trigger"] = gen
            return gen
        return self._guard("train-trigger", go)

    def poisoned(self):
        def go():
            if "poison" in self._cache:
                return self._cache["poison"]
            where = self._locate("poison")
            if where is None:
                train, _ = self.datasets()
                plan = PoisonPlan(self.cfg.poison.rate, self.cfg.seeds.poison, "train-trigger/generator.pt")
                gen = self.generator() if plan.per_class_count(len(train), train.num_classes) > 0 else None
                pois, manifest = build_poisoned_dataset(train, gen, plan)
                d = self._begin("poison")
                save_dataset(pois, d / "train.npz")
                (d / "manifest.json").write_text(manifest.to_json())
                self._finish("poison", d, poisoned=len(manifest.indices), per_class=manifest.per_class_count)
                where = d
            pois = load_dataset(where / "train.npz")
            manifest = json.loads((where / "manifest.json").read_text())
            self._cache["poison"] = (pois, manifest)
            return pois, manifest
        return self._guard("poison", go)

    def evaluate(self) -> AttackReport:
        def go():
            where = self._locate("evaluate")
            if where is None:
                _, test = self.datasets()
                clean = self.clean_victim()
                victim = self.victim()
                gen = self.generator()
                torch.manual_seed(self.cfg.seeds.evaluation)
                report = evaluate_attack(victim, gen, test, accuracy(clean, test), clean_model=clean)
                d = self._begin("evaluate")
                (d / "report.json").write_text(report.to_json())
                self._finish("evaluate", d)
                where = d
            return AttackReport.from_json((where / "report.json").read_text())
        return self._guard("evaluate", go)

    def run(self) -> AttackReport:
        self.proxy()
        self.centroids()
        self.generator()
        self.poisoned()
        self.clean_victim()
        self.victim()
        return self.evaluate()

    # -- extras ---------------------------------------------------------------
    def defend_strip(self) -> dict:
        cfg = self.cfg.defense
        _, test = self.datasets()
        victim, gen = self.victim(), self.generator()
        rng = np.random.default_rng(self.cfg.seeds.evaluation)
        n = min(cfg.strip_inputs, len(test))
        idx = rng.choice(len(test), size=n, replace=False)
        x = torch.from_numpy(test.images[idx])
        y = test.labels[idx]
        targets = (y + rng.integers(1, test.num_classes, size=n)) % test.num_classes
        poisoned = triggered(gen, x, targets)
        pool_idx = rng.choice(len(test), size=min(len(test), 1000), replace=False)
        pool = torch.from_numpy(test.images[pool_idx])
        res = strip_compare(victim, x, poisoned, pool, cfg.strip_overlays, cfg.strip_blend,
                            seed=self.cfg.seeds.evaluation)
        return strip_report_json(res)

    def defend_fineprune(self) -> list:
        _, test = self.datasets()
        victim, gen = self.victim(), self.generator()
        rng = np.random.default_rng(self.cfg.seeds.evaluation)
        half = rng.permutation(len(test))
        clean_idx, eval_idx = half[: len(test) // 2], half[len(test) // 2:]
        eval_set = test.subset(eval_idx)

        def eval_fn(model):
            return {"ba": accuracy(model, eval_set), "asr_avg": float(np.mean(target_rates(model, gen, eval_set)))}

        curve = fine_prune(victim, test.images[clean_idx], self.cfg.defense.prune_fractions, eval_fn)
        return curve.as_json()


def sweep(cfg: ExperimentConfig, run_dir, rates, tolerance: float = 0.05) -> dict:
    """Poison-rate sweep sharing proxy, trigger and clean reference across rates."""
    base = Path(run_dir)

    def run_rate(rate):
        sub = dataclasses.replace(cfg, poison=dataclasses.replace(cfg.poison, rate=rate))
        return Run(sub, base / f"rate-{rate:g}", reuse_from=[base / "shared"]).run()

    shared = Run(cfg, base / "shared")
    shared.proxy()
    shared.centroids()
    shared.generator()
    shared.clean_victim()
    return poison_rate_sweep(run_rate, rates, tolerance)
