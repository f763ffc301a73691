"""Reproducible end-to-end runs driven by one JSON config and one seed.

A run directory holds one subdirectory per stage plus ``manifest.json``.
Each stage is keyed by a hash of its config section, the seed and the
output hashes of the stages it reads. A stage whose key and output hash
match the manifest is skipped, so rerunning a finished run is a no-op.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import logging
import os
import platform
import shutil
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any

import numpy as np
import scipy
import torch

from . import __version__, prt
from .cav import CavError, CavOptions, tcav_experiment
from .concepts import ExplainResult, explain
from .datasets import (
    hash_tree,
    load_excerpt_dir,
    write_class_sets,
    write_concept_set,
    write_random_sets,
)
from .errors import ConfigError, DataError, NumericError, ProbeError
from .factorization import FactorizationOptions, save_factors
from .midi_roll import DEFAULT_STEP, MidiParseError, PianoRoll
from .model import Classifier, ModelConfig, TrainConfig, train
from .prt import PrtError
from .render import RenderSpec, render_roll, write_renders

log = logging.getLogger(__name__)

SEED_ENV = "CONCEPT_PROBE_SEED"
STAGES = ("dataset", "train", "activations", "tcav", "explain", "render")
DEPENDS = {
    "dataset": (),
    "train": ("dataset",),
    "activations": ("dataset", "train"),
    "tcav": ("dataset", "train"),
    "explain": ("dataset", "train"),
    "render": ("dataset", "explain"),
}


@dataclass
class DataSection:
    dir: str | None = None  # existing dataset root; synthesized when None
    classes: list[str] = field(default_factory=lambda: ["alberti", "random"])
    concept: str = "alberti"
    train_per_class: int = 200
    val_per_class: int = 50
    eval_per_class: int = 50
    concept_excerpts: int = 30
    random_sets: int = 10
    random_excerpts: int = 30
    excerpt_length: float = 20.0


@dataclass
class ModelSection:
    channels: list[int] = field(default_factory=lambda: [8, 16, 32])
    explain_layer: int = -1


@dataclass
class TrainSection:
    epochs: int = 20
    batch_size: int = 8
    lr: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 1e-4


@dataclass
class TcavSection:
    enabled: bool = True
    alpha: float = 0.05
    epochs: int = 200
    lr: float = 0.001
    l2: float = 0.01
    controls: str = "pairs"


@dataclass
class ExplainSection:
    enabled: bool = True
    variant: str = "4d"
    ranks: list[int] = field(default_factory=lambda: [10, 4, 8, 4])
    k: int = 5
    max_outer_iters: int = 200
    tolerance: float = 1e-6


@dataclass
class RenderSection:
    enabled: bool = True
    thresholds: list[float] = field(default_factory=lambda: [0.4, 0.6, 0.8])
    px_per_step: int = 2
    px_per_pitch: int = 4
    concepts: str = "opposing"  # or "all"


@dataclass
class RunConfig:
    seed: int = 0
    data: DataSection = field(default_factory=DataSection)
    model: ModelSection = field(default_factory=ModelSection)
    train: TrainSection = field(default_factory=TrainSection)
    tcav: TcavSection = field(default_factory=TcavSection)
    explain: ExplainSection = field(default_factory=ExplainSection)
    render: RenderSection = field(default_factory=RenderSection)

    @classmethod
    def from_dict(cls, raw: dict[str, Any]) -> "RunConfig":
        if not isinstance(raw, dict):
            raise ConfigError("config must be a JSON object")
        kwargs = {}
        for f in dataclasses.fields(cls):
            if f.name not in raw:
                continue
            value = raw[f.name]
            if f.name == "seed":
                if not isinstance(value, int) or isinstance(value, bool):
                    raise ConfigError("seed must be an integer")
                kwargs["seed"] = value
            else:
                kwargs[f.name] = _section(f.default_factory, value, f.name)
        unknown = set(raw) - {f.name for f in dataclasses.fields(cls)}
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        cfg = cls(**kwargs)
        cfg.validate()
        return cfg

    @classmethod
    def load(cls, path: str | Path | None) -> "RunConfig":
        if path is None:
            cfg = cls()
        else:
            try:
                raw = json.loads(Path(path).read_text())
            except FileNotFoundError:
                raise ConfigError(f"config file {path} not found") from None
            except json.JSONDecodeError as exc:
                raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
            cfg = cls.from_dict(raw)
        env = os.environ.get(SEED_ENV)
        if env is not None:
            try:
                cfg.seed = int(env)
            except ValueError:
                raise ConfigError(f"{SEED_ENV}={env!r} is not an integer") from None
        return cfg

    def validate(self) -> None:
        d = self.data
        if d.dir is None and len(d.classes) < 2:
            raise ConfigError("need at least two classes")
        if d.random_sets < 2:
            raise ConfigError("tcav needs at least two random datasets")
        if min(d.train_per_class, d.eval_per_class, d.concept_excerpts, d.random_excerpts) < 1:
            raise ConfigError("dataset sizes must be positive")
        if self.explain.variant not in ("4d", "3d", "2d"):
            raise ConfigError(f"unknown factorization variant {self.explain.variant!r}")
        if len(self.explain.ranks) != 4 or min(self.explain.ranks) < 1:
            raise ConfigError("explain.ranks must be four positive integers N',H',W',C'")
        if self.render.concepts not in ("opposing", "all"):
            raise ConfigError("render.concepts must be 'opposing' or 'all'")
        if self.tcav.controls not in ("pairs", "cyclic"):
            raise ConfigError("tcav.controls must be 'pairs' or 'cyclic'")
        try:
            self.model_config()
            self.train_config()
            self.render_spec()
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)

    def model_config(self, num_classes: int | None = None) -> ModelConfig:
        steps = int(round(self.data.excerpt_length / DEFAULT_STEP))
        return ModelConfig(
            channels=tuple(self.model.channels),
            num_classes=num_classes or len(self.data.classes),
            input_shape=(88, steps),
            explain_layer=self.model.explain_layer,
            seed=self.seed,
        )

    def train_config(self) -> TrainConfig:
        t = self.train
        return TrainConfig(t.lr, t.momentum, t.weight_decay, t.epochs, t.batch_size, self.seed)

    def render_spec(self) -> RenderSpec:
        r = self.render
        return RenderSpec(thresholds=tuple(r.thresholds), px_per_step=r.px_per_step, px_per_pitch=r.px_per_pitch)


def _section(factory, value, name):
    if not isinstance(value, dict):
        raise ConfigError(f"config section {name!r} must be an object")
    default = factory()
    known = {f.name for f in dataclasses.fields(default)}
    unknown = set(value) - known
    if unknown:
        raise ConfigError(f"unknown keys in {name!r}: {sorted(unknown)}")
    return dataclasses.replace(default, **value)


def _digest(obj: Any) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True).encode()).hexdigest()


def versions() -> dict[str, str]:
    return {
        "concept_probe": __version__,
        "python": platform.python_version(),
        "numpy": np.__version__,
        "scipy": scipy.__version__,
        "torch": torch.__version__,
    }


class Run:
    """Stage runner over one run directory."""

    def __init__(self, root: str | Path, cfg: RunConfig):
        self.root = Path(root)
        self.cfg = cfg
        self.manifest_path = self.root / "manifest.json"
        self.manifest = self._read_manifest()

    # -- bookkeeping -----------------------------------------------------------
    def _read_manifest(self) -> dict:
        if self.manifest_path.exists():
            try:
                return json.loads(self.manifest_path.read_text())
            except json.JSONDecodeError as exc:
                raise DataError(f"{self.manifest_path}: corrupt manifest ({exc})") from exc
        return {}

    def _write_manifest(self) -> None:
        self.manifest.update({"versions": versions(), "seed": self.cfg.seed, "config": self.cfg.to_dict()})
        self.manifest.setdefault("stages", {})
        self.root.mkdir(parents=True, exist_ok=True)
        self.manifest_path.write_text(json.dumps(self.manifest, indent=2, sort_keys=True))

    def stage_dir(self, stage: str) -> Path:
        return self.root / stage

    def data_root(self) -> Path:
        return Path(self.cfg.data.dir) if self.cfg.data.dir else self.stage_dir("dataset")

    def _settings(self, stage: str) -> dict:
        c = self.cfg
        return {
            "dataset": {"data": asdict(c.data)},
            "train": {"model": asdict(c.model), "train": asdict(c.train), "classes": c.data.classes},
            "activations": {"layer": c.model.explain_layer},
            "tcav": {"tcav": asdict(c.tcav), "concept": c.data.concept},
            "explain": {"explain": asdict(c.explain)},
            "render": {"render": asdict(c.render)},
        }[stage]

    def _output_hash(self, stage: str) -> str:
        if stage == "dataset" and self.cfg.data.dir:
            return hash_tree(self.data_root())
        return hash_tree(self.stage_dir(stage))

    def _key(self, stage: str) -> tuple[str, dict]:
        inputs = {}
        for dep in DEPENDS[stage]:
            rec = self.manifest.get("stages", {}).get(dep)
            if rec is None:
                raise DataError(f"stage {stage} needs the output of stage {dep}; run it first")
            inputs[dep] = rec["output_hash"]
        key = _digest({"stage": stage, "seed": self.cfg.seed, "settings": self._settings(stage), "inputs": inputs, "version": __version__})
        return key, inputs

    def is_current(self, stage: str) -> bool:
        rec = self.manifest.get("stages", {}).get(stage)
        if rec is None:
            return False
        try:
            key, _ = self._key(stage)
        except DataError:
            return False
        path = self.data_root() if stage == "dataset" and self.cfg.data.dir else self.stage_dir(stage)
        return rec["key"] == key and path.exists() and self._output_hash(stage) == rec["output_hash"]

    def enabled(self, stage: str) -> bool:
        return {"tcav": self.cfg.tcav.enabled, "explain": self.cfg.explain.enabled, "render": self.cfg.render.enabled and self.cfg.explain.enabled}.get(stage, True)

    def run_stage(self, stage: str, force: bool = False) -> bool:
        """Run ``stage`` unless it is current; returns True when work was done."""
        if not force and self.is_current(stage):
            log.info("stage cached", extra={"event": "stage_cached", "stage": stage})
            return False
        key, inputs = self._key(stage)
        out = self.stage_dir(stage)
        if not (stage == "dataset" and self.cfg.data.dir):
            if out.exists():
                shutil.rmtree(out)
            out.mkdir(parents=True)
        log.info("stage start", extra={"event": "stage_start", "stage": stage})
        try:
            getattr(self, f"_stage_{stage}")(out)
        except ProbeError as exc:
            raise type(exc)(f"stage {stage}: {exc}") from exc
        except (MidiParseError, PrtError, FileNotFoundError) as exc:
            raise DataError(f"stage {stage}: {exc}") from exc
        except (CavError, FloatingPointError, np.linalg.LinAlgError) as exc:
            raise NumericError(f"stage {stage}: {exc}") from exc
        self.manifest.setdefault("stages", {})[stage] = {"key": key, "inputs": inputs, "output_hash": self._output_hash(stage)}
        self._write_manifest()
        log.info("stage done", extra={"event": "stage_done", "stage": stage})
        return True

    def run(self, stages: list[str] | None = None) -> dict[str, bool]:
        self._write_manifest()
        todo = stages or [s for s in STAGES if self.enabled(s)]
        return {s: self.run_stage(s) for s in todo}

    # -- data access -----------------------------------------------------------
    def _steps(self) -> int:
        return int(round(self.cfg.data.excerpt_length / DEFAULT_STEP))

    def _load(self, *parts: str) -> tuple[np.ndarray, list[str]]:
        x, ids, _ = load_excerpt_dir(self.data_root().joinpath(*parts), self._steps())
        return x, ids

    def _labeled(self, split: str) -> tuple[np.ndarray, np.ndarray]:
        xs, ys = [], []
        for o, name in enumerate(self.cfg.data.classes):
            path = self.data_root() / split / name
            if split == "val" and not path.exists():
                continue
            x, _ = self._load(split, name)
            xs.append(x)
            ys.append(np.full(len(x), o))
        if not xs:
            return np.zeros((0, 88, self._steps()), np.float32), np.zeros(0, int)
        return np.concatenate(xs), np.concatenate(ys)

    def _eval_sets(self) -> tuple[dict[int, np.ndarray], dict[int, list[str]]]:
        pieces, ids = {}, {}
        for o, name in enumerate(self.cfg.data.classes):
            x, names = self._load("eval", name)
            pieces[o] = x
            ids[o] = [f"{name}/{i}" for i in names]
        return pieces, ids

    def model(self) -> Classifier:
        path = self.stage_dir("train") / "model"
        if not (path / "manifest.json").exists():
            raise DataError(f"no trained model under {path}")
        return Classifier.load(path)

    # -- stages ----------------------------------------------------------------
    def _stage_dataset(self, out: Path) -> None:
        d = self.cfg.data
        if d.dir:
            if not Path(d.dir).is_dir():
                raise DataError(f"data.dir {d.dir} does not exist")
            return
        sizes = {"train": d.train_per_class, "eval": d.eval_per_class}
        if d.val_per_class:
            sizes["val"] = d.val_per_class
        try:
            write_class_sets(out, d.classes, sizes, self.cfg.seed, d.excerpt_length)
            write_concept_set(out / "concept", d.concept, d.concept_excerpts, self.cfg.seed, d.excerpt_length)
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
        write_random_sets(out / "random", d.random_sets, d.random_excerpts, self.cfg.seed, d.excerpt_length)

    def _stage_train(self, out: Path) -> None:
        tx, ty = self._labeled("train")
        vx, vy = self._labeled("val")
        model = Classifier(self.cfg.model_config(), self.cfg.data.classes)
        try:
            result = train(model, tx, ty, vx, vy, self.cfg.train_config())
        except ValueError as exc:
            raise DataError(str(exc)) from exc
        if result.history and not np.isfinite(result.history[-1]["loss"]):
            raise NumericError("training loss diverged")
        model.save(out / "model")
        (out / "metrics.json").write_text(json.dumps({"accuracy": result.accuracy, "macro_f1": result.macro_f1, "history": result.history}, indent=2, sort_keys=True))

    def _stage_activations(self, out: Path) -> None:
        model = self.model()
        layer = model._layer(None)
        pieces, ids = self._eval_sets()
        for o, x in pieces.items():
            acts = model.activations_at(x, layer)
            prt.save(out / f"{model.class_names[o]}.prt", acts, {"layer": layer, "excerpts": ids[o]})

    def _stage_tcav(self, out: Path) -> None:
        model = self.model()
        concept, _ = self._load("concept")
        random_root = self.data_root() / "random"
        random_dirs = sorted(p for p in random_root.iterdir() if p.is_dir()) if random_root.is_dir() else []
        if len(random_dirs) < 2:
            raise DataError(f"need at least two random datasets under {random_root}")
        randoms = [load_excerpt_dir(p, self._steps())[0] for p in random_dirs]
        pieces, _ = self._eval_sets()
        t = self.cfg.tcav
        report = tcav_experiment(
            model, concept, randoms, pieces, alpha=t.alpha, concept=self.cfg.data.concept,
            opts=CavOptions(t.epochs, t.lr, t.l2, self.cfg.seed), controls=t.controls,
        )
        (out / "report.json").write_text(json.dumps(report.to_dict(), indent=2, sort_keys=True))

    def _stage_explain(self, out: Path) -> None:
        model = self.model()
        pieces, ids = self._eval_sets()
        e = self.cfg.explain
        opts = FactorizationOptions(max_outer_iters=e.max_outer_iters, tolerance=e.tolerance, rng_seed=self.cfg.seed)
        try:
            result = explain(model, pieces, e.variant, e.ranks, opts=opts, k=e.k, excerpt_ids=ids)
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
        save_explain(out, result, e.variant, self.cfg.seed)

    def _stage_render(self, out: Path) -> None:
        explain_dir = self.stage_dir("explain")
        report = json.loads((explain_dir / "report.json").read_text())
        chosen = report["opposing"] if self.cfg.render.concepts == "opposing" else []
        chosen = chosen or [c["index"] for c in report["concepts"]]
        spec = self.cfg.render_spec()
        pieces, ids = self._eval_sets()
        rolls = {i: x for o in pieces for i, x in zip(ids[o], pieces[o])}
        for idx in chosen:
            for path in sorted((explain_dir / "heatmaps" / f"c{idx}").glob("*.prt")):
                hm, meta = prt.load(path)
                roll = PianoRoll(rolls[meta["excerpt"]])
                images = render_roll(roll, hm, spec, peak=meta["peak"])
                name = f"{path.stem}_" + meta["excerpt"].replace("/", "_").replace("#", "-")
                write_renders(out / f"c{idx}", name, images, roll)


def save_explain(out: str | Path, result: ExplainResult, variant: str, seed: int) -> None:
    """``report.json``, the factors and ``heatmaps/c<i>/{top,bottom}_<rank>.prt``."""
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    save_factors(out / "factors", result.factors, variant, seed)
    for kind, groups in (("top", result.heatmaps), ("bottom", result.contrast)):
        for idx, hms in groups.items():
            for rank, hm in enumerate(hms):
                meta = {"excerpt": hm.excerpt_id, "average_presence": hm.average_presence, "peak": result.peaks[idx], "concept": idx}
                prt.save(out / "heatmaps" / f"c{idx}" / f"{kind}_{rank}.prt", hm.map, meta)
    (out / "report.json").write_text(json.dumps(result.report, indent=2, sort_keys=True))


def run_pipeline(root: str | Path, cfg: RunConfig, stage: str | None = None) -> dict[str, bool]:
    if stage is not None and stage not in STAGES:
        raise ConfigError(f"unknown stage {stage!r}; choose from {STAGES}")
    return Run(root, cfg).run([stage] if stage else None)
