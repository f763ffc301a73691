"""Excerpt datasets on disk.

A dataset directory holds one ``<id>.mid`` and one ``<id>.prt`` per excerpt
plus ``manifest.json`` with the concept name, source and excerpt length.
Directories of plain MIDI files (no PRT1 rolls) are also accepted; each file
is then split into non-overlapping excerpts.
"""

from __future__ import annotations

import hashlib
import json
import warnings
from pathlib import Path

import numpy as np

from . import prt
from .errors import DataError
from .midi_roll import (
    DEFAULT_LENGTH,
    DEFAULT_STEP,
    MidiParseError,
    PatternSpec,
    PianoRoll,
    crop_or_pad,
    parse_midi,
    sample_excerpts,
    segment,
    synth_concept,
)
from .prt import PrtError
from .render import export_midi

MANIFEST = "manifest.json"
# synthetic pieces are a bit longer than an excerpt so the start offset varies
PIECE_LENGTH = 25.0
KINDS = ("alberti_bass", "random")
_ALIASES = {"alberti": "alberti_bass", "alberti_bass": "alberti_bass", "random": "random"}
_KIND_TAG = {"alberti_bass": 1, "random": 2}


def canonical_kind(name: str) -> str:
    try:
        return _ALIASES[name]
    except KeyError:
        raise ValueError(f"unknown synthetic pattern {name!r}; choose from {sorted(_ALIASES)}") from None


def derive_seed(*parts: int) -> int:
    """A 32-bit seed that depends on every part; used for per-excerpt streams."""
    return int(np.random.SeedSequence([int(p) for p in parts]).generate_state(1)[0])


def synth_excerpts(kind: str, count: int, seed: int, purpose: int = 0, length: float = DEFAULT_LENGTH) -> list[PianoRoll]:
    """``count`` excerpts of the synthetic ``kind``; one piece per excerpt."""
    kind = canonical_kind(kind)
    rolls = []
    for i in range(count):
        s = derive_seed(seed, _KIND_TAG[kind], purpose, i)
        seq = synth_concept(PatternSpec.randomized(kind, s), PIECE_LENGTH)
        roll = sample_excerpts(seq, 1, length, rng_seed=s, source=f"{kind}:{s}")[0]
        roll.meta["seed"] = s
        rolls.append(roll)
    return rolls


def write_excerpt_dir(
    directory: str | Path,
    rolls: list[PianoRoll],
    name: str,
    source: str,
    length: float = DEFAULT_LENGTH,
    extra: dict | None = None,
) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    ids = []
    for i, roll in enumerate(rolls):
        ident = f"{i:04d}"
        (directory / f"{ident}.mid").write_bytes(export_midi(roll))
        prt.save(directory / f"{ident}.prt", roll.grid, {"step": roll.step, **roll.meta})
        ids.append(ident)
    manifest = {"concept": name, "source": source, "excerpt_length": length, "count": len(rolls), "excerpts": ids}
    manifest.update(extra or {})
    (directory / MANIFEST).write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return directory


def read_manifest(directory: str | Path) -> dict:
    path = Path(directory) / MANIFEST
    if not path.exists():
        return {}
    try:
        return json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise DataError(f"{path}: invalid manifest ({exc})") from exc


def load_excerpt_dir(directory: str | Path, steps: int | None = None) -> tuple[np.ndarray, list[str], dict]:
    """Load every excerpt as a ``(N, 88, T)`` float32 array with ids.

    PRT1 rolls take precedence over MIDI files. ``steps`` center-crops or
    pads each roll to a common width.
    """
    directory = Path(directory)
    if not directory.is_dir():
        raise DataError(f"{directory}: not a directory")
    manifest = read_manifest(directory)
    length = float(manifest.get("excerpt_length", DEFAULT_LENGTH))
    rolls: list[PianoRoll] = []
    ids: list[str] = []
    prts = sorted(directory.glob("*.prt"))
    if prts:
        for path in prts:
            try:
                grid, meta = prt.load(path)
                rolls.append(PianoRoll(grid, float(meta.get("step", DEFAULT_STEP)), meta))
            except (PrtError, ValueError) as exc:
                raise DataError(f"{path}: {exc}") from exc
            ids.append(path.stem)
    else:
        for path in sorted(p for p in directory.iterdir() if p.suffix.lower() in (".mid", ".midi")):
            try:
                seq = parse_midi(path.read_bytes())
            except MidiParseError as exc:
                raise DataError(f"{path}: {exc}") from exc
            with warnings.catch_warnings():
                warnings.simplefilter("ignore")
                pieces = segment(seq, length, source=path.name)
            for k, roll in enumerate(pieces):
                rolls.append(roll)
                ids.append(f"{path.stem}#{k}")
    if not rolls:
        raise DataError(f"{directory}: no .prt or .mid excerpts found")
    width = steps or rolls[0].num_steps
    grids = [r.grid if r.num_steps == width else crop_or_pad(r, width).grid for r in rolls]
    return np.stack(grids).astype(np.float32), ids, manifest


def hash_tree(path: str | Path) -> str:
    """SHA-256 over relative names and contents of every file under ``path``."""
    path = Path(path)
    h = hashlib.sha256()
    files = [path] if path.is_file() else sorted(p for p in path.rglob("*") if p.is_file())
    for f in files:
        h.update(str(f.relative_to(path) if f != path else f.name).encode())
        h.update(b"\0")
        h.update(hashlib.sha256(f.read_bytes()).digest())
    return h.hexdigest()


# purpose tags keep the excerpt streams of different splits independent
PURPOSE = {"train": 1, "val": 2, "eval": 3, "concept": 4}
RANDOM_PURPOSE_BASE = 10


def write_concept_set(out: str | Path, concept: str, count: int, seed: int, length: float = DEFAULT_LENGTH) -> Path:
    kind = canonical_kind(concept)
    rolls = synth_excerpts(kind, count, seed, PURPOSE["concept"], length)
    return write_excerpt_dir(out, rolls, concept, f"synthetic:{kind}", length, {"seed": seed})


def write_random_sets(out: str | Path, sets: int, count: int, seed: int, length: float = DEFAULT_LENGTH) -> list[Path]:
    out = Path(out)
    dirs = []
    for j in range(sets):
        rolls = synth_excerpts("random", count, seed, RANDOM_PURPOSE_BASE + j, length)
        dirs.append(write_excerpt_dir(out / f"random_{j:02d}", rolls, f"random_{j:02d}", "synthetic:random", length, {"seed": seed}))
    return dirs


def write_class_sets(
    out: str | Path, classes: list[str], sizes: dict[str, int], seed: int, length: float = DEFAULT_LENGTH
) -> dict[str, dict[str, Path]]:
    """``out/<split>/<class>`` excerpt directories for each split in ``sizes``."""
    out = Path(out)
    written: dict[str, dict[str, Path]] = {}
    for split, count in sizes.items():
        for name in classes:
            kind = canonical_kind(name)
            rolls = synth_excerpts(kind, count, seed, PURPOSE[split], length)
            path = write_excerpt_dir(out / split / name, rolls, name, f"synthetic:{kind}", length, {"seed": seed, "split": split})
            written.setdefault(split, {})[name] = path
    return written
