"""Synthetic concept and random note sequences with known ground truth.

All times are snapped to a 1/960 s grid, which is exactly one tick of the
MIDI export (480 PPQ at 120 bpm), so synthetic data survives a MIDI round
trip without drift.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Literal

import numpy as np

from .smf import HIGHEST_PITCH, LOWEST_PITCH, Note, NoteSequence

GRID = 1.0 / 960.0

MAJOR = (0, 2, 4, 5, 7, 9, 11)
MINOR = (0, 2, 3, 5, 7, 8, 10)
# scale-degree progressions (1-based) cycled one chord per bar
PROGRESSIONS = ((1, 4, 5, 1), (1, 6, 4, 5), (1, 5, 6, 4), (1, 2, 5, 1), (1, 4, 1, 5))


def _snap(t: float) -> float:
    return round(t / GRID) * GRID


@dataclass(frozen=True)
class PatternSpec:
    kind: Literal["alberti_bass", "random"] = "alberti_bass"
    key: int = 0  # tonic pitch class, 0 = C
    mode: Literal["major", "minor"] = "major"
    tempo: float = 120.0  # quarter notes per minute
    register: int = 3  # octave of the bass chord root (C3 = MIDI 48)
    notes_per_beat: int = 2  # bass note value: 2 = eighths, 4 = sixteenths
    progression: tuple[int, ...] | None = None  # None = drawn from the seed
    density: float = 4.0  # random kind: notes per second
    rng_seed: int = 0

    @classmethod
    def randomized(cls, kind: str, rng_seed: int) -> "PatternSpec":
        """Draw key, mode, tempo and register from the seed."""
        rng = np.random.default_rng([rng_seed, 7919])
        return cls(
            kind=kind,
            key=int(rng.integers(12)),
            mode="major" if rng.random() < 0.6 else "minor",
            tempo=float(rng.integers(80, 141)),
            register=int(rng.integers(2, 4)),
            notes_per_beat=int(rng.choice([2, 4])),
            density=float(rng.uniform(2.0, 6.0)),
            rng_seed=rng_seed,
        )


def _triad(spec: PatternSpec, degree: int) -> tuple[int, int, int]:
    scale = MAJOR if spec.mode == "major" else MINOR
    base = 12 * (spec.register + 1) + spec.key
    i = degree - 1
    root = base + scale[i % 7]
    third = base + scale[(i + 2) % 7] + 12 * ((i + 2) // 7)
    fifth = base + scale[(i + 4) % 7] + 12 * ((i + 4) // 7)
    return root, third, fifth


def _random_notes(rng: np.random.Generator, length: float, density: float, lo: int, hi: int) -> list[Note]:
    count = rng.poisson(density * length)
    busy = {}
    notes = []
    for onset in np.sort(rng.uniform(0.0, length, size=count)):
        pitch = int(rng.integers(lo, hi + 1))
        onset = _snap(float(onset))
        duration = max(GRID, _snap(float(rng.uniform(0.05, 1.0))))
        duration = min(duration, _snap(length - onset))
        velocity = int(rng.integers(20, 128))
        # no overlapping notes of the same pitch
        if onset < busy.get(pitch, -1.0) or duration <= 0:
            continue
        busy[pitch] = onset + duration
        notes.append(Note(pitch, onset, duration, velocity))
    return notes


def synth_concept(spec: PatternSpec, length: float = 25.0) -> NoteSequence:
    """Generate a note sequence of ``length`` seconds for ``spec``.

    ``alberti_bass`` writes a left-hand root-fifth-third-fifth cycle at
    equal note values, one chord per bar, plus a randomized right hand
    above the bass. ``random`` draws pitches, onsets, durations and
    velocities uniformly over the keyboard.
    """
    rng = np.random.default_rng(spec.rng_seed)
    if spec.kind == "random":
        notes = _random_notes(rng, length, spec.density, LOWEST_PITCH, HIGHEST_PITCH)
        return NoteSequence(notes, total_duration=_snap(length))
    if spec.kind != "alberti_bass":
        raise ValueError(f"unknown pattern kind {spec.kind!r}")

    progression = spec.progression or PROGRESSIONS[int(rng.integers(len(PROGRESSIONS)))]
    note_len = 60.0 / spec.tempo / spec.notes_per_beat
    per_bar = 4 * spec.notes_per_beat
    bass_velocity = int(rng.integers(50, 90))
    notes = []
    i = 0
    while True:
        onset = _snap(i * note_len)
        if onset >= length:
            break
        root, third, fifth = _triad(spec, progression[(i // per_bar) % len(progression)])
        pitch = (root, fifth, third, fifth)[i % 4]
        duration = min(_snap((i + 1) * note_len) - onset, _snap(length) - onset)
        velocity = int(np.clip(bass_velocity + rng.integers(-6, 7), 1, 127))
        notes.append(Note(pitch, onset, duration, velocity))
        i += 1
    top_of_bass = 12 * (spec.register + 1) + spec.key + 24
    melody_lo = max(top_of_bass + 1, 60)
    notes += _random_notes(rng, length, 3.0, melody_lo, min(melody_lo + 30, HIGHEST_PITCH))
    return NoteSequence(notes, total_duration=_snap(length))
