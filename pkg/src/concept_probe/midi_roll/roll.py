"""Piano-roll construction, excerpt sampling and length normalization."""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field, replace
from typing import Any

import numpy as np

from .smf import HIGHEST_PITCH, LOWEST_PITCH, Note, NoteSequence

NUM_PITCHES = HIGHEST_PITCH - LOWEST_PITCH + 1
DEFAULT_STEP = 0.05
DEFAULT_LENGTH = 20.0
# slack for float noise when deciding which steps a note touches
_EDGE_EPS = 1e-9


@dataclass
class PianoRoll:
    """An 88 x T grid of velocities in [0, 1]; row 0 is MIDI pitch 21."""

    grid: np.ndarray
    step: float = DEFAULT_STEP
    meta: dict[str, Any] = field(default_factory=dict)

    def __post_init__(self) -> None:
        self.grid = np.asarray(self.grid, dtype=np.float32)
        if self.grid.ndim != 2 or self.grid.shape[0] != NUM_PITCHES:
            raise ValueError(f"piano roll grid must be {NUM_PITCHES} x T, got {self.grid.shape}")

    @property
    def num_steps(self) -> int:
        return self.grid.shape[1]

    @property
    def duration(self) -> float:
        return self.num_steps * self.step


def build_piano_roll(
    seq: NoteSequence,
    start: float = 0.0,
    length: float = DEFAULT_LENGTH,
    step: float = DEFAULT_STEP,
) -> PianoRoll:
    """Rasterize the notes sounding in ``[start, start + length)``.

    A cell holds velocity / 127 for any note sounding during that step;
    overlapping notes of one pitch keep the maximum.
    """
    if step <= 0 or length <= 0:
        raise ValueError("step and length must be positive")
    num_steps = int(round(length / step))
    grid = np.zeros((NUM_PITCHES, num_steps), dtype=np.float32)
    for note in seq.notes:
        first = math.floor((note.onset - start) / step + _EDGE_EPS)
        last = math.ceil((note.offset - start) / step - _EDGE_EPS)  # exclusive
        first, last = max(first, 0), min(last, num_steps)
        if first >= last:
            continue
        row = grid[note.pitch - LOWEST_PITCH]
        np.maximum(row[first:last], note.velocity / 127.0, out=row[first:last])
    return PianoRoll(grid, step, {"offset": start})


def sample_excerpts(
    seq: NoteSequence,
    count: int,
    length: float = DEFAULT_LENGTH,
    rng_seed: int = 0,
    step: float = DEFAULT_STEP,
    source: str = "",
) -> list[PianoRoll]:
    """Draw ``count`` excerpts with uniformly random start offsets."""
    if seq.total_duration < length:
        warnings.warn(
            f"sequence ({seq.total_duration:.2f} s) shorter than excerpt length {length} s; "
            "returning one zero-padded excerpt",
            stacklevel=2,
        )
        roll = build_piano_roll(seq, 0.0, length, step)
        roll.meta["source"] = source
        return [roll]
    rng = np.random.default_rng(rng_seed)
    starts = rng.uniform(0.0, seq.total_duration - length, size=count)
    rolls = []
    for s in starts:
        roll = build_piano_roll(seq, float(s), length, step)
        roll.meta["source"] = source
        rolls.append(roll)
    return rolls


def segment(seq: NoteSequence, length: float = DEFAULT_LENGTH, step: float = DEFAULT_STEP, source: str = "") -> list[PianoRoll]:
    """Split a piece into non-overlapping excerpts; the tail is zero-padded."""
    count = max(1, math.ceil(seq.total_duration / length - _EDGE_EPS))
    rolls = []
    for i in range(count):
        roll = build_piano_roll(seq, i * length, length, step)
        roll.meta["source"] = source
        rolls.append(roll)
    return rolls


def crop_or_pad(roll: PianoRoll, target_steps: int) -> PianoRoll:
    """Center-crop longer rolls; right-pad shorter ones with silence."""
    if target_steps <= 0:
        raise ValueError("target_steps must be positive")
    grid = roll.grid
    n = grid.shape[1]
    if n > target_steps:
        lo = (n - target_steps) // 2
        grid = grid[:, lo : lo + target_steps]
    elif n < target_steps:
        grid = np.pad(grid, ((0, 0), (0, target_steps - n)))
    return replace(roll, grid=grid.copy(), meta=dict(roll.meta))


def roll_to_notes(roll: PianoRoll) -> NoteSequence:
    """Merge runs of equal non-zero cells of a pitch into notes."""
    notes = []
    for row_idx in range(NUM_PITCHES):
        row = roll.grid[row_idx]
        t = 0
        while t < len(row):
            v = row[t]
            if v <= 0:
                t += 1
                continue
            end = t + 1
            while end < len(row) and row[end] == v:
                end += 1
            velocity = int(min(127, max(1, round(float(v) * 127))))
            notes.append(Note(row_idx + LOWEST_PITCH, t * roll.step, (end - t) * roll.step, velocity))
            t = end
    return NoteSequence(notes, total_duration=roll.duration)
