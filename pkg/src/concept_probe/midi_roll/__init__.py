"""MIDI ingestion, piano rolls and synthetic datasets."""

from .roll import (
    DEFAULT_LENGTH,
    DEFAULT_STEP,
    NUM_PITCHES,
    PianoRoll,
    build_piano_roll,
    crop_or_pad,
    roll_to_notes,
    sample_excerpts,
    segment,
)
from .smf import MidiParseError, Note, NoteSequence, parse_midi, write_smf
from .synth import PatternSpec, synth_concept

__all__ = [
    "DEFAULT_LENGTH",
    "DEFAULT_STEP",
    "NUM_PITCHES",
    "MidiParseError",
    "Note",
    "NoteSequence",
    "PatternSpec",
    "PianoRoll",
    "build_piano_roll",
    "crop_or_pad",
    "parse_midi",
    "roll_to_notes",
    "sample_excerpts",
    "segment",
    "synth_concept",
    "write_smf",
]
