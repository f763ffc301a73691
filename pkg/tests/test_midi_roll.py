import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from concept_probe.midi_roll import (
    MidiParseError,
    Note,
    NoteSequence,
    PatternSpec,
    PianoRoll,
    build_piano_roll,
    crop_or_pad,
    parse_midi,
    roll_to_notes,
    sample_excerpts,
    segment,
    synth_concept,
    write_smf,
)


def vlq(n):
    out = [n & 0x7F]
    n >>= 7
    while n:
        out.append(0x80 | (n & 0x7F))
        n >>= 7
    return bytes(reversed(out))


def smf(tracks, ppq=480, fmt=None):
    fmt = (0 if len(tracks) == 1 else 1) if fmt is None else fmt
    out = b"MThd" + struct.pack(">IHHH", 6, fmt, len(tracks), ppq)
    for events in tracks:
        body = b"".join(vlq(d) + msg for d, msg in events)
        out += b"MTrk" + struct.pack(">I", len(body)) + body
    return out


EOT = b"\xff\x2f\x00"


def tempo(us):
    return b"\xff\x51\x03" + us.to_bytes(3, "big")


def test_empty_track():
    seq = parse_midi(smf([[(0, EOT)]]))
    assert len(seq) == 0


def test_single_note_seconds():
    data = smf([[(0, tempo(500000)), (0, b"\x90\x3c\x40"), (480, b"\x80\x3c\x00"), (0, EOT)]])
    (note,) = parse_midi(data).notes
    # 480 ticks * 500000 us / 480 ppq = 0.5 s
    assert note == Note(60, 0.0, 0.5, 64)


def test_tempo_change_mid_note():
    data = smf(
        [[
            (0, tempo(500000)),
            (0, b"\x90\x3c\x40"),
            (240, tempo(250000)),
            (240, b"\x80\x3c\x00"),
            (0, EOT),
        ]]
    )
    (note,) = parse_midi(data).notes
    # 240 ticks at 0.5 s/qn = 0.25 s; 240 ticks at 0.25 s/qn = 0.125 s
    assert note.duration == pytest.approx(0.375, abs=1e-12)


def test_tempo_map_from_conductor_track():
    conductor = [(0, tempo(1000000)), (0, EOT)]
    notes = [(960, b"\x90\x40\x50"), (480, b"\x90\x40\x00"), (0, EOT)]
    (note,) = parse_midi(smf([conductor, notes])).notes
    assert note.onset == pytest.approx(2.0)
    assert note.duration == pytest.approx(1.0)


def test_running_status_and_velocity_zero_off():
    data = smf([[(0, b"\x90\x3c\x40"), (0, b"\x40\x50"), (480, b"\x3c\x00"), (480, b"\x40\x00"), (0, EOT)]])
    seq = parse_midi(data)
    assert [(n.pitch, n.duration) for n in seq.notes] == [(60, 0.5), (64, 1.0)]


def test_dangling_note_closed_at_track_end():
    data = smf([[(0, b"\x90\x3c\x40"), (960, EOT)]])
    seq = parse_midi(data)
    assert seq.dangling_notes == 1
    assert seq.notes[0].duration == pytest.approx(1.0)


def test_out_of_range_pitches_dropped():
    data = smf([[(0, b"\x90\x10\x40"), (0, b"\x90\x3c\x40"), (480, b"\x80\x10\x00"), (0, b"\x80\x3c\x00"), (0, EOT)]])
    seq = parse_midi(data)
    assert seq.dropped_out_of_range == 1
    assert [n.pitch for n in seq.notes] == [60]


def test_sysex_and_unknown_meta_skipped():
    data = smf([[(0, b"\xf0\x03\x01\x02\xf7"), (0, b"\xff\x7f\x02\x00\x00"), (0, b"\x90\x3c\x40"), (480, b"\x80\x3c\x00"), (0, EOT)]])
    assert len(parse_midi(data)) == 1


@pytest.mark.parametrize(
    "data, offset",
    [
        (b"RIFF" + b"\x00" * 20, 0),
        (b"MThd" + struct.pack(">IHHH", 6, 2, 1, 480) + b"MTrk\x00\x00\x00\x00", 8),
        (b"MThd" + struct.pack(">IHHH", 6, 0, 1, 480) + b"MTrk\x00\x00\x00\x10\x00", 14),
    ],
)
def test_malformed_reports_offset(data, offset):
    with pytest.raises(MidiParseError) as err:
        parse_midi(data)
    assert err.value.offset == offset


def test_data_byte_without_status():
    with pytest.raises(MidiParseError, match="running status"):
        parse_midi(smf([[(0, b"\x3c\x40"), (0, EOT)]]))


def test_roll_shape_default():
    roll = build_piano_roll(NoteSequence(), 0.0, 20.0, 0.05)
    assert roll.grid.shape == (88, 400)
    assert not roll.grid.any()


def test_roll_single_note_cells():
    roll = build_piano_roll(NoteSequence([Note(21, 0.0, 0.1, 127)]), 0.0, 20.0, 0.05)
    expected = np.zeros((88, 400), dtype=np.float32)
    expected[0, 0:2] = 1.0
    np.testing.assert_array_equal(roll.grid, expected)


def test_roll_overlap_takes_max_and_window_beyond_end():
    seq = NoteSequence([Note(60, 0.0, 1.0, 50), Note(60, 0.5, 1.0, 100)])
    roll = build_piano_roll(seq, 0.0, 2.0, 0.05)
    row = roll.grid[60 - 21]
    assert row[5] == pytest.approx(50 / 127)
    assert row[15] == pytest.approx(100 / 127)
    late = build_piano_roll(seq, 10.0, 2.0, 0.05)
    assert late.grid.shape == (88, 40) and not late.grid.any()


def test_roll_rejects_bad_step():
    with pytest.raises(ValueError):
        build_piano_roll(NoteSequence(), 0.0, 20.0, 0.0)


def test_sample_excerpts_counts_and_determinism():
    seq = synth_concept(PatternSpec(kind="random", rng_seed=3), length=200.0)
    rolls = sample_excerpts(seq, 90, 20.0, rng_seed=5)
    assert len(rolls) == 90
    assert all(r.grid.shape == (88, 400) for r in rolls)
    again = sample_excerpts(seq, 90, 20.0, rng_seed=5)
    assert [r.meta["offset"] for r in rolls] == [r.meta["offset"] for r in again]


def test_sample_excerpts_full_piece():
    seq = synth_concept(PatternSpec(kind="random", rng_seed=4), length=20.0)
    (roll,) = sample_excerpts(seq, 1, 20.0, rng_seed=0)
    np.testing.assert_array_equal(roll.grid, build_piano_roll(seq, 0.0, 20.0).grid)


def test_sample_excerpts_short_piece_warns():
    seq = NoteSequence([Note(60, 0.0, 1.0, 80)])
    with pytest.warns(UserWarning, match="shorter"):
        rolls = sample_excerpts(seq, 5, 20.0)
    assert len(rolls) == 1 and rolls[0].grid.shape == (88, 400)


def test_segment_non_overlapping():
    seq = synth_concept(PatternSpec(kind="random", rng_seed=1), length=50.0)
    rolls = segment(seq, 20.0)
    assert [r.meta["offset"] for r in rolls] == [0.0, 20.0, 40.0]


def _ramp(n):
    grid = np.zeros((88, n), dtype=np.float32)
    grid[40, :] = np.arange(n) / n
    return PianoRoll(grid)


def test_crop_center():
    out = crop_or_pad(_ramp(600), 400)
    np.testing.assert_array_equal(out.grid, _ramp(600).grid[:, 100:500])


def test_crop_identity_and_pad():
    r = _ramp(400)
    np.testing.assert_array_equal(crop_or_pad(r, 400).grid, r.grid)
    padded = crop_or_pad(_ramp(300), 400)
    np.testing.assert_array_equal(padded.grid[:, :300], _ramp(300).grid)
    assert not padded.grid[:, 300:].any()


@given(st.integers(1, 700), st.integers(1, 500))
def test_crop_or_pad_idempotent(n, target):
    once = crop_or_pad(_ramp(n), target)
    np.testing.assert_array_equal(crop_or_pad(once, target).grid, once.grid)
    assert once.grid.shape == (88, target)


def test_alberti_c_major_cycle():
    spec = PatternSpec(kind="alberti_bass", key=0, mode="major", register=3, progression=(1,), rng_seed=0)
    seq = synth_concept(spec, 25.0)
    bass = [n for n in seq.notes if n.pitch < 60]
    assert [n.pitch for n in bass[:8]] == [48, 55, 52, 55] * 2
    durations = {round(n.duration, 9) for n in bass[:-1]}
    assert len(durations) == 1


def test_synth_deterministic():
    for kind in ("alberti_bass", "random"):
        a = synth_concept(PatternSpec.randomized(kind, 11), 25.0)
        b = synth_concept(PatternSpec.randomized(kind, 11), 25.0)
        assert a.notes == b.notes


def test_alberti_autocorrelation_peaks_at_pattern_period():
    # 120 bpm eighths = 0.25 s = 5 columns, so the 4-note cycle spans 20 columns
    spec = PatternSpec(kind="alberti_bass", tempo=120.0, notes_per_beat=2, progression=(1,), rng_seed=2)
    roll = build_piano_roll(synth_concept(spec, 20.0), 0.0, 20.0)
    low = roll.grid[: 60 - 21].astype(np.float64)
    lags = range(1, 31)
    corr = [float((low[:, :-lag] * low[:, lag:]).sum()) for lag in lags]
    assert lags[int(np.argmax(corr))] == 20


def test_random_kind_covers_keyboard():
    seq = synth_concept(PatternSpec(kind="random", density=8.0, rng_seed=0), 60.0)
    pitches = [n.pitch for n in seq.notes]
    assert min(pitches) < 35 and max(pitches) > 95


@st.composite
def note_sequences(draw):
    kind = draw(st.sampled_from(["alberti_bass", "random"]))
    seed = draw(st.integers(0, 10_000))
    return synth_concept(PatternSpec.randomized(kind, seed), draw(st.sampled_from([5.0, 12.5, 25.0])))


@settings(max_examples=25, deadline=None)
@given(note_sequences())
def test_roll_cells_in_unit_interval(seq):
    roll = build_piano_roll(seq, 0.0, 20.0)
    assert roll.grid.shape == (88, 400)
    assert roll.grid.min() >= 0.0 and roll.grid.max() <= 1.0


@settings(max_examples=25, deadline=None)
@given(note_sequences(), st.data())
def test_roll_monotone_in_velocity(seq, data):
    i = data.draw(st.integers(0, len(seq.notes) - 1))
    old = seq.notes[i]
    louder = Note(old.pitch, old.onset, old.duration, data.draw(st.integers(old.velocity, 127)))
    raised = NoteSequence(seq.notes[:i] + [louder] + seq.notes[i + 1 :], seq.total_duration)
    assert (build_piano_roll(raised).grid >= build_piano_roll(seq).grid).all()


@settings(max_examples=25, deadline=None)
@given(note_sequences())
def test_midi_round_trip(seq):
    back = parse_midi(write_smf(seq))
    tick = 1 / 960
    assert len(back.notes) == len(seq.notes)
    for a, b in zip(seq.notes, back.notes):
        assert a.pitch == b.pitch and a.velocity == b.velocity
        assert abs(a.onset - b.onset) <= tick and abs(a.offset - b.offset) <= tick
    np.testing.assert_array_equal(build_piano_roll(back).grid, build_piano_roll(seq).grid)


def test_roll_to_notes_inverts_build():
    seq = NoteSequence([Note(21, 0.0, 0.1, 127)])
    (note,) = roll_to_notes(build_piano_roll(seq)).notes
    assert (note.pitch, note.onset, note.velocity) == (21, 0.0, 127)
    assert note.duration == pytest.approx(0.1)
