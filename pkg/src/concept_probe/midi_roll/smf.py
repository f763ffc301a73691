"""Standard MIDI File reading and writing (formats 0 and 1)."""

from __future__ import annotations

import logging
import struct
from collections import defaultdict, deque
from dataclasses import dataclass, field

log = logging.getLogger(__name__)

LOWEST_PITCH = 21
HIGHEST_PITCH = 108
DEFAULT_TEMPO = 500_000  # microseconds per quarter note
EXPORT_PPQ = 480


class MidiParseError(ValueError):
    """Malformed SMF data. ``offset`` is the byte position of the problem."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte {offset})")
        self.offset = offset


@dataclass(frozen=True)
class Note:
    pitch: int
    onset: float
    duration: float
    velocity: int

    @property
    def offset(self) -> float:
        return self.onset + self.duration


@dataclass
class NoteSequence:
    notes: list[Note] = field(default_factory=list)
    total_duration: float = 0.0
    dropped_out_of_range: int = 0
    dangling_notes: int = 0

    def __post_init__(self) -> None:
        self.notes = sorted(self.notes, key=lambda n: (n.onset, n.pitch, n.duration, n.velocity))
        end = max((n.offset for n in self.notes), default=0.0)
        self.total_duration = max(self.total_duration, end)

    def __len__(self) -> int:
        return len(self.notes)


class _TempoMap:
    """Piecewise-linear tick to seconds conversion."""

    def __init__(self, changes: list[tuple[int, int]], division: int, smpte: float | None = None):
        self.division = division
        self.smpte = smpte
        # (tick, tempo) sorted, first at tick 0; later events at the same tick win
        by_tick: dict[int, int] = {0: DEFAULT_TEMPO}
        for tick, tempo in sorted(changes, key=lambda c: c[0]):
            by_tick[tick] = tempo
        self.ticks = sorted(by_tick)
        self.tempos = [by_tick[t] for t in self.ticks]
        self.seconds = [0.0]
        for i in range(1, len(self.ticks)):
            span = self.ticks[i] - self.ticks[i - 1]
            self.seconds.append(self.seconds[-1] + span * self.tempos[i - 1] / (division * 1e6))

    def to_seconds(self, tick: int) -> float:
        if self.smpte is not None:
            return tick / self.smpte
        i = _bisect_right(self.ticks, tick) - 1
        return self.seconds[i] + (tick - self.ticks[i]) * self.tempos[i] / (self.division * 1e6)


def _bisect_right(values: list[int], x: int) -> int:
    lo, hi = 0, len(values)
    while lo < hi:
        mid = (lo + hi) // 2
        if x < values[mid]:
            hi = mid
        else:
            lo = mid + 1
    return lo


def _read_vlq(data: bytes, pos: int, end: int) -> tuple[int, int]:
    value = 0
    for _ in range(4):
        if pos >= end:
            raise MidiParseError("truncated variable-length quantity", pos)
        byte = data[pos]
        pos += 1
        value = (value << 7) | (byte & 0x7F)
        if not byte & 0x80:
            return value, pos
    raise MidiParseError("variable-length quantity longer than 4 bytes", pos)


def _scan_track(data: bytes, start: int, end: int):
    """Yield (abs_tick, kind, payload) for one MTrk body; track end tick last."""
    pos = start
    tick = 0
    status = None
    while pos < end:
        delta, pos = _read_vlq(data, pos, end)
        tick += delta
        if pos >= end:
            raise MidiParseError("event missing after delta time", pos)
        byte = data[pos]
        if byte == 0xFF:
            if pos + 2 > end:
                raise MidiParseError("truncated meta event", pos)
            mtype = data[pos + 1]
            length, body = _read_vlq(data, pos + 2, end)
            if body + length > end:
                raise MidiParseError("meta event overruns track", pos)
            yield tick, "meta", (mtype, data[body : body + length])
            pos = body + length
            if mtype == 0x2F:
                break
            continue
        if byte in (0xF0, 0xF7):
            length, body = _read_vlq(data, pos + 1, end)
            if body + length > end:
                raise MidiParseError("sysex event overruns track", pos)
            pos = body + length
            continue
        if byte & 0x80:
            status = byte
            pos += 1
        elif status is None:
            raise MidiParseError("data byte without running status", pos)
        kind = status & 0xF0
        nbytes = 1 if kind in (0xC0, 0xD0) else 2
        if kind < 0x80 or status >= 0xF0:
            raise MidiParseError(f"unexpected status byte 0x{status:02X}", pos - 1)
        if pos + nbytes > end:
            raise MidiParseError("truncated channel event", pos)
        yield tick, "channel", (status, data[pos : pos + nbytes])
        pos += nbytes
    yield tick, "end", None


def parse_midi(data: bytes) -> NoteSequence:
    """Parse an SMF (format 0 or 1) byte string into a :class:`NoteSequence`.

    Note-on/note-off pairs are matched per (channel, pitch) in first-in
    first-out order and converted to seconds through the merged tempo map.
    A note-on with velocity 0 is a note-off. Notes still open when their
    track ends are closed there and counted in ``dangling_notes``; notes
    outside the 88-key range are counted in ``dropped_out_of_range``.
    """
    if len(data) < 14 or data[:4] != b"MThd":
        raise MidiParseError("missing MThd header", 0)
    (hlen,) = struct.unpack_from(">I", data, 4)
    if hlen < 6 or 8 + hlen > len(data):
        raise MidiParseError(f"bad header length {hlen}", 4)
    fmt, ntracks, division = struct.unpack_from(">HHH", data, 8)
    if fmt not in (0, 1):
        raise MidiParseError(f"unsupported SMF format {fmt}", 8)
    smpte = None
    if division & 0x8000:
        fps = 256 - (division >> 8)
        smpte = float(fps * (division & 0xFF))
        if smpte <= 0:
            raise MidiParseError("invalid SMPTE division", 12)
    elif division == 0:
        raise MidiParseError("division of zero ticks per quarter note", 12)

    pos = 8 + hlen
    tracks = []
    while pos < len(data) and len(tracks) < ntracks:
        if pos + 8 > len(data):
            raise MidiParseError("truncated chunk header", pos)
        ctype = data[pos : pos + 4]
        (clen,) = struct.unpack_from(">I", data, pos + 4)
        body = pos + 8
        if body + clen > len(data):
            raise MidiParseError(f"chunk {ctype!r} overruns file", pos)
        if ctype == b"MTrk":
            tracks.append(list(_scan_track(data, body, body + clen)))
        pos = body + clen
    if len(tracks) < ntracks:
        raise MidiParseError(f"header declares {ntracks} tracks, found {len(tracks)}", pos)

    tempo_changes = []
    for events in tracks:
        for tick, kind, payload in events:
            if kind == "meta" and payload[0] == 0x51 and len(payload[1]) == 3:
                tempo_changes.append((tick, int.from_bytes(payload[1], "big")))
    tmap = _TempoMap(tempo_changes, division, smpte)

    raw: list[tuple[int, int, int, int]] = []  # pitch, on_tick, off_tick, velocity
    dangling = 0
    end_tick = 0
    for events in tracks:
        active: dict[tuple[int, int], deque] = defaultdict(deque)
        track_end = 0
        for tick, kind, payload in events:
            track_end = tick
            if kind != "channel":
                continue
            status, body = payload
            kind_nibble, channel = status & 0xF0, status & 0x0F
            if kind_nibble == 0x90 and body[1] > 0:
                active[(channel, body[0])].append((tick, body[1]))
            elif kind_nibble == 0x80 or (kind_nibble == 0x90 and body[1] == 0):
                queue = active.get((channel, body[0]))
                if queue:
                    on_tick, vel = queue.popleft()
                    raw.append((body[0], on_tick, tick, vel))
        for (_, pitch), queue in active.items():
            for on_tick, vel in queue:
                dangling += 1
                raw.append((pitch, on_tick, track_end, vel))
        end_tick = max(end_tick, track_end)
    if dangling:
        log.warning("closed %d dangling note-on events at track end", dangling)

    notes = []
    dropped = 0
    for pitch, on_tick, off_tick, vel in raw:
        if not LOWEST_PITCH <= pitch <= HIGHEST_PITCH:
            dropped += 1
            continue
        onset = tmap.to_seconds(on_tick)
        duration = tmap.to_seconds(off_tick) - onset
        if duration <= 0:
            continue
        notes.append(Note(pitch, onset, duration, vel))
    return NoteSequence(
        notes,
        total_duration=tmap.to_seconds(end_tick),
        dropped_out_of_range=dropped,
        dangling_notes=dangling,
    )


def _vlq(value: int) -> bytes:
    out = [value & 0x7F]
    value >>= 7
    while value:
        out.append(0x80 | (value & 0x7F))
        value >>= 7
    return bytes(reversed(out))


def write_smf(seq: NoteSequence, ppq: int = EXPORT_PPQ, tempo: int = DEFAULT_TEMPO) -> bytes:
    """Serialize a note sequence as SMF format 0 with a single tempo."""
    ticks_per_second = ppq * 1e6 / tempo
    events = []  # (tick, order, bytes); note-offs sort before note-ons at equal ticks
    for note in seq.notes:
        on = round(note.onset * ticks_per_second)
        off = max(on + 1, round(note.offset * ticks_per_second))
        events.append((on, 1, note.pitch, bytes([0x90, note.pitch, note.velocity])))
        events.append((off, 0, note.pitch, bytes([0x80, note.pitch, 0])))
    events.sort(key=lambda e: e[:3])

    body = bytearray(b"\x00\xff\x51\x03" + tempo.to_bytes(3, "big"))
    last = 0
    for tick, _, _, msg in events:
        body += _vlq(tick - last) + msg
        last = tick
    end = max(last, round(seq.total_duration * ticks_per_second))
    body += _vlq(end - last) + b"\xff\x2f\x00"
    header = b"MThd" + struct.pack(">IHHH", 6, 0, 1, ppq)
    return header + b"MTrk" + struct.pack(">I", len(body)) + bytes(body)
