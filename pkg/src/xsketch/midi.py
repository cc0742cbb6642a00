"""Standard MIDI File output of performed notes (format 0, fixed tempo)."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import mido

from .notedata import BPM_REFERENCE, PerfNote, ScoreNote

TICKS_PER_BEAT = 480
TEMPO_US = int(round(60_000_000 / BPM_REFERENCE))  # 500000 at 120 BPM


@dataclass(frozen=True)
class MidiNote:
    onset: float
    duration: float
    pitch: int
    velocity: int


def _ticks(seconds: float) -> int:
    return int(round(seconds * TICKS_PER_BEAT * 1e6 / TEMPO_US))


def write_midi(path: str | Path, perf: Sequence[PerfNote], score: Sequence[ScoreNote]) -> None:
    """Write ``perf`` (pitches looked up through each note's score index)."""
    events = []
    for n in perf:
        pitch = score[n.score_index].pitch
        vel = min(127, max(1, int(round(n.velocity))))
        on = _ticks(max(n.onset, 0.0))
        off = max(on + 1, _ticks(max(n.onset, 0.0) + n.duration))
        # note-offs sort before note-ons at the same tick so repeated pitches retrigger
        events.append((on, 1, mido.Message("note_on", note=pitch, velocity=vel)))
        events.append((off, 0, mido.Message("note_off", note=pitch, velocity=0)))
    events.sort(key=lambda e: (e[0], e[1], e[2].note))
    track = mido.MidiTrack()
    track.append(mido.MetaMessage("set_tempo", tempo=TEMPO_US, time=0))
    track.append(mido.MetaMessage("time_signature", numerator=4, denominator=4, time=0))
    now = 0
    for tick, _, msg in events:
        track.append(msg.copy(time=tick - now))
        now = tick
    track.append(mido.MetaMessage("end_of_track", time=0))
    mid = mido.MidiFile(type=0, ticks_per_beat=TICKS_PER_BEAT)
    mid.tracks.append(track)
    mid.save(str(path))


def read_midi(path: str | Path) -> tuple[list[MidiNote], list[int]]:
    """Return notes in onset order plus every tempo value (µs per quarter) found."""
    mid = mido.MidiFile(str(path))
    tempos = [m.tempo for tr in mid.tracks for m in tr if m.type == "set_tempo"]
    now = 0.0
    active: dict[int, list[tuple[float, int]]] = {}
    notes = []
    for msg in mid:  # iteration yields delta times in seconds
        now += msg.time
        if msg.type == "note_on" and msg.velocity > 0:
            active.setdefault(msg.note, []).append((now, msg.velocity))
        elif msg.type in ("note_off", "note_on"):
            if active.get(msg.note):
                start, vel = active[msg.note].pop(0)
                notes.append(MidiNote(start, now - start, msg.note, vel))
    notes.sort(key=lambda n: (n.onset, n.pitch))
    return notes, tempos
