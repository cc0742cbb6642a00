"""Synthetic aligned score/performance pairs with known planning and structure.

Every piece gets, per attribute, a random polynomial planning contour over
its normalized chord position. On top sits a structural residual computed
from score features by fixed rules:

* dynamics: downbeat notes are louder; velocity tilts with pitch height
* tempo: downbeat chords arrive late (lengthening of the preceding gap)
* articulation: short notes (a 16th or an 8th) are detached, long notes legato

Observation noise on tempo is shared by the notes of a chord. Features
are clipped to [-1, 1], velocities snapped to integer MIDI values
and the result is inverted into performed notes. The tempo contour starts
at 0 because the first chord has no IOI to carry it.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .notedata import (
    VEL_SCALE,
    VELOCITY_REFERENCE,
    AlignedPiece,
    ScoreNote,
    extract_score_features,
    group_chords,
    invert_features,
    sort_key,
    write_note_pairs,
)

IOI_CHOICES = (2, 4, 4, 4, 8)
MEASURE_16THS = {3: 12, 4: 16}


@dataclass
class WorldSpec:
    seed: int = 0
    n_pieces: int = 200
    chords: tuple[int, int] = (16, 32)
    notes_per_chord: tuple[int, int] = (1, 4)
    planning_degree: int = 4
    planning_amplitude: tuple[float, float] = (0.25, 0.55)
    downbeat_boost: float = 0.2
    pitch_tilt: float = 0.15
    phrase_lengthening: float = 0.2
    detache: float = 0.15
    noise: float = 0.02
    quantize_velocity: bool = True

    def __post_init__(self):
        if self.noise < 0:
            raise ValueError("noise must be non-negative")
        for lo, hi in (self.chords, self.notes_per_chord, self.planning_amplitude):
            if lo > hi:
                raise ValueError("empty range in world spec")
        if not 0 <= self.planning_degree <= 4:
            raise ValueError("planning degree must lie in [0, 4]")
        self.chords = tuple(self.chords)
        self.notes_per_chord = tuple(self.notes_per_chord)
        self.planning_amplitude = tuple(self.planning_amplitude)

    @classmethod
    def from_json(cls, path: str | Path) -> "WorldSpec":
        return cls(**json.loads(Path(path).read_text(encoding="utf-8")))


@dataclass
class GroundTruth:
    piece_id: str
    planning_coeffs: np.ndarray  # (3, degree + 1), increasing powers of chord position
    planning: np.ndarray  # (C, 3)
    residual: np.ndarray  # (N, 3)
    x: np.ndarray  # (N, 3)

    def to_json(self) -> dict:
        return {k: (v.tolist() if isinstance(v, np.ndarray) else v) for k, v in asdict(self).items()}


def _random_score(rng: np.random.Generator, spec: WorldSpec) -> list[ScoreNote]:
    meter = int(rng.choice([3, 4]))
    bar = MEASURE_16THS[meter]
    n_chords = int(rng.integers(spec.chords[0], spec.chords[1] + 1))
    notes = []
    onset = 0
    for _ in range(n_chords):
        ioi = int(rng.choice(IOI_CHOICES))
        pos = onset % bar
        if pos + ioi > bar:  # keep chords inside the bar so downbeats recur
            ioi = bar - pos
        size = int(rng.integers(spec.notes_per_chord[0], spec.notes_per_chord[1] + 1))
        bass = int(rng.integers(36, 56))
        pitches = {bass}
        while len(pitches) < size:
            pitches.add(int(rng.integers(max(bass + 3, 55), 85)))
        short = rng.random() < 0.3
        for p in sorted(pitches):
            dur = int(rng.choice([1, 2])) if short else ioi
            notes.append(ScoreNote(onset, dur, p, "F" if p < 60 else "G", meter, pos))
        onset += ioi
    return sorted(notes, key=sort_key)


def _planning_poly(rng: np.random.Generator, spec: WorldSpec, anchored: bool) -> np.ndarray:
    deg = spec.planning_degree
    coeffs = rng.uniform(-1.0, 1.0, deg + 1)
    if anchored:
        coeffs[0] = 0.0
    grid = np.linspace(0.0, 1.0, 201)
    peak = np.abs(np.polynomial.polynomial.polyval(grid, coeffs)).max()
    amp = rng.uniform(*spec.planning_amplitude)
    return coeffs * (amp / peak) if peak > 0 else coeffs


def structural_residual(score: list[ScoreNote], y: np.ndarray, chord_index: np.ndarray,
                        spec: WorldSpec) -> np.ndarray:
    """Rule-based residual per note (normalized feature units)."""
    downbeat = y[:, 7].astype(float)
    pitch = y[:, 0].astype(float)
    rel_dur = y[:, 1]
    res = np.zeros((len(score), 3))
    res[:, 0] = spec.downbeat_boost * downbeat + spec.pitch_tilt * (pitch - 60.0) / 24.0
    res[:, 1] = spec.phrase_lengthening * downbeat
    res[:, 2] = np.where(rel_dur <= 2, -spec.detache, spec.detache / 2)
    res[chord_index == 0, 1] = 0.0
    return res


def generate_piece(piece_id: str, rng: np.random.Generator, spec: WorldSpec) -> tuple[AlignedPiece, GroundTruth]:
    score = _random_score(rng, spec)
    p = group_chords(score)
    ci = p.chord_index
    y = extract_score_features(score, p)
    t = np.arange(p.C) / max(p.C - 1, 1)
    coeffs = np.stack([_planning_poly(rng, spec, anchored=(a == 1)) for a in range(3)])
    planning = np.stack([np.polynomial.polynomial.polyval(t, c) for c in coeffs], axis=1)
    residual = structural_residual(score, y, ci, spec)
    noise = rng.normal(0.0, spec.noise, (p.N, 3)) if spec.noise > 0 else np.zeros((p.N, 3))
    # one tempo draw per chord: per-note timing jitter could push a note past the next chord
    noise[:, 1] = noise[[g[0] for g in p.groups], 1][ci]
    x = np.clip(planning[ci] + residual + noise, -1.0, 1.0)
    x[ci == 0, 1] = 0.0
    if spec.quantize_velocity:
        vel = np.round(VELOCITY_REFERENCE + VEL_SCALE * x[:, 0])
        x[:, 0] = (vel - VELOCITY_REFERENCE) / VEL_SCALE
    perf = invert_features(x, score, p, round_velocity=spec.quantize_velocity)
    truth = GroundTruth(piece_id, coeffs, planning, residual, x)
    return AlignedPiece(piece_id, score, perf), truth


def generate_world(spec: WorldSpec) -> tuple[list[AlignedPiece], list[GroundTruth]]:
    seeds = np.random.SeedSequence(spec.seed).spawn(spec.n_pieces)
    pieces, truths = [], []
    for i, ss in enumerate(seeds):
        piece, truth = generate_piece(f"synth{i:04d}", np.random.default_rng(ss), spec)
        pieces.append(piece)
        truths.append(truth)
    return pieces, truths


def write_world(spec: WorldSpec, out_dir: str | Path) -> Path:
    out = Path(out_dir)
    (out / "truth").mkdir(parents=True, exist_ok=True)
    pieces, truths = generate_world(spec)
    write_note_pairs(out / "notes.jsonl", pieces)
    for tr in truths:
        (out / "truth" / f"{tr.piece_id}.json").write_text(json.dumps(tr.to_json()), encoding="utf-8")
    (out / "spec.json").write_text(json.dumps(asdict(spec), indent=1), encoding="utf-8")
    return out / "notes.jsonl"
