"""Note-level data handling: ingestion, chord grouping, feature extraction and inversion.

Scores live on a 16th-note grid and are rendered at a fixed reference tempo
(BPM 120), so one 16th lasts 0.125 s. Performance features are normalized to
[-1, 1]; score features are categorical.
"""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

log = logging.getLogger(__name__)

BPM_REFERENCE = 120
VELOCITY_REFERENCE = 64
SEC_PER_16TH = 60.0 / BPM_REFERENCE / 4.0

VEL_MIN, VEL_MAX = 24, 104
IOI_CLIP = (0.125, 8.0)
ART_CLIP = (0.25, 4.0)
# divisors mapping log2 of the clip ranges onto [-1, 1]
IOI_SCALE = 3.0
ART_SCALE = 2.0
VEL_SCALE = 40.0

# floor for a non-positive next-chord IOI when inverting features
MIN_NEXT_IOI = 1e-3

PERF_COLUMNS = ("vel", "ioi_ratio", "articulation")
SCORE_COLUMNS = (
    "pitch",
    "rel_duration",
    "rel_ioi",
    "is_top_voice",
    "position_in_chord",
    "num_in_chord",
    "staff",
    "is_downbeat",
)
# inclusive value ranges of the categorical score columns
SCORE_RANGES = (
    (21, 108),
    (1, 11),
    (1, 11),
    (0, 1),
    (1, 11),
    (1, 11),
    (0, 1),
    (0, 1),
)
STAFF_CODES = {"G": 0, "F": 1}

MAX_CHORDS = 16
HOP_CHORDS = 4
MIN_NOTES = 16


class DataError(ValueError):
    """Malformed or inconsistent note data."""


@dataclass(frozen=True)
class ScoreNote:
    onset_16ths: int
    dur_16ths: int
    pitch: int
    staff: str
    meter_beats: int
    measure_pos_16ths: int

    def __post_init__(self):
        if not 21 <= self.pitch <= 108:
            raise DataError(f"pitch {self.pitch} outside [21, 108]")
        if self.dur_16ths <= 0:
            raise DataError(f"non-positive duration {self.dur_16ths}")
        if self.onset_16ths < 0:
            raise DataError(f"negative onset {self.onset_16ths}")
        if self.staff not in STAFF_CODES:
            raise DataError(f"unknown staff {self.staff!r}")

    @property
    def onset(self) -> float:
        """Onset in beats."""
        return self.onset_16ths / 4

    @property
    def duration(self) -> float:
        return self.dur_16ths / 4

    @property
    def measure_position(self) -> float:
        return self.measure_pos_16ths / 4

    @property
    def onset_sec(self) -> float:
        return self.onset_16ths * SEC_PER_16TH

    @property
    def dur_sec(self) -> float:
        return self.dur_16ths * SEC_PER_16TH


@dataclass(frozen=True)
class PerfNote:
    onset: float
    duration: float
    velocity: float
    score_index: int


@dataclass
class AlignedPiece:
    """Score notes paired 1:1 with performed notes.

    ``perf`` is ``None`` for score-only input (rendering from scratch).
    """

    piece_id: str
    score: list[ScoreNote]
    perf: list[PerfNote] | None = None

    def __post_init__(self):
        if self.perf is not None and len(self.perf) != len(self.score):
            raise DataError(f"{self.piece_id}: {len(self.score)} score notes vs {len(self.perf)} performed")

    def __len__(self):
        return len(self.score)


@dataclass(frozen=True)
class ChordPartition:
    groups: tuple[tuple[int, ...], ...]

    @property
    def C(self) -> int:
        return len(self.groups)

    @property
    def N(self) -> int:
        return sum(len(g) for g in self.groups)

    @property
    def chord_index(self) -> np.ndarray:
        """Chord id of every note, length N."""
        idx = np.empty(self.N, dtype=np.int64)
        for c, g in enumerate(self.groups):
            idx[list(g)] = c
        return idx

    @property
    def sizes(self) -> np.ndarray:
        return np.array([len(g) for g in self.groups], dtype=np.int64)

    @classmethod
    def from_chord_index(cls, chord_index: Sequence[int]) -> "ChordPartition":
        chord_index = np.asarray(chord_index)
        n_chords = int(chord_index.max()) + 1 if len(chord_index) else 0
        return cls(tuple(tuple(int(i) for i in np.flatnonzero(chord_index == c)) for c in range(n_chords)))

    @classmethod
    def singletons(cls, n: int) -> "ChordPartition":
        return cls(tuple((i,) for i in range(n)))


@dataclass
class PerformanceFeatures:
    x: np.ndarray
    raw_x: np.ndarray
    warnings: list[str] = field(default_factory=list)


@dataclass
class PieceFeatures:
    piece_id: str
    x: np.ndarray | None
    y: np.ndarray
    partition: ChordPartition

    @property
    def chord_index(self) -> np.ndarray:
        return self.partition.chord_index


@dataclass
class Excerpt:
    piece_id: str
    chord_start: int
    chord_stop: int
    note_start: int
    note_stop: int
    x: np.ndarray | None
    y: np.ndarray
    chord_index: np.ndarray

    @property
    def excerpt_id(self) -> str:
        return f"{self.piece_id}@{self.chord_start}"

    @property
    def n_chords(self) -> int:
        return self.chord_stop - self.chord_start

    @property
    def n_notes(self) -> int:
        return self.note_stop - self.note_start

    @property
    def k(self) -> np.ndarray:
        from .hier import n2c

        return n2c(self.x, self.chord_index, self.n_chords)

    @property
    def M(self) -> np.ndarray:
        return build_alignment_matrix(ChordPartition.from_chord_index(self.chord_index))


def sort_key(note: ScoreNote) -> tuple[int, int]:
    return (note.onset_16ths, note.pitch)


def group_chords(score: Sequence[ScoreNote]) -> ChordPartition:
    """Group notes with identical score onsets; ``score`` must be sorted by (onset, pitch)."""
    if not score:
        raise DataError("empty piece")
    groups: list[list[int]] = [[0]]
    for i in range(1, len(score)):
        if score[i].onset_16ths < score[i - 1].onset_16ths:
            raise DataError("score not sorted by onset")
        if score[i].onset_16ths == score[i - 1].onset_16ths:
            groups[-1].append(i)
        else:
            groups.append([i])
    return ChordPartition(tuple(tuple(g) for g in groups))


def build_alignment_matrix(p: ChordPartition) -> np.ndarray:
    M = np.zeros((p.C, p.N), dtype=np.int8)
    for c, g in enumerate(p.groups):
        M[c, list(g)] = 1
    return M


def _chord_onsets_sec(score: Sequence[ScoreNote], p: ChordPartition) -> np.ndarray:
    return np.array([score[g[0]].onset_sec for g in p.groups])


def normalize(raw: np.ndarray) -> np.ndarray:
    raw = np.asarray(raw, dtype=np.float64)
    out = np.empty_like(raw)
    out[..., 0] = (raw[..., 0] - VELOCITY_REFERENCE) / VEL_SCALE
    out[..., 1] = raw[..., 1] / IOI_SCALE
    out[..., 2] = raw[..., 2] / ART_SCALE
    return out


def denormalize(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    out[..., 0] = x[..., 0] * VEL_SCALE + VELOCITY_REFERENCE
    out[..., 1] = x[..., 1] * IOI_SCALE
    out[..., 2] = x[..., 2] * ART_SCALE
    return out


def extract_performance_features(piece: AlignedPiece, p: ChordPartition) -> PerformanceFeatures:
    """Per-note (velocity, log2 IOI ratio, log2 articulation), raw and normalized.

    Raw columns hold the clipped velocity and the base-2 logarithms of the
    clipped ratios.
    """
    if piece.perf is None:
        raise DataError(f"{piece.piece_id}: no performance to extract")
    score, perf = piece.score, piece.perf
    warnings: list[str] = []
    onsets = np.array([n.onset for n in perf], dtype=np.float64)
    durs = np.array([n.duration for n in perf], dtype=np.float64)
    vels = np.array([n.velocity for n in perf], dtype=np.float64)
    if np.any((vels < VEL_MIN) | (vels > VEL_MAX)):
        warnings.append(f"{piece.piece_id}: velocities clipped to [{VEL_MIN}, {VEL_MAX}]")
    vels = np.clip(vels, VEL_MIN, VEL_MAX)

    chord_sec = _chord_onsets_sec(score, p)
    chord_mean = np.array([onsets[list(g)].mean() for g in p.groups])
    log_ioi = np.zeros(p.N)
    log_art = np.zeros(p.N)
    for c, g in enumerate(p.groups):
        if c > 0:
            score_ioi = chord_sec[c] - chord_sec[c - 1]
            for n in g:
                perf_ioi = onsets[n] - chord_mean[c - 1]
                if perf_ioi <= 0:
                    warnings.append(f"{piece.piece_id}: note {n} non-positive IOI, clipped")
                    log_ioi[n] = np.log2(IOI_CLIP[0])
                else:
                    log_ioi[n] = np.log2(np.clip(perf_ioi / score_ioi, *IOI_CLIP))
        if c < p.C - 1:
            for n in g:
                next_ioi = chord_mean[c + 1] - onsets[n]
                if next_ioi <= 0:
                    warnings.append(f"{piece.piece_id}: note {n} non-positive next IOI, clipped")
                    log_art[n] = np.log2(ART_CLIP[0])
                else:
                    log_art[n] = np.log2(np.clip(durs[n] / next_ioi, *ART_CLIP))
        else:
            ratio = np.mean(2.0 ** log_ioi[list(g)])
            for n in g:
                denom = score[n].dur_sec * ratio
                log_art[n] = np.log2(np.clip(durs[n] / denom, *ART_CLIP))
    for w in warnings:
        log.warning(w)
    raw = np.stack([vels, log_ioi, log_art], axis=1)
    return PerformanceFeatures(x=normalize(raw), raw_x=raw, warnings=warnings)


def _top_voice(score: Sequence[ScoreNote]) -> np.ndarray:
    onsets = np.array([n.onset_16ths for n in score])
    ends = onsets + np.array([n.dur_16ths for n in score])
    pitches = np.array([n.pitch for n in score])
    top = np.zeros(len(score), dtype=np.int64)
    for i, t in enumerate(onsets):
        sounding = (onsets <= t) & (t < ends)
        top[i] = int(pitches[i] >= pitches[sounding].max())
    return top


def extract_score_features(score: Sequence[ScoreNote], p: ChordPartition) -> np.ndarray:
    """Eight categorical columns per note, see ``SCORE_COLUMNS``."""
    y = np.zeros((p.N, 8), dtype=np.int64)
    y[:, 0] = [n.pitch for n in score]
    y[:, 1] = np.clip([n.dur_16ths for n in score], 1, 11)
    y[:, 3] = _top_voice(score)
    y[:, 6] = [STAFF_CODES[n.staff] for n in score]
    y[:, 7] = [int(n.measure_pos_16ths == 0) for n in score]
    for c, g in enumerate(p.groups):
        ioi = score[g[0]].onset_16ths - score[p.groups[c - 1][0]].onset_16ths if c > 0 else 0
        by_pitch = sorted(g, key=lambda n: score[n].pitch)
        for pos, n in enumerate(by_pitch, start=1):
            y[n, 2] = min(max(ioi, 1), 11)
            y[n, 4] = min(pos, 11)
            y[n, 5] = min(len(g), 11)
    return y


def extract_piece(piece: AlignedPiece) -> PieceFeatures:
    p = group_chords(piece.score)
    x = extract_performance_features(piece, p).x if piece.perf is not None else None
    return PieceFeatures(piece.piece_id, x, extract_score_features(piece.score, p), p)


def excerpt_windows(n_chords: int, size: int = MAX_CHORDS, hop: int = HOP_CHORDS) -> list[tuple[int, int]]:
    windows = []
    prev_stop = 0
    for start in range(0, n_chords, hop):
        stop = min(start + size, n_chords)
        if stop > prev_stop:
            windows.append((start, stop))
            prev_stop = stop
        if stop == n_chords:
            break
    return windows


def slice_excerpts(feats: PieceFeatures, size: int = MAX_CHORDS, hop: int = HOP_CHORDS,
                   min_notes: int = MIN_NOTES) -> list[Excerpt]:
    p = feats.partition
    out = []
    for start, stop in excerpt_windows(p.C, size, hop):
        n0 = p.groups[start][0]
        n1 = p.groups[stop - 1][-1] + 1
        if n1 - n0 < min_notes:
            continue
        out.append(Excerpt(
            piece_id=feats.piece_id,
            chord_start=start,
            chord_stop=stop,
            note_start=n0,
            note_stop=n1,
            x=None if feats.x is None else feats.x[n0:n1],
            y=feats.y[n0:n1],
            chord_index=feats.chord_index[n0:n1] - start,
        ))
    return out


def invert_features(x: np.ndarray, score: Sequence[ScoreNote], p: ChordPartition,
                    round_velocity: bool = True) -> list[PerfNote]:
    """Rebuild performed notes from normalized features.

    Inverse of ``extract_performance_features``: onsets are reconstructed
    chord by chord from the previous chord's mean performed onset.
    """
    raw = denormalize(np.clip(x, -1.0, 1.0))
    ratio = 2.0 ** raw[:, 1]
    art = 2.0 ** raw[:, 2]
    chord_sec = _chord_onsets_sec(score, p)
    onsets = np.zeros(p.N)
    durs = np.zeros(p.N)
    chord_mean = np.zeros(p.C)
    for c, g in enumerate(p.groups):
        g = list(g)
        if c == 0:
            onsets[g] = chord_sec[0]
        else:
            onsets[g] = chord_mean[c - 1] + ratio[g] * (chord_sec[c] - chord_sec[c - 1])
        chord_mean[c] = onsets[g].mean()
    for c, g in enumerate(p.groups):
        g = list(g)
        if c < p.C - 1:
            next_ioi = chord_mean[c + 1] - onsets[g]
            durs[g] = art[g] * np.maximum(next_ioi, MIN_NEXT_IOI)
        else:
            mean_ratio = ratio[g].mean() if c > 0 else 1.0
            durs[g] = art[g] * np.array([score[n].dur_sec for n in g]) * mean_ratio
    vels = raw[:, 0]
    if round_velocity:
        vels = np.clip(np.round(vels), VEL_MIN, VEL_MAX).astype(int)
    return [PerfNote(float(onsets[n]), float(durs[n]), vels[n].item(), n) for n in range(p.N)]


def plain_performance(score: Sequence[ScoreNote], p: ChordPartition) -> list[PerfNote]:
    """Deadpan rendering: velocity 64, score timing at BPM 120."""
    return invert_features(np.zeros((p.N, 3)), score, p)


# ---------------------------------------------------------------------------
# file formats


def _score_from_record(rec: dict) -> ScoreNote:
    return ScoreNote(
        onset_16ths=int(rec["onset_16ths"]),
        dur_16ths=int(rec["dur_16ths"]),
        pitch=int(rec["pitch"]),
        staff=str(rec["staff"]),
        meter_beats=int(rec["meter_beats"]),
        measure_pos_16ths=int(rec["measure_pos_16ths"]),
    )


def _finish_piece(piece_id: str, pairs: list[tuple[ScoreNote, dict | None]]) -> AlignedPiece:
    if not pairs:
        raise DataError(f"{piece_id}: empty piece")
    has_perf = [rec is not None for _, rec in pairs]
    if any(has_perf) and not all(has_perf):
        raise DataError(f"{piece_id}: some notes lack a performance")
    pairs = sorted(pairs, key=lambda pr: sort_key(pr[0]))
    score = [s for s, _ in pairs]
    perf = None
    if all(has_perf):
        perf = [PerfNote(float(r["onset_s"]), float(r["dur_s"]), int(r["vel"]), i) for i, (_, r) in enumerate(pairs)]
    return AlignedPiece(piece_id, score, perf)


def read_note_pairs(path: str | Path) -> list[AlignedPiece]:
    """Read the JSON-lines note-pair format.

    A ``{"piece_id": ...}`` record opens each piece; every following record
    is ``{"score": {...}, "perf": {...}}`` (``perf`` may be omitted for
    score-only files). Records are re-sorted by (onset, pitch).
    """
    pieces: list[AlignedPiece] = []
    current: str | None = None
    pairs: list[tuple[ScoreNote, dict | None]] = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                if "piece_id" in rec:
                    if current is not None:
                        pieces.append(_finish_piece(current, pairs))
                    current, pairs = str(rec["piece_id"]), []
                    continue
                if current is None:
                    raise DataError("note record before any piece header")
                pairs.append((_score_from_record(rec["score"]), rec.get("perf")))
            except (KeyError, TypeError, ValueError) as exc:
                raise DataError(f"{path}:{lineno}: {exc}") from exc
    if current is not None:
        pieces.append(_finish_piece(current, pairs))
    if not pieces:
        raise DataError(f"{path}: no pieces")
    return pieces


def write_note_pairs(path: str | Path, pieces: Iterable[AlignedPiece]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for piece in pieces:
            fh.write(json.dumps({"piece_id": piece.piece_id}) + "\n")
            for i, s in enumerate(piece.score):
                rec: dict = {"score": {
                    "onset_16ths": s.onset_16ths,
                    "dur_16ths": s.dur_16ths,
                    "pitch": s.pitch,
                    "staff": s.staff,
                    "meter_beats": s.meter_beats,
                    "measure_pos_16ths": s.measure_pos_16ths,
                }}
                if piece.perf is not None:
                    pn = piece.perf[i]
                    rec["perf"] = {"onset_s": pn.onset, "dur_s": pn.duration, "vel": int(pn.velocity)}
                fh.write(json.dumps(rec) + "\n")


FEATURE_HEADER = ("piece_id", "note_idx", "chord_idx") + PERF_COLUMNS + SCORE_COLUMNS


def write_feature_csv(path: str | Path, features: Iterable[PieceFeatures]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(FEATURE_HEADER)
        for f in features:
            ci = f.chord_index
            for n in range(len(ci)):
                perf = [repr(float(v)) for v in f.x[n]] if f.x is not None else ["", "", ""]
                w.writerow([f.piece_id, n, int(ci[n]), *perf, *(int(v) for v in f.y[n])])


def read_feature_csv(path: str | Path) -> list[PieceFeatures]:
    rows: dict[str, list[dict]] = {}
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != FEATURE_HEADER:
            raise DataError(f"{path}: unexpected header {reader.fieldnames}")
        for row in reader:
            rows.setdefault(row["piece_id"], []).append(row)
    out = []
    for pid, rs in rows.items():
        rs.sort(key=lambda r: int(r["note_idx"]))
        has_perf = rs[0]["vel"] != ""
        x = np.array([[float(r[c]) for c in PERF_COLUMNS] for r in rs]) if has_perf else None
        y = np.array([[int(r[c]) for c in SCORE_COLUMNS] for r in rs], dtype=np.int64)
        ci = np.array([int(r["chord_idx"]) for r in rs])
        out.append(PieceFeatures(pid, x, y, ChordPartition.from_chord_index(ci)))
    return out
