"""Prepared datasets: excerpts with cached planning/structure signals, and batch collation."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from .hier import n2c
from .notedata import (
    AlignedPiece,
    DataError,
    Excerpt,
    PieceFeatures,
    SCORE_RANGES,
    extract_piece,
    read_feature_csv,
    read_note_pairs,
    slice_excerpts,
    write_feature_csv,
    write_note_pairs,
)
from .regularizers import excerpt_signals
from .seqcvae import Batch

SIGNAL_COLUMNS = ("I_pln_v", "I_pln_t", "I_pln_a", "I_str_v", "I_str_t", "I_str_a")


@dataclass
class Item:
    """One training unit: an excerpt viewed at the chord level the model uses."""

    excerpt: Excerpt
    chord_index: np.ndarray
    I_pln: np.ndarray | None = None
    I_str: np.ndarray | None = None

    @property
    def item_id(self) -> str:
        return self.excerpt.excerpt_id

    @property
    def n_chords(self) -> int:
        return int(self.chord_index.max()) + 1

    @property
    def k(self) -> np.ndarray:
        return n2c(self.excerpt.x, self.chord_index, self.n_chords)


def make_item(ex: Excerpt, arch: str = "hier", degree: int = 4) -> Item:
    # notewise variants treat every note as its own chord
    ci = np.arange(ex.n_notes) if arch in ("notewise", "cvae") else ex.chord_index.copy()
    item = Item(ex, ci)
    if ex.x is not None:
        item.I_pln, item.I_str = excerpt_signals(item.k, degree)
    return item


@dataclass
class Dataset:
    pieces: list[AlignedPiece]
    features: list[PieceFeatures]
    items: list[Item]
    degree: int = 4
    arch: str = "hier"

    def __len__(self):
        return len(self.items)

    def piece(self, piece_id: str) -> AlignedPiece:
        for p in self.pieces:
            if p.piece_id == piece_id:
                return p
        raise KeyError(piece_id)

    def subset(self, piece_ids: Sequence[str]) -> "Dataset":
        keep = set(piece_ids)
        return Dataset(
            [p for p in self.pieces if p.piece_id in keep],
            [f for f in self.features if f.piece_id in keep],
            [it for it in self.items if it.excerpt.piece_id in keep],
            self.degree,
            self.arch,
        )

    def with_view(self, arch: str | None = None, degree: int | None = None) -> "Dataset":
        """Re-derive items for another architecture view or polynomial degree."""
        arch = arch or self.arch
        degree = self.degree if degree is None else degree
        if arch == self.arch and degree == self.degree:
            return self
        items = [make_item(it.excerpt, arch, degree) for it in self.items]
        return Dataset(self.pieces, self.features, items, degree, arch)


def prepare(pieces: Sequence[AlignedPiece], degree: int = 4, arch: str = "hier") -> Dataset:
    features = [extract_piece(p) for p in pieces]
    items = [make_item(ex, arch, degree) for f in features for ex in slice_excerpts(f)]
    if not items:
        raise DataError("no excerpts with enough notes")
    return Dataset(list(pieces), features, items, degree, arch)


def split_pieces(ds: Dataset, test_fraction: float = 0.1, seed: int = 0) -> tuple[Dataset, Dataset]:
    ids = sorted(p.piece_id for p in ds.pieces)
    rng = np.random.default_rng(seed)
    rng.shuffle(ids)
    n_test = max(1, int(round(len(ids) * test_fraction)))
    return ds.subset(ids[n_test:]), ds.subset(ids[:n_test])


def collate(items: Sequence[Item], dtype: torch.dtype = torch.float32) -> Batch:
    B = len(items)
    N = max(it.excerpt.n_notes for it in items)
    C = max(it.n_chords for it in items)
    x = np.zeros((B, N, 3))
    y = np.tile(np.array([lo for lo, _ in SCORE_RANGES]), (B, N, 1))
    ci = np.full((B, N), -1, dtype=np.int64)
    nm = np.zeros((B, N), dtype=bool)
    cm = np.zeros((B, C), dtype=bool)
    I_pln = np.zeros((B, C, 3))
    I_str = np.zeros((B, C, 3))
    has_x = all(it.excerpt.x is not None for it in items)
    for b, it in enumerate(items):
        n, c = it.excerpt.n_notes, it.n_chords
        if has_x:
            x[b, :n] = it.excerpt.x
            I_pln[b, :c] = it.I_pln
            I_str[b, :c] = it.I_str
        y[b, :n] = it.excerpt.y
        ci[b, :n] = it.chord_index
        nm[b, :n] = True
        cm[b, :c] = True
    return Batch(
        x=torch.tensor(x, dtype=dtype),
        y=torch.from_numpy(y.astype(np.int64)),
        chord_index=torch.from_numpy(ci),
        note_mask=torch.from_numpy(nm),
        chord_mask=torch.from_numpy(cm),
        I_pln=torch.tensor(I_pln, dtype=dtype) if has_x else None,
        I_str=torch.tensor(I_str, dtype=dtype) if has_x else None,
        ids=[it.item_id for it in items],
    )


def unpad_notes(batch: Batch, values: torch.Tensor, b: int) -> np.ndarray:
    return values[b][batch.note_mask[b]].detach().cpu().numpy().astype(np.float64)


def unpad_chords(batch: Batch, values: torch.Tensor, b: int) -> np.ndarray:
    return values[b][batch.chord_mask[b]].detach().cpu().numpy().astype(np.float64)


# ---------------------------------------------------------------------------
# dataset directory


def save_dataset(ds: Dataset, out_dir: str | Path) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_note_pairs(out / "pieces.jsonl", ds.pieces)
    write_feature_csv(out / "features.csv", ds.features)
    with open(out / "signals.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(("excerpt_id", "chord_idx") + SIGNAL_COLUMNS)
        for it in ds.items:
            if it.I_pln is None:
                continue
            for c in range(it.n_chords):
                w.writerow([it.item_id, c, *(repr(float(v)) for v in it.I_pln[c]), *(int(v) for v in it.I_str[c])])
    meta = {
        "degree": ds.degree,
        "arch": ds.arch,
        "excerpts": [
            {"excerpt_id": it.item_id, "piece_id": it.excerpt.piece_id, "chord_start": it.excerpt.chord_start,
             "chord_stop": it.excerpt.chord_stop, "note_start": it.excerpt.note_start,
             "note_stop": it.excerpt.note_stop}
            for it in ds.items
        ],
    }
    (out / "dataset.json").write_text(json.dumps(meta, indent=1), encoding="utf-8")


def load_dataset(path: str | Path, degree: int | None = None, arch: str | None = None) -> Dataset:
    """Load a prepared directory, or prepare a note-pair JSONL file on the fly."""
    path = Path(path)
    if path.is_file():
        return prepare(read_note_pairs(path), degree or 4, arch or "hier")
    meta_path = path / "dataset.json"
    if not meta_path.exists():
        raise DataError(f"{path}: not a prepared dataset")
    meta = json.loads(meta_path.read_text(encoding="utf-8"))
    pieces = read_note_pairs(path / "pieces.jsonl")
    features = {f.piece_id: f for f in read_feature_csv(path / "features.csv")}
    cached: dict[str, list[list[str]]] = {}
    with open(path / "signals.csv", newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        next(reader)
        for row in reader:
            cached.setdefault(row[0], []).append(row)
    items = []
    for e in meta["excerpts"]:
        f = features[e["piece_id"]]
        n0, n1, c0 = e["note_start"], e["note_stop"], e["chord_start"]
        ex = Excerpt(e["piece_id"], c0, e["chord_stop"], n0, n1,
                     None if f.x is None else f.x[n0:n1], f.y[n0:n1], f.chord_index[n0:n1] - c0)
        ci = np.arange(ex.n_notes) if meta["arch"] in ("notewise", "cvae") else ex.chord_index.copy()
        item = Item(ex, ci)
        rows = cached.get(e["excerpt_id"])
        if rows:
            vals = np.array([[float(v) for v in r[2:]] for r in sorted(rows, key=lambda r: int(r[1]))])
            item.I_pln, item.I_str = vals[:, :3], vals[:, 3:]
        items.append(item)
    ds = Dataset(pieces, list(features.values()), items, meta["degree"], meta["arch"])
    return ds.with_view(arch, degree)

