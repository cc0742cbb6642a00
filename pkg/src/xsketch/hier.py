"""Note-to-chord pooling (N2C) and chord-to-note broadcasting (C2N).

Both operators work from a per-note chord index instead of the dense C x N
alignment matrix: ``n2c(e) == (M @ e) / M.sum(1)`` and ``c2n(e) == M.T @ e``
at O(N * D) cost. An index of -1 marks a padded note; it is ignored by
``n2c`` and receives zeros from ``c2n``.

Inputs are either numpy arrays or torch tensors, shaped ``(N, D)`` with an
index of shape ``(N,)``, or batched ``(B, N, D)`` with ``(B, N)``.
"""

from __future__ import annotations

import numpy as np
import torch


def _check(e_rows: int, index_len: int):
    if e_rows != index_len:
        raise ValueError(f"embedding has {e_rows} rows but index has {index_len} entries")


class _SegmentMean(torch.autograd.Function):
    @staticmethod
    def forward(ctx, e, index, n_chords):
        B, N, D = e.shape
        safe = torch.where(index < 0, n_chords, index)
        counts = torch.zeros(B, n_chords + 1, dtype=e.dtype).scatter_add_(1, safe, torch.ones_like(safe, dtype=e.dtype))
        counts = counts[:, :n_chords].clamp(min=1.0)
        sums = torch.zeros(B, n_chords + 1, D, dtype=e.dtype).scatter_add_(1, safe.unsqueeze(-1).expand(B, N, D), e)
        ctx.save_for_backward(safe, counts)
        return sums[:, :n_chords] / counts.unsqueeze(-1)

    @staticmethod
    def backward(ctx, grad):
        safe, counts = ctx.saved_tensors
        B, C, D = grad.shape
        scaled = torch.cat([grad / counts.unsqueeze(-1), grad.new_zeros(B, 1, D)], dim=1)
        return scaled.gather(1, safe.unsqueeze(-1).expand(-1, -1, D)), None, None


class _Broadcast(torch.autograd.Function):
    @staticmethod
    def forward(ctx, e, index):
        B, C, D = e.shape
        safe = torch.where(index < 0, C, index)
        ctx.save_for_backward(safe)
        ctx.n_chords = C
        padded = torch.cat([e, e.new_zeros(B, 1, D)], dim=1)
        return padded.gather(1, safe.unsqueeze(-1).expand(-1, -1, D))

    @staticmethod
    def backward(ctx, grad):
        (safe,) = ctx.saved_tensors
        B, N, D = grad.shape
        out = grad.new_zeros(B, ctx.n_chords + 1, D).scatter_add_(1, safe.unsqueeze(-1).expand(B, N, D), grad)
        return out[:, : ctx.n_chords], None


def _batched(fn, e, index, *args):
    squeeze = e.dim() == 2
    if squeeze:
        e, index = e.unsqueeze(0), index.unsqueeze(0)
    out = fn(e, index.long(), *args)
    return out.squeeze(0) if squeeze else out


def n2c(e, chord_index, n_chords: int | None = None):
    """Mean of the note rows of every chord."""
    if n_chords is None:
        n_chords = int(chord_index.max()) + 1
    _check(e.shape[-2], chord_index.shape[-1])
    if isinstance(e, torch.Tensor):
        index = torch.as_tensor(chord_index)
        return _batched(_SegmentMean.apply, e, index, n_chords)
    e = np.asarray(e, dtype=np.float64)
    idx = np.asarray(chord_index)
    if e.ndim == 3:
        return np.stack([n2c(e[b], idx[b], n_chords) for b in range(e.shape[0])])
    keep = idx >= 0
    sums = np.zeros((n_chords, e.shape[1]))
    np.add.at(sums, idx[keep], e[keep])
    counts = np.bincount(idx[keep], minlength=n_chords).astype(np.float64)
    return sums / np.maximum(counts, 1.0)[:, None]


def _check_chords(n_rows: int, index) -> None:
    top = int(index.max()) if len(index) else -1
    if top >= n_rows:
        raise ValueError(f"chord index {top} out of range for {n_rows} chords")
    if index.ndim == 1 and len(index) and int(index.min()) >= 0 and top + 1 != n_rows:
        # unpadded single sequence: the chord count is known exactly
        raise ValueError(f"embedding has {n_rows} chord rows but the index covers {top + 1}")


def c2n(e, chord_index):
    """Copy every chord row onto the notes of that chord."""
    if isinstance(e, torch.Tensor):
        index = torch.as_tensor(chord_index)
        _check_chords(e.shape[-2], index)
        return _batched(_Broadcast.apply, e, index)
    e = np.asarray(e, dtype=np.float64)
    idx = np.asarray(chord_index)
    if e.ndim == 3:
        return np.stack([c2n(e[b], idx[b]) for b in range(e.shape[0])])
    _check_chords(e.shape[0], idx)
    out = np.zeros((idx.shape[0], e.shape[1]))
    keep = idx >= 0
    out[keep] = e[idx[keep]]
    return out


def chord_index_from_matrix(M) -> np.ndarray:
    M = np.asarray(M)
    if not np.all(M.sum(axis=0) == 1):
        raise ValueError("alignment matrix columns must each sum to 1")
    return M.argmax(axis=0)
