"""Self-supervised signals and the latent regularization losses."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .seqcvae import Batch, PerformanceVAE, reparameterize

MAX_REG_ITEMS = 256


@dataclass
class PlanningSignal:
    I_pln: np.ndarray
    coeffs: np.ndarray
    degree: int


def chord_positions(n_chords: int) -> np.ndarray:
    if n_chords == 1:
        return np.zeros(1)
    return np.arange(n_chords) / (n_chords - 1)


def fit_planning_signal(k: np.ndarray, degree: int = 4) -> PlanningSignal:
    """Least-squares polynomial contour of every attribute column of ``k``.

    Abscissae are normalized chord positions in [0, 1]. The degree drops to
    C - 1 for short sequences. Coefficients are in increasing power order,
    one row per attribute.
    """
    k = np.asarray(k, dtype=np.float64)
    C = k.shape[0]
    deg = min(degree, C - 1)
    V = np.vander(chord_positions(C), deg + 1, increasing=True)
    # deg <= C - 1 keeps V at full column rank, so plain QR needs no ridge
    Q, R = np.linalg.qr(V)
    coeffs = np.linalg.solve(R, Q.T @ k)
    return PlanningSignal(I_pln=V @ coeffs, coeffs=coeffs.T, degree=deg)


def structure_signal(k: np.ndarray, I_pln: np.ndarray) -> np.ndarray:
    return np.sign(np.asarray(k) - np.asarray(I_pln))


def excerpt_signals(k: np.ndarray, degree: int = 4) -> tuple[np.ndarray, np.ndarray]:
    I_pln = fit_planning_signal(k, degree).I_pln
    return I_pln, structure_signal(k, I_pln)


def _masked_mse(pred, target, chord_mask):
    m = chord_mask.unsqueeze(-1).to(pred.dtype)
    return (((pred - target) ** 2) * m).sum() / (m.sum() * pred.shape[-1])


def loss_pln(pred: torch.Tensor, I_pln: torch.Tensor, chord_mask: torch.Tensor) -> torch.Tensor:
    """Mean over the attribute sub-discriminators of their per-chord MSE.

    ``pred[..., a]`` is the output of the sub-discriminator reading block a.
    Every attribute sees the same chords, so the attribute mean equals the
    pooled MSE.
    """
    return _masked_mse(pred, I_pln, chord_mask)


def loss_str(pred: torch.Tensor, I_str: torch.Tensor, chord_mask: torch.Tensor) -> torch.Tensor:
    return _masked_mse(pred, I_str, chord_mask)


def pairwise_reg(d: torch.Tensor, a: torch.Tensor) -> torch.Tensor:
    """MSE between tanh of latent differences and sign of attribute differences."""
    if d.numel() < 2:
        return d.new_zeros(())
    D_d = d.unsqueeze(1) - d.unsqueeze(0)
    D_a = a.unsqueeze(1) - a.unsqueeze(0)
    return ((torch.tanh(D_d) - torch.sign(D_a)) ** 2).mean()


def loss_reg(z_pln: torch.Tensor, k: torch.Tensor, chord_mask: torch.Tensor, fader_dims,
             generator: torch.Generator | None = None, max_items: int = MAX_REG_ITEMS) -> torch.Tensor:
    """Attribute alignment of each fader dimension, pooled over (excerpt, chord) items."""
    mask = chord_mask.reshape(-1)
    z = z_pln.reshape(-1, z_pln.shape[-1])[mask]
    attrs = k.reshape(-1, k.shape[-1])[mask]
    n = z.shape[0]
    total = z_pln.new_zeros(())
    for a, dim in enumerate(fader_dims):
        if n > max_items:
            pick = torch.randperm(n, generator=generator)[:max_items]
        else:
            pick = torch.arange(n)
        total = total + pairwise_reg(z[pick, dim], attrs[pick, a])
    return total / len(fader_dims)


def loss_fac(model: PerformanceVAE, batch: Batch, z_pln: torch.Tensor,
             generator: torch.Generator | None = None, frozen: PerformanceVAE | None = None) -> torch.Tensor:
    """Re-inference loss on a free-running sample, trained through the decoder only.

    ``z_pln`` comes from the posterior of the real performance; z_str is
    rolled out from the prior. Encoder, prior, embedding and discriminator
    parameters enter as constants (taken from ``frozen`` when given), so
    this term never updates them.
    """
    src = frozen if frozen is not None else model
    fixed = {n: p.detach() for n, p in src.named_parameters()}
    params = {n: (p if model.param_group(n) == "decoder" else fixed[n]) for n, p in model.named_parameters()}
    with torch.no_grad():
        y_chd = src.score_chords(batch.y, batch.chord_index, batch.n_chords)
        z_str, _ = src.prior_rollout(y_chd, generator)
    x_tilde, _ = model.call_with(params, "decode", z_pln.detach(), z_str, batch.y, batch.chord_index)
    x_tilde = x_tilde * batch.note_mask.unsqueeze(-1).to(x_tilde.dtype)
    post, *_ = model.call_with(params, "encode", x_tilde, batch.y, batch.chord_index, batch.chord_mask)
    z_tilde = reparameterize(post, generator)
    pred = model.call_with(params, "disc_pln", z_tilde)
    return loss_pln(pred, batch.I_pln, batch.chord_mask)

