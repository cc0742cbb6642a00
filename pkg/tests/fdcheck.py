"""Central finite differences of every training loss term, sharing one parameter sweep."""

import copy

import torch

from xsketch.seqcvae import PerformanceVAE
from xsketch.trainer import step_generator, total_loss

TERMS = ("vae", "pln", "str", "reg", "fac", "total")


def _named_terms(model, batch, cfg, seed, frozen):
    loss, t = total_loss(model, batch, cfg, step_generator(seed, 0), frozen)
    return {
        "vae": t["recon_note"] + t["recon_chord"] + cfg.kl_weight * (t["kl_pln"] + t["kl_str"]),
        "pln": t["pln"], "str": t["str"], "reg": t["reg"], "fac": t["fac"], "total": loss,
    }


def analytic_gradients(model, batch, cfg, seed=0, frozen=None):
    params = list(model.parameters())
    terms = _named_terms(model, batch, cfg, seed, frozen)
    out = {}
    for name in TERMS:
        grads = torch.autograd.grad(terms[name], params, retain_graph=True, allow_unused=True)
        out[name] = torch.cat([torch.zeros(p.numel(), dtype=p.dtype) if g is None else g.reshape(-1)
                               for p, g in zip(params, grads)])
    return out


def numeric_gradients(model, batch, cfg, coords, seed=0, frozen=None, h=1e-5):
    """Gradient entries at flat parameter indices ``coords``."""
    flats = [p.data.view(-1) for p in model.parameters()]
    offsets = []
    start = 0
    for f in flats:
        offsets.append(start)
        start += f.numel()
    out = {name: torch.zeros(len(coords), dtype=torch.float64) for name in TERMS}
    with torch.no_grad():
        for j, c in enumerate(coords):
            i = max(k for k, o in enumerate(offsets) if o <= c)
            flat, pos = flats[i], c - offsets[i]
            old = flat[pos].item()
            flat[pos] = old + h
            up = _named_terms(model, batch, cfg, seed, frozen)
            flat[pos] = old - h
            down = _named_terms(model, batch, cfg, seed, frozen)
            flat[pos] = old
            for name in TERMS:
                out[name][j] = (up[name].item() - down[name].item()) / (2 * h)
    return out


def decoder_coords(model):
    out, start = [], 0
    for name, p in model.named_parameters():
        if PerformanceVAE.param_group(name) == "decoder":
            out.extend(range(start, start + p.numel()))
        start += p.numel()
    return set(out)


def relative_errors(model, batch, cfg, coords=None, seed=0):
    """Norm-wise relative error of analytic vs finite-difference gradient, per term.

    L_fac reads z_pln through a stop-gradient, which differencing cannot
    mimic, so its comparison is limited to decoder coordinates.
    """
    frozen = copy.deepcopy(model)
    analytic = analytic_gradients(model, batch, cfg, seed, frozen)
    n = analytic["total"].numel()
    coords = list(range(n)) if coords is None else list(coords)
    numeric = numeric_gradients(model, batch, cfg, coords, seed, frozen)
    dec = decoder_coords(model)
    errs = {}
    for name in TERMS:
        keep = [j for j, c in enumerate(coords) if name != "fac" or c in dec]
        a = analytic[name][[coords[j] for j in keep]]
        d = numeric[name][keep]
        errs[name] = float(torch.linalg.norm(a - d) / max(float(torch.linalg.norm(d)), 1e-300))
    return errs
