"""Hierarchical sequential conditional VAE.

Two chordwise latents: ``z_pln`` (planning, 12 dims = 3 attribute blocks of
4) inferred from the performance alone by a bidirectional GRU, and ``z_str``
(structure) inferred causally from performance and score with a learned
sequential prior. The decoder runs a chordwise GRU, broadcasts its activation
back to notes and generates the note features autoregressively.

Tensors are batched and right-padded: notes ``(B, N, .)`` with a chord index
of -1 on padding, chords ``(B, C, .)`` with a boolean chord mask.
"""

from __future__ import annotations

import copy
import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from torch.func import functional_call

from .hier import c2n, n2c
from .notedata import SCORE_RANGES

N_ATTR = 3
ATTRIBUTES = ("dynamics", "tempo", "articulation")
# attribute order of the performance features: velocity, IOI ratio, articulation
FEATURE_OF_ATTR = {"dynamics": 0, "tempo": 1, "articulation": 2}
SIGMA_FLOOR = 1e-4
MAGIC = b"XSKCH01"

# (perf_emb, score_emb, d_str, hidden)
PROFILES = {
    "paper": (256, 128, 64, 256),
    "desk": (32, 16, 16, 32),
    "tiny": (4, 8, 4, 4),
}
ARCHS = ("hier", "notewise", "cvae")


@dataclass
class ModelConfig:
    profile: str = "desk"
    arch: str = "hier"
    d_pln: int = 12
    d_str: int = 16
    hidden: int = 32
    perf_emb: int = 32
    score_emb: int = 16
    degree: int = 4
    truncation: float = 2.0
    seed: int = 0

    def __post_init__(self):
        if self.d_pln % N_ATTR:
            raise ValueError("d_pln must be divisible by 3")
        if self.score_emb % len(SCORE_RANGES):
            raise ValueError("score_emb must be divisible by 8")
        if self.arch not in ARCHS:
            raise ValueError(f"unknown arch {self.arch!r}")

    @classmethod
    def from_profile(cls, profile: str = "desk", **overrides) -> "ModelConfig":
        perf_emb, score_emb, d_str, hidden = PROFILES[profile]
        kw = dict(profile=profile, perf_emb=perf_emb, score_emb=score_emb, d_str=d_str, hidden=hidden)
        kw.update(overrides)
        return cls(**kw)

    @property
    def block(self) -> int:
        return self.d_pln // N_ATTR

    @property
    def plan_dim(self) -> int:
        """Width of the planning code the decoder reads."""
        return N_ATTR if self.arch == "cvae" else self.d_pln

    def fader_dim(self, attr: int) -> int:
        """Latent dimension aligned with attribute ``attr`` (dim 0 of its block)."""
        return attr if self.arch == "cvae" else attr * self.block


@dataclass
class GaussianSeq:
    mu: torch.Tensor
    sigma: torch.Tensor

    @classmethod
    def from_raw(cls, raw: torch.Tensor) -> "GaussianSeq":
        mu, s = raw.chunk(2, dim=-1)
        return cls(mu, F.softplus(s) + SIGMA_FLOOR)

    def kl(self, other: "GaussianSeq | None" = None) -> torch.Tensor:
        """Elementwise KL(self || other); ``other=None`` means N(0, I)."""
        if other is None:
            return 0.5 * (self.sigma ** 2 + self.mu ** 2 - 1.0) - torch.log(self.sigma)
        var_ratio = (self.sigma / other.sigma) ** 2
        return 0.5 * (var_ratio + ((self.mu - other.mu) / other.sigma) ** 2 - 1.0 - torch.log(var_ratio))

    def detach(self) -> "GaussianSeq":
        return GaussianSeq(self.mu.detach(), self.sigma.detach())


@dataclass
class Batch:
    x: torch.Tensor
    y: torch.Tensor
    chord_index: torch.Tensor
    note_mask: torch.Tensor
    chord_mask: torch.Tensor
    I_pln: torch.Tensor | None = None
    I_str: torch.Tensor | None = None
    ids: list[str] = field(default_factory=list)

    @property
    def n_chords(self) -> int:
        return self.chord_mask.shape[1]

    @property
    def k(self) -> torch.Tensor:
        return n2c(self.x, self.chord_index, self.n_chords)

    def to(self, dtype: torch.dtype) -> "Batch":
        b = copy.copy(self)
        b.x = self.x.to(dtype)
        if self.I_pln is not None:
            b.I_pln = self.I_pln.to(dtype)
            b.I_str = self.I_str.to(dtype)
        return b

    def with_x(self, x: torch.Tensor) -> "Batch":
        b = copy.copy(self)
        b.x = x
        return b


def reparameterize(g: GaussianSeq, generator: torch.Generator | None = None) -> torch.Tensor:
    eps = torch.randn(g.mu.shape, generator=generator, dtype=g.mu.dtype)
    return g.mu + g.sigma * eps


def truncated_noise(shape, threshold: float, generator: torch.Generator | None = None,
                    dtype=torch.float32, max_tries: int = 100) -> torch.Tensor:
    eps = torch.randn(shape, generator=generator, dtype=dtype)
    for _ in range(max_tries):
        bad = eps.abs() > threshold
        if not bad.any():
            return eps
        eps = torch.where(bad, torch.randn(shape, generator=generator, dtype=dtype), eps)
    return eps.clamp(-threshold, threshold)


def truncated_sample(g: GaussianSeq, threshold: float, generator: torch.Generator | None = None) -> torch.Tensor:
    return g.mu + g.sigma * truncated_noise(g.mu.shape, threshold, generator, g.mu.dtype)


def _reverse_index(lengths: torch.Tensor, T: int) -> torch.Tensor:
    t = torch.arange(T).unsqueeze(0)
    L = lengths.unsqueeze(1)
    return torch.where(t < L, L - 1 - t, t)


def _reverse(seq: torch.Tensor, rev: torch.Tensor) -> torch.Tensor:
    return seq.gather(1, rev.unsqueeze(-1).expand_as(seq))


class PerformanceVAE(nn.Module):
    """Encoder, sequential prior, decoder and the two latent discriminators."""

    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = cfg = config
        H, E_x, E_y = cfg.hidden, cfg.perf_emb, cfg.score_emb
        with torch.random.fork_rng():
            torch.manual_seed(cfg.seed)
            self.embed_x = nn.Linear(N_ATTR, E_x)
            width = E_y // len(SCORE_RANGES)
            self.embed_y = nn.ModuleList(nn.Embedding(hi - lo + 1, width) for lo, hi in SCORE_RANGES)
            if cfg.arch != "cvae":
                self.f_pln_fwd = nn.GRU(E_x, H, batch_first=True)
                self.f_pln_bwd = nn.GRU(E_x, H, batch_first=True)
                self.f_pln_head = nn.Linear(2 * H, 2 * cfg.d_pln)
            self.f_str = nn.GRU(E_x + E_y, H, batch_first=True)
            self.f_str_head = nn.Linear(H, 2 * cfg.d_str)
            self.f_prior = nn.GRU(cfg.d_str + E_y, H, batch_first=True)
            self.prior_head = nn.Linear(H, 2 * cfg.d_str)
            self.dec_chord = nn.GRU(cfg.plan_dim + cfg.d_str + E_y, H, batch_first=True)
            self.dec_k_head = nn.Linear(H, N_ATTR)
            self.dec_act_head = nn.Linear(H, H)
            self.dec_note = nn.GRU(H + E_y + N_ATTR, H, batch_first=True)
            self.dec_out_head = nn.Linear(H, N_ATTR)
            if cfg.arch != "cvae":
                self.d_pln = nn.ModuleList(
                    nn.Sequential(nn.Linear(cfg.block, H), nn.Tanh(), nn.Linear(H, 1)) for _ in range(N_ATTR)
                )
            self.d_str = nn.Sequential(nn.Linear(cfg.d_str, H), nn.Tanh(), nn.Linear(H, N_ATTR), nn.Tanh())

    @property
    def dtype(self) -> torch.dtype:
        return self.embed_x.weight.dtype

    # -- functional dispatch, used to run a method with substituted parameters
    def forward(self, op: str, *args, **kwargs):
        return getattr(self, op)(*args, **kwargs)

    def call_with(self, params: dict[str, torch.Tensor], op: str, *args, **kwargs):
        return functional_call(self, params, (op, *args), kwargs)

    @staticmethod
    def param_group(name: str) -> str:
        if name.startswith("embed_"):
            return "embed"
        if name.startswith("f_pln") or name.startswith("f_str"):
            return "encoder"
        if name.startswith("f_prior") or name.startswith("prior_head"):
            return "prior"
        if name.startswith("dec_"):
            return "decoder"
        return "disc"

    # -- embeddings
    def embed_score(self, y: torch.Tensor) -> torch.Tensor:
        cols = []
        for j, (lo, hi) in enumerate(SCORE_RANGES):
            cols.append(self.embed_y[j]((y[..., j] - lo).clamp(0, hi - lo)))
        return torch.cat(cols, dim=-1)

    # -- inference
    def encode(self, x, y, chord_index, chord_mask):
        """Posteriors of z_pln and z_str plus the chordwise embeddings.

        Returns ``(post_pln, post_str, y_chd, x_chd)``; ``post_pln`` is None
        for the cvae variant.
        """
        C = chord_mask.shape[1]
        x_chd = n2c(self.embed_x(x), chord_index, C)
        y_chd = n2c(self.embed_score(y), chord_index, C)
        post_pln = None
        if self.config.arch != "cvae":
            fwd, _ = self.f_pln_fwd(x_chd)
            rev = _reverse_index(chord_mask.sum(1), C)
            bwd, _ = self.f_pln_bwd(_reverse(x_chd, rev))
            h = torch.cat([fwd, _reverse(bwd, rev)], dim=-1)
            post_pln = GaussianSeq.from_raw(self.f_pln_head(h))
        h_str, _ = self.f_str(torch.cat([x_chd, y_chd], dim=-1))
        post_str = GaussianSeq.from_raw(self.f_str_head(h_str))
        return post_pln, post_str, y_chd, x_chd

    def score_chords(self, y, chord_index, n_chords):
        return n2c(self.embed_score(y), chord_index, n_chords)

    # -- sequential prior
    def prior_str(self, y_chd, z_str):
        """Prior parameters at every chord given the (teacher) z_str sequence.

        Chord c sees z_str[<c] and y_chd[<=c]; the first step uses a zero z.
        """
        z_prev = torch.cat([torch.zeros_like(z_str[:, :1]), z_str[:, :-1]], dim=1)
        h, _ = self.f_prior(torch.cat([z_prev, y_chd], dim=-1))
        return GaussianSeq.from_raw(self.prior_head(h))

    def prior_rollout(self, y_chd, generator=None, truncation: float | None = None):
        """Autoregressively sample z_str from the prior; returns (z, GaussianSeq)."""
        B, C, _ = y_chd.shape
        z_prev = y_chd.new_zeros(B, 1, self.config.d_str)
        h = None
        zs, mus, sigmas = [], [], []
        for c in range(C):
            out, h = self.f_prior(torch.cat([z_prev, y_chd[:, c:c + 1]], dim=-1), h)
            g = GaussianSeq.from_raw(self.prior_head(out))
            z = truncated_sample(g, truncation, generator) if truncation else reparameterize(g, generator)
            zs.append(z)
            mus.append(g.mu)
            sigmas.append(g.sigma)
            z_prev = z
        return torch.cat(zs, 1), GaussianSeq(torch.cat(mus, 1), torch.cat(sigmas, 1))

    # -- generation
    def decode(self, plan, z_str, y, chord_index, teacher_x=None):
        """Generate ``(x_hat (B,N,3), k_hat (B,C,3))``.

        ``plan`` is z_pln (or I_pln for the cvae variant). With ``teacher_x``
        the note decoder reads the ground-truth previous note, otherwise its
        own previous output.
        """
        C = plan.shape[1]
        e_y = self.embed_score(y)
        y_chd = n2c(e_y, chord_index, C)
        h_chd, _ = self.dec_chord(torch.cat([plan, z_str, y_chd], dim=-1))
        k_hat = torch.tanh(self.dec_k_head(h_chd))
        act = torch.tanh(self.dec_act_head(h_chd))
        cond = torch.cat([c2n(act, chord_index), e_y], dim=-1)
        B, N, _ = cond.shape
        if teacher_x is not None:
            prev = torch.cat([teacher_x.new_zeros(B, 1, N_ATTR), teacher_x[:, :-1]], dim=1)
            h, _ = self.dec_note(torch.cat([cond, prev], dim=-1))
            return torch.tanh(self.dec_out_head(h)), k_hat
        prev = cond.new_zeros(B, 1, N_ATTR)
        state = None
        outs = []
        for n in range(N):
            h, state = self.dec_note(torch.cat([cond[:, n:n + 1], prev], dim=-1), state)
            prev = torch.tanh(self.dec_out_head(h))
            outs.append(prev)
        return torch.cat(outs, dim=1), k_hat

    # -- discriminators
    def disc_pln(self, z_pln):
        b = self.config.block
        return torch.cat([self.d_pln[a](z_pln[..., a * b:(a + 1) * b]) for a in range(N_ATTR)], dim=-1)

    def disc_str(self, z_str):
        return self.d_str(z_str)


def plan_code(model: PerformanceVAE, post_pln: GaussianSeq | None, batch: Batch, generator=None,
              mean: bool = False) -> torch.Tensor:
    """What the decoder reads as planning: a z_pln draw, or I_pln for cvae."""
    if model.config.arch == "cvae":
        return batch.I_pln
    return post_pln.mu if mean else reparameterize(post_pln, generator)


def elbo_terms(x, k, post_pln, post_str, prior, x_hat, k_hat, note_mask, chord_mask) -> dict[str, torch.Tensor]:
    """Reconstruction MSEs and closed-form KLs (summed over chords, averaged over excerpts)."""
    nm = note_mask.unsqueeze(-1).to(x.dtype)
    cm = chord_mask.unsqueeze(-1).to(x.dtype)
    B = x.shape[0]
    recon_note = (((x_hat - x) ** 2) * nm).sum() / (nm.sum() * N_ATTR)
    recon_chord = (((k_hat - k) ** 2) * cm).sum() / (cm.sum() * N_ATTR)
    kl_pln = (post_pln.kl() * cm).sum() / B if post_pln is not None else x.new_zeros(())
    kl_str = (post_str.kl(prior) * cm).sum() / B
    return {"recon_note": recon_note, "recon_chord": recon_chord, "kl_pln": kl_pln, "kl_str": kl_str}


# ---------------------------------------------------------------------------
# checkpoints


def _pack(arrays: dict[str, np.ndarray], header: dict, dtype: str) -> bytes:
    code = {"float32": "<f4", "float64": "<f8"}[dtype]
    entries, chunks, offset = [], [], 0
    for name, arr in arrays.items():
        buf = np.ascontiguousarray(arr, dtype=code).tobytes()
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset, "nbytes": len(buf)})
        chunks.append(buf)
        offset += len(buf)
    header = dict(header, dtype=dtype, arrays=entries)
    head = json.dumps(header, sort_keys=True).encode()
    return MAGIC + struct.pack("<Q", len(head)) + head + b"".join(chunks)


def _unpack(blob: bytes) -> tuple[dict, dict[str, np.ndarray]]:
    if blob[:len(MAGIC)] != MAGIC:
        raise ValueError("not a checkpoint (bad magic)")
    (n,) = struct.unpack("<Q", blob[len(MAGIC):len(MAGIC) + 8])
    start = len(MAGIC) + 8
    header = json.loads(blob[start:start + n])
    payload = memoryview(blob)[start + n:]
    code = {"float32": "<f4", "float64": "<f8"}[header["dtype"]]
    arrays = {}
    for e in header["arrays"]:
        raw = payload[e["offset"]:e["offset"] + e["nbytes"]]
        arrays[e["name"]] = np.frombuffer(raw, dtype=code).reshape(e["shape"]).copy()
    return header, arrays


def save_checkpoint(path: str | Path, model: PerformanceVAE, epoch: int = 0,
                    optimizer: torch.optim.Optimizer | None = None, extra: dict | None = None) -> None:
    dtype = "float64" if model.dtype == torch.float64 else "float32"
    arrays = {n: p.detach().cpu().numpy() for n, p in model.named_parameters()}
    if optimizer is not None:
        names = {id(p): n for n, p in model.named_parameters()}
        for group in optimizer.param_groups:
            for p in group["params"]:
                st = optimizer.state.get(p)
                if not st:
                    continue
                for key, val in st.items():
                    arrays[f"optim/{names[id(p)]}/{key}"] = torch.as_tensor(val).detach().cpu().numpy()
    header = {"config": asdict(model.config), "epoch": epoch, "extra": extra or {}}
    Path(path).write_bytes(_pack(arrays, header, dtype))


def load_checkpoint(path: str | Path) -> tuple[PerformanceVAE, dict, dict[str, dict[str, torch.Tensor]]]:
    """Return ``(model, header, optimizer_state)``; the state maps param name to Adam buffers."""
    header, arrays = _unpack(Path(path).read_bytes())
    model = PerformanceVAE(ModelConfig(**header["config"]))
    if header["dtype"] == "float64":
        model = model.double()
    state = {}
    params = dict(model.named_parameters())
    with torch.no_grad():
        for name, arr in arrays.items():
            if name.startswith("optim/"):
                pname, key = name[len("optim/"):].rsplit("/", 1)
                state.setdefault(pname, {})[key] = torch.from_numpy(arr)
            else:
                params[name].copy_(torch.from_numpy(arr))
    missing = set(params) - set(arrays)
    if missing:
        raise ValueError(f"checkpoint lacks parameters: {sorted(missing)[:3]}")
    return model, header, state


# ---------------------------------------------------------------------------
# inference-time helpers


@torch.no_grad()
def reconstruct(model: PerformanceVAE, batch: Batch, generator=None, mean: bool = False) -> torch.Tensor:
    """Teacher-forced reconstruction from posterior draws."""
    post_pln, post_str, _, _ = model.encode(batch.x, batch.y, batch.chord_index, batch.chord_mask)
    plan = plan_code(model, post_pln, batch, generator, mean)
    z_str = post_str.mu if mean else reparameterize(post_str, generator)
    x_hat, _ = model.decode(plan, z_str, batch.y, batch.chord_index, teacher_x=batch.x)
    return x_hat


@torch.no_grad()
def infer_plan(model: PerformanceVAE, batch: Batch, generator=None, mean: bool = False,
               zero_input: bool = False) -> torch.Tensor:
    """Planning code inferred from the batch performance (or from a zero matrix)."""
    if zero_input:
        batch = batch.with_x(torch.zeros_like(batch.x))
        if model.config.arch == "cvae":
            return torch.zeros_like(batch.I_pln) if batch.I_pln is not None else batch.x.new_zeros(
                batch.x.shape[0], batch.n_chords, N_ATTR)
    if model.config.arch == "cvae":
        return batch.I_pln
    post_pln, *_ = model.encode(batch.x, batch.y, batch.chord_index, batch.chord_mask)
    return post_pln.mu if mean else reparameterize(post_pln, generator)


@torch.no_grad()
def generate(model: PerformanceVAE, batch: Batch, plan: torch.Tensor, z_str: torch.Tensor | None = None,
             generator=None, truncation: float | None = None) -> torch.Tensor:
    """Free-running generation; z_str is rolled out from the prior unless given."""
    if z_str is None:
        y_chd = model.score_chords(batch.y, batch.chord_index, batch.n_chords)
        z_str, _ = model.prior_rollout(y_chd, generator, truncation)
    x_hat, _ = model.decode(plan, z_str, batch.y, batch.chord_index)
    return x_hat
