"""Evaluation: correlations, disentanglement, controllability, KL and listening-test rates."""

from __future__ import annotations

import csv
import json
import math
from collections import defaultdict
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from .dataset import Item, collate, unpad_chords, unpad_notes
from .hier import n2c
from .notedata import DataError
from .regularizers import fit_planning_signal
from .seqcvae import (
    ATTRIBUTES,
    N_ATTR,
    Batch,
    generate,
    infer_plan,
    reconstruct,
    reparameterize,
)

N_REPEATS = 20
N_SAMPLES = 20
GROUPS = ("T", "UT")


@dataclass
class Stat:
    mean: float
    std: float
    n: int

    @classmethod
    def of(cls, values: Sequence[float]) -> "Stat":
        v = np.asarray(values, dtype=np.float64)
        if v.size == 0:
            return cls(float("nan"), float("nan"), 0)
        return cls(float(v.mean()), float(v.std()), int(v.size))

    def __str__(self):
        return f"{self.mean:.3f}±{self.std:.3f}"


# ---------------------------------------------------------------------------
# pure metric functions


def pearson(a: np.ndarray, b: np.ndarray) -> tuple[float, bool]:
    """Pearson r; returns ``(0.0, True)`` when either sequence has zero variance."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    da, db = a - a.mean(), b - b.mean()
    denom = math.sqrt(float(da @ da) * float(db @ db))
    if denom <= 1e-300:
        return 0.0, True
    return float(np.clip((da @ db) / denom, -1.0, 1.0)), False


def r_squared(x: np.ndarray, y: np.ndarray) -> float:
    """R^2 of the ordinary least-squares line of y on x, in [0, 1]; 0 if y is constant."""
    x = np.asarray(x, dtype=np.float64).ravel()
    y = np.asarray(y, dtype=np.float64).ravel()
    ss_tot = float(((y - y.mean()) ** 2).sum())
    if ss_tot <= 1e-300:
        return 0.0
    X = np.stack([np.ones_like(x), x], axis=1)
    coef, *_ = np.linalg.lstsq(X, y, rcond=None)
    ss_res = float(((y - X @ coef) ** 2).sum())
    return float(np.clip(1.0 - ss_res / ss_tot, 0.0, 1.0))


def consistency(controlled: np.ndarray) -> float:
    """``controlled`` is (n_samples, T): 1 minus the time-mean of the cross-sample std."""
    return float(1.0 - np.asarray(controlled, dtype=np.float64).std(axis=0).mean())


def restrictiveness(uncontrolled_1: np.ndarray, uncontrolled_2: np.ndarray) -> float:
    """Each input is (n_samples, T); penalizes temporal variation of the other attributes."""
    u1 = np.asarray(uncontrolled_1, dtype=np.float64)
    u2 = np.asarray(uncontrolled_2, dtype=np.float64)
    M = u1.shape[0]
    return float(1.0 - (u1.std(axis=1).sum() + u2.std(axis=1).sum()) / (2 * M))


def linearity(schedule: np.ndarray, controlled: np.ndarray) -> float:
    """R^2 over all (d_t, value_{m,t}) points."""
    controlled = np.asarray(controlled, dtype=np.float64)
    d = np.broadcast_to(np.asarray(schedule, dtype=np.float64), controlled.shape)
    return r_squared(d, controlled)


def fader_schedule(lo: float, hi: float, T: int) -> np.ndarray:
    """d_t = lo + (t / T)(hi - lo) for t = 1..T."""
    t = np.arange(1, T + 1, dtype=np.float64)
    return lo + (t / T) * (hi - lo)


# ---------------------------------------------------------------------------
# model-driven suites


def _generator(seed: int, *key: int) -> torch.Generator:
    state = np.random.SeedSequence([seed, *key]).generate_state(1)[0]
    return torch.Generator().manual_seed(int(state))


def _chunks(items: Sequence[Item], size: int):
    for i in range(0, len(items), size):
        yield i, items[i:i + size]


def _dtype(model) -> torch.dtype:
    return next(model.parameters()).dtype if any(True for _ in model.parameters()) else torch.float64


def _excerpt_r(batch: Batch, x_hat: torch.Tensor, b: int) -> tuple[float, int]:
    truth = unpad_notes(batch, batch.x, b)
    pred = unpad_notes(batch, x_hat, b)
    rs, flags = [], 0
    for a in range(N_ATTR):
        r, flag = pearson(truth[:, a], pred[:, a])
        rs.append(r)
        flags += flag
    return float(np.mean(rs)), flags


@torch.no_grad()
def pearson_suite(model, items: Sequence[Item], seed: int = 0, n_repeats: int = N_REPEATS,
                  batch_size: int = 64) -> dict:
    """Correlation of reconstructions and generations with the real performances."""
    dtype = _dtype(model)
    out = {"R_recon": [], "R_x|pln": [], "R_x|pln0": []}
    flags = {key: 0 for key in out}
    for rep in range(n_repeats):
        for start, chunk in _chunks(items, batch_size):
            batch = collate(chunk, dtype)
            g = _generator(seed, rep, start)
            gens = {
                "R_recon": reconstruct(model, batch, g),
                "R_x|pln": generate(model, batch, infer_plan(model, batch, g), generator=g),
                "R_x|pln0": generate(model, batch, infer_plan(model, batch, g, zero_input=True), generator=g),
            }
            for key, x_hat in gens.items():
                for b in range(len(chunk)):
                    r, f = _excerpt_r(batch, x_hat, b)
                    out[key].append(r)
                    flags[key] += f
    return {key: Stat.of(v) for key, v in out.items()} | {"zero_variance": flags}


@torch.no_grad()
def disentanglement_suite(model, items: Sequence[Item], seed: int = 0, n_repeats: int = N_REPEATS,
                          batch_size: int = 64) -> dict:
    """MSE_p: planning refit of generations vs I_pln. MSE_s: chord means of
    structure-only generations vs the residual k - I_pln."""
    dtype = _dtype(model)
    degree = model.config.degree
    mse_p, mse_s = [], []
    for rep in range(n_repeats):
        for start, chunk in _chunks(items, batch_size):
            batch = collate(chunk, dtype)
            g = _generator(seed, rep, start)
            x_pln = generate(model, batch, infer_plan(model, batch, g), generator=g)
            _, post_str, _, _ = model.encode(batch.x, batch.y, batch.chord_index, batch.chord_mask)
            z_str = reparameterize(post_str, g)
            x_str = generate(model, batch, infer_plan(model, batch, g, zero_input=True), z_str, generator=g)
            k_pln = n2c(x_pln, batch.chord_index, batch.n_chords)
            k_str = n2c(x_str, batch.chord_index, batch.n_chords)
            for b, it in enumerate(chunk):
                I_pln = it.I_pln
                refit = fit_planning_signal(unpad_chords(batch, k_pln, b), degree).I_pln
                mse_p.append(float(((refit - I_pln) ** 2).mean()))
                mse_s.append(float(((unpad_chords(batch, k_str, b) - (it.k - I_pln)) ** 2).mean()))
    return {"MSE_p": Stat.of(mse_p), "MSE_s": Stat.of(mse_s)}


@torch.no_grad()
def fader_range(model, items: Sequence[Item], batch_size: int = 64) -> np.ndarray:
    """(3, 2) min/max of each fader dimension over posterior means of the items."""
    dtype = _dtype(model)
    lo = np.full(N_ATTR, np.inf)
    hi = np.full(N_ATTR, -np.inf)
    for _, chunk in _chunks(items, batch_size):
        batch = collate(chunk, dtype)
        plan = infer_plan(model, batch, mean=True)
        for a in range(N_ATTR):
            vals = plan[..., model.config.fader_dim(a)][batch.chord_mask]
            lo[a] = min(lo[a], float(vals.min()))
            hi[a] = max(hi[a], float(vals.max()))
    return np.stack([lo, hi], axis=1)


def _repeat_batch(batch: Batch, n: int) -> Batch:
    def rep(t):
        return None if t is None else t.repeat_interleave(n, dim=0)
    return Batch(rep(batch.x), rep(batch.y), rep(batch.chord_index), rep(batch.note_mask),
                 rep(batch.chord_mask), rep(batch.I_pln), rep(batch.I_str),
                 [i for i in batch.ids for _ in range(n)])


@torch.no_grad()
def controllability_suite(model, items: Sequence[Item], n_samples: int = N_SAMPLES, seed: int = 0,
                          batch_size: int = 16, ranges: np.ndarray | None = None) -> dict:
    """Consistency, restrictiveness and linearity of every fader dimension.

    The input performance is the constant x = 0; its posterior-mean planning
    code gets the target dimension overwritten with a linear ramp spanning
    the range that dimension takes over the items' own performances.
    """
    dtype = _dtype(model)
    ranges = fader_range(model, items) if ranges is None else np.asarray(ranges)
    scores = {attr: {"C": [], "R": [], "L": []} for attr in ATTRIBUTES}
    degenerate = [bool(ranges[a, 1] <= ranges[a, 0]) for a in range(N_ATTR)]
    for start, chunk in _chunks(items, batch_size):
        base = collate(chunk, dtype)
        base = base.with_x(torch.zeros_like(base.x))
        z_bar = infer_plan(model, base, mean=True, zero_input=True)
        big = _repeat_batch(base, n_samples)
        for a, attr in enumerate(ATTRIBUTES):
            dim = model.config.fader_dim(a)
            plan = z_bar.clone()
            for b, it in enumerate(chunk):
                T = it.n_chords
                plan[b, :T, dim] = torch.as_tensor(fader_schedule(ranges[a, 0], ranges[a, 1], T), dtype=dtype)
            g = _generator(seed, start, a)
            x_hat = generate(model, big, plan.repeat_interleave(n_samples, dim=0), generator=g)
            k_hat = n2c(x_hat, big.chord_index, big.n_chords)
            others = [o for o in range(N_ATTR) if o != a]
            for b, it in enumerate(chunk):
                T = it.n_chords
                vals = k_hat[b * n_samples:(b + 1) * n_samples, :T].double().numpy()
                d = fader_schedule(ranges[a, 0], ranges[a, 1], T)
                scores[attr]["C"].append(consistency(vals[:, :, a]))
                scores[attr]["R"].append(restrictiveness(vals[:, :, others[0]], vals[:, :, others[1]]))
                scores[attr]["L"].append(linearity(d, vals[:, :, a]))
    per_attr = {attr: {m: Stat.of(v) for m, v in s.items()} for attr, s in scores.items()}
    mean = {m: float(np.mean([per_attr[attr][m].mean for attr in ATTRIBUTES])) for m in ("C", "R", "L")}
    return {"per_attribute": per_attr, "mean": mean, "ranges": ranges.tolist(), "degenerate": degenerate}


@torch.no_grad()
def kld_suite(model, items: Sequence[Item], seed: int = 0, batch_size: int = 64) -> dict:
    """Mean per-chord KL of each posterior against its prior; KLD_p is None without z_pln."""
    dtype = _dtype(model)
    kld_p, kld_s = [], []
    for start, chunk in _chunks(items, batch_size):
        batch = collate(chunk, dtype)
        post_pln, post_str, y_chd, _ = model.encode(batch.x, batch.y, batch.chord_index, batch.chord_mask)
        z_str = reparameterize(post_str, _generator(seed, start))
        prior = model.prior_str(y_chd, z_str)
        kl_s = post_str.kl(prior).sum(-1)
        kl_p = post_pln.kl().sum(-1) if post_pln is not None else None
        for b, it in enumerate(chunk):
            C = it.n_chords
            kld_s.append(float(kl_s[b, :C].sum()) / C)
            if kl_p is not None:
                kld_p.append(float(kl_p[b, :C].sum()) / C)
    return {"KLD_p": Stat.of(kld_p) if kld_p else None, "KLD_s": Stat.of(kld_s)}


# ---------------------------------------------------------------------------
# listening test


@dataclass
class ListeningRates:
    models: list[str]
    # group -> model -> Stat of per-participant winning rates
    winning: dict[str, dict[str, Stat]]
    # group -> model -> share of participants ranking the model on top
    top: dict[str, dict[str, float]]
    participants: dict[str, int]

    def to_json(self) -> dict:
        return {
            "models": self.models,
            "participants": self.participants,
            "winning": {g: {m: asdict(s) for m, s in row.items()} for g, row in self.winning.items()},
            "top": self.top,
        }

    def table(self) -> str:
        lines = [f"{'model':<16}" + "".join(f"{'win ' + g:>16}{'top ' + g:>10}" for g in self.winning)]
        for m in self.models:
            cells = "".join(f"{str(self.winning[g][m]):>16}{self.top[g][m]:>10.3f}" for g in self.winning)
            lines.append(f"{m:<16}" + cells)
        return "\n".join(lines)


def read_responses(path: str | Path) -> list[dict]:
    rows = []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        need = {"participant", "group", "trial", "model", "beat_plain"}
        if reader.fieldnames is None or not need <= set(reader.fieldnames):
            raise DataError(f"{path}: header must contain {sorted(need)}")
        for line, row in enumerate(reader, start=2):
            if row["group"] not in GROUPS:
                raise DataError(f"{path}:{line}: group must be T or UT, got {row['group']!r}")
            if row["beat_plain"] not in ("0", "1"):
                raise DataError(f"{path}:{line}: beat_plain must be 0 or 1, got {row['beat_plain']!r}")
            if not row["participant"] or not row["model"] or not row["trial"]:
                raise DataError(f"{path}:{line}: empty participant, trial or model")
            rows.append({"participant": row["participant"], "group": row["group"], "trial": row["trial"],
                         "model": row["model"], "win": int(row["beat_plain"])})
    if not rows:
        raise DataError(f"{path}: no responses")
    return rows


def listening_report(rows: Sequence[dict] | str | Path) -> ListeningRates:
    """Winning and top-ranking rates per listener group and overall."""
    if isinstance(rows, (str, Path)):
        rows = read_responses(rows)
    models = sorted({r["model"] for r in rows})
    wins: dict[str, dict[str, int]] = defaultdict(lambda: defaultdict(int))
    trials: dict[str, dict[str, int]] = defaultdict(lambda: defaultdict(int))
    group_of: dict[str, str] = {}
    for r in rows:
        p = r["participant"]
        if group_of.setdefault(p, r["group"]) != r["group"]:
            raise DataError(f"participant {p!r} appears in both groups")
        wins[p][r["model"]] += r["win"]
        trials[p][r["model"]] += 1
    credit: dict[str, dict[str, float]] = {}
    for p in wins:
        best = max(wins[p][m] for m in trials[p])
        top = [m for m in trials[p] if wins[p][m] == best]
        credit[p] = {m: (1.0 / len(top) if m in top else 0.0) for m in models}
    winning, top_rate, counts = {}, {}, {}
    for g in GROUPS + ("all",):
        members = sorted(p for p in wins if g == "all" or group_of[p] == g)
        counts[g] = len(members)
        winning[g] = {m: Stat.of([wins[p][m] / trials[p][m] for p in members if trials[p][m]]) for m in models}
        top_rate[g] = {m: (sum(credit[p][m] for p in members) / len(members) if members else float("nan"))
                       for m in models}
    return ListeningRates(models, winning, top_rate, counts)


# ---------------------------------------------------------------------------
# report


@dataclass
class EvalReport:
    arch: str
    n_excerpts: int
    seed: int
    R_recon: Stat
    R_x_pln: Stat
    R_x_pln0: Stat
    MSE_p: Stat
    MSE_s: Stat
    control: dict[str, dict[str, Stat]]
    control_mean: dict[str, float]
    KLD_p: Stat | None
    KLD_s: Stat
    flags: dict = field(default_factory=dict)

    def to_json(self) -> str:
        def conv(v):
            if isinstance(v, Stat):
                return asdict(v)
            if isinstance(v, dict):
                return {k: conv(x) for k, x in v.items()}
            return v
        data = {k: conv(v) for k, v in self.__dict__.items()}
        return json.dumps(data, indent=1, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "EvalReport":
        raw = json.loads(text)

        def stat(d):
            return None if d is None else Stat(**d)
        for key in ("R_recon", "R_x_pln", "R_x_pln0", "MSE_p", "MSE_s", "KLD_p", "KLD_s"):
            raw[key] = stat(raw[key])
        raw["control"] = {a: {m: Stat(**s) for m, s in row.items()} for a, row in raw["control"].items()}
        return cls(**raw)

    def table(self) -> str:
        kld_p = str(self.KLD_p) if self.KLD_p else "-"
        lines = [
            f"model {self.arch}  ({self.n_excerpts} excerpts, seed {self.seed})",
            "",
            f"{'R_recon':>14}{'R_x|pln':>14}{'R_x|pln0':>14}",
            f"{str(self.R_recon):>14}{str(self.R_x_pln):>14}{str(self.R_x_pln0):>14}",
            "",
            f"{'MSE_p':>14}{'MSE_s':>14}",
            f"{str(self.MSE_p):>14}{str(self.MSE_s):>14}",
            "",
            f"{'attribute':<14}{'C':>14}{'R':>14}{'L':>14}",
        ]
        for attr, row in self.control.items():
            lines.append(f"{attr:<14}" + "".join(f"{str(row[m]):>14}" for m in ("C", "R", "L")))
        lines.append(f"{'mean':<14}" + "".join(f"{self.control_mean[m]:>14.3f}" for m in ("C", "R", "L")))
        lines += ["", f"{'KLD_p':>14}{'KLD_s':>14}", f"{kld_p:>14}{str(self.KLD_s):>14}"]
        return "\n".join(lines)


def evaluate(model, items: Sequence[Item], seed: int = 0, n_repeats: int = N_REPEATS,
             n_samples: int = N_SAMPLES) -> EvalReport:
    model.eval()
    pr = pearson_suite(model, items, seed, n_repeats)
    dis = disentanglement_suite(model, items, seed, n_repeats)
    ctl = controllability_suite(model, items, n_samples, seed)
    kld = kld_suite(model, items, seed)
    flags = {"zero_variance": pr["zero_variance"], "degenerate_schedule": ctl["degenerate"],
             "fader_ranges": ctl["ranges"]}
    return EvalReport(
        arch=model.config.arch, n_excerpts=len(items), seed=seed,
        R_recon=pr["R_recon"], R_x_pln=pr["R_x|pln"], R_x_pln0=pr["R_x|pln0"],
        MSE_p=dis["MSE_p"], MSE_s=dis["MSE_s"],
        control=ctl["per_attribute"], control_mean=ctl["mean"],
        KLD_p=kld["KLD_p"], KLD_s=kld["KLD_s"], flags=flags,
    )
