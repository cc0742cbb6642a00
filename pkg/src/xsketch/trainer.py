"""Training objective and the optimization loop."""

from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Callable

import numpy as np
import torch

from .dataset import Dataset, collate
from .regularizers import loss_fac, loss_pln, loss_reg, loss_str
from .seqcvae import (
    N_ATTR,
    Batch,
    ModelConfig,
    PerformanceVAE,
    elbo_terms,
    load_checkpoint,
    plan_code,
    reparameterize,
    save_checkpoint,
)

log = logging.getLogger(__name__)

DIVERGENCE_LIMIT = 1e6
TERMS = ("recon_note", "recon_chord", "kl_pln", "kl_str", "pln", "str", "fac", "reg")


class NumericError(RuntimeError):
    """A loss term became NaN or the run diverged."""

    def __init__(self, message: str, checkpoint: Path | None = None):
        super().__init__(message)
        self.checkpoint = checkpoint


@dataclass
class TrainConfig:
    lambda_pln: float = 1000.0
    lambda_str: float = 100.0
    lambda_fac: float = 1.0
    lambda_reg: float = 10.0
    kl_weight: float = 1.0
    lr: float = 1e-5
    lr_decay: float = 0.95
    epochs: int = 100
    batch_size: int = 64
    seed: int = 0
    profile: str = "paper"
    max_steps: int | None = None
    dtype: str = "float32"

    def __post_init__(self):
        for name in ("lambda_pln", "lambda_str", "lambda_fac", "lambda_reg", "kl_weight"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")
        if not 0 < self.lr_decay <= 1:
            raise ValueError("lr_decay must lie in (0, 1]")

    @classmethod
    def desk(cls, **overrides) -> "TrainConfig":
        """Settings for small synthetic runs on a CPU."""
        kw = dict(lr=2e-3, lr_decay=0.99, epochs=100, batch_size=32, kl_weight=0.05, profile="desk")
        kw.update(overrides)
        return cls(**kw)

    def without(self, *losses: str) -> "TrainConfig":
        kw = asdict(self)
        for name in losses:
            kw[f"lambda_{name}"] = 0.0
        return TrainConfig(**kw)

    @property
    def torch_dtype(self) -> torch.dtype:
        return torch.float64 if self.dtype == "float64" else torch.float32


def load_config(path: str | Path) -> tuple[ModelConfig, TrainConfig]:
    """Read ``{"model": {...}, "train": {...}}``; a ``profile`` key in either picks defaults."""
    raw = json.loads(Path(path).read_text(encoding="utf-8"))
    m = dict(raw.get("model", {}))
    t = dict(raw.get("train", {}))
    profile = m.pop("profile", t.get("profile", "desk"))
    model_cfg = ModelConfig.from_profile(profile, **m)
    known = {f.name for f in fields(TrainConfig)}
    unknown = set(t) - known
    if unknown:
        raise ValueError(f"unknown train settings: {sorted(unknown)}")
    t.setdefault("profile", profile)
    train_cfg = TrainConfig.desk(**t) if profile != "paper" else TrainConfig(**t)
    return model_cfg, train_cfg


def lr_at(epoch: int, cfg: TrainConfig | None = None) -> float:
    cfg = cfg or TrainConfig()
    return cfg.lr * cfg.lr_decay ** epoch


def step_generator(seed: int, step: int) -> torch.Generator:
    state = np.random.SeedSequence([seed, step]).generate_state(1)[0]
    return torch.Generator().manual_seed(int(state))


def total_loss(model: PerformanceVAE, batch: Batch, cfg: TrainConfig,
               generator: torch.Generator | None = None,
               frozen: PerformanceVAE | None = None) -> tuple[torch.Tensor, dict[str, torch.Tensor]]:
    """Weighted objective and its per-term breakdown.

    ``frozen`` supplies the constant (non-decoder) parameters of the
    factorization term; finite-difference checks pass the unperturbed model.
    """
    mc = model.config
    x, ci, cm, nm = batch.x, batch.chord_index, batch.chord_mask, batch.note_mask
    k = batch.k
    post_pln, post_str, y_chd, _ = model.encode(x, batch.y, ci, cm)
    z_str = reparameterize(post_str, generator)
    plan = plan_code(model, post_pln, batch, generator)
    prior = model.prior_str(y_chd, z_str)
    x_hat, k_hat = model.decode(plan, z_str, batch.y, ci, teacher_x=x)
    terms = elbo_terms(x, k, post_pln, post_str, prior, x_hat, k_hat, nm, cm)
    loss = terms["recon_note"] + terms["recon_chord"] + cfg.kl_weight * (terms["kl_pln"] + terms["kl_str"])
    terms["str"] = loss_str(model.disc_str(z_str), batch.I_str, cm)
    loss = loss + cfg.lambda_str * terms["str"]
    if mc.arch != "cvae":
        terms["pln"] = loss_pln(model.disc_pln(plan), batch.I_pln, cm)
        faders = [mc.fader_dim(a) for a in range(N_ATTR)]
        terms["reg"] = loss_reg(plan, k, cm, faders, generator)
        loss = loss + cfg.lambda_pln * terms["pln"] + cfg.lambda_reg * terms["reg"]
        if cfg.lambda_fac > 0:
            terms["fac"] = loss_fac(model, batch, plan, generator, frozen)
            loss = loss + cfg.lambda_fac * terms["fac"]
    for name, val in terms.items():
        if not torch.isfinite(val):
            raise NumericError(f"loss term {name} is not finite")
    return loss, terms


@dataclass
class FitResult:
    model: PerformanceVAE
    log: list[dict]
    checkpoint: Path | None


def _batches(ds: Dataset, cfg: TrainConfig, epoch: int) -> list[list[int]]:
    rng = np.random.default_rng([cfg.seed, epoch])
    order = rng.permutation(len(ds.items))
    return [order[i:i + cfg.batch_size].tolist() for i in range(0, len(order), cfg.batch_size)]


def _restore_optimizer(opt: torch.optim.Optimizer, model: PerformanceVAE, state: dict) -> None:
    for name, p in model.named_parameters():
        if name in state:
            opt.state[p] = {key: val.clone() for key, val in state[name].items()}


def fit(ds: Dataset, model_cfg: ModelConfig, cfg: TrainConfig, out_dir: str | Path | None = None,
        resume: str | Path | None = None,
        on_step: Callable[[dict], None] | None = None) -> FitResult:
    """Train with Adam; deterministic for fixed config, seed and data.

    Checkpoints (``last.ckpt``) and the JSON-lines log go to ``out_dir``.
    ``resume`` continues from a checkpoint written at the end of an epoch.
    """
    if not ds.items:
        raise ValueError("empty dataset")
    if ds.arch != model_cfg.arch and not (ds.arch == "notewise" and model_cfg.arch == "cvae"):
        ds = ds.with_view(arch=model_cfg.arch)
    if ds.degree != model_cfg.degree:
        ds = ds.with_view(degree=model_cfg.degree)
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    start_epoch, step = 0, 0
    if resume is not None:
        model, header, opt_state = load_checkpoint(resume)
        start_epoch = header["epoch"]
        step = header["extra"].get("step", 0)
    else:
        model = PerformanceVAE(model_cfg).to(cfg.torch_dtype)
        opt_state = {}
    opt = torch.optim.Adam(model.parameters(), lr=lr_at(start_epoch, cfg), betas=(0.9, 0.999), eps=1e-8)
    _restore_optimizer(opt, model, opt_state)
    records: list[dict] = []
    log_fh = open(out / "train_log.jsonl", "a" if resume else "w", encoding="utf-8") if out else None
    ckpt = Path(resume) if resume else None
    try:
        for epoch in range(start_epoch, cfg.epochs):
            lr = lr_at(epoch, cfg)
            for group in opt.param_groups:
                group["lr"] = lr
            for idx in _batches(ds, cfg, epoch):
                if cfg.max_steps is not None and step >= cfg.max_steps:
                    break
                batch = collate([ds.items[i] for i in idx], cfg.torch_dtype)
                t0 = time.perf_counter()
                opt.zero_grad(set_to_none=True)
                loss, terms = total_loss(model, batch, cfg, step_generator(cfg.seed, step))
                if loss.item() > DIVERGENCE_LIMIT:
                    raise NumericError(f"loss diverged at step {step} ({loss.item():.3g})", ckpt)
                loss.backward()
                opt.step()
                rec = {"step": step, "epoch": epoch, "lr": lr, "loss": loss.item()}
                rec.update({name: val.item() for name, val in terms.items()})
                rec["seconds"] = round(time.perf_counter() - t0, 4)
                records.append(rec)
                if log_fh:
                    log_fh.write(json.dumps({k: v for k, v in rec.items() if k != "seconds"}) + "\n")
                if on_step:
                    on_step(rec)
                step += 1
            if out is not None:
                ckpt = out / "last.ckpt"
                save_checkpoint(ckpt, model, epoch + 1, opt, extra={"step": step, "train": asdict(cfg)})
            if cfg.max_steps is not None and step >= cfg.max_steps:
                break
    finally:
        if log_fh:
            log_fh.close()
    return FitResult(model, records, ckpt)


def mean_terms(records: list[dict], names=("loss",) + TERMS) -> dict[str, float]:
    out = {}
    for name in names:
        vals = [r[name] for r in records if name in r]
        if vals:
            out[name] = float(np.mean(vals))
    return out


def is_finite_log(records: list[dict]) -> bool:
    return all(math.isfinite(v) and v >= 0 for r in records for k, v in r.items() if k in TERMS)
