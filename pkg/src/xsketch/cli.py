"""Command-line entry point: ``xsketch <command> ...``.

Exit codes: 0 ok, 1 usage, 2 data error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from dataclasses import asdict, replace
from pathlib import Path

import numpy as np
import torch

from .dataset import Item, collate, load_dataset, make_item, prepare, save_dataset, split_pieces
from .hier import n2c
from .metrics import evaluate, listening_report
from .midi import write_midi
from .notedata import (
    AlignedPiece,
    DataError,
    Excerpt,
    extract_piece,
    invert_features,
    plain_performance,
    read_note_pairs,
)
from .plots import ATTR_KEYS, curve_rows, plot_curves, read_curves, write_curves
from .regularizers import chord_positions
from .seqcvae import (
    N_ATTR,
    ModelConfig,
    generate,
    load_checkpoint,
    reparameterize,
    truncated_noise,
)
from .synthworld import WorldSpec, write_world
from .trainer import NumericError, TrainConfig, fit, load_config

EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 1, 2, 3
DEGREES = (1, 2, 4, 8)


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


# ---------------------------------------------------------------------------
# helpers


def _pick_piece(path: str, piece_id: str | None) -> AlignedPiece:
    pieces = read_note_pairs(path)
    if piece_id is None:
        return pieces[0]
    for p in pieces:
        if p.piece_id == piece_id:
            return p
    raise DataError(f"{path}: no piece {piece_id!r}")


def _whole_piece_item(piece: AlignedPiece, arch: str, degree: int) -> tuple[Item, object]:
    feats = extract_piece(piece)
    p = feats.partition
    ex = Excerpt(piece.piece_id, 0, p.C, 0, p.N, feats.x, feats.y, p.chord_index.copy())
    return make_item(ex, arch, degree), feats


def _load_model(path: str):
    try:
        model, header, _ = load_checkpoint(path)
    except (OSError, ValueError, KeyError) as err:
        raise DataError(f"{path}: cannot load checkpoint ({err})") from None
    model.eval()
    return model, header


def _gen(seed: int, *key: int) -> torch.Generator:
    state = np.random.SeedSequence([seed, *key]).generate_state(1)[0]
    return torch.Generator().manual_seed(int(state))


def _sampled_plan(model, n_chords: int, seed: int) -> torch.Tensor:
    cfg = model.config
    if cfg.arch == "cvae":  # the planning input is an explicit contour; default to flat
        return torch.zeros(1, n_chords, N_ATTR, dtype=model.dtype)
    return truncated_noise((1, n_chords, cfg.d_pln), cfg.truncation, _gen(seed, 0), model.dtype)


def _render_x(model, item: Item, plan: torch.Tensor, seed: int, z_str: torch.Tensor | None = None) -> np.ndarray:
    batch = collate([item], model.dtype)
    with torch.no_grad():
        x_hat = generate(model, batch, plan, z_str, generator=_gen(seed, 1), truncation=model.config.truncation)
    return x_hat[0].double().numpy()


def _emit(x: np.ndarray, piece: AlignedPiece, feats, out: Path, series: str, extra_rows=()) -> np.ndarray:
    perf = invert_features(x, piece.score, feats.partition)
    write_midi(out, perf, piece.score)
    k = n2c(x, feats.partition.chord_index, feats.partition.C)
    rows = list(extra_rows)
    if feats.x is not None:
        rows += curve_rows("truth", n2c(feats.x, feats.partition.chord_index, feats.partition.C))
    write_curves(out.with_suffix(".csv"), rows + curve_rows(series, k))
    return k


# ---------------------------------------------------------------------------
# commands


def cmd_synth(args) -> None:
    spec = WorldSpec.from_json(args.spec) if args.spec else WorldSpec()
    if args.seed is not None:
        spec = replace(spec, seed=args.seed)
    path = write_world(spec, args.out)
    print(f"wrote {spec.n_pieces} pieces to {path}")


def cmd_prepare(args) -> None:
    pieces = read_note_pairs(args.inp)
    if any(p.perf is None for p in pieces):
        raise DataError(f"{args.inp}: every piece needs a performance for training data")
    ds = prepare(pieces, args.degree, args.arch)
    save_dataset(ds, args.out)
    print(f"{len(ds.pieces)} pieces, {len(ds.items)} excerpts -> {args.out}")


def cmd_train(args) -> None:
    if args.config:
        model_cfg, train_cfg = load_config(args.config)
    else:
        model_cfg, train_cfg = ModelConfig.from_profile("desk"), TrainConfig.desk()
    overrides = {k: v for k, v in (("arch", args.arch), ("degree", args.degree)) if v is not None}
    if args.seed is not None:
        overrides["seed"] = args.seed
    model_cfg = replace(model_cfg, **overrides)
    t = {k: v for k, v in (("seed", args.seed), ("epochs", args.epochs), ("max_steps", args.max_steps)) if v is not None}
    train_cfg = replace(train_cfg, **t)
    off = [name for name in ("pln", "str", "fac", "reg") if getattr(args, f"no_{name}")]
    train_cfg = train_cfg.without(*off)
    ds = load_dataset(args.data, model_cfg.degree, model_cfg.arch)
    if args.holdout > 0:
        ds, _ = split_pieces(ds, args.holdout, args.split_seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(json.dumps({"model": asdict(model_cfg), "train": asdict(train_cfg)}, indent=1))
    res = fit(ds, model_cfg, train_cfg, out, resume=args.resume)
    last = res.log[-1] if res.log else {}
    print(f"trained {len(res.log)} steps, final loss {last.get('loss', float('nan')):.4f}, checkpoint {res.checkpoint}")


def cmd_render(args) -> None:
    piece = _pick_piece(args.score, args.piece)
    out = Path(args.out)
    if args.mode == "plain":
        feats = extract_piece(piece)
        perf = plain_performance(piece.score, feats.partition)
        write_midi(out, perf, piece.score)
        write_curves(out.with_suffix(".csv"), curve_rows("plain", np.zeros((feats.partition.C, 3))))
        print(f"wrote {out}")
        return
    if not args.ckpt:
        raise UsageError("--ckpt is required for --mode sample")
    model, _ = _load_model(args.ckpt)
    item, feats = _whole_piece_item(piece, model.config.arch, model.config.degree)
    x = _render_x(model, item, _sampled_plan(model, item.n_chords, args.seed), args.seed)
    _emit(x, piece, feats, out, "sampled")
    print(f"wrote {out}")


def read_sketch(path: str | Path) -> dict[int, tuple[np.ndarray, np.ndarray]]:
    """curves.csv rows (attr, position, value) -> attr index -> sorted (positions, values)."""
    pts: dict[int, list[tuple[float, float]]] = {}
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip() for h in header[:3]] != ["attr", "position", "value"]:
            raise DataError(f"{path}: expected header attr,position,value")
        for line, row in enumerate(reader, start=2):
            if not row:
                continue
            try:
                attr, pos, val = row[0].strip(), float(row[1]), float(row[2])
            except (IndexError, ValueError):
                raise DataError(f"{path}:{line}: malformed row") from None
            if attr not in ATTR_KEYS:
                raise DataError(f"{path}:{line}: attr must be one of {','.join(ATTR_KEYS)}")
            if not (0.0 <= pos <= 1.0 and -1.0 <= val <= 1.0):
                raise DataError(f"{path}:{line}: position must lie in [0,1] and value in [-1,1]")
            pts.setdefault(ATTR_KEYS.index(attr), []).append((pos, val))
    if not pts:
        raise DataError(f"{path}: no sketch rows")
    return {a: (np.array([p for p, _ in sorted(v)]), np.array([x for _, x in sorted(v)])) for a, v in pts.items()}


def sketch_values(curves: dict[int, tuple[np.ndarray, np.ndarray]], n_chords: int) -> dict[int, np.ndarray]:
    pos = chord_positions(n_chords)
    return {a: np.interp(pos, xp, fp) for a, (xp, fp) in curves.items()}


def cmd_sketch(args) -> None:
    piece = _pick_piece(args.score, args.piece)
    model, _ = _load_model(args.ckpt)
    item, feats = _whole_piece_item(piece, model.config.arch, model.config.degree)
    alpha = sketch_values(read_sketch(args.curves), item.n_chords)
    plan = _sampled_plan(model, item.n_chords, args.seed)
    sketch = np.zeros((item.n_chords, 3))
    for a, vals in alpha.items():
        plan[0, :, model.config.fader_dim(a)] = torch.as_tensor(vals, dtype=plan.dtype)
        sketch[:, a] = vals
    x = _render_x(model, item, plan, args.seed)
    rows = [r for r in curve_rows("sketch", sketch) if ATTR_KEYS.index(r[1]) in alpha]
    _emit(x, piece, feats, Path(args.out), "sampled", rows)
    print(f"wrote {args.out}")


def cmd_control(args) -> None:
    piece = _pick_piece(args.perf, args.piece)
    if piece.perf is None:
        raise DataError(f"{args.perf}: piece {piece.piece_id} has no performance")
    if args.steps < 2:
        raise UsageError("--steps must be at least 2")
    model, _ = _load_model(args.ckpt)
    a = ATTR_KEYS.index(args.attr)
    item, feats = _whole_piece_item(piece, model.config.arch, model.config.degree)
    batch = collate([item], model.dtype)
    with torch.no_grad():
        post_pln, post_str, _, _ = model.encode(batch.x, batch.y, batch.chord_index, batch.chord_mask)
    base = batch.I_pln.clone() if post_pln is None else post_pln.mu.clone()
    z_str = reparameterize(post_str, _gen(args.seed, 2)) if args.sample_structure else post_str.mu
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    lo, hi = args.range
    rows = []
    for j, value in enumerate(np.linspace(lo, hi, args.steps)):
        plan = base.clone()
        plan[0, :, model.config.fader_dim(a)] = float(value)
        x = _render_x(model, item, plan, args.seed, z_str)
        perf = invert_features(x, piece.score, feats.partition)
        write_midi(out / f"step{j:02d}.mid", perf, piece.score)
        k = n2c(x, feats.partition.chord_index, feats.partition.C)
        rows += curve_rows(f"step{j:02d}", k)
        rows.append((f"fader{j:02d}", args.attr, 0, repr(float(value))))
    rows += curve_rows("truth", n2c(feats.x, feats.partition.chord_index, feats.partition.C))
    write_curves(out / "control.csv", rows)
    print(f"wrote {args.steps} steps to {out}")


def cmd_eval(args) -> None:
    model, _ = _load_model(args.ckpt)
    ds = load_dataset(args.data, model.config.degree, model.config.arch)
    if args.holdout > 0:
        _, ds = split_pieces(ds, args.holdout, args.split_seed)
    if any(it.I_pln is None for it in ds.items):
        raise DataError(f"{args.data}: evaluation needs performances")
    torch.manual_seed(args.seed)
    report = evaluate(model, ds.items, seed=args.seed, n_repeats=args.repeats, n_samples=args.samples)
    Path(args.report).write_text(report.to_json() + "\n", encoding="utf-8")
    print(report.table())


def cmd_report_listening(args) -> None:
    rates = listening_report(args.responses)
    if args.out:
        Path(args.out).write_text(json.dumps(rates.to_json(), indent=1, sort_keys=True) + "\n", encoding="utf-8")
    print(rates.table())


def cmd_plot(args) -> None:
    plot_curves(read_curves(args.csv), args.out, title=args.title)
    print(f"wrote {args.out}")


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    ap = _Parser(prog="xsketch", description="Expressive performance rendering with sketchable planning.")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("synth", help="generate a synthetic world")
    p.add_argument("--spec", help="world spec JSON (defaults when omitted)")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("prepare", help="extract features, excerpts and signals")
    p.add_argument("--in", dest="inp", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--degree", type=int, choices=DEGREES, default=4)
    p.add_argument("--arch", choices=("hier", "notewise", "cvae"), default="hier")
    p.set_defaults(func=cmd_prepare)

    p = sub.add_parser("train", help="train a model")
    p.add_argument("--config")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--arch", choices=("hier", "notewise", "cvae"))
    p.add_argument("--degree", type=int, choices=DEGREES)
    for name in ("pln", "str", "fac", "reg"):
        p.add_argument(f"--no-{name}", action="store_true", help=f"set lambda_{name} to 0")
    p.add_argument("--seed", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--max-steps", type=int)
    p.add_argument("--holdout", type=float, default=0.0, help="fraction of pieces kept out of training")
    p.add_argument("--split-seed", type=int, default=0)
    p.add_argument("--resume")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("render", help="render a score to MIDI")
    p.add_argument("--ckpt")
    p.add_argument("--score", required=True)
    p.add_argument("--piece")
    p.add_argument("--mode", choices=("sample", "plain"), default="sample")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_render)

    p = sub.add_parser("sketch", help="render with user-drawn planning curves")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--score", required=True)
    p.add_argument("--piece")
    p.add_argument("--curves", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_sketch)

    p = sub.add_parser("control", help="sweep one fader dimension")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--perf", required=True)
    p.add_argument("--piece")
    p.add_argument("--attr", choices=ATTR_KEYS, required=True)
    p.add_argument("--steps", type=int, default=5)
    p.add_argument("--range", type=float, nargs=2, default=(-2.0, 2.0), metavar=("LO", "HI"))
    p.add_argument("--sample-structure", action="store_true", help="draw z_str instead of its posterior mean")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_control)

    p = sub.add_parser("eval", help="full evaluation report")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--report", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--repeats", type=int, default=20)
    p.add_argument("--samples", type=int, default=20)
    p.add_argument("--holdout", type=float, default=0.0, help="evaluate only this held-out fraction")
    p.add_argument("--split-seed", type=int, default=0)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("report-listening", help="tabulate listening-test responses")
    p.add_argument("--responses", required=True)
    p.add_argument("--out")
    p.set_defaults(func=cmd_report_listening)

    p = sub.add_parser("plot", help="plot a curves CSV as SVG")
    p.add_argument("--csv", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--title")
    p.set_defaults(func=cmd_plot)
    return ap


def _fail(code: int, message: str) -> int:
    print(f"xsketch: error: {' '.join(str(message).split())}", file=sys.stderr)
    return code


def main(argv: list[str] | None = None) -> int:
    ap = build_parser()
    try:
        args = ap.parse_args(argv)
    except UsageError as err:
        return _fail(EXIT_USAGE, err)
    except SystemExit as err:  # --help
        return int(err.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    torch.set_num_threads(1)
    try:
        args.func(args)
    except UsageError as err:
        return _fail(EXIT_USAGE, err)
    except NumericError as err:
        where = f" (last checkpoint {err.checkpoint})" if err.checkpoint else ""
        return _fail(EXIT_NUMERIC, f"{err}{where}")
    except (DataError, FileNotFoundError, IsADirectoryError, json.JSONDecodeError, KeyError, ValueError) as err:
        return _fail(EXIT_DATA, err)
    return 0


if __name__ == "__main__":
    sys.exit(main())
