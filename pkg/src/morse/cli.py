"""``morse`` command line: gen-data, train, eval, kernel-check.

Outputs default to ``$MORSE_OUT/<command>`` (``runs/<command>`` when the
variable is unset).
"""
from __future__ import annotations

import argparse
import logging
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import kernel_lab as kl
from .config import RunConfig, dump_config, load_config
from .data import make_benchmark
from .fileio import load_checkpoint, read_split, write_metrics_csv, write_pgm, write_split
from .iar import PositionalEncoder, write_points_csv
from .model import build_model
from .trainer import EVAL_SEED, evaluate, train

log = logging.getLogger("morse")

OUT_ENV = "MORSE_OUT"


class CheckFailed(RuntimeError):
    pass


def default_out(command: str) -> Path:
    return Path(os.environ.get(OUT_ENV, "runs")) / command


def _config(path) -> RunConfig:
    return load_config(path) if path else RunConfig()


def _int_list(text: str) -> list[int]:
    try:
        values = [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None
    if not values:
        raise argparse.ArgumentTypeError("list must not be empty")
    return values


def _writable(out: Path) -> Path:
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create output directory {out}: {exc}") from exc
    return out


def _split_dir(path: Path, name: str) -> Path:
    """Accept either a split directory or a dataset root holding ``<name>/``."""
    if (path / "manifest.txt").exists():
        return path
    if (path / name / "manifest.txt").exists():
        return path / name
    raise FileNotFoundError(f"no dataset manifest under {path} (looked for manifest.txt and {name}/manifest.txt)")


# ----------------------------------------------------------------------
# commands
# ----------------------------------------------------------------------


def cmd_gen_data(args) -> int:
    cfg = _config(args.config)
    out = _writable(Path(args.out) if args.out else default_out("data"))
    (tx, ty), (vx, vy) = make_benchmark(cfg.scene, cfg.scene_seed)
    write_split(out / "train", tx, ty)
    write_split(out / "test", vx, vy)
    (out / "config.yaml").write_text(dump_config(cfg))
    print(f"wrote {len(tx)} train and {len(vx)} test scenes to {out}")
    return 0


def arm_updates(no_iar: bool, no_smoe: bool, dense_moe: bool) -> dict:
    if no_smoe and dense_moe:
        raise ValueError("--dense-moe conflicts with --no-smoe: there is no expert stage to densify")
    return {"use_iar": not no_iar, "use_smoe": not no_smoe, "dense_moe": dense_moe}


def cmd_train(args) -> int:
    cfg = _config(args.config)
    cfg = cfg.with_updates(model=arm_updates(args.no_iar, args.no_smoe, args.dense_moe))
    if args.seed is not None:
        cfg = cfg.with_updates(seed=args.seed)
    out = _writable(Path(args.out) if args.out else default_out("train"))
    if args.data:
        images, labels, _ = read_split(_split_dir(Path(args.data), "train"))
    else:
        (images, labels), _ = make_benchmark(cfg.scene, cfg.scene_seed)
    model = build_model(cfg.backbone, cfg.model, cfg.train_seed)
    log.info("training %s (%d parameters) on %d scenes", cfg.model.arm, model.num_parameters(), len(images))
    start = time.perf_counter()
    history = train(model, images, labels, cfg, out_dir=out, iters=args.iters)
    last = history[-1] if history else None
    print(
        f"{cfg.model.arm}: {len(history)} iterations in {time.perf_counter() - start:.1f}s"
        + (f", final l_sup {last.l_sup:.4f}" if last else "")
        + f"; checkpoint {out / 'final'}"
    )
    return 0


def cmd_eval(args) -> int:
    ckpt = Path(args.checkpoint)
    config_path = ckpt / "config.yaml"
    if not config_path.exists():
        raise FileNotFoundError(f"checkpoint {ckpt} has no config.yaml")
    cfg = load_config(config_path)
    model = build_model(cfg.backbone, cfg.model, cfg.train_seed)
    model.load_state_dict(load_checkpoint(ckpt))
    images, labels, names = read_split(_split_dir(Path(args.data), "test"))
    out = _writable(Path(args.out) if args.out else default_out("eval"))
    result = evaluate(model, images, labels, cfg.train, n_points=args.n_points, seed=args.seed)
    (out / "masks").mkdir(exist_ok=True)
    (out / "points").mkdir(exist_ok=True)
    for name, sample in zip(names, result.samples):
        write_pgm(out / "masks" / f"{name}_coarse.pgm", sample.coarse_mask)
        write_pgm(out / "masks" / f"{name}_refined.pgm", sample.refined_mask)
        write_points_csv(out / "points" / f"{name}.csv", sample.points)
    write_metrics_csv(out / "metrics_coarse.csv", {n: s.coarse for n, s in zip(names, result.samples)})
    write_metrics_csv(out / "metrics_refined.csv", {n: s.refined for n, s in zip(names, result.samples)})
    for label, agg in (("coarse", result.coarse), ("refined", result.refined)):
        print(f"{label:8s} dsc {agg['dsc']:.4f} jaccard {agg['jaccard']:.4f} hd95 {agg['hd95']:.3f} asd {agg['asd']:.3f}")
    return 0


def run_kernel_checks(
    out: Path,
    L_list: list[int],
    widths: list[int],
    seed: int = 0,
    spectral_scale: float = 1.0,
    reps: int = 20,
    n_pairs: int = 500,
    ntk_pairs: int = 50,
    ntk_inits: int = 32,
) -> list[tuple[str, bool, str]]:
    """Run every kernel property; returns ``(name, passed, detail)`` and writes the reports."""
    rng = np.random.default_rng(seed)
    spec = kl.KernelSpec("gaussian", sigma=0.5, dim=2)
    results = []

    pe = PositionalEncoder(128, 1.0, seed, "kernel.pe")
    x1 = rng.uniform(-1, 1, (1000, 2))
    x2 = rng.uniform(-1, 1, (1000, 2))
    gap = np.abs(kl.pe_kernel(pe, x1, x2) - kl.pe_kernel_cosine(pe, x1, x2)).max()
    results.append(("pe-identity", gap <= 1e-10, f"max |dot - cosine| = {gap:.3e}"))
    shift = rng.uniform(-0.5, 0.5, (1000, 2))
    drift = np.abs(kl.pe_kernel(pe, x1 + shift, x2 + shift) - kl.pe_kernel(pe, x1, x2)).max()
    results.append(("pe-translation", drift <= 1e-10, f"max drift = {drift:.3e}"))

    std = spec.spectral_std * spectral_scale
    curve = kl.rff_error_curve(spec, L_list, n_pairs, rng, reps=reps, spectral_std=std)
    kl.write_curve_csv(out / "rff_curve.csv", curve)
    decreasing = curve.strictly_decreasing
    results.append(("rff-decreasing", decreasing, "medians " + ", ".join(f"{m:.4f}" for m in curve.median)))
    if len(L_list) > 1:
        ratio = curve.sqrt_ratio
        results.append(("rff-sqrt-rate", ratio <= 4.0, f"max/min of err*sqrt(L) = {ratio:.3f}"))
    unb = kl.unbiasedness(spec, [0.1, 0.2], [0.3, -0.1], rng, spectral_std=std)
    results.append(("rff-unbiased", unb.passed, f"mean {unb.mean:.5f} vs {unb.target:.5f}, z = {unb.z:+.2f}"))

    ntk_pe = PositionalEncoder(16, 1.0, seed, "kernel.ntk_pe")
    report = kl.shift_invariance_deviation(ntk_pe, widths, rng, n_pairs=ntk_pairs, n_inits=ntk_inits)
    diag = kl.ntk_samples(widths[0], 2, *kl.normalized_encoding(ntk_pe, [[0.2, -0.3], [0.2, -0.3]]), 8, rng)
    results.append(("ntk-diagonal", bool((diag >= 0).all()), f"min diagonal {diag.min():.4f}"))
    if len(widths) > 1:
        results.append(("ntk-shift-spread", report.monotone, "spread " + ", ".join(f"{s:.5f}" for s in report.spread)))

    lines = [f"{'PASS' if ok else 'FAIL'} {name}: {detail}" for name, ok, detail in results]
    (out / "summary.txt").write_text("\n".join(lines) + "\n\n" + report.summary() + "\n")
    return results


def cmd_kernel_check(args) -> int:
    out = _writable(Path(args.out) if args.out else default_out("kernel-check"))
    start = time.perf_counter()
    results = run_kernel_checks(out, args.L_list, args.widths, args.seed, args.spectral_scale)
    for name, ok, detail in results:
        print(f"{'PASS' if ok else 'FAIL'} {name}: {detail}")
    print(f"kernel checks finished in {time.perf_counter() - start:.1f}s; report in {out}")
    failed = [name for name, ok, _ in results if not ok]
    if failed:
        raise CheckFailed("failing checks: " + ", ".join(failed))
    return 0


# ----------------------------------------------------------------------
# entry point
# ----------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="morse", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="write the synthetic benchmark to disk")
    p.add_argument("--config", help="run configuration (YAML)")
    p.add_argument("--out", help="dataset directory")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train one arm of the ablation lattice")
    p.add_argument("--config", help="run configuration (YAML)")
    p.add_argument("--data", help="dataset root or train split (default: generate from the config)")
    p.add_argument("--out", help="run directory for logs and checkpoints")
    p.add_argument("--no-iar", action="store_true", help="drop the point-rendering refinement")
    p.add_argument("--no-smoe", action="store_true", help="drop the expert fusion stage")
    p.add_argument("--dense-moe", action="store_true", help="keep every expert active while training")
    p.add_argument("--seed", type=int, help="override the config's top-level seed")
    p.add_argument("--iters", type=int, help="stop after this many iterations (schedule still uses total_iters)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="score a checkpoint, dump masks and points")
    p.add_argument("--checkpoint", required=True, help="checkpoint directory (with config.yaml)")
    p.add_argument("--data", required=True, help="dataset root or test split")
    p.add_argument("--out", help="output directory")
    p.add_argument("--n-points", type=int, help="rendered points per image (default: config n_points_test)")
    p.add_argument("--seed", type=int, default=EVAL_SEED, help="point-sampling seed")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("kernel-check", help="verify the positional-encoding kernel properties")
    p.add_argument("--out", help="report directory")
    p.add_argument("--L-list", dest="L_list", type=_int_list, default=[64, 256, 1024, 4096])
    p.add_argument("--widths", type=_int_list, default=[64, 256, 1024])
    p.add_argument("--seed", type=int, default=0)
    p.add_argument(
        "--spectral-scale", type=float, default=1.0, help="multiply the derived RFF frequency std (negative control)"
    )
    p.set_defaults(func=cmd_kernel_check)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except CheckFailed as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (ValueError, OSError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
