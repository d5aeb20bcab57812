"""Command-line interface: ``c5ed {mask,rf,train,eval,branches,ablation,replay}``.

Every command that writes files first writes ``manifest.json`` into its output
directory; ``c5ed replay <manifest>`` re-runs the command from that record and
reproduces its CSV/JSON outputs byte for byte.
"""
from __future__ import annotations

import argparse
import itertools
import logging
import sys
import time
from dataclasses import asdict, dataclass, field
from datetime import datetime
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import __version__
from .io import (
    CheckpointError,
    load_checkpoint,
    read_json,
    save_checkpoint,
    write_array_csv,
    write_json,
    write_pgm,
)
from .kspace import default_center_fraction, make_gaussian_mask, undersample
from .complex import ComplexTensor
from .metrics import phase_rmse
from .network import (
    PRESETS,
    NetworkSpec,
    build_branch,
    build_cascade,
    count_parameters,
    load_preset,
    make_ablation,
    matched_real_spec,
    rf_closed_form,
    rf_empirical,
)
from .phantom import make_phantom, make_phantom_set
from .tensor import no_grad
from .training import TrainConfig, TrainingDiverged, evaluate, history_csv, masks_for, train

log = logging.getLogger("c5ed")

__all__ = ["main", "RunManifest", "build_parser"]


class CliError(Exception):
    """A user-facing failure: printed without a traceback, exit code 2."""


@dataclass
class RunManifest:
    """Everything needed to re-run one command bit-identically."""

    command: str
    arguments: dict
    output_dir: str
    version: str = __version__
    spec: Optional[dict] = None
    train_config: Optional[dict] = None
    mask: Optional[dict] = None
    seeds: dict = field(default_factory=dict)

    def save(self, directory: Path) -> Path:
        path = Path(directory) / "manifest.json"
        write_json(path, asdict(self))
        return path

    @classmethod
    def load(cls, path) -> "RunManifest":
        return cls(**read_json(path))


# ---------------------------------------------------------------------------
# helpers
# ---------------------------------------------------------------------------

def _output_dir(out: Optional[str], seed: int, command: str) -> Path:
    if out is None:
        out = Path("runs") / f"{datetime.now().strftime('%Y%m%d-%H%M%S')}-{command}-seed{seed}"
    path = Path(out)
    path.mkdir(parents=True, exist_ok=True)
    return path


def _resolve_spec(preset: Optional[str], spec_file: Optional[str], mode: Optional[str]) -> NetworkSpec:
    if spec_file is not None:
        try:
            spec = NetworkSpec.load(spec_file)
        except (OSError, ValueError, KeyError, TypeError) as exc:
            raise CliError(f"cannot read network spec {spec_file}: {exc}") from exc
        if mode is not None and mode != spec.mode:
            spec = NetworkSpec.from_dict({**spec.to_dict(), "mode": mode, "image_channels": None})
        return spec
    overrides = {"mode": mode} if mode is not None else {}
    return load_preset(preset or "c5ed", **overrides)


def _mask_record(cfg: TrainConfig) -> dict:
    return {"kind": "gaussian-columns", "reduction": cfg.reduction,
            "center_fraction": cfg.resolved_center_fraction, "sigma": "width/6",
            "regenerate_per_epoch": cfg.regenerate_masks}


def _summary(ev: dict, phase_mode: str, targets: np.ndarray) -> dict:
    out = {k: ev[k] for k in ("loss", "psnr", "ms_ssim", "zero_filled_psnr", "zero_filled_ms_ssim")}
    out["per_image"] = ev["per_image"]
    if phase_mode == "smooth":
        out["phase_rmse"] = float(np.mean([phase_rmse(p, t) for p, t in zip(ev["predictions"], targets)]))
        out["zero_filled_phase_rmse"] = float(np.mean([phase_rmse(z, t) for z, t in zip(ev["zero_filled"], targets)]))
    return out


def _parameter_report(spec: NetworkSpec, model) -> dict:
    report = {"parameters": count_parameters(model)}
    if spec.mode == "complex":
        report["matched_real_parameters"] = count_parameters(build_cascade(matched_real_spec(spec)))
    return report


# ---------------------------------------------------------------------------
# mask
# ---------------------------------------------------------------------------

def run_mask(args: dict, out: Path) -> int:
    w, h = args["width"], args["height"] or args["width"]
    cf = args["center_fraction"] if args["center_fraction"] is not None else default_center_fraction(args["reduction"])
    try:
        mask = make_gaussian_mask(h, w, args["reduction"], cf, args["seed"])
    except ValueError as exc:
        raise CliError(str(exc)) from exc
    write_pgm(out / "mask.pgm", (mask.matrix * 255).astype(np.uint8))
    write_array_csv(out / "mask.csv", mask.matrix)
    stats = {
        "width": w, "height": h, "reduction": float(args["reduction"]), "center_fraction": cf,
        "seed": args["seed"], "center_width": mask.center_width,
        "sampled_columns": int(mask.columns.sum()), "sampled_fraction": mask.sampled_fraction,
    }
    write_json(out / "mask.json", stats)
    from .plotting import plot_mask

    plot_mask(mask.matrix, out / "mask.png", f"R={args['reduction']:g}, center {mask.center_width} columns")
    print(f"{stats['sampled_columns']} of {w} columns sampled ({stats['center_width']} in the center tile), "
          f"fraction {stats['sampled_fraction']:.4f} -> {out}")
    return 0


# ---------------------------------------------------------------------------
# rf
# ---------------------------------------------------------------------------

def rf_report(spec: NetworkSpec) -> list[dict]:
    rows = []
    probe = max(b.target_rf for b in spec.branches) + 10
    for i, branch_spec in enumerate(spec.branches, start=1):
        closed = rf_closed_form(branch_spec.layers)
        measured = rf_empirical(build_branch(branch_spec, spec.image_channels, spec.mode), probe)
        rows.append({"branch": i, "dilations": [l.dilation for l in branch_spec.layers],
                     "kernel_sizes": [l.kernel_size for l in branch_spec.layers],
                     "closed_form": closed, "empirical": measured, "agree": closed == measured})
    return rows


def run_rf(args: dict, out: Optional[Path]) -> int:
    spec = _resolve_spec(args["preset"], args["spec"], args.get("mode"))
    rows = rf_report(spec)
    print(f"receptive fields for {spec.name} ({spec.mode})")
    print(f"{'branch':>6}  {'dilations':<14} {'closed':>6} {'probe':>6}  status")
    for r in rows:
        dil = ",".join(map(str, r["dilations"]))
        print(f"{r['branch']:>6}  {dil:<14} {r['closed_form']:>6} {r['empirical']:>6}  "
              f"{'PASS' if r['agree'] else 'FAIL'}")
    if out is not None:
        write_json(out / "rf.json", {"spec": spec.name, "mode": spec.mode, "branches": rows})
        from .plotting import plot_rf_report

        plot_rf_report(rows, out / "rf.png")
    return 0 if all(r["agree"] for r in rows) else 1


# ---------------------------------------------------------------------------
# train
# ---------------------------------------------------------------------------

def train_config_from_args(args: dict) -> TrainConfig:
    return TrainConfig(
        learning_rate=args["lr"], epochs=args["epochs"], batch_size=args["batch_size"], seed=args["seed"],
        reduction=args["reduction"], center_fraction=args["center_fraction"], n_phantoms=args["n_phantoms"],
        image_size=args["size"], phase_mode=args["phase_mode"], noise=args["noise"],
        regenerate_masks=not args["freeze_masks"],
    )


def run_train(spec: NetworkSpec, cfg: TrainConfig, out: Path) -> int:
    data = make_phantom_set(cfg.n_phantoms, cfg.image_size, cfg.seed, cfg.phase_mode, cfg.noise, cfg.splits)
    model = build_cascade(spec, seed=cfg.seed)
    params = _parameter_report(spec, model)
    print(f"{spec.name} ({spec.mode}): {params['parameters']} parameters"
          + (f" (matched real-channel model: {params['matched_real_parameters']})"
             if "matched_real_parameters" in params else ""))
    history_path = out / "history.csv"
    rows: list[dict] = []

    def on_epoch(row: dict) -> None:
        rows.append(row)
        history_path.write_text(history_csv(rows))

    started = time.perf_counter()
    try:
        result = train(model, data, cfg, on_epoch)
    except TrainingDiverged as exc:
        history_path.write_text(history_csv(rows))
        raise CliError(f"training diverged: {exc} (partial history in {history_path})") from exc
    log.info("training took %.1f s", time.perf_counter() - started)

    meta = {"image_size": cfg.image_size, "train_config": cfg.to_dict(), "best_epoch": result.best_epoch,
            "best_val_loss": result.best_val_loss}
    save_checkpoint(out / "checkpoint", result.model, meta)

    idx = data.split_indices()["test"]
    test_images = data.images[idx]
    ev = evaluate(result.model, test_images, masks_for(cfg, cfg.image_size, cfg.image_size, "test", idx),
                  cfg.batch_size, (cfg.image_weight, cfg.kspace_weight))
    metrics = {"spec": spec.name, "mode": spec.mode, **params, "best_epoch": result.best_epoch,
               "best_val_loss": result.best_val_loss, "epochs": cfg.epochs,
               "test": _summary(ev, cfg.phase_mode, test_images)}
    write_json(out / "metrics.json", metrics)

    from .plotting import plot_history, plot_reconstructions

    plot_history(result.history, out / "history.png", result.best_epoch)
    plot_reconstructions(test_images, ev["zero_filled"], ev["predictions"], out / "reconstructions.png")
    print(f"best epoch {result.best_epoch}: test PSNR {ev['psnr']:.3f} dB "
          f"(zero-filled {ev['zero_filled_psnr']:.3f}), MS-SSIM {ev['ms_ssim']:.4f} "
          f"(zero-filled {ev['zero_filled_ms_ssim']:.4f}) -> {out}")
    return 0


# ---------------------------------------------------------------------------
# eval
# ---------------------------------------------------------------------------

def _open_checkpoint(path: str):
    try:
        return load_checkpoint(path)
    except (CheckpointError, OSError, ValueError, KeyError) as exc:
        raise CliError(f"cannot load checkpoint {path}: {exc}") from exc


def _eval_config(meta: dict, args: dict) -> TrainConfig:
    cfg = TrainConfig.from_dict(meta.get("train_config", {}))
    size = meta.get("image_size", cfg.image_size)
    if args.get("size") is not None and args["size"] != size:
        raise CliError(f"checkpoint was trained on {size}x{size} images but {args['size']}x{args['size']} "
                       "was requested")
    reduction = cfg.reduction if args.get("reduction") is None else args["reduction"]
    center = args.get("center_fraction")
    if center is None and reduction != cfg.reduction:
        center = default_center_fraction(reduction)
    elif center is None:
        center = cfg.center_fraction
    return TrainConfig.from_dict({**cfg.to_dict(), "seed": args["seed"], "reduction": reduction,
                                  "center_fraction": center, "image_size": size})


def run_eval(args: dict, out: Path) -> int:
    model, meta = _open_checkpoint(args["checkpoint"])
    cfg = _eval_config(meta, args)
    data = make_phantom_set(cfg.n_phantoms, cfg.image_size, cfg.seed, cfg.phase_mode, cfg.noise, cfg.splits)
    idx = data.split_indices()[args["split"]]
    if len(idx) == 0:
        raise CliError(f"the {args['split']} split is empty")
    images = data.images[idx]
    ev = evaluate(model, images, masks_for(cfg, cfg.image_size, cfg.image_size, args["split"], idx),
                  cfg.batch_size, (cfg.image_weight, cfg.kspace_weight))
    summary = _summary(ev, cfg.phase_mode, images)
    write_json(out / "metrics.json", {"split": args["split"], "reduction": cfg.reduction,
                                      "center_fraction": cfg.resolved_center_fraction, "seed": cfg.seed,
                                      "indices": [int(i) for i in idx], **summary})
    img_dir = out / "images"
    img_dir.mkdir(exist_ok=True)
    for i, target, zf, pred in zip(idx, images, ev["zero_filled"], ev["predictions"]):
        write_pgm(img_dir / f"{i:03d}_target.pgm", np.abs(target), vmax=1.0)
        write_pgm(img_dir / f"{i:03d}_input.pgm", np.abs(zf), vmax=1.0)
        write_pgm(img_dir / f"{i:03d}_output.pgm", np.abs(pred), vmax=1.0)
        write_pgm(img_dir / f"{i:03d}_error.pgm", np.abs(np.abs(pred) - np.abs(target)))
    from .plotting import plot_reconstructions

    plot_reconstructions(images, ev["zero_filled"], ev["predictions"], out / "reconstructions.png")
    print(f"{args['split']} split, R={cfg.reduction:g}: PSNR {ev['psnr']:.3f} dB "
          f"(zero-filled {ev['zero_filled_psnr']:.3f}), MS-SSIM {ev['ms_ssim']:.4f} "
          f"(zero-filled {ev['zero_filled_ms_ssim']:.4f}) -> {out}")
    return 0


# ---------------------------------------------------------------------------
# branches
# ---------------------------------------------------------------------------

def run_branches(args: dict, out: Path) -> int:
    model, meta = _open_checkpoint(args["checkpoint"])
    spec = model.spec
    if len(spec.branches) < 2:
        raise CliError(f"checkpoint {args['checkpoint']} has a single branch, not an ensemble denoiser")
    cfg = _eval_config(meta, {"seed": args["image_seed"], "reduction": args.get("reduction")})
    size = cfg.image_size
    x_f = make_phantom(size, args["image_seed"], cfg.phase_mode, cfg.noise)
    mask = make_gaussian_mask(size, size, cfg.reduction, cfg.resolved_center_fraction, args["image_seed"])
    x4 = ComplexTensor.from_numpy(x_f.numpy()[None, None])
    k_u, x_u = undersample(x4, mask)
    model.eval()
    with no_grad():
        model(x_u, k_u, mask)
    images = [t.numpy()[0, 0] for t in model.first_stage_intermediates()]
    top = max(float(np.abs(img).max()) for img in images)
    for i, img in enumerate(images, start=1):
        write_pgm(out / f"branch_{i}.pgm", np.abs(img), vmax=top)
    write_pgm(out / "input.pgm", np.abs(x_u.numpy()[0, 0]), vmax=1.0)
    distances = {f"{a + 1}-{b + 1}": float(np.linalg.norm(images[a] - images[b]))
                 for a, b in itertools.combinations(range(len(images)), 2)}
    rfs = [b.target_rf for b in spec.branches]
    write_json(out / "branches.json", {"image_seed": args["image_seed"], "receptive_fields": rfs,
                                       "pairwise_l2": distances})
    from .plotting import plot_branches

    plot_branches(x_u.numpy()[0, 0], images, out / "branches.png", rfs)
    print(f"{len(images)} branch images (RF {', '.join(map(str, rfs))}) -> {out}")
    return 0


# ---------------------------------------------------------------------------
# ablation
# ---------------------------------------------------------------------------

def ablation_rows(spec: NetworkSpec, base_cfg: TrainConfig, seeds: Sequence[int]) -> list[dict]:
    """Train ``spec`` and its dilation-1 copy under identical seeds; report mean test PSNR of each."""
    rows = []
    for seed in seeds:
        cfg = TrainConfig.from_dict({**base_cfg.to_dict(), "seed": seed})
        data = make_phantom_set(cfg.n_phantoms, cfg.image_size, seed, cfg.phase_mode, cfg.noise, cfg.splits)
        idx = data.split_indices()["test"]
        masks = masks_for(cfg, cfg.image_size, cfg.image_size, "test", idx)
        row = {"seed": seed}
        for label, s in (("dilated", spec), ("ablation", make_ablation(spec))):
            result = train(build_cascade(s, seed=seed), data, cfg)
            ev = evaluate(result.model, data.images[idx], masks, cfg.batch_size)
            row[f"{label}_psnr"] = ev["psnr"]
            row["zero_filled_psnr"] = ev["zero_filled_psnr"]
        row["delta"] = row["dilated_psnr"] - row["ablation_psnr"]
        rows.append(row)
        log.info("seed %d: dilated %.3f dB, ablation %.3f dB", seed, row["dilated_psnr"], row["ablation_psnr"])
    return rows


def run_ablation(spec: NetworkSpec, cfg: TrainConfig, seeds: Sequence[int], out: Path) -> int:
    rows = ablation_rows(spec, cfg, seeds)
    cols = ("seed", "dilated_psnr", "ablation_psnr", "delta", "zero_filled_psnr")
    lines = [",".join(cols)] + [",".join([str(r["seed"])] + [repr(float(r[c])) for c in cols[1:]]) for r in rows]
    (out / "ablation.csv").write_text("\n".join(lines) + "\n")
    deltas = [r["delta"] for r in rows]
    write_json(out / "ablation.json", {"spec": spec.name, "rows": rows, "mean_delta": float(np.mean(deltas)),
                                       "dilated_never_worse": all(d >= 0 for d in deltas)})
    from .plotting import plot_ablation

    plot_ablation(rows, out / "ablation.png")
    for r in rows:
        print(f"seed {r['seed']}: dilated {r['dilated_psnr']:.3f} dB, dilation-1 {r['ablation_psnr']:.3f} dB, "
              f"delta {r['delta']:+.3f} dB")
    print(f"mean delta {np.mean(deltas):+.3f} dB -> {out}")
    return 0


# ---------------------------------------------------------------------------
# argument parsing and dispatch
# ---------------------------------------------------------------------------

def _add_training_flags(p: argparse.ArgumentParser, default_preset: str) -> None:
    p.add_argument("--preset", choices=PRESETS, default=default_preset)
    p.add_argument("--spec", help="network spec JSON file (overrides --preset)")
    p.add_argument("--mode", choices=("real", "complex"))
    p.add_argument("--reduction", type=float, default=4.0)
    p.add_argument("--center-fraction", type=float)
    p.add_argument("--size", type=int, default=32)
    p.add_argument("--epochs", type=int, default=50)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--lr", type=float, default=TrainConfig.learning_rate)
    p.add_argument("--batch-size", type=int, default=TrainConfig.batch_size)
    p.add_argument("--n-phantoms", type=int, default=TrainConfig.n_phantoms)
    p.add_argument("--phase-mode", choices=("none", "smooth"), default="none")
    p.add_argument("--noise", type=float, default=0.0)
    p.add_argument("--freeze-masks", action="store_true", help="reuse one mask per training image every epoch")
    p.add_argument("--out")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="c5ed", description="Dilated ensemble cascade for undersampled MRI.")
    parser.add_argument("--version", action="version", version=f"c5ed {__version__}")
    parser.add_argument("--log-level", default="WARNING")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("mask", help="generate a Gaussian column sampling mask")
    p.add_argument("--width", type=int, default=320)
    p.add_argument("--height", type=int)
    p.add_argument("--reduction", type=float, default=4.0)
    p.add_argument("--center-fraction", type=float)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out")

    p = sub.add_parser("rf", help="closed-form vs measured receptive field per branch")
    src = p.add_mutually_exclusive_group()
    src.add_argument("--spec")
    src.add_argument("--preset", choices=PRESETS)
    p.add_argument("--mode", choices=("real", "complex"))
    p.add_argument("--out")

    p = sub.add_parser("train", help="train on synthetic phantoms")
    _add_training_flags(p, "c5ed")

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--reduction", type=float)
    p.add_argument("--center-fraction", type=float)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--split", choices=("train", "val", "test"), default="test")
    p.add_argument("--size", type=int)
    p.add_argument("--out")

    p = sub.add_parser("branches", help="per-branch intermediate images of the first stage")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--image-seed", type=int, default=0)
    p.add_argument("--reduction", type=float)
    p.add_argument("--out")

    p = sub.add_parser("ablation", help="dilated preset vs its dilation-1 copy under shared seeds")
    _add_training_flags(p, "tiny")
    p.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])

    p = sub.add_parser("replay", help="re-run a command from its manifest.json")
    p.add_argument("manifest")
    p.add_argument("--out", required=True)
    return parser


def _execute(manifest: RunManifest, out: Path) -> int:
    args, cmd = manifest.arguments, manifest.command
    if cmd == "mask":
        return run_mask(args, out)
    if cmd == "rf":
        return run_rf(args, out)
    if cmd == "train":
        return run_train(NetworkSpec.from_dict(manifest.spec), TrainConfig.from_dict(manifest.train_config), out)
    if cmd == "eval":
        return run_eval(args, out)
    if cmd == "branches":
        return run_branches(args, out)
    if cmd == "ablation":
        return run_ablation(NetworkSpec.from_dict(manifest.spec), TrainConfig.from_dict(manifest.train_config),
                            args["seeds"], out)
    raise CliError(f"manifest names an unknown command {cmd!r}")


def _manifest_for(cmd: str, args: dict, out: Path) -> RunManifest:
    manifest = RunManifest(command=cmd, arguments=args, output_dir=str(out.resolve()))
    if cmd in ("train", "ablation"):
        spec = _resolve_spec(args["preset"], args["spec"], args["mode"])
        cfg = train_config_from_args(args)
        manifest.spec, manifest.train_config, manifest.mask = spec.to_dict(), cfg.to_dict(), _mask_record(cfg)
        manifest.seeds = {"data": cfg.seed, "weights": cfg.seed, "masks": cfg.seed}
        if cmd == "ablation":
            manifest.seeds = {"shared": list(args["seeds"])}
    elif cmd == "mask":
        manifest.mask = {"reduction": args["reduction"], "center_fraction": args["center_fraction"]}
        manifest.seeds = {"mask": args["seed"]}
    elif cmd in ("eval", "branches"):
        manifest.seeds = {"data": args.get("seed", args.get("image_seed"))}
    elif cmd == "rf" and args["spec"] is None:
        manifest.spec = _resolve_spec(args["preset"], None, args["mode"]).to_dict()
    return manifest


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    ns = parser.parse_args(argv)
    logging.basicConfig(level=ns.log_level.upper(), format="%(levelname)s %(name)s: %(message)s")
    cmd = ns.command
    args = {k: v for k, v in vars(ns).items() if k not in ("command", "log_level")}
    try:
        if cmd == "replay":
            manifest = RunManifest.load(args["manifest"])
            out = _output_dir(args["out"], 0, manifest.command)
            manifest.output_dir = str(out.resolve())
            manifest.save(out)
            return _execute(manifest, out)
        if cmd == "rf" and args["out"] is None:
            return run_rf(args, None)
        if "checkpoint" in args:
            args["checkpoint"] = str(Path(args["checkpoint"]).resolve())
        seed = args.get("seed", args.get("image_seed", 0)) or 0
        out = _output_dir(args.pop("out"), seed, cmd)
        manifest = _manifest_for(cmd, args, out)
        manifest.save(out)
        return _execute(manifest, out)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
