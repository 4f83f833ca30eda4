"""Command-line entry point: dataset generation, training, recalibration,
prediction, and the thickness calculator.

Exit codes: 0 success, 2 validation error, 3 numerical failure. Summaries
are single machine-parsable lines on stdout; diagnostics go to stderr.
Every output directory receives a manifest.json describing the run; reruns
with identical manifests reproduce identical artifacts byte for byte.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
import time


def _limit_threads(n: int) -> None:
    # honored by BLAS pools created afterwards; set before heavy imports
    for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ[var] = str(n)


def _build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="tacsim",
        description="multi-camera tactile sensor simulation and force reconstruction",
    )
    p.add_argument("--threads", type=int, default=0, help="cap BLAS/OMP threads (0 = default)")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="render a labeled indentation dataset")
    g.add_argument("--config", help="sensor config file (default: desk-scale config)")
    g.add_argument("--seed", type=int, help="override the config rng seed")
    g.add_argument("--out", required=True, help="output directory")
    g.add_argument("--grid", default="9x9", help="indenter positions, e.g. 9x9")
    g.add_argument("--depths", default="0.3,0.6,0.9,1.2,1.5", help="depths in mm")
    g.add_argument("--tip-radius", type=float, default=5.0, help="indenter tip radius, mm")
    g.add_argument("--margin", type=float, default=4.0, help="grid margin to the edges, mm")

    tr = sub.add_parser("train", help="train a model on a dataset")
    tr.add_argument("--dataset", required=True)
    tr.add_argument("--config", help="sensor config file (default: desk-scale config)")
    tr.add_argument("--seed", type=int, default=0)
    tr.add_argument("--out", required=True)
    tr.add_argument("--cameras", help="comma-separated camera ids (default: all)")
    tr.add_argument("--batch-size", type=int, default=16)
    tr.add_argument("--lr", type=float, default=1e-3)
    tr.add_argument("--patience", type=int, default=20)
    tr.add_argument("--max-epochs", type=int, default=300)
    tr.add_argument("--data-fraction", type=float, default=1.0)
    tr.add_argument("--loss", choices=("mse", "rmse"), default="mse")

    rc = sub.add_parser("recalibrate", help="grow a trained model to more cameras")
    rc.add_argument("--model", required=True, help="pretrained model file")
    rc.add_argument("--dataset", required=True, help="dataset covering the full camera set")
    rc.add_argument("--config", help="sensor config file (default: desk-scale config)")
    rc.add_argument("--out", required=True)
    rc.add_argument("--fractions", default="1.0", help="train-split fractions, comma-separated")
    rc.add_argument("--seeds", type=int, default=1, help="seeds per fraction")
    rc.add_argument("--seed", type=int, default=0, help="base seed")
    rc.add_argument("--batch-size", type=int, default=16)
    rc.add_argument("--lr", type=float, default=1e-3)
    rc.add_argument("--patience", type=int, default=20)
    rc.add_argument("--max-epochs", type=int, default=300)

    pr = sub.add_parser("predict", help="predict a force distribution")
    pr.add_argument("--model", required=True)
    pr.add_argument("--config", help="sensor config file (default: desk-scale config)")
    pr.add_argument("--out", required=True)
    pr.add_argument("--seed", type=int, help="override the config rng seed")
    src = pr.add_mutually_exclusive_group(required=True)
    src.add_argument("--indent", help="x_mm,y_mm,depth_mm of a fresh indentation")
    src.add_argument("--sample-id", type=int, help="predict a stored dataset sample")
    pr.add_argument("--dataset", help="dataset file (required with --sample-id)")
    pr.add_argument("--tip-radius", type=float, default=5.0)

    dm = sub.add_parser("dimension", help="sensor stack thickness for one build variant")
    dm.add_argument("--spec", help="dimensioning spec file (default: as-built values)")
    dm.add_argument(
        "--variant",
        default="as-built",
        choices=("as-built", "relocated-connector", "relocated-board", "ideal-minimal"),
    )
    return p


def _load_config(path, seed=None):
    from .geometry import desk_config, load_sensor_config

    cfg = load_sensor_config(path) if path else desk_config()
    if seed is not None:
        import dataclasses

        cfg = dataclasses.replace(cfg, rng_seed=seed)
    return cfg


def _write_manifest(out_dir, args, cfg=None, extra=None):
    from . import __version__
    from .geometry import config_hash

    manifest = {
        "tool": "tacsim",
        "version": __version__,
        "command": args.command,
        "timestamp": time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime()),
        "args": {k: v for k, v in vars(args).items() if k != "command"},
    }
    if cfg is not None:
        manifest["config_hash"] = config_hash(cfg)
    if extra:
        manifest.update(extra)
    with open(os.path.join(out_dir, "manifest.json"), "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True, default=str)
        fh.write("\n")


def _ensure_out(path) -> None:
    os.makedirs(path, exist_ok=True)
    probe = os.path.join(path, ".write-probe")
    with open(probe, "w") as fh:
        fh.write("ok")
    os.remove(probe)


def _parse_grid(text):
    try:
        nx, ny = (int(v) for v in text.lower().split("x"))
    except ValueError as exc:
        raise ValueError(f"bad grid {text!r}, expected NXxNY") from exc
    return nx, ny


def _cmd_generate(args) -> int:
    from .geometry import coverage_report
    from .pipeline import generate_dataset

    cfg = _load_config(args.config, args.seed)
    _ensure_out(args.out)
    nx, ny = _parse_grid(args.grid)
    depths = tuple(float(d) for d in args.depths.split(","))
    ds = generate_dataset(cfg, grid=(nx, ny, depths), tip_radius=args.tip_radius,
                          margin=args.margin)
    ds_path = os.path.join(args.out, "dataset.tds")
    ds.save(ds_path)
    cov = coverage_report(cfg)
    with open(os.path.join(args.out, "coverage.csv"), "w", encoding="utf-8") as fh:
        cov.write_csv(fh)
    _write_manifest(args.out, args, cfg, {"samples": len(ds), "dataset": ds_path})
    print(f"generate samples={len(ds)} file={ds_path} {cov.summary()}")
    return 0


def _hyper_from_args(args, seed=None):
    from .pipeline import TrainHyper

    return TrainHyper(
        batch_size=args.batch_size,
        lr=args.lr,
        patience=args.patience,
        max_epochs=args.max_epochs,
        data_fraction=getattr(args, "data_fraction", 1.0),
        loss=getattr(args, "loss", "mse"),
        seed=args.seed if seed is None else seed,
    )


def _cmd_train(args) -> int:
    from .net import build_model
    from .pipeline import Dataset, train

    cfg = _load_config(args.config)
    _ensure_out(args.out)
    ds = Dataset.load(args.dataset)
    cameras = tuple(int(c) for c in args.cameras.split(",")) if args.cameras else None
    model = build_model(cfg, camera_ids=cameras, seed=args.seed)
    report, model = train(model, ds, _hyper_from_args(args))
    model_path = os.path.join(args.out, "model.tnm")
    model.save(model_path)
    with open(os.path.join(args.out, "report.csv"), "w", encoding="utf-8") as fh:
        report.write_csv(fh)
    _write_manifest(args.out, args, cfg, {"model": model_path,
                                          "wall_time_s": round(report.wall_time_s, 3)})
    print(f"train epochs={report.epochs_run} best={report.best_epoch} {report.test.summary()}")
    return 0


def _cmd_recalibrate(args) -> int:
    from .net import NetworkModel
    from .pipeline import Dataset, recalibrate

    cfg = _load_config(args.config)
    _ensure_out(args.out)
    ds = Dataset.load(args.dataset)
    model3 = NetworkModel.load(args.model)
    fractions = [float(f) for f in args.fractions.split(",")]
    rows = []
    frozen_ok = True
    for fraction in fractions:
        for k in range(args.seeds):
            seed = args.seed + k
            hyper = _hyper_from_args(args, seed=seed)
            before = {n: a.copy() for n, a in model3._blocks()}
            report, model = recalibrate(model3, ds, cfg, fraction=fraction, hyper=hyper)
            after = dict(model._blocks())
            frozen_ok &= all(
                (after[n] == before[n]).all()
                for n in before
                if n.split(".")[0] in model.frozen_layer_names()
            )
            model.save(os.path.join(args.out, f"model_f{fraction:g}_s{seed}.tnm"))
            rows.append((fraction, seed, report.test.four_metrics()))
    metric_names = ("rmse_dist_xy", "rmse_dist_z", "rmse_total_xy", "rmse_total_z")
    csv_path = os.path.join(args.out, "error_vs_fraction.csv")
    with open(csv_path, "w", encoding="utf-8") as fh:
        fh.write("fraction,seed," + ",".join(metric_names) + "\n")
        for fraction, seed, m in rows:
            fh.write(f"{fraction:g},{seed}," + ",".join(f"{m[k]:.6g}" for k in metric_names) + "\n")
        # least-squares trend line per metric over the fraction axis
        import numpy as np

        fr = np.array([r[0] for r in rows])
        for name in metric_names:
            vals = np.array([r[2][name] for r in rows])
            if len(set(fr.tolist())) > 1:
                slope, intercept = np.polyfit(fr, vals, 1)
            else:
                slope, intercept = 0.0, float(vals.mean())
            fh.write(f"# trend {name} slope={slope:.6g} intercept={intercept:.6g}\n")
    _write_manifest(args.out, args, cfg, {"rows": len(rows), "frozen_ok": frozen_ok})
    print(f"recalibrate rows={len(rows)} frozen_bit_identical={frozen_ok} file={csv_path}")
    return 0


def _cmd_predict(args) -> int:
    import numpy as np

    from .contact import ForceDistribution, Indentation, bin_forces
    from .net import NetworkModel
    from .optics import capture, encode_difference, sample_particle_field, write_pgm
    from .pipeline import Dataset

    cfg = _load_config(args.config, args.seed)
    _ensure_out(args.out)
    model = NetworkModel.load(args.model)

    if args.sample_id is not None:
        if not args.dataset:
            raise ValueError("--sample-id requires --dataset")
        ds = Dataset.load(args.dataset)
        if not 0 <= args.sample_id < len(ds):
            raise ValueError(f"sample id {args.sample_id} out of range")
        frames = ds.frames[args.sample_id][list(model.arch.camera_ids)]
        label = ds.label_distribution(args.sample_id)
    else:
        x, y, depth = (float(v) for v in args.indent.split(","))
        ind = Indentation((x, y), depth, args.tip_radius)
        field = sample_particle_field(cfg)
        fs = capture(ind, field, cfg)
        frames = fs.frames[list(model.arch.camera_ids)]
        label = bin_forces(ind, cfg)

    pred_vec = model.forward(frames[None, ...], train=False)[0].astype(np.float64)
    ncov = len(model.arch.covered_bins)
    forces = np.zeros((model.arch.bin_nx * model.arch.bin_ny, 3))
    cov = np.asarray(model.arch.covered_bins)
    for comp in range(3):
        forces[cov, comp] = pred_vec[comp * ncov:(comp + 1) * ncov]
    pred = ForceDistribution(forces, model.arch.bin_nx, model.arch.bin_ny)

    names = ("fx", "fy", "fz")
    for comp, name in enumerate(names):
        with open(os.path.join(args.out, f"pred_{name}.csv"), "w", encoding="utf-8") as fh:
            pred.write_grid_csv(fh, comp)
        grid = pred.component_grid(comp)
        scale = max(np.abs(grid).max(), 1e-12)
        write_pgm(os.path.join(args.out, f"pred_{name}.pgm"),
                  encode_difference(grid / scale), bits=16)
    err = pred.forces - label.forces
    rmse = np.sqrt((err ** 2).mean(axis=0))
    _write_manifest(args.out, args, cfg)
    print(
        f"predict total_fz={pred.total()[2]:.6g} "
        f"rmse_vs_label {rmse[0]:.6g} {rmse[1]:.6g} {rmse[2]:.6g}"
    )
    return 0


def _cmd_dimension(args) -> int:
    from .geometry import (load_dimensioning_spec, paper_dimensioning_spec,
                           total_thickness)

    spec = load_dimensioning_spec(args.spec) if args.spec else paper_dimensioning_spec()
    value = total_thickness(spec, args.variant)
    print(f"dimension variant={args.variant} thickness_mm={value:.6g}")
    return 0


_COMMANDS = {
    "generate": _cmd_generate,
    "train": _cmd_train,
    "recalibrate": _cmd_recalibrate,
    "predict": _cmd_predict,
    "dimension": _cmd_dimension,
}


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    if args.threads and args.threads > 0:
        _limit_threads(args.threads)
    from .errors import NumericalError, ValidationError

    try:
        return _COMMANDS[args.command](args)
    except (ValidationError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
