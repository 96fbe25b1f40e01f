"""Command-line entry point: masks, phantoms, sampling, reconstruction, evaluation, sweeps.

Exit codes: 0 success, 1 usage error, 2 bad or missing data, 3 numerical abort.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from .admm import NumericalAbort, write_diagnostics
from .config import RunConfig
from .data import Dataset, generate_phantom, read_dataset, write_dataset
from .metrics import error_map, psnr
from .pipeline import SequenceJob, iter_sequence
from .sampling import (KSpaceFrame, SamplingMask, mask_for_rate, measure, radial_mask, read_mask,
                       write_mask)

log = logging.getLogger("dynmri")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class DataError(Exception):
    pass


# --------------------------------------------------------------------------
# k-space files
# --------------------------------------------------------------------------

def write_kspace(frame: KSpaceFrame, path: str | Path) -> None:
    np.savez(path, values=frame.values, bits=np.packbits(frame.mask.bits.ravel()),
             side=frame.mask.side, num_rays=frame.mask.num_rays,
             frame_index=frame.frame_index, noise_bound=frame.noise_bound)


def read_kspace(path: str | Path) -> KSpaceFrame:
    with np.load(path) as z:
        side = int(z["side"])
        bits = np.unpackbits(z["bits"])[: side * side].reshape(side, side).astype(bool)
        mask = SamplingMask(bits, int(z["num_rays"]))
        if not np.all(np.isfinite(z["values"])):
            raise DataError(f"{path}: non-finite k-space values")
        return KSpaceFrame(mask, z["values"], int(z["frame_index"]), float(z["noise_bound"]))


def read_kspace_dir(directory: str | Path) -> list[KSpaceFrame]:
    files = sorted(Path(directory).glob("frame_*.npz"))
    if not files:
        raise DataError(f"no frame_*.npz files in {directory}")
    return [read_kspace(f) for f in files]


def write_png(image: np.ndarray, path: str | Path) -> None:
    from PIL import Image
    img = np.clip(np.abs(image), 0.0, 1.0)
    Image.fromarray(np.round(img * 255).astype(np.uint8), mode="L").save(path)


# --------------------------------------------------------------------------
# commands
# --------------------------------------------------------------------------

def cmd_mask(args) -> int:
    if args.rays is not None:
        mask = radial_mask(args.side, args.rays, args.seed_angle, args.spacing)
    else:
        mask = mask_for_rate(args.side, args.rate, args.seed_angle, args.spacing)
    write_mask(mask, args.out)
    print(f"{args.out}: side {mask.side}, {mask.num_rays} rays, rate {mask.rate:.4f}")
    return EXIT_OK


def cmd_phantom(args) -> int:
    ds = generate_phantom(args.side, args.frames, args.motion, args.seed)
    write_dataset(ds, args.out)
    print(f"{args.out}: {ds.frames} frames of {ds.side}x{ds.side}")
    return EXIT_OK


def cmd_sample(args) -> int:
    ds = read_dataset(args.dataset)
    first = read_mask(args.first_mask) if args.first_mask else mask_for_rate(ds.side, args.rate_first)
    rest = read_mask(args.mask) if args.mask else mask_for_rate(ds.side, args.rate)
    for m in (first, rest):
        if m.side != ds.side:
            raise DataError(f"mask side {m.side} does not match dataset side {ds.side}")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(args.seed)
    for t in range(1, ds.frames + 1):
        y = measure(ds.frame(t), first if t == 1 else rest, args.noise, rng, frame_index=t)
        write_kspace(y, out / f"frame_{t:04d}.npz")
    print(f"{out}: {ds.frames} k-space frames")
    return EXIT_OK


def _load_config(args) -> RunConfig:
    cfg = RunConfig.load(args.config) if args.config else RunConfig()
    overrides = {k: v for k, v in (("iters", args.iters), ("seed", args.seed),
                                   ("n_groups", args.groups)) if v is not None}
    if args.noiseless:
        overrides["noiseless"] = True
    return replace(cfg, **overrides) if overrides else cfg


def cmd_reconstruct(args) -> int:
    cfg = _load_config(args)
    frames = read_kspace_dir(args.kspace)
    if args.frames:
        frames = frames[: args.frames]
    truth = read_dataset(args.truth).data if args.truth else None
    job = SequenceJob(frames, cfg, truth=truth)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    cfg.save(out / "config.json")
    diag_path = out / "diagnostics.csv"
    summary_path = out / "frames.csv"
    images = []
    with summary_path.open("w", newline="") as fh:
        summary = csv.writer(fh)
        summary.writerow(["frame", "psnr", "gini", "iterations", "seconds"])
        for res in iter_sequence(job):
            for row in res.diagnostics:
                row["frame"] = res.index
            write_diagnostics(diag_path, res.diagnostics, append=res.index > 1)
            write_png(res.image, out / f"frame_{res.index:04d}.png")
            if job.truth is not None:
                write_png(error_map(res.image, job.truth[res.index - 1]),
                          out / f"error_{res.index:04d}.png")
            summary.writerow([res.index, res.psnr, res.gini, len(res.diagnostics),
                              round(res.seconds, 3)])
            fh.flush()
            images.append(res.image.astype(np.complex64))
            # completed frames stay on disk if a later frame aborts
            write_dataset(Dataset(np.stack(images)), out / "recon")
            print(f"frame {res.index}: psnr {res.psnr:.2f} dB, {res.seconds:.1f} s", flush=True)
    return EXIT_OK


def cmd_evaluate(args) -> int:
    recon = read_dataset(args.recon)
    truth = read_dataset(args.truth)
    if recon.side != truth.side or recon.frames > truth.frames:
        raise DataError("reconstruction and truth sizes do not match")
    gini = {}
    summary = Path(args.recon).parent / "frames.csv"
    if summary.exists():
        with summary.open() as fh:
            gini = {int(r["frame"]): r["gini"] for r in csv.DictReader(fh)}
    rows = [{"frame": t, "psnr": psnr(recon.frame(t), truth.frame(t)), "gini": gini.get(t, "")}
            for t in range(1, recon.frames + 1)]
    fh = open(args.out, "w", newline="") if args.out else sys.stdout
    try:
        w = csv.DictWriter(fh, fieldnames=["frame", "psnr", "gini"])
        w.writeheader()
        w.writerows(rows)
    finally:
        if args.out:
            fh.close()
    return EXIT_OK


_SWEEP_PARAMS = {"Ng": "n_groups", "L": "patch_area", "R1": "radius"}


def cmd_sweep(args) -> int:
    base = _load_config(args)
    field = _SWEEP_PARAMS[args.param]
    try:
        values = [float(v) if field == "radius" else int(v) for v in args.values.split(",")]
    except ValueError as exc:
        raise DataError(f"bad --values: {exc}") from exc
    if args.dataset:
        ds = read_dataset(args.dataset)
    else:
        ds = generate_phantom(args.side, args.frames, seed=args.seed or 0)
    m1 = mask_for_rate(ds.side, base.rate_first)
    m2 = mask_for_rate(ds.side, base.rate_next)
    frames = [measure(ds.frame(t), m1 if t == 1 else m2, frame_index=t)
              for t in range(1, ds.frames + 1)]
    fields = ["param", "value", "psnr_mean", "psnr_std", "iter_seconds_mean",
              "iter_seconds_std", "gini_mean", "gini_std"]
    fh = open(args.out, "w", newline="") if args.out else sys.stdout
    try:
        w = csv.DictWriter(fh, fieldnames=fields)
        w.writeheader()
        for v in values:
            cfg = replace(base, **{field: v})
            results = list(iter_sequence(SequenceJob(frames, cfg, truth=ds.data)))
            secs = [r["seconds"] for res in results for r in res.diagnostics]
            p = [res.psnr for res in results]
            g = [res.gini for res in results]
            w.writerow({"param": args.param, "value": v,
                        "psnr_mean": np.mean(p), "psnr_std": np.std(p),
                        "iter_seconds_mean": np.mean(secs), "iter_seconds_std": np.std(secs),
                        "gini_mean": np.mean(g), "gini_std": np.std(g)})
            fh.flush()
    finally:
        if args.out:
            fh.close()
    return EXIT_OK


# --------------------------------------------------------------------------
# parser
# --------------------------------------------------------------------------

def _add_run_options(p):
    p.add_argument("--config", help="RunConfig JSON file")
    p.add_argument("--iters", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--groups", type=int, help="number of patch groups")
    p.add_argument("--noiseless", action="store_true", help="replace sampled k-space exactly")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="dynmri", description=__doc__.splitlines()[0])
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("mask", help="radial sampling mask")
    p.add_argument("--side", type=int, required=True)
    g = p.add_mutually_exclusive_group(required=True)
    g.add_argument("--rate", type=float)
    g.add_argument("--rays", type=int)
    p.add_argument("--seed-angle", type=float, default=0.0)
    p.add_argument("--spacing", choices=["nested", "uniform"], default="nested")
    p.add_argument("--out", required=True, help="output stem (.pgm/.bits/.json)")
    p.set_defaults(func=cmd_mask)

    p = sub.add_parser("phantom", help="synthetic dynamic phantom")
    p.add_argument("--side", type=int, default=64)
    p.add_argument("--frames", type=int, default=10)
    p.add_argument("--motion", type=float, default=1.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help="output stem (.raw/.json)")
    p.set_defaults(func=cmd_phantom)

    p = sub.add_parser("sample", help="measure a dataset on radial masks")
    p.add_argument("--dataset", required=True)
    p.add_argument("--rate-first", type=float, default=0.4)
    p.add_argument("--rate", type=float, default=0.2)
    p.add_argument("--first-mask", help="mask stem for frame 1")
    p.add_argument("--mask", help="mask stem for frames >= 2")
    p.add_argument("--noise", type=float, default=0.0, help="per-component noise std")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_sample)

    p = sub.add_parser("reconstruct", help="causal reconstruction of a k-space sequence")
    p.add_argument("--kspace", required=True, help="directory of frame_*.npz")
    p.add_argument("--truth", help="ground-truth dataset stem for PSNR and error maps")
    p.add_argument("--frames", type=int, help="only the first N frames")
    p.add_argument("--out", required=True)
    _add_run_options(p)
    p.set_defaults(func=cmd_reconstruct)

    p = sub.add_parser("evaluate", help="per-frame PSNR of a reconstruction")
    p.add_argument("--recon", required=True)
    p.add_argument("--truth", required=True)
    p.add_argument("--out", help="CSV path (stdout if omitted)")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("sweep", help="sensitivity sweep over one parameter")
    p.add_argument("--param", choices=sorted(_SWEEP_PARAMS), required=True)
    p.add_argument("--values", required=True, help="comma-separated values")
    p.add_argument("--dataset", help="dataset stem (default: generated phantom)")
    p.add_argument("--side", type=int, default=64)
    p.add_argument("--frames", type=int, default=3)
    p.add_argument("--out", help="CSV path (stdout if omitted)")
    _add_run_options(p)
    p.set_defaults(func=cmd_sweep)
    return ap


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_USAGE
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except NumericalAbort as exc:
        print(f"numerical abort: {exc}", file=sys.stderr)
        if exc.diagnostics:
            print(json.dumps(exc.diagnostics[-1]), file=sys.stderr)
        return EXIT_NUMERIC
    except (DataError, FileNotFoundError, ValueError, KeyError, TypeError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
