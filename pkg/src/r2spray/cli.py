"""Command-line interface.

Subcommands: phantom, fit, train, heatmap, spray, embed, run, report.
Exit codes: 0 success, 2 configuration error, 3 data error, 4 numeric failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys

import numpy as np

from . import nifti
from .config import PhantomSection, load_run_config, parse_run_config
from .errors import ConfigError, DataError, NumericError, R2SprayError

try:
    import tomllib
except ModuleNotFoundError:
    import tomli as tomllib


def _add_common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--seed", type=int, default=None, help="override the seed")
    parser.add_argument("--threads", type=int, default=0, help="torch thread count")
    parser.add_argument(
        "--deterministic", action="store_true",
        help="single-threaded bit-reproducible mode",
    )


def _apply_common(args) -> None:
    import torch

    if args.deterministic:
        torch.set_num_threads(1)
    elif args.threads > 0:
        torch.set_num_threads(args.threads)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="r2spray",
        description="R2* phantom pipeline: fitting, classification, relevance "
        "heatmaps, spectral heatmap clustering and embedding",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("phantom", help="synthesize a phantom cohort")
    p.add_argument("--spec", help="TOML file with a [phantom] section")
    p.add_argument("--n-per-class", type=int, default=None)
    p.add_argument("--out", required=True)
    _add_common(p)

    p = sub.add_parser("fit", help="voxelwise decay-rate fitting")
    p.add_argument("inputs", nargs="+", help="one 4-D .nii or one 3-D .nii per echo")
    p.add_argument("--te", required=True, help="echo times in ms, comma separated")
    p.add_argument("--mask", default=None)
    p.add_argument("--refine", action="store_true", help="Levenberg-Marquardt refinement")
    p.add_argument("--out", required=True)
    _add_common(p)

    p = sub.add_parser("train", help="train one variant on a dataset directory")
    p.add_argument("--config", required=True)
    p.add_argument("--variant", choices=["A", "B", "C"], required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    _add_common(p)

    p = sub.add_parser("heatmap", help="relevance heatmaps for every scan")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--variant", choices=["A", "B", "C"], required=True)
    p.add_argument("--out", required=True)
    _add_common(p)

    p = sub.add_parser("spray", help="spectral clustering of a heatmap directory")
    p.add_argument("--heatmaps", required=True)
    p.add_argument("--space", choices=["native", "warped"], default="native")
    p.add_argument("--matrix", choices=["heatmap", "input"], default="heatmap")
    p.add_argument("--k-neighbors", type=int, default=10)
    p.add_argument("--kmax", type=int, default=10)
    p.add_argument("--target-spacing", type=float, default=2.0)
    p.add_argument("--out", required=True)
    _add_common(p)

    p = sub.add_parser("embed", help="t-SNE embedding of a spray directory")
    p.add_argument("--spray", required=True)
    p.add_argument("--perplexity", type=float, default=15.0)
    p.add_argument("--iterations", type=int, default=1000)
    p.add_argument("--learning-rate", type=float, default=200.0)
    p.add_argument("--init", choices=["spectral", "random"], default="spectral")
    p.add_argument("--out", required=True)
    _add_common(p)

    p = sub.add_parser("run", help="full experiment matrix from a config file")
    p.add_argument("--config", required=True)
    p.add_argument("--out", default=None)
    _add_common(p)

    p = sub.add_parser("report", help="summarize a run directory")
    p.add_argument("rundir")
    _add_common(p)

    return parser


# ---------------------------------------------------------------------------
# Subcommand bodies
# ---------------------------------------------------------------------------

def _cmd_phantom(args) -> int:
    from .pipeline import write_phantom_dataset

    section = PhantomSection()
    if args.spec:
        with open(args.spec, "rb") as fh:
            try:
                raw = tomllib.load(fh)
            except tomllib.TOMLDecodeError as exc:
                raise ConfigError(f"{args.spec}: {exc}") from exc
        ph = dict(raw.get("phantom", raw))
        unknown = set(ph) - set(PhantomSection.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"{args.spec}: unknown phantom keys {sorted(unknown)}")
        for key in ("dims", "spacing"):
            if key in ph:
                ph[key] = tuple(ph[key])
        section = PhantomSection(**ph)
    n = args.n_per_class if args.n_per_class is not None else section.n_per_class
    seed = args.seed if args.seed is not None else section.seed
    write_phantom_dataset(section.to_spec(), n, seed, args.out)
    print(f"wrote {2 * n} phantoms to {args.out}")
    return 0


def _cmd_fit(args) -> int:
    from .relaxometry import MultiEchoSeries, fit_r2star_map

    te = [float(x) / 1000.0 for x in args.te.split(",")]
    if len(args.inputs) == 1:
        volumes = nifti.read_nifti_stack(args.inputs[0])
    else:
        volumes = [nifti.read_nifti(path) for path in args.inputs]
    if len(volumes) != len(te):
        raise DataError(f"{len(volumes)} echo volumes but {len(te)} echo times")
    series = MultiEchoSeries(echo_times=tuple(te), volumes=tuple(volumes))
    mask = nifti.read_nifti(args.mask) if args.mask else None
    fitted = fit_r2star_map(series, mask=mask, refine=args.refine)
    os.makedirs(args.out, exist_ok=True)
    nifti.write_nifti(fitted.r2star, os.path.join(args.out, "r2star.nii"))
    nifti.write_nifti(fitted.s0, os.path.join(args.out, "s0.nii"))
    nifti.write_nifti(fitted.r_squared, os.path.join(args.out, "rsq.nii"))
    print(f"wrote r2star.nii, s0.nii, rsq.nii to {args.out}")
    return 0


def _load_xy(data_dir: str):
    from .pipeline import _load_dataset, fit_dataset_maps, load_manifest

    manifest = load_manifest(data_dir)
    fit_dataset_maps(data_dir, manifest)
    return _load_dataset(data_dir, manifest)


def _cmd_train(args) -> int:
    from .cohort import make_splits
    from .network import TrainConfig, save_checkpoint, train_model
    from .pipeline import _subjects_from_manifest
    import torch

    config = load_run_config(args.config)
    if args.seed is not None:
        config.seed = args.seed
    dataset = _load_xy(args.data)
    split = make_splits(
        _subjects_from_manifest(dataset.manifest),
        ratios=config.ratios, n_repeats=1, seed=config.seed,
    )[0]
    idx = dataset.scan_index
    tr = [idx[s] for s in split.train]
    va = [idx[s] for s in split.val]
    X = dataset.maps * dataset.masks if args.variant == "B" else dataset.maps
    tconf = TrainConfig(
        epochs=config.epochs, batch_size=config.batch_size, lr_init=config.lr_init,
        lr_factor=config.lr_factor, patience=config.patience,
        lr_floor=config.lr_floor, relevance_lambda=config.relevance_lambda,
        seed=config.seed,
    )
    dtype = {"float32": torch.float32, "float64": torch.float64}[config.train_dtype]
    guidance = dataset.guidance[tr] if args.variant == "C" else None
    net, history = train_model(
        X[tr], dataset.labels[tr], X[va], dataset.labels[va], tconf,
        dtype=dtype, guidance_masks=guidance,
    )
    os.makedirs(args.out, exist_ok=True)
    path = os.path.join(args.out, "checkpoint.bin")
    save_checkpoint(net, path, config=tconf, history=history)
    print(f"best val loss {min(history.val_loss):.4f}; checkpoint at {path}")
    return 0


def _cmd_heatmap(args) -> int:
    from .network import load_checkpoint
    from .pipeline import _outcome
    from .relevance import RelevanceConfig, in_mask_fraction, lrp_heatmap
    from .textio import write_csv
    import torch

    ckpt = args.ckpt
    if os.path.isdir(ckpt):
        ckpt = os.path.join(ckpt, "checkpoint.bin")
    net, _ = load_checkpoint(ckpt)
    dataset = _load_xy(args.data)
    X = dataset.maps * dataset.masks if args.variant == "B" else dataset.maps
    os.makedirs(args.out, exist_ok=True)
    rel_cfg = RelevanceConfig()
    rows = []
    dtype = next(net.parameters()).dtype
    for i, row in enumerate(dataset.manifest):
        with torch.no_grad():
            prob = net.probabilities(torch.as_tensor(X[i : i + 1], dtype=dtype)).numpy()
        pred = int(prob[0, 1] >= 0.5)
        outcome = _outcome(pred, int(dataset.labels[i]))
        hm = lrp_heatmap(
            net, X[i, 0], target_class=pred, config=rel_cfg,
            scan_id=row["scan_id"], variant=args.variant,
            spacing=dataset.grid.spacing, affine=dataset.grid.affine,
        )
        out_path = os.path.join(args.out, f"{row['scan_id']}.nii")
        nifti.write_nifti(hm.relevance, out_path)
        mask_vol = dataset.grid.with_data(dataset.masks[i, 0])
        rows.append(
            [
                row["scan_id"], args.variant, row["class"], outcome,
                row["confound"],
                float(in_mask_fraction(hm.relevance, mask_vol)),
                f"{row['scan_id']}.nii",
                os.path.join(args.data, row["path"], "r2star.nii"),
                os.path.join(args.data, row["path"], "warp.txt"),
            ]
        )
    write_csv(
        os.path.join(args.out, "manifest.csv"),
        ["scan_id", "variant", "group", "outcome", "confound",
         "in_mask_fraction", "heatmap", "input", "warp"],
        rows,
    )
    print(f"wrote {len(rows)} heatmaps to {args.out}")
    return 0


def _cmd_spray(args) -> int:
    from .spray import (
        SpectralHeatmapClustering,
        cluster_mean_heatmaps,
        prepare_heatmaps,
        write_spray_outputs,
    )
    from .volume import AffineTransform

    manifest_path = os.path.join(args.heatmaps, "manifest.csv")
    if not os.path.exists(manifest_path):
        raise DataError(f"no manifest.csv under {args.heatmaps}")
    with open(manifest_path, newline="") as fh:
        entries = list(csv.DictReader(fh))
    if not entries:
        raise DataError("empty heatmap manifest")

    volumes = []
    transforms = []
    for e in entries:
        key = "heatmap" if args.matrix == "heatmap" else "input"
        path = e[key]
        if not os.path.isabs(path) and not os.path.exists(path):
            path = os.path.join(args.heatmaps, path)
        volumes.append(nifti.read_nifti(path))
        if args.space == "warped":
            transforms.append(AffineTransform(np.loadtxt(e["warp"])))
    matrix = prepare_heatmaps(
        volumes,
        [dict(e) for e in entries],
        space=args.space,
        target_spacing=args.target_spacing,
        transforms=transforms if args.space == "warped" else None,
    )
    model = SpectralHeatmapClustering(
        n_neighbors=args.k_neighbors, k_max=args.kmax,
        seed=args.seed if args.seed is not None else 0,
    )
    model.fit(matrix.X, manifest=matrix.manifest)
    if args.space == "native":
        means, _ = cluster_mean_heatmaps(
            [volumes[i] for i in matrix.kept_indices], model.labels_
        )
    else:
        means, _ = cluster_mean_heatmaps(
            [matrix.row_volume(r) for r in range(matrix.X.shape[0])], model.labels_
        )
    write_spray_outputs(args.out, matrix, model, means=means)
    print(
        f"clustered {matrix.X.shape[0]} maps ({args.space}): "
        f"k = {model.n_clusters_}, eigengap = {model.eigengap_:.4f}"
    )
    return 0


def _cmd_embed(args) -> int:
    from .embedding import EmbedConfig, export_scatter, tsne

    lsym_path = os.path.join(args.spray, "lsym.npy")
    vec_path = os.path.join(args.spray, "eigenvectors.npy")
    labels_path = os.path.join(args.spray, "labels.csv")
    for path in (lsym_path, vec_path, labels_path):
        if not os.path.exists(path):
            raise DataError(f"missing spray artifact {path}")
    lsym = np.load(lsym_path)
    vecs = np.load(vec_path)
    with open(labels_path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    config = EmbedConfig(
        perplexity=args.perplexity,
        iterations=args.iterations,
        seed=args.seed if args.seed is not None else 0,
    )
    coords, kl = tsne(lsym, config, init_coords=vecs[:, 1:3])
    os.makedirs(args.out, exist_ok=True)
    export_scatter(
        coords,
        rows,
        [int(r["cluster"]) for r in rows],
        os.path.join(args.out, "scatter.csv"),
        os.path.join(args.out, "scatter.svg"),
    )
    print(f"embedded {coords.shape[0]} points; final KL = {kl[-1]:.4f}")
    return 0


def _cmd_run(args) -> int:
    from .pipeline import run_experiment

    config = load_run_config(args.config)
    if args.seed is not None:
        config.seed = args.seed
    if args.deterministic:
        config.deterministic = True
    if args.threads:
        config.threads = args.threads
    summary = run_experiment(config, out_dir=args.out)
    print(f"run complete: {summary['run_dir']}")
    return 0


def _cmd_report(args) -> int:
    from .pipeline import write_report

    path = write_report(args.rundir)
    print(f"report at {path}")
    return 0


_COMMANDS = {
    "phantom": _cmd_phantom,
    "fit": _cmd_fit,
    "train": _cmd_train,
    "heatmap": _cmd_heatmap,
    "spray": _cmd_spray,
    "embed": _cmd_embed,
    "run": _cmd_run,
    "report": _cmd_report,
}


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    _apply_common(args)
    try:
        return _COMMANDS[args.command](args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 3
    except (NumericError, FloatingPointError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return 4
    except R2SprayError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except FileNotFoundError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
