"""End-to-end phantom study: data synthesis, training matrix, heatmap
clustering, embedding, metrics aggregation and reporting.

A run directory is content-addressed by the resolved configuration; run.json
echoes that configuration and registers every artifact path so nothing is
orphaned. Stage order per repeat: split -> train -> evaluate -> heatmaps;
per variant afterwards: spectral clustering (native + warped) -> embedding.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass

import numpy as np
import torch

from . import nifti
from .cohort import (
    Metrics,
    SubjectRecord,
    aggregate_runs,
    compute_metrics,
    format_metric_cell,
    make_splits,
)
from .config import RunConfig, config_hash, resolve_config
from .errors import ConfigError, DataError
from .network import TrainConfig, save_checkpoint, train_model
from .relaxometry import PhantomSpec, fit_r2star_map, generate_phantom
from .relevance import RelevanceConfig, in_mask_fraction, lrp_heatmap
from .spray import SpectralHeatmapClustering, cluster_mean_heatmaps, prepare_heatmaps, write_spray_outputs
from .textio import fmt, write_csv
from .embedding import EmbedConfig, export_scatter, tsne
from .volume import AffineTransform, Volume3D

__all__ = [
    "write_phantom_dataset",
    "load_manifest",
    "fit_dataset_maps",
    "run_experiment",
    "write_report",
]

POSITIVE_CLASS = "AD"
CLASS_TO_INT = {"NC": 0, "AD": 1}


def _outcome(pred: int, true: int) -> str:
    if true == 1:
        return "TP" if pred == 1 else "FN"
    return "FP" if pred == 1 else "TN"


# ---------------------------------------------------------------------------
# Dataset on disk
# ---------------------------------------------------------------------------

def write_phantom_dataset(
    spec: PhantomSpec, n_per_class: int, seed: int, out_dir: str
) -> list[dict]:
    """Synthesize a cohort and write per-subject files plus labels.csv.

    Layout: <out>/sub-XXXX/{echoes.nii, mask.nii, guidance.nii,
    truth_r2star.nii, warp.txt}; ages and sexes are synthetic covariates.
    """
    os.makedirs(out_dir, exist_ok=True)
    meta_rng = np.random.default_rng(np.random.SeedSequence([seed, 0xC0FFEE]))
    rows = []
    manifest = []
    index = 0
    for cls in ("NC", "AD"):
        for _ in range(n_per_class):
            subject_id = f"sub-{index:04d}"
            sub_dir = os.path.join(out_dir, subject_id)
            os.makedirs(sub_dir, exist_ok=True)
            subject = generate_phantom(spec, cls, seed=seed + index)
            nifti.write_nifti_stack(
                list(subject.series.volumes), os.path.join(sub_dir, "echoes.nii")
            )
            nifti.write_nifti(subject.brain_mask, os.path.join(sub_dir, "mask.nii"))
            nifti.write_nifti(subject.guidance_mask, os.path.join(sub_dir, "guidance.nii"))
            nifti.write_nifti(subject.truth.r2star, os.path.join(sub_dir, "truth_r2star.nii"))
            np.savetxt(
                os.path.join(sub_dir, "warp.txt"),
                subject.template_transform.matrix,
                fmt="%.17g",
            )
            mean_age = 71.1 if cls == "AD" else 69.6
            age = float(np.clip(meta_rng.normal(mean_age, 8.5), 50.0, 95.0))
            sex = "m" if meta_rng.random() < 0.45 else "f"
            scan_id = f"{subject_id}_scan0"
            row = {
                "subject_id": subject_id,
                "scan_id": scan_id,
                "class": cls,
                "age": age,
                "sex": sex,
                "confound": int(subject.confound_present),
                "path": subject_id,
            }
            rows.append(
                [subject_id, scan_id, cls, age, sex, int(subject.confound_present), subject_id]
            )
            manifest.append(row)
            index += 1
    write_csv(
        os.path.join(out_dir, "labels.csv"),
        ["subject_id", "scan_id", "class", "age", "sex", "confound", "path"],
        rows,
    )
    spec_echo = {
        "dims": list(spec.dims),
        "spacing": list(spec.spacing),
        "echo_times_s": list(spec.echo_times),
        "s0_value": spec.s0_value,
        "background_r2star": spec.background_r2star,
        "outside_r2star": spec.outside_r2star,
        "noise_sigma": spec.noise_sigma,
        "n_per_class": n_per_class,
        "seed": seed,
        "confound": None
        if spec.confound is None
        else {
            "r2star_offset": spec.confound.r2star_offset,
            "inner_scale": spec.confound.inner_scale,
            "outer_scale": spec.confound.outer_scale,
            "affected_class": spec.confound.affected_class,
        },
        "pose_jitter_mm": spec.pose_jitter_mm,
    }
    with open(os.path.join(out_dir, "phantom_spec.json"), "w") as fh:
        json.dump(spec_echo, fh, indent=2, sort_keys=True)
    return manifest


def load_manifest(data_dir: str) -> list[dict]:
    import csv

    path = os.path.join(data_dir, "labels.csv")
    if not os.path.exists(path):
        raise DataError(f"no labels.csv under {data_dir}")
    out = []
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            row["age"] = float(row["age"])
            row["confound"] = int(row.get("confound", 0))
            out.append(row)
    return out


def _echo_times_from_spec(data_dir: str) -> list[float]:
    path = os.path.join(data_dir, "phantom_spec.json")
    if not os.path.exists(path):
        raise DataError(f"no phantom_spec.json under {data_dir} (echo times unknown)")
    with open(path) as fh:
        return list(json.load(fh)["echo_times_s"])


def fit_dataset_maps(data_dir: str, manifest: list[dict]) -> None:
    """Fit R2* maps for every subject; writes r2star/s0/rsq.nii next to the echoes."""
    echo_times = _echo_times_from_spec(data_dir)
    from .relaxometry import MultiEchoSeries

    for row in manifest:
        sub_dir = os.path.join(data_dir, row["path"])
        target = os.path.join(sub_dir, "r2star.nii")
        if os.path.exists(target):
            continue
        volumes = nifti.read_nifti_stack(os.path.join(sub_dir, "echoes.nii"))
        series = MultiEchoSeries(echo_times=tuple(echo_times), volumes=tuple(volumes))
        fitted = fit_r2star_map(series)
        nifti.write_nifti(fitted.r2star, target)
        nifti.write_nifti(fitted.s0, os.path.join(sub_dir, "s0.nii"))
        nifti.write_nifti(fitted.r_squared, os.path.join(sub_dir, "rsq.nii"))


@dataclass
class _Dataset:
    manifest: list[dict]
    scan_index: dict[str, int]
    maps: np.ndarray  # (n, 1, nx, ny, nz)
    masks: np.ndarray
    guidance: np.ndarray
    labels: np.ndarray
    confound: np.ndarray
    transforms: list[AffineTransform]
    grid: Volume3D


def _load_dataset(data_dir: str, manifest: list[dict]) -> _Dataset:
    maps, masks, guidance, labels, confound, transforms = [], [], [], [], [], []
    grid = None
    for row in manifest:
        sub_dir = os.path.join(data_dir, row["path"])
        vol = nifti.read_nifti(os.path.join(sub_dir, "r2star.nii"))
        mask = nifti.read_nifti(os.path.join(sub_dir, "mask.nii"))
        guid = nifti.read_nifti(os.path.join(sub_dir, "guidance.nii"))
        warp = np.loadtxt(os.path.join(sub_dir, "warp.txt"))
        if grid is None:
            grid = vol
        maps.append(vol.data[np.newaxis])
        masks.append(mask.data[np.newaxis])
        guidance.append(guid.data[np.newaxis])
        labels.append(CLASS_TO_INT[row["class"]])
        confound.append(row["confound"])
        transforms.append(AffineTransform(warp))
    return _Dataset(
        manifest=manifest,
        scan_index={row["scan_id"]: i for i, row in enumerate(manifest)},
        maps=np.asarray(maps),
        masks=np.asarray(masks),
        guidance=np.asarray(guidance),
        labels=np.asarray(labels, dtype=np.int64),
        confound=np.asarray(confound, dtype=np.int64),
        transforms=transforms,
        grid=grid,
    )


def _subjects_from_manifest(manifest: list[dict]) -> list[SubjectRecord]:
    by_subject: dict[str, dict] = {}
    for row in manifest:
        rec = by_subject.setdefault(
            row["subject_id"],
            {"group": row["class"], "age": row["age"], "sex": row["sex"], "scans": []},
        )
        rec["scans"].append(row["scan_id"])
    return [
        SubjectRecord(
            subject_id=sid,
            group=rec["group"],
            age=rec["age"],
            sex=rec["sex"],
            scan_ids=tuple(rec["scans"]),
        )
        for sid, rec in by_subject.items()
    ]


# ---------------------------------------------------------------------------
# Experiment matrix
# ---------------------------------------------------------------------------

def _variant_seed(base: int, variant: str, repeat: int) -> int:
    # repeats share the same split; the training seed is variant-independent
    # so that variant switches stay the only behavioral difference
    return (base * 1000003 + repeat * 101) % (2**31 - 1)


def _train_eval_one(
    config: RunConfig,
    dataset: _Dataset,
    variant: str,
    repeat: int,
    split,
    out_dir: str,
    artifacts: list[str],
) -> tuple[Metrics, list[dict]]:
    os.makedirs(out_dir, exist_ok=True)
    idx = dataset.scan_index
    tr = [idx[s] for s in split.train]
    va = [idx[s] for s in split.val]
    te = [idx[s] for s in split.test]

    X, y = dataset.maps, dataset.labels
    masks = dataset.masks
    net_input = X * masks if variant == "B" else X

    dtype = {"float32": torch.float32, "float64": torch.float64}[config.train_dtype]
    tconf = TrainConfig(
        epochs=config.epochs,
        batch_size=config.batch_size,
        lr_init=config.lr_init,
        lr_factor=config.lr_factor,
        patience=config.patience,
        lr_floor=config.lr_floor,
        relevance_lambda=config.relevance_lambda,
        seed=_variant_seed(config.seed, variant, repeat),
    )
    guidance = dataset.guidance[tr] if variant == "C" else None
    guidance_val = dataset.guidance[va] if variant == "C" else None
    net, history = train_model(
        net_input[tr], y[tr], net_input[va], y[va], tconf,
        dtype=dtype, guidance_masks=guidance, guidance_masks_val=guidance_val,
    )

    ckpt_path = os.path.join(out_dir, "checkpoint.bin")
    save_checkpoint(net, ckpt_path, config=tconf, history=history)
    artifacts += [ckpt_path, ckpt_path + ".json"]

    # test evaluation
    probs = []
    with torch.no_grad():
        for start in range(0, len(te), config.batch_size):
            chunk = te[start : start + config.batch_size]
            xb = torch.as_tensor(net_input[chunk], dtype=dtype)
            probs.append(net.probabilities(xb).numpy())
    probs = np.concatenate(probs, axis=0)
    scores = probs[:, 1]
    metrics = compute_metrics(scores, y[te])

    heat_dir = os.path.join(out_dir, "heatmaps")
    os.makedirs(heat_dir, exist_ok=True)
    rel_cfg = RelevanceConfig()
    pred_rows = []
    heat_entries = []
    for pos, i in enumerate(te):
        row = dataset.manifest[i]
        pred = int(scores[pos] >= 0.5)
        outcome = _outcome(pred, int(y[i]))
        hm = lrp_heatmap(
            net,
            net_input[i, 0],
            target_class=pred,
            config=rel_cfg,
            scan_id=row["scan_id"],
            variant=variant,
            spacing=dataset.grid.spacing,
            affine=dataset.grid.affine,
        )
        mask_vol = dataset.grid.with_data(dataset.masks[i, 0])
        frac = in_mask_fraction(hm.relevance, mask_vol)
        hm_path = os.path.join(heat_dir, f"{row['scan_id']}.nii")
        nifti.write_nifti(hm.relevance, hm_path)
        artifacts.append(hm_path)
        pred_rows.append(
            [row["scan_id"], row["class"], float(scores[pos]), pred, outcome,
             row["confound"], float(frac)]
        )
        heat_entries.append(
            {
                "scan_id": f"{row['scan_id']}@rep{repeat}",
                "group": row["class"],
                "outcome": outcome,
                "confound": row["confound"],
                "in_mask_fraction": frac,
                "dead": hm.dead,
                "heatmap_path": hm_path,
                "input_index": i,
            }
        )
    pred_path = os.path.join(out_dir, "predictions.csv")
    write_csv(
        pred_path,
        ["scan_id", "class", "score", "pred", "outcome", "confound", "in_mask_fraction"],
        pred_rows,
    )
    artifacts.append(pred_path)
    return metrics, heat_entries


def _spray_and_embed(
    config: RunConfig,
    dataset: _Dataset,
    heat_entries: list[dict],
    variant_dir: str,
    artifacts: list[str],
) -> dict:
    """Pooled clustering over all repeats' test heatmaps, native and warped."""
    heatmaps = []
    transforms = []
    for e in heat_entries:
        vol = nifti.read_nifti(e["heatmap_path"])
        heatmaps.append(vol)
        transforms.append(dataset.transforms[e["input_index"]])
    manifest = [
        {k: e[k] for k in ("scan_id", "group", "outcome", "confound")}
        for e in heat_entries
    ]

    summary = {}
    for space in ("native", "warped"):
        matrix = prepare_heatmaps(
            heatmaps,
            manifest,
            space=space,
            target_spacing=config.spray_target_spacing,
            transforms=transforms if space == "warped" else None,
            template=dataset.grid,
        )
        n = matrix.X.shape[0]
        model = SpectralHeatmapClustering(
            n_neighbors=min(config.spray_k_neighbors, n - 1),
            k_max=min(config.spray_k_max, n - 1),
            seed=config.seed,
        )
        model.fit(matrix.X, manifest=matrix.manifest)

        if space == "native":
            # means of the full-resolution maps (they share the native grid)
            means, _ = cluster_mean_heatmaps(
                [heatmaps[i] for i in matrix.kept_indices], model.labels_
            )
        else:
            # means of the warped, downsampled, normalized rows
            means, _ = cluster_mean_heatmaps(
                [matrix.row_volume(r) for r in range(n)], model.labels_
            )

        spray_dir = os.path.join(variant_dir, f"spray_{space}")
        write_spray_outputs(spray_dir, matrix, model, means=means)
        for name in ("eigenvalues.csv", "labels.csv", "composition.csv",
                     "lsym.npy", "eigenvectors.npy"):
            artifacts.append(os.path.join(spray_dir, name))
        artifacts += [
            os.path.join(spray_dir, f"cluster_mean_{i}.nii") for i in range(len(means))
        ]

        embed_summary = None
        feasible = (n - 1) / 3.0
        if n >= 5 and feasible > 1.0:
            econf = EmbedConfig(
                perplexity=min(config.embed_perplexity, feasible * 0.999),
                iterations=config.embed_iterations,
                learning_rate=config.embed_learning_rate,
                seed=config.seed,
            )
            init = model.eigenvectors_[:, 1:3]
            coords, kl_trace = tsne(model.laplacian_, econf, init_coords=init)
            embed_dir = os.path.join(variant_dir, f"embed_{space}")
            os.makedirs(embed_dir, exist_ok=True)
            csv_path = os.path.join(embed_dir, "scatter.csv")
            svg_path = os.path.join(embed_dir, "scatter.svg")
            export_scatter(coords, list(matrix.manifest), model.labels_, csv_path, svg_path)
            artifacts += [csv_path, svg_path]
            embed_summary = {
                "perplexity": econf.perplexity,
                "final_kl": float(kl_trace[-1]) if kl_trace else None,
            }

        summary[space] = {
            "n_samples": n,
            "n_excluded": len(matrix.excluded),
            "k": int(model.n_clusters_),
            "eigengap": float(model.eigengap_),
            "embedding": embed_summary,
        }
    return summary


def run_experiment(config: RunConfig, out_dir: str | None = None) -> dict:
    """Execute the full variant matrix; returns the run summary (also run.json)."""
    if config.threads > 0:
        torch.set_num_threads(config.threads)
    if config.deterministic:
        torch.set_num_threads(1)

    run_id = config_hash(config)
    run_dir = out_dir or f"run-{run_id}"
    os.makedirs(run_dir, exist_ok=True)
    artifacts: list[str] = []
    stages_failed: list[dict] = []

    data_dir = config.data_dir or os.path.join(run_dir, "data")
    if config.data_dir is None:
        spec = config.phantom.to_spec()
        manifest = write_phantom_dataset(
            spec, config.phantom.n_per_class, config.phantom.seed, data_dir
        )
    else:
        manifest = load_manifest(data_dir)
    fit_dataset_maps(data_dir, manifest)
    dataset = _load_dataset(data_dir, manifest)

    subjects = _subjects_from_manifest(manifest)
    splits = make_splits(
        subjects, ratios=config.ratios, n_repeats=config.n_repeats, seed=config.seed
    )

    metric_rows = []
    summary: dict = {"run_id": run_id, "variants": {}}
    resolved = resolve_config(config)

    def _flush_run_record() -> None:
        rel = sorted(os.path.relpath(p, run_dir) for p in artifacts)
        record = {
            "run_id": run_id,
            "config": resolved,
            "data_dir": os.path.relpath(data_dir, run_dir)
            if config.data_dir is None
            else data_dir,
            "artifacts": rel,
            "failed_stages": stages_failed,
            "summary": summary,
        }
        with open(os.path.join(run_dir, "run.json"), "w") as fh:
            json.dump(record, fh, indent=2, sort_keys=True)

    train_config_echo: dict[str, list] = {}
    try:
        for variant in config.variants:
            variant_dir = os.path.join(run_dir, "variants", variant)
            per_repeat: list[Metrics] = []
            heat_entries: list[dict] = []
            vsummary: dict = {"repeats": []}
            stage = f"train:{variant}"
            for repeat, split in enumerate(splits):
                stage = f"train:{variant}:rep{repeat}"
                rep_dir = os.path.join(variant_dir, f"rep{repeat}")
                metrics, entries = _train_eval_one(
                    config, dataset, variant, repeat, split, rep_dir, artifacts
                )
                per_repeat.append(metrics)
                heat_entries.extend(entries)
                metric_rows.append(
                    [variant, repeat, metrics.accuracy, metrics.sensitivity,
                     metrics.specificity, metrics.auc, metrics.tp, metrics.fp,
                     metrics.tn, metrics.fn]
                )
                vsummary["repeats"].append(metrics.as_dict())
            if len(per_repeat) >= 2:
                agg = aggregate_runs(per_repeat)
                vsummary["aggregate"] = agg
                metric_rows.append(
                    [f"{variant}-aggregate", "", agg["accuracy"]["mean"],
                     agg["sensitivity"]["mean"], agg["specificity"]["mean"],
                     agg["auc"]["mean"], "", "", "", ""]
                )
            fracs = [e["in_mask_fraction"] for e in heat_entries]
            vsummary["mean_in_mask_fraction"] = float(np.mean(fracs)) if fracs else None
            stage = f"spray:{variant}"
            vsummary["spray"] = _spray_and_embed(
                config, dataset, heat_entries, variant_dir, artifacts
            )
            summary["variants"][variant] = vsummary
            train_config_echo[variant] = [
                _variant_seed(config.seed, variant, r) for r in range(len(splits))
            ]
    except Exception as exc:
        stages_failed.append({"stage": stage, "error": str(exc)})
        _flush_run_record()
        raise

    # variant switches are the only behavioral difference between A/B/C runs:
    # the per-repeat training seeds must be identical across variants
    seeds_per_variant = list(train_config_echo.values())
    if any(s != seeds_per_variant[0] for s in seeds_per_variant[1:]):
        raise ConfigError("per-variant training seeds diverged")

    metrics_path = os.path.join(run_dir, "metrics.csv")
    write_csv(
        metrics_path,
        ["variant", "repeat", "accuracy", "sensitivity", "specificity", "auc",
         "tp", "fp", "tn", "fn"],
        metric_rows,
    )
    artifacts.append(metrics_path)

    table_path = os.path.join(run_dir, "table1.csv")
    table_rows = []
    for variant in config.variants:
        agg = summary["variants"][variant].get("aggregate")
        if not agg:
            continue
        table_rows.append(
            [
                variant,
                "Yes" if variant == "B" else "No",
                "Yes" if variant == "C" else "No",
                format_metric_cell(agg["accuracy"]),
                format_metric_cell(agg["sensitivity"]),
                format_metric_cell(agg["specificity"]),
                format_metric_cell(agg["auc"], percent=False),
            ]
        )
    write_csv(
        table_path,
        ["Id", "Skull-stripping", "Relevance-guided", "Accuracy", "Sensitivity",
         "Specificity", "AUC"],
        table_rows,
    )
    artifacts.append(table_path)

    _flush_run_record()
    report_path = write_report(run_dir)
    summary["run_dir"] = run_dir
    summary["report"] = report_path
    return summary


# ---------------------------------------------------------------------------
# Report
# ---------------------------------------------------------------------------

def _read_csv_rows(path: str) -> list[list[str]]:
    import csv

    with open(path, newline="") as fh:
        return list(csv.reader(fh))


def _md_table(rows: list[list[str]]) -> list[str]:
    if not rows:
        return ["(empty)"]
    out = ["| " + " | ".join(rows[0]) + " |",
           "|" + "---|" * len(rows[0])]
    for row in rows[1:]:
        out.append("| " + " | ".join(row) + " |")
    return out


def write_report(run_dir: str) -> str:
    """Markdown summary with the aggregate table, spectra and scatter links."""
    lines = ["# Phantom study report", ""]
    run_json = os.path.join(run_dir, "run.json")
    if not os.path.exists(run_json):
        lines += ["no artifacts: run.json missing", ""]
        path = os.path.join(run_dir, "report.md")
        with open(path, "w") as fh:
            fh.write("\n".join(lines))
        return path
    with open(run_json) as fh:
        record = json.load(fh)
    lines += [f"run id: `{record['run_id']}`", ""]

    missing = []
    table_path = os.path.join(run_dir, "table1.csv")
    lines += ["## Performance metrics", ""]
    if os.path.exists(table_path):
        lines += _md_table(_read_csv_rows(table_path))
    else:
        missing.append("table1.csv")
    lines.append("")

    for variant, vsum in record["summary"]["variants"].items():
        lines += [f"## Variant {variant}", ""]
        frac = vsum.get("mean_in_mask_fraction")
        if frac is not None:
            lines.append(f"- mean in-mask relevance fraction: {frac:.3f}")
        for space in ("native", "warped"):
            spray_dir = os.path.join(run_dir, "variants", variant, f"spray_{space}")
            embed_dir = os.path.join(run_dir, "variants", variant, f"embed_{space}")
            info = vsum.get("spray", {}).get(space, {})
            gap = info.get("eigengap")
            gap_text = f"{gap:.4f}" if gap is not None else "n/a"
            lines.append(
                f"- {space}: k = {info.get('k')}, eigengap = {gap_text}, "
                f"n = {info.get('n_samples')}"
            )
            ev = os.path.join(spray_dir, "eigenvalues.csv")
            if os.path.exists(ev):
                head = _read_csv_rows(ev)[1:9]
                spectrum = ", ".join(f"{float(r[1]):.4f}" for r in head)
                lines.append(f"  - leading eigenvalues: {spectrum}")
            else:
                missing.append(os.path.relpath(ev, run_dir))
            svg = os.path.join(embed_dir, "scatter.svg")
            if os.path.exists(svg):
                lines.append(f"  - scatter: ![scatter]({os.path.relpath(svg, run_dir)})")
            else:
                missing.append(os.path.relpath(svg, run_dir))
            comp = os.path.join(spray_dir, "composition.csv")
            if os.path.exists(comp):
                lines.append("")
                lines += _md_table(_read_csv_rows(comp))
                lines.append("")
            else:
                missing.append(os.path.relpath(comp, run_dir))
        lines.append("")

    if missing:
        lines += ["## Missing artifacts", ""]
        lines += [f"- {m}" for m in missing]
        lines.append("")

    path = os.path.join(run_dir, "report.md")
    with open(path, "w") as fh:
        fh.write("\n".join(lines))
    return path
