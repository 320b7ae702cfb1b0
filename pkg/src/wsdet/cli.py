"""Command-line surface: reproducible pipelines over files.

Subcommands: generate, split, cam2box, nms, fuse, train-sim, eval.
Every run writes a manifest of its resolved parameters alongside the
outputs, outputs are removed again if the run fails partway, and repeated
invocation with the same inputs/flags/seed produces byte-identical files.
WSDET_THREADS caps the worker pool used for batch file processing.
"""
from __future__ import annotations

import csv
import json
import os
import sys
from concurrent.futures import ThreadPoolExecutor

import click

from . import dataset as ds
from . import fusion, heatmap, metrics, toydet
from .ema import EMA_BN, FROZEN_BN, OPEN_BN, NormStrategy, save_checkpoint
from .geometry import BoundingBox

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib


def _n_workers() -> int:
    env = os.environ.get("WSDET_THREADS", "").strip()
    if env:
        n = int(env)
        if n < 1:
            raise click.ClickException(f"WSDET_THREADS must be >= 1, got {env!r}")
        return n
    return min(8, os.cpu_count() or 1)


class RunOutputs:
    """Tracks files written by a command so failures leave nothing behind."""

    def __init__(self):
        self.paths: list[str] = []

    def register(self, path) -> str:
        self.paths.append(str(path))
        return str(path)

    def cleanup(self) -> None:
        for p in self.paths:
            try:
                if os.path.isfile(p):
                    os.remove(p)
            except OSError:
                pass


def _guarded(fn):
    """Run fn(outputs); on any failure remove partial outputs and exit nonzero."""
    outputs = RunOutputs()
    try:
        fn(outputs)
    except click.ClickException:
        outputs.cleanup()
        raise
    except (ValueError, OSError, RuntimeError) as exc:
        outputs.cleanup()
        raise click.ClickException(str(exc)) from exc


def _write_run_manifest(outputs: RunOutputs, anchor: str, command: str, params: dict) -> None:
    if os.path.isdir(anchor):
        path = os.path.join(anchor, "run_manifest.json")
    else:
        path = anchor + ".manifest.json"
    outputs.register(path)
    with open(path, "w", encoding="utf-8") as f:
        json.dump({"command": command, "params": params}, f, indent=2, sort_keys=True)
        f.write("\n")


def _load_config_file(path: str) -> dict:
    ext = os.path.splitext(path)[1].lower()
    with open(path, "rb") as f:
        if ext == ".toml":
            return tomllib.load(f)
        if ext == ".json":
            return json.load(f)
    raise click.ClickException(f"{path}: config must be .toml or .json")


def _parse_ratio(text: str) -> float:
    if "/" in text:
        num, den = text.split("/", 1)
        return float(num) / float(den)
    return float(text)


def _read_heatmap_any(path: str):
    """Binary header format or 8-bit PGM, sniffed from the first bytes."""
    with open(path, "rb") as f:
        head = f.read(2)
    if head in (b"P5", b"P2"):
        return heatmap.load_pgm(path)
    if head[:1] == b"{":
        return heatmap.load_heatmap(path)
    raise ValueError("unrecognized heatmap format (need JSON-header binary or PGM)")


def _write_grouped_jsonl(outputs: RunOutputs, path: str, grouped: dict) -> None:
    """One line per detection, ordered by image id then descending score."""
    outputs.register(path)
    items = []
    for image_id in sorted(grouped):
        dets = sorted(
            range(len(grouped[image_id])),
            key=lambda i: (-grouped[image_id][i].score, i),
        )
        items.extend((image_id, grouped[image_id][i]) for i in dets)
    fusion.write_detections_jsonl(path, items)


@click.group()
@click.version_option()
def main():
    """Weakly/semi-supervised detection toolkit."""


# ---------------------------------------------------------------------------
@main.command("generate")
@click.option("--n", type=int, required=True, help="Number of synthetic images.")
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--config", "config_path", type=click.Path(exists=True), default=None,
              help="TOML/JSON file overriding synthetic-data parameters.")
@click.option("--out", "out_dir", type=click.Path(), required=True,
              help="Output dataset directory.")
def cmd_generate(n, seed, config_path, out_dir):
    """Generate a fully-annotated synthetic dataset (manifest + payloads)."""

    def run(outputs):
        overrides = _load_config_file(config_path) if config_path else {}
        known = {f for f in ds.SyntheticConfig.__dataclass_fields__}
        bad = sorted(set(overrides) - known)
        if bad:
            raise click.ClickException(f"unknown synthetic-config fields: {', '.join(bad)}")
        for key in ("sigma_range", "amplitude_range", "cam_gain_range",
                    "cam_conf_pos", "cam_conf_neg"):
            if key in overrides:
                overrides[key] = tuple(overrides[key])
        cfg = ds.SyntheticConfig(**overrides)
        records = ds.generate_synthetic(n, seed=seed, config=cfg)
        os.makedirs(out_dir, exist_ok=True)
        manifest_path = ds.save_manifest(out_dir, records, protocol="full")
        outputs.register(manifest_path)
        _write_run_manifest(outputs, out_dir, "generate",
                            {"n": n, "seed": seed, "config": overrides})
        click.echo(f"wrote {len(records)} records to {out_dir}")

    _guarded(run)


@main.command("split")
@click.argument("manifest", type=click.Path(exists=True))
@click.option("--ratio", type=str, required=True,
              help="Fraction kept fully annotated, e.g. 1/4 or 0.25.")
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--out", "out_dir", type=click.Path(), required=True)
def cmd_split(manifest, ratio, seed, out_dir):
    """Apply the partially-labelled protocol to a fully-annotated dataset."""

    def run(outputs):
        records, _protocol = ds.load_manifest(manifest)
        r = _parse_ratio(ratio)
        split = ds.split_partial(records, ratio=r, seed=seed)
        manifest_path = ds.save_manifest(
            out_dir, split.fully + split.weakly, protocol=split.protocol
        )
        outputs.register(manifest_path)
        _write_run_manifest(outputs, out_dir, "split",
                            {"manifest": os.path.basename(manifest),
                             "ratio": r, "seed": seed})
        click.echo(
            f"kept {len(split.fully)} fully annotated, "
            f"demoted {len(split.weakly)} to image-level labels"
        )

    _guarded(run)


# ---------------------------------------------------------------------------
@main.command("cam2box")
@click.argument("heatmaps", nargs=-1, required=True, type=click.Path())
@click.option("--tau", type=float, default=heatmap.DEFAULT_TAU, show_default=True,
              help="Binarization threshold.")
@click.option("--min-area", type=int, default=heatmap.DEFAULT_MIN_AREA, show_default=True)
@click.option("--max-area", type=int, default=heatmap.DEFAULT_MAX_AREA, show_default=True)
@click.option("--score", type=float, default=0.5, show_default=True,
              help="Confidence attached to every emitted box.")
@click.option("--connectivity", type=click.Choice(["4", "8"]), default="8", show_default=True)
@click.option("--out", "out_path", type=click.Path(), required=True)
def cmd_cam2box(heatmaps, tau, min_area, max_area, score, connectivity, out_path):
    """Convert heatmap files to pseudo-label boxes (JSONL, source=cam)."""

    def run(outputs):
        def one(path):
            try:
                values = _read_heatmap_any(path)
                dets = heatmap.cam_to_boxes(
                    values, tau=tau, score=score, min_area=min_area,
                    max_area=max_area, connectivity=int(connectivity),
                )
            except (ValueError, OSError) as exc:
                raise ValueError(f"{path}: {exc}") from exc
            image_id = os.path.splitext(os.path.basename(path))[0]
            return [(image_id, d) for d in dets]

        with ThreadPoolExecutor(max_workers=_n_workers()) as pool:
            per_file = list(pool.map(one, heatmaps))  # input order preserved
        items = [item for chunk in per_file for item in chunk]
        outputs.register(out_path)
        fusion.write_detections_jsonl(out_path, items)
        _write_run_manifest(outputs, out_path, "cam2box",
                            {"tau": tau, "min_area": min_area, "max_area": max_area,
                             "score": score, "connectivity": int(connectivity),
                             "n_files": len(heatmaps)})
        click.echo(f"wrote {len(items)} detections from {len(heatmaps)} heatmaps")

    _guarded(run)


@main.command("nms")
@click.argument("detections", type=click.Path(exists=True))
@click.option("--tau-nms", type=float, default=fusion.DEFAULT_TAU_NMS, show_default=True)
@click.option("--out", "out_path", type=click.Path(), required=True)
def cmd_nms(detections, tau_nms, out_path):
    """Per-image greedy NMS over a detections file."""

    def run(outputs):
        grouped = fusion.group_by_image(fusion.read_detections_jsonl(detections))
        suppressed = {k: fusion.nms(v, tau_nms) for k, v in grouped.items()}
        _write_grouped_jsonl(outputs, out_path, suppressed)
        _write_run_manifest(outputs, out_path, "nms", {"tau_nms": tau_nms})
        click.echo(f"wrote {sum(len(v) for v in suppressed.values())} detections")

    _guarded(run)


@main.command("fuse")
@click.option("--teacher", "teacher_path", type=click.Path(exists=True), required=True)
@click.option("--cam", "cam_path", type=click.Path(exists=True), required=True)
@click.option("--tau-nms", type=float, default=fusion.DEFAULT_TAU_NMS, show_default=True)
@click.option("--epoch", type=int, default=0, show_default=True)
@click.option("--cam-epochs", type=int, default=fusion.DEFAULT_CAM_EPOCHS, show_default=True)
@click.option("--out", "out_path", type=click.Path(), required=True)
def cmd_fuse(teacher_path, cam_path, tau_nms, epoch, cam_epochs, out_path):
    """Fuse teacher and CAM detections into per-image pseudo-labels."""

    def run(outputs):
        teacher = fusion.group_by_image(fusion.read_detections_jsonl(teacher_path))
        cam = fusion.group_by_image(fusion.read_detections_jsonl(cam_path))
        fused = {}
        for image_id in sorted(set(teacher) | set(cam)):
            fused[image_id] = fusion.fuse_pseudo_labels(
                teacher.get(image_id, []), cam.get(image_id, []),
                tau_nms=tau_nms, epoch=epoch, cam_epochs=cam_epochs,
            )
        _write_grouped_jsonl(outputs, out_path, fused)
        _write_run_manifest(outputs, out_path, "fuse",
                            {"tau_nms": tau_nms, "epoch": epoch, "cam_epochs": cam_epochs})
        click.echo(f"fused {len(fused)} images")

    _guarded(run)


# ---------------------------------------------------------------------------
# train-sim

_TRAIN_FIELD_CHECKS = {
    "epochs": lambda v: isinstance(v, int) and v >= 0,
    "steps_per_epoch": lambda v: isinstance(v, int) and v >= 1,
    "batch_full": lambda v: isinstance(v, int) and v >= 1,
    "batch_weak": lambda v: isinstance(v, int) and v >= 1,
    "lr": lambda v: isinstance(v, (int, float)) and v > 0,
    "lambda_weak": lambda v: isinstance(v, (int, float)) and v >= 0,
    "alpha": lambda v: isinstance(v, (int, float)) and 0 < v < 1,
    "tau_nms": lambda v: isinstance(v, (int, float)) and 0 <= v <= 1,
    "cam_epochs": lambda v: isinstance(v, int) and v >= 0,
    "pseudo_score_thresh": lambda v: isinstance(v, (int, float)) and 0 <= v <= 1,
    "eval_score_thresh": lambda v: isinstance(v, (int, float)) and 0 <= v <= 1,
    "match_iou": lambda v: isinstance(v, (int, float)) and 0 <= v <= 1,
    "eval_iou_thresh": lambda v: isinstance(v, (int, float)) and 0 <= v <= 1,
    "seed": lambda v: isinstance(v, int),
    "weak_enabled": lambda v: isinstance(v, bool),
    "eval_model": lambda v: v in ("teacher", "student"),
    "init_scale": lambda v: isinstance(v, (int, float)) and v >= 0,
    "cam_tau": lambda v: isinstance(v, (int, float)) and 0 < v < 1,
    "cam_min_area": lambda v: isinstance(v, int) and v >= 0,
    "cam_max_area": lambda v: v is None or (isinstance(v, int) and v >= 1),
}

_DATASET_FIELD_CHECKS = {
    "n_train": lambda v: isinstance(v, int) and v >= 1,
    "n_test": lambda v: isinstance(v, int) and v >= 1,
    "ratio": lambda v: isinstance(v, (int, float, str)),
    "seed": lambda v: isinstance(v, int),
}


def _build_train_setup(raw: dict):
    """Validate the config document, reporting every offending field at once."""
    errors = []
    train_block = dict(raw.get("train", {}))
    data_block = dict(raw.get("dataset", {}))
    synth_block = dict(data_block.pop("synthetic", {}))
    norm_block = dict(train_block.pop("norm", {}))

    for key in set(raw) - {"train", "dataset"}:
        errors.append(f"unknown top-level section {key!r}")
    for key, value in list(train_block.items()):
        if key not in _TRAIN_FIELD_CHECKS:
            errors.append(f"train.{key}: unknown field")
        elif not _TRAIN_FIELD_CHECKS[key](value):
            errors.append(f"train.{key}: invalid value {value!r}")
    for key, value in list(data_block.items()):
        if key not in _DATASET_FIELD_CHECKS:
            errors.append(f"dataset.{key}: unknown field")
        elif not _DATASET_FIELD_CHECKS[key](value):
            errors.append(f"dataset.{key}: invalid value {value!r}")
    known_synth = set(ds.SyntheticConfig.__dataclass_fields__)
    for key in synth_block:
        if key not in known_synth:
            errors.append(f"dataset.synthetic.{key}: unknown field")
    kind = norm_block.get("kind", FROZEN_BN)
    if kind not in (OPEN_BN, EMA_BN, FROZEN_BN):
        errors.append(f"train.norm.kind: invalid value {kind!r}")
    if errors:
        raise click.ClickException(
            "invalid train-sim config:\n  " + "\n  ".join(sorted(errors))
        )

    for key in ("sigma_range", "amplitude_range", "cam_gain_range",
                "cam_conf_pos", "cam_conf_neg"):
        if key in synth_block:
            synth_block[key] = tuple(synth_block[key])
    synth_cfg = ds.SyntheticConfig(**synth_block)

    alpha = train_block.get("alpha", 0.999)
    norm = NormStrategy(
        kind=kind,
        momentum=norm_block.get("momentum", 0.1),
        alpha=norm_block.get("alpha", alpha if kind == EMA_BN else None),
    )
    config = toydet.TrainConfig(norm=norm, **train_block)

    n_train = data_block.get("n_train", 96)
    n_test = data_block.get("n_test", 48)
    ratio = data_block.get("ratio", 0.25)
    if isinstance(ratio, str):
        ratio = _parse_ratio(ratio)
    data_seed = data_block.get("seed", config.seed)
    return config, synth_cfg, n_train, n_test, float(ratio), data_seed


@main.command("train-sim")
@click.option("--config", "config_path", type=click.Path(exists=True), required=True,
              help="TOML/JSON config with [dataset] and [train] sections.")
@click.option("--seed", type=int, default=None, help="Override train.seed.")
@click.option("--out", "out_dir", type=click.Path(), required=True)
def cmd_train_sim(config_path, seed, out_dir):
    """Run the synthetic teacher-student training simulation."""

    def run(outputs):
        raw = _load_config_file(config_path)
        if seed is not None:
            raw.setdefault("train", {})["seed"] = seed
        config, synth_cfg, n_train, n_test, ratio, data_seed = _build_train_setup(raw)

        records = ds.generate_synthetic(n_train, seed=data_seed, config=synth_cfg)
        test_records = ds.generate_synthetic(
            n_test, seed=data_seed + 10_000, config=synth_cfg
        )
        if ratio < 1.0:
            split = ds.split_partial(records, ratio=ratio, seed=data_seed + 20_000)
        else:
            split = ds.SplitDataset(fully=records, weakly=[], protocol="full")

        report = toydet.train(config, split, test_records)

        os.makedirs(out_dir, exist_ok=True)
        report_path = outputs.register(os.path.join(out_dir, "report.json"))
        with open(report_path, "w", encoding="utf-8") as f:
            json.dump(report.to_dict(), f, indent=2, sort_keys=True)
            f.write("\n")
        teacher_path = outputs.register(os.path.join(out_dir, "teacher.ckpt"))
        student_path = outputs.register(os.path.join(out_dir, "student.ckpt"))
        save_checkpoint(report.teacher, teacher_path)
        save_checkpoint(report.student, student_path)
        _write_run_manifest(outputs, out_dir, "train-sim", {
            "config": report.config,
            "dataset": {"n_train": n_train, "n_test": n_test,
                        "ratio": ratio, "seed": data_seed},
        })
        if report.final is not None:
            click.echo(
                f"final mAP {report.final['map']:.4f}, "
                f"Recall@0.5FPPI {report.final['recall_at_0.5_fppi']:.4f}"
            )
        else:
            click.echo("no epochs run; checkpoints hold the initial state")

    _guarded(run)


# ---------------------------------------------------------------------------
@main.command("eval")
@click.option("--gt", "gt_path", type=click.Path(exists=True), required=True,
              help="Ground-truth JSONL; a record with box=null declares a "
                   "lesion-free image.")
@click.option("--det", "det_path", type=click.Path(exists=True), required=True)
@click.option("--iou", type=float, default=metrics.DEFAULT_IOU_THRESH, show_default=True)
@click.option("--out", "out_path", type=click.Path(), required=True)
@click.option("--pr-csv", "pr_csv", type=click.Path(), default=None,
              help="Also write the raw precision-recall points as CSV.")
def cmd_eval(gt_path, det_path, iou, out_path, pr_csv):
    """Score detections against ground truth: mAP, FROC, Recall@0.5FPPI."""

    def run(outputs):
        ev = metrics.EvalSet()
        with open(gt_path, "r", encoding="utf-8") as f:
            for lineno, line in enumerate(f, start=1):
                line = line.strip()
                if not line:
                    continue
                try:
                    rec = json.loads(line)
                    image_id = rec["image_id"]
                    box = rec.get("box")
                except (ValueError, KeyError) as exc:
                    raise ValueError(f"{gt_path}: line {lineno}: {exc}") from exc
                if image_id not in ev.gts:
                    ev.add_image(image_id, [])
                if box is not None:
                    ev.gts[image_id].append(BoundingBox.from_list(box))
        try:
            det_items = fusion.read_detections_jsonl(det_path)
        except ValueError as exc:
            raise ValueError(f"{det_path}: {exc}") from exc
        for image_id, det in det_items:
            ev.add_detection(image_id, det)

        curve = metrics.froc(ev, iou)
        result = {
            "map": metrics.mean_average_precision(ev, iou),
            "recall_at_0.5_fppi": metrics.recall_at_fppi(curve, 0.5),
            "froc": [[f, r] for f, r in curve.points],
        }
        outputs.register(out_path)
        with open(out_path, "w", encoding="utf-8") as f:
            json.dump(result, f, indent=2, sort_keys=True)
            f.write("\n")
        if pr_csv:
            outputs.register(pr_csv)
            points = metrics.precision_recall_points(ev, iou)
            with open(pr_csv, "w", encoding="utf-8", newline="") as f:
                writer = csv.writer(f)
                writer.writerow(["recall", "precision"])
                writer.writerows(points)
        _write_run_manifest(outputs, out_path, "eval", {"iou": iou})
        click.echo(
            f"mAP {result['map']:.4f}, Recall@0.5FPPI {result['recall_at_0.5_fppi']:.4f}"
        )

    _guarded(run)


if __name__ == "__main__":
    main()
