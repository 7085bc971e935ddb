"""Command-line interface.

Exit codes: 0 success, 2 validation, 3 I/O, 4 numeric failure, 5 artifact mismatch.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import shutil
import sys
import warnings
from pathlib import Path

import numpy as np
import yaml

from . import connectivity as fcmod
from .config import RunConfig, load_config, to_dict
from .denoiser import (AnalyticGaussianDenoiser, load_checkpoint, load_train_state, save_checkpoint,
                       save_train_state, train)
from .diffusion import build_schedule
from .errors import ArtifactIOError, ArtifactMismatchError, SpectrodiffError, ValidationError
from .metrics import EvalReport, evaluate
from .pipeline import SpectralCodec, synthesize, training_set
from .signal_io import (DatasetManifest, SubjectRecord, class_counts, ensure_dir, load_dataset,
                        save_dataset, write_matrix)
from .tfimage import read_spectrogram, write_spectrogram

log = logging.getLogger("spectrodiff")


# -- helpers ----------------------------------------------------------------------

def _out(cfg: RunConfig, *parts: str) -> Path:
    return Path(cfg.paths.out, *parts)


def _write_text(path: Path, text: str) -> None:
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(text, encoding="utf-8")
    except OSError as exc:
        raise ArtifactIOError(f"cannot write {path}: {exc}") from exc


def _load_real(cfg: RunConfig, metrics: bool = False):
    if not cfg.paths.manifest:
        raise ValidationError("paths.manifest is required")
    records, manifest = load_dataset(cfg.paths.manifest)
    if records:
        cfg.validate_for_length(records[0].T, metrics)
    return records, manifest


def _record_run(cfg: RunConfig, overrides) -> None:
    ensure_dir(cfg.paths.out)
    doc = {"config": to_dict(cfg), "overrides": list(overrides or [])}
    _write_text(_out(cfg, "run_config.yaml"), yaml.safe_dump(doc, sort_keys=True))


def _model_dir(cfg: RunConfig) -> Path:
    if cfg.paths.checkpoint:
        return Path(cfg.paths.checkpoint).parent
    return _out(cfg, "model")


def _checkpoint_path(cfg: RunConfig) -> Path:
    return Path(cfg.paths.checkpoint) if cfg.paths.checkpoint else _out(cfg, "model", "model.mdl")


# -- commands ---------------------------------------------------------------------

def cmd_transform(cfg: RunConfig) -> Path:
    records, manifest = _load_real(cfg)
    if not records:
        raise ValidationError("dataset is empty")
    t = cfg.tfimage
    codec = SpectralCodec.fit(records, t.image_size, t.window, t.N, t.h)
    archive = ensure_dir(cfg.paths.archive or _out(cfg, "archive"))
    entries = []
    from .tfimage import normalize, wft
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        for rec in records:
            z = (rec.series - codec.roi_mean[:, None]) / codec.roi_std[:, None]
            for r in range(codec.D):
                spec, _ = normalize(wft(z[r], codec.plan.config), codec.norm[r])
                fname = f"{rec.subject_id}_r{r:03d}.spc"
                write_spectrogram(archive / fname, spec)
                entries.append({"subject_id": rec.subject_id, "class_label": rec.class_label,
                                "roi": r, "path": fname})
    codec.save(archive / "codec.json")
    index = {"manifest": manifest.to_dict() | {"subjects": []}, "spectrograms": entries}
    _write_text(archive / "index.json", json.dumps(index, indent=2) + "\n")
    c = codec.plan.config
    print(f"transform: {len(records)} subjects x {codec.D} ROIs -> {len(entries)} spectrograms "
          f"K={c.K} M={c.M} (N={c.N}, h={c.h}, image {codec.plan.image_size}x{codec.plan.image_size})")
    return archive


def _read_archive(path: Path):
    try:
        index = json.loads((path / "index.json").read_text(encoding="utf-8"))
    except FileNotFoundError as exc:
        raise ValidationError(f"spectrogram archive not found: {path}") from exc
    except (OSError, json.JSONDecodeError) as exc:
        raise ArtifactIOError(f"cannot read archive index in {path}: {exc}") from exc
    codec = SpectralCodec.load(path / "codec.json")
    manifest = DatasetManifest.from_dict(index["manifest"])
    return index, codec, manifest


def cmd_invert(cfg: RunConfig) -> Path:
    """Rebuild a dataset from a spectrogram archive."""
    archive = Path(cfg.paths.archive or _out(cfg, "archive"))
    index, codec, manifest = _read_archive(archive)
    by_subject: dict[str, dict] = {}
    for e in index["spectrograms"]:
        by_subject.setdefault(e["subject_id"], {"label": e["class_label"], "specs": {}})
        by_subject[e["subject_id"]]["specs"][int(e["roi"])] = e["path"]
    records = []
    for sid, info in by_subject.items():
        if sorted(info["specs"]) != list(range(codec.D)):
            raise ValidationError(f"subject {sid!r}: archive is missing ROI spectrograms")
        imgs = []
        for r in range(codec.D):
            spec = read_spectrogram(archive / info["specs"][r], codec.plan.config)
            imgs.append(codec.plan.to_image(spec))
        records.append(SubjectRecord(sid, int(info["label"]), codec.decode(np.stack(imgs))))
    out = save_dataset(records, manifest, _out(cfg, "inverted"))
    print(f"invert: {len(records)} subjects -> {out}")
    return out


def _training_data(cfg: RunConfig):
    """(images, labels, rois, codec, manifest) from an archive or built on the fly."""
    if cfg.paths.archive and Path(cfg.paths.archive, "index.json").exists():
        archive = Path(cfg.paths.archive)
        index, codec, manifest = _read_archive(archive)
        images, labels, rois = [], [], []
        for e in index["spectrograms"]:
            spec = read_spectrogram(archive / e["path"], codec.plan.config)
            images.append(codec.plan.to_image(spec))
            labels.append(e["class_label"])
            rois.append(e["roi"])
        return np.stack(images), np.array(labels), np.array(rois), codec, manifest
    records, manifest = _load_real(cfg)
    if not records:
        raise ValidationError("dataset is empty")
    t = cfg.tfimage
    codec = SpectralCodec.fit(records, t.image_size, t.window, t.N, t.h)
    images, labels, rois = training_set(records, codec)
    return images, labels, rois, codec, manifest


def cmd_train(cfg: RunConfig) -> Path:
    images, labels, rois, codec, manifest = _training_data(cfg)
    mdir = ensure_dir(_model_dir(cfg))
    ckpt = _checkpoint_path(cfg)
    state_path = mdir / "train_state.npy"
    loss_path = mdir / "loss.csv"
    model = state = None
    previous: list[tuple[int, float]] = []
    if cfg.resume:
        if not state_path.exists() or not ckpt.exists():
            raise ValidationError(f"cannot resume: no training state in {mdir}")
        model, state = load_train_state(state_path, load_checkpoint(ckpt))
        previous = _read_losses(loss_path)
    result = train(images, labels, cfg.train, rois=rois, num_classes=manifest.num_classes,
                   num_rois=codec.D, model=model, state=state)
    save_checkpoint(ckpt, result.model)
    save_train_state(state_path, result.model, result.state)
    codec.save(mdir / "codec.json")
    rows = previous + result.losses
    _write_text(loss_path, "epoch,loss\n" + "".join(f"{e},{l:.9g}\n" for e, l in rows))
    meta = {"num_classes": manifest.num_classes, "class_names": manifest.class_names,
            "sampling_period_s": manifest.sampling_period_s, "epochs_done": result.state.epoch}
    _write_text(mdir / "train_meta.json", json.dumps(meta, indent=2) + "\n")
    last = f"{rows[-1][1]:.4f}" if rows else "n/a"
    print(f"train: {len(images)} images, {result.state.epoch} epochs total, last loss {last} -> {ckpt}")
    return ckpt


def _read_losses(path: Path) -> list[tuple[int, float]]:
    if not path.exists():
        return []
    with open(path, encoding="utf-8") as f:
        return [(int(r["epoch"]), float(r["loss"])) for r in csv.DictReader(f)]


def _sampler(cfg: RunConfig, manifest: DatasetManifest | None = None):
    """(denoiser factory, codec, num_classes, class names, sampling period)."""
    if cfg.sample.denoiser == "analytic":
        records, manifest = _load_real(cfg)
        if not records:
            raise ValidationError("analytic test mode needs a dataset to fit the codec")
        t = cfg.tfimage
        codec = SpectralCodec.fit(records, t.image_size, t.window, t.N, t.h)
        oracle = AnalyticGaussianDenoiser(0.0, 1.0)
        return (lambda rois: oracle), codec, manifest
    ckpt = _checkpoint_path(cfg)
    model = load_checkpoint(ckpt)
    codec = SpectralCodec.load(ckpt.parent / "codec.json")
    try:
        meta = json.loads((ckpt.parent / "train_meta.json").read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise ArtifactIOError(f"cannot read training metadata next to {ckpt}: {exc}") from exc
    trained = DatasetManifest(meta["num_classes"], meta["class_names"], [], meta["sampling_period_s"])
    S = cfg.tfimage.image_size
    if tuple(model.image_shape) != (2, S, S) or codec.image_shape != (2, S, S):
        raise ArtifactMismatchError(
            f"checkpoint images are {model.image_shape[1]}x{model.image_shape[2]}, config asks {S}x{S}")
    if model.num_rois != codec.D or model.num_classes != trained.num_classes:
        raise ArtifactMismatchError("checkpoint ROI/class counts disagree with its codec metadata")
    if manifest is not None and (manifest.num_classes != model.num_classes):
        raise ArtifactMismatchError(
            f"checkpoint has {model.num_classes} classes, dataset has {manifest.num_classes}")
    return (lambda rois: model.bind(rois)), codec, trained


def _generate(cfg: RunConfig, factory, codec, class_label, count, first_index=0):
    return synthesize(factory, codec, class_label, count, cfg.edm, cfg.guidance.scale,
                      cfg.seed, first_index)


def cmd_sample(cfg: RunConfig, class_label: int | None = None, count: int | None = None) -> Path:
    label = cfg.sample.class_label if class_label is None else class_label
    count = cfg.sample.count if count is None else count
    factory, codec, manifest = _sampler(cfg)
    if label is not None and not 0 <= label < manifest.num_classes:
        raise ValidationError(f"class_label {label} out of range for {manifest.num_classes} classes")
    records = _generate(cfg, factory, codec, label, count)
    out_dir = Path(cfg.paths.synthetic).parent if cfg.paths.synthetic else _out(cfg, "synthetic")
    if out_dir.exists():
        shutil.rmtree(out_dir)
    out = save_dataset(records, manifest, out_dir)
    print(f"sample: {len(records)} subjects of class {label} -> {out}")
    return out


def cmd_augment(cfg: RunConfig) -> Path:
    """factor x (real per-class count) synthetic subjects per class, merged with the real set."""
    real, manifest = _load_real(cfg)
    factory, codec, _ = _sampler(cfg, manifest)
    counts = class_counts(real, manifest.num_classes)
    synth = []
    for c, n in enumerate(counts):
        synth += _generate(cfg, factory, codec, c, cfg.augment.factor * n)
    out_dir = _out(cfg, "augmented")
    if out_dir.exists():
        shutil.rmtree(out_dir)
    out = save_dataset(list(real) + synth, manifest, out_dir)
    print(f"augment: {len(real)} real + {len(synth)} synthetic (factor {cfg.augment.factor}) -> {out}")
    return out


def cmd_evaluate(cfg: RunConfig) -> Path:
    real, _ = _load_real(cfg, metrics=True)
    synth_manifest = cfg.paths.synthetic or str(_out(cfg, "synthetic", "manifest.json"))
    synth, _ = load_dataset(synth_manifest)
    if not real or not synth:
        raise ValidationError("evaluate needs non-empty real and synthetic datasets")
    if real[0].D != synth[0].D or real[0].T != synth[0].T:
        raise ArtifactMismatchError(
            f"real cohort is {real[0].D}x{real[0].T}, synthetic is {synth[0].D}x{synth[0].T}")
    T = real[0].T
    rows, texts = [], []
    for L in cfg.metrics.lengths:
        if L > T:
            log.warning("skipping L=%d: exceeds series length T=%d", L, T)
            continue
        report = evaluate(real, synth, L, cfg.metrics.repeats, cfg.seed, cfg.metrics.stride,
                          cfg.metrics.corr_scale)
        rows.append(report.csv_row())
        texts.append(f"[L={L}]\n" + report.to_text())
    out_dir = ensure_dir(_out(cfg, "eval"))
    _write_text(out_dir / "eval.csv", EvalReport.csv_header() + "\n" + "".join(r + "\n" for r in rows))
    _write_text(out_dir / "report.txt", "\n".join(texts))
    print(f"evaluate: {len(rows)} lengths -> {out_dir / 'eval.csv'}")
    return out_dir


def cmd_fc(cfg: RunConfig) -> Path:
    records, manifest = _load_real(cfg)
    c = cfg.connectivity
    out_dir = _out(cfg, "fc")
    if out_dir.exists():
        shutil.rmtree(out_dir)
    subj_dir = ensure_dir(out_dir / "subjects")
    by_class: dict[int, list] = {}
    for rec in records:
        fc = fcmod.subject_fc(rec.series, c.tau)
        write_matrix(subj_dir / f"{rec.subject_id}.sdf", fc.values)
        by_class.setdefault(rec.class_label, []).append(fc)
    means = {}
    for label in sorted(by_class):
        mean, mask = fcmod.group_average(by_class[label], c.group_threshold)
        means[label] = mean
        write_matrix(out_dir / f"group_{label}_mean.sdf", mean.values)
        write_matrix(out_dir / f"group_{label}_mask.sdf", mask)
    names = fcmod.read_roi_names(cfg.paths.roi_names) if cfg.paths.roi_names else None
    edges = []
    if 0 in means and 1 in means:
        edges = fcmod.fc_difference_edges(means[0], means[1], c.top_n, c.edge_threshold)
    fcmod.write_edges(out_dir / "edges.csv", edges, names)
    print(f"fc: {len(records)} subjects, {len(means)} groups, {len(edges)} difference edges -> {out_dir}")
    return out_dir


def cmd_schedule_dump(cfg: RunConfig) -> Path:
    sched = build_schedule(cfg.edm)
    lines = ["step,sigma"] + [f"{i},{s!r}" for i, s in enumerate(sched.sigmas.tolist())]
    for line in lines:
        print(line.replace(",", "\t"))
    path = _out(cfg, "schedule.csv")
    _write_text(path, "\n".join(lines) + "\n")
    return path


COMMANDS = {
    "transform": cmd_transform,
    "invert": cmd_invert,
    "train": cmd_train,
    "sample": cmd_sample,
    "augment": cmd_augment,
    "evaluate": cmd_evaluate,
    "fc": cmd_fc,
    "schedule-dump": cmd_schedule_dump,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML/JSON run configuration")
    common.add_argument("--seed", type=int, help="global seed (unsigned 64-bit)")
    common.add_argument("--out", help="output directory")
    common.add_argument("--override", action="append", default=[], metavar="KEY=VALUE",
                        help="dotted config override, repeatable")
    common.add_argument("-v", "--verbose", action="store_true")
    parser = argparse.ArgumentParser(prog="spectrodiff", parents=[common],
                                     description="Spectrogram diffusion for multivariate time series.")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name, parents=[common])
        if name == "sample":
            p.add_argument("--class-label", type=int)
            p.add_argument("--count", type=int)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        cfg = load_config(args.config, args.override, args.seed, args.out)
        _record_run(cfg, args.override)
        fn = COMMANDS[args.command]
        if args.command == "sample":
            fn(cfg, args.class_label, args.count)
        else:
            fn(cfg)
    except SpectrodiffError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    return 0


if __name__ == "__main__":
    sys.exit(main())
