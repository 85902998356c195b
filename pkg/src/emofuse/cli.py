"""Command-line entry point: synth, augment, train, eval, ensemble.

Every run is reproducible from its seed: identical invocations write
identical data files byte for byte. Exit codes are a stable contract:
0 success, 1 runtime/data failure, 2 usage or config error.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import sys
from pathlib import Path

from . import audio, dataio, report
from .ensemble import EnsembleMember, ensemble_evaluate, validate_members
from .errors import ConfigError, DataError, EmofuseError
from .model import load_checkpoint, model_dims
from .numerics import Rng
from .train import TrainConfig, evaluate, train

# ---------------------------------------------------------------------------
# Run configuration (flat key=value file, '#' comment lines)
# ---------------------------------------------------------------------------

CONFIG_DEFAULTS: dict[str, str] = {
    "manifest": "",
    "classes": "",
    "out": "",
    "split_fraction": "0.15",
    "batch_size": "16",
    "lr": "5e-5",
    "lr_decay_factor": "0.9",
    "plateau_epochs": "5",
    "weight_decay": "0.01",
    "dropout": "0.1",
    "aug_probability": "0.3",
    "window_seconds": "5.5",
    "hidden_width": "256",
    "hidden_layers": "2",
    "max_epochs": "100",
    "early_stop_patience": "15",
    "seed": "0",
    "class_weighting": "balanced",
}


def load_config(path) -> dict[str, str]:
    """Parse a key=value config file; unknown keys are rejected."""
    values: dict[str, str] = {}
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), start=1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        if "=" not in stripped:
            raise ConfigError(f"{path}:{lineno}: expected key=value, got {stripped!r}")
        key, _, value = stripped.partition("=")
        key = key.strip()
        if key not in CONFIG_DEFAULTS:
            raise ConfigError(f"{path}:{lineno}: unknown config key {key!r}")
        values[key] = value.strip()
    return values


def resolve_config(file_values: dict[str, str], overrides: dict[str, str]) -> dict[str, str]:
    resolved = dict(CONFIG_DEFAULTS)
    resolved.update(file_values)
    resolved.update({k: v for k, v in overrides.items() if v is not None})
    return resolved


def config_text(resolved: dict[str, str]) -> str:
    return "".join(f"{k}={resolved[k]}\n" for k in sorted(resolved))


def config_hash(resolved: dict[str, str]) -> str:
    """Hash of the experiment-defining keys; `out` is provenance, not identity."""
    text = "".join(f"{k}={resolved[k]}\n" for k in sorted(resolved) if k != "out")
    return hashlib.sha256(text.encode()).hexdigest()


def _train_config_from(resolved: dict[str, str]) -> TrainConfig:
    try:
        return TrainConfig(
            batch_size=int(resolved["batch_size"]),
            lr=float(resolved["lr"]),
            lr_decay_factor=float(resolved["lr_decay_factor"]),
            plateau_epochs=int(resolved["plateau_epochs"]),
            weight_decay=float(resolved["weight_decay"]),
            dropout=float(resolved["dropout"]),
            aug_probability=float(resolved["aug_probability"]),
            window_seconds=float(resolved["window_seconds"]),
            hidden_width=int(resolved["hidden_width"]),
            hidden_layers=int(resolved["hidden_layers"]),
            max_epochs=int(resolved["max_epochs"]),
            early_stop_patience=int(resolved["early_stop_patience"]),
            seed=int(resolved["seed"]),
            class_weighting=resolved["class_weighting"],
        )
    except ValueError as exc:
        raise ConfigError(f"bad config value: {exc}") from exc


# ---------------------------------------------------------------------------
# Helpers
# ---------------------------------------------------------------------------


def _parse_int_list(text: str, flag: str) -> list[int]:
    try:
        return [int(part) for part in text.split(",") if part != ""]
    except ValueError as exc:
        raise ConfigError(f"{flag}: expected comma-separated integers, got {text!r}") from exc


def _parse_range(text: str, flag: str, cast=float) -> tuple:
    parts = text.split(":")
    if len(parts) != 2:
        raise ConfigError(f"{flag}: expected LO:HI, got {text!r}")
    try:
        lo, hi = cast(parts[0]), cast(parts[1])
    except ValueError as exc:
        raise ConfigError(f"{flag}: {exc}") from exc
    if lo > hi:
        raise ConfigError(f"{flag}: LO must not exceed HI, got {text!r}")
    return lo, hi


def _write_split_manifest(path, records, base: Path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["id", "speech", "text", "label"])
        for rec in records:
            writer.writerow(
                [rec.id, str((base / rec.speech_path).resolve()), str((base / rec.text_path).resolve()), rec.label_name]
            )


def _load_members(paths) -> list[EnsembleMember]:
    names = [Path(p).stem for p in paths]
    if len(set(names)) != len(names):
        names = [f"{Path(p).parent.name}/{Path(p).stem}" for p in paths]
    members = []
    for name, p in zip(names, paths):
        params, meta = load_checkpoint(p)
        members.append(EnsembleMember(name, params, meta.best_val_f1))
    return members


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------


def cmd_synth(args) -> int:
    counts = _parse_int_list(args.counts, "--counts")
    if len(counts) != args.classes:
        raise ConfigError(f"--counts lists {len(counts)} classes, --classes says {args.classes}")
    spec = dataio.SyntheticSpec(
        class_counts=tuple(counts),
        embed_dim=args.dim,
        speech_frames=_parse_range(args.speech_frames, "--speech-frames", int),
        text_frames=_parse_range(args.text_frames, "--text-frames", int),
        separation=args.separation,
        noise=args.noise,
        seed=args.seed if args.seed is not None else 0,
    )
    out = report.ensure_dir(args.out)
    samples = dataio.gen_synthetic(spec)
    names = dataio.class_names_for(spec.n_classes)
    manifest_path = dataio.write_dataset(out, samples, names)

    frame_counts = [s.speech.T + s.text.T for s in samples]
    print(f"wrote {len(samples)} samples to {manifest_path}")
    print(report.class_histogram_text(names, counts))
    print(report.frame_histogram_text(frame_counts))
    report.save_dataset_figure(out / "dataset.png", names, counts, frame_counts)
    print(f"figure: {out / 'dataset.png'}")
    return 0


def cmd_augment(args) -> int:
    out = report.ensure_dir(args.out)
    chain = audio.AugmentChain(
        probability=args.prob,
        speed_factors=tuple(float(f) for f in args.speed_factors.split(",")),
        rir_seconds=args.rir_seconds,
        rir_t60_range=_parse_range(args.t60_range, "--t60-range"),
        snr_range_db=_parse_range(args.snr_range, "--snr-range"),
    )
    if args.noise_dir:
        chain.noise_bank = [audio.load_wav(p) for p in sorted(Path(args.noise_dir).glob("*.wav"))]
    root = Rng(args.seed if args.seed is not None else 0)
    wavs = sorted(Path(args.in_dir).glob("*.wav"))
    if not wavs:
        raise ConfigError(f"no .wav files in {args.in_dir}")

    failures = 0
    with open(out / "augment_log.csv", "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["file", "transform", "parameters"])
        for path in wavs:
            try:
                w = audio.load_wav(path)
            except (EmofuseError, OSError) as exc:
                print(f"error: {path.name}: {exc}", file=sys.stderr)
                failures += 1
                continue
            rng = root.child("augment", 0, path.name)
            augmented, transform, params = audio.augment_described(w, chain, rng)
            audio.save_wav(out / path.name, augmented)
            writer.writerow([path.name, transform, params])
    print(f"augmented {len(wavs) - failures}/{len(wavs)} files into {out}")
    return 1 if failures else 0


def cmd_train(args) -> int:
    if not args.config:
        raise ConfigError("train requires --config")
    file_values = load_config(args.config)
    overrides = {
        "seed": str(args.seed) if args.seed is not None else None,
        "out": args.out,
    }
    resolved = resolve_config(file_values, overrides)
    if not resolved["manifest"]:
        raise ConfigError("config must set manifest=PATH")
    if not resolved["out"]:
        raise ConfigError("set out=DIR in the config or pass --out")
    classes_path = resolved["classes"] or str(Path(resolved["manifest"]).parent / "classes.txt")
    resolved["classes"] = classes_path
    split_fraction = float(resolved["split_fraction"])
    if not 0.0 < split_fraction < 1.0:
        raise ConfigError(f"split_fraction must be in (0, 1), got {split_fraction}")
    cfg = _train_config_from(resolved)

    out = report.ensure_dir(resolved["out"])
    (out / "resolved_config.txt").write_text(config_text(resolved), encoding="utf-8")

    manifest, samples = dataio.load_manifest(resolved["manifest"], classes_path)
    train_idx, val_idx = dataio.stratified_split_indices(
        [s.label for s in samples], split_fraction, Rng(cfg.seed)
    )
    base = Path(resolved["manifest"]).parent
    _write_split_manifest(out / "train_manifest.csv", [manifest.records[i] for i in train_idx], base)
    _write_split_manifest(out / "val_manifest.csv", [manifest.records[i] for i in val_idx], base)
    dataio.write_class_table(out / "classes.txt", manifest.class_names)

    result = train(
        [samples[i] for i in train_idx],
        [samples[i] for i in val_idx],
        cfg,
        class_names=manifest.class_names,
        checkpoint_path=out / "checkpoint.emck",
        config_hash=config_hash(resolved),
        workers=args.workers,
    )

    report.write_history_csv(out / "history.csv", result.history)
    report.save_history_figure(out / "history.png", result.history)
    metrics = evaluate(result.params, [samples[i] for i in val_idx], workers=args.workers)
    (out / "metrics.txt").write_text(report.metrics_table(metrics, manifest.class_names), encoding="utf-8")
    report.write_confusion_csv(out / "confusion.csv", metrics.confusion, manifest.class_names)
    report.save_confusion_figure(out / "confusion.png", metrics.confusion, manifest.class_names)

    print(f"best val macro F1 {result.best_val_f1:.6f} at epoch {result.best_epoch}")
    print(f"checkpoint: {out / 'checkpoint.emck'}")
    print(f"history: {out / 'history.csv'}")
    return 0


def _load_eval_dataset(manifest_path, classes_flag):
    classes_path = classes_flag or str(Path(manifest_path).parent / "classes.txt")
    return dataio.load_manifest(manifest_path, classes_path)


def cmd_eval(args) -> int:
    params, meta = load_checkpoint(args.checkpoint)
    manifest, samples = _load_eval_dataset(args.manifest, args.classes)
    _check_compat(params, samples, manifest.class_names, args.checkpoint)
    out = report.ensure_dir(args.out)
    metrics = evaluate(params, samples, workers=args.workers)
    table = report.metrics_table(metrics, manifest.class_names)
    print(table, end="")
    print(f"(checkpoint best val macro F1 {meta.best_val_f1:.6f}, epoch {meta.epoch})")
    report.write_confusion_csv(out / "confusion.csv", metrics.confusion, manifest.class_names)
    report.save_confusion_figure(out / "confusion.png", metrics.confusion, manifest.class_names)
    return 0


def cmd_ensemble(args) -> int:
    if len(args.checkpoints) < 3 or len(args.checkpoints) % 2 == 0:
        raise ConfigError(f"ensemble needs an odd number of checkpoints >= 3, got {len(args.checkpoints)}")
    members = _load_members(args.checkpoints)
    validate_members(members)
    manifest, samples = _load_eval_dataset(args.manifest, args.classes)
    for mem, path in zip(members, args.checkpoints):
        _check_compat(mem.params, samples, manifest.class_names, path)
    out = report.ensure_dir(args.out)

    metrics = ensemble_evaluate(members, samples)
    solo_rows = []
    for mem in members:
        solo = evaluate(mem.params, samples, workers=args.workers)
        solo_rows.append((mem.name, solo.macro_f1))
    print(report.ensemble_table(solo_rows, metrics.macro_f1), end="")
    print()
    print(report.metrics_table(metrics, manifest.class_names), end="")
    report.write_confusion_csv(out / "confusion.csv", metrics.confusion, manifest.class_names)
    report.save_confusion_figure(out / "confusion.png", metrics.confusion, manifest.class_names)
    return 0


def _check_compat(params, samples, class_names, checkpoint_path):
    embed_dim, _, _, n_classes = model_dims(params)
    if n_classes != len(class_names):
        raise DataError(
            f"{checkpoint_path}: model has {n_classes} classes, class table lists {len(class_names)}"
        )
    if samples:
        data_dim = dataio.fuse_modalities(samples[0].speech, samples[0].text).shape[1]
        if data_dim != embed_dim:
            raise DataError(
                f"{checkpoint_path}: model expects E={embed_dim}, dataset has E={data_dim}"
            )


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="emofuse",
        description="Multimodal emotion classification: synthetic data, audio augmentation, training, evaluation, ensembling.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def shared(p, need_out=True):
        p.add_argument("--config", help="key=value config file")
        p.add_argument("--seed", type=int, help="root seed (overrides config)")
        p.add_argument("--out", required=need_out, help="output directory")
        p.add_argument("--workers", type=int, default=1, help="data-pipeline parallelism")

    p = sub.add_parser("synth", help="generate a synthetic feature dataset")
    p.add_argument("--classes", type=int, default=6)
    p.add_argument("--counts", default="300,250,150,120,100,80", help="comma-separated per-class sample counts")
    p.add_argument("--dim", type=int, default=64, help="embedding dimension E")
    p.add_argument("--speech-frames", default="8:24", help="speech frame-count range LO:HI")
    p.add_argument("--text-frames", default="4:12", help="text frame-count range LO:HI")
    p.add_argument("--separation", type=float, default=5.0)
    p.add_argument("--noise", type=float, default=1.0)
    shared(p)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("augment", help="augment a directory of WAV files")
    p.add_argument("--in", dest="in_dir", required=True, help="input WAV directory")
    p.add_argument("--prob", type=float, default=0.3, help="augmentation probability")
    p.add_argument("--speed-factors", default="0.9,1.0,1.1")
    p.add_argument("--snr-range", default="5:20", help="noise SNR range in dB, LO:HI")
    p.add_argument("--t60-range", default="0.1:0.5", help="reverb T60 range in seconds, LO:HI")
    p.add_argument("--rir-seconds", type=float, default=0.25, help="impulse-response length")
    p.add_argument("--noise-dir", help="directory of noise WAVs (default: white noise)")
    shared(p)
    p.set_defaults(func=cmd_augment)

    p = sub.add_parser("train", help="train a model from a manifest")
    shared(p, need_out=False)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a manifest")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--classes", help="class table (default: classes.txt beside the manifest)")
    shared(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ensemble", help="hard-vote an odd number (>=3) of checkpoints")
    p.add_argument("--checkpoints", nargs="+", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--classes", help="class table (default: classes.txt beside the manifest)")
    shared(p)
    p.set_defaults(func=cmd_ensemble)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (EmofuseError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
