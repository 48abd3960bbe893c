"""Command-line entry point: ``python -m sclair <command>``.

Exit codes: 0 success, 1 usage or bad input, 2 runtime failure, 3 failed check.
"""

from __future__ import annotations

import argparse
import json
import sys
import time
import warnings
from pathlib import Path
from typing import Any, Dict, Optional, Sequence

from pydantic import BaseModel

from . import __version__, models, settings
from .checkpoint import load_checkpoint, save_checkpoint
from .errors import SclairError
from .recordings import load_manifest
from .schemas import ARCH_ALIASES, EncoderArch, EvalReport, PreprocessConfig, TrainConfig, TrainReport
from .services import evaluation_service, gradcheck_service, loso_service, training_service, transfer_service
from .synth import PROFILES, synth_generate

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_RUNTIME = 2
EXIT_CHECK = 3


class CliParser(argparse.ArgumentParser):

    def error(self, message: str):  # type: ignore[override]
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _add_arch_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--arch", choices=sorted(ARCH_ALIASES), default="1dcnn", help="Encoder architecture")
    parser.add_argument("--filters", type=int, nargs=2, metavar=("N1", "N2"), help="Convolution filter counts")
    parser.add_argument("--kernel", type=int, help="Convolution kernel length")
    parser.add_argument("--lstm-units", type=int, help="Units per LSTM direction")
    parser.add_argument("--pool-size", type=int, help="Max-pool window")
    parser.add_argument("--conv-pattern", help="Layer pattern of the 1dcnn stack (a=N1 conv, b=N2 conv, p=pool)")


def _add_training_flags(parser: argparse.ArgumentParser, with_loss: bool = True) -> None:
    if with_loss:
        parser.add_argument("--loss", choices=["scl", "ce"], default="scl", help="Training objective")
        parser.add_argument("--tau", type=float, default=0.1, help="SupCon temperature")
        parser.add_argument("--proj-dim", type=int, default=128, help="Projection head width")
    parser.add_argument("--lr", type=float, default=1e-3, help="Adam learning rate")
    parser.add_argument("--batch-size", type=int, default=32)
    parser.add_argument("--max-epochs", type=int, default=100)
    parser.add_argument("--patience", type=int, default=5)
    parser.add_argument("--val-ratio", type=float, default=0.2)
    parser.add_argument("--seed", type=int, default=None, help="Defaults to $SCLAIR_SEED")
    parser.add_argument("--balanced-batches", action="store_true", help="Interleave classes within batches")
    parser.add_argument("--zscore-before-pad", action="store_true", help="Normalize before zero-padding")
    parser.add_argument("--no-restore-best", action="store_true", help="Keep last-epoch weights after early stopping")
    parser.add_argument("--no-normalize-r", action="store_true", help="Feed the classifier unnormalized r")
    parser.add_argument("--no-normalize-z", action="store_true", help="Skip L2 normalization of the projection")


def _add_run_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--jobs", type=int, default=None, help="Folds run in parallel (defaults to $SCLAIR_JOBS)")
    parser.add_argument("--confusions", type=int, default=5, help="Number of confusing pairs to list")
    parser.add_argument("--confusion-csv", type=Path, help="Confusion matrix CSV (defaults next to the report)")
    parser.add_argument("--no-timing", action="store_true", help="Write wall_clock_s as 0 for byte-stable reports")
    parser.add_argument("--quiet", action="store_true", help="Suppress progress lines")
    parser.add_argument(
        "--backend",
        choices=("loky", "threading"),
        default=settings.PARALLEL_BACKEND,
        help="Fold worker pool: processes (loky) or threads",
    )


def build_parser() -> argparse.ArgumentParser:
    parser = CliParser(prog="sclair", description="Supervised contrastive airwriting recognition")
    parser.add_argument("--version", action="version", version=f"sclair {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    synth = sub.add_parser("synth", help="Generate a synthetic airwriting dataset")
    synth.add_argument("--subjects", type=int, default=10)
    synth.add_argument("--reps", type=int, default=5)
    synth.add_argument("--rate", type=float, default=62.0, help="Sampling rate in Hz")
    synth.add_argument("--seed", type=int, default=None)
    synth.add_argument("--profile", choices=sorted(PROFILES), default="source", help="Simulated device")
    synth.add_argument(
        "--same-users", action="store_true", help="Reuse the source subject ids and writing style on this device"
    )
    synth.add_argument("--out", type=Path, required=True)

    train = sub.add_parser("train", help="Train one model on an 80:20 split of a manifest")
    train.add_argument("--manifest", type=Path, required=True)
    _add_arch_flags(train)
    _add_training_flags(train)
    train.add_argument("--out", type=Path, default=Path("model.sclr"), help="Inference checkpoint")
    train.add_argument("--stage1-out", type=Path, help="Also save the stage-1 bundle (scl only)")
    train.add_argument("--report", type=Path, help="Training report JSON")
    train.add_argument("--no-timing", action="store_true")
    train.add_argument("--quiet", action="store_true")

    loso = sub.add_parser("loso", help="Leave-one-subject-out evaluation")
    loso.add_argument("--manifest", type=Path, required=True)
    _add_arch_flags(loso)
    _add_training_flags(loso)
    _add_run_flags(loso)
    loso.add_argument("--report", type=Path, required=True)

    finetune = sub.add_parser("finetune", help="Zero-shot and fine-tuned evaluation on a target dataset")
    finetune.add_argument("--model", type=Path, required=True)
    finetune.add_argument("--manifest", type=Path, required=True)
    finetune.add_argument("--arch", choices=sorted(ARCH_ALIASES), default=None, help="Must match the model if given")
    _add_training_flags(finetune, with_loss=False)
    _add_run_flags(finetune)
    finetune.add_argument("--warm-start-head", action="store_true", help="Start from the source classifier head")
    finetune.add_argument("--report", type=Path, required=True)

    evaluate = sub.add_parser("eval", help="Evaluate a checkpoint on a manifest")
    evaluate.add_argument("--model", type=Path, required=True)
    evaluate.add_argument("--manifest", type=Path, required=True)
    evaluate.add_argument("--report", type=Path)
    evaluate.add_argument("--confusions", type=int, default=5)
    evaluate.add_argument("--confusion-csv", type=Path)
    evaluate.add_argument("--embeddings", type=Path, help="Write r (and z for stage-1 models) per sample")
    evaluate.add_argument("--zscore-before-pad", action="store_true")
    evaluate.add_argument("--no-timing", action="store_true")

    check = sub.add_parser("gradcheck", help="Run the 64-bit gradient checks")
    check.add_argument("--arch", choices=sorted(ARCH_ALIASES), default=None, help="Also check a small encoder")
    check.add_argument("--seed", type=int, default=None)
    check.add_argument("--tolerance", type=float, default=1e-5)
    check.add_argument("--report", type=Path)

    report = sub.add_parser("report", help="Print a saved evaluation report")
    report.add_argument("path", type=Path)
    report.add_argument("--confusions", type=int, default=None)
    report.add_argument("--confusion-csv", type=Path, help="Rewrite the confusion matrix as CSV")
    return parser


def _seed(args: argparse.Namespace) -> int:
    return settings.DEFAULT_SEED if args.seed is None else args.seed


def _jobs(args: argparse.Namespace) -> int:
    jobs = settings.DEFAULT_JOBS if args.jobs is None else args.jobs
    if jobs < 1:
        raise ValueError(f"--jobs must be at least 1, got {jobs}")
    return jobs


def _arch(args: argparse.Namespace) -> EncoderArch:
    overrides: Dict[str, Any] = {}
    if getattr(args, "filters", None):
        overrides["n1"], overrides["n2"] = args.filters
    for flag, field_name in (
        ("kernel", "kernel"),
        ("lstm_units", "lstm_units"),
        ("pool_size", "pool_size"),
        ("conv_pattern", "conv_pattern"),
    ):
        value = getattr(args, flag, None)
        if value is not None:
            overrides[field_name] = value
    return EncoderArch.from_flag(args.arch, **overrides)


def _train_config(args: argparse.Namespace, arch: EncoderArch, **extra: Any) -> TrainConfig:
    fields: Dict[str, Any] = dict(
        arch=arch,
        learning_rate=args.lr,
        batch_size=args.batch_size,
        max_epochs=args.max_epochs,
        patience=args.patience,
        val_ratio=args.val_ratio,
        seed=_seed(args),
        restore_best=not args.no_restore_best,
        normalize_r=not args.no_normalize_r,
        normalize_z=not args.no_normalize_z,
        balanced_batches=args.balanced_batches,
        preprocess=PreprocessConfig(zscore_before_pad=args.zscore_before_pad),
    )
    if hasattr(args, "loss"):
        fields.update(loss_mode=args.loss, tau=args.tau, proj_dim=args.proj_dim)
    fields.update(extra)
    return TrainConfig(**fields)


def _write_json(path: Path, model: BaseModel | Dict[str, Any]) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    if isinstance(model, BaseModel):
        text = model.model_dump_json(indent=2)
    else:
        text = json.dumps(model, indent=2)
    path.write_text(text + "\n", encoding="utf-8")


def _strip_timing(report: EvalReport) -> EvalReport:
    report.wall_clock_s = 0.0
    return report


def _confusion_path(args: argparse.Namespace, report_path: Optional[Path]) -> Optional[Path]:
    if args.confusion_csv is not None:
        return args.confusion_csv
    if report_path is not None:
        return report_path.with_suffix(".confusion.csv")
    return None


def cmd_synth(args: argparse.Namespace) -> int:
    manifest = synth_generate(
        n_subjects=args.subjects,
        n_reps=args.reps,
        rate_hz=args.rate,
        seed=_seed(args),
        out_dir=args.out,
        profile=args.profile,
        same_users=args.same_users,
    )
    print(args.out / "manifest.json")
    print(f"[synth] {len(manifest.samples)} recordings, {len(manifest.subjects)} subjects")
    return EXIT_OK


def cmd_train(args: argparse.Namespace) -> int:
    config = _train_config(args, _arch(args))
    verbose = not args.quiet
    manifest = load_manifest(args.manifest)
    started = time.perf_counter()
    samples = loso_service.load_samples(manifest, config)
    data = training_service.split_training_data(samples, config)

    histories = []
    if config.loss_mode == "scl":
        stage1_bundle, history1 = training_service.train_stage1(data, config, verbose)
        histories.append(history1)
        stage1_count = models.param_count(stage1_bundle, "stage1")
        proj_params = models.projection_param_count(stage1_bundle)
        if args.stage1_out:
            save_checkpoint(stage1_bundle, args.stage1_out)
            print(f"[train] stage-1 checkpoint: {args.stage1_out}")
        bundle, history2 = training_service.train_stage2(stage1_bundle, data, config, verbose)
        histories.append(history2)
    else:
        if args.stage1_out:
            warnings.warn("--stage1-out ignored: ce training has no stage 1", stacklevel=1)
        bundle, history = training_service.train_ce(data, config, verbose)
        histories.append(history)
        stage1_count = models.param_count(bundle, "inference")
        proj_params = 0

    bundle.provenance["dataset_name"] = manifest.dataset_name
    save_checkpoint(bundle, args.out)
    last = histories[-1]
    best = next((record for record in last.epochs if record.epoch == last.best_epoch), None)
    report = TrainReport(
        version=__version__,
        config=config.model_dump(mode="json"),
        dataset_name=manifest.dataset_name,
        train_samples=data.train_count,
        val_samples=data.val_count,
        histories=histories,
        param_count_inference=models.param_count(bundle, "inference"),
        param_count_stage1=stage1_count,
        proj_params=proj_params,
        encoder_sha256=models.encoder_sha256(bundle),
        val_accuracy=best.val_accuracy if best else None,
        wall_clock_s=0.0 if args.no_timing else time.perf_counter() - started,
    )
    if args.report:
        _write_json(args.report, report)
    print(f"[train] checkpoint: {args.out}")
    if report.val_accuracy is not None:
        print(f"[train] validation accuracy: {report.val_accuracy:.4f}")
    return EXIT_OK


def _write_eval_outputs(args: argparse.Namespace, report: EvalReport, report_path: Optional[Path]) -> None:
    csv_path = _confusion_path(args, report_path)
    if csv_path is not None:
        evaluation_service.write_confusion_csv(report.confusion, csv_path)


def cmd_loso(args: argparse.Namespace) -> int:
    config = _train_config(args, _arch(args))
    manifest = load_manifest(args.manifest)
    report = loso_service.loso_run(
        manifest, config, jobs=_jobs(args), verbose=not args.quiet, k=args.confusions, backend=args.backend
    )
    if args.no_timing:
        _strip_timing(report)
    _write_json(args.report, report)
    _write_eval_outputs(args, report, args.report)
    print(evaluation_service.render_report(report))
    return EXIT_OK


def cmd_finetune(args: argparse.Namespace) -> int:
    pretrained = load_checkpoint(args.model)
    arch = EncoderArch.from_flag(args.arch) if args.arch else pretrained.arch
    config = _train_config(
        args,
        arch,
        warm_start_head=args.warm_start_head,
        normalize_r=pretrained.normalize_r,
        dropout_rate=pretrained.dropout_rate,
    )
    manifest = load_manifest(args.manifest)
    report = transfer_service.transfer_run(
        pretrained,
        manifest,
        config,
        jobs=_jobs(args),
        verbose=not args.quiet,
        source_model=str(args.model),
        k=args.confusions,
        backend=args.backend,
    )
    if args.no_timing:
        if report.zero_shot is not None:
            _strip_timing(report.zero_shot)
        _strip_timing(report.finetuned)
    _write_json(args.report, report)
    csv_path = _confusion_path(args, args.report)
    if csv_path is not None:
        evaluation_service.write_confusion_csv(report.finetuned.confusion, csv_path)
    if report.zero_shot is not None:
        print(f"[finetune] zero-shot mean accuracy: {report.zero_shot.mean_accuracy:.4f}")
    print(f"[finetune] setting: {report.setting} ({len(report.shared_subjects)} shared subjects)")
    print(f"[finetune] fine-tuned mean accuracy: {report.finetuned.mean_accuracy:.4f}")
    return EXIT_OK


def cmd_eval(args: argparse.Namespace) -> int:
    bundle = load_checkpoint(args.model)
    manifest = load_manifest(args.manifest)
    preprocess = PreprocessConfig(zscore_before_pad=args.zscore_before_pad)
    config = TrainConfig(arch=bundle.arch, normalize_r=bundle.normalize_r, preprocess=preprocess)
    samples = loso_service.load_samples(manifest, config)
    if args.embeddings:
        rows = evaluation_service.export_embeddings(bundle, samples, args.embeddings)
        print(f"[eval] wrote {rows} embeddings to {args.embeddings}")
    if bundle.form == "stage1":
        if args.embeddings:
            warnings.warn("stage-1 model: classification skipped, only embeddings were exported", stacklevel=1)
            return EXIT_OK
        raise SclairError(f"{args.model} is a stage-1 model; classify with the inference checkpoint")
    echo = {
        "model": str(args.model),
        "manifest": str(args.manifest),
        "arch": bundle.arch.model_dump(),
        "preprocess": preprocess.model_dump(),
        "provenance": bundle.provenance,
    }
    report = evaluation_service.evaluate(bundle, samples, config=echo, k=args.confusions)
    if args.no_timing:
        _strip_timing(report)
    if args.report:
        _write_json(args.report, report)
    _write_eval_outputs(args, report, args.report)
    print(evaluation_service.render_report(report))
    return EXIT_OK


def cmd_gradcheck(args: argparse.Namespace) -> int:
    arch = ARCH_ALIASES[args.arch] if args.arch else None
    report = gradcheck_service.run_suite(arch=arch, seed=_seed(args), tolerance=args.tolerance)
    for check in report.checks:
        status = "ok" if check.passed else "FAIL"
        print(f"[gradcheck] {check.component:<32} max_rel_err={check.max_rel_error:.3e} {status}")
    if args.report:
        _write_json(args.report, report)
    if not report.passed:
        failed = [check for check in report.checks if not check.passed]
        worst = max(failed, key=lambda check: check.max_rel_error)
        print(
            f"error: gradient check failed for {worst.component} "
            f"(max rel err {worst.max_rel_error:.3e} >= {args.tolerance:g})",
            file=sys.stderr,
        )
        return EXIT_CHECK
    return EXIT_OK


def cmd_report(args: argparse.Namespace) -> int:
    try:
        raw = json.loads(args.path.read_text(encoding="utf-8"))
    except FileNotFoundError as exc:
        raise SclairError(f"report not found: {args.path}") from exc
    except json.JSONDecodeError as exc:
        raise ValueError(f"{args.path}: invalid JSON ({exc})") from exc
    if "zero_shot" in raw and "finetuned" in raw:
        reports = [
            (section, EvalReport.model_validate(raw[section]))
            for section in ("zero_shot", "finetuned")
            if raw[section] is not None
        ]
    else:
        reports = [("", EvalReport.model_validate(raw))]
    for title, report in reports:
        if title:
            print(f"== {title} ==")
        print(evaluation_service.render_report(report, k=args.confusions))
    if args.confusion_csv:
        evaluation_service.write_confusion_csv(reports[-1][1].confusion, args.confusion_csv)
    return EXIT_OK


COMMANDS = {
    "synth": cmd_synth,
    "train": cmd_train,
    "loso": cmd_loso,
    "finetune": cmd_finetune,
    "eval": cmd_eval,
    "gradcheck": cmd_gradcheck,
    "report": cmd_report,
}


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    settings.debug_log("cli", f"command={args.command} args={vars(args)}")
    try:
        return COMMANDS[args.command](args)
    except SclairError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
