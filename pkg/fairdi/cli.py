"""
Command-line surface: generate, train, evaluate, stats and report.

Settings layer as defaults < --config JSON < flags, and the effective
configuration is echoed as config.json into every output directory.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Any, Callable, Mapping, Sequence

from fairdi import context
from fairdi.datagen import GenSpec, generate, load_dataset, oracle, save_dataset, save_spec
from fairdi.errors import FairDiError, ErrorCode, get_exit_status
from fairdi.metrics import (
    ClassificationPredictions,
    MetricsReport,
    load_predictions,
    load_segmentation,
    pareto_front,
    report,
    report_table,
    roc_points,
    save_predictions,
)
from fairdi.nnkernel import Checkpoint, Head, load_checkpoint, save_checkpoint
from fairdi.pipeline import (
    ExperimentRecord,
    StageResult,
    TrainPlan,
    plans_from_settings,
    predict,
    run_fairdi,
    split,
    train_erm,
    train_stage0,
)
from fairdi.results import ResultColumn, ResultSet
from fairdi.settings import (
    EVAL_SETTINGS,
    GEN_SETTINGS,
    TRAIN_SETTINGS,
    SchemaSettings,
    default_output_root,
    layered,
)
from fairdi.stats import RankTable, cd_diagram_data
from fairdi.types import ColumnType, Method, Stage, Task, parse_enum
from fairdi.version import __version__

logger = logging.getLogger(__name__)

LOG_FORMAT = "%(asctime)s %(levelname)s [%(stage)s] %(name)s: %(message)s"
RUN_MANIFEST = "run.json"
TIMINGS_FILE = "timings.json"
SPLITS = ("train", "val", "test", "all")


class StageFilter(logging.Filter):
    """Stamps each record with the training stage running in its context"""

    def filter(self, record: logging.LogRecord) -> bool:
        record.stage = context.stage.get()
        return True


def configure_logging(level: str) -> None:
    logging.basicConfig(level=level.upper(), format=LOG_FORMAT)
    for handler in logging.getLogger().handlers:
        if not any(isinstance(f, StageFilter) for f in handler.filters):
            handler.addFilter(StageFilter())


def write_json(path: Path, data: Any) -> None:
    try:
        path.write_text(json.dumps(data, indent=2, sort_keys=True) + "\n")
    except OSError as e:
        raise FairDiError(f"Cannot write {path}: {e}", code=ErrorCode.IO_ERROR) from e


def read_json(path: Path) -> Any:
    try:
        return json.loads(path.read_text())
    except OSError as e:
        raise FairDiError(f"Cannot read {path}: {e}", code=ErrorCode.IO_ERROR) from e
    except json.JSONDecodeError as e:
        raise FairDiError(f"{path} is not valid JSON: {e}", code=ErrorCode.PARSE_ERROR) from e


def _output_dir(settings: SchemaSettings, args: argparse.Namespace, command: str) -> Path:
    out = args.out or settings.commands.get("out")
    path = Path(out) if out else default_output_root() / command
    try:
        path.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise FairDiError(f"Cannot create {path}: {e}", code=ErrorCode.IO_ERROR) from e
    return path


def _existing(path: str | Path | None, what: str) -> Path:
    if path is None:
        raise FairDiError(f"No {what} given", code=ErrorCode.CONFIGURATION_ERROR)
    path = Path(path)
    if not path.is_file():
        raise FairDiError(f"{what} not found: {path}", code=ErrorCode.IO_ERROR)
    return path


def _settings(
    schema: dict[str, Any], args: argparse.Namespace, extra: Mapping[str, Any] | None = None
) -> SchemaSettings:
    overrides = {name: getattr(args, name, None) for name in schema}
    overrides.update(extra or {})
    return layered(schema, args.config, overrides)


def _echo_config(out: Path, settings: SchemaSettings, **commands: Any) -> None:
    write_json(
        out / "config.json",
        {**settings.to_json(), **{k: v for k, v in commands.items() if v is not None}},
    )


def cmd_generate(args: argparse.Namespace) -> None:
    settings = _settings(GEN_SETTINGS, args)
    spec = GenSpec(**dict(settings.list()))
    out = _output_dir(settings, args, "generate")

    dataset = generate(spec)
    save_dataset(dataset, out / "dataset.csv")
    write_json(out / "oracle.json", oracle(spec))
    save_spec(spec, out / "spec.json")
    _echo_config(out, settings)
    logger.info("Wrote %d samples to %s", len(dataset), out / "dataset.csv")


def _write_stage(
    out: Path,
    name: str,
    result: StageResult,
    checkpoint: Checkpoint,
    test_report: MetricsReport | None,
) -> None:
    stage_dir = out / name
    stage_dir.mkdir(exist_ok=True)
    save_checkpoint(checkpoint, stage_dir / "checkpoint.json")
    write_json(stage_dir / "record.json", result.record.to_json())
    result.record.write_csv(stage_dir / "epochs.csv")
    if test_report is not None:
        write_json(stage_dir / "report.json", test_report.to_json())
        report_table({name: test_report}).write_csv(stage_dir / "report.csv")


def _test_report(result: StageResult, test: Any) -> MetricsReport | None:
    try:
        return report(predict(result.backbone, result.head, test))
    except FairDiError as e:
        if e.code not in (ErrorCode.UNDEFINED_METRIC, ErrorCode.INVALID_INPUT):
            raise
        logger.warning("Test report for %s skipped: %s", result.record.name, e.msg)
        return None


def _stage_meta(result: StageResult, **extra: Any) -> dict[str, Any]:
    return {
        "stage": result.record.stage.value,
        "group": result.record.group,
        "best_epoch": result.record.best_epoch,
        **extra,
    }


def cmd_train(args: argparse.Namespace) -> None:
    settings = _settings(TRAIN_SETTINGS, args)
    dataset_path = _existing(args.dataset or settings.commands.get("dataset"), "Dataset")
    method = parse_enum(Method, args.method or settings.commands.get("method") or "fairdi")
    out = _output_dir(settings, args, "train")

    dataset = load_dataset(dataset_path)
    data = split(dataset, settings["ratios"], settings["seed"])
    seed = settings["seed"]

    manifest: dict[str, Any] = {
        "method": method.value,
        "version": __version__,
        "groups": dataset.groups,
    }
    if method in (Method.ERM, Method.FIS):
        name, trainer, stage = (
            ("erm", train_erm, Stage.ERM)
            if method is Method.ERM
            else ("step0", train_stage0, Stage.STEP0_FIS)
        )
        result = trainer(data, TrainPlan.for_stage(stage, settings))
        _write_stage(
            out,
            name,
            result,
            Checkpoint(result.backbone, {name: result.head}, seed, _stage_meta(result)),
            _test_report(result, data.test),
        )
        manifest.update(stages=[name], reports=[name])
        timings: dict[str, Any] = {name: result.record.wall_time}
    else:
        fairdi = run_fairdi(data, plans_from_settings(settings), workers=settings["workers"])
        backbone_ref = "../step0/checkpoint.json"

        step0 = StageResult(fairdi.backbone, fairdi.stage0_head, fairdi.records["step0"])
        _write_stage(
            out,
            "step0",
            step0,
            Checkpoint(fairdi.backbone, {"step0": fairdi.stage0_head}, seed, _stage_meta(step0)),
            _test_report(step0, data.test),
        )
        for g, head in fairdi.teachers.items():
            name = f"teacher_{g}"
            teacher = StageResult(fairdi.backbone, head, fairdi.records[name])
            _write_stage(
                out,
                name,
                teacher,
                Checkpoint(None, {name: head}, seed, _stage_meta(teacher, backbone=backbone_ref)),
                None,
            )
        student = StageResult(fairdi.backbone, fairdi.student, fairdi.records["student"])
        _write_stage(
            out,
            "student",
            student,
            Checkpoint(
                None, {"student": fairdi.student}, seed, _stage_meta(student, backbone=backbone_ref)
            ),
            _test_report(student, data.test),
        )
        manifest.update(
            stages=list(fairdi.records),
            reports=["step0", "student"],
        )
        timings = fairdi.timings.to_json()

    write_json(out / RUN_MANIFEST, manifest)
    write_json(out / TIMINGS_FILE, timings)
    _echo_config(out, settings, dataset=str(dataset_path), method=method.value)
    logger.info("Training artifacts written to %s", out)


def _pick_head(checkpoint: Checkpoint, name: str | None, path: Path) -> Head:
    if name is not None:
        if name not in checkpoint.heads:
            raise FairDiError(
                f"{path} has no head {name!r}; heads: {sorted(checkpoint.heads)}",
                code=ErrorCode.CONFIGURATION_ERROR,
            )
        return checkpoint.heads[name]
    if len(checkpoint.heads) != 1:
        raise FairDiError(
            f"{path} holds heads {sorted(checkpoint.heads)}; choose one with --head",
            code=ErrorCode.CONFIGURATION_ERROR,
        )
    return next(iter(checkpoint.heads.values()))


def _checkpoint_predictions(
    args: argparse.Namespace, settings: SchemaSettings
) -> ClassificationPredictions:
    checkpoint_path = _existing(args.checkpoint, "Checkpoint")
    dataset_path = _existing(args.dataset or settings.commands.get("dataset"), "Dataset")
    checkpoint = load_checkpoint(checkpoint_path)
    backbone = checkpoint.backbone
    if backbone is None:
        ref = args.backbone or checkpoint.meta.get("backbone")
        if ref is None:
            raise FairDiError(
                f"{checkpoint_path} holds no backbone; pass --backbone",
                code=ErrorCode.CONFIGURATION_ERROR,
            )
        ref_path = Path(ref) if args.backbone else checkpoint_path.parent / ref
        backbone = load_checkpoint(_existing(ref_path, "Backbone checkpoint")).backbone
        if backbone is None:
            raise FairDiError(f"{ref_path} holds no backbone", code=ErrorCode.CONFIGURATION_ERROR)
    head = _pick_head(checkpoint, args.head, checkpoint_path)

    dataset = load_dataset(dataset_path)
    which = settings["split"]
    if which not in SPLITS:
        raise FairDiError(
            f"Unknown split {which!r}; expected one of {SPLITS}",
            code=ErrorCode.CONFIGURATION_ERROR,
        )
    if which != "all":
        dataset = getattr(split(dataset, settings["ratios"], settings["seed"]), which)
    return predict(backbone, head, dataset)


def cmd_evaluate(args: argparse.Namespace) -> None:
    settings = _settings(EVAL_SETTINGS, args)
    sources = [s for s in (args.checkpoint, args.predictions, args.segmentation) if s]
    if len(sources) != 1:
        raise FairDiError(
            "Give exactly one of --checkpoint, --predictions or --segmentation",
            code=ErrorCode.CONFIGURATION_ERROR,
        )
    task = parse_enum(Task, "segmentation" if args.segmentation else settings["task"])
    out = _output_dir(settings, args, "evaluate")

    if args.segmentation:
        preds: Any = load_segmentation(_existing(args.segmentation, "Segmentation index"))
    elif args.predictions:
        preds = load_predictions(_existing(args.predictions, "Predictions"))
    else:
        preds = _checkpoint_predictions(args, settings)
        save_predictions(preds, out / "predictions.csv")

    try:
        result = report(preds, task)
    except FairDiError as e:
        if e.code is not ErrorCode.UNDEFINED_METRIC:
            raise
        logger.warning("Metric undefined: %s", e.msg)
        write_json(out / "report.json", {"status": "undefined", "reason": e.msg})
    else:
        write_json(out / "report.json", result.to_json())
        report_table({"evaluation": result}).write_csv(out / "report.csv")
        if isinstance(preds, ClassificationPredictions):
            roc_points(preds).to_csv(out / "roc_points.csv", index=False, float_format="%.17g")
        logger.info(
            "%s overall=%.4f worst=%.4f es=%.4f gap=%.4f",
            result.metric,
            result.overall,
            result.worst_case,
            result.equity_scaled,
            result.gap,
        )
    _echo_config(
        out,
        settings,
        checkpoint=args.checkpoint,
        predictions=args.predictions,
        segmentation=args.segmentation,
        dataset=args.dataset,
    )


def cmd_stats(args: argparse.Namespace) -> None:
    extra = {"higher_is_better": False} if args.lower_is_better else {}
    settings = _settings(EVAL_SETTINGS, args, extra)
    scores = _existing(args.scores, "Scores CSV")
    out = _output_dir(settings, args, "stats")

    table = RankTable.from_csv(scores, higher_is_better=settings["higher_is_better"])
    data = cd_diagram_data(table, settings["alpha"])
    write_json(out / "stats.json", data)
    table.ranks_frame().to_csv(out / "ranks.csv", index_label="task")
    _echo_config(out, settings, scores=str(scores))
    if data["gate_passed"]:
        logger.info(
            "Friedman chi2=%.4f p=%.4g; CD=%.4f; cliques: %s",
            data["chi2"],
            data["p_value"],
            data["cd"],
            data["cliques"],
        )
    else:
        logger.info("Friedman gate failed (p=%.4g); no post-hoc comparison", data["p_value"])


RUNTIME_COLUMNS = [
    ResultColumn("run", ColumnType.STRING),
    ResultColumn("stage", ColumnType.STRING),
    ResultColumn("seconds", ColumnType.FLOAT),
]


def _runtime_rows(run: str, timings: Mapping[str, Any]) -> list[list[Any]]:
    rows = []
    for name, value in timings.items():
        if isinstance(value, Mapping):
            rows.extend([run, f"teacher_{g}", t] for g, t in value.items())
        else:
            rows.append([run, name, value])
    return rows


def _run_dirs(root: Path) -> list[Path]:
    if (root / RUN_MANIFEST).is_file():
        return [root]
    return sorted(p for p in root.iterdir() if (p / RUN_MANIFEST).is_file())


def cmd_report(args: argparse.Namespace) -> None:
    root = Path(args.experiment)
    if not root.is_dir():
        raise FairDiError(f"No such experiment directory: {root}", code=ErrorCode.IO_ERROR)
    runs = _run_dirs(root)
    if not runs:
        raise FairDiError(
            f"{root} holds no runs; expected {RUN_MANIFEST}, {TIMINGS_FILE} and "
            "<stage>/record.json, <stage>/report.json from `fairdi train`",
            code=ErrorCode.IO_ERROR,
        )
    out = Path(args.out) if args.out else root

    missing: list[str] = []
    reports: dict[str, MetricsReport] = {}
    by_method: dict[str, dict[str, MetricsReport]] = {}
    summary: dict[str, Any] = {"runs": {}, "missing": missing}
    runtime_rows: list[list[Any]] = []
    for run_dir in runs:
        run = run_dir.name if run_dir != root else root.name
        manifest = read_json(run_dir / RUN_MANIFEST)
        entry: dict[str, Any] = {"method": manifest.get("method"), "reports": {}, "records": {}}
        for stage in manifest.get("stages", []):
            path = run_dir / stage / "record.json"
            if path.is_file():
                record = ExperimentRecord.from_json(read_json(path))
                entry["records"][stage] = {
                    "best_epoch": record.best_epoch,
                    "epochs": len(record.epochs),
                    "stopped_early": record.stopped_early,
                }
            else:
                missing.append(str(path))
        for stage in manifest.get("reports", []):
            path = run_dir / stage / "report.json"
            if path.is_file():
                data = read_json(path)
                entry["reports"][stage] = data
                label = f"{run}/{stage}"
                reports[label] = MetricsReport.from_json(data)
                by_method.setdefault(entry["method"] or "unknown", {})[label] = reports[label]
            else:
                missing.append(str(path))
        timings_path = run_dir / TIMINGS_FILE
        if timings_path.is_file():
            entry["timings"] = read_json(timings_path)
            runtime_rows.extend(_runtime_rows(run, entry["timings"]))
        else:
            missing.append(str(timings_path))
        summary["runs"][run] = entry

    points = {label: (r.overall, r.gap) for label, r in reports.items()}
    front = set(pareto_front(points))
    pareto = ResultSet(
        rows=[[label, o, g, label in front] for label, (o, g) in points.items()],
        columns=[
            ResultColumn("model", ColumnType.STRING),
            ResultColumn("overall", ColumnType.FLOAT),
            ResultColumn("gap", ColumnType.FLOAT),
            ResultColumn("pareto", ColumnType.BOOL),
        ],
    )
    summary["pareto_front"] = sorted(front)

    sections = [f"# Experiment summary: {root.name}", ""]
    tables = {method: report_table(r) for method, r in sorted(by_method.items())}
    for method, table in tables.items():
        sections += [f"## Test metrics: {method}", "", table.to_markdown(), ""]
    if reports:
        sections += ["## Accuracy/fairness trade-off", "", pareto.to_markdown(), ""]
    if runtime_rows:
        runtimes = ResultSet(rows=runtime_rows, columns=RUNTIME_COLUMNS)
        sections += ["## Runtime per stage", "", runtimes.to_markdown(), ""]
    if missing:
        sections += ["## Missing files", "", *(f"- {m}" for m in missing), ""]

    out.mkdir(parents=True, exist_ok=True)
    try:
        (out / "summary.md").write_text("\n".join(sections))
    except OSError as e:
        raise FairDiError(f"Cannot write summary: {e}", code=ErrorCode.IO_ERROR) from e
    write_json(out / "summary.json", summary)
    pareto.write_csv(out / "pareto.csv")
    for method, table in tables.items():
        table.write_csv(out / f"metrics_{method}.csv")
    if missing:
        raise FairDiError(
            f"Partial report; missing: {', '.join(missing)}", code=ErrorCode.IO_ERROR
        )


def _add_common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", help="JSON file of settings; flags override it")
    parser.add_argument("--out", help="output directory")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="fairdi", description="Fair distillation training and fairness evaluation"
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("--log-level", default="INFO", help="logging level")
    commands = parser.add_subparsers(dest="command", required=True)

    gen = commands.add_parser("generate", help="write a synthetic biased dataset")
    _add_common(gen)
    gen.add_argument("--n-samples", dest="n_samples", type=int)
    gen.add_argument("--n-features", dest="n_features", type=int)
    gen.add_argument("--n-groups", dest="n_groups", type=int)
    gen.add_argument("--proportions", dest="group_proportions")
    gen.add_argument("--separation", dest="base_separation", type=float)
    gen.add_argument("--bias", dest="bias_strength", type=float)
    gen.add_argument("--noise", dest="label_noise", type=float)
    gen.add_argument("--shift", dest="group_shift", type=float)
    gen.add_argument("--overlap", dest="signal_overlap", type=float)
    gen.add_argument("--image", action="store_true", default=None)
    gen.add_argument("--seed", type=int)
    gen.set_defaults(handler=cmd_generate)

    train = commands.add_parser("train", help="train ERM, FIS or the FairDi pipeline")
    _add_common(train)
    train.add_argument("--dataset")
    train.add_argument("--method", choices=[m.value for m in Method])
    train.add_argument("--seed", type=int)
    train.add_argument("--ratios")
    train.add_argument("--hidden")
    train.add_argument("--max-epochs", dest="max_epochs", type=int)
    train.add_argument("--head-max-epochs", dest="head_max_epochs", type=int)
    train.add_argument("--patience", type=int)
    train.add_argument("--batch-size", dest="batch_size", type=int)
    train.add_argument("--backbone-lr", dest="backbone_lr", type=float)
    train.add_argument("--head-lr", dest="head_lr", type=float)
    train.add_argument("--c", type=float)
    train.add_argument("--lam", type=float)
    train.add_argument("--tau", type=float)
    train.add_argument("--kl-direction", dest="kl_direction")
    train.add_argument("--temp-on-student", dest="temp_on_student", action="store_true", default=None)
    train.add_argument("--no-cutmix", dest="cutmix", action="store_false", default=None)
    train.add_argument("--workers", type=int)
    train.set_defaults(handler=cmd_train)

    evaluate = commands.add_parser("evaluate", help="fairness metrics for a model or predictions")
    _add_common(evaluate)
    evaluate.add_argument("--checkpoint")
    evaluate.add_argument("--backbone", help="backbone checkpoint for head-only files")
    evaluate.add_argument("--head", help="head name inside the checkpoint")
    evaluate.add_argument("--dataset")
    evaluate.add_argument("--predictions", help="CSV of id, score, label, attribute")
    evaluate.add_argument("--segmentation", help="index CSV of id, pred_path, truth_path, attribute")
    evaluate.add_argument("--task", choices=[t.value for t in Task])
    evaluate.add_argument("--split", choices=SPLITS)
    evaluate.add_argument("--seed", type=int)
    evaluate.add_argument("--ratios")
    evaluate.set_defaults(handler=cmd_evaluate)

    stats = commands.add_parser("stats", help="Friedman, Nemenyi and CD-diagram data")
    _add_common(stats)
    stats.add_argument("scores", help="CSV with tasks as rows and algorithms as columns")
    stats.add_argument("--alpha", type=float)
    stats.add_argument("--lower-is-better", dest="lower_is_better", action="store_true")
    stats.set_defaults(handler=cmd_stats)

    summary = commands.add_parser("report", help="summarise a training run directory")
    summary.add_argument("experiment")
    summary.add_argument("--out", help="output directory, the experiment directory by default")
    summary.set_defaults(handler=cmd_report)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    configure_logging(args.log_level)
    handler: Callable[[argparse.Namespace], None] = args.handler
    try:
        handler(args)
    except FairDiError as e:
        logger.error("%s", e)
        return get_exit_status(e.code)
    except Exception:  # pylint: disable=broad-except
        logger.exception("Unexpected failure")
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
