"""Command line pipeline: prepare -> split -> train -> infer -> evaluate.

Every command is deterministic given its inputs and flags; rerunning a
command rewrites byte-identical primary outputs.  Logs go to stderr, data to
files or stdout.  Exit codes: 0 success, 1 runtime failure, 2 usage or
config error.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path
from typing import Sequence

from .adapters import AdapterConfig, build_adapters
from .core import Aspect, AspectGenError
from .data import (
    ProductRecord,
    SynonymMap,
    ZeroShotSplit,
    collect_attribute_vocabulary,
    load_corpus,
    merge_equivalent_aspects,
    sample_zero_shot_split,
    validate_split,
    write_corpus,
)
from .evaluation import (
    MetricsReport,
    compute_report,
    render_table,
    report_by_group,
    report_json,
)
from .inference import (
    AspectTraceEntry,
    InferenceConfig,
    ProductInference,
    infer_batch,
)
from .training import (
    DecoderCheckpoint,
    GreedyGenerator,
    TrainConfig,
    train_decoder,
    write_training_log,
)

log = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_RUNTIME = 1
EXIT_USAGE = 2


class UsageError(Exception):
    """Bad flags or configuration; maps to exit code 2."""


@dataclasses.dataclass
class PipelineConfig:
    """Resolved configuration for one pipeline run.

    Paths are resolved against the config file's directory so runs behave
    the same from any working directory.
    """

    corpus: Path | None = None
    synonym_map: Path | None = None
    output_dir: Path = Path("out")
    unseen_fraction: float = 0.2
    seed: int = 0
    adapters: AdapterConfig = dataclasses.field(default_factory=AdapterConfig)
    train: TrainConfig = dataclasses.field(default_factory=TrainConfig)
    tau_d: float = 0.95
    tau_c: float = 0.5

    # Derived file locations.
    @property
    def normalized_corpus(self) -> Path:
        return self.output_dir / "corpus.normalized.jsonl"

    @property
    def split_file(self) -> Path:
        return self.output_dir / "split.json"

    @property
    def checkpoint_file(self) -> Path:
        return self.output_dir / "model.ckpt"

    @property
    def train_log(self) -> Path:
        return self.output_dir / "train_log.jsonl"

    def predictions_file(self, partition: str, corrected: bool = True) -> Path:
        suffix = "" if corrected else ".uncorrected"
        return self.output_dir / f"predictions.{partition}{suffix}.jsonl"

    def report_file(self, partition: str) -> Path:
        return self.output_dir / f"report.{partition}.json"


def _build_section(cls, data: dict, section: str):
    field_names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(data) - field_names
    if unknown:
        raise UsageError(f"unknown keys in config section {section!r}: {sorted(unknown)}")
    if cls is AdapterConfig and "command" in data:
        data = {**data, "command": tuple(data["command"])}
    try:
        return cls(**data)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"bad config section {section!r}: {exc}") from exc


def load_config(path: str | Path | None) -> PipelineConfig:
    if path is None:
        return PipelineConfig()
    config_path = Path(path)
    if not config_path.is_file():
        raise UsageError(f"config file not found: {config_path}")
    try:
        data = json.loads(config_path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise UsageError(f"config is not valid JSON: {exc}") from exc
    if not isinstance(data, dict):
        raise UsageError("config must be a JSON object")
    known = {"corpus", "synonym_map", "output_dir", "split", "adapters", "train", "infer"}
    unknown = set(data) - known
    if unknown:
        raise UsageError(f"unknown config keys: {sorted(unknown)}")
    base = config_path.resolve().parent
    config = PipelineConfig()
    if data.get("corpus"):
        config.corpus = (base / data["corpus"]).resolve()
    if data.get("synonym_map"):
        config.synonym_map = (base / data["synonym_map"]).resolve()
    if data.get("output_dir"):
        config.output_dir = (base / data["output_dir"]).resolve()
    else:
        config.output_dir = (base / "out").resolve()
    split = data.get("split") or {}
    if not isinstance(split, dict):
        raise UsageError("config section 'split' must be an object")
    if "unseen_fraction" in split:
        config.unseen_fraction = float(split["unseen_fraction"])
    if "seed" in split:
        config.seed = int(split["seed"])
    config.adapters = _build_section(AdapterConfig, data.get("adapters") or {}, "adapters")
    config.train = _build_section(TrainConfig, data.get("train") or {}, "train")
    infer = data.get("infer") or {}
    if not isinstance(infer, dict):
        raise UsageError("config section 'infer' must be an object")
    unknown = set(infer) - {"tau_d", "tau_c"}
    if unknown:
        raise UsageError(f"unknown keys in config section 'infer': {sorted(unknown)}")
    config.tau_d = float(infer.get("tau_d", config.tau_d))
    config.tau_c = float(infer.get("tau_c", config.tau_c))
    return config


def _apply_overrides(config: PipelineConfig, args: argparse.Namespace) -> None:
    if getattr(args, "corpus", None):
        config.corpus = Path(args.corpus).resolve()
    if getattr(args, "output_dir", None):
        config.output_dir = Path(args.output_dir).resolve()
    if getattr(args, "seed", None) is not None:
        config.seed = args.seed
        config.train = dataclasses.replace(config.train, seed=args.seed)
    if getattr(args, "unseen_fraction", None) is not None:
        config.unseen_fraction = args.unseen_fraction
    if getattr(args, "tau_d", None) is not None:
        config.tau_d = args.tau_d
    if getattr(args, "tau_c", None) is not None:
        config.tau_c = args.tau_c
    if not 0.0 < config.unseen_fraction < 1.0:
        raise UsageError("--unseen-fraction must lie strictly between 0 and 1")
    if not 0.0 <= config.tau_d <= 1.0 or not 0.0 <= config.tau_c <= 1.0:
        raise UsageError("--tau-d and --tau-c must lie in [0, 1]")


def _load_records(path: Path, what: str) -> tuple[ProductRecord, ...]:
    if not path.is_file():
        raise UsageError(f"{what} not found: {path}")
    return load_corpus(path).records


def _records_by_id(records: Sequence[ProductRecord]) -> dict[str, ProductRecord]:
    return {record.product_id: record for record in records}


# -- subcommands -------------------------------------------------------------


def cmd_prepare(config: PipelineConfig, args: argparse.Namespace) -> int:
    if config.corpus is None:
        raise UsageError("no corpus configured; pass --corpus or set it in the config")
    if not config.corpus.is_file():
        raise UsageError(f"corpus not found: {config.corpus}")
    loaded = load_corpus(config.corpus)
    synonyms = SynonymMap.load(config.synonym_map) if config.synonym_map else None
    merged = merge_equivalent_aspects(loaded.records, synonyms)
    config.output_dir.mkdir(parents=True, exist_ok=True)
    write_corpus(merged, config.normalized_corpus)
    summary = {
        "records": len(merged),
        "dropped_missing_image": loaded.dropped_missing_image,
        "dropped_empty_aspects": loaded.dropped_empty_aspects,
        "output": str(config.normalized_corpus),
    }
    print(json.dumps(summary, sort_keys=True))
    log.info("prepared %d records", len(merged))
    return EXIT_OK


def cmd_split(config: PipelineConfig, args: argparse.Namespace) -> int:
    records = _load_records(config.normalized_corpus, "normalized corpus (run prepare first)")
    split = sample_zero_shot_split(records, config.unseen_fraction, config.seed)
    report = validate_split(split, records)
    for line in report.summary().splitlines():
        log.info("split check: %s", line)
    if not report.passed:
        log.error("split validation failed")
        return EXIT_RUNTIME
    config.output_dir.mkdir(parents=True, exist_ok=True)
    split.save(config.split_file)
    log.info(
        "split sizes: train=%d val=%d test=%d unseen_aspects=%d",
        len(split.train_ids),
        len(split.val_ids),
        len(split.test_ids),
        len(split.unseen_aspects),
    )
    return EXIT_OK


def cmd_train(config: PipelineConfig, args: argparse.Namespace) -> int:
    records = _load_records(config.normalized_corpus, "normalized corpus (run prepare first)")
    if not config.split_file.is_file():
        raise UsageError(f"split file not found (run split first): {config.split_file}")
    split = ZeroShotSplit.load(config.split_file)
    by_id = _records_by_id(records)
    train_records = [by_id[pid] for pid in split.train_ids if pid in by_id]
    val_records = [by_id[pid] for pid in split.val_ids if pid in by_id]
    if not val_records:
        # Degenerate desk corpora may put nothing in val; fall back to train
        # loss for early stopping rather than refusing to run.
        val_records = train_records
        log.warning("empty val partition; early stopping watches train loss")
    resume_from = None
    if args.resume:
        if not config.checkpoint_file.is_file():
            raise UsageError(f"cannot resume; no checkpoint at {config.checkpoint_file}")
        resume_from = DecoderCheckpoint.load(config.checkpoint_file)
        log.info("resuming from epoch %d", resume_from.epoch)
    suite = build_adapters(config.adapters)
    try:
        result = train_decoder(
            train_records, val_records, suite, config.train, resume_from=resume_from
        )
    finally:
        suite.close()
    config.output_dir.mkdir(parents=True, exist_ok=True)
    result.checkpoint.save(config.checkpoint_file)
    if result.history:
        write_training_log(result.history, config.train_log)
    log.info(
        "trained to epoch %d (best val loss %.4f); checkpoint at %s",
        result.checkpoint.epoch,
        result.checkpoint.val_loss,
        config.checkpoint_file,
    )
    return EXIT_OK


def _trace_to_dict(entry: AspectTraceEntry) -> dict:
    row = {
        "kind": "aspect",
        "attribute": entry.attribute,
        "decoded_value": entry.decoded_value,
        "branch": entry.branch,
        "source": entry.source,
        "value": entry.value,
        "prompt_similarity": entry.prompt_similarity,
    }
    if entry.candidates:
        row["candidates"] = [
            {"value": c.value, "source": c.source, "score": c.score}
            for c in entry.candidates
        ]
    return row


def _inference_row(result: ProductInference) -> dict:
    trace: list[dict] = [_trace_to_dict(entry) for entry in result.trace]
    for fragment in result.malformed_fragments:
        trace.append({"kind": "malformed-fragment", "fragment": fragment})
    if result.error:
        trace.append({"kind": "error", "message": result.error})
    return {
        "id": result.product_id,
        "aspects": [
            {"attribute": a.attribute, "value": a.value} for a in result.aspects
        ],
        "trace": trace,
    }


def cmd_infer(config: PipelineConfig, args: argparse.Namespace) -> int:
    records = _load_records(config.normalized_corpus, "normalized corpus (run prepare first)")
    if not config.split_file.is_file():
        raise UsageError(f"split file not found (run split first): {config.split_file}")
    if not config.checkpoint_file.is_file():
        raise UsageError(f"checkpoint not found (run train first): {config.checkpoint_file}")
    split = ZeroShotSplit.load(config.split_file)
    by_id = _records_by_id(records)
    partition_ids = split.val_ids if args.partition == "val" else split.test_ids
    wanted = set(partition_ids)
    targets = [r for r in records if r.product_id in wanted]
    if not targets:
        log.warning("partition %s is empty; writing an empty predictions file", args.partition)
    train_records = [by_id[pid] for pid in split.train_ids if pid in by_id]
    vocabulary = collect_attribute_vocabulary(train_records)
    infer_config = InferenceConfig(
        attribute_vocabulary=vocabulary, tau_d=config.tau_d, tau_c=config.tau_c
    )
    checkpoint = DecoderCheckpoint.load(config.checkpoint_file)
    generator = GreedyGenerator(checkpoint)
    suite = build_adapters(config.adapters)
    try:
        results = infer_batch(
            targets,
            generator,
            suite,
            infer_config,
            workers=args.workers,
            correct=not args.no_correct,
        )
    finally:
        suite.close()
    out_path = config.predictions_file(args.partition, corrected=not args.no_correct)
    config.output_dir.mkdir(parents=True, exist_ok=True)
    with out_path.open("w", encoding="utf-8") as handle:
        for result in results:
            handle.write(json.dumps(_inference_row(result), sort_keys=True) + "\n")
    failures = sum(1 for r in results if r.error)
    log.info(
        "inferred %d products (%d failures) -> %s", len(results), failures, out_path
    )
    if targets and failures == len(targets):
        log.error("every image failed")
        return EXIT_RUNTIME
    return EXIT_OK


def _load_predictions(path: Path) -> dict[str, list[Aspect]]:
    if not path.is_file():
        raise UsageError(f"predictions file not found: {path}")
    predictions: dict[str, list[Aspect]] = {}
    with path.open(encoding="utf-8") as handle:
        for line_no, line in enumerate(handle, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                row = json.loads(line)
                aspects = [
                    Aspect(entry["attribute"], entry["value"])
                    for entry in row["aspects"]
                ]
                predictions[row["id"]] = aspects
            except (KeyError, TypeError, ValueError, AspectGenError) as exc:
                raise AspectGenError(
                    f"bad prediction row at {path}:{line_no}: {exc}"
                ) from exc
    return predictions


def _evaluation_inputs(
    config: PipelineConfig, args: argparse.Namespace
) -> tuple[dict[str, list[Aspect]], dict[str, list[Aspect]], dict[str, str]]:
    predictions_path = (
        Path(args.predictions).resolve()
        if args.predictions
        else config.predictions_file(args.partition)
    )
    gold_path = Path(args.gold).resolve() if args.gold else config.normalized_corpus
    predictions = _load_predictions(predictions_path)
    records = _load_records(gold_path, "gold corpus")
    golds = {
        record.product_id: list(record.gold_aspects)
        for record in records
        if record.product_id in predictions
    }
    missing = sorted(set(predictions) - set(golds))
    if missing:
        raise AspectGenError(f"predictions reference unknown product ids: {missing[:5]}")
    categories = {
        record.product_id: record.category
        for record in records
        if record.product_id in predictions
    }
    return predictions, golds, categories


def cmd_evaluate(config: PipelineConfig, args: argparse.Namespace) -> int:
    predictions, golds, categories = _evaluation_inputs(config, args)
    overall = compute_report(predictions, golds)
    by_category = (
        report_by_group(predictions, golds, categories, "category")
        if args.by_category
        else []
    )
    by_attribute = (
        report_by_group(predictions, golds, group_by="attribute")
        if args.by_attribute
        else []
    )
    print(render_table([("all", overall)], label="partition"))
    if by_category:
        print()
        print(render_table(by_category, label="category"))
    if by_attribute:
        print()
        print(render_table(by_attribute, label="attribute"))
    payload = report_json(overall, by_category, by_attribute)
    json_out = Path(args.json_out) if args.json_out else config.report_file(args.partition)
    json_out.parent.mkdir(parents=True, exist_ok=True)
    json_out.write_text(payload, encoding="utf-8")
    log.info("report written to %s", json_out)
    return EXIT_OK


def cmd_report(config: PipelineConfig, args: argparse.Namespace) -> int:
    # Table-first view over existing predictions; grouped unless told otherwise.
    if not args.by_category and not args.by_attribute:
        args.by_category = True
        args.by_attribute = True
    args.json_out = args.json_out or str(config.report_file(args.partition))
    return cmd_evaluate(config, args)


# -- argument parsing --------------------------------------------------------


def _add_common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", help="pipeline config JSON")
    parser.add_argument("--output-dir", help="override the output directory")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="aspectgen",
        description="Generate and evaluate product aspects from images.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("prepare", help="normalize a corpus and merge equivalent aspects")
    _add_common(p)
    p.add_argument("--corpus", help="raw corpus JSONL (overrides config)")
    p.set_defaults(func=cmd_prepare)

    p = sub.add_parser("split", help="sample and validate a zero-shot split")
    _add_common(p)
    p.add_argument("--seed", type=int)
    p.add_argument("--unseen-fraction", type=float)
    p.set_defaults(func=cmd_split)

    p = sub.add_parser("train", help="train the projector and decoder on text")
    _add_common(p)
    p.add_argument("--seed", type=int)
    p.add_argument("--resume", action="store_true", help="continue from the stored checkpoint")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("infer", help="decode and correct aspects for a partition")
    _add_common(p)
    p.add_argument("--partition", choices=("val", "test"), default="test")
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--tau-d", type=float, dest="tau_d")
    p.add_argument("--tau-c", type=float, dest="tau_c")
    p.add_argument(
        "--no-correct",
        action="store_true",
        help="skip evidence correction (ablation)",
    )
    p.set_defaults(func=cmd_infer)

    for name, help_text in (
        ("evaluate", "score predictions against gold"),
        ("report", "render grouped metric tables"),
    ):
        p = sub.add_parser(name, help=help_text)
        _add_common(p)
        p.add_argument("--partition", choices=("val", "test"), default="test")
        p.add_argument("--predictions", help="predictions JSONL (default: from config)")
        p.add_argument("--gold", help="gold corpus JSONL (default: normalized corpus)")
        p.add_argument("--by-category", action="store_true")
        p.add_argument("--by-attribute", action="store_true")
        p.add_argument("--json-out", help="where to write the JSON report")
        p.set_defaults(func=cmd_evaluate if name == "evaluate" else cmd_report)

    return parser


def main(argv: Sequence[str] | None = None) -> int:
    logging.basicConfig(
        stream=sys.stderr,
        level=logging.INFO,
        format="%(levelname)s %(name)s: %(message)s",
    )
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        config = load_config(args.config)
        _apply_overrides(config, args)
        return args.func(config, args)
    except UsageError as exc:
        log.error("%s", exc)
        return EXIT_USAGE
    except AspectGenError as exc:
        log.error("%s", exc)
        return EXIT_RUNTIME
    except Exception:  # pragma: no cover - last-resort diagnostics
        log.exception("unexpected failure")
        return EXIT_RUNTIME


if __name__ == "__main__":
    raise SystemExit(main())
