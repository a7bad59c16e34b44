"""The `saaa` command line: train, eval, ablate, export-attention and synth.

Exit status is 0 on success, 1 when only part of the work succeeded and 2 on
a fatal configuration problem (bad config, missing path, unreadable
checkpoint or feature file).
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from collections.abc import Sequence
from pathlib import Path

import imageio.v3 as iio
import numpy as np
import numpy.typing as npt

from .ablation import AblationSuite, run_suite
from .answer import top_answers
from .checkpoint import load_checkpoint
from .config import TrainConfig
from .dataset import Dataset
from .errors import (
    CheckpointError,
    ConfigurationError,
    FeatureFormatError,
    SaaaError,
)
from .evaluate import evaluate
from .model import VqaModel
from .synth import SynthSpec, generate_synthetic
from .tensor import Array
from .train import train
from .vocabulary import AnswerVocabulary

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_PARTIAL = 1
EXIT_FATAL = 2
LOG_FORMAT = "%(asctime)s %(levelname)s %(name)s: %(message)s"
REPORT_FILE = "report.json"
PREDICTIONS_FILE = "predictions.jsonl"


def _load_config(args: argparse.Namespace) -> TrainConfig:
    config = TrainConfig.from_file(args.config) if args.config else TrainConfig()
    if args.seed is not None:
        config = config.with_overrides(seed=args.seed)
    return config


def _require(path: Path | None, flag: str) -> Path:
    if path is None:
        raise ConfigurationError(f"{flag} is required")
    return path


def cmd_train(args: argparse.Namespace) -> int:
    config = _load_config(args)
    dataset = Dataset.load(_require(args.data_dir, "--data-dir"), config.workers)
    resume = load_checkpoint(args.resume) if args.resume else None
    records, val_records = dataset.train, dataset.val
    if args.trainval:
        records, val_records = dataset.records, None
        logger.info("Training on %d train+val records", len(records))
    result = train(
        config,
        records,
        dataset.features,
        val_records=val_records,
        resume=resume,
        out_dir=args.out_dir,
    )
    logger.info(
        "Trained to step %d; outputs in %s", result.checkpoint.step, args.out_dir
    )
    return EXIT_OK


def read_answer_vocab(path: Path) -> AnswerVocabulary:
    """Reads one answer per line, in class id order."""
    try:
        lines = path.read_text(encoding="utf-8").splitlines()
    except OSError as error:
        raise ConfigurationError(f"Cannot read answer vocabulary: {error}") from error
    return AnswerVocabulary([line.strip() for line in lines if line.strip()])


def cmd_eval(args: argparse.Namespace) -> int:
    checkpoint = load_checkpoint(args.checkpoint)
    dataset = Dataset.load(
        _require(args.data_dir, "--data-dir"), checkpoint.config.workers
    )
    vocab = read_answer_vocab(args.answer_vocab) if args.answer_vocab else None
    records = dataset.train if args.split == "train" else dataset.eval_records()
    report = evaluate(checkpoint, records, dataset.features, vocab)
    report_path = args.report or args.out_dir / REPORT_FILE
    report.write(report_path)
    report.write_predictions(report_path.parent / PREDICTIONS_FILE)
    sys.stdout.write(report.to_table())
    if report.skipped_count and not report.example_count:
        return EXIT_PARTIAL
    return EXIT_OK


def cmd_ablate(args: argparse.Namespace) -> int:
    suite = (
        AblationSuite.from_file(args.config)
        if args.config
        else AblationSuite.from_text("")
    )
    if args.seed is not None:
        suite.base["seed"] = args.seed
    dataset = Dataset.load(_require(args.data_dir, "--data-dir"))
    table = run_suite(suite, dataset, args.out_dir, args.jobs)
    sys.stdout.write(table.to_csv())
    return EXIT_PARTIAL if table.errors else EXIT_OK


def grid_to_csv(grid: Array) -> str:
    """Row-major values with six significant digits."""
    return "".join(",".join(f"{v:.6g}" for v in row) + "\n" for row in grid)


def grid_to_image(grid: Array) -> npt.NDArray[np.uint8]:
    """Min-max scales a grid to 8-bit gray levels; a flat grid is black."""
    low, high = float(grid.min()), float(grid.max())
    if high <= low:
        return np.zeros(grid.shape, dtype=np.uint8)
    scaled = (grid - low) / (high - low) * 255.0
    return np.round(scaled).astype(np.uint8)


def export_attention(
    model: VqaModel, dataset: Dataset, question_ids: Sequence[int], out_dir: Path
) -> list[int]:
    """Writes attention grids and top-5 answers; returns the ids not exported."""
    out_dir.mkdir(parents=True, exist_ok=True)
    if model.attention is None:
        raise ConfigurationError("Checkpoint was trained without attention")
    failed = []
    for qid in question_ids:
        record = dataset.find(qid)
        if record is None:
            failed.append(qid)
            continue
        prepared = model.prepare([record], dataset.features, require_answers=False)
        if not prepared.examples:
            logger.warning("Question %d: %s", qid, prepared.errors[qid])
            failed.append(qid)
            continue
        example = prepared.examples[0]
        result = model.forward_examples([example])
        assert result.attention is not None
        fm = example.features
        weights = result.attention.weights.data[0]
        for c in range(weights.shape[-1]):
            grid = weights[:, c].reshape(fm.height, fm.width)
            (out_dir / f"{qid}_g{c}.csv").write_text(grid_to_csv(grid))
            iio.imwrite(out_dir / f"{qid}_g{c}.pgm", grid_to_image(grid))
        top5 = top_answers(result.dist.row(0), model.answer_vocab, 5)
        summary = {
            "question_id": qid,
            "question": record.text,
            "top5": [{"answer": answer, "prob": prob} for answer, prob in top5],
        }
        (out_dir / f"{qid}.json").write_text(
            json.dumps(summary, indent=2, sort_keys=True) + "\n"
        )
    return failed


def cmd_export_attention(args: argparse.Namespace) -> int:
    checkpoint = load_checkpoint(args.checkpoint)
    dataset = Dataset.load(_require(args.data_dir, "--data-dir"), preload=False)
    model = VqaModel.from_checkpoint(checkpoint)
    failed = export_attention(model, dataset, args.question_ids, args.out_dir)
    if failed:
        sys.stderr.write(
            "Could not export questions: " + " ".join(map(str, failed)) + "\n"
        )
    return EXIT_PARTIAL if len(failed) == len(args.question_ids) else EXIT_OK


def cmd_synth(args: argparse.Namespace) -> int:
    spec = SynthSpec(
        count=args.count,
        height=args.height,
        width=args.width,
        depth=args.depth,
        question_vocab=args.question_vocab,
        answers=args.answers,
        seed=args.seed if args.seed is not None else 0,
        val_count=args.val_count,
    )
    generate_synthetic(spec, args.out_dir)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, help="override the config seed")
    common.add_argument("--data-dir", type=Path, help="records and feature files")
    common.add_argument("--out-dir", type=Path, default=Path("out"))
    common.add_argument("--config", type=Path, help="key = value config file")
    verbosity = common.add_mutually_exclusive_group()
    verbosity.add_argument("-v", "--verbose", action="store_true")
    verbosity.add_argument("-q", "--quiet", action="store_true")

    parser = argparse.ArgumentParser(
        prog="saaa", description="Attention-based visual question answering."
    )
    commands = parser.add_subparsers(dest="command", required=True)

    train_parser = commands.add_parser("train", parents=[common], help="train a model")
    train_parser.add_argument("--resume", type=Path, help="checkpoint to continue")
    train_parser.add_argument(
        "--trainval",
        action="store_true",
        help="train on the training and validation records together",
    )
    train_parser.set_defaults(handler=cmd_train)

    eval_parser = commands.add_parser(
        "eval", parents=[common], help="evaluate a checkpoint"
    )
    eval_parser.add_argument("checkpoint", type=Path)
    eval_parser.add_argument("--report", type=Path, help="report JSON path")
    eval_parser.add_argument(
        "--answer-vocab", type=Path, help="replacement answers, one per line"
    )
    eval_parser.add_argument("--split", choices=("val", "train"), default="val")
    eval_parser.set_defaults(handler=cmd_eval)

    ablate_parser = commands.add_parser(
        "ablate", parents=[common], help="train every variant of a suite"
    )
    ablate_parser.add_argument("--jobs", type=int, default=1)
    ablate_parser.set_defaults(handler=cmd_ablate)

    export_parser = commands.add_parser(
        "export-attention", parents=[common], help="write attention grids"
    )
    export_parser.add_argument("checkpoint", type=Path)
    export_parser.add_argument("question_ids", type=int, nargs="+")
    export_parser.set_defaults(handler=cmd_export_attention)

    synth_parser = commands.add_parser(
        "synth", parents=[common], help="generate a synthetic dataset"
    )
    defaults = SynthSpec()
    synth_parser.add_argument("--count", type=int, default=defaults.count)
    synth_parser.add_argument("--height", type=int, default=defaults.height)
    synth_parser.add_argument("--width", type=int, default=defaults.width)
    synth_parser.add_argument("--depth", type=int, default=defaults.depth)
    synth_parser.add_argument(
        "--question-vocab", type=int, default=defaults.question_vocab
    )
    synth_parser.add_argument("--answers", type=int, default=defaults.answers)
    synth_parser.add_argument("--val-count", type=int, default=defaults.val_count)
    synth_parser.set_defaults(handler=cmd_synth)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    level = logging.INFO
    if args.verbose:
        level = logging.DEBUG
    elif args.quiet:
        level = logging.WARNING
    logging.basicConfig(level=level, format=LOG_FORMAT, stream=sys.stderr)
    try:
        status: int = args.handler(args)
    except (ConfigurationError, CheckpointError, FeatureFormatError) as error:
        logger.error("%s", error)
        return EXIT_FATAL
    except FileNotFoundError as error:
        logger.error("Missing path: %s", error.filename)
        return EXIT_FATAL
    except SaaaError as error:
        logger.error("%s", error)
        return EXIT_PARTIAL
    return status
