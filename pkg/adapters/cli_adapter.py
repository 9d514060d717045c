"""
Command Line Adapter Module

This module adapts the dataset, training, evaluation and inference services
to an argparse command surface. Every command prints a JSON summary on
stdout and returns a process exit code.
"""
from typing import Any, Callable, Dict, List, Optional, Sequence
import argparse
import json
import logging
import os
import sys

import pandas as pd

from config.config_manager import ConfigManager
from config.schemas import (
    LossConfig, ModelConfig, OptimizerConfig, SceneConfig, TrainConfig, load_json_config,
)
from engine.gradcheck import DEFAULT_STEP, DEFAULT_TOLERANCE, default_cases, run_suite
from models.accounting import count_params_flops
from models.loss import gradcheck_cases
from services.dataset_service import DatasetService
from services.evaluation_service import BackgroundPredictor, EvaluationService, NetworkPredictor
from services.inference_service import InferenceService, diff_mask_files, load_network
from services.training_service import TrainingService
from utils.error_utils import AppError, UsageError
from utils.metrics_utils import TABLE_COLUMNS

# Configure logging
logger = logging.getLogger(__name__)
logger.setLevel(logging.INFO)

PROG = "aqsnet"


def _emit(payload: Dict[str, Any]) -> None:
    print(json.dumps(payload, indent=2, default=str))


def _model_config(args: argparse.Namespace) -> ModelConfig:
    """ModelConfig from --model-config, else from --preset, narrowed by --toy."""
    if getattr(args, 'model_config', None):
        config = load_json_config(args.model_config, ModelConfig)
    else:
        config = ModelConfig.preset(args.preset)
    if getattr(args, 'toy', False):
        config = ModelConfig.toy(pretrained_fusion=config.pretrained_fusion, decoder=config.decoder,
                                 image_size=config.image_size, seed=config.seed)
    if getattr(args, 'image_size', None):
        config = config.updated(image_size=args.image_size)
    if getattr(args, 'seed', None) is not None:
        config = config.updated(seed=args.seed)
    return config


def _train_config(args: argparse.Namespace, config_manager: ConfigManager) -> TrainConfig:
    config = load_json_config(args.train_config, TrainConfig) if args.train_config else TrainConfig()
    overrides = {'show_progress': bool(config_manager.get('show_progress', True)) and config.show_progress}
    for name in ('epochs', 'batch_size', 'seed'):
        if getattr(args, name, None) is not None:
            overrides[name] = getattr(args, name)
    return config.updated(**overrides)


def _optimizer_config(args: argparse.Namespace) -> OptimizerConfig:
    config = load_json_config(args.optimizer_config, OptimizerConfig) if args.optimizer_config else OptimizerConfig()
    return config.updated(lr=args.lr) if args.lr is not None else config


def _split(value: str) -> Optional[str]:
    return None if value == "all" else value


class CliAdapter:
    """
    Adapter class that maps parsed command lines onto the services.
    """

    def __init__(self, config_manager: Optional[ConfigManager] = None):
        self.config = config_manager or ConfigManager()
        self.workers = int(self.config.get('workers', 1))
        self.show_progress = bool(self.config.get('show_progress', True))

    def _dataset_service(self, workers: Optional[int] = None) -> DatasetService:
        return DatasetService(workers or self.workers, self.show_progress)

    def _output_dir(self, args: argparse.Namespace, name: str) -> str:
        return args.out or os.path.join(self.config.get('output_dir', 'runs'), name)

    def gen_data(self, args: argparse.Namespace) -> int:
        config = load_json_config(args.config, SceneConfig) if args.config else SceneConfig()
        overrides = {}
        if args.seed is not None:
            overrides['seed'] = args.seed
        if args.size is not None:
            overrides.update(height=args.size, width=args.size)
        if args.no_perturbations:
            config = config.perturbations_disabled()
        config = config.updated(**overrides)
        directory = args.out or self.config.get('data_dir')
        manifest = self._dataset_service(args.workers).write(directory, config, args.count)
        _emit({'directory': directory, 'count': manifest['count'], 'splits': manifest['splits'],
               'seed': manifest['seed']})
        return 0

    def train(self, args: argparse.Namespace) -> int:
        model_config = _model_config(args)
        loss_config = load_json_config(args.loss_config, LossConfig) if args.loss_config else LossConfig()
        service = TrainingService(model_config, loss_config, _optimizer_config(args),
                                  _train_config(args, self.config))
        dataset = self._dataset_service().load(args.data, _split(args.split), args.limit)
        result = service.train(dataset)
        paths = service.save(result, self._output_dir(args, "train"))
        _emit({'model': model_config.ablation_name, 'steps': result.steps,
               'losses': result.losses, 'paths': paths})
        return 0

    def eval(self, args: argparse.Namespace) -> int:
        if args.dummy:
            predictor, name = BackgroundPredictor(), "All background"
        elif args.weights:
            network = load_network(args.weights, args.model_config)
            predictor, name = NetworkPredictor(network), network.config.ablation_name
        else:
            raise UsageError("eval needs --weights or --dummy")
        dataset = self._dataset_service().load(args.data, _split(args.split), args.limit)
        service = EvaluationService(self.workers, args.batch_size)
        report = service.evaluate(predictor, dataset)
        output_dir = self._output_dir(args, "eval")
        os.makedirs(output_dir, exist_ok=True)
        with open(os.path.join(output_dir, "metrics.json"), "w") as f:
            f.write(report.to_json())
        report.to_csv(os.path.join(output_dir, "metrics.csv"), name)
        if args.overlays:
            service.write_predictions(predictor, dataset, os.path.join(output_dir, "predictions"))
        _emit({'model': name, 'scenes': len(dataset), **report.to_dict(), 'output_dir': output_dir})
        return 0

    def infer(self, args: argparse.Namespace) -> int:
        service = InferenceService.from_files(args.weights, args.model_config)
        result = service.infer_files(args.image, args.mask, args.out, args.vit_features)
        _emit(result)
        return 0

    def cache_features(self, args: argparse.Namespace) -> int:
        service = InferenceService.from_files(args.weights, args.model_config)
        _emit({'features': service.cache_features(args.image, args.out)})
        return 0

    def diff_masks(self, args: argparse.Namespace) -> int:
        _emit(diff_mask_files(args.seg, args.gt, args.out, args.image))
        return 0

    def gradcheck(self, args: argparse.Namespace) -> int:
        cases = {**default_cases(), **gradcheck_cases()}
        if args.only:
            unknown = sorted(set(args.only) - set(cases))
            if unknown:
                raise UsageError("Unknown gradcheck case(s)", {'unknown': unknown, 'cases': sorted(cases)})
            cases = {name: cases[name] for name in args.only}
        results = run_suite(cases, trials=args.trials, seed=args.seed, step=args.step, tolerance=args.tolerance)
        table = pd.DataFrame([{'case': r.name, 'trials': r.trials, 'max_relative_error': r.max_relative_error,
                               'passed': r.passed} for r in results])
        print(table.to_string(index=False))
        failed = [r.name for r in results if not r.passed]
        if failed:
            logger.error(f"gradcheck failed for: {', '.join(failed)}")
            return 1
        return 0

    def count(self, args: argparse.Namespace) -> int:
        report = count_params_flops(_model_config(args), args.size)
        _emit(report.to_dict())
        if args.layers:
            print(report.layer_table().to_string(index=False))
        return 0

    def ablate(self, args: argparse.Namespace) -> int:
        """Train and evaluate the three ablation rows for every seed; one CSV row per (row, seed)."""
        datasets = self._dataset_service()
        train_set = datasets.load(args.data, "train", args.limit)
        test_set = datasets.load(args.data, "test", args.limit)
        evaluation = EvaluationService(self.workers, args.batch_size_eval)
        rows: List[Dict[str, Any]] = []
        for preset in ModelConfig.PRESETS:
            for seed in args.seeds:
                args.preset, args.seed = preset, seed
                model_config = _model_config(args)
                service = TrainingService(model_config, LossConfig(), _optimizer_config(args),
                                          _train_config(args, self.config))
                result = service.train(train_set)
                report = evaluation.evaluate(NetworkPredictor(result.network), test_set)
                accounting = count_params_flops(model_config, args.size, network=result.network)
                rows.append({'Method': model_config.ablation_name, 'Seed': seed, **report.row(),
                             'Params (M)': accounting.total_parameters / 1e6,
                             'FLOPs (G)': accounting.macs / 1e9})
        table = pd.DataFrame(rows, columns=['Method', 'Seed', *TABLE_COLUMNS, 'Params (M)', 'FLOPs (G)'])
        output_dir = self._output_dir(args, "ablation")
        os.makedirs(output_dir, exist_ok=True)
        path = os.path.join(output_dir, "ablation.csv")
        table.to_csv(path, index=False, float_format="%.3f")
        print(table.to_string(index=False))
        logger.info(f"Wrote ablation table to {path}")
        return 0

    def verify(self, args: argparse.Namespace) -> int:
        problems = self._dataset_service().verify(args.data)
        _emit({'directory': args.data, 'problems': problems})
        return 0 if not problems else 1


def _add_model_arguments(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--model-config", help="ModelConfig JSON file")
    parser.add_argument("--preset", default="baseline+pif+aqsd", help="Ablation preset when no JSON is given")
    parser.add_argument("--toy", action="store_true", help="Use narrow widths")
    parser.add_argument("--image-size", type=int)


def _add_training_arguments(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--train-config", help="TrainConfig JSON file")
    parser.add_argument("--optimizer-config", help="OptimizerConfig JSON file")
    parser.add_argument("--epochs", type=int)
    parser.add_argument("--batch-size", type=int)
    parser.add_argument("--lr", type=float)
    parser.add_argument("--limit", type=int, help="Use at most this many scenes per split")


def build_parser(adapter: CliAdapter) -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog=PROG, description="Segmentation quality assessment network")
    parser.add_argument("--verbose", "-v", action="store_true", help="Log at DEBUG level")
    commands = parser.add_subparsers(dest="command", metavar="command")
    commands.required = True

    def command(name: str, handler: Callable[[argparse.Namespace], int], help_text: str) -> argparse.ArgumentParser:
        sub = commands.add_parser(name, help=help_text)
        sub.set_defaults(handler=handler)
        return sub

    sub = command("gen-data", adapter.gen_data, "Generate a synthetic dataset with a manifest")
    sub.add_argument("--config", help="SceneConfig JSON file")
    sub.add_argument("--out", help="Dataset directory (defaults to the configured data_dir)")
    sub.add_argument("--count", type=int, default=320)
    sub.add_argument("--seed", type=int)
    sub.add_argument("--size", type=int, help="Square canvas size")
    sub.add_argument("--no-perturbations", action="store_true")
    sub.add_argument("--workers", type=int)

    sub = command("train", adapter.train, "Train a network on a dataset")
    sub.add_argument("--data", required=True)
    sub.add_argument("--out")
    sub.add_argument("--split", default="train", choices=["train", "test", "all"])
    sub.add_argument("--loss-config", help="LossConfig JSON file")
    sub.add_argument("--seed", type=int)
    _add_model_arguments(sub)
    _add_training_arguments(sub)

    sub = command("eval", adapter.eval, "Evaluate weights (or the all-background predictor) on a dataset")
    sub.add_argument("--data", required=True)
    sub.add_argument("--weights")
    sub.add_argument("--model-config")
    sub.add_argument("--dummy", action="store_true", help="Predict background everywhere")
    sub.add_argument("--split", default="test", choices=["train", "test", "all"])
    sub.add_argument("--limit", type=int)
    sub.add_argument("--batch-size", type=int, default=8)
    sub.add_argument("--overlays", action="store_true", help="Also write predicted label maps and overlays")
    sub.add_argument("--out")

    sub = command("infer", adapter.infer, "Assess one image and mask")
    sub.add_argument("--weights", required=True)
    sub.add_argument("--model-config")
    sub.add_argument("--image", required=True)
    sub.add_argument("--mask", required=True)
    sub.add_argument("--vit-features", help="Precomputed frozen-encoder features (AQSW)")
    sub.add_argument("--out", required=True)

    sub = command("cache-features", adapter.cache_features, "Store the frozen-encoder features of an image")
    sub.add_argument("--weights", required=True)
    sub.add_argument("--model-config")
    sub.add_argument("--image", required=True)
    sub.add_argument("--out", required=True)

    sub = command("diff-masks", adapter.diff_masks, "QA labels of a segmentation against its ground truth")
    sub.add_argument("--seg", required=True)
    sub.add_argument("--gt", required=True)
    sub.add_argument("--image")
    sub.add_argument("--out", required=True)

    sub = command("gradcheck", adapter.gradcheck, "Finite-difference check of every differentiable op")
    sub.add_argument("--trials", type=int, default=10)
    sub.add_argument("--seed", type=int, default=0)
    sub.add_argument("--step", type=float, default=DEFAULT_STEP)
    sub.add_argument("--tolerance", type=float, default=DEFAULT_TOLERANCE)
    sub.add_argument("--only", nargs="+", help="Case names to run")

    sub = command("count", adapter.count, "Parameters and FLOPs of a configuration")
    _add_model_arguments(sub)
    sub.add_argument("--size", type=int, default=512, help="Square input size")
    sub.add_argument("--layers", action="store_true", help="Print the per-layer table")

    sub = command("ablate", adapter.ablate, "Train and evaluate the three ablation rows")
    sub.add_argument("--data", required=True)
    sub.add_argument("--out")
    sub.add_argument("--seeds", type=int, nargs="+", default=[0])
    sub.add_argument("--toy", action="store_true")
    sub.add_argument("--image-size", type=int)
    sub.add_argument("--size", type=int, default=512, help="Input size for the Params/FLOPs columns")
    sub.add_argument("--eval-batch-size", dest="batch_size_eval", type=int, default=8)
    _add_training_arguments(sub)
    sub.set_defaults(model_config=None, preset=None, seed=None)

    sub = command("verify", adapter.verify, "Re-hash dataset files against the manifest")
    sub.add_argument("--data", required=True)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    config_manager = ConfigManager()
    adapter = CliAdapter(config_manager)
    parser = build_parser(adapter)
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)

    level = logging.DEBUG if args.verbose else getattr(logging, str(config_manager.get('log_level', 'INFO')).upper(),
                                                      logging.INFO)
    logging.basicConfig(level=level, format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    logging.getLogger().setLevel(level)
    if args.verbose:
        for name in list(logging.root.manager.loggerDict):
            logging.getLogger(name).setLevel(logging.DEBUG)

    try:
        return args.handler(args)
    except AppError as e:
        print(f"{PROG} {args.command}: {e.message}", file=sys.stderr)
        logger.debug(f"{type(e).__name__} details: {e.details}")
        return 1
