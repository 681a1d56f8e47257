"""
Command-Line Application for the Clustering Mask Transformer Toolkit
Data generation, training, evaluation, attention heatmaps, gradient checks and
the ablation ladder behind one argparse entry point
"""

import argparse
import logging
import sys
import time
from pathlib import Path
from typing import List, Optional

import pandas as pd

# Add modules to path
sys.path.append(str(Path(__file__).parent))

from config.config import DATA_CONFIG, LOGGING_CONFIG, OUTPUT_CONFIG, TENSOR_CONFIG
from config.run_config import RunConfig
from modules.dataset_format import read_dataset, write_dataset
from modules.errors import CMTError, ContractError, FormatError
from modules.gradient_check import SIZES, run_gradient_suite
from modules.heatmap_writer import entropy_table, write_attention_heatmaps
from modules.scene_generator import SceneConfig, class_histogram, generate_dataset
from modules.tensor import no_tape, set_default_dtype
from modules.trainer import (MetricsLog, ablation_study, evaluate, load_checkpoint,
                             restore_model, restore_optimizer, save_checkpoint, train)
from utils.helpers import ensure_directory, format_duration, parse_size

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_IO = 2
EXIT_CHECK_FAILED = 3


class CLIArgumentParser(argparse.ArgumentParser):
    """ArgumentParser whose usage errors exit with code 1"""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def configure_logging(quiet: bool = False, verbose: bool = False) -> None:
    """Configure the root logger from LOGGING_CONFIG; logs go to stderr"""
    level = LOGGING_CONFIG['level']
    if quiet:
        level = 'WARNING'
    elif verbose:
        level = 'DEBUG'
    handlers = [logging.StreamHandler(sys.stderr)]
    if LOGGING_CONFIG['log_file']:
        handlers.append(logging.FileHandler(LOGGING_CONFIG['log_file']))
    logging.basicConfig(level=level, format=LOGGING_CONFIG['format'], handlers=handlers, force=True)


def print_frame(frame: pd.DataFrame, tsv: bool = False) -> None:
    """Print a table as TSV or as an aligned text table"""
    if tsv:
        sys.stdout.write(frame.to_csv(sep='\t', index=False, lineterminator='\n',
                                      float_format=OUTPUT_CONFIG['tsv_float_format']))
    elif frame.empty:
        print("(no rows)")
    else:
        print(frame.to_string(index=False,
                              float_format=lambda v: OUTPUT_CONFIG['float_format'].format(v)))


def load_run_config(path: Optional[str]) -> RunConfig:
    return RunConfig.from_file(path) if path else RunConfig()


def cmd_gen(args) -> int:
    """Generate a synthetic dataset and write it as a CMTD file"""
    try:
        height, width = parse_size(args.size)
    except ValueError as e:
        raise ContractError(str(e)) from e
    config = SceneConfig(height=height, width=width, max_shapes=args.max_shapes)
    config.validate()

    samples = generate_dataset(args.samples, args.seed, config)
    write_dataset(args.out, samples)

    print(f"samples\t{len(samples)}")
    for name, count in class_histogram(samples).items():
        print(f"{name}\t{count}")
    return EXIT_OK


def cmd_train(args) -> int:
    """Train a model (optionally resuming) and write the checkpoint and metrics log"""
    set_default_dtype('float32' if args.float32 else 'float64')
    try:
        return _run_training(args)
    finally:
        set_default_dtype(TENSOR_CONFIG['dtype'])


def _run_training(args) -> int:
    run_config = load_run_config(args.config).apply_overrides({
        'variant': args.variant,
        'iterations': args.iterations,
        'seed': args.seed
    })
    dataset = read_dataset(args.data)
    if not len(dataset):
        raise ContractError(f"Dataset {args.data} has no samples")
    max_targets = max(sample.target.K for sample in dataset)
    train_config = run_config.train.validate()
    log_path = Path(args.log) if args.log else Path(f"{args.out}.metrics.tsv")

    model = optimizer = None
    start_step = 0
    if args.resume:
        checkpoint = load_checkpoint(args.resume)
        model = restore_model(checkpoint)
        optimizer = restore_optimizer(checkpoint, model, train_config)
        start_step = checkpoint.step
        logger.info(f"Resuming {model.config.variant} from step {start_step}")
    model_config = (model.config if model else run_config.model).validate(max_targets)
    metrics = MetricsLog.for_run(model_config, train_config, timestamp=not args.no_timestamp)

    started = time.time()
    result = train(dataset.samples, model_config, train_config, model=model,
                   optimizer=optimizer, start_step=start_step, metrics=metrics,
                   progress=args.progress)
    save_checkpoint(args.out, result.model, result.final_step, result.optimizer)
    metrics.write(log_path, append=bool(args.resume))
    logger.info(f"Training finished in {format_duration(time.time() - started)}")
    print(f"checkpoint\t{args.out}")
    print(f"metrics\t{log_path}")
    print(f"steps\t{result.final_step}")
    return EXIT_OK


def cmd_eval(args) -> int:
    """Evaluate PQ over a dataset with one or both merge procedures"""
    run_config = load_run_config(args.config)
    dataset = read_dataset(args.data)
    model = None
    if not args.oracle:
        if not args.ckpt:
            raise ContractError("eval needs --ckpt unless --oracle is given")
        checkpoint = load_checkpoint(args.ckpt)
        model = restore_model(checkpoint, run_config.model if args.config else None)

    merge = args.merge or run_config.thresholds['merge']
    modes = ['argmax', 'maskwise'] if merge == 'both' else [merge]
    thresholds = run_config.thresholds
    for mode in modes:
        result = evaluate(model, dataset.samples, merge=mode,
                          conf_threshold=thresholds['conf_threshold'],
                          object_threshold=thresholds['object_threshold'],
                          overlap_threshold=thresholds['overlap_threshold'],
                          oracle=args.oracle, thing_classes=dataset.header.thing_classes,
                          class_names=DATA_CONFIG['class_names'][:dataset.header.class_count],
                          progress=args.progress)
        print_frame(result.summary_frame(), args.tsv)
        print_frame(result.per_class, args.tsv)
    return EXIT_OK


def cmd_attn(args) -> int:
    """Write per-layer heatmaps of one center and print its entropy table"""
    model = restore_model(load_checkpoint(args.ckpt))
    dataset = read_dataset(args.data)
    if not 0 <= args.sample < len(dataset):
        raise ContractError(f"Sample {args.sample} out of range for {len(dataset)} samples")
    if not 0 <= args.center < model.config.num_queries:
        raise ContractError(
            f"Center {args.center} out of range for N={model.config.num_queries} centers")

    with no_tape():
        output = model.predict(dataset[args.sample].image)
    traces = list(output.layer_traces)
    if output.first_stack is not None:
        traces = output.first_stack.layer_traces + traces

    height, width = output.prediction.height, output.prediction.width
    write_attention_heatmaps(traces, args.center, height, width, ensure_directory(args.out_dir))
    print_frame(entropy_table(traces, args.center), args.tsv)
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    """Compare analytic gradients with central finite differences"""
    set_default_dtype('float64')
    started = time.time()
    frame = run_gradient_suite(args.size, args.seed)
    shown = frame.assign(max_rel_error=frame['max_rel_error'].map(lambda v: f"{v:.3e}"))
    print(shown.to_string(index=False))
    logger.info(f"Gradient check took {format_duration(time.time() - started)}")
    failed = frame.loc[~frame['passed'], 'component'].tolist()
    if failed:
        print(f"FAILED: {', '.join(failed)}")
        return EXIT_CHECK_FAILED
    print("PASSED")
    return EXIT_OK


def cmd_ablate(args) -> int:
    """Train the ablation ladder over several seeds and print the PQ table"""
    run_config = load_run_config(args.config).apply_overrides({'iterations': args.iterations})
    train_set = read_dataset(args.data)
    val_set = read_dataset(args.val)
    try:
        seeds = [int(s) for s in args.seeds.split(',') if s.strip()]
    except ValueError as e:
        raise ContractError(f"--seeds must be a comma-separated list of integers: {e}") from e
    frame = ablation_study(train_set.samples, val_set.samples, run_config.model,
                           run_config.train.validate(), seeds=seeds,
                           merge=run_config.thresholds['merge'], progress=args.progress)
    print_frame(frame, args.tsv)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = CLIArgumentParser(prog='cmt', description=__doc__.strip().splitlines()[0])
    parser.add_argument('--quiet', action='store_true', help='Only log warnings and errors')
    parser.add_argument('--verbose', action='store_true', help='Log debug messages')
    commands = parser.add_subparsers(dest='command', required=True,
                                     parser_class=CLIArgumentParser)

    gen = commands.add_parser('gen', help='Generate a synthetic shapes dataset')
    gen.add_argument('--out', required=True, help='Output CMTD file')
    gen.add_argument('--samples', type=int, default=16)
    gen.add_argument('--seed', type=int, default=0)
    gen.add_argument('--size', default=f"{DATA_CONFIG['height']}x{DATA_CONFIG['width']}",
                     help='Image size HxW')
    gen.add_argument('--max-shapes', type=int, default=DATA_CONFIG['max_shapes'])
    gen.set_defaults(handler=cmd_gen)

    train_cmd = commands.add_parser('train', help='Train a model')
    train_cmd.add_argument('--data', required=True, help='Training CMTD file')
    train_cmd.add_argument('--config', help='key = value run configuration file')
    train_cmd.add_argument('--variant', help='baseline_eq3, clustering_eq5 or combined_eq7')
    train_cmd.add_argument('--out', required=True, help='Output CMTW checkpoint')
    train_cmd.add_argument('--log', help='Metrics log path (default: <out>.metrics.tsv)')
    train_cmd.add_argument('--iterations', type=int)
    train_cmd.add_argument('--seed', type=int)
    train_cmd.add_argument('--resume', help='Checkpoint to continue from')
    train_cmd.add_argument('--no-timestamp', action='store_true',
                           help='Leave the timestamp out of the metrics log header')
    train_cmd.add_argument('--float32', action='store_true', help='Train in 32-bit floats')
    train_cmd.add_argument('--progress', action='store_true', help='Show a progress bar')
    train_cmd.set_defaults(handler=cmd_train)

    eval_cmd = commands.add_parser('eval', help='Evaluate panoptic quality')
    eval_cmd.add_argument('--data', required=True)
    eval_cmd.add_argument('--ckpt')
    eval_cmd.add_argument('--merge', choices=['argmax', 'maskwise', 'both'])
    eval_cmd.add_argument('--config', help='Thresholds and model settings to check against')
    eval_cmd.add_argument('--oracle', action='store_true',
                          help='Score the ground truth against itself')
    eval_cmd.add_argument('--tsv', action='store_true')
    eval_cmd.add_argument('--progress', action='store_true')
    eval_cmd.set_defaults(handler=cmd_eval)

    attn = commands.add_parser('attn', help='Export attention heatmaps and entropies')
    attn.add_argument('--ckpt', required=True)
    attn.add_argument('--data', required=True)
    attn.add_argument('--sample', type=int, default=0)
    attn.add_argument('--center', type=int, default=0)
    attn.add_argument('--out-dir', required=True)
    attn.add_argument('--tsv', action='store_true')
    attn.set_defaults(handler=cmd_attn)

    grad = commands.add_parser('gradcheck', help='Finite-difference gradient check')
    grad.add_argument('--size', choices=sorted(SIZES), default='tiny')
    grad.add_argument('--seed', type=int, default=0)
    grad.set_defaults(handler=cmd_gradcheck)

    ablate = commands.add_parser('ablate', help='Run the accumulative ablation ladder')
    ablate.add_argument('--data', required=True, help='Training CMTD file')
    ablate.add_argument('--val', required=True, help='Validation CMTD file')
    ablate.add_argument('--config')
    ablate.add_argument('--seeds', default='0,1,2')
    ablate.add_argument('--iterations', type=int)
    ablate.add_argument('--tsv', action='store_true')
    ablate.add_argument('--progress', action='store_true')
    ablate.set_defaults(handler=cmd_ablate)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    """
    Run one command

    Returns:
        0 success, 1 usage or configuration error, 2 I/O or format error,
        3 gradient check failure
    """
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return e.code if isinstance(e.code, int) else EXIT_USAGE
    configure_logging(args.quiet, args.verbose)

    try:
        return args.handler(args)
    except (OSError, FormatError) as e:
        logger.error(f"{args.command}: {e}")
        return EXIT_IO
    except (CMTError, ValueError) as e:
        logger.error(f"{args.command}: {e}")
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
