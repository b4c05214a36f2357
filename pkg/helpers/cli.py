"""
Command line entry point of the 3D-prior fine-tuning pipeline: python -m helpers.cli <command> --help
"""
import argparse
import logging
import os
import sys
from typing import Callable, Dict, List, Optional, Sequence

import cv2
import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
import pandas as pd  # noqa: E402

from helpers import diffmath as dm  # noqa: E402
from helpers import evalkit  # noqa: E402
from helpers.errors import ConfigError, ContractViolation, DatasetError  # noqa: E402
from helpers.file_helper import FileHelper  # noqa: E402
from helpers.gradient_suite import run_suite  # noqa: E402
from helpers.renderer import write_depth  # noqa: E402
from helpers.scenegen import SceneDataset, SceneGenerator  # noqa: E402
from helpers.trainer import load_encoder, load_model, train  # noqa: E402
from triplane_data_classes import TrainConfig, Variant  # noqa: E402

logger = logging.getLogger(__name__)

DEFAULT_OUT = {"gen-data": None, "pretrain-teacher": "runs/teacher", "eval": "runs/eval", "ablate": "runs/ablate",
               "render": "runs/render", "report": "runs/report"}
TEACHER_FILE = "teacher.tpck"
EVAL_FILE = "eval.json"
REPORT_FILE = "summary.md"
LOSS_COLUMNS = ["rgb", "depth", "dist", "norm", "total"]


class UsageError(Exception):
    pass


class ArgumentParser(argparse.ArgumentParser):
    """
    Raises on bad arguments instead of exiting, so run() can map them to an exit code
    """

    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: {message}")


def parse_overrides(items: Sequence[str]) -> Dict[str, str]:
    overrides: Dict[str, str] = {}
    for item in items or []:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got '{item}'")
        key, value = (part.strip() for part in item.split("=", 1))
        overrides[key] = value
    return overrides


def load_config(args: argparse.Namespace) -> TrainConfig:
    """
    The config file is authoritative; --set and the explicit flags replace single keys
    """
    text, source = "", "<defaults>"
    if args.config:
        if not os.path.exists(args.config):
            raise FileNotFoundError(f"{args.config}: config file not found")
        with open(args.config) as config_file:
            text, source = config_file.read(), args.config
    overrides = parse_overrides(args.set)
    if args.seed is not None:
        overrides["seed"] = str(args.seed)
    if args.data is not None:
        overrides["dataset_root"] = args.data
    if args.out is not None and args.command in ("train", "ablate"):
        overrides["out_dir"] = args.out
    return TrainConfig.from_text(text, overrides, source)


def output_dir(args: argparse.Namespace, config: TrainConfig) -> str:
    if args.command == "train":
        out = config.out_dir
    elif args.command == "gen-data":
        out = args.out or config.dataset_root
    else:
        out = args.out or DEFAULT_OUT[args.command]
    FileHelper.create_folder(out)
    FileHelper.write_text(os.path.join(out, FileHelper.CONFIG_FILE), config.to_text())
    return out


# -- commands ---------------------------------------------------------------------------------------------------------

def gen_data(args: argparse.Namespace) -> int:
    config = load_config(args)
    root = output_dir(args, config)
    generator = SceneGenerator(config.camera(), config.image_resolution, args.texture_correlation)
    print(f"Generate {args.n} scenes with seed {config.seed}")
    manifest = generator.make_dataset(args.n, config.seed, root, config.val_fraction)
    if args.cue_conflict > 0:
        print(f"Generate {args.cue_conflict} cue-conflict scenes")
        generator.make_cue_conflict(args.cue_conflict, config.seed, root)
    print(f"Done: {manifest.train_size} train / {manifest.val_size} val items in {root}")
    return 0


def pretrain_teacher(args: argparse.Namespace) -> int:
    config = load_config(args)
    out = output_dir(args, config)
    dataset = SceneDataset(config.dataset_root)
    print(f"Pretrain the teacher encoder on {len(dataset)} scenes for {args.epochs} epochs")
    evalkit.pretrain_teacher(dataset, config.encoder_config(), args.epochs, config.seed,
                             os.path.join(out, TEACHER_FILE), learning_rate=args.learning_rate,
                             val_fraction=config.val_fraction)
    return 0


def train_command(args: argparse.Namespace) -> int:
    config = load_config(args)
    output_dir(args, config)
    print("Train with the following configuration:")
    print(config.to_text(), end="")
    checkpoint = train(config)
    print("Final checkpoint:", checkpoint)
    return 0


def eval_command(args: argparse.Namespace) -> int:
    config = load_config(args)
    out = output_dir(args, config)
    print("Load encoder from", args.checkpoint)
    encoder = load_encoder(args.checkpoint)
    teacher = None
    if config.teacher_checkpoint and os.path.exists(config.teacher_checkpoint):
        teacher = load_encoder(config.teacher_checkpoint)
    dataset = SceneDataset(config.dataset_root)
    cue_root = os.path.join(config.dataset_root, FileHelper.CUE_CONFLICT_FOLDER)
    cue_dataset = SceneDataset(cue_root) if os.path.exists(cue_root) else None
    report = evalkit.evaluate_encoder(encoder, os.path.basename(args.checkpoint), dataset, cue_dataset,
                                      config.seed, config.val_fraction, teacher=teacher)
    path = os.path.join(out, EVAL_FILE)
    FileHelper.write_json(path, report.to_dict())
    print(f"Probe accuracy {report.probe.accuracy:.4f}, shape bias {report.shape_bias.bias}, "
          f"depth RMSE {report.depth_rmse:.4f}")
    print("Save evaluation to", path)
    return 0


def ablate_command(args: argparse.Namespace) -> int:
    config = load_config(args)
    out = output_dir(args, config)
    try:
        variants = [Variant(name) for name in args.variants.split(",")] if args.variants else list(Variant)
    except ValueError as err:
        raise ConfigError(f"unknown variant in '{args.variants}'") from err
    seeds = [int(seed) for seed in args.seeds.split(",")] if args.seeds else list(evalkit.ABLATION_SEEDS)
    print(f"Run {len(variants)} variants for seeds {seeds}")
    rows = evalkit.ablate(config, out, variants, seeds)
    print(f"Wrote {len(rows)} rows to", os.path.join(out, evalkit.ABLATION_FILE))
    return 0


def render_command(args: argparse.Namespace) -> int:
    config = load_config(args)
    out = output_dir(args, config)
    print("Load model from", args.checkpoint)
    model, model_config = load_model(args.checkpoint)
    dataset = SceneDataset(config.dataset_root)
    if not 0 <= args.index < len(dataset):
        raise DatasetError(f"{config.dataset_root}: item {args.index} out of range (0..{len(dataset) - 1})")
    image = dataset.image(args.index)
    with dm.no_grad():
        reconstruction = model.reconstruct(model.encoder(image[None]))
    rendered = reconstruction.image.numpy()
    depth = reconstruction.depth.numpy()
    camera = model_config.camera()
    stem = os.path.join(out, f"render_{FileHelper.item_stem(args.index)}")
    FileHelper.write_image(f"{stem}.png", rendered)
    FileHelper.write_depth_image(f"{stem}_depth.png", depth, camera.near, camera.far)
    write_depth(f"{stem}.tpdm", depth)
    oracle = dataset.depth(args.index)
    if oracle.shape != depth.shape:
        oracle = cv2.resize(oracle, depth.shape[::-1], interpolation=cv2.INTER_NEAREST)
    print(f"Depth RMSE against the oracle: {float(np.sqrt(np.mean((depth - oracle) ** 2))):.4f}")
    print("Save render to", f"{stem}.png")
    return 0


def grad_check(args: argparse.Namespace) -> int:
    def show(check) -> None:
        print(f"{check.name:<36} {check.error:.3e}  {'PASS' if check.passed else 'FAIL'}")

    results = run_suite(args.seed or 0, progress=show)
    failed = [check.name for check in results if not check.passed]
    if failed:
        print(f"{len(failed)} of {len(results)} gradient checks failed:", ", ".join(failed))
        return 2
    print(f"All {len(results)} gradient checks passed")
    return 0


def _loss_figure(metrics: pd.DataFrame, path: str) -> None:
    figure, axes = plt.subplots(1, len(LOSS_COLUMNS), figsize=(4 * len(LOSS_COLUMNS), 3))
    for axis, column in zip(axes, LOSS_COLUMNS):
        axis.plot(metrics["step"], metrics[column])
        axis.set_title(column)
        axis.set_xlabel("step")
    figure.tight_layout()
    figure.savefig(path)
    plt.close(figure)


def _ablation_figure(frame: pd.DataFrame, metric: str, path: str) -> None:
    grouped = frame[frame["metric"] == metric].groupby("variant")["value"]
    means, stds = grouped.mean(), grouped.std().fillna(0.0)
    figure, axis = plt.subplots(figsize=(6, 3))
    axis.bar(means.index, means.values, yerr=stds.values, capsize=3)
    axis.set_title(metric)
    axis.tick_params(axis="x", rotation=30)
    figure.tight_layout()
    figure.savefig(path)
    plt.close(figure)


def loss_summary(metrics: pd.DataFrame) -> List[str]:
    first, last = metrics.iloc[0], metrics.iloc[-1]
    lines = [f"{len(metrics)} steps, final total loss {last['total']:.4f}", ""]
    for column in ("rgb", "depth"):
        start = first[column]
        change = (start - last[column]) / start * 100.0 if start > 0 else 0.0
        lines.append(f"- L_{column}: {start:.4f} -> {last[column]:.4f} ({change:.1f}% decrease)")
    return lines


def report(args: argparse.Namespace) -> int:
    config = load_config(args)
    out = output_dir(args, config)
    metrics_path = args.metrics or os.path.join(config.out_dir, FileHelper.METRICS_FILE)
    ablation_path = args.ablation or os.path.join(DEFAULT_OUT["ablate"], evalkit.ABLATION_FILE)
    have_metrics, have_ablation = os.path.exists(metrics_path), os.path.exists(ablation_path)
    if not (have_metrics or have_ablation):
        raise FileNotFoundError(f"neither {metrics_path} nor {ablation_path} exists")
    lines = ["# Run report", ""]
    if have_metrics:
        print("Read metrics from", metrics_path)
        metrics = pd.read_csv(metrics_path)
        if metrics.empty:
            raise DatasetError(f"{metrics_path}: no metrics rows")
        _loss_figure(metrics, os.path.join(out, "losses.png"))
        lines += ["## Training", ""] + loss_summary(metrics) + ["", "![losses](losses.png)", ""]
    if have_ablation:
        print("Read ablation results from", ablation_path)
        frame = pd.read_csv(ablation_path)
        lines += ["## Ablation", "", "```", evalkit.summarize_ablation(frame).rstrip(), "```", ""]
        for metric in sorted(frame["metric"].unique()):
            name = f"ablation_{FileHelper.clean_string(metric)}.png"
            _ablation_figure(frame, metric, os.path.join(out, name))
            lines.append(f"![{metric}]({name})")
        lines.append("")
    path = os.path.join(out, REPORT_FILE)
    FileHelper.write_text(path, "\n".join(lines))
    print("Save report to", path)
    return 0


COMMANDS: Dict[str, Callable[[argparse.Namespace], int]] = {
    "gen-data": gen_data, "pretrain-teacher": pretrain_teacher, "train": train_command, "eval": eval_command,
    "ablate": ablate_command, "render": render_command, "grad-check": grad_check, "report": report}


def build_parser() -> ArgumentParser:
    common = ArgumentParser(add_help=False)
    common.add_argument(
        '-c', '--config',
        metavar='FILE',
        default=None,
        help='Flat "key = value" config file (default: built-in defaults)')
    common.add_argument(
        '--set',
        metavar='KEY=VALUE',
        action='append',
        default=[],
        help='Override one config key, repeatable')
    common.add_argument(
        '-s', '--seed',
        metavar='S',
        type=int,
        default=None,
        help='Seed of every random choice (default: the config seed)')
    common.add_argument(
        '-d', '--data',
        metavar='DIR',
        default=None,
        help='Dataset root (default: dataset_root of the config)')
    common.add_argument(
        '-o', '--out',
        metavar='DIR',
        default=None,
        help='Output directory')
    common.add_argument(
        '-v', '--verbose',
        action='store_true',
        help='Log at DEBUG level')

    argparser = ArgumentParser(prog="python -m helpers.cli", description=__doc__)
    commands = argparser.add_subparsers(dest="command", metavar="COMMAND", required=True)

    parser = commands.add_parser("gen-data", parents=[common], help="Generate a synthetic scene dataset")
    parser.add_argument(
        '-n', '--n',
        metavar='N',
        type=int,
        default=256,
        help='Number of scenes (default: 256)')
    parser.add_argument(
        '--cue-conflict',
        metavar='N',
        type=int,
        default=64,
        help='Number of cue-conflict scenes, 0 to skip (default: 64)')
    parser.add_argument(
        '--texture-correlation',
        metavar='P',
        type=float,
        default=0.75,
        help='Probability that a scene uses the texture of its shape class (default: 0.75)')

    parser = commands.add_parser("pretrain-teacher", parents=[common],
                                 help="Pretrain the teacher encoder by shape classification")
    parser.add_argument(
        '-e', '--epochs',
        metavar='E',
        type=int,
        default=20,
        help='Number of epochs (default: 20)')
    parser.add_argument(
        '--learning-rate',
        metavar='LR',
        type=float,
        default=evalkit.TEACHER_LEARNING_RATE,
        help=f'Adam learning rate (default: {evalkit.TEACHER_LEARNING_RATE})')

    commands.add_parser("train", parents=[common], help="Fine-tune the encoder through the 3D bottleneck")

    parser = commands.add_parser("eval", parents=[common], help="Evaluate an encoder")
    parser.add_argument(
        '-k', '--checkpoint',
        metavar='FILE',
        required=True,
        help='Teacher or trained model checkpoint')

    parser = commands.add_parser("ablate", parents=[common], help="Train and evaluate the ablation grid")
    parser.add_argument(
        '--variants',
        metavar='LIST',
        default=None,
        help=f'Comma-separated variants out of {",".join(v.value for v in Variant)} (default: all)')
    parser.add_argument(
        '--seeds',
        metavar='LIST',
        default=None,
        help=f'Comma-separated seeds (default: {",".join(str(s) for s in evalkit.ABLATION_SEEDS)})')

    parser = commands.add_parser("render", parents=[common], help="Render the reconstruction of a dataset item")
    parser.add_argument(
        '-k', '--checkpoint',
        metavar='FILE',
        required=True,
        help='Trained model checkpoint')
    parser.add_argument(
        '-i', '--index',
        metavar='I',
        type=int,
        default=0,
        help='Dataset item to render (default: 0)')

    commands.add_parser("grad-check", parents=[common], help="Run the finite-difference gradient suite")

    parser = commands.add_parser("report", parents=[common], help="Plot metrics and ablation results")
    parser.add_argument(
        '--metrics',
        metavar='FILE',
        default=None,
        help='Training metrics CSV (default: metrics.csv in out_dir of the config)')
    parser.add_argument(
        '--ablation',
        metavar='FILE',
        default=None,
        help=f'Ablation CSV (default: {os.path.join(DEFAULT_OUT["ablate"], evalkit.ABLATION_FILE)})')
    return argparser


def run(argv: Optional[Sequence[str]] = None) -> int:
    """
    Runs one command
    @return: 0 on success, 1 on user errors, 2 on internal errors and failed gradient checks
    """
    try:
        args = build_parser().parse_args(argv)
    except UsageError as err:
        print(err, file=sys.stderr)
        return 1
    except SystemExit as exit_request:
        return exit_request.code or 0
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except (ConfigError, DatasetError, ContractViolation, FileNotFoundError) as err:
        logger.error("%s failed: %s", args.command, err)
        print(f"error: {err}", file=sys.stderr)
        return 1
    except KeyboardInterrupt:
        print("Interrupted", file=sys.stderr)
        return 2
    except Exception as err:
        logger.exception("%s failed with an internal error", args.command)
        print(f"internal error: {err!r}", file=sys.stderr)
        return 2


if __name__ == '__main__':
    sys.exit(run())
