import argparse

from .data_commands import cmd_ingest, cmd_synth
from .eval_commands import cmd_eval, cmd_infer
from .train_commands import cmd_stats, cmd_train
from .verify_commands import SUITES, cmd_verify


def common_flags() -> argparse.ArgumentParser:
    """Flags accepted by every subcommand"""
    parser = argparse.ArgumentParser(add_help=False)
    parser.add_argument("--seed", type=int, default=None, help="Seed for every random stream of the command")
    parser.add_argument("--config", default=None, help="YAML config (sections encoder, decoder, inp, teacher, train, score)")
    parser.add_argument("--data", default=None, help="Dataset manifest, case directory or sample blob")
    parser.add_argument("--out", default=None, help="Output directory")
    parser.add_argument("--ckpt", default=None, help="Checkpoint path")
    parser.add_argument("--combos", default=None, help="'all' or a comma list of combination indices 1..7")
    parser.add_argument("--heatmaps", action="store_true", help="Write per-sample heatmap PNGs")
    parser.add_argument("--threads", type=int, default=None, help="BLAS thread count; 1 for strict determinism")
    parser.add_argument("--verify-f64", action="store_true", help="Run in 64-bit precision")
    parser.add_argument("-d", "--debug", action="store_true", help="Enable debug logging")
    return parser


def _add_synth(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--n-normal", type=int, default=300, help="Normal training samples")
    parser.add_argument("--n-abnormal", type=int, default=100, help="Abnormal test samples")
    parser.add_argument("--n-test-normal", type=int, default=None, help="Normal test samples (default: --n-abnormal)")
    parser.add_argument("--size", type=int, default=64, help="Image side length")


def _add_ingest(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--axis", type=int, default=2, choices=(0, 1, 2), help="Slicing axis")
    parser.add_argument("--slice-start", type=int, default=80, help="First slice index (inclusive)")
    parser.add_argument("--slice-stop", type=int, default=120, help="Last slice index (inclusive)")
    parser.add_argument("--stride", type=int, default=5, help="Slice stride")


def _add_train(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--resume", default=None, help="Continue from a stats or periodic checkpoint")
    parser.add_argument("-q", "--quiet", action="store_true", help="Hide the progress bar")


def _add_verify(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--suite", default="all", choices=(*SUITES, "all"), help="Verification suite")


# name -> (handler, extra arguments, help)
COMMANDS = {
    "synth": (cmd_synth, _add_synth, "Generate the seeded synthetic dataset"),
    "ingest": (cmd_ingest, _add_ingest, "Slice NIfTI case directories into a dataset"),
    "stats": (cmd_stats, None, "Precompute full-modality reference statistics"),
    "train": (cmd_train, _add_train, "Train the student"),
    "eval": (cmd_eval, None, "Evaluate a checkpoint over modality combinations"),
    "infer": (cmd_infer, None, "Score one sample blob and export its heatmap"),
    "verify": (cmd_verify, _add_verify, "Run the verification suites"),
}


def register_all_commands(subparsers) -> None:
    """Register all subcommands on an argparse subparsers object"""
    shared = common_flags()
    for name, (handler, add_arguments, help_text) in COMMANDS.items():
        parser = subparsers.add_parser(name, parents=[shared], help=help_text)
        if add_arguments is not None:
            add_arguments(parser)
        parser.set_defaults(handler=handler, command=name)
