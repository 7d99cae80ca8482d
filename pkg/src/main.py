"""Command-line entry point for certified reduced-basis experiments."""

import argparse
import logging
import sys
from collections.abc import Sequence
from pathlib import Path

from .config import ExperimentConfig, load_config
from .errors import ConfigError, NumericalError, RigorViolationError
from .experiments import cmd_constants, cmd_plotdata, cmd_test, cmd_train, cmd_truth

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_NUMERICAL = 2
EXIT_RIGOR = 3


class ExperimentRunner:
    """Loads a configuration, sets up logging and dispatches subcommands."""

    def __init__(self, config_path: Path, output_dir: Path | None = None):
        """Initialize the runner."""
        self.config: ExperimentConfig = load_config(config_path)
        self.output_dir = output_dir or Path(self.config.output.directory)
        self.setup_logging()

    def setup_logging(self) -> None:
        """Setup logging configuration."""
        handlers: list[logging.Handler] = [logging.StreamHandler(sys.stdout)]
        if self.config.logging.file:
            self.output_dir.mkdir(parents=True, exist_ok=True)
            handlers.append(
                logging.FileHandler(
                    self.output_dir / self.config.logging.file, encoding="utf-8"
                )
            )
        logging.basicConfig(
            level=getattr(logging, self.config.logging.level),
            format=self.config.logging.format,
            handlers=handlers,
            force=True,
        )

        # Reduce noise from external libraries
        logging.getLogger("matplotlib").setLevel(logging.WARNING)

    def run(self, args: argparse.Namespace) -> None:
        """Run one subcommand."""
        logger.info(f"Running '{args.command}' (config hash {self.config.config_hash()[:12]})")
        if args.command == "truth":
            if args.mu is None:
                raise ValueError("The truth command needs --mu")
            cmd_truth(self.config, args.mu, args.homogeneous, self.output_dir, args.states)
        elif args.command == "train":
            cmd_train(self.config, self.output_dir)
        elif args.command == "test":
            basis = args.basis or self.output_dir / "basis.npz"
            cmd_test(self.config, basis, args.seed, self.output_dir)
        elif args.command == "plotdata":
            cmd_plotdata(self.output_dir, args.svg or self.config.output.svg)
        elif args.command == "constants":
            cmd_constants(self.config, [args.mu] if args.mu is not None else None, self.output_dir)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="certified-rb",
        description="Certified reduced-basis experiments for damped waves on networks",
    )
    parser.add_argument("command", choices=["truth", "train", "test", "plotdata", "constants"])
    parser.add_argument("--config", type=Path, default=Path("diamond.yaml"))
    parser.add_argument("--output", type=Path, default=None, help="output directory")
    parser.add_argument("--mu", type=float, default=None)
    parser.add_argument("--basis", type=Path, default=None)
    parser.add_argument("--seed", type=int, default=None)
    parser.add_argument("--svg", action="store_true")
    parser.add_argument(
        "--homogeneous", action="store_true", help="truth run without sources/boundary data"
    )
    parser.add_argument(
        "--states", action="store_true", help="truth export with all state coefficients"
    )
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    """Main entry point; returns the process exit code."""
    args = build_parser().parse_args(argv)
    try:
        runner = ExperimentRunner(args.config, args.output)
        runner.run(args)
    except RigorViolationError as e:
        logger.error(f"Rigor violation: {e}")
        return EXIT_RIGOR
    except NumericalError as e:
        logger.error(f"Numerical failure: {e}")
        return EXIT_NUMERICAL
    except (ConfigError, ValueError, FileNotFoundError) as e:
        # logging may not be configured yet when the config itself is broken
        print(f"Error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
