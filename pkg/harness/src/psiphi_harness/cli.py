import argparse
import logging
import sys
from typing import List, Optional

from psiphi_core.interfaces import ConfigError, InvariantViolation

from .runner import ExperimentRunner, load_config

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_INVARIANT = 1
EXIT_CONFIG = 2

DEMO_COMMANDS = ("train-itd", "train-psiphi", "eval-irl", "eval-imitation", "eval-transfer", "dump-cumulants", "sweep-dim")


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument('--config', default=None, help='JSON experiment config (defaults apply when omitted)')
    common.add_argument('--seed', type=int, default=0, help='Root seed (default: 0)')
    common.add_argument('--out', default='runs', help='Output directory (default: runs)')
    common.add_argument('--debug', action='store_true', help='Enable debug logging')

    parser = argparse.ArgumentParser(description='Reward-free demonstrations, ITD and ΨΦ-learning on CoinGrid')
    commands = parser.add_subparsers(dest='command', required=True)
    commands.add_parser('gen-demos', parents=[common], help='Generate Boltzmann demonstrations')
    commands.add_parser(
        'check-bounds',
        parents=[common],
        help='Run the theorem property suites',
        description='Exits 1 when an exact bound, lemma or invariance check fails. Learned-reward '
                    'agreement is reported in invariance.csv and the theorems event only; it never '
                    'changes the exit code.'
    )
    for name in DEMO_COMMANDS:
        sub = commands.add_parser(name, parents=[common])
        sub.add_argument('--demos', default=None, help='Demo file from gen-demos (generated when omitted)')
        if name == 'eval-imitation':
            sub.add_argument('--no-rl', action='store_true', help='Score the ITD-only learner alone')
        if name == 'dump-cumulants':
            sub.add_argument('--checkpoint', default=None, help='Checkpoint to read Φ from (trains ITD when omitted)')
        if name == 'sweep-dim':
            sub.add_argument('--seeds', type=int, nargs='+', default=None, help='Seeds to sweep (default: --seed)')
    return parser


def run(args: argparse.Namespace) -> int:
    config, config_dict = load_config(args.config)
    runner = ExperimentRunner(config, args.seed, args.out, config_dict, args.command)
    command = args.command
    if command == 'gen-demos':
        runner.gen_demos()
    elif command == 'train-itd':
        runner.train_itd(args.demos)
    elif command == 'train-psiphi':
        runner.train_psiphi(args.demos)
    elif command == 'eval-irl':
        runner.eval_irl(args.demos)
    elif command == 'eval-imitation':
        runner.eval_imitation(args.demos, with_rl=not args.no_rl)
    elif command == 'eval-transfer':
        runner.eval_transfer(args.demos)
    elif command == 'dump-cumulants':
        runner.dump_cumulants(args.checkpoint, args.demos)
    elif command == 'sweep-dim':
        runner.sweep_dim(args.demos, tuple(args.seeds) if args.seeds else None)
    elif command == 'check-bounds':
        report = runner.check_bounds()
        if report.violations:
            raise InvariantViolation(f"{report.violations} exact check(s) failed")
    return EXIT_OK


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)

    logging.basicConfig(
        level=logging.DEBUG if args.debug else logging.INFO,
        format='%(asctime)s - %(name)s - %(levelname)s - %(message)s'
    )

    try:
        return run(args)
    except ConfigError as e:
        logger.error(f"Config error: {str(e)}")
        return EXIT_CONFIG
    except InvariantViolation as e:
        logger.error(f"Invariant violation: {str(e)}")
        return EXIT_INVARIANT


if __name__ == '__main__':
    sys.exit(main())
