import argparse
import logging
import sys
from typing import List, Optional

from app.core.config import settings
from app.core.deps import configure_logging
from app.core.errors import OrePanelError
from app.schemas.run import load_run_config
from app.services.pipeline_service import COMMANDS, pipeline_service

logger = logging.getLogger(__name__)

HELP = {
    "grid": "build the tile grid and assign tiles to deposits",
    "classify": "classify deposit life-cycle statuses",
    "ingest": "read masks or an outcome table into outcomes_raw.csv",
    "screen": "screen outcomes for outliers and z-score wealth",
    "panel": "assemble the tile x period panel",
    "stack": "build stacked datasets for every stacked specification",
    "estimate": "run every configured specification",
    "describe": "distance bins, relative trajectories and balancing tests",
    "synth": "generate a synthetic input set with known effects",
    "all": "run grid through describe",
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="orepanel", description=f"{settings.PROJECT_NAME} spatial panel pipeline")
    sub = parser.add_subparsers(dest="command", required=True, metavar="command")
    for command in COMMANDS:
        cmd = sub.add_parser(command, help=HELP[command])
        cmd.add_argument("--config", "-c", required=True, help="path to the run config JSON")
        cmd.add_argument("--log-config", default=None, help="logging ini file (default: LOGGING_CONFIG)")
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    configure_logging(args.log_config)
    try:
        config = load_run_config(args.config)
        stages = pipeline_service.run(args.command, config)
    except OrePanelError as e:
        print(f"orepanel {args.command}: {e.detail}", file=sys.stderr)
        return e.exit_code
    logger.info("%s finished: %s", args.command, ", ".join(stages))
    return 0


if __name__ == "__main__":
    sys.exit(main())
