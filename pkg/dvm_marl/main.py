"""Command-line entry point.

Usage:
    python -m dvm_marl train --config run.cfg [--domain spread2] [--algo maddpg_discrete]
                             [--condition dvm] [--seeds 0,1,2] [--out runs/x]
    python -m dvm_marl eval  --snapshot runs/x/snapshot_seed0.dvm --episodes 10 [--seed 0]
                             [--layout phase1] [--baselines]
    python -m dvm_marl grid  --snapshot runs/x/snapshot_seed0.dvm --resolution 21
                             --out grid.csv [--agent 0] [--layout phase2]

`train` writes the final parameters of seed k to ``snapshot_seed<k>.dvm`` and
the parameters right before and after DVM to ``snapshot_seed<k>_pre_dvm.dvm``
and ``snapshot_seed<k>_post_dvm.dvm``.

Exit status is 0 on success, 2 on configuration errors and 1 on I/O errors.
"""

import argparse
import logging
import sys
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from dvm_marl.config.experiment_config import load_experiment_config
from dvm_marl.config.settings import get_settings
from dvm_marl.core.errors import DvmError
from dvm_marl.core.models import Algorithm, Condition, Domain
from dvm_marl.services.exp_harness import (
    LAYOUTS,
    dump_policy_grid,
    evaluate_policy,
    grid_agreement,
    layout_spec,
    run_experiment,
    write_metrics,
)
from dvm_marl.services.particle_envs import (
    landmark_anchors,
    random_policy_return,
    spread_oracle_return,
)
from dvm_marl.services.snapshot import read_snapshot, write_snapshot
from dvm_marl.utils.logger import get_logger

logger = logging.getLogger(__name__)

EXIT_IO_ERROR = 1
EXIT_CONFIG_ERROR = 2


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="dvm-marl",
        description="Multiagent RL with distillation and value matching on particle domains",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    train = sub.add_parser("train", help="Run the Phase I -> condition -> Phase II protocol")
    train.add_argument("--config", type=Path, help="key = value experiment file")
    train.add_argument("--domain", choices=[d.value for d in Domain])
    train.add_argument("--algo", choices=[a.value for a in Algorithm])
    train.add_argument("--condition", choices=[c.value for c in Condition])
    train.add_argument("--seeds", help="Comma-separated seeds, e.g. 0,1,2")
    train.add_argument("--out", type=Path, help="Output directory")

    evaluate = sub.add_parser("eval", help="Evaluate a parameter snapshot")
    evaluate.add_argument("--snapshot", type=Path, required=True)
    evaluate.add_argument("--episodes", type=int, required=True)
    evaluate.add_argument("--seed", type=int, default=0)
    evaluate.add_argument(
        "--layout", choices=sorted(LAYOUTS), help="Evaluate under another phase layout"
    )
    evaluate.add_argument(
        "--baselines",
        action="store_true",
        help="Also print the random-policy and assignment-oracle returns",
    )

    grid = sub.add_parser("grid", help="Dump one agent's greedy policy over a lattice")
    grid.add_argument("--snapshot", type=Path, required=True)
    grid.add_argument("--resolution", type=int, required=True)
    grid.add_argument("--out", type=Path, required=True)
    grid.add_argument("--agent", type=int, default=0)
    grid.add_argument("--layout", choices=sorted(LAYOUTS))
    return parser


def cmd_train(args: argparse.Namespace) -> int:
    overrides = {
        "domain": args.domain,
        "algorithm": args.algo,
        "condition": args.condition,
        "seeds": args.seeds,
        "output_dir": str(args.out) if args.out else None,
    }
    cfg = load_experiment_config(args.config, overrides)
    out_dir = Path(cfg.output_dir or get_settings().output_dir)

    result = run_experiment(cfg)
    write_metrics(result.records, out_dir / "metrics.csv")
    for seed, snapshot in result.snapshots.items():
        write_snapshot(snapshot, out_dir / f"snapshot_seed{seed}.dvm")
        for stage, staged in result.stage_snapshots.get(seed, {}).items():
            write_snapshot(staged, out_dir / f"snapshot_seed{seed}_{stage}.dvm")
    logger.info(f"Finished {len(result.snapshots)} seeds; outputs in {out_dir}")
    return 0


def cmd_eval(args: argparse.Namespace) -> int:
    snapshot = read_snapshot(args.snapshot)
    spec = layout_spec(snapshot, args.layout)
    mean_return = evaluate_policy(
        snapshot.bundles(), spec, args.episodes, np.random.default_rng(args.seed)
    )
    print(repr(mean_return))
    if not args.baselines:
        return 0

    # both references see the same start configurations as the policy
    random_return = random_policy_return(
        spec, args.episodes, np.random.default_rng(args.seed), snapshot.algorithm.is_discrete
    )
    print(f"random {random_return!r}")
    if spec.is_spread:
        oracle = spread_oracle_return(spec, args.episodes, np.random.default_rng(args.seed))
        print(f"oracle {oracle!r}")
        if oracle > random_return:
            print(f"gap_closed {(mean_return - random_return) / (oracle - random_return)!r}")
    return 0


def cmd_grid(args: argparse.Namespace) -> int:
    snapshot = read_snapshot(args.snapshot)
    spec = layout_spec(snapshot, args.layout)
    rows = dump_policy_grid(snapshot.bundles(), spec, args.agent, args.resolution, args.out)
    agreement = grid_agreement(rows, landmark_anchors(spec.num_landmarks, spec.physics))
    logger.info(f"{agreement:.1%} of cells push toward the nearest landmark")
    return 0


COMMANDS = {"train": cmd_train, "eval": cmd_eval, "grid": cmd_grid}


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    get_logger("dvm_marl", get_settings().log_level)

    try:
        return COMMANDS[args.command](args)
    except OSError as e:
        # SnapshotError lands here too
        logger.error(f"I/O error: {e}")
        return EXIT_IO_ERROR
    except DvmError as e:
        logger.error(f"{type(e).__name__}: {e}")
        return EXIT_CONFIG_ERROR


if __name__ == "__main__":
    sys.exit(main())
