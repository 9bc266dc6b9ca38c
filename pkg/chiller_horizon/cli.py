import argparse
import logging
import sys
from pathlib import Path
from typing import List, Optional

import uvicorn

from chiller_horizon.core.bench import (
    CONTROLLER_ROWS,
    VARIANTS,
    cmd_compare,
    cmd_eval,
    cmd_fit_curves,
    cmd_forecast,
    cmd_gen_data,
    cmd_oracle,
    cmd_train,
    with_seed,
)
from chiller_horizon.core.config import BenchConfig, load_bench_config
from chiller_horizon.core.errors import ChillerHorizonError, TrainingDivergedError

logger = logging.getLogger(__name__)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="chiller-horizon", description="Chiller plant control benchmark")
    parser.add_argument("--config", help="Bench configuration file (JSON)")
    parser.add_argument("--seed", type=int, help="Override the training and episode seeds")
    parser.add_argument("--out", default="out", help="Output directory")
    parser.add_argument("--deterministic", action="store_true", help="Single-worker evaluation everywhere")
    parser.add_argument("--log-level", default="INFO", help="Logging level")
    sub = parser.add_subparsers(dest="command", required=True)

    fit = sub.add_parser("fit-curves", help="Fit cubic power curves to (chiller_id, plr, power_kw) samples")
    fit.add_argument("samples", help="Samples file")

    gen = sub.add_parser("gen-data", help="Write the evaluation load trace and optional curve samples")
    gen.add_argument("--curves", action="store_true", help="Also write noisy power-curve samples")
    gen.add_argument("--sigma", type=float, default=10.0, help="Sample noise, kW")
    gen.add_argument("--samples", type=int, default=20, help="Samples per chiller")

    tr = sub.add_parser("train", help="Train a PPO policy")
    tr.add_argument("--variant", choices=VARIANTS, default="receding_horizon")
    tr.add_argument("--smoke", action="store_true", help="Run only a couple of batches")
    tr.add_argument("--resume", help="Checkpoint to resume from")

    ev = sub.add_parser("eval", help="Evaluate one controller on the evaluation trace")
    ev.add_argument("controller", choices=CONTROLLER_ROWS)

    sub.add_parser("compare", help="Evaluate every controller and write the comparison report")
    sub.add_parser("oracle", help="Oracle lower-bound trajectory on the evaluation trace")
    sub.add_parser("forecast", help="Score the forecasters on the evaluation trace")

    serve = sub.add_parser("serve", help="Run the HTTP service")
    serve.add_argument("--host", default="127.0.0.1", help="Host to bind the server to")
    serve.add_argument("--port", default=8000, type=int, help="Port to bind the server to")
    serve.add_argument("--reload", action="store_true", help="Enable auto-reload")
    return parser


def run(args: argparse.Namespace, cfg: BenchConfig) -> None:
    out = Path(args.out)
    workers = 1 if args.deterministic else 4
    if args.deterministic:
        cfg = cfg.model_copy(update={"oracle": cfg.oracle.model_copy(update={"workers": 1})})

    if args.command == "fit-curves":
        rows = cmd_fit_curves(args.samples, out)
        print((out / "fit_report.txt").read_text(encoding="utf-8"), end="")
        if all(r.error for r in rows):
            raise ChillerHorizonError("no chiller could be fitted")
    elif args.command == "gen-data":
        for path in cmd_gen_data(cfg, out, args.curves, args.sigma, args.samples):
            print(path)
    elif args.command == "train":
        outcome = cmd_train(cfg, out, args.variant, args.smoke, args.resume)
        print(f"checkpoint: {outcome.checkpoint_path}")
        print(f"curve: {outcome.curve_path}")
    elif args.command == "eval":
        row = cmd_eval(cfg, out, args.controller)
        print(f"{row.name}: {row.energy_kwh:.1f} kWh, hard-violation fraction {row.hard_violation_fraction:.4f}")
    elif args.command == "compare":
        cmd_compare(cfg, out, workers=workers)
        print((out / "report.txt").read_text(encoding="utf-8"), end="")
    elif args.command == "oracle":
        print(f"oracle energy: {cmd_oracle(cfg, out):.1f} kWh")
    elif args.command == "forecast":
        for model_id, score in cmd_forecast(cfg, out).items():
            print(f"{model_id}: NMAE {score:.4f}")
    elif args.command == "serve":
        uvicorn.run(
            "chiller_horizon.main:app",
            host=args.host,
            port=args.port,
            reload=args.reload,
            factory=False
        )


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=getattr(logging, str(args.log_level).upper(), logging.INFO),
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )
    try:
        cfg = with_seed(load_bench_config(args.config), args.seed)
        logger.info("%s started", args.command)
        run(args, cfg)
        logger.info("%s finished", args.command)
    except TrainingDivergedError as exc:
        print(f"error: {exc} (last good checkpoint: {exc.checkpoint_path})", file=sys.stderr)
        return exc.exit_code
    except ChillerHorizonError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    return 0


if __name__ == "__main__":
    sys.exit(main())
