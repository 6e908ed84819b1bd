"""Reweighted MB-SAC — Entry Point (CLI).

Kommandos / commands:
    train          Trainingslauf (mit oder ohne Reweighting)
    gradcheck      Finite-Differenzen-Prüfung der Gradienten
    eval           Deterministische Evaluation eines Checkpoints
    probe-weights  Median-Gewichte pro Tiefe und lambda_e
    compare        Mit/ohne Reweighting über mehrere Seeds
    robustness     Anteiliger Verlust mit schwächerem Ensemble
"""

import argparse
import logging
import os
import sys


def _int_list(text: str) -> list[int]:
    return [int(part) for part in text.split(",") if part.strip()]


def _float_list(text: str) -> list[float]:
    return [float(part) for part in text.split(",") if part.strip()]


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="main.py",
        description="Model-based SAC with a learned weight function for imaginary transitions.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    train = sub.add_parser("train", help="Trainingslauf / training run")
    train.add_argument("--config", required=True, help="JSON-Konfiguration")
    train.add_argument("--seed", type=int, default=None)
    train.add_argument("--out", required=True, help="Ausgabeordner")
    train.add_argument("--no-reweight", action="store_true", help="PE-SAC-Ablation ohne Gewichtsnetz")
    train.add_argument("--resume", default=None, help="Checkpoint-Ordner zum Fortsetzen")
    train.add_argument("--verbose", action="store_true")

    grad = sub.add_parser("gradcheck", help="Gradientenprüfung / gradient check")
    grad.add_argument("--scope", required=True, choices=["nn", "sac", "dynamics", "meta"])
    grad.add_argument("--seed", type=int, default=0)
    grad.add_argument("--instances", type=int, default=None)
    grad.add_argument("--verbose", action="store_true")

    ev = sub.add_parser("eval", help="Evaluation eines Checkpoints")
    ev.add_argument("--checkpoint", required=True)
    ev.add_argument("--episodes", type=int, default=5)
    ev.add_argument("--seed", type=int, default=0)
    ev.add_argument("--verbose", action="store_true")

    probe = sub.add_parser("probe-weights", help="Gewichte pro Tiefe und lambda_e")
    probe.add_argument("--checkpoint", required=True)
    probe.add_argument("--lambdas", type=_float_list, default=[0.1, 1.0, 3.0, 10.0, 30.0, 100.0])
    probe.add_argument("--out", required=True, help="Pfad der weights.csv")
    probe.add_argument("--rollouts", type=int, default=256)
    probe.add_argument("--seed", type=int, default=0)
    probe.add_argument("--verbose", action="store_true")

    cmp_ = sub.add_parser("compare", help="Mit/ohne Reweighting über Seeds")
    cmp_.add_argument("--config", required=True)
    cmp_.add_argument("--seeds", type=_int_list, required=True)
    cmp_.add_argument("--out", required=True)
    cmp_.add_argument("--verbose", action="store_true")

    rob = sub.add_parser("robustness", help="Verlust bei schwächerem Dynamikmodell")
    rob.add_argument("--config", required=True)
    rob.add_argument("--weak-hidden", type=_int_list, default=[64], help="Hidden-Größen des schwachen Ensembles, z.B. 64")
    rob.add_argument("--seeds", type=_int_list, required=True)
    rob.add_argument("--out", required=True)
    rob.add_argument("--verbose", action="store_true")
    return parser


def main(argv: list[str] | None = None) -> int:
    # Sicherstellen, dass das Projekt-Root im Pfad ist
    project_root = os.path.dirname(os.path.abspath(__file__))
    if project_root not in sys.path:
        sys.path.insert(0, project_root)

    from src.core.errors import RewMbError
    from src.core.gradcheck import run_gradcheck
    from src.core.trainer import compare, robustness, run_eval, run_training, run_weight_probe
    from src.utils.config import ConfigManager
    from src.utils.logger import setup_logging

    args = build_parser().parse_args(argv)
    console_level = logging.INFO if args.verbose else logging.WARNING
    log_dir = os.path.join(args.out, "logs") if args.command in ("train", "compare", "robustness") else "logs"
    logger = setup_logging(log_dir, console_level=console_level)

    try:
        if args.command == "train":
            overrides: dict = {}
            if args.seed is not None:
                overrides["seed"] = args.seed
            if args.no_reweight:
                overrides["reweight_enabled"] = False
            manager = ConfigManager(args.config, overrides)
            config = manager.to_train_config()
            os.makedirs(args.out, exist_ok=True)
            manager.save(os.path.join(args.out, "config.json"))
            out = run_training(config, args.out, resume=args.resume)
            print(f"Training abgeschlossen: {out}")
        elif args.command == "gradcheck":
            result = run_gradcheck(args.scope, seed=args.seed, instances=args.instances)
            for report in result.reports:
                print(report)
            control = result.control
            print(f"Negativkontrolle: {'erkannt' if control is not None and not control.passed else 'NICHT erkannt'}")
            print("PASS" if result.passed else "FAIL")
            return result.exit_code
        elif args.command == "eval":
            mean, std = run_eval(args.checkpoint, args.episodes, args.seed)
            print(f"mean_return={mean:.6f} std_return={std:.6f} episodes={args.episodes}")
        elif args.command == "probe-weights":
            rows = run_weight_probe(args.checkpoint, args.lambdas, args.out, args.rollouts, args.seed)
            print(f"{len(rows)} Zeilen geschrieben: {args.out}")
        elif args.command == "compare":
            config = ConfigManager(args.config).to_train_config()
            rows = compare(config, args.seeds, args.out)
            for row in rows:
                print(row)
        elif args.command == "robustness":
            config = ConfigManager(args.config).to_train_config()
            rows = robustness(config, args.weak_hidden, args.seeds, args.out)
            for row in rows:
                print(row)
    except RewMbError as e:
        logger.error("%s", e)
        print(f"[ERROR] {e}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
