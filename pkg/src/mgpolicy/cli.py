"""Command-line front end for the full pipeline.

    mgpolicy collect          --task button --out runs/button
    mgpolicy train-tokenizer  --out runs/button
    mgpolicy train-mgt        --out runs/button
    mgpolicy eval             --out runs/button --variant mgp-long --episodes 20
    mgpolicy ablate           --out runs/button --sweep sampler.remask_ratio=0.5,0.7,0.85
    mgpolicy analyze          --out runs/button --episodes 10
    mgpolicy inspect-checkpoint runs/button/mgt.ckpt

Progress goes to stderr; results land in files under --out so runs can be
scripted. Reruns with identical config+seed overwrite every deterministic
artifact with identical bytes (only timing.csv accumulates). Exit codes:
0 ok, 2 configuration problem, 3 I/O problem, 4 training divergence.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from .config import default_config, load_config
from .errors import (CompatibilityError, ConfigError, ContractError,
                     FormatError, ParameterError, ShapeError, TrainingError)
from .harness import (ablate, collect_corpus, confidence_analysis, evaluate,
                      flip_rate_experiment, load_stage2, run_eval_episode,
                      run_stage1, run_stage2)

_CONFIG_ERRORS = (ConfigError, ParameterError, CompatibilityError,
                  ContractError, ShapeError)


def _say(msg: str):
    print(msg, file=sys.stderr)


def _build_parser() -> argparse.ArgumentParser:
    shared = argparse.ArgumentParser(add_help=False)
    shared.add_argument("--config", metavar="PATH",
                        help="config file of 'key = value' lines")
    shared.add_argument("--set", metavar="KEY=VALUE", action="append",
                        default=[], dest="overrides",
                        help="override one config key (repeatable)")
    shared.add_argument("--task", choices=("reach", "dynamic", "button"),
                        help="task id (sets per-task defaults when no "
                             "--config is given)")
    shared.add_argument("--seed", type=int, help="master seed")
    shared.add_argument("--out", metavar="DIR", help="artifact directory")

    p = argparse.ArgumentParser(
        prog="mgpolicy",
        description="masked generative policy pipeline on the toy suite")
    sub = p.add_subparsers(dest="command", required=True)

    sub.add_parser("collect", parents=[shared],
                   help="record the expert demonstration corpus")
    sub.add_parser("train-tokenizer", parents=[shared],
                   help="stage 1: fit the action tokenizer on the corpus")
    sub.add_parser("train-mgt", parents=[shared],
                   help="stage 2: fit the masked transformer")

    ev = sub.add_parser("eval", parents=[shared],
                        help="fixed-seed evaluation campaign")
    ev.add_argument("--variant", action="append", dest="variants",
                    metavar="NAME",
                    help="mgp-long, mgp-short, fullseq, wosm, or long:reuse / "
                         "long:random (repeatable; default from config)")
    ev.add_argument("--episodes", type=int, help="episodes per variant")
    ev.add_argument("--jobs", type=int, help="parallel rollout workers")

    ab = sub.add_parser("ablate", parents=[shared],
                        help="sweep one sampler/dropout key across values")
    ab.add_argument("--sweep", required=True, metavar="KEY=V1,V2,...",
                    help="e.g. sampler.remask_ratio=0.5,0.7,0.85")
    ab.add_argument("--variant", action="append", dest="variants",
                    metavar="NAME")
    ab.add_argument("--episodes", type=int)
    ab.add_argument("--jobs", type=int)

    an = sub.add_parser("analyze", parents=[shared],
                        help="confidence heatmaps, mask maps and flip rates")
    an.add_argument("--episodes", type=int,
                    help="long-horizon traces to analyze")
    an.add_argument("--maskings", default="bottom70,top70",
                    metavar="M1,M2,...",
                    help="flip-rate masking rules (default bottom70,top70)")

    ins = sub.add_parser("inspect-checkpoint",
                         help="summarize a checkpoint or corpus file")
    ins.add_argument("path", help="file to inspect")
    return p


def _config_from(args) -> "ExperimentConfig":
    if args.config:
        cfg = load_config(args.config)
    else:
        cfg = default_config(args.task or "reach")
    pairs = []
    if args.task:
        pairs.append(f"task={args.task}")
    if args.seed is not None:
        pairs.append(f"seed={args.seed}")
    if args.out:
        pairs.append(f"out={args.out}")
    return cfg.with_overrides(pairs + args.overrides)


def _inspect(path: str):
    from .persist import load_checkpoint, load_corpus

    raw = Path(path).read_bytes()[:4]
    if raw == b"MGPD":
        demos = load_corpus(path)
        print(f"corpus: task={demos[0].task} episodes={len(demos)} "
              f"horizon={demos[0].horizon}")
        print(f"success: {sum(d.success for d in demos)}/{len(demos)}")
        return
    config_hash, sections = load_checkpoint(path)
    print(f"checkpoint: config_hash={config_hash}")
    for name, arrays in sections.items():
        total = sum(a.size for a in arrays.values())
        print(f"section {name}: {len(arrays)} arrays, {total} parameters")
        for arr_name, a in arrays.items():
            print(f"  {arr_name}  shape={tuple(a.shape)}")


def _run(args) -> int:
    if args.command == "inspect-checkpoint":
        _inspect(args.path)
        return 0

    cfg = _config_from(args)
    _say(f"[{args.command}] task={cfg['task']} seed={cfg['seed']} "
         f"out={cfg['out']} config={cfg.hash()[:12]}")

    if args.command == "collect":
        demos = collect_corpus(cfg)
        _say(f"wrote {len(demos)} demos to {cfg['out']}")
    elif args.command == "train-tokenizer":
        _, report = run_stage1(cfg)
        _say(f"heldout L1 {report['heldout_l1_per_step']:.2e}, usage "
             f"{report['codebook_usage']:.2f}, replay "
             f"{report['replay_successes']}/{report['replay_total']}")
    elif args.command == "train-mgt":
        policy = run_stage2(cfg)
        _say(f"final loss {policy.loss_curve_[-1]:.4f} over "
             f"{len(policy.loss_curve_)} steps")
    elif args.command == "eval":
        policy = load_stage2(cfg)
        variants = args.variants or [cfg["sampler.variant"]]
        report = evaluate(cfg, policy, variants=variants,
                          episodes=args.episodes, jobs=args.jobs)
        for row in report.rows:
            _say(f"{row.variant}: success {row.successes}/{row.episodes}, "
                 f"passes/episode {row.passes_per_episode:.2f}")
    elif args.command == "ablate":
        policy = load_stage2(cfg)
        variants = args.variants or [cfg["sampler.variant"]]
        reports = ablate(cfg, policy, args.sweep, variants=variants,
                         episodes=args.episodes, jobs=args.jobs)
        for value, rep in reports:
            for row in rep.rows:
                _say(f"{args.sweep.split('=')[0]}={value} {row.variant}: "
                     f"success {row.successes}/{row.episodes}")
    elif args.command == "analyze":
        policy = load_stage2(cfg)
        episodes = args.episodes or cfg["eval.episodes"]
        traces = [run_eval_episode(cfg, policy, "long", "atr", i)[0]
                  for i in range(episodes)]
        analysis = confidence_analysis(cfg, traces)
        _say(f"pending confidence: before onset "
             f"{analysis.mean_before_onset:.4f}, after "
             f"{analysis.mean_after_onset:.4f}")
        maskings = [m.strip() for m in args.maskings.split(",") if m.strip()]
        for row in flip_rate_experiment(cfg, policy, maskings=maskings,
                                        episodes=episodes):
            _say(f"{row[0]}: flip rate {row[6]:.4f} ({row[4]}/{row[5]}), "
                 f"success {row[3]:.2f}")
    return 0


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        # argparse exits 2 on bad flags, 0 on --help; pass both through
        return int(e.code or 0)
    try:
        return _run(args)
    except _CONFIG_ERRORS as e:
        _say(f"config error: {e}")
        return 2
    except TrainingError as e:
        _say(f"training error: {e}")
        return 4
    except FormatError as e:
        _say(f"format error: {e}")
        return 3
    except OSError as e:
        _say(f"i/o error: {e}")
        return 3


if __name__ == "__main__":
    sys.exit(main())
