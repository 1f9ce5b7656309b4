"""Command-line entry points.

Subcommands:

    train           run a configured training job end to end
    pack            emit packed sequences for one rank, for inspection
    analyze-spikes  scan a metrics log for loss/grad-norm spikes
    sr-bench        stochastic-rounding unbiasedness and accumulation bench
    simulate        run training under a scripted failure schedule

All commands take JSON in and put JSON out: results go to stdout, progress
chatter to stderr, and failures print one JSON error object to stderr and
exit nonzero.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

from .bf16 import saturation_count, sr_accumulation_experiment, sr_unbiasedness_sweep
from .checkpoint import CheckpointError
from .config import ConfigError, parse_config, write_effective_config
from .data import (
    ByteTokenizer,
    Corpus,
    EndOfData,
    LoaderState,
    LoaderStateError,
    next_sequence,
)
from .monitor import MetricsLog, detect_spikes, spike_histogram
from .simulate import SimulationAborted, run_sim
from .trainer import TrainSession


def _emit(obj, fh=None) -> None:
    json.dump(obj, fh or sys.stdout, indent=2, sort_keys=True)
    (fh or sys.stdout).write("\n")


def _fail(kind: str, message: str) -> int:
    json.dump({"error": kind, "message": message}, sys.stderr)
    sys.stderr.write("\n")
    return 1


def cmd_train(args) -> int:
    config = parse_config(args.config)
    out_dir = config.output_dir
    ckpt_dir = os.path.join(out_dir, "checkpoints")
    os.makedirs(ckpt_dir, exist_ok=True)
    write_effective_config(config, os.path.join(out_dir, "effective_config.json"))
    corpus = Corpus.from_jsonl(config.data.paths)
    session = TrainSession(config, corpus)
    total = args.steps if args.steps is not None else config.optim.total_steps
    chatter_every = max(1, total // 20)

    def echo(record):
        if record.step % chatter_every == 0 or record.step == total:
            sys.stderr.write(
                f"step {record.step}/{total} loss {record.loss:.4f} "
                f"grad_norm {record.grad_norm:.4f} lr {record.lr:.3e}\n"
            )

    try:
        with MetricsLog(os.path.join(out_dir, "metrics.jsonl")) as log:
            session.run(
                n_steps=total,
                metrics_log=log,
                checkpoint_dir=ckpt_dir,
                echo=echo,
            )
    finally:
        session.close()
    final = session.records[-1] if session.records else None
    _emit(
        {
            "output_dir": out_dir,
            "steps": session.step,
            "global_batch_size": config.data.dp_degree * config.data.batch_size_per_rank,
            "tokens_per_step": config.data.dp_degree
            * config.data.batch_size_per_rank
            * config.model.max_seq_len,
            "tokens_seen": session.tokens_seen,
            "final_loss": final.loss if final else None,
            "final_param_norm": final.param_norm if final else None,
            "numeric_mode": config.numerics.mode,
            "saturations": saturation_count(),
        }
    )
    return 0


def cmd_pack(args) -> int:
    config = parse_config(args.config)
    if not 0 <= args.rank < config.data.dp_degree:
        return _fail("usage", f"rank must be in [0, {config.data.dp_degree})")
    corpus = Corpus.from_jsonl(config.data.paths)
    tokenizer = ByteTokenizer()
    state = LoaderState.initial(config.data.seed, config.data.dp_degree, args.rank)
    for index in range(args.n):
        seq, state = next_sequence(
            state, corpus, tokenizer, config.model.max_seq_len, config.data.max_epochs
        )
        row = {
            "index": index,
            "rank": args.rank,
            "epoch": state.epoch,
            "tokens": seq.tolist(),
            "eos_positions": [int(i) for i in (seq == tokenizer.eos_id).nonzero()[0]],
            "carry_len": len(state.carry),
        }
        sys.stdout.write(json.dumps(row) + "\n")
    return 0


def cmd_analyze_spikes(args) -> int:
    records = MetricsLog.read(args.log)
    series = [getattr(r, args.metric) for r in records]
    scan = detect_spikes(
        series,
        window=args.window,
        threshold=args.threshold,
        freeze_baseline=args.freeze_baseline,
    )
    histogram, frac_single = spike_histogram(scan.events)
    result = {
        "log": args.log,
        "metric": args.metric,
        "window": scan.window,
        "threshold": scan.threshold,
        "num_steps": len(series),
        "too_short": scan.too_short,
        "num_events": len(scan.events),
        "duration_histogram": {str(k): v for k, v in histogram.items()},
        "fraction_single_step": frac_single,
        "events": [
            {
                "start_step": e.start_step,
                "duration": e.duration,
                "peak_value": e.peak_value,
                "baseline": e.baseline,
                "censored": e.censored,
            }
            for e in scan.events
        ],
    }
    if args.json_out:
        with open(args.json_out, "w", encoding="utf-8") as fh:
            _emit(result, fh)
    _emit(result)
    return 0


def cmd_sr_bench(args) -> int:
    sweep = sr_unbiasedness_sweep(n_values=args.values, trials=args.trials, seed=args.seed)
    if not args.full:
        sweep = {k: v for k, v in sweep.items() if k != "values"}
    accumulation = sr_accumulation_experiment(trials=args.acc_trials, seed=args.seed)
    result = {"unbiasedness": sweep, "accumulation": accumulation}
    if args.json_out:
        with open(args.json_out, "w", encoding="utf-8") as fh:
            _emit(result, fh)
    _emit(result)
    return 0


def cmd_simulate(args) -> int:
    config = parse_config(args.config)
    if config.simulate is None:
        return _fail("config", "simulate: section required for the simulate command")
    os.makedirs(config.output_dir, exist_ok=True)
    write_effective_config(config, os.path.join(config.output_dir, "effective_config.json"))
    corpus = Corpus.from_jsonl(config.data.paths)
    session = TrainSession(config, corpus)
    try:
        _, report, records = run_sim(config.simulate, session)
    except SimulationAborted as exc:
        _emit({"aborted": True, "report": exc.report.to_json_dict()})
        return 1
    finally:
        session.close()
    with MetricsLog(os.path.join(config.output_dir, "metrics.jsonl")) as log:
        for record in records:
            log.record_step(record)
    _emit({"aborted": False, "report": report.to_json_dict()})
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="desktrain",
        description="Desk-scale training loop with bf16 rounding emulation, "
        "packed streaming data, and failure-recovery simulation.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="run a training job from a JSON config")
    p.add_argument("--config", required=True, help="path to the JSON run config")
    p.add_argument("--steps", type=int, default=None, help="stop after this many steps instead of the configured total")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("pack", help="print packed sequences for one rank as JSONL")
    p.add_argument("--config", required=True)
    p.add_argument("--rank", type=int, default=0)
    p.add_argument("--n", type=int, default=4, help="number of sequences to emit")
    p.set_defaults(func=cmd_pack)

    p = sub.add_parser("analyze-spikes", help="scan a metrics log for spikes")
    p.add_argument("--log", required=True, help="metrics.jsonl path")
    p.add_argument("--metric", choices=("loss", "grad_norm"), default="loss")
    p.add_argument("--window", type=int, default=20)
    p.add_argument("--threshold", type=float, default=0.1)
    p.add_argument("--freeze-baseline", action="store_true")
    p.add_argument("--json-out", default=None, help="also write the report to this file")
    p.set_defaults(func=cmd_analyze_spikes)

    p = sub.add_parser("sr-bench", help="stochastic rounding statistics")
    p.add_argument("--values", type=int, default=50, help="random values for the unbiasedness sweep")
    p.add_argument("--trials", type=int, default=100_000, help="rounding trials per value")
    p.add_argument("--acc-trials", type=int, default=1000, help="accumulation experiment trials")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--full", action="store_true", help="include per-value sweep details")
    p.add_argument("--json-out", default=None)
    p.set_defaults(func=cmd_sr_bench)

    p = sub.add_parser("simulate", help="train under a scripted failure schedule")
    p.add_argument("--config", required=True, help="config with a simulate section")
    p.set_defaults(func=cmd_simulate)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        return _fail("config", str(exc))
    except LoaderStateError as exc:
        return _fail("loader-state", str(exc))
    except CheckpointError as exc:
        return _fail("checkpoint", str(exc))
    except EndOfData as exc:
        return _fail("end-of-data", str(exc))
    except (OSError, ValueError) as exc:
        return _fail(type(exc).__name__.lower(), str(exc))


if __name__ == "__main__":
    sys.exit(main())
