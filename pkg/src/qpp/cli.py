"""Command-line entry point.

Subcommands map onto pipeline stages; each one recomputes its upstream
stages in memory (everything is deterministic and cheap at benchmark
scale) and writes only the artifacts it owns, so there is no stale-file
coupling between invocations.

Exit codes: 0 success, 1 internal failure, 2 bad config or input. Errors
print to stderr as one JSON object naming the failing stage.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from . import pipeline
from .errors import ConfigError, EngineError, InvalidRange
from .pipeline import PipelineConfig, PipelineError, PipelineState, config_hash


def _load(args: argparse.Namespace) -> PipelineConfig:
    cfg = pipeline.load_config(args.config)
    if getattr(args, "out_dir", None):
        cfg = pipeline.replace_config(cfg, out_dir=args.out_dir)
    return cfg


def _new_state(cfg: PipelineConfig) -> PipelineState:
    return PipelineState(cfg=cfg, cfg_hash=config_hash(cfg))


def cmd_validate(args: argparse.Namespace) -> int:
    summary = pipeline.validate_inputs(_load(args))
    print(json.dumps(summary, indent=2, sort_keys=True))
    return 0


def cmd_retrieve(args: argparse.Namespace) -> int:
    state = _new_state(_load(args))
    pipeline.ingest(state)
    pipeline.retrieve(state)
    out = pipeline.write_artifacts(state)
    print(f"ranked lists written under {out / 'ranked'}")
    return 0


def cmd_ground_truth(args: argparse.Namespace) -> int:
    cfg = _load(args)
    if args.k is not None:
        cfg = pipeline.replace_config(cfg, p_at_k=args.k)
    state = _new_state(cfg)
    pipeline.ingest(state)
    pipeline.retrieve(state)
    pipeline.ground_truth(state)
    if args.measure:
        for system in list(state.tables):
            kept = {
                label: table
                for label, table in state.tables[system].items()
                if label == args.measure
            }
            if not kept:
                raise ConfigError(
                    f"measure {args.measure!r} not computed; have "
                    f"{sorted(state.tables[system])}"
                )
            state.tables[system] = kept
    out = pipeline.write_artifacts(state)
    print(f"effectiveness tables written under {out / 'ground_truth'}")
    return 0


def cmd_predict(args: argparse.Namespace) -> int:
    state = _new_state(_load(args))
    pipeline.ingest(state)
    pipeline.retrieve(state)
    pipeline.ground_truth(state)
    pipeline.predict(state)
    out = pipeline.write_artifacts(state)
    print(f"predictor scores written under {out / 'scores'}")
    return 0


def cmd_train_meta(args: argparse.Namespace) -> int:
    state = _new_state(_load(args))
    pipeline.ingest(state)
    pipeline.retrieve(state)
    pipeline.ground_truth(state)
    pipeline.predict(state)
    pipeline.train_meta(state)
    out = pipeline.write_artifacts(state)
    print(f"fold file and SVR models written under {out}")
    return 0


def cmd_run(args: argparse.Namespace) -> int:
    state = pipeline.run_pipeline(_load(args))
    out = Path(state.cfg.out_dir)
    print(f"report written to {out / 'report'}")
    return 0


def cmd_sweep(args: argparse.Namespace) -> int:
    cfg = _load(args)
    if args.values:
        try:
            values = [int(v) for v in args.values.split(",") if v.strip()]
        except ValueError as e:
            raise InvalidRange(f"bad sweep values {args.values!r}") from e
    elif args.range:
        try:
            start, stop, step = (int(v) for v in args.range.split(":"))
        except ValueError as e:
            raise InvalidRange(
                f"range must look like start:stop:step, got {args.range!r}"
            ) from e
        if step <= 0:
            raise InvalidRange("step must be positive")
        values = list(range(start, stop + 1, step))
    else:
        raise InvalidRange("sweep needs --range or --values")
    out = pipeline.sweep(cfg, args.param, values)
    print(f"sweep summary written to {out / 'summary.tsv'}")
    return 0


def cmd_emit_matrices(args: argparse.Namespace) -> int:
    out = pipeline.emit_matrices(_load(args))
    print(f"similarity matrices written under {out}")
    return 0


def cmd_evaluate(args: argparse.Namespace) -> int:
    return cmd_run(args)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="qpp",
        description="Query-performance-prediction benchmark over image embeddings",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name: str, func, help_text: str) -> argparse.ArgumentParser:
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", required=True, help="JSON config path")
        p.add_argument("--out-dir", help="override the config's output directory")
        p.set_defaults(func=func)
        return p

    add("validate", cmd_validate, "load and validate all input files")
    add("retrieve", cmd_retrieve, "write top-k ranked lists")
    gt = add("ground-truth", cmd_ground_truth, "write effectiveness tables")
    gt.add_argument("--measure", help="emit only this measure (ap or p@K)")
    gt.add_argument("--k", type=int, help="precision cutoff override")
    add("predict", cmd_predict, "write per-query predictor score files")
    add("train-meta", cmd_train_meta, "write folds and per-fold SVR models")
    add("evaluate", cmd_evaluate, "full run (alias of run)")
    add("run", cmd_run, "run every stage and write the report")
    sw = add("sweep", cmd_sweep, "re-run per hyperparameter value")
    sw.add_argument("--param", required=True, choices=["K", "m", "l"])
    sw.add_argument("--range", help="start:stop:step, stop inclusive")
    sw.add_argument("--values", help="comma-separated explicit values")
    add("emit-matrices", cmd_emit_matrices, "write top-k similarity matrices")
    return parser


def _fail(stage: str, code: str, message: str) -> None:
    print(
        json.dumps({"stage": stage, "error": code, "message": message}),
        file=sys.stderr,
    )


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except PipelineError as e:
        _fail(e.stage, e.code, str(e))
        return 2 if e.input_error else 1
    except EngineError as e:
        _fail("config", e.code, str(e))
        return 2 if e.code != "INTERNAL" else 1
    except OSError as e:
        _fail("config", "IO_ERROR", str(e))
        return 2
    except Exception as e:  # pragma: no cover - genuine bugs
        _fail("internal", "INTERNAL", f"{type(e).__name__}: {e}")
        return 1


if __name__ == "__main__":
    sys.exit(main())
