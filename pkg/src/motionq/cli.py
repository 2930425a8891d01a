"""Command-line entry point: generate, train, eval, ablate, gradcheck.

Exit codes: 0 ok, 1 gradient check failed, 2 configuration error,
3 I/O error, 4 checkpoint/config/dataset incompatibility.
Logs go to stderr; stdout carries only machine-readable results.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .checkpoint import load_checkpoint, save_checkpoint
from .config import RunConfig, loads_run_config
from .data import SPLITS, generate_dataset, load_dataset
from .errors import ConfigurationError, FormatError
from .fleet import TABLE2_CONFIGS
from .gradcheck import run_suite
from .training import ablate, evaluate, train, write_table_csv

log = logging.getLogger("motionq")

EXIT_OK = 0
EXIT_GRADCHECK = 1
EXIT_CONFIG = 2
EXIT_IO = 3
EXIT_COMPAT = 4

RESOLVED_CONFIG = "run_config.json"


class CliError(Exception):
    def __init__(self, code: int, message: str):
        super().__init__(message)
        self.code = code


def _parse_value(raw: str):
    try:
        return json.loads(raw)
    except json.JSONDecodeError:
        return raw


def _overrides(extra: list[str]) -> dict:
    out = {}
    for item in extra:
        if not item.startswith("--") or "=" not in item:
            raise CliError(EXIT_CONFIG, f"unrecognized argument {item!r}; overrides look like --section.key=value")
        key, raw = item[2:].split("=", 1)
        out[key] = _parse_value(raw)
    return out


def _load_config(path: str | None, extra: list[str]) -> RunConfig:
    text = ""
    if path is not None:
        try:
            text = Path(path).read_text(encoding="utf-8")
        except OSError as exc:
            raise CliError(EXIT_IO, f"cannot read config {path}: {exc}") from exc
    try:
        return loads_run_config(text, _overrides(extra))
    except ConfigurationError as exc:
        raise CliError(EXIT_CONFIG, str(exc)) from exc


def _echo_config(cfg: RunConfig, out_dir: Path) -> None:
    (out_dir / RESOLVED_CONFIG).write_text(json.dumps(cfg.resolved(), indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _mkdir(path: str) -> Path:
    out = Path(path)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise CliError(EXIT_IO, f"cannot create {out}: {exc}") from exc
    return out


def _load_data(path: str):
    try:
        return load_dataset(path)
    except (OSError, FormatError, KeyError, json.JSONDecodeError) as exc:
        raise CliError(EXIT_IO, f"cannot load dataset {path}: {exc}") from exc


def cmd_generate(args, extra) -> int:
    cfg = _load_config(args.config, extra)
    out = _mkdir(args.out)
    try:
        generate_dataset(cfg.data.count, cfg.data.spec, cfg.data.seed, out)
        _echo_config(cfg, out)
    except OSError as exc:
        raise CliError(EXIT_IO, f"cannot write dataset: {exc}") from exc
    print(out / "manifest.json")
    return EXIT_OK


def cmd_train(args, extra) -> int:
    cfg = _load_config(args.config, extra)
    ds = _load_data(args.data)
    out = _mkdir(args.out)
    metrics_path = out / "metrics.jsonl"
    try:
        metrics_path.write_text("", encoding="utf-8")
        _echo_config(cfg, out)

        def append(row):
            with metrics_path.open("a", encoding="utf-8") as fh:
                fh.write(json.dumps(row, sort_keys=True) + "\n")

        try:
            result = train(ds, cfg.train, cfg.model, on_epoch=append)
        except ConfigurationError as exc:
            raise CliError(EXIT_COMPAT, str(exc)) from exc
        save_checkpoint(out / "model.ckpt", result.checkpoint)
    except OSError as exc:
        raise CliError(EXIT_IO, f"cannot write training outputs: {exc}") from exc
    print(out / "model.ckpt")
    return EXIT_OK


def cmd_eval(args, extra) -> int:
    expected_v2x = _load_config(args.config, extra).v2x if args.config or extra else None
    try:
        ckpt = load_checkpoint(args.ckpt, expected_v2x)
    except ConfigurationError as exc:
        raise CliError(EXIT_COMPAT, str(exc)) from exc
    except (OSError, FormatError) as exc:
        raise CliError(EXIT_IO, f"cannot load checkpoint {args.ckpt}: {exc}") from exc
    ds = _load_data(args.data)
    try:
        report = evaluate(ckpt, ds, args.split)
    except ConfigurationError as exc:
        raise CliError(EXIT_COMPAT, str(exc)) from exc
    try:
        Path(args.report).write_text(json.dumps(report.to_json(), indent=1, sort_keys=True) + "\n", encoding="utf-8")
    except OSError as exc:
        raise CliError(EXIT_IO, f"cannot write report: {exc}") from exc
    print(f"{report.accuracy:.4f}")
    return EXIT_OK


def cmd_ablate(args, extra) -> int:
    cfg = _load_config(args.config, extra)
    ds = _load_data(args.data)
    out = _mkdir(args.out)
    try:
        rows = ablate(ds, TABLE2_CONFIGS, cfg.train, cfg.model)
    except ConfigurationError as exc:
        raise CliError(EXIT_COMPAT, str(exc)) from exc
    try:
        _echo_config(cfg, out)
        write_table_csv(rows, out / "ablation.csv")
        (out / "ablation.json").write_text(json.dumps(rows, indent=1, sort_keys=True) + "\n", encoding="utf-8")
    except OSError as exc:
        raise CliError(EXIT_IO, f"cannot write ablation outputs: {exc}") from exc
    print(out / "ablation.csv")
    return EXIT_OK


def cmd_gradcheck(args, extra) -> int:
    if extra:
        raise CliError(EXIT_CONFIG, f"unexpected arguments {extra}")
    results = run_suite(args.seed, corrupt=args.corrupt)
    for r in results:
        status = "ok" if r.passed else "FAIL"
        print(f"{r.name:<24} max_rel_err={r.max_rel_err:.3e} threshold={r.threshold:.0e} {status}")
    failed = [r.name for r in results if not r.passed]
    if failed:
        log.error("gradient check failed for: %s", ", ".join(failed))
        return EXIT_GRADCHECK
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="motionq", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", help="write a synthetic scenario dataset")
    p.add_argument("--config")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("train", help="train one V2X configuration")
    p.add_argument("--config")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="score a checkpoint on a dataset split")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", default="test", choices=SPLITS)
    p.add_argument("--report", required=True)
    p.add_argument("--config", help="refuse checkpoints trained for another V2X configuration")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="train and test the four V2X configurations")
    p.add_argument("--config")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("gradcheck", help="finite-difference check of every differentiable op")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--corrupt", help=argparse.SUPPRESS)
    p.set_defaults(func=cmd_gradcheck)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args, extra = parser.parse_known_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        stream=sys.stderr,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        return args.func(args, extra)
    except CliError as exc:
        log.error("%s", exc)
        return exc.code


if __name__ == "__main__":
    sys.exit(main())
