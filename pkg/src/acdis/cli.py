"""Command-line entry point: ``acdis {generate,train,evaluate,gradcheck,report}``.

Every command writes into its ``--out`` directory together with a
``manifest.json`` recording the command, configuration, seed and outputs.
Failures print one JSON object to stderr and exit with a code per error class
(2 config, 3 data, 4 numerical, 5 verification).
"""

from __future__ import annotations

import argparse
import datetime as _dt
import hashlib
import json
import logging
import os
import subprocess
import sys
from pathlib import Path
from typing import List, Optional

import numpy as np
import torch

from . import evaluation, training
from .errors import AcdisError, ConfigError, DataError, VerificationError
from .volume_data import PhantomSpec, generate_phantom, load_dataset, save_dataset

log = logging.getLogger("acdis")

MANIFEST = "manifest.json"
DATA_ENV = "ACDIS_DATA_DIR"
TOY_PROFILE = "toy"


def _now() -> str:
    return _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds")


def _git_hash() -> Optional[str]:
    try:
        out = subprocess.run(["git", "rev-parse", "HEAD"], capture_output=True, text=True, timeout=5,
                             cwd=Path(__file__).resolve().parent)
        if out.returncode != 0:
            return None
        return out.stdout.strip() or None
    except (OSError, subprocess.SubprocessError):
        return None


def write_manifest(out_dir: Path, command: str, argv: List[str], config: dict, seed, outputs: dict, started: str) -> Path:
    config_hash = hashlib.sha256(json.dumps(config, sort_keys=True).encode()).hexdigest()[:16]
    manifest = {
        "command": command,
        "argv": argv,
        "config": config,
        "config_hash": config_hash,
        "seed": seed,
        "git": _git_hash(),
        "started": started,
        "finished": _now(),
        "outputs": {k: str(v) for k, v in outputs.items()},
    }
    path = out_dir / MANIFEST
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return path


def _apply_runtime(args) -> None:
    if args.deterministic:
        torch.set_num_threads(1)
        torch.use_deterministic_algorithms(True, warn_only=True)
    elif args.workers:
        torch.set_num_threads(max(1, args.workers))


def _data_dir(args) -> Path:
    d = args.data or os.environ.get(DATA_ENV)
    if not d:
        raise ConfigError(f"no data directory: pass --data or set {DATA_ENV}")
    return Path(d)


def _load_dataset(path: Path):
    if not path.is_dir():
        raise DataError(f"data directory not found: {path}")
    return load_dataset(path)


def load_config(spec: Optional[str]) -> training.TrainConfig:
    if spec is None or spec == TOY_PROFILE:
        return training.TrainConfig.toy()
    return training.TrainConfig.load(spec)


# --------------------------------------------------------------------------- commands


def cmd_generate(args) -> dict:
    out = Path(args.out)
    if args.n_cases < 0:
        raise ConfigError("--n-cases must be >= 0")
    seed = args.seed if args.seed is not None else 0
    specs = []
    for i in range(args.n_cases):
        case_seed = int(np.random.SeedSequence([seed, i]).generate_state(1)[0])
        specs.append(PhantomSpec(size=args.size, num_lesions=args.lesions, seed=case_seed))
    for s in specs:
        s.validate()
    if not specs:
        log.warning("generating an empty dataset (n_cases=0)")
    save_dataset([generate_phantom(s) for s in specs], out,
                 meta={"size": args.size, "num_lesions": args.lesions, "seed": seed,
                       "case_seeds": [s.seed for s in specs]})
    config = {"n_cases": args.n_cases, "size": args.size, "lesions": args.lesions}
    return {"out": out, "config": config, "seed": seed, "outputs": {"index": out / "index.json"}}


def cmd_train(args) -> dict:
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg = training.TrainConfig.from_dict({**cfg.to_dict(), "seed": args.seed})
    dataset = _load_dataset(_data_dir(args))
    out = Path(args.out)
    resume = training.Checkpoint.load(args.resume) if args.resume else None
    ckpt = training.train(cfg, dataset, out, resume=resume)
    return {"out": out, "config": cfg.to_dict(), "seed": cfg.seed,
            "outputs": {"checkpoint": out / "final.pt", "log": out / training.LOG_FILE},
            "summary": {"epochs": ckpt.epoch, "steps": ckpt.step, "parameter_hash": ckpt.parameter_hash()}}


def cmd_evaluate(args) -> dict:
    ckpt_path = Path(args.checkpoint)
    if not ckpt_path.is_file():
        raise DataError(f"checkpoint not found: {ckpt_path}")
    ckpt = training.Checkpoint.load(ckpt_path)
    dataset = _load_dataset(_data_dir(args))
    table = evaluation.evaluate_all_masks(ckpt, dataset)
    out = Path(args.out)
    meta = {"checkpoint": str(ckpt_path), "epoch": ckpt.epoch, "cases": len(dataset)}
    files = evaluation.render_report(table, out, meta, plots=not args.no_plots)
    return {"out": out, "config": ckpt.config, "seed": ckpt.config.get("seed"), "outputs": files,
            "summary": {"avg": table.avg}}


def cmd_gradcheck(args) -> dict:
    names = args.losses.split(",") if args.losses else list(training.DEFAULT_SUITE)
    seed = args.seed if args.seed is not None else 0
    reports = training.run_gradient_suite(names, trials=args.trials, h=args.h, tol=args.tol, seed=seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    summary = {r.name: r.to_dict() for r in reports}
    (out / "gradcheck.json").write_text(json.dumps(summary, indent=2, sort_keys=True))
    for r in reports:
        status = "PASS" if r.passed else "FAIL"
        print(f"{status} {r.name:<12} max_rel_error={r.max_rel_error:.3e} tol={r.tol:g} trials={r.trials}"
              + ("" if r.teacher_grad_max is None else f" teacher_grad_max={r.teacher_grad_max:g}"))
    result = {"out": out, "config": {"losses": names, "trials": args.trials, "h": args.h, "tol": args.tol},
              "seed": seed, "outputs": {"gradcheck": out / "gradcheck.json"}}
    failed = [r.name for r in reports if not r.passed]
    if failed:
        _finish(result, args)
        raise VerificationError(f"gradient check failed for: {', '.join(failed)}")
    return result


def cmd_report(args) -> dict:
    src = Path(args.input)
    report_file = src / "report.json" if src.is_dir() else src
    if not report_file.is_file():
        raise DataError(f"report.json not found: {report_file}")
    payload = json.loads(report_file.read_text())
    table = evaluation.DiceTable.from_json(payload["table"])
    out = Path(args.out)
    files = evaluation.render_report(table, out, payload.get("run"), plots=not args.no_plots)
    return {"out": out, "config": {"input": str(report_file)}, "seed": None, "outputs": files}


COMMANDS = {
    "generate": cmd_generate,
    "train": cmd_train,
    "evaluate": cmd_evaluate,
    "gradcheck": cmd_gradcheck,
    "report": cmd_report,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--out", required=True, help="run directory")
    common.add_argument("--seed", type=int, default=None)
    common.add_argument("--workers", type=int, default=0, help="cap on torch threads (0 = library default)")
    common.add_argument("--deterministic", action="store_true", help="single worker, deterministic kernels")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="acdis", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", parents=[common], help="write a synthetic phantom dataset")
    g.add_argument("--n-cases", type=int, default=3)
    g.add_argument("--size", type=int, default=16)
    g.add_argument("--lesions", type=int, default=2)

    t = sub.add_parser("train", parents=[common], help="train from a JSON config")
    t.add_argument("--config", default=TOY_PROFILE, help=f"JSON config path or '{TOY_PROFILE}'")
    t.add_argument("--data", default=None, help=f"dataset directory (default ${DATA_ENV})")
    t.add_argument("--resume", default=None, help="checkpoint to continue from")

    e = sub.add_parser("evaluate", parents=[common], help="15-mask Dice evaluation")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", default=None)
    e.add_argument("--no-plots", action="store_true")

    c = sub.add_parser("gradcheck", parents=[common], help="finite-difference checks of the losses")
    c.add_argument("--losses", default=None, help=f"comma list from {sorted(training.LOSS_SUITE)}")
    c.add_argument("--trials", type=int, default=20)
    c.add_argument("--h", type=float, default=1e-3)
    c.add_argument("--tol", type=float, default=1e-4)

    r = sub.add_parser("report", parents=[common], help="re-render tables and plots from report.json")
    r.add_argument("--input", required=True, help="evaluate output directory or report.json")
    r.add_argument("--no-plots", action="store_true")
    return p


def _finish(result: dict, args) -> None:
    out = Path(result["out"])
    out.mkdir(parents=True, exist_ok=True)
    write_manifest(out, args.command, args._argv, result.get("config", {}), result.get("seed"),
                   result.get("outputs", {}), args._started)


def _error(exc: BaseException, code: int, **extra) -> int:
    payload = {"error": type(exc).__name__, "message": str(exc), "exit_code": code}
    payload.update({k: v for k, v in extra.items() if v is not None})
    print(json.dumps(payload), file=sys.stderr)
    return code


def main(argv: Optional[List[str]] = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    args = build_parser().parse_args(argv)
    args._argv, args._started = argv, _now()
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    _apply_runtime(args)
    try:
        result = COMMANDS[args.command](args)
        _finish(result, args)
        if "summary" in result:
            print(json.dumps(result["summary"], sort_keys=True))
        return 0
    except AcdisError as exc:
        return _error(exc, exc.exit_code, field=getattr(exc, "field", None), path=getattr(exc, "path", None),
                      terms=getattr(exc, "terms", None))
    except FileNotFoundError as exc:
        return _error(exc, DataError.exit_code, path=exc.filename or str(exc))
    except OSError as exc:
        return _error(exc, DataError.exit_code, path=exc.filename)


if __name__ == "__main__":
    sys.exit(main())
