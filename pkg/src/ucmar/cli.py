"""Command-line entry point: ``ucmar {synth,train,eval,viz,run}``.

Failures print one line ``ERROR:<code>:<message>`` to stderr and exit with
2 (validation), 3 (training diverged) or 4 (I/O).
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

from . import __version__
from .config import load_config
from .data_sim import MANIFEST, build_dataset, load_dataset, save_dataset
from .errors import UcmarError
from .metrics import MetricReport, evaluate
from .model import CheckpointSet, load_checkpoint, restore_batch
from .train import configure_determinism, run_baseline, run_uc
from .uncertainty import UncertaintyStore, compute_uncertainty, ensemble_infer

log = logging.getLogger("ucmar")

EXIT_OK, EXIT_VALIDATION, EXIT_DIVERGED, EXIT_IO = 0, 2, 3, 4
RUN_CONFIG = "config.json"


class CliError(UcmarError):
    def __init__(self, code, message, exit_code=EXIT_VALIDATION):
        super().__init__(message)
        self.code = code
        self.exit_code = exit_code


def _resolved(args):
    cfg = load_config(args.config)
    train = cfg.train
    if getattr(args, "seed", None) is not None:
        train = replace(train, seed=args.seed)
    if getattr(args, "deterministic", None) is not None:
        train = replace(train, deterministic=args.deterministic)
    return replace(cfg, train=train)


def _data_dir(args, cfg):
    return Path(getattr(args, "data", None) or cfg.paths.data_dir)


def _load_data(path):
    path = Path(path)
    if not (path / MANIFEST).exists():
        raise CliError("io", f"no dataset at {path} (missing {MANIFEST})", EXIT_IO)
    return load_dataset(path)


def _file_digest(path):
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def cmd_synth(args):
    cfg = _resolved(args)
    dataset_cfg = cfg.dataset if args.seed is None else replace(cfg.dataset, seed=args.seed)
    out = Path(args.out or cfg.paths.data_dir)
    log.info("synthesizing %d train + %d test pairs into %s", dataset_cfg.n_train, dataset_cfg.n_test, out)
    dataset = build_dataset(dataset_cfg)
    save_dataset(dataset, out)
    print(json.dumps({"data_dir": str(out), "train": len(dataset.train), "test": len(dataset.test)}))
    return EXIT_OK


def cmd_train(args):
    cfg = _resolved(args)
    dataset = _load_data(_data_dir(args, cfg))
    if dataset.config.grid_size != cfg.train.grid_size:
        raise CliError("validation", f"dataset grid {dataset.config.grid_size} != train.grid_size {cfg.train.grid_size}")
    configure_determinism(cfg.train.deterministic)
    runs = Path(args.out or cfg.paths.runs_dir)
    run_dir = runs / f"{args.arm}-{cfg.training_hash(args.arm)[:12]}"
    run_dir.mkdir(parents=True, exist_ok=True)
    resolved = cfg.to_dict()
    resolved["arm"] = args.arm
    resolved["data_dir"] = str(_data_dir(args, cfg))
    (run_dir / RUN_CONFIG).write_text(json.dumps(resolved, indent=2, sort_keys=True))
    log.info("training arm=%s into %s", args.arm, run_dir)
    if args.arm == "uc":
        _, report, _, _ = run_uc(dataset.train, cfg.train, run_dir, val=dataset.test)
    else:
        _, report = run_baseline(dataset.train, cfg.train, run_dir, val=dataset.test)
    report.config.update({"arm": args.arm, "data_dir": resolved["data_dir"], "run_dir": str(run_dir)})
    report.save(run_dir)
    digest = _file_digest(run_dir / "model_final.ckpt")
    (run_dir / "model_final.sha256").write_text(digest + "\n")
    print(json.dumps({"run_dir": str(run_dir), "final_model_sha256": digest}))
    return EXIT_OK


def _load_run(run_dir):
    run_dir = Path(run_dir)
    if not (run_dir / RUN_CONFIG).exists() or not (run_dir / "model_final.ckpt").exists():
        raise CliError("io", f"{run_dir} is not a finished run directory", EXIT_IO)
    return json.loads((run_dir / RUN_CONFIG).read_text())


def cmd_eval(args):
    cfg = _resolved(args)
    runs = [(Path(d), _load_run(d)) for d in args.run_dirs]
    data_dir = Path(args.data) if args.data else Path(runs[0][1]["data_dir"])
    dataset = _load_data(data_dir)
    seeds = {r["train"]["seed"] for _, r in runs}
    rows = []
    for run_dir, rc in runs:
        tag = cfg.eval.model_tag if len(seeds) == 1 else f"{cfg.eval.model_tag}-s{rc['train']['seed']}"
        model = load_checkpoint(run_dir / "model_final.ckpt")
        row = evaluate(
            model,
            dataset.test,
            model_tag=tag,
            uc_loss=rc["arm"] == "uc",
            exclude_metal=cfg.eval.exclude_metal,
            data_range=cfg.eval.data_range,
        )
        rows.append(row)
    report = MetricReport(rows=rows)
    out = Path(args.out or cfg.paths.eval_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "metrics.json").write_text(report.to_json())
    table = report.to_table()
    (out / "metrics.txt").write_text(table + "\n")
    print(table)
    return EXIT_OK


def cmd_viz(args):
    from .viz import check_zoom, render_panel

    run_dir = Path(args.run_dir)
    rc = _load_run(run_dir)
    if rc["arm"] != "uc":
        raise CliError("validation", f"{run_dir} is a {rc['arm']} run; panels need a uc run")
    dataset = _load_data(Path(args.data) if args.data else Path(rc["data_dir"]))
    samples = dataset.by_id()
    zoom = check_zoom(args.zoom, dataset.config.grid_size)
    unknown = [s for s in args.sample_ids if s not in samples]
    if unknown:
        raise CliError("validation", f"unknown sample id {unknown[0]!r}")
    ckpts = CheckpointSet.from_paths(sorted((run_dir / "checkpoints").glob("epoch_*.ckpt")))
    models = ckpts.load_models()
    final = load_checkpoint(run_dir / "model_final.ckpt")
    compare = load_checkpoint(Path(args.compare) / "model_final.ckpt") if args.compare else None
    store = UncertaintyStore(run_dir / "uncertainty")
    out = Path(args.out) if args.out else run_dir / "viz"
    out.mkdir(parents=True, exist_ok=True)
    written = []
    for sid in args.sample_ids:
        s = samples[sid]
        outs = ensemble_infer(ckpts, s.corrupted, models=models)
        u = store.get(sid).values if sid in store else compute_uncertainty(outs).values
        extra = None
        if compare is not None:
            extra = ("baseline", restore_batch(compare, s.corrupted[None])[0])
        path = out / f"{sid}.png"
        render_panel(path, s.corrupted, outs, ckpts.epochs, u, restore_batch(final, s.corrupted[None])[0], s.clean, extra, zoom)
        written.append(str(path))
    print(json.dumps({"panels": written}))
    return EXIT_OK


def cmd_run(args):
    """synth -> train uc -> train baseline -> eval -> viz from one config."""
    cfg = _resolved(args)
    root = Path(args.out) if args.out else None
    data = root / "data" if root else Path(cfg.paths.data_dir)
    runs = root / "runs" if root else Path(cfg.paths.runs_dir)
    evals = root / "eval" if root else Path(cfg.paths.eval_dir)
    common = {"config": args.config, "seed": args.seed, "deterministic": args.deterministic}
    cmd_synth(argparse.Namespace(out=str(data), **common))
    run_dirs = []
    for arm in ("uc", "baseline"):
        cmd_train(argparse.Namespace(arm=arm, out=str(runs), data=str(data), **common))
        run_dirs.append(str(runs / f"{arm}-{_resolved(args).training_hash(arm)[:12]}"))
    cmd_eval(argparse.Namespace(run_dirs=run_dirs, data=str(data), out=str(evals), config=args.config, seed=args.seed))
    first = load_dataset(data).train[0].sample_id
    cmd_viz(argparse.Namespace(run_dir=run_dirs[0], sample_ids=[first], data=str(data), zoom=None, compare=run_dirs[1], out=None))
    return EXIT_OK


class _Parser(argparse.ArgumentParser):
    """Usage errors follow the same one-line ``ERROR:`` format as everything else."""

    def error(self, message):
        print(_error_line("usage", f"{self.prog}: {message}"), file=sys.stderr)
        sys.exit(EXIT_VALIDATION)


def build_parser():
    parser = _Parser(prog="ucmar", description="Uncertainty-constrained metal artifact reduction")
    parser.add_argument("--version", action="version", version=__version__)
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, seed=True):
        p.add_argument("--config", help="run config JSON")
        if seed:
            p.add_argument("--seed", type=int, help="override the seed")
        p.add_argument("--out", help="output directory")

    p = sub.add_parser("synth", help="synthesize the paired dataset")
    common(p)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train one arm")
    common(p)
    p.add_argument("--arm", choices=("uc", "baseline"), required=True)
    p.add_argument("--data", help="dataset directory")
    p.add_argument("--deterministic", action=argparse.BooleanOptionalAction, default=None)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate finished runs on the test split")
    common(p)
    p.add_argument("run_dirs", nargs="+")
    p.add_argument("--data", help="dataset directory (default: the one recorded in the run)")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("viz", help="write comparison panels for a uc run")
    p.add_argument("run_dir")
    p.add_argument("sample_ids", nargs="+")
    p.add_argument("--data")
    p.add_argument("--zoom", nargs=4, type=int, metavar=("ROW0", "COL0", "ROW1", "COL1"))
    p.add_argument("--compare", help="baseline run directory to add as a tile")
    p.add_argument("--out")
    p.set_defaults(func=cmd_viz)

    p = sub.add_parser("run", help="synth, train both arms, eval and viz")
    common(p)
    p.add_argument("--deterministic", action=argparse.BooleanOptionalAction, default=None)
    p.set_defaults(func=cmd_run)
    return parser


def _error_line(code, message):
    return f"ERROR:{code}:{' '.join(str(message).split())}"


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING, stream=sys.stderr, format="%(message)s"
    )
    try:
        return args.func(args)
    except UcmarError as exc:
        print(_error_line(exc.code, exc), file=sys.stderr)
        return exc.exit_code
    except (FileNotFoundError, PermissionError, IsADirectoryError) as exc:
        print(_error_line("io", exc), file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
