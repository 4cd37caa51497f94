"""Command-line front end: ``sslband <command> [flags]``.

Every command writes its resolved configuration to ``run_config.json`` in its
output directory. Exit codes: 0 success, 2 configuration error, 3 data or
file-format error, 4 numerical failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

from threadpoolctl import threadpool_limits

from . import eval as ev
from .config import RUN_CONFIG_NAME, RunConfig
from .data import gen_synthetic, load_dataset, mean_spectrum, normalize, read_manifest, split_gallery_probe
from .errors import ConfigError, FormatError, NumericalError
from .model import load_checkpoint, save_checkpoint
from .optimizer import PruneSchedule
from .train import read_trace

log = logging.getLogger("sslband")

CHECKPOINT_NAME = "checkpoint.bpn"
TRACE_NAME = "trace.csv"
METRICS_NAME = "metrics.json"
BASELINE_NAME = "baseline.json"


def _int_list(text: str) -> list[int]:
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _float_list(text: str) -> list[float]:
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ConfigError(message)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="sslband", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def run_flags(sp, needs_data=True):
        sp.add_argument("--config", help="JSON run config; flags override it")
        sp.add_argument("--run-dir", required=True, help="output directory")
        if needs_data:
            sp.add_argument("--data", help="dataset manifest")
        sp.add_argument("--lambda-g", type=float)
        sp.add_argument("--gamma", type=float)
        sp.add_argument("--lr", type=float)
        sp.add_argument("--epochs", type=int)
        sp.add_argument("--batch-size", type=int)
        sp.add_argument("--seed", type=int)
        sp.add_argument("--prune-start", type=int)
        sp.add_argument("--prune-threshold", type=float)
        sp.add_argument("--no-prune", action="store_true", help="disable epoch-boundary pruning")
        sp.add_argument("--adam-eps", type=float)
        sp.add_argument("--sparsity", choices=["prox", "subgradient"])
        sp.add_argument("--gallery", type=int, help="gallery cubes per subject")
        sp.add_argument("--split-seed", type=int)
        sp.add_argument("--metric", choices=["euclidean", "cosine"])
        sp.add_argument("--threads", type=int, default=1, help="BLAS threads (1 = bit-reproducible)")

    g = sub.add_parser("gen-data", help="write a synthetic dataset")
    g.add_argument("--out", required=True)
    g.add_argument("--config", help="JSON run config whose 'synthetic' block seeds the defaults")
    g.add_argument("--subjects", type=int)
    g.add_argument("--cubes", type=int, help="cubes per subject")
    g.add_argument("--bands", type=int)
    g.add_argument("--height", type=int)
    g.add_argument("--width", type=int)
    g.add_argument("--informative", type=_int_list)
    g.add_argument("--snr", type=float)
    g.add_argument("--seed", type=int)
    g.add_argument("--threads", type=int, default=1)

    run_flags(sub.add_parser("train", help="train one model, write checkpoint and trace"))
    e = sub.add_parser("eval", help="identify probes with a trained run")
    e.add_argument("--run-dir", required=True)
    e.add_argument("--metric", choices=["euclidean", "cosine"])
    e.add_argument("--threads", type=int, default=1)
    run_flags(sub.add_parser("sweep-bands", help="single-band accuracy for every band"))
    sl = sub.add_parser("sweep-lambda", help="one run per lambda_g in the grid")
    run_flags(sl)
    sl.add_argument("--lambdas", type=_float_list, help="comma-separated lambda_g values")
    r = sub.add_parser("report", help="band-selection report for a trained run")
    r.add_argument("--run-dir", required=True)
    r.add_argument("--skip-per-band", action="store_true", help="do not run the per-band sweep if it is missing")
    r.add_argument("--threads", type=int, default=1)
    return p


def resolve_config(args) -> RunConfig:
    cfg = RunConfig.load(args.config) if getattr(args, "config", None) else RunConfig()
    t = cfg.train
    overrides = {
        "lambda_g": args.lambda_g,
        "gamma": args.gamma,
        "lr": args.lr,
        "epochs": args.epochs,
        "batch_size": args.batch_size,
        "adam_eps": args.adam_eps,
        "sparsity": args.sparsity,
    }
    t = dataclasses.replace(t, **{k: v for k, v in overrides.items() if v is not None})
    if args.no_prune:
        t = dataclasses.replace(t, prune=None)
    elif args.prune_start is not None or args.prune_threshold is not None:
        base = t.prune or PruneSchedule()
        t = dataclasses.replace(
            t,
            prune=dataclasses.replace(
                base,
                start_epoch=base.start_epoch if args.prune_start is None else args.prune_start,
                threshold_rel=base.threshold_rel if args.prune_threshold is None else args.prune_threshold,
            ),
        )
    split = cfg.split
    if args.gallery is not None:
        split = dataclasses.replace(split, gallery_cubes_per_subject=args.gallery)
    if args.split_seed is not None:
        split = dataclasses.replace(split, seed=args.split_seed)
    cfg = dataclasses.replace(cfg, train=t, split=split)
    if args.seed is not None:
        cfg = dataclasses.replace(cfg, seed=args.seed)
    if args.metric is not None:
        cfg = dataclasses.replace(cfg, metric=args.metric)
    if getattr(args, "data", None):
        cfg = dataclasses.replace(cfg, data=str(Path(args.data).resolve()))
    if getattr(args, "lambdas", None):
        cfg = dataclasses.replace(cfg, lambda_grid=list(args.lambdas))
    if cfg.data is None:
        raise ConfigError("no dataset: pass --data or set 'data' in the config")
    return cfg


def _prepare(run_dir: str | Path, cfg: RunConfig) -> Path:
    out = Path(run_dir)
    out.mkdir(parents=True, exist_ok=True)
    cfg.save(out / RUN_CONFIG_NAME)
    return out


def _load_run(run_dir) -> tuple[Path, RunConfig]:
    out = Path(run_dir)
    if not (out / RUN_CONFIG_NAME).exists():
        raise FormatError(f"{out} has no {RUN_CONFIG_NAME}; is it a run directory?")
    return out, RunConfig.load(out / RUN_CONFIG_NAME)


def _dump(path: Path, obj: dict):
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def cmd_gen_data(args) -> int:
    cfg = RunConfig.load(args.config) if args.config else RunConfig()
    s = cfg.synthetic
    given = {
        "num_subjects": args.subjects,
        "cubes_per_subject": args.cubes,
        "num_bands": args.bands,
        "height": args.height,
        "width": args.width,
        "informative": args.informative,
        "snr": args.snr,
        "seed": args.seed,
    }
    s = dataclasses.replace(s, **{k: v for k, v in given.items() if v is not None})
    out = Path(args.out)
    manifest = gen_synthetic(
        out, s.num_subjects, s.cubes_per_subject, s.num_bands, s.height, s.width, s.informative, s.snr, s.seed
    )
    cfg = dataclasses.replace(cfg, synthetic=s, data=str((out / "manifest.txt").resolve()))
    _prepare(out, cfg)
    print(f"wrote {len(manifest)} cubes ({s.num_bands} bands, informative {s.informative}) to {out}")
    return 0


def cmd_train(args) -> int:
    cfg = resolve_config(args)
    out = _prepare(args.run_dir, cfg)
    data = load_dataset(read_manifest(cfg.data))
    r = ev.fit(data, cfg, trace_path=out / TRACE_NAME)
    save_checkpoint(r.net, out / CHECKPOINT_NAME)
    print(f"rank-1 {r.rank1:.4f}; surviving bands {r.surviving.tolist()}")
    return 0


def _evaluate(out: Path, cfg: RunConfig) -> ev.CMCCurve:
    data = load_dataset(read_manifest(cfg.data))
    net = load_checkpoint(out / CHECKPOINT_NAME, dtype=cfg.np_dtype)
    g_idx, p_idx = split_gallery_probe(data.subjects, cfg.split)
    spectrum = mean_spectrum(data.x[g_idx])
    fg = ev.extract_features(net, normalize(data.x[g_idx], spectrum))
    fp = ev.extract_features(net, normalize(data.x[p_idx], spectrum))
    cmc = ev.identify(fg, data.subjects[g_idx], fp, data.subjects[p_idx], cfg.metric)
    ev.write_cmc(out / "cmc.csv", cmc)
    _dump(
        out / METRICS_NAME,
        {"rank1": cmc.rank1, "surviving_bands": ev.surviving_bands(net).tolist(), "metric": cfg.metric},
    )
    return cmc


def cmd_eval(args) -> int:
    out, cfg = _load_run(args.run_dir)
    if args.metric is not None and args.metric != cfg.metric:
        cfg = dataclasses.replace(cfg, metric=args.metric)
        cfg.save(out / RUN_CONFIG_NAME)
    cmc = _evaluate(out, cfg)
    print(f"rank-1 {cmc.rank1:.4f}; rank-5 {cmc.rank_rates[min(4, cmc.rank_rates.size - 1)]:.4f}")
    return 0


def cmd_sweep_bands(args) -> int:
    cfg = resolve_config(args)
    out = _prepare(args.run_dir, cfg)
    data = load_dataset(read_manifest(cfg.data))
    pb = ev.per_band_sweep(data, cfg)
    ev.write_per_band(out / "per_band.csv", pb)
    for g, a in enumerate(pb.rank1):
        print(f"band {g} ({pb.wavelengths[g]:.0f} nm): rank-1 {a:.4f}")
    return 0


def cmd_sweep_lambda(args) -> int:
    cfg = resolve_config(args)
    out = _prepare(args.run_dir, cfg)
    data = load_dataset(read_manifest(cfg.data))
    points = ev.lambda_sweep(data, cfg)
    ev.write_lambda_sweep(out / "lambda_sweep.csv", points)
    for p in points:
        print(f"lambda_g {p.lambda_g:g}: rank-1 {p.rank1:.4f}, {p.num_surviving} bands {p.surviving.tolist()}")
    return 0


def cmd_report(args) -> int:
    out, cfg = _load_run(args.run_dir)
    trace = read_trace(out / TRACE_NAME)
    if (out / METRICS_NAME).exists():
        ssl = json.loads((out / METRICS_NAME).read_text())["rank1"]
    else:
        ssl = _evaluate(out, cfg).rank1
    data = load_dataset(read_manifest(cfg.data))
    if (out / BASELINE_NAME).exists():
        all_bands = json.loads((out / BASELINE_NAME).read_text())["rank1"]
    else:
        base = ev.fit(data, dataclasses.replace(cfg, train=dataclasses.replace(cfg.train, lambda_g=0.0, prune=None)))
        all_bands = base.rank1
        _dump(out / BASELINE_NAME, {"rank1": all_bands, "lambda_g": 0.0})
    per_band = None
    if (out / "per_band.csv").exists():
        per_band = ev.read_per_band(out / "per_band.csv")
    elif not args.skip_per_band:
        per_band = ev.per_band_sweep(data, cfg)
    report = ev.make_report(trace, data.wavelengths, ssl, all_bands, per_band, out_dir=out)
    print(ev.format_selection(report), end="")
    return 0


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "eval": cmd_eval,
    "sweep-bands": cmd_sweep_bands,
    "sweep-lambda": cmd_sweep_lambda,
    "report": cmd_report,
}


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
        if args.threads < 1:
            raise ConfigError("--threads must be >= 1")
        with threadpool_limits(limits=args.threads):
            return COMMANDS[args.command](args)
    except ConfigError as exc:
        print(f"sslband: configuration error: {exc}", file=sys.stderr)
        return 2
    except (FormatError, OSError) as exc:
        print(f"sslband: data error: {exc}", file=sys.stderr)
        return 3
    except (NumericalError, FloatingPointError) as exc:
        print(f"sslband: numerical failure: {exc}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
