"""Command line entry point: make-data, train, sweep, theory-check, export, nac-table.

Exit codes: 0 success, 2 invalid config or input, 3 numeric failure, 4 partial sweep failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import torch

from maskaae import config as cfgmod
from maskaae import experiments as ex
from maskaae.errors import InvalidArgumentError, IntegrityError, NumericError, StateError
from maskaae.synthetic_data import load_dataset, make_dataset
from maskaae.theory import theory_report

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_PARTIAL = 0, 2, 3, 4
log = logging.getLogger("maskaae")


def _config_args(p):
    p.add_argument("--config", help="YAML or JSON config file")
    p.add_argument("--preset", choices=sorted(cfgmod.PRESETS))
    p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                   help="dotted override, e.g. train.lr_ae=1e-3 (repeatable)")
    p.add_argument("--runs-dir", help=f"output root (default ${cfgmod.RUNS_ENV} or ./runs)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="maskaae", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("make-data", help="sample a synthetic dataset")
    _config_args(p)
    p.add_argument("--n", type=int)
    p.add_argument("--count", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--out", required=True)

    p = sub.add_parser("train", help="train one model")
    _config_args(p)
    p.add_argument("--data", help="dataset file (sampled from the config when omitted)")
    p.add_argument("--variant", choices=("maskaae", "wae_baseline"))
    p.add_argument("--m", type=int, help="latent dimension")
    p.add_argument("--steps", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--name", help="run directory name under the runs root")

    p = sub.add_parser("sweep", help="grid of runs over variants, m values and repeats")
    _config_args(p)
    p.add_argument("--data", required=True)
    p.add_argument("--variants", nargs="+", choices=("maskaae", "wae_baseline"))
    p.add_argument("--m-values", nargs="+", type=int)
    p.add_argument("--repeats", type=int)
    p.add_argument("--jobs", type=int)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--name", default="sweep")

    p = sub.add_parser("theory-check", help="numerical checks of the covering and cross-entropy results")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--probes", type=int, default=100_000)
    p.add_argument("--out", help="write the JSON report here as well as to stdout")

    p = sub.add_parser("export", help="plot-ready CSVs")
    esub = p.add_subparsers(dest="what", required=True)
    e = esub.add_parser("ucurve")
    e.add_argument("--sweep", required=True, help="sweep directory")
    e.add_argument("--out", required=True)
    e.add_argument("--chart")
    e = esub.add_parser("mask-trace")
    e.add_argument("--run", required=True, help="run directory")
    e.add_argument("--out", required=True)
    e.add_argument("--chart")

    p = sub.add_parser("nac-table", help="compare final NAC across runs")
    p.add_argument("runs", nargs="*")
    p.add_argument("--out")
    return parser


def _resolve(args, extra: dict) -> dict:
    file_cfg = cfgmod.load_config_file(args.config) if args.config else {}
    overrides = list(args.overrides)
    flags = {k: v for k, v in extra.items() if v is not None}
    return cfgmod.resolve(args.preset, file_cfg, [*overrides, *([_nest(flags)] if flags else [])])


def _nest(flat: dict) -> dict:
    out: dict = {}
    for key, v in flat.items():
        cur = out
        parts = key.split(".")
        for p in parts[:-1]:
            cur = cur.setdefault(p, {})
        cur[parts[-1]] = v
    return out


def _side_manifest(path) -> Path:
    path = Path(path)
    return path.with_name(path.name + ".manifest.json")


def cmd_make_data(args) -> int:
    cfg = _resolve(args, {"data.n": args.n, "data.count": args.count, "data.seed": args.seed})
    ex.write_manifest(_side_manifest(args.out), cfg, "make-data", out=str(args.out))
    ds = make_dataset(cfgmod.generator_spec(cfg), int(cfg["data"]["count"]), args.out,
                      stream_seed=int(cfg["data"]["stream_seed"]))
    ex.update_manifest(_side_manifest(args.out), status="completed", spec_fingerprint=ds.spec_fingerprint)
    print(f"wrote {ds.count} x {ds.d} samples to {args.out}")
    return EXIT_OK


def _dataset_for(cfg: dict, data_arg, root: Path):
    if data_arg:
        return load_dataset(data_arg), str(data_arg)
    path = cfg["data"].get("path")
    if path:
        return load_dataset(path), str(path)
    spec = cfgmod.generator_spec(cfg)
    path = root / "data" / f"synthetic_{spec.fingerprint()[:12]}_{cfg['data']['count']}.bin"
    if path.exists():
        return load_dataset(path), str(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    make_dataset(spec, int(cfg["data"]["count"]), path, stream_seed=int(cfg["data"]["stream_seed"]))
    return load_dataset(path), str(path)


def cmd_train(args) -> int:
    cfg = _resolve(args, {"variant": args.variant, "latent_dim": args.m,
                          "train.training_steps": args.steps, "train.seed": args.seed})
    root = cfgmod.runs_root(args.runs_dir)
    name = args.name or cfg.get("name") or f"{cfg['variant']}_m{cfg['latent_dim']}_s{cfg['train']['seed']}"
    cfg["name"] = name
    run_dir = root / name
    run_dir.mkdir(parents=True, exist_ok=True)
    ex.write_manifest(run_dir / "manifest.json", cfg, "train", data=args.data)
    ds, ds_path = _dataset_for(cfg, args.data, root)
    ex.update_manifest(run_dir / "manifest.json", dataset=ds_path, dataset_fingerprint=ds.spec_fingerprint)
    try:
        result = ex.run_training(cfg, ds, run_dir, cfg["variant"], int(cfg["latent_dim"]), int(cfg["train"]["seed"]))
    except NumericError as exc:
        ex.update_manifest(run_dir / "manifest.json", status="failed", error=str(exc), failed_step=exc.step)
        raise
    ex.update_manifest(run_dir / "manifest.json", status="completed", result=result)
    print(json.dumps({"run_dir": str(run_dir), **result}))
    return EXIT_OK


def cmd_sweep(args) -> int:
    cfg = _resolve(args, {"sweep.variants": args.variants, "sweep.m_values": args.m_values,
                          "sweep.repeats": args.repeats, "sweep.jobs": args.jobs})
    out = cfgmod.runs_root(args.runs_dir) / args.name
    out.mkdir(parents=True, exist_ok=True)
    ex.write_manifest(out / "manifest.json", cfg, "sweep", data=args.data, base_seed=args.seed)
    sw = cfg["sweep"]
    spec = ex.SweepSpec(dataset_path=args.data, variants=list(sw["variants"]),
                        m_values=[int(m) for m in sw["m_values"]], config=cfg, repeats=int(sw["repeats"]),
                        out_dir=str(out), jobs=int(sw["jobs"]), base_seed=args.seed)
    result = ex.run_sweep(spec)
    status = "completed" if not result.failed else "partial"
    ex.update_manifest(out / "manifest.json", status=status,
                       failed=[ex.cell_name(f["variant"], f["m"], f["repeat"]) for f in result.failed])
    print(result.summary_path.read_text(), end="")
    for f in result.failed:
        print(f"FAILED {ex.cell_name(f['variant'], f['m'], f['repeat'])}: {f['error']}", file=sys.stderr)
    return EXIT_PARTIAL if result.failed else EXIT_OK


def cmd_theory(args) -> int:
    settings = {"seed": args.seed, "probes": args.probes}
    if args.out:
        ex.write_manifest(_side_manifest(args.out), settings, "theory-check")
    report = theory_report(seed=args.seed, probes=args.probes)
    text = json.dumps(report, indent=2, sort_keys=True)
    print(text)
    if args.out:
        Path(args.out).write_text(text + "\n")
        ex.update_manifest(_side_manifest(args.out), status="completed", all_passed=report["all_passed"])
    return EXIT_OK if report["all_passed"] else EXIT_NUMERIC


def cmd_export(args) -> int:
    settings = {k: v for k, v in vars(args).items() if k != "func"}
    ex.write_manifest(_side_manifest(args.out), settings, f"export {args.what}")
    if args.what == "ucurve":
        rows = ex.export_ucurve(args.sweep, args.out, args.chart)
    else:
        rows = ex.export_mask_trace(args.run, args.out, args.chart)
    ex.update_manifest(_side_manifest(args.out), status="completed", rows=len(rows))
    print(f"wrote {len(rows)} rows to {args.out}")
    return EXIT_OK


def cmd_nac_table(args) -> int:
    settings = {"runs": list(args.runs), "out": args.out}
    if args.out:
        ex.write_manifest(_side_manifest(args.out), settings, "nac-table")
    rows = ex.nac_table(args.runs, args.out)
    for r in rows:
        mark = "*" if r["lower_nac"] else ""
        print(f"{r['variant']:<13} m={r['m']:<3} m_A={r['m_A']} nac={r['nac']} {mark}")
    if args.out:
        ex.update_manifest(_side_manifest(args.out), status="completed", rows=len(rows))
    return EXIT_OK


COMMANDS = {"make-data": cmd_make_data, "train": cmd_train, "sweep": cmd_sweep,
            "theory-check": cmd_theory, "export": cmd_export, "nac-table": cmd_nac_table}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    torch.set_num_threads(1)
    try:
        return COMMANDS[args.command](args)
    except NumericError as exc:
        print(f"numeric failure at step {exc.step}: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (InvalidArgumentError, IntegrityError, StateError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
