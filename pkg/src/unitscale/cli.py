"""Command-line front end.

Every subcommand writes plain CSV/JSON. Exit codes: 0 success, 1 usage
error, 2 verification failure, 3 divergence.
"""

from __future__ import annotations

import argparse
import json
import re
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from unitscale import __version__
from unitscale import floatsim as fs
from unitscale import opslib as O
from unitscale import tensor as T
from unitscale import train as TR
from unitscale.graph import Graph, GraphError, gradient_scale_ratio, verify_scaled_op

EXIT_OK, EXIT_USAGE, EXIT_VERIFY, EXIT_DIVERGED = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_USAGE)


@dataclass
class RunManifest:
    command: str
    config: dict
    seed: int | None
    version: str = __version__
    outputs: list[str] = field(default_factory=list)
    duration_s: float = 0.0

    def write(self, out: Path) -> Path:
        for f in self.outputs:
            p = out / f
            if not p.exists() or p.stat().st_size == 0:
                raise RuntimeError(f"declared output {f} is missing or empty")
        path = out / "manifest.json"
        path.write_text(json.dumps(asdict(self), indent=1) + "\n")
        return path


def _fmt(name: str) -> fs.FloatFormat:
    try:
        return fs.get_format(name)
    except KeyError as exc:
        raise UsageError(exc.args[0]) from exc


def _slug(s: str) -> str:
    return re.sub(r"[^A-Za-z0-9_.-]+", "_", s).strip("_")


def _write(out: Path, name: str, text: str, files: list[str]) -> None:
    (out / name).write_text(text)
    files.append(name)


# ---------------------------------------------------------------------------
# formats / snr / factors


def cmd_formats(args) -> int:
    text = json.dumps([f.to_dict() for f in fs.format_catalog()], indent=1)
    if args.out:
        Path(args.out).write_text(text + "\n")
    else:
        print(text)
    return EXIT_OK


def _snr_rows(fmt, grid, samples, seed):
    return [(p.sigma, p.snr) for p in fs.snr_curve(fmt, grid, samples, seed)]


def cmd_snr(args) -> int:
    names = [n for group in args.format for n in group.split(",") if n] or fs.format_names()
    fmts = [_fmt(n) for n in names]
    if args.points < 1:
        raise UsageError("--points must be >= 1")
    if args.sigma_max < args.sigma_min or (args.points == 1 and args.sigma_max != args.sigma_min):
        raise UsageError("need sigma-min <= sigma-max (equal when --points is 1)")
    if args.samples < 10**4:
        raise UsageError("--samples must be at least 10000")
    grid = fs.log2_grid(args.sigma_min, args.sigma_max, args.points)
    curves = {f.name: _snr_rows(f, grid, args.samples, args.seed) for f in fmts}
    if not args.out:
        print("format,sigma,snr" if len(fmts) > 1 else "sigma,snr")
        for name, rows in curves.items():
            for s, v in rows:
                print(f"{name},{s!r},{v!r}" if len(fmts) > 1 else f"{s!r},{v!r}")
        return EXIT_OK
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    files: list[str] = []
    merged = ["format,sigma,snr"]
    for name, rows in curves.items():
        _write(out, f"snr_{_slug(name)}.csv", "sigma,snr\n" + "".join(f"{s!r},{v!r}\n" for s, v in rows), files)
        merged += [f"{name},{s!r},{v!r}" for s, v in rows]
    _write(out, "snr_all.csv", "\n".join(merged) + "\n", files)
    cfg = {"formats": names, "sigma_min": args.sigma_min, "sigma_max": args.sigma_max, "points": args.points,
           "samples": args.samples}
    RunManifest("snr", cfg, args.seed, outputs=files).write(out)
    return EXIT_OK


def _parse_dims(items) -> dict:
    dims = {}
    for item in items or []:
        if "=" not in item:
            raise UsageError(f"dimension {item!r} should look like name=value")
        k, v = item.split("=", 1)
        try:
            dims[k] = [float(x) for x in v.split(",")] if k == "gammas" else int(v)
        except ValueError as exc:
            raise UsageError(f"bad value for {k}: {v!r}") from exc
    return dims


def cmd_factors(args) -> int:
    if args.list:
        print(json.dumps(O.compendium_json(), indent=1))
        return EXIT_OK
    if not args.op:
        raise UsageError("--op is required (or --list)")
    try:
        res = O.factors(args.op, **_parse_dims(args.dims))
    except KeyError as exc:
        raise UsageError(exc.args[0]) from exc
    except TypeError as exc:
        raise UsageError(f"{args.op}: {exc}") from exc
    print(json.dumps(res, indent=1))
    return EXIT_OK


# ---------------------------------------------------------------------------
# verify


def cmd_verify(args) -> int:
    try:
        g = Graph.from_json(Path(args.graph).read_text())
    except OSError as exc:
        raise UsageError(f"cannot read {args.graph}: {exc}") from exc
    except GraphError as exc:
        print(json.dumps({"error": str(exc)}), file=sys.stderr)
        return EXIT_USAGE
    if len(g.outputs) != 1:
        raise UsageError("verify needs a single-output graph")
    rep = verify_scaled_op(g, args.trials, args.seed)
    out = {"is_scaled_op": rep.is_scaled_op, "message": rep.message, "ratios": rep.ratios,
           "residuals": rep.residuals}
    try:
        out["gradient_scale_ratio"] = {n.name: gradient_scale_ratio(g, n.id) for n in g.inputs}
    except GraphError as exc:
        out["gradient_scale_ratio"] = None
        out["constraint_error"] = str(exc)
    print(json.dumps(out, indent=1))
    return EXIT_OK if rep.is_scaled_op else EXIT_VERIFY


# ---------------------------------------------------------------------------
# hist / train / sweep


def _load_config(args) -> TR.TrainConfig:
    if args.config:
        try:
            d = json.loads(Path(args.config).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise UsageError(f"cannot load config {args.config}: {exc}") from exc
        try:
            return TR.TrainConfig.from_dict(d)
        except (TypeError, ValueError) as exc:
            raise UsageError(str(exc)) from exc
    if getattr(args, "preset", None):
        presets = TR.parity_configs()
        if args.preset not in presets:
            raise UsageError(f"unknown preset {args.preset!r}; choose from {sorted(presets)}")
        return presets[args.preset]
    return TR.TrainConfig()


E4_RANGE = (fs.min_normal(fs.FP8_E4_A), fs.max_normal(fs.FP8_E4_A))


def cmd_hist(args) -> int:
    cfg = _load_config(args)
    try:
        model = TR.build_unit_ffn(config=cfg.model, seed=cfg.seed)
    except (ValueError, GraphError) as exc:
        raise UsageError(str(exc)) from exc
    rng = np.random.default_rng(cfg.seed)
    c = cfg.model
    x = rng.standard_normal((c.batch, model.in_dim))
    t = TR._onehot(rng.integers(0, c.classes, c.batch), c.classes)
    _, grads, tape = model.loss_and_grads(x, t, cfg.precision.quantizer(), cfg.precision.loss_scale)
    tensors = model.named_tensors(tape)
    tensors.update({f"gradw:{k}": v for k, v in grads.items()})
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    files: list[str] = []
    summary = ["tensor,std,zero_fraction,e4_range_fraction"]
    for name, v in tensors.items():
        h = T.exponent_histogram(v)
        _write(out, f"hist_{_slug(name)}.csv", h.to_csv(), files)
        zf = h.zero / h.total if h.total else 0.0
        summary.append(f"{name},{float(np.std(v))!r},{zf!r},{TR.range_fraction([v], *E4_RANGE)!r}")
    _write(out, "summary.csv", "\n".join(summary) + "\n", files)
    RunManifest("hist", cfg.to_dict(), cfg.seed, outputs=files).write(out)
    print(f"wrote {len(files)} files to {out}")
    return EXIT_OK


def _run_to_dir(cfg: TR.TrainConfig, out: Path, command: str = "train") -> tuple[int, str]:
    t0 = time.perf_counter()
    _, res = TR.run(cfg)
    out.mkdir(parents=True, exist_ok=True)
    files: list[str] = []
    _write(out, "losses.csv", res.losses_csv(), files)
    if res.stats:
        _write(out, "stats.csv", res.stats_csv(), files)
    for (step, name), h in sorted(res.histograms.items()):
        _write(out, f"hist_{step:06d}_{_slug(name)}.csv", h.to_csv(), files)
    summary = {
        "final_loss": res.final_loss(),
        "skipped": res.skipped,
        "diverged": res.diverged,
        "report": res.report,
        "gradw_zero_fraction": res.zero_fraction() if res.histograms else None,
    }
    _write(out, "summary.json", json.dumps(summary, indent=1) + "\n", files)
    RunManifest(command, cfg.to_dict(), cfg.seed, outputs=files, duration_s=time.perf_counter() - t0).write(out)
    status = EXIT_DIVERGED if res.diverged else EXIT_OK
    return status, json.dumps(summary)


def cmd_train(args) -> int:
    cfg = _load_config(args)
    try:
        status, line = _run_to_dir(cfg, Path(args.out))
    except (ValueError, GraphError) as exc:
        raise UsageError(str(exc)) from exc
    print(line)
    return status


def _sweep_one(item):
    run_id, cfg_dict, out = item
    cfg = TR.TrainConfig.from_dict(cfg_dict)
    status, line = _run_to_dir(cfg, Path(out) / run_id, "sweep")
    return run_id, status, line


def cmd_sweep(args) -> int:
    items = []
    for path in args.configs:
        try:
            d = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise UsageError(f"cannot load config {path}: {exc}") from exc
        entries = d if isinstance(d, list) else [d]
        for k, e in enumerate(entries):
            try:
                TR.TrainConfig.from_dict(e)
            except (TypeError, ValueError) as exc:
                raise UsageError(f"{path}[{k}]: {exc}") from exc
            stem = _slug(Path(path).stem)
            items.append((f"{stem}_{k}" if len(entries) > 1 else stem, e, args.out))
    if args.preset_parity:
        items += [(name, c.to_dict(), args.out) for name, c in TR.parity_configs(args.steps).items()]
    if not items:
        raise UsageError("nothing to run: give config files or --preset-parity")
    ids = [i[0] for i in items]
    if len(set(ids)) != len(ids):
        raise UsageError("run ids collide; rename the config files")
    if args.jobs > 1:
        with ProcessPoolExecutor(args.jobs) as ex:
            results = list(ex.map(_sweep_one, items))
    else:
        results = [_sweep_one(i) for i in items]
    results.sort()
    out = Path(args.out)
    lines = ["run,status,summary"] + [f"{r},{s},{json.dumps(line)}" for r, s, line in results]
    (out / "sweep.csv").write_text("\n".join(lines) + "\n")
    for r, s, line in results:
        print(f"{r}: {line}")
    return EXIT_DIVERGED if any(s == EXIT_DIVERGED for _, s, _ in results) else EXIT_OK


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="unitscale", description="Unit scaling and low-precision simulation tools.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("formats", help="print the format catalog as JSON")
    s.add_argument("--out", help="write to this file instead of stdout")
    s.set_defaults(func=cmd_formats)

    s = sub.add_parser("snr", help="SNR of normal samples against distribution scale")
    s.add_argument("--format", action="append", default=[], help="format name (repeatable or comma separated; default all)")
    s.add_argument("--sigma-min", type=float, default=-20.0, help="log2 of the smallest sigma")
    s.add_argument("--sigma-max", type=float, default=20.0, help="log2 of the largest sigma")
    s.add_argument("--points", type=int, default=41)
    s.add_argument("--samples", type=int, default=10**5)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", help="directory for per-format CSVs, merged CSV and manifest")
    s.set_defaults(func=cmd_snr)

    s = sub.add_parser("factors", help="scaling factors from the compendium")
    s.add_argument("--op")
    s.add_argument("--dims", nargs="*", metavar="NAME=VALUE", help="e.g. b=64 m=1024 n=1024, s=128, gammas=1,2")
    s.add_argument("--list", action="store_true", help="print the whole compendium")
    s.set_defaults(func=cmd_factors)

    s = sub.add_parser("verify", help="check that a graph JSON is a scaled op")
    s.add_argument("graph")
    s.add_argument("--trials", type=int, default=4)
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_verify)

    for name, func, helptext in (
        ("hist", cmd_hist, "exponent histograms of every tensor at initialisation"),
        ("train", cmd_train, "train a toy model"),
    ):
        s = sub.add_parser(name, help=helptext)
        g = s.add_mutually_exclusive_group()
        g.add_argument("--config", help="run configuration JSON")
        g.add_argument("--preset", help="one of the parity experiment runs, e.g. unit_fp16")
        s.add_argument("--out", required=True, help="output directory")
        s.set_defaults(func=func)

    s = sub.add_parser("sweep", help="run several configurations, optionally in parallel")
    s.add_argument("configs", nargs="*", help="config JSON files (each an object or a list of objects)")
    s.add_argument("--preset-parity", action="store_true", help="add the five FP16 parity runs")
    s.add_argument("--steps", type=int, default=300, help="steps for --preset-parity runs")
    s.add_argument("--jobs", type=int, default=1)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_sweep)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"unitscale {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
