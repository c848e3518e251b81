"""Command-line entry point: ``sdm generate | train | eval | gradcheck``.

Every option may also come from a JSON run-config given with ``--config``;
a flag on the command line wins, the file fills in flags left out, and
built-in defaults cover the rest.  Each output records the resolved config
and a short hash of it, and carries no timestamps, so re-running a command
from its recorded config reproduces the output byte for byte.

Exit codes: 0 success, 2 usage error, 3 data error, 4 numerical failure.
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
from .dataset import (
    SKY_THETA,
    ConfigParseError,
    GenerationError,
    GenParams,
    add_noise,
    generate_config,
    load_config,
    save_config,
)
from .evaluation import ExperimentSpec, TrialError, gradcheck, rows_to_csv, run_noise_sweep
from .geometry import DomainError
from .optimizer import HyperParams, NumericalError, train

log = logging.getLogger("sdm")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4
MANIFEST = "manifest.json"


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


OUTPUT_KEYS = ("out", "report")


def recorded(cfg: dict) -> dict:
    """The part of a resolved config that determines outputs (no output paths)."""
    return {k: v for k, v in cfg.items() if k not in OUTPUT_KEYS}


def config_hash(cfg: dict) -> str:
    blob = json.dumps(recorded(cfg), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


def _dump(obj) -> str:
    return json.dumps(obj, sort_keys=True, indent=2) + "\n"


# options per command: name -> (default, type)
GENERATE_OPTS = {
    "count": (768, int),
    "seed": (0, int),
    "out": (None, str),
    "min_objects": (3, int),
    "max_objects": (12, int),
    "z_lo": (5.0, float),
    "z_hi": (80.0, float),
    "tau": (0.25, float),
    "sigma": (3.0, float),
    "theta": (list(SKY_THETA), float),
}
TRAIN_OPTS = {
    "data": (None, str),
    "epochs": (1, int),
    "lr": (3e-4, float),
    "batch": (16, int),
    "s": (4, int),
    "zoom_schedule": (None, int),
    "noise": (0, int),
    "seed": (0, int),
    "limit": (None, int),
    "report": (None, str),
}
GRADCHECK_OPTS = {
    "data": (None, str),
    "samples": (64, int),
    "seed": (0, int),
    "s": (4, int),
    "radius": (0.3, float),
    "report": (None, str),
}


def _resolve(args, opts: dict, file_cfg: dict, command: str) -> dict:
    """Merge flag values, the run-config file and defaults."""
    section = file_cfg.get(command, file_cfg)
    if not isinstance(section, dict):
        raise UsageError(f"run-config section '{command}' must be an object")
    unknown = set(section) - set(opts) - {"generate", "train", "eval", "gradcheck"}
    if unknown:
        raise UsageError(f"unknown run-config field(s): {', '.join(sorted(unknown))}")
    out = {}
    for name, (default, typ) in opts.items():
        val = getattr(args, name, None)
        if val is None:
            val = section.get(name, default)
        if val is not None:
            try:
                val = [typ(v) for v in val] if isinstance(val, (list, tuple)) else typ(val)
            except (TypeError, ValueError):
                raise UsageError(f"field '{name}': cannot interpret {val!r} as {typ.__name__}") from None
        out[name] = val
    return out


def _load_file_cfg(path):
    if not path:
        return {}
    try:
        cfg = json.loads(Path(path).read_text())
    except OSError as exc:
        raise UsageError(f"cannot read run-config {path}: {exc.strerror}") from None
    except json.JSONDecodeError as exc:
        raise UsageError(f"{path}: invalid JSON at line {exc.lineno}: {exc.msg}") from None
    if not isinstance(cfg, dict):
        raise UsageError(f"{path}: run-config must be a JSON object")
    return cfg


# ---------------------------------------------------------------------------
# generate


def cmd_generate(args) -> int:
    cfg = _resolve(args, GENERATE_OPTS, _load_file_cfg(args.config), "generate")
    if cfg["out"] is None:
        raise UsageError("generate needs --out")
    if cfg["count"] < 0:
        raise UsageError("--count must be non-negative")
    if len(cfg["theta"]) != 2:
        raise UsageError("--theta takes two values")
    try:
        params = GenParams(cfg["min_objects"], cfg["max_objects"], cfg["z_lo"], cfg["z_hi"], cfg["tau"],
                           cfg["sigma"], cfg["seed"], tuple(cfg["theta"]))
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    out = Path(cfg["out"])
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise DataError(f"cannot create {out}: {exc.strerror}") from None
    h = config_hash(cfg)
    items = []
    for k in range(cfg["count"]):
        c = generate_config(params, k)
        name = f"{c.id}.skycfg"
        try:
            save_config(c, out / name)
        except OSError as exc:
            raise DataError(f"cannot write {out / name}: {exc.strerror}") from None
        items.append({"id": c.id, "file": name, "seed": cfg["seed"], "index": k, "n_points": int(c.points.shape[0])})
    manifest = {"format": "SKYCFG1", "config": recorded(cfg), "config_hash": h, "version": __version__, "configs": items}
    (out / MANIFEST).write_text(_dump(manifest))
    print(f"wrote {len(items)} configurations to {out} (config {h})")
    return EXIT_OK


# ---------------------------------------------------------------------------
# train


def load_corpus(path, limit=None):
    """Configs listed in a corpus manifest, or every ``*.skycfg`` in sorted order."""
    path = Path(path)
    if path.is_file():
        files = [path]
    elif path.is_dir():
        man = path / MANIFEST
        if man.exists():
            try:
                files = [path / it["file"] for it in json.loads(man.read_text())["configs"]]
            except (KeyError, TypeError, json.JSONDecodeError) as exc:
                raise DataError(f"{man}: malformed manifest ({exc})") from None
        else:
            files = sorted(path.glob("*.skycfg"))
    else:
        raise DataError(f"no corpus at {path}")
    if limit is not None:
        files = files[:limit]
    configs = []
    for f in files:
        try:
            configs.append(load_config(f))
        except ConfigParseError as exc:
            raise DataError(str(exc)) from None
        except OSError as exc:
            raise DataError(f"cannot read {f}: {exc.strerror}") from None
    return configs


def cmd_train(args) -> int:
    cfg = _resolve(args, TRAIN_OPTS, _load_file_cfg(args.config), "train")
    if cfg["data"] is None:
        raise UsageError("train needs --data")
    if cfg["noise"] < 0:
        raise UsageError("--noise must be non-negative")
    try:
        hp = HyperParams(lr=cfg["lr"], batch_size=cfg["batch"], n_epoch=cfg["epochs"], s=cfg["s"],
                         zoom_schedule=tuple(cfg["zoom_schedule"]) if cfg["zoom_schedule"] else None)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    configs = load_corpus(cfg["data"], cfg["limit"])
    if not configs:
        raise UsageError(f"corpus {cfg['data']} is empty")
    if cfg["noise"]:
        configs = [c.with_target(add_noise(c.target, cfg["noise"], [cfg["seed"], cfg["noise"], k]))
                   for k, c in enumerate(configs)]
    try:
        rep = train(configs, hp, seed=cfg["seed"])
    except DomainError as exc:
        raise DataError(str(exc)) from None
    h = config_hash(cfg)
    degenerate = hp.lr == 0 or hp.n_epoch == 0
    lines = {
        "config_hash": h,
        "seed": cfg["seed"],
        "n_configs": len(configs),
        "n_steps": len(rep.losses),
        "theta_a": repr(float(rep.theta[0])),
        "theta_b": repr(float(rep.theta[1])),
        "error": "nan" if rep.error is None else repr(rep.error),
        "final_loss": repr(rep.losses[-1]) if rep.losses else "nan",
        "stopped_early": str(rep.stopped_early).lower(),
        "degenerate": str(degenerate).lower(),
        "config": json.dumps(recorded(cfg), sort_keys=True),
    }
    text = "".join(f"{k} = {v}\n" for k, v in lines.items())
    if cfg["report"]:
        report = Path(cfg["report"])
        report.write_text(text)
        curve = ["# config_hash " + h, "step,epoch,zoom,loss"]
        per_epoch = -(-len(configs) // hp.batch_size)
        curve += [f"{i},{i // per_epoch},{z},{l!r}" for i, (z, l) in enumerate(zip(rep.zooms, rep.losses))]
        report.with_suffix(".loss.csv").write_text("\n".join(curve) + "\n")
    sys.stdout.write(text)
    if degenerate:
        print("warning: degenerate run, the estimate was never updated", file=sys.stderr)
    return EXIT_OK


# ---------------------------------------------------------------------------
# eval


def parse_spec(obj) -> ExperimentSpec:
    """Experiment spec from parsed JSON; unknown or ill-typed fields are usage errors."""
    if not isinstance(obj, dict):
        raise UsageError("experiment spec must be a JSON object")
    known = {"noise_levels", "trials", "n_configs", "seed", "out", "hp", "gen"}
    bad = set(obj) - known
    if bad:
        raise UsageError(f"unknown spec field(s): {', '.join(sorted(bad))}")
    kw = {}
    try:
        if "noise_levels" in obj:
            kw["noise_levels"] = tuple(int(n) for n in obj["noise_levels"])
        for f in ("trials", "n_configs", "seed"):
            if f in obj:
                if isinstance(obj[f], bool) or not isinstance(obj[f], int):
                    raise UsageError(f"spec field '{f}' must be an integer")
                kw[f] = obj[f]
    except TypeError:
        raise UsageError("spec field 'noise_levels' must be a list of integers") from None
    if "out" in obj:
        kw["out"] = str(obj["out"])
    for f, cls in (("hp", HyperParams), ("gen", GenParams)):
        if f in obj:
            sub = obj[f]
            if not isinstance(sub, dict):
                raise UsageError(f"spec field '{f}' must be an object")
            if f == "hp" and sub.get("zoom_schedule") is not None:
                sub = dict(sub, zoom_schedule=tuple(sub["zoom_schedule"]))
            if f == "gen" and "theta_star" in sub:
                sub = dict(sub, theta_star=tuple(sub["theta_star"]))
            try:
                kw[f] = cls(**sub)
            except TypeError as exc:
                raise UsageError(f"spec field '{f}': {exc}") from None
            except ValueError as exc:
                raise UsageError(f"spec field '{f}': {exc}") from None
    try:
        return ExperimentSpec(**kw)
    except ValueError as exc:
        raise UsageError(f"spec: {exc}") from None


def cmd_eval(args) -> int:
    if not args.spec:
        raise UsageError("eval needs --spec")
    spec = parse_spec(_load_file_cfg(args.spec))
    if args.trials is not None:
        spec = replace(spec, trials=args.trials)
    if args.out is not None:
        spec = replace(spec, out=args.out)
    resolved = recorded(spec.to_dict())
    h = config_hash(resolved)
    try:
        rows, _ = run_noise_sweep(replace(spec, out=None),
                                  progress=lambda n, t, e: log.info("level %d trial %d: %.6g", n, t, e))
    except TrialError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    text = rows_to_csv(rows)
    if spec.out:
        out = Path(spec.out)
        out.write_text(text)
        out.with_suffix(".meta.json").write_text(_dump({"config": resolved, "config_hash": h}))
    sys.stdout.write(text)
    return EXIT_OK


# ---------------------------------------------------------------------------
# gradcheck


def cmd_gradcheck(args) -> int:
    cfg = _resolve(args, GRADCHECK_OPTS, _load_file_cfg(args.config), "gradcheck")
    if cfg["data"] is None:
        raise UsageError("gradcheck needs --data")
    if cfg["samples"] < 1:
        raise UsageError("--samples must be positive")
    configs = load_corpus(cfg["data"])
    if not configs:
        raise UsageError(f"corpus {cfg['data']} is empty")
    worst, checked, skipped, notes = 0.0, 0, 0, []
    for k in range(cfg["samples"]):
        c = configs[k % len(configs)]
        r = gradcheck(c, 1, seed=[cfg["seed"], k], s=cfg["s"], radius=cfg["radius"])
        worst = max(worst, r.max_rel_error)
        checked += r.n_checked
        skipped += r.n_skipped
        notes += [f"{c.id}: {n}" for n in r.notes]
    ok = checked > 0 and worst < 1e-4
    lines = [
        f"config_hash = {config_hash(cfg)}",
        f"samples = {cfg['samples']}",
        f"checked = {checked}",
        f"skipped = {skipped}",
        f"max_rel_error = {worst!r}",
        f"result = {'pass' if ok else 'FAIL'}",
    ] + [f"note = {n}" for n in notes]
    text = "\n".join(lines) + "\n"
    if cfg["report"]:
        Path(cfg["report"]).write_text(text)
    sys.stdout.write(text)
    return EXIT_OK if ok else EXIT_NUMERIC


# ---------------------------------------------------------------------------


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="sdm", description="Estimate a global XY translation from binary masks.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("-v", "--verbose", action="count", default=0)
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    g = sub.add_parser("generate", help="write a synthetic corpus")
    g.add_argument("--config", help="JSON run-config")
    g.add_argument("--count", type=int)
    g.add_argument("--seed", type=int)
    g.add_argument("--out")
    g.add_argument("--min-objects", dest="min_objects", type=int)
    g.add_argument("--max-objects", dest="max_objects", type=int)
    g.add_argument("--z-lo", dest="z_lo", type=float)
    g.add_argument("--z-hi", dest="z_hi", type=float)
    g.add_argument("--tau", type=float)
    g.add_argument("--sigma", type=float)
    g.add_argument("--theta", type=float, nargs=2, metavar=("A", "B"))
    g.set_defaults(func=cmd_generate)

    t = sub.add_parser("train", help="estimate theta on a corpus")
    t.add_argument("--config", help="JSON run-config")
    t.add_argument("--data")
    t.add_argument("--epochs", type=int)
    t.add_argument("--lr", type=float)
    t.add_argument("--batch", type=int)
    t.add_argument("--s", type=int)
    t.add_argument("--zoom-schedule", dest="zoom_schedule", type=lambda v: [int(x) for x in v.split(",")],
                   help="comma-separated zoom levels, e.g. 4,3,2,1,0")
    t.add_argument("--noise", type=int)
    t.add_argument("--seed", type=int)
    t.add_argument("--limit", type=int, help="use only the first N configurations")
    t.add_argument("--report")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="noise sweep from a JSON experiment spec")
    e.add_argument("--spec")
    e.add_argument("--trials", type=int)
    e.add_argument("--out")
    e.set_defaults(func=cmd_eval)

    c = sub.add_parser("gradcheck", help="analytic vs finite-difference gradients")
    c.add_argument("--config", help="JSON run-config")
    c.add_argument("--data")
    c.add_argument("--samples", type=int)
    c.add_argument("--seed", type=int)
    c.add_argument("--s", type=int)
    c.add_argument("--radius", type=float)
    c.add_argument("--report")
    c.set_defaults(func=cmd_gradcheck)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            parser.print_help(sys.stderr)
            return EXIT_USAGE
        logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2), format="%(levelname)s %(message)s")
        return args.func(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, GenerationError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (NumericalError, FloatingPointError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
