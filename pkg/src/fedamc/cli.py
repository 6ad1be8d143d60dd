"""Command-line front end: ``fedamc <subcommand> ...``."""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import os
import shutil
import sys
import typing
from pathlib import Path
from typing import Sequence

import numpy as np

from . import experiments as ex
from . import selfcheck
from .datastore import generate_dataset, read_dataset, write_dataset
from .errors import ConfigurationError, FedAMCError
from .signal import NO_IMPAIRMENTS, SNR_GRID, ImpairmentSpec

SEED_ENV = "FV_SEED"

# Short symbol names accepted in config files alongside the field names.
ALIASES = {
    "T": "global_epochs",
    "t": "local_epochs",
    "b": "batch_size",
    "eta": "lr",
    "η": "lr",
    "theta_db": "theta",
    "θ": "theta",
    "vartheta": "queue",
    "ϑ": "queue",
    "C": "clusters",
    "K": "repeats",
    "algo": "algorithm",
}

_FIELDS = {f.name: f for f in dataclasses.fields(ex.RunConfig)}
_HINTS = typing.get_type_hints(ex.RunConfig)


class ConfigError(ConfigurationError):
    """A config problem tied to one key and the line that set it."""

    def __init__(self, message: str, key: str | None = None, line: str | None = None):
        where = " ".join(p for p in (f"at {line}" if line else "", f"key '{key}'" if key else "") if p)
        super().__init__(f"{where}: {message}" if where else message)
        self.key = key
        self.line = line


def _convert(key: str, text: str):
    hint = _HINTS[key]
    text = text.strip()
    origin = typing.get_origin(hint)
    if origin is tuple:
        parts = [p for p in text.replace(" ", "").split(",") if p]
        if not parts:
            raise ValueError("expected a comma-separated list")
        return tuple(int(p) for p in parts)
    if hint is bool:
        low = text.lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"expected a boolean, got {text!r}")
    if hint is int:
        if text.lower() in ("none", "chain") and key == "clusters":
            return 0
        return int(text)
    if hint is float:
        return float(text)
    return text


def _assign(values: dict, origin: dict, raw: str, where: str) -> None:
    if "=" not in raw:
        raise ConfigError("expected key=value", line=where)
    key, value = (s.strip() for s in raw.split("=", 1))
    name = ALIASES.get(key, key)
    if name not in _FIELDS:
        raise ConfigError("unknown key", key, where)
    try:
        values[name] = _convert(name, value)
    except ValueError as exc:
        raise ConfigError(f"cannot parse {value!r}: {exc}", key, where) from None
    origin[name] = where


def parse_config(path: str | Path | None = None, overrides: Sequence[str] = (), env: dict | None = None) -> ex.RunConfig:
    """Read ``key=value`` lines (``#`` starts a comment) on top of the defaults.

    Precedence, lowest first: defaults, file, ``FV_SEED``, overrides.
    """
    env = os.environ if env is None else env
    values: dict = {}
    origin: dict = {}
    if path is not None:
        p = Path(path)
        if not p.is_file():
            raise ConfigError(f"config file {p} not found")
        for n, line in enumerate(p.read_text(encoding="utf-8").splitlines(), start=1):
            line = line.split("#", 1)[0].strip()
            if line:
                _assign(values, origin, line, f"{p.name}:{n}")
    if env.get(SEED_ENV, "").strip():
        _assign(values, origin, f"seed={env[SEED_ENV]}", f"${SEED_ENV}")
    for i, raw in enumerate(overrides, start=1):
        _assign(values, origin, raw, f"override {i} ({raw})")
    try:
        return ex.RunConfig(**values)
    except ConfigurationError as exc:
        msg = str(exc)
        named = [k for k in origin if k in msg]
        key = max(named, key=lambda k: list(origin).index(k)) if named else None
        raise ConfigError(msg, key, origin.get(key) if key else None) from None


# -- output handling ----------------------------------------------------------------


class OutputDir:
    """Files are staged in a hidden sibling and moved into place only on success."""

    def __init__(self, root: Path, header: str, config: ex.RunConfig):
        self.resolved = header + config.resolved()
        self.name = hashlib.sha256(self.resolved.encode()).hexdigest()[:12]
        self.final = root / self.name
        self.stage = root / f".{self.name}.partial"

    def __enter__(self) -> Path:
        if self.stage.exists():
            shutil.rmtree(self.stage)
        self.stage.mkdir(parents=True)
        (self.stage / "config.resolved").write_text(self.resolved, encoding="utf-8", newline="\n")
        return self.stage

    def __exit__(self, exc_type, exc, tb):
        if exc_type is not None:
            shutil.rmtree(self.stage, ignore_errors=True)
            return False
        if self.final.exists():
            shutil.rmtree(self.final)
        os.replace(self.stage, self.final)
        return False


def _header(args) -> str:
    # only flags that change results; output location and verbosity do not
    parts = [args.command]
    if args.command == "ablate":
        parts.append(f"--kind {args.kind}")
    if args.command == "pca":
        parts.append(f"--k {args.k}")
    return "# fedamc " + " ".join(parts) + "\n"


def _progress(quiet: bool):
    if quiet:
        return None

    def show(m):
        print(f"round {m.round:3d} {m.algorithm:10s} acc={m.accuracy:.4f} loss={m.loss:.4f} "
              f"({m.seconds:.1f}s)", file=sys.stderr, flush=True)

    return show


# -- subcommands ----------------------------------------------------------------------------


def cmd_gen_data(args) -> Path:
    if args.snr_min not in SNR_GRID or args.snr_max not in SNR_GRID or args.snr_min > args.snr_max:
        raise ConfigurationError("snr-min and snr-max must be grid values with snr-min <= snr-max")
    schemes = tuple(int(s) for s in args.schemes.split(","))
    snrs = tuple(range(args.snr_min, args.snr_max + 1, 2))
    seed = int(os.environ.get(SEED_ENV) or args.seed)
    impair = NO_IMPAIRMENTS if args.no_impairments else ImpairmentSpec()
    ds = generate_dataset(schemes, snrs, args.frames_per_cell, seed, impair=impair)
    out = Path(args.out)
    tmp = out.with_name(out.name + ".partial")
    try:
        write_dataset(ds, tmp)
        os.replace(tmp, out)
    finally:
        tmp.unlink(missing_ok=True)
    print(f"wrote {len(ds)} frames to {out}")
    return out


def _run_with_output(args, config: ex.RunConfig, header: str, body) -> Path:
    out = OutputDir(Path(args.out_root), header, config)
    with out as stage:
        summary = body(stage)
        summary["config"] = dataclasses.asdict(config)
        summary["run_id"] = config.run_id()
        ex.write_summary(summary, stage / "summary.json")
    print(out.final)
    return out.final


def cmd_sweep(args, config: ex.RunConfig, header: str) -> Path:
    def body(stage: Path) -> dict:
        def show(row):
            if not args.quiet:
                print(f"theta {row.theta:3d} repeat {row.repeat} max test acc {row.max_test_accuracy:.4f}",
                      file=sys.stderr, flush=True)

        res = ex.run_theta_sweep(config, progress=show)
        ex.write_metrics_csv(res.records, stage / "metrics.csv")
        return {
            "command": "sweep-theta",
            "best_theta": res.best_theta,
            "peak_accuracy": res.mean_accuracy(res.best_theta),
            "seeds": [config.seed + k for k in range(config.repeats)],
            "table": res.table(),
        }

    return _run_with_output(args, config, header, body)


def cmd_run_fl(args, config: ex.RunConfig, header: str) -> Path:
    def body(stage: Path) -> dict:
        pool, test = ex.make_pools(config)
        curve = ex.run_algorithm(config, config.algorithm, pool, test, on_round=_progress(args.quiet))
        ex.write_metrics_csv(curve.records(config), stage / "metrics.csv")
        last = curve.metrics[-1]
        summary = {
            "command": "run-fl",
            "algorithm": curve.algorithm,
            "scenario": curve.scenario,
            "seeds": [config.seed],
            "max_accuracy": curve.max_accuracy,
            "best_round": curve.best_round,
            "final_accuracy": last.accuracy,
            "min_loss": curve.min_loss,
        }
        if last.client_accuracy:
            summary["final_client_accuracy"] = list(last.client_accuracy)
        return summary

    return _run_with_output(args, config, header, body)


def cmd_ablate(args, config: ex.RunConfig, header: str) -> Path:
    kind = ex.AblationKind.parse(args.kind)

    def body(stage: Path) -> dict:
        rows = ex.run_ablation(kind, config, on_round=_progress(args.quiet))
        records = [r for row in rows for r in row.curve.records(config)]
        ex.write_metrics_csv(records, stage / "metrics.csv")
        return {
            "command": "ablate",
            "ablation": kind.value,
            "seeds": [config.seed],
            "rows": [{"setting": r.setting, "max_accuracy": r.max_accuracy, "min_loss": r.min_loss,
                      "loss_at_best": r.loss_at_best, "memory": r.memory} for r in rows],
        }

    return _run_with_output(args, config, header, body)


def cmd_pca(args, config: ex.RunConfig, header: str) -> Path:
    source = Path(args.input)
    digest = hashlib.sha256(source.read_bytes()).hexdigest()
    header += f"# input sha256 {digest}\n"

    def body(stage: Path) -> dict:
        ds = read_dataset(source)
        res = ex.pca_project(ds, args.k)
        cols = ["index", "label", "snr_db"] + [f"pc{i + 1}" for i in range(res.projections.shape[1])]
        lines = [",".join(cols)]
        for i in range(len(ds)):
            vals = [f"{v:.6f}" for v in res.projections[i]]
            lines.append(",".join([str(i), str(int(ds.labels[i])), str(int(ds.snr_db[i]))] + vals))
        (stage / "projections.csv").write_text("\n".join(lines) + "\n", encoding="utf-8", newline="")
        np.save(stage / "components.npy", res.components)
        return {
            "command": "pca",
            "input": str(source),
            "input_sha256": digest,
            "k": args.k,
            "components_found": int(len(res.components)),
            "explained_variance": res.explained_variance.tolist(),
            "explained_ratio": res.explained_ratio.tolist(),
        }

    return _run_with_output(args, config, header, body)


def cmd_verify(args) -> int:
    results = selfcheck.run_all(args.checks)
    for r in results:
        print(f"{'PASS' if r.passed else 'FAIL'} {r.name} ({r.seconds:.1f}s): {r.detail}")
    return 0 if all(r.passed for r in results) else 1


# -- entry point ----------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fedamc", description="Federated modulation classification experiments.")
    sub = parser.add_subparsers(dest="command", required=True)

    def with_config(p):
        p.add_argument("--config", help="key=value config file")
        p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                       help="override one config key (repeatable)")
        p.add_argument("--out-root", default="out", help="parent of the per-config output directory")
        p.add_argument("--quiet", action="store_true", help="no progress on stderr")
        return p

    g = sub.add_parser("gen-data", help="synthesize a dataset file")
    g.add_argument("--schemes", default="0,1,2,3,4,5,6,7", help="comma-separated modulation ordinals")
    g.add_argument("--snr-min", type=int, default=-20)
    g.add_argument("--snr-max", type=int, default=18)
    g.add_argument("--frames-per-cell", type=int, default=60)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--no-impairments", action="store_true")
    g.add_argument("--out", required=True)

    s = with_config(sub.add_parser("sweep-theta", help="centralized SNR-threshold sweep"))
    s.add_argument("--repeats", type=int)

    r = with_config(sub.add_parser("run-fl", help="one federated run"))
    r.add_argument("--algo", choices=[k.value for k in ex.fl.AlgorithmKind])
    r.add_argument("--scenario", choices=["iid", "class-imb", "vol-imb", "feat-var"])

    a = with_config(sub.add_parser("ablate", help="cluster, queue or SNR-band ablation"))
    a.add_argument("--kind", required=True, choices=[k.value for k in ex.AblationKind])

    p = with_config(sub.add_parser("pca", help="principal-component projection of a dataset file"))
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--k", type=int, default=3)

    v = sub.add_parser("verify", help="run the oracle self-checks")
    v.add_argument("--checks", nargs="*", choices=list(selfcheck.CHECKS), help="subset of checks")
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    args = build_parser().parse_args(argv)
    try:
        if args.command == "gen-data":
            cmd_gen_data(args)
            return 0
        if args.command == "verify":
            return cmd_verify(args)
        overrides = list(args.overrides)
        if getattr(args, "algo", None):
            overrides.append(f"algorithm={args.algo}")
        if getattr(args, "repeats", None) is not None:
            overrides.append(f"repeats={args.repeats}")
        if getattr(args, "scenario", None):
            overrides.append(f"scenario={args.scenario}")
        config = parse_config(args.config, overrides)
        header = _header(args)
        {"sweep-theta": cmd_sweep, "run-fl": cmd_run_fl, "ablate": cmd_ablate, "pca": cmd_pca}[args.command](
            args, config, header
        )
        return 0
    except ConfigurationError as exc:
        print(f"error: {type(exc).__name__}: {exc}".replace("\n", " "), file=sys.stderr)
        return 2
    except (FedAMCError, OSError, ValueError, ArithmeticError) as exc:
        print(f"error: {type(exc).__name__}: {exc}".replace("\n", " "), file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
