"""Command line front end.

Every subcommand reads a flat ``key=value`` config file (optional), applies
flag overrides, runs, and writes CSV or JSON to ``--out`` (stdout by default)
with the resolved config echoed into the output.  Exit codes: 0 success,
1 invariant failure (JSON diagnostic on stderr), 2 usage error.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import math
import sys
from dataclasses import asdict, dataclass, fields, replace
from functools import partial
from pathlib import Path

import numpy as np

from .errors import InvalidArgument, InvariantViolation

SCHEMA_VERSION = 1
LEMMAS = ("low", "high", "omega", "bilinear")


@dataclass(frozen=True)
class RunConfig:
    R: int = 4096
    ratio: int = 16
    spacingFraction: float = 0.5
    packetWidth: float = 8.0
    kappaCell: float = 4.0
    delta: float | None = None
    tailTol: float | None = None
    m: int | None = None
    pruneQuantile: float | None = 0.5
    supWindow: float = 1.0
    gridMode: str = "auto"
    seed: int = 0
    seeds: int = 1
    workers: int = 1
    out: str | None = None

    def to_dict(self) -> dict:
        """Everything that can change results; ``workers`` and ``out`` cannot."""
        out = asdict(self)
        for key in _EXECUTION_ONLY:
            out.pop(key)
        return out


_EXECUTION_ONLY = ("workers", "out")


_FIELD_TYPES = {f.name: f.type for f in fields(RunConfig)}


def _coerce(key: str, text: str):
    kind = _FIELD_TYPES[key]
    if text.lower() in ("none", "null", ""):
        if "None" not in kind:
            raise InvalidArgument(f"config key {key} cannot be empty")
        return None
    try:
        if kind.startswith("int"):
            return int(text)
        if kind.startswith("float"):
            return float(text)
    except ValueError:
        raise InvalidArgument(f"config key {key}: cannot parse {text!r}") from None
    return text


def read_config(path: str | Path) -> dict:
    """Parse ``key=value`` lines; ``#`` starts a comment."""
    out = {}
    for n, raw in enumerate(Path(path).read_text().splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise InvalidArgument(f"{path}:{n}: expected key=value")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in _FIELD_TYPES:
            raise InvalidArgument(f"{path}:{n}: unknown config key {key!r}")
        out[key] = _coerce(key, value)
    return out


def resolve_config(args: argparse.Namespace) -> RunConfig:
    cfg = RunConfig()
    if getattr(args, "config", None):
        cfg = replace(cfg, **read_config(args.config))
    overrides = {k: v for k, v in vars(args).items() if k in _FIELD_TYPES and v is not None}
    return replace(cfg, **overrides)


# ---------------------------------------------------------------------------
# Output


def _json_default(obj):
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.floating,)):
        return float(obj)
    if isinstance(obj, np.bool_):
        return bool(obj)
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    raise TypeError(f"cannot serialize {type(obj).__name__}")


def _clean(obj):
    """Stringify dict keys and replace non-finite floats so the JSON is strict."""
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, (float, np.floating)) and not math.isfinite(obj):
        return str(float(obj))
    return obj


def dumps(report: dict) -> str:
    return json.dumps(_clean(report), sort_keys=True, indent=1, default=_json_default) + "\n"


def _cell(v) -> str:
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def csv_text(rows: list[dict], columns: list[str], cfg: RunConfig, command: str) -> str:
    buf = io.StringIO()
    buf.write(f"# schemaVersion={SCHEMA_VERSION}\n# command={command}\n")
    for k, v in cfg.to_dict().items():
        buf.write(f"# {k}={v}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for row in rows:
        w.writerow([_cell(row[c]) for c in columns])
    return buf.getvalue()


def json_text(payload: dict, cfg: RunConfig, command: str) -> str:
    return dumps({"schemaVersion": SCHEMA_VERSION, "command": command,
                  "config": cfg.to_dict(), **payload})


def emit(text: str, cfg: RunConfig) -> None:
    if cfg.out:
        Path(cfg.out).write_text(text)
    else:
        sys.stdout.write(text)


# ---------------------------------------------------------------------------
# Subcommands


def cmd_caps(cfg: RunConfig) -> str:
    from .caps import CurveSpec, ScaleLadder, build_caps

    ladder = ScaleLadder(cfg.R, cfg.ratio)
    rows = []
    for k, scale in enumerate(ladder.scales, 1):
        for cap in build_caps(CurveSpec.parabola(), scale):
            rows.append({"k": k, "scale": scale, "index": cap.index, "center": cap.center,
                         "lo": cap.lo, "hi": cap.hi, "slope": cap.slope,
                         "thickness": cap.thickness})
    cols = ["k", "scale", "index", "center", "lo", "hi", "slope", "thickness"]
    return csv_text(rows, cols, cfg, "caps")


def _stack_config(cfg: RunConfig):
    from .highlow import StackConfig

    return StackConfig(width=cfg.packetWidth, sup_window=cfg.supWindow, m=cfg.m,
                       prune_quantile=cfg.pruneQuantile)


def cmd_packets(cfg: RunConfig) -> str:
    from .highlow import run_ladder, standard_instance

    inst = standard_instance(cfg.R, cfg.ratio, cfg.seed, width=cfg.packetWidth,
                             spacing_fraction=cfg.spacingFraction)
    run = run_ladder(inst.f, inst.tree, inst.shape, _stack_config(cfg))
    rows = run.ladder.packet_rows()
    return csv_text(rows, ["scale", "cap", "t1", "t2", "amplitude", "kept"], cfg, "packets")


def lemma_job(seed: int, cfg: RunConfig) -> dict:
    from .highlow import lemma_run

    return lemma_run(cfg.R, cfg.ratio, seed, _stack_config(cfg), delta=cfg.delta,
                     tail_tol=cfg.tailTol, kappa=cfg.kappaCell,
                     spacing_fraction=cfg.spacingFraction)


def _lemma_section(lemma: str, rep: dict) -> dict:
    stack = rep["stack"]
    base = {"seed": rep["seed"], "r": stack["r"], "grid": stack["grid"]}
    if lemma == "low":
        eta = {str(k): v for k, v in stack["etaL1Grid"].items()}
        phi = {str(k): v for k, v in stack["phiL1"].items()}
        scales = {str(k): {"violation": v, "etaL1": eta.get(str(k)), "phiL1": phi.get(str(k))}
                  for k, v in rep["low"]["violation"].items()}
        return {**base, "scales": scales, "max": rep["low"]["max"], "passed": rep["low"]["passed"]}
    if lemma == "high":
        return {**base, "scales": rep["high"]["scales"], "passed": rep["high"]["passed"]}
    return {**base, "omega": rep["omega"], "domination": rep["domination"],
            "passed": rep["domination"]["passed"] and rep["omega"]["LChain"]}


def verify_reports(cfg: RunConfig, lemma: str) -> dict:
    """Per-seed reports for one lemma, merged in seed order."""
    from .parallel import ordered_map

    seeds = [cfg.seed + i for i in range(cfg.seeds)]
    if lemma == "bilinear":
        runs = ordered_map(partial(bilinear_job, cfg=cfg), seeds, cfg.workers)
    else:
        reps = ordered_map(partial(lemma_job, cfg=cfg), seeds, cfg.workers)
        runs = [_lemma_section(lemma, rep) for rep in reps]
    return {"lemma": lemma, "runs": runs, "passed": all(r["passed"] for r in runs)}


def bilinear_job(seed: int, cfg: RunConfig) -> dict:
    from .highlow import bilinear_run

    out = bilinear_run(cfg.R, cfg.ratio, seed).to_dict()
    out["seed"] = seed
    return out


def cmd_estimate(cfg: RunConfig, p: int, iters: int, restarts: int) -> str:
    from .decouple import extremizer_search

    res = extremizer_search(cfg.R, p, iterations=iters, seed=cfg.seed, restarts=restarts,
                            workers=cfg.workers, mode=cfg.gridMode)
    return json_text({"result": res.to_dict()}, cfg, "estimate-d6")


def cmd_classify(cfg: RunConfig, R1: float | None, exponent: float, grid: int) -> str:
    from .caps import ScaleLadder
    from .decouple import classify_broad_narrow
    from .field import random_field

    R1 = ScaleLadder(cfg.R, cfg.ratio).scale(1) if R1 is None else R1
    f = random_field(cfg.R, np.random.default_rng(cfg.seed))
    lab = classify_broad_narrow(f, R1, shape=(grid, grid), broad_exponent=exponent)
    cols = ["x1", "x2", "label", "alphaLevel", "columnOk", "arc", "certified"]
    return csv_text(lab.rows(cfg.R), cols, cfg, "classify")


def cmd_k6(cfg: RunConfig, N: int, family: str, iters: int) -> str:
    from .torus import k6_lower_bound

    res = k6_lower_bound(N, family, seed=cfg.seed, iters=iters, workers=cfg.workers)
    return json_text({"result": res.to_dict(), "heuristicFamily": family != "flat"}, cfg, "k6")


_CIRCLE_COLS = ["m", "N", "N_m", "ratio", "exponent"]


def _circle_row(c) -> dict:
    return {"m": c.m, "N": c.size, "N_m": c.count, "ratio": c.ratio, "exponent": c.exponent}


def cmd_sextuples(cfg: RunConfig, m: int) -> str:
    from .circle import count_sextuples, lambda_m

    return csv_text([_circle_row(count_sextuples(lambda_m(m)))], _CIRCLE_COLS, cfg, "sextuples")


def cmd_scan(cfg: RunConfig, m_max: int, min_size: int) -> str:
    from .circle import correlation_scan

    rows = correlation_scan(m_max, min_size, workers=cfg.workers)
    for row in rows:
        if row.count < row.size ** 3:
            raise InvariantViolation("N_m below |Lambda|^3", {"m": row.m})
    return csv_text([_circle_row(r) for r in rows], _CIRCLE_COLS, cfg, "sextuples-scan")


# ---------------------------------------------------------------------------
# Parser


def _common(p: argparse.ArgumentParser, ladder: bool = True) -> None:
    p.add_argument("--config", help="key=value config file")
    p.add_argument("--out", help="output path (default stdout)")
    p.add_argument("--seed", type=int)
    p.add_argument("--workers", type=int)
    if ladder:
        p.add_argument("--R", type=int)
        p.add_argument("--ratio", type=int)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="decoupling-lab")
    sub = parser.add_subparsers(dest="command", required=True)

    _common(sub.add_parser("caps", help="cap tilings at every ladder scale"))

    p = sub.add_parser("packets", help="pruned wave packets of a random well-spaced field")
    _common(p)
    p.add_argument("--packet-width", dest="packetWidth", type=float)
    p.add_argument("--prune-quantile", dest="pruneQuantile", type=float)

    p = sub.add_parser("verify", help="numerical lemma checks")
    _common(p)
    p.add_argument("--lemma", choices=LEMMAS, required=True)
    p.add_argument("--seeds", type=int)
    p.add_argument("--packet-width", dest="packetWidth", type=float)
    p.add_argument("--prune-quantile", dest="pruneQuantile", type=float)
    p.add_argument("--kappa-cell", dest="kappaCell", type=float)
    p.add_argument("--delta", type=float)
    p.add_argument("--tail-tol", dest="tailTol", type=float)
    p.add_argument("--m", type=int)
    p.add_argument("--spacing-fraction", dest="spacingFraction", type=float)

    p = sub.add_parser("estimate-d6", help="extremizer search for the decoupling ratio")
    _common(p, ladder=False)
    p.add_argument("--R", type=int)
    p.add_argument("--p", type=int, default=6)
    p.add_argument("--iters", type=int, default=20)
    p.add_argument("--restarts", type=int, default=1)
    p.add_argument("--mode", dest="gridMode", choices=("exact", "fast", "auto"))

    p = sub.add_parser("classify", help="broad/narrow labels of a random field")
    _common(p)
    p.add_argument("--R1", type=float)
    p.add_argument("--broad-exponent", type=float, default=8.0)
    p.add_argument("--grid", type=int, default=256)

    p = sub.add_parser("k6", help="discrete restriction lower-bound probe")
    _common(p, ladder=False)
    p.add_argument("--N", type=int, required=True)
    p.add_argument("--family", choices=("flat", "randomPhase", "ascent"), default="flat")
    p.add_argument("--iters", type=int, default=10)

    p = sub.add_parser("sextuples", help="sextuple count on one circle")
    _common(p, ladder=False)
    p.add_argument("--m", type=int, required=True, dest="circle_m")

    p = sub.add_parser("sextuples-scan", help="sextuple counts over a range of circles")
    _common(p, ladder=False)
    p.add_argument("--m-max", type=int, required=True)
    p.add_argument("--min-size", type=int, default=8)
    return parser


def _diagnostic(kind: str, message: str, details: dict | None = None) -> None:
    sys.stderr.write(dumps({"schemaVersion": SCHEMA_VERSION, "error": kind,
                            "message": message, "details": details or {}}))


def run(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = resolve_config(args)
        cmd = args.command
        if cmd == "caps":
            text = cmd_caps(cfg)
        elif cmd == "packets":
            text = cmd_packets(cfg)
        elif cmd == "verify":
            report = verify_reports(cfg, args.lemma)
            emit(json_text(report, cfg, "verify"), cfg)
            if not report["passed"]:
                raise InvariantViolation(f"{args.lemma} check failed",
                                         {"seeds": [r["seed"] for r in report["runs"]
                                                    if not r["passed"]]})
            return 0
        elif cmd == "estimate-d6":
            text = cmd_estimate(cfg, args.p, args.iters, args.restarts)
        elif cmd == "classify":
            text = cmd_classify(cfg, args.R1, args.broad_exponent, args.grid)
        elif cmd == "k6":
            text = cmd_k6(cfg, args.N, args.family, args.iters)
        elif cmd == "sextuples":
            text = cmd_sextuples(cfg, args.circle_m)
        else:
            text = cmd_scan(cfg, args.m_max, args.min_size)
        emit(text, cfg)
        return 0
    except InvalidArgument as exc:
        _diagnostic("invalid-argument", str(exc))
        return 2
    except InvariantViolation as exc:
        _diagnostic("invariant-violation", str(exc), exc.details)
        return 1


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
