"""Command-line runner: ``rydflux run`` and ``rydflux list``.

A run is described by one JSON document

    {"scenario": "three_atom_chiral", "seed": 0, "out": "out", "jobs": 1,
     "params": {"flux": 1.5707963267948966}}

and flags on top of it.  ``--override key=value`` takes dotted paths
(``params.flux=0.5``); a bare parameter name is read as ``params.<name>``.
Values are parsed as JSON when possible, otherwise kept as strings.
"""

from __future__ import annotations

import argparse
import json
import math
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .errors import ConfigurationError, ConvergenceError
from .scenarios import SCENARIOS, get, run_scenario

TOP_KEYS = ("scenario", "seed", "out", "jobs", "params")
EXIT_CONFIG = 2
EXIT_CONVERGENCE = 3


def list_scenarios():
    """Catalog: name, reproduced figure, description and parameter docs."""
    out = []
    for sc in SCENARIOS.values():
        out.append({"name": sc.name, "figure": sc.figure, "doc": sc.doc,
                    "params": {k: {"default": p.default, "unit": p.unit, "doc": p.doc}
                               for k, p in sc.params.items()}})
    return out


def _value(text):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_override(doc, item):
    if "=" not in item:
        raise ConfigurationError(f"override '{item}' is not of the form key=value")
    key, text = item.split("=", 1)
    path = key.strip().split(".")
    if not path[0] or any(not p for p in path):
        raise ConfigurationError(f"override '{item}' has an empty key")
    if path[0] not in TOP_KEYS:
        path = ["params"] + path
    if path[0] == "params":
        if len(path) != 2:
            raise ConfigurationError(f"unknown key '{key}'")
        doc.setdefault("params", {})[path[1]] = _value(text)
    else:
        if len(path) != 1:
            raise ConfigurationError(f"unknown key '{key}'")
        doc[path[0]] = _value(text)
    return doc


def load_config(path):
    try:
        with open(path, encoding="utf-8") as fh:
            doc = json.load(fh)
    except OSError as exc:
        raise ConfigurationError(f"cannot read config {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigurationError(f"config {path} is not valid JSON: {exc}") from exc
    if not isinstance(doc, dict):
        raise ConfigurationError("config must be a JSON object")
    return doc


def resolve_spec(args):
    """Merge config file, flags and overrides into a checked run description."""
    doc = load_config(args.config) if args.config else {}
    for k in doc:
        if k not in TOP_KEYS:
            raise ConfigurationError(f"unknown key '{k}' in config")
    for k in ("scenario", "seed", "out", "jobs"):
        v = getattr(args, k)
        if v is not None:
            doc[k] = v
    for item in args.override or []:
        apply_override(doc, item)
    if "scenario" not in doc:
        raise ConfigurationError(f"no scenario given; valid names: {', '.join(SCENARIOS)}")
    if not isinstance(doc["scenario"], str):
        raise ConfigurationError("key 'scenario' must be a string")
    sc = get(doc["scenario"])
    seed, jobs = doc.get("seed", 0), doc.get("jobs", 1)
    if isinstance(seed, bool) or not isinstance(seed, int) or seed < 0:
        raise ConfigurationError("key 'seed' must be a non-negative integer")
    if isinstance(jobs, bool) or not isinstance(jobs, int) or jobs < 1:
        raise ConfigurationError("key 'jobs' must be a positive integer")
    out = doc.get("out", "out")
    if not isinstance(out, str):
        raise ConfigurationError("key 'out' must be a path string")
    params = doc.get("params", {})
    if not isinstance(params, dict):
        raise ConfigurationError("key 'params' must be an object")
    resolved = sc.resolve(params)
    return {"scenario": sc.name, "seed": seed, "jobs": jobs, "out": out, "params": resolved}


def _clean(x):
    if isinstance(x, dict):
        return {str(k): _clean(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_clean(v) for v in x]
    if isinstance(x, (np.integer,)):
        return int(x)
    if isinstance(x, (float, np.floating)):
        x = float(x)
        return x if math.isfinite(x) else str(x)
    if isinstance(x, np.bool_):
        return bool(x)
    return x


def run(spec):
    """Run a resolved spec and write the manifest; returns the manifest."""
    out = Path(spec["out"])
    sc = get(spec["scenario"])
    started = time.time()
    resolved, summary, runtime = run_scenario(spec["scenario"], spec["params"], spec["seed"], out, spec["jobs"])
    files = sorted(p.name for p in out.iterdir() if p.suffix == ".csv" and p.stat().st_mtime >= started - 1)
    manifest = {"package": "rydflux", "version": __version__, "scenario": sc.name, "figure": sc.figure,
                "seed": spec["seed"], "jobs": spec["jobs"], "params": resolved,
                "units": {k: p.unit for k, p in sc.params.items()}, "runtimes": {"total_s": runtime},
                "outputs": files, "summary": summary}
    with open(out / "manifest.json", "w", encoding="utf-8") as fh:
        json.dump(_clean(manifest), fh, indent=1, ensure_ascii=False)
        fh.write("\n")
    return manifest


def _print_catalog(as_json):
    cat = list_scenarios()
    if as_json:
        print(json.dumps(_clean(cat), indent=1, ensure_ascii=False))
        return
    for sc in cat:
        print(f"{sc['name']}: {sc['doc']}")
        print(f"  reproduces: {sc['figure']}")
        for k, p in sc["params"].items():
            print(f"  {k} = {json.dumps(_clean(p['default']))} [{p['unit']}]  {p['doc']}")
        print()


def build_parser():
    ap = argparse.ArgumentParser(prog="rydflux", description="Multicolor Rydberg-dressing scenario runner.")
    ap.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = ap.add_subparsers(dest="command", required=True)
    r = sub.add_parser("run", help="run one scenario")
    r.add_argument("--config", help="JSON run description")
    r.add_argument("--scenario", help="scenario name")
    r.add_argument("--seed", type=int, help="random seed")
    r.add_argument("--out", help="output directory")
    r.add_argument("--jobs", type=int, help="worker processes for trajectory fan-out")
    r.add_argument("--override", action="append", metavar="KEY=VALUE", help="dotted-path override, repeatable")
    ls = sub.add_parser("list", help="list scenarios and their parameters")
    ls.add_argument("--json", action="store_true", help="machine-readable catalog")
    return ap


def main(argv=None):
    args = build_parser().parse_args(argv)
    if args.command == "list":
        _print_catalog(args.json)
        return 0
    try:
        spec = resolve_spec(args)
        m = run(spec)
    except ConvergenceError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONVERGENCE
    except ConfigurationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    print(f"{m['scenario']}: wrote {len(m['outputs'])} tables to {spec['out']} "
          f"in {m['runtimes']['total_s']:.1f} s")
    return 0


if __name__ == "__main__":
    sys.exit(main())
