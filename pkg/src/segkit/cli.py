"""
Command line entry point.

``segkit run <config>``, ``segkit validate <config>`` and
``segkit synth <spec> --out <dir>``. Exit status is 0 on success, 2 for an
invalid config or generator spec, 3 when an analysis stage fails and 1 for
anything else; failures print a JSON error report on stderr.
"""
from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from . import pipeline
from .exceptions import AnalysisFailed, ConfigInvalid, InvalidSpec, SegkitError
from .synthgen import DgpSpec, calibrate_to_paper, generate, write_synth

EXIT_OK, EXIT_ERROR, EXIT_CONFIG, EXIT_STAGE = 0, 1, 2, 3


def _parser():
    p = argparse.ArgumentParser(prog="segkit", description=__doc__.strip().splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)
    r = sub.add_parser("run", help="run every analysis in a config file")
    r.add_argument("config")
    r.add_argument("--deterministic", action="store_true",
                   help="omit timestamps so reruns are byte-identical")
    r.add_argument("--seed", type=int, help="override the config seed")
    r.add_argument("--out", help="output directory")
    v = sub.add_parser("validate", help="check a config without running it")
    v.add_argument("config")
    s = sub.add_parser("synth", help="write a synthetic dataset")
    s.add_argument("spec", help="TOML or JSON generator spec")
    s.add_argument("--out", required=True)
    s.add_argument("--seed", type=int)
    return p


def _report(doc, stream=None):
    (stream or sys.stderr).write(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def load_synth_spec(path, seed=None) -> DgpSpec:
    """Generator spec from a file.

    A file with ``preset = "calibrated"`` takes the keyword arguments of
    :func:`calibrate_to_paper`; any other file lists every
    :class:`DgpSpec` field.
    """
    path = Path(path)
    try:
        if path.suffix == ".json":
            raw = json.loads(path.read_text(encoding="utf-8"))
        else:
            raw = pipeline._load_toml(path)
    except (OSError, ValueError) as exc:
        raise InvalidSpec(f"{path}: {exc}") from exc
    if seed is not None:
        raw["seed"] = seed
    if raw.get("preset") == "calibrated":
        kw = {k: v for k, v in raw.items() if k != "preset"}
        try:
            return calibrate_to_paper(**kw)
        except TypeError as exc:
            raise InvalidSpec(str(exc)) from exc
    return DgpSpec.from_dict(raw)


def cmd_run(args):
    cfg = pipeline.load_config(args.config, seed=args.seed)
    rep = pipeline.run(cfg, out_dir=args.out, deterministic=args.deterministic)
    print(rep.out_dir)
    return EXIT_OK


def cmd_validate(args):
    _report(pipeline.validate(args.config), sys.stdout)
    return EXIT_OK


def cmd_synth(args):
    spec = load_synth_spec(args.spec, args.seed)
    frame, panel, truth = generate(spec)
    print(write_synth(args.out, frame, panel, truth, spec))
    return EXIT_OK


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    handler = {"run": cmd_run, "validate": cmd_validate, "synth": cmd_synth}[args.command]
    try:
        return handler(args)
    except ConfigInvalid as exc:
        _report({"status": "error", "error": "ConfigInvalid", "message": str(exc),
                 "problems": exc.problems})
        return EXIT_CONFIG
    except InvalidSpec as exc:
        _report({"status": "error", "error": "InvalidSpec", "message": str(exc)})
        return EXIT_CONFIG
    except AnalysisFailed as exc:
        _report({"status": "error", "error": "AnalysisFailed", "stage": exc.stage,
                 "message": str(exc)})
        return EXIT_STAGE
    except (SegkitError, OSError) as exc:
        _report({"status": "error", "error": type(exc).__name__, "message": str(exc)})
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
